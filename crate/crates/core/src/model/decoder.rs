//! Expert-conditioned report decoder.
//!
//! Every expert `m` runs its own copy of the word stream. Per layer:
//!
//! ```text
//! E^_r  = adjust(f_e[m], E_r)
//! E_mid = LN(EBA_mask(E^_r, E_r, E_r) + E_r)
//! f^_v  = adjust(f_e[m], f_v)
//! E_c   = LN(EBA_cross(E_mid, f^_v, f^_v) + E_mid)
//! E_r   = LN([E_r ; E_c] W_d + E_r)
//! ```
//!
//! The last layer's `E_c` feeds the output projection.

use super::bilinear::{eba, EbaParams};
use super::config::ModelConfig;
use super::encoder::layer_norm;
use super::params::{Bound, ModelParams};
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Mask, Scalar, Tensor, Var};

/// `relu(f_e W_e)` broadcast over rows, times `relu(x W_v)`.
///
/// `f_e` is `[M, D]` and `x` is `[T', D]` (shared) or `[M, T', D]` (per expert);
/// the result is `[M, T', D]`.
pub fn adjust<'g, T: Scalar>(
    f_e: Var<'g, T>,
    x: Var<'g, T>,
    w_e: Var<'g, T>,
    w_v: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let (m, d) = (f_e.shape()[0], w_e.shape()[1]);
    let gate = f_e.matmul(w_e)?.relu()?.reshape(&[m, 1, d])?;
    let mut xs = x.matmul(w_v)?.relu()?;
    if xs.shape().len() == 2 {
        let t = xs.shape()[0];
        xs = xs.reshape(&[1, t, d])?;
    }
    gate.mul(xs)
}

fn adjust_named<'g, T: Scalar>(
    f_e: Var<'g, T>,
    x: Var<'g, T>,
    p: &Bound<'g, T>,
    prefix: &str,
) -> Result<Var<'g, T>> {
    adjust(
        f_e,
        x,
        p.get(&format!("{prefix}.w_e"))?,
        p.get(&format!("{prefix}.w_v"))?,
    )
}

/// Token inputs for the decoder.
pub enum Tokens<'a> {
    /// One sequence fed to every expert.
    Shared(&'a [usize]),
    /// One sequence per expert, all of equal length.
    PerExpert(&'a [Vec<usize>]),
}

impl Tokens<'_> {
    fn len(&self) -> usize {
        match self {
            Tokens::Shared(ids) => ids.len(),
            Tokens::PerExpert(rows) => rows.first().map_or(0, Vec::len),
        }
    }
}

fn embed_tokens<'g, T: Scalar>(
    p: &Bound<'g, T>,
    tokens: &Tokens<'_>,
    m: usize,
    t_max: usize,
) -> Result<Var<'g, T>> {
    let t = tokens.len();
    if t == 0 {
        return Err(Error::Invalid("decoder input is empty".into()));
    }
    if t > t_max {
        return Err(Error::Invalid(format!("decoder input of {t} tokens exceeds t_max {t_max}")));
    }
    let word = p.get("dec.word_emb")?;
    let d = word.shape()[1];
    let pos = p.get("dec.pos_emb")?.narrow(0, 0, t)?;
    let emb = match tokens {
        Tokens::Shared(ids) => word.embedding(ids)?.add(pos)?.broadcast_to(&[m, t, d])?,
        Tokens::PerExpert(rows) => {
            if rows.len() != m || rows.iter().any(|r| r.len() != t) {
                return Err(Error::Shape(format!(
                    "expected {m} token rows of length {t}"
                )));
            }
            let flat: Vec<usize> = rows.iter().flatten().copied().collect();
            word.embedding(&flat)?
                .reshape(&[m, t, d])?
                .add(pos)?
        }
    };
    Ok(emb)
}

/// Teacher-forced decoder pass: logits `[M, T, V]`.
pub fn decoder_forward<'g, T: Scalar>(
    f_e: Var<'g, T>,
    f_v: Var<'g, T>,
    tokens: Tokens<'_>,
    p: &Bound<'g, T>,
    cfg: &ModelConfig,
) -> Result<Var<'g, T>> {
    let m = f_e.shape()[0];
    let t = tokens.len();
    let mut e_r = embed_tokens(p, &tokens, m, cfg.t_max)?;
    let mask = Mask::causal(t);
    let mut e_c = e_r;
    for i in 0..cfg.dec_layers {
        let pre = format!("dec.layer{i}");
        let e_hat = adjust_named(f_e, e_r, p, &format!("{pre}.adjust_word"))?;
        let mask_p = EbaParams::bind(p, &format!("{pre}.mask_eba"))?;
        let mid = eba(e_hat, e_r, e_r, &mask_p, Some(&mask))?.out.add(e_r)?;
        let mid = layer_norm(mid, p, &format!("{pre}.ln_mid"))?;
        let f_v_hat = adjust_named(f_e, f_v, p, &format!("{pre}.adjust_vis"))?;
        let cross_p = EbaParams::bind(p, &format!("{pre}.cross_eba"))?;
        let cross = eba(mid, f_v_hat, f_v_hat, &cross_p, None)?.out.add(mid)?;
        e_c = layer_norm(cross, p, &format!("{pre}.ln_cross"))?;
        let fused = Var::concat_last(&[e_r, e_c])?
            .matmul(p.get(&format!("{pre}.fuse"))?)?
            .add(e_r)?;
        e_r = layer_norm(fused, p, &format!("{pre}.ln_out"))?;
    }
    e_c.matmul(p.get("dec.out.weight")?)?
        .add(p.get("dec.out.bias")?)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Incremental decoder state: each layer's input rows for every decoded
/// position, so a new position only attends over cached keys.
struct Cache<T: Scalar> {
    /// `layers[i]` holds `[M, t, D]` inputs of layer `i` (layer 0 = embeddings).
    layers: Vec<Option<Tensor<T>>>,
}

fn append_rows<T: Scalar>(cached: &Option<Tensor<T>>, row: &Tensor<T>) -> Result<Tensor<T>> {
    let Some(c) = cached else {
        return Ok(row.clone());
    };
    let (m, t, d) = (c.shape()[0], c.shape()[1], c.shape()[2]);
    let mut data = Vec::with_capacity((t + 1) * m * d);
    for e in 0..m {
        data.extend_from_slice(&c.data()[e * t * d..(e + 1) * t * d]);
        data.extend_from_slice(&row.data()[e * d..(e + 1) * d]);
    }
    Tensor::new(&[m, t + 1, d], data)
}

/// Logits `[M, V]` for the next position given one new token per expert.
fn step_logits<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    f_e: &Tensor<T>,
    f_v: &Tensor<T>,
    cache: &mut Cache<T>,
    new_tokens: &[usize],
) -> Result<Tensor<T>> {
    let g = Graph::new();
    let p = params.bind(&g, false);
    let m = f_e.shape()[0];
    let t = cache.layers[0].as_ref().map_or(0, |c| c.shape()[1]);
    if t >= cfg.t_max {
        return Err(Error::Invalid(format!("cannot decode past t_max {}", cfg.t_max)));
    }
    let word = p.get("dec.word_emb")?;
    let d = word.shape()[1];
    let pos = p.get("dec.pos_emb")?.narrow(0, t, 1)?;
    let fe = g.constant(f_e.clone());
    let fv = g.constant(f_v.clone());
    let mut row = word.embedding(new_tokens)?.add(pos)?.reshape(&[m, 1, d])?;
    let mut e_c = row;
    for i in 0..cfg.dec_layers {
        let pre = format!("dec.layer{i}");
        let keys = append_rows(&cache.layers[i], &row.to_tensor())?;
        cache.layers[i] = Some(keys.clone());
        let keys = g.constant(keys);
        let e_hat = adjust_named(fe, row, &p, &format!("{pre}.adjust_word"))?;
        let mask_p = EbaParams::bind(&p, &format!("{pre}.mask_eba"))?;
        let mid = eba(e_hat, keys, keys, &mask_p, None)?.out.add(row)?;
        let mid = layer_norm(mid, &p, &format!("{pre}.ln_mid"))?;
        let f_v_hat = adjust_named(fe, fv, &p, &format!("{pre}.adjust_vis"))?;
        let cross_p = EbaParams::bind(&p, &format!("{pre}.cross_eba"))?;
        let cross = eba(mid, f_v_hat, f_v_hat, &cross_p, None)?.out.add(mid)?;
        e_c = layer_norm(cross, &p, &format!("{pre}.ln_cross"))?;
        let fused = Var::concat_last(&[row, e_c])?
            .matmul(p.get(&format!("{pre}.fuse"))?)?
            .add(row)?;
        row = layer_norm(fused, &p, &format!("{pre}.ln_out"))?;
    }
    let logits = e_c
        .matmul(p.get("dec.out.weight")?)?
        .add(p.get("dec.out.bias")?)?;
    Ok(logits.reshape(&[m, cfg.vocab_size])?.to_tensor())
}

/// How the experts choose each next token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoding {
    /// Each expert takes its own argmax.
    PerExpert,
    /// All experts share the argmax of their averaged word probabilities.
    Averaged,
}

/// Greedy decoding from `BOS` for all experts in lockstep.
///
/// Returns one id sequence per expert (without `BOS`, ending at the first
/// `EOS` inclusive or after `t_max - 1` tokens).
pub fn generate_greedy<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    f_e: &Tensor<T>,
    f_v: &Tensor<T>,
    mode: Decoding,
) -> Result<Vec<Vec<usize>>> {
    let m = f_e.shape()[0];
    let mut cache = Cache {
        layers: vec![None; cfg.dec_layers],
    };
    let mut outputs = vec![Vec::new(); m];
    let mut done = vec![false; m];
    let mut current = vec![BOS; m];
    for _ in 1..cfg.t_max {
        let logits = step_logits(params, cfg, f_e, f_v, &mut cache, &current)?;
        let v = cfg.vocab_size;
        let next: Vec<usize> = match mode {
            Decoding::PerExpert => (0..m).map(|e| argmax(&logits.data()[e * v..(e + 1) * v])).collect(),
            Decoding::Averaged => {
                let mut avg = vec![T::zero(); v];
                for e in 0..m {
                    let row = &logits.data()[e * v..(e + 1) * v];
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let z: T = row.iter().map(|&x| (x - max).exp()).sum();
                    for (a, &x) in avg.iter_mut().zip(row) {
                        *a += (x - max).exp() / z;
                    }
                }
                vec![argmax(&avg); m]
            }
        };
        for e in 0..m {
            if !done[e] {
                outputs[e].push(next[e]);
                done[e] = next[e] == EOS;
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
        current = next;
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjust_hand_case() {
        let g = Graph::<f64>::new();
        let c = |s: &[usize], v: &[f64]| g.constant(Tensor::new(s, v.to_vec()).unwrap());
        let out = adjust(c(&[1, 1], &[1.0]), c(&[1, 1], &[2.0]), c(&[1, 1], &[1.0]), c(&[1, 1], &[1.0]))
            .unwrap();
        assert_eq!(out.shape(), vec![1, 1, 1]);
        assert_eq!(out.value().data(), &[2.0]);
    }

    #[test]
    fn adjust_zero_gate_annihilates() {
        let g = Graph::<f64>::new();
        let f_e = g.constant(Tensor::full(&[2, 3], 0.7));
        let x = g.constant(Tensor::full(&[4, 3], -0.3));
        let out = adjust(f_e, x, g.constant(Tensor::zeros(&[3, 3])), g.constant(Tensor::full(&[3, 3], -1.0)))
            .unwrap();
        assert_eq!(out.shape(), vec![2, 4, 3]);
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32; 5]), 0);
    }

    #[test]
    fn too_long_input_is_an_error() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::<f64>::init(&cfg, 0).unwrap();
        let g = Graph::new();
        let p = params.bind(&g, false);
        let f_e = g.constant(Tensor::zeros(&[cfg.num_expert, cfg.bilinear_dim]));
        let f_v = g.constant(Tensor::zeros(&[cfg.num_patches(), cfg.bilinear_dim]));
        let ids = vec![BOS; cfg.t_max + 1];
        assert!(decoder_forward(f_e, f_v, Tokens::Shared(&ids), &p, &cfg).is_err());
    }
}
