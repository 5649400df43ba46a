//! Expert bilinear attention (EBA) and the stacked bilinear encoder.
//!
//! For queries `q`, keys `k` and values `v`:
//!
//! ```text
//! B_k   = relu(k W_k) ⊙ relu(q W_qk)          pairwise over (query, key)
//! B_v   = relu(v W_v) ⊙ relu(q W_qv)
//! B_mid = relu(B_k W_bk)
//! α_s   = softmax_keys(B_mid w_s)              spatial attention
//! β_c   = sigmoid(mean_keys(B_mid) W_c)        channel attention
//! out   = β_c ⊙ Σ_keys α_s B_v
//! ```
//!
//! `B_v` factors as a per-key term times a per-query term, so the key sum is
//! taken as `relu(q W_qv) ⊙ (α_s · relu(v W_v))` without materializing it.
//! Masked keys are excluded from both the softmax and the channel mean.

use super::encoder::layer_norm;
use super::params::Bound;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Mask, Scalar, Tensor, Var};

/// The seven projection matrices of one EBA block.
#[derive(Clone, Copy)]
pub struct EbaParams<'g, T: Scalar = f32> {
    pub w_k: Var<'g, T>,
    pub w_v: Var<'g, T>,
    pub w_qk: Var<'g, T>,
    pub w_qv: Var<'g, T>,
    pub w_bk: Var<'g, T>,
    pub w_s: Var<'g, T>,
    pub w_c: Var<'g, T>,
}

impl<'g, T: Scalar> EbaParams<'g, T> {
    pub fn bind(p: &Bound<'g, T>, prefix: &str) -> Result<Self> {
        let get = |n: &str| p.get(&format!("{prefix}.{n}"));
        Ok(Self {
            w_k: get("w_k")?,
            w_v: get("w_v")?,
            w_qk: get("w_qk")?,
            w_qv: get("w_qv")?,
            w_bk: get("w_bk")?,
            w_s: get("w_s")?,
            w_c: get("w_c")?,
        })
    }
}

/// EBA result with its attention factors exposed.
#[derive(Clone, Copy)]
pub struct EbaOutput<'g, T: Scalar = f32> {
    /// `[B, T_q, D_B]`
    pub out: Var<'g, T>,
    /// Spatial attention `[B, T_q, T_k]`.
    pub alpha: Var<'g, T>,
    /// Channel attention `[B, T_q, D_B]`.
    pub beta: Var<'g, T>,
}

/// Averaging weights over allowed keys, shaped `[1, T_q, 1, T_k]`.
fn key_mean_weights<T: Scalar>(t_q: usize, t_k: usize, mask: Option<&Mask>) -> Result<Tensor<T>> {
    let mut w = vec![T::zero(); t_q * t_k];
    for q in 0..t_q {
        let allowed: Vec<usize> = (0..t_k)
            .filter(|&k| mask.is_none_or(|m| m.is_allowed(q, k)))
            .collect();
        if allowed.is_empty() {
            return Err(Error::FullyMasked { row: q });
        }
        let share = T::one() / T::from_f64(allowed.len() as f64);
        for k in allowed {
            w[q * t_k + k] = share;
        }
    }
    Tensor::new(&[1, t_q, 1, t_k], w)
}

/// Expert bilinear attention.
///
/// `query` is `[B, T_q, D]`, `key` and `value` are `[B', T_k, D]` where the
/// batch extents broadcast. `mask`, when given, is `[T_q, T_k]`.
pub fn eba<'g, T: Scalar>(
    query: Var<'g, T>,
    key: Var<'g, T>,
    value: Var<'g, T>,
    p: &EbaParams<'g, T>,
    mask: Option<&Mask>,
) -> Result<EbaOutput<'g, T>> {
    let (qs, ks, vs) = (query.shape(), key.shape(), value.shape());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || ks[1] != vs[1] {
        return Err(Error::Shape(format!(
            "eba expects query [B,Tq,D], key/value [B,Tk,D]; got {qs:?}, {ks:?}, {vs:?}"
        )));
    }
    let (t_q, t_k) = (qs[1], ks[1]);
    if let Some(m) = mask {
        if m.queries != t_q || m.keys != t_k {
            return Err(Error::Shape(format!(
                "mask [{}, {}] does not match [{t_q}, {t_k}]",
                m.queries, m.keys
            )));
        }
    }
    let g = query.graph();
    let db = p.w_k.shape()[1];

    let key_proj = key.matmul(p.w_k)?.relu()?;
    let value_proj = value.matmul(p.w_v)?.relu()?;
    let query_k = query.matmul(p.w_qk)?.relu()?;
    let query_v = query.matmul(p.w_qv)?.relu()?;

    let b_k = query_k
        .reshape(&[qs[0], t_q, 1, db])?
        .mul(key_proj.reshape(&[ks[0], 1, t_k, db])?)?;
    let b_mid = b_k.matmul(p.w_bk)?.relu()?;
    let batch = b_mid.shape()[0];
    let logits = b_mid.matmul(p.w_s)?.reshape(&[batch, t_q, t_k])?;
    let alpha = logits.masked_softmax(mask)?;

    let weights = g.constant(key_mean_weights(t_q, t_k, mask)?);
    let d_mid = p.w_bk.shape()[1];
    let b_mid_mean = weights.matmul(b_mid)?.reshape(&[batch, t_q, d_mid])?;
    let beta = b_mid_mean.matmul(p.w_c)?.sigmoid()?;

    let context = alpha.matmul(value_proj)?;
    let out = beta.mul(query_v)?.mul(context)?;
    Ok(EbaOutput { out, alpha, beta })
}

/// Output of the bilinear encoder: expert rows `f_e [M, D_B]` and visual rows `f_v [N, D_B]`.
#[derive(Clone, Copy)]
pub struct BilinearEncoded<'g, T: Scalar = f32> {
    pub experts: Var<'g, T>,
    pub visual: Var<'g, T>,
}

/// One bilinear encoder layer.
///
/// The expert path is a bare EBA of experts over visual tokens. The visual
/// path pools the previous expert rows, broadcasts the pooled row to every
/// visual token, concatenates features, projects and applies Add & Norm.
pub fn bilinear_encoder_layer<'g, T: Scalar>(
    experts: Var<'g, T>,
    visual: Var<'g, T>,
    p: &Bound<'g, T>,
    prefix: &str,
) -> Result<BilinearEncoded<'g, T>> {
    let (m, db) = (experts.shape()[0], experts.shape()[1]);
    let n = visual.shape()[0];
    let eba_p = EbaParams::bind(p, &format!("{prefix}.eba"))?;
    let vis3 = visual.reshape(&[1, n, db])?;
    let new_experts = eba(experts.reshape(&[1, m, db])?, vis3, vis3, &eba_p, None)?
        .out
        .reshape(&[m, db])?;
    let pooled = experts.mean_axis(0)?.broadcast_to(&[n, db])?;
    let fused = Var::concat_last(&[pooled, visual])?
        .matmul(p.get(&format!("{prefix}.fuse"))?)?
        .add(visual)?;
    let new_visual = layer_norm(fused, p, &format!("{prefix}.ln"))?;
    Ok(BilinearEncoded {
        experts: new_experts,
        visual: new_visual,
    })
}

pub fn bilinear_encoder_forward<'g, T: Scalar>(
    experts: Var<'g, T>,
    visual: Var<'g, T>,
    p: &Bound<'g, T>,
    layers: usize,
) -> Result<BilinearEncoded<'g, T>> {
    if layers == 0 {
        return Err(Error::Invalid("bilinear encoder needs at least one layer".into()));
    }
    let mut state = BilinearEncoded { experts, visual };
    for n in 0..layers {
        state = bilinear_encoder_layer(state.experts, state.visual, p, &format!("benc.layer{n}"))?;
    }
    Ok(state)
}

/// Plain-loop EBA used as an independent check of [`eba`]. Materializes `B_k`
/// and `B_v` exactly as written in the block definition.
pub fn eba_reference<T: Scalar>(
    query: &Tensor<T>,
    key: &Tensor<T>,
    value: &Tensor<T>,
    w: [&Tensor<T>; 7],
    mask: Option<&Mask>,
) -> Tensor<T> {
    let [w_k, w_v, w_qk, w_qv, w_bk, w_s, w_c] = w;
    let (bq, t_q, dq) = (query.shape()[0], query.shape()[1], query.shape()[2]);
    let (bk, t_k, dk) = (key.shape()[0], key.shape()[1], key.shape()[2]);
    let dv = value.shape()[2];
    let db = w_k.shape()[1];
    let dm = w_bk.shape()[1];
    let batch = bq.max(bk);
    let relu = |x: T| x.max(T::zero());
    let proj = |x: &Tensor<T>, b: usize, t: usize, din: usize, w: &Tensor<T>, j: usize| {
        let mut acc = T::zero();
        for i in 0..din {
            acc += x.get(&[b, t, i]) * w.get(&[i, j]);
        }
        relu(acc)
    };
    let mut out = Tensor::zeros(&[batch, t_q, db]);
    for b in 0..batch {
        let (b_q, b_kv) = (if bq == 1 { 0 } else { b }, if bk == 1 { 0 } else { b });
        for q in 0..t_q {
            let allowed: Vec<usize> = (0..t_k)
                .filter(|&k| mask.is_none_or(|m| m.is_allowed(q, k)))
                .collect();
            // Steps 1-2: pairwise bilinear pooling.
            let mut b_key = vec![vec![T::zero(); db]; t_k];
            let mut b_val = vec![vec![T::zero(); db]; t_k];
            for k in 0..t_k {
                for j in 0..db {
                    b_key[k][j] = proj(key, b_kv, k, dk, w_k, j) * proj(query, b_q, q, dq, w_qk, j);
                    b_val[k][j] = proj(value, b_kv, k, dv, w_v, j) * proj(query, b_q, q, dq, w_qv, j);
                }
            }
            // Step 3: spatial attention.
            let mut b_mid = vec![vec![T::zero(); dm]; t_k];
            let mut logit = vec![T::neg_infinity(); t_k];
            for &k in &allowed {
                for c in 0..dm {
                    let mut acc = T::zero();
                    for j in 0..db {
                        acc += b_key[k][j] * w_bk.get(&[j, c]);
                    }
                    b_mid[k][c] = relu(acc);
                }
                let mut s = T::zero();
                for c in 0..dm {
                    s += b_mid[k][c] * w_s.get(&[c, 0]);
                }
                logit[k] = s;
            }
            let max = allowed.iter().map(|&k| logit[k]).fold(T::neg_infinity(), T::max);
            let denom: T = allowed.iter().map(|&k| (logit[k] - max).exp()).sum();
            // Step 4: channel attention from the key-averaged B_mid.
            let mut mean = vec![T::zero(); dm];
            for &k in &allowed {
                for c in 0..dm {
                    mean[c] += b_mid[k][c];
                }
            }
            for c in 0..dm {
                mean[c] /= T::from_f64(allowed.len() as f64);
            }
            // Step 5: gated, attention-weighted sum of B_v.
            for j in 0..db {
                let mut z = T::zero();
                for c in 0..dm {
                    z += mean[c] * w_c.get(&[c, j]);
                }
                let beta = T::one() / (T::one() + (-z).exp());
                let mut acc = T::zero();
                for &k in &allowed {
                    acc += (logit[k] - max).exp() / denom * b_val[k][j];
                }
                out.set(&[b, q, j], beta * acc);
            }
        }
    }
    out
}

/// Runs [`eba`] on plain tensors without recording gradients.
pub fn eba_eval<T: Scalar>(
    query: &Tensor<T>,
    key: &Tensor<T>,
    value: &Tensor<T>,
    w: [&Tensor<T>; 7],
    mask: Option<&Mask>,
) -> Result<Tensor<T>> {
    let g = Graph::new();
    let c = |t: &Tensor<T>| g.constant(t.clone());
    let p = EbaParams {
        w_k: c(w[0]),
        w_v: c(w[1]),
        w_qk: c(w[2]),
        w_qv: c(w[3]),
        w_bk: c(w[4]),
        w_s: c(w[5]),
        w_c: c(w[6]),
    };
    Ok(eba(c(query), c(key), c(value), &p, mask)?.out.to_tensor())
}
