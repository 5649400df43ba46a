//! Multi-expert ViT encoder.
//!
//! Visual patch tokens and `M` learnable expert tokens share one sequence:
//!
//! ```text
//! z0 = [x_p^1 E; ..; x_p^N E; x_e^1; ..; x_e^M] + E_pos + E_seg
//! z^_l = MSA(LN(z_{l-1})) + z_{l-1}
//! z_l  = MLP(LN(z^_l)) + z^_l
//! ```
//!
//! Segment id 0 marks visual tokens and 1 marks expert tokens. After `L`
//! layers the sequence is split back into its visual and expert parts.

use super::config::ModelConfig;
use super::params::Bound;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Output of the encoder: visual rows `[N, D]` and expert rows `[M, D]`.
#[derive(Clone, Copy)]
pub struct EncodedTokens<'g, T: Scalar = f32> {
    pub visual: Var<'g, T>,
    pub experts: Var<'g, T>,
}

/// Split an `[H, W, C]` image into `[N, P*P*C]` flattened patches.
///
/// Patches are taken in raster order; inside a patch values are flattened
/// by (row, column, channel).
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::Shape(format!("image must be [H, W, C], got {:?}", image.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(image.numel());
    for py in 0..ph {
        for px in 0..pw {
            for y in py * patch..(py + 1) * patch {
                let start = (y * w + px * patch) * c;
                out.extend_from_slice(&image.data()[start..start + patch * c]);
            }
        }
    }
    Tensor::new(&[ph * pw, patch * patch * c], out)
}

pub(crate) fn linear<'g, T: Scalar>(
    x: Var<'g, T>,
    w: Var<'g, T>,
    b: Option<Var<'g, T>>,
) -> Result<Var<'g, T>> {
    let y = x.matmul(w)?;
    match b {
        Some(b) => y.add(b),
        None => Ok(y),
    }
}

pub(crate) fn layer_norm<'g, T: Scalar>(
    x: Var<'g, T>,
    p: &Bound<'g, T>,
    prefix: &str,
) -> Result<Var<'g, T>> {
    x.layer_norm(
        p.get(&format!("{prefix}.gain"))?,
        p.get(&format!("{prefix}.bias"))?,
        T::from_f64(LN_EPS),
    )
}

/// Multi-head scaled dot-product self-attention over `[T, D]`.
///
/// Returns the projected output and the attention probabilities `[h, T, T]`.
pub fn multi_head_attention<'g, T: Scalar>(
    x: Var<'g, T>,
    p: &Bound<'g, T>,
    prefix: &str,
    heads: usize,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let shape = x.shape();
    let (t, d) = (shape[0], shape[1]);
    if d % heads != 0 {
        return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let proj = |w: &str, b: &str| -> Result<Var<'g, T>> {
        linear(
            x,
            p.get(&format!("{prefix}.{w}"))?,
            Some(p.get(&format!("{prefix}.{b}"))?),
        )?
        .reshape(&[t, heads, dh])?
        .permute(&[1, 0, 2])
    };
    let q = proj("wq", "bq")?;
    let k = proj("wk", "bk")?;
    let v = proj("wv", "bv")?;
    let scores = q
        .matmul(k.transpose()?)?
        .scale(T::one() / T::from_f64(dh as f64).sqrt())?;
    let attn = scores.softmax()?;
    let ctx = attn.matmul(v)?.permute(&[1, 0, 2])?.reshape(&[t, d])?;
    let out = linear(
        ctx,
        p.get(&format!("{prefix}.wo"))?,
        Some(p.get(&format!("{prefix}.bo"))?),
    )?;
    Ok((out, attn))
}

pub fn mlp<'g, T: Scalar>(x: Var<'g, T>, p: &Bound<'g, T>, prefix: &str) -> Result<Var<'g, T>> {
    let h = linear(
        x,
        p.get(&format!("{prefix}.w1"))?,
        Some(p.get(&format!("{prefix}.b1"))?),
    )?
    .relu()?;
    linear(
        h,
        p.get(&format!("{prefix}.w2"))?,
        Some(p.get(&format!("{prefix}.b2"))?),
    )
}

/// Pre-norm transformer layer; returns the new sequence and its attention.
pub fn vit_layer<'g, T: Scalar>(
    z: Var<'g, T>,
    p: &Bound<'g, T>,
    prefix: &str,
    heads: usize,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let (a, attn) =
        multi_head_attention(layer_norm(z, p, &format!("{prefix}.ln1"))?, p, &format!("{prefix}.attn"), heads)?;
    let z_hat = a.add(z)?;
    let out = mlp(layer_norm(z_hat, p, &format!("{prefix}.ln2"))?, p, &format!("{prefix}.mlp"))?
        .add(z_hat)?;
    Ok((out, attn))
}

/// Encode one image; also returns each layer's attention `[h, N+M, N+M]`.
pub fn vit_forward_traced<'g, T: Scalar>(
    g: &'g Graph<T>,
    p: &Bound<'g, T>,
    image: &Tensor<T>,
    cfg: &ModelConfig,
) -> Result<(EncodedTokens<'g, T>, Vec<Var<'g, T>>)> {
    let expected = [cfg.image_size, cfg.image_size, cfg.channels];
    if image.shape() != expected {
        return Err(Error::Shape(format!(
            "image {:?} does not match config {expected:?}",
            image.shape()
        )));
    }
    let (n, m) = (cfg.num_patches(), cfg.num_expert);
    let patches = g.constant(patchify(image, cfg.patch)?);
    let visual = patches.matmul(p.get("vit.patch_proj")?)?;
    let experts = p.get("vit.expert_tokens")?;
    let tokens = Var::concat(&[visual, experts], 0)?;
    let segments: Vec<usize> = (0..n + m).map(|i| usize::from(i >= n)).collect();
    let seg = p.get("vit.seg_emb")?.embedding(&segments)?;
    let mut z = tokens.add(p.get("vit.pos_emb")?)?.add(seg)?;
    let mut maps = Vec::with_capacity(cfg.vit_layers);
    for l in 0..cfg.vit_layers {
        let (next, attn) = vit_layer(z, p, &format!("vit.layer{l}"), cfg.heads)?;
        z = next;
        maps.push(attn);
    }
    Ok((
        EncodedTokens {
            visual: z.narrow(0, 0, n)?,
            experts: z.narrow(0, n, m)?,
        },
        maps,
    ))
}

pub fn vit_forward<'g, T: Scalar>(
    g: &'g Graph<T>,
    p: &Bound<'g, T>,
    image: &Tensor<T>,
    cfg: &ModelConfig,
) -> Result<EncodedTokens<'g, T>> {
    vit_forward_traced(g, p, image, cfg).map(|(enc, _)| enc)
}

/// Shared linear projection `D -> D_B` followed by ReLU, applied to both parts.
pub fn embed_to_bilinear<'g, T: Scalar>(
    z: EncodedTokens<'g, T>,
    p: &Bound<'g, T>,
) -> Result<EncodedTokens<'g, T>> {
    let (w, b) = (p.get("embed.weight")?, p.get("embed.bias")?);
    Ok(EncodedTokens {
        visual: linear(z.visual, w, Some(b))?.relu()?,
        experts: linear(z.experts, w, Some(b))?.relu()?,
    })
}

/// `softmax(z_e · z_v^T)` over visual tokens: one `[M, N]` attention row per expert.
pub fn expert_attention_map<T: Scalar>(z_e: &Tensor<T>, z_v: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let e = g.constant(z_e.clone());
    let v = g.constant(z_v.clone());
    let logits = e.matmul(v.transpose()?)?;
    Ok(logits.softmax()?.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ModelParams;

    #[test]
    fn default_patch_grid() {
        let img = Tensor::<f32>::zeros(&[64, 64, 3]);
        let p = patchify(&img, 16).unwrap();
        assert_eq!(p.shape(), &[16, 768]);
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let data: Vec<f32> = (0..48).map(|v| v as f32).collect();
        let img = Tensor::new(&[4, 4, 3], data.clone()).unwrap();
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[1, 48]);
        assert_eq!(p.data(), data.as_slice());
    }

    #[test]
    fn non_divisible_image_rejected() {
        let img = Tensor::<f32>::zeros(&[10, 10, 3]);
        assert!(patchify(&img, 4).is_err());
    }

    #[test]
    fn output_shapes() {
        let cfg = ModelConfig {
            vit_layers: 1,
            ..ModelConfig::default()
        };
        let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let g = Graph::new();
        let b = params.bind(&g, false);
        let img = Tensor::full(&[64, 64, 3], 0.5);
        let enc = vit_forward(&g, &b, &img, &cfg).unwrap();
        assert_eq!(enc.visual.shape(), vec![16, 64]);
        assert_eq!(enc.experts.shape(), vec![7, 64]);
        let e = embed_to_bilinear(enc, &b).unwrap();
        assert_eq!(e.visual.shape(), vec![16, 64]);
        assert!(e.visual.value().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_layers_is_the_embedding_sum() {
        let cfg = ModelConfig {
            vit_layers: 0,
            ..ModelConfig::tiny()
        };
        let params = ModelParams::<f32>::init(&cfg, 3).unwrap();
        let img = Tensor::from_f32(&[4, 4, 2], &(0..32).map(|v| v as f32 / 32.0).collect::<Vec<_>>()).unwrap();
        let g = Graph::new();
        let b = params.bind(&g, false);
        let enc = vit_forward(&g, &b, &img, &cfg).unwrap();

        let patches = patchify(&img, 2).unwrap();
        let e = params.get("vit.patch_proj").unwrap();
        let pos = params.get("vit.pos_emb").unwrap();
        let seg = params.get("vit.seg_emb").unwrap();
        let d = cfg.dim;
        for i in 0..cfg.num_patches() {
            for j in 0..d {
                let mut acc = 0f32;
                for k in 0..cfg.patch_dim() {
                    acc += patches.get(&[i, k]) * e.get(&[k, j]);
                }
                let want = acc + pos.get(&[i, j]) + seg.get(&[0, j]);
                let got = enc.visual.value().get(&[i, j]);
                assert!((want - got).abs() < 1e-6, "{want} vs {got}");
            }
        }
    }

    #[test]
    fn zero_embed_weights_give_zero_output() {
        let cfg = ModelConfig::tiny();
        let mut params = ModelParams::<f32>::init(&cfg, 3).unwrap();
        let w = params.get_mut("embed.weight").unwrap();
        *w = Tensor::zeros(w.shape());
        let g = Graph::new();
        let b = params.bind(&g, false);
        let img = Tensor::full(&[4, 4, 2], 0.3);
        let enc = embed_to_bilinear(vit_forward(&g, &b, &img, &cfg).unwrap(), &b).unwrap();
        assert!(enc.experts.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_map_rows() {
        let ze = Tensor::from_f32(&[2, 2], &[1.0, 0.0, 0.0, 3.0]).unwrap();
        let zv = Tensor::from_f32(&[3, 2], &[0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let a: Tensor<f32> = expert_attention_map(&ze, &zv).unwrap();
        for &v in a.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }
}
