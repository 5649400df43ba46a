//! The network: ViT encoder, bilinear encoder and expert decoder.

pub mod bilinear;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod params;

pub use bilinear::{bilinear_encoder_forward, eba, eba_reference, BilinearEncoded, EbaOutput, EbaParams};
pub use config::ModelConfig;
pub use decoder::{adjust, argmax, decoder_forward, generate_greedy, Decoding, Tokens};
pub use encoder::{embed_to_bilinear, expert_attention_map, patchify, vit_forward, EncodedTokens};
pub use params::{param_shapes, Bound, ModelParams, ParamGrads};

use crate::error::Result;
use crate::numeric::{Graph, Scalar, Tensor, Var};

/// Image features handed to the decoder.
#[derive(Clone, Copy)]
pub struct Features<'g, T: Scalar = f32> {
    /// `f_e [M, D_B]`
    pub experts: Var<'g, T>,
    /// `f_v [N, D_B]`
    pub visual: Var<'g, T>,
}

/// Encoder stack up to the decoder input. Skips the bilinear encoder when
/// the config disables it.
pub fn encode<'g, T: Scalar>(
    g: &'g Graph<T>,
    p: &Bound<'g, T>,
    image: &Tensor<T>,
    cfg: &ModelConfig,
) -> Result<Features<'g, T>> {
    let z = embed_to_bilinear(vit_forward(g, p, image, cfg)?, p)?;
    if cfg.use_bilinear_encoder {
        let f = bilinear_encoder_forward(z.experts, z.visual, p, cfg.enc_layers)?;
        Ok(Features {
            experts: f.experts,
            visual: f.visual,
        })
    } else {
        Ok(Features {
            experts: z.experts,
            visual: z.visual,
        })
    }
}

/// Encoder features as plain tensors, computed without gradient tracking.
pub fn encode_eval<T: Scalar>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
    cfg: &ModelConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = Graph::new();
    let p = params.bind(&g, false);
    let f = encode(&g, &p, image, cfg)?;
    Ok((f.experts.to_tensor(), f.visual.to_tensor()))
}

/// Greedy reports for one image, one id sequence per expert.
pub fn generate<T: Scalar>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
    cfg: &ModelConfig,
    mode: Decoding,
) -> Result<Vec<Vec<usize>>> {
    let (f_e, f_v) = encode_eval(params, image, cfg)?;
    generate_greedy(params, cfg, &f_e, &f_v, mode)
}
