//! Finite-difference check of every layer type and of the whole tiny model.
//!
//! Runs in `f64`: the network code is generic over the scalar type, and a
//! central difference with step `1e-4` has roughly `1e-4` relative rounding
//! noise in `f32`, which would swamp the tolerance being tested.

use std::fmt::Write as _;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::bilinear::bilinear_encoder_layer;
use crate::model::encoder::{layer_norm, mlp, multi_head_attention};
use crate::model::{
    adjust, decoder_forward, eba, encode, param_shapes, vit_forward, Bound, EbaParams, ModelConfig, Tokens,
};
use crate::numeric::{relative_error, Graph, Mask, Tensor, Var};
use crate::objectives::{ce_loss, orthogonal_loss, total_loss};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-2;
/// Coordinates probed per tensor; smaller tensors are checked in full.
pub const MAX_PROBES: usize = 16;
pub const MAX_EXTENT: usize = 8;

/// Worst relative error seen for one input of one layer, over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub layer: String,
    pub input: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seeds: usize,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    /// Worst error per layer.
    pub fn by_layer(&self) -> IndexMap<String, f64> {
        let mut out = IndexMap::new();
        for e in &self.entries {
            let v = out.entry(e.layer.clone()).or_insert(0.0f64);
            *v = v.max(e.max_rel_err);
        }
        out
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= TOLERANCE
    }

    /// Parameter names checked through the whole-model case.
    pub fn model_inputs(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.layer == "model")
            .map(|e| e.input.as_str())
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<24}{:>14}  status\n", "layer", "max rel err");
        for (layer, err) in self.by_layer() {
            let status = if err <= TOLERANCE { "ok" } else { "FAIL" };
            let _ = writeln!(s, "{layer:<24}{err:>14.3e}  {status}");
        }
        let _ = writeln!(
            s,
            "{} seeds, step {STEP:e}, tolerance {TOLERANCE:e}: {}",
            self.seeds,
            if self.passed() { "pass" } else { "FAIL" }
        );
        s
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// Reduce a layer output to a scalar with a fixed random weighting, so no
/// gradient is trivially constant.
fn weighted_sum<'g>(out: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    if out.shape().is_empty() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00c0_ffee);
    let w = out.graph().constant(uniform(&mut rng, &out.shape()));
    out.mul(w)?.sum()
}

/// One named differentiable function of named inputs.
struct Case<'a> {
    layer: &'a str,
    inputs: Vec<(String, Tensor<f64>)>,
    seed: u64,
    build: &'a dyn for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>) -> Result<Var<'g, f64>>,
}

fn evaluate(case: &Case<'_>, inputs: &[(String, Tensor<f64>)]) -> Result<f64> {
    let g = Graph::new();
    let b = Bound::new(inputs.iter().map(|(n, t)| (n.clone(), g.constant(t.clone()))));
    Ok(weighted_sum((case.build)(&g, &b)?, case.seed)?.value().item())
}

fn run_case(case: &Case<'_>, worst: &mut IndexMap<(String, String), f64>) -> Result<()> {
    let g = Graph::new();
    let vars: Vec<(String, Var<'_, f64>)> = case.inputs.iter().map(|(n, t)| (n.clone(), g.leaf(t.clone()))).collect();
    let b = Bound::new(vars.iter().cloned());
    let loss = weighted_sum((case.build)(&g, &b)?, case.seed)?;
    let grads = g.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed ^ 0x0b5e_55ed);
    let mut probe = case.inputs.clone();
    for (k, (name, var)) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let n = analytic.numel();
        let coords: Vec<usize> = if n <= MAX_PROBES {
            (0..n).collect()
        } else {
            (0..MAX_PROBES).map(|_| rng.random_range(0..n)).collect()
        };
        let mut err = 0.0f64;
        for i in coords {
            let orig = probe[k].1.data()[i];
            probe[k].1.data_mut()[i] = orig + STEP;
            let up = evaluate(case, &probe)?;
            probe[k].1.data_mut()[i] = orig - STEP;
            let down = evaluate(case, &probe)?;
            probe[k].1.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            err = err.max(relative_error(analytic.data()[i], numeric));
        }
        let w = worst.entry((case.layer.to_string(), name.clone())).or_insert(0.0);
        *w = w.max(err);
    }
    Ok(())
}

fn named(rng: &mut ChaCha8Rng, specs: &[(&str, &[usize])]) -> Vec<(String, Tensor<f64>)> {
    specs.iter().map(|(n, s)| (n.to_string(), uniform(rng, s))).collect()
}

fn eba_specs(prefix: &str, d: usize, db: usize, dm: usize) -> Vec<(String, Vec<usize>)> {
    let mut v: Vec<(String, Vec<usize>)> = ["w_k", "w_v", "w_qk", "w_qv"]
        .iter()
        .map(|w| (format!("{prefix}.{w}"), vec![d, db]))
        .collect();
    v.push((format!("{prefix}.w_bk"), vec![db, dm]));
    v.push((format!("{prefix}.w_s"), vec![dm, 1]));
    v.push((format!("{prefix}.w_c"), vec![dm, db]));
    v
}

fn random_inputs(rng: &mut ChaCha8Rng, specs: &[(String, Vec<usize>)]) -> Vec<(String, Tensor<f64>)> {
    specs.iter().map(|(n, s)| (n.clone(), uniform(rng, s))).collect()
}

fn max_extent(cfg: &ModelConfig) -> usize {
    let params = param_shapes(cfg).into_iter().flat_map(|(_, s)| s).max().unwrap_or(0);
    params.max(cfg.num_patches() + cfg.num_expert).max(cfg.t_max)
}

/// Check every layer type and the full model `cfg` over `seeds` random draws.
pub fn gradcheck(cfg: &ModelConfig, seeds: usize) -> Result<GradcheckReport> {
    cfg.validate()?;
    if max_extent(cfg) > MAX_EXTENT {
        return Err(Error::Config(format!(
            "gradcheck needs every tensor extent at most {MAX_EXTENT}, config reaches {}",
            max_extent(cfg)
        )));
    }
    let mut worst = IndexMap::new();
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for case in layer_cases(&mut rng, seed)? {
            run_case(&case.as_case(), &mut worst)?;
        }
        run_case(&vit_case(cfg, &mut rng, seed).as_case(), &mut worst)?;
        run_case(&model_case(cfg, &mut rng, seed)?.as_case(), &mut worst)?;
    }
    Ok(GradcheckReport {
        seeds,
        entries: worst
            .into_iter()
            .map(|((layer, input), max_rel_err)| GradcheckEntry {
                layer,
                input,
                max_rel_err,
            })
            .collect(),
    })
}

struct OwnedCase {
    layer: &'static str,
    inputs: Vec<(String, Tensor<f64>)>,
    seed: u64,
    build: Box<dyn for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>) -> Result<Var<'g, f64>>>,
}

impl OwnedCase {
    fn as_case(&self) -> Case<'_> {
        Case {
            layer: self.layer,
            inputs: self.inputs.clone(),
            seed: self.seed,
            build: self.build.as_ref(),
        }
    }
}

fn layer_cases(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<OwnedCase>> {
    let mut cases = Vec::new();
    let mut push = |layer: &'static str,
                    inputs: Vec<(String, Tensor<f64>)>,
                    build: Box<dyn for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>) -> Result<Var<'g, f64>>>| {
        cases.push(OwnedCase {
            layer,
            inputs,
            seed,
            build,
        })
    };

    let mut msa = named(rng, &[("x", &[5, 8])]);
    for w in ["wq", "wk", "wv", "wo"] {
        msa.push((format!("attn.{w}"), uniform(rng, &[8, 8])));
    }
    for bias in ["bq", "bk", "bv", "bo"] {
        msa.push((format!("attn.{bias}"), uniform(rng, &[8])));
    }
    push(
        "msa",
        msa,
        Box::new(|_, b| Ok(multi_head_attention(b.get("x")?, b, "attn", 2)?.0)),
    );

    push(
        "mlp",
        named(
            rng,
            &[("x", &[4, 2]), ("mlp.w1", &[2, 8]), ("mlp.b1", &[8]), ("mlp.w2", &[8, 2]), ("mlp.b2", &[2])],
        ),
        Box::new(|_, b| mlp(b.get("x")?, b, "mlp")),
    );

    push(
        "layer_norm",
        named(rng, &[("x", &[4, 8]), ("ln.gain", &[8]), ("ln.bias", &[8])]),
        Box::new(|_, b| layer_norm(b.get("x")?, b, "ln")),
    );

    let mut e = named(rng, &[("query", &[2, 3, 4]), ("key", &[2, 5, 4]), ("value", &[2, 5, 4])]);
    e.extend(random_inputs(rng, &eba_specs("eba", 4, 4, 3)));
    push(
        "eba",
        e,
        Box::new(|_, b| {
            let p = EbaParams::bind(b, "eba")?;
            Ok(eba(b.get("query")?, b.get("key")?, b.get("value")?, &p, None)?.out)
        }),
    );

    let mut e = named(rng, &[("query", &[2, 4, 4]), ("key", &[2, 4, 4]), ("value", &[2, 4, 4])]);
    e.extend(random_inputs(rng, &eba_specs("eba", 4, 4, 3)));
    push(
        "eba_masked",
        e,
        Box::new(|_, b| {
            let p = EbaParams::bind(b, "eba")?;
            let mask = Mask::causal(4);
            Ok(eba(b.get("query")?, b.get("key")?, b.get("value")?, &p, Some(&mask))?.out)
        }),
    );

    let mut e = named(
        rng,
        &[
            ("experts", &[3, 4]),
            ("visual", &[5, 4]),
            ("benc.fuse", &[8, 4]),
            ("benc.ln.gain", &[4]),
            ("benc.ln.bias", &[4]),
        ],
    );
    e.extend(random_inputs(rng, &eba_specs("benc.eba", 4, 4, 3)));
    push(
        "bilinear_encoder",
        e,
        Box::new(|_, b| {
            let out = bilinear_encoder_layer(b.get("experts")?, b.get("visual")?, b, "benc")?;
            Var::concat(&[out.experts, out.visual], 0)
        }),
    );

    push(
        "adjust",
        named(rng, &[("f_e", &[3, 4]), ("x", &[5, 4]), ("w_e", &[4, 4]), ("w_v", &[4, 4])]),
        Box::new(|_, b| adjust(b.get("f_e")?, b.get("x")?, b.get("w_e")?, b.get("w_v")?)),
    );

    push(
        "decoder_fusion",
        named(
            rng,
            &[
                ("e_r", &[2, 3, 4]),
                ("e_c", &[2, 3, 4]),
                ("fuse", &[8, 4]),
                ("ln.gain", &[4]),
                ("ln.bias", &[4]),
            ],
        ),
        Box::new(|_, b| {
            let e_r = b.get("e_r")?;
            let fused = Var::concat_last(&[e_r, b.get("e_c")?])?.matmul(b.get("fuse")?)?.add(e_r)?;
            layer_norm(fused, b, "ln")
        }),
    );

    let targets: Vec<usize> = (0..4).map(|t| if t == 3 { 0 } else { rng.random_range(1..6) }).collect();
    push(
        "ce_loss",
        named(rng, &[("logits", &[2, 4, 6])]),
        Box::new(move |_, b| ce_loss(b.get("logits")?, &targets, true)),
    );

    push(
        "orthogonal_loss",
        named(rng, &[("z", &[3, 6])]),
        Box::new(|_, b| orthogonal_loss(b.get("z")?)),
    );
    Ok(cases)
}

fn model_case(cfg: &ModelConfig, rng: &mut ChaCha8Rng, seed: u64) -> Result<OwnedCase> {
    let inputs: Vec<(String, Tensor<f64>)> = param_shapes(cfg)
        .into_iter()
        .map(|(n, s)| {
            let t = uniform(rng, &s);
            (n, t)
        })
        .collect();
    let image = uniform(rng, &[cfg.image_size, cfg.image_size, cfg.channels]).map(|v| (v + 1.0) / 2.0);
    let len = cfg.t_max;
    let ids: Vec<usize> = (0..len).map(|_| rng.random_range(1..cfg.vocab_size)).collect();
    let cfg = cfg.clone();
    Ok(OwnedCase {
        layer: "model",
        inputs,
        seed,
        build: Box::new(move |g, b| {
            let f = encode(g, b, &image, &cfg)?;
            let logits = decoder_forward(f.experts, f.visual, Tokens::Shared(&ids[..len - 1]), b, &cfg)?;
            let ce = ce_loss(logits, &ids[1..], true)?;
            total_loss(ce, orthogonal_loss(f.experts)?, 2.0)
        }),
    })
}

fn vit_case(cfg: &ModelConfig, rng: &mut ChaCha8Rng, seed: u64) -> OwnedCase {
    let inputs: Vec<(String, Tensor<f64>)> = param_shapes(cfg)
        .into_iter()
        .filter(|(n, _)| n.starts_with("vit."))
        .map(|(n, s)| {
            let t = uniform(rng, &s);
            (n, t)
        })
        .collect();
    let image = uniform(rng, &[cfg.image_size, cfg.image_size, cfg.channels]);
    let cfg = cfg.clone();
    OwnedCase {
        layer: "vit",
        inputs,
        seed,
        build: Box::new(move |g, b| {
            let z = vit_forward(g, b, &image, &cfg)?;
            Var::concat(&[z.visual, z.experts], 0)
        }),
    }
}
