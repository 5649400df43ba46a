//! Data preparation and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::evaluate::evaluate_params;
use crate::data::corpus::{Color, ShapeKind};
use crate::data::{batchify, generate_corpus, render_report, split_corpus, Batch, Region, Sample, Vocab};
use crate::error::{Error, Result};
use crate::model::{decoder_forward, encode, ModelConfig, ModelParams, ParamGrads, Tokens};
use crate::numeric::{Graph, Tensor};
use crate::objectives::{ce_sum, orthogonal_loss, LossReport, OptimizerState};

/// The split corpus plus its vocabulary.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub vocab: Vocab,
}

/// Vocabulary of the report template: every shape, color and region word.
pub fn template_vocab() -> Vocab {
    let shapes = ShapeKind::ALL;
    let colors = Color::ALL;
    let filled: [Region; 4] =
        std::array::from_fn(|i| Region::Filled { shape: shapes[i], color: colors[i % colors.len()] });
    let empty = render_report(&[Region::Empty; 4]);
    let full = render_report(&filled);
    Vocab::build([empty.as_str(), full.as_str()])
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Dataset> {
    let corpus = generate_corpus(cfg.data_seed, cfg.dataset_size, &cfg.grid_spec())?;
    let (train, val, test) = split_corpus(corpus, cfg.data_seed);
    Ok(Dataset {
        train,
        val,
        test,
        vocab: template_vocab(),
    })
}

/// Gradients and loss components of one batch.
///
/// Each sample runs on its own tape; its loss is scaled so the per-sample
/// losses sum to the batch loss, and gradients are summed in sample order.
pub fn batch_gradients(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    batch: &Batch,
    lambda: f64,
    normalize_ce: bool,
) -> Result<(ParamGrads<f32>, LossReport)> {
    let b = batch.len();
    let tokens: usize = (0..b).map(|i| batch.report(i).len() - 1).sum();
    let ce_scale = if normalize_ce { 1.0 / tokens as f64 } else { 1.0 / b as f64 };
    let mut grads: Option<ParamGrads<f32>> = None;
    let (mut ce_total, mut orl_total) = (0.0, 0.0);
    for i in 0..b {
        let ids = batch.report(i);
        let g = Graph::new();
        let p = params.bind(&g, true);
        let f = encode(&g, &p, &batch.image(i), cfg)?;
        let logits = decoder_forward(f.experts, f.visual, Tokens::Shared(&ids[..ids.len() - 1]), &p, cfg)?;
        let (ce, _) = ce_sum(logits, &ids[1..])?;
        let orl = orthogonal_loss(f.experts)?;
        let loss = ce
            .scale(ce_scale as f32)?
            .add(orl.scale((lambda / b as f64) as f32)?)?;
        ce_total += ce.value().item() as f64 * ce_scale;
        orl_total += orl.value().item() as f64 / b as f64;
        let sample_grads = p.grads(&g.backward(loss)?);
        match grads.as_mut() {
            None => grads = Some(sample_grads),
            Some(acc) => {
                for (name, t) in sample_grads {
                    let a = acc.get_mut(&name).expect("same parameter set");
                    for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
                        *x += *y;
                    }
                }
            }
        }
    }
    let report = LossReport::new(ce_total, orl_total, lambda);
    if !report.total.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    Ok((grads.expect("batch is not empty"), report))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub best_val_cider: f64,
    /// Generation loss of the first batch, before any update.
    pub initial_ce: f64,
    /// Mean training generation loss per epoch.
    pub epoch_ce: Vec<f64>,
    pub val_cider: Vec<f64>,
    /// One line per optimizer step: `step ce orl total`.
    pub log: String,
}

/// Train from a seeded initialization.
///
/// With `out` set, writes `metrics.log`, `epochs.log`, `config.txt`,
/// `best.ckpt` (best validation CIDEr) and `last.ckpt`. On divergence the
/// last good parameters are saved as `last.ckpt` and an error is returned.
pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let mut run = cfg.clone();
    run.model.vocab_size = data.vocab.len();
    let model = run.model_config();
    let params = ModelParams::<f32>::init(&model, cfg.seed)?;
    train_from(&run, params, &data, out)
}

/// Train starting from `params` on a prepared dataset.
pub fn train_from(
    run: &RunConfig,
    mut params: ModelParams<f32>,
    data: &Dataset,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let model = run.model_config();
    params.check_layout(&model)?;
    if model.vocab_size != data.vocab.len() {
        return Err(Error::VocabMismatch(format!(
            "model has {} word rows, vocabulary has {} words",
            model.vocab_size,
            data.vocab.len()
        )));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), run.to_text())?;
    }
    let lambda = run.effective_lambda();
    let mut opt = OptimizerState::new(run.learning_rate);
    let mut log = String::new();
    let mut epochs_log = String::new();
    let mut epoch_ce = Vec::new();
    let mut val_cider = Vec::new();
    let mut initial_ce = None;
    let mut best: Option<(f64, ModelParams<f32>)> = None;
    let mut step = 0usize;
    let val: &[Sample] = if run.val_limit > 0 && run.val_limit < data.val.len() {
        &data.val[..run.val_limit]
    } else {
        &data.val
    };
    let checkpoint = |p: &ModelParams<f32>| Checkpoint {
        config: run.clone(),
        params: p.clone(),
    };

    for epoch in 0..run.epochs {
        let shuffle = run.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
        let batches = batchify(&data.train, run.batch_size, shuffle, &data.vocab, model.t_max)?;
        let mut ce_sum_epoch = 0.0;
        for batch in &batches {
            step += 1;
            let result = batch_gradients(&params, &model, batch, lambda, run.normalize_ce)
                .and_then(|(grads, report)| opt.step(&mut params, &grads).map(|_| report));
            let report = match result {
                Ok(r) => r,
                Err(Error::NonFinite { .. } | Error::NonFiniteGrad(_)) => {
                    if let Some(dir) = out {
                        fs::write(dir.join("metrics.log"), &log)?;
                        checkpoint(&params).save(&dir.join("last.ckpt"))?;
                    }
                    return Err(Error::Diverged { step });
                }
                Err(e) => return Err(e),
            };
            initial_ce.get_or_insert(report.ce);
            ce_sum_epoch += report.ce;
            let _ = writeln!(log, "{step} {:.6} {:.6} {:.6}", report.ce, report.orl, report.total);
        }
        let mean_ce = ce_sum_epoch / batches.len() as f64;
        epoch_ce.push(mean_ce);
        let cider = evaluate_params(&params, run, &data.vocab, val)?.scores.cider;
        val_cider.push(cider);
        let _ = writeln!(epochs_log, "{} {mean_ce:.6} {cider:.6}", epoch + 1);
        if best.as_ref().is_none_or(|(b, _)| cider > *b) {
            best = Some((cider, params.clone()));
            if let Some(dir) = out {
                checkpoint(&params).save(&dir.join("best.ckpt"))?;
            }
        }
    }
    let (best_val_cider, best_params) = best.unwrap_or_else(|| (f64::NAN, params.clone()));
    if let Some(dir) = out {
        fs::write(dir.join("metrics.log"), &log)?;
        fs::write(dir.join("epochs.log"), &epochs_log)?;
        checkpoint(&params).save(&dir.join("last.ckpt"))?;
        if run.epochs == 0 {
            checkpoint(&params).save(&dir.join("best.ckpt"))?;
        }
    }
    Ok(TrainOutcome {
        last: checkpoint(&params),
        best: checkpoint(&best_params),
        best_val_cider,
        initial_ce: initial_ce.unwrap_or(f64::NAN),
        epoch_ce,
        val_cider,
        log,
    })
}

/// Mean pairwise cosine between the rows of `[M, D]`; 0 for a single row.
pub fn mean_pairwise_cosine(z: &Tensor<f32>) -> f64 {
    let (m, d) = (z.shape()[0], z.shape()[1]);
    if m < 2 {
        return 0.0;
    }
    let row = |i: usize| &z.data()[i * d..(i + 1) * d];
    let norm = |r: &[f32]| r.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let dot: f64 = row(i).iter().zip(row(j)).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            let denom = norm(row(i)) * norm(row(j));
            total += if denom == 0.0 { 0.0 } else { dot / denom };
        }
    }
    total / (m * (m - 1) / 2) as f64
}
