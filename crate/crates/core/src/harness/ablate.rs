//! Component ablation grid.

use std::fmt::Write as _;
use std::path::Path;

use super::config::RunConfig;
use super::evaluate::evaluate_params;
use super::train::{prepare_data, train_from};
use crate::error::Result;
use crate::model::ModelParams;

pub const ROW_NAMES: [&str; 5] = ["BASELINE", "+BE", "+BE+ETs", "+BE+ETs+OrL", "+BE+ETs+OrL+EV"];

/// Run configuration of ablation row `row` derived from `base`.
///
/// The baseline has one expert, no bilinear encoder, no orthogonal loss and
/// no voting; each later row switches one component on.
pub fn row_config(base: &RunConfig, row: usize) -> RunConfig {
    let mut c = base.clone();
    c.model.use_bilinear_encoder = row >= 1;
    c.use_expert_tokens = row >= 2;
    c.use_orthogonal_loss = row >= 3;
    c.use_expert_voting = row >= 4;
    c
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    /// Mean relative change over the baseline in percent; `None` for the baseline.
    pub avg_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Mean relative change of the three metrics, skipping metrics with a zero baseline.
fn avg_delta(row: &AblationRow, base: &AblationRow) -> Option<f64> {
    let pairs = [(row.bleu4, base.bleu4), (row.rouge_l, base.rouge_l), (row.cider, base.cider)];
    let deltas: Vec<f64> = pairs
        .iter()
        .filter(|(_, b)| *b > 0.0)
        .map(|(v, b)| (v - b) / b * 100.0)
        .collect();
    if deltas.is_empty() {
        None
    } else {
        Some(deltas.iter().sum::<f64>() / deltas.len() as f64)
    }
}

impl AblationTable {
    pub fn from_rows(mut rows: Vec<AblationRow>) -> Self {
        if let Some(base) = rows.first().cloned() {
            rows[0].avg_delta = None;
            for r in rows.iter_mut().skip(1) {
                r.avg_delta = avg_delta(r, &base);
            }
        }
        Self { rows }
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<18}{:>10}{:>10}{:>10}{:>10}\n", "Setting", "BLEU-4", "ROUGE-L", "CIDEr", "AVG Δ");
        for (i, r) in self.rows.iter().enumerate() {
            let delta = match (i, r.avg_delta) {
                (0, _) => "—".to_string(),
                (_, Some(d)) => format!("{d:+.1}%"),
                (_, None) => "n/a".to_string(),
            };
            let _ = writeln!(
                s,
                "{:<18}{:>10.4}{:>10.4}{:>10.4}{:>10}",
                r.name, r.bleu4, r.rouge_l, r.cider, delta
            );
        }
        s
    }
}

/// Train and test every ablation row on the corpus of `base`.
///
/// Each row trains from its own seeded initialization; with `out` set, row
/// `k` writes its run files under `out/row{k}`.
pub fn ablate(base: &RunConfig, out: Option<&Path>) -> Result<AblationTable> {
    base.validate_base()?;
    let data = prepare_data(base)?;
    let mut rows = Vec::with_capacity(ROW_NAMES.len());
    for (k, name) in ROW_NAMES.iter().enumerate() {
        let mut cfg = row_config(base, k);
        cfg.model.vocab_size = data.vocab.len();
        cfg.validate()?;
        let params = ModelParams::init(&cfg.model_config(), cfg.seed)?;
        let dir = out.map(|o| o.join(format!("row{k}")));
        let outcome = train_from(&cfg, params, &data, dir.as_deref())?;
        let report = evaluate_params(&outcome.best.params, &cfg, &data.vocab, &data.test)?;
        rows.push(AblationRow {
            name: name.to_string(),
            bleu4: report.scores.bleu[3],
            rouge_l: report.scores.rouge_l,
            cider: report.scores.cider,
            avg_delta: None,
        });
    }
    Ok(AblationTable::from_rows(rows))
}

impl RunConfig {
    /// Checks shared by every ablation row; flags are overridden per row.
    fn validate_base(&self) -> Result<()> {
        row_config(self, ROW_NAMES.len() - 1).validate()
    }
}
