//! Report generation, voting and corpus scoring.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{RunConfig, VoteIdf};
use super::train::template_vocab;
use crate::data::{Sample, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{bleu_all, corpus_cider, corpus_rouge_l, vote, vote_with_idf, IdfTable};
use crate::model::{encode_eval, generate_greedy, Decoding, ModelParams};

/// Per-sample evaluation record, one JSON line each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub winner: usize,
    pub scores: Vec<f64>,
    pub reports: Vec<String>,
    pub reference: String,
}

/// Corpus-level text metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    /// BLEU-1 through BLEU-4.
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scores: Scores,
    pub samples: Vec<SampleRecord>,
}

/// Score aligned candidate and reference texts.
pub fn score_texts<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R]) -> Result<Scores> {
    Ok(Scores {
        bleu: bleu_all(candidates, references)?,
        rouge_l: corpus_rouge_l(candidates, references)?,
        cider: corpus_cider(candidates, references)?,
    })
}

impl Scores {
    /// Plain-text `metric value` table.
    pub fn table(&self) -> String {
        let mut s = String::from("metric    value\n");
        for (n, b) in self.bleu.iter().enumerate() {
            let _ = writeln!(s, "BLEU-{}    {b:.6}", n + 1);
        }
        let _ = writeln!(s, "ROUGE-L   {:.6}", self.rouge_l);
        let _ = writeln!(s, "CIDEr     {:.6}", self.cider);
        s
    }
}

impl EvalReport {
    pub fn table(&self) -> String {
        self.scores.table()
    }

    pub fn jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.samples {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Decoding mode implied by the run flags.
pub fn decoding_for(run: &RunConfig) -> Decoding {
    let m = run.model_config().num_expert;
    if m > 1 && !run.use_expert_voting {
        Decoding::Averaged
    } else {
        Decoding::PerExpert
    }
}

/// Vote among reports with the IDF corpus chosen by the run.
pub fn vote_with(reports: &[String], run: &RunConfig, ref_idf: &IdfTable) -> Result<(usize, Vec<f64>)> {
    match run.vote_idf {
        VoteIdf::Pool => vote(reports),
        VoteIdf::References => vote_with_idf(reports, ref_idf),
    }
}

/// Generate, select and score a report for every sample.
pub fn evaluate_params(
    params: &ModelParams<f32>,
    run: &RunConfig,
    vocab: &Vocab,
    samples: &[Sample],
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    let model = run.model_config();
    let mode = decoding_for(run);
    let references: Vec<&str> = samples.iter().map(|s| s.report.as_str()).collect();
    let ref_idf = IdfTable::new(&references);
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let (f_e, f_v) = encode_eval(params, &s.image, &model)?;
        let ids = generate_greedy(params, &model, &f_e, &f_v, mode)?;
        let reports: Vec<String> = ids.iter().map(|r| vocab.decode(r)).collect();
        let (winner, scores) = if run.use_expert_voting && reports.len() > 1 {
            vote_with(&reports, run, &ref_idf)?
        } else {
            (0, vec![0.0; reports.len()])
        };
        records.push(SampleRecord {
            id: s.id,
            winner,
            scores,
            reports,
            reference: s.report.clone(),
        });
    }
    let candidates: Vec<&str> = records.iter().map(|r| r.reports[r.winner].as_str()).collect();
    let scores = score_texts(&candidates, &references)?;
    Ok(EvalReport {
        scores,
        samples: records,
    })
}

/// Ensure every reference word is known and the vocabulary fits the model.
pub fn check_vocab(vocab: &Vocab, params: &ModelParams<f32>, samples: &[Sample]) -> Result<()> {
    let rows = params.get("dec.word_emb")?.shape()[0];
    if rows != vocab.len() {
        return Err(Error::VocabMismatch(format!(
            "checkpoint has {rows} word rows, vocabulary has {}",
            vocab.len()
        )));
    }
    for s in samples {
        if let Some(w) = s.report.split_whitespace().find(|w| vocab.id(w).is_none()) {
            return Err(Error::VocabMismatch(format!("sample {} uses unknown word `{w}`", s.id)));
        }
    }
    Ok(())
}

/// Evaluate a checkpoint on `samples`.
pub fn evaluate(ckpt: &Checkpoint, samples: &[Sample]) -> Result<EvalReport> {
    let vocab = template_vocab();
    check_vocab(&vocab, &ckpt.params, samples)?;
    evaluate_params(&ckpt.params, &ckpt.config, &vocab, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn references_score_perfectly_against_themselves() {
        let refs = ["there is a red disc in the upper left . the lower right is clear .", "the upper left is clear ."];
        let s = score_texts(&refs, &refs).unwrap();
        assert_eq!(s.bleu[3], 1.0);
        assert_eq!(s.cider, 10.0);
        assert_eq!(s.rouge_l, 1.0);
    }
}
