//! Text-generation metrics (BLEU, ROUGE-L, CIDEr) and CIDEr-based expert voting.
//!
//! All metrics work on whitespace-split text. N-gram tables are ordered maps so
//! floating-point sums are reproducible across runs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const MAX_N: usize = 4;

type Gram = Vec<String>;

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Counted n-grams of one text for `n = 1..=4`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NGramProfile {
    counts: [BTreeMap<Gram, usize>; MAX_N],
}

impl NGramProfile {
    pub fn new(text: &str) -> Self {
        Self::from_tokens(&tokenize(text))
    }

    pub fn from_tokens(tokens: &[String]) -> Self {
        let mut counts: [BTreeMap<Gram, usize>; MAX_N] = Default::default();
        for (k, table) in counts.iter_mut().enumerate() {
            for w in tokens.windows(k + 1) {
                *table.entry(w.to_vec()).or_default() += 1;
            }
        }
        Self { counts }
    }

    /// Counts for n-grams of length `n` (1-based).
    pub fn order(&self, n: usize) -> &BTreeMap<Gram, usize> {
        &self.counts[n - 1]
    }

    pub fn total(&self, n: usize) -> usize {
        self.order(n).values().sum()
    }
}

/// Document frequencies over a reference corpus.
///
/// `idf(g) = ln((|C| + 1) / (df(g) + 1)) + 1`, which stays positive even when
/// a gram occurs in every document.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdfTable {
    df: BTreeMap<Gram, usize>,
    docs: usize,
}

impl IdfTable {
    pub fn new<S: AsRef<str>>(corpus: &[S]) -> Self {
        let mut df = BTreeMap::new();
        for text in corpus {
            let profile = NGramProfile::new(text.as_ref());
            for n in 1..=MAX_N {
                for g in profile.order(n).keys() {
                    *df.entry(g.clone()).or_default() += 1;
                }
            }
        }
        Self { df, docs: corpus.len() }
    }

    pub fn docs(&self) -> usize {
        self.docs
    }

    pub fn df(&self, gram: &[String]) -> usize {
        self.df.get(gram).copied().unwrap_or(0)
    }

    pub fn idf(&self, gram: &[String]) -> f64 {
        ((self.docs as f64 + 1.0) / (self.df(gram) as f64 + 1.0)).ln() + 1.0
    }
}

fn tfidf(profile: &NGramProfile, n: usize, idf: &IdfTable) -> BTreeMap<Gram, f64> {
    let total = profile.total(n) as f64;
    profile
        .order(n)
        .iter()
        .map(|(g, &c)| (g.clone(), c as f64 / total * idf.idf(g)))
        .collect()
}

fn cosine(a: &BTreeMap<Gram, f64>, b: &BTreeMap<Gram, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na: f64 = a.values().map(|x| x * x).sum();
    let nb: f64 = b.values().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb).sqrt()
}

/// Plain CIDEr: TF-IDF cosine averaged over references, then over `n = 1..4`, times 10.
pub fn cider<S: AsRef<str>>(candidate: &str, references: &[S], idf: &IdfTable) -> f64 {
    if references.is_empty() {
        return 0.0;
    }
    let cand = NGramProfile::new(candidate);
    let refs: Vec<NGramProfile> = references.iter().map(|r| NGramProfile::new(r.as_ref())).collect();
    let mut score = 0.0;
    for n in 1..=MAX_N {
        let c = tfidf(&cand, n, idf);
        let sum: f64 = refs.iter().map(|r| cosine(&c, &tfidf(r, n, idf))).sum();
        score += sum / refs.len() as f64;
    }
    10.0 * score / MAX_N as f64
}

/// Mean single-reference CIDEr over aligned pairs, IDF from the references.
pub fn corpus_cider<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R]) -> Result<f64> {
    check_aligned(candidates.len(), references.len())?;
    let idf = IdfTable::new(references);
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| cider(c.as_ref(), &[r.as_ref()], &idf))
        .sum();
    Ok(total / candidates.len() as f64)
}

fn check_aligned(c: usize, r: usize) -> Result<()> {
    if c == 0 {
        return Err(Error::Invalid("metric over an empty corpus".into()));
    }
    if c != r {
        return Err(Error::Invalid(format!("{c} candidates but {r} references")));
    }
    Ok(())
}

fn clipped_matches(cand: &NGramProfile, reference: &NGramProfile, n: usize) -> usize {
    cand.order(n)
        .iter()
        .map(|(g, &c)| c.min(reference.order(n).get(g).copied().unwrap_or(0)))
        .sum()
}

/// Corpus BLEU-`n_max` with clipped precision and brevity penalty, unsmoothed.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R], n_max: usize) -> Result<f64> {
    check_aligned(candidates.len(), references.len())?;
    if !(1..=MAX_N).contains(&n_max) {
        return Err(Error::Invalid(format!("BLEU order must be 1..=4, got {n_max}")));
    }
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let (ct, rt) = (tokenize(c.as_ref()), tokenize(r.as_ref()));
        c_len += ct.len();
        r_len += rt.len();
        let (cp, rp) = (NGramProfile::from_tokens(&ct), NGramProfile::from_tokens(&rt));
        for n in 1..=n_max {
            matched[n - 1] += clipped_matches(&cp, &rp, n);
            total[n - 1] += cp.total(n);
        }
    }
    let precisions: Vec<(f64, f64)> = (0..n_max).map(|k| (matched[k] as f64, total[k] as f64)).collect();
    Ok(combine(&precisions, c_len, r_len))
}

fn combine(precisions: &[(f64, f64)], c_len: usize, r_len: usize) -> f64 {
    if c_len == 0 || precisions.iter().any(|&(m, t)| m == 0.0 || t == 0.0) {
        return 0.0;
    }
    let log_mean = precisions.iter().map(|&(m, t)| (m / t).ln()).sum::<f64>() / precisions.len() as f64;
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    bp * log_mean.exp()
}

/// BLEU-1 through BLEU-4 over one corpus.
pub fn bleu_all<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R]) -> Result<[f64; MAX_N]> {
    let mut out = [0.0; MAX_N];
    for (n, o) in out.iter_mut().enumerate() {
        *o = bleu(candidates, references, n + 1)?;
    }
    Ok(out)
}

/// Single-pair BLEU with add-one smoothing on orders `n >= 2`.
pub fn sentence_bleu(candidate: &str, reference: &str, n_max: usize) -> f64 {
    let (ct, rt) = (tokenize(candidate), tokenize(reference));
    let (cp, rp) = (NGramProfile::from_tokens(&ct), NGramProfile::from_tokens(&rt));
    let precisions: Vec<(f64, f64)> = (1..=n_max.clamp(1, MAX_N))
        .map(|n| {
            let (m, t) = (clipped_matches(&cp, &rp, n) as f64, cp.total(n) as f64);
            if n == 1 {
                (m, t)
            } else {
                (m + 1.0, t + 1.0)
            }
        })
        .collect();
    combine(&precisions, ct.len(), rt.len())
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure `(1 + b^2) P R / (R + b^2 P)`.
pub fn rouge_l(candidate: &str, reference: &str, beta: f64) -> f64 {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let (p, rec) = (lcs / c.len() as f64, lcs / r.len() as f64);
    let b2 = beta * beta;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Mean ROUGE-L over aligned pairs.
pub fn corpus_rouge_l<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R]) -> Result<f64> {
    check_aligned(candidates.len(), references.len())?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l(c.as_ref(), r.as_ref(), ROUGE_BETA))
        .sum();
    Ok(total / candidates.len() as f64)
}

/// Expert voting: `S_i = sum_{j != i} CIDEr(r_i, r_j)` with IDF over the pool.
///
/// Returns the winner (highest score, lowest index on ties) and all scores.
pub fn vote<S: AsRef<str>>(reports: &[S]) -> Result<(usize, Vec<f64>)> {
    vote_with_idf(reports, &IdfTable::new(reports))
}

/// [`vote`] with a caller-supplied IDF table.
pub fn vote_with_idf<S: AsRef<str>>(reports: &[S], idf: &IdfTable) -> Result<(usize, Vec<f64>)> {
    if reports.is_empty() {
        return Err(Error::Invalid("vote over no reports".into()));
    }
    let scores: Vec<f64> = (0..reports.len())
        .map(|i| {
            (0..reports.len())
                .filter(|&j| j != i)
                .map(|j| cider(reports[i].as_ref(), &[reports[j].as_ref()], idf))
                .sum()
        })
        .collect();
    let mut winner = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[winner] {
            winner = i;
        }
    }
    Ok((winner, scores))
}
