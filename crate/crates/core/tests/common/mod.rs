//! Oracles shared by the integration tests. Each one is written with plain
//! loops and no library metric or model code.

#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::Rng;

pub const WORDS: [&str; 12] = [
    "there", "is", "a", "red", "blue", "square", "ring", "in", "the", "upper", "left", ".",
];

pub fn random_text<R: Rng>(rng: &mut R, min_len: usize, max_len: usize) -> String {
    let len = rng.random_range(min_len..=max_len);
    (0..len)
        .map(|_| *WORDS.choose(rng).expect("non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn ngrams(tokens: &[&str], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    if tokens.len() < n {
        return out;
    }
    for i in 0..=tokens.len() - n {
        out.push(tokens[i..i + n].iter().map(|s| s.to_string()).collect());
    }
    out
}

fn oracle_idf(g: &[String], corpus: &[&str]) -> f64 {
    let mut df = 0;
    for doc in corpus {
        let toks: Vec<&str> = doc.split_whitespace().collect();
        if ngrams(&toks, g.len()).iter().any(|h| h == g) {
            df += 1;
        }
    }
    ((corpus.len() as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0
}

/// TF-IDF vector as parallel (gram, weight) lists in first-occurrence order.
fn oracle_tfidf(text: &str, n: usize, corpus: &[&str]) -> Vec<(Vec<String>, f64)> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    let gs = ngrams(&toks, n);
    let mut out: Vec<(Vec<String>, f64)> = Vec::new();
    for g in &gs {
        if out.iter().any(|(h, _)| h == g) {
            continue;
        }
        let count = gs.iter().filter(|h| *h == g).count();
        out.push((g.clone(), count as f64 / gs.len() as f64 * oracle_idf(g, corpus)));
    }
    out
}

/// Brute-force CIDEr with IDF over `corpus`.
pub fn oracle_cider(candidate: &str, references: &[&str], corpus: &[&str]) -> f64 {
    let mut total = 0.0;
    for n in 1..=4 {
        let c = oracle_tfidf(candidate, n, corpus);
        let mut acc = 0.0;
        for r in references {
            let v = oracle_tfidf(r, n, corpus);
            let mut dot = 0.0;
            for (g, x) in &c {
                for (h, y) in &v {
                    if g == h {
                        dot += x * y;
                    }
                }
            }
            let nc = c.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
            let nv = v.iter().map(|(_, y)| y * y).sum::<f64>().sqrt();
            if nc > 0.0 && nv > 0.0 {
                acc += dot / (nc * nv);
            }
        }
        total += acc / references.len() as f64;
    }
    10.0 * total / 4.0
}

/// `S_i = sum_{j != i} CIDEr(r_i, r_j)` with IDF over the pool itself.
pub fn oracle_vote_scores(pool: &[String]) -> Vec<f64> {
    let corpus: Vec<&str> = pool.iter().map(String::as_str).collect();
    (0..pool.len())
        .map(|i| {
            let mut s = 0.0;
            for j in 0..pool.len() {
                if j != i {
                    s += oracle_cider(&pool[i], &[&pool[j]], &corpus);
                }
            }
            s
        })
        .collect()
}

fn read_u32(b: &[u8], at: &mut usize) -> usize {
    let v = u32::from_le_bytes(b[*at..*at + 4].try_into().unwrap()) as usize;
    *at += 4;
    v
}

/// Walks a serialized checkpoint and returns the number of float payload bytes.
pub fn checkpoint_payload_bytes(b: &[u8]) -> usize {
    assert_eq!(&b[..5], b"METX1");
    let mut at = 5;
    read_u32(b, &mut at);
    let config_len = read_u32(b, &mut at);
    at += config_len;
    let count = read_u32(b, &mut at);
    let mut payload = 0;
    for _ in 0..count {
        let name_len = read_u32(b, &mut at);
        at += name_len;
        let rank = read_u32(b, &mut at);
        let mut numel = 1;
        for _ in 0..rank {
            numel *= read_u32(b, &mut at);
        }
        at += 4 * numel;
        payload += 4 * numel;
    }
    assert_eq!(at + 8, b.len(), "trailing checksum");
    payload
}
