//! Briefly train a model, then show every expert's report, the vote and
//! one expert's attention over the visual tokens.
//!
//! Usage: `cargo run --release --example expert_reports -- [epochs]`

use expertformer::harness::{prepare_data, train_from, RunConfig};
use expertformer::metrics::vote;
use expertformer::model::{encode_eval, expert_attention_map, generate_greedy, Decoding, ModelParams};

fn main() -> expertformer::Result<()> {
    let epochs = std::env::args().nth(1).map_or(3, |a| a.parse().expect("epochs"));
    let mut cfg = RunConfig { dataset_size: 120, epochs, ..RunConfig::default() };
    let data = prepare_data(&cfg)?;
    cfg.model.vocab_size = data.vocab.len();
    let model = cfg.model_config();
    let out = train_from(&cfg, ModelParams::init(&model, cfg.seed)?, &data, None)?;
    let sample = &data.test[0];
    let (f_e, f_v) = encode_eval(&out.best.params, &sample.image, &model)?;
    let ids = generate_greedy(&out.best.params, &model, &f_e, &f_v, Decoding::PerExpert)?;
    let reports: Vec<String> = ids.iter().map(|r| data.vocab.decode(r)).collect();
    let (winner, scores) = vote(&reports)?;
    println!("reference: {}", sample.report);
    for (m, (r, s)) in reports.iter().zip(&scores).enumerate() {
        let mark = if m == winner { "*" } else { " " };
        println!("{mark}{m} {s:.4} {r}");
    }
    let map = expert_attention_map(&f_e, &f_v)?;
    let n = map.shape()[1];
    let side = (n as f64).sqrt() as usize;
    println!("expert {winner} attention:");
    for row in map.data()[winner * n..(winner + 1) * n].chunks(side) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("  {}", cells.join(" "));
    }
    Ok(())
}
