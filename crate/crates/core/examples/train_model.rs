//! Train the default desk configuration on the synthetic corpus.
//!
//! Usage: `cargo run --release --example train_model -- [epochs] [dataset_size]`

use std::time::Instant;

use expertformer::harness::{prepare_data, train_from, RunConfig};
use expertformer::model::ModelParams;

fn main() -> expertformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::default();
    if let Some(e) = args.next() {
        cfg.epochs = e.parse().expect("epochs");
    }
    if let Some(n) = args.next() {
        cfg.dataset_size = n.parse().expect("dataset size");
    }
    let data = prepare_data(&cfg)?;
    cfg.model.vocab_size = data.vocab.len();
    let params = ModelParams::init(&cfg.model_config(), cfg.seed)?;
    let start = Instant::now();
    let out = train_from(&cfg, params, &data, None)?;
    println!("initial ce {:.4}", out.initial_ce);
    for (e, (ce, cider)) in out.epoch_ce.iter().zip(&out.val_cider).enumerate() {
        println!("epoch {:>2}  ce {ce:.4}  val CIDEr {cider:.4}", e + 1);
    }
    println!("best val CIDEr {:.4}, {:.1}s", out.best_val_cider, start.elapsed().as_secs_f64());
    Ok(())
}
