//! Evaluate a saved checkpoint on its own test split.
//!
//! Usage: `cargo run --release --example evaluate_checkpoint -- runs/default/best.ckpt`

use std::path::PathBuf;

use expertformer::harness::{evaluate, prepare_data, Checkpoint};

fn main() -> expertformer::Result<()> {
    let path: PathBuf = std::env::args().nth(1).expect("checkpoint path").into();
    let ckpt = Checkpoint::load(&path)?;
    let test = prepare_data(&ckpt.config)?.test;
    let report = evaluate(&ckpt, &test)?;
    print!("{}", report.table());
    for s in report.samples.iter().take(3) {
        println!("#{} winner {}: {}", s.id, s.winner, s.reports[s.winner]);
        println!("   reference: {}", s.reference);
    }
    Ok(())
}
