//! Five-row component ablation on a reduced corpus.
//!
//! Usage: `cargo run --release --example ablation_grid -- [epochs] [dataset_size] [seed]`

use expertformer::harness::{ablate, RunConfig};

fn main() -> expertformer::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: usize| args.get(i).map_or(d, |a| a.parse().expect("integer argument"));
    let cfg = RunConfig {
        epochs: arg(0, 4),
        dataset_size: arg(1, 150),
        seed: arg(2, 0) as u64,
        ..RunConfig::default()
    };
    print!("{}", ablate(&cfg, None)?.render());
    Ok(())
}
