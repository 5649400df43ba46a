//! Finite-difference check of every layer type on the tiny configuration.

use std::time::Instant;

use expertformer::harness::gradcheck;
use expertformer::model::ModelConfig;

fn main() -> expertformer::Result<()> {
    let start = Instant::now();
    let report = gradcheck(&ModelConfig::tiny(), 10)?;
    print!("{}", report.render());
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
