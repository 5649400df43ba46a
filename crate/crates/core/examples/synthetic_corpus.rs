//! Generate the synthetic corpus, print a few samples and export records.
//!
//! Usage: `cargo run --example synthetic_corpus -- [samples] [out.jsonl]`

use std::fs::File;
use std::io::BufWriter;

use expertformer::data::records::write_records;
use expertformer::data::{generate_corpus, split_corpus, GridSpec};

fn main() -> expertformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(20, |a| a.parse().expect("sample count"));
    let spec = GridSpec::default();
    let corpus = generate_corpus(7, n, &spec)?;
    let size = spec.image_size;
    let first = &corpus[0];
    // Coarse preview, one character per 4x4 block.
    for y in (0..size).step_by(4) {
        let line: String = (0..size)
            .step_by(4)
            .map(|x| {
                let px = &first.image.data()[(y * size + x) * 3..(y * size + x) * 3 + 3];
                match px.iter().position(|&v| v > 0.5) {
                    Some(0) => 'R',
                    Some(1) => 'G',
                    Some(2) => 'B',
                    _ => '.',
                }
            })
            .collect();
        println!("{line}");
    }
    for s in corpus.iter().take(5) {
        println!("{:>3}  {}", s.id, s.report);
    }
    if let Some(path) = args.next() {
        write_records(BufWriter::new(File::create(&path)?), &corpus)?;
        println!("wrote {n} records to {path}");
    }
    let (train, val, test) = split_corpus(corpus, 7);
    println!("split {} / {} / {}", train.len(), val.len(), test.len());
    Ok(())
}
