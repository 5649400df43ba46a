use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use expertformer::data::records::read_records;
use expertformer::data::Sample;
use expertformer::harness::{
    ablate, evaluate, gradcheck, param_count, prepare_data, train, Checkpoint, RunConfig,
};
use expertformer::metrics::vote;
use expertformer::model::{encode_eval, expert_attention_map, generate_greedy, Decoding, ModelConfig};
use expertformer::{Error, Result};

#[derive(Parser)]
#[command(name = "expertformer", about = "Multi-expert image-to-report transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunFlags {
    /// `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    num_expert: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_text(&fs::read_to_string(p)?)?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.num_expert {
            c.model.num_expert = m;
        }
        if let Some(l) = self.lambda {
            c.lambda = l;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and write checkpoints and logs to the output directory.
    Train(RunFlags),
    /// Score a checkpoint on its test split or on imported records.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Line-delimited corpus records to evaluate instead of the test split.
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate every expert's report for one test sample.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Position in the test split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Directory for per-expert attention grids.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and test the five ablation rows.
    Ablate(RunFlags),
    /// Count trainable parameters.
    ParamCount {
        #[command(flatten)]
        run: RunFlags,
        /// List every tensor.
        #[arg(long)]
        detailed: bool,
    },
    /// Compare analytic and finite-difference gradients on the tiny config.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
}

fn test_split(ckpt: &Checkpoint) -> Result<Vec<Sample>> {
    Ok(prepare_data(&ckpt.config)?.test)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(flags) => {
            let cfg = flags.resolve()?;
            let out = train(&cfg, Some(&cfg.out_dir))?;
            println!(
                "trained {} epochs: ce {:.4} -> {:.4}, best validation CIDEr {:.4}",
                cfg.epochs,
                out.initial_ce,
                out.epoch_ce.last().copied().unwrap_or(f64::NAN),
                out.best_val_cider
            );
            println!("checkpoints in {}", cfg.out_dir.display());
        }
        Command::Evaluate {
            checkpoint,
            records,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let samples = match records {
                Some(p) => read_records(BufReader::new(File::open(p)?))?
                    .into_iter()
                    .map(|r| r.into_sample())
                    .collect(),
                None => test_split(&ckpt)?,
            };
            let report = evaluate(&ckpt, &samples)?;
            print!("{}", report.table());
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("metrics.txt"), report.table())?;
                fs::write(dir.join("samples.jsonl"), report.jsonl()?)?;
            }
        }
        Command::Generate { checkpoint, index, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let test = test_split(&ckpt)?;
            let sample = test
                .get(index)
                .ok_or_else(|| Error::Invalid(format!("test split has {} samples", test.len())))?;
            generate_one(&ckpt, sample, out.as_deref())?;
        }
        Command::Ablate(flags) => {
            let cfg = flags.resolve()?;
            let table = ablate(&cfg, Some(&cfg.out_dir))?;
            let text = table.render();
            print!("{text}");
            fs::create_dir_all(&cfg.out_dir)?;
            fs::write(cfg.out_dir.join("ablation.txt"), text)?;
        }
        Command::ParamCount { run, detailed } => {
            let cfg = run.resolve()?;
            print!("{}", param_count(&cfg.model_config()).render(detailed));
        }
        Command::Gradcheck { seeds } => {
            let report = gradcheck(&ModelConfig::tiny(), seeds)?;
            print!("{}", report.render());
            if !report.passed() {
                return Err(Error::Invalid("gradient check exceeded tolerance".into()));
            }
        }
    }
    Ok(())
}

fn generate_one(ckpt: &Checkpoint, sample: &Sample, out: Option<&Path>) -> Result<()> {
    let cfg = ckpt.config.model_config();
    let vocab = expertformer::harness::template_vocab();
    let (f_e, f_v) = encode_eval(&ckpt.params, &sample.image, &cfg)?;
    let ids = generate_greedy(&ckpt.params, &cfg, &f_e, &f_v, Decoding::PerExpert)?;
    let reports: Vec<String> = ids.iter().map(|r| vocab.decode(r)).collect();
    let (winner, scores) = vote(&reports)?;
    println!("reference: {}", sample.report);
    for (m, (r, s)) in reports.iter().zip(&scores).enumerate() {
        let mark = if m == winner { "*" } else { " " };
        println!("{mark}{m} {s:.4} {r}");
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let map = expert_attention_map(&f_e, &f_v)?;
        let n = f_v.shape()[0];
        let side = (n as f64).sqrt() as usize;
        for m in 0..cfg.num_expert {
            let row = &map.data()[m * n..(m + 1) * n];
            let mut text = String::new();
            for line in row.chunks(side.max(1)) {
                let cells: Vec<String> = line.iter().map(|v| format!("{v:.6}")).collect();
                text.push_str(&cells.join(" "));
                text.push('\n');
            }
            fs::write(dir.join(format!("expert{m}.txt")), text)?;
        }
        println!("attention grids in {}", dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
