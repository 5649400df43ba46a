mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use expertformer::harness::{
    evaluate, param_count, prepare_data, train, train_from, Checkpoint, RunConfig, VoteIdf,
};
use expertformer::metrics::vote;
use expertformer::model::{ModelConfig, ModelParams};
use expertformer::numeric::Tensor;
use expertformer::Error;

use common::checkpoint_payload_bytes;

fn quick() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            image_size: 32,
            patch: 8,
            dim: 16,
            bilinear_dim: 16,
            mid_dim: 4,
            num_expert: 3,
            ..ModelConfig::default()
        },
        dataset_size: 40,
        epochs: 1,
        batch_size: 8,
        ..RunConfig::default()
    }
}

#[test]
fn config_text_round_trips() {
    let mut c = quick();
    c.seed = 42;
    c.lambda = 0.5;
    c.learning_rate = 3e-4;
    c.vote_idf = VoteIdf::References;
    c.use_orthogonal_loss = false;
    c.out_dir = "runs/x".into();
    assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    let partial = RunConfig::from_text("# comment\n\nnum_expert = 9\nlambda=1.5\n").unwrap();
    assert_eq!(partial.model.num_expert, 9);
    assert_eq!(partial.lambda, 1.5);
    assert!(RunConfig::from_text("bogus = 1").is_err());
    assert!(RunConfig::from_text("epochs = many").is_err());
    assert!(RunConfig::from_text("no separator").is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = quick();
    c.lambda = -1.0;
    assert!(c.validate().is_err());
    let mut c = quick();
    c.model.heads = 5;
    assert!(c.validate().is_err());
    let mut c = quick();
    c.use_expert_tokens = false;
    assert_eq!(c.model_config().num_expert, 1);
    assert!(c.validate().is_err(), "voting with one expert");
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = quick();
    let ckpt = Checkpoint {
        config: cfg.clone(),
        params: ModelParams::init(&cfg.model_config(), 5).unwrap(),
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ckpt.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded, ckpt);
    loaded.save(&b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let mut bytes = fs::read(&a).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(b"NOTIT").is_err());
}

#[test]
fn census_matches_checkpoint_payload() {
    for m in [1, 3, 7] {
        for bilinear in [true, false] {
            let mut cfg = quick();
            cfg.model.num_expert = m;
            cfg.model.use_bilinear_encoder = bilinear;
            let ckpt = Checkpoint {
                config: cfg.clone(),
                params: ModelParams::init(&cfg.model, 0).unwrap(),
            };
            let census = param_count(&cfg.model);
            assert_eq!(census.total * 4, checkpoint_payload_bytes(&ckpt.to_bytes().unwrap()));
            assert_eq!(census.tensors.len(), ckpt.params.len());
        }
    }
}

#[test]
fn parameter_count_is_linear_in_experts_and_decoder_layers() {
    let base = quick().model;
    let count = |m: usize, l: usize| param_count(&ModelConfig { num_expert: m, dec_layers: l, ..base.clone() }).total;
    for m in 2..10 {
        assert_eq!(count(m, 2) - count(1, 2), 2 * (m - 1) * base.dim);
    }
    let per_layer = count(3, 2) - count(3, 1);
    assert_eq!(count(3, 4) - count(3, 2), 2 * per_layer);
}

#[test]
fn training_writes_logs_and_is_reproducible() {
    let cfg = quick();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, Some(dir.path())).unwrap();
    for f in ["config.txt", "metrics.log", "epochs.log", "best.ckpt", "last.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(dir.path().join("metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 4, "32 training samples in batches of 8");
    assert!(log.lines().all(|l| l.split_whitespace().count() == 4));
    let again = train(&cfg, None).unwrap();
    assert_eq!(out.last, again.last);
    assert_eq!(out.log, again.log);
    let saved = RunConfig::from_text(&fs::read_to_string(dir.path().join("config.txt")).unwrap()).unwrap();
    assert_eq!(saved.seed, cfg.seed);
}

#[test]
fn divergence_stops_training_and_keeps_the_last_parameters() {
    let mut cfg = quick();
    let data = prepare_data(&cfg).unwrap();
    cfg.model.vocab_size = data.vocab.len();
    let mut params = ModelParams::init(&cfg.model_config(), 0).unwrap();
    let w = params.get_mut("dec.out.bias").unwrap();
    *w = Tensor::full(w.shape(), f32::NAN);
    let dir = tempfile::tempdir().unwrap();
    match train_from(&cfg, params, &data, Some(dir.path())) {
        Err(Error::Diverged { step }) => assert_eq!(step, 1),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(dir.path().join("last.ckpt").exists());
}

#[test]
fn vocabulary_mismatch_is_reported() {
    let mut cfg = quick();
    cfg.model.vocab_size = 30;
    let ckpt = Checkpoint {
        config: cfg.clone(),
        params: ModelParams::init(&cfg.model_config(), 0).unwrap(),
    };
    let test = prepare_data(&cfg).unwrap().test;
    assert!(matches!(evaluate(&ckpt, &test), Err(Error::VocabMismatch(_))));

    cfg.model.vocab_size = 22;
    let ckpt = Checkpoint {
        config: cfg.clone(),
        params: ModelParams::init(&cfg.model_config(), 0).unwrap(),
    };
    let mut odd = test.clone();
    odd[0].report = "there is a purple square".into();
    assert!(matches!(evaluate(&ckpt, &odd), Err(Error::VocabMismatch(_))));
}

#[test]
fn evaluation_winners_match_an_external_vote() {
    let cfg = quick();
    let out = train(&cfg, None).unwrap();
    let test = prepare_data(&cfg).unwrap().test;
    let report = evaluate(&out.best, &test).unwrap();
    assert_eq!(report.samples.len(), test.len());
    for s in &report.samples {
        assert_eq!(s.reports.len(), 3);
        let (w, scores) = vote(&s.reports).unwrap();
        assert_eq!(w, s.winner);
        assert_eq!(scores, s.scores);
    }
    assert_eq!(report.table().lines().count(), 7);
    let parsed: Vec<serde_json::Value> = report
        .jsonl()
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(parsed.len(), test.len());
    assert!(parsed.iter().all(|v| v.get("winner").is_some() && v.get("scores").is_some()));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_expertformer")).args(args).output().unwrap()
}

fn stdout(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn cli_param_count_and_gradcheck() {
    let o = cli(&["param-count", "--num-expert", "9"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let total = param_count(&ModelConfig { num_expert: 9, ..ModelConfig::default() }).total;
    assert!(text.lines().last().unwrap().ends_with(&total.to_string()), "{text}");
    let o = cli(&["gradcheck", "--seeds", "1"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("orthogonal_loss"));
}

#[test]
fn cli_train_evaluate_generate() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, quick().to_text()).unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let o = cli(&["train", "--config", conf.to_str().unwrap(), "--seed", "3", "--lambda", "1", "--out", run_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let saved = RunConfig::from_text(&fs::read_to_string(run.join("config.txt")).unwrap()).unwrap();
    assert_eq!((saved.seed, saved.lambda), (3, 1.0));

    let best = run.join("best.ckpt");
    let eval_dir = dir.path().join("eval");
    let o = cli(&["evaluate", "--checkpoint", best.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("CIDEr"));
    assert!(eval_dir.join("samples.jsonl").exists());

    let maps = dir.path().join("maps");
    let o = cli(&["generate", "--checkpoint", best.to_str().unwrap(), "--out", maps.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("reference: "));
    assert_eq!(text.lines().filter(|l| l.starts_with('*')).count(), 1);
    assert_grid(&maps.join("expert0.txt"), 4);

    let o = cli(&["evaluate", "--checkpoint", dir.path().join("missing.ckpt").to_str().unwrap()]);
    assert!(!o.status.success());
}

fn assert_grid(path: &Path, side: usize) {
    let text = fs::read_to_string(path).unwrap();
    let values: Vec<f64> = text.split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(text.lines().count(), side);
    assert_eq!(values.len(), side * side);
    assert!((values.iter().sum::<f64>() - 1.0).abs() < 1e-4);
}
