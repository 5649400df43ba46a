//! Run configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::GridSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::DEFAULT_LR;

/// IDF corpus used when voting between expert reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VoteIdf {
    /// The candidate reports of the current sample.
    Pool,
    /// The reference reports of the evaluated corpus.
    References,
}

impl VoteIdf {
    fn name(self) -> &'static str {
        match self {
            VoteIdf::Pool => "pool",
            VoteIdf::References => "references",
        }
    }
}

impl FromStr for VoteIdf {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pool" => Ok(VoteIdf::Pool),
            "references" => Ok(VoteIdf::References),
            _ => Err(Error::Config(format!("vote_idf must be `pool` or `references`, got `{s}`"))),
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Seeds parameter initialization and batch order.
    pub seed: u64,
    /// Seeds the synthetic corpus and its split.
    pub data_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub dataset_size: usize,
    /// When false the model runs with a single expert token.
    pub use_expert_tokens: bool,
    pub use_orthogonal_loss: bool,
    pub use_expert_voting: bool,
    /// Divide the generation loss by the token count.
    pub normalize_ce: bool,
    pub vote_idf: VoteIdf,
    /// Validation samples scored after each epoch; 0 means all.
    pub val_limit: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seed: 0,
            data_seed: 7,
            epochs: 20,
            batch_size: 16,
            learning_rate: DEFAULT_LR,
            lambda: 2.0,
            dataset_size: 500,
            use_expert_tokens: true,
            use_orthogonal_loss: true,
            use_expert_voting: true,
            normalize_ce: true,
            vote_idf: VoteIdf::Pool,
            val_limit: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    /// The architecture actually built, after applying the ablation flags.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if !self.use_expert_tokens {
            m.num_expert = 1;
        }
        m
    }

    /// Weight of the orthogonal loss after applying the ablation flag.
    pub fn effective_lambda(&self) -> f64 {
        if self.use_orthogonal_loss {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            image_size: self.model.image_size,
            ..GridSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model_config();
        model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if model.channels != crate::data::corpus::CHANNELS {
            return bad(format!("the corpus has 3 channels, config says {}", model.channels));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.dataset_size < 10 {
            return bad("dataset_size must be at least 10".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.use_expert_voting && model.num_expert < 2 {
            return bad("expert voting needs at least two experts".into());
        }
        Ok(())
    }

    /// Flat `key = value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image_size", m.image_size.to_string());
        kv("channels", m.channels.to_string());
        kv("patch", m.patch.to_string());
        kv("dim", m.dim.to_string());
        kv("heads", m.heads.to_string());
        kv("vit_layers", m.vit_layers.to_string());
        kv("num_expert", m.num_expert.to_string());
        kv("bilinear_dim", m.bilinear_dim.to_string());
        kv("mid_dim", m.mid_dim.to_string());
        kv("enc_layers", m.enc_layers.to_string());
        kv("dec_layers", m.dec_layers.to_string());
        kv("vocab_size", m.vocab_size.to_string());
        kv("t_max", m.t_max.to_string());
        kv("use_bilinear_encoder", m.use_bilinear_encoder.to_string());
        kv("seed", self.seed.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("lambda", self.lambda.to_string());
        kv("dataset_size", self.dataset_size.to_string());
        kv("use_expert_tokens", self.use_expert_tokens.to_string());
        kv("use_orthogonal_loss", self.use_orthogonal_loss.to_string());
        kv("use_expert_voting", self.use_expert_voting.to_string());
        kv("normalize_ce", self.normalize_ce.to_string());
        kv("vote_idf", self.vote_idf.name().to_string());
        kv("val_limit", self.val_limit.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }

    /// Parse `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are skipped; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    /// Set one field by its key name.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "image_size" => m.image_size = parse(key, v)?,
            "channels" => m.channels = parse(key, v)?,
            "patch" => m.patch = parse(key, v)?,
            "dim" => m.dim = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "vit_layers" => m.vit_layers = parse(key, v)?,
            "num_expert" => m.num_expert = parse(key, v)?,
            "bilinear_dim" => m.bilinear_dim = parse(key, v)?,
            "mid_dim" => m.mid_dim = parse(key, v)?,
            "enc_layers" => m.enc_layers = parse(key, v)?,
            "dec_layers" => m.dec_layers = parse(key, v)?,
            "vocab_size" => m.vocab_size = parse(key, v)?,
            "t_max" => m.t_max = parse(key, v)?,
            "use_bilinear_encoder" => m.use_bilinear_encoder = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "dataset_size" => self.dataset_size = parse(key, v)?,
            "use_expert_tokens" => self.use_expert_tokens = parse(key, v)?,
            "use_orthogonal_loss" => self.use_orthogonal_loss = parse(key, v)?,
            "use_expert_voting" => self.use_expert_voting = parse(key, v)?,
            "normalize_ce" => self.normalize_ce = parse(key, v)?,
            "vote_idf" => self.vote_idf = v.parse()?,
            "val_limit" => self.val_limit = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig {
            learning_rate: 3.3e-4,
            lambda: 0.1,
            vote_idf: VoteIdf::References,
            ..RunConfig::default()
        };
        c.model.use_bilinear_encoder = false;
        let text = c.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::from_text("color = blue"), Err(Error::Config(_))));
        assert!(RunConfig::from_text("epochs = many").is_err());
        assert!(RunConfig::from_text("epochs").is_err());
    }

    #[test]
    fn flags_shape_the_model() {
        let c = RunConfig {
            use_expert_tokens: false,
            use_expert_voting: false,
            use_orthogonal_loss: false,
            ..RunConfig::default()
        };
        assert_eq!(c.model_config().num_expert, 1);
        assert_eq!(c.effective_lambda(), 0.0);
        c.validate().unwrap();
        let voting_alone = RunConfig {
            use_expert_tokens: false,
            ..RunConfig::default()
        };
        assert!(voting_alone.validate().is_err());
    }
}
