//! Run configuration: a flat `key = value` file where every key is optional
//! and overrides a default. `#` starts a comment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cvae::CvaeConfig;
use crate::data::{SplitSizes, SuiteConfig};
use crate::error::{Error, Result};
use crate::harvest::FinetuneConfig;
use crate::model::{BaseModelConfig, PretrainConfig};
use crate::rng::derive_seed;
use crate::task_vector::ConditionSource;

/// Pipeline stages that own an independent seed stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Model,
    Pretrain,
    Finetune,
    Describe,
    Cvae,
    Generate,
    Probe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    pub n_tasks: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub heldout_size: usize,
    pub test_size: usize,

    pub d_model: usize,
    pub model_layers: usize,
    pub n_heads: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f32,
    pub pretrain_batch: usize,

    pub rank: usize,
    pub ranks: Vec<usize>,
    pub epochs: usize,
    pub save_last: usize,
    pub lora_lr: f32,
    pub lora_batch: usize,
    pub clip: f32,

    /// Heldout samples averaged into each task vector.
    pub task_vector_samples: usize,
    pub condition: ConditionSource,

    pub cvae_epochs: usize,
    pub kld_weight: f32,
    pub cvae_layers: usize,
    pub cvae_lr: f32,
    pub cvae_batch: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub widen_every: usize,
    pub latent_channels: usize,

    /// CVAE epochs per rank in the rank and conditioning ablations.
    pub ablation_epochs: usize,
    pub depth_layers: Vec<usize>,
    /// CVAE epochs per cell of the depth grid.
    pub depth_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let suite = SuiteConfig::default();
        let model = BaseModelConfig::default();
        let pre = PretrainConfig::default();
        let ft = FinetuneConfig::default();
        let cv = CvaeConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            n_tasks: suite.n_tasks,
            vocab_size: suite.vocab_size,
            seq_len: suite.seq_len,
            train_size: suite.sizes.train,
            heldout_size: suite.sizes.heldout,
            test_size: suite.sizes.test,
            d_model: model.d_model,
            model_layers: model.n_layers,
            n_heads: model.n_heads,
            pretrain_epochs: pre.epochs,
            pretrain_lr: pre.lr,
            pretrain_batch: pre.batch,
            rank: 2,
            ranks: vec![1, 2, 4, 8],
            epochs: ft.epochs,
            save_last: ft.save_last,
            lora_lr: ft.lr,
            lora_batch: ft.batch,
            clip: ft.clip,
            task_vector_samples: 64,
            condition: ConditionSource::SampleDerived,
            cvae_epochs: cv.epochs,
            kld_weight: cv.kld_weight,
            cvae_layers: cv.n_layers,
            cvae_lr: cv.lr,
            cvae_batch: cv.batch,
            base_channels: cv.base_channels,
            max_channels: cv.max_channels,
            widen_every: cv.widen_every,
            latent_channels: cv.latent_channels,
            ablation_epochs: 500,
            depth_layers: vec![10, 11, 12, 13, 14, 20],
            depth_epochs: 100,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

fn join(list: &[usize]) -> String {
    list.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one override. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, v) = (key.trim(), value.trim());
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "n_tasks" => self.n_tasks = parse_value(key, v)?,
            "vocab_size" => self.vocab_size = parse_value(key, v)?,
            "seq_len" => self.seq_len = parse_value(key, v)?,
            "train_size" => self.train_size = parse_value(key, v)?,
            "heldout_size" => self.heldout_size = parse_value(key, v)?,
            "test_size" => self.test_size = parse_value(key, v)?,
            "d_model" => self.d_model = parse_value(key, v)?,
            "model_layers" => self.model_layers = parse_value(key, v)?,
            "n_heads" => self.n_heads = parse_value(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_value(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse_value(key, v)?,
            "pretrain_batch" => self.pretrain_batch = parse_value(key, v)?,
            "rank" => self.rank = parse_value(key, v)?,
            "ranks" => self.ranks = parse_list(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "save_last" => self.save_last = parse_value(key, v)?,
            "lora_lr" => self.lora_lr = parse_value(key, v)?,
            "lora_batch" => self.lora_batch = parse_value(key, v)?,
            "clip" => self.clip = parse_value(key, v)?,
            "task_vector_samples" => self.task_vector_samples = parse_value(key, v)?,
            "condition" => self.condition = v.parse()?,
            "cvae_epochs" => self.cvae_epochs = parse_value(key, v)?,
            "kld_weight" => self.kld_weight = parse_value(key, v)?,
            "cvae_layers" => self.cvae_layers = parse_value(key, v)?,
            "cvae_lr" => self.cvae_lr = parse_value(key, v)?,
            "cvae_batch" => self.cvae_batch = parse_value(key, v)?,
            "base_channels" => self.base_channels = parse_value(key, v)?,
            "max_channels" => self.max_channels = parse_value(key, v)?,
            "widen_every" => self.widen_every = parse_value(key, v)?,
            "latent_channels" => self.latent_channels = parse_value(key, v)?,
            "ablation_epochs" => self.ablation_epochs = parse_value(key, v)?,
            "depth_layers" => self.depth_layers = parse_list(key, v)?,
            "depth_epochs" => self.depth_epochs = parse_value(key, v)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its current value, in a form `parse` accepts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("n_tasks", self.n_tasks.to_string());
        kv("vocab_size", self.vocab_size.to_string());
        kv("seq_len", self.seq_len.to_string());
        kv("train_size", self.train_size.to_string());
        kv("heldout_size", self.heldout_size.to_string());
        kv("test_size", self.test_size.to_string());
        kv("d_model", self.d_model.to_string());
        kv("model_layers", self.model_layers.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("pretrain_epochs", self.pretrain_epochs.to_string());
        kv("pretrain_lr", self.pretrain_lr.to_string());
        kv("pretrain_batch", self.pretrain_batch.to_string());
        kv("rank", self.rank.to_string());
        kv("ranks", join(&self.ranks));
        kv("epochs", self.epochs.to_string());
        kv("save_last", self.save_last.to_string());
        kv("lora_lr", self.lora_lr.to_string());
        kv("lora_batch", self.lora_batch.to_string());
        kv("clip", self.clip.to_string());
        kv("task_vector_samples", self.task_vector_samples.to_string());
        kv("condition", self.condition.to_string());
        kv("cvae_epochs", self.cvae_epochs.to_string());
        kv("kld_weight", self.kld_weight.to_string());
        kv("cvae_layers", self.cvae_layers.to_string());
        kv("cvae_lr", self.cvae_lr.to_string());
        kv("cvae_batch", self.cvae_batch.to_string());
        kv("base_channels", self.base_channels.to_string());
        kv("max_channels", self.max_channels.to_string());
        kv("widen_every", self.widen_every.to_string());
        kv("latent_channels", self.latent_channels.to_string());
        kv("ablation_epochs", self.ablation_epochs.to_string());
        kv("depth_layers", join(&self.depth_layers));
        kv("depth_epochs", self.depth_epochs.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.suite().validate()?;
        self.base_model().validate()?;
        let positive = [
            ("pretrain_batch", self.pretrain_batch),
            ("rank", self.rank),
            ("epochs", self.epochs),
            ("save_last", self.save_last),
            ("lora_batch", self.lora_batch),
            ("task_vector_samples", self.task_vector_samples),
            ("cvae_epochs", self.cvae_epochs),
            ("ablation_epochs", self.ablation_epochs),
            ("depth_epochs", self.depth_epochs),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*key, "must be at least 1"));
        }
        if self.save_last > self.epochs {
            return Err(Error::config(
                "save_last",
                format!("{} exceeds epochs {}", self.save_last, self.epochs),
            ));
        }
        if self.task_vector_samples > self.heldout_size {
            return Err(Error::config(
                "task_vector_samples",
                format!("{} exceeds heldout_size {}", self.task_vector_samples, self.heldout_size),
            ));
        }
        if self.n_tasks < 2 {
            return Err(Error::config("n_tasks", "the generator needs at least 2 tasks"));
        }
        for (key, list) in [("ranks", &self.ranks), ("depth_layers", &self.depth_layers)] {
            if list.is_empty() || list.contains(&0) {
                return Err(Error::config(key, "must be a nonempty list of positive integers"));
            }
        }
        for (key, lr) in [
            ("pretrain_lr", self.pretrain_lr),
            ("lora_lr", self.lora_lr),
            ("cvae_lr", self.cvae_lr),
            ("clip", self.clip),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::config(key, "must be a positive finite number"));
            }
        }
        let cvae_key = |e: Error| match e {
            Error::Config { key, reason } => {
                let key = match key.as_str() {
                    "n_layers" => "cvae_layers".to_string(),
                    "batch" => "cvae_batch".to_string(),
                    _ => key,
                };
                Error::Config { key, reason }
            }
            other => other,
        };
        self.cvae(self.d_model * 2, self.cvae_layers, self.cvae_epochs)
            .validate()
            .map_err(cvae_key)?;
        for &n in &self.depth_layers {
            self.cvae(self.d_model * 2, n, self.depth_epochs)
                .validate()
                .map_err(|e| match cvae_key(e) {
                    Error::Config { reason, .. } => Error::config("depth_layers", reason),
                    other => other,
                })?;
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, stage as u64)
    }

    pub fn suite(&self) -> SuiteConfig {
        SuiteConfig {
            seed: self.stage_seed(Stage::Data),
            n_tasks: self.n_tasks,
            vocab_size: self.vocab_size,
            seq_len: self.seq_len,
            sizes: SplitSizes {
                train: self.train_size,
                heldout: self.heldout_size,
                test: self.test_size,
            },
        }
    }

    pub fn base_model(&self) -> BaseModelConfig {
        BaseModelConfig {
            vocab_size: self.vocab_size,
            seq_len: self.seq_len,
            d_model: self.d_model,
            n_layers: self.model_layers,
            n_heads: self.n_heads,
            n_classes: 2,
            seed: self.stage_seed(Stage::Model),
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            batch: self.pretrain_batch,
            seed: self.stage_seed(Stage::Pretrain),
        }
    }

    /// Fine-tuning settings for one (rank, task) cell.
    pub fn finetune(&self, rank: usize, task_id: usize) -> FinetuneConfig {
        let cell = derive_seed(self.stage_seed(Stage::Finetune), rank as u64);
        FinetuneConfig {
            epochs: self.epochs,
            save_last: self.save_last,
            lr: self.lora_lr,
            batch: self.lora_batch,
            clip: self.clip,
            seed: derive_seed(cell, task_id as u64),
        }
    }

    pub fn cvae(&self, d_l: usize, n_layers: usize, epochs: usize) -> CvaeConfig {
        CvaeConfig {
            n_layers,
            base_channels: self.base_channels,
            max_channels: self.max_channels,
            widen_every: self.widen_every,
            latent_channels: self.latent_channels,
            kld_weight: self.kld_weight,
            epochs,
            lr: self.cvae_lr,
            batch: self.cvae_batch,
            clip: self.clip,
            d_task: self.d_model,
            d_l,
            ..CvaeConfig::default()
        }
    }

    /// Seed of the generator trained for one (rank, depth, source) cell.
    pub fn cvae_seed(&self, rank: usize, n_layers: usize, source: ConditionSource) -> u64 {
        let s = derive_seed(self.stage_seed(Stage::Cvae), rank as u64);
        derive_seed(derive_seed(s, n_layers as u64), source as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_roundtrip_through_text() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.epochs, 150);
        assert_eq!(cfg.save_last, 50);
        assert_eq!(cfg.cvae_epochs, 2000);
        assert_eq!(cfg.kld_weight, 0.005);
        assert_eq!(cfg.cvae_layers, 12);
        assert_eq!(cfg.task_vector_samples, 64);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse("# run\nseed = 7\nranks=1, 8 # two ranks\n\ncondition = description_derived\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.ranks, vec![1, 8]);
        assert_eq!(cfg.condition, ConditionSource::DescriptionDerived);
    }

    #[test]
    fn rejects_with_offending_key() {
        let key = |text: &str| match RunConfig::parse(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(key("bogus = 1"), "bogus");
        assert_eq!(key("epochs = ten"), "epochs");
        assert_eq!(key("save_last = 200"), "save_last");
        assert_eq!(key("n_heads = 3"), "n_heads");
        assert_eq!(key("ranks = "), "ranks");
        assert_eq!(key("cvae_lr = -1"), "cvae_lr");
        assert_eq!(key("cvae_layers = 1"), "cvae_layers");
        assert_eq!(key("depth_layers = 12,1"), "depth_layers");
        assert_eq!(key("test_size = 0"), "test_size");
        assert!(matches!(RunConfig::parse("no equals sign"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn stage_seeds_are_distinct_and_stable() {
        let cfg = RunConfig::default();
        let seeds: Vec<u64> = [Stage::Data, Stage::Model, Stage::Pretrain, Stage::Finetune, Stage::Cvae]
            .iter()
            .map(|&s| cfg.stage_seed(s))
            .collect();
        for (i, a) in seeds.iter().enumerate() {
            assert!(seeds[i + 1..].iter().all(|b| a != b));
        }
        assert_eq!(cfg.stage_seed(Stage::Data), RunConfig::default().stage_seed(Stage::Data));
        assert_ne!(cfg.finetune(2, 0).seed, cfg.finetune(2, 1).seed);
        assert_ne!(cfg.finetune(1, 0).seed, cfg.finetune(2, 0).seed);
    }
}
