//! Pipeline stages (data, pretrain + harvest, generator training, generation)
//! as in-memory functions, plus the on-disk layout the CLI persists them in.

use std::path::{Path, PathBuf};

use crate::config::{RunConfig, Stage};
use crate::container::{self, Container, TaskCheckpoints};
use crate::cvae::{self, CvaeModel, EpochStats, TrainingPair};
use crate::data::TaskSuite;
use crate::error::{Error, Result};
use crate::harvest::finetune_lora;
use crate::model::{pretrain, AdapterLayout, BaseModel};
use crate::rng::{derive_seed, Rng};
use crate::task_vector::{describe_task_vector, extract_task_vector, ConditionSource, TaskVector};

/// Fine-tuned checkpoints of every task at one rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Harvest {
    pub rank: usize,
    pub layout: AdapterLayout,
    pub tasks: Vec<TaskCheckpoints>,
}

impl Harvest {
    pub fn param_count(&self) -> usize {
        self.layout.param_count()
    }

    pub fn sample_vectors(&self) -> Vec<TaskVector> {
        self.tasks.iter().map(|t| t.task_vector.clone()).collect()
    }
}

pub fn pretrain_base(cfg: &RunConfig, suite: &TaskSuite) -> Result<BaseModel> {
    let corpus: Vec<&[u32]> = suite
        .tasks
        .iter()
        .flat_map(|t| t.train.iter().map(|s| s.tokens.as_slice()))
        .collect();
    pretrain(cfg.base_model(), &corpus, &cfg.pretrain())
}

/// Fine-tunes one adapter per task and extracts each task's vector from the
/// first `task_vector_samples` heldout samples under its final adapter.
pub fn harvest(cfg: &RunConfig, suite: &TaskSuite, model: &BaseModel, rank: usize) -> Result<Harvest> {
    let layout = AdapterLayout::for_model(&model.config, rank)?;
    let tasks = suite
        .tasks
        .iter()
        .map(|task| {
            let k = task.spec.task_id;
            let run = finetune_lora(model, task, &layout, &cfg.finetune(rank, k))?;
            let samples = &task.heldout[..cfg.task_vector_samples.min(task.heldout.len())];
            let task_vector = extract_task_vector(model, Some(&run.adapter), samples, k)?;
            log::info!(
                "rank {rank} task {k}: train accuracy {:.3}",
                run.records.last().map_or(0.0, |r| r.train_accuracy)
            );
            Ok(TaskCheckpoints {
                task_id: k,
                layout: layout.clone(),
                records: run.records,
                task_vector,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Harvest { rank, layout, tasks })
}

/// One condition per task from the requested source. Description vectors
/// are rescaled to the mean norm of the sample-derived ones.
pub fn conditions(cfg: &RunConfig, suite: &TaskSuite, harvest: &Harvest, source: ConditionSource) -> Result<Vec<TaskVector>> {
    match source {
        ConditionSource::SampleDerived => Ok(harvest.sample_vectors()),
        ConditionSource::DescriptionDerived => {
            let target = description_norm(harvest);
            suite
                .tasks
                .iter()
                .map(|t| describe(cfg, &t.spec.description, target, t.spec.task_id))
                .collect()
        }
    }
}

pub fn description_norm(harvest: &Harvest) -> f32 {
    let n = harvest.tasks.len().max(1) as f32;
    harvest.tasks.iter().map(|t| t.task_vector.norm()).sum::<f32>() / n
}

pub fn describe(cfg: &RunConfig, text: &str, target_norm: f32, task_id: usize) -> Result<TaskVector> {
    describe_task_vector(text, cfg.d_model, cfg.stage_seed(Stage::Describe), target_norm, task_id)
}

pub fn training_pairs(harvest: &Harvest, conds: &[TaskVector]) -> Result<Vec<TrainingPair>> {
    if conds.len() != harvest.tasks.len() {
        return Err(Error::Input(format!(
            "{} conditions for {} tasks",
            conds.len(),
            harvest.tasks.len()
        )));
    }
    Ok(harvest
        .tasks
        .iter()
        .zip(conds)
        .flat_map(|(t, c)| {
            t.records.iter().map(move |r| TrainingPair {
                condition: c.clone(),
                values: r.values.clone(),
            })
        })
        .collect())
}

pub fn train_generator(
    cfg: &RunConfig,
    harvest: &Harvest,
    conds: &[TaskVector],
    n_layers: usize,
    epochs: usize,
) -> Result<(CvaeModel, Vec<EpochStats>)> {
    let source = conds
        .first()
        .ok_or_else(|| Error::Input("no conditions".into()))?
        .source;
    let pairs = training_pairs(harvest, conds)?;
    let config = cfg.cvae(harvest.param_count(), n_layers, epochs);
    let seed = cfg.cvae_seed(harvest.rank, n_layers, source);
    cvae::train(&pairs, &config, &harvest.layout, seed)
}

/// Seed of the single generation drawn for one task.
pub fn generation_seed(cfg: &RunConfig, rank: usize, n_layers: usize, source: ConditionSource, task_id: usize) -> u64 {
    let s = derive_seed(cfg.stage_seed(Stage::Generate), cfg.cvae_seed(rank, n_layers, source));
    derive_seed(s, task_id as u64)
}

pub fn generate(cvae: &CvaeModel, cond: &TaskVector, seed: u64) -> Result<Vec<f32>> {
    cvae.generate(cond, &mut Rng::new(seed))
}

// ---- on-disk layout ----

/// Artifact locations under the run's output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.out_dir.clone(),
        }
    }

    pub fn suite(&self) -> PathBuf {
        self.root.join("suite.txt")
    }

    pub fn base_model(&self) -> PathBuf {
        self.root.join("base_model.bin")
    }

    pub fn rank_dir(&self, rank: usize) -> PathBuf {
        self.root.join(format!("r{rank}"))
    }

    pub fn checkpoints(&self, rank: usize, task_id: usize) -> PathBuf {
        self.rank_dir(rank).join("checkpoints").join(format!("task{task_id}.bin"))
    }

    pub fn generator(&self, rank: usize, source: ConditionSource, n_layers: usize) -> PathBuf {
        self.rank_dir(rank).join(format!("generator_{source}_n{n_layers}.bin"))
    }

    pub fn generated(&self, rank: usize, name: &str) -> PathBuf {
        self.rank_dir(rank).join("generated").join(format!("{name}.bin"))
    }

    /// Generators trained by the rank ablation, kept apart from the main one.
    pub fn ablation_generator(&self, rank: usize, source: ConditionSource) -> PathBuf {
        self.root
            .join("ablation")
            .join(format!("r{rank}"))
            .join(format!("generator_{source}.bin"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

/// Sidecar holding the normalization statistics next to a generator file.
pub fn sidecar_path(generator: &Path) -> PathBuf {
    generator.with_extension("norm.bin")
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Dependency {
            stage: stage.into(),
            path: path.to_path_buf(),
        })
    }
}

pub fn save_suite(paths: &Paths, suite: &TaskSuite) -> Result<()> {
    std::fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;
    suite.save(&paths.suite())
}

pub fn load_suite(paths: &Paths) -> Result<TaskSuite> {
    require(&paths.suite(), "gen-data")?;
    TaskSuite::load(&paths.suite())
}

pub fn save_base_model(paths: &Paths, model: &BaseModel) -> Result<u64> {
    container::encode_base_model(model)?.save(&paths.base_model())
}

pub fn load_base_model(paths: &Paths) -> Result<BaseModel> {
    require(&paths.base_model(), "harvest")?;
    container::decode_base_model(&Container::load(&paths.base_model())?)
}

pub fn save_harvest(paths: &Paths, h: &Harvest) -> Result<u64> {
    h.tasks
        .iter()
        .map(|t| container::encode_checkpoints(t)?.save(&paths.checkpoints(h.rank, t.task_id)))
        .sum()
}

pub fn load_harvest(paths: &Paths, rank: usize, n_tasks: usize) -> Result<Harvest> {
    let tasks = (0..n_tasks)
        .map(|k| {
            let path = paths.checkpoints(rank, k);
            require(&path, "harvest")?;
            container::decode_checkpoints(&Container::load(&path)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let layout = tasks[0].layout.clone();
    if layout.rank != rank || tasks.iter().any(|t| t.layout != layout) {
        return Err(Error::Container(format!(
            "checkpoints under {} disagree on the adapter layout",
            paths.rank_dir(rank).display()
        )));
    }
    Ok(Harvest { rank, layout, tasks })
}

/// Writes the generator and its sidecar; returns the generator's byte size.
pub fn save_generator(path: &Path, model: &CvaeModel, seed: u64) -> Result<u64> {
    let sidecar = sidecar_path(path);
    let name = sidecar
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (weights, norm) = container::encode_generator(model, seed, &name)?;
    norm.save(&sidecar)?;
    weights.save(path)
}

pub fn load_generator(path: &Path) -> Result<CvaeModel> {
    require(path, "train-cvae")?;
    let weights = Container::load(path)?;
    let sidecar = path.with_file_name(container::generator_sidecar(&weights)?);
    require(&sidecar, "train-cvae")?;
    Ok(container::decode_generator(&weights, &Container::load(&sidecar)?)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BaseModelConfig;

    #[test]
    fn missing_artifacts_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let paths = Paths {
            root: dir.path().to_path_buf(),
        };
        let stage = |e: Error| match e {
            Error::Dependency { stage, .. } => stage,
            other => panic!("expected dependency error, got {other}"),
        };
        assert_eq!(stage(load_suite(&paths).unwrap_err()), "gen-data");
        assert_eq!(stage(load_base_model(&paths).unwrap_err()), "harvest");
        assert_eq!(stage(load_harvest(&paths, 2, 5).unwrap_err()), "harvest");
        let g = paths.generator(2, ConditionSource::SampleDerived, 12);
        assert_eq!(stage(load_generator(&g).unwrap_err()), "train-cvae");
    }

    #[test]
    fn sidecar_sits_next_to_generator() {
        let p = Path::new("out/r2/generator_sample_derived_n12.bin");
        assert_eq!(sidecar_path(p), Path::new("out/r2/generator_sample_derived_n12.norm.bin"));
    }

    #[test]
    fn base_model_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let paths = Paths {
            root: dir.path().to_path_buf(),
        };
        let m = BaseModel::init(BaseModelConfig::default()).unwrap();
        save_base_model(&paths, &m).unwrap();
        assert_eq!(load_base_model(&paths).unwrap(), m);
    }
}
