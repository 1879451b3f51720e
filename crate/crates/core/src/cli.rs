//! `loragen` subcommands. Every command reads the run configuration, applies
//! flag overrides, validates, then runs one stage against the output dir.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{self, StorageReport};
use crate::config::RunConfig;
use crate::container;
use crate::data::TaskSuite;
use crate::error::{Error, Result};
use crate::pipeline::{self, Harvest, Paths};
use crate::task_vector::ConditionSource;

#[derive(Debug, Parser)]
#[command(name = "loragen", version, about = "Generate task-specific LoRA adapters with a conditional VAE")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat key = value configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Global seed; every stage seed is derived from it.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory for artifacts and reports.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// LoRA rank of the stage.
    #[arg(long, value_name = "R")]
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Rank,
    Depth,
    Conditioning,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build and save the synthetic task suite.
    GenData(Common),
    /// Pretrain the base model, fine-tune every task, save checkpoints and task vectors.
    Harvest(Common),
    /// Fit the normalization and train the generator.
    TrainCvae(Common),
    /// Draw one adapter for a task or a free-text description.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "ID")]
        task: Option<usize>,
        #[arg(long, value_name = "TEXT")]
        describe: Option<String>,
    },
    /// Main accuracy table, separability probe and storage report.
    Eval(Common),
    /// Rank, depth or conditioning ablation.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        which: Which,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::Harvest(c) | Command::TrainCvae(c) | Command::Eval(c) => c,
            Command::Generate { common, .. } | Command::Ablate { common, .. } => common,
        }
    }
}

pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(rank) = common.rank {
        cfg.rank = rank;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_report(paths: &Paths, name: &str, text: &str) -> Result<PathBuf> {
    let dir = paths.reports();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn emit(out: &mut impl std::io::Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

/// Loads the harvest at `rank`, running and saving it first if it is missing.
fn harvest_or_run(cfg: &RunConfig, paths: &Paths, suite: &TaskSuite, rank: usize) -> Result<Harvest> {
    match pipeline::load_harvest(paths, rank, suite.n_tasks()) {
        Ok(h) => Ok(h),
        Err(Error::Dependency { .. }) => {
            let model = pipeline::load_base_model(paths)?;
            log::info!("no checkpoints at rank {rank}; harvesting");
            let h = pipeline::harvest(cfg, suite, &model, rank)?;
            pipeline::save_harvest(paths, &h)?;
            Ok(h)
        }
        Err(e) => Err(e),
    }
}

fn label_for(text: &str) -> String {
    let slug: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("describe_{}", slug.trim_matches('_'))
}

pub fn run(command: &Command, out: &mut impl std::io::Write) -> Result<()> {
    let cfg = resolve_config(command.common())?;
    let paths = Paths::new(&cfg);
    match command {
        Command::GenData(_) => {
            let suite = TaskSuite::generate(&cfg.suite())?;
            pipeline::save_suite(&paths, &suite)?;
            std::fs::write(paths.root.join("config.txt"), cfg.to_text())
                .map_err(|e| Error::io(paths.root.join("config.txt"), e))?;
            let mut s = format!("wrote {}\n", paths.suite().display());
            for t in &suite.tasks {
                s += &format!(
                    "task {}: \"{}\" train {} heldout {} test {}\n",
                    t.spec.task_id,
                    t.spec.description,
                    t.train.len(),
                    t.heldout.len(),
                    t.test.len()
                );
            }
            emit(out, &s)
        }
        Command::Harvest(_) => {
            let suite = pipeline::load_suite(&paths)?;
            let model = pipeline::pretrain_base(&cfg, &suite)?;
            pipeline::save_base_model(&paths, &model)?;
            let h = pipeline::harvest(&cfg, &suite, &model, cfg.rank)?;
            let bytes = pipeline::save_harvest(&paths, &h)?;
            let mut s = format!(
                "rank {} P {}: {} checkpoints per task, {bytes} bytes under {}\n",
                h.rank,
                h.param_count(),
                cfg.save_last,
                paths.rank_dir(h.rank).display()
            );
            for t in &h.tasks {
                let last = t.records.last().expect("non-empty window");
                s += &format!(
                    "task {}: final train accuracy {:.3}, task vector norm {:.3}\n",
                    t.task_id,
                    last.train_accuracy,
                    t.task_vector.norm()
                );
            }
            emit(out, &s)
        }
        Command::TrainCvae(_) => {
            let suite = pipeline::load_suite(&paths)?;
            let h = pipeline::load_harvest(&paths, cfg.rank, suite.n_tasks())?;
            let conds = pipeline::conditions(&cfg, &suite, &h, cfg.condition)?;
            let (cvae, history) = pipeline::train_generator(&cfg, &h, &conds, cfg.cvae_layers, cfg.cvae_epochs)?;
            let path = paths.generator(cfg.rank, cfg.condition, cfg.cvae_layers);
            let seed = cfg.cvae_seed(cfg.rank, cfg.cvae_layers, cfg.condition);
            let bytes = pipeline::save_generator(&path, &cvae, seed)?;
            let last = history.last().copied().unwrap_or_default();
            emit(
                out,
                &format!(
                    "wrote {} ({bytes} bytes, {} parameters); final loss {:.5} (mse {:.5}, kl {:.3})\n",
                    path.display(),
                    cvae.param_count(),
                    last.loss,
                    last.mse,
                    last.kl
                ),
            )
        }
        Command::Generate { task, describe, .. } => {
            let suite = pipeline::load_suite(&paths)?;
            let h = pipeline::load_harvest(&paths, cfg.rank, suite.n_tasks())?;
            let cvae = pipeline::load_generator(&paths.generator(cfg.rank, cfg.condition, cfg.cvae_layers))?;
            let (cond, name) = match (task, describe) {
                (_, Some(text)) => {
                    let id = task.unwrap_or(0);
                    let v = pipeline::describe(&cfg, text, pipeline::description_norm(&h), id)?;
                    (v, label_for(text))
                }
                (Some(k), None) => {
                    if *k >= suite.n_tasks() {
                        return Err(Error::Input(format!(
                            "task {k} does not exist (suite has {})",
                            suite.n_tasks()
                        )));
                    }
                    let conds = pipeline::conditions(&cfg, &suite, &h, cvae.source)?;
                    (conds[*k].clone(), format!("task{k}"))
                }
                (None, None) => return Err(Error::Input("pass --task ID or --describe TEXT".into())),
            };
            let seed = pipeline::generation_seed(&cfg, cfg.rank, cfg.cvae_layers, cond.source, cond.task_id);
            let values = pipeline::generate(&cvae, &cond, seed)?;
            let path = paths.generated(cfg.rank, &name);
            container::encode_adapter(&values, &h.layout, task.or(Some(cond.task_id)), Some(cond.source), seed)?
                .save(&path)?;
            let mut s = format!("wrote {}\n", path.display());
            if let (Some(k), None) = (task, describe) {
                let model = pipeline::load_base_model(&paths)?;
                let acc = bench::evaluate(&model, &values, &h.layout, &suite.tasks[*k])?;
                s += &format!("task {k} test accuracy {acc:.3}\n");
            }
            emit(out, &s)
        }
        Command::Eval(_) => {
            let suite = pipeline::load_suite(&paths)?;
            let model = pipeline::load_base_model(&paths)?;
            let h = pipeline::load_harvest(&paths, cfg.rank, suite.n_tasks())?;
            let gen_path = paths.generator(cfg.rank, cfg.condition, cfg.cvae_layers);
            let cvae = pipeline::load_generator(&gen_path)?;
            let conds = pipeline::conditions(&cfg, &suite, &h, cvae.source)?;
            let generated = bench::generate_all(&cfg, &cvae, &conds, cfg.rank)?;
            let rows = bench::method_table(&cfg, &suite, &model, &h, &generated)?;
            let probe = bench::separability(&cfg, &suite, &model, &h)?;
            let spec = bench::specificity(&cvae, &h, &generated)?;
            let storage = bench::storage_report(&paths, cfg.rank, suite.n_tasks(), &gen_path)?;

            let mut s = bench::render_method_table("main table", &rows);
            s += &format!(
                "separability probe: {:.3} over positive samples (permutation null {:.3}, at least {} vectors per task); {:.3} with both labels\n",
                probe.accuracy, probe.null, probe.vectors_per_task, probe.mixed_labels
            );
            s += &format!(
                "generated vector nearest its own centroid: {}/{}\n",
                spec.iter().filter(|x| x.nearest_is_own()).count(),
                spec.len()
            );
            s += &bench::render_storage(std::slice::from_ref(&storage));
            s += bench::PAPER_CONTEXT;
            s.push('\n');
            write_report(&paths, "main_table.txt", &s)?;
            bench::write_jsonl(&paths.reports().join("main_table.jsonl"), &rows)?;
            write_report(&paths, "storage.json", &storage_json(&storage))?;
            emit(out, &s)
        }
        Command::Ablate { which, .. } => {
            let suite = pipeline::load_suite(&paths)?;
            let model = pipeline::load_base_model(&paths)?;
            let (name, text, rows) = match which {
                Which::Rank => {
                    let harvests = cfg
                        .ranks
                        .iter()
                        .map(|&r| harvest_or_run(&cfg, &paths, &suite, r))
                        .collect::<Result<Vec<_>>>()?;
                    let t = bench::rank_ablation(&cfg, &suite, &model, &harvests, &paths, cfg.ablation_epochs)?;
                    let storage = cfg
                        .ranks
                        .iter()
                        .map(|&r| {
                            let g = paths.ablation_generator(r, ConditionSource::SampleDerived);
                            bench::storage_report(&paths, r, suite.n_tasks(), &g)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let text = bench::render_rank_ablation(&t) + &bench::render_storage(&storage);
                    ("rank_ablation", text, t.rows)
                }
                Which::Depth => {
                    let harvests = cfg
                        .ranks
                        .iter()
                        .map(|&r| harvest_or_run(&cfg, &paths, &suite, r))
                        .collect::<Result<Vec<_>>>()?;
                    let (grid, rows) = bench::depth_ablation(&cfg, &suite, &model, &harvests)?;
                    ("depth_ablation", bench::render_depth_grid(&grid), rows)
                }
                Which::Conditioning => {
                    let h = harvest_or_run(&cfg, &paths, &suite, cfg.rank)?;
                    let t = bench::conditioning_ablation(&cfg, &suite, &model, &h, cfg.ablation_epochs)?;
                    let rows = t
                        .sample_derived
                        .iter()
                        .chain(&t.description_derived)
                        .cloned()
                        .collect();
                    ("conditioning_ablation", bench::render_conditioning(&t), rows)
                }
            };
            write_report(&paths, &format!("{name}.txt"), &text)?;
            bench::write_jsonl(&paths.reports().join(format!("{name}.jsonl")), &rows)?;
            emit(out, &text)
        }
    }
}

fn storage_json(r: &StorageReport) -> String {
    serde_json::to_string_pretty(r).expect("plain struct") + "\n"
}

/// One machine-parsable line: `error[kind]: message`.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error[{}]: {msg}", e.kind())
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init()
        .ok();
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(&cli.command, &mut lock) {
        Ok(()) => {
            let _ = lock.flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("loragen").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_config() {
        let cli = parse(&["harvest", "--seed", "9", "--out", "/tmp/x", "--rank", "4"]);
        let cfg = resolve_config(cli.command.common()).unwrap();
        assert_eq!((cfg.seed, cfg.rank), (9, 4));
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn ablate_requires_which() {
        assert!(Cli::try_parse_from(["loragen", "ablate"]).is_err());
        let cli = parse(&["ablate", "--which", "depth"]);
        assert!(matches!(cli.command, Command::Ablate { which: Which::Depth, .. }));
    }

    #[test]
    fn error_line_is_one_line_with_kind() {
        let e = Error::Dependency {
            stage: "harvest".into(),
            path: PathBuf::from("out/base_model.bin"),
        };
        let line = error_line(&e);
        assert!(line.starts_with("error[dependency]: "));
        assert!(line.contains("`harvest`"));
        assert!(!line.contains('\n'));
    }

    #[test]
    fn description_labels_are_file_safe() {
        assert_eq!(label_for("Detect token 3!"), "describe_detect_token_3");
    }
}
