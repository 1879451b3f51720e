//! Synthetic marker-detection tasks and their text file format.
//!
//! Every task asks one question: does the sequence contain the task's marker
//! token? Background tokens are drawn from a task-specific band of the
//! vocabulary most of the time, so samples of different tasks are
//! distinguishable even before any fine-tuning.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};

/// Probability that a background token comes from the task's own band.
const BAND_PROB: f64 = 0.6;
const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub task_id: usize,
    pub description: String,
    pub marker_token: u32,
    pub seed: u64,
}

impl TaskSpec {
    pub fn describe_marker(marker: u32) -> String {
        format!("detect token {marker} in the sequence")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub label: usize,
}

/// Shape of the token space shared by every task of a suite.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Marker of every task in the suite; excluded from all background bands.
    pub markers: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub heldout: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 512,
            heldout: 64,
            test: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Sample>,
    pub heldout: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSuite {
    pub seed: u64,
    pub vocab: Vocab,
    pub sizes: SplitSizes,
    pub tasks: Vec<TaskData>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteConfig {
    pub seed: u64,
    pub n_tasks: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub sizes: SplitSizes,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_tasks: 5,
            vocab_size: 32,
            seq_len: 16,
            sizes: SplitSizes::default(),
        }
    }
}

/// Default marker of task `k`: 3, 9, 15, ... wrapping inside the vocabulary.
pub fn default_marker(k: usize, vocab_size: usize) -> u32 {
    ((3 + 6 * k) % vocab_size) as u32
}

impl Vocab {
    fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(config_err("seq_len", "must be at least 1"));
        }
        if self.vocab_size < 2 {
            return Err(config_err(
                "vocab_size",
                "need at least one non-marker token for negatives",
            ));
        }
        let mut seen = HashSet::new();
        for &m in &self.markers {
            if m as usize >= self.vocab_size {
                return Err(config_err("markers", format!("{m} is outside the vocabulary")));
            }
            if !seen.insert(m) {
                return Err(config_err("markers", format!("{m} used by two tasks")));
            }
        }
        Ok(())
    }

    /// Background tokens preferred by task `k`.
    fn band(&self, k: usize, n_bands: usize) -> Vec<u32> {
        (0..self.vocab_size as u32)
            .filter(|t| *t as usize % n_bands == k % n_bands && !self.markers.contains(t))
            .collect()
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

/// Samples for one task: exactly half positive (rounding down), then
/// shuffled. Positives get the marker forced into a random position;
/// negatives are redrawn until the marker is absent.
pub fn gen_dataset(spec: &TaskSpec, vocab: &Vocab, n: usize, seed: u64) -> Result<Vec<Sample>> {
    gen_unique(spec, vocab, n, seed, &mut HashSet::new())
}

fn gen_unique(
    spec: &TaskSpec,
    vocab: &Vocab,
    n: usize,
    seed: u64,
    seen: &mut HashSet<Vec<u32>>,
) -> Result<Vec<Sample>> {
    if n < 2 {
        return Err(Error::Input(format!("dataset needs at least 2 samples, got {n}")));
    }
    vocab.validate()?;
    if spec.marker_token as usize >= vocab.vocab_size {
        return Err(config_err("markers", "marker outside the vocabulary"));
    }
    let n_bands = vocab.markers.len().max(1);
    let band = vocab.band(spec.task_id, n_bands);
    let mut rng = Rng::new(seed);
    let draw_background = |rng: &mut Rng| -> Vec<u32> {
        (0..vocab.seq_len)
            .map(|_| {
                if !band.is_empty() && rng.uniform() < BAND_PROB {
                    band[rng.below(band.len())]
                } else {
                    rng.below(vocab.vocab_size) as u32
                }
            })
            .collect()
    };

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let mut attempts = 0;
        let tokens = loop {
            attempts += 1;
            if attempts > MAX_REJECTIONS {
                return Err(config_err(
                    "vocab_size",
                    format!(
                        "could not draw a distinct {} for marker {}",
                        if label == 1 { "positive" } else { "negative" },
                        spec.marker_token
                    ),
                ));
            }
            let mut tokens = draw_background(&mut rng);
            if label == 1 {
                let pos = rng.below(vocab.seq_len);
                tokens[pos] = spec.marker_token;
            } else if tokens.contains(&spec.marker_token) {
                continue;
            }
            if seen.insert(tokens.clone()) {
                break tokens;
            }
        };
        samples.push(Sample { tokens, label });
    }
    rng.shuffle(&mut samples);
    Ok(samples)
}

impl SuiteConfig {
    fn vocab(&self) -> Vocab {
        Vocab {
            vocab_size: self.vocab_size,
            seq_len: self.seq_len,
            markers: (0..self.n_tasks)
                .map(|k| default_marker(k, self.vocab_size))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 {
            return Err(config_err("n_tasks", "task list is empty"));
        }
        for (key, n) in [
            ("train_size", self.sizes.train),
            ("heldout_size", self.sizes.heldout),
            ("test_size", self.sizes.test),
        ] {
            if n < 2 {
                return Err(config_err(key, "each split needs at least 2 samples"));
            }
        }
        self.vocab().validate()
    }
}

impl TaskSuite {
    pub fn generate(config: &SuiteConfig) -> Result<Self> {
        config.validate()?;
        let vocab = config.vocab();
        let tasks = (0..config.n_tasks)
            .map(|k| {
                let spec = TaskSpec {
                    task_id: k,
                    description: TaskSpec::describe_marker(vocab.markers[k]),
                    marker_token: vocab.markers[k],
                    seed: derive_seed(config.seed, k as u64),
                };
                // One uniqueness set per task keeps the splits disjoint.
                let mut seen = HashSet::new();
                let sizes = config.sizes;
                let mut split = |i: u64, n: usize| {
                    gen_unique(&spec, &vocab, n, derive_seed(spec.seed, i), &mut seen)
                };
                let train = split(0, sizes.train)?;
                let heldout = split(1, sizes.heldout)?;
                let test = split(2, sizes.test)?;
                Ok(TaskData {
                    spec,
                    train,
                    heldout,
                    test,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed: config.seed,
            vocab,
            sizes: config.sizes,
            tasks,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn to_text(&self) -> String {
        let markers: Vec<String> = self.vocab.markers.iter().map(u32::to_string).collect();
        let mut out = format!(
            "# loragen-suite suite_seed={} vocab_size={} seq_len={} n_tasks={} markers={} train={} heldout={} test={}\n",
            self.seed,
            self.vocab.vocab_size,
            self.vocab.seq_len,
            self.tasks.len(),
            markers.join(","),
            self.sizes.train,
            self.sizes.heldout,
            self.sizes.test,
        );
        for task in &self.tasks {
            for s in task.train.iter().chain(&task.heldout).chain(&task.test) {
                let toks: Vec<String> = s.tokens.iter().map(u32::to_string).collect();
                let _ = writeln!(out, "{}, {}, {}", task.spec.task_id, s.label, toks.join(" "));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            reason: "empty file".into(),
        })?;
        let header = parse_header(header)?;
        if header.n_tasks == 0 {
            return Err(config_err("n_tasks", "task list is empty"));
        }
        header.vocab.validate()?;
        let per_task = header.sizes.train + header.sizes.heldout + header.sizes.test;
        let mut tasks = Vec::with_capacity(header.n_tasks);
        for k in 0..header.n_tasks {
            let mut samples = Vec::with_capacity(per_task);
            for _ in 0..per_task {
                let (idx, line) = lines.next().ok_or_else(|| Error::Parse {
                    line: text.lines().count() + 1,
                    reason: format!(
                        "file truncated: expected {} records",
                        per_task * header.n_tasks
                    ),
                })?;
                samples.push(parse_record(line, idx + 1, k, &header.vocab)?);
            }
            let test = samples.split_off(header.sizes.train + header.sizes.heldout);
            let heldout = samples.split_off(header.sizes.train);
            let marker = header.vocab.markers[k];
            tasks.push(TaskData {
                spec: TaskSpec {
                    task_id: k,
                    description: TaskSpec::describe_marker(marker),
                    marker_token: marker,
                    seed: derive_seed(header.seed, k as u64),
                },
                train: samples,
                heldout,
                test,
            });
        }
        if let Some((idx, line)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::Parse {
                line: idx + 1,
                reason: format!("unexpected trailing record `{line}`"),
            });
        }
        Ok(Self {
            seed: header.seed,
            vocab: header.vocab,
            sizes: header.sizes,
            tasks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

struct Header {
    seed: u64,
    n_tasks: usize,
    vocab: Vocab,
    sizes: SplitSizes,
}

fn parse_header(line: &str) -> Result<Header> {
    let perr = |reason: String| Error::Parse { line: 1, reason };
    let body = line
        .strip_prefix("# loragen-suite")
        .ok_or_else(|| perr("missing `# loragen-suite` header".into()))?;
    let mut fields = std::collections::HashMap::new();
    for kv in body.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| perr(format!("header field `{kv}` is not key=value")))?;
        fields.insert(k, v);
    }
    let get = |key: &str| -> Result<&str> {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| perr(format!("header is missing `{key}`")))
    };
    let num = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| perr(format!("header field `{key}` is not an integer")))
    };
    let markers = get("markers")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|m| m.parse::<u32>().map_err(|_| perr(format!("bad marker `{m}`"))))
        .collect::<Result<Vec<_>>>()?;
    let n_tasks = num("n_tasks")?;
    if markers.len() != n_tasks {
        return Err(perr(format!(
            "{} markers for {n_tasks} tasks",
            markers.len()
        )));
    }
    Ok(Header {
        seed: get("suite_seed")?
            .parse()
            .map_err(|_| perr("suite_seed is not an integer".into()))?,
        n_tasks,
        vocab: Vocab {
            vocab_size: num("vocab_size")?,
            seq_len: num("seq_len")?,
            markers,
        },
        sizes: SplitSizes {
            train: num("train")?,
            heldout: num("heldout")?,
            test: num("test")?,
        },
    })
}

fn parse_record(line: &str, lineno: usize, task: usize, vocab: &Vocab) -> Result<Sample> {
    let perr = |reason: String| Error::Parse {
        line: lineno,
        reason,
    };
    let mut parts = line.splitn(3, ',');
    let (Some(id), Some(label), Some(toks)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(perr("expected `task_id, label, tokens`".into()));
    };
    let id: usize = id
        .trim()
        .parse()
        .map_err(|_| perr(format!("bad task id `{}`", id.trim())))?;
    if id != task {
        return Err(perr(format!("record for task {id} where task {task} was expected")));
    }
    let label: usize = match label.trim() {
        "0" => 0,
        "1" => 1,
        other => return Err(perr(format!("label `{other}` is not 0 or 1"))),
    };
    let tokens = toks
        .split_whitespace()
        .map(|t| match t.parse::<u32>() {
            Ok(v) if (v as usize) < vocab.vocab_size => Ok(v),
            _ => Err(perr(format!("token `{t}` outside the vocabulary"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if tokens.len() != vocab.seq_len {
        return Err(perr(format!(
            "expected {} tokens, found {}",
            vocab.seq_len,
            tokens.len()
        )));
    }
    Ok(Sample { tokens, label })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_suite() -> SuiteConfig {
        SuiteConfig {
            seed: 11,
            n_tasks: 3,
            sizes: SplitSizes {
                train: 40,
                heldout: 8,
                test: 16,
            },
            ..SuiteConfig::default()
        }
    }

    fn spec(marker: u32) -> (TaskSpec, Vocab) {
        let vocab = Vocab {
            vocab_size: 32,
            seq_len: 16,
            markers: vec![marker],
        };
        let spec = TaskSpec {
            task_id: 0,
            description: TaskSpec::describe_marker(marker),
            marker_token: marker,
            seed: 1,
        };
        (spec, vocab)
    }

    #[test]
    fn labels_match_marker_presence() {
        let (spec, vocab) = spec(7);
        let data = gen_dataset(&spec, &vocab, 10, 3).unwrap();
        assert_eq!(data.len(), 10);
        for s in &data {
            assert_eq!(s.label == 1, s.tokens.contains(&7));
        }
    }

    #[test]
    fn balanced_at_512() {
        let (spec, vocab) = spec(9);
        let data = gen_dataset(&spec, &vocab, 512, 5).unwrap();
        let pos = data.iter().filter(|s| s.label == 1).count();
        assert!((230..=282).contains(&pos));
    }

    #[test]
    fn deterministic() {
        let (spec, vocab) = spec(9);
        assert_eq!(
            gen_dataset(&spec, &vocab, 64, 5).unwrap(),
            gen_dataset(&spec, &vocab, 64, 5).unwrap()
        );
    }

    #[test]
    fn tiny_vocab_is_config_error() {
        let (spec, mut vocab) = spec(0);
        vocab.vocab_size = 1;
        assert!(matches!(
            gen_dataset(&spec, &vocab, 4, 1),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn too_few_samples_rejected() {
        let (spec, vocab) = spec(3);
        assert!(gen_dataset(&spec, &vocab, 1, 1).is_err());
    }

    #[test]
    fn splits_are_disjoint() {
        let suite = TaskSuite::generate(&small_suite()).unwrap();
        for t in &suite.tasks {
            let train: HashSet<_> = t.train.iter().map(|s| &s.tokens).collect();
            assert!(t.heldout.iter().chain(&t.test).all(|s| !train.contains(&s.tokens)));
            let held: HashSet<_> = t.heldout.iter().map(|s| &s.tokens).collect();
            assert!(t.test.iter().all(|s| !held.contains(&s.tokens)));
        }
    }

    #[test]
    fn text_roundtrip() {
        let suite = TaskSuite::generate(&small_suite()).unwrap();
        let back = TaskSuite::from_text(&suite.to_text()).unwrap();
        assert_eq!(suite, back);
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let text = TaskSuite::generate(&small_suite()).unwrap().to_text();
        let cut: String = text.lines().take(50).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            TaskSuite::from_text(&cut),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn malformed_record_reports_line() {
        let text = TaskSuite::generate(&small_suite()).unwrap().to_text();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[5] = "0, 2, 1 2 3".into();
        match TaskSuite::from_text(&lines.join("\n")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_task_list_rejected() {
        let cfg = SuiteConfig {
            n_tasks: 0,
            ..small_suite()
        };
        assert!(matches!(TaskSuite::generate(&cfg), Err(Error::Config { .. })));
        let header = "# loragen-suite suite_seed=1 vocab_size=32 seq_len=16 n_tasks=0 markers= train=4 heldout=2 test=2\n";
        assert!(TaskSuite::from_text(header).is_err());
    }

    #[test]
    fn file_size_linear_in_samples() {
        let size = |train: usize| {
            let cfg = SuiteConfig {
                sizes: SplitSizes {
                    train,
                    heldout: 2,
                    test: 2,
                },
                ..small_suite()
            };
            TaskSuite::generate(&cfg).unwrap().to_text().len() as f64
        };
        let (a, b, c) = (size(100), size(200), size(400));
        // second differences of an affine function vanish up to digit-count noise
        let ratio = (c - b) / (b - a);
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
    }

    proptest! {
        #[test]
        fn label_invariant_holds(seed in any::<u64>(), marker in 0u32..32, n in 2usize..64) {
            let (spec, vocab) = spec(marker);
            let data = gen_dataset(&spec, &vocab, n, seed).unwrap();
            prop_assert_eq!(data.len(), n);
            let pos = data.iter().filter(|s| s.label == 1).count();
            prop_assert_eq!(pos, n / 2);
            for s in &data {
                prop_assert_eq!(s.tokens.len(), 16);
                prop_assert_eq!(s.label == 1, s.tokens.contains(&marker));
            }
        }
    }
}
