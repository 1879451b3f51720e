//! Per-task LoRA fine-tuning that keeps the trailing window of checkpoints,
//! and the per-dimension normalization applied before generator training.

use serde::{Deserialize, Serialize};

use crate::data::{Sample, TaskData};
use crate::error::{Error, Result};
use crate::model::{argmax, AdapterLayout, BaseModel, LoraAdapter};
use crate::rng::Rng;
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, Tape};

/// Floor applied to every per-dimension standard deviation.
pub const STD_FLOOR: f32 = 1e-6;
/// Accuracy below which a finished run logs a convergence warning.
pub const CONVERGED_ACCURACY: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub save_last: usize,
    pub lr: f32,
    pub batch: usize,
    pub clip: f32,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            save_last: 50,
            lr: 1e-3,
            batch: 32,
            clip: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub task_id: usize,
    /// 1-based epoch after which the adapter was saved.
    pub epoch: usize,
    pub values: Vec<f32>,
    /// Running training accuracy over that epoch's minibatches.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub records: Vec<CheckpointRecord>,
    pub adapter: LoraAdapter,
    pub converged: bool,
}

/// Trains a fresh adapter on `task.train`; the base model is borrowed
/// immutably, so only adapter factors can move.
pub fn finetune_lora(
    model: &BaseModel,
    task: &TaskData,
    layout: &AdapterLayout,
    opts: &FinetuneConfig,
) -> Result<FinetuneRun> {
    if opts.save_last == 0 || opts.epochs < opts.save_last {
        return Err(Error::Config {
            key: "save_last".into(),
            reason: format!(
                "need epochs ≥ save_last ≥ 1, got epochs={} save_last={}",
                opts.epochs, opts.save_last
            ),
        });
    }
    if opts.batch == 0 {
        return Err(Error::Config {
            key: "batch".into(),
            reason: "must be at least 1".into(),
        });
    }
    let mut rng = Rng::new(opts.seed);
    let mut adapter = LoraAdapter::init(layout.clone(), &mut rng);
    let mut adam = Adam::new(AdamConfig::with_lr(opts.lr));
    let train: &[Sample] = &task.train;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(opts.save_last);
    let mut last_acc = 0.0;

    for epoch in 1..=opts.epochs {
        rng.shuffle(&mut order);
        let mut correct = 0usize;
        for chunk in order.chunks(opts.batch) {
            let tokens: Vec<&[u32]> = chunk.iter().map(|&i| train[i].tokens.as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let tape = Tape::new();
            let vars = adapter.record(&tape);
            let fw = model.forward(&tape, Some(&vars), &tokens)?;
            correct += fw
                .logits
                .value()
                .data()
                .chunks(model.config.n_classes)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            let loss = fw.logits.cross_entropy(&labels)?;
            if !loss.item().is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("non-finite loss on task {}", task.spec.task_id),
                });
            }
            let mut grads = tape.backward(loss)?;
            let taken: Vec<_> = vars.factors.iter().map(|v| grads.take(*v)).collect();
            drop((fw, vars));
            for (f, g) in adapter.factors.iter_mut().zip(taken) {
                f.set_grad(g)?;
            }
            clip_grad_norm(&mut adapter.factors, opts.clip);
            adam.step(&mut adapter.factors).map_err(|e| Error::Training {
                epoch,
                reason: e.to_string(),
            })?;
        }
        last_acc = correct as f64 / train.len() as f64;
        if epoch > opts.epochs - opts.save_last {
            records.push(CheckpointRecord {
                task_id: task.spec.task_id,
                epoch,
                values: adapter.flatten(),
                train_accuracy: last_acc,
            });
        }
    }
    for f in adapter.factors.iter_mut() {
        f.zero_grad();
    }
    let converged = last_acc >= CONVERGED_ACCURACY;
    if !converged {
        log::warn!(
            "task {} rank {}: final training accuracy {:.3} below {CONVERGED_ACCURACY}",
            task.spec.task_id,
            layout.rank,
            last_acc
        );
    }
    Ok(FinetuneRun {
        records,
        adapter,
        converged,
    })
}

/// Per-dimension population mean and floored standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    pub fn fit<'a>(vectors: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let vectors: Vec<&[f32]> = vectors.into_iter().collect();
        if vectors.len() < 2 {
            return Err(Error::Input(format!(
                "normalization needs at least 2 vectors, got {}",
                vectors.len()
            )));
        }
        let p = vectors[0].len();
        if let Some(bad) = vectors.iter().find(|v| v.len() != p) {
            return Err(Error::Dimension {
                op: "fit_norm",
                lhs: vec![p],
                rhs: vec![bad.len()],
            });
        }
        let n = vectors.len() as f64;
        let mut mean = vec![0.0f64; p];
        for v in &vectors {
            mean.iter_mut().zip(v.iter()).for_each(|(m, &x)| *m += x as f64);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; p];
        for v in &vectors {
            for ((s, &x), m) in var.iter_mut().zip(v.iter()).zip(&mean) {
                *s += (x as f64 - m).powi(2);
            }
        }
        Ok(Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var
                .iter()
                .map(|&s| ((s / n).sqrt() as f32).max(STD_FLOOR))
                .collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, v: &[f32]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::Dimension {
                op: "norm_stats",
                lhs: vec![self.dim()],
                rhs: vec![v.len()],
            });
        }
        Ok(())
    }

    /// `(l − μ) / σ`
    pub fn apply(&self, v: &[f32]) -> Result<Vec<f32>> {
        self.check(v)?;
        Ok(v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&x, &m), &s)| ((x as f64 - m as f64) / s as f64) as f32)
            .collect())
    }

    /// `z · σ + μ`
    pub fn invert(&self, v: &[f32]) -> Result<Vec<f32>> {
        self.check(v)?;
        Ok(v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&z, &m), &s)| (z as f64 * s as f64 + m as f64) as f32)
            .collect())
    }
}

/// Mean of several flattened vectors, accumulated in f64.
pub fn mean_vector<'a>(vectors: impl IntoIterator<Item = &'a [f32]>) -> Result<Vec<f32>> {
    let mut sum: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for v in vectors {
        if n == 0 {
            sum = vec![0.0; v.len()];
        } else if v.len() != sum.len() {
            return Err(Error::Dimension {
                op: "mean_vector",
                lhs: vec![sum.len()],
                rhs: vec![v.len()],
            });
        }
        sum.iter_mut().zip(v).for_each(|(s, &x)| *s += x as f64);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Input("cannot average an empty set of vectors".into()));
    }
    Ok(sum.iter().map(|s| (s / n as f64) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_stats() {
        let a = [0.0f32, 2.0];
        let b = [2.0f32, 2.0];
        let s = NormStats::fit([&a[..], &b[..]]).unwrap();
        assert_eq!(s.mean, vec![1.0, 2.0]);
        assert_eq!(s.std, vec![1.0, STD_FLOOR]);
        assert_eq!(s.apply(&a).unwrap(), vec![-1.0, 0.0]);
    }

    #[test]
    fn fit_needs_two_records() {
        let a = [1.0f32];
        assert!(NormStats::fit([&a[..]]).is_err());
        let b = [1.0f32, 2.0];
        assert!(matches!(
            NormStats::fit([&a[..], &b[..]]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn mean_vector_symmetry() {
        let l = [1.0f32, -2.0, 3.5];
        let neg: Vec<f32> = l.iter().map(|x| -x).collect();
        assert_eq!(mean_vector([&l[..], &neg[..]]).unwrap(), vec![0.0; 3]);
        assert_eq!(mean_vector([&l[..]]).unwrap(), l.to_vec());
        assert!(mean_vector(std::iter::empty()).is_err());
    }

    proptest! {
        #[test]
        fn normalization_roundtrip(
            rows in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 6), 2..10)
        ) {
            let stats = NormStats::fit(rows.iter().map(Vec::as_slice)).unwrap();
            prop_assert!(stats.std.iter().all(|&s| s >= STD_FLOOR));
            for r in &rows {
                let back = stats.invert(&stats.apply(r).unwrap()).unwrap();
                let norm = r.iter().map(|x| x * x).sum::<f32>().sqrt();
                let err = r.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f32>().sqrt();
                prop_assert!(err <= 1e-6 * norm.max(1e-6) + 1e-7, "err {err} norm {norm}");
            }
        }
    }
}
