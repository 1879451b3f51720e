//! Task vectors: the mean final hidden state of a task's samples, or a
//! hashed bag-of-words embedding of the task description.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{BaseModel, LoraAdapter};
use crate::rng::{derive_seed, Rng};
use crate::tensor::l2_norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    SampleDerived,
    DescriptionDerived,
}

impl fmt::Display for ConditionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConditionSource::SampleDerived => "sample_derived",
            ConditionSource::DescriptionDerived => "description_derived",
        })
    }
}

impl std::str::FromStr for ConditionSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample_derived" => Ok(Self::SampleDerived),
            "description_derived" => Ok(Self::DescriptionDerived),
            other => Err(Error::Config {
                key: "condition".into(),
                reason: format!("unknown condition source `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVector {
    pub task_id: usize,
    pub source: ConditionSource,
    pub values: Vec<f32>,
}

impl TaskVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f32 {
        l2_norm(&self.values)
    }
}

/// Element-wise mean of equal-length vectors.
pub fn mean_of(vectors: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Input("task vector needs at least one sample".into()))?;
    let d = first.len();
    let mut sum = vec![0.0f64; d];
    for v in vectors {
        if v.len() != d {
            return Err(Error::Dimension {
                op: "task_vector",
                lhs: vec![d],
                rhs: vec![v.len()],
            });
        }
        sum.iter_mut().zip(v).for_each(|(s, &x)| *s += x as f64);
    }
    let n = vectors.len() as f64;
    Ok(sum.into_iter().map(|s| (s / n) as f32).collect())
}

/// Mean of the final-layer, final-position hidden state over `samples`.
pub fn extract_task_vector(
    model: &BaseModel,
    adapter: Option<&LoraAdapter>,
    samples: &[Sample],
    task_id: usize,
) -> Result<TaskVector> {
    if samples.is_empty() {
        return Err(Error::Input("task vector needs at least one sample".into()));
    }
    let tokens: Vec<&[u32]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
    let hidden = model.hidden_last(adapter, &tokens)?;
    Ok(TaskVector {
        task_id,
        source: ConditionSource::SampleDerived,
        values: mean_of(&hidden)?,
    })
}

/// 64-bit FNV-1a; stable across platforms and toolchains, unlike `std` hashers.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministic text embedding: each lowercase whitespace token hashes to a
/// seeded Gaussian vector; the average is rescaled to `target_norm`.
pub fn describe_task_vector(
    description: &str,
    d: usize,
    seed: u64,
    target_norm: f32,
    task_id: usize,
) -> Result<TaskVector> {
    let lower = description.to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::Input("description is empty".into()));
    }
    if d == 0 {
        return Err(Error::Input("task vector dimension must be positive".into()));
    }
    let mut sum = vec![0.0f64; d];
    for w in &words {
        let mut rng = Rng::new(derive_seed(seed, fnv1a(w.as_bytes())));
        sum.iter_mut().for_each(|s| *s += rng.normal());
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let values = sum
        .iter()
        .map(|x| (x / norm * target_norm as f64) as f32)
        .collect();
    Ok(TaskVector {
        task_id,
        source: ConditionSource::DescriptionDerived,
        values,
    })
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).powi(2)).sum()
}

/// Leave-one-out nearest-centroid accuracy: each vector is classified against
/// its own group's centroid computed without it and every other full centroid.
pub fn separability_probe(groups: &[Vec<Vec<f32>>]) -> Result<f64> {
    if groups.len() < 2 {
        return Err(Error::Input(format!(
            "probe needs at least 2 tasks, got {}",
            groups.len()
        )));
    }
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(Error::Input(format!(
            "probe needs at least 2 vectors per task, got {}",
            g.len()
        )));
    }
    let d = groups[0][0].len();
    let sums: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mut s = vec![0.0f64; d];
            for v in g {
                s.iter_mut().zip(v).for_each(|(a, &x)| *a += x as f64);
            }
            s
        })
        .collect();
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(groups)
        .map(|(s, g)| s.iter().map(|x| x / g.len() as f64).collect())
        .collect();
    let mut correct = 0usize;
    let mut total = 0usize;
    for (k, g) in groups.iter().enumerate() {
        let m = (g.len() - 1) as f64;
        for v in g {
            if v.len() != d {
                return Err(Error::Dimension {
                    op: "separability_probe",
                    lhs: vec![d],
                    rhs: vec![v.len()],
                });
            }
            let own: Vec<f64> = sums[k]
                .iter()
                .zip(v)
                .map(|(s, &x)| (s - x as f64) / m)
                .collect();
            let own_dist = sq_dist(v, &own);
            let beaten = centroids
                .iter()
                .enumerate()
                .any(|(j, c)| j != k && sq_dist(v, c) <= own_dist);
            correct += usize::from(!beaten);
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// The same probe after randomly reassigning vectors to groups of the
/// original sizes; its expectation is chance level.
pub fn permutation_null(groups: &[Vec<Vec<f32>>], seed: u64) -> Result<f64> {
    let mut pool: Vec<Vec<f32>> = groups.iter().flatten().cloned().collect();
    Rng::new(seed).shuffle(&mut pool);
    let mut shuffled = Vec::with_capacity(groups.len());
    let mut rest = pool.as_slice();
    for g in groups {
        let (head, tail) = rest.split_at(g.len());
        shuffled.push(head.to_vec());
        rest = tail;
    }
    separability_probe(&shuffled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn cosine(a: &[f32], b: &[f32]) -> f32 {
        let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (l2_norm(a) * l2_norm(b))
    }

    #[test]
    fn two_vector_average() {
        assert_eq!(mean_of(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), vec![0.5, 0.5]);
        assert!(mean_of(&[]).is_err());
    }

    #[test]
    fn descriptions_are_deterministic_and_distinct() {
        let a = describe_task_vector("detect token 3", 32, 7, 2.0, 0).unwrap();
        let b = describe_task_vector("Detect   token 3", 32, 7, 2.0, 0).unwrap();
        let c = describe_task_vector("detect token 9", 32, 7, 2.0, 1).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.dim(), 32);
        assert!((a.norm() - 2.0).abs() < 1e-5);
        assert!(cosine(&a.values, &c.values) < 0.99);
        assert!(describe_task_vector("   ", 32, 7, 1.0, 0).is_err());
    }

    #[test]
    fn separated_clusters_are_perfect() {
        let groups = vec![vec![vec![1.0, 0.0]; 8], vec![vec![0.0, 1.0]; 8]];
        assert_eq!(separability_probe(&groups).unwrap(), 1.0);
        assert!(separability_probe(&groups[..1]).is_err());
    }

    #[test]
    fn permutation_null_is_near_chance() {
        let mut rng = Rng::new(4);
        let groups: Vec<Vec<Vec<f32>>> = (0..5)
            .map(|k| {
                (0..40)
                    .map(|_| {
                        let mut v: Vec<f32> = (0..8).map(|_| rng.normal_f32() * 0.3).collect();
                        v[k] += 3.0;
                        v
                    })
                    .collect()
            })
            .collect();
        assert!(separability_probe(&groups).unwrap() > 0.95);
        let null = permutation_null(&groups, 9).unwrap();
        assert!((null - 0.2).abs() <= 0.1, "null accuracy {null}");
    }

    proptest! {
        #[test]
        fn mean_is_permutation_invariant_and_in_hull(
            rows in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 4), 1..12),
            seed in any::<u64>()
        ) {
            let mut shuffled = rows.clone();
            Rng::new(seed).shuffle(&mut shuffled);
            let a = mean_of(&rows).unwrap();
            let b = mean_of(&shuffled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()));
            }
            let max_norm = rows.iter().map(|r| l2_norm(r)).fold(0.0f32, f32::max);
            prop_assert!(l2_norm(&a) <= max_norm * (1.0 + 1e-6) + 1e-6);
        }
    }
}
