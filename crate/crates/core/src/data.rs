//! Synthetic sequence-classification task and dataset plumbing.
//!
//! Each class owns a prototype token. A sample is a sequence of prototype
//! tokens of random classes; one position, flagged on the last feature, holds
//! the label's prototype. Every element gets isotropic Gaussian noise, and
//! labels cycle through the classes so the task is balanced. Solving it needs
//! attention from the pooled tokens to the flagged one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{QtError, Result};
use crate::model::ToyTransformerConfig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub num_samples: usize,
    /// Standard deviation of the additive per-element noise (prototypes have
    /// unit variance).
    pub noise: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            num_samples: 5000,
            noise: 1.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    seq_len: usize,
    input_dim: usize,
    num_classes: usize,
}

/// Offset on the marker feature of the token that carries the label.
const MARKER: f64 = 4.0;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Dataset {
    pub fn synthetic(task: &TaskConfig, model: &ToyTransformerConfig) -> Result<Dataset> {
        if task.num_samples == 0 {
            return Err(QtError::data("synthetic task needs at least one sample"));
        }
        if !(task.noise.is_finite() && task.noise >= 0.0) {
            return Err(QtError::config(format!("noise {} must be finite and non-negative", task.noise)));
        }
        let (s, d, k) = (model.seq_len, model.input_dim, model.num_classes);
        if d < 2 {
            return Err(QtError::config("synthetic task needs input_dim >= 2 (one marker feature)"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
        // The last feature is reserved for the marker.
        let prototypes: Vec<f64> = (0..k * d)
            .map(|i| if i % d == d - 1 { 0.0 } else { rng.sample(StandardNormal) })
            .collect();
        let mut inputs = Vec::with_capacity(task.num_samples * s * d);
        let mut labels = Vec::with_capacity(task.num_samples);
        for i in 0..task.num_samples {
            let label = i % k;
            let marked = rng.random_range(0..s);
            for t in 0..s {
                let c = if t == marked { label } else { rng.random_range(0..k) };
                for f in 0..d {
                    let n: f64 = rng.sample(StandardNormal);
                    let marker = if t == marked && f == d - 1 { MARKER } else { 0.0 };
                    inputs.push(prototypes[c * d + f] + marker + task.noise * n);
                }
            }
            labels.push(label);
        }
        Ok(Dataset {
            inputs,
            labels,
            seq_len: s,
            input_dim: d,
            num_classes: k,
        })
    }

    /// Wrap user-provided inputs `[n × seq × dim]` with labels.
    pub fn from_tensor(inputs: &Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Dataset> {
        let [n, s, d] = inputs.shape() else {
            return Err(QtError::dim(format!("inputs must be 3-D, got {:?}", inputs.shape())));
        };
        if *n != labels.len() {
            return Err(QtError::dim(format!("{n} inputs but {} labels", labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(QtError::data(format!("label {l} outside {num_classes} classes")));
        }
        Ok(Dataset {
            inputs: inputs.data().to_vec(),
            labels,
            seq_len: *s,
            input_dim: *d,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn sample_len(&self) -> usize {
        self.seq_len * self.input_dim
    }

    /// Inputs `[b × seq × dim]` and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(QtError::data("empty batch"));
        }
        let sl = self.sample_len();
        let mut x = Vec::with_capacity(indices.len() * sl);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(QtError::data(format!("sample {i} out of {}", self.len())));
            }
            x.extend_from_slice(&self.inputs[i * sl..(i + 1) * sl]);
            y.push(self.labels[i]);
        }
        Ok((
            Tensor::from_parts(vec![indices.len(), self.seq_len, self.input_dim], x),
            y,
        ))
    }

    /// Contiguous range of samples as a batch.
    pub fn range(&self, start: usize, end: usize) -> Result<(Tensor, Vec<usize>)> {
        self.batch(&(start..end.min(self.len())).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (x, y) = self.batch(indices)?;
        Ok(Dataset {
            inputs: x.into_data(),
            labels: y,
            ..self.clone_meta()
        })
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            inputs: Vec::new(),
            labels: Vec::new(),
            seq_len: self.seq_len,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
        }
    }

    /// Deterministic train/eval split: sample `i` goes to eval when a
    /// seed-keyed hash of `i` falls below `eval_fraction`.
    pub fn split(&self, eval_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
            return Err(QtError::config(format!("eval fraction {eval_fraction} outside (0, 1)")));
        }
        let cut = (eval_fraction * 1_000_000.0) as u64;
        let (mut tr, mut ev) = (Vec::new(), Vec::new());
        for i in 0..self.len() {
            let h = splitmix64(seed ^ splitmix64(i as u64)) % 1_000_000;
            if h < cut {
                ev.push(i);
            } else {
                tr.push(i);
            }
        }
        if tr.is_empty() || ev.is_empty() {
            return Err(QtError::data("split left one side empty"));
        }
        Ok((self.subset(&tr)?, self.subset(&ev)?))
    }
}

/// One-hot `[m × k]` label matrix.
pub fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut d = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        d[i * k + l] = 1.0;
    }
    Tensor::from_parts(vec![labels.len(), k], d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_balanced_and_seeded() {
        let cfg = ToyTransformerConfig::default();
        let task = TaskConfig {
            num_samples: 100,
            ..TaskConfig::default()
        };
        let a = Dataset::synthetic(&task, &cfg).unwrap();
        let b = Dataset::synthetic(&task, &cfg).unwrap();
        assert_eq!(a, b);
        for c in 0..cfg.num_classes {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 10);
        }
        let (x, y) = a.batch(&[3, 7]).unwrap();
        assert_eq!(x.shape(), &[2, cfg.seq_len, cfg.input_dim]);
        assert_eq!(y, vec![3, 7]);
    }

    #[test]
    fn split_is_stable_and_near_fraction() {
        let cfg = ToyTransformerConfig::default();
        let task = TaskConfig {
            num_samples: 2000,
            ..TaskConfig::default()
        };
        let d = Dataset::synthetic(&task, &cfg).unwrap();
        let (tr, ev) = d.split(0.2, 5).unwrap();
        assert_eq!(tr.len() + ev.len(), 2000);
        assert!((ev.len() as f64 / 2000.0 - 0.2).abs() < 0.03);
        let (tr2, _) = d.split(0.2, 5).unwrap();
        assert_eq!(tr, tr2);
    }

    #[test]
    fn from_tensor_validates() {
        let x = Tensor::zeros(&[2, 3, 4]);
        assert!(Dataset::from_tensor(&x, vec![0, 1], 2).is_ok());
        assert!(Dataset::from_tensor(&x, vec![0], 2).is_err());
        assert!(Dataset::from_tensor(&x, vec![0, 5], 2).is_err());
        assert!(Dataset::from_tensor(&Tensor::zeros(&[2, 3]), vec![0, 1], 2).is_err());
    }
}
