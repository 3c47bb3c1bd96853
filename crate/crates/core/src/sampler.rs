//! Inter-dataset sampling driven by recorded box losses and dataset sizes,
//! with optional repeat-factor sampling inside a dataset.
//!
//! The weight of dataset `m` is
//!
//! ```text
//! w_m = (L_m / min_i L_i) * sqrt(max_i S_i / S_m)
//! ```
//!
//! where `L_m` is the windowed mean box loss and `S_m` the image count.
//! Datasets are drawn with probability `w_m / Σ w_i`.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, Registry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IntraPolicy {
    #[default]
    Uniform,
    Rfs { threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Number of recorded batch losses averaged into `L_m`.
    pub window: usize,
    /// Weights are recomputed every this many global steps.
    pub recompute_every: usize,
    /// Floor applied to `L_m` before forming ratios.
    pub loss_floor: f64,
    /// Per-dataset intra policy; datasets not listed sample uniformly.
    pub intra: BTreeMap<String, IntraPolicy>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            window: 50,
            recompute_every: 200,
            loss_floor: 1e-6,
            intra: BTreeMap::new(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.recompute_every == 0 {
            return Err(Error::Config("sampler window and recompute period must be positive".into()));
        }
        if !(self.loss_floor > 0.0) {
            return Err(Error::Config("sampler loss_floor must be positive".into()));
        }
        for (id, p) in &self.intra {
            if let IntraPolicy::Rfs { threshold } = p {
                if !(*threshold > 0.0 && *threshold <= 1.0) {
                    return Err(Error::Config(format!("RFS threshold for `{id}` must be in (0, 1]")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSlot {
    pub dataset_id: String,
    pub size: usize,
    pub window: VecDeque<f64>,
    pub weight: f64,
    /// Cumulative repeat factors when the dataset uses RFS.
    #[serde(default)]
    cumulative: Option<Vec<f64>>,
}

impl DatasetSlot {
    /// Windowed mean box loss, if anything was recorded.
    pub fn box_loss(&self) -> Option<f64> {
        if self.window.is_empty() {
            None
        } else {
            Some(self.window.iter().sum::<f64>() / self.window.len() as f64)
        }
    }
}

/// One row of a weight recomputation, as emitted to the sampler CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSnapshot {
    pub step: usize,
    pub dataset_id: String,
    pub box_loss: Option<f64>,
    pub size: usize,
    pub weight: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    slots: Vec<DatasetSlot>,
    window_len: usize,
    loss_floor: f64,
    rng: ChaCha8Rng,
}

impl SamplerState {
    /// State over `(dataset_id, size)` pairs with uniform intra-dataset sampling.
    pub fn new(datasets: &[(&str, usize)], window: usize, loss_floor: f64, seed: u64) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::Config("sampler needs at least one dataset".into()));
        }
        if window == 0 {
            return Err(Error::Config("sampler window must be positive".into()));
        }
        let mut slots = Vec::with_capacity(datasets.len());
        for &(id, size) in datasets {
            if size == 0 {
                return Err(Error::Config(format!("dataset `{id}` has no images")));
            }
            if slots.iter().any(|s: &DatasetSlot| s.dataset_id == id) {
                return Err(Error::DuplicateDataset(id.to_string()));
            }
            slots.push(DatasetSlot {
                dataset_id: id.to_string(),
                size,
                window: VecDeque::with_capacity(window),
                weight: 1.0,
                cumulative: None,
            });
        }
        let mut state = Self {
            slots,
            window_len: window,
            loss_floor,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        state.compute_weights();
        Ok(state)
    }

    pub fn from_registry(registry: &Registry, cfg: &SamplerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let pairs: Vec<(&str, usize)> = registry.iter().map(|(d, _)| (d.dataset_id.as_str(), d.size())).collect();
        let mut state = Self::new(&pairs, cfg.window, cfg.loss_floor, seed)?;
        for (slot, (spec, _)) in state.slots.iter_mut().zip(registry.iter()) {
            if let Some(IntraPolicy::Rfs { threshold }) = cfg.intra.get(&spec.dataset_id) {
                let factors = repeat_factors(spec, *threshold)?;
                let mut acc = 0.0;
                slot.cumulative = Some(
                    factors
                        .into_iter()
                        .map(|f| {
                            acc += f;
                            acc
                        })
                        .collect(),
                );
            }
        }
        for id in cfg.intra.keys() {
            if registry.lookup(id).is_err() {
                return Err(Error::UnknownDataset(id.clone()));
            }
        }
        Ok(state)
    }

    pub fn slots(&self) -> &[DatasetSlot] {
        &self.slots
    }

    fn slot_index(&self, id: &str) -> Result<usize> {
        self.slots
            .iter()
            .position(|s| s.dataset_id == id)
            .ok_or_else(|| Error::UnknownDataset(id.to_string()))
    }

    pub fn record_box_loss(&mut self, dataset_id: &str, value: f64) -> Result<()> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::InvalidLoss {
                dataset: dataset_id.to_string(),
                value,
            });
        }
        let i = self.slot_index(dataset_id)?;
        let window = &mut self.slots[i].window;
        if window.len() == self.window_len {
            window.pop_front();
        }
        window.push_back(value);
        Ok(())
    }

    pub fn box_loss(&self, dataset_id: &str) -> Result<Option<f64>> {
        Ok(self.slots[self.slot_index(dataset_id)?].box_loss())
    }

    /// Recomputes `w_m`. Until every dataset has a recorded loss, all
    /// losses are treated as equal and only the size term remains.
    pub fn compute_weights(&mut self) {
        let losses: Option<Vec<f64>> = self
            .slots
            .iter()
            .map(|s| s.box_loss().map(|l| l.max(self.loss_floor)))
            .collect();
        let losses = losses.unwrap_or_else(|| vec![1.0; self.slots.len()]);
        let sizes: Vec<usize> = self.slots.iter().map(|s| s.size).collect();
        let weights = hardness_weights(&losses, &sizes);
        for (slot, w) in self.slots.iter_mut().zip(weights) {
            slot.weight = w;
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.slots.iter().map(|s| s.weight).collect()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.slots.iter().map(|s| s.weight).sum();
        self.slots.iter().map(|s| s.weight / total).collect()
    }

    /// Categorical draw over datasets; returns the slot index.
    pub fn sample_index(&mut self) -> usize {
        let probs = self.probabilities();
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    pub fn sample_dataset(&mut self) -> String {
        let i = self.sample_index();
        self.slots[i].dataset_id.clone()
    }

    /// Draws an image index within a dataset according to its intra policy.
    pub fn sample_image(&mut self, dataset_id: &str) -> Result<usize> {
        let i = self.slot_index(dataset_id)?;
        let slot = &self.slots[i];
        Ok(match &slot.cumulative {
            None => self.rng.random_range(0..slot.size),
            Some(cum) => {
                let total = *cum.last().expect("non-empty dataset");
                let u = self.rng.random::<f64>() * total;
                cum.partition_point(|&c| c <= u).min(cum.len() - 1)
            }
        })
    }

    pub fn snapshot(&self, step: usize) -> Vec<SamplerSnapshot> {
        let probs = self.probabilities();
        self.slots
            .iter()
            .zip(probs)
            .map(|(s, p)| SamplerSnapshot {
                step,
                dataset_id: s.dataset_id.clone(),
                box_loss: s.box_loss(),
                size: s.size,
                weight: s.weight,
                probability: p,
            })
            .collect()
    }

    /// Ordered `(dataset_id, image index)` draws.
    pub fn plan_epoch(&mut self, draws: usize) -> EpochPlan {
        let mut plan = Vec::with_capacity(draws);
        for _ in 0..draws {
            let i = self.sample_index();
            let id = self.slots[i].dataset_id.clone();
            let img = self.sample_image(&id).expect("slot exists");
            plan.push((id, img));
        }
        EpochPlan { draws: plan }
    }
}

/// The online sampling weights for the given box losses and dataset sizes.
pub fn hardness_weights(losses: &[f64], sizes: &[usize]) -> Vec<f64> {
    assert_eq!(losses.len(), sizes.len());
    let min_loss = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let max_size = sizes.iter().copied().max().unwrap_or(1) as f64;
    losses
        .iter()
        .zip(sizes)
        .map(|(&l, &s)| (l / min_loss) * (max_size / s as f64).sqrt())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub draws: Vec<(String, usize)>,
}

/// Per-image repeat factor `max over classes c in the image of max(1, sqrt(t / f_c))`,
/// where `f_c` is the fraction of training images containing class `c`.
pub fn repeat_factors(dataset: &DatasetSpec, threshold: f64) -> Result<Vec<f64>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("RFS threshold {threshold} must be in (0, 1]")));
    }
    let n = dataset.train.len();
    let m = dataset.label_space.len();
    let mut images_with = vec![0usize; m];
    for rec in &dataset.train {
        let mut seen = vec![false; m];
        for &c in &rec.annotations.classes {
            seen[c] = true;
        }
        for (c, s) in seen.into_iter().enumerate() {
            if s {
                images_with[c] += 1;
            }
        }
    }
    let class_factor: Vec<f64> = images_with
        .iter()
        .map(|&cnt| {
            if cnt == 0 {
                1.0
            } else {
                let f = cnt as f64 / n as f64;
                (threshold / f).sqrt().max(1.0)
            }
        })
        .collect();
    Ok(dataset
        .train
        .iter()
        .map(|rec| {
            rec.annotations
                .classes
                .iter()
                .map(|&c| class_factor[c])
                .fold(1.0, f64::max)
        })
        .collect())
}

/// Replays recorded per-step box losses (steps counted from 1) through a
/// fresh sampler and returns the snapshot rows of every scheduled
/// recomputation.
pub fn replay_snapshots(
    steps: &[(usize, String, f64)],
    sizes: &[(&str, usize)],
    window: usize,
    recompute_every: usize,
    loss_floor: f64,
) -> Result<Vec<SamplerSnapshot>> {
    if recompute_every == 0 {
        return Err(Error::Config("recompute period must be positive".into()));
    }
    let mut state = SamplerState::new(sizes, window, loss_floor, 0)?;
    let mut out = Vec::new();
    for (step, id, box_loss) in steps {
        state.record_box_loss(id, *box_loss)?;
        if step % recompute_every == 0 {
            state.compute_weights();
            out.extend(state.snapshot(*step));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_mean_and_sliding() {
        let mut s = SamplerState::new(&[("a", 10)], 3, 1e-6, 0).unwrap();
        s.record_box_loss("a", 1.0).unwrap();
        s.record_box_loss("a", 3.0).unwrap();
        assert_eq!(s.box_loss("a").unwrap(), Some(2.0));

        let mut s = SamplerState::new(&[("a", 10)], 2, 1e-6, 0).unwrap();
        for v in [1.0, 2.0, 3.0] {
            s.record_box_loss("a", v).unwrap();
        }
        assert_eq!(s.box_loss("a").unwrap(), Some(2.5));
        assert!(matches!(s.record_box_loss("a", f64::NAN), Err(Error::InvalidLoss { .. })));
        assert!(matches!(s.record_box_loss("a", -1.0), Err(Error::InvalidLoss { .. })));
    }

    #[test]
    fn warm_up_uses_size_term_only() {
        let mut s = SamplerState::new(&[("a", 1), ("b", 4), ("c", 16)], 5, 1e-6, 0).unwrap();
        s.record_box_loss("a", 9.0).unwrap();
        s.compute_weights();
        assert_eq!(s.weights(), vec![4.0, 2.0, 1.0]);
    }

    #[test]
    fn zero_loss_is_floored() {
        let mut s = SamplerState::new(&[("a", 10), ("b", 10)], 5, 1e-6, 0).unwrap();
        s.record_box_loss("a", 0.0).unwrap();
        s.record_box_loss("b", 1e-3).unwrap();
        s.compute_weights();
        let w = s.weights();
        assert_eq!(w[0], 1.0);
        assert!((w[1] - 1e3).abs() < 1e-9);
    }

    #[test]
    fn singleton_always_drawn() {
        let mut s = SamplerState::new(&[("only", 3)], 5, 1e-6, 1).unwrap();
        assert_eq!(s.probabilities(), vec![1.0]);
        assert!((0..100).all(|_| s.sample_dataset() == "only"));
    }

    #[test]
    fn empty_plan() {
        let mut s = SamplerState::new(&[("a", 3)], 5, 1e-6, 1).unwrap();
        assert!(s.plan_epoch(0).draws.is_empty());
    }
}
