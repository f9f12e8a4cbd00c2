//! Capacity-bounded memory of streaming segments.
//!
//! Each step one candidate is inserted and the item with the highest
//! removal score `S = log Σ_k exp(f_k / A²)` is discarded, where `A` is the
//! item's persistence (steps since insertion, counting from 1).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::logsumexp;
use crate::nn::{Real, Tensor4};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("memory bank is already initialized")]
    AlreadyInitialized,
    #[error("memory bank capacity must be at least 1")]
    ZeroCapacity,
    #[error("cannot split {len} samples into {segments} permutation segments")]
    Segments { segments: usize, len: usize },
    #[error("augmentation input contains non-finite values")]
    NonFinite,
    #[error("score refresh returned {got} logit rows for {expected} items")]
    Refresh { expected: usize, got: usize },
    #[error("cannot evict from an empty memory bank")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    GaussianNoise,
    Permutation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Noise std relative to each channel's own std.
    pub noise_rel_std: f64,
    /// Contiguous time chunks shuffled by the permutation augmentation.
    pub permutation_segments: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_rel_std: 0.1,
            permutation_segments: 8,
        }
    }
}

/// Which end of the removal-score ranking is discarded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionDirection {
    #[default]
    Highest,
    Lowest,
}

/// Augments one segment laid out as `1 × 1 × channels × time`. Rows are
/// EEG channels; noise std is per row, and the permutation reorders the
/// same time chunks in every row.
pub fn augment<T: Real>(
    x: &Tensor4<T>,
    kind: AugmentKind,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Tensor4<T>, MemoryError> {
    if x.check_finite("segment").is_err() {
        return Err(MemoryError::NonFinite);
    }
    let d = x.dims();
    let rows = d.n * d.c * d.h;
    let len = d.w;
    match kind {
        AugmentKind::GaussianNoise => {
            if cfg.noise_rel_std == 0.0 {
                return Ok(x.clone());
            }
            let mut out = x.clone();
            for r in 0..rows {
                let row = &mut out.data_mut()[r * len..(r + 1) * len];
                let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / len as f64;
                let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / len as f64;
                let std = cfg.noise_rel_std * var.sqrt();
                if std == 0.0 {
                    continue;
                }
                let normal = Normal::new(0.0, std).expect("finite positive std");
                for v in row.iter_mut() {
                    *v += T::of(normal.sample(rng));
                }
            }
            Ok(out)
        }
        AugmentKind::Permutation => {
            let segs = cfg.permutation_segments;
            if segs == 0 || segs > len {
                return Err(MemoryError::Segments { segments: segs, len });
            }
            let bounds: Vec<usize> = (0..=segs).map(|i| i * len / segs).collect();
            let mut order: Vec<usize> = (0..segs).collect();
            order.shuffle(rng);
            let mut out = Tensor4::zeros(d);
            for r in 0..rows {
                let src = &x.data()[r * len..(r + 1) * len];
                let dst = &mut out.data_mut()[r * len..(r + 1) * len];
                let mut pos = 0;
                for &s in &order {
                    let chunk = &src[bounds[s]..bounds[s + 1]];
                    dst[pos..pos + chunk.len()].copy_from_slice(chunk);
                    pos += chunk.len();
                }
            }
            Ok(out)
        }
    }
}

/// `log Σ exp(f_k / A²)`; equals `-E(f)` at `A = 1`.
pub fn removal_score<T: Real>(logits: &[T], persistence: u64) -> T {
    let a = T::of(persistence as f64);
    let a2 = a * a;
    let scaled: Vec<T> = logits.iter().map(|&f| f / a2).collect();
    logsumexp(&scaled)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryItem<T> {
    /// Unique within a bank; lets owners attach per-item caches.
    pub id: u64,
    pub segment: Tensor4<T>,
    pub inserted_at: u64,
    /// Classifier logits from the most recent scoring pass.
    pub logits: Vec<T>,
}

impl<T> MemoryItem<T> {
    pub fn persistence(&self, t_now: u64) -> u64 {
        t_now.saturating_sub(self.inserted_at) + 1
    }
}

#[derive(Clone, Debug)]
pub struct Eviction<T> {
    pub item: MemoryItem<T>,
    pub score: T,
    /// Scores of every candidate, in stored order before removal.
    pub scores: Vec<T>,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct MemoryBank<T> {
    items: Vec<MemoryItem<T>>,
    capacity: usize,
    rng: ChaCha8Rng,
    next_id: u64,
    augment: AugmentConfig,
    direction: EvictionDirection,
}

impl<T: Real> MemoryBank<T> {
    pub fn new(
        capacity: usize,
        seed: u64,
        augment: AugmentConfig,
        direction: EvictionDirection,
    ) -> Result<Self, MemoryError> {
        if capacity == 0 {
            return Err(MemoryError::ZeroCapacity);
        }
        Ok(Self {
            items: Vec::with_capacity(capacity + 1),
            capacity,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_id: 0,
            augment,
            direction,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[MemoryItem<T>] {
        &self.items
    }

    pub fn augment_config(&self) -> &AugmentConfig {
        &self.augment
    }

    /// Draws an augmentation from the bank's own random stream.
    pub fn augmented(&mut self, x: &Tensor4<T>, kind: AugmentKind) -> Result<Tensor4<T>, MemoryError> {
        augment(x, kind, &self.augment, &mut self.rng)
    }

    /// Kind used for the `i`-th augmented copy: noise and permutation alternate.
    pub fn kind_for(i: usize) -> AugmentKind {
        if i % 2 == 0 {
            AugmentKind::GaussianNoise
        } else {
            AugmentKind::Permutation
        }
    }

    pub fn insert(&mut self, segment: Tensor4<T>, t: u64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.items.push(MemoryItem {
            id,
            segment,
            inserted_at: t,
            logits: Vec::new(),
        });
        id
    }

    /// Fills an empty bank with `x` and `capacity - 1` augmented copies of it.
    pub fn initialize(&mut self, x: &Tensor4<T>, t: u64) -> Result<(), MemoryError> {
        if !self.items.is_empty() {
            return Err(MemoryError::AlreadyInitialized);
        }
        self.insert(x.clone(), t);
        for i in 0..self.capacity - 1 {
            let aug = self.augmented(x, Self::kind_for(i))?;
            self.insert(aug, t);
        }
        Ok(())
    }

    /// Re-scores every item with logits from `refresh` (called once with all
    /// items, in stored order) and removes the one ranked for eviction.
    /// Ties go to the earliest insertion time, then the earliest position.
    pub fn evict<E, F>(&mut self, t_now: u64, refresh: F) -> Result<Eviction<T>, E>
    where
        E: From<MemoryError>,
        F: FnOnce(&[MemoryItem<T>]) -> Result<Vec<Vec<T>>, E>,
    {
        if self.items.is_empty() {
            return Err(MemoryError::Empty.into());
        }
        let logits = refresh(&self.items)?;
        if logits.len() != self.items.len() {
            return Err(MemoryError::Refresh {
                expected: self.items.len(),
                got: logits.len(),
            }
            .into());
        }
        for (item, l) in self.items.iter_mut().zip(logits) {
            item.logits = l;
        }
        let scores: Vec<T> = self
            .items
            .iter()
            .map(|it| removal_score(&it.logits, it.persistence(t_now)))
            .collect();
        let mut best = 0;
        for i in 1..scores.len() {
            let better = match self.direction {
                EvictionDirection::Highest => scores[i] > scores[best],
                EvictionDirection::Lowest => scores[i] < scores[best],
            };
            let tie_older =
                scores[i] == scores[best] && self.items[i].inserted_at < self.items[best].inserted_at;
            if better || tie_older {
                best = i;
            }
        }
        let item = self.items.remove(best);
        Ok(Eviction {
            item,
            score: scores[best],
            scores,
            index: best,
        })
    }

    pub fn insert_and_evict<E, F>(
        &mut self,
        x: Tensor4<T>,
        t: u64,
        refresh: F,
    ) -> Result<Eviction<T>, E>
    where
        E: From<MemoryError>,
        F: FnOnce(&[MemoryItem<T>]) -> Result<Vec<Vec<T>>, E>,
    {
        self.insert(x, t);
        self.evict(t, refresh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dims;
    use proptest::prelude::{prop_assert_eq, proptest};

    fn segment(seed: u64) -> Tensor4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Dims::new(1, 1, 3, 40);
        Tensor4::from_vec(d, (0..d.len()).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn bank(cap: usize) -> MemoryBank<f32> {
        MemoryBank::new(cap, 7, AugmentConfig::default(), EvictionDirection::Highest).unwrap()
    }

    #[test]
    fn zero_noise_and_single_segment_are_identity() {
        let x = segment(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AugmentConfig {
            noise_rel_std: 0.0,
            permutation_segments: 1,
        };
        assert_eq!(augment(&x, AugmentKind::GaussianNoise, &cfg, &mut rng).unwrap(), x);
        assert_eq!(augment(&x, AugmentKind::Permutation, &cfg, &mut rng).unwrap(), x);
    }

    #[test]
    fn too_many_segments_is_an_error() {
        let cfg = AugmentConfig {
            permutation_segments: 41,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            augment(&segment(1), AugmentKind::Permutation, &cfg, &mut rng),
            Err(MemoryError::Segments { .. })
        ));
    }

    #[test]
    fn noise_scales_with_channel_std() {
        let d = Dims::new(1, 1, 2, 4000);
        let mut data = vec![0.0f64; d.len()];
        for (i, v) in data.iter_mut().enumerate() {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            *v = if i < 4000 { s } else { 10.0 * s };
        }
        let x = Tensor4::from_vec(d, data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = augment(&x, AugmentKind::GaussianNoise, &AugmentConfig::default(), &mut rng).unwrap();
        let diff_std = |r: usize| {
            let s: Vec<f64> = (0..4000).map(|j| y.data()[r * 4000 + j] - x.data()[r * 4000 + j]).collect();
            (s.iter().map(|v| v * v).sum::<f64>() / 4000.0).sqrt()
        };
        assert!((diff_std(0) - 0.1).abs() < 0.01);
        assert!((diff_std(1) - 1.0).abs() < 0.1);
    }

    #[test]
    fn initialize_fills_to_capacity_deterministically() {
        let x = segment(2);
        let mut a = bank(16);
        a.initialize(&x, 1).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a.items()[0].segment, x);
        assert!(a.items().iter().all(|it| it.inserted_at == 1));
        let mut b = bank(16);
        b.initialize(&x, 1).unwrap();
        assert_eq!(a.items(), b.items());
        assert_eq!(a.initialize(&x, 1), Err(MemoryError::AlreadyInitialized));

        let mut single = bank(1);
        single.initialize(&x, 1).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.items()[0].segment, x);
    }

    #[test]
    fn removal_score_examples() {
        assert!((removal_score(&[2.0f64, 0.0], 1) - 2.126928).abs() < 1e-6);
        assert!((removal_score(&[2.0f64, 0.0], 10_000) - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn evicts_highest_score() {
        let mut b = bank(3);
        for t in 1..=3 {
            b.insert(segment(t), 1);
        }
        let logits = vec![vec![0.9f32, -5.0], vec![2.1, -5.0], vec![1.4, -5.0], vec![0.2, -5.0]];
        let ev = b
            .insert_and_evict::<MemoryError, _>(segment(9), 1, |items| {
                assert_eq!(items.len(), 4);
                Ok(logits.clone())
            })
            .unwrap();
        assert_eq!(ev.index, 1);
        assert_eq!(b.len(), 3);
        let survivors: Vec<f32> = b.items().iter().map(|it| removal_score(&it.logits, 1)).collect();
        assert!(survivors.iter().all(|&s| s <= ev.score));
    }

    #[test]
    fn identical_items_evict_the_oldest() {
        let mut b = bank(3);
        b.insert(segment(1), 2);
        b.insert(segment(1), 1);
        b.insert(segment(1), 3);
        let ev = b
            .insert_and_evict::<MemoryError, _>(segment(1), 3, |items| {
                // Persistence differs, so hand back logits that tie after tempering.
                Ok(items.iter().map(|_| vec![0.0f32, 0.0]).collect())
            })
            .unwrap();
        assert_eq!(ev.item.inserted_at, 1);
    }

    #[test]
    fn lowest_direction_evicts_minimum() {
        let mut b: MemoryBank<f32> =
            MemoryBank::new(2, 0, AugmentConfig::default(), EvictionDirection::Lowest).unwrap();
        b.insert(segment(1), 1);
        b.insert(segment(2), 1);
        let ev = b
            .insert_and_evict::<MemoryError, _>(segment(3), 1, |_| {
                Ok(vec![vec![1.0, 0.0], vec![-3.0, -3.0], vec![2.0, 0.0]])
            })
            .unwrap();
        assert_eq!(ev.index, 1);
    }

    proptest! {
        #[test]
        fn permutation_preserves_each_channel_multiset(seed in 0u64..1000, segs in 1usize..12) {
            let x = segment(seed);
            let cfg = AugmentConfig { permutation_segments: segs, ..AugmentConfig::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let y = augment(&x, AugmentKind::Permutation, &cfg, &mut rng).unwrap();
            for r in 0..3 {
                let mut a = x.data()[r * 40..(r + 1) * 40].to_vec();
                let mut b = y.data()[r * 40..(r + 1) * 40].to_vec();
                a.sort_by(f32::total_cmp);
                b.sort_by(f32::total_cmp);
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn score_equals_negative_energy_at_unit_persistence(row in proptest::collection::vec(-40.0f64..40.0, 2..5)) {
            prop_assert_eq!(removal_score(&row, 1), -crate::losses::energy_score(&row, 1.0));
        }
    }
}
