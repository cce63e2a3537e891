//! Random shard masks and task-vector merging (Ties, Linear, Sign).

use crate::error::{shape_err, Result, WiseError};
use crate::numerics::Matrix;
use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

/// Binary matrix selecting the trainable coordinates of one shard.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn get(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn set(&mut self, idx: usize, on: bool) {
        self.bits[idx] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Flat indices of the set coordinates.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("mask shape")
    }

    /// Accepts only matrices whose entries are exactly 0 or 1.
    pub fn from_matrix<T: Scalar>(m: &Matrix<T>) -> Result<Self> {
        let mut bits = Vec::with_capacity(m.len());
        for &v in m.data() {
            if v == T::one() {
                bits.push(true);
            } else if v == T::zero() {
                bits.push(false);
            } else {
                return Err(WiseError::Input(format!("mask entry {v} is not binary")));
            }
        }
        Ok(Self {
            rows: m.rows(),
            cols: m.cols(),
            bits,
        })
    }
}

/// Fraction of coordinates set in every one of `masks`.
pub fn overlap_fraction(masks: &[&Mask]) -> f64 {
    let Some(first) = masks.first() else {
        return 0.0;
    };
    if first.is_empty() {
        return 0.0;
    }
    let common = (0..first.len())
        .filter(|&i| masks.iter().all(|m| m.get(i)))
        .count();
    common as f64 / first.len() as f64
}

/// `k` independent masks, each with exactly `round(rho · rows · cols)` ones
/// at positions sampled uniformly without replacement.
pub fn gen_masks(rows: usize, cols: usize, k: usize, rho: f64, seed: u64) -> Result<Vec<Mask>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(WiseError::Config(format!("mask ratio {rho} outside (0, 1]")));
    }
    if k == 0 {
        return Err(WiseError::Config("need at least one mask".into()));
    }
    let n = rows * cols;
    let ones = ((rho * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..k)
        .map(|_| {
            let mut mask = Mask::zeros(rows, cols);
            for idx in rand::seq::index::sample(&mut rng, n, ones).iter() {
                mask.set(idx, true);
            }
            mask
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeStrategy {
    #[default]
    Ties,
    Linear,
    Sign,
}

impl std::fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MergeStrategy::Ties => "ties",
            MergeStrategy::Linear => "linear",
            MergeStrategy::Sign => "sign",
        })
    }
}

impl std::str::FromStr for MergeStrategy {
    type Err = WiseError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ties" => Ok(Self::Ties),
            "linear" => Ok(Self::Linear),
            "sign" => Ok(Self::Sign),
            other => Err(WiseError::Config(format!("unknown merge strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeConfig {
    pub strategy: MergeStrategy,
    /// Fraction of entries per task vector that survive trimming.
    pub trim_keep_ratio: f64,
    /// Linear-merge weights; uniform `1/k` when absent.
    pub weights: Option<Vec<f64>>,
    /// Multiplier applied to the merged task vector before adding it back.
    pub scale: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            strategy: MergeStrategy::Ties,
            trim_keep_ratio: 1.0,
            weights: None,
            scale: 1.0,
        }
    }
}

impl MergeConfig {
    pub fn with_strategy(strategy: MergeStrategy) -> Self {
        Self {
            strategy,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.trim_keep_ratio > 0.0 && self.trim_keep_ratio <= 1.0) {
            return Err(WiseError::Config(format!(
                "trim_keep_ratio {} outside (0, 1]",
                self.trim_keep_ratio
            )));
        }
        if !self.scale.is_finite() {
            return Err(WiseError::Config("merge scale must be finite".into()));
        }
        Ok(())
    }
}

/// Base matrix plus the shift of each shard copy away from it.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVectorSet<T: Scalar = f64> {
    pub base: Matrix<T>,
    pub vectors: Vec<Matrix<T>>,
}

impl<T: Scalar> TaskVectorSet<T> {
    pub fn new(base: Matrix<T>, vectors: Vec<Matrix<T>>) -> Result<Self> {
        for v in &vectors {
            base.check_same_shape(v, "task vector")?;
        }
        Ok(Self { base, vectors })
    }

    /// `τᵢ = modelᵢ − base`
    pub fn from_models(base: &Matrix<T>, models: &[Matrix<T>]) -> Result<Self> {
        let vectors = models
            .iter()
            .map(|m| m.sub(base))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base: base.clone(),
            vectors,
        })
    }

    fn non_empty(&self) -> Result<()> {
        if self.vectors.is_empty() {
            return Err(WiseError::Input("no task vectors to merge".into()));
        }
        Ok(())
    }
}

/// Zeroes all but the `round(keep_ratio · n)` largest-magnitude entries;
/// equal magnitudes at the cut keep the lower flat index.
pub fn trim<T: Scalar>(v: &Matrix<T>, keep_ratio: f64) -> Matrix<T> {
    let n = v.len();
    let keep = ((keep_ratio * n as f64).round() as usize).clamp(1.min(n), n);
    if keep == n {
        return v.clone();
    }
    let mut order: Vec<usize> = (0..n).collect();
    let data = v.data();
    order.sort_by(|&a, &b| {
        data[b]
            .abs()
            .partial_cmp(&data[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = Matrix::zeros(v.rows(), v.cols());
    for &i in &order[..keep] {
        out.data_mut()[i] = data[i];
    }
    out
}

/// Elected sign per coordinate and the mean over entries agreeing with it.
fn elect_and_disjoint_mean<T: Scalar>(vectors: &[Matrix<T>]) -> Matrix<T> {
    let first = &vectors[0];
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for i in 0..first.len() {
        let total = vectors.iter().fold(T::zero(), |a, v| a + v.data()[i]);
        let positive = total >= T::zero();
        let mut sum = T::zero();
        let mut count = 0usize;
        for v in vectors {
            let x = v.data()[i];
            if (positive && x > T::zero()) || (!positive && x < T::zero()) {
                sum += x;
                count += 1;
            }
        }
        if count > 0 {
            out.data_mut()[i] = sum / T::of(count as f64);
        }
    }
    out
}

fn rebase<T: Scalar>(base: &Matrix<T>, merged: &Matrix<T>, scale: f64) -> Matrix<T> {
    let mut out = base.clone();
    out.axpy(T::of(scale), merged).expect("same shape");
    out
}

/// Merged task vector of the Ties pipeline: trim, elect sign, disjoint mean.
pub fn ties_vector<T: Scalar>(tv: &TaskVectorSet<T>, mc: &MergeConfig) -> Result<Matrix<T>> {
    tv.non_empty()?;
    mc.validate()?;
    let trimmed: Vec<Matrix<T>> = tv
        .vectors
        .iter()
        .map(|v| trim(v, mc.trim_keep_ratio))
        .collect();
    Ok(elect_and_disjoint_mean(&trimmed))
}

/// Ties without the trim step.
pub fn sign_vector<T: Scalar>(tv: &TaskVectorSet<T>, mc: &MergeConfig) -> Result<Matrix<T>> {
    tv.non_empty()?;
    mc.validate()?;
    Ok(elect_and_disjoint_mean(&tv.vectors))
}

/// `Σ λᵢ τᵢ`, with λ uniform when not given.
pub fn linear_vector<T: Scalar>(tv: &TaskVectorSet<T>, mc: &MergeConfig) -> Result<Matrix<T>> {
    tv.non_empty()?;
    mc.validate()?;
    let k = tv.vectors.len();
    let weights = match &mc.weights {
        Some(w) if w.len() != k => {
            return Err(WiseError::Config(format!(
                "{} merge weights for {k} task vectors",
                w.len()
            )))
        }
        Some(w) => {
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(WiseError::Config(format!(
                    "linear merge weights sum to {total}, expected 1"
                )));
            }
            w.clone()
        }
        None => vec![1.0 / k as f64; k],
    };
    let mut merged = Matrix::zeros(tv.base.rows(), tv.base.cols());
    for (w, v) in weights.iter().zip(&tv.vectors) {
        merged.axpy(T::of(*w), v)?;
    }
    Ok(merged)
}

/// Merged task vector for `mc.strategy`, before it is added to the base.
pub fn merged_vector<T: Scalar>(tv: &TaskVectorSet<T>, mc: &MergeConfig) -> Result<Matrix<T>> {
    match mc.strategy {
        MergeStrategy::Ties => ties_vector(tv, mc),
        MergeStrategy::Linear => linear_vector(tv, mc),
        MergeStrategy::Sign => sign_vector(tv, mc),
    }
}

/// `base + scale · ties_vector`
pub fn ties_merge<T: Scalar>(tv: &TaskVectorSet<T>, mc: &MergeConfig) -> Result<Matrix<T>> {
    Ok(rebase(&tv.base, &ties_vector(tv, mc)?, mc.scale))
}

pub fn sign_merge<T: Scalar>(tv: &TaskVectorSet<T>, mc: &MergeConfig) -> Result<Matrix<T>> {
    Ok(rebase(&tv.base, &sign_vector(tv, mc)?, mc.scale))
}

pub fn linear_merge<T: Scalar>(tv: &TaskVectorSet<T>, mc: &MergeConfig) -> Result<Matrix<T>> {
    Ok(rebase(&tv.base, &linear_vector(tv, mc)?, mc.scale))
}

/// Merges shard copies of a side memory back into one value matrix.
pub fn merge_side_memory<T: Scalar>(
    base: &Matrix<T>,
    shard_values: &[Matrix<T>],
    mc: &MergeConfig,
) -> Result<Matrix<T>> {
    for s in shard_values {
        if !s.same_shape(base) {
            return Err(shape_err(format!(
                "shard {:?} vs base {:?}",
                s.shape(),
                base.shape()
            )));
        }
    }
    let tv = TaskVectorSet::from_models(base, shard_values)?;
    Ok(rebase(base, &merged_vector(&tv, mc)?, mc.scale))
}

/// Support overlap and sign conflicts among task vectors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeStats {
    /// Fraction of coordinates touched by at least two task vectors.
    pub overlap_fraction: f64,
    /// Coordinates carrying both a positive and a negative entry.
    pub conflict_count: usize,
}

pub fn merge_stats<T: Scalar>(tv: &TaskVectorSet<T>) -> MergeStats {
    let n = tv.base.len();
    if n == 0 {
        return MergeStats::default();
    }
    let mut shared = 0usize;
    let mut conflicts = 0usize;
    for i in 0..n {
        let (mut pos, mut neg) = (0usize, 0usize);
        for v in &tv.vectors {
            let x = v.data()[i];
            if x > T::zero() {
                pos += 1;
            } else if x < T::zero() {
                neg += 1;
            }
        }
        if pos + neg >= 2 {
            shared += 1;
        }
        if pos > 0 && neg > 0 {
            conflicts += 1;
        }
    }
    MergeStats {
        overlap_fraction: shared as f64 / n as f64,
        conflict_count: conflicts,
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn vectors(n: usize) -> impl Strategy<Value = Vec<Matrix<f64>>> {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 12), n)
            .prop_map(|vs| vs.into_iter().map(|v| Matrix::from_vec(3, 4, v).unwrap()).collect())
    }

    proptest! {
        #[test]
        fn ties_entries_come_from_the_elected_side(vs in vectors(3)) {
            let tv = TaskVectorSet::new(Matrix::zeros(3, 4), vs.clone()).unwrap();
            let merged = ties_vector(&tv, &MergeConfig::default()).unwrap();
            for i in 0..merged.len() {
                let vals: Vec<f64> = vs.iter().map(|v| v.data()[i]).collect();
                let m = merged.data()[i];
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
                let elected = if vals.iter().sum::<f64>() >= 0.0 { 1.0 } else { -1.0 };
                if m != 0.0 {
                    prop_assert_eq!(m.signum(), elected);
                }
            }
        }

        #[test]
        fn linear_is_the_mean(vs in vectors(2)) {
            let tv = TaskVectorSet::new(Matrix::zeros(3, 4), vs.clone()).unwrap();
            let merged = linear_merge(&tv, &MergeConfig::with_strategy(MergeStrategy::Linear)).unwrap();
            for i in 0..merged.len() {
                let mean = (vs[0].data()[i] + vs[1].data()[i]) / 2.0;
                prop_assert!((merged.data()[i] - mean).abs() < 1e-12);
            }
        }

        #[test]
        fn masks_have_exact_size(rows in 1usize..20, cols in 1usize..20, k in 1usize..4, rho in 0.05f64..1.0, seed: u64) {
            let masks = gen_masks(rows, cols, k, rho, seed).unwrap();
            prop_assert_eq!(masks.len(), k);
            let expected = (rho * (rows * cols) as f64).round() as usize;
            for m in &masks {
                prop_assert_eq!(m.count_ones(), expected);
            }
        }
    }
}
