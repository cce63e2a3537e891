//! Side copies of the edit-layer value matrix and activation-based routing
//! between them and the main memory.

use crate::error::{Result, WiseError};
use crate::merge::{gen_masks, Mask};
use crate::model::{Checkpoint, ValueRouter};
use crate::numerics::Matrix;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use serde_json::json;

/// One side memory `W_v'` with its shard masks and routing threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct SideMemory<T: Scalar = f64> {
    pub values: Matrix<T>,
    pub masks: Vec<Mask>,
    pub active_shard: usize,
    /// Smallest routing activation seen over recorded edits; `+∞` before
    /// the first one.
    pub epsilon: T,
    pub edits_recorded: usize,
}

impl<T: Scalar> SideMemory<T> {
    /// Copies `main_values` and draws `k` shard masks of ratio `rho`.
    pub fn init(main_values: &Matrix<T>, k: usize, rho: f64, seed: u64) -> Result<Self> {
        let masks = gen_masks(main_values.rows(), main_values.cols(), k, rho, seed)?;
        Ok(Self {
            values: main_values.clone(),
            masks,
            active_shard: 0,
            epsilon: T::infinity(),
            edits_recorded: 0,
        })
    }

    pub fn active_mask(&self) -> &Mask {
        &self.masks[self.active_shard]
    }

    /// `ε ← min(ε, delta)`
    pub fn update_epsilon(&mut self, delta: T) -> Result<()> {
        if delta.is_nan() || delta < T::zero() {
            return Err(WiseError::Input(format!(
                "routing activation {delta} must be non-negative"
            )));
        }
        self.epsilon = self.epsilon.min(delta);
        Ok(())
    }
}

/// Alias matching the operation name used by the CLI and docs.
pub fn init_side<T: Scalar>(
    main_values: &Matrix<T>,
    k: usize,
    rho: f64,
    seed: u64,
) -> Result<SideMemory<T>> {
    SideMemory::init(main_values, k, rho, seed)
}

/// How per-token activation norms are pooled into one routing score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    LastToken,
}

/// `‖a_t · shift‖₂` pooled over the rows `a_t` of `activation_rows`, where
/// `shift = W_v' − W_v`.
pub fn activation_shift<T: Scalar>(
    shift: &Matrix<T>,
    activation_rows: &Matrix<T>,
    aggregation: Aggregation,
) -> Result<T> {
    check_rows(shift, activation_rows)?;
    let rows = pooled_rows(activation_rows, aggregation);
    let mut total = T::zero();
    let mut out = vec![T::zero(); shift.cols()];
    for r in rows.clone() {
        token_shift(shift, activation_rows.row(r), &mut out);
        total += norm(&out);
    }
    Ok(total / T::of(rows.len() as f64))
}

/// [`activation_shift`] and its gradient w.r.t. `W_v'`. Rows whose shifted
/// output is exactly zero contribute a zero subgradient.
pub fn activation_shift_grad<T: Scalar>(
    shift: &Matrix<T>,
    activation_rows: &Matrix<T>,
    aggregation: Aggregation,
) -> Result<(T, Matrix<T>)> {
    check_rows(shift, activation_rows)?;
    let rows = pooled_rows(activation_rows, aggregation);
    let inv = T::one() / T::of(rows.len() as f64);
    let mut total = T::zero();
    let mut grad = Matrix::zeros(shift.rows(), shift.cols());
    let mut out = vec![T::zero(); shift.cols()];
    for r in rows {
        let a = activation_rows.row(r);
        token_shift(shift, a, &mut out);
        let n = norm(&out);
        total += n;
        if n == T::zero() {
            continue;
        }
        let coef = inv / n;
        for (i, &ai) in a.iter().enumerate() {
            if ai == T::zero() {
                continue;
            }
            let s = ai * coef;
            for (g, &o) in grad.row_mut(i).iter_mut().zip(&out) {
                *g += s * o;
            }
        }
    }
    Ok((total * inv, grad))
}

fn check_rows<T: Scalar>(shift: &Matrix<T>, activation_rows: &Matrix<T>) -> Result<()> {
    if activation_rows.cols() != shift.rows() || activation_rows.rows() == 0 {
        return Err(WiseError::Shape(format!(
            "activation rows {:?} against value matrix {:?}",
            activation_rows.shape(),
            shift.shape()
        )));
    }
    Ok(())
}

fn pooled_rows<T: Scalar>(rows: &Matrix<T>, aggregation: Aggregation) -> std::ops::Range<usize> {
    match aggregation {
        Aggregation::Mean => 0..rows.rows(),
        Aggregation::LastToken => rows.rows() - 1..rows.rows(),
    }
}

#[inline]
fn token_shift<T: Scalar>(shift: &Matrix<T>, a: &[T], out: &mut [T]) {
    out.iter_mut().for_each(|o| *o = T::zero());
    for (i, &ai) in a.iter().enumerate() {
        if ai == T::zero() {
            continue;
        }
        for (o, &d) in out.iter_mut().zip(shift.row(i)) {
            *o += ai * d;
        }
    }
}

#[inline]
fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt()
}

/// Routing activation of one side memory, mean-pooled over prompt tokens.
pub fn routing_activation<T: Scalar>(
    main_values: &Matrix<T>,
    side: &SideMemory<T>,
    activation_rows: &Matrix<T>,
) -> Result<T> {
    let shift = side.values.sub(main_values)?;
    activation_shift(&shift, activation_rows, Aggregation::Mean)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoutingDecision<T: Scalar = f64> {
    pub use_side: bool,
    pub chosen_memory: usize,
    pub activation: T,
}

/// Picks the memory with the largest routing activation (lowest index on
/// ties) and uses it only if that activation reaches its threshold.
pub fn route<T: Scalar>(
    main_values: &Matrix<T>,
    memories: &[SideMemory<T>],
    activation_rows: &Matrix<T>,
    aggregation: Aggregation,
) -> Result<RoutingDecision<T>> {
    let shifts = memories
        .iter()
        .map(|m| m.values.sub(main_values))
        .collect::<Result<Vec<_>>>()?;
    let epsilons: Vec<T> = memories.iter().map(|m| m.epsilon).collect();
    route_with_shifts(&shifts, &epsilons, activation_rows, aggregation)
}

fn route_with_shifts<T: Scalar>(
    shifts: &[Matrix<T>],
    epsilons: &[T],
    activation_rows: &Matrix<T>,
    aggregation: Aggregation,
) -> Result<RoutingDecision<T>> {
    if shifts.is_empty() {
        return Err(WiseError::Config("routing needs at least one side memory".into()));
    }
    let mut best = 0usize;
    let mut best_act = T::neg_infinity();
    for (i, shift) in shifts.iter().enumerate() {
        let act = activation_shift(shift, activation_rows, aggregation)?;
        if act > best_act {
            best = i;
            best_act = act;
        }
    }
    Ok(RoutingDecision {
        use_side: best_act >= epsilons[best],
        chosen_memory: best,
        activation: best_act,
    })
}

/// Frozen set of side memories ready for inference. Value shifts are
/// precomputed once.
#[derive(Clone, Debug)]
pub struct MemoryBank<T: Scalar = f64> {
    main_values: Matrix<T>,
    memories: Vec<SideMemory<T>>,
    shifts: Vec<Matrix<T>>,
    epsilons: Vec<T>,
    pub aggregation: Aggregation,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(
        main_values: &Matrix<T>,
        memories: Vec<SideMemory<T>>,
        aggregation: Aggregation,
    ) -> Result<Self> {
        let shifts = memories
            .iter()
            .map(|m| m.values.sub(main_values))
            .collect::<Result<Vec<_>>>()?;
        let epsilons = memories.iter().map(|m| m.epsilon).collect();
        Ok(Self {
            main_values: main_values.clone(),
            memories,
            shifts,
            epsilons,
            aggregation,
        })
    }

    pub fn empty(main_values: &Matrix<T>) -> Self {
        Self::new(main_values, Vec::new(), Aggregation::Mean).expect("no memories")
    }

    pub fn memories(&self) -> &[SideMemory<T>] {
        &self.memories
    }

    pub fn main_values(&self) -> &Matrix<T> {
        &self.main_values
    }

    pub fn len(&self) -> usize {
        self.memories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memories.is_empty()
    }

    /// `None` when the bank holds no memory.
    pub fn decide(&self, activation_rows: &Matrix<T>) -> Result<Option<RoutingDecision<T>>> {
        if self.is_empty() {
            return Ok(None);
        }
        route_with_shifts(&self.shifts, &self.epsilons, activation_rows, self.aggregation).map(Some)
    }

    /// Largest routing activation over the memories, ignoring thresholds.
    pub fn max_activation(&self, activation_rows: &Matrix<T>) -> Result<T> {
        Ok(self
            .decide(activation_rows)?
            .map_or(T::zero(), |d| d.activation))
    }
}

impl<T: Scalar> ValueRouter<T> for MemoryBank<T> {
    fn route(&self, prompt_activation: &Matrix<T>) -> Option<&Matrix<T>> {
        match self.decide(prompt_activation) {
            Ok(Some(d)) if d.use_side => Some(&self.memories[d.chosen_memory].values),
            _ => None,
        }
    }
}

/// Stores memories as `side/<i>/values`, `side/<i>/mask/<j>` and
/// `side/<i>/epsilon`.
pub fn write_side_memories<T: Scalar>(ckpt: &mut Checkpoint, memories: &[SideMemory<T>]) {
    let mut meta = Vec::with_capacity(memories.len());
    for (i, m) in memories.iter().enumerate() {
        ckpt.insert(format!("side/{i}/values"), &m.values);
        for (j, mask) in m.masks.iter().enumerate() {
            ckpt.insert(format!("side/{i}/mask/{j}"), &mask.to_matrix::<f64>());
        }
        ckpt.insert(format!("side/{i}/epsilon"), &Matrix::filled(1, 1, m.epsilon));
        meta.push(json!({
            "masks": m.masks.len(),
            "active_shard": m.active_shard,
            "edits_recorded": m.edits_recorded,
        }));
    }
    ckpt.meta.insert("side_memories".into(), meta.into());
}

pub fn read_side_memories<T: Scalar>(ckpt: &Checkpoint) -> Result<Vec<SideMemory<T>>> {
    let Some(entries) = ckpt.meta.get("side_memories").and_then(|v| v.as_array()) else {
        return Ok(Vec::new());
    };
    let field = |e: &serde_json::Value, k: &str| -> Result<usize> {
        e.get(k)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| WiseError::Checkpoint(format!("side memory metadata lacks {k}")))
    };
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let masks = (0..field(e, "masks")?)
                .map(|j| Mask::from_matrix(&ckpt.require::<f64>(&format!("side/{i}/mask/{j}"))?))
                .collect::<Result<Vec<_>>>()?;
            Ok(SideMemory {
                values: ckpt.require(&format!("side/{i}/values"))?,
                masks,
                active_shard: field(e, "active_shard")?,
                epsilon: ckpt.require::<T>(&format!("side/{i}/epsilon"))?.get(0, 0),
                edits_recorded: field(e, "edits_recorded")?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn with_threshold(main: &Matrix<f64>, shift_row0: &[f64], eps: f64) -> SideMemory<f64> {
        let mut side = SideMemory::init(main, 1, 1.0, 0).unwrap();
        side.values.row_mut(0).iter_mut().zip(shift_row0).for_each(|(v, d)| *v += d);
        side.epsilon = eps;
        side
    }

    #[test]
    fn init_copies_and_builds_masks() {
        let main = Matrix::<f64>::random_normal(256, 64, 1.0, &mut rng(1));
        let side = init_side(&main, 2, 0.2, 3).unwrap();
        assert!(side.values.bit_eq(&main));
        assert_eq!(side.epsilon, f64::INFINITY);
        assert_eq!(side.active_shard, 0);
        assert!(side.masks.iter().all(|m| m.count_ones() == 3277));
        let full = init_side(&main, 1, 1.0, 3).unwrap();
        assert_eq!(full.masks[0], Mask::ones(256, 64));
        assert!(init_side(&main, 0, 0.2, 0).is_err());
        assert!(init_side(&main, 2, 0.0, 0).is_err());
    }

    #[test]
    fn activation_hand_cases() {
        let main = Matrix::<f64>::random_normal(4, 3, 1.0, &mut rng(2));
        let untouched = SideMemory::init(&main, 1, 1.0, 0).unwrap();
        let acts = Matrix::<f64>::random_normal(5, 4, 1.0, &mut rng(3));
        assert_eq!(routing_activation(&main, &untouched, &acts).unwrap(), 0.0);

        let side = with_threshold(&main, &[3.0, 4.0, 0.0], 1.0);
        let e1 = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0]]).unwrap();
        let d = routing_activation(&main, &side, &e1).unwrap();
        assert!((d - 5.0).abs() < 1e-12);

        let single = routing_activation(&main, &side, &acts).unwrap();
        let doubled = routing_activation(&main, &side, &acts.scale(2.0)).unwrap();
        assert!((doubled - 2.0 * single).abs() < 1e-12);
        assert!(routing_activation(&main, &side, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn epsilon_is_running_minimum() {
        let main = Matrix::<f64>::zeros(2, 2);
        let mut side = SideMemory::init(&main, 1, 1.0, 0).unwrap();
        side.update_epsilon(15.2).unwrap();
        assert_eq!(side.epsilon, 15.2);
        side.epsilon = 12.0;
        side.update_epsilon(15.2).unwrap();
        assert_eq!(side.epsilon, 12.0);
        let mut side = SideMemory::init(&main, 1, 1.0, 0).unwrap();
        for d in [18.0, 14.0, 16.0] {
            side.update_epsilon(d).unwrap();
        }
        assert_eq!(side.epsilon, 14.0);
        assert!(side.update_epsilon(-1.0).is_err());
    }

    #[test]
    fn route_branches() {
        let main = Matrix::<f64>::zeros(2, 2);
        let e1 = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let hot = with_threshold(&main, &[20.0, 0.0], 12.0);
        let d = route(&main, std::slice::from_ref(&hot), &e1, Aggregation::Mean).unwrap();
        assert!(d.use_side);
        let tie = with_threshold(&main, &[12.0, 0.0], 12.0);
        let d = route(&main, std::slice::from_ref(&tie), &e1, Aggregation::Mean).unwrap();
        assert!(d.use_side);
        let cold = with_threshold(&main, &[5.0, 0.0], 12.0);
        let d = route(&main, std::slice::from_ref(&cold), &e1, Aggregation::Mean).unwrap();
        assert!(!d.use_side);

        let a = with_threshold(&main, &[8.0, 0.0], 10.0);
        let b = with_threshold(&main, &[0.0, 19.0], 15.0);
        let d = route(&main, &[a.clone(), b], &e1, Aggregation::Mean).unwrap();
        assert_eq!((d.chosen_memory, d.use_side), (1, true));
        assert!((d.activation - 19.0).abs() < 1e-12);

        // equal activations pick the first memory
        let d = route(&main, &[a.clone(), a], &e1, Aggregation::Mean).unwrap();
        assert_eq!(d.chosen_memory, 0);
        assert!(route::<f64>(&main, &[], &e1, Aggregation::Mean).is_err());
    }

    #[test]
    fn fresh_memory_never_routes() {
        let main = Matrix::<f64>::random_normal(6, 3, 1.0, &mut rng(5));
        let side = SideMemory::init(&main, 2, 0.5, 1).unwrap();
        let bank = MemoryBank::new(&main, vec![side], Aggregation::Mean).unwrap();
        for s in 0..20 {
            let acts = Matrix::<f64>::random_normal(4, 6, 3.0, &mut rng(s));
            assert!(bank.route(&acts).is_none());
        }
    }

    #[test]
    fn last_token_aggregation_uses_final_row() {
        let main = Matrix::<f64>::zeros(2, 2);
        let side = with_threshold(&main, &[3.0, 4.0], 0.0);
        let shift = side.values.sub(&main).unwrap();
        let acts = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert_eq!(activation_shift(&shift, &acts, Aggregation::LastToken).unwrap(), 0.0);
        assert!((activation_shift(&shift, &acts, Aggregation::Mean).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn activation_gradient_matches_finite_differences() {
        let main = Matrix::<f64>::random_normal(8, 5, 1.0, &mut rng(6));
        let values = Matrix::<f64>::random_normal(8, 5, 1.0, &mut rng(7));
        let acts = Matrix::<f64>::random_normal(6, 8, 1.0, &mut rng(8));
        for agg in [Aggregation::Mean, Aggregation::LastToken] {
            let (_, grad) =
                activation_shift_grad(&values.sub(&main).unwrap(), &acts, agg).unwrap();
            let f = |v: &Matrix<f64>| activation_shift(&v.sub(&main).unwrap(), &acts, agg).unwrap();
            let r = finite_diff_check(f, &values, &grad, 40, 1).unwrap();
            assert!(r.max_rel_error < 1e-6, "{agg:?}: {r:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let main = Matrix::<f64>::random_normal(6, 3, 1.0, &mut rng(9));
        let mut a = SideMemory::init(&main, 2, 0.5, 1).unwrap();
        a.values.data_mut()[4] += 1.0;
        a.epsilon = 3.25;
        a.edits_recorded = 7;
        a.active_shard = 1;
        let b = SideMemory::init(&main, 3, 0.3, 2).unwrap();
        let mut ckpt = Checkpoint::new();
        write_side_memories(&mut ckpt, &[a.clone(), b.clone()]);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        let restored = read_side_memories::<f64>(&back).unwrap();
        assert_eq!(restored, vec![a, b]);
        assert!(back.get("side/1/mask/2").is_some());
        assert_eq!(restored[1].epsilon, f64::INFINITY);
    }

    proptest! {
        #[test]
        fn row_shuffle_leaves_activation_unchanged(seed in 0u64..1000, swap in 0usize..5) {
            let main = Matrix::<f64>::random_normal(7, 4, 1.0, &mut rng(seed));
            let values = Matrix::<f64>::random_normal(7, 4, 1.0, &mut rng(seed + 1));
            let acts = Matrix::<f64>::random_normal(5, 7, 1.0, &mut rng(seed + 2));
            let mut rows: Vec<Vec<f64>> = (0..5).map(|r| acts.row(r).to_vec()).collect();
            rows.rotate_left(swap);
            let shuffled = Matrix::from_rows(&rows).unwrap();
            let shift = values.sub(&main).unwrap();
            let a = activation_shift(&shift, &acts, Aggregation::Mean).unwrap();
            let b = activation_shift(&shift, &shuffled, Aggregation::Mean).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }
}
