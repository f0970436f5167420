//! Exact information measures on small discrete joints.
//!
//! The training objectives are motivated by how task information splits into
//! a shared part (carried by both modalities) and unique parts (carried by
//! one modality only). On a discrete joint distribution over (Z¹, Z², Y)
//! those quantities are exact sums, so the decomposition identities behind
//! that motivation can be verified to machine precision:
//!
//! * the sum of single-modality informations counts the shared part twice:
//!   I(Z¹;Y) + I(Z²;Y) = 2·I(Z¹;Z²;Y) + I(Z¹;Y|Z²) + I(Z²;Y|Z¹)
//! * the joint information counts it once:
//!   I(Z¹,Z²;Y) = I(Z¹;Z²;Y) + I(Z¹;Y|Z²) + I(Z²;Y|Z¹)
//!
//! with interaction information defined as I(Z¹;Z²;Y) = I(Z¹;Y) − I(Z¹;Y|Z²),
//! which may be negative (synergy), as the XOR joint demonstrates.
//!
//! A small equal-width binning estimator turns learned feature columns into
//! such joints for diagnostics; its consistency is not a verified claim.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndcore::tensor::Tensor;

/// Exact probability table over (Z¹, Z², Y), flat-indexed as
/// `(z1 * a2 + z2) * ay + y`.
#[derive(Debug, Clone)]
pub struct DiscreteJoint {
    probs: Vec<f64>,
    a1: usize,
    a2: usize,
    ay: usize,
}

impl DiscreteJoint {
    pub fn new(a1: usize, a2: usize, ay: usize, probs: Vec<f64>) -> Result<DiscreteJoint> {
        let mut problems = Vec::new();
        if a1 == 0 || a2 == 0 || ay == 0 {
            problems.push(format!("alphabet sizes ({a1}, {a2}, {ay}) must be positive"));
        }
        if probs.len() != a1 * a2 * ay {
            problems.push(format!(
                "table has {} entries for alphabets {a1}x{a2}x{ay}",
                probs.len()
            ));
        }
        if probs.iter().any(|&p| !(p >= 0.0)) {
            problems.push("probabilities must be non-negative".to_string());
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            problems.push(format!("probabilities sum to {total}, expected 1"));
        }
        if problems.is_empty() {
            Ok(DiscreteJoint { probs, a1, a2, ay })
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Samples a joint uniformly from the probability simplex
    /// (unit-exponential weights, normalized).
    pub fn random<R: Rng>(a1: usize, a2: usize, ay: usize, rng: &mut R) -> DiscreteJoint {
        let n = a1 * a2 * ay;
        let mut probs: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().ln()).collect();
        let total: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= total;
        }
        DiscreteJoint::new(a1, a2, ay, probs).expect("normalized by construction")
    }

    pub fn alphabets(&self) -> (usize, usize, usize) {
        (self.a1, self.a2, self.ay)
    }

    pub fn prob(&self, z1: usize, z2: usize, y: usize) -> f64 {
        self.probs[(z1 * self.a2 + z2) * self.ay + y]
    }

    /// Entropy in bits of the marginal over the selected variables
    /// (`use_z1`, `use_z2`, `use_y`), with 0·log 0 = 0.
    fn marginal_entropy(&self, use_z1: bool, use_z2: bool, use_y: bool) -> f64 {
        let size = |used: bool, a: usize| if used { a } else { 1 };
        let (s1, s2, sy) = (
            size(use_z1, self.a1),
            size(use_z2, self.a2),
            size(use_y, self.ay),
        );
        let mut marginal = vec![0.0; s1 * s2 * sy];
        for z1 in 0..self.a1 {
            for z2 in 0..self.a2 {
                for y in 0..self.ay {
                    let i1 = if use_z1 { z1 } else { 0 };
                    let i2 = if use_z2 { z2 } else { 0 };
                    let iy = if use_y { y } else { 0 };
                    marginal[(i1 * s2 + i2) * sy + iy] += self.prob(z1, z2, y);
                }
            }
        }
        -marginal
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.log2())
            .sum::<f64>()
    }
}

/// The information quantities answerable from a (Z¹, Z², Y) joint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiQuery {
    /// I(Z¹;Y)
    MutualZ1Y,
    /// I(Z²;Y)
    MutualZ2Y,
    /// I(Z¹;Y|Z²)
    CondZ1YGivenZ2,
    /// I(Z²;Y|Z¹)
    CondZ2YGivenZ1,
    /// Interaction information I(Z¹;Z²;Y) = I(Z¹;Y) − I(Z¹;Y|Z²); negative
    /// values indicate synergy.
    Interaction,
    /// I(Z¹,Z²;Y)
    JointZY,
}

/// All seven marginal entropies, computed once so every derived quantity
/// uses identical floating-point values (this is what keeps the
/// decomposition residuals at machine precision).
struct Entropies {
    h1: f64,
    h2: f64,
    hy: f64,
    h12: f64,
    h1y: f64,
    h2y: f64,
    h12y: f64,
}

impl Entropies {
    fn of(joint: &DiscreteJoint) -> Entropies {
        Entropies {
            h1: joint.marginal_entropy(true, false, false),
            h2: joint.marginal_entropy(false, true, false),
            hy: joint.marginal_entropy(false, false, true),
            h12: joint.marginal_entropy(true, true, false),
            h1y: joint.marginal_entropy(true, false, true),
            h2y: joint.marginal_entropy(false, true, true),
            h12y: joint.marginal_entropy(true, true, true),
        }
    }

    fn mutual_z1_y(&self) -> f64 {
        self.h1 + self.hy - self.h1y
    }

    fn mutual_z2_y(&self) -> f64 {
        self.h2 + self.hy - self.h2y
    }

    fn cond_z1_y_given_z2(&self) -> f64 {
        self.h12 + self.h2y - self.h2 - self.h12y
    }

    fn cond_z2_y_given_z1(&self) -> f64 {
        self.h12 + self.h1y - self.h1 - self.h12y
    }

    fn interaction(&self) -> f64 {
        self.mutual_z1_y() - self.cond_z1_y_given_z2()
    }

    fn joint_z_y(&self) -> f64 {
        self.h12 + self.hy - self.h12y
    }
}

/// Exact value of the requested information quantity, in bits.
pub fn mi_query(joint: &DiscreteJoint, query: MiQuery) -> f64 {
    let e = Entropies::of(joint);
    match query {
        MiQuery::MutualZ1Y => e.mutual_z1_y(),
        MiQuery::MutualZ2Y => e.mutual_z2_y(),
        MiQuery::CondZ1YGivenZ2 => e.cond_z1_y_given_z2(),
        MiQuery::CondZ2YGivenZ1 => e.cond_z2_y_given_z1(),
        MiQuery::Interaction => e.interaction(),
        MiQuery::JointZY => e.joint_z_y(),
    }
}

/// Residuals of the two information decompositions (see module docs); both
/// are algebraic identities, so residuals beyond 1e-12 indicate a broken
/// implementation, not an interesting joint.
#[derive(Debug, Clone, Copy)]
pub struct DecompositionReport {
    /// |I(Z¹;Y) + I(Z²;Y) − 2·interaction − I(Z¹;Y|Z²) − I(Z²;Y|Z¹)|
    pub marginal_mi_residual: f64,
    /// |I(Z¹,Z²;Y) − interaction − I(Z¹;Y|Z²) − I(Z²;Y|Z¹)|
    pub joint_mi_residual: f64,
}

impl DecompositionReport {
    pub fn max_residual(&self) -> f64 {
        self.marginal_mi_residual.max(self.joint_mi_residual)
    }
}

/// Evaluates both decomposition identities on the joint.
pub fn verify_decomposition(joint: &DiscreteJoint) -> DecompositionReport {
    let e = Entropies::of(joint);
    let shared_twice = 2.0 * e.interaction() + e.cond_z1_y_given_z2() + e.cond_z2_y_given_z1();
    let shared_once = e.interaction() + e.cond_z1_y_given_z2() + e.cond_z2_y_given_z1();
    DecompositionReport {
        marginal_mi_residual: (e.mutual_z1_y() + e.mutual_z2_y() - shared_twice).abs(),
        joint_mi_residual: (e.joint_z_y() - shared_once).abs(),
    }
}

/// Builds a discrete joint from feature columns by equal-width binning.
/// `dims_used` selects which feature dimensions enter (the same dimensions
/// for both modalities); the table has `bins_per_dim^dims_used.len()` states
/// per modality, so keep `dims_used` at one or two entries.
pub fn bin_features(
    z1: &Tensor,
    z2: &Tensor,
    y: &[usize],
    bins_per_dim: usize,
    dims_used: &[usize],
) -> Result<DiscreteJoint> {
    let n = y.len();
    let mut problems = Vec::new();
    if bins_per_dim < 2 {
        problems.push(format!("bins_per_dim = {bins_per_dim} must be >= 2"));
    }
    if dims_used.is_empty() || dims_used.len() > 2 {
        problems.push(format!(
            "dims_used must select 1 or 2 dimensions, got {}",
            dims_used.len()
        ));
    }
    if z1.rows() != n || z2.rows() != n {
        problems.push(format!(
            "row counts ({}, {}) disagree with {} labels",
            z1.rows(),
            z2.rows(),
            n
        ));
    }
    if n == 0 {
        problems.push("no samples".to_string());
    }
    for &d in dims_used {
        if d >= z1.cols() || d >= z2.cols() {
            problems.push(format!("dimension {d} out of range"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }

    let ay = y.iter().copied().max().unwrap_or(0) + 1;
    let states = bins_per_dim.pow(dims_used.len() as u32);
    let table_size = states * states * ay;
    if n < 10 * table_size {
        log::warn!(
            "binning {n} samples into a {table_size}-cell table; estimates will be noisy"
        );
    }

    // Per (modality, dim) bin edges from the observed range; constant
    // columns collapse into bin 0.
    let bin_of = |t: &Tensor, row: usize, dim: usize, lo: f64, hi: f64| -> usize {
        if hi <= lo {
            return 0;
        }
        let x = t.get(row, dim);
        let idx = ((x - lo) / (hi - lo) * bins_per_dim as f64) as usize;
        idx.min(bins_per_dim - 1)
    };
    let ranges = |t: &Tensor| -> Vec<(f64, f64)> {
        dims_used
            .iter()
            .map(|&d| {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for i in 0..t.rows() {
                    lo = lo.min(t.get(i, d));
                    hi = hi.max(t.get(i, d));
                }
                (lo, hi)
            })
            .collect()
    };
    let r1 = ranges(z1);
    let r2 = ranges(z2);

    let state_of = |t: &Tensor, row: usize, ranges: &[(f64, f64)]| -> usize {
        dims_used
            .iter()
            .zip(ranges)
            .fold(0, |acc, (&d, &(lo, hi))| {
                acc * bins_per_dim + bin_of(t, row, d, lo, hi)
            })
    };

    let mut counts = vec![0.0; table_size];
    for (row, &label) in y.iter().enumerate() {
        let s1 = state_of(z1, row, &r1);
        let s2 = state_of(z2, row, &r2);
        counts[(s1 * states + s2) * ay + label] += 1.0;
    }
    for c in counts.iter_mut() {
        *c /= n as f64;
    }
    DiscreteJoint::new(states, states, ay, counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Z¹ = Z² = Y, uniform binary.
    fn copy_joint() -> DiscreteJoint {
        let mut probs = vec![0.0; 8];
        probs[0] = 0.5; // (0,0,0)
        probs[7] = 0.5; // (1,1,1)
        DiscreteJoint::new(2, 2, 2, probs).unwrap()
    }

    /// Z¹, Z² uniform independent, Y = Z¹ XOR Z².
    fn xor_joint() -> DiscreteJoint {
        let mut probs = vec![0.0; 8];
        for z1 in 0..2usize {
            for z2 in 0..2usize {
                let y = z1 ^ z2;
                probs[(z1 * 2 + z2) * 2 + y] = 0.25;
            }
        }
        DiscreteJoint::new(2, 2, 2, probs).unwrap()
    }

    #[test]
    fn rejects_unnormalized_table() {
        let err = DiscreteJoint::new(2, 2, 2, vec![0.2; 8]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn independent_z1_carries_no_information() {
        // p(z1, z2, y) = p(z1) · p(z2, y) with arbitrary factors.
        let pz1 = [0.3, 0.7];
        let pz2y = [0.1, 0.25, 0.4, 0.25];
        let mut probs = Vec::with_capacity(8);
        for &a in &pz1 {
            for &b in &pz2y {
                probs.push(a * b);
            }
        }
        let joint = DiscreteJoint::new(2, 2, 2, probs).unwrap();
        assert!(mi_query(&joint, MiQuery::MutualZ1Y).abs() < 1e-12);
        assert!(mi_query(&joint, MiQuery::CondZ1YGivenZ2).abs() < 1e-12);
    }

    #[test]
    fn copied_variable_carries_one_bit() {
        let joint = copy_joint();
        assert!((mi_query(&joint, MiQuery::MutualZ1Y) - 1.0).abs() < 1e-12);
        assert!(mi_query(&joint, MiQuery::CondZ1YGivenZ2).abs() < 1e-12);
        assert!((mi_query(&joint, MiQuery::Interaction) - 1.0).abs() < 1e-12);
        assert!((mi_query(&joint, MiQuery::JointZY) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn xor_interaction_is_exactly_minus_one() {
        let joint = xor_joint();
        assert_eq!(mi_query(&joint, MiQuery::MutualZ1Y), 0.0);
        assert_eq!(mi_query(&joint, MiQuery::CondZ1YGivenZ2), 1.0);
        assert_eq!(mi_query(&joint, MiQuery::Interaction), -1.0);
        assert_eq!(mi_query(&joint, MiQuery::JointZY), 1.0);
    }

    #[test]
    fn decomposition_identities_hold_on_random_joints() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for trial in 0..100 {
            let a1 = rng.random_range(2..=4);
            let a2 = rng.random_range(2..=4);
            let ay = rng.random_range(2..=4);
            let joint = DiscreteJoint::random(a1, a2, ay, &mut rng);
            let report = verify_decomposition(&joint);
            assert!(
                report.max_residual() <= 1e-12,
                "trial {trial}: residuals {report:?}"
            );
            // Chain rule, same tolerance.
            let lhs = mi_query(&joint, MiQuery::JointZY);
            let rhs = mi_query(&joint, MiQuery::MutualZ1Y)
                + mi_query(&joint, MiQuery::CondZ2YGivenZ1);
            assert!((lhs - rhs).abs() <= 1e-12, "trial {trial}: chain rule");
            // Plain MI and CMI are non-negative.
            for q in [
                MiQuery::MutualZ1Y,
                MiQuery::MutualZ2Y,
                MiQuery::CondZ1YGivenZ2,
                MiQuery::CondZ2YGivenZ1,
                MiQuery::JointZY,
            ] {
                assert!(mi_query(&joint, q) >= -1e-12, "trial {trial}: {q:?}");
            }
        }
    }

    #[test]
    fn decomposition_survives_negative_interaction() {
        let report = verify_decomposition(&xor_joint());
        assert!(report.max_residual() <= 1e-12);
    }

    #[test]
    fn binning_constant_features_gives_zero_information() {
        let z = Tensor::filled(40, 2, 1.5);
        let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let joint = bin_features(&z, &z, &y, 2, &[0]).unwrap();
        assert!(mi_query(&joint, MiQuery::MutualZ1Y).abs() < 1e-12);
    }

    #[test]
    fn binning_label_copy_recovers_label_entropy() {
        let n = 400;
        let y: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let mut z = Tensor::zeros(n, 1);
        for (i, &label) in y.iter().enumerate() {
            z.set(i, 0, label as f64);
        }
        let joint = bin_features(&z, &z, &y, 4, &[0]).unwrap();
        // H(Y) = 2 bits for four balanced classes.
        assert!((mi_query(&joint, MiQuery::MutualZ1Y) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn binning_estimate_tightens_with_more_samples() {
        // Known source: Z¹, Z² uniform bits, Y = XOR; exact I(Z¹;Y|Z²) = 1.
        let sample = |n: usize, seed: u64| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut z1 = Tensor::zeros(n, 1);
            let mut z2 = Tensor::zeros(n, 1);
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let a = rng.random_range(0..2usize);
                let b = rng.random_range(0..2usize);
                z1.set(i, 0, a as f64);
                z2.set(i, 0, b as f64);
                y.push(a ^ b);
            }
            let joint = bin_features(&z1, &z2, &y, 2, &[0]).unwrap();
            (mi_query(&joint, MiQuery::CondZ1YGivenZ2) - 1.0).abs()
        };
        let coarse = sample(100, 4);
        let fine = sample(6400, 4);
        assert!(
            fine < coarse,
            "error should shrink with samples: {coarse} -> {fine}"
        );
    }

    #[test]
    fn binning_validates_inputs() {
        let z = Tensor::zeros(10, 2);
        let y = vec![0usize; 10];
        assert!(matches!(
            bin_features(&z, &z, &y, 1, &[0]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            bin_features(&z, &z, &y, 2, &[0, 1, 0]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            bin_features(&z, &z, &y, 2, &[5]),
            Err(Error::Validation(_))
        ));
    }
}
