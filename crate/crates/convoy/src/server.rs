//! The untrusted server's compute step, plus configurable misbehavior for
//! the detection experiments.
//!
//! An honest server returns `Ybar' = Wbar x Xbar'`. Every other behavior
//! perturbs the honest product and is guaranteed to return something
//! different from it, so a returned-but-accepted tampered result is always a
//! verification miss, never a no-op adversary.

use rand::Rng;

use crate::tensor::{Matrix, Scalar, TensorError};

/// What the server does with a compute request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerBehavior {
    /// Return the true product.
    Honest,
    /// Add a nonzero offset from the sample set to one random entry.
    TamperOne,
    /// Add nonzero offsets to `entries` distinct random entries.
    TamperSparse { entries: usize },
    /// Multiply the whole product by a constant other than one.
    ScaleAll { factor: i64 },
    /// Replace the product with a fresh random matrix.
    RandomMatrix,
    /// Skip the work and return zeros.
    LazyZero,
}

impl ServerBehavior {
    pub fn is_honest(&self) -> bool {
        matches!(self, ServerBehavior::Honest)
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            ServerBehavior::TamperSparse { entries: 0 } => {
                Err("tamper-sparse needs at least one entry".into())
            }
            ServerBehavior::ScaleAll { factor: 1 } => {
                Err("scale-all factor must differ from 1".into())
            }
            _ => Ok(()),
        }
    }

    /// Parses `kind[:params]`, e.g. `honest`, `tamper-one`, `tamper-sparse:5`,
    /// `scale-all:3`, `random-matrix`, `lazy-zero`.
    pub fn parse(spec: &str) -> Result<Self, String> {
        let (kind, param) = match spec.split_once(':') {
            Some((k, p)) => (k, Some(p)),
            None => (spec, None),
        };
        let behavior = match (kind, param) {
            ("honest", None) => ServerBehavior::Honest,
            ("tamper-one", None) => ServerBehavior::TamperOne,
            ("tamper-sparse", Some(p)) => ServerBehavior::TamperSparse {
                entries: p.parse().map_err(|_| format!("bad entry count {p:?}"))?,
            },
            ("tamper-sparse", None) => ServerBehavior::TamperSparse { entries: 2 },
            ("scale-all", Some(p)) => ServerBehavior::ScaleAll {
                factor: p.parse().map_err(|_| format!("bad scale factor {p:?}"))?,
            },
            ("scale-all", None) => ServerBehavior::ScaleAll { factor: 2 },
            ("random-matrix", None) => ServerBehavior::RandomMatrix,
            ("lazy-zero", None) => ServerBehavior::LazyZero,
            _ => return Err(format!("unknown behavior {spec:?}")),
        };
        behavior.validate()?;
        Ok(behavior)
    }

    pub const ALL_DISHONEST: [&'static str; 5] = [
        "tamper-one",
        "tamper-sparse:3",
        "scale-all:2",
        "random-matrix",
        "lazy-zero",
    ];
}

impl std::fmt::Display for ServerBehavior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ServerBehavior::Honest => write!(f, "honest"),
            ServerBehavior::TamperOne => write!(f, "tamper-one"),
            ServerBehavior::TamperSparse { entries } => write!(f, "tamper-sparse:{entries}"),
            ServerBehavior::ScaleAll { factor } => write!(f, "scale-all:{factor}"),
            ServerBehavior::RandomMatrix => write!(f, "random-matrix"),
            ServerBehavior::LazyZero => write!(f, "lazy-zero"),
        }
    }
}

/// The honest compute step: `Ybar' = Wbar x Xbar'`.
pub fn compute<T: Scalar>(
    wbar: &Matrix<T>,
    xbar_prime: &Matrix<T>,
) -> Result<Matrix<T>, TensorError> {
    wbar.matmul(xbar_prime)
}

/// Applies the configured behavior to a compute request. Tamper offsets are
/// drawn from the sample set of width `lambda1`, keeping the integer-mode
/// detection experiment inside the soundness theorem's value field.
pub fn adversary_compute<T: Scalar, R: Rng + ?Sized>(
    wbar: &Matrix<T>,
    xbar_prime: &Matrix<T>,
    behavior: ServerBehavior,
    lambda1: u32,
    rng: &mut R,
) -> Result<Matrix<T>, TensorError> {
    let honest = compute(wbar, xbar_prime)?;
    if behavior.is_honest() {
        return Ok(honest);
    }
    let (rows, cols) = (honest.rows(), honest.cols());
    let mut tampered = match behavior {
        ServerBehavior::Honest => unreachable!(),
        ServerBehavior::TamperOne => {
            let mut m = honest.clone();
            add_offset_at(&mut m, rng.random_range(0..rows * cols), lambda1, rng)?;
            m
        }
        ServerBehavior::TamperSparse { entries } => {
            let total = rows * cols;
            let mut m = honest.clone();
            let mut picked = Vec::with_capacity(entries.min(total));
            while picked.len() < entries.min(total) {
                let idx = rng.random_range(0..total);
                if !picked.contains(&idx) {
                    picked.push(idx);
                }
            }
            for idx in picked {
                add_offset_at(&mut m, idx, lambda1, rng)?;
            }
            m
        }
        ServerBehavior::ScaleAll { factor } => honest.scale(T::from_i64(factor))?,
        ServerBehavior::RandomMatrix => {
            let data = (0..rows * cols).map(|_| T::sample_z(lambda1, rng)).collect();
            Matrix::new(rows, cols, data)?
        }
        ServerBehavior::LazyZero => Matrix::zeros(rows, cols),
    };
    // A scaled or replaced all-zero product can coincide with the honest one;
    // force a difference so every dishonest reply really is incorrect.
    if tampered == honest {
        add_offset_at(&mut tampered, rng.random_range(0..rows * cols), lambda1, rng)?;
    }
    Ok(tampered)
}

fn add_offset_at<T: Scalar, R: Rng + ?Sized>(
    m: &mut Matrix<T>,
    idx: usize,
    lambda1: u32,
    rng: &mut R,
) -> Result<(), TensorError> {
    let cols = m.cols();
    let (r, c) = (idx / cols, idx % cols);
    let offset = T::sample_z(lambda1, rng);
    let value = m[(r, c)]
        .checked_add(offset)
        .ok_or(TensorError::Overflow("tamper"))?;
    m.set(r, c, value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::tally;
    use crate::tensor::{im2col, ConvShape, InputTensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn diff_count<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> usize {
        a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count()
    }

    #[test]
    fn identity_kernel_matrix_echoes_the_input() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let x = Matrix::<i64>::random(3, 5, 100, &mut rng);
        let mut id = Matrix::<i64>::zeros(3, 3);
        for i in 0..3 {
            id.set(i, i, 1);
        }
        assert_eq!(compute(&id, &x).unwrap(), x);
    }

    #[test]
    fn compute_matches_the_lowering_example() {
        let shape = ConvShape::new(3, 3, 2, 1, 1).unwrap();
        let x = InputTensor::new(
            shape,
            vec![Matrix::new(3, 3, (1..=9i64).collect()).unwrap()],
        )
        .unwrap();
        let wbar = Matrix::new(1, 4, vec![1i64, 0, 0, 1]).unwrap();
        let ybar = compute(&wbar, &im2col(&x)).unwrap();
        assert_eq!(ybar.data(), &[6, 8, 12, 14]);
    }

    #[test]
    fn compute_multiply_counter_matches_the_cost_model() {
        let shape = ConvShape::new(3, 3, 2, 1, 2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let wbar = Matrix::<i64>::random(shape.c_out, shape.patch_len(), 8, &mut rng);
        let xp = Matrix::<i64>::random(shape.patch_len(), shape.window_count(), 8, &mut rng);
        let (_, counts) = tally(|| compute(&wbar, &xp).unwrap());
        assert_eq!(counts.sm, 2 * 4 * 4);
    }

    #[test]
    fn honest_behavior_is_bit_identical_to_compute() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let wbar = Matrix::<i64>::random(2, 4, 50, &mut rng);
        let xp = Matrix::<i64>::random(4, 6, 50, &mut rng);
        let honest = compute(&wbar, &xp).unwrap();
        let replied =
            adversary_compute(&wbar, &xp, ServerBehavior::Honest, 16, &mut rng).unwrap();
        assert_eq!(replied, honest);
    }

    #[test]
    fn tamper_one_differs_in_exactly_one_entry() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let wbar = Matrix::<i64>::random(2, 4, 50, &mut rng);
            let xp = Matrix::<i64>::random(4, 6, 50, &mut rng);
            let honest = compute(&wbar, &xp).unwrap();
            let replied =
                adversary_compute(&wbar, &xp, ServerBehavior::TamperOne, 16, &mut rng).unwrap();
            assert_eq!(diff_count(&replied, &honest), 1);
        }
    }

    #[test]
    fn tamper_sparse_touches_the_requested_number_of_entries() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let wbar = Matrix::<i64>::random(3, 4, 50, &mut rng);
        let xp = Matrix::<i64>::random(4, 8, 50, &mut rng);
        let honest = compute(&wbar, &xp).unwrap();
        let behavior = ServerBehavior::TamperSparse { entries: 5 };
        let replied = adversary_compute(&wbar, &xp, behavior, 16, &mut rng).unwrap();
        assert_eq!(diff_count(&replied, &honest), 5);
    }

    #[test]
    fn lazy_zero_differs_from_a_nonzero_product() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let wbar = Matrix::new(1, 2, vec![1i64, 1]).unwrap();
        let xp = Matrix::new(2, 2, vec![1i64, 2, 3, 4]).unwrap();
        let honest = compute(&wbar, &xp).unwrap();
        let replied =
            adversary_compute(&wbar, &xp, ServerBehavior::LazyZero, 16, &mut rng).unwrap();
        assert!(replied.data().iter().all(|&v| v == 0));
        assert_ne!(replied, honest);
    }

    #[test]
    fn every_dishonest_behavior_differs_even_on_a_zero_product() {
        // Wbar = 0 makes the honest product all zeros, the degenerate case
        // where scaling and zero-return would otherwise be no-ops.
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let wbar = Matrix::<i64>::zeros(2, 4);
        let xp = Matrix::<i64>::random(4, 5, 50, &mut rng);
        let honest = compute(&wbar, &xp).unwrap();
        for spec in ServerBehavior::ALL_DISHONEST {
            let behavior = ServerBehavior::parse(spec).unwrap();
            let replied = adversary_compute(&wbar, &xp, behavior, 16, &mut rng).unwrap();
            assert_ne!(replied, honest, "behavior {spec} returned the honest product");
        }
    }

    #[test]
    fn behavior_parsing() {
        assert_eq!(ServerBehavior::parse("honest"), Ok(ServerBehavior::Honest));
        assert_eq!(
            ServerBehavior::parse("tamper-sparse:7"),
            Ok(ServerBehavior::TamperSparse { entries: 7 })
        );
        assert_eq!(
            ServerBehavior::parse("scale-all:-2"),
            Ok(ServerBehavior::ScaleAll { factor: -2 })
        );
        assert!(ServerBehavior::parse("scale-all:1").is_err());
        assert!(ServerBehavior::parse("tamper-sparse:0").is_err());
        assert!(ServerBehavior::parse("nonsense").is_err());
    }
}
