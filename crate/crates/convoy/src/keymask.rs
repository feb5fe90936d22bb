//! Client-side key material: security parameters, the precomputed mask pool,
//! per-input secret keys, blinding, and recovery.
//!
//! Before any inference, the client draws `lambda2` random mask matrices
//! `R_l` with entries in the sample set `Z` and stores them together with
//! their images `P_l = Wbar x R_l`. Per input it picks a fresh nonempty
//! subset of the pool plus a random row vector `r`, blinds the patch matrix
//! by adding the selected masks, and later recovers the true product by
//! subtracting the corresponding `P_l`.
//!
//! The pool is reused across inputs exactly as the scheme prescribes; the
//! resulting mask-reuse caveat is inherent to the scheme and documented, not
//! fixed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::tensor::{ArithMode, ConvShape, Matrix, Scalar, TensorError};
use crate::verify::TolerancePolicy;
use crate::wire::{self, WireError};

/// Magic bytes of the on-disk mask cache.
pub const MASK_CACHE_MAGIC: [u8; 4] = *b"CVYM";
const MASK_CACHE_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParamError {
    #[error("lambda1 must be between 1 and 62, got {0}")]
    BadLambda1(u32),
    #[error("lambda2 must be >= 1, got {0}")]
    BadLambda2(u32),
    #[error(
        "overflow budget exceeded for shape {shape}: c_in*k^2 * 2^lambda1 * max|Xbar'| \
         = {product} must stay below 2^63 (lambda1={lambda1}, lambda2={lambda2}, \
         input bound {input_bound})"
    )]
    OverflowBudget {
        shape: ConvShape,
        lambda1: u32,
        lambda2: u32,
        input_bound: u64,
        product: u128,
    },
    #[error("arithmetic mode mismatch: parameters are {params}, values are {values}")]
    ModeMismatch { params: ArithMode, values: ArithMode },
}

/// Security parameters: mask magnitude width `lambda1`, pool size `lambda2`,
/// arithmetic mode, and the verification tolerance.
///
/// The sample set is `Z = (-2^lambda1, 0) ∪ (0, 2^lambda1)`; zero is excluded
/// by construction. In integer mode the parameters are checked against the
/// overflow budget at construction time so misconfiguration fails fast
/// instead of surfacing as a mid-protocol overflow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecurityParams {
    lambda1: u32,
    lambda2: u32,
    mode: ArithMode,
    tolerance: TolerancePolicy,
    input_bound: u64,
}

impl SecurityParams {
    /// Declared bound on input and weight magnitudes used by the overflow
    /// budget and by synthetic data generation.
    pub const DEFAULT_INPUT_BOUND: u64 = 1 << 10;

    pub fn new<T: Scalar>(
        lambda1: u32,
        lambda2: u32,
        shape: &ConvShape,
    ) -> Result<Self, ParamError> {
        Self::with_input_bound::<T>(lambda1, lambda2, shape, Self::DEFAULT_INPUT_BOUND)
    }

    pub fn with_input_bound<T: Scalar>(
        lambda1: u32,
        lambda2: u32,
        shape: &ConvShape,
        input_bound: u64,
    ) -> Result<Self, ParamError> {
        if lambda1 == 0 || lambda1 > 62 {
            return Err(ParamError::BadLambda1(lambda1));
        }
        if lambda2 == 0 {
            return Err(ParamError::BadLambda2(lambda2));
        }
        if T::MODE == ArithMode::Int {
            // Worst case a blinded entry is the input bound plus all lambda2
            // masks at maximum magnitude; a served dot product then scales it
            // by c_in*k^2 * 2^lambda1.
            let mask_max = (1u128 << lambda1) - 1;
            let max_blinded = input_bound as u128 + lambda2 as u128 * mask_max;
            let product = (shape.patch_len() as u128)
                .saturating_mul(1u128 << lambda1)
                .saturating_mul(max_blinded);
            if product >= 1u128 << 63 {
                return Err(ParamError::OverflowBudget {
                    shape: *shape,
                    lambda1,
                    lambda2,
                    input_bound,
                    product,
                });
            }
        }
        Ok(SecurityParams {
            lambda1,
            lambda2,
            mode: T::MODE,
            tolerance: TolerancePolicy::default_for(T::MODE),
            input_bound,
        })
    }

    /// Overrides the verification tolerance. Integer mode always verifies
    /// exactly; the override is ignored there.
    pub fn with_tolerance(mut self, tolerance: TolerancePolicy) -> Self {
        self.tolerance = match self.mode {
            ArithMode::Int => TolerancePolicy::EXACT,
            ArithMode::Float => tolerance,
        };
        self
    }

    pub fn lambda1(&self) -> u32 {
        self.lambda1
    }

    pub fn lambda2(&self) -> u32 {
        self.lambda2
    }

    pub fn mode(&self) -> ArithMode {
        self.mode
    }

    pub fn tolerance(&self) -> TolerancePolicy {
        self.tolerance
    }

    pub fn input_bound(&self) -> u64 {
        self.input_bound
    }

    /// `|Z| = 2 * (2^lambda1 - 1)`, the integer-mode sample-set size that
    /// governs the soundness bound `1 - 1/|Z|`.
    pub fn z_size(&self) -> u128 {
        2 * ((1u128 << self.lambda1) - 1)
    }

    pub(crate) fn check_mode<T: Scalar>(&self) -> Result<(), ParamError> {
        if self.mode != T::MODE {
            return Err(ParamError::ModeMismatch {
                params: self.mode,
                values: T::MODE,
            });
        }
        Ok(())
    }
}

/// Draws one value from the sample set `Z`. Never returns zero.
pub fn sample_z<T: Scalar, R: Rng + ?Sized>(params: &SecurityParams, rng: &mut R) -> T {
    T::sample_z(params.lambda1(), rng)
}

/// The precomputed pool: `lambda2` pairs `(R_l, P_l)` with
/// `P_l = Wbar x R_l`, all tied to one kernel matrix and layer shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet<T> {
    shape: ConvShape,
    lambda1: u32,
    r_masks: Vec<Matrix<T>>,
    p_masks: Vec<Matrix<T>>,
}

impl<T: Scalar> MaskSet<T> {
    /// Pool size `lambda2`.
    pub fn len(&self) -> usize {
        self.r_masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_masks.is_empty()
    }

    pub fn shape(&self) -> &ConvShape {
        &self.shape
    }

    pub fn lambda1(&self) -> u32 {
        self.lambda1
    }

    pub fn r_mask(&self, l: usize) -> &Matrix<T> {
        &self.r_masks[l]
    }

    pub fn p_mask(&self, l: usize) -> &Matrix<T> {
        &self.p_masks[l]
    }

    /// Recomputes every `P_l` and compares against the stored image.
    pub fn check_consistency(&self, wbar: &Matrix<T>) -> Result<bool, TensorError> {
        for (r, p) in self.r_masks.iter().zip(&self.p_masks) {
            if wbar.matmul(r)? != *p {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Writes the pool to disk: magic `CVYM`, version byte, lambda1/lambda2,
    /// shape header, then each matrix in the wire layout.
    pub fn save(&self, path: &Path) -> Result<(), CacheError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&MASK_CACHE_MAGIC)?;
        w.write_all(&[MASK_CACHE_VERSION])?;
        w.write_all(&self.lambda1.to_le_bytes())?;
        w.write_all(&(self.r_masks.len() as u32).to_le_bytes())?;
        for dim in [
            self.shape.m,
            self.shape.n,
            self.shape.k,
            self.shape.c_in,
            self.shape.c_out,
        ] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for m in self.r_masks.iter().chain(&self.p_masks) {
            w.write_all(&wire::encode_matrix(m))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CacheError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_cache_bytes(&bytes)
    }

    fn from_cache_bytes(bytes: &[u8]) -> Result<Self, CacheError> {
        let malformed = |msg: &str| CacheError::Malformed(msg.to_string());
        if bytes.len() < 4 + 1 + 4 + 4 + 20 {
            return Err(malformed("header too short"));
        }
        if bytes[0..4] != MASK_CACHE_MAGIC {
            return Err(malformed("bad magic"));
        }
        if bytes[4] != MASK_CACHE_VERSION {
            return Err(malformed("unsupported version"));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let lambda1 = u32_at(5);
        let lambda2 = u32_at(9) as usize;
        let dims: Vec<usize> = (0..5).map(|i| u32_at(13 + 4 * i) as usize).collect();
        let shape = ConvShape::new(dims[0], dims[1], dims[2], dims[3], dims[4])
            .map_err(|e| CacheError::Malformed(e.to_string()))?;
        if lambda2 == 0 {
            return Err(malformed("empty pool"));
        }

        let mut offset = 33;
        let mut read_matrix = |rows: usize, cols: usize| -> Result<Matrix<T>, CacheError> {
            let (m, consumed) = wire::decode_matrix::<T>(&bytes[offset..])?;
            offset += consumed;
            if m.rows() != rows || m.cols() != cols {
                return Err(CacheError::Malformed(format!(
                    "matrix is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    rows,
                    cols
                )));
            }
            Ok(m)
        };
        let r_masks: Vec<_> = (0..lambda2)
            .map(|_| read_matrix(shape.patch_len(), shape.window_count()))
            .collect::<Result<_, _>>()?;
        let p_masks: Vec<_> = (0..lambda2)
            .map(|_| read_matrix(shape.c_out, shape.window_count()))
            .collect::<Result<_, _>>()?;
        if offset != bytes.len() {
            return Err(malformed("trailing bytes"));
        }
        for m in &r_masks {
            if !m.data().iter().all(|v| in_sample_set(*v, lambda1)) {
                return Err(malformed("mask entry outside the sample set"));
            }
        }
        Ok(MaskSet {
            shape,
            lambda1,
            r_masks,
            p_masks,
        })
    }
}

fn in_sample_set<T: Scalar>(v: T, lambda1: u32) -> bool {
    let magnitude = v.to_f64().abs();
    let upper = (1u64 << lambda1) as f64;
    match T::MODE {
        ArithMode::Int => magnitude >= 1.0 && magnitude < upper,
        ArithMode::Float => magnitude >= 1.0 && magnitude < upper,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed mask cache: {0}")]
    Malformed(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Per-input secret key: the selected mask indices and the verification
/// vector seed `r`. Never serialized and never sent anywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct SecretKey<T> {
    index_set: Vec<usize>,
    r: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KeyError {
    #[error("index set must be nonempty")]
    EmptyIndexSet,
    #[error("duplicate mask index {0}")]
    DuplicateIndex(usize),
    #[error("r must not contain zero entries")]
    ZeroEntry,
}

impl<T: Scalar> SecretKey<T> {
    pub fn new(mut index_set: Vec<usize>, r: Vec<T>) -> Result<Self, KeyError> {
        if index_set.is_empty() {
            return Err(KeyError::EmptyIndexSet);
        }
        index_set.sort_unstable();
        for pair in index_set.windows(2) {
            if pair[0] == pair[1] {
                return Err(KeyError::DuplicateIndex(pair[0]));
            }
        }
        if r.iter().any(|v| *v == T::zero()) {
            return Err(KeyError::ZeroEntry);
        }
        Ok(SecretKey { index_set, r })
    }

    /// Selected mask indices (0-based, sorted, duplicate-free).
    pub fn index_set(&self) -> &[usize] {
        &self.index_set
    }

    /// `|I|`, the number of masks folded into this input.
    pub fn index_len(&self) -> usize {
        self.index_set.len()
    }

    pub fn r(&self) -> &[T] {
        &self.r
    }
}

/// The blinded patch matrix sent to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct BlindedInput<T> {
    xbar_prime: Matrix<T>,
}

impl<T: Scalar> BlindedInput<T> {
    pub fn matrix(&self) -> &Matrix<T> {
        &self.xbar_prime
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.xbar_prime
    }
}

/// Builds the mask pool for one kernel matrix: `lambda2` random masks and
/// their images `P_l = Wbar x R_l`.
pub fn precompute_masks<T: Scalar, R: Rng + ?Sized>(
    wbar: &Matrix<T>,
    shape: &ConvShape,
    params: &SecurityParams,
    rng: &mut R,
) -> Result<MaskSet<T>, TensorError> {
    params
        .check_mode::<T>()
        .map_err(|e| TensorError::InvalidShape(e.to_string()))?;
    if wbar.rows() != shape.c_out || wbar.cols() != shape.patch_len() {
        return Err(TensorError::DimMismatch {
            context: "mask precomputation",
            detail: format!(
                "kernel matrix is {}x{}, expected {}x{}",
                wbar.rows(),
                wbar.cols(),
                shape.c_out,
                shape.patch_len()
            ),
        });
    }
    let rows = shape.patch_len();
    let cols = shape.window_count();
    let mut r_masks = Vec::with_capacity(params.lambda2() as usize);
    let mut p_masks = Vec::with_capacity(params.lambda2() as usize);
    for _ in 0..params.lambda2() {
        let data: Vec<T> = (0..rows * cols).map(|_| sample_z(params, rng)).collect();
        let r_mask = Matrix::new(rows, cols, data)?;
        p_masks.push(wbar.matmul(&r_mask)?);
        r_masks.push(r_mask);
    }
    Ok(MaskSet {
        shape: *shape,
        lambda1: params.lambda1(),
        r_masks,
        p_masks,
    })
}

/// Draws a fresh per-input key: a uniformly random nonempty subset of the
/// pool (each mask kept with probability 1/2, resampling when empty) and a
/// `c_out`-entry row vector with entries from `Z`.
pub fn keygen<T: Scalar, R: Rng + ?Sized>(
    params: &SecurityParams,
    shape: &ConvShape,
    rng: &mut R,
) -> SecretKey<T> {
    let lambda2 = params.lambda2() as usize;
    let index_set = loop {
        let picked: Vec<usize> = (0..lambda2).filter(|_| rng.random::<bool>()).collect();
        if !picked.is_empty() {
            break picked;
        }
    };
    let r = (0..shape.c_out).map(|_| sample_z(params, rng)).collect();
    SecretKey { index_set, r }
}

/// Blinds the patch matrix: `Xbar' = Xbar + sum of R_l over the key's index
/// set`, added sequentially.
pub fn blind<T: Scalar>(
    xbar: &Matrix<T>,
    sk: &SecretKey<T>,
    masks: &MaskSet<T>,
) -> Result<BlindedInput<T>, TensorError> {
    check_indices(sk, masks.len(), "blind")?;
    let mut acc = xbar.clone();
    for &l in sk.index_set() {
        acc = acc.add(masks.r_mask(l))?;
    }
    Ok(BlindedInput { xbar_prime: acc })
}

/// Recovers the true product: `Ybar = Ybar' - sum of P_l over the key's
/// index set`, subtracted sequentially.
pub fn recover<T: Scalar>(
    ybar_prime: &Matrix<T>,
    sk: &SecretKey<T>,
    masks: &MaskSet<T>,
) -> Result<Matrix<T>, TensorError> {
    check_indices(sk, masks.len(), "recover")?;
    let mut acc = ybar_prime.clone();
    for &l in sk.index_set() {
        acc = acc.sub(masks.p_mask(l))?;
    }
    Ok(acc)
}

fn check_indices<T: Scalar>(
    sk: &SecretKey<T>,
    pool_len: usize,
    context: &'static str,
) -> Result<(), TensorError> {
    match sk.index_set().iter().find(|&&l| l >= pool_len) {
        Some(&l) => Err(TensorError::DimMismatch {
            context,
            detail: format!("mask index {l} out of range for pool of {pool_len}"),
        }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn small_shape() -> ConvShape {
        ConvShape::new(3, 3, 2, 1, 2).unwrap()
    }

    fn int_params(lambda1: u32, lambda2: u32, shape: &ConvShape) -> SecurityParams {
        SecurityParams::new::<i64>(lambda1, lambda2, shape).unwrap()
    }

    /// Textbook i128-accumulating product, independent of Matrix::matmul.
    fn naive_matmul(a: &Matrix<i64>, b: &Matrix<i64>) -> Matrix<i64> {
        let mut data = vec![0i64; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc: i128 = 0;
                for l in 0..a.cols() {
                    acc += a[(i, l)] as i128 * b[(l, j)] as i128;
                }
                data[i * b.cols() + j] = i64::try_from(acc).unwrap();
            }
        }
        Matrix::new(a.rows(), b.cols(), data).unwrap()
    }

    #[test]
    fn sample_z_lambda1_one_hits_both_values() {
        let shape = small_shape();
        let params = int_params(1, 1, &shape);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut seen = HashSet::new();
        for _ in 0..1000 {
            let v: i64 = sample_z(&params, &mut rng);
            assert!(v == 1 || v == -1);
            seen.insert(v);
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn sample_z_never_zero_and_balanced() {
        let shape = small_shape();
        let params = int_params(16, 1, &shape);
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let draws = 100_000;
        let mut positives = 0usize;
        for _ in 0..draws {
            let v: i64 = sample_z(&params, &mut rng);
            assert_ne!(v, 0);
            assert!(v.abs() < 1 << 16);
            if v > 0 {
                positives += 1;
            }
        }
        let frac = positives as f64 / draws as f64;
        assert!((frac - 0.5).abs() < 0.05, "sign split {frac}");
    }

    #[test]
    fn sample_z_is_deterministic_under_a_fixed_seed() {
        let shape = small_shape();
        let params = int_params(12, 1, &shape);
        let draw = || {
            let mut rng = ChaCha12Rng::seed_from_u64(99);
            (0..32).map(|_| sample_z::<i64, _>(&params, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn float_sample_z_stays_in_the_band() {
        let shape = small_shape();
        let params = SecurityParams::new::<f64>(8, 1, &shape).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let v: f64 = sample_z(&params, &mut rng);
            assert!(v.abs() >= 1.0 && v.abs() < 256.0, "out of band: {v}");
        }
    }

    #[test]
    fn params_reject_bad_lambdas() {
        let shape = small_shape();
        assert_eq!(
            SecurityParams::new::<i64>(0, 4, &shape),
            Err(ParamError::BadLambda1(0))
        );
        assert_eq!(
            SecurityParams::new::<i64>(63, 4, &shape),
            Err(ParamError::BadLambda1(63))
        );
        assert_eq!(
            SecurityParams::new::<i64>(16, 0, &shape),
            Err(ParamError::BadLambda2(0))
        );
    }

    #[test]
    fn params_enforce_the_overflow_budget_in_integer_mode() {
        let shape = ConvShape::new(8, 8, 3, 4, 4).unwrap();
        assert!(matches!(
            SecurityParams::new::<i64>(40, 4, &shape),
            Err(ParamError::OverflowBudget { .. })
        ));
        // Float mode has no budget.
        assert!(SecurityParams::new::<f64>(40, 4, &shape).is_ok());
        assert!(SecurityParams::new::<i64>(16, 8, &shape).is_ok());
    }

    #[test]
    fn z_size_matches_the_counting_argument() {
        let shape = small_shape();
        assert_eq!(int_params(16, 1, &shape).z_size(), 2 * ((1 << 16) - 1));
        assert_eq!(int_params(1, 1, &shape).z_size(), 2);
    }

    #[test]
    fn integer_mode_forces_exact_tolerance() {
        let shape = small_shape();
        let params = int_params(16, 4, &shape)
            .with_tolerance(TolerancePolicy::new(1.0, 1.0).unwrap());
        assert!(params.tolerance().is_exact());
    }

    #[test]
    fn precompute_zero_kernel_gives_zero_images() {
        let shape = small_shape();
        let params = int_params(8, 1, &shape);
        let wbar = Matrix::<i64>::zeros(shape.c_out, shape.patch_len());
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let masks = precompute_masks(&wbar, &shape, &params, &mut rng).unwrap();
        assert_eq!(masks.len(), 1);
        assert!(masks.p_mask(0).data().iter().all(|&v| v == 0));
    }

    #[test]
    fn precompute_images_match_an_independent_product() {
        let shape = ConvShape::new(4, 4, 2, 2, 3).unwrap();
        let params = int_params(8, 3, &shape);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let wbar = Matrix::<i64>::random(shape.c_out, shape.patch_len(), 64, &mut rng);
        let masks = precompute_masks(&wbar, &shape, &params, &mut rng).unwrap();
        assert_eq!(masks.len(), 3);
        for l in 0..masks.len() {
            assert_eq!(*masks.p_mask(l), naive_matmul(&wbar, masks.r_mask(l)));
        }
        assert!(masks.check_consistency(&wbar).unwrap());
    }

    #[test]
    fn precompute_scalar_case_is_a_plain_product() {
        let shape = ConvShape::new(1, 1, 1, 1, 1).unwrap();
        let params = int_params(4, 1, &shape);
        let wbar = Matrix::new(1, 1, vec![2i64]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let masks = precompute_masks(&wbar, &shape, &params, &mut rng).unwrap();
        let r = masks.r_mask(0)[(0, 0)];
        assert_eq!(masks.p_mask(0)[(0, 0)], 2 * r);
    }

    #[test]
    fn precompute_rejects_mismatched_kernel_matrix() {
        let shape = small_shape();
        let params = int_params(8, 1, &shape);
        let wbar = Matrix::<i64>::zeros(shape.c_out, shape.patch_len() + 1);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        assert!(precompute_masks(&wbar, &shape, &params, &mut rng).is_err());
    }

    #[test]
    fn keygen_with_pool_of_one_selects_it() {
        let shape = small_shape();
        let params = int_params(8, 1, &shape);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..100 {
            let sk: SecretKey<i64> = keygen(&params, &shape, &mut rng);
            assert_eq!(sk.index_set(), &[0]);
        }
    }

    #[test]
    fn keygen_covers_every_nonempty_subset() {
        let shape = small_shape();
        let params = int_params(8, 3, &shape);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            let sk: SecretKey<i64> = keygen(&params, &shape, &mut rng);
            assert!(!sk.index_set().is_empty());
            seen.insert(sk.index_set().to_vec());
        }
        assert_eq!(seen.len(), 7, "expected all nonempty subsets of a 3-pool");
    }

    #[test]
    fn keygen_r_has_cout_nonzero_entries() {
        let shape = ConvShape::new(4, 4, 2, 1, 4).unwrap();
        let params = int_params(8, 2, &shape);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let sk: SecretKey<i64> = keygen(&params, &shape, &mut rng);
        assert_eq!(sk.r().len(), 4);
        assert!(sk.r().iter().all(|&v| v != 0));
    }

    #[test]
    fn secret_key_validation() {
        assert_eq!(
            SecretKey::<i64>::new(vec![], vec![1]),
            Err(KeyError::EmptyIndexSet)
        );
        assert_eq!(
            SecretKey::<i64>::new(vec![0, 0], vec![1]),
            Err(KeyError::DuplicateIndex(0))
        );
        assert_eq!(
            SecretKey::<i64>::new(vec![0], vec![1, 0]),
            Err(KeyError::ZeroEntry)
        );
        assert!(SecretKey::<i64>::new(vec![2, 0], vec![1, -1]).is_ok());
    }

    #[test]
    fn blind_with_one_mask_shifts_by_exactly_that_mask() {
        let shape = small_shape();
        let params = int_params(8, 2, &shape);
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let wbar = Matrix::<i64>::random(shape.c_out, shape.patch_len(), 16, &mut rng);
        let masks = precompute_masks(&wbar, &shape, &params, &mut rng).unwrap();
        let sk = SecretKey::new(vec![0], vec![1i64, 1]).unwrap();

        let xbar = Matrix::<i64>::random(shape.patch_len(), shape.window_count(), 64, &mut rng);
        let blinded = blind(&xbar, &sk, &masks).unwrap();
        assert_eq!(&blinded.matrix().sub(&xbar).unwrap(), masks.r_mask(0));

        let zero = Matrix::<i64>::zeros(shape.patch_len(), shape.window_count());
        let blinded_zero = blind(&zero, &sk, &masks).unwrap();
        assert_eq!(blinded_zero.matrix(), masks.r_mask(0));
    }

    #[test]
    fn blind_is_additive_in_the_input() {
        let shape = small_shape();
        let params = int_params(8, 3, &shape);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let wbar = Matrix::<i64>::random(shape.c_out, shape.patch_len(), 16, &mut rng);
        let masks = precompute_masks(&wbar, &shape, &params, &mut rng).unwrap();
        let sk = SecretKey::new(vec![0, 1], vec![1i64, 1]).unwrap();

        let xbar = Matrix::<i64>::random(shape.patch_len(), shape.window_count(), 64, &mut rng);
        let zero = Matrix::<i64>::zeros(shape.patch_len(), shape.window_count());
        let lhs = blind(&xbar, &sk, &masks).unwrap();
        let rhs = blind(&zero, &sk, &masks).unwrap();
        assert_eq!(lhs.matrix().sub(rhs.matrix()).unwrap(), xbar);
    }

    #[test]
    fn blinded_input_differs_from_the_plaintext() {
        let shape = small_shape();
        let params = int_params(16, 4, &shape);
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let wbar = Matrix::<i64>::random(shape.c_out, shape.patch_len(), 16, &mut rng);
        let masks = precompute_masks(&wbar, &shape, &params, &mut rng).unwrap();
        for _ in 0..100 {
            let sk: SecretKey<i64> = keygen(&params, &shape, &mut rng);
            let xbar =
                Matrix::<i64>::random(shape.patch_len(), shape.window_count(), 1024, &mut rng);
            let blinded = blind(&xbar, &sk, &masks).unwrap();
            assert_ne!(blinded.matrix(), &xbar);
        }
    }

    #[test]
    fn recover_cancels_the_mask_images_exactly() {
        let shape = ConvShape::new(5, 4, 3, 2, 3).unwrap();
        let params = int_params(10, 4, &shape);
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let wbar = Matrix::<i64>::random(shape.c_out, shape.patch_len(), 64, &mut rng);
        let masks = precompute_masks(&wbar, &shape, &params, &mut rng).unwrap();

        for _ in 0..20 {
            let sk: SecretKey<i64> = keygen(&params, &shape, &mut rng);
            let xbar =
                Matrix::<i64>::random(shape.patch_len(), shape.window_count(), 1024, &mut rng);
            let blinded = blind(&xbar, &sk, &masks).unwrap();
            let ybar_prime = wbar.matmul(blinded.matrix()).unwrap();
            let recovered = recover(&ybar_prime, &sk, &masks).unwrap();
            assert_eq!(recovered, wbar.matmul(&xbar).unwrap());
        }
    }

    #[test]
    fn recover_of_a_bare_image_is_zero() {
        let shape = small_shape();
        let params = int_params(8, 1, &shape);
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let wbar = Matrix::<i64>::random(shape.c_out, shape.patch_len(), 16, &mut rng);
        let masks = precompute_masks(&wbar, &shape, &params, &mut rng).unwrap();
        let sk = SecretKey::new(vec![0], vec![1i64, 1]).unwrap();
        let recovered = recover(masks.p_mask(0), &sk, &masks).unwrap();
        assert!(recovered.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn float_recovery_stays_within_relative_tolerance() {
        let shape = ConvShape::new(5, 5, 2, 2, 2).unwrap();
        let params = SecurityParams::new::<f64>(12, 3, &shape).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let wbar = Matrix::<f64>::random(shape.c_out, shape.patch_len(), 64, &mut rng);
        let masks = precompute_masks(&wbar, &shape, &params, &mut rng).unwrap();
        let sk: SecretKey<f64> = keygen(&params, &shape, &mut rng);
        let xbar = Matrix::<f64>::random(shape.patch_len(), shape.window_count(), 1024, &mut rng);
        let blinded = blind(&xbar, &sk, &masks).unwrap();
        let ybar_prime = wbar.matmul(blinded.matrix()).unwrap();
        let recovered = recover(&ybar_prime, &sk, &masks).unwrap();
        let expected = wbar.matmul(&xbar).unwrap();
        for (got, want) in recovered.data().iter().zip(expected.data()) {
            let rel = (got - want).abs() / want.abs().max(1.0);
            assert!(rel <= 1e-9, "relative error {rel}");
        }
    }

    #[test]
    fn mask_cache_round_trips() {
        let shape = ConvShape::new(4, 3, 2, 2, 2).unwrap();
        let params = int_params(9, 3, &shape);
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let wbar = Matrix::<i64>::random(shape.c_out, shape.patch_len(), 16, &mut rng);
        let masks = precompute_masks(&wbar, &shape, &params, &mut rng).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("masks.cvym");
        masks.save(&path).unwrap();
        let loaded = MaskSet::<i64>::load(&path).unwrap();
        assert_eq!(loaded, masks);
    }

    #[test]
    fn mask_cache_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("masks.cvym");
        std::fs::write(&path, b"XXXX garbage that is long enough to parse a header").unwrap();
        assert!(matches!(
            MaskSet::<i64>::load(&path),
            Err(CacheError::Malformed(_))
        ));
    }

    #[test]
    fn blind_rejects_out_of_range_mask_index() {
        let shape = small_shape();
        let params = int_params(8, 1, &shape);
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let wbar = Matrix::<i64>::random(shape.c_out, shape.patch_len(), 16, &mut rng);
        let masks = precompute_masks(&wbar, &shape, &params, &mut rng).unwrap();
        let sk = SecretKey::new(vec![3], vec![1i64, 1]).unwrap();
        let xbar = Matrix::<i64>::zeros(shape.patch_len(), shape.window_count());
        assert!(blind(&xbar, &sk, &masks).is_err());
    }
}
