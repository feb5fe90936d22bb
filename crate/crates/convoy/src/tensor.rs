//! Dense matrix arithmetic and the convolution-to-GEMM lowering.
//!
//! Convolution is computed in two independent ways:
//!
//! * the offload path: [`im2col`] unrolls sliding windows into the columns of
//!   a patch matrix, [`flatten_kernels`] turns the kernel grid into a row
//!   matrix, [`Matrix::matmul`] multiplies them, and [`reshape_output`] folds
//!   the product back into per-channel output maps;
//! * [`direct_conv`], a plain six-loop convolution that shares no code with
//!   the lowering and serves as the reference for everything else.
//!
//! All arithmetic is generic over [`Scalar`]: `i64` (exact, overflow is a
//! hard error) or `f64` (IEEE double, deterministic summation order).

use std::fmt;
use std::ops::Index;

use rand::Rng;

use crate::cost;

/// Which arithmetic a [`Scalar`] type provides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithMode {
    /// Exact 64-bit signed integers; overflow is an error, never wraparound.
    Int,
    /// IEEE double precision.
    Float,
}

impl fmt::Display for ArithMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArithMode::Int => write!(f, "int"),
            ArithMode::Float => write!(f, "float"),
        }
    }
}

/// Element type for all protocol payloads.
pub trait Scalar:
    Copy + PartialEq + PartialOrd + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const MODE: ArithMode;
    /// Wire tag: 0 = i64, 1 = f64.
    const DTYPE: u8;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_i64(v: i64) -> Self;
    fn checked_add(self, rhs: Self) -> Option<Self>;
    fn checked_sub(self, rhs: Self) -> Option<Self>;
    fn checked_mul(self, rhs: Self) -> Option<Self>;
    fn to_f64(self) -> f64;
    fn to_le_bytes(self) -> [u8; 8];
    fn from_le_bytes(bytes: [u8; 8]) -> Self;

    /// Uniform draw from the sample set `Z`, the two open-ended bands of
    /// magnitude below `2^lambda1`. Never returns zero.
    fn sample_z<R: Rng + ?Sized>(lambda1: u32, rng: &mut R) -> Self;

    /// Uniform draw from `[-bound, bound]` (integer lattice for `i64`,
    /// continuous for `f64`). Used for synthetic inputs and weights.
    fn sample_uniform<R: Rng + ?Sized>(bound: u64, rng: &mut R) -> Self;
}

impl Scalar for i64 {
    const MODE: ArithMode = ArithMode::Int;
    const DTYPE: u8 = 0;

    fn zero() -> Self {
        0
    }

    fn one() -> Self {
        1
    }

    fn from_i64(v: i64) -> Self {
        v
    }

    fn checked_add(self, rhs: Self) -> Option<Self> {
        i64::checked_add(self, rhs)
    }

    fn checked_sub(self, rhs: Self) -> Option<Self> {
        i64::checked_sub(self, rhs)
    }

    fn checked_mul(self, rhs: Self) -> Option<Self> {
        i64::checked_mul(self, rhs)
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn to_le_bytes(self) -> [u8; 8] {
        i64::to_le_bytes(self)
    }

    fn from_le_bytes(bytes: [u8; 8]) -> Self {
        i64::from_le_bytes(bytes)
    }

    fn sample_z<R: Rng + ?Sized>(lambda1: u32, rng: &mut R) -> Self {
        // Uniform over {-(2^λ1 - 1) .. -1} ∪ {1 .. 2^λ1 - 1}.
        let max = (1i64 << lambda1) - 1;
        let magnitude = rng.random_range(1..=max);
        if rng.random::<bool>() {
            magnitude
        } else {
            -magnitude
        }
    }

    fn sample_uniform<R: Rng + ?Sized>(bound: u64, rng: &mut R) -> Self {
        let b = bound as i64;
        rng.random_range(-b..=b)
    }
}

impl Scalar for f64 {
    const MODE: ArithMode = ArithMode::Float;
    const DTYPE: u8 = 1;

    fn zero() -> Self {
        0.0
    }

    fn one() -> Self {
        1.0
    }

    fn from_i64(v: i64) -> Self {
        v as f64
    }

    fn checked_add(self, rhs: Self) -> Option<Self> {
        Some(self + rhs)
    }

    fn checked_sub(self, rhs: Self) -> Option<Self> {
        Some(self - rhs)
    }

    fn checked_mul(self, rhs: Self) -> Option<Self> {
        Some(self * rhs)
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn to_le_bytes(self) -> [u8; 8] {
        f64::to_le_bytes(self)
    }

    fn from_le_bytes(bytes: [u8; 8]) -> Self {
        f64::from_le_bytes(bytes)
    }

    fn sample_z<R: Rng + ?Sized>(lambda1: u32, rng: &mut R) -> Self {
        // Uniform over (-2^λ1, -1] ∪ [1, 2^λ1); magnitudes below 1 are
        // excluded so cancellation checks stay numerically meaningful.
        let upper = (1u64 << lambda1) as f64;
        let magnitude = rng.random_range(1.0..upper);
        if rng.random::<bool>() {
            magnitude
        } else {
            -magnitude
        }
    }

    fn sample_uniform<R: Rng + ?Sized>(bound: u64, rng: &mut R) -> Self {
        let b = bound as f64;
        rng.random_range(-b..=b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("{context}: dimension mismatch ({detail})")]
    DimMismatch {
        context: &'static str,
        detail: String,
    },
    #[error("integer overflow during {0}")]
    Overflow(&'static str),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
}

fn dim_mismatch(context: &'static str, detail: String) -> TensorError {
    TensorError::DimMismatch { context, detail }
}

/// Dimensions of one stride-1, no-padding convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    /// Input rows.
    pub m: usize,
    /// Input columns.
    pub n: usize,
    /// Kernel size (square kernels).
    pub k: usize,
    /// Input channels.
    pub c_in: usize,
    /// Output channels.
    pub c_out: usize,
}

impl ConvShape {
    /// The stride is fixed; strided convolution is out of scope.
    pub const STRIDE: usize = 1;

    pub fn new(
        m: usize,
        n: usize,
        k: usize,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self, TensorError> {
        if k == 0 || k > m.min(n) {
            return Err(TensorError::InvalidShape(format!(
                "kernel size {k} must satisfy 1 <= k <= min(m={m}, n={n})"
            )));
        }
        if m == 0 || n == 0 || c_in == 0 || c_out == 0 {
            return Err(TensorError::InvalidShape(format!(
                "all dimensions must be >= 1, got m={m} n={n} c_in={c_in} c_out={c_out}"
            )));
        }
        Ok(ConvShape { m, n, k, c_in, c_out })
    }

    /// Output rows per channel: `m - k + 1`.
    pub fn out_rows(&self) -> usize {
        self.m - self.k + 1
    }

    /// Output columns per channel: `n - k + 1`.
    pub fn out_cols(&self) -> usize {
        self.n - self.k + 1
    }

    /// Rows of the patch matrix: `c_in * k^2`.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Columns of the patch matrix: `(m - k + 1) * (n - k + 1)`.
    pub fn window_count(&self) -> usize {
        self.out_rows() * self.out_cols()
    }
}

impl fmt::Display for ConvShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}x{}",
            self.m, self.n, self.k, self.c_in, self.c_out
        )
    }
}

/// Dense row-major matrix, the carrier for every protocol payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::InvalidShape(format!(
                "matrix dimensions must be >= 1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(dim_mismatch(
                "matrix construction",
                format!("{rows}x{cols} needs {} elements, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1");
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(dim_mismatch("matrix from rows", "ragged rows".into()));
        }
        Matrix::new(r, c, rows.concat())
    }

    /// A `1 x n` matrix.
    pub fn row_vector(values: Vec<T>) -> Result<Self, TensorError> {
        let n = values.len();
        Matrix::new(1, n, values)
    }

    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, bound: u64, rng: &mut R) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1");
        let data = (0..rows * cols).map(|_| T::sample_uniform(bound, rng)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.to_f64().abs()))
    }

    /// Elementwise sum. Counts one SA per entry.
    pub fn add(&self, rhs: &Matrix<T>) -> Result<Matrix<T>, TensorError> {
        self.zip_with(rhs, "matrix add", T::checked_add)
    }

    /// Elementwise difference. Counts one SA per entry.
    pub fn sub(&self, rhs: &Matrix<T>) -> Result<Matrix<T>, TensorError> {
        self.zip_with(rhs, "matrix sub", T::checked_sub)
    }

    fn zip_with(
        &self,
        rhs: &Matrix<T>,
        context: &'static str,
        op: impl Fn(T, T) -> Option<T>,
    ) -> Result<Matrix<T>, TensorError> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(dim_mismatch(
                context,
                format!("{}x{} vs {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| op(a, b).ok_or(TensorError::Overflow(context)))
            .collect::<Result<Vec<_>, _>>()?;
        cost::add_sa(self.data.len() as u64);
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Scales every entry by `factor`. Counts one SM per entry.
    pub fn scale(&self, factor: T) -> Result<Matrix<T>, TensorError> {
        let data = self
            .data
            .iter()
            .map(|&v| v.checked_mul(factor).ok_or(TensorError::Overflow("matrix scale")))
            .collect::<Result<Vec<_>, _>>()?;
        cost::add_sm(self.data.len() as u64);
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Matrix product with a fixed summation order: each output entry
    /// accumulates its terms left to right over the inner dimension, so float
    /// results are bit-reproducible. Counts one SM per multiply-accumulate.
    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>, TensorError> {
        if self.cols != rhs.rows {
            return Err(dim_mismatch(
                "matmul",
                format!("{}x{} times {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        let mut out = vec![T::zero(); self.rows * rhs.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for l in 0..self.cols {
                let a = self.data[i * self.cols + l];
                let rhs_row = &rhs.data[l * rhs.cols..(l + 1) * rhs.cols];
                for (acc, &b) in out_row.iter_mut().zip(rhs_row) {
                    let product = a.checked_mul(b).ok_or(TensorError::Overflow("matmul"))?;
                    *acc = acc.checked_add(product).ok_or(TensorError::Overflow("matmul"))?;
                }
            }
        }
        cost::add_sm((self.rows * self.cols * rhs.cols) as u64);
        Ok(Matrix {
            rows: self.rows,
            cols: rhs.cols,
            data: out,
        })
    }
}

impl<T: Scalar> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

/// Multichannel input: `c_in` matrices of `m x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor<T> {
    shape: ConvShape,
    channels: Vec<Matrix<T>>,
}

impl<T: Scalar> InputTensor<T> {
    pub fn new(shape: ConvShape, channels: Vec<Matrix<T>>) -> Result<Self, TensorError> {
        if channels.len() != shape.c_in {
            return Err(dim_mismatch(
                "input tensor",
                format!("expected {} channels, got {}", shape.c_in, channels.len()),
            ));
        }
        for (i, ch) in channels.iter().enumerate() {
            if ch.rows() != shape.m || ch.cols() != shape.n {
                return Err(dim_mismatch(
                    "input tensor",
                    format!(
                        "channel {i} is {}x{}, expected {}x{}",
                        ch.rows(),
                        ch.cols(),
                        shape.m,
                        shape.n
                    ),
                ));
            }
        }
        Ok(InputTensor { shape, channels })
    }

    pub fn random<R: Rng + ?Sized>(shape: ConvShape, bound: u64, rng: &mut R) -> Self {
        let channels = (0..shape.c_in)
            .map(|_| Matrix::random(shape.m, shape.n, bound, rng))
            .collect();
        InputTensor { shape, channels }
    }

    pub fn shape(&self) -> &ConvShape {
        &self.shape
    }

    pub fn channels(&self) -> &[Matrix<T>] {
        &self.channels
    }
}

/// Kernel grid: `c_out` rows of `c_in` kernels, each `k x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet<T> {
    shape: ConvShape,
    kernels: Vec<Vec<Matrix<T>>>,
}

impl<T: Scalar> KernelSet<T> {
    pub fn new(shape: ConvShape, kernels: Vec<Vec<Matrix<T>>>) -> Result<Self, TensorError> {
        if kernels.len() != shape.c_out {
            return Err(dim_mismatch(
                "kernel set",
                format!("expected {} output rows, got {}", shape.c_out, kernels.len()),
            ));
        }
        for (o, row) in kernels.iter().enumerate() {
            if row.len() != shape.c_in {
                return Err(dim_mismatch(
                    "kernel set",
                    format!("row {o} has {} kernels, expected {}", row.len(), shape.c_in),
                ));
            }
            for (i, kernel) in row.iter().enumerate() {
                if kernel.rows() != shape.k || kernel.cols() != shape.k {
                    return Err(dim_mismatch(
                        "kernel set",
                        format!(
                            "kernel ({o},{i}) is {}x{}, expected {}x{}",
                            kernel.rows(),
                            kernel.cols(),
                            shape.k,
                            shape.k
                        ),
                    ));
                }
            }
        }
        Ok(KernelSet { shape, kernels })
    }

    pub fn random<R: Rng + ?Sized>(shape: ConvShape, bound: u64, rng: &mut R) -> Self {
        let kernels = (0..shape.c_out)
            .map(|_| {
                (0..shape.c_in)
                    .map(|_| Matrix::random(shape.k, shape.k, bound, rng))
                    .collect()
            })
            .collect();
        KernelSet { shape, kernels }
    }

    pub fn shape(&self) -> &ConvShape {
        &self.shape
    }

    pub fn kernel(&self, out_channel: usize, in_channel: usize) -> &Matrix<T> {
        &self.kernels[out_channel][in_channel]
    }
}

/// Convolution output: `c_out` matrices of `(m-k+1) x (n-k+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputTensor<T> {
    shape: ConvShape,
    channels: Vec<Matrix<T>>,
}

impl<T: Scalar> OutputTensor<T> {
    pub fn new(shape: ConvShape, channels: Vec<Matrix<T>>) -> Result<Self, TensorError> {
        if channels.len() != shape.c_out {
            return Err(dim_mismatch(
                "output tensor",
                format!("expected {} channels, got {}", shape.c_out, channels.len()),
            ));
        }
        for (i, ch) in channels.iter().enumerate() {
            if ch.rows() != shape.out_rows() || ch.cols() != shape.out_cols() {
                return Err(dim_mismatch(
                    "output tensor",
                    format!(
                        "channel {i} is {}x{}, expected {}x{}",
                        ch.rows(),
                        ch.cols(),
                        shape.out_rows(),
                        shape.out_cols()
                    ),
                ));
            }
        }
        Ok(OutputTensor { shape, channels })
    }

    pub fn shape(&self) -> &ConvShape {
        &self.shape
    }

    pub fn channels(&self) -> &[Matrix<T>] {
        &self.channels
    }
}

/// Unrolls the input into the patch matrix.
///
/// Column `p * (n-k+1) + q` holds the `k x k` window with origin `(p, q)` for
/// every channel, channels stacked in order, each window flattened row-major.
/// The result is `(c_in * k^2) x ((m-k+1)(n-k+1))`.
pub fn im2col<T: Scalar>(x: &InputTensor<T>) -> Matrix<T> {
    let s = *x.shape();
    let rows = s.patch_len();
    let cols = s.window_count();
    let (out_rows, out_cols, k) = (s.out_rows(), s.out_cols(), s.k);
    let mut data = vec![T::zero(); rows * cols];
    for (j, channel) in x.channels().iter().enumerate() {
        for di in 0..k {
            for dj in 0..k {
                let r = j * k * k + di * k + dj;
                for p in 0..out_rows {
                    for q in 0..out_cols {
                        data[r * cols + p * out_cols + q] = channel[(p + di, q + dj)];
                    }
                }
            }
        }
    }
    Matrix { rows, cols, data }
}

/// Assembles the kernel matrix: row `i` concatenates the row-major
/// flattenings of kernels `(i, 0) .. (i, c_in-1)`. The result is
/// `c_out x (c_in * k^2)`, matching the patch-matrix row order.
pub fn flatten_kernels<T: Scalar>(w: &KernelSet<T>) -> Matrix<T> {
    let s = *w.shape();
    let rows = s.c_out;
    let cols = s.patch_len();
    let mut data = Vec::with_capacity(rows * cols);
    for o in 0..s.c_out {
        for i in 0..s.c_in {
            data.extend_from_slice(w.kernel(o, i).data());
        }
    }
    Matrix { rows, cols, data }
}

/// Inverse of [`flatten_kernels`]: rebuilds the kernel grid from a
/// `c_out x (c_in * k^2)` kernel matrix.
pub fn unflatten_kernels<T: Scalar>(
    wbar: &Matrix<T>,
    shape: &ConvShape,
) -> Result<KernelSet<T>, TensorError> {
    if wbar.rows() != shape.c_out || wbar.cols() != shape.patch_len() {
        return Err(dim_mismatch(
            "unflatten kernels",
            format!(
                "{}x{} vs expected {}x{}",
                wbar.rows(),
                wbar.cols(),
                shape.c_out,
                shape.patch_len()
            ),
        ));
    }
    let ksq = shape.k * shape.k;
    let kernels = (0..shape.c_out)
        .map(|o| {
            let row = wbar.row(o);
            (0..shape.c_in)
                .map(|i| Matrix {
                    rows: shape.k,
                    cols: shape.k,
                    data: row[i * ksq..(i + 1) * ksq].to_vec(),
                })
                .collect()
        })
        .collect();
    Ok(KernelSet {
        shape: *shape,
        kernels,
    })
}

/// Folds the `c_out x ((m-k+1)(n-k+1))` product back into per-channel output
/// maps: row `t`, split into `m-k+1` segments of length `n-k+1`, becomes the
/// rows of output channel `t`.
pub fn reshape_output<T: Scalar>(
    ybar: &Matrix<T>,
    shape: &ConvShape,
) -> Result<OutputTensor<T>, TensorError> {
    if ybar.rows() != shape.c_out || ybar.cols() != shape.window_count() {
        return Err(dim_mismatch(
            "reshape output",
            format!(
                "{}x{} vs expected {}x{}",
                ybar.rows(),
                ybar.cols(),
                shape.c_out,
                shape.window_count()
            ),
        ));
    }
    let channels = (0..shape.c_out)
        .map(|t| Matrix {
            rows: shape.out_rows(),
            cols: shape.out_cols(),
            data: ybar.row(t).to_vec(),
        })
        .collect();
    Ok(OutputTensor {
        shape: *shape,
        channels,
    })
}

/// Inverse of [`reshape_output`]: flattens each channel row-major into one
/// row of a `c_out x ((m-k+1)(n-k+1))` matrix.
pub fn flatten_output<T: Scalar>(out: &OutputTensor<T>) -> Matrix<T> {
    let s = *out.shape();
    let mut data = Vec::with_capacity(s.c_out * s.window_count());
    for ch in out.channels() {
        data.extend_from_slice(ch.data());
    }
    Matrix {
        rows: s.c_out,
        cols: s.window_count(),
        data,
    }
}

/// Plain valid convolution with stride 1, summing over input channels.
///
/// This is the reference computation: six nested loops over raw indices,
/// deliberately independent of the im2col/matmul path. Counts one SM per
/// multiply-accumulate, like a served matrix product of the same work.
pub fn direct_conv<T: Scalar>(
    x: &InputTensor<T>,
    w: &KernelSet<T>,
) -> Result<OutputTensor<T>, TensorError> {
    if x.shape() != w.shape() {
        return Err(dim_mismatch(
            "direct conv",
            format!("input shape {} vs kernel shape {}", x.shape(), w.shape()),
        ));
    }
    let s = *x.shape();
    let (out_rows, out_cols) = (s.out_rows(), s.out_cols());
    let mut channels = Vec::with_capacity(s.c_out);
    for oc in 0..s.c_out {
        let mut out = Matrix::zeros(out_rows, out_cols);
        for p in 0..out_rows {
            for q in 0..out_cols {
                let mut acc = T::zero();
                for ic in 0..s.c_in {
                    for di in 0..s.k {
                        for dj in 0..s.k {
                            let product = x.channels()[ic][(p + di, q + dj)]
                                .checked_mul(w.kernel(oc, ic)[(di, dj)])
                                .ok_or(TensorError::Overflow("direct conv"))?;
                            acc = acc
                                .checked_add(product)
                                .ok_or(TensorError::Overflow("direct conv"))?;
                        }
                    }
                }
                out.set(p, q, acc);
            }
        }
        channels.push(out);
    }
    cost::add_sm((s.c_in * s.c_out * s.k * s.k * s.window_count()) as u64);
    Ok(OutputTensor { shape: s, channels })
}
