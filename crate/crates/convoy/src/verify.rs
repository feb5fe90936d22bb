//! Result verification: a randomized vector identity over the returned
//! product.
//!
//! The client holds a secret random row vector `r` and derives the
//! verification tag `v = r x Wbar` while blinding. A returned product
//! `Ybar'` is accepted iff `r x Ybar' = v x Xbar'` columnwise; any fixed
//! wrong product chosen independently of `r` passes with probability at most
//! `1/|Z|`, where `Z` is the sample set the entries of `r` are drawn from.

use crate::tensor::{ArithMode, Matrix, Scalar, TensorError};

/// Acceptance tolerance for the verification identity.
///
/// Integer mode is exact; both bounds are zero. Float mode accepts column
/// `j` when `|lhs_j - rhs_j| <= abs_eps + rel_eps * (|lhs_j| + |rhs_j|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TolerancePolicy {
    abs_eps: f64,
    rel_eps: f64,
}

impl TolerancePolicy {
    /// Exact equality (the integer-mode policy).
    pub const EXACT: TolerancePolicy = TolerancePolicy {
        abs_eps: 0.0,
        rel_eps: 0.0,
    };

    pub fn new(abs_eps: f64, rel_eps: f64) -> Result<Self, TensorError> {
        if !(abs_eps >= 0.0) || !(rel_eps >= 0.0) {
            return Err(TensorError::InvalidShape(format!(
                "tolerances must be nonnegative, got abs={abs_eps} rel={rel_eps}"
            )));
        }
        Ok(TolerancePolicy { abs_eps, rel_eps })
    }

    /// Default float-mode policy: loose enough that honest desk-scale
    /// pipelines never fail, tight enough to catch coarse tampering.
    pub fn float_default() -> Self {
        TolerancePolicy {
            abs_eps: 1e-6,
            rel_eps: 1e-9,
        }
    }

    pub fn default_for(mode: ArithMode) -> Self {
        match mode {
            ArithMode::Int => Self::EXACT,
            ArithMode::Float => Self::float_default(),
        }
    }

    pub fn abs_eps(&self) -> f64 {
        self.abs_eps
    }

    pub fn rel_eps(&self) -> f64 {
        self.rel_eps
    }

    pub fn is_exact(&self) -> bool {
        self.abs_eps == 0.0 && self.rel_eps == 0.0
    }

    fn accepts<T: Scalar>(&self, lhs: T, rhs: T) -> bool {
        if self.is_exact() {
            return lhs == rhs;
        }
        let (l, r) = (lhs.to_f64(), rhs.to_f64());
        (l - r).abs() <= self.abs_eps + self.rel_eps * (l.abs() + r.abs())
    }
}

/// The verification vector `v = r x Wbar`, a row of length `c_in * k^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationTag<T> {
    v: Matrix<T>,
}

impl<T: Scalar> VerificationTag<T> {
    pub fn as_row(&self) -> &Matrix<T> {
        &self.v
    }

    pub fn len(&self) -> usize {
        self.v.cols()
    }

    pub fn is_empty(&self) -> bool {
        false // a tag is always at least one entry long
    }
}

/// Builds the verification tag `v = r x Wbar`.
pub fn make_verification_tag<T: Scalar>(
    r: &[T],
    wbar: &Matrix<T>,
) -> Result<VerificationTag<T>, TensorError> {
    if r.len() != wbar.rows() {
        return Err(TensorError::DimMismatch {
            context: "verification tag",
            detail: format!("r has {} entries, kernel matrix has {} rows", r.len(), wbar.rows()),
        });
    }
    let row = Matrix::row_vector(r.to_vec())?;
    Ok(VerificationTag {
        v: row.matmul(wbar)?,
    })
}

/// Checks `r x Ybar' = v x Xbar'` under the tolerance policy.
///
/// Both sides are evaluated fresh on every call; nothing about `Ybar'` other
/// than its projection along `r` influences the outcome.
pub fn verify<T: Scalar>(
    ybar_prime: &Matrix<T>,
    xbar_prime: &Matrix<T>,
    r: &[T],
    tag: &VerificationTag<T>,
    tol: &TolerancePolicy,
) -> Result<bool, TensorError> {
    if r.len() != ybar_prime.rows() {
        return Err(TensorError::DimMismatch {
            context: "verify",
            detail: format!("r has {} entries, product has {} rows", r.len(), ybar_prime.rows()),
        });
    }
    if tag.len() != xbar_prime.rows() || ybar_prime.cols() != xbar_prime.cols() {
        return Err(TensorError::DimMismatch {
            context: "verify",
            detail: format!(
                "tag length {} vs blinded input {}x{}, product {}x{}",
                tag.len(),
                xbar_prime.rows(),
                xbar_prime.cols(),
                ybar_prime.rows(),
                ybar_prime.cols()
            ),
        });
    }
    let lhs = Matrix::row_vector(r.to_vec())?.matmul(ybar_prime)?;
    let rhs = tag.as_row().matmul(xbar_prime)?;
    Ok(lhs
        .data()
        .iter()
        .zip(rhs.data())
        .all(|(&l, &r)| tol.accepts(l, r)))
}
