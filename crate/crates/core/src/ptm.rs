//! Dense linear algebra for Pauli-transfer-matrix superoperators.
//!
//! Superoperators act on real vectors of Pauli coefficients. The basis is
//! the set of n-fold Pauli tensor products scaled by `1/sqrt(2^n)`, so it is
//! orthonormal under the Hilbert-Schmidt inner product and every
//! Hermiticity-preserving map has a real transfer matrix.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub type CMatrix<T> = DMatrix<Complex<T>>;

const PAULI_CHARS: [char; 4] = ['I', 'X', 'Y', 'Z'];

fn single_qubit_paulis<T: Real>() -> [CMatrix<T>; 4] {
    let z = Complex::new(T::zero(), T::zero());
    let o = Complex::new(T::one(), T::zero());
    let i = Complex::new(T::zero(), T::one());
    [
        DMatrix::from_row_slice(2, 2, &[o, z, z, o]),
        DMatrix::from_row_slice(2, 2, &[z, o, o, z]),
        DMatrix::from_row_slice(2, 2, &[z, -i, i, z]),
        DMatrix::from_row_slice(2, 2, &[o, z, z, -o]),
    ]
}

/// Kronecker product of complex matrices.
pub fn kron<T: Real>(a: &CMatrix<T>, b: &CMatrix<T>) -> CMatrix<T> {
    a.kronecker(b)
}

/// Orthonormal Pauli operator basis on `n` qubits.
#[derive(Clone, Debug)]
pub struct PauliBasis<T: Real> {
    n_qubits: usize,
    /// Unnormalized Pauli strings (eigenvalues +-1), lexicographic in I, X, Y, Z
    /// with the first qubit as the most significant digit.
    paulis: Vec<CMatrix<T>>,
    labels: Vec<String>,
    scale: T,
}

impl<T: Real> PauliBasis<T> {
    pub fn new(n_qubits: usize) -> Result<Self> {
        if !(1..=2).contains(&n_qubits) {
            return Err(Error::invalid(format!(
                "Pauli basis supports 1 or 2 qubits, got {n_qubits}"
            )));
        }
        let single = single_qubit_paulis::<T>();
        let mut paulis = vec![DMatrix::from_element(1, 1, Complex::new(T::one(), T::zero()))];
        let mut labels = vec![String::new()];
        for _ in 0..n_qubits {
            let mut next = Vec::with_capacity(paulis.len() * 4);
            let mut next_labels = Vec::with_capacity(paulis.len() * 4);
            for (p, l) in paulis.iter().zip(&labels) {
                for (q, c) in single.iter().zip(PAULI_CHARS) {
                    next.push(kron(p, q));
                    next_labels.push(format!("{l}{c}"));
                }
            }
            paulis = next;
            labels = next_labels;
        }
        let hilbert_dim = 1usize << n_qubits;
        let scale = T::one() / T::from_usize_lossy(hilbert_dim).sqrt();
        Ok(Self {
            n_qubits,
            paulis,
            labels,
            scale,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    /// Hilbert-space dimension `2^n`.
    pub fn hilbert_dim(&self) -> usize {
        1 << self.n_qubits
    }

    /// Superoperator dimension `4^n`.
    pub fn dim(&self) -> usize {
        self.paulis.len()
    }

    /// Unnormalized Pauli string with index `a`.
    pub fn pauli(&self, a: usize) -> &CMatrix<T> {
        &self.paulis[a]
    }

    pub fn label(&self, a: usize) -> &str {
        &self.labels[a]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Normalized basis element `P_a / sqrt(2^n)`.
    pub fn element(&self, a: usize) -> CMatrix<T> {
        self.paulis[a].map(|z| z * Complex::new(self.scale, T::zero()))
    }

    /// Pauli coefficients `Tr(B_a X)` of an operator.
    pub fn vectorize(&self, op: &CMatrix<T>) -> DVector<T> {
        DVector::from_iterator(
            self.dim(),
            self.paulis.iter().map(|p| trace_product(p, op).re * self.scale),
        )
    }

    /// Inverse of [`vectorize`](Self::vectorize) for Hermitian operators.
    pub fn operator(&self, coeffs: &DVector<T>) -> CMatrix<T> {
        let d = self.hilbert_dim();
        let mut out = DMatrix::zeros(d, d);
        for (p, &c) in self.paulis.iter().zip(coeffs.iter()) {
            out += p.map(|z| z * Complex::new(c * self.scale, T::zero()));
        }
        out
    }

    /// Transfer matrix `R_ab = Tr(B_a f(B_b))` of a linear map on operators.
    pub fn ptm_of_map<F>(&self, f: F) -> SuperOp<T>
    where
        F: Fn(&CMatrix<T>) -> CMatrix<T>,
    {
        let dim = self.dim();
        let mut r = DMatrix::zeros(dim, dim);
        for b in 0..dim {
            let image = f(&self.element(b));
            for a in 0..dim {
                r[(a, b)] = trace_product(&self.paulis[a], &image).re * self.scale;
            }
        }
        SuperOp(r)
    }

    /// Transfer matrix of the unitary channel `X -> U X U^dagger`.
    pub fn ptm_of_unitary(&self, u: &CMatrix<T>) -> SuperOp<T> {
        let ud = u.adjoint();
        self.ptm_of_map(|x| u * x * &ud)
    }

    /// Choi matrix (unit trace for trace-preserving maps) of a transfer matrix.
    pub fn choi(&self, g: &SuperOp<T>) -> CMatrix<T> {
        let dim = self.dim();
        let d = self.hilbert_dim();
        let norm = T::one() / T::from_usize_lossy(d * d);
        let mut choi = DMatrix::zeros(d * d, d * d);
        for a in 0..dim {
            for b in 0..dim {
                let r = g.0[(a, b)];
                if r == T::zero() {
                    continue;
                }
                let term = kron(&self.paulis[a], &self.paulis[b].transpose());
                choi += term.map(|z| z * Complex::new(r * norm, T::zero()));
            }
        }
        choi
    }
}

fn trace_product<T: Real>(a: &CMatrix<T>, b: &CMatrix<T>) -> Complex<T> {
    let n = a.nrows();
    let mut acc = Complex::new(T::zero(), T::zero());
    for i in 0..n {
        for k in 0..n {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// A real `4^n x 4^n` process matrix in the normalized Pauli basis.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperOp<T: Real>(pub DMatrix<T>);

impl<T: Real> SuperOp<T> {
    pub fn identity(dim: usize) -> Self {
        SuperOp(DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.0
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &SuperOp<T>) -> SuperOp<T> {
        SuperOp(&self.0 * &first.0)
    }

    /// First row equals `(1, 0, ..., 0)` within `tol`.
    pub fn is_trace_preserving(&self, tol: T) -> bool {
        self.0
            .row(0)
            .iter()
            .enumerate()
            .all(|(j, &v)| (v - if j == 0 { T::one() } else { T::zero() }).abs() <= tol)
    }
}

impl<T: Real> From<DMatrix<T>> for SuperOp<T> {
    fn from(m: DMatrix<T>) -> Self {
        SuperOp(m)
    }
}

fn ensure_square<T: Real>(a: &DMatrix<T>, what: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::invalid(format!(
            "{what} must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

fn ensure_finite<T: Real>(a: &DMatrix<T>, what: &str) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} has non-finite entries")));
    }
    Ok(())
}

fn one_norm<T: Real>(a: &DMatrix<T>) -> T {
    a.column_iter()
        .map(|c| c.iter().fold(T::zero(), |acc, v| acc + v.abs()))
        .fold(T::zero(), |m, v| if v > m { v } else { m })
}

const TAYLOR_DEGREE: usize = 14;

/// Number of halvings that bring `norm` below 1/4.
fn squaring_count<T: Real>(norm: T) -> u32 {
    let mut s = 0u32;
    let mut scaled = norm;
    let quarter = T::lit(0.25);
    while scaled > quarter {
        scaled *= T::lit(0.5);
        s += 1;
    }
    s
}

/// Matrix exponential by scaling and squaring with a degree-14 Taylor core.
pub fn matrix_exp<T: Real>(a: &DMatrix<T>) -> Result<DMatrix<T>> {
    ensure_square(a, "matrix_exp input")?;
    ensure_finite(a, "matrix_exp input")?;
    Ok(ExpFrechet::new(a).exp().clone())
}

/// Directional derivative `d/dt exp(A + tE)` at `t = 0`.
///
/// Evaluated as the upper-right block of `exp([[A, E], [0, A]])`.
pub fn frechet_derivative_exp<T: Real>(a: &DMatrix<T>, e: &DMatrix<T>) -> Result<DMatrix<T>> {
    ensure_square(a, "frechet_derivative_exp base")?;
    if a.shape() != e.shape() {
        return Err(Error::invalid(format!(
            "direction shape {:?} does not match base shape {:?}",
            e.shape(),
            a.shape()
        )));
    }
    ensure_finite(a, "frechet_derivative_exp base")?;
    ensure_finite(e, "frechet_derivative_exp direction")?;
    let n = a.nrows();
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(a);
    block.view_mut((n, n), (n, n)).copy_from(a);
    block.view_mut((0, n), (n, n)).copy_from(e);
    let big = matrix_exp(&block)?;
    Ok(big.view((0, n), (n, n)).into_owned())
}

/// Exponential of a fixed matrix with cached intermediates, so that Fréchet
/// derivatives in many directions reuse the Taylor and squaring stages.
///
/// Each derivative runs the same recurrences as the block-triangular
/// exponential used by [`frechet_derivative_exp`], restricted to the
/// off-diagonal block.
#[derive(Clone, Debug)]
pub struct ExpFrechet<T: Real> {
    scaled: DMatrix<T>,
    inv_scale: T,
    /// Horner partial sums, `horner[k]` is the value entering step `k + 1`.
    horner: Vec<DMatrix<T>>,
    /// Successive squares; `squares[0]` is the Taylor approximant.
    squares: Vec<DMatrix<T>>,
}

impl<T: Real> ExpFrechet<T> {
    /// Caller guarantees `a` is square and finite.
    pub fn new(a: &DMatrix<T>) -> Self {
        let n = a.nrows();
        let s = squaring_count(one_norm(a));
        let inv_scale = T::one() / T::lit(2f64.powi(s as i32));
        let scaled = a * inv_scale;
        let id = DMatrix::<T>::identity(n, n);

        let mut horner = Vec::with_capacity(TAYLOR_DEGREE + 1);
        let mut q = id.clone();
        horner.push(q.clone());
        for k in (1..=TAYLOR_DEGREE).rev() {
            q = &id + (&scaled * &q) * (T::one() / T::from_usize_lossy(k));
            horner.push(q.clone());
        }

        let mut squares = Vec::with_capacity(s as usize + 1);
        squares.push(q);
        for _ in 0..s {
            let last = squares.last().unwrap();
            let next = last * last;
            squares.push(next);
        }
        Self {
            scaled,
            inv_scale,
            horner,
            squares,
        }
    }

    pub fn exp(&self) -> &DMatrix<T> {
        self.squares.last().unwrap()
    }

    /// Fréchet derivative of the exponential in direction `e`.
    pub fn derivative(&self, e: &DMatrix<T>) -> DMatrix<T> {
        let e_scaled = e * self.inv_scale;
        let n = e.nrows();
        let mut dq = DMatrix::<T>::zeros(n, n);
        for (step, k) in (1..=TAYLOR_DEGREE).rev().enumerate() {
            let q_prev = &self.horner[step];
            dq = (&e_scaled * q_prev + &self.scaled * &dq) * (T::one() / T::from_usize_lossy(k));
        }
        for t in &self.squares[..self.squares.len() - 1] {
            dq = t * &dq + &dq * t;
        }
        dq
    }
}

/// Default relative cutoff for [`pseudo_inverse`].
pub const PINV_REL_TOL: f64 = 1e-12;

fn ensure_symmetric<T: Real>(s: &DMatrix<T>, tol: f64) -> Result<()> {
    ensure_square(s, "symmetric input")?;
    ensure_finite(s, "symmetric input")?;
    let scale = s.iter().fold(T::one(), |m, v| if v.abs() > m { v.abs() } else { m });
    let asym = (s - s.transpose()).amax();
    if asym > T::lit(tol) * scale {
        return Err(Error::invalid(format!(
            "matrix is not symmetric (max asymmetry {asym})"
        )));
    }
    Ok(())
}

fn symmetric_eigen<T: Real>(s: &DMatrix<T>) -> SymmetricEigen<T, nalgebra::Dyn> {
    let sym = (s + s.transpose()) * T::lit(0.5);
    SymmetricEigen::new(sym)
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix.
///
/// Eigenvalues with magnitude below `rel_tol * max|eigenvalue|` are dropped.
pub fn pseudo_inverse<T: Real>(s: &DMatrix<T>, rel_tol: T) -> Result<DMatrix<T>> {
    ensure_symmetric(s, 1e-10)?;
    let eig = symmetric_eigen(s);
    let max = eig.eigenvalues.amax();
    let cutoff = rel_tol * max;
    let inv = eig.eigenvalues.map(|l| {
        if max > T::zero() && l.abs() > cutoff {
            T::one() / l
        } else {
            T::zero()
        }
    });
    Ok(recompose(&eig.eigenvectors, &inv))
}

/// Factor `F` with `F F^T` equal to the pseudo-inverse of a PSD matrix.
///
/// Eigenvalues at or below `rel_tol * max eigenvalue` are dropped; clearly
/// negative eigenvalues are an error.
pub fn psd_pseudo_inverse_factor<T: Real>(s: &DMatrix<T>, rel_tol: T) -> Result<DMatrix<T>> {
    ensure_symmetric(s, 1e-10)?;
    let eig = symmetric_eigen(s);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min < -T::lit(1e-9) * max.abs().max(T::one()) {
        return Err(Error::Indefinite(min.as_f64()));
    }
    let cutoff = rel_tol * max;
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| max > T::zero() && eig.eigenvalues[i] > cutoff)
        .collect();
    let mut f = DMatrix::zeros(s.nrows(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let scale = T::one() / eig.eigenvalues[i].sqrt();
        f.set_column(c, &(eig.eigenvectors.column(i) * scale));
    }
    Ok(f)
}

fn recompose<T: Real>(vectors: &DMatrix<T>, values: &DVector<T>) -> DMatrix<T> {
    let mut scaled = vectors.clone();
    for (mut col, &v) in scaled.column_iter_mut().zip(values.iter()) {
        col *= v;
    }
    let out = scaled * vectors.transpose();
    (&out + out.transpose()) * T::lit(0.5)
}

/// Principal square root of a positive semidefinite matrix.
pub fn matrix_sqrt_psd<T: Real>(p: &DMatrix<T>) -> Result<DMatrix<T>> {
    ensure_symmetric(p, 1e-10)?;
    let eig = symmetric_eigen(p);
    let min = eig.eigenvalues.min();
    if min < T::lit(-1e-6) {
        return Err(Error::Indefinite(min.as_f64()));
    }
    let roots = eig
        .eigenvalues
        .map(|l| if l > T::zero() { l.sqrt() } else { T::zero() });
    Ok(recompose(&eig.eigenvectors, &roots))
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues<T: Real>(s: &DMatrix<T>) -> DVector<T> {
    let mut vals: Vec<T> = symmetric_eigen(s).eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    DVector::from_vec(vals)
}

/// `Tr(sqrt(P))` for a PSD matrix, with small negative eigenvalues clipped.
pub fn trace_sqrt_psd<T: Real>(p: &DMatrix<T>) -> T {
    symmetric_eigen(p)
        .eigenvalues
        .iter()
        .fold(T::zero(), |acc, &l| if l > T::zero() { acc + l.sqrt() } else { acc })
}

/// Default tolerance for [`check_cptp`].
pub const CPTP_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CptpReport<T> {
    pub is_cptp: bool,
    pub min_choi_eigenvalue: T,
    pub trace_preserving: bool,
}

/// Complete positivity and trace preservation of a transfer matrix.
pub fn check_cptp<T: Real>(basis: &PauliBasis<T>, g: &SuperOp<T>, tol: T) -> Result<CptpReport<T>> {
    if g.0.nrows() != basis.dim() || g.0.ncols() != basis.dim() {
        return Err(Error::invalid(format!(
            "superoperator shape {:?} does not match basis dimension {}",
            g.0.shape(),
            basis.dim()
        )));
    }
    let choi = basis.choi(g);
    let eig = SymmetricEigen::new(choi);
    let min = eig.eigenvalues.min();
    let tp = g.is_trace_preserving(tol);
    Ok(CptpReport {
        is_cptp: tp && min >= -tol,
        min_choi_eigenvalue: min,
        trace_preserving: tp,
    })
}
