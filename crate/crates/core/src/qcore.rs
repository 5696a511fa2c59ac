//! Quantum-state primitives over dense complex matrices.
//!
//! Basis index `b` of an `n`-qubit register is read as the bitstring
//! `q0 q1 … q(n-1)` with `q0` the most significant bit. Every serialization in
//! the crate uses the same convention.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

const NORM_TOL: f64 = 1e-12;
/// Eigenvalues above this (negative) bound are treated as numerical noise and clamped to zero.
const PSD_CLAMP: f64 = -1e-6;

/// Acceptance bounds applied when a matrix enters the crate from outside.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub hermitian: f64,
    pub trace: f64,
    pub eigen: f64,
}

impl Tolerances {
    pub const STRICT: Tolerances = Tolerances {
        hermitian: 1e-10,
        trace: 1e-10,
        eigen: -1e-9,
    };
    /// Looser bounds for matrices that went through a lossless-but-reordered transport.
    pub const TRANSPORT: Tolerances = Tolerances {
        hermitian: 1e-8,
        trace: 1e-8,
        eigen: -1e-8,
    };
}

fn qubits_for_dim(dim: usize) -> Result<usize> {
    if dim < 2 || !dim.is_power_of_two() {
        return Err(Error::Dimension(format!("dimension {dim} is not a power of two >= 2")));
    }
    Ok(dim.trailing_zeros() as usize)
}

/// Normalized amplitude vector of an `n`-qubit register.
#[derive(Debug, Clone, PartialEq)]
pub struct PureState {
    amplitudes: Vec<C64>,
    n_qubits: usize,
}

impl PureState {
    pub fn new(amplitudes: Vec<C64>) -> Result<Self> {
        let n_qubits = qubits_for_dim(amplitudes.len())?;
        let norm2: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum();
        if (norm2 - 1.0).abs() > NORM_TOL {
            return Err(Error::State(format!("amplitude norm² = {norm2}, expected 1")));
        }
        Ok(PureState { amplitudes, n_qubits })
    }

    /// Normalizes `amplitudes` before constructing the state.
    pub fn normalized(mut amplitudes: Vec<C64>) -> Result<Self> {
        let norm = amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Encoding("cannot normalize a zero or non-finite vector".into()));
        }
        for a in &mut amplitudes {
            *a /= norm;
        }
        Self::new(amplitudes)
    }

    pub fn basis(n_qubits: usize, index: usize) -> Result<Self> {
        let dim = 1usize << n_qubits;
        if index >= dim {
            return Err(Error::Dimension(format!("basis index {index} >= {dim}")));
        }
        let mut amps = vec![C64::new(0.0, 0.0); dim];
        amps[index] = C64::new(1.0, 0.0);
        Self::new(amps)
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    /// ⟨self|other⟩
    pub fn inner(&self, other: &PureState) -> C64 {
        self.amplitudes.iter().zip(&other.amplitudes).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn to_density(&self) -> DensityMatrix {
        pure_to_density(self)
    }
}

/// Hermitian, positive semidefinite, unit-trace matrix.
///
/// Constructors that combine existing density matrices (mixing, unitary
/// conjugation, outer products) preserve the invariants by construction and
/// skip the eigenvalue check; [`DensityMatrix::from_matrix`] validates fully.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    n_qubits: usize,
    data: CMatrix,
}

impl DensityMatrix {
    pub fn from_matrix(data: CMatrix) -> Result<Self> {
        Self::from_matrix_with(data, Tolerances::STRICT)
    }

    pub fn from_matrix_with(data: CMatrix, tol: Tolerances) -> Result<Self> {
        if data.nrows() != data.ncols() {
            return Err(Error::Dimension(format!(
                "density matrix must be square, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        let n_qubits = qubits_for_dim(data.nrows())?;
        let rho = DensityMatrix { n_qubits, data };
        rho.check(tol)?;
        Ok(rho)
    }

    pub(crate) fn from_matrix_unchecked(data: CMatrix) -> Self {
        let n_qubits = data.nrows().trailing_zeros() as usize;
        DensityMatrix { n_qubits, data }
    }

    /// diag(p) for a probability vector `p`.
    pub fn from_diagonal(p: &[f64]) -> Result<Self> {
        let m = CMatrix::from_diagonal(&DVector::from_iterator(p.len(), p.iter().map(|&x| C64::new(x, 0.0))));
        Self::from_matrix(m)
    }

    pub fn maximally_mixed(n_qubits: usize) -> Self {
        let dim = 1usize << n_qubits;
        let m = CMatrix::identity(dim, dim) * C64::new(1.0 / dim as f64, 0.0);
        DensityMatrix { n_qubits, data: m }
    }

    pub fn check(&self, tol: Tolerances) -> Result<()> {
        let herm = self.hermiticity_error();
        if !(herm <= tol.hermitian) {
            return Err(Error::State(format!("not Hermitian: max|ρ-ρ†| = {herm:e}")));
        }
        let tr = self.trace();
        if !((tr - 1.0).abs() <= tol.trace) {
            return Err(Error::State(format!("trace = {tr}, expected 1")));
        }
        let min_eig = self.eigenvalues().into_iter().fold(f64::INFINITY, f64::min);
        if min_eig < tol.eigen {
            return Err(Error::State(format!("negative eigenvalue {min_eig:e}")));
        }
        Ok(())
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.data
    }

    pub fn into_matrix(self) -> CMatrix {
        self.data
    }

    pub fn trace(&self) -> f64 {
        self.data.trace().re
    }

    pub fn hermiticity_error(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i..n {
                worst = worst.max((self.data[(i, j)] - self.data[(j, i)].conj()).norm());
            }
        }
        worst
    }

    /// Tr(ρ²)
    pub fn purity(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn is_pure(&self, tol: f64) -> bool {
        (self.purity() - 1.0).abs() <= tol
    }

    /// Ascending eigenvalues of the Hermitian matrix.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.data.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Re Tr(ρσ). Uses Hermiticity of σ: Tr(ρσ) = Σ ρ_ij conj(σ_ij).
    pub fn overlap(&self, other: &DensityMatrix) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }

    pub fn max_abs_diff(&self, other: &DensityMatrix) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Pauli-Z measured on one qubit, or the Z⊗…⊗Z parity of the whole register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observable {
    Z { qubit: usize, n_qubits: usize },
    Parity { n_qubits: usize },
}

impl Observable {
    /// Z on the last qubit, the classifier default.
    pub fn last_qubit(n_qubits: usize) -> Self {
        Observable::Z {
            qubit: n_qubits - 1,
            n_qubits,
        }
    }

    pub fn z(qubit: usize, n_qubits: usize) -> Result<Self> {
        if qubit >= n_qubits {
            return Err(Error::Param(format!("qubit {qubit} out of range for {n_qubits} qubits")));
        }
        Ok(Observable::Z { qubit, n_qubits })
    }

    pub fn n_qubits(&self) -> usize {
        match *self {
            Observable::Z { n_qubits, .. } | Observable::Parity { n_qubits } => n_qubits,
        }
    }

    pub fn dim(&self) -> usize {
        1 << self.n_qubits()
    }

    /// ±1 eigenvalue attached to basis index `b`.
    pub fn sign(&self, b: usize) -> f64 {
        let ones = match *self {
            Observable::Z { qubit, n_qubits } => (b >> (n_qubits - 1 - qubit)) & 1,
            Observable::Parity { .. } => b.count_ones() as usize & 1,
        };
        if ones == 0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|b| self.sign(b)).collect()
    }
}

/// Embeds `x` (zero-padded to 2^n_qubits) as a normalized real amplitude vector.
pub fn amplitude_encode(x: &[f64], n_qubits: usize) -> Result<PureState> {
    let dim = 1usize << n_qubits;
    if x.len() > dim {
        return Err(Error::Dimension(format!(
            "feature vector of length {} does not fit {n_qubits} qubits",
            x.len()
        )));
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Encoding("cannot amplitude-encode the zero vector".into()));
    }
    if !norm.is_finite() {
        return Err(Error::Encoding("feature vector has non-finite entries".into()));
    }
    let mut amps = vec![C64::new(0.0, 0.0); dim];
    for (a, v) in amps.iter_mut().zip(x) {
        *a = C64::new(v / norm, 0.0);
    }
    PureState::new(amps)
}

/// Smallest register that holds `len` amplitudes (at least one qubit).
pub fn qubits_for_len(len: usize) -> usize {
    len.max(2).next_power_of_two().trailing_zeros() as usize
}

/// ψψ†
pub fn pure_to_density(psi: &PureState) -> DensityMatrix {
    let v = DVector::from_column_slice(psi.amplitudes());
    DensityMatrix {
        n_qubits: psi.n_qubits(),
        data: &v * v.adjoint(),
    }
}

/// Σ wᵤ ρᵤ for a probability vector `w`.
pub fn mix(states: &[DensityMatrix], weights: &[f64]) -> Result<DensityMatrix> {
    if states.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if states.len() != weights.len() {
        return Err(Error::Dimension(format!("{} states but {} weights", states.len(), weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Weight(format!("negative or NaN weight {w}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Weight(format!("weights sum to {total}, expected 1")));
    }
    let dim = states[0].dim();
    if let Some(bad) = states.iter().find(|s| s.dim() != dim) {
        return Err(Error::Dimension(format!("cannot mix dim {dim} with dim {}", bad.dim())));
    }
    let mut acc = CMatrix::zeros(dim, dim);
    for (s, &w) in states.iter().zip(weights) {
        acc.zip_apply(&s.data, |a, b| *a += b * w);
    }
    Ok(DensityMatrix::from_matrix_unchecked(acc))
}

/// Uniform mixture (1/N) Σ ρᵤ.
pub fn mix_uniform(states: &[DensityMatrix]) -> Result<DensityMatrix> {
    let w = vec![1.0 / states.len().max(1) as f64; states.len()];
    // Uniform weights may miss the 1e-12 sum bound only through rounding of 1/N.
    mix_unnormalized(states, &w)
}

fn mix_unnormalized(states: &[DensityMatrix], weights: &[f64]) -> Result<DensityMatrix> {
    if states.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = states[0].dim();
    let mut acc = CMatrix::zeros(dim, dim);
    for (s, &w) in states.iter().zip(weights) {
        if s.dim() != dim {
            return Err(Error::Dimension(format!("cannot mix dim {dim} with dim {}", s.dim())));
        }
        acc.zip_apply(&s.data, |a, b| *a += b * w);
    }
    Ok(DensityMatrix::from_matrix_unchecked(acc))
}

/// Eigen-decomposition square root of a PSD Hermitian matrix, clamping tiny negative eigenvalues.
fn psd_sqrt(m: &CMatrix) -> Result<CMatrix> {
    let eig = m.clone().symmetric_eigen();
    let mut roots = Vec::with_capacity(eig.eigenvalues.len());
    for &l in eig.eigenvalues.iter() {
        if l < PSD_CLAMP {
            return Err(Error::State(format!("matrix is not PSD: eigenvalue {l:e}")));
        }
        roots.push(C64::new(l.max(0.0).sqrt(), 0.0));
    }
    let v = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&DVector::from_vec(roots));
    Ok(v * d * v.adjoint())
}

/// Uhlmann fidelity (Tr √(√ρ σ √ρ))².
///
/// When either argument is pure the fidelity reduces exactly to Tr(ρσ), which
/// is used directly; otherwise the general route through two Hermitian
/// eigendecompositions is taken.
pub fn fidelity(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    if rho.dim() != sigma.dim() {
        return Err(Error::Dimension(format!(
            "fidelity between dim {} and dim {}",
            rho.dim(),
            sigma.dim()
        )));
    }
    if rho.is_pure(1e-12) || sigma.is_pure(1e-12) {
        return Ok(rho.overlap(sigma).clamp(0.0, 1.0));
    }
    fidelity_eigen(rho, sigma)
}

/// General eigendecomposition route, without the pure-state shortcut.
pub fn fidelity_eigen(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    if rho.dim() != sigma.dim() {
        return Err(Error::Dimension(format!(
            "fidelity between dim {} and dim {}",
            rho.dim(),
            sigma.dim()
        )));
    }
    let sr = psd_sqrt(&rho.data)?;
    let mut inner = &sr * &sigma.data * &sr;
    // symmetrize away rounding before the Hermitian solver
    let adj = inner.adjoint();
    inner = (inner + adj) * C64::new(0.5, 0.0);
    let eig = inner.symmetric_eigen();
    let mut root_sum = 0.0;
    for &l in eig.eigenvalues.iter() {
        if l < PSD_CLAMP {
            return Err(Error::State(format!("√ρσ√ρ has eigenvalue {l:e}")));
        }
        root_sum += l.max(0.0).sqrt();
    }
    Ok((root_sum * root_sum).clamp(0.0, 1.0))
}

/// ρ = GG†/Tr(GG†) with G filled with i.i.d. standard complex Gaussians.
pub fn random_density_hs<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<DensityMatrix> {
    qubits_for_dim(dim)?;
    let g = CMatrix::from_fn(dim, dim, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re, im)
    });
    let mut w = &g * g.adjoint();
    let tr = w.trace().re;
    w /= C64::new(tr, 0.0);
    // exact Hermitian symmetry
    let adj = w.adjoint();
    w = (w + adj) * C64::new(0.5, 0.0);
    Ok(DensityMatrix::from_matrix_unchecked(w))
}

/// Tr(P ρ) for a diagonal ±1 observable.
pub fn pauli_z_expectation(rho: &DensityMatrix, obs: &Observable) -> Result<f64> {
    if rho.dim() != obs.dim() {
        return Err(Error::Dimension(format!(
            "observable on dim {} applied to state of dim {}",
            obs.dim(),
            rho.dim()
        )));
    }
    Ok((0..rho.dim()).map(|b| obs.sign(b) * rho.data[(b, b)].re).sum())
}

/// Tr(ρ* ρ), the outcome probability of the projective measurement onto ρ*.
pub fn projection_overlap(rho_star: &DensityMatrix, rho: &DensityMatrix) -> Result<f64> {
    if rho_star.dim() != rho.dim() {
        return Err(Error::Dimension(format!(
            "projection of dim {} onto dim {}",
            rho_star.dim(),
            rho.dim()
        )));
    }
    Ok(rho_star.overlap(rho))
}
