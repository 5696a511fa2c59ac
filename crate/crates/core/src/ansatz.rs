//! Parameterized circuits materialized as explicit unitaries.
//!
//! The RealAmplitudes layout is `R_reps · E_reps · … · E_1 · R_0`: `reps + 1`
//! layers of per-qubit `Ry` rotations interleaved with `reps` CNOT layers. The
//! CNOT pairing follows the shifted-circular-alternating ("sca") schedule:
//! block `k` (1-based) takes the circular list `[(i, (i+1) mod n)]`, rotates it
//! left by `k-1` positions and swaps control and target when `k` is even.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qcore::{CMatrix, DensityMatrix, C64};

/// Rotation angles for a RealAmplitudes circuit, one layer of `n_qubits` angles per rotation layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnsatzParams {
    pub n_qubits: usize,
    pub reps: usize,
    pub theta: Vec<f64>,
}

impl AnsatzParams {
    pub fn param_count(n_qubits: usize, reps: usize) -> usize {
        (reps + 1) * n_qubits
    }

    pub fn new(n_qubits: usize, reps: usize, theta: Vec<f64>) -> Result<Self> {
        let params = AnsatzParams { n_qubits, reps, theta };
        params.validate()?;
        Ok(params)
    }

    pub fn zeros(n_qubits: usize, reps: usize) -> Self {
        AnsatzParams {
            n_qubits,
            reps,
            theta: vec![0.0; Self::param_count(n_qubits, reps)],
        }
    }

    /// Angles drawn from Uniform(-π, π].
    pub fn random<R: Rng + ?Sized>(n_qubits: usize, reps: usize, rng: &mut R) -> Self {
        let theta = (0..Self::param_count(n_qubits, reps))
            .map(|_| PI - rng.random::<f64>() * 2.0 * PI)
            .collect();
        AnsatzParams { n_qubits, reps, theta }
    }

    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        Self::new(self.n_qubits, self.reps, theta.to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_qubits == 0 {
            return Err(Error::Param("ansatz needs at least one qubit".into()));
        }
        if self.reps == 0 {
            return Err(Error::Param("ansatz needs reps >= 1".into()));
        }
        let expected = Self::param_count(self.n_qubits, self.reps);
        if self.theta.len() != expected {
            return Err(Error::Param(format!(
                "expected {expected} angles for {} qubits and {} reps, got {}",
                self.n_qubits,
                self.reps,
                self.theta.len()
            )));
        }
        if let Some(t) = self.theta.iter().find(|t| !t.is_finite()) {
            return Err(Error::Param(format!("non-finite angle {t}")));
        }
        Ok(())
    }

    fn layer(&self, k: usize) -> &[f64] {
        &self.theta[k * self.n_qubits..(k + 1) * self.n_qubits]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryMatrix {
    n_qubits: usize,
    data: CMatrix,
}

impl UnitaryMatrix {
    pub fn identity(n_qubits: usize) -> Self {
        let dim = 1 << n_qubits;
        UnitaryMatrix {
            n_qubits,
            data: CMatrix::identity(dim, dim),
        }
    }

    pub fn from_matrix(data: CMatrix) -> Result<Self> {
        let dim = data.nrows();
        if dim != data.ncols() || dim < 2 || !dim.is_power_of_two() {
            return Err(Error::Dimension(format!("not a qubit operator: {}x{}", dim, data.ncols())));
        }
        let u = UnitaryMatrix {
            n_qubits: dim.trailing_zeros() as usize,
            data,
        };
        let err = u.unitarity_error();
        if err > 1e-9 {
            return Err(Error::Param(format!("matrix is not unitary: max|UU†-I| = {err:e}")));
        }
        Ok(u)
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

    /// max-entry norm of UU† − I
    pub fn unitarity_error(&self) -> f64 {
        let prod = &self.data * self.data.adjoint();
        let dim = self.dim();
        let mut worst = 0.0f64;
        for i in 0..dim {
            for j in 0..dim {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((prod[(i, j)] - C64::new(target, 0.0)).norm());
            }
        }
        worst
    }

    pub fn max_imag(&self) -> f64 {
        self.data.iter().map(|z| z.im.abs()).fold(0.0, f64::max)
    }

    /// Left-multiplies a single-qubit gate acting on `qubit`.
    pub fn apply_single(&mut self, qubit: usize, g: &[[C64; 2]; 2]) {
        apply_single_left(&mut self.data, self.n_qubits, qubit, g);
    }

    /// Left-multiplies CNOT(control → target).
    pub fn apply_cnot(&mut self, control: usize, target: usize) {
        apply_cnot_left(&mut self.data, self.n_qubits, control, target);
    }
}

fn bit_mask(n_qubits: usize, qubit: usize) -> usize {
    1 << (n_qubits - 1 - qubit)
}

/// Row update `M ← (I ⊗ g ⊗ I) M` in O(dim²).
pub(crate) fn apply_single_left(m: &mut CMatrix, n_qubits: usize, qubit: usize, g: &[[C64; 2]; 2]) {
    let mask = bit_mask(n_qubits, qubit);
    let dim = m.nrows();
    for col in 0..m.ncols() {
        for r0 in (0..dim).filter(|r| r & mask == 0) {
            let r1 = r0 | mask;
            let a = m[(r0, col)];
            let b = m[(r1, col)];
            m[(r0, col)] = g[0][0] * a + g[0][1] * b;
            m[(r1, col)] = g[1][0] * a + g[1][1] * b;
        }
    }
}

fn apply_cnot_left(m: &mut CMatrix, n_qubits: usize, control: usize, target: usize) {
    let cm = bit_mask(n_qubits, control);
    let tm = bit_mask(n_qubits, target);
    for r in 0..m.nrows() {
        if r & cm != 0 && r & tm == 0 {
            m.swap_rows(r, r | tm);
        }
    }
}

fn real(x: f64) -> C64 {
    C64::new(x, 0.0)
}

pub fn ry(theta: f64) -> [[C64; 2]; 2] {
    let (s, c) = (theta / 2.0).sin_cos();
    [[real(c), real(-s)], [real(s), real(c)]]
}

pub fn rx(theta: f64) -> [[C64; 2]; 2] {
    let (s, c) = (theta / 2.0).sin_cos();
    [[real(c), C64::new(0.0, -s)], [C64::new(0.0, -s), real(c)]]
}

pub fn rz(theta: f64) -> [[C64; 2]; 2] {
    let (s, c) = (theta / 2.0).sin_cos();
    [[C64::new(c, -s), real(0.0)], [real(0.0), C64::new(c, s)]]
}

/// CNOT (control, target) pairs of entanglement block `k` (1-based).
pub fn sca_pairs(n_qubits: usize, block: usize) -> Vec<(usize, usize)> {
    if n_qubits < 2 {
        return Vec::new();
    }
    let mut pairs: Vec<(usize, usize)> = (0..n_qubits).map(|i| (i, (i + 1) % n_qubits)).collect();
    pairs.rotate_left((block - 1) % n_qubits);
    if block.is_multiple_of(2) {
        for p in &mut pairs {
            *p = (p.1, p.0);
        }
    }
    pairs
}

pub fn build_real_amplitudes(params: &AnsatzParams) -> Result<UnitaryMatrix> {
    params.validate()?;
    let n = params.n_qubits;
    let mut u = UnitaryMatrix::identity(n);
    let rotate = |u: &mut UnitaryMatrix, k: usize| {
        for (q, &t) in params.layer(k).iter().enumerate() {
            u.apply_single(q, &ry(t));
        }
    };
    rotate(&mut u, 0);
    for block in 1..=params.reps {
        for (c, t) in sca_pairs(n, block) {
            u.apply_cnot(c, t);
        }
        rotate(&mut u, block);
    }
    Ok(u)
}

/// UρU†
pub fn apply_unitary(u: &UnitaryMatrix, rho: &DensityMatrix) -> Result<DensityMatrix> {
    if u.dim() != rho.dim() {
        return Err(Error::Dimension(format!(
            "unitary of dim {} applied to state of dim {}",
            u.dim(),
            rho.dim()
        )));
    }
    let out = &u.data * rho.matrix() * u.data.adjoint();
    Ok(DensityMatrix::from_matrix_unchecked(out))
}

/// Gate vocabulary of the random circuits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    H,
    X,
    Y,
    Z,
    S,
    T,
    Rx(f64),
    Ry(f64),
    Rz(f64),
    Cnot { target: usize },
}

impl Gate {
    /// 2×2 matrix of a single-qubit gate; `None` for CNOT.
    pub fn matrix(&self) -> Option<[[C64; 2]; 2]> {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let zero = real(0.0);
        let one = real(1.0);
        Some(match *self {
            Gate::H => [[real(h), real(h)], [real(h), real(-h)]],
            Gate::X => [[zero, one], [one, zero]],
            Gate::Y => [[zero, C64::new(0.0, -1.0)], [C64::new(0.0, 1.0), zero]],
            Gate::Z => [[one, zero], [zero, real(-1.0)]],
            Gate::S => [[one, zero], [zero, C64::new(0.0, 1.0)]],
            Gate::T => [[one, zero], [zero, C64::from_polar(1.0, PI / 4.0)]],
            Gate::Rx(t) => rx(t),
            Gate::Ry(t) => ry(t),
            Gate::Rz(t) => rz(t),
            Gate::Cnot { .. } => return None,
        })
    }
}

/// One gate per qubit slot per layer; `circuit[layer][qubit]`.
pub type RandomCircuit = Vec<Vec<Gate>>;

/// Draws gates uniformly from {H, X, Y, Z, S, T, Rx, Ry, Rz, CNOT} per qubit slot.
///
/// A CNOT drawn at slot `q` uses `q` as control and a uniformly chosen other
/// qubit as target. On a single qubit CNOT is excluded from the draw.
pub fn random_circuit<R: Rng + ?Sized>(n_qubits: usize, depth: usize, rng: &mut R) -> Result<RandomCircuit> {
    if depth == 0 {
        return Err(Error::Param("random circuit depth must be >= 1".into()));
    }
    if n_qubits == 0 {
        return Err(Error::Param("random circuit needs at least one qubit".into()));
    }
    let kinds = if n_qubits > 1 { 10 } else { 9 };
    let angle = |rng: &mut R| PI - rng.random::<f64>() * 2.0 * PI;
    let mut circuit = Vec::with_capacity(depth);
    for _ in 0..depth {
        let mut layer = Vec::with_capacity(n_qubits);
        for q in 0..n_qubits {
            let g = match rng.random_range(0..kinds) {
                0 => Gate::H,
                1 => Gate::X,
                2 => Gate::Y,
                3 => Gate::Z,
                4 => Gate::S,
                5 => Gate::T,
                6 => Gate::Rx(angle(rng)),
                7 => Gate::Ry(angle(rng)),
                8 => Gate::Rz(angle(rng)),
                _ => {
                    let mut t = rng.random_range(0..n_qubits - 1);
                    if t >= q {
                        t += 1;
                    }
                    Gate::Cnot { target: t }
                }
            };
            layer.push(g);
        }
        circuit.push(layer);
    }
    Ok(circuit)
}

pub fn circuit_unitary(n_qubits: usize, circuit: &RandomCircuit) -> UnitaryMatrix {
    let mut u = UnitaryMatrix::identity(n_qubits);
    for layer in circuit {
        for (q, g) in layer.iter().enumerate() {
            match g {
                Gate::Cnot { target } => u.apply_cnot(q, *target),
                single => u.apply_single(q, &single.matrix().expect("single-qubit gate")),
            }
        }
    }
    u
}

pub fn random_circuit_unitary<R: Rng + ?Sized>(n_qubits: usize, depth: usize, rng: &mut R) -> Result<UnitaryMatrix> {
    let c = random_circuit(n_qubits, depth, rng)?;
    Ok(circuit_unitary(n_qubits, &c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qcore::{pure_to_density, PureState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
        a.kronecker(b)
    }

    fn gate2(g: [[C64; 2]; 2]) -> CMatrix {
        CMatrix::from_fn(2, 2, |i, j| g[i][j])
    }

    /// Full-matrix CNOT via projectors: |0⟩⟨0|_c ⊗ I + |1⟩⟨1|_c ⊗ X_t.
    fn dense_cnot(n: usize, c: usize, t: usize) -> CMatrix {
        let p0 = gate2([[real(1.0), real(0.0)], [real(0.0), real(0.0)]]);
        let p1 = gate2([[real(0.0), real(0.0)], [real(0.0), real(1.0)]]);
        let x = gate2(Gate::X.matrix().unwrap());
        let id = CMatrix::identity(2, 2);
        let build = |ctrl_op: &CMatrix, tgt_op: &CMatrix| {
            let mut m = CMatrix::identity(1, 1);
            for q in 0..n {
                let f = if q == c {
                    ctrl_op
                } else if q == t {
                    tgt_op
                } else {
                    &id
                };
                m = kron(&m, f);
            }
            m
        };
        build(&p0, &id) + build(&p1, &x)
    }

    /// Straightforward layer-by-layer product with Kronecker-built matrices.
    fn dense_real_amplitudes(p: &AnsatzParams) -> CMatrix {
        let n = p.n_qubits;
        let rot = |k: usize| {
            let mut m = CMatrix::identity(1, 1);
            for q in 0..n {
                m = kron(&m, &gate2(ry(p.theta[k * n + q])));
            }
            m
        };
        let mut u = rot(0);
        for block in 1..=p.reps {
            for (c, t) in sca_pairs(n, block) {
                u = dense_cnot(n, c, t) * u;
            }
            u = rot(block) * u;
        }
        u
    }

    #[test]
    fn zero_angles_fix_all_zero_state() {
        for (n, reps) in [(1, 1), (2, 2), (3, 3)] {
            let u = build_real_amplitudes(&AnsatzParams::zeros(n, reps)).unwrap();
            let zero = pure_to_density(&PureState::basis(n, 0).unwrap());
            let out = apply_unitary(&u, &zero).unwrap();
            assert!(out.max_abs_diff(&zero) < 1e-15);
        }
    }

    #[test]
    fn single_qubit_composition() {
        let p = AnsatzParams::new(1, 1, vec![PI, 0.0]).unwrap();
        let u = build_real_amplitudes(&p).unwrap();
        // Ry(π)|0⟩ = |1⟩
        assert!(u.matrix()[(0, 0)].norm() < 1e-15);
        assert!((u.matrix()[(1, 0)].norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_angles_unitary_and_real() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (n, reps) in [(2, 1), (3, 2), (4, 3)] {
            let p = AnsatzParams::random(n, reps, &mut rng);
            let u = build_real_amplitudes(&p).unwrap();
            assert!(u.unitarity_error() < 1e-10);
            assert!(u.max_imag() <= 1e-12);
        }
    }

    #[test]
    fn matches_dense_layer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (n, reps) in [(1, 2), (2, 1), (2, 3), (3, 2), (3, 4)] {
            let p = AnsatzParams::random(n, reps, &mut rng);
            let fast = build_real_amplitudes(&p).unwrap();
            let slow = dense_real_amplitudes(&p);
            let diff = (fast.matrix() - slow).iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "n={n} reps={reps} diff={diff}");
        }
    }

    #[test]
    fn sca_schedule() {
        assert_eq!(sca_pairs(3, 1), vec![(0, 1), (1, 2), (2, 0)]);
        assert_eq!(sca_pairs(3, 2), vec![(2, 1), (0, 2), (1, 0)]);
        assert_eq!(sca_pairs(3, 3), vec![(2, 0), (0, 1), (1, 2)]);
        assert!(sca_pairs(1, 1).is_empty());
    }

    #[test]
    fn full_turn_is_global_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AnsatzParams::random(2, 2, &mut rng);
        let rho = crate::qcore::random_density_hs(4, &mut rng).unwrap();
        let base = apply_unitary(&build_real_amplitudes(&p).unwrap(), &rho).unwrap();
        for i in 0..p.theta.len() {
            let mut q = p.clone();
            q.theta[i] += 2.0 * PI;
            let u = build_real_amplitudes(&q).unwrap();
            let u0 = build_real_amplitudes(&p).unwrap();
            let flipped = (u.matrix() + u0.matrix()).iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert!(flipped < 1e-9);
            assert!(apply_unitary(&u, &rho).unwrap().max_abs_diff(&base) < 1e-9);
        }
    }

    #[test]
    fn param_length_checked() {
        assert!(matches!(AnsatzParams::new(2, 1, vec![0.0; 3]), Err(Error::Param(_))));
        assert!(AnsatzParams::new(2, 0, vec![]).is_err());
        assert!(AnsatzParams::new(1, 1, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn apply_identity_and_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rho = crate::qcore::random_density_hs(4, &mut rng).unwrap();
        assert!(apply_unitary(&UnitaryMatrix::identity(2), &rho).unwrap().max_abs_diff(&rho) < 1e-15);

        let mut x0 = UnitaryMatrix::identity(2);
        x0.apply_single(0, &Gate::X.matrix().unwrap());
        let zero = pure_to_density(&PureState::basis(2, 0).unwrap());
        let out = apply_unitary(&x0, &zero).unwrap();
        assert_eq!(out.matrix()[(2, 2)], real(1.0));
        assert!(apply_unitary(&UnitaryMatrix::identity(1), &rho).is_err());
    }

    #[test]
    fn conjugation_preserves_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rho = crate::qcore::random_density_hs(8, &mut rng).unwrap();
        let u = random_circuit_unitary(3, 6, &mut rng).unwrap();
        let a = rho.eigenvalues();
        let b = apply_unitary(&u, &rho).unwrap().eigenvalues();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn random_circuits_deterministic_and_unitary() {
        let a = random_circuit_unitary(3, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_circuit_unitary(3, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.unitarity_error() < 1e-9);
        assert!(random_circuit_unitary(2, 0, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn depth_one_single_qubit_is_table_gate() {
        let fixed = [Gate::H, Gate::X, Gate::Y, Gate::Z, Gate::S, Gate::T];
        for seed in 0..40 {
            let c = random_circuit(1, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let u = circuit_unitary(1, &c);
            let m = u.matrix();
            let near = |g: [[C64; 2]; 2]| (0..2).all(|i| (0..2).all(|j| (m[(i, j)] - g[i][j]).norm() < 1e-12));
            let in_fixed = fixed.iter().any(|g| near(g.matrix().unwrap()));
            // rotations: recover the angle from the matrix and compare
            let in_rot = {
                let c0 = m[(0, 0)];
                let phi = 2.0 * c0.re.clamp(-1.0, 1.0).acos();
                [rx(phi), rx(-phi), ry(phi), ry(-phi), rz(phi), rz(-phi)].into_iter().any(near)
            };
            assert!(in_fixed || in_rot, "seed {seed}: {c:?}");
        }
    }
}
