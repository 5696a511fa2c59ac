//! Privacy auditing of global states.
//!
//! * Membership inference: an adversary holding a candidate state ρ* measures
//!   the projection onto it. The overlap with a global state that includes ρ*
//!   is compared against the overlap with the adjacent global state without it,
//!   and Gaussian fits of the two distributions give an (ε, δ) estimate.
//! * Composition recovery: how many integer compositions of a batch over a
//!   finite basis reproduce the same global state.
//! * Loss-update correlation: whether nonlinear losses evaluated on global
//!   states move in step with their instance-level counterparts.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ansatz::{apply_unitary, random_circuit_unitary};
use crate::batching::Batch;
use crate::classifier::{LossKind, LossSpec};
use crate::error::{Error, Result};
use crate::qcore::{
    amplitude_encode, mix, mix_uniform, pauli_z_expectation, projection_overlap, pure_to_density, qubits_for_len, random_density_hs,
    DensityMatrix, Observable,
};
use crate::{derived_rng, rng_from_seed};

#[derive(Debug, Clone, PartialEq)]
pub enum Scheme {
    /// fresh random batches of the given size around every candidate
    Random(usize),
    /// a fixed partition of the class, positions into the class state list
    Smart(Vec<Batch>),
}

impl Scheme {
    pub fn describe(&self) -> String {
        match self {
            Scheme::Random(n) => format!("random(batch_size={n})"),
            Scheme::Smart(b) => format!("smart(n_batches={})", b.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProjectionSamples {
    /// Tr(ρ* ρ_glob−1), the global state without the candidate
    pub adjacent: Vec<f64>,
    /// Tr(ρ* ρ_glob), the global state with the candidate
    pub including: Vec<f64>,
    pub n_excluded: usize,
}

impl ProjectionSamples {
    /// CSV with columns `adjacent,including`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "adjacent,including")?;
        for (a, b) in self.adjacent.iter().zip(&self.including) {
            writeln!(w, "{a},{b}")?;
        }
        Ok(())
    }
}

/// Batch layouts drawn around each candidate, in candidate order.
enum Plan<'a> {
    Random { batch_size: usize, seed: u64 },
    Smart(&'a [Batch]),
}

fn check_scheme(pop: usize, scheme: &Scheme) -> Result<()> {
    match scheme {
        Scheme::Random(n) => {
            if *n < 2 || pop < *n {
                return Err(Error::Audit(format!(
                    "random scheme needs batch size >= 2 and population >= batch size, got {n} and {pop}"
                )));
            }
        }
        Scheme::Smart(batches) => {
            let mut seen = vec![false; pop];
            for m in batches.iter().flat_map(|b| &b.members) {
                if *m >= pop || std::mem::replace(&mut seen[*m], true) {
                    return Err(Error::Audit(format!("smart batches are not a partition of {pop} states")));
                }
            }
        }
    }
    Ok(())
}

/// For every candidate `k`, calls `visit(k, members_without_k)` once per adjacent batch.
fn walk(pop: usize, plan: Plan<'_>, n_excluded: &mut usize, mut visit: impl FnMut(usize, &[usize]) -> Result<()>) -> Result<()> {
    match plan {
        Plan::Random { batch_size, seed } => {
            let mut rng = rng_from_seed(seed);
            let n_batches = pop / batch_size;
            for k in 0..pop {
                let mut others: Vec<usize> = (0..pop).filter(|&j| j != k).collect();
                others.shuffle(&mut rng);
                for chunk in others.chunks_exact(batch_size - 1).take(n_batches) {
                    visit(k, chunk)?;
                }
            }
        }
        Plan::Smart(batches) => {
            for b in batches {
                if b.len() < 2 {
                    *n_excluded += b.len();
                    continue;
                }
                for &k in &b.members {
                    let rest: Vec<usize> = b.members.iter().copied().filter(|&m| m != k).collect();
                    visit(k, &rest)?;
                }
            }
        }
    }
    Ok(())
}

fn plan(scheme: &Scheme, seed: u64) -> Plan<'_> {
    match scheme {
        Scheme::Random(n) => Plan::Random { batch_size: *n, seed },
        Scheme::Smart(b) => Plan::Smart(b),
    }
}

/// Pairwise overlaps Tr(ρᵢρⱼ); ρ is Hermitian so each entry is real.
fn overlap_table(states: &[DensityMatrix]) -> Vec<Vec<f64>> {
    let n = states.len();
    let mut t = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = states[i].overlap(&states[j]);
            t[i][j] = v;
            t[j][i] = v;
        }
    }
    t
}

/// Projection samples from a table of pairwise overlaps.
pub fn membership_projections(class_states: &[DensityMatrix], scheme: &Scheme, seed: u64) -> Result<ProjectionSamples> {
    let pop = class_states.len();
    check_scheme(pop, scheme)?;
    let table = overlap_table(class_states);
    let mut out = ProjectionSamples::default();
    let mut excluded = 0;
    walk(pop, plan(scheme, seed), &mut excluded, |k, members| {
        let n = (members.len() + 1) as f64;
        let adj = members.iter().map(|&m| table[k][m]).sum::<f64>() / members.len() as f64;
        out.adjacent.push(adj);
        out.including.push(((n - 1.0) * adj + table[k][k]) / n);
        Ok(())
    })?;
    out.n_excluded = excluded;
    Ok(out)
}

/// Reference path that materializes ρ_glob−1 and ρ_glob; draws the same batches as
/// [`membership_projections`] for the same seed.
pub fn membership_projections_explicit(class_states: &[DensityMatrix], scheme: &Scheme, seed: u64) -> Result<ProjectionSamples> {
    probed_projections(class_states, scheme, seed, |k| Ok(class_states[k].clone()))
}

/// The adversary measures with a noisy probe `(1 − a)ρ* + a·ρ_noise`, ρ_noise Hilbert-Schmidt random.
pub fn membership_projections_noisy(class_states: &[DensityMatrix], scheme: &Scheme, a_noise: f64, seed: u64) -> Result<ProjectionSamples> {
    if !(0.0..=1.0).contains(&a_noise) {
        return Err(Error::Audit(format!("noise weight {a_noise} outside [0, 1]")));
    }
    let dim = class_states.first().map_or(2, DensityMatrix::dim);
    let mut rng = derived_rng(seed, 0x0415e);
    let probes: Vec<DensityMatrix> = class_states
        .iter()
        .map(|rho| mix(&[rho.clone(), random_density_hs(dim, &mut rng)?], &[1.0 - a_noise, a_noise]))
        .collect::<Result<_>>()?;
    probed_projections(class_states, scheme, seed, |k| Ok(probes[k].clone()))
}

fn probed_projections(
    class_states: &[DensityMatrix],
    scheme: &Scheme,
    seed: u64,
    probe: impl Fn(usize) -> Result<DensityMatrix>,
) -> Result<ProjectionSamples> {
    let pop = class_states.len();
    check_scheme(pop, scheme)?;
    let mut out = ProjectionSamples::default();
    let mut excluded = 0;
    walk(pop, plan(scheme, seed), &mut excluded, |k, members| {
        let n = (members.len() + 1) as f64;
        let batch: Vec<DensityMatrix> = members.iter().map(|&m| class_states[m].clone()).collect();
        let without = mix_uniform(&batch)?;
        let with = mix(&[without.clone(), class_states[k].clone()], &[(n - 1.0) / n, 1.0 / n])?;
        let p = probe(k)?;
        out.adjacent.push(projection_overlap(&p, &without)?);
        out.including.push(projection_overlap(&p, &with)?);
        Ok(())
    })?;
    out.n_excluded = excluded;
    Ok(out)
}

fn ser_ext_f64<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn de_ext_f64<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }
    match Num::deserialize(d)? {
        Num::F(v) => Ok(v),
        Num::S(s) => match s.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub mu1: f64,
    pub std1: f64,
    pub mu2: f64,
    pub std2: f64,
    pub delta: f64,
    /// may be ±∞; serialized as "inf" / "-inf"
    #[serde(serialize_with = "ser_ext_f64", deserialize_with = "de_ext_f64")]
    pub epsilon: f64,
    pub n_adjacent: usize,
    pub n_including: usize,
    pub n_eval: usize,
    pub n_valid: usize,
    pub n_excluded: usize,
    pub scheme: String,
    pub diagnostic: Option<String>,
}

pub const DEFAULT_DELTA: f64 = 0.05;
pub const DEFAULT_N_EVAL: usize = 10_000;
const MIN_SAMPLES: usize = 10;

/// Mean and population standard deviation.
fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn normal_pdf(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

/// ε = max over draws p ~ N(μ₂, std₂) of ln((g₂(p) − δ) / g₁(p)), skipping draws where
/// the numerator is not positive or g₁ vanishes.
pub fn epsilon_from_samples(s: &ProjectionSamples, delta: f64, n_eval: usize, seed: u64, scheme: &str) -> Result<PrivacyReport> {
    if s.adjacent.len() < MIN_SAMPLES || s.including.len() < MIN_SAMPLES {
        return Err(Error::Audit(format!(
            "need at least {MIN_SAMPLES} samples per side, got {} and {}",
            s.adjacent.len(),
            s.including.len()
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Audit(format!("delta {delta} outside (0, 1)")));
    }
    if n_eval == 0 {
        return Err(Error::Audit("n_eval must be positive".into()));
    }
    let (mu1, std1) = moments(&s.adjacent);
    let (mu2, std2) = moments(&s.including);
    let mut report = PrivacyReport {
        mu1,
        std1,
        mu2,
        std2,
        delta,
        epsilon: f64::INFINITY,
        n_adjacent: s.adjacent.len(),
        n_including: s.including.len(),
        n_eval,
        n_valid: 0,
        n_excluded: s.n_excluded,
        scheme: scheme.to_string(),
        diagnostic: None,
    };
    if std1 == 0.0 || std2 == 0.0 {
        report.diagnostic = Some(format!("degenerate fit: std1 = {std1}, std2 = {std2}"));
        return Ok(report);
    }
    let dist = Normal::new(mu2, std2).map_err(|e| Error::Audit(e.to_string()))?;
    let mut rng = rng_from_seed(seed);
    let mut best = f64::NEG_INFINITY;
    let mut valid = 0;
    for _ in 0..n_eval {
        let p = dist.sample(&mut rng);
        let num = normal_pdf(p, mu2, std2) - delta;
        let g1 = normal_pdf(p, mu1, std1);
        if num <= 0.0 || g1 == 0.0 {
            continue;
        }
        valid += 1;
        best = best.max((num / g1).ln());
    }
    report.n_valid = valid;
    report.epsilon = best;
    if valid == 0 {
        report.diagnostic = Some("no draw gave a positive numerator and non-zero adjacent density".into());
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionEstimate {
    pub n_state: u64,
    pub d: u64,
    pub batch_size: u64,
    /// ln C(N_i + N_state − 1, N_state − 1)
    pub ln_b_all: f64,
    /// ln_b_all scaled by (N_state − d) / N_state
    pub ln_b: f64,
    pub entropy_proxy: f64,
    /// the same two quantities with the factorials replaced by their Stirling forms
    pub ln_b_all_stirling: f64,
    pub ln_b_stirling: f64,
}

/// ln C(n, k) as a sum of logs over the shorter side.
pub fn ln_binomial(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
}

fn x_ln_x(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

pub fn composition_count_estimate(batch_size: u64, n_state: u64, d: u64) -> Result<CompositionEstimate> {
    if batch_size < 1 || d < 1 || n_state <= d {
        return Err(Error::Domain(format!(
            "need N_i >= 1 and N_state > d >= 1, got N_i = {batch_size}, N_state = {n_state}, d = {d}"
        )));
    }
    let ln_b_all = ln_binomial(batch_size + n_state - 1, n_state - 1);
    let scale = (n_state - d) as f64 / n_state as f64;
    let (ni, ns) = (batch_size as f64, n_state as f64);
    let ln_b_all_stirling = x_ln_x(ni + ns - 1.0) - x_ln_x(ns - 1.0) - x_ln_x(ni);
    Ok(CompositionEstimate {
        n_state,
        d,
        batch_size,
        ln_b_all,
        ln_b: ln_b_all * scale,
        entropy_proxy: ln_b_all * scale,
        ln_b_all_stirling,
        ln_b_stirling: ln_b_all_stirling * scale,
    })
}

pub const ORACLE_GUARD: u128 = 10_000_000;

/// C(n, k) with saturation at u128::MAX.
fn binomial_u128(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 1..=k {
        // acc * (n - k + i) / i stays integral at every step
        match acc.checked_mul(n - k + i) {
            Some(v) => acc = v / i,
            None => return u128::MAX,
        }
    }
    acc
}

/// Counts compositions `b` (Σb = N_i) whose normalized mixture matches `rho_glob` to `tol`.
pub fn composition_count_exact(basis: &[DensityMatrix], batch_size: usize, rho_glob: &DensityMatrix, tol: f64) -> Result<u64> {
    if basis.is_empty() || batch_size == 0 {
        return Err(Error::Domain("empty basis or zero batch size".into()));
    }
    if basis.iter().any(|b| b.dim() != rho_glob.dim()) {
        return Err(Error::Dimension("basis and global state dimensions differ".into()));
    }
    let candidates = binomial_u128((batch_size + basis.len() - 1) as u128, (basis.len() - 1) as u128);
    if candidates > ORACLE_GUARD {
        return Err(Error::OracleTooLarge {
            candidates,
            guard: ORACLE_GUARD,
        });
    }
    let target = rho_glob.matrix();
    let scaled: Vec<_> = basis
        .iter()
        .map(|b| b.matrix() / crate::qcore::C64::new(batch_size as f64, 0.0))
        .collect();
    let mut acc = target * crate::qcore::C64::new(0.0, 0.0);
    let mut count = 0u64;
    // depth-first over (basis index, balls left), accumulating the partial mixture
    fn dfs(
        j: usize,
        left: usize,
        scaled: &[crate::qcore::CMatrix],
        acc: &mut crate::qcore::CMatrix,
        target: &crate::qcore::CMatrix,
        tol: f64,
        count: &mut u64,
    ) {
        if j == scaled.len() - 1 {
            let mut m = acc.clone();
            for _ in 0..left {
                m += &scaled[j];
            }
            if (m - target).iter().all(|c| c.norm() <= tol) {
                *count += 1;
            }
            return;
        }
        let saved = acc.clone();
        for take in 0..=left {
            dfs(j + 1, left - take, scaled, acc, target, tol, count);
            *acc += &scaled[j];
        }
        *acc = saved;
    }
    dfs(0, batch_size, &scaled, &mut acc, target, tol, &mut count);
    Ok(count)
}

/// All genotype vectors over `{0, …, alphabet−1}^n_snp` except the zero vector, amplitude-encoded.
pub fn genotype_basis(alphabet: u8, n_snp: u32) -> Result<Vec<DensityMatrix>> {
    if alphabet < 2 || n_snp == 0 {
        return Err(Error::Domain(format!("alphabet {alphabet} and N_SNP {n_snp} give no basis")));
    }
    let total = (alphabet as u64)
        .checked_pow(n_snp)
        .filter(|&t| t <= 1 << 20)
        .ok_or_else(|| Error::Domain("basis too large".into()))?;
    let n_qubits = qubits_for_len(n_snp as usize);
    let mut out = Vec::with_capacity(total as usize - 1);
    for code in 1..total {
        let mut c = code;
        let mut v = vec![0.0; n_snp as usize];
        for slot in v.iter_mut().rev() {
            *slot = (c % alphabet as u64) as f64;
            c /= alphabet as u64;
        }
        out.push(pure_to_density(&amplitude_encode(&v, n_qubits)?));
    }
    Ok(out)
}

/// Draws a random composition of `batch_size` over `n` bins.
pub fn random_composition<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<usize> {
    let mut b = vec![0; n];
    for _ in 0..batch_size {
        b[rng.random_range(0..n)] += 1;
    }
    b
}

pub fn composition_mixture(basis: &[DensityMatrix], b: &[usize]) -> Result<DensityMatrix> {
    let total: usize = b.iter().sum();
    if total == 0 || b.len() != basis.len() {
        return Err(Error::Domain("composition does not match basis".into()));
    }
    let w: Vec<f64> = b.iter().map(|&k| k as f64 / total as f64).collect();
    mix(basis, &w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub pcc: f64,
    pub sign_pcc: f64,
    pub sign_agreement: f64,
    pub n_trials: usize,
}

fn pearson(x: &[f64], y: &[f64], what: &str) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Correlation(format!(
            "{what} has zero variance (instance var {sxx:.3e}, global var {syy:.3e}) over {} trials",
            x.len()
        )));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Simulated single optimizer step: instance-level vs global loss change between two random circuits.
///
/// Every state carries label 0, so L1 kinds score `(p+1)/2` or `sig(p)` and L2 scores `(p+1)²`.
pub fn loss_update_correlation(
    batch_size: usize,
    n_trials: usize,
    spec: &LossSpec,
    n_qubits: usize,
    depth: usize,
    seed: u64,
) -> Result<CorrelationResult> {
    spec.validate()?;
    if batch_size == 0 || n_trials < 2 || n_qubits == 0 {
        return Err(Error::Param("need batch_size >= 1, n_trials >= 2 and n_qubits >= 1".into()));
    }
    let obs = Observable::last_qubit(n_qubits);
    let dim = 1 << n_qubits;
    let mut rng = rng_from_seed(seed);
    let mut d_inst = Vec::with_capacity(n_trials);
    let mut d_glob = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let batch: Vec<DensityMatrix> = (0..batch_size).map(|_| random_density_hs(dim, &mut rng)).collect::<Result<_>>()?;
        let global = mix_uniform(&batch)?;
        let u0 = random_circuit_unitary(n_qubits, depth, &mut rng)?;
        let u1 = random_circuit_unitary(n_qubits, depth, &mut rng)?;
        let term = |u: &crate::ansatz::UnitaryMatrix, rho: &DensityMatrix| -> Result<f64> {
            Ok(spec.term(pauli_z_expectation(&apply_unitary(u, rho)?, &obs)?, 0))
        };
        let inst = |u| -> Result<f64> {
            let mut s = 0.0;
            for rho in &batch {
                s += term(u, rho)?;
            }
            Ok(s / batch_size as f64)
        };
        d_inst.push(inst(&u1)? - inst(&u0)?);
        d_glob.push(term(&u1, &global)? - term(&u0, &global)?);
    }
    let pcc = pearson(&d_inst, &d_glob, "loss delta")?;
    let si: Vec<f64> = d_inst.iter().map(|&v| sign(v)).collect();
    let sg: Vec<f64> = d_glob.iter().map(|&v| sign(v)).collect();
    let sign_pcc = pearson(&si, &sg, "loss delta sign")?;
    let agree = si.iter().zip(&sg).filter(|(a, b)| a == b).count() as f64 / n_trials as f64;
    if spec.kind == LossKind::L1Rescaled {
        log::debug!("L1Rescaled with label 0 is linear in the prediction; expect pcc = 1");
    }
    Ok(CorrelationResult {
        pcc,
        sign_pcc,
        sign_agreement: agree,
        n_trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qcore::PureState;

    fn basis_state(n: usize, i: usize) -> DensityMatrix {
        pure_to_density(&PureState::basis(n, i).unwrap())
    }

    #[test]
    fn copies_and_orthogonal_candidates() {
        let rho = basis_state(1, 0);
        let s = membership_projections(&vec![rho; 6], &Scheme::Random(3), 1).unwrap();
        assert!(s.adjacent.iter().chain(&s.including).all(|&v| (v - 1.0).abs() < 1e-15));

        // candidate |1⟩ in a class otherwise made of |0⟩
        let mut states = vec![basis_state(1, 0); 5];
        states.push(basis_state(1, 1));
        let s = membership_projections(&states, &Scheme::Random(3), 1).unwrap();
        let n_batches = 6 / 3;
        let k = 5 * n_batches;
        for i in k..k + n_batches {
            assert_eq!(s.adjacent[i], 0.0);
            assert!((s.including[i] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fast_and_explicit_paths_agree() {
        let mut rng = rng_from_seed(3);
        let states: Vec<DensityMatrix> = (0..12).map(|_| random_density_hs(4, &mut rng).unwrap()).collect();
        let a = membership_projections(&states, &Scheme::Random(4), 8).unwrap();
        let b = membership_projections_explicit(&states, &Scheme::Random(4), 8).unwrap();
        assert_eq!(a.adjacent.len(), 12 * 3);
        for (x, y) in a.adjacent.iter().zip(&b.adjacent).chain(a.including.iter().zip(&b.including)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn smart_scheme_skips_singletons() {
        let states: Vec<DensityMatrix> = (0..4).map(|i| basis_state(2, i)).collect();
        let batches = vec![
            Batch {
                members: vec![0, 1, 2],
                label: 0,
            },
            Batch {
                members: vec![3],
                label: 0,
            },
        ];
        let s = membership_projections(&states, &Scheme::Smart(batches), 0).unwrap();
        assert_eq!(s.adjacent.len(), 3);
        assert_eq!(s.n_excluded, 1);
    }

    #[test]
    fn epsilon_identical_distributions_is_negative() {
        let mut rng = rng_from_seed(1);
        let x: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
        let s = ProjectionSamples {
            adjacent: x.clone(),
            including: x,
            n_excluded: 0,
        };
        let r = epsilon_from_samples(&s, 0.05, 10_000, 2, "test").unwrap();
        assert!(r.epsilon < 0.0, "{r:?}");
    }

    #[test]
    fn epsilon_degenerate_is_infinite() {
        let s = ProjectionSamples {
            adjacent: vec![0.5; 20],
            including: vec![0.6; 20],
            n_excluded: 0,
        };
        let r = epsilon_from_samples(&s, 0.05, 100, 0, "test").unwrap();
        assert_eq!(r.epsilon, f64::INFINITY);
        assert!(r.diagnostic.is_some());
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"epsilon\":\"inf\""));
        let back: PrivacyReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.epsilon, f64::INFINITY);
    }

    #[test]
    fn epsilon_needs_samples() {
        let s = ProjectionSamples {
            adjacent: vec![0.5; 5],
            including: vec![0.6; 20],
            n_excluded: 0,
        };
        assert!(matches!(epsilon_from_samples(&s, 0.05, 100, 0, ""), Err(Error::Audit(_))));
    }

    #[test]
    fn estimate_examples() {
        let e = composition_count_estimate(1, 9, 2).unwrap();
        assert!((e.ln_b_all - 9f64.ln()).abs() < 1e-12);
        assert!((e.entropy_proxy - 9f64.ln() * 7.0 / 9.0).abs() < 1e-12);
        let e = composition_count_estimate(2, 3, 1).unwrap();
        assert!((e.ln_b_all - 6f64.ln()).abs() < 1e-12);
        assert!(matches!(composition_count_estimate(2, 3, 3), Err(Error::Domain(_))));
        assert!(matches!(composition_count_estimate(0, 3, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn exact_count_examples() {
        let zero = basis_state(1, 0);
        let one = basis_state(1, 1);
        let half = DensityMatrix::maximally_mixed(1);
        assert_eq!(composition_count_exact(&[zero.clone(), one.clone()], 2, &half, 1e-9).unwrap(), 1);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let plus = pure_to_density(&amplitude_encode(&[h, h], 1).unwrap());
        let minus = pure_to_density(&amplitude_encode(&[h, -h], 1).unwrap());
        assert_eq!(composition_count_exact(&[zero, one, plus, minus], 2, &half, 1e-9).unwrap(), 2);
    }

    #[test]
    fn oracle_guard() {
        let basis = genotype_basis(3, 3).unwrap();
        let rho = basis[0].clone();
        assert!(matches!(
            composition_count_exact(&basis, 40, &rho, 1e-9),
            Err(Error::OracleTooLarge { .. })
        ));
    }

    #[test]
    fn genotype_basis_size() {
        assert_eq!(genotype_basis(3, 2).unwrap().len(), 8);
        assert_eq!(genotype_basis(2, 3).unwrap().len(), 7);
    }

    #[test]
    fn correlation_singleton_and_linear() {
        let r = loss_update_correlation(1, 50, &LossSpec::l1_sigmoid(10.0), 2, 3, 1).unwrap();
        assert_eq!(r.pcc, 1.0);
        assert_eq!(r.sign_agreement, 1.0);
        let r = loss_update_correlation(8, 50, &LossSpec::l1_rescaled(), 2, 3, 1).unwrap();
        assert!((r.pcc - 1.0).abs() < 1e-9);
    }
}
