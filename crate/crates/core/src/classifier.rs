//! Variational classifier: losses, prediction, training and evaluation.
//!
//! Predictions are computed in the Heisenberg picture: for parameters θ the
//! effective observable `O = U(θ)† Z U(θ)` is formed once and every state is
//! scored as `Re Tr(O ρ)`. Each scored state counts as one circuit execution.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::ansatz::{build_real_amplitudes, AnsatzParams};
use crate::batching::GlobalState;
use crate::error::{Error, Result};
use crate::optim::{Minimizer, Optimizer};
use crate::qcore::{CMatrix, DensityMatrix, Observable};
use crate::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    L1Rescaled,
    L1Sigmoid,
    L2,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1-rescaled" => Ok(LossKind::L1Rescaled),
            "l1-sigmoid" => Ok(LossKind::L1Sigmoid),
            "l2" => Ok(LossKind::L2),
            other => Err(Error::Param(format!(
                "unknown loss '{other}', expected one of l1-rescaled, l1-sigmoid, l2"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub sigmoid_k: f64,
}

pub const DEFAULT_SIGMOID_K: f64 = 10.0;

impl LossSpec {
    pub fn new(kind: LossKind, sigmoid_k: f64) -> Result<Self> {
        let spec = LossSpec { kind, sigmoid_k };
        spec.validate()?;
        Ok(spec)
    }

    pub fn l1_rescaled() -> Self {
        LossSpec {
            kind: LossKind::L1Rescaled,
            sigmoid_k: DEFAULT_SIGMOID_K,
        }
    }

    pub fn l1_sigmoid(k: f64) -> Self {
        LossSpec {
            kind: LossKind::L1Sigmoid,
            sigmoid_k: k,
        }
    }

    pub fn l2() -> Self {
        LossSpec {
            kind: LossKind::L2,
            sigmoid_k: DEFAULT_SIGMOID_K,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigmoid_k > 0.0 && self.sigmoid_k.is_finite()) {
            return Err(Error::Param(format!("sigmoid_k must be positive, got {}", self.sigmoid_k)));
        }
        Ok(())
    }

    pub fn sigmoid(&self, x: f64) -> f64 {
        1.0 / (1.0 + (-self.sigmoid_k * x).exp())
    }

    /// Per-point loss for a raw prediction `p ∈ [-1, 1]` and a label in {0, 1}.
    ///
    /// L2 compares against the ±1 target `2y - 1`.
    pub fn term(&self, p: f64, label: u8) -> f64 {
        let y = f64::from(label);
        match self.kind {
            LossKind::L1Rescaled => ((p + 1.0) / 2.0 - y).abs(),
            LossKind::L1Sigmoid => (self.sigmoid(p) - y).abs(),
            LossKind::L2 => {
                let t = 2.0 * y - 1.0;
                (p - t) * (p - t)
            }
        }
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::l1_rescaled()
    }
}

fn check_label(label: u8) -> Result<()> {
    if label > 1 {
        return Err(Error::Param(format!("labels must be 0 or 1, got {label}")));
    }
    Ok(())
}

/// `U† Z U` for the ansatz at `params`.
pub fn effective_observable(params: &AnsatzParams, obs: &Observable) -> Result<CMatrix> {
    let u = build_real_amplitudes(params)?;
    if obs.dim() != u.dim() {
        return Err(Error::Dimension(format!(
            "observable acts on {} dims, ansatz on {}",
            obs.dim(),
            u.dim()
        )));
    }
    let mut zu = u.matrix().clone();
    for (r, s) in obs.diagonal().into_iter().enumerate() {
        if s < 0.0 {
            zu.row_mut(r).neg_mut();
        }
    }
    Ok(u.matrix().adjoint() * zu)
}

fn score(o: &CMatrix, rho: &DensityMatrix) -> Result<f64> {
    if o.nrows() != rho.dim() {
        return Err(Error::Dimension(format!(
            "state has dim {}, model expects {}",
            rho.dim(),
            o.nrows()
        )));
    }
    // Tr(Oρ) = Σ O_ij conj(ρ_ij) for Hermitian ρ
    Ok(o.iter().zip(rho.matrix().iter()).map(|(a, b)| a.re * b.re + a.im * b.im).sum())
}

/// `Tr(Z · U ρ U†)` for a single state.
pub fn predict_raw(params: &AnsatzParams, rho: &DensityMatrix, obs: &Observable) -> Result<f64> {
    score(&effective_observable(params, obs)?, rho)
}

/// Scores states under fixed parameters and counts circuit executions.
#[derive(Debug, Default)]
pub struct ExecutionCounter(Cell<u64>);

impl ExecutionCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> u64 {
        self.0.get()
    }

    pub fn add(&self, n: u64) {
        self.0.set(self.0.get() + n);
    }
}

pub fn predict_many<'a, I>(params: &AnsatzParams, states: I, obs: &Observable, counter: Option<&ExecutionCounter>) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a DensityMatrix>,
{
    let o = effective_observable(params, obs)?;
    let mut out = Vec::new();
    for rho in states {
        out.push(score(&o, rho)?);
        if let Some(c) = counter {
            c.add(1);
        }
    }
    Ok(out)
}

/// Hard label from a raw score.
pub fn threshold(p: f64) -> u8 {
    u8::from(p > 0.0)
}

pub fn loss_instance(data: &[(DensityMatrix, u8)], params: &AnsatzParams, spec: &LossSpec, obs: &Observable) -> Result<f64> {
    instance_loss_counted(data, params, spec, obs, None)
}

fn instance_loss_counted(
    data: &[(DensityMatrix, u8)],
    params: &AnsatzParams,
    spec: &LossSpec,
    obs: &Observable,
    counter: Option<&ExecutionCounter>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict_many(params, data.iter().map(|(s, _)| s), obs, counter)?;
    let mut total = 0.0;
    for (p, (_, y)) in preds.iter().zip(data) {
        check_label(*y)?;
        total += spec.term(*p, *y);
    }
    Ok(total / data.len() as f64)
}

/// Weighted mean of per-batch loss terms. `weights` overrides the weights carried by the states.
pub fn loss_global(
    globals: &[GlobalState],
    params: &AnsatzParams,
    spec: &LossSpec,
    obs: &Observable,
    weights: Option<&[f64]>,
) -> Result<f64> {
    global_loss_counted(globals, params, spec, obs, weights, None)
}

fn global_loss_counted(
    globals: &[GlobalState],
    params: &AnsatzParams,
    spec: &LossSpec,
    obs: &Observable,
    weights: Option<&[f64]>,
    counter: Option<&ExecutionCounter>,
) -> Result<f64> {
    if globals.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(w) = weights {
        if w.len() != globals.len() {
            return Err(Error::Weight(format!("{} weights for {} global states", w.len(), globals.len())));
        }
    }
    let preds = predict_many(params, globals.iter().map(|g| &g.state), obs, counter)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, (p, g)) in preds.iter().zip(globals).enumerate() {
        check_label(g.label)?;
        let w = weights.map_or(g.weight, |w| w[i]);
        if !(w > 0.0) {
            return Err(Error::Weight(format!("weight {w} of global state {i} is not positive")));
        }
        num += w * spec.term(*p, g.label);
        den += w;
    }
    Ok(num / den)
}

/// A training objective over ansatz angles that reports its circuit executions.
pub trait Objective {
    fn evaluate(&mut self, theta: &[f64]) -> Result<f64>;
    fn circuit_executions(&self) -> u64;
}

/// Mean per-point loss over individual states.
pub struct InstanceObjective<'a> {
    pub data: &'a [(DensityMatrix, u8)],
    pub template: AnsatzParams,
    pub spec: LossSpec,
    pub obs: Observable,
    counter: ExecutionCounter,
}

impl<'a> InstanceObjective<'a> {
    pub fn new(data: &'a [(DensityMatrix, u8)], template: AnsatzParams, spec: LossSpec, obs: Observable) -> Self {
        InstanceObjective {
            data,
            template,
            spec,
            obs,
            counter: ExecutionCounter::new(),
        }
    }
}

impl Objective for InstanceObjective<'_> {
    fn evaluate(&mut self, theta: &[f64]) -> Result<f64> {
        let params = self.template.with_theta(theta)?;
        instance_loss_counted(self.data, &params, &self.spec, &self.obs, Some(&self.counter))
    }

    fn circuit_executions(&self) -> u64 {
        self.counter.get()
    }
}

/// Weighted loss over global states.
pub struct GlobalObjective<'a> {
    pub globals: &'a [GlobalState],
    pub template: AnsatzParams,
    pub spec: LossSpec,
    pub obs: Observable,
    counter: ExecutionCounter,
}

impl<'a> GlobalObjective<'a> {
    pub fn new(globals: &'a [GlobalState], template: AnsatzParams, spec: LossSpec, obs: Observable) -> Self {
        GlobalObjective {
            globals,
            template,
            spec,
            obs,
            counter: ExecutionCounter::new(),
        }
    }
}

impl Objective for GlobalObjective<'_> {
    fn evaluate(&mut self, theta: &[f64]) -> Result<f64> {
        let params = self.template.with_theta(theta)?;
        global_loss_counted(self.globals, &params, &self.spec, &self.obs, None, Some(&self.counter))
    }

    fn circuit_executions(&self) -> u64 {
        self.counter.get()
    }
}

/// Wraps a plain closure; each call counts as one execution.
pub struct FnObjective<F> {
    f: F,
    calls: u64,
}

impl<F: FnMut(&[f64]) -> Result<f64>> FnObjective<F> {
    pub fn new(f: F) -> Self {
        FnObjective { f, calls: 0 }
    }
}

impl<F: FnMut(&[f64]) -> Result<f64>> Objective for FnObjective<F> {
    fn evaluate(&mut self, theta: &[f64]) -> Result<f64> {
        self.calls += 1;
        (self.f)(theta)
    }

    fn circuit_executions(&self) -> u64 {
        self.calls
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub reps: usize,
    pub maxiter_per_epoch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss: LossSpec,
    pub observable: Observable,
    #[serde(default)]
    pub optimizer: Optimizer,
}

impl TrainConfig {
    pub fn new(n_qubits: usize, reps: usize, seed: u64) -> Self {
        TrainConfig {
            reps,
            maxiter_per_epoch: 200,
            max_epochs: 50,
            patience: 10,
            seed,
            loss: LossSpec::default(),
            observable: Observable::last_qubit(n_qubits),
            optimizer: Optimizer::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 || self.maxiter_per_epoch == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Param(
                "reps, maxiter_per_epoch, max_epochs and patience must all be positive".into(),
            ));
        }
        self.loss.validate()
    }

    /// Initial angles drawn uniformly from (-π, π] with the run seed.
    pub fn initial_params(&self) -> AnsatzParams {
        AnsatzParams::random(self.observable.n_qubits(), self.reps, &mut rng_from_seed(self.seed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub eval_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub params: AnsatzParams,
    pub loss: f64,
    pub history: Vec<EpochRecord>,
    pub eval_count: u64,
    pub objective_evals: u64,
}

/// Minimum decrease of the best loss that resets the patience counter.
pub const IMPROVEMENT_EPS: f64 = 1e-9;

/// Runs warm-started optimizer rounds until `patience` rounds pass without improvement.
pub fn train<O: Objective + ?Sized>(objective: &mut O, init: &AnsatzParams, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    init.validate()?;
    let mut best_theta = init.theta.clone();
    let mut best_f = f64::INFINITY;
    let mut stale = 0;
    let mut history = Vec::new();
    let mut objective_evals = 0u64;
    for epoch in 1..=cfg.max_epochs {
        let mut f = |theta: &[f64]| objective.evaluate(theta);
        let out = cfg.optimizer.minimize(&mut f, &best_theta, cfg.maxiter_per_epoch)?;
        objective_evals += out.evals as u64;
        if out.f < best_f - IMPROVEMENT_EPS {
            stale = 0;
        } else {
            stale += 1;
        }
        if out.f < best_f {
            best_f = out.f;
            best_theta = out.x;
        }
        history.push(EpochRecord {
            epoch,
            loss: best_f,
            eval_count: objective.circuit_executions(),
        });
        log::debug!("epoch {epoch}: loss {best_f:.6e}");
        if stale >= cfg.patience {
            break;
        }
    }
    Ok(TrainedModel {
        params: init.with_theta(&best_theta)?,
        loss: best_f,
        history,
        eval_count: objective.circuit_executions(),
        objective_evals,
    })
}

/// Area under the ROC curve via the Mann-Whitney statistic with half credit for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Eval("NaN score".into()));
    }
    for &y in labels {
        check_label(y)?;
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Eval("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ansatz::{apply_unitary, build_real_amplitudes};
    use crate::qcore::{amplitude_encode, pauli_z_expectation, pure_to_density};

    #[test]
    fn loss_terms() {
        let l1 = LossSpec::l1_rescaled();
        assert_eq!(l1.term(1.0, 1), 0.0);
        assert_eq!(l1.term(0.0, 1), 0.5);
        assert_eq!(l1.term(-1.0, 0), 0.0);
        let sig = LossSpec::l1_sigmoid(10.0);
        assert_eq!(sig.term(0.0, 1), 0.5);
        assert_eq!(LossSpec::l2().term(-1.0, 0), 0.0);
        assert_eq!(LossSpec::l2().term(1.0, 0), 4.0);
        assert!(LossSpec::new(LossKind::L1Sigmoid, 0.0).is_err());
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("l2".parse::<LossKind>().unwrap(), LossKind::L2);
        let err = "hinge".parse::<LossKind>().unwrap_err().to_string();
        assert!(err.contains("l1-rescaled") && err.contains("l1-sigmoid"));
    }

    #[test]
    fn zero_angles_on_ground_state() {
        let params = AnsatzParams::zeros(2, 1);
        let rho = pure_to_density(&amplitude_encode(&[1.0, 0.0, 0.0, 0.0], 2).unwrap());
        let p = predict_raw(&params, &rho, &Observable::last_qubit(2)).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn heisenberg_matches_schrodinger() {
        let mut rng = rng_from_seed(4);
        for n in 1..=3 {
            let params = AnsatzParams::random(n, 2, &mut rng);
            let rho = crate::qcore::random_density_hs(1 << n, &mut rng).unwrap();
            let obs = Observable::last_qubit(n);
            let sigma = apply_unitary(&build_real_amplitudes(&params).unwrap(), &rho).unwrap();
            let direct = pauli_z_expectation(&sigma, &obs).unwrap();
            let p = predict_raw(&params, &rho, &obs).unwrap();
            assert!((p - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_data_rejected() {
        let params = AnsatzParams::zeros(1, 1);
        let err = loss_instance(&[], &params, &LossSpec::default(), &Observable::last_qubit(1)).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
    }

    #[test]
    fn counter_tracks_states() {
        let data: Vec<(DensityMatrix, u8)> = (0..4)
            .map(|i| (pure_to_density(&crate::qcore::PureState::basis(2, i).unwrap()), (i % 2) as u8))
            .collect();
        let mut obj = InstanceObjective::new(&data, AnsatzParams::zeros(2, 1), LossSpec::default(), Observable::last_qubit(2));
        obj.evaluate(&[0.0; 4]).unwrap();
        obj.evaluate(&[0.1; 4]).unwrap();
        assert_eq!(obj.circuit_executions(), 8);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.9, 0.5], &[1, 1, 0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::Eval(_))));
    }

    #[test]
    fn constant_objective_stops_after_patience_plus_one() {
        let mut cfg = TrainConfig::new(1, 1, 0);
        cfg.maxiter_per_epoch = 5;
        let mut obj = FnObjective::new(|_: &[f64]| Ok(3.0));
        let model = train(&mut obj, &AnsatzParams::zeros(1, 1), &cfg).unwrap();
        assert_eq!(model.history.len(), cfg.patience + 1);
        assert_eq!(model.loss, 3.0);
    }

    #[test]
    fn train_quadratic() {
        let target = [0.4, -0.7, 1.1, 0.2];
        let mut cfg = TrainConfig::new(2, 1, 0);
        cfg.max_epochs = 20;
        let mut obj = FnObjective::new(|x: &[f64]| Ok(x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum()));
        let model = train(&mut obj, &AnsatzParams::zeros(2, 1), &cfg).unwrap();
        for (a, b) in model.params.theta.iter().zip(&target) {
            assert!((a - b).abs() < 1e-3, "{:?}", model.params.theta);
        }
        assert!(model.history.windows(2).all(|w| w[1].loss <= w[0].loss));
    }

    #[test]
    fn non_finite_objective_surfaces_params() {
        let cfg = TrainConfig::new(1, 1, 0);
        let mut obj = FnObjective::new(|x: &[f64]| Ok(if x[0] > 0.5 { f64::INFINITY } else { -x[0] }));
        let err = train(&mut obj, &AnsatzParams::zeros(1, 1), &cfg).unwrap_err();
        assert!(matches!(err, Error::Optimization { .. }));
    }
}
