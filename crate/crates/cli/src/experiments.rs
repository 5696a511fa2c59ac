//! Training/evaluation runs and the experiment grids behind `repro`.

use serde::{Deserialize, Serialize};

use qmix_core::ansatz::AnsatzParams;
use qmix_core::batching::{batch_by_class, build_global_states, smart_batches, Strategy};
use qmix_core::classifier::{auc, predict_many, threshold, train, GlobalObjective, InstanceObjective, LossSpec, TrainConfig};
use qmix_core::datagen::{class_global_fidelity, gen_snp, gen_toy_mixed, gen_toy_pure, LabeledDataset, SnpModelParams, ToyParams};
use qmix_core::optim::Optimizer;
use qmix_core::privacy::{epsilon_from_samples, membership_projections, PrivacyReport, Scheme, DEFAULT_DELTA, DEFAULT_N_EVAL};
use qmix_core::qcore::{pauli_z_expectation, DensityMatrix, Observable};
use qmix_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Instance,
    Global,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSetup {
    pub mode: Mode,
    /// batches per class in global mode
    pub batches: usize,
    pub batching: Strategy,
    pub loss: LossSpec,
    pub reps: usize,
    pub seed: u64,
    pub maxiter_per_epoch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: Optimizer,
}

impl TrainSetup {
    pub fn new(mode: Mode, seed: u64) -> Self {
        TrainSetup {
            mode,
            batches: 1,
            batching: Strategy::Random,
            loss: LossSpec::default(),
            reps: 2,
            seed,
            maxiter_per_epoch: 200,
            max_epochs: 50,
            patience: 10,
            optimizer: Optimizer::default(),
        }
    }

    pub fn config(&self, n_qubits: usize) -> TrainConfig {
        let mut c = TrainConfig::new(n_qubits, self.reps, self.seed);
        c.loss = self.loss;
        c.maxiter_per_epoch = self.maxiter_per_epoch;
        c.max_epochs = self.max_epochs;
        c.patience = self.patience;
        c.optimizer = self.optimizer;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub mode: Mode,
    pub n_train: usize,
    pub n_test: usize,
    pub n_qubits: usize,
    /// states the objective sees per evaluation
    pub states_per_evaluation: usize,
    /// AUC of thresholded predictions on individual states
    pub train_auc: f64,
    pub test_auc: f64,
    /// AUC of the raw expectation values on individual test states
    pub test_auc_score: f64,
    pub train_loss: f64,
    pub epochs: usize,
    pub objective_evaluations: u64,
    pub circuit_executions: u64,
    pub params: AnsatzParams,
}

fn hard_and_soft_auc(params: &AnsatzParams, data: &[(DensityMatrix, u8)], obs: &Observable) -> Result<(f64, f64)> {
    let scores = predict_many(params, data.iter().map(|d| &d.0), obs, None)?;
    let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
    let hard: Vec<f64> = scores.iter().map(|&p| threshold(p) as f64).collect();
    Ok((auc(&hard, &labels)?, auc(&scores, &labels)?))
}

pub fn train_and_evaluate(train_ds: &LabeledDataset, test_ds: &LabeledDataset, setup: &TrainSetup) -> Result<TrainMetrics> {
    let n_qubits = train_ds.n_qubits().ok_or(Error::EmptyDataset)?;
    if test_ds.n_qubits() != Some(n_qubits) {
        return Err(Error::Dimension("train and test sets differ in qubit count".into()));
    }
    let cfg = setup.config(n_qubits);
    let init = cfg.initial_params();
    let data = train_ds.labeled_densities()?;
    let (model, per_eval) = match setup.mode {
        Mode::Instance => {
            let mut obj = InstanceObjective::new(&data, init.clone(), cfg.loss, cfg.observable);
            (train(&mut obj, &init, &cfg)?, data.len())
        }
        Mode::Global => {
            let states: Vec<DensityMatrix> = data.iter().map(|d| d.0.clone()).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            let batches = batch_by_class(&states, &labels, setup.batching, setup.batches, setup.seed)?;
            let globals = build_global_states(&batches, &states, setup.batching.weight_mode())?;
            let mut obj = GlobalObjective::new(&globals, init.clone(), cfg.loss, cfg.observable);
            (train(&mut obj, &init, &cfg)?, globals.len())
        }
    };
    let test = test_ds.labeled_densities()?;
    let (train_auc, _) = hard_and_soft_auc(&model.params, &data, &cfg.observable)?;
    let (test_auc, test_auc_score) = hard_and_soft_auc(&model.params, &test, &cfg.observable)?;
    Ok(TrainMetrics {
        mode: setup.mode,
        n_train: data.len(),
        n_test: test.len(),
        n_qubits,
        states_per_evaluation: per_eval,
        train_auc,
        test_auc,
        test_auc_score,
        train_loss: model.loss,
        epochs: model.history.len(),
        objective_evaluations: model.objective_evals,
        circuit_executions: model.eval_count,
        params: model.params,
    })
}

/// Offset between the training and test seeds of a toy run.
pub const TEST_SEED_OFFSET: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    Pure,
    Mixed,
}

pub fn toy_dataset(kind: ToyKind, p: &ToyParams, seed: u64) -> Result<LabeledDataset> {
    match kind {
        ToyKind::Pure => gen_toy_pure(p, seed),
        ToyKind::Mixed => gen_toy_mixed(p, seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRow {
    pub e_shift: f64,
    pub seed: u64,
    pub fidelity: f64,
    pub instance_train_auc: f64,
    pub instance_test_auc: f64,
    pub global_train_auc: f64,
    pub global_test_auc: f64,
    pub instance_test_auc_score: f64,
    pub global_test_auc_score: f64,
}

impl ToyRow {
    pub const CSV_HEADER: &'static str = "e_shift,seed,fidelity,instance_train_auc,instance_test_auc,global_train_auc,global_test_auc,instance_test_auc_score,global_test_auc_score";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.e_shift,
            self.seed,
            self.fidelity,
            self.instance_train_auc,
            self.instance_test_auc,
            self.global_train_auc,
            self.global_test_auc,
            self.instance_test_auc_score,
            self.global_test_auc_score
        )
    }
}

#[derive(Debug, Clone)]
pub struct ToyGrid {
    pub kind: ToyKind,
    pub e_s: f64,
    pub e_shifts: Vec<f64>,
    pub n_per_class: usize,
    pub seeds: Vec<u64>,
    pub setup: TrainSetup,
    /// skip training, only fidelities
    pub fidelity_only: bool,
}

impl ToyGrid {
    pub fn table1() -> Self {
        ToyGrid {
            kind: ToyKind::Pure,
            e_s: 0.4,
            e_shifts: vec![1.5, 2.0, 2.5, 3.0, 3.5, 4.0],
            n_per_class: 200,
            seeds: (1..=5).collect(),
            setup: TrainSetup::new(Mode::Global, 1),
            fidelity_only: false,
        }
    }

    pub fn table2() -> Self {
        ToyGrid {
            kind: ToyKind::Mixed,
            e_s: 0.2,
            e_shifts: vec![0.25, 0.26, 0.27, 0.28, 0.29, 0.3],
            ..ToyGrid::table1()
        }
    }
}

/// One training cell: instance and global (one batch per class) on the same data.
pub fn toy_cell(grid: &ToyGrid, e_shift: f64, seed: u64) -> Result<ToyRow> {
    let p = ToyParams {
        e_s: grid.e_s,
        e_shift,
        n_per_class: grid.n_per_class,
    };
    let train_ds = toy_dataset(grid.kind, &p, seed)?;
    let fidelity = class_global_fidelity(&train_ds)?;
    if grid.fidelity_only {
        return Ok(ToyRow {
            e_shift,
            seed,
            fidelity,
            instance_train_auc: f64::NAN,
            instance_test_auc: f64::NAN,
            global_train_auc: f64::NAN,
            global_test_auc: f64::NAN,
            instance_test_auc_score: f64::NAN,
            global_test_auc_score: f64::NAN,
        });
    }
    let test_ds = toy_dataset(grid.kind, &p, seed + TEST_SEED_OFFSET)?;
    let mut setup = grid.setup.clone();
    setup.seed = seed;
    setup.batches = 1;
    setup.mode = Mode::Instance;
    let inst = train_and_evaluate(&train_ds, &test_ds, &setup)?;
    setup.mode = Mode::Global;
    let glob = train_and_evaluate(&train_ds, &test_ds, &setup)?;
    Ok(ToyRow {
        e_shift,
        seed,
        fidelity,
        instance_train_auc: inst.train_auc,
        instance_test_auc: inst.test_auc,
        global_train_auc: glob.train_auc,
        global_test_auc: glob.test_auc,
        instance_test_auc_score: inst.test_auc_score,
        global_test_auc_score: glob.test_auc_score,
    })
}

pub fn toy_grid(grid: &ToyGrid) -> Result<Vec<ToyRow>> {
    let mut rows = Vec::new();
    for &e in &grid.e_shifts {
        for &s in &grid.seeds {
            let row = toy_cell(grid, e, s)?;
            log::info!(
                "e_shift {e} seed {s}: fidelity {:.4} test AUC {:.3}/{:.3}",
                row.fidelity,
                row.instance_test_auc,
                row.global_test_auc
            );
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Per-e_shift means, in grid order.
pub fn toy_summary(rows: &[ToyRow]) -> Vec<ToyRow> {
    let mut out: Vec<ToyRow> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    for r in rows {
        match out.iter().position(|o| o.e_shift == r.e_shift) {
            Some(i) => {
                let o = &mut out[i];
                o.fidelity += r.fidelity;
                o.instance_train_auc += r.instance_train_auc;
                o.instance_test_auc += r.instance_test_auc;
                o.global_train_auc += r.global_train_auc;
                o.global_test_auc += r.global_test_auc;
                o.instance_test_auc_score += r.instance_test_auc_score;
                o.global_test_auc_score += r.global_test_auc_score;
                counts[i] += 1.0;
            }
            None => {
                out.push(ToyRow { seed: 0, ..r.clone() });
                counts.push(1.0);
            }
        }
    }
    for (o, n) in out.iter_mut().zip(counts) {
        o.fidelity /= n;
        o.instance_train_auc /= n;
        o.instance_test_auc /= n;
        o.global_train_auc /= n;
        o.global_test_auc /= n;
        o.instance_test_auc_score /= n;
        o.global_test_auc_score /= n;
    }
    out
}

/// Per-qubit Pauli-Z expectations of every toy sample, for feature histograms.
pub fn toy_features(kind: ToyKind, p: &ToyParams, seed: u64) -> Result<Vec<(usize, u8, Vec<f64>)>> {
    let ds = toy_dataset(kind, p, seed)?;
    let n = ds.n_qubits().ok_or(Error::EmptyDataset)?;
    ds.labeled_densities()?
        .iter()
        .enumerate()
        .map(|(i, (rho, y))| {
            let z = (0..n)
                .map(|q| pauli_z_expectation(rho, &Observable::z(q, n)?))
                .collect::<Result<Vec<_>>>()?;
            Ok((i, *y, z))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsPoint {
    pub batch_size: usize,
    pub class: u8,
    pub random: PrivacyReport,
    pub smart: Option<PrivacyReport>,
}

pub fn class_states(ds: &LabeledDataset, class: u8) -> Result<Vec<DensityMatrix>> {
    Ok(ds.labeled_densities()?.into_iter().filter(|d| d.1 == class).map(|d| d.0).collect())
}

/// ε for one class under random batching and, optionally, smart batching of matching average size.
pub fn eps_point(states: &[DensityMatrix], class: u8, batch_size: usize, with_smart: bool, seed: u64) -> Result<EpsPoint> {
    let scheme = Scheme::Random(batch_size);
    let s = membership_projections(states, &scheme, seed)?;
    let random = epsilon_from_samples(&s, DEFAULT_DELTA, DEFAULT_N_EVAL, seed ^ 0xe95, &scheme.describe())?;
    let smart = if with_smart {
        let n_batches = (states.len() / batch_size).max(1);
        let scheme = Scheme::Smart(smart_batches(states, class, n_batches, seed)?);
        let s = membership_projections(states, &scheme, seed)?;
        Some(epsilon_from_samples(
            &s,
            DEFAULT_DELTA,
            DEFAULT_N_EVAL,
            seed ^ 0xe95,
            &scheme.describe(),
        )?)
    } else {
        None
    };
    Ok(EpsPoint {
        batch_size,
        class,
        random,
        smart,
    })
}

pub fn snp_dataset(n_features: usize, n_cases: usize, n_controls: usize, seed: u64) -> Result<LabeledDataset> {
    let p = SnpModelParams {
        n_features,
        n_cases,
        n_controls,
        ..SnpModelParams::default()
    };
    gen_snp(&p, seed)
}
