//! Command-line front end: data generation, training, privacy audits, the
//! client/server protocol and the desk-scale reproduction grids.
//!
//! Exit codes: 0 success, 2 usage, 3 domain error, 4 transport error.

pub mod experiments;
pub mod manifest;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use qmix_core::batching::{batch_by_class, build_global_states, write_batches_csv, Strategy};
use qmix_core::classifier::{LossKind, LossSpec, DEFAULT_SIGMOID_K};
use qmix_core::datagen::{class_global_fidelity, load_dataset, save_dataset, LabeledDataset, ToyParams};
use qmix_core::optim::{Cobyla, NelderMead, Optimizer};
use qmix_core::privacy::{
    composition_count_estimate, composition_count_exact, composition_mixture, epsilon_from_samples, genotype_basis,
    loss_update_correlation, membership_projections, random_composition, Scheme, DEFAULT_DELTA, DEFAULT_N_EVAL,
};
use qmix_core::protocol::{
    client_send, client_write_offline, server_run, ClientConfig, ProtocolError, ServerConfig, TimeoutPolicy, TrainRequest,
};
use qmix_core::{derived_rng, Error};

use experiments::{Mode, ToyGrid, ToyKind, TrainSetup};
use manifest::{manifest_path, unix_now, RunManifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("replay mismatch: {0}")]
    Replay(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Protocol(e) if e.is_transport() => 4,
            _ => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "qmix",
    version,
    about = "Train quantum classifiers on batch-mixed global states and audit their privacy"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset file
    Gen(GenArgs),
    /// Train on a dataset in instance or global mode
    Train(TrainArgs),
    /// Privacy audits
    #[command(subcommand)]
    Audit(AuditCommand),
    /// Run one side of the client/server protocol
    #[command(subcommand)]
    Protocol(ProtocolCommand),
    /// Desk-scale experiment grids
    #[command(subcommand)]
    Repro(ReproCommand),
    /// Re-execute the command recorded in a run manifest
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenKind {
    ToyPure,
    ToyMixed,
    Snp,
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(value_enum)]
    pub kind: GenKind,
    #[arg(long, default_value_t = 0.4)]
    pub e_s: f64,
    #[arg(long, default_value_t = 4.0)]
    pub e_shift: f64,
    /// samples per class (toy datasets)
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 128)]
    pub snps: usize,
    #[arg(long, default_value_t = 465)]
    pub cases: usize,
    #[arg(long, default_value_t = 465)]
    pub controls: usize,
    #[arg(long, env = "QMIX_SEED", default_value_t = 1)]
    pub seed: u64,
    /// also write the genotype matrix as CSV (snp only)
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossArg {
    L1Rescaled,
    L1Sigmoid,
    L2,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerArg {
    Cobyla,
    NelderMead,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchingArg {
    Random,
    Smart,
}

impl From<BatchingArg> for Strategy {
    fn from(b: BatchingArg) -> Self {
        match b {
            BatchingArg::Random => Strategy::Random,
            BatchingArg::Smart => Strategy::Smart,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Instance,
    Global,
}

/// Model and optimizer flags shared by every command that trains.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "l1-rescaled")]
    pub loss: LossArg,
    /// sigmoid steepness for l1-sigmoid
    #[arg(long, default_value_t = DEFAULT_SIGMOID_K)]
    pub k: f64,
    /// ansatz repetitions
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 200)]
    pub maxiter: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, value_enum, default_value = "cobyla")]
    pub optimizer: OptimizerArg,
}

impl ModelArgs {
    pub fn loss_spec(&self) -> Result<LossSpec, CliError> {
        let kind = match self.loss {
            LossArg::L1Rescaled => LossKind::L1Rescaled,
            LossArg::L1Sigmoid => LossKind::L1Sigmoid,
            LossArg::L2 => LossKind::L2,
        };
        Ok(LossSpec::new(kind, self.k)?)
    }

    pub fn setup(&self, mode: Mode, seed: u64) -> Result<TrainSetup, CliError> {
        let mut s = TrainSetup::new(mode, seed);
        s.loss = self.loss_spec()?;
        s.reps = self.layers;
        s.maxiter_per_epoch = self.maxiter;
        s.max_epochs = self.epochs;
        s.patience = self.patience;
        s.optimizer = match self.optimizer {
            OptimizerArg::Cobyla => Optimizer::Cobyla(Cobyla::default()),
            OptimizerArg::NelderMead => Optimizer::NelderMead(NelderMead::default()),
        };
        Ok(s)
    }

    pub fn request(&self, n_qubits: usize, seed: u64) -> Result<TrainRequest, CliError> {
        Ok(TrainRequest {
            n_qubits,
            config: self.setup(Mode::Global, seed)?.config(n_qubits),
        })
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// separate test set; otherwise a stratified split of the input
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    pub test_fraction: f64,
    #[arg(long, value_enum, default_value = "global")]
    pub mode: ModeArg,
    /// batches per class (global mode)
    #[arg(long, default_value_t = 1)]
    pub batches: usize,
    #[arg(long, value_enum, default_value = "random")]
    pub batching: BatchingArg,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, env = "QMIX_SEED", default_value_t = 1)]
    pub seed: u64,
    /// write the batch assignment as CSV
    #[arg(long)]
    pub batches_csv: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum AuditCommand {
    /// Membership-inference ε from projection statistics
    Epsilon(EpsilonArgs),
    /// Composition count estimate, optionally checked against exhaustive enumeration
    Composition(CompositionArgs),
    /// Instance vs global loss-update correlation under random circuits
    Correlation(CorrelationArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassArg {
    Controls,
    Cases,
    Both,
}

#[derive(Debug, Args, Serialize)]
pub struct EpsilonArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    pub delta: f64,
    #[arg(long, default_value_t = DEFAULT_N_EVAL)]
    pub n_eval: usize,
    #[arg(long, value_enum, default_value = "random")]
    pub scheme: BatchingArg,
    #[arg(long, value_enum, default_value = "both")]
    pub class: ClassArg,
    #[arg(long, env = "QMIX_SEED", default_value_t = 1)]
    pub seed: u64,
    /// projection samples as CSV; the class label is appended to the file stem
    #[arg(long)]
    pub samples_csv: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CompositionArgs {
    #[arg(long)]
    pub n_snp: u32,
    #[arg(long, default_value_t = 3)]
    pub alphabet: u8,
    /// batch size N_i
    #[arg(long)]
    pub batch: usize,
    /// constraint count; defaults to the SNP count
    #[arg(long)]
    pub d: Option<u64>,
    /// enumerate compositions of a constructed instance
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[arg(long, env = "QMIX_SEED", default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CorrelationArgs {
    #[arg(long, value_enum, default_value = "l1-sigmoid")]
    pub loss: LossArg,
    #[arg(long, default_value_t = DEFAULT_SIGMOID_K)]
    pub k: f64,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 3)]
    pub qubits: usize,
    #[arg(long, default_value_t = 5)]
    pub depth: usize,
    #[arg(long, env = "QMIX_SEED", default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ProtocolCommand {
    Server(ServerArgs),
    Client(ClientArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ServerArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub bind: String,
    #[arg(long, default_value_t = 1)]
    pub clients: usize,
    /// seconds to wait for the next client
    #[arg(long, default_value_t = 600)]
    pub timeout: u64,
    /// train on whatever arrived when the wait times out
    #[arg(long)]
    pub proceed: bool,
    /// qubit count; when given the server's own training request is used
    #[arg(long)]
    pub qubits: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, env = "QMIX_SEED", default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ClientArgs {
    #[arg(long, default_value_t = 1)]
    pub id: u32,
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub server: String,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub batches: usize,
    #[arg(long, value_enum, default_value = "random")]
    pub batching: BatchingArg,
    #[arg(long, default_value_t = 3)]
    pub retries: usize,
    #[arg(long, default_value_t = 100)]
    pub backoff_ms: u64,
    /// write `.qgs` files into the --out directory instead of connecting
    #[arg(long)]
    pub offline: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, env = "QMIX_SEED", default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ReproCommand {
    /// Pure-state toy grid
    Table1(ToyGridArgs),
    /// Mixed-state toy grid
    Table2(ToyGridArgs),
    /// Per-qubit Z expectations of toy samples
    Fig3Toy(Fig3Args),
    /// ε against batch size on synthetic SNP data
    EpsCurve(EpsCurveArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ToyGridArgs {
    /// comma-separated seeds
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5])]
    pub seeds: Vec<u64>,
    /// comma-separated e_shift values; defaults to the table grid
    #[arg(long, value_delimiter = ',')]
    pub e_shift: Vec<f64>,
    #[arg(long)]
    pub e_s: Option<f64>,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long)]
    pub fidelity_only: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct Fig3Args {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, env = "QMIX_SEED", default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EpsCurveArgs {
    #[arg(long, default_value_t = 128)]
    pub snps: usize,
    #[arg(long, default_value_t = 465)]
    pub cases: usize,
    #[arg(long, default_value_t = 465)]
    pub controls: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16, 32, 46, 65, 93])]
    pub batch_sizes: Vec<usize>,
    #[arg(long, value_enum, default_value = "cases")]
    pub class: ClassArg,
    /// skip the spectral-clustering column
    #[arg(long)]
    pub no_smart: bool,
    #[arg(long, env = "QMIX_SEED", default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// compare regenerated outputs byte for byte with the recorded ones
    #[arg(long)]
    pub verify: bool,
}

/// What a command hands back for its manifest.
struct Ran {
    params: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    /// where the manifest goes; `None` for replay
    manifest: Option<PathBuf>,
}

impl Ran {
    fn new<P: Serialize>(p: &P, seeds: Vec<u64>, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>, out: &Path) -> Result<Self, CliError> {
        Ok(Ran {
            params: serde_json::to_value(p)?,
            seeds,
            inputs,
            outputs,
            manifest: Some(manifest_path(out)),
        })
    }
}

/// Parses `argv` (program name first), runs it and returns the exit code.
pub fn run_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let rest: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, rest) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli, argv: Vec<String>) -> Result<(), CliError> {
    let started = unix_now();
    let clock = Instant::now();
    let (name, ran) = match cli.command {
        Command::Gen(a) => ("gen", cmd_gen(&a)?),
        Command::Train(a) => ("train", cmd_train(&a)?),
        Command::Audit(AuditCommand::Epsilon(a)) => ("audit epsilon", cmd_epsilon(&a)?),
        Command::Audit(AuditCommand::Composition(a)) => ("audit composition", cmd_composition(&a)?),
        Command::Audit(AuditCommand::Correlation(a)) => ("audit correlation", cmd_correlation(&a)?),
        Command::Protocol(ProtocolCommand::Server(a)) => ("protocol server", cmd_server(&a)?),
        Command::Protocol(ProtocolCommand::Client(a)) => ("protocol client", cmd_client(&a)?),
        Command::Repro(ReproCommand::Table1(a)) => ("repro table1", cmd_toy_grid(&a, ToyGrid::table1(), "table1")?),
        Command::Repro(ReproCommand::Table2(a)) => ("repro table2", cmd_toy_grid(&a, ToyGrid::table2(), "table2")?),
        Command::Repro(ReproCommand::Fig3Toy(a)) => ("repro fig3-toy", cmd_fig3(&a)?),
        Command::Repro(ReproCommand::EpsCurve(a)) => ("repro eps-curve", cmd_eps_curve(&a)?),
        Command::Replay(a) => ("replay", cmd_replay(&a)?),
    };
    if let Some(path) = &ran.manifest {
        RunManifest {
            command: name.to_string(),
            argv,
            params: ran.params,
            seeds: ran.seeds,
            inputs: ran.inputs,
            outputs: ran.outputs,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: started,
            wall_clock_secs: clock.elapsed().as_secs_f64(),
        }
        .write(path)?;
        log::info!("manifest written to {}", path.display());
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, v)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn print_json<T: Serialize>(v: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn cmd_gen(a: &GenArgs) -> Result<Ran, CliError> {
    let toy = ToyParams {
        e_s: a.e_s,
        e_shift: a.e_shift,
        n_per_class: a.n,
    };
    let ds = match a.kind {
        GenKind::ToyPure => experiments::toy_dataset(ToyKind::Pure, &toy, a.seed)?,
        GenKind::ToyMixed => experiments::toy_dataset(ToyKind::Mixed, &toy, a.seed)?,
        GenKind::Snp => experiments::snp_dataset(a.snps, a.cases, a.controls, a.seed)?,
    };
    save_dataset(&a.out, &ds)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(csv) = &a.csv {
        ds.write_genotype_csv(BufWriter::new(File::create(csv)?))?;
        outputs.push(csv.clone());
    }
    let (neg, pos) = ds.class_counts();
    let mut summary = serde_json::json!({ "records": ds.len(), "controls": neg, "cases": pos, "n_qubits": ds.n_qubits() });
    if !matches!(a.kind, GenKind::Snp) {
        summary["class_global_fidelity"] = class_global_fidelity(&ds)?.into();
    }
    print_json(&summary)?;
    Ran::new(a, vec![a.seed], vec![], outputs, &a.out)
}

fn load_split(a: &TrainArgs) -> Result<(LabeledDataset, LabeledDataset), CliError> {
    let ds = load_dataset(&a.input)?;
    match &a.test {
        Some(t) => Ok((ds, load_dataset(t)?)),
        None => Ok(ds.split_stratified(a.test_fraction, a.seed)?),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<Ran, CliError> {
    let (train_ds, test_ds) = load_split(a)?;
    let mode = match a.mode {
        ModeArg::Instance => Mode::Instance,
        ModeArg::Global => Mode::Global,
    };
    let mut setup = a.model.setup(mode, a.seed)?;
    setup.batches = a.batches;
    setup.batching = a.batching.into();
    let metrics = experiments::train_and_evaluate(&train_ds, &test_ds, &setup)?;
    write_json(&a.out, &metrics)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(path) = &a.batches_csv {
        let states = train_ds.densities()?;
        let batches = batch_by_class(&states, &train_ds.labels(), setup.batching, setup.batches, setup.seed)?;
        write_batches_csv(BufWriter::new(File::create(path)?), &batches)?;
        outputs.push(path.clone());
    }
    print_json(&metrics)?;
    let mut inputs = vec![a.input.clone()];
    inputs.extend(a.test.clone());
    Ran::new(a, vec![a.seed], inputs, outputs, &a.out)
}

fn classes(c: ClassArg) -> Vec<u8> {
    match c {
        ClassArg::Controls => vec![0],
        ClassArg::Cases => vec![1],
        ClassArg::Both => vec![0, 1],
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}_{suffix}{ext}"))
}

fn cmd_epsilon(a: &EpsilonArgs) -> Result<Ran, CliError> {
    let ds = load_dataset(&a.input)?;
    let mut reports = Vec::new();
    let mut outputs = vec![a.out.clone()];
    for class in classes(a.class) {
        let states = experiments::class_states(&ds, class)?;
        let scheme = match a.scheme {
            BatchingArg::Random => Scheme::Random(a.batch_size),
            BatchingArg::Smart => {
                let n_batches = (states.len() / a.batch_size.max(1)).max(1);
                Scheme::Smart(qmix_core::batching::smart_batches(&states, class, n_batches, a.seed)?)
            }
        };
        let samples = membership_projections(&states, &scheme, a.seed)?;
        if let Some(csv) = &a.samples_csv {
            let path = with_suffix(csv, &format!("class{class}"));
            samples.write_csv(BufWriter::new(File::create(&path)?))?;
            outputs.push(path);
        }
        let report = epsilon_from_samples(&samples, a.delta, a.n_eval, a.seed, &scheme.describe())?;
        reports.push(serde_json::json!({ "class": class, "report": report }));
    }
    let out = serde_json::json!({ "batch_size": a.batch_size, "reports": reports });
    write_json(&a.out, &out)?;
    print_json(&out)?;
    Ran::new(a, vec![a.seed], vec![a.input.clone()], outputs, &a.out)
}

fn cmd_composition(a: &CompositionArgs) -> Result<Ran, CliError> {
    let n_state = (a.alphabet as u64)
        .checked_pow(a.n_snp)
        .ok_or_else(|| Error::Domain("alphabet^N_SNP overflows".into()))?;
    let d = a.d.unwrap_or(a.n_snp as u64);
    let estimate = composition_count_estimate(a.batch as u64, n_state, d)?;
    let mut out = serde_json::json!({ "estimate": estimate, "estimated_count": estimate.ln_b.exp() });
    if a.oracle {
        let basis = genotype_basis(a.alphabet, a.n_snp)?;
        let b = random_composition(basis.len(), a.batch, &mut derived_rng(a.seed, 0xc0de));
        let rho = composition_mixture(&basis, &b)?;
        let exact = composition_count_exact(&basis, a.batch, &rho, a.tol)?;
        let ratio = estimate.ln_b.exp() / exact as f64;
        out["oracle"] = serde_json::json!({ "composition": b, "exact_count": exact, "ratio": ratio, "within_factor_10": (0.1..=10.0).contains(&ratio) });
    }
    write_json(&a.out, &out)?;
    print_json(&out)?;
    Ran::new(a, vec![a.seed], vec![], vec![a.out.clone()], &a.out)
}

fn cmd_correlation(a: &CorrelationArgs) -> Result<Ran, CliError> {
    let model = ModelArgs {
        loss: a.loss,
        k: a.k,
        layers: 1,
        maxiter: 1,
        epochs: 1,
        patience: 1,
        optimizer: OptimizerArg::Cobyla,
    };
    let r = loss_update_correlation(a.batch, a.trials, &model.loss_spec()?, a.qubits, a.depth, a.seed)?;
    write_json(&a.out, &r)?;
    print_json(&r)?;
    Ran::new(a, vec![a.seed], vec![], vec![a.out.clone()], &a.out)
}

fn cmd_server(a: &ServerArgs) -> Result<Ran, CliError> {
    let request = a.qubits.map(|n| a.model.request(n, a.seed)).transpose()?;
    let mut cfg = ServerConfig::new(a.clients, request);
    cfg.client_timeout = Duration::from_secs(a.timeout);
    cfg.on_timeout = if a.proceed { TimeoutPolicy::Proceed } else { TimeoutPolicy::Abort };
    let result = server_run(&a.bind, &cfg)?;
    write_json(&a.out, &result)?;
    print_json(&result)?;
    Ran::new(a, vec![a.seed], vec![], vec![a.out.clone()], &a.out)
}

fn cmd_client(a: &ClientArgs) -> Result<Ran, CliError> {
    let ds = load_dataset(&a.input)?;
    let states = ds.densities()?;
    let n_qubits = ds.n_qubits().ok_or(Error::EmptyDataset)?;
    let strategy: Strategy = a.batching.into();
    let batches = batch_by_class(&states, &ds.labels(), strategy, a.batches, a.seed)?;
    let globals = build_global_states(&batches, &states, strategy.weight_mode())?;
    if a.offline {
        let t = client_write_offline(a.id, &a.out, &globals)?;
        print_json(&t)?;
        return Ran::new(a, vec![a.seed], vec![a.input.clone()], t.files, &a.out);
    }
    let mut cfg = ClientConfig::new(a.id, a.server.clone());
    cfg.retries = a.retries;
    cfg.backoff = Duration::from_millis(a.backoff_ms);
    cfg.request = Some(a.model.request(n_qubits, a.seed)?);
    let t = client_send(&cfg, &globals)?;
    write_json(&a.out, &t)?;
    print_json(&t)?;
    Ran::new(a, vec![a.seed], vec![a.input.clone()], vec![a.out.clone()], &a.out)
}

fn write_lines(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_toy_grid(a: &ToyGridArgs, mut grid: ToyGrid, name: &str) -> Result<Ran, CliError> {
    std::fs::create_dir_all(&a.out)?;
    grid.seeds = a.seeds.clone();
    if !a.e_shift.is_empty() {
        grid.e_shifts = a.e_shift.clone();
    }
    if let Some(e_s) = a.e_s {
        grid.e_s = e_s;
    }
    grid.n_per_class = a.n;
    grid.fidelity_only = a.fidelity_only;
    grid.setup = a.model.setup(Mode::Global, 0)?;
    let rows = experiments::toy_grid(&grid)?;
    let per_seed = a.out.join(format!("{name}.csv"));
    let summary = a.out.join(format!("{name}_summary.csv"));
    write_lines(&per_seed, experiments::ToyRow::CSV_HEADER, rows.iter().map(|r| r.csv()))?;
    let means = experiments::toy_summary(&rows);
    write_lines(&summary, experiments::ToyRow::CSV_HEADER, means.iter().map(|r| r.csv()))?;
    for m in &means {
        println!(
            "e_shift {:<5} fidelity {:.3}  instance AUC {:.3}/{:.3}  global AUC {:.3}/{:.3}",
            m.e_shift, m.fidelity, m.instance_train_auc, m.instance_test_auc, m.global_train_auc, m.global_test_auc
        );
    }
    Ran::new(a, a.seeds.clone(), vec![], vec![per_seed, summary], &a.out)
}

fn cmd_fig3(a: &Fig3Args) -> Result<Ran, CliError> {
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("fig3_toy.csv");
    let mut rows = Vec::new();
    for (kind, e_s, shifts, tag) in [
        (ToyKind::Pure, 0.4, [1.5, 4.0], "toy-pure"),
        (ToyKind::Mixed, 0.2, [0.25, 0.3], "toy-mixed"),
    ] {
        for e_shift in shifts {
            let p = ToyParams {
                e_s,
                e_shift,
                n_per_class: a.n,
            };
            for (i, y, z) in experiments::toy_features(kind, &p, a.seed)? {
                rows.push(format!("{tag},{e_shift},{i},{y},{},{}", z[0], z[1]));
            }
        }
    }
    write_lines(&path, "dataset,e_shift,sample,label,z_q0,z_q1", rows)?;
    Ran::new(a, vec![a.seed], vec![], vec![path], &a.out)
}

fn fmt_eps(v: Option<f64>) -> String {
    v.map_or_else(String::new, |e| e.to_string())
}

fn cmd_eps_curve(a: &EpsCurveArgs) -> Result<Ran, CliError> {
    std::fs::create_dir_all(&a.out)?;
    let ds = experiments::snp_dataset(a.snps, a.cases, a.controls, a.seed)?;
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for class in classes(a.class) {
        let states = experiments::class_states(&ds, class)?;
        for &n in &a.batch_sizes {
            let p = experiments::eps_point(&states, class, n, !a.no_smart, a.seed)?;
            println!(
                "class {class} batch size {n}: eps random {:.3} smart {}",
                p.random.epsilon,
                fmt_eps(p.smart.as_ref().map(|s| s.epsilon))
            );
            rows.push(format!(
                "{n},{class},{},{}",
                p.random.epsilon,
                fmt_eps(p.smart.as_ref().map(|s| s.epsilon))
            ));
            points.push(p);
        }
    }
    let csv = a.out.join("eps_curve.csv");
    let json = a.out.join("eps_curve.json");
    write_lines(&csv, "batch_size,class,eps_random,eps_smart", rows)?;
    write_json(&json, &points)?;
    Ran::new(a, vec![a.seed], vec![], vec![csv, json], &a.out)
}

fn cmd_replay(a: &ReplayArgs) -> Result<Ran, CliError> {
    let m = RunManifest::read(&a.manifest)?;
    if m.command == "replay" {
        return Err(CliError::Usage("manifest records a replay".into()));
    }
    let before: BTreeMap<PathBuf, Vec<u8>> = if a.verify {
        m.outputs
            .iter()
            .map(|p| Ok((p.clone(), std::fs::read(p)?)))
            .collect::<Result<_, std::io::Error>>()?
    } else {
        BTreeMap::new()
    };
    let mut argv = vec!["qmix".to_string()];
    argv.extend(m.argv.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::Usage(e.to_string()))?;
    execute(cli, m.argv.clone())?;
    for (path, old) in &before {
        if std::fs::read(path)? != *old {
            return Err(CliError::Replay(format!("{} differs from the recorded run", path.display())));
        }
    }
    if a.verify {
        println!("replay reproduced {} outputs byte for byte", before.len());
    }
    Ok(Ran {
        params: serde_json::to_value(a)?,
        seeds: m.seeds,
        inputs: vec![a.manifest.clone()],
        outputs: m.outputs,
        manifest: None,
    })
}
