//! Seeded synthetic datasets: two-qubit toy data and a case/control SNP model.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::ansatz::{apply_single_left, ry};
use crate::error::{Error, Result};
use crate::protocol::{decode_complex_entries, encode_complex_entries};
use crate::qcore::{
    amplitude_encode, fidelity, mix, mix_uniform, pure_to_density, qubits_for_len, random_density_hs, CMatrix, DensityMatrix, PureState,
    Tolerances, C64,
};
use crate::{rng_from_seed, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadKind {
    Pure,
    Density,
    Genotype,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Pure(PureState),
    Density(DensityMatrix),
    Genotype(Vec<u8>),
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Pure(_) => PayloadKind::Pure,
            Payload::Density(_) => PayloadKind::Density,
            Payload::Genotype(_) => PayloadKind::Genotype,
        }
    }

    /// Length of the state vector, the matrix side, or the genotype vector.
    fn width(&self) -> usize {
        match self {
            Payload::Pure(p) => p.dim(),
            Payload::Density(d) => d.dim(),
            Payload::Genotype(g) => g.len(),
        }
    }

    pub fn to_density(&self) -> Result<DensityMatrix> {
        match self {
            Payload::Pure(p) => Ok(pure_to_density(p)),
            Payload::Density(d) => Ok(d.clone()),
            Payload::Genotype(g) => Ok(pure_to_density(&encode_genotype(g)?)),
        }
    }
}

/// Amplitude encoding of a genotype vector on the smallest register that holds it.
pub fn encode_genotype(g: &[u8]) -> Result<PureState> {
    let x: Vec<f64> = g.iter().map(|&v| f64::from(v)).collect();
    amplitude_encode(&x, qubits_for_len(x.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub payload: Payload,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub params: serde_json::Value,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    records: Vec<Record>,
    pub meta: DatasetMeta,
}

impl LabeledDataset {
    pub fn new(records: Vec<Record>, meta: DatasetMeta) -> Result<Self> {
        if let Some(first) = records.first() {
            let (kind, width) = (first.payload.kind(), first.payload.width());
            for (i, r) in records.iter().enumerate() {
                if r.label > 1 {
                    return Err(Error::Param(format!("record {i} has label {}", r.label)));
                }
                if r.payload.kind() != kind || r.payload.width() != width {
                    return Err(Error::Param(format!("record {i} differs in payload kind or size")));
                }
            }
        }
        Ok(LabeledDataset { records, meta })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn payload_kind(&self) -> Option<PayloadKind> {
        self.records.first().map(|r| r.payload.kind())
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// (negatives, positives)
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.records.iter().filter(|r| r.label == 1).count();
        (self.records.len() - pos, pos)
    }

    pub fn densities(&self) -> Result<Vec<DensityMatrix>> {
        self.records.iter().map(|r| r.payload.to_density()).collect()
    }

    /// Density matrices paired with labels, the input shape of the instance loss.
    pub fn labeled_densities(&self) -> Result<Vec<(DensityMatrix, u8)>> {
        self.records.iter().map(|r| Ok((r.payload.to_density()?, r.label))).collect()
    }

    pub fn n_qubits(&self) -> Option<usize> {
        self.records.first().map(|r| match &r.payload {
            Payload::Pure(p) => p.n_qubits(),
            Payload::Density(d) => d.n_qubits(),
            Payload::Genotype(g) => qubits_for_len(g.len()),
        })
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Per-class shuffle, then `round(test_fraction · n_class)` of each class go to the test side.
    pub fn split_stratified(&self, test_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Param(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let mut rng = rng_from_seed(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for label in [0u8, 1] {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.records[i].label == label).collect();
            idx.shuffle(&mut rng);
            let n_test = (test_fraction * idx.len() as f64).round() as usize;
            test.extend_from_slice(&idx[..n_test]);
            train.extend_from_slice(&idx[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }

    /// CSV with a `label` column followed by one column per SNP.
    pub fn write_genotype_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let Some(Payload::Genotype(first)) = self.records.first().map(|r| &r.payload) else {
            return Err(Error::Param("dataset does not hold genotypes".into()));
        };
        let snp_ids: Vec<String> = match self.meta.params.get("selected_snps").and_then(|v| v.as_array()) {
            Some(ids) => ids.iter().map(|v| format!("snp_{v}")).collect(),
            None => (0..first.len()).map(|i| format!("snp_{i}")).collect(),
        };
        writeln!(w, "label,{}", snp_ids.join(","))?;
        for r in &self.records {
            if let Payload::Genotype(g) = &r.payload {
                let row: Vec<String> = g.iter().map(u8::to_string).collect();
                writeln!(w, "{},{}", r.label, row.join(","))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub e_s: f64,
    pub e_shift: f64,
    pub n_per_class: usize,
}

impl ToyParams {
    fn validate(&self, mixed: bool) -> Result<()> {
        if !(self.e_s >= 0.0 && self.e_shift >= 0.0 && self.e_s.is_finite() && self.e_shift.is_finite()) {
            return Err(Error::Param(format!(
                "e_s = {} and e_shift = {} must be finite and non-negative",
                self.e_s, self.e_shift
            )));
        }
        if mixed && self.e_s + self.e_shift > 1.0 + 1e-12 {
            return Err(Error::Param(format!(
                "mixing weights overflow: e_s + e_shift = {} > 1",
                self.e_s + self.e_shift
            )));
        }
        if self.n_per_class == 0 {
            return Err(Error::Param("n_per_class must be positive".into()));
        }
        Ok(())
    }

    fn meta(&self, generator: &str, seed: u64) -> DatasetMeta {
        DatasetMeta {
            generator: generator.into(),
            params: serde_json::to_value(self).expect("plain struct"),
            seed,
        }
    }
}

fn uniform_sym<R: Rng + ?Sized>(rng: &mut R, e: f64) -> f64 {
    e * (2.0 * rng.random::<f64>() - 1.0)
}

/// The two initial states of a class: |00⟩, |01⟩ for positives, (|00⟩ ± |01⟩)/√2 for negatives.
fn initial_state<R: Rng + ?Sized>(label: u8, rng: &mut R) -> Vec<f64> {
    let pick = rng.random_bool(0.5);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    match (label, pick) {
        (1, false) => vec![1.0, 0.0, 0.0, 0.0],
        (1, true) => vec![0.0, 1.0, 0.0, 0.0],
        (_, false) => vec![h, h, 0.0, 0.0],
        (_, true) => vec![h, -h, 0.0, 0.0],
    }
}

fn rotate(v: Vec<f64>, qubit: usize, theta: f64) -> Vec<f64> {
    let mut m = CMatrix::from_iterator(v.len(), 1, v.into_iter().map(|x| C64::new(x, 0.0)));
    apply_single_left(&mut m, 2, qubit, &ry(theta));
    m.iter().map(|c| c.re).collect()
}

/// Noise rotation acts on qubit 1, the qubit that tells the initial states apart;
/// the class shift of positives acts on qubit 0.
pub const TOY_NOISE_QUBIT: usize = 1;
pub const TOY_SHIFT_QUBIT: usize = 0;

pub fn gen_toy_pure(p: &ToyParams, seed: u64) -> Result<LabeledDataset> {
    p.validate(false)?;
    let mut rng = rng_from_seed(seed);
    let mut records = Vec::with_capacity(2 * p.n_per_class);
    for label in [0u8, 1] {
        for _ in 0..p.n_per_class {
            let mut v = initial_state(label, &mut rng);
            v = rotate(v, TOY_NOISE_QUBIT, uniform_sym(&mut rng, p.e_s));
            if label == 1 {
                v = rotate(v, TOY_SHIFT_QUBIT, uniform_sym(&mut rng, p.e_shift));
            }
            let psi = PureState::normalized(v.into_iter().map(|x| C64::new(x, 0.0)).collect())?;
            records.push(Record {
                payload: Payload::Pure(psi),
                label,
            });
        }
    }
    LabeledDataset::new(records, p.meta("toy-pure", seed))
}

pub fn gen_toy_mixed(p: &ToyParams, seed: u64) -> Result<LabeledDataset> {
    p.validate(true)?;
    let mut rng = rng_from_seed(seed);
    let shift = DensityMatrix::from_diagonal(&[0.0, 0.0, 0.5, 0.5])?;
    let mut records = Vec::with_capacity(2 * p.n_per_class);
    for label in [0u8, 1] {
        for _ in 0..p.n_per_class {
            let v = initial_state(label, &mut rng);
            let ini = pure_to_density(&PureState::normalized(v.into_iter().map(|x| C64::new(x, 0.0)).collect())?);
            let noise = random_density_hs(4, &mut rng)?;
            let rho = if label == 1 {
                let w0 = (1.0 - p.e_s - p.e_shift).max(0.0);
                mix(&[ini, noise, shift.clone()], &[w0, p.e_s, 1.0 - w0 - p.e_s])?
            } else {
                mix(&[ini, noise], &[1.0 - p.e_s, p.e_s])?
            };
            records.push(Record {
                payload: Payload::Density(rho),
                label,
            });
        }
    }
    LabeledDataset::new(records, p.meta("toy-mixed", seed))
}

/// Two-locus trait with odds `alpha · theta1^g1 · theta2^g2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trait {
    pub alpha: f64,
    pub theta1: f64,
    pub theta2: f64,
}

impl Trait {
    pub fn case_probability(&self, g1: u8, g2: u8) -> f64 {
        let odds = self.alpha * self.theta1.powi(i32::from(g1)) * self.theta2.powi(i32::from(g2));
        odds / (1.0 + odds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnpModelParams {
    /// size of the simulated SNP pool
    pub n_snps: usize,
    /// features kept after variance selection
    pub n_features: usize,
    /// pool indices of the causal SNPs; trait t uses entries 2t and 2t+1
    pub causal: [usize; 6],
    pub traits: [Trait; 3],
    /// heterozygote relative risks used to enrich risk alleles in the oversampled half
    pub relative_risks: [f64; 6],
    pub n_cases: usize,
    pub n_controls: usize,
    /// individuals simulated per round, half of them risk-enriched
    pub round_size: usize,
}

impl Default for SnpModelParams {
    fn default() -> Self {
        SnpModelParams {
            n_snps: 1000,
            n_features: 128,
            causal: [0, 1, 2, 3, 4, 5],
            traits: [
                Trait {
                    alpha: 0.006,
                    theta1: 5.0,
                    theta2: 5.0,
                },
                Trait {
                    alpha: 0.004,
                    theta1: 6.0,
                    theta2: 4.0,
                },
                Trait {
                    alpha: 0.003,
                    theta1: 7.0,
                    theta2: 7.0,
                },
            ],
            relative_risks: [1.5, 1.2, 1.6, 2.0, 1.8, 1.3],
            n_cases: 465,
            n_controls: 465,
            round_size: 1000,
        }
    }
}

const MAX_SNP_ROUNDS: usize = 1000;
const MAX_ENRICHED_MAF: f64 = 0.95;

impl SnpModelParams {
    fn validate(&self) -> Result<()> {
        let mut sorted = self.causal;
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) || sorted[5] >= self.n_snps {
            return Err(Error::Param(format!(
                "causal indices {:?} must be distinct and below {}",
                self.causal, self.n_snps
            )));
        }
        if self.n_features < 6 || self.n_features > self.n_snps {
            return Err(Error::Param(format!(
                "n_features {} must lie in [6, {}]",
                self.n_features, self.n_snps
            )));
        }
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !self
            .traits
            .iter()
            .all(|t| positive(t.alpha) && positive(t.theta1) && positive(t.theta2))
            || !self.relative_risks.iter().all(|&r| positive(r))
        {
            return Err(Error::Param("trait parameters and relative risks must be positive".into()));
        }
        if self.n_cases == 0 || self.n_controls == 0 || self.round_size < 2 {
            return Err(Error::Param("case/control targets and round size must be positive".into()));
        }
        Ok(())
    }

    fn label(&self, g: &[u8]) -> impl Fn(&mut SeededRng) -> u8 + '_ {
        let probs: Vec<f64> = (0..3)
            .map(|t| self.traits[t].case_probability(g[self.causal[2 * t]], g[self.causal[2 * t + 1]]))
            .collect();
        move |rng: &mut SeededRng| u8::from(probs.iter().any(|&p| rng.random_bool(p)))
    }
}

/// Simulates SNP genotypes with three interacting two-locus traits and balances the classes.
pub fn gen_snp(p: &SnpModelParams, seed: u64) -> Result<LabeledDataset> {
    p.validate()?;
    let mut rng = rng_from_seed(seed);
    let maf: Vec<f64> = (0..p.n_snps).map(|_| rng.random_range(0.1..0.5)).collect();
    let mut enriched = maf.clone();
    for (k, &c) in p.causal.iter().enumerate() {
        enriched[c] = (maf[c] * p.relative_risks[k]).min(MAX_ENRICHED_MAF);
    }
    let base_dist: Vec<Binomial> = maf
        .iter()
        .map(|&q| Binomial::new(2, q))
        .collect::<std::result::Result<_, _>>()
        .map_err(gen_err)?;
    let enriched_dist: Vec<Binomial> = enriched
        .iter()
        .map(|&q| Binomial::new(2, q))
        .collect::<std::result::Result<_, _>>()
        .map_err(gen_err)?;

    let mut cases: Vec<Vec<u8>> = Vec::new();
    let mut controls: Vec<Vec<u8>> = Vec::new();
    let mut rounds = 0;
    while cases.len() < p.n_cases || controls.len() < p.n_controls {
        if rounds == MAX_SNP_ROUNDS {
            return Err(Error::Generation(format!(
                "only {} cases and {} controls after {rounds} rounds",
                cases.len(),
                controls.len()
            )));
        }
        rounds += 1;
        for i in 0..p.round_size {
            let dist = if i < p.round_size / 2 { &enriched_dist } else { &base_dist };
            let g: Vec<u8> = dist.iter().map(|d| d.sample(&mut rng) as u8).collect();
            let y = p.label(&g)(&mut rng);
            if g.iter().all(|&v| v == 0) {
                continue;
            }
            if y == 1 {
                cases.push(g);
            } else {
                controls.push(g);
            }
        }
    }
    cases.shuffle(&mut rng);
    controls.shuffle(&mut rng);
    let (spare_cases, spare_controls) = (cases.split_off(p.n_cases), controls.split_off(p.n_controls));

    // keep the causal SNPs plus the highest-variance others
    let all: Vec<&Vec<u8>> = controls.iter().chain(cases.iter()).collect();
    let variance = |j: usize| {
        let n = all.len() as f64;
        let mean = all.iter().map(|g| f64::from(g[j])).sum::<f64>() / n;
        all.iter().map(|g| (f64::from(g[j]) - mean).powi(2)).sum::<f64>() / n
    };
    let mut others: Vec<(usize, f64)> = (0..p.n_snps).filter(|j| !p.causal.contains(j)).map(|j| (j, variance(j))).collect();
    others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut selected: Vec<usize> = p.causal.to_vec();
    selected.extend(others.iter().take(p.n_features - 6).map(|(j, _)| *j));
    selected.sort_unstable();

    let project = |g: &Vec<u8>| -> Vec<u8> { selected.iter().map(|&j| g[j]).collect() };
    let mut records = Vec::with_capacity(p.n_cases + p.n_controls);
    for (label, kept, spare) in [(0u8, &controls, &spare_controls), (1u8, &cases, &spare_cases)] {
        let mut pool = kept.iter().chain(spare.iter()).map(project).filter(|g| g.iter().any(|&v| v != 0));
        let target = if label == 1 { p.n_cases } else { p.n_controls };
        for _ in 0..target {
            let g = pool
                .next()
                .ok_or_else(|| Error::Generation("not enough non-zero genotype vectors after feature selection".into()))?;
            records.push(Record {
                payload: Payload::Genotype(g),
                label,
            });
        }
    }
    let mut params = serde_json::to_value(p).expect("plain struct");
    params["selected_snps"] = serde_json::to_value(&selected).expect("index list");
    params["simulation_rounds"] = rounds.into();
    LabeledDataset::new(
        records,
        DatasetMeta {
            generator: "snp".into(),
            params,
            seed,
        },
    )
}

fn gen_err(e: impl std::fmt::Display) -> Error {
    Error::Generation(e.to_string())
}

/// Fidelity between the uniform mixtures of the two classes.
pub fn class_global_fidelity(ds: &LabeledDataset) -> Result<f64> {
    let states = ds.densities()?;
    let labels = ds.labels();
    let class = |y: u8| -> Vec<DensityMatrix> {
        states
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == y)
            .map(|(s, _)| s.clone())
            .collect()
    };
    let (neg, pos) = (class(0), class(1));
    if neg.is_empty() || pos.is_empty() {
        return Err(Error::Eval("class-global fidelity needs both classes".into()));
    }
    fidelity(&mix_uniform(&neg)?, &mix_uniform(&pos)?)
}

const DATASET_MAGIC: &[u8; 4] = b"QMXD";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
    generator: String,
    params: serde_json::Value,
    seed: u64,
    payload_kind: PayloadKind,
    /// state-vector length, matrix side, or genotype length
    dim: usize,
    n_records: usize,
    counts: [usize; 2],
    qubit_order: String,
}

/// Container layout: magic, u32 LE header length, JSON header, then per record
/// a label byte and the payload (complex entries as LE f64 pairs, or raw genotype bytes),
/// closed by a CRC32 of everything before it.
pub fn write_dataset<W: Write>(mut w: W, ds: &LabeledDataset) -> Result<()> {
    let (n0, n1) = ds.class_counts();
    let header = DatasetHeader {
        version: DATASET_VERSION,
        generator: ds.meta.generator.clone(),
        params: ds.meta.params.clone(),
        seed: ds.meta.seed,
        payload_kind: ds.payload_kind().unwrap_or(PayloadKind::Pure),
        dim: ds.records.first().map_or(0, |r| r.payload.width()),
        n_records: ds.len(),
        counts: [n0, n1],
        qubit_order: "basis index bits q0..q(n-1), q0 most significant".into(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for r in &ds.records {
        buf.push(r.label);
        match &r.payload {
            Payload::Pure(p) => encode_complex_entries(&mut buf, p.amplitudes().iter()),
            Payload::Density(d) => encode_complex_entries(&mut buf, d.matrix().transpose().iter()),
            Payload::Genotype(g) => buf.extend_from_slice(g),
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<LabeledDataset> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let fmt = |m: &str| Error::Format(m.to_string());
    if buf.len() < 12 || &buf[..4] != DATASET_MAGIC {
        return Err(fmt("not a dataset file"));
    }
    let (body, crc) = buf.split_at(buf.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(fmt("checksum mismatch"));
    }
    let hlen = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes")) as usize;
    let header: DatasetHeader = serde_json::from_slice(body.get(8..8 + hlen).ok_or_else(|| fmt("truncated header"))?)?;
    if header.version != DATASET_VERSION {
        return Err(fmt(&format!("unsupported dataset version {}", header.version)));
    }
    let mut rest = &body[8 + hlen..];
    let entry_count = match header.payload_kind {
        PayloadKind::Pure => header.dim,
        PayloadKind::Density => header.dim * header.dim,
        PayloadKind::Genotype => 0,
    };
    let mut records = Vec::with_capacity(header.n_records);
    for _ in 0..header.n_records {
        let (&label, tail) = rest.split_first().ok_or_else(|| fmt("truncated record"))?;
        rest = tail;
        let payload = match header.payload_kind {
            PayloadKind::Genotype => {
                if rest.len() < header.dim {
                    return Err(fmt("truncated record"));
                }
                let (g, tail) = rest.split_at(header.dim);
                rest = tail;
                Payload::Genotype(g.to_vec())
            }
            kind => {
                let (entries, tail) = decode_complex_entries(rest, entry_count).ok_or_else(|| fmt("truncated record"))?;
                rest = tail;
                if kind == PayloadKind::Pure {
                    Payload::Pure(PureState::new(entries)?)
                } else {
                    let m = CMatrix::from_row_slice(header.dim, header.dim, &entries);
                    Payload::Density(DensityMatrix::from_matrix_with(m, Tolerances::TRANSPORT)?)
                }
            }
        };
        records.push(Record { payload, label });
    }
    if !rest.is_empty() {
        return Err(fmt("trailing bytes after records"));
    }
    LabeledDataset::new(
        records,
        DatasetMeta {
            generator: header.generator,
            params: header.params,
            seed: header.seed,
        },
    )
}

pub fn save_dataset(path: &Path, ds: &LabeledDataset) -> Result<()> {
    write_dataset(std::io::BufWriter::new(std::fs::File::create(path)?), ds)
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    read_dataset(std::io::BufReader::new(std::fs::File::open(path)?))
}
