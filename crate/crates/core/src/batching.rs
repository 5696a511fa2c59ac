//! Per-class batching and global-state construction.

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qcore::{fidelity, mix_uniform, DensityMatrix};
use crate::{derived_rng, SeededRng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub members: Vec<usize>,
    pub label: u8,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_singleton(&self) -> bool {
        self.members.len() == 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub state: DensityMatrix,
    pub label: u8,
    pub size: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    Unit,
    BatchSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    Smart,
}

impl Strategy {
    /// Random batches train with unit weights, smart batches with their sizes.
    pub fn weight_mode(self) -> WeightMode {
        match self {
            Strategy::Random => WeightMode::Unit,
            Strategy::Smart => WeightMode::BatchSize,
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "smart" => Ok(Strategy::Smart),
            other => Err(Error::Param(format!("unknown batching '{other}', expected random or smart"))),
        }
    }
}

/// Sizes differ by at most one; the first `len % n_batches` batches get the extra element.
pub fn random_batches<R: Rng + ?Sized>(class_samples: &[usize], label: u8, n_batches: usize, rng: &mut R) -> Result<Vec<Batch>> {
    if n_batches == 0 || n_batches > class_samples.len() {
        return Err(Error::Batching(format!(
            "cannot split {} samples into {} batches",
            class_samples.len(),
            n_batches
        )));
    }
    let mut shuffled = class_samples.to_vec();
    shuffled.shuffle(rng);
    let base = shuffled.len() / n_batches;
    let extra = shuffled.len() % n_batches;
    let mut out = Vec::with_capacity(n_batches);
    let mut rest = shuffled.as_slice();
    for b in 0..n_batches {
        let size = base + usize::from(b < extra);
        let (head, tail) = rest.split_at(size);
        out.push(Batch {
            members: head.to_vec(),
            label,
        });
        rest = tail;
    }
    Ok(out)
}

const KMEANS_RESTARTS: usize = 50;
const KMEANS_RETRIES: usize = 20;
const KMEANS_MAX_ITER: usize = 300;

/// Spectral clustering on the fidelity affinity. Members are positions in `class_states`.
pub fn smart_batches(class_states: &[DensityMatrix], label: u8, n_batches: usize, seed: u64) -> Result<Vec<Batch>> {
    let n = class_states.len();
    if n < 2 || n_batches == 0 || n_batches > n {
        return Err(Error::Batching(format!("cannot cluster {n} states into {n_batches} batches")));
    }
    let mut affinity = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let f = fidelity(&class_states[i], &class_states[j])?;
            affinity[(i, j)] = f;
            affinity[(j, i)] = f;
        }
    }
    let embedding = spectral_embedding(&affinity, n_batches);
    let mut rng = derived_rng(seed, 0x5ba7);
    let assignment = if distinct_rows(&embedding, 1e-9) < n_batches {
        // degenerate affinity: any partition is as good as another
        log::warn!("spectral embedding has fewer than {n_batches} distinct rows, using a random partition");
        let idx: Vec<usize> = (0..n).collect();
        let batches = random_batches(&idx, label, n_batches, &mut rng)?;
        let mut a = vec![0; n];
        for (b, batch) in batches.iter().enumerate() {
            for &m in &batch.members {
                a[m] = b;
            }
        }
        a
    } else {
        kmeans(&embedding, n_batches, &mut rng)?
    };
    let mut out: Vec<Batch> = (0..n_batches)
        .map(|_| Batch {
            members: Vec::new(),
            label,
        })
        .collect();
    for (i, &c) in assignment.iter().enumerate() {
        out[c].members.push(i);
    }
    let singletons = out.iter().filter(|b| b.is_singleton()).count();
    if singletons > 0 {
        log::warn!("smart batching produced {singletons} singleton batch(es)");
    }
    Ok(out)
}

/// Rows of the `k` lowest eigenvectors of the symmetric normalized Laplacian, each scaled to unit length.
fn spectral_embedding(affinity: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = affinity.nrows();
    let inv_sqrt_deg: Vec<f64> = affinity
        .row_iter()
        .map(|r| {
            let d: f64 = r.sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let lap = DMatrix::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - inv_sqrt_deg[i] * affinity[(i, j)] * inv_sqrt_deg[j]
    });
    let eig = lap.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut emb = DMatrix::from_fn(n, k, |i, c| eig.eigenvectors[(i, order[c])]);
    for mut row in emb.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    emb
}

fn distinct_rows(m: &DMatrix<f64>, tol: f64) -> usize {
    let mut reps: Vec<usize> = Vec::new();
    for i in 0..m.nrows() {
        if !reps.iter().any(|&r| (m.row(i) - m.row(r)).amax() <= tol) {
            reps.push(i);
        }
    }
    reps.len()
}

fn sq_dist(m: &DMatrix<f64>, i: usize, c: &[f64]) -> f64 {
    m.row(i).iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn kmeans_pp_init(points: &DMatrix<f64>, k: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let n = points.nrows();
    let row = |i: usize| points.row(i).iter().copied().collect::<Vec<f64>>();
    let mut centers = vec![row(rng.random_range(0..n))];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points, i, centers.last().unwrap()));
        }
    }
    centers
}

/// Lloyd iterations from one seeded init; `None` if a cluster empties.
fn lloyd(points: &DMatrix<f64>, mut centers: Vec<Vec<f64>>) -> Option<(Vec<usize>, f64)> {
    let (n, dim) = points.shape();
    let k = centers.len();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let best = (0..k)
                .min_by(|&x, &y| sq_dist(points, i, &centers[x]).total_cmp(&sq_dist(points, i, &centers[y])))
                .unwrap();
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(points.row(i).iter()) {
                *s += v;
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for ((c, s), &cnt) in centers.iter_mut().zip(sums).zip(&counts) {
            *c = s.into_iter().map(|v| v / cnt as f64).collect();
        }
        if !changed {
            break;
        }
    }
    let inertia = assign.iter().enumerate().map(|(i, &a)| sq_dist(points, i, &centers[a])).sum();
    Some((assign, inertia))
}

fn kmeans(points: &DMatrix<f64>, k: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let mut run = None;
        for _ in 0..=KMEANS_RETRIES {
            run = lloyd(points, kmeans_pp_init(points, k, rng));
            if run.is_some() {
                break;
            }
        }
        let Some((assign, inertia)) = run else {
            return Err(Error::Batching(format!(
                "k-means left a cluster empty after {KMEANS_RETRIES} re-initializations"
            )));
        };
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((assign, inertia));
        }
    }
    Ok(best.expect("at least one restart").0)
}

pub fn build_global_state(batch: &Batch, states: &[DensityMatrix], mode: WeightMode) -> Result<GlobalState> {
    if batch.is_empty() {
        return Err(Error::Batching("empty batch".into()));
    }
    let members: Vec<DensityMatrix> = batch
        .members
        .iter()
        .map(|&i| {
            states
                .get(i)
                .cloned()
                .ok_or_else(|| Error::Batching(format!("member index {i} out of range")))
        })
        .collect::<Result<_>>()?;
    let state = mix_uniform(&members)?;
    let size = batch.len();
    Ok(GlobalState {
        state,
        label: batch.label,
        size,
        weight: match mode {
            WeightMode::Unit => 1.0,
            WeightMode::BatchSize => size as f64,
        },
    })
}

/// Batches every class of a labeled collection. Member indices refer to `states`.
pub fn batch_by_class(states: &[DensityMatrix], labels: &[u8], strategy: Strategy, n_batches: usize, seed: u64) -> Result<Vec<Batch>> {
    if states.len() != labels.len() {
        return Err(Error::Dimension(format!("{} states for {} labels", states.len(), labels.len())));
    }
    let mut out = Vec::new();
    for label in [0u8, 1] {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if idx.is_empty() {
            continue;
        }
        let mut batches = match strategy {
            Strategy::Random => random_batches(&idx, label, n_batches, &mut derived_rng(seed, u64::from(label)))?,
            Strategy::Smart => {
                let class: Vec<DensityMatrix> = idx.iter().map(|&i| states[i].clone()).collect();
                let mut local = smart_batches(&class, label, n_batches, seed.wrapping_add(u64::from(label)))?;
                for b in &mut local {
                    for m in &mut b.members {
                        *m = idx[*m];
                    }
                }
                local
            }
        };
        out.append(&mut batches);
    }
    Ok(out)
}

pub fn build_global_states(batches: &[Batch], states: &[DensityMatrix], mode: WeightMode) -> Result<Vec<GlobalState>> {
    batches.iter().map(|b| build_global_state(b, states, mode)).collect()
}

/// CSV with columns `sample_index,class,batch_id`.
pub fn write_batches_csv<W: Write>(mut w: W, batches: &[Batch]) -> Result<()> {
    writeln!(w, "sample_index,class,batch_id")?;
    let mut rows: Vec<(usize, u8, usize)> = batches
        .iter()
        .enumerate()
        .flat_map(|(b, batch)| batch.members.iter().map(move |&m| (m, batch.label, b)))
        .collect();
    rows.sort_unstable();
    for (m, label, b) in rows {
        writeln!(w, "{m},{label},{b}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qcore::{pure_to_density, PureState};
    use crate::rng_from_seed;

    fn sizes(b: &[Batch]) -> Vec<usize> {
        b.iter().map(Batch::len).collect()
    }

    #[test]
    fn random_sizes() {
        let mut rng = rng_from_seed(3);
        let idx: Vec<usize> = (0..11).collect();
        assert_eq!(sizes(&random_batches(&idx, 0, 3, &mut rng).unwrap()), vec![4, 4, 3]);
        let idx: Vec<usize> = (0..325).collect();
        let s = sizes(&random_batches(&idx, 1, 10, &mut rng).unwrap());
        assert_eq!(s, [vec![33; 5], vec![32; 5]].concat());
        assert!(random_batches(&idx[..3], 0, 4, &mut rng).is_err());
    }

    #[test]
    fn smart_separates_orthogonal_groups() {
        let a = pure_to_density(&PureState::basis(2, 0).unwrap());
        let b = pure_to_density(&PureState::basis(2, 3).unwrap());
        let states = vec![a.clone(), b.clone(), a.clone(), b.clone(), a, b];
        let batches = smart_batches(&states, 0, 2, 9).unwrap();
        let mut groups: Vec<Vec<usize>> = batches.into_iter().map(|b| b.members).collect();
        groups.sort();
        assert_eq!(groups, vec![vec![0, 2, 4], vec![1, 3, 5]]);
    }

    #[test]
    fn smart_handles_identical_states() {
        let a = pure_to_density(&PureState::basis(1, 0).unwrap());
        let batches = smart_batches(&vec![a; 6], 1, 2, 1).unwrap();
        let mut all: Vec<usize> = batches.iter().flat_map(|b| b.members.clone()).collect();
        all.sort();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| !b.is_empty()));
    }

    #[test]
    fn single_member_global_is_member() {
        let mut rng = rng_from_seed(2);
        let rho = crate::qcore::random_density_hs(4, &mut rng).unwrap();
        let g = build_global_state(
            &Batch {
                members: vec![0],
                label: 1,
            },
            std::slice::from_ref(&rho),
            WeightMode::BatchSize,
        )
        .unwrap();
        assert!(g.state.max_abs_diff(&rho) < 1e-15);
        assert_eq!(g.weight, 1.0);
    }

    #[test]
    fn csv_export() {
        let batches = vec![
            Batch {
                members: vec![2, 0],
                label: 0,
            },
            Batch {
                members: vec![1],
                label: 1,
            },
        ];
        let mut buf = Vec::new();
        write_batches_csv(&mut buf, &batches).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "sample_index,class,batch_id\n0,0,0\n1,1,1\n2,0,0\n"
        );
    }
}
