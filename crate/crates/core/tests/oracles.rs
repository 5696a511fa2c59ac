//! Fidelity and spectra checked against a cyclic Jacobi eigensolver on the real
//! embedding [[A, −B], [B, A]] of H = A + iB, which doubles every eigenvalue.

use qmix_core::privacy::{epsilon_from_samples, membership_projections, membership_projections_noisy, Scheme};
use qmix_core::qcore::{amplitude_encode, fidelity, fidelity_eigen, mix, pure_to_density, random_density_hs, DensityMatrix};
use qmix_core::rng_from_seed;
use rand::Rng;

type Real = Vec<Vec<f64>>;

fn embed(rho: &DensityMatrix) -> Real {
    let m = rho.matrix();
    let n = rho.dim();
    let mut e = vec![vec![0.0; 2 * n]; 2 * n];
    for i in 0..n {
        for j in 0..n {
            let c = m[(i, j)];
            e[i][j] = c.re;
            e[i + n][j + n] = c.re;
            e[i][j + n] = -c.im;
            e[i + n][j] = c.im;
        }
    }
    e
}

fn matmul(a: &Real, b: &Real) -> Real {
    let n = a.len();
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

/// Returns (eigenvalues, eigenvectors as columns).
fn jacobi(mut a: Real) -> (Vec<f64>, Real) {
    let n = a.len();
    let mut v: Real = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

fn sqrt_psd(a: &Real) -> Real {
    let (w, v) = jacobi(a.clone());
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for (k, &l) in w.iter().enumerate() {
        let r = l.max(0.0).sqrt();
        for i in 0..n {
            for j in 0..n {
                out[i][j] += r * v[i][k] * v[j][k];
            }
        }
    }
    out
}

fn fidelity_oracle(rho: &DensityMatrix, sigma: &DensityMatrix) -> f64 {
    let s = sqrt_psd(&embed(rho));
    let k = matmul(&matmul(&s, &embed(sigma)), &s);
    let (w, _) = jacobi(k);
    let tr: f64 = w.iter().map(|l| l.max(0.0).sqrt()).sum::<f64>() / 2.0;
    tr * tr
}

fn random_pure(dim_bits: usize, rng: &mut impl Rng) -> DensityMatrix {
    let x: Vec<f64> = (0..1 << dim_bits).map(|_| rng.random::<f64>() - 0.5).collect();
    pure_to_density(&amplitude_encode(&x, dim_bits).unwrap())
}

#[test]
fn fidelity_matches_jacobi_oracle() {
    let mut rng = rng_from_seed(17);
    for _ in 0..20 {
        let a = random_density_hs(4, &mut rng).unwrap();
        let b = random_density_hs(4, &mut rng).unwrap();
        let o = fidelity_oracle(&a, &b);
        assert!((fidelity_eigen(&a, &b).unwrap() - o).abs() < 1e-8, "{o}");
        assert!((fidelity(&a, &b).unwrap() - o).abs() < 1e-8);
    }
    // rank-deficient: √ of near-zero eigenvalues limits the oracle to ~1e-8
    for _ in 0..10 {
        let p = [random_pure(2, &mut rng), random_pure(2, &mut rng)];
        let a = mix(&p, &[0.3, 0.7]).unwrap();
        let b = random_pure(2, &mut rng);
        let o = fidelity_oracle(&a, &b);
        assert!((fidelity(&a, &b).unwrap() - o).abs() < 1e-6);
        assert!((fidelity_eigen(&a, &b).unwrap() - o).abs() < 1e-6);
    }
}

#[test]
fn spectrum_matches_jacobi_oracle() {
    let mut rng = rng_from_seed(23);
    for _ in 0..10 {
        let a = random_density_hs(8, &mut rng).unwrap();
        let (mut w, _) = jacobi(embed(&a));
        w.sort_by(f64::total_cmp);
        let halved: Vec<f64> = w.chunks(2).map(|c| (c[0] + c[1]) / 2.0).collect();
        let mut ours = a.eigenvalues();
        ours.sort_by(f64::total_cmp);
        for (x, y) in ours.iter().zip(&halved) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn noisy_probe_does_not_raise_epsilon() {
    let mut rng = rng_from_seed(31);
    let states: Vec<DensityMatrix> = (0..60).map(|_| random_pure(3, &mut rng)).collect();
    let scheme = Scheme::Random(4);
    let clean = epsilon_from_samples(&membership_projections(&states, &scheme, 5).unwrap(), 0.05, 10_000, 6, "clean").unwrap();
    for a in [0.1, 0.3, 0.6] {
        let noisy = membership_projections_noisy(&states, &scheme, a, 5).unwrap();
        let r = epsilon_from_samples(&noisy, 0.05, 10_000, 6, "noisy").unwrap();
        assert!(r.epsilon <= clean.epsilon + 0.1, "a = {a}: {} vs {}", r.epsilon, clean.epsilon);
    }
}
