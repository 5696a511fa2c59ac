use proptest::prelude::*;
use qmix_core::ansatz::AnsatzParams;
use qmix_core::batching::{random_batches, GlobalState};
use qmix_core::classifier::{loss_global, loss_instance, predict_raw, LossSpec};
use qmix_core::privacy::{
    composition_count_exact, composition_mixture, genotype_basis, membership_projections_explicit, random_composition, Scheme,
};
use qmix_core::protocol::{deserialize_global_state, serialize_global_state};
use qmix_core::qcore::{
    amplitude_encode, fidelity, fidelity_eigen, mix, mix_uniform, pure_to_density, random_density_hs, DensityMatrix, Observable,
};
use qmix_core::rng_from_seed;
use rand::Rng;

fn random_states(n: usize, dim: usize, seed: u64) -> Vec<DensityMatrix> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| random_density_hs(dim, &mut rng).unwrap()).collect()
}

fn random_pure(n: usize, n_qubits: usize, seed: u64) -> Vec<DensityMatrix> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..1 << n_qubits).map(|_| rng.random::<f64>() - 0.5).collect();
            pure_to_density(&amplitude_encode(&x, n_qubits).unwrap())
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mixture_is_a_density_matrix(seed in any::<u64>(), n in 1usize..6, raw in prop::collection::vec(0.01f64..1.0, 6)) {
        let states = random_states(n, 4, seed);
        let total: f64 = raw[..n].iter().sum();
        let w: Vec<f64> = raw[..n].iter().map(|v| v / total).collect();
        let w_sum: f64 = w.iter().sum();
        prop_assume!((w_sum - 1.0).abs() <= 1e-12);
        let m = mix(&states, &w).unwrap();
        prop_assert!((m.trace() - 1.0).abs() < 1e-10);
        prop_assert!(m.hermiticity_error() < 1e-10);
        prop_assert!(m.eigenvalues().iter().all(|&e| e >= -1e-9));
    }

    #[test]
    fn fidelity_symmetric_and_bounded(seed in any::<u64>()) {
        let s = random_states(2, 4, seed);
        let ab = fidelity(&s[0], &s[1]).unwrap();
        let ba = fidelity(&s[1], &s[0]).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((-1e-12..=1.0 + 1e-9).contains(&ab));
        prop_assert!((fidelity(&s[0], &s[0]).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn pure_shortcut_matches_eigen_route(seed in any::<u64>()) {
        let p = random_pure(1, 2, seed).remove(0);
        let m = random_states(1, 4, seed ^ 0x55).remove(0);
        // the eigen route takes √ of a rank-1 matrix, accurate to ~1e-8
        prop_assert!((fidelity(&p, &m).unwrap() - fidelity_eigen(&p, &m).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn global_prediction_is_mean_of_instances(seed in any::<u64>(), n in 1usize..12, reps in 1usize..3) {
        let states = random_states(n, 8, seed);
        let params = AnsatzParams::random(3, reps, &mut rng_from_seed(seed ^ 1));
        let obs = Observable::last_qubit(3);
        let mean: f64 = states.iter().map(|s| predict_raw(&params, s, &obs).unwrap()).sum::<f64>() / n as f64;
        let g = predict_raw(&params, &mix_uniform(&states).unwrap(), &obs).unwrap();
        prop_assert!((g - mean).abs() <= 1e-12);

        let label = (seed % 2) as u8;
        let data: Vec<(DensityMatrix, u8)> = states.iter().map(|s| (s.clone(), label)).collect();
        let glob = [GlobalState { state: mix_uniform(&states).unwrap(), label, size: n, weight: 1.0 }];
        let spec = LossSpec::l1_rescaled();
        let li = loss_instance(&data, &params, &spec, &obs).unwrap();
        let lg = loss_global(&glob, &params, &spec, &obs, None).unwrap();
        prop_assert!((li - lg).abs() <= 1e-10);
    }

    #[test]
    fn random_batches_partition(seed in any::<u64>(), pop in 1usize..80, k in 1usize..12) {
        prop_assume!(k <= pop);
        let samples: Vec<usize> = (100..100 + pop).collect();
        let batches = random_batches(&samples, 1, k, &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(batches.len(), k);
        let mut all: Vec<usize> = batches.iter().flat_map(|b| b.members.clone()).collect();
        all.sort();
        prop_assert_eq!(all, samples);
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        let (q, r) = (pop / k, pop % k);
        for (i, s) in sizes.iter().enumerate() {
            prop_assert_eq!(*s, if i < r { q + 1 } else { q });
        }
    }

    #[test]
    fn alpha_beta_identity(seed in any::<u64>(), n in 2usize..6) {
        let states = random_pure(3 * n, 2, seed);
        let s = membership_projections_explicit(&states, &Scheme::Random(n), seed).unwrap();
        let (alpha, beta) = ((n as f64 - 1.0) / n as f64, 1.0 / n as f64);
        for (a, i) in s.adjacent.iter().zip(&s.including) {
            prop_assert!((i - (alpha * a + beta)).abs() <= 1e-12);
        }
    }

    #[test]
    fn encoding_is_normalized(x in prop::collection::vec(-5.0f64..5.0, 1..16)) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-6));
        let psi = amplitude_encode(&x, 4).unwrap();
        let norm: f64 = psi.amplitudes().iter().map(|a| a.norm_sqr()).sum();
        prop_assert!((norm - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn wire_round_trip_is_bit_exact(seed in any::<u64>(), flip in any::<prop::sample::Index>()) {
        let g = GlobalState { state: random_states(1, 4, seed).remove(0), label: (seed & 1) as u8, size: 5, weight: 5.0 };
        let bytes = serialize_global_state(&g);
        let back = deserialize_global_state(&bytes).unwrap();
        prop_assert_eq!(&back, &g);
        let mut bad = bytes.clone();
        let i = flip.index(bad.len());
        bad[i] ^= 0x01;
        prop_assert!(deserialize_global_state(&bad).is_err());
    }

    #[test]
    fn constructed_compositions_are_found(seed in any::<u64>(), alphabet in 2u8..4, n_snp in 1u32..3, ni in 1usize..4) {
        let basis = genotype_basis(alphabet, n_snp).unwrap();
        let b = random_composition(basis.len(), ni, &mut rng_from_seed(seed));
        let rho = composition_mixture(&basis, &b).unwrap();
        prop_assert!(composition_count_exact(&basis, ni, &rho, 1e-9).unwrap() >= 1);
    }
}
