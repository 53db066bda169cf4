use molguide::dataset::{compute_marginals, generate_synthetic_dataset, GraphDataset};
use molguide::denoiser::{softmax_denoise, DenoiserOutput, SoftmaxDenoiserParams};
use molguide::graph::{GraphState, STOCHASTIC_TOL};
use molguide::guidance::{
    apply_guidance, estimate_guidance_gradient, loss_and_gradient, GuidanceGradient, GuidanceSpec, PropertyFunction,
};
use molguide::noise::{NoiseModel, NoiseSchedule, DEFAULT_COSINE_S};
use molguide::sampler::sample_prior;
use molguide::validity::check_validity;
use molguide::vocab::qm9_heavy_vocab;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn simplex(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, d).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn soft_graph(max_n: usize) -> impl Strategy<Value = GraphState> {
    (1..=max_n).prop_flat_map(|n| {
        let rows = prop::collection::vec(simplex(4), n);
        let fibers = prop::collection::vec(simplex(4), n * (n - 1) / 2);
        (rows, fibers).prop_map(move |(rows, fibers)| {
            let mut g = GraphState::filled(n, &rows[0], &fibers.first().cloned().unwrap_or(vec![1.0, 0.0, 0.0, 0.0]));
            let mut p = 0;
            for (i, row) in rows.iter().enumerate() {
                g.set_node_row(i, row);
                for j in i + 1..n {
                    g.set_edge_fiber(i, j, &fibers[p]);
                    p += 1;
                }
            }
            g
        })
    })
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn synthetic(seed: u64, count: usize) -> GraphDataset {
    generate_synthetic_dataset(&qm9_heavy_vocab(), count, 6, seed).unwrap()
}

fn sums_to_one(row: &[f64]) -> bool {
    (row.iter().sum::<f64>() - 1.0).abs() <= STOCHASTIC_TOL && row.iter().all(|v| *v >= 0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn marginals_are_distributions(seed in 0u64..1000, count in 1usize..40) {
        let (m_x, m_e) = compute_marginals(&synthetic(seed, count)).unwrap();
        prop_assert!(sums_to_one(&m_x));
        prop_assert!(sums_to_one(&m_e));
    }

    #[test]
    fn marginals_ignore_node_order(seed in 0u64..1000, shuffle in 0u64..1000) {
        let ds = synthetic(seed, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        let permuted: Vec<GraphState> = ds
            .graphs()
            .iter()
            .map(|g| {
                let mut perm: Vec<usize> = (0..g.n()).collect();
                rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
                g.permuted(&perm)
            })
            .collect();
        let other = GraphDataset::new(permuted, ds.vocab().clone()).unwrap();
        let (a, b) = (compute_marginals(&ds).unwrap(), compute_marginals(&other).unwrap());
        for (x, y) in a.0.iter().chain(&a.1).zip(b.0.iter().chain(&b.1)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn validity_ignores_node_order(seed in 0u64..1000, perm in permutation(6)) {
        let vocab = qm9_heavy_vocab();
        let ds = synthetic(seed, 8);
        for g in ds.graphs().iter().filter(|g| g.n() == 6) {
            let (a, b) = (check_validity(g, &vocab), check_validity(&g.permuted(&perm), &vocab));
            prop_assert_eq!(a.valid, b.valid);
            prop_assert_eq!(a.fragment_count, b.fragment_count);
        }
    }

    #[test]
    fn property_functions_are_linear(g in soft_graph(5), h_seed in 0u64..1000, w in 0.0f64..1.0) {
        let vocab = qm9_heavy_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(h_seed);
        let h = GraphState::filled(g.n(), &[0.25; 4], &[0.25; 4]).sample_discrete(&mut rng).unwrap();
        let mut mix = g.clone();
        for i in 0..g.n() {
            let row: Vec<f64> = g.node_row(i).iter().zip(h.node_row(i)).map(|(a, b)| w * a + (1.0 - w) * b).collect();
            mix.set_node_row(i, &row);
            for j in i + 1..g.n() {
                let f: Vec<f64> =
                    g.edge_fiber(i, j).iter().zip(h.edge_fiber(i, j)).map(|(a, b)| w * a + (1.0 - w) * b).collect();
                mix.set_edge_fiber(i, j, &f);
            }
        }
        for f in [
            PropertyFunction::AtomProportion { atom: 0 },
            PropertyFunction::MolecularWeight,
            PropertyFunction::BondCount,
        ] {
            let want = w * f.eval(&g, &vocab) + (1.0 - w) * f.eval(&h, &vocab);
            prop_assert!((f.eval(&mix, &vocab) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn guided_rows_stay_on_the_simplex(g in soft_graph(5), target in 0.0f64..1.0, lambda in 0.0f64..1e4) {
        let vocab = qm9_heavy_vocab();
        let p_hat = DenoiserOutput::new(g.clone());
        for (f, scale) in [
            (PropertyFunction::AtomProportion { atom: 1 }, 1.0),
            (PropertyFunction::MolecularWeight, 100.0),
            (PropertyFunction::BondCount, 10.0),
        ] {
            let spec = GuidanceSpec::new(f, target * scale, lambda, 1).unwrap();
            let (_, grad) = loss_and_gradient(&g.argmax_discrete(), &spec, &vocab);
            let out = apply_guidance(&p_hat, &grad, lambda);
            prop_assert!(out.validate().is_ok());
            for i in 0..g.n() {
                prop_assert!(sums_to_one(out.node_row(i)));
                for j in i + 1..g.n() {
                    prop_assert_eq!(out.edge_fiber(i, j), out.edge_fiber(j, i));
                }
            }
        }
    }

    #[test]
    fn zero_lambda_is_identity(g in soft_graph(5)) {
        let p_hat = DenoiserOutput::new(g.clone());
        let mut grad = GuidanceGradient::zeros(g.n(), 4, 4);
        grad.gx.iter_mut().for_each(|v| *v = 3.0);
        prop_assert_eq!(apply_guidance(&p_hat, &grad, 0.0).probs, g);
    }

    #[test]
    fn carbon_mass_grows_with_lambda(g in soft_graph(5), l1 in 0.0f64..50.0, dl in 0.0f64..50.0) {
        let vocab = qm9_heavy_vocab();
        let p_hat = DenoiserOutput::new(g.clone());
        let spec = GuidanceSpec::new(PropertyFunction::AtomProportion { atom: 0 }, 1.0, 1.0, 1).unwrap();
        let (_, grad) = loss_and_gradient(&g, &spec, &vocab);
        let (lo, hi) = (apply_guidance(&p_hat, &grad, l1), apply_guidance(&p_hat, &grad, l1 + dl));
        for i in 0..g.n() {
            prop_assert!(hi.node_row(i)[0] >= lo.node_row(i)[0] - 1e-12);
            prop_assert!(lo.node_row(i)[0] >= g.node_row(i)[0] - 1e-12);
        }
    }

    #[test]
    fn softmax_denoiser_is_permutation_equivariant(seed in 0u64..1000, perm in permutation(5), t in 1usize..50) {
        let vocab = qm9_heavy_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = SoftmaxDenoiserParams::zeros(4, vocab.bonds.orders(), 50);
        let flat: Vec<f64> = (0..base.flatten().len()).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let params = base.unflatten(&flat);
        let gt = GraphState::filled(5, &[0.4, 0.2, 0.2, 0.2], &[0.5, 0.3, 0.1, 0.1]).sample_discrete(&mut rng).unwrap();
        let out = softmax_denoise(&gt, t, &params);
        let permuted = softmax_denoise(&gt.permuted(&perm), t, &params);
        let moved = out.probs.permuted(&perm);
        for i in 0..5 {
            for (a, b) in moved.node_row(i).iter().zip(permuted.node_row(i)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for j in i + 1..5 {
                for (a, b) in moved.edge_fiber(i, j).iter().zip(permuted.edge_fiber(i, j)) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}

fn frequencies(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

#[test]
fn prior_and_final_noise_match_marginals() {
    let ds = synthetic(1, 200);
    let (m_x, m_e) = compute_marginals(&ds).unwrap();
    let nm = NoiseModel::new(NoiseSchedule::cosine(100, DEFAULT_COSINE_S).unwrap(), &m_x, &m_e).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut prior_x, mut noised_x) = (vec![0; 4], vec![0; 4]);
    let (mut prior_e, mut noised_e) = (vec![0; 4], vec![0; 4]);
    let clean = GraphState::from_discrete(&[3, 3, 3, 3], &[(0, 1, 3), (2, 3, 3)], 4, 4).unwrap();
    for _ in 0..5000 {
        let g = sample_prior(4, &nm, &mut rng).unwrap();
        let h = nm.forward_noise(&clean, 100, &mut rng).unwrap();
        for i in 0..4 {
            prior_x[g.atom_type(i)] += 1;
            noised_x[h.atom_type(i)] += 1;
            for j in i + 1..4 {
                prior_e[g.edge_type(i, j)] += 1;
                noised_e[h.edge_type(i, j)] += 1;
            }
        }
    }
    for (counts, m) in [(&prior_x, &m_x), (&noised_x, &m_x), (&prior_e, &m_e), (&noised_e, &m_e)] {
        for (f, p) in frequencies(counts).iter().zip(m) {
            assert!((f - p).abs() < 0.02, "frequency {f} vs marginal {p}");
        }
    }
}

#[test]
fn guidance_estimate_matches_its_expectation() {
    let vocab = qm9_heavy_vocab();
    let p = GraphState::filled(3, &[0.5, 0.2, 0.2, 0.1], &[0.7, 0.2, 0.1, 0.0]);
    let p_hat = DenoiserOutput::new(p.clone());
    let spec = GuidanceSpec::new(PropertyFunction::AtomProportion { atom: 0 }, 1.0, 1.0, 20000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grad = estimate_guidance_gradient(&p_hat, &spec, &vocab, &mut rng).unwrap();
    // f is the carbon fraction; E[2 (f − 1) / n] = 2 (E[f] − 1) / n with E[f] = 0.5.
    let want = 2.0 * (0.5 - 1.0) / 3.0;
    for i in 0..3 {
        assert!((grad.node(i)[0] - want).abs() < 0.01, "{} vs {want}", grad.node(i)[0]);
        assert_eq!(&grad.node(i)[1..], &[0.0, 0.0, 0.0]);
    }
}
