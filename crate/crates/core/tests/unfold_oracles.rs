use cpca_core::data::{gen_common_ensemble, random_rotation, rng_from_seed, EnsembleParams};
use cpca_core::fg::{fg_fit, ml_residual, FgConfig};
use cpca_core::tape::{gradcheck, offdiag_energy_node, Bindings, Graph};
use cpca_core::unfold::{
    cpca_loss, riemannian_gradient, transform_node, unfold_graph, unfold_solve, CovNode,
    UnfoldConfig,
};
use cpca_core::{covariance, CovarianceSet, Matrix};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn sample_covs(d: usize, k: usize, seed: u64) -> CovarianceSet {
    let mut rng = rng_from_seed(seed);
    CovarianceSet::from_pairs((0..k).map(|j| {
        let mix = random_rotation(d, &mut rng);
        let x = Matrix::from_fn(4 * d, d, |_, c| {
            rng.sample::<f64, _>(StandardNormal) * (0.5 + ((c * 7 + j * 3) % d) as f64 * 0.4)
        })
        .matmul(&mix);
        (covariance(&x).unwrap().into_matrix(), (4 * d - 1) as f64)
    }))
    .unwrap()
}

#[test]
fn unfold_graph_gradcheck_on_first_domain_energy() {
    let d = 6;
    let covs = sample_covs(d, 3, 31);
    let cfg = UnfoldConfig {
        stages: 3,
        dim: d,
        ..UnfoldConfig::default()
    };
    let mut g = Graph::new();
    let mut bindings = Bindings::new();
    let mut nodes = Vec::new();
    for (k, (s, n)) in covs.iter().enumerate() {
        let name = format!("S{}", k + 1);
        nodes.push(CovNode {
            cov: g.input(&name, d, d).unwrap(),
            weight: n,
        });
        bindings.insert(name, s.clone());
    }
    let etas = g.input("eta", 1, 3).unwrap();
    bindings.insert("eta".into(), Matrix::row_vector(&[0.2, 0.3, 0.15]));
    let out = unfold_graph(&mut g, &nodes, etas, &cfg).unwrap();
    let hat = transform_node(&mut g, out.beta, nodes[0].cov).unwrap();
    let e = offdiag_energy_node(&mut g, hat).unwrap();
    g.set_output(e).unwrap();
    let report = gradcheck(&mut g, &bindings, 1e-6).unwrap();
    assert!(report.per_input["S1"] < 1e-4, "{report:?}");
    assert!(report.per_input["eta"] < 1e-4, "{report:?}");
}

#[test]
fn small_steps_descend_on_commuting_ensembles() {
    let etas = vec![0.01; 20];
    let cfg = UnfoldConfig::with_stages(20);
    let mut monotone = 0;
    for seed in 0..100 {
        let ens = gen_common_ensemble(&EnsembleParams::default(), seed).unwrap();
        let (_, trace) = unfold_solve(&ens.covs, &etas, &cfg).unwrap();
        let mut prev = trace.initial_objective;
        let mut ok = true;
        for s in &trace.stages {
            ok &= s.objective <= prev;
            prev = s.objective;
        }
        monotone += ok as usize;
    }
    assert!(monotone >= 95, "monotone in {monotone}/100");
}

#[test]
fn gradient_vanishes_at_ml_stationary_point() {
    for seed in 0..10 {
        let covs = sample_covs(5, 3, 100 + seed);
        let fit = fg_fit(&covs, &FgConfig::default()).unwrap();
        let residual = ml_residual(&fit.basis, &covs);
        assert!(residual < 1e-6, "residual {residual}");
        let eps = 1e-8;
        let g = riemannian_gradient(&fit.basis, &covs, eps);
        let bound = 10.0 * eps * covs.total_weight();
        // the fit satisfies the stationarity conditions only up to its residual
        let slack = 5.0 * residual;
        assert!(g.frobenius_norm() < bound + slack, "seed {seed}: {}", g.frobenius_norm());
    }
}

#[test]
fn largest_torque_entry_is_scale_invariant() {
    let argmax = |m: &Matrix| {
        let mut best = (0, 0, 0.0);
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                if i != j && m[(i, j)].abs() > best.2 {
                    best = (i, j, m[(i, j)].abs());
                }
            }
        }
        (best.0, best.1)
    };
    for seed in 0..20 {
        let covs = sample_covs(6, 3, 200 + seed);
        let beta = random_rotation(6, &mut rng_from_seed(seed));
        let base = argmax(&riemannian_gradient(&beta, &covs, 1e-8));
        for c in [0.5, 2.0] {
            let scaled =
                CovarianceSet::from_pairs(covs.iter().map(|(s, n)| (s.scale(c), n))).unwrap();
            assert_eq!(argmax(&riemannian_gradient(&beta, &scaled, 1e-8)), base);
        }
    }
}

#[test]
fn trace_json_has_per_stage_fields() {
    let ens = gen_common_ensemble(&EnsembleParams::default(), 3).unwrap();
    let (_, trace) = unfold_solve(&ens.covs, &[0.25; 4], &UnfoldConfig::with_stages(4)).unwrap();
    let v: serde_json::Value = serde_json::from_str(&trace.to_json()).unwrap();
    let stages = v["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 4);
    for key in ["eta", "objective", "offdiag", "grad_norm"] {
        assert!(stages[0][key].is_f64(), "missing {key}");
    }
}

#[test]
fn constant_quarter_steps_reduce_offdiag_energy() {
    for seed in 0..10 {
        let ens = gen_common_ensemble(&EnsembleParams::default(), seed).unwrap();
        let (beta, trace) =
            unfold_solve(&ens.covs, &[0.25; 50], &UnfoldConfig::with_stages(50)).unwrap();
        assert!(cpca_loss(&beta, &ens.covs).unwrap() < trace.initial_offdiag);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_stage_basis_is_orthogonal(
        seed in any::<u64>(),
        d in 2usize..9,
        etas in prop::collection::vec(1e-3f64..0.499, 1..8),
    ) {
        let covs = sample_covs(d, 2, seed);
        let (_, trace) = unfold_solve(&covs, &etas, &UnfoldConfig::with_stages(etas.len())).unwrap();
        for s in &trace.stages {
            prop_assert!(s.beta.orthogonality_error() < 1e-10);
            let step = riemannian_gradient(&s.beta, &covs, 1e-8);
            prop_assert!(step.as_matrix().add(&step.as_matrix().transpose()).frobenius_norm() < 1e-12);
        }
    }
}
