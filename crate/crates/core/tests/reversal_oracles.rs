use std::sync::Arc;

use nalgebra::DMatrix;

use retro_core::distributions::InitialDistribution;
use retro_core::forward_sim::empirical_moments;
use retro_core::linalg_ode::TimeGrid;
use retro_core::mckean_sim::{
    ou_reference, simulate_reversal_analytic, verify_representation, ReversalConfig, TabulatedReference,
};
use retro_core::ou_analytic::{ou_marginal, OuModel};
use retro_core::stats::mean_std;

#[test]
fn gaussian_source_marginals_follow_heat_flow() {
    let grid = TimeGrid::with_max_step(1.0, 1e-3).unwrap();
    let sol = OuModel::heat(1).solve(&grid).unwrap();
    let nu = InitialDistribution::normal(0.0, 1.0).unwrap();
    let mu = InitialDistribution::normal(0.0, 2.0).unwrap();
    let run = simulate_reversal_analytic(&sol, &nu, &mu, &grid, &ReversalConfig::analytic(50_000, 1e-2, 21)).unwrap();
    let rep = verify_representation(&run, &ou_reference(&sol, &nu), 0.02).unwrap();
    assert!(rep.pass, "max KS {} at {}", rep.max_statistic, rep.argmax_t);
    assert!(run.warnings.is_empty(), "{:?}", run.warnings);
}

#[test]
fn own_marginals_give_zero_statistic() {
    let grid = TimeGrid::with_max_step(1.0, 1e-2).unwrap();
    let sol = OuModel::heat(1).solve(&grid).unwrap();
    let nu = InitialDistribution::dirac(vec![0.0]);
    let mu = InitialDistribution::normal(0.0, 1.0).unwrap();
    let run = simulate_reversal_analytic(&sol, &nu, &mu, &grid, &ReversalConfig::analytic(2_000, 5e-2, 1)).unwrap();
    let rep = verify_representation(&run, &TabulatedReference::from_path(&run.path), 1e-12).unwrap();
    assert_eq!(rep.max_statistic, 0.0);
}

#[test]
fn rotation_reversal_returns_to_source() {
    let grid = TimeGrid::with_max_step(1.0, 1e-3).unwrap();
    let model =
        OuModel::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]), DMatrix::identity(2, 2)).unwrap();
    let sol = Arc::new(model.solve(&grid).unwrap());
    let nu = InitialDistribution::dirac(vec![1.0, 0.0]);
    let mu = InitialDistribution::Gaussian(ou_marginal(&sol, &nu, 1.0).unwrap());
    for seed in 0..10 {
        let run = simulate_reversal_analytic(&sol, &nu, &mu, &grid, &ReversalConfig::analytic(4_000, 1e-2, seed)).unwrap();
        let mean = empirical_moments(run.terminal()).unwrap().0;
        let err = ((mean[0] - 1.0).powi(2) + mean[1].powi(2)).sqrt();
        assert!(err <= 0.05, "seed {seed}: centroid error {err}");
    }
}

#[test]
fn smaller_stop_time_tightens_terminal_cloud() {
    let grid = TimeGrid::with_max_step(1.0, 1e-3).unwrap();
    let sol = OuModel::heat(1).solve(&grid).unwrap();
    let nu = InitialDistribution::dirac(vec![0.0]);
    let mu = InitialDistribution::normal(0.0, 1.0).unwrap();
    let avg_std = |eps: f64| {
        (0..10)
            .map(|seed| {
                let run = simulate_reversal_analytic(&sol, &nu, &mu, &grid, &ReversalConfig::analytic(2_000, eps, seed)).unwrap();
                mean_std(run.terminal().positions()).unwrap().1
            })
            .sum::<f64>()
            / 10.0
    };
    let (wide, narrow) = (avg_std(4e-2), avg_std(2e-2));
    assert!(narrow < wide, "{narrow} vs {wide}");
}
