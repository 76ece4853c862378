use robust_mhe::bench::*;

fn main() {
    // Criterion 2 probe: Wiener, p_c = 0.2, beta sweep
    let config = ExperimentConfig {
        schema_version: 1,
        model: ModelSelector::Wiener,
        contamination: ContaminationConfig {
            p_c: 0.2,
            outlier: OutlierConfig::Gaussian { mean: vec![0.0, 0.0], covariance_diag: vec![1e4, 1e4] },
        },
        estimators: vec![
            EstimatorSpec { name: "kf".into(), kind: EstimatorKind::Kf },
            EstimatorSpec { name: "mhe".into(), kind: EstimatorKind::Mhe {
                horizon: 1, stage_cost: StageCostConfig::Standard, arrival_filter: ArrivalFilterConfig::Kf } },
            EstimatorSpec { name: "beta-mhe".into(), kind: EstimatorKind::Mhe {
                horizon: 1, stage_cost: StageCostConfig::Beta { beta: 1e-4 }, arrival_filter: ArrivalFilterConfig::Kf } },
        ],
        n_trials: 30,
        n_steps: 200,
        base_seed: 2024,
        beta_grid: Some(vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1]),
        pc_grid: None,
    };
    let expanded = expand_beta_grid(&config).unwrap();
    let t0 = std::time::Instant::now();
    let results = run_experiment(&expanded, None).unwrap();
    println!("wiener sweep took {:.1}s", t0.elapsed().as_secs_f64());
    for s in summarize(&results) {
        println!("{:16} ok={} failed={} mean_rmse={:?} std={:?} ms={:?}",
            s.estimator, s.n_ok, s.n_failed, s.mean_rmse, s.std_rmse, s.mean_step_ms);
    }
}
