use std::sync::Arc;

use super::*;
use crate::dynamics::{generate_dataset, BurnIn, DatasetMode, SystemSpec, TruthRun};
use crate::error::Error;
use crate::filters::{run_classic, ClassicConfig, FilterMethod, KalmanBelief};
use crate::mnmef::{Mnmef, MnmefConfig, StepOptions};
use crate::numerics::{Matrix, RngStream};

fn l96_data(count: usize, steps: usize) -> (SystemSpec<f64>, Vec<TruthRun<f64>>) {
    let spec = SystemSpec::lorenz96(1.0, 0.0).unwrap().with_burn_in(BurnIn::Fixed(200));
    let data = generate_dataset(&spec, count, steps, 3, DatasetMode::PerTrajectory).unwrap();
    (spec, data)
}

#[test]
fn single_cell_grid_matches_direct_run() {
    let (spec, data) = l96_data(3, 20);
    let grid = grid_search(&spec, &data, FilterMethod::Enkf, 10, &[1.05], &[Some(2.0)], 7).unwrap();
    let cfg = ClassicConfig::new(FilterMethod::Enkf, 10).with_alpha(1.05).with_radius(Some(2.0));
    let direct: Vec<f64> =
        data.iter().enumerate().map(|(m, t)| run_classic(&spec, t, m, &cfg, 7, false).unwrap().r_rmse(t)).collect();
    assert_eq!(grid.cells.len(), 1);
    assert_eq!(grid.best.mean, mean(&direct));
    assert_eq!(grid.best.alpha, 1.05);
}

#[test]
fn ties_prefer_smaller_alpha_then_radius() {
    // With identical truths everywhere, an unlocalized EnKF with alpha = 1
    // has equal error for every radius in a grid that disables localization.
    let cells = [
        GridCell { alpha: 1.1, radius: Some(1.0), mean: 0.5 },
        GridCell { alpha: 1.0, radius: Some(3.0), mean: 0.5 },
        GridCell { alpha: 1.0, radius: Some(2.0), mean: 0.5 },
        GridCell { alpha: 1.0, radius: None, mean: 0.5 },
        GridCell { alpha: 1.2, radius: Some(1.0), mean: 0.6 },
    ];
    let best = cells.iter().min_by(|a, b| harness::cell_order(a, b)).unwrap();
    assert_eq!((best.alpha, best.radius), (1.0, Some(2.0)));
}

#[test]
fn heatmap_has_one_row_per_cell() {
    let (spec, data) = l96_data(2, 10);
    let radii = [Some(1.0), Some(2.0), None];
    let grid = grid_search(&spec, &data, FilterMethod::Letkf, 10, &[1.0, 1.1], &radii, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("heat.csv");
    write_heatmap(&path, &grid).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "alpha,radius,mean_r_rmse");
    assert_eq!(lines.len(), 7);
    assert!(lines[3].starts_with("1.0,none,") || lines[3].starts_with("1,none,"));
    assert!(grid.cells.contains(&grid.best));
}

#[test]
fn grid_without_finite_cells_is_all_diverged() {
    let (spec, mut data) = l96_data(1, 5);
    let bad = data[0].obs.as_mut_slice();
    for x in bad {
        *x = f64::NAN;
    }
    let err = grid_search(&spec, &data, FilterMethod::Enkf, 10, &[1.0], &[None], 0).unwrap_err();
    assert!(matches!(err, Error::AllDiverged), "{err:?}");
}

#[test]
fn grid_rejects_empty_axes() {
    let (spec, data) = l96_data(1, 5);
    assert!(matches!(grid_search(&spec, &data, FilterMethod::Enkf, 10, &[], &[None], 0), Err(Error::InvalidConfig(_))));
}

#[test]
fn linear_grid_with_large_ensemble_picks_no_inflation() {
    let spec = linear_system(10, 1.0, 0.01).unwrap();
    let data = generate_dataset(&spec, 4, 40, 2, DatasetMode::PerTrajectory).unwrap();
    let grid = grid_search(&spec, &data, FilterMethod::Enkf, 400, &[1.0, 1.5, 2.0], &[None], 5).unwrap();
    assert_eq!(grid.best.alpha, 1.0);
}

#[test]
fn csv_headers_and_rows() {
    let rep = MetricReport { method: "enkf".into(), members: 10, sigma_y: 1.0, values: vec![0.5, 0.25] };
    let dir = tempfile::tempdir().unwrap();
    let mp = dir.path().join("m.csv");
    let sp = dir.path().join("s.csv");
    write_metrics(&mp, &metric_rows(&rep, "l63", 4)).unwrap();
    write_summary(&sp, &[summary_row(&rep, "l63")]).unwrap();
    let m = std::fs::read_to_string(mp).unwrap();
    let s = std::fs::read_to_string(sp).unwrap();
    assert_eq!(m.lines().collect::<Vec<_>>(), ["method,system,N,sigma_y,seed,trajectory_id,r_rmse", "enkf,l63,10,1.0,4,0,0.5", "enkf,l63,10,1.0,4,1,0.25"]);
    assert_eq!(s.lines().collect::<Vec<_>>(), ["method,system,N,sigma_y,mean,std", "enkf,l63,10,1.0,0.375,0.125"]);
}

#[test]
fn report_marks_diverged_runs() {
    let (spec, data) = l96_data(2, 5);
    let cfg = ClassicConfig::new(FilterMethod::Enkf, 10);
    let mut runs = evaluate_classic(&spec, &data, &cfg, 0).unwrap();
    runs[1].failure = Some("test".into());
    let rep = report("enkf", 10, 1.0, &runs, &data);
    assert!(rep.values[0].is_finite());
    assert_eq!(rep.diverged(), 1);
    assert!(rep.mean().is_nan());
}

#[test]
fn grouped_mnmef_evaluation_matches_single_runs() {
    let spec = Arc::new(SystemSpec::lorenz63(1.0, 0.0).unwrap().with_burn_in(BurnIn::Fixed(100)));
    let data = generate_dataset(&spec, 5, 8, 1, DatasetMode::PerTrajectory).unwrap();
    let model = Mnmef::new(spec.clone(), MnmefConfig::for_system(&spec), 2).unwrap();
    let grouped = evaluate_mnmef(&model, &data, 6, 9, StepOptions::default(), 2).unwrap();
    for (m, (g, t)) in grouped.iter().zip(&data).enumerate() {
        let single = model.run(t, m, 6, 9, StepOptions::default(), false).unwrap();
        assert_eq!(g.trajectory, m);
        let diff = g.means.sub(&single.means).unwrap().max_abs();
        assert!(diff < 1e-12, "{diff}");
    }
}

#[test]
fn kalman_track_is_exact_for_static_identity_dynamics() {
    // A = I, no process noise, full observation: the posterior after j steps
    // from N(v0, I) with unit noise has covariance I / (j + 1).
    let spec = SystemSpec::linear(Matrix::identity(2), 1.0, 0.0)
        .unwrap()
        .with_obs(crate::dynamics::ObsOperator::every(2, 1, 0).unwrap())
        .unwrap();
    let data = generate_dataset(&spec, 1, 4, 0, DatasetMode::PerTrajectory).unwrap();
    let track = kalman_track(&spec, &data[0]).unwrap();
    let t = &data[0];
    for (j, b) in track.iter().enumerate() {
        let n = (j + 2) as f64;
        let mut sum = t.initial_state().to_vec();
        for i in 1..=j + 1 {
            for (s, y) in sum.iter_mut().zip(t.observation(i)) {
                *s += y;
            }
        }
        for k in 0..2 {
            assert!((b.mean[k] - sum[k] / n).abs() < 1e-12);
            assert!((b.cov[(k, k)] - 1.0 / n).abs() < 1e-12);
        }
    }
}

#[test]
fn ensemble_w2_is_zero_on_matching_moments() {
    // Members at m +- sqrt(2) e_k reproduce N(m, I) under the 1/N covariance.
    let r = 2f64.sqrt();
    let e = Matrix::from_rows(&[vec![r, 2.0], vec![-r, 2.0], vec![0.0, 2.0 + r], vec![0.0, 2.0 - r]]).unwrap();
    let k = KalmanBelief { mean: vec![0.0, 2.0], cov: Matrix::identity(2) };
    let w = ensemble_w2(&[e.clone(), e], &[k]).unwrap();
    assert!(w.abs() < 1e-12, "{w}");
}

#[test]
fn sampling_baseline_shrinks_with_ensemble_size() {
    let k = vec![KalmanBelief { mean: vec![0.0; 4], cov: Matrix::identity(4) }; 20];
    let small = sampling_baseline(&k, 10, &mut RngStream::new(1, 0)).unwrap();
    let large = sampling_baseline(&k, 1000, &mut RngStream::new(1, 0)).unwrap();
    assert!(large < small / 4.0, "{small} {large}");
    let again = sampling_baseline(&k, 10, &mut RngStream::new(1, 0)).unwrap();
    assert_eq!(small, again);
}

#[test]
fn setting_names_round_trip() {
    for s in LinearSetting::ALL {
        assert_eq!(s.as_str().parse::<LinearSetting>().unwrap(), s);
    }
    assert!("L3".parse::<LinearSetting>().is_err());
    assert!(LinearSetting::RelativeDecay.decays() && !LinearSetting::Relative.decays());
}

#[test]
fn linear_system_rejects_odd_dimension() {
    assert!(matches!(linear_system(3, 1.0, 0.01), Err(Error::InvalidConfig(_))));
}

#[test]
fn small_linear_experiment_writes_curves() {
    let cfg = LinearExperimentConfig {
        train_trajectories: 4,
        train_steps: 5,
        test_trajectories: 2,
        test_steps: 10,
        train: crate::training::TrainConfig { epochs: 1, batch_size: 2, members: 6, ..Default::default() },
        settings: vec![LinearSetting::Relative, LinearSetting::UnnormalizedDecay],
        ..Default::default()
    };
    let out = linear_experiment(&cfg).unwrap();
    assert!(out.diverged.is_empty());
    assert_eq!(out.rows.len(), 4);
    assert_eq!(out.rows[0].epoch, 0);
    assert_eq!(out.rows[2].setting, "L2(WD)");
    // Untrained filters are identical across settings.
    assert_eq!(out.rows[0].w2, out.rows[2].w2);
    assert!(out.rows.iter().all(|r| r.w2.is_finite() && r.baseline_w2 == out.baseline_w2));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("curve.csv");
    write_curve(&p, &out.rows).unwrap();
    let text = std::fs::read_to_string(p).unwrap();
    assert_eq!(text.lines().next().unwrap(), "setting,epoch,w2,baseline_w2");
    assert_eq!(text.lines().count(), 5);
}
