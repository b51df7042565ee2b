use std::sync::Arc;

use super::*;
use crate::autodiff::Tape;
use crate::dynamics::{generate_dataset, rotation_blocks, BurnIn, DatasetMode, IndexMetric, ObsOperator, SystemSpec};
use crate::filters::{enkf_analysis, run_classic, ClassicConfig, FilterMethod, enkf_gain_transposed, permute_rows, predict, StepNoise};
use crate::numerics::{sym_eig, Matrix, RngStream};
use crate::settransformer::Activation;

fn systems() -> Vec<(SystemSpec<f64>, f64)> {
    vec![
        (SystemSpec::lorenz63(1.0, 0.0).unwrap(), 8.0),
        (SystemSpec::lorenz96(1.0, 0.1).unwrap(), 3.0),
        (SystemSpec::linear(rotation_blocks(&[0.1, 0.2, 0.3]), 1.0, 0.1).unwrap(), 1.0),
    ]
}

fn model(spec: SystemSpec<f64>, seed: u64) -> Mnmef<f64> {
    let cfg = MnmefConfig::for_system(&spec);
    Mnmef::new(Arc::new(spec), cfg, seed).unwrap()
}

/// Adds `scale * N(0, 1)` to every head parameter so the heads are active.
fn perturb_heads(m: &mut Mnmef<f64>, scale: f64, rng: &mut RngStream) {
    for p in Partition::HEADS {
        for v in &mut m.params.get_mut(p).values {
            for x in v.as_mut_slice() {
                *x += scale * rng.standard_normal::<f64>();
            }
        }
    }
}

fn case(spec: &SystemSpec<f64>, n: usize, scale: f64, rng: &mut RngStream) -> (Matrix<f64>, StepNoise<f64>, Vec<f64>) {
    let ens = Matrix::from_fn(n, spec.state_dim(), |_, _| scale * rng.standard_normal::<f64>());
    let noise = StepNoise::draw(spec, n, rng).unwrap();
    let y: Vec<f64> = (0..spec.obs_dim()).map(|_| scale * rng.standard_normal::<f64>()).collect();
    (ens, noise, y)
}

fn max_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.sub(b).unwrap().max_abs()
}

#[test]
fn l96_distance_table() {
    let spec = SystemSpec::<f64>::lorenz96(1.0, 0.0).unwrap();
    let t = DistanceTable::new(spec.metric, &spec.obs).unwrap();
    assert_eq!(t.len(), 21);
    assert_eq!(t.distances, (0..=20).map(f64::from).collect::<Vec<_>>());
    let g: Vec<f64> = (0..21).map(|i| i as f64).collect();
    let (l1, l2) = (t.l1(&g), t.l2(&g));
    assert_eq!((l1.rows(), l1.cols()), (40, 10));
    assert_eq!((l2.rows(), l2.cols()), (10, 10));
    for k in 0..40 {
        for l in 0..10 {
            assert_eq!(l1[(k, l)], IndexMetric::Periodic { period: 40 }.distance(k, 4 * l).unwrap());
        }
    }
    assert!(DistanceTable::new(IndexMetric::None, &spec.obs).is_err());
}

#[test]
fn zero_heads_reduce_to_enkf() {
    let mut rng = RngStream::new(1, 0);
    for (spec, scale) in systems() {
        let mut m = model(spec.clone(), 3);
        perturb_heads(&mut m, 0.1, &mut rng);
        for _ in 0..10 {
            let (ens, noise, y) = case(&spec, 7, scale, &mut rng);
            let expect =
                enkf_analysis(&predict(&spec, &ens, &noise.process).unwrap(), &y, &spec.obs, &spec.obs_cov, &noise.obs, None)
                    .unwrap();
            let got = m.analysis(&ens, &noise, &y, StepOptions { zero_heads: true, ..Default::default() }).unwrap();
            assert!(max_diff(&got, &expect) <= 1e-10, "{}", spec.name);
        }
    }
}

#[test]
fn fresh_model_is_the_enkf() {
    let mut rng = RngStream::new(2, 0);
    for (spec, scale) in systems() {
        let m = model(spec.clone(), 4);
        let (ens, noise, y) = case(&spec, 6, scale, &mut rng);
        let a = m.analysis(&ens, &noise, &y, StepOptions::default()).unwrap();
        let b = m.analysis(&ens, &noise, &y, StepOptions { zero_heads: true, ..Default::default() }).unwrap();
        assert!(max_diff(&a, &b) <= 1e-10, "{}", spec.name);
    }
}

#[test]
fn members_are_permutation_equivariant() {
    let mut rng = RngStream::new(3, 0);
    for (spec, scale) in systems() {
        let mut m = model(spec.clone(), 5);
        perturb_heads(&mut m, 0.05, &mut rng);
        for n in [2, 5, 16] {
            let (ens, noise, y) = case(&spec, n, scale, &mut rng);
            let perm = rng.permutation(n);
            let out = m.analysis(&ens, &noise, &y, StepOptions::default()).unwrap();
            let out_p = m.analysis(&permute_rows(&ens, &perm), &noise.permuted(&perm), &y, StepOptions::default()).unwrap();
            assert!(max_diff(&out_p, &permute_rows(&out, &perm)) < 1e-12, "{} N={n}", spec.name);
        }
    }
}

#[test]
fn localization_weights_lie_in_range() {
    let spec = SystemSpec::<f64>::lorenz96(1.0, 0.0).unwrap();
    let mut rng = RngStream::new(4, 0);
    for bounded in [BoundedMode::Logistic, BoundedMode::Softmax] {
        let cfg = MnmefConfig { bounded, ..MnmefConfig::for_system(&spec) };
        let mut m = Mnmef::new(Arc::new(spec.clone()), cfg, 1).unwrap();
        perturb_heads(&mut m, 5.0, &mut rng);
        for scale in [1.0, 1e3] {
            let tape = Tape::new();
            let p = m.params.bind(&tape, false);
            let f = tape.constant(Matrix::from_fn(1, 64, |_, _| scale * rng.standard_normal::<f64>()));
            let g = m.localization_weights(&p, f).unwrap().unwrap().to_matrix();
            assert_eq!(g.cols(), 21);
            assert!(g.as_slice().iter().all(|x| (0.0..=2.0).contains(x)));
        }
    }
    assert!(model(SystemSpec::lorenz63(1.0, 0.0).unwrap(), 0).loc.is_none());
}

#[test]
fn gain_reduces_to_enkf_gain() {
    let mut rng = RngStream::new(5, 0);
    let o = ObsOperator::every(6, 2, 0).unwrap();
    let ens = Matrix::from_fn(5, 6, |_, _| rng.standard_normal::<f64>());
    let gamma = Matrix::scaled_identity(3, 0.5);
    let zero_w = Matrix::zeros(5, 6);
    let zero_z = Matrix::zeros(5, 3);
    let k = learned_gain(&ens, &zero_w, &zero_z, &o, &gamma, None).unwrap();
    let expect = enkf_gain_transposed(&ens, &o, &gamma, None).unwrap().transpose();
    assert!(max_diff(&k, &expect) < 1e-12);
    let (ones1, ones2) = (Matrix::from_fn(6, 3, |_, _| 1.0), Matrix::from_fn(3, 3, |_, _| 1.0));
    let kl = learned_gain(&ens, &zero_w, &zero_z, &o, &gamma, Some((&ones1, &ones2))).unwrap();
    assert!(max_diff(&kl, &expect) < 1e-12);
}

#[test]
fn cancelled_observation_anomalies_leave_k1_over_gamma() {
    let mut rng = RngStream::new(6, 0);
    let o = ObsOperator::every(4, 2, 0).unwrap();
    let ens = Matrix::from_fn(6, 4, |_, _| rng.standard_normal::<f64>());
    let w = Matrix::from_fn(6, 4, |_, _| rng.standard_normal::<f64>());
    let hv = crate::filters::observe_ensemble(&o, &ens);
    let zc = crate::filters::anomalies(&hv).scale(-1.0);
    let gamma = Matrix::from_diag(&[0.5, 2.0]);
    let k = learned_gain(&ens, &w, &zc, &o, &gamma, None).unwrap();
    // K2 = 0 and K1 = sum (a + w) x 0 / N = 0, so K = K1 Gamma^{-1} = 0
    assert!(k.max_abs() < 1e-14);
    // cancelling only the first observed coordinate zeroes that gain column
    let z1 = Matrix::from_fn(6, 2, |i, l| if l == 0 { zc[(i, l)] } else { 0.0 });
    let k1 = learned_gain(&ens, &w, &z1, &o, &gamma, None).unwrap();
    assert!(k1.col(0).iter().all(|x| x.abs() < 1e-14));
    assert!(k1.col(1).iter().any(|x| x.abs() > 1e-6));
}

#[test]
fn gain_matches_scalar_loop() {
    let mut rng = RngStream::new(7, 0);
    let o = ObsOperator::new(2, 1, 0, 1).unwrap();
    let ens = Matrix::from_fn(3, 2, |_, _| rng.standard_normal::<f64>());
    let w = Matrix::from_fn(3, 2, |_, _| rng.standard_normal::<f64>());
    let zc = Matrix::from_fn(3, 1, |_, _| rng.standard_normal::<f64>());
    let gamma = Matrix::from_diag(&[0.3]);
    let k = learned_gain(&ens, &w, &zc, &o, &gamma, None).unwrap();
    let m = [(ens[(0, 0)] + ens[(1, 0)] + ens[(2, 0)]) / 3.0, (ens[(0, 1)] + ens[(1, 1)] + ens[(2, 1)]) / 3.0];
    let (mut k1, mut k2) = ([0.0; 2], 0.0);
    for n in 0..3 {
        let z = ens[(n, 0)] - m[0] + zc[(n, 0)];
        for c in 0..2 {
            k1[c] += (ens[(n, c)] - m[c] + w[(n, c)]) * z / 3.0;
        }
        k2 += z * z / 3.0;
    }
    for c in 0..2 {
        assert!((k[(c, 0)] - k1[c] / (k2 + 0.3)).abs() < 1e-13);
    }
}

#[test]
fn shifted_gain_matrix_is_bounded_below_by_gamma() {
    let mut rng = RngStream::new(8, 0);
    for _ in 0..20 {
        let z = Matrix::from_fn(5, 4, |_, _| 3.0 * rng.standard_normal::<f64>());
        let gamma = Matrix::from_diag(&[0.2, 1.0, 0.7, 3.0]);
        let k2 = z.t_matmul(&z).unwrap().scale(0.2).add(&gamma).unwrap();
        let lo = sym_eig(&k2).unwrap().values[0];
        assert!(lo >= 0.2 - 1e-12);
    }
}

#[test]
fn members_are_clamped_with_sign() {
    let spec = SystemSpec::<f64>::lorenz96(0.01, 0.0).unwrap();
    let m = model(spec.clone(), 0);
    let mut rng = RngStream::new(9, 0);
    let (ens, noise, _) = case(&spec, 8, 3.0, &mut rng);
    let y: Vec<f64> = (0..10).map(|l| if l % 2 == 0 { 1e4 } else { -1e4 }).collect();
    let out = m.analysis(&ens, &noise, &y, StepOptions::default()).unwrap();
    assert!(out.as_slice().iter().all(|x| x.abs() <= 20.0));
    assert!(out.as_slice().contains(&20.0) && out.as_slice().contains(&-20.0));
}

#[test]
fn gradients_match_finite_differences_per_partition() {
    // smooth activation: a finite-difference step may straddle a ReLU kink
    let spec = SystemSpec::<f64>::lorenz96_with(4, 2, 0, 1.0, 0.1).unwrap();
    let cfg = MnmefConfig { activation: Activation::Logistic, ..MnmefConfig::for_system(&spec) };
    let mut m = Mnmef::new(Arc::new(spec.clone()), cfg, 2).unwrap();
    let mut rng = RngStream::new(10, 0);
    perturb_heads(&mut m, 0.1, &mut rng);
    let ens0 = Matrix::from_fn(3, 4, |_, _| 2.0 * rng.standard_normal::<f64>());
    let steps: Vec<_> = (0..2).map(|_| case(&spec, 3, 2.0, &mut rng)).collect();
    let model = &m;
    let errs = partition_gradient_errors(
        &m.params,
        |tape, p| {
            let mut ens = tape.constant(ens0.clone());
            let mut loss = tape.constant(Matrix::zeros(1, 1));
            for (truth, noise, y) in &steps {
                ens = model.step_on_tape(p, ens, noise, y, StepOptions::default())?;
                let target = tape.constant(Matrix::from_fn(1, 4, |_, k| truth[(0, k)]));
                loss = loss.add(ens.mean_rows().sub(target)?.sq_sum()?)?;
            }
            Ok(loss)
        },
        &mut rng,
    )
    .unwrap();
    for (p, e) in Partition::ALL.iter().zip(errs) {
        assert!(e < 1e-4, "{p}: {e:e}");
    }
}

#[test]
fn observation_feeds_the_corrections() {
    let spec = SystemSpec::<f64>::lorenz63(1.0, 0.0).unwrap();
    let mut m = model(spec.clone(), 6);
    let mut rng = RngStream::new(11, 0);
    perturb_heads(&mut m, 0.1, &mut rng);
    let (ens, noise, y) = case(&spec, 5, 5.0, &mut rng);
    let opts = StepOptions { zero_inflation: true, ..Default::default() };
    let a = m.analysis(&ens, &noise, &y, opts).unwrap();
    let zero = m.analysis(&ens, &noise, &y, StepOptions { zero_heads: true, ..Default::default() }).unwrap();
    let y2 = vec![y[0] + 1e-3];
    let b = m.analysis(&ens, &noise, &y2, opts).unwrap();
    let c = m.analysis(&ens, &noise, &y2, StepOptions { zero_heads: true, ..Default::default() }).unwrap();
    // the response to y differs from the plain gain response, so y enters the corrections
    let learned = b.sub(&a).unwrap();
    let plain = c.sub(&zero).unwrap();
    assert!(max_diff(&learned, &plain) > 1e-9);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let spec = SystemSpec::<f64>::lorenz96(1.0, 0.0).unwrap();
    let mut m = model(spec.clone(), 7);
    let mut rng = RngStream::new(12, 0);
    perturb_heads(&mut m, 0.1, &mut rng);
    save_checkpoint(&m, &path).unwrap();
    let header = read_checkpoint_header(&path).unwrap();
    assert_eq!(header.system, "lorenz96");
    assert_eq!((header.state_dim, header.obs_dim, header.encoding_dim), (40, 10, 64));
    assert_eq!(header.partition_sizes, m.params.sizes());
    let back = load_checkpoint(&path, Arc::new(spec.clone())).unwrap();
    assert_eq!(back.params.parts, m.params.parts);
    assert_eq!(back.config, m.config);
    let (ens, noise, y) = case(&spec, 6, 3.0, &mut rng);
    let a = m.analysis(&ens, &noise, &y, StepOptions::default()).unwrap();
    let b = back.analysis(&ens, &noise, &y, StepOptions::default()).unwrap();
    assert_eq!(a, b);
    let other = SystemSpec::<f64>::lorenz63(1.0, 0.0).unwrap();
    assert!(load_checkpoint(&path, Arc::new(other)).is_err());
    std::fs::write(&path, b"garbage").unwrap();
    assert!(load_checkpoint(&path, Arc::new(spec)).is_err());
}

#[test]
fn one_parameter_set_serves_every_ensemble_size() {
    let spec = SystemSpec::<f64>::lorenz63(1.0, 0.0).unwrap();
    let mut m = model(spec.clone(), 8);
    let mut rng = RngStream::new(13, 0);
    perturb_heads(&mut m, 0.05, &mut rng);
    for n in [2, 5, 40] {
        let (ens, noise, y) = case(&spec, n, 5.0, &mut rng);
        let out = m.analysis(&ens, &noise, &y, StepOptions::default()).unwrap();
        assert_eq!((out.rows(), out.cols()), (n, 3));
        assert!(out.is_finite());
    }
}

#[test]
fn batched_runs_match_single_runs() {
    let spec = SystemSpec::<f64>::lorenz96(1.0, 0.1).unwrap().with_burn_in(BurnIn::Fixed(100));
    let mut m = model(spec.clone(), 3);
    let mut rng = RngStream::new(21, 0);
    perturb_heads(&mut m, 0.02, &mut rng);
    let truths = generate_dataset(&spec, 3, 6, 4, DatasetMode::PerTrajectory).unwrap();
    let refs: Vec<_> = truths.iter().collect();
    let batch = m.run_batch(&refs, &[0, 1, 2], 6, 9, StepOptions::default(), false).unwrap();
    for (k, t) in truths.iter().enumerate() {
        let one = m.run(t, k, 6, 9, StepOptions::default(), false).unwrap();
        assert!(!one.diverged());
        assert_eq!(batch[k].means.rows(), 7);
        assert!(max_diff(&batch[k].means, &one.means) < 1e-12);
    }
}

#[test]
fn zero_head_runs_equal_enkf_runs() {
    let spec = SystemSpec::<f64>::lorenz63(1.0, 0.0).unwrap().with_burn_in(BurnIn::Fixed(500));
    let m = model(spec.clone(), 1);
    let truths = generate_dataset(&spec, 2, 20, 6, DatasetMode::PerTrajectory).unwrap();
    let refs: Vec<_> = truths.iter().collect();
    let opts = StepOptions { zero_heads: true, ..Default::default() };
    let ours = m.run_batch(&refs, &[0, 1], 10, 5, opts, false).unwrap();
    for (k, t) in truths.iter().enumerate() {
        let cfg = ClassicConfig::new(FilterMethod::Enkf, 10);
        let enkf = run_classic(&spec, t, k, &cfg, 5, false).unwrap();
        assert!(max_diff(&ours[k].means, &enkf.means) < 1e-10);
    }
}
