//! Self-checks shared by the `verify` command and the acceptance suite.

use std::fmt;
use std::sync::Arc;

use crate::autodiff::{primitive_suite, relative_error, FD_STEP};
use crate::dynamics::{generate_dataset, generate_truth, BurnIn, DatasetMode, SystemName, SystemSpec, TruthRun};
use crate::error::Result;
use crate::filters::{enkf_analysis, ensemble_mean, permute_rows, predict, StepNoise};
use crate::mnmef::{DistanceTable, Mnmef, MnmefConfig, Partition, StepOptions};
use crate::numerics::{Matrix, RngStream};
use crate::settransformer::Activation;
use crate::training::{group_gradients, training_stream, LossKind};

/// A measured quantity and the bound it must not exceed.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), value, tolerance }
    }

    pub fn passed(&self) -> bool {
        self.value <= self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {:.3e} (bound {:.1e})", self.name, self.value, self.tolerance)
    }
}

/// Systems with the member spread used for test ensembles.
fn systems() -> Result<Vec<(SystemSpec<f64>, f64)>> {
    let burn = BurnIn::Fixed(1000);
    Ok(vec![
        (SystemSpec::preset(SystemName::Lorenz63, 1.0, 0.1)?.with_burn_in(burn), 2.0),
        (SystemSpec::preset(SystemName::Lorenz96, 1.0, 0.1)?.with_burn_in(burn), 1.0),
        (SystemSpec::preset(SystemName::Ks, 1.0, 0.1)?.with_burn_in(burn), 0.5),
        (SystemSpec::preset(SystemName::Linear, 1.0, 0.1)?.with_burn_in(burn), 1.0),
    ])
}

/// Test cases around consecutive states of a truth trajectory, so that every
/// ensemble lies in the dynamically relevant region.
struct Cases {
    truth: TruthRun<f64>,
    next: usize,
}

impl Cases {
    fn new(spec: &SystemSpec<f64>, count: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(Self { truth: generate_truth(spec, count, rng)?, next: 0 })
    }

    fn draw(
        &mut self,
        spec: &SystemSpec<f64>,
        n: usize,
        spread: f64,
        rng: &mut RngStream,
    ) -> Result<(Matrix<f64>, StepNoise<f64>, Vec<f64>)> {
        let j = self.next % self.truth.steps();
        self.next += 1;
        let center = self.truth.states.row(j);
        let ens = Matrix::from_fn(n, spec.state_dim(), |_, k| center[k] + spread * rng.standard_normal::<f64>());
        let noise = StepNoise::draw(spec, n, rng)?;
        Ok((ens, noise, self.truth.observation(j + 1).to_vec()))
    }
}

/// Adds `scale * N(0, 1)` to every head parameter.
pub fn perturb_heads(model: &mut Mnmef<f64>, scale: f64, rng: &mut RngStream) {
    for p in Partition::HEADS {
        for v in &mut model.params.get_mut(p).values {
            for x in v.as_mut_slice() {
                *x += scale * rng.standard_normal::<f64>();
            }
        }
    }
}

fn active_model(spec: &SystemSpec<f64>, seed: u64, rng: &mut RngStream) -> Result<Mnmef<f64>> {
    let spec = Arc::new(spec.clone());
    let mut m = Mnmef::new(spec.clone(), MnmefConfig::for_system(&spec), seed)?;
    perturb_heads(&mut m, 0.05, rng);
    Ok(m)
}

/// Largest deviation, per system, between the learned step with its heads
/// switched off and the perturbed-observation EnKF sharing the same noise.
pub fn enkf_reduction(cases: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = RngStream::new(seed, 0x5245);
    let mut out = Vec::new();
    for (spec, scale) in systems()? {
        let m = active_model(&spec, seed, &mut rng)?;
        let mut draws = Cases::new(&spec, cases.max(1), &mut rng)?;
        let mut worst: f64 = 0.0;
        for c in 0..cases {
            let n = 2 + c % 15;
            let (ens, noise, y) = draws.draw(&spec, n, scale, &mut rng)?;
            let fc = predict(&spec, &ens, &noise.process)?;
            let expect = enkf_analysis(&fc, &y, &spec.obs, &spec.obs_cov, &noise.obs, None)?;
            let got = m.analysis(&ens, &noise, &y, StepOptions { zero_heads: true, ..Default::default() })?;
            worst = worst.max(got.sub(&expect)?.max_abs());
        }
        out.push(Check::new(format!("EnKF reduction on {} ({cases} cases)", spec.name), worst, 1e-10));
    }
    Ok(out)
}

/// Member-permutation sensitivity of the encoding and of the analysis mean.
pub fn permutation_invariance(sizes: &[usize], seed: u64) -> Result<Vec<Check>> {
    let mut rng = RngStream::new(seed, 0x5045);
    let mut out = Vec::new();
    for (spec, scale) in systems()? {
        let m = active_model(&spec, seed, &mut rng)?;
        let mut draws = Cases::new(&spec, sizes.len().max(1), &mut rng)?;
        let (mut enc, mut step): (f64, f64) = (0.0, 0.0);
        for &n in sizes {
            let (ens, noise, y) = draws.draw(&spec, n, scale, &mut rng)?;
            let perm = rng.permutation(n);
            let pens = permute_rows(&ens, &perm);
            let (e, ep) = (m.encode(&ens)?, m.encode(&pens)?);
            enc = enc.max(e.iter().zip(&ep).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            let a = ensemble_mean(&m.analysis(&ens, &noise, &y, StepOptions::default())?);
            let b = ensemble_mean(&m.analysis(&pens, &noise.permuted(&perm), &y, StepOptions::default())?);
            step = step.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
        out.push(Check::new(format!("encoding permutation invariance on {} (N={sizes:?})", spec.name), enc, 1e-12));
        out.push(Check::new(format!("analysis-mean permutation invariance on {} (N={sizes:?})", spec.name), step, 1e-12));
    }
    Ok(out)
}

/// Finite-difference agreement of every tape primitive over `seeds` draws.
pub fn primitive_gradients(seeds: u64) -> Result<Vec<Check>> {
    Ok(primitive_suite(seeds)?
        .into_iter()
        .map(|(name, err)| Check::new(format!("gradient of `{name}`"), err, 1e-5))
        .collect())
}

/// Finite-difference agreement, per parameter partition, of the gradient of
/// a two-step trajectory loss on Lorenz '63. The model uses smooth
/// activations so that central differences are meaningful.
pub fn end_to_end_gradient(seed: u64) -> Result<Vec<Check>> {
    let spec = SystemSpec::preset(SystemName::Lorenz63, 1.0, 0.0)?.with_burn_in(BurnIn::Fixed(300));
    let truths = generate_dataset(&spec, 2, 2, seed, DatasetMode::PerTrajectory)?;
    let refs: Vec<_> = truths.iter().collect();
    let cfg = MnmefConfig { activation: Activation::Logistic, ..MnmefConfig::for_system(&spec) };
    let mut m = Mnmef::new(Arc::new(spec), cfg, seed)?;
    let mut rng = RngStream::new(seed, 0x4645);
    perturb_heads(&mut m, 0.05, &mut rng);
    let members = 4;
    let streams = || (0..refs.len()).map(|k| training_stream(seed, 1, k)).collect::<Vec<_>>();
    let loss = |mm: &Mnmef<f64>| -> Result<f64> {
        let (l, _) = group_gradients(mm, &refs, streams(), members, 2, LossKind::Relative, 1.0, false)?;
        Ok(l.iter().sum())
    };
    let (_, g) = group_gradients(&m, &refs, streams(), members, 2, LossKind::Relative, 1.0, true)?;
    let g = g.expect("gradients were requested");
    let mut out = Vec::new();
    for p in Partition::ALL {
        let dirs: Vec<Matrix<f64>> = m
            .params
            .get(p)
            .values
            .iter()
            .map(|v| Matrix::from_fn(v.rows(), v.cols(), |_, _| rng.standard_normal::<f64>()))
            .collect();
        let ad: f64 = g[p.index()]
            .iter()
            .zip(&dirs)
            .map(|(a, u)| a.as_slice().iter().zip(u.as_slice()).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        let shifted = |s: f64| -> Result<f64> {
            let mut mm = m.clone();
            for (v, u) in mm.params.get_mut(p).values.iter_mut().zip(&dirs) {
                *v = v.add(&u.scale(s * FD_STEP))?;
            }
            loss(&mm)
        };
        let fd = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * FD_STEP);
        out.push(Check::new(format!("two-step loss gradient, {p} partition"), relative_error(ad, fd), 1e-4));
    }
    Ok(out)
}

/// Shape of the Lorenz '96 distance table and localization matrices.
pub fn l96_distance_table() -> Result<Vec<Check>> {
    let spec = SystemSpec::<f64>::preset(SystemName::Lorenz96, 1.0, 0.0)?;
    let t = DistanceTable::new(spec.metric, &spec.obs)?;
    let expect: Vec<f64> = (0..=20).map(f64::from).collect();
    let g = vec![1.0; t.len()];
    let (l1, l2) = (t.l1(&g), t.l2(&g));
    let ok = t.len() == 21 && t.distances == expect && (l1.rows(), l1.cols()) == (40, 10) && (l2.rows(), l2.cols()) == (10, 10);
    Ok(vec![Check::new("Lorenz '96 distance table: 21 distances 0..=20, L1 40x10, L2 10x10", if ok { 0.0 } else { 1.0 }, 0.0)])
}

/// Every fast check.
pub fn quick_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = enkf_reduction(50, seed)?;
    out.extend(permutation_invariance(&[2, 5, 16, 33], seed)?);
    out.extend(primitive_gradients(20)?);
    out.extend(end_to_end_gradient(seed)?);
    out.extend(l96_distance_table()?);
    Ok(out)
}
