//! Acceptance suite: prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Numeric arguments restrict the run to those criteria.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use ensfilter::dynamics::{generate_dataset, BurnIn, DatasetMode, SystemName, SystemSpec, TruthRun};
use ensfilter::eval::{
    evaluate_classic, evaluate_mnmef, grid_search, linear_system, report, LinearTestSet,
};
use ensfilter::filters::{ClassicConfig, FilterMethod};
use ensfilter::mnmef::{load_checkpoint, save_checkpoint, Mnmef, MnmefConfig, Partition, StepOptions};
use ensfilter::training::{finetune, pretrain, EpochRecord, TrainConfig};
use ensfilter::verify::{self, Check};
use ensfilter::Result;

const TRAIN_TRAJ: usize = 256;
const TRAIN_LEN: usize = 30;
const MEMBERS: usize = 10;
const EPOCHS: usize = 50;
const TEST_TRAJ: usize = 16;
const TEST_LEN: usize = 100;
const EVAL_SEED: u64 = 5;
const SEEDS: [u64; 3] = [0, 1, 2];

fn l63() -> SystemSpec<f64> {
    SystemSpec::preset(SystemName::Lorenz63, 1.0, 0.0).unwrap().with_burn_in(BurnIn::Fixed(10_000))
}

fn train_data(seed: u64) -> Vec<TruthRun<f64>> {
    generate_dataset(&l63(), TRAIN_TRAJ, TRAIN_LEN, 100 + seed, DatasetMode::PerTrajectory).unwrap()
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig { members: MEMBERS, epochs: EPOCHS, batch_size: 32, group_size: 32, seed, ..TrainConfig::default() }
}

struct Trained {
    model: Mnmef<f64>,
    log: Vec<EpochRecord>,
}

/// Desk-scale pretraining of the Lorenz '63 filter.
fn train(seed: u64) -> Result<Trained> {
    let spec = Arc::new(l63());
    let mut model = Mnmef::new(spec.clone(), MnmefConfig::for_system(&spec), seed)?;
    let t0 = Instant::now();
    let log = pretrain(&mut model, &train_data(seed), &train_config(seed), |_, _| Ok(()))?;
    say(&format!("      (pretrained seed {seed} in {:.0}s)", t0.elapsed().as_secs_f64()));
    Ok(Trained { model, log })
}

struct Suite {
    only: Vec<usize>,
    trained: Vec<Option<Trained>>,
    test: Vec<TruthRun<f64>>,
    failures: Vec<usize>,
}

fn say(line: &str) {
    let mut out = std::io::stdout();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

fn checks_line(checks: &[Check]) -> (bool, String) {
    let worst = checks.iter().filter(|c| !c.passed()).map(ToString::to_string).collect::<Vec<_>>();
    let max = checks.iter().map(|c| c.value).fold(0.0, f64::max);
    if worst.is_empty() {
        (true, format!("{} checks, worst {max:.2e}", checks.len()))
    } else {
        (false, worst.join("; "))
    }
}

impl Suite {
    fn wants(&self, k: usize) -> bool {
        self.only.is_empty() || self.only.contains(&k)
    }

    /// Trains seed `SEEDS[i]` on first use.
    fn model(&mut self, i: usize) -> Result<&Trained> {
        if self.trained[i].is_none() {
            self.trained[i] = Some(train(SEEDS[i])?);
        }
        Ok(self.trained[i].as_ref().expect("trained above"))
    }

    /// Mean error over the test set and the number of diverged runs.
    fn mean_error(&self, model: &Mnmef<f64>, members: usize, opts: StepOptions) -> Result<(f64, usize)> {
        let runs = evaluate_mnmef(model, &self.test, members, EVAL_SEED, opts, TEST_TRAJ)?;
        let rep = report("mnmef", members, 1.0, &runs, &self.test);
        Ok((rep.mean(), rep.diverged()))
    }

    fn run(&mut self, k: usize, title: &str, f: impl FnOnce(&mut Self) -> Result<(bool, String)>) {
        if !self.wants(k) {
            return;
        }
        let t0 = Instant::now();
        let (ok, detail) = match f(self) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let status = if ok { "PASS" } else { "FAIL" };
        say(&format!("{status} [{k:>2}] {title}: {detail} ({:.1}s)", t0.elapsed().as_secs_f64()));
        if !ok {
            self.failures.push(k);
        }
    }
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let test = generate_dataset(&l63(), TEST_TRAJ, TEST_LEN, 900, DatasetMode::PerTrajectory).unwrap();
    let mut s = Suite { only, trained: vec![None, None, None], test, failures: Vec::new() };

    s.run(1, "EnKF reduction, 50 cases per system", |_| Ok(checks_line(&verify::enkf_reduction(50, 0)?)));

    s.run(2, "permutation invariance, N in {2,5,16,33}", |_| {
        Ok(checks_line(&verify::permutation_invariance(&[2, 5, 16, 33], 0)?))
    });

    s.run(3, "N=10 checkpoint runs at N in {5,15,20,40,60,100} on L63", |s| {
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("n10.bin");
        save_checkpoint(&s.model(0)?.model, &path)?;
        let model = load_checkpoint(&path, Arc::new(l63()))?;
        let mut parts = Vec::new();
        let mut ok = true;
        for n in [5, 15, 20, 40, 60, 100] {
            let runs = evaluate_mnmef(&model, &s.test, n, EVAL_SEED, StepOptions::default(), TEST_TRAJ)?;
            let shapes = runs.iter().zip(&s.test).all(|(r, t)| r.means.rows() == t.steps() + 1 && r.means.cols() == 3);
            let rep = report("mnmef", n, 1.0, &runs, &s.test);
            ok &= shapes && rep.diverged() == 0;
            parts.push(format!("N={n}: {:.4}", rep.mean()));
        }
        Ok((ok, parts.join(", ")))
    });

    s.run(4, "finite-difference gradients", |_| {
        let prim = verify::primitive_gradients(20)?;
        let e2e = verify::end_to_end_gradient(0)?;
        let (ok_p, dp) = checks_line(&prim);
        let (ok_e, de) = checks_line(&e2e);
        Ok((ok_p && ok_e, format!("primitives (< 1e-5): {dp}; two-step loss (< 1e-4): {de}")))
    });

    s.run(5, "linear system, zero heads, N=1024 vs sampling baseline", |_| {
        let spec = Arc::new(linear_system(10, 1.0, 0.01)?);
        let set = LinearTestSet::new(spec.clone(), TEST_TRAJ, 100, 0)?;
        let model = Mnmef::new(spec.clone(), MnmefConfig::for_system(&spec), 0)?;
        let opts = StepOptions { zero_heads: true, ..Default::default() };
        let ours = set.mnmef_w2(&model, 1024, EVAL_SEED, opts)?;
        let base = set.baseline(1024, EVAL_SEED)?;
        Ok((ours <= 2.0 * base, format!("time-averaged W2 {ours:.4} vs baseline {base:.4} (ratio {:.3}, bound 2)", ours / base)))
    });

    s.run(6, "L63 pretraining loss reduction over 3 seeds", |s| {
        let mut reductions = Vec::new();
        for i in 0..SEEDS.len() {
            let log = &s.model(i)?.log;
            let (first, last) = (log[0].train_loss, log[log.len() - 1].train_loss);
            reductions.push(1.0 - last / first);
        }
        let mean = reductions.iter().sum::<f64>() / reductions.len() as f64;
        let per: Vec<String> = reductions.iter().map(|r| format!("{:.1}%", 100.0 * r)).collect();
        Ok((mean >= 0.3, format!("mean reduction {:.1}% (per seed {}; bound 30%)", 100.0 * mean, per.join(", "))))
    });

    s.run(7, "trained L63 filter vs tuned EnKF (N=10)", |s| {
        let alphas: Vec<f64> = (0..=10).map(|i| 1.0 + 0.05 * i as f64).collect();
        let grid = grid_search(&l63(), &s.test, FilterMethod::Enkf, MEMBERS, &alphas, &[None], EVAL_SEED)?;
        let model = s.model(0)?.model.clone();
        let (ours, _) = s.mean_error(&model, MEMBERS, StepOptions::default())?;
        let ratio = ours / grid.best.mean;
        Ok((ratio <= 1.1, format!("{ours:.4} vs EnKF {:.4} at alpha={} (ratio {ratio:.3}, bound 1.1)", grid.best.mean, grid.best.alpha)))
    });

    s.run(8, "fine-tuning at N'=40", |s| {
        let before = s.model(0)?.model.clone();
        let mut tuned = before.clone();
        let cfg = train_config(SEEDS[0]).for_finetune(40, 20);
        finetune(&mut tuned, &train_data(SEEDS[0]), &cfg, |_, _| Ok(()))?;
        let same = |p: Partition| tuned.params.get(p).flatten().iter().zip(before.params.get(p).flatten()).all(|(a, b)| a.to_bits() == b.to_bits());
        let st_fixed = same(Partition::SetTransformer);
        let heads_changed = Partition::HEADS.iter().any(|&p| !before.params.get(p).is_empty() && !same(p));
        let (pre, _) = s.mean_error(&before, 40, StepOptions::default())?;
        let (post, _) = s.mean_error(&tuned, 40, StepOptions::default())?;
        let ok = st_fixed && heads_changed && post <= 1.05 * pre;
        Ok((ok, format!("encoder bitwise unchanged: {st_fixed}, heads changed: {heads_changed}, error at N=40 {pre:.4} -> {post:.4} (bound +5%)")))
    });

    s.run(9, "L96 distance table", |_| Ok(checks_line(&verify::l96_distance_table()?)));

    s.run(10, "tuned LETKF vs untuned EnKF on L96 (N=10)", |_| {
        let spec = SystemSpec::preset(SystemName::Lorenz96, 1.0, 0.0)?.with_burn_in(BurnIn::Fixed(10_000));
        let data = generate_dataset(&spec, TEST_TRAJ, TEST_LEN, 901, DatasetMode::PerTrajectory)?;
        let alphas = [1.0, 1.05, 1.1, 1.15, 1.2];
        let radii = [Some(1.0), Some(2.0), Some(3.0), Some(4.0)];
        let grid = grid_search(&spec, &data, FilterMethod::Letkf, MEMBERS, &alphas, &radii, EVAL_SEED)?;
        let runs = evaluate_classic(&spec, &data, &ClassicConfig::new(FilterMethod::Enkf, MEMBERS), EVAL_SEED)?;
        let rep = report("enkf", MEMBERS, 1.0, &runs, &data);
        // A diverged run counts as infinite error.
        let untuned = if rep.diverged() > 0 { f64::INFINITY } else { rep.mean() };
        let finite: Vec<f64> = rep.values.iter().copied().filter(|v| v.is_finite()).collect();
        let finite_mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
        let best = grid.best;
        Ok((
            best.mean < untuned,
            format!(
                "LETKF {:.4} at alpha={}, r={} vs EnKF {untuned:.4} ({} of {TEST_TRAJ} runs diverged, mean of the rest {finite_mean:.4})",
                best.mean,
                best.alpha,
                best.radius.unwrap_or(f64::INFINITY),
                rep.diverged()
            ),
        ))
    });

    s.run(11, "zeroed learned inflation on the trained L63 filter", |s| {
        let model = s.model(0)?.model.clone();
        let (full, _) = s.mean_error(&model, MEMBERS, StepOptions::default())?;
        let (ablated, nan) = s.mean_error(&model, MEMBERS, StepOptions { zero_inflation: true, ..Default::default() })?;
        Ok((ablated > full && nan == 0 && ablated.is_finite(), format!("{full:.4} -> {ablated:.4}, {nan} of {TEST_TRAJ} runs non-finite")))
    });

    if !s.failures.is_empty() {
        say(&format!("failed criteria: {:?}", s.failures));
        std::process::exit(1);
    }
}
