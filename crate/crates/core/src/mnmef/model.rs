use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use super::params::{Bound, ParamStore, Partition};
use super::table::DistanceTable;
use crate::autodiff::{Tape, Var};
use crate::dynamics::{propagate, ObsOperator, SystemSpec, TruthRun};
use crate::error::{dim_mismatch, Error, Result};
use crate::filters::{anomalies, observe_ensemble, RunRecord, StepNoise};
use crate::numerics::{lit, Matrix, Real, RngStream};
use crate::settransformer::{Activation, Mlp, ParamBuilder, SetTransformer, ENCODING_DIM};

/// Output nonlinearity mapping the localization head into `[0, 2]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BoundedMode {
    /// `2 * logistic(x)` elementwise.
    #[default]
    Logistic,
    /// `2 * softmax(x)` over all distances.
    Softmax,
}

impl BoundedMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundedMode::Logistic => "logistic",
            BoundedMode::Softmax => "softmax",
        }
    }

    pub fn apply<'t, T: Real>(self, x: Var<'t, T>) -> Var<'t, T> {
        let two = lit::<T>(2.0);
        match self {
            BoundedMode::Logistic => x.logistic().scale(two),
            BoundedMode::Softmax => x.softmax_rows().scale(two),
        }
    }
}

impl fmt::Display for BoundedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BoundedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logistic" => Ok(BoundedMode::Logistic),
            "softmax" => Ok(BoundedMode::Softmax),
            other => Err(Error::InvalidConfig(format!("unknown bounded-layer mode `{other}`"))),
        }
    }
}

/// Architecture and run settings of the learned filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MnmefConfig {
    pub activation: Activation,
    pub bounded: BoundedMode,
    /// Hidden width of the gain, inflation and localization heads.
    pub hidden: usize,
    /// Gradient-detach horizon `J0` used in training.
    pub detach: usize,
    /// Sign-preserving magnitude clamp on members after each step.
    pub clamp: f64,
}

impl MnmefConfig {
    pub fn for_system<T: Real>(spec: &SystemSpec<T>) -> Self {
        Self {
            activation: Activation::Relu,
            bounded: BoundedMode::Logistic,
            hidden: 128,
            detach: 5,
            clamp: spec.clamp.to_f64().unwrap_or(f64::INFINITY),
        }
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "activation={}\nbounded_layer={}\nhidden={}\ndetach_horizon={}\nclamp={}\n",
            self.activation, self.bounded, self.hidden, self.detach, self.clamp
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("expected key=value, got `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("missing key `{k}`")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Format(format!("bad value for `{k}`"))) };
        Ok(Self {
            activation: get("activation")?.parse()?,
            bounded: get("bounded_layer")?.parse()?,
            hidden: num("hidden")? as usize,
            detach: num("detach_horizon")? as usize,
            clamp: num("clamp")?,
        })
    }
}

/// Switches used by ablations and the EnKF reduction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepOptions {
    /// Skip the encoder and every head: no corrections, unit localization, no inflation.
    pub zero_heads: bool,
    /// Drop only the learned inflation.
    pub zero_inflation: bool,
}

/// Transposed gain `K^T = (K2 o L2 + Gamma)^{-1} (K1 o L1)^T` (`d_y x d_v`)
/// with `K1 = a^T z / N` and `K2 = z^T z / N` for corrected anomalies `a`
/// (`N x d_v`) and `z` (`N x d_y`); `masks` holds `(L1, L2)`.
pub fn gain_transposed_on_tape<'t, T: Real>(
    a: Var<'t, T>,
    z: Var<'t, T>,
    gamma: &Matrix<T>,
    masks: Option<(Var<'t, T>, Var<'t, T>)>,
) -> Result<Var<'t, T>> {
    let tape = a.tape();
    let inv_n = T::one() / lit::<T>(a.shape().0 as f64);
    let mut k1 = a.t_matmul(z)?.scale(inv_n);
    let mut k2 = z.t_matmul(z)?.scale(inv_n);
    if let Some((l1, l2)) = masks {
        k1 = k1.mul(l1)?;
        k2 = k2.mul(l2)?;
    }
    tape.solve_spd(k2.add(tape.constant(gamma.clone()))?, k1.transpose())
}

/// Learned gain `K` (`d_v x d_y`) for a forecast ensemble, per-member
/// corrections `w` (`N x d_v`) and `zc` (`N x d_y`), and optional masks `(L1, L2)`.
pub fn learned_gain<T: Real>(
    forecast: &Matrix<T>,
    w: &Matrix<T>,
    zc: &Matrix<T>,
    obs: &ObsOperator,
    gamma: &Matrix<T>,
    masks: Option<(&Matrix<T>, &Matrix<T>)>,
) -> Result<Matrix<T>> {
    let tape = Tape::new();
    let a = tape.constant(anomalies(forecast)).add(tape.constant(w.clone()))?;
    let z = tape.constant(anomalies(&observe_ensemble(obs, forecast))).add(tape.constant(zc.clone()))?;
    let masks = masks.map(|(l1, l2)| (tape.constant(l1.clone()), tape.constant(l2.clone())));
    Ok(gain_transposed_on_tape(a, z, gamma, masks)?.to_matrix().transpose())
}

/// Layout of the learned filter for one system together with its parameters.
#[derive(Clone, Debug)]
pub struct Mnmef<T: Real = f64> {
    pub spec: Arc<SystemSpec<T>>,
    pub config: MnmefConfig,
    pub st: SetTransformer,
    pub gain: Mlp,
    pub infl: Mlp,
    /// Localization head and distance table; absent for non-spatial systems.
    pub loc: Option<(Mlp, DistanceTable)>,
    pub params: ParamStore<T>,
}

const INIT_TAG: u64 = 0x4d4e_4d45;

impl<T: Real> Mnmef<T> {
    /// Fresh parameters: uniform `+-1/sqrt(fan_in)` weights, zero biases and
    /// zero output layers on the heads, so the untrained filter is the EnKF.
    pub fn new(spec: Arc<SystemSpec<T>>, config: MnmefConfig, seed: u64) -> Result<Self> {
        if config.hidden == 0 || config.detach == 0 || !(config.clamp > 0.0) {
            return Err(Error::InvalidConfig("hidden width, detach horizon and clamp must be positive".into()));
        }
        let (d_v, d_y) = (spec.state_dim(), spec.obs_dim());
        let h = config.hidden;
        let act = config.activation;
        let mut rng = RngStream::derived(seed, &[INIT_TAG, 0]);
        let (st, st_params) = SetTransformer::new::<T>(d_v + d_y, act, &mut rng);
        let build = |idx: u64, name: &str, dims: &[usize]| {
            let mut rng = RngStream::derived(seed, &[INIT_TAG, idx]);
            let mut pb = ParamBuilder::<T>::new(&mut rng);
            let mlp = Mlp::build(&mut pb, name, dims, act, 0.0);
            (mlp, pb.finish())
        };
        let (gain, gain_p) = build(1, "gain", &[2 * d_y + d_v + ENCODING_DIM, h, h, d_v + d_y]);
        let (infl, infl_p) = build(2, "infl", &[d_v + ENCODING_DIM, h, h, d_v]);
        let (loc, loc_p) = if spec.metric.is_spatial() {
            let table = DistanceTable::new(spec.metric, &spec.obs)?;
            let (mlp, p) = build(3, "loc", &[ENCODING_DIM, h, h, table.len()]);
            (Some((mlp, table)), p)
        } else {
            (None, Default::default())
        };
        let params = ParamStore::new([st_params, gain_p, infl_p, loc_p]);
        Ok(Self { spec, config, st, gain, infl, loc, params })
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.spec.obs_dim()
    }

    /// `N_D`, or 0 without localization.
    pub fn distance_count(&self) -> usize {
        self.loc.as_ref().map_or(0, |(_, t)| t.len())
    }

    /// Learned localization weights `g` in `[0, 2]^{N_D}` for encoding `f`.
    pub fn localization_weights<'t>(&self, p: &Bound<'t, T>, f: Var<'t, T>) -> Result<Option<Var<'t, T>>> {
        match &self.loc {
            Some((mlp, _)) => Ok(Some(self.config.bounded.apply(mlp.forward(p.get(Partition::Localization), f)?))),
            None => Ok(None),
        }
    }

    /// One forecast-analysis cycle on the tape. `ens` is `N x d_v`; `noise`
    /// supplies the process and observation perturbations of every member.
    pub fn step_on_tape<'t>(
        &self,
        p: &Bound<'t, T>,
        ens: Var<'t, T>,
        noise: &StepNoise<T>,
        y: &[T],
        opts: StepOptions,
    ) -> Result<Var<'t, T>> {
        self.step_batch_on_tape(p, ens, &[noise], &[y], opts)
    }

    /// Steps `B = noise.len()` independent ensembles of equal size stacked
    /// row-wise in `ens` (`B*N x d_v`); block `b` uses `noise[b]` and `y[b]`.
    pub fn step_batch_on_tape<'t>(
        &self,
        p: &Bound<'t, T>,
        ens: Var<'t, T>,
        noise: &[&StepNoise<T>],
        y: &[&[T]],
        opts: StepOptions,
    ) -> Result<Var<'t, T>> {
        let tape = ens.tape();
        let (rows, d_v) = ens.shape();
        let d_y = self.obs_dim();
        let b = noise.len();
        if b == 0 || y.len() != b || rows % b != 0 {
            return Err(dim_mismatch("mnmef step: ensemble rows, noise and observation counts"));
        }
        let n = rows / b;
        let bad_noise = noise.iter().any(|s| s.process.rows() != n || s.obs.rows() != n);
        if d_v != self.state_dim() || y.iter().any(|v| v.len() != d_y) || bad_noise {
            return Err(dim_mismatch("mnmef step: ensemble, observation or noise shape"));
        }
        if n < 2 {
            return Err(Error::InvalidConfig("the learned filter needs at least two members".into()));
        }
        let stack = |f: &dyn Fn(&StepNoise<T>) -> &Matrix<T>, c: usize| {
            Matrix::from_fn(rows, c, |i, j| f(noise[i / n])[(i % n, j)])
        };
        let obs = &self.spec.obs;
        let fc = propagate(&self.spec, ens)?.add(tape.constant(stack(&|s| &s.process, d_v)))?;
        let hv = fc.gather((0..rows * d_y).map(|i| (i / d_y) * d_v + obs.index(i % d_y)).collect(), rows, d_y)?;
        let mut a = fc.sub(fc.block_means(n)?.repeat_rows(n)?)?;
        let mut z = hv.sub(hv.block_means(n)?.repeat_rows(n)?)?;
        let y_rep = tape.constant(Matrix::from_fn(rows, d_y, |i, l| y[i / n][l]));
        let mut encoding = None;
        if !opts.zero_heads {
            let f = self.st.encode_batch(p.get(Partition::SetTransformer), tape.concat_cols(&[fc, hv])?, &vec![n; b])?;
            let f_rep = f.repeat_rows(n)?;
            let corr = self.gain.forward(p.get(Partition::Gain), tape.concat_cols(&[fc, hv, y_rep, f_rep])?)?;
            a = a.add(corr.slice_cols(0, d_v)?)?;
            z = z.add(corr.slice_cols(d_v, d_y)?)?;
            encoding = Some((f, f_rep));
        }
        let g = match (encoding, &self.loc) {
            (Some((f, _)), Some(_)) => self.localization_weights(p, f)?,
            _ => None,
        };
        let innov = y_rep.sub(hv)?.sub(tape.constant(stack(&|s| &s.obs, d_y)))?;
        let mut updates = Vec::with_capacity(b);
        for k in 0..b {
            let masks = match (g, &self.loc) {
                (Some(g), Some((_, table))) => {
                    let gk = if b == 1 { g } else { g.slice_rows(k, 1)? };
                    Some((gk.gather(table.state_obs.clone(), d_v, d_y)?, gk.gather(table.obs_obs.clone(), d_y, d_y)?))
                }
                _ => None,
            };
            let block = |v: Var<'t, T>| if b == 1 { Ok(v) } else { v.slice_rows(k * n, n) };
            let kt = gain_transposed_on_tape(block(a)?, block(z)?, &self.spec.obs_cov, masks)?;
            updates.push(block(innov)?.matmul(kt)?);
        }
        let update = if b == 1 { updates[0] } else { tape.concat_rows(&updates)? };
        let mut out = fc.add(update)?;
        if let Some((_, f_rep)) = encoding {
            if !opts.zero_inflation {
                out = out.add(self.infl.forward(p.get(Partition::Inflation), tape.concat_cols(&[out, f_rep])?)?)?;
            }
        }
        Ok(out.clamp_abs(lit(self.config.clamp)))
    }

    /// Value-only step.
    pub fn analysis(&self, ens: &Matrix<T>, noise: &StepNoise<T>, y: &[T], opts: StepOptions) -> Result<Matrix<T>> {
        let tape = Tape::new();
        let p = if opts.zero_heads { Bound { parts: Default::default() } } else { self.params.bind(&tape, false) };
        let out = self.step_on_tape(&p, tape.constant(ens.clone()), noise, y, opts)?.to_matrix();
        Ok(out)
    }

    /// Encoding of a forecast ensemble.
    pub fn encode(&self, forecast: &Matrix<T>) -> Result<Vec<T>> {
        let pairs = Matrix::from_fn(forecast.rows(), self.state_dim() + self.obs_dim(), |i, j| {
            if j < self.state_dim() {
                forecast[(i, j)]
            } else {
                forecast[(i, self.spec.obs.index(j - self.state_dim()))]
            }
        });
        self.st.encode_ensemble(self.params.get(Partition::SetTransformer), &pairs)
    }

    /// Runs the filter over one trajectory with the same initial ensemble and
    /// noise draws as the classical filters under `seed`.
    pub fn run(
        &self,
        truth: &TruthRun<T>,
        trajectory: usize,
        members: usize,
        seed: u64,
        opts: StepOptions,
        keep_ensembles: bool,
    ) -> Result<RunRecord<T>> {
        let mut out = self.run_batch(&[truth], &[trajectory], members, seed, opts, keep_ensembles)?;
        Ok(out.remove(0))
    }
}
