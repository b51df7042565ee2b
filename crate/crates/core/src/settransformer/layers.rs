use std::fmt;
use std::str::FromStr;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::numerics::{lit, Matrix, Real, RngStream};

/// Hidden-layer nonlinearity of the perceptrons.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Relu,
    Logistic,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Logistic => "logistic",
        }
    }

    pub fn apply<'t, T: Real>(self, x: Var<'t, T>) -> Var<'t, T> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Logistic => x.logistic(),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "logistic" | "sigmoid" => Ok(Activation::Logistic),
            other => Err(Error::InvalidConfig(format!("unknown activation `{other}`"))),
        }
    }
}

/// Named parameter matrices in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamList<T: Real = f64> {
    pub names: Vec<String>,
    pub values: Vec<Matrix<T>>,
}

impl<T: Real> ParamList<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.values.iter().map(|m| m.rows() * m.cols()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.values.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    /// Overwrites all values from a flat array in storage order.
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.count() {
            return Err(Error::Format(format!("expected {} parameters, found {}", self.count(), flat.len())));
        }
        let mut off = 0;
        for m in &mut self.values {
            let n = m.rows() * m.cols();
            m.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn map_values(&mut self, f: impl Fn(T) -> T) {
        for m in &mut self.values {
            for x in m.as_mut_slice() {
                *x = f(*x);
            }
        }
    }
}

/// Records parameter shapes and initial values while a layout is built.
pub struct ParamBuilder<'r, T: Real = f64> {
    list: ParamList<T>,
    rng: &'r mut RngStream,
    prefix: String,
}

impl<'r, T: Real> ParamBuilder<'r, T> {
    pub fn new(rng: &'r mut RngStream) -> Self {
        Self { list: ParamList { names: Vec::new(), values: Vec::new() }, rng, prefix: String::new() }
    }

    /// Sets the name prefix for subsequent entries.
    pub fn scope(&mut self, prefix: &str) {
        self.prefix = prefix.to_string();
    }

    fn push(&mut self, name: &str, m: Matrix<T>) -> usize {
        self.list.names.push(format!("{}{}", self.prefix, name));
        self.list.values.push(m);
        self.list.values.len() - 1
    }

    /// `fan_in x fan_out` weight, uniform on `+-1/sqrt(fan_in)` times `gain`.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> usize {
        let bound = gain / (fan_in as f64).sqrt();
        let m = Matrix::from_fn(fan_in, fan_out, |_, _| lit::<T>(bound * (2.0 * self.rng.uniform() - 1.0)));
        self.push(name, m)
    }

    pub fn filled(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> usize {
        self.push(name, Matrix::from_fn(rows, cols, |_, _| lit(value)))
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, scale: f64) -> usize {
        let m = Matrix::from_fn(rows, cols, |_, _| lit::<T>(scale * self.rng.standard_normal::<f64>()));
        self.push(name, m)
    }

    pub fn finish(self) -> ParamList<T> {
        self.list
    }
}

/// Affine map `x W + b` applied to each row of `x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let w = pb.weight(&format!("{name}.w"), fan_in, fan_out, gain);
        let b = pb.filled(&format!("{name}.b"), 1, fan_out, 0.0);
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<'t, T: Real>(&self, p: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(p[self.w])?.add_row(p[self.b])
    }
}

/// Perceptron `L_k f(... f(L_1 x))` with the activation between layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// Layer widths `dims[0] -> dims[1] -> ...`; `last_gain` scales the
    /// initial output-layer weights.
    pub fn build<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        dims: &[usize],
        activation: Activation,
        last_gain: f64,
    ) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { last_gain } else { 1.0 };
                Linear::build(pb, &format!("{name}.{i}"), dims[i], dims[i + 1], gain)
            })
            .collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }

    pub fn forward<'t, T: Real>(&self, p: &[Var<'t, T>], mut x: Var<'t, T>) -> Result<Var<'t, T>> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(p, x)?;
            if i + 1 < self.layers.len() {
                x = self.activation.apply(x);
            }
        }
        Ok(x)
    }
}
