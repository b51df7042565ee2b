use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::settransformer::ParamList;

/// The four disjoint groups of trainable parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    SetTransformer,
    Gain,
    Inflation,
    Localization,
}

impl Partition {
    pub const ALL: [Partition; 4] =
        [Partition::SetTransformer, Partition::Gain, Partition::Inflation, Partition::Localization];
    pub const HEADS: [Partition; 3] = [Partition::Gain, Partition::Inflation, Partition::Localization];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::SetTransformer => "st",
            Partition::Gain => "gain",
            Partition::Inflation => "infl",
            Partition::Localization => "loc",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Partition::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter partition `{s}`")))
    }
}

/// Partitioned parameters with a freeze flag per partition.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f64> {
    pub parts: [ParamList<T>; 4],
    pub frozen: [bool; 4],
}

impl<T: Real> ParamStore<T> {
    pub fn new(parts: [ParamList<T>; 4]) -> Self {
        Self { parts, frozen: [false; 4] }
    }

    pub fn get(&self, p: Partition) -> &ParamList<T> {
        &self.parts[p.index()]
    }

    pub fn get_mut(&mut self, p: Partition) -> &mut ParamList<T> {
        &mut self.parts[p.index()]
    }

    pub fn set_frozen(&mut self, p: Partition, frozen: bool) {
        self.frozen[p.index()] = frozen;
    }

    pub fn is_frozen(&self, p: Partition) -> bool {
        self.frozen[p.index()]
    }

    /// Scalar count per partition.
    pub fn sizes(&self) -> [usize; 4] {
        Partition::ALL.map(|p| self.get(p).count())
    }

    pub fn count(&self) -> usize {
        self.sizes().iter().sum()
    }

    /// Scalar count of the partitions that are not frozen.
    pub fn trainable_count(&self) -> usize {
        Partition::ALL.iter().filter(|p| !self.is_frozen(**p)).map(|p| self.get(*p).count()).sum()
    }

    /// Places every matrix on `tape`: as a differentiable leaf when
    /// `trainable` is set and its partition is not frozen, else as a constant.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let parts = Partition::ALL.map(|p| {
            let grad = trainable && !self.is_frozen(p);
            self.get(p)
                .values
                .iter()
                .map(|m| if grad { tape.param(m.clone()) } else { tape.constant(m.clone()) })
                .collect()
        });
        Bound { parts }
    }
}

/// Tape handles for every parameter matrix, in [`ParamStore`] order.
pub struct Bound<'t, T: Real = f64> {
    pub parts: [Vec<Var<'t, T>>; 4],
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn get(&self, p: Partition) -> &[Var<'t, T>] {
        &self.parts[p.index()]
    }
}
