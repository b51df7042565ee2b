//! Permutation-invariant ensemble encoder built from multihead attention
//! blocks: input perceptron, two self-attention blocks, pooling by attention
//! from a trainable seed, two more self-attention blocks, flattening and an
//! output perceptron.

mod layers;

pub use layers::{Activation, Linear, Mlp, ParamBuilder, ParamList};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real, RngStream};

/// Attention heads per block.
pub const HEADS: usize = 8;
/// Width of every attention block.
pub const LATENT: usize = 64;
/// Rows of the trainable pooling seed.
pub const SEED_LEN: usize = 16;
/// Size of the encoding `f_v`.
pub const ENCODING_DIM: usize = 64;

/// Multihead attention without biases; head `r` uses columns
/// `r*d_k..(r+1)*d_k` of the query, key and value projections.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiHead {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHead {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, heads: usize) -> Self {
        let q = pb.weight(&format!("{name}.q"), dim, dim, 1.0);
        let k = pb.weight(&format!("{name}.k"), dim, dim, 1.0);
        let v = pb.weight(&format!("{name}.v"), dim, dim, 1.0);
        let o = pb.weight(&format!("{name}.o"), dim, dim, 1.0);
        Self { q, k, v, o, heads, dim }
    }

    /// Row `j` of head `r`: `sum_k softmax_k(<Q_r u_j, K_r w_k>) V_r w_k`;
    /// heads are concatenated and projected by `W^O`.
    pub fn forward<'t, T: Real>(&self, p: &[Var<'t, T>], u: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
        let segments = vec![(u.shape().0, w.shape().0)];
        self.forward_segments(p, u, w, segments)
    }

    /// Independent attention within each `(rows of u, rows of w)` segment.
    pub fn forward_segments<'t, T: Real>(
        &self,
        p: &[Var<'t, T>],
        u: Var<'t, T>,
        w: Var<'t, T>,
        segments: Vec<(usize, usize)>,
    ) -> Result<Var<'t, T>> {
        let q = u.matmul(p[self.q])?;
        let k = w.matmul(p[self.k])?;
        let v = w.matmul(p[self.v])?;
        u.tape().attention(q, k, v, self.heads, segments)?.matmul(p[self.o])
    }
}

/// Cross-attention block `LN_1(u_1 + FFN(u_1))` with `u_1 = LN_2(u + A(u, w))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cab {
    pub attn: MultiHead,
    pub ln2: (usize, usize),
    pub ffn: Mlp,
    pub ln1: (usize, usize),
}

impl Cab {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, activation: Activation) -> Self {
        let attn = MultiHead::build(pb, &format!("{name}.attn"), dim, HEADS);
        let ln2 = (pb.filled(&format!("{name}.ln2.gamma"), 1, dim, 1.0), pb.filled(&format!("{name}.ln2.beta"), 1, dim, 0.0));
        let ffn = Mlp::build(pb, &format!("{name}.ffn"), &[dim, dim, dim], activation, 1.0);
        let ln1 = (pb.filled(&format!("{name}.ln1.gamma"), 1, dim, 1.0), pb.filled(&format!("{name}.ln1.beta"), 1, dim, 0.0));
        Self { attn, ln2, ffn, ln1 }
    }

    pub fn forward<'t, T: Real>(&self, p: &[Var<'t, T>], u: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
        let segments = vec![(u.shape().0, w.shape().0)];
        self.forward_segments(p, u, w, segments)
    }

    pub fn forward_segments<'t, T: Real>(
        &self,
        p: &[Var<'t, T>],
        u: Var<'t, T>,
        w: Var<'t, T>,
        segments: Vec<(usize, usize)>,
    ) -> Result<Var<'t, T>> {
        let u1 = u.add(self.attn.forward_segments(p, u, w, segments)?)?.layer_norm(p[self.ln2.0], p[self.ln2.1])?;
        u1.add(self.ffn.forward(p, u1)?)?.layer_norm(p[self.ln1.0], p[self.ln1.1])
    }

    /// Self-attention block `C(u, u)`.
    pub fn sab<'t, T: Real>(&self, p: &[Var<'t, T>], u: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward(p, u, u)
    }
}

/// Layout of the encoder; parameter values live in a separate [`ParamList`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SetTransformer {
    pub input_dim: usize,
    pub f_in: Mlp,
    pub encoder: [Cab; 2],
    pub seed: usize,
    pub pma: Cab,
    pub decoder: [Cab; 2],
    pub f_out: Mlp,
}

impl SetTransformer {
    /// Builds the layout and initial parameters for inputs of width `input_dim`.
    pub fn new<T: Real>(input_dim: usize, activation: Activation, rng: &mut RngStream) -> (Self, ParamList<T>) {
        let mut pb = ParamBuilder::new(rng);
        let st = Self::build(&mut pb, input_dim, activation);
        (st, pb.finish())
    }

    fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, input_dim: usize, activation: Activation) -> Self {
        let f_in = Mlp::build(pb, "f_in", &[input_dim, LATENT, LATENT], activation, 1.0);
        let encoder = [Cab::build(pb, "sab1", LATENT, activation), Cab::build(pb, "sab2", LATENT, activation)];
        let seed = pb.normal("pma.seed", SEED_LEN, LATENT, 0.1);
        let pma = Cab::build(pb, "pma", LATENT, activation);
        let decoder = [Cab::build(pb, "sab3", LATENT, activation), Cab::build(pb, "sab4", LATENT, activation)];
        let f_out = Mlp::build(pb, "f_out", &[SEED_LEN * LATENT, LATENT, ENCODING_DIM], activation, 1.0);
        Self { input_dim, f_in, encoder, seed, pma, decoder, f_out }
    }

    /// Encodes the rows of `x` (`N x input_dim`) into a `1 x 64` vector.
    pub fn encode<'t, T: Real>(&self, p: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
        let n = x.shape().0;
        self.encode_batch(p, x, &[n])
    }

    /// Encodes consecutive row blocks of `x` of the given sizes separately;
    /// row `b` of the `B x 64` result belongs to block `b`.
    pub fn encode_batch<'t, T: Real>(&self, p: &[Var<'t, T>], x: Var<'t, T>, sizes: &[usize]) -> Result<Var<'t, T>> {
        let (n, d) = x.shape();
        if d != self.input_dim || sizes.is_empty() || sizes.contains(&0) || sizes.iter().sum::<usize>() != n {
            return Err(Error::ShapeMismatch {
                op: "encode_ensemble",
                detail: format!("expected nonempty blocks of {} columns covering {n} rows, got {n}x{d}", self.input_dim),
            });
        }
        let b = sizes.len();
        let own: Vec<(usize, usize)> = sizes.iter().map(|&s| (s, s)).collect();
        let mut h = self.f_in.forward(p, x)?;
        for cab in &self.encoder {
            h = cab.forward_segments(p, h, h, own.clone())?;
        }
        let seed = if b == 1 {
            p[self.seed]
        } else {
            let m = SEED_LEN * LATENT;
            p[self.seed].gather((0..b * m).map(|i| i % m).collect(), b * SEED_LEN, LATENT)?
        };
        let pooled: Vec<(usize, usize)> = sizes.iter().map(|&s| (SEED_LEN, s)).collect();
        let mut z = self.pma.forward_segments(p, seed, h, pooled)?;
        let latent = vec![(SEED_LEN, SEED_LEN); b];
        for cab in &self.decoder {
            z = cab.forward_segments(p, z, z, latent.clone())?;
        }
        self.f_out.forward(p, z.reshape(b, SEED_LEN * LATENT)?)
    }

    /// Value-only encoding of an ensemble of `(v, h(v))` rows.
    pub fn encode_ensemble<T: Real>(&self, params: &ParamList<T>, pairs: &Matrix<T>) -> Result<Vec<T>> {
        let tape = Tape::new();
        let p: Vec<Var<'_, T>> = params.values.iter().map(|m| tape.constant(m.clone())).collect();
        let x = tape.constant(pairs.clone());
        Ok(self.encode(&p, x)?.to_matrix().into_vec())
    }
}
