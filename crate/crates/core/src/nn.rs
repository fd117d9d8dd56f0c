//! Layer building blocks on top of the autograd tape.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = store.add_glorot(format!("{name}.w"), in_dim, out_dim, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), Mat::zeros(1, out_dim)));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Mat::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Mat::zeros(1, dim)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Two-layer pointwise map with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut impl Rng) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims[0], dims[1], true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims[1], dims[2], true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.fc1.forward(tape, x);
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }
}

/// Multi-head scaled dot-product attention. Queries come from one sequence,
/// keys and values from another (the same one for self-attention).
///
/// The key projection carries no bias: a key bias shifts every score of a
/// query row by the same amount and cancels in the softmax.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "width {dim} not divisible by {heads} heads");
        Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
            dim,
        }
    }

    /// Returns the attended output; per-head weight matrices (`queries ×
    /// keys`) are appended to `maps` when given.
    pub fn forward(&self, tape: &mut Tape, queries: Var, context: Var, mut maps: Option<&mut Vec<Var>>) -> Var {
        let q = self.q.forward(tape, queries);
        let k = self.k.forward(tape, context);
        let v = self.v.forward(tape, context);
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * hd, hd),
                    tape.slice_cols(k, h * hd, hd),
                    tape.slice_cols(v, h * hd, hd),
                )
            };
            let scores = tape.matmul_t(qh, false, kh, true);
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores);
            if let Some(m) = maps.as_deref_mut() {
                m.push(weights);
            }
            outs.push(tape.matmul(weights, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.o.forward(tape, merged)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`
/// with a 4× hidden expansion.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), [dim, 4 * dim, dim], rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, maps: Option<&mut Vec<Var>>) -> Var {
        let h = self.ln1.forward(tape, x);
        let a = self.attn.forward(tape, h, h, maps);
        let x = tape.add(x, a);
        let h = self.ln2.forward(tape, x);
        let m = self.mlp.forward(tape, h);
        tape.add(x, m)
    }
}

/// A stack of [`Block`]s; zero blocks is the identity.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub blocks: Vec<Block>,
    pub dim: usize,
    pub heads: usize,
}

impl TransformerStack {
    pub fn new(store: &mut ParamStore, name: &str, depth: usize, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let blocks = (0..depth)
            .map(|i| Block::new(store, &format!("{name}.block{i}"), dim, heads, rng))
            .collect();
        TransformerStack { blocks, dim, heads }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, tape: &mut Tape, mut x: Var, mut maps: Option<&mut Vec<Var>>) -> Var {
        for block in &self.blocks {
            x = block.forward(tape, x, maps.as_deref_mut());
        }
        x
    }
}
