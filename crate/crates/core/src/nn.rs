//! Layers shared by the encoder, bridge and decoder.

use rand::Rng;

use crate::autograd::{Graph, Mask, Var};
use crate::params::{ParamId, ParamStore};
use crate::plora::LoRAAdapter;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// `w: d_in×d_out` scaled by `1/sqrt(d_in)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.randn(format!("{name}.w"), d_in, d_out, 1.0 / (d_in as f64).sqrt(), rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), 1, d_out));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Two-layer map `W2·silu(W1·x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d_in, d_hidden, bias),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), d_hidden, d_out, bias),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.silu(h);
        self.fc2.forward(g, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.fc1.params().into_iter().chain(self.fc2.params()).collect()
    }
}

/// RMS normalization with a learnable gain.
#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub gain: ParamId,
}

impl RmsNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self { gain: store.insert(format!("{name}.gain"), Tensor::filled(1, dim, 1.0)) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.rms_norm(x, NORM_EPS);
        let gain = g.param(store, self.gain);
        g.mul_row(n, gain)
    }
}

#[derive(Clone, Copy, Default)]
pub struct AttnAdapters<'a> {
    pub q: Option<&'a LoRAAdapter>,
    pub v: Option<&'a LoRAAdapter>,
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "width {dim} not divisible into {heads} heads");
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            wq: store.randn(format!("{name}.wq"), dim, dim, std, rng),
            wk: store.randn(format!("{name}.wk"), dim, dim, std, rng),
            wv: store.randn(format!("{name}.wv"), dim, dim, std, rng),
            wo: store.randn(format!("{name}.wo"), dim, dim, std, rng),
            heads,
            dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.wq, self.wk, self.wv, self.wo]
    }

    pub fn project_q(&self, g: &mut Graph, store: &ParamStore, x: Var, lora: Option<&LoRAAdapter>) -> Var {
        project(g, store, x, self.wq, lora)
    }

    pub fn project_k(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        project(g, store, x, self.wk, None)
    }

    pub fn project_v(&self, g: &mut Graph, store: &ParamStore, x: Var, lora: Option<&LoRAAdapter>) -> Var {
        project(g, store, x, self.wv, lora)
    }

    pub fn project_out(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        project(g, store, x, self.wo, None)
    }

    /// Multi-head scaled dot-product attention over already projected
    /// `q`, `k`, `v`; returns the concatenated heads before the output
    /// projection.
    pub fn attend(&self, g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<&Mask>) -> Var {
        let dh = self.dim / self.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_t(qh, false, kh, true);
            let s = g.scale(s, inv);
            let p = g.softmax(s, mask);
            outs.push(g.matmul(p, vh));
        }
        if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xq: Var,
        xkv: Var,
        mask: Option<&Mask>,
        adapters: AttnAdapters<'_>,
    ) -> Var {
        let q = self.project_q(g, store, xq, adapters.q);
        let k = self.project_k(g, store, xkv);
        let v = self.project_v(g, store, xkv, adapters.v);
        let o = self.attend(g, q, k, v, mask);
        self.project_out(g, store, o)
    }
}

fn project(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, lora: Option<&LoRAAdapter>) -> Var {
    let wv = g.param(store, w);
    let y = g.matmul(x, wv);
    match lora {
        Some(a) => {
            let d = a.delta(g, store, x);
            g.add(y, d)
        }
        None => y,
    }
}

/// `W2·silu(W1·x + b1) + b2` with optional low-rank deltas on both projections.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden, true),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim, true),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.up.params().into_iter().chain(self.down.params()).collect()
    }

    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        lora: Option<(&LoRAAdapter, &LoRAAdapter)>,
    ) -> Var {
        let mut h = self.up.forward(g, store, x);
        if let Some((up, _)) = lora {
            let d = up.delta(g, store, x);
            h = g.add(h, d);
        }
        let h = g.silu(h);
        let mut y = self.down.forward(g, store, h);
        if let Some((_, down)) = lora {
            let d = down.delta(g, store, h);
            y = g.add(y, d);
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_head_single_key_attention_by_hand() {
        // One query over two keys, width 2, one head, identity projections.
        let mut store = ParamStore::new();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let attn = Attention {
            wq: store.insert("q", eye.clone()),
            wk: store.insert("k", eye.clone()),
            wv: store.insert("v", eye.clone()),
            wo: store.insert("o", eye),
            heads: 1,
            dim: 2,
        };
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let kv = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]));
        let out = attn.forward(&mut g, &store, q, kv, None, AttnAdapters::default());
        // scores = [1, 0] / sqrt(2); softmax; weighted sum of rows.
        let s0 = (1.0f64 / 2f64.sqrt()).exp();
        let p0 = s0 / (s0 + 1.0);
        let p1 = 1.0 - p0;
        let got = g.value(out);
        assert!((got.get(0, 0) - p0).abs() < 1e-15);
        assert!((got.get(0, 1) - 2.0 * p1).abs() < 1e-15);
    }

    #[test]
    fn heads_split_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, &mut rng, "a", 8, 4);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(5, 8, 1.0, &mut rng));
        let y = attn.forward(&mut g, &store, x, x, None, AttnAdapters::default());
        assert_eq!(g.shape(y), (5, 8));
    }
}
