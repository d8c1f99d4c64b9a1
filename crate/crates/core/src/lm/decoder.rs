//! Tiny pre-norm transformer decoder with prefix injection and P-LoRA.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{E2E_CLOSE, E2E_OPEN, EOS};
use crate::autograd::{Graph, Mask, Var};
use crate::error::{LmadError, Result};
use crate::nn::{AttnAdapters, Attention, FeedForward, Linear, RmsNorm};
use crate::params::{ParamId, ParamStore};
use crate::plora::{BranchRoute, PLoRABank};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    InputTokens,
    Adapter,
}

impl InjectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::InputTokens => "input_tokens",
            Self::Adapter => "adapter",
        }
    }
}

impl fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InjectionMode {
    type Err = LmadError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "input_tokens" => Ok(Self::InputTokens),
            "adapter" => Ok(Self::Adapter),
            other => Err(LmadError::Config(format!("unknown injection mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub max_len: usize,
    pub injection: InjectionMode,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { layers: 2, dim: 64, heads: 4, ff_mult: 4, max_len: 512, injection: InjectionMode::InputTokens }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.max_len == 0 || self.ff_mult == 0 {
            return Err(LmadError::Config("decoder sizes must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(LmadError::Config(format!("decoder width {} not divisible into {} heads", self.dim, self.heads)));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        self.dim * self.ff_mult
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_attn: RmsNorm,
    pub attn: Attention,
    pub norm_ff: RmsNorm,
    pub ff: FeedForward,
    /// `1×1` zero-initialised prefix gate (adapter injection only).
    pub gate: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct DecoderModel {
    pub cfg: DecoderConfig,
    pub vocab_size: usize,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: RmsNorm,
    pub lm_head: Linear,
}

/// Adapters applied on top of the frozen base; `None` runs the base alone.
#[derive(Clone, Copy)]
pub struct Adapters<'a> {
    pub bank: &'a PLoRABank,
    pub route: &'a BranchRoute,
}

/// Prefix vectors (already at decoder width) and the text ids.
#[derive(Clone, Copy, Debug, Default)]
pub struct Prefix {
    pub vision: Option<Var>,
    pub e2e: Option<Var>,
}

impl DecoderModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, cfg: DecoderConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let layers = (0..cfg.layers)
            .map(|l| {
                let name = format!("{prefix}.layers.{l}");
                DecoderLayer {
                    norm_attn: RmsNorm::new(store, &format!("{name}.norm_attn"), d),
                    attn: Attention::new(store, rng, &format!("{name}.attn"), d, cfg.heads),
                    norm_ff: RmsNorm::new(store, &format!("{name}.norm_ff"), d),
                    ff: FeedForward::new(store, rng, &format!("{name}.ffn"), d, cfg.d_ff()),
                    gate: (cfg.injection == InjectionMode::Adapter).then(|| store.zeros(format!("{name}.prefix_gate"), 1, 1)),
                }
            })
            .collect();
        Ok(Self {
            vocab_size,
            tok_emb: store.randn(format!("{prefix}.tok_emb"), vocab_size, d, 1.0, rng),
            pos_emb: store.randn(format!("{prefix}.pos_emb"), cfg.max_len, d, 0.1, rng),
            layers,
            final_norm: RmsNorm::new(store, &format!("{prefix}.final_norm"), d),
            lm_head: Linear::new(store, rng, &format!("{prefix}.lm_head"), d, vocab_size, false),
            cfg,
        })
    }

    /// Every base weight (embeddings, layers, head); gates excluded.
    pub fn base_params(&self) -> Vec<ParamId> {
        let mut p = vec![self.tok_emb, self.pos_emb, self.final_norm.gain];
        for l in &self.layers {
            p.extend([l.norm_attn.gain, l.norm_ff.gain]);
            p.extend(l.attn.params());
            p.extend(l.ff.params());
        }
        p.extend(self.lm_head.params());
        p
    }

    pub fn gate_params(&self) -> Vec<ParamId> {
        self.layers.iter().filter_map(|l| l.gate).collect()
    }

    fn check_prefix(&self, g: &Graph, prefix: &Prefix) -> Result<()> {
        for (v, what) in [(prefix.vision, "vision"), (prefix.e2e, "e2e")] {
            if let Some(v) = v {
                let w = g.shape(v).1;
                if w != self.cfg.dim {
                    return Err(LmadError::Shape(format!("{what} segment width {w} does not match decoder width {}", self.cfg.dim)));
                }
            }
        }
        Ok(())
    }

    /// `vision ‖ <e2e> ‖ e2e ‖ </e2e>` as one matrix, or `None` when empty.
    fn prefix_matrix(&self, g: &mut Graph, store: &ParamStore, prefix: &Prefix) -> Option<Var> {
        let mut parts = Vec::new();
        if let Some(v) = prefix.vision {
            parts.push(v);
        }
        if let Some(e) = prefix.e2e {
            let table = g.param(store, self.tok_emb);
            let open = g.gather_rows(table, &[E2E_OPEN]);
            let close = g.gather_rows(table, &[E2E_CLOSE]);
            parts.extend([open, e, close]);
        }
        match parts.len() {
            0 => None,
            1 => Some(parts[0]),
            _ => Some(g.concat_rows(&parts)),
        }
    }

    /// Logits `T×V`; row `t` predicts text token `t+1`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prefix: &Prefix,
        text: &[usize],
        adapters: Option<Adapters<'_>>,
    ) -> Result<Var> {
        let t = text.len();
        if t == 0 {
            return Err(LmadError::Input("decoder needs at least one text token".into()));
        }
        if t > self.cfg.max_len {
            return Err(LmadError::Input(format!("text length {t} exceeds max_len {}", self.cfg.max_len)));
        }
        if let Some(&bad) = text.iter().find(|&&i| i >= self.vocab_size) {
            return Err(LmadError::Input(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        self.check_prefix(g, prefix)?;
        let pre = self.prefix_matrix(g, store, prefix);
        let p = pre.map_or(0, |v| g.shape(v).0);

        let table = g.param(store, self.tok_emb);
        let tok = g.gather_rows(table, text);
        let pos_table = g.param(store, self.pos_emb);
        let pos = g.slice_rows(pos_table, 0, t);
        let text_h = g.add(tok, pos);

        match self.cfg.injection {
            InjectionMode::InputTokens => {
                let (mut h, mask) = match pre {
                    Some(pre) => (g.concat_rows(&[pre, text_h]), Mask::from_fn(p + t, p + t, |r, c| c < p || (r >= p && c <= r))),
                    None => (text_h, Mask::from_fn(t, t, |r, c| c <= r)),
                };
                for (l, layer) in self.layers.iter().enumerate() {
                    h = self.layer_forward(g, store, layer, l, h, &mask, None, adapters)?;
                }
                let h = if p > 0 { g.slice_rows(h, p, t) } else { h };
                Ok(self.head(g, store, h))
            }
            InjectionMode::Adapter => {
                let mask = Mask::from_fn(t, t, |r, c| c <= r);
                let mut h = text_h;
                for (l, layer) in self.layers.iter().enumerate() {
                    h = self.layer_forward(g, store, layer, l, h, &mask, pre, adapters)?;
                }
                Ok(self.head(g, store, h))
            }
        }
    }

    fn head(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Var {
        let h = self.final_norm.forward(g, store, h);
        self.lm_head.forward(g, store, h)
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: &DecoderLayer,
        l: usize,
        x: Var,
        mask: &Mask,
        gated_prefix: Option<Var>,
        adapters: Option<Adapters<'_>>,
    ) -> Result<Var> {
        let attn_adapters = adapters
            .map(|a| AttnAdapters { q: Some(&a.bank.shared_attn[l].q), v: Some(&a.bank.shared_attn[l].v) })
            .unwrap_or_default();
        let h = layer.norm_attn.forward(g, store, x);
        let q = layer.attn.project_q(g, store, h, attn_adapters.q);
        let k = layer.attn.project_k(g, store, h);
        let v = layer.attn.project_v(g, store, h, attn_adapters.v);
        let mut o = layer.attn.attend(g, q, k, v, Some(mask));
        if let (Some(pre), Some(gate)) = (gated_prefix, layer.gate) {
            let hp = layer.norm_attn.forward(g, store, pre);
            let kp = layer.attn.project_k(g, store, hp);
            let vp = layer.attn.project_v(g, store, hp, attn_adapters.v);
            let op = layer.attn.attend(g, q, kp, vp, None);
            let gate = g.param(store, gate);
            let op = g.mul_scalar(op, gate);
            o = g.add(o, op);
        }
        let a = layer.attn.project_out(g, store, o);
        let x = g.add(x, a);
        let h = layer.norm_ff.forward(g, store, x);
        let f = match adapters {
            Some(a) => crate::plora::plora_ffn_forward(g, store, h, &layer.ff, a.bank, l, a.route)?,
            None => layer.ff.forward_with(g, store, h, None),
        };
        Ok(g.add(x, f))
    }

    /// Greedy decoding after `prompt` until EOS or `max_new` tokens; the
    /// returned ids exclude the prompt and the EOS. `prefix_values` are
    /// re-inserted as constants in every step's graph.
    pub fn generate(
        &self,
        store: &ParamStore,
        prefix: (Option<&Tensor>, Option<&Tensor>),
        prompt: &[usize],
        max_new: usize,
        adapters: Option<Adapters<'_>>,
    ) -> Result<Vec<usize>> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if seq.len() >= self.cfg.max_len {
                break;
            }
            let mut g = Graph::new();
            let pre = Prefix { vision: prefix.0.map(|t| g.constant(t.clone())), e2e: prefix.1.map(|t| g.constant(t.clone())) };
            let logits = self.forward(&mut g, store, &pre, &seq, adapters)?;
            let last = g.value(logits).row(seq.len() - 1);
            let next = argmax(last);
            if next == EOS {
                break;
            }
            seq.push(next);
            out.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
