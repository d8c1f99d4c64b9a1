//! Prompt-augmented, adapter-projected end-to-end tokens.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{flatten_traj, BackboneFeatures, E2EBackboneOutput, Instance, Selection};
use crate::autograd::{Graph, Var};
use crate::error::{LmadError, Result};
use crate::lm::vocab::Vocabulary;
use crate::nn::{AttnAdapters, Attention, Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::scene::geometry::{Box2DDepth, CameraName};
use crate::scene::motion::derive_motion_text;
use crate::scene::render::MAX_DEPTH;
use crate::scene::ObjectClass;
use crate::taxonomy::Group;
use crate::tensor::Tensor;

pub const NEAR_BAND: f64 = 15.0;
pub const MID_BAND: f64 = 35.0;
pub const DET_PROMPT_INPUTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Identity,
    Linear,
    Mlp,
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Linear => "linear",
            Self::Mlp => "mlp",
        })
    }
}

impl FromStr for AdapterKind {
    type Err = LmadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "linear" => Ok(Self::Linear),
            "mlp" => Ok(Self::Mlp),
            other => Err(LmadError::Config(format!("unknown adapter kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeConfig {
    pub n_ins: usize,
    /// Width of the backbone's fixed encodings.
    pub enc_dim: usize,
    pub noise: f64,
    pub detach: bool,
    pub adapter: AdapterKind,
    pub numeric_prompts: bool,
    pub text_prompts: bool,
    pub heads: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            n_ins: 10,
            enc_dim: 32,
            noise: 0.5,
            detach: true,
            adapter: AdapterKind::Mlp,
            numeric_prompts: true,
            text_prompts: true,
            heads: 4,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n_ins == 0 {
            return Err(LmadError::Config("n_ins must be at least 1".into()));
        }
        if self.enc_dim == 0 {
            return Err(LmadError::Config("enc_dim must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(LmadError::Config(format!("e2e noise must be finite and non-negative, got {}", self.noise)));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(LmadError::Config(format!("bridge width {d} not divisible into {} heads", self.heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum GroupAdapter {
    Identity,
    Linear(Linear),
    Mlp(Mlp),
}

impl GroupAdapter {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, kind: AdapterKind, d: usize) -> Self {
        match kind {
            AdapterKind::Identity => Self::Identity,
            AdapterKind::Linear => Self::Linear(Linear::new(store, rng, name, d, d, true)),
            AdapterKind::Mlp => Self::Mlp(Mlp::new(store, rng, name, d, d, d, true)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        match self {
            Self::Identity => x,
            Self::Linear(l) => l.forward(g, store, x),
            Self::Mlp(m) => m.forward(g, store, x),
        }
    }

    /// Weight of a linear adapter.
    pub fn linear_weight(&self) -> Option<ParamId> {
        match self {
            Self::Linear(l) => Some(l.w),
            _ => None,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Self::Identity => Vec::new(),
            Self::Linear(l) => l.params(),
            Self::Mlp(m) => m.params(),
        }
    }
}

/// End-to-end tokens `det^N_ins ‖ mot^N_ins ‖ ego` (or a visible subset).
#[derive(Clone, Debug)]
pub struct E2ETokenBlock {
    pub tokens: Var,
    pub groups: Vec<Group>,
    pub detached: bool,
}

impl E2ETokenBlock {
    /// Keeps only tokens whose group is in `visible`, preserving order.
    pub fn restrict(&self, g: &mut Graph, visible: &[Group]) -> Option<E2ETokenBlock> {
        let idx: Vec<usize> = (0..self.groups.len()).filter(|&i| visible.contains(&self.groups[i])).collect();
        if idx.is_empty() {
            return None;
        }
        let tokens = if idx.len() == self.groups.len() { self.tokens } else { g.gather_rows(self.tokens, &idx) };
        Some(E2ETokenBlock { tokens, groups: idx.iter().map(|&i| self.groups[i]).collect(), detached: self.detached })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

pub fn distance_band(depth: f64) -> &'static str {
    if depth < NEAR_BAND {
        "near"
    } else if depth < MID_BAND {
        "mid"
    } else {
        "far"
    }
}

pub fn det_prompt_text(class: ObjectClass, cam: CameraName, depth: f64) -> String {
    format!("a {} at {}, {}", class.noun(), cam.label(), distance_band(depth))
}

/// Group-specific prompt sentence for one instance (`det`, `mot`) or the ego plan.
pub fn text_prompt_string_for(group: Group, out: &E2EBackboneOutput, instance: Option<&Instance>) -> Result<String> {
    match (group, instance) {
        (Group::Det, Some(i)) => Ok(det_prompt_text(i.class_label, i.view.cam, i.view.depth)),
        (Group::Mot, Some(i)) => {
            let mut path = vec![[i.box3d.center[0], i.box3d.center[1]]];
            path.extend_from_slice(&i.traj);
            derive_motion_text(&path, i.box3d.yaw)
        }
        (Group::Ego, _) => {
            let mut path = vec![[0.0, 0.0]];
            path.extend_from_slice(&out.ego.plan);
            derive_motion_text(&path, 0.0)
        }
        (g, None) => Err(LmadError::Input(format!("{g} prompt needs an instance"))),
    }
}

pub fn det_prompt_inputs(b: &Box2DDepth) -> [f64; DET_PROMPT_INPUTS] {
    let [u0, v0, u1, v1] = b.box2d;
    [u0, v0, u1, v1, (b.depth / MAX_DEPTH).min(1.0)]
}

#[derive(Clone, Debug)]
pub struct E2EBridge {
    pub cfg: BridgeConfig,
    pub dim: usize,
    pub horizon: usize,
    pub det_prompt: Mlp,
    pub mot_prompt: Mlp,
    pub ego_prompt: Mlp,
    pub text_attn: Attention,
    pub text_query: ParamId,
    pub a_det: GroupAdapter,
    pub a_mot: GroupAdapter,
    pub a_ego: GroupAdapter,
    pub null_det: ParamId,
    pub null_mot: ParamId,
}

impl E2EBridge {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        cfg: BridgeConfig,
        dim: usize,
        horizon: usize,
    ) -> Result<Self> {
        cfg.validate(dim)?;
        let std = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            det_prompt: Mlp::new(store, rng, &format!("{prefix}.det_prompt"), DET_PROMPT_INPUTS, dim, dim, true),
            mot_prompt: Mlp::new(store, rng, &format!("{prefix}.mot_prompt"), 2 * horizon, dim, dim, true),
            ego_prompt: Mlp::new(store, rng, &format!("{prefix}.ego_prompt"), 2 * horizon, dim, dim, true),
            text_attn: Attention::new(store, rng, &format!("{prefix}.text_attn"), dim, cfg.heads),
            text_query: store.randn(format!("{prefix}.text_query"), 1, dim, std, rng),
            a_det: GroupAdapter::new(store, rng, &format!("{prefix}.a_det"), cfg.adapter, dim),
            a_mot: GroupAdapter::new(store, rng, &format!("{prefix}.a_mot"), cfg.adapter, dim),
            a_ego: GroupAdapter::new(store, rng, &format!("{prefix}.a_ego"), cfg.adapter, dim),
            null_det: store.randn(format!("{prefix}.null_det"), 1, dim, std, rng),
            null_mot: store.randn(format!("{prefix}.null_mot"), 1, dim, std, rng),
            cfg,
            dim,
            horizon,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        p.extend(self.det_prompt.params());
        p.extend(self.mot_prompt.params());
        p.extend(self.ego_prompt.params());
        p.extend(self.text_attn.params());
        p.push(self.text_query);
        p.extend(self.a_det.params());
        p.extend(self.a_mot.params());
        p.extend(self.a_ego.params());
        p.push(self.null_det);
        p.push(self.null_mot);
        p
    }

    /// `MLP(flattened waypoints)`, waypoints relative to `origin`.
    pub fn numerical_prompt(&self, g: &mut Graph, store: &ParamStore, group: Group, rows: &[Vec<f64>]) -> Result<Var> {
        let (map, width) = match group {
            Group::Det => (&self.det_prompt, DET_PROMPT_INPUTS),
            Group::Mot => (&self.mot_prompt, 2 * self.horizon),
            Group::Ego => (&self.ego_prompt, 2 * self.horizon),
        };
        if let Some(bad) = rows.iter().find(|r| r.len() != width) {
            return Err(LmadError::Shape(format!("{group} prompt input has {} values, expected {width}", bad.len())));
        }
        let x = g.constant(Tensor::from_rows(rows));
        Ok(map.forward(g, store, x))
    }

    /// `MHA(F_q, embedded prompt tokens)`, one `1×D` vector.
    pub fn text_prompt(&self, g: &mut Graph, store: &ParamStore, embedding: ParamId, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(LmadError::Input("empty text prompt".into()));
        }
        let table = g.param(store, embedding);
        let emb = g.gather_rows(table, ids);
        let q = g.param(store, self.text_query);
        Ok(self.text_attn.forward(g, store, q, emb, None, AttnAdapters::default()))
    }

    fn check_width(&self, g: &Graph, v: Var, what: &str) -> Result<()> {
        let w = g.shape(v).1;
        if w != self.dim {
            return Err(LmadError::Shape(format!("{what} width {w} does not match decoder width {}", self.dim)));
        }
        Ok(())
    }

    /// Builds the full token block. `feats` must come from
    /// [`super::backbone::BackboneHeads::features`] over `selection.real()`.
    pub fn assemble(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        embedding: ParamId,
        vocab: &Vocabulary,
        out: &E2EBackboneOutput,
        selection: &Selection,
        feats: &BackboneFeatures,
    ) -> Result<E2ETokenBlock> {
        if selection.slots.len() != self.cfg.n_ins {
            return Err(LmadError::Shape(format!("{} instance slots, expected {}", selection.slots.len(), self.cfg.n_ins)));
        }
        let real: Vec<&Instance> = selection.real().map(|i| &out.instances[i]).collect();
        let pads = selection.pads();
        let detach = self.cfg.detach;
        let prep = |g: &mut Graph, v: Var| if detach { g.detach(v) } else { v };
        let f_det = feats.f_det.map(|v| prep(g, v));
        let f_mot = feats.f_mot.map(|v| prep(g, v));
        let f_ego = prep(g, feats.f_ego);
        for (v, what) in [(f_det, "det feature"), (f_mot, "mot feature"), (Some(f_ego), "ego feature")] {
            if let Some(v) = v {
                self.check_width(g, v, what)?;
            }
        }

        let det = match f_det {
            Some(f) => {
                let rows: Vec<Vec<f64>> = real.iter().map(|i| det_prompt_inputs(&i.view).to_vec()).collect();
                Some(self.prompted(g, store, embedding, vocab, out, Group::Det, f, &rows, &real)?)
            }
            None => None,
        };
        let mot = match f_mot {
            Some(f) => {
                let rows: Vec<Vec<f64>> =
                    real.iter().map(|i| flatten_traj(&i.traj, [i.box3d.center[0], i.box3d.center[1]])).collect();
                Some(self.prompted(g, store, embedding, vocab, out, Group::Mot, f, &rows, &real)?)
            }
            None => None,
        };
        let ego_rows = vec![flatten_traj(&out.ego.plan, [0.0, 0.0])];
        let ego = self.prompted(g, store, embedding, vocab, out, Group::Ego, f_ego, &ego_rows, &[])?;

        let det = self.with_pads(g, store, det, self.null_det, pads);
        let mot = self.with_pads(g, store, mot, self.null_mot, pads);
        let det = self.a_det.forward(g, store, det);
        let mot = self.a_mot.forward(g, store, mot);
        let ego = self.a_ego.forward(g, store, ego);
        let tokens = g.concat_rows(&[det, mot, ego]);
        let n = self.cfg.n_ins;
        let mut groups = vec![Group::Det; n];
        groups.extend(vec![Group::Mot; n]);
        groups.push(Group::Ego);
        Ok(E2ETokenBlock { tokens, groups, detached: detach })
    }

    #[allow(clippy::too_many_arguments)]
    fn prompted(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        embedding: ParamId,
        vocab: &Vocabulary,
        out: &E2EBackboneOutput,
        group: Group,
        feature: Var,
        numeric_rows: &[Vec<f64>],
        instances: &[&Instance],
    ) -> Result<Var> {
        let mut x = feature;
        if self.cfg.numeric_prompts {
            let n = self.numerical_prompt(g, store, group, numeric_rows)?;
            x = g.add(x, n);
        }
        if self.cfg.text_prompts {
            let targets: Vec<Option<&Instance>> =
                if group == Group::Ego { vec![None] } else { instances.iter().map(|&i| Some(i)).collect() };
            let mut parts = Vec::with_capacity(targets.len());
            for inst in targets {
                let text = text_prompt_string_for(group, out, inst)?;
                parts.push(self.text_prompt(g, store, embedding, &vocab.encode(&text))?);
            }
            let t = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
            x = g.add(x, t);
        }
        Ok(x)
    }

    fn with_pads(&self, g: &mut Graph, store: &ParamStore, real: Option<Var>, null: ParamId, pads: usize) -> Var {
        if pads == 0 {
            return real.expect("selection without pads has real instances");
        }
        let null = g.param(store, null);
        let pad = g.gather_rows(null, &vec![0; pads]);
        match real {
            Some(r) => g.concat_rows(&[r, pad]),
            None => pad,
        }
    }

    /// Prompt sentences in token order, for transcripts.
    pub fn prompt_strings(&self, out: &E2EBackboneOutput, selection: &Selection) -> Result<Vec<(Group, String)>> {
        let mut v = Vec::new();
        for group in [Group::Det, Group::Mot] {
            for slot in &selection.slots {
                let s = match slot {
                    Some(i) => text_prompt_string_for(group, out, Some(&out.instances[*i]))?,
                    None => "<null>".to_string(),
                };
                v.push((group, s));
            }
        }
        v.push((Group::Ego, text_prompt_string_for(Group::Ego, out, None)?));
        Ok(v)
    }
}
