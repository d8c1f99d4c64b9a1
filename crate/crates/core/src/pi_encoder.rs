//! Preliminary interaction encoder: decoupled vision and camera queries with
//! alternating view-level (odd) and scene-level (even) attention blocks.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mask, Var};
use crate::error::{LmadError, Result};
use crate::nn::{AttnAdapters, Attention, FeedForward, Linear, RmsNorm};
use crate::params::{ParamId, ParamStore};
use crate::scene::MultiViewFeatures;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Qformer,
    Direct,
}

impl EncoderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Qformer => "qformer",
            Self::Direct => "direct",
        }
    }
}

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderMode {
    type Err = LmadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qformer" => Ok(Self::Qformer),
            "direct" => Ok(Self::Direct),
            other => Err(LmadError::Config(format!("unknown encoder mode {other:?} (expected qformer or direct)"))),
        }
    }
}

/// Block parity with 1-based numbering: block 1 is odd.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Odd,
    Even,
}

impl Parity {
    pub fn of_index(zero_based: usize) -> Self {
        if zero_based % 2 == 0 {
            Self::Odd
        } else {
            Self::Even
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PIConfig {
    pub num_queries: usize,
    pub num_cameras: usize,
    pub dim: usize,
    pub feature_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub mode: EncoderMode,
}

impl Default for PIConfig {
    fn default() -> Self {
        Self {
            num_queries: 16,
            num_cameras: 6,
            dim: 64,
            feature_dim: crate::scene::render::FEATURE_DIM,
            blocks: 4,
            heads: 4,
            ff_mult: 2,
            mode: EncoderMode::Qformer,
        }
    }
}

impl PIConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(LmadError::Config(m));
        if self.num_queries == 0 || self.num_cameras == 0 || self.dim == 0 || self.feature_dim == 0 {
            return err("encoder sizes must be positive".into());
        }
        if self.blocks == 0 || self.blocks % 2 != 0 {
            return err(format!("encoder block count must be even and positive, got {}", self.blocks));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return err(format!("encoder width {} not divisible into {} heads", self.dim, self.heads));
        }
        if self.ff_mult == 0 {
            return err("encoder ff_mult must be positive".into());
        }
        Ok(())
    }
}

/// `combined[i + N_q·j] = Q[i] + Q_c[j]`, group-major, with labels `j`.
pub fn broadcast_combine(q: &Tensor, qc: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if q.cols() != qc.cols() {
        return Err(LmadError::Shape(format!("query width {} vs camera query width {}", q.cols(), qc.cols())));
    }
    let mut out = Tensor::zeros(q.rows() * qc.rows(), q.cols());
    let mut groups = Vec::with_capacity(out.rows());
    for j in 0..qc.rows() {
        for i in 0..q.rows() {
            let row = out.row_mut(j * q.rows() + i);
            for ((o, a), b) in row.iter_mut().zip(q.row(i)).zip(qc.row(j)) {
                *o = a + b;
            }
            groups.push(j);
        }
    }
    Ok((out, groups))
}

fn broadcast_combine_var(g: &mut Graph, q: Var, qc: Var) -> Var {
    let n_c = g.shape(qc).0;
    let parts: Vec<Var> = (0..n_c)
        .map(|j| {
            let cj = g.slice_rows(qc, j, 1);
            g.add_row(q, cj)
        })
        .collect();
    g.concat_rows(&parts)
}

/// Odd blocks allow attention only within a camera group; even blocks allow all pairs.
pub fn group_mask(parity: Parity, row_groups: &[usize], col_groups: &[usize]) -> Mask {
    match parity {
        Parity::Odd => Mask::from_fn(row_groups.len(), col_groups.len(), |r, c| row_groups[r] == col_groups[c]),
        Parity::Even => Mask::full(row_groups.len(), col_groups.len()),
    }
}

#[derive(Clone, Debug)]
pub struct PIBlock {
    pub parity: Parity,
    pub norm_self: RmsNorm,
    pub self_attn: Attention,
    /// Present in qformer mode only.
    pub cross: Option<(RmsNorm, Attention)>,
    pub norm_ff: RmsNorm,
    pub ff: FeedForward,
}

/// Image tokens already projected to the encoder width, with their camera labels.
#[derive(Clone, Copy, Debug)]
pub struct ImageTokens<'a> {
    pub tokens: Var,
    pub groups: &'a [usize],
}

impl PIBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &PIConfig, parity: Parity) -> Self {
        let d = cfg.dim;
        let cross = (cfg.mode == EncoderMode::Qformer).then(|| {
            (RmsNorm::new(store, &format!("{name}.norm_cross"), d), Attention::new(store, rng, &format!("{name}.cross"), d, cfg.heads))
        });
        Self {
            parity,
            norm_self: RmsNorm::new(store, &format!("{name}.norm_self"), d),
            self_attn: Attention::new(store, rng, &format!("{name}.self"), d, cfg.heads),
            cross,
            norm_ff: RmsNorm::new(store, &format!("{name}.norm_ff"), d),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, d * cfg.ff_mult),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.norm_self.gain, self.norm_ff.gain];
        p.extend(self.self_attn.params());
        if let Some((n, a)) = &self.cross {
            p.push(n.gain);
            p.extend(a.params());
        }
        p.extend(self.ff.params());
        p
    }

    /// Pre-norm residual block. `image` is required when the block has a
    /// cross-attention sublayer.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        groups: &[usize],
        image: Option<ImageTokens<'_>>,
    ) -> Result<Var> {
        let self_mask = group_mask(self.parity, groups, groups);
        let h = self.norm_self.forward(g, store, x);
        let a = self.self_attn.forward(g, store, h, h, Some(&self_mask), AttnAdapters::default());
        let mut x = g.add(x, a);
        if let Some((norm, attn)) = &self.cross {
            let img = image.ok_or_else(|| LmadError::Shape("cross-attention block needs image tokens".into()))?;
            if let Some(&missing) = groups.iter().find(|gr| !img.groups.contains(gr)) {
                return Err(LmadError::Shape(format!("no image features for camera group {missing}")));
            }
            let cross_mask = group_mask(self.parity, groups, img.groups);
            let h = norm.forward(g, store, x);
            let a = attn.forward(g, store, h, img.tokens, Some(&cross_mask), AttnAdapters::default());
            x = g.add(x, a);
        }
        let h = self.norm_ff.forward(g, store, x);
        let f = self.ff.forward_with(g, store, h, None);
        Ok(g.add(x, f))
    }
}

#[derive(Clone, Debug)]
pub struct PIEncoder {
    pub cfg: PIConfig,
    /// General vision queries `N_q × d`; absent in direct mode.
    pub queries: Option<ParamId>,
    /// Camera queries `N_c × d`, shared by every block; camera embeddings in direct mode.
    pub camera_queries: ParamId,
    pub input_proj: Linear,
    pub blocks: Vec<PIBlock>,
}

impl PIEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, cfg: PIConfig) -> Result<Self> {
        cfg.validate()?;
        let std = 1.0 / (cfg.dim as f64).sqrt();
        let queries =
            (cfg.mode == EncoderMode::Qformer).then(|| store.randn(format!("{prefix}.queries"), cfg.num_queries, cfg.dim, std, rng));
        let camera_queries = store.randn(format!("{prefix}.camera_queries"), cfg.num_cameras, cfg.dim, std, rng);
        let input_proj = Linear::new(store, rng, &format!("{prefix}.input_proj"), cfg.feature_dim, cfg.dim, true);
        let blocks = (0..cfg.blocks)
            .map(|i| PIBlock::new(store, rng, &format!("{prefix}.blocks.{i}"), &cfg, Parity::of_index(i)))
            .collect();
        Ok(Self { cfg, queries, camera_queries, input_proj, blocks })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.queries.into_iter().chain([self.camera_queries]).collect();
        p.extend(self.input_proj.params());
        for b in &self.blocks {
            p.extend(b.params());
        }
        p
    }

    pub fn num_tokens(&self, cells: usize) -> usize {
        match self.cfg.mode {
            EncoderMode::Qformer => self.cfg.num_queries * self.cfg.num_cameras,
            EncoderMode::Direct => self.cfg.num_cameras * cells,
        }
    }

    fn check_grids(&self, g: &Graph, grids: &[Var]) -> Result<usize> {
        if grids.len() != self.cfg.num_cameras {
            return Err(LmadError::Shape(format!("expected {} camera grids, got {}", self.cfg.num_cameras, grids.len())));
        }
        let cells = g.shape(grids[0]).0;
        for (c, &v) in grids.iter().enumerate() {
            let (r, w) = g.shape(v);
            if r != cells || w != self.cfg.feature_dim {
                return Err(LmadError::Shape(format!(
                    "camera {c} grid is {r}x{w}, expected {cells}x{}",
                    self.cfg.feature_dim
                )));
            }
        }
        Ok(cells)
    }

    /// Encodes per-camera grids given as graph nodes; `only` restricts the
    /// stack to blocks of one parity.
    pub fn encode_vars(&self, g: &mut Graph, store: &ParamStore, grids: &[Var], only: Option<Parity>) -> Result<Var> {
        let cells = self.check_grids(g, grids)?;
        let all = g.concat_rows(grids);
        let img = self.input_proj.forward(g, store, all);
        let img_groups: Vec<usize> = (0..self.cfg.num_cameras).flat_map(|c| std::iter::repeat_n(c, cells)).collect();
        let qc = g.param(store, self.camera_queries);
        let (mut x, groups, image) = match self.cfg.mode {
            EncoderMode::Qformer => {
                let q = g.param(store, self.queries.expect("qformer encoder has vision queries"));
                let x = broadcast_combine_var(g, q, qc);
                let groups: Vec<usize> =
                    (0..self.cfg.num_cameras).flat_map(|c| std::iter::repeat_n(c, self.cfg.num_queries)).collect();
                (x, groups, Some(img))
            }
            EncoderMode::Direct => {
                let emb = g.gather_rows(qc, &img_groups);
                (g.add(img, emb), img_groups.clone(), None)
            }
        };
        for b in self.blocks.iter().filter(|b| only.is_none_or(|p| p == b.parity)) {
            let image = image.map(|tokens| ImageTokens { tokens, groups: &img_groups });
            x = b.forward(g, store, x, &groups, image)?;
        }
        Ok(x)
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, mv: &MultiViewFeatures) -> Result<Var> {
        let grids: Vec<Var> = mv.grids.iter().map(|t| g.constant(t.clone())).collect();
        self.encode_vars(g, store, &grids, None)
    }
}
