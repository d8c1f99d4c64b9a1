//! Parallel LoRA: per-task adapter branches on the feed-forward sublayers and
//! one shared adapter pair on the attention query/value projections.
//!
//! Exactly one feed-forward branch is active per forward pass. Inactive
//! branches never enter the graph, so their gradient is exactly zero.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{LmadError, Result};
use crate::nn::{Attention, AttnAdapters, FeedForward};
use crate::params::{ParamId, ParamStore};
use crate::taxonomy::{Group, QType, Task};

/// `out += scale · B·A·x` with `A: r×d_in`, `B: d_out×r`.
#[derive(Clone, Debug)]
pub struct LoRAAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

impl LoRAAdapter {
    /// `A` ~ N(0, 1/d_in), `B` = 0.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
    ) -> Self {
        assert!(rank >= 1, "LoRA rank must be at least 1");
        let a = store.randn(format!("{name}.a"), rank, d_in, 1.0 / (d_in as f64).sqrt(), rng);
        let b = store.zeros(format!("{name}.b"), d_out, rank);
        Self { a, b, rank, scale: alpha / rank as f64 }
    }

    /// The low-rank contribution alone, `scale · x·Aᵀ·Bᵀ` row-wise.
    pub fn delta(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let a = g.param(store, self.a);
        let b = g.param(store, self.b);
        let xa = g.matmul_t(x, false, a, true);
        let d = g.matmul_t(xa, false, b, true);
        g.scale(d, self.scale)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.a, self.b]
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.scalar_count(self.params())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PLoRAMode {
    #[default]
    Task,
    Question,
    Hierarchical,
}

impl PLoRAMode {
    pub const ALL: [PLoRAMode; 3] = [PLoRAMode::Task, PLoRAMode::Question, PLoRAMode::Hierarchical];

    pub fn as_str(self) -> &'static str {
        match self {
            PLoRAMode::Task => "task",
            PLoRAMode::Question => "question",
            PLoRAMode::Hierarchical => "hierarchical",
        }
    }

    /// Branch keys this mode builds, in a fixed order.
    pub fn branch_keys(self) -> Vec<BranchKey> {
        match self {
            PLoRAMode::Task => BRANCH_TASKS.iter().map(|&t| BranchKey::Task(t)).collect(),
            PLoRAMode::Question => QType::ALL.iter().map(|&q| BranchKey::Question(q)).collect(),
            PLoRAMode::Hierarchical => BRANCH_TASKS
                .iter()
                .flat_map(|&t| QType::ALL.iter().map(move |&q| BranchKey::Leaf(t, q)))
                .collect(),
        }
    }
}

impl fmt::Display for PLoRAMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PLoRAMode {
    type Err = LmadError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| LmadError::Config(format!("unknown P-LoRA mode {s:?}")))
    }
}

/// Tasks that own a feed-forward branch; behavior shares the planning branch.
pub const BRANCH_TASKS: [Task; 3] = [Task::Perception, Task::Prediction, Task::Planning];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BranchKey {
    Task(Task),
    Question(QType),
    Leaf(Task, QType),
}

impl BranchKey {
    pub fn name(&self) -> String {
        match self {
            BranchKey::Task(t) => t.as_str().to_string(),
            BranchKey::Question(q) => q.as_str().to_string(),
            BranchKey::Leaf(t, q) => format!("{}.{}", t.as_str(), q.as_str()),
        }
    }
}

impl fmt::Display for BranchKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchRoute {
    pub task: Task,
    pub qtype: QType,
    pub branch_key: BranchKey,
    pub visible_groups: Vec<Group>,
}

impl BranchRoute {
    pub fn sees(&self, group: Group) -> bool {
        self.visible_groups.contains(&group)
    }
}

fn branch_task(task: Task) -> Task {
    match task {
        Task::Behavior => Task::Planning,
        t => t,
    }
}

/// Which e2e token groups a task may read.
pub fn visible_groups(task: Task) -> Vec<Group> {
    match task {
        Task::Perception => vec![Group::Det],
        Task::Prediction => vec![Group::Det, Group::Mot],
        Task::Planning | Task::Behavior => vec![Group::Det, Group::Mot, Group::Ego],
    }
}

pub fn route(task: Task, qtype: QType, mode: PLoRAMode) -> BranchRoute {
    let branch_key = match mode {
        PLoRAMode::Task => BranchKey::Task(branch_task(task)),
        PLoRAMode::Question => BranchKey::Question(qtype),
        PLoRAMode::Hierarchical => BranchKey::Leaf(branch_task(task), qtype),
    };
    BranchRoute { task, qtype, branch_key, visible_groups: visible_groups(task) }
}

/// [`route`] from textual tags, for records read off disk or the CLI.
pub fn route_tags(task: &str, qtype: &str, mode: PLoRAMode) -> Result<BranchRoute> {
    Ok(route(task.parse()?, qtype.parse()?, mode))
}

#[derive(Clone, Debug)]
pub struct FfnBranch {
    pub up: LoRAAdapter,
    pub down: LoRAAdapter,
}

#[derive(Clone, Debug)]
pub struct SharedAttn {
    pub q: LoRAAdapter,
    pub v: LoRAAdapter,
}

#[derive(Clone, Debug)]
pub struct PLoRABank {
    pub mode: PLoRAMode,
    pub branches: Vec<BTreeMap<BranchKey, FfnBranch>>,
    pub shared_attn: Vec<SharedAttn>,
}

#[derive(Clone, Copy, Debug)]
pub struct BankShape {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub rank: usize,
    pub alpha: f64,
}

impl PLoRABank {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        mode: PLoRAMode,
        shape: BankShape,
    ) -> Self {
        let BankShape { layers, d_model, d_ff, rank, alpha } = shape;
        let mut branches = Vec::with_capacity(layers);
        let mut shared_attn = Vec::with_capacity(layers);
        for l in 0..layers {
            let base = format!("{prefix}.layers.{l}");
            let q = LoRAAdapter::new(store, rng, &format!("{base}.attn.q.lora"), d_model, d_model, rank, alpha);
            let v = LoRAAdapter::new(store, rng, &format!("{base}.attn.v.lora"), d_model, d_model, rank, alpha);
            shared_attn.push(SharedAttn { q, v });
            let mut layer = BTreeMap::new();
            for key in mode.branch_keys() {
                let name = format!("{base}.ffn.plora.{}", key.name());
                let up = LoRAAdapter::new(store, rng, &format!("{name}.up"), d_model, d_ff, rank, alpha);
                let down = LoRAAdapter::new(store, rng, &format!("{name}.down"), d_ff, d_model, rank, alpha);
                layer.insert(key, FfnBranch { up, down });
            }
            branches.push(layer);
        }
        Self { mode, branches, shared_attn }
    }

    pub fn layers(&self) -> usize {
        self.shared_attn.len()
    }

    pub fn branch(&self, layer: usize, key: &BranchKey) -> Result<&FfnBranch> {
        self.branches
            .get(layer)
            .and_then(|m| m.get(key))
            .ok_or_else(|| LmadError::Routing(format!("no P-LoRA branch {key} in layer {layer} ({} mode)", self.mode)))
    }

    pub fn all_adapters(&self) -> Vec<&LoRAAdapter> {
        let mut out = Vec::new();
        for (layer, shared) in self.branches.iter().zip(&self.shared_attn) {
            out.push(&shared.q);
            out.push(&shared.v);
            for b in layer.values() {
                out.push(&b.up);
                out.push(&b.down);
            }
        }
        out
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.all_adapters().into_iter().flat_map(LoRAAdapter::params).collect()
    }

    /// Parameters of every branch other than the routed one.
    pub fn inactive_branch_params(&self, route: &BranchRoute) -> Vec<ParamId> {
        self.branches
            .iter()
            .flat_map(|m| m.iter())
            .filter(|(k, _)| **k != route.branch_key)
            .flat_map(|(_, b)| b.up.params().into_iter().chain(b.down.params()))
            .collect()
    }

    pub fn zero_b(&self, store: &mut ParamStore) {
        for a in self.all_adapters() {
            let t = store.get(a.b);
            let z = crate::tensor::Tensor::zeros(t.rows(), t.cols());
            store.set(a.b, z);
        }
    }
}

/// Base feed-forward plus the routed branch.
pub fn plora_ffn_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    ffn: &FeedForward,
    bank: &PLoRABank,
    layer: usize,
    route: &BranchRoute,
) -> Result<Var> {
    let branch = bank.branch(layer, &route.branch_key)?;
    Ok(ffn.forward_with(g, store, x, Some((&branch.up, &branch.down))))
}

/// Self-attention with the layer's shared query/value adapters. The route is
/// irrelevant here by construction.
pub fn shared_attn_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    attn: &Attention,
    bank: &PLoRABank,
    layer: usize,
    mask: Option<&crate::autograd::Mask>,
) -> Var {
    let shared = &bank.shared_attn[layer];
    attn.forward(g, store, x, x, mask, AttnAdapters { q: Some(&shared.q), v: Some(&shared.v) })
}

/// Active branch A/B plus every shared attention A/B, keyed by name.
pub fn trainable_params(store: &ParamStore, bank: &PLoRABank, route: &BranchRoute) -> BTreeMap<String, ParamId> {
    let mut out = BTreeMap::new();
    for (l, shared) in bank.shared_attn.iter().enumerate() {
        for id in shared.q.params().into_iter().chain(shared.v.params()) {
            out.insert(store.name(id).to_string(), id);
        }
        if let Some(b) = bank.branches[l].get(&route.branch_key) {
            for id in b.up.params().into_iter().chain(b.down.params()) {
                out.insert(store.name(id).to_string(), id);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(mode: PLoRAMode) -> (ParamStore, PLoRABank, FeedForward, Attention) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let shape = BankShape { layers: 1, d_model: 8, d_ff: 16, rank: 2, alpha: 4.0 };
        let bank = PLoRABank::new(&mut store, &mut rng, "dec", mode, shape);
        let ffn = FeedForward::new(&mut store, &mut rng, "dec.layers.0.ffn", 8, 16);
        let attn = Attention::new(&mut store, &mut rng, "dec.layers.0.attn", 8, 2);
        (store, bank, ffn, attn)
    }

    #[test]
    fn routing_table() {
        let r = route(Task::Prediction, QType::Open, PLoRAMode::Task);
        assert_eq!(r.branch_key, BranchKey::Task(Task::Prediction));
        assert_eq!(r.visible_groups, vec![Group::Det, Group::Mot]);

        let r = route(Task::Perception, QType::MultipleChoice, PLoRAMode::Hierarchical);
        assert_eq!(r.branch_key, BranchKey::Leaf(Task::Perception, QType::MultipleChoice));
        assert_eq!(r.visible_groups, vec![Group::Det]);

        let r = route(Task::Planning, QType::YesNo, PLoRAMode::Question);
        assert_eq!(r.branch_key, BranchKey::Question(QType::YesNo));
        assert_eq!(r.visible_groups, vec![Group::Det, Group::Mot, Group::Ego]);

        let r = route(Task::Behavior, QType::MultipleChoice, PLoRAMode::Task);
        assert_eq!(r.branch_key, BranchKey::Task(Task::Planning));
    }

    #[test]
    fn route_is_total_and_keys_exist() {
        for mode in PLoRAMode::ALL {
            let keys = mode.branch_keys();
            for t in Task::ALL {
                for q in QType::ALL {
                    let r = route(t, q, mode);
                    assert!(keys.contains(&r.branch_key), "{mode} {t} {q}");
                }
            }
        }
        assert!(route_tags("steering", "open", PLoRAMode::Task).is_err());
        assert!(route_tags("planning", "essay", PLoRAMode::Task).is_err());
    }

    #[test]
    fn zero_b_is_identity() {
        let (store, bank, ffn, _) = bank(PLoRAMode::Task);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(3, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let r = route(Task::Planning, QType::Open, PLoRAMode::Task);
        let with = plora_ffn_forward(&mut g, &store, x, &ffn, &bank, 0, &r).unwrap();
        let base = ffn.forward_with(&mut g, &store, x, None);
        assert_eq!(g.value(with), g.value(base));
    }

    #[test]
    fn missing_branch_is_routing_error() {
        let (store, bank, ffn, _) = bank(PLoRAMode::Task);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(1, 8));
        let r = route(Task::Planning, QType::Open, PLoRAMode::Question);
        assert!(matches!(plora_ffn_forward(&mut g, &store, x, &ffn, &bank, 0, &r), Err(LmadError::Routing(_))));
    }

    #[test]
    fn additivity_matches_direct_matrix_arithmetic() {
        let (mut store, bank, _, _) = bank(PLoRAMode::Task);
        let adapter = &bank.branches[0][&BranchKey::Task(Task::Perception)].up;
        store.set(adapter.b, Tensor::randn(16, 2, 0.5, &mut ChaCha8Rng::seed_from_u64(5)));
        let x = Tensor::randn(1, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let d = adapter.delta(&mut g, &store, xv);
        // scale · B·(A·xᵀ), computed column-wise.
        let ax = store.get(adapter.a).matmul(&x.transpose());
        let bax = store.get(adapter.b).matmul(&ax).transpose().scale(adapter.scale);
        assert!(g.value(d).max_abs_diff(&bax) < 1e-14);
    }

    #[test]
    fn trainable_set_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let shape = BankShape { layers: 1, d_model: 64, d_ff: 64, rank: 8, alpha: 16.0 };
        let bank = PLoRABank::new(&mut store, &mut rng, "dec", PLoRAMode::Task, shape);
        let r = route(Task::Planning, QType::Open, PLoRAMode::Task);
        let set = trainable_params(&store, &bank, &r);
        assert!(set.keys().any(|k| k.contains("plora.planning")));
        assert!(!set.keys().any(|k| k.contains("plora.perception") || k.contains("plora.prediction")));
        assert_eq!(set.len(), 4 + 4);
        assert_eq!(bank.shared_attn[0].q.param_count(&store), 2 * 8 * 64);
        assert_eq!(bank.shared_attn[0].q.scale, 2.0);

        let mut union = std::collections::BTreeSet::new();
        for t in Task::ALL {
            for q in QType::ALL {
                union.extend(trainable_params(&store, &bank, &route(t, q, PLoRAMode::Task)).into_values());
            }
        }
        let all: std::collections::BTreeSet<_> = bank.all_params().into_iter().collect();
        assert_eq!(union, all);
    }
}
