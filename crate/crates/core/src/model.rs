//! The assembled model: PI encoder, vision projection, e2e bridge and
//! P-LoRA decoder over one shared parameter store.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::e2e::{select_top_instances, synthetic_backbone, BackboneFeatures, BackboneHeads, E2EBackboneOutput, E2EBridge, E2ETokenBlock, Selection};
use crate::e2e::BridgeConfig;
use crate::error::{LmadError, Result};
use crate::lm::vocab::{BOS, EOS};
use crate::lm::{Adapters, DecoderConfig, DecoderModel, Prefix, Vocabulary};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::pi_encoder::{PIConfig, PIEncoder};
use crate::plora::{route, BankShape, BranchRoute, PLoRABank, PLoRAMode};
use crate::scene::{gen_scene, render::render_views_with_dim, GenConfig, MultiViewFeatures, QARecord, SceneGraph};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PLoRAConfig {
    pub mode: PLoRAMode,
    pub rank: usize,
    pub alpha: f64,
}

impl Default for PLoRAConfig {
    fn default() -> Self {
        Self { mode: PLoRAMode::Task, rank: 8, alpha: 16.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: PIConfig,
    pub decoder: DecoderConfig,
    pub bridge: BridgeConfig,
    pub plora: PLoRAConfig,
    /// Feed end-to-end tokens to the decoder.
    pub use_e2e: bool,
    /// Seed of the synthetic backbone noise.
    pub backbone_seed: u64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: PIConfig::default(),
            decoder: DecoderConfig::default(),
            bridge: BridgeConfig::default(),
            plora: PLoRAConfig::default(),
            use_e2e: true,
            backbone_seed: 0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for gradient checks and unit tests.
    pub fn tiny() -> Self {
        Self {
            encoder: PIConfig { num_queries: 2, dim: 8, feature_dim: 8, blocks: 2, heads: 2, ff_mult: 2, ..PIConfig::default() },
            decoder: DecoderConfig { layers: 1, dim: 8, heads: 2, ff_mult: 2, max_len: 128, ..DecoderConfig::default() },
            bridge: BridgeConfig { n_ins: 2, enc_dim: 4, heads: 2, ..BridgeConfig::default() },
            plora: PLoRAConfig { rank: 2, alpha: 4.0, ..PLoRAConfig::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.bridge.validate(self.decoder.dim)?;
        if self.plora.rank == 0 {
            return Err(LmadError::Config("P-LoRA rank must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything derived from one scene seed, shared by its records.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub scene: SceneGraph,
    pub views: MultiViewFeatures,
    pub backbone: E2EBackboneOutput,
    pub selection: Selection,
}

/// One training or evaluation example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub record: QARecord,
    pub data: Arc<SceneData>,
    pub route: BranchRoute,
    pub question_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
}

impl Sample {
    /// `BOS ‖ question ‖ answer ‖ EOS`.
    pub fn text(&self) -> Vec<usize> {
        let mut t = Vec::with_capacity(self.question_ids.len() + self.answer_ids.len() + 2);
        t.push(BOS);
        t.extend(&self.question_ids);
        t.extend(&self.answer_ids);
        t.push(EOS);
        t
    }

    pub fn prompt(&self) -> Vec<usize> {
        let mut t = vec![BOS];
        t.extend(&self.question_ids);
        t
    }

    /// Logit rows scored by the text loss and their targets: every answer
    /// token plus the closing EOS.
    pub fn loss_targets(&self) -> (Vec<usize>, Vec<usize>) {
        let text = self.text();
        let start = self.question_ids.len();
        let rows: Vec<usize> = (start..text.len() - 1).collect();
        let targets = rows.iter().map(|&r| text[r + 1]).collect();
        (rows, targets)
    }
}

/// Graph outputs of one sample's forward pass.
#[derive(Clone, Debug)]
pub struct SampleForward {
    pub logits: Var,
    pub features: Option<BackboneFeatures>,
    pub e2e: Option<E2ETokenBlock>,
    pub vision: Var,
}

#[derive(Clone, Debug)]
pub struct LmadModel {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoder: PIEncoder,
    pub vision_proj: Linear,
    pub heads: BackboneHeads,
    pub bridge: E2EBridge,
    pub decoder: DecoderModel,
    pub bank: PLoRABank,
}

impl LmadModel {
    pub fn new(cfg: ModelConfig, vocab: Vocabulary, horizon: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.decoder.dim;
        let decoder = DecoderModel::new(&mut store, &mut rng, "decoder", cfg.decoder.clone(), vocab.len())?;
        let bank = PLoRABank::new(
            &mut store,
            &mut rng,
            "decoder.plora",
            cfg.plora.mode,
            BankShape { layers: cfg.decoder.layers, d_model: d, d_ff: cfg.decoder.d_ff(), rank: cfg.plora.rank, alpha: cfg.plora.alpha },
        );
        let encoder = PIEncoder::new(&mut store, &mut rng, "pi", cfg.encoder.clone())?;
        let vision_proj = Linear::new(&mut store, &mut rng, "vision_proj", cfg.encoder.dim, d, true);
        let heads = BackboneHeads::new(&mut store, &mut rng, "backbone", cfg.bridge.enc_dim, d, horizon);
        let bridge = E2EBridge::new(&mut store, &mut rng, "bridge", cfg.bridge.clone(), d, horizon)?;
        Ok(Self { cfg, vocab, store, encoder, vision_proj, heads, bridge, decoder, bank })
    }

    pub fn horizon(&self) -> usize {
        self.bridge.horizon
    }

    pub fn scene_data(&self, seed: u64, gen: &GenConfig) -> Result<SceneData> {
        let scene = gen_scene(seed, gen)?;
        if scene.cameras.len() != self.cfg.encoder.num_cameras {
            return Err(LmadError::Config(format!(
                "scenes have {} cameras, encoder expects {}",
                scene.cameras.len(),
                self.cfg.encoder.num_cameras
            )));
        }
        if scene.horizon() != self.horizon() {
            return Err(LmadError::Config(format!("scene horizon {} vs model horizon {}", scene.horizon(), self.horizon())));
        }
        let views = render_views_with_dim(&scene, self.cfg.encoder.feature_dim);
        let backbone = synthetic_backbone(&scene, self.cfg.bridge.noise, self.cfg.backbone_seed, self.cfg.bridge.enc_dim);
        let selection = select_top_instances(&backbone, self.cfg.bridge.n_ins);
        Ok(SceneData { scene, views, backbone, selection })
    }

    pub fn sample(&self, record: &QARecord, data: Arc<SceneData>) -> Sample {
        Sample {
            route: route(record.task, record.qtype, self.cfg.plora.mode),
            question_ids: self.vocab.encode(&record.question),
            answer_ids: self.vocab.encode(&record.answer),
            record: record.clone(),
            data,
        }
    }

    /// Samples for `records`, regenerating each distinct scene once.
    pub fn samples(&self, records: &[QARecord], gen: &GenConfig) -> Result<Vec<Sample>> {
        use rayon::prelude::*;
        let seeds: Vec<u64> = records.iter().map(|r| r.scene_seed).collect::<BTreeSet<_>>().into_iter().collect();
        let datas: Vec<Arc<SceneData>> =
            seeds.par_iter().map(|&s| self.scene_data(s, gen).map(Arc::new)).collect::<Result<Vec<_>>>()?;
        let by_seed: std::collections::BTreeMap<u64, Arc<SceneData>> = seeds.into_iter().zip(datas).collect();
        Ok(records.iter().map(|r| self.sample(r, by_seed[&r.scene_seed].clone())).collect())
    }

    /// Vision tokens at decoder width.
    pub fn vision_tokens(&self, g: &mut Graph, views: &MultiViewFeatures) -> Result<Var> {
        let v = self.encoder.encode(g, &self.store, views)?;
        Ok(self.vision_proj.forward(g, &self.store, v))
    }

    /// Full e2e block and the backbone features it was built from.
    pub fn e2e_tokens(&self, g: &mut Graph, data: &SceneData) -> Result<(E2ETokenBlock, BackboneFeatures)> {
        let rows: Vec<usize> = data.selection.real().collect();
        let feats = self.heads.features(g, &self.store, &data.backbone, &rows);
        let block = self.bridge.assemble(g, &self.store, self.decoder.tok_emb, &self.vocab, &data.backbone, &data.selection, &feats)?;
        Ok((block, feats))
    }

    /// Prefix segments for `route`: vision tokens and the visible e2e subset.
    pub fn prefix(&self, g: &mut Graph, data: &SceneData, route: &BranchRoute) -> Result<(Prefix, Option<BackboneFeatures>, Option<E2ETokenBlock>)> {
        let vision = self.vision_tokens(g, &data.views)?;
        if !self.cfg.use_e2e {
            return Ok((Prefix { vision: Some(vision), e2e: None }, None, None));
        }
        let (block, feats) = self.e2e_tokens(g, data)?;
        let visible = block.restrict(g, &route.visible_groups);
        Ok((Prefix { vision: Some(vision), e2e: visible.as_ref().map(|b| b.tokens) }, Some(feats), visible))
    }

    pub fn forward(&self, g: &mut Graph, sample: &Sample) -> Result<SampleForward> {
        let (prefix, features, e2e) = self.prefix(g, &sample.data, &sample.route)?;
        let adapters = Adapters { bank: &self.bank, route: &sample.route };
        let logits = self.decoder.forward(g, &self.store, &prefix, &sample.text(), Some(adapters))?;
        Ok(SampleForward { logits, features, e2e, vision: prefix.vision.expect("vision always present") })
    }

    /// Greedy answer for a question about the scene in `data`.
    pub fn answer(&self, data: &SceneData, route: &BranchRoute, question: &str, max_new: usize) -> Result<String> {
        let mut g = Graph::new();
        let (prefix, _, _) = self.prefix(&mut g, data, route)?;
        let vision = prefix.vision.map(|v| g.value(v).clone());
        let e2e = prefix.e2e.map(|v| g.value(v).clone());
        let mut prompt = vec![BOS];
        prompt.extend(self.vocab.encode(question));
        let adapters = Adapters { bank: &self.bank, route };
        let ids = self.decoder.generate(&self.store, (vision.as_ref(), e2e.as_ref()), &prompt, max_new, Some(adapters))?;
        Ok(self.vocab.decode(&ids))
    }

    /// Parameters touched by the language path: encoder, vision projection,
    /// every adapter, the bridge and the decoder prefix gates.
    pub fn language_trainable(&self) -> Vec<ParamId> {
        let mut p = self.encoder.params();
        p.extend(self.vision_proj.params());
        p.extend(self.bank.all_params());
        p.extend(self.bridge.params());
        p.extend(self.decoder.gate_params());
        p
    }

    pub fn backbone_params(&self) -> Vec<ParamId> {
        self.heads.params()
    }

    /// Copies trained values into the store, e.g. after an optimizer step.
    pub fn set_params(&mut self, values: impl IntoIterator<Item = (ParamId, Tensor)>) {
        for (id, t) in values {
            self.store.set(id, t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::dataset::generate_records;

    #[test]
    fn forward_shapes_and_loss_rows() {
        let gen = GenConfig::default();
        let recs = generate_records(0, 2, &gen).unwrap();
        let vocab = Vocabulary::build(&recs);
        let mut cfg = ModelConfig::tiny();
        cfg.encoder.feature_dim = 8;
        let model = LmadModel::new(cfg, vocab, gen.horizon).unwrap();
        let samples = model.samples(&recs, &gen).unwrap();
        for s in &samples {
            let mut g = Graph::new();
            let out = model.forward(&mut g, s).unwrap();
            assert_eq!(g.shape(out.logits), (s.text().len(), model.vocab.len()));
            let (rows, targets) = s.loss_targets();
            assert_eq!(rows.len(), s.answer_ids.len() + 1);
            assert_eq!(*targets.last().unwrap(), EOS);
            let n_visible = out.e2e.as_ref().map_or(0, |b| b.len());
            let want = match s.record.task {
                crate::taxonomy::Task::Perception => 2,
                crate::taxonomy::Task::Prediction => 4,
                _ => 5,
            };
            assert_eq!(n_visible, want);
        }
    }
}
