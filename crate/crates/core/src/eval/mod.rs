//! Staged evaluation and the metric suite.

pub mod cot;
pub mod judge;
pub mod metrics;
pub mod report;

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{LmadModel, SceneData};
use crate::scene::{GenConfig, QARecord};

pub use cot::{leaked_tags, predicted_tags, rewrite_question, run_scene, AnsweredRecord, Answerer, CoTPlan, ModelAnswerer};
pub use judge::{Judge, JudgeConfig, JudgeRequest, JudgeScore, Provenance};
pub use metrics::{accuracy, bleu, cider, match_score, match_text, rouge_l, token_f1, Components, MATCH_TOL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Chain core questions through predicted identities.
    pub cot: bool,
    pub max_new_tokens: usize,
    pub match_tol: f64,
    /// Evaluate only the first N scenes.
    pub subset: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { cot: true, max_new_tokens: 64, match_tol: MATCH_TOL, subset: None }
    }
}

/// One evaluated record with its per-item scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    #[serde(flatten)]
    pub answered: AnsweredRecord,
    pub judge: Option<JudgeScore>,
    pub match_score: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: Option<f64>,
    pub judge: Option<f64>,
    pub bleu: Option<f64>,
    pub rouge_l: Option<f64>,
    pub cider: Option<f64>,
    pub lang_score: Option<f64>,
    /// Tag recall on core prediction answers before blending.
    pub match_accuracy: Option<f64>,
    /// Equal-weight mean of tag recall and the judge on core prediction answers.
    pub match_score: Option<f64>,
    pub final_score: Option<f64>,
    pub records: usize,
    pub closed: usize,
    pub open: usize,
    /// "external", "fallback" or "mixed".
    pub judge_provenance: String,
    pub cot: bool,
}

impl MetricReport {
    pub fn components(&self) -> Components {
        Components {
            accuracy: self.accuracy,
            judge: self.judge,
            bleu: self.bleu,
            rouge_l: self.rouge_l,
            cider: self.cider,
            match_score: self.match_score,
        }
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores answered records. BLEU and ROUGE-L are reported ×100; CIDEr keeps
/// its ×10 consensus scale.
pub fn score(answered: Vec<AnsweredRecord>, judge: &Judge, tol: f64, cot: bool) -> (MetricReport, Vec<EvalItem>) {
    let open: Vec<usize> = (0..answered.len()).filter(|&i| !answered[i].record.qtype.is_closed()).collect();
    let reqs: Vec<JudgeRequest> = open
        .iter()
        .map(|&i| JudgeRequest {
            question: answered[i].question_asked.clone(),
            reference: answered[i].record.answer.clone(),
            candidate: answered[i].prediction.clone(),
        })
        .collect();
    let scores = judge.score_all(&reqs);
    let mut judge_of: BTreeMap<usize, JudgeScore> = open.iter().copied().zip(scores).collect();

    let closed: Vec<&AnsweredRecord> = answered.iter().filter(|a| a.record.qtype.is_closed()).collect();
    let acc = accuracy(
        &closed.iter().map(|a| a.prediction.as_str()).collect::<Vec<_>>(),
        &closed.iter().map(|a| a.record.answer.as_str()).collect::<Vec<_>>(),
    );
    let n_closed = closed.len();

    let percep: Vec<&AnsweredRecord> = answered.iter().filter(|a| a.record.is_core_perception()).collect();
    let bleu_v = mean(&percep.iter().map(|a| 100.0 * bleu(&a.prediction, &a.record.answer)).collect::<Vec<_>>());
    let rouge_v = mean(&percep.iter().map(|a| 100.0 * rouge_l(&a.prediction, &a.record.answer)).collect::<Vec<_>>());
    let cider_v = cider(
        &percep.iter().map(|a| a.prediction.as_str()).collect::<Vec<_>>(),
        &percep.iter().map(|a| a.record.answer.as_str()).collect::<Vec<_>>(),
    );

    let mut items: Vec<EvalItem> = Vec::with_capacity(answered.len());
    let (mut match_v, mut match_judge) = (Vec::new(), Vec::new());
    for (i, a) in answered.into_iter().enumerate() {
        let j = judge_of.remove(&i);
        let m = a.record.is_core_prediction().then(|| match_text(&a.prediction, &a.record.answer, tol));
        if let Some(m) = m {
            match_v.push(m);
            match_judge.push(j.map_or(0.0, |s| s.score));
        }
        items.push(EvalItem { answered: a, judge: j, match_score: m });
    }
    let judge_scores: Vec<&JudgeScore> = items.iter().filter_map(|i| i.judge.as_ref()).collect();
    let provenance = match (
        judge_scores.iter().any(|s| s.provenance == Provenance::External),
        judge_scores.iter().any(|s| s.provenance == Provenance::Fallback),
    ) {
        (true, true) => "mixed",
        (true, false) => "external",
        _ => "fallback",
    };
    let match_accuracy = mean(&match_v);
    let match_blend = match_accuracy.zip(mean(&match_judge)).map(|(m, j)| (m + j) / 2.0);
    let mut report = MetricReport {
        accuracy: acc,
        judge: mean(&judge_scores.iter().map(|s| s.score).collect::<Vec<_>>()),
        bleu: bleu_v,
        rouge_l: rouge_v,
        cider: cider_v,
        lang_score: None,
        match_accuracy,
        match_score: match_blend,
        final_score: None,
        records: items.len(),
        closed: n_closed,
        open: open.len(),
        judge_provenance: provenance.into(),
        cot,
    };
    let c = report.components();
    report.lang_score = c.lang_score();
    report.final_score = c.final_score().ok();
    (report, items)
}

/// Answers every record (scenes in parallel, stages in order within a
/// scene) and scores the results.
pub fn evaluate(model: &LmadModel, records: &[QARecord], gen: &GenConfig, cfg: &EvalConfig, judge: &Judge) -> Result<(MetricReport, Vec<EvalItem>)> {
    let mut by_scene: BTreeMap<u64, Vec<(usize, &QARecord)>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_scene.entry(r.scene_seed).or_default().push((i, r));
    }
    let mut first_seen: Vec<u64> = Vec::new();
    for r in records {
        if !first_seen.contains(&r.scene_seed) {
            first_seen.push(r.scene_seed);
        }
    }
    if let Some(n) = cfg.subset {
        first_seen.truncate(n);
    }
    let datas: Vec<(u64, Arc<SceneData>)> =
        first_seen.par_iter().map(|&s| Ok((s, Arc::new(model.scene_data(s, gen)?)))).collect::<Result<Vec<_>>>()?;
    let answerer = ModelAnswerer::new(model, datas.into_iter().collect(), cfg.max_new_tokens);
    let plan = CoTPlan::new(cfg.cot);
    let per_scene: Vec<Vec<AnsweredRecord>> = first_seen
        .par_iter()
        .map(|s| run_scene(&by_scene[s], &answerer, &plan).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    let mut answered: Vec<AnsweredRecord> = per_scene.into_iter().flatten().collect();
    answered.sort_by_key(|a| a.index);
    Ok(score(answered, judge, cfg.match_tol, cfg.cot))
}
