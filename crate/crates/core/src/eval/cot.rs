//! Staged chain-of-thought answering with identity-leak prevention.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LmadError, Result};
use crate::model::{LmadModel, SceneData};
use crate::plora::route;
use crate::scene::ctag::{looks_like_tag, tag_words, CTag};
use crate::scene::QARecord;
use crate::taxonomy::Task;
use crate::text::{detokenize, tokenize};

/// Replaces an empty tag list in a rewritten question.
pub const NO_TAGS_PHRASE: &str = "the important objects";

/// Stage order is fixed; `core_only` turns identity substitution on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoTPlan {
    pub stages: [Task; 4],
    pub core_only: bool,
    /// Ground-truth tag → predicted tag, in question order.
    pub substitutions: Vec<(String, String)>,
}

impl CoTPlan {
    pub fn new(core_only: bool) -> Self {
        Self { stages: Task::ALL, core_only, substitutions: Vec::new() }
    }
}

/// Produces an answer for `record` given the (possibly rewritten) question.
pub trait Answerer: Sync {
    fn answer(&self, record: &QARecord, question: &str) -> Result<String>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnsweredRecord {
    pub index: usize,
    pub record: QARecord,
    pub question_asked: String,
    pub prediction: String,
    pub substitutions: Vec<(String, String)>,
    /// The upstream answer held an unparseable tag.
    pub flagged: bool,
}

/// Distinct tags of a predicted answer in order of appearance; the flag is
/// set when some tag-shaped word fails to parse, in which case no tags are
/// returned.
pub fn predicted_tags(answer: &str) -> (Vec<CTag>, bool) {
    let mut tags = Vec::new();
    for w in tag_words(answer) {
        match w.parse::<CTag>() {
            Ok(t) => {
                if !tags.contains(&t) {
                    tags.push(t);
                }
            }
            Err(_) => return (Vec::new(), true),
        }
    }
    (tags, false)
}

/// Replaces the span from the first to the last tag in `question` with the
/// predicted tags joined by "and". Questions without tags pass through.
pub fn rewrite_question(question: &str, predicted: &[CTag]) -> (String, Vec<(String, String)>) {
    let words = tokenize(question);
    let tag_pos: Vec<usize> = (0..words.len()).filter(|&i| looks_like_tag(&words[i])).collect();
    let (Some(&first), Some(&last)) = (tag_pos.first(), tag_pos.last()) else {
        return (question.to_string(), Vec::new());
    };
    let gold: Vec<&String> = tag_pos.iter().map(|&i| &words[i]).collect();
    let subs = gold.iter().zip(predicted).map(|(g, p)| (g.to_string(), p.to_string())).collect();
    let mut out: Vec<String> = words[..first].to_vec();
    if predicted.is_empty() {
        out.extend(tokenize(NO_TAGS_PHRASE));
    } else {
        for (k, t) in predicted.iter().enumerate() {
            if k > 0 {
                out.push("and".into());
            }
            out.push(t.to_string());
        }
    }
    out.extend_from_slice(&words[last + 1..]);
    (detokenize(&out), subs)
}

/// Ground-truth tags of `record` present in `question` but not predicted.
pub fn leaked_tags(question: &str, record: &QARecord, predicted: &[CTag]) -> Vec<String> {
    let pred: Vec<String> = predicted.iter().map(|t| t.to_string()).collect();
    tag_words(question)
        .into_iter()
        .filter(|w| record.identities.iter().any(|id| id == w) && !pred.iter().any(|p| p == w))
        .map(str::to_string)
        .collect()
}

/// Answers the records of one scene in stage order. With `plan.core_only`,
/// downstream core questions carry the tags predicted by the core
/// perception answer instead of the ground-truth ones; other questions are
/// answered independently. Output keeps the input order.
pub fn run_scene(records: &[(usize, &QARecord)], answerer: &dyn Answerer, plan: &CoTPlan) -> Result<(Vec<AnsweredRecord>, Vec<CTag>)> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    let stage = |r: &QARecord| plan.stages.iter().position(|&t| t == r.task).unwrap_or(plan.stages.len());
    order.sort_by_key(|&k| (stage(records[k].1), !records[k].1.is_core_perception(), k));

    let mut predicted: Option<(Vec<CTag>, bool)> = None;
    let mut out: Vec<Option<AnsweredRecord>> = vec![None; records.len()];
    for k in order {
        let (index, rec) = records[k];
        let mut asked = rec.question.clone();
        let mut subs = Vec::new();
        let mut flagged = false;
        if plan.core_only && rec.is_core && rec.task != Task::Perception {
            let (tags, flag) = predicted.clone().unwrap_or_default();
            (asked, subs) = rewrite_question(&rec.question, &tags);
            flagged = flag;
        }
        let prediction = answerer.answer(rec, &asked)?;
        if rec.is_core_perception() && predicted.is_none() {
            predicted = Some(predicted_tags(&prediction));
        }
        out[k] = Some(AnsweredRecord { index, record: rec.clone(), question_asked: asked, prediction, substitutions: subs, flagged });
    }
    let tags = predicted.map(|p| p.0).unwrap_or_default();
    Ok((out.into_iter().map(|r| r.expect("every record answered")).collect(), tags))
}

/// Greedy decoding with the trained model, one cached scene per seed.
pub struct ModelAnswerer<'a> {
    pub model: &'a LmadModel,
    pub scenes: BTreeMap<u64, Arc<SceneData>>,
    pub max_new: usize,
}

impl<'a> ModelAnswerer<'a> {
    pub fn new(model: &'a LmadModel, scenes: BTreeMap<u64, Arc<SceneData>>, max_new: usize) -> Self {
        Self { model, scenes, max_new }
    }
}

impl Answerer for ModelAnswerer<'_> {
    fn answer(&self, record: &QARecord, question: &str) -> Result<String> {
        let data = self
            .scenes
            .get(&record.scene_seed)
            .ok_or_else(|| LmadError::Input(format!("scene {} not loaded", record.scene_seed)))?;
        let r = route(record.task, record.qtype, self.model.cfg.plora.mode);
        self.model.answer(data, &r, question, self.max_new)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{dataset::generate_records, GenConfig};

    /// Echoes gold answers, optionally swapping the perception tags.
    struct Oracle {
        perception_override: Option<String>,
    }

    impl Answerer for Oracle {
        fn answer(&self, record: &QARecord, _question: &str) -> Result<String> {
            match (&self.perception_override, record.is_core_perception()) {
                (Some(a), true) => Ok(a.clone()),
                _ => Ok(record.answer.clone()),
            }
        }
    }

    fn scene_records() -> Vec<QARecord> {
        let gen = GenConfig { objects_min: 5, objects_max: 8, ..GenConfig::default() };
        (0..40)
            .map(|s| generate_records(s, 1, &gen).unwrap())
            .find(|r| r.iter().any(|x| x.is_core_prediction() && !x.identities.is_empty()))
            .unwrap()
    }

    #[test]
    fn prediction_question_uses_predicted_tags() {
        let recs = scene_records();
        let indexed: Vec<(usize, &QARecord)> = recs.iter().enumerate().collect();
        let fake = "The important objects are car <c9,CAM_BACK,10,20> , truck <c7,CAM_FRONT,5,6> .";
        let (out, tags) = run_scene(&indexed, &Oracle { perception_override: Some(fake.into()) }, &CoTPlan::new(true)).unwrap();
        assert_eq!(tags.len(), 2);
        let pred = out.iter().find(|a| a.record.is_core_prediction()).unwrap();
        let found: Vec<&str> = tag_words(&pred.question_asked);
        assert_eq!(found, vec!["<c9,CAM_BACK,10,20>", "<c7,CAM_FRONT,5,6>"]);
        assert!(leaked_tags(&pred.question_asked, &pred.record, &tags).is_empty());
        assert_eq!(out.iter().map(|a| a.index).collect::<Vec<_>>(), (0..recs.len()).collect::<Vec<_>>());
    }

    #[test]
    fn without_cot_questions_pass_verbatim() {
        let recs = scene_records();
        let indexed: Vec<(usize, &QARecord)> = recs.iter().enumerate().collect();
        let (out, _) = run_scene(&indexed, &Oracle { perception_override: Some("nothing".into()) }, &CoTPlan::new(false)).unwrap();
        assert!(out.iter().all(|a| a.question_asked == a.record.question && a.substitutions.is_empty()));
    }

    #[test]
    fn exact_perception_reproduces_original_questions() {
        let recs = scene_records();
        let indexed: Vec<(usize, &QARecord)> = recs.iter().enumerate().collect();
        let (cot, _) = run_scene(&indexed, &Oracle { perception_override: None }, &CoTPlan::new(true)).unwrap();
        let (plain, _) = run_scene(&indexed, &Oracle { perception_override: None }, &CoTPlan::new(false)).unwrap();
        for (a, b) in cot.iter().zip(&plain) {
            assert_eq!(a.question_asked, b.question_asked);
            assert_eq!(a.prediction, b.prediction);
        }
    }

    #[test]
    fn malformed_tag_flags_and_empties_substitution() {
        let recs = scene_records();
        let indexed: Vec<(usize, &QARecord)> = recs.iter().enumerate().collect();
        let bad = "The important objects are car <c1,CAM_FRONT,12> .";
        let (out, tags) = run_scene(&indexed, &Oracle { perception_override: Some(bad.into()) }, &CoTPlan::new(true)).unwrap();
        assert!(tags.is_empty());
        let pred = out.iter().find(|a| a.record.is_core_prediction()).unwrap();
        assert!(pred.flagged);
        assert_eq!(pred.question_asked, "What is the future state of the important objects ?");
    }
}
