//! Accuracy, BLEU, ROUGE-L, CIDEr, tag matching, token F1 and the final score.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{LmadError, Result};
use crate::scene::ctag::{tag_words, CTag};
use crate::scene::geometry::{IMAGE_HEIGHT, IMAGE_WIDTH};
use crate::text::tokenize;

pub const MAX_ORDER: usize = 4;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SCALE: f64 = 10.0;
pub const MATCH_TOL: f64 = 0.05;

pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Exact-match percentage after whitespace normalization; `None` when empty.
pub fn accuracy<P: AsRef<str>, G: AsRef<str>>(preds: &[P], golds: &[G]) -> Option<f64> {
    assert_eq!(preds.len(), golds.len(), "one prediction per gold answer");
    if preds.is_empty() {
        return None;
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| normalize_ws(p.as_ref()) == normalize_ws(g.as_ref())).count();
    Some(100.0 * hits as f64 / preds.len() as f64)
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(|s| s.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU: geometric mean of clipped n-gram precisions times the
/// brevity penalty. Orders run up to `min(4, |pred|)`, so a short exact
/// answer still scores 1; any zero precision gives 0 (no smoothing).
pub fn bleu_tokens<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let orders = MAX_ORDER.min(pred.len());
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let p = ngrams(pred, n);
        let g = ngrams(gold, n);
        let total: usize = p.values().sum();
        let clipped: usize = p.iter().map(|(k, &c)| c.min(g.get(k).copied().unwrap_or(0))).sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let (c, r) = (pred.len() as f64, gold.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / orders as f64).exp()
}

pub fn bleu(pred: &str, gold: &str) -> f64 {
    bleu_tokens(&tokenize(pred), &tokenize(gold))
}

fn lcs<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS F-measure with `β = 1.2`.
pub fn rouge_l_tokens<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let l = lcs(pred, gold) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, r) = (l / pred.len() as f64, l / gold.len() as f64);
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l(pred: &str, gold: &str) -> f64 {
    rouge_l_tokens(&tokenize(pred), &tokenize(gold))
}

/// Corpus CIDEr: TF-IDF n-gram cosine similarity with document frequencies
/// from the gold corpus, averaged over orders 1-4 and pairs, times 10.
pub fn cider<P: AsRef<str>, G: AsRef<str>>(preds: &[P], golds: &[G]) -> Option<f64> {
    assert_eq!(preds.len(), golds.len(), "one prediction per gold answer");
    if preds.is_empty() {
        return None;
    }
    let pt: Vec<Vec<String>> = preds.iter().map(|p| tokenize(p.as_ref())).collect();
    let gt: Vec<Vec<String>> = golds.iter().map(|g| tokenize(g.as_ref())).collect();
    let n_docs = gt.len() as f64;
    let mut total = 0.0;
    for n in 1..=MAX_ORDER {
        let gold_grams: Vec<HashMap<Vec<&str>, usize>> = gt.iter().map(|t| ngrams(t, n)).collect();
        let mut df: HashMap<Vec<&str>, usize> = HashMap::new();
        for g in &gold_grams {
            for k in g.keys() {
                *df.entry(k.clone()).or_insert(0) += 1;
            }
        }
        for (p, g) in pt.iter().zip(&gold_grams) {
            let vp = tfidf(&ngrams(p, n), &df, n_docs);
            let vg = tfidf(g, &df, n_docs);
            let dot: f64 = vp.iter().map(|(k, a)| a * vg.get(k).copied().unwrap_or(0.0)).sum();
            let np = vp.values().map(|a| a * a).sum::<f64>().sqrt();
            let ng = vg.values().map(|a| a * a).sum::<f64>().sqrt();
            if np > 0.0 && ng > 0.0 {
                total += dot / (np * ng);
            }
        }
    }
    Some(CIDER_SCALE * total / (MAX_ORDER as f64 * preds.len() as f64))
}

fn tfidf<'a>(m: &HashMap<Vec<&'a str>, usize>, df: &HashMap<Vec<&str>, usize>, n_docs: f64) -> HashMap<Vec<&'a str>, f64> {
    let len: usize = m.values().sum();
    m.iter()
        .map(|(k, &c)| {
            let idf = (n_docs / df.get(k).copied().unwrap_or(0).max(1) as f64).ln();
            (k.clone(), c as f64 / len.max(1) as f64 * idf)
        })
        .collect()
}

/// Token-level F1 ×100 over lowercased tokens.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p: Vec<String> = tokenize(pred).into_iter().map(|t| t.to_lowercase()).collect();
    let g: Vec<String> = tokenize(gold).into_iter().map(|t| t.to_lowercase()).collect();
    if p.is_empty() && g.is_empty() {
        return 100.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let (prec, rec) = (overlap as f64 / p.len() as f64, overlap as f64 / g.len() as f64);
    100.0 * 2.0 * prec * rec / (prec + rec)
}

/// Normalized image-plane distance between two tag centres; `None` across cameras.
pub fn tag_distance(a: &CTag, b: &CTag) -> Option<f64> {
    (a.cam == b.cam).then(|| {
        let du = (a.u - b.u) as f64 / IMAGE_WIDTH as f64;
        let dv = (a.v - b.v) as f64 / IMAGE_HEIGHT as f64;
        du.hypot(dv)
    })
}

/// Percentage of gold tags recovered one-to-one by predicted tags within
/// `tol`. Malformed predicted tags never match. With no gold tags the score
/// is 100 when nothing was predicted and 0 otherwise.
pub fn match_score(pred: &[&str], gold: &[CTag], tol: f64) -> f64 {
    let parsed: Vec<CTag> = pred.iter().filter_map(|w| w.parse().ok()).collect();
    if gold.is_empty() {
        return if pred.is_empty() { 100.0 } else { 0.0 };
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in parsed.iter().enumerate() {
        for (j, g) in gold.iter().enumerate() {
            if let Some(d) = tag_distance(p, g) {
                if d <= tol {
                    pairs.push((d, i, j));
                }
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_g) = (vec![false; parsed.len()], vec![false; gold.len()]);
    let mut matched = 0;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            matched += 1;
        }
    }
    100.0 * matched as f64 / gold.len() as f64
}

/// Tag-shaped words in `pred` scored against the tags of `gold`.
pub fn match_text(pred: &str, gold: &str, tol: f64) -> f64 {
    let gold_tags: Vec<CTag> = crate::scene::ctag::extract_tags(gold);
    match_score(&tag_words(pred), &gold_tags, tol)
}

/// Scores entering the final combination, each on a 0-100 scale except
/// CIDEr, which keeps its own scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub accuracy: Option<f64>,
    pub judge: Option<f64>,
    pub bleu: Option<f64>,
    pub rouge_l: Option<f64>,
    pub cider: Option<f64>,
    pub match_score: Option<f64>,
}

impl Components {
    pub fn lang_score(&self) -> Option<f64> {
        Some((self.bleu? + self.rouge_l? + self.cider?) / 3.0)
    }

    /// `0.2·accuracy + 0.4·judge + 0.2·language + 0.2·match`.
    pub fn final_score(&self) -> Result<f64> {
        let need = |v: Option<f64>, name: &'static str| v.ok_or(LmadError::MissingComponent(name));
        let acc = need(self.accuracy, "accuracy")?;
        let judge = need(self.judge, "judge")?;
        let bleu = need(self.bleu, "bleu")?;
        let rouge = need(self.rouge_l, "rouge_l")?;
        let cider = need(self.cider, "cider")?;
        let m = need(self.match_score, "match")?;
        Ok(0.2 * acc + 0.4 * judge + 0.2 * (bleu + rouge + cider) / 3.0 + 0.2 * m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&["A", "B"], &["A", "B"]), Some(100.0));
        assert_eq!(accuracy(&["A", "B"], &["C", "D"]), Some(0.0));
        assert_eq!(accuracy(&["Yes", "No", " A ", "B"], &["Yes", "No", "A", "C"]), Some(75.0));
        assert_eq!(accuracy::<&str, &str>(&[], &[]), None);
    }

    #[test]
    fn rouge_hand_example() {
        let (p, r) = (1.0, 2.0 / 3.0);
        let b2 = 1.44;
        let want = (1.0 + b2) * p * r / (r + b2 * p);
        assert!((rouge_l("a c", "a b c") - want).abs() < 1e-12);
        assert_eq!(rouge_l("x y", "a b"), 0.0);
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu("the car turns left", "the car turns left"), 1.0);
        assert_eq!(bleu("Yes", "Yes"), 1.0);
        assert_eq!(bleu("x y z w", "a b c d"), 0.0);
        assert_eq!(bleu("", "a"), 0.0);
        // No 4-gram in common.
        let got = bleu("a b c d a", "a b c x y");
        assert_eq!(got, 0.0);
        let got = bleu("a b c d e", "a b c d f");
        let want = ((4.0 / 5.0f64).ln() + (3.0 / 4.0f64).ln() + (2.0 / 3.0f64).ln() + (1.0 / 2.0f64).ln()) / 4.0;
        assert!((got - want.exp()).abs() < 1e-12);
    }

    #[test]
    fn cider_self_match_is_max() {
        let g = ["the car is parked", "a truck turns left", "there is a pedestrian ahead"];
        let s = cider(&g, &g).unwrap();
        assert!(s > 0.0);
        let other = ["the car is moving", "a truck turns right", "nothing here"];
        assert!(cider(&other, &g).unwrap() < s);
        assert_eq!(cider::<&str, &str>(&[], &[]), None);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1("turn left", "turn left"), 100.0);
        assert_eq!(token_f1("go", "turn left"), 0.0);
        assert!((token_f1("turn left slowly", "turn left") - 80.0).abs() < 1e-9);
    }

    #[test]
    fn match_examples() {
        let c1: CTag = "<c1,CAM_FRONT,800,450>".parse().unwrap();
        let c2: CTag = "<c2,CAM_BACK,100,200>".parse().unwrap();
        assert_eq!(match_score(&["<c1,CAM_FRONT,800,450>", "<c2,CAM_BACK,100,200>"], &[c1, c2], MATCH_TOL), 100.0);
        assert_eq!(match_score(&["<c1,CAM_FRONT,800,450>"], &[c1, c2], MATCH_TOL), 50.0);
        // 0.05 of the width is 80 px horizontally.
        assert_eq!(match_score(&["<c9,CAM_FRONT,880,450>"], &[c1], MATCH_TOL), 100.0);
        assert_eq!(match_score(&["<c9,CAM_FRONT,881,450>"], &[c1], MATCH_TOL), 0.0);
        assert_eq!(match_score(&["<c1,CAM_BACK,800,450>"], &[c1], MATCH_TOL), 0.0);
        assert_eq!(match_score(&["<c1,CAM_FRONT,80>"], &[c1], MATCH_TOL), 0.0);
        assert_eq!(match_score(&[], &[], MATCH_TOL), 100.0);
    }

    #[test]
    fn final_score_examples() {
        let c = Components {
            accuracy: Some(74.56),
            judge: Some(63.80),
            bleu: Some(67.87),
            rouge_l: Some(74.14),
            cider: Some(1.70),
            match_score: Some(35.19),
        };
        assert!((c.lang_score().unwrap() - 47.90).abs() < 0.005);
        assert!((c.final_score().unwrap() - 57.05).abs() <= 0.01);
        let z = Components { accuracy: Some(0.0), judge: Some(0.0), bleu: Some(0.0), rouge_l: Some(0.0), cider: Some(0.0), match_score: Some(0.0) };
        assert_eq!(z.final_score().unwrap(), 0.0);
        let h = Components { accuracy: Some(100.0), judge: Some(100.0), bleu: Some(100.0), rouge_l: Some(100.0), cider: Some(100.0), match_score: Some(100.0) };
        assert!((h.final_score().unwrap() - 100.0).abs() < 1e-12);
        let missing = Components { judge: None, ..h };
        assert!(matches!(missing.final_score(), Err(LmadError::MissingComponent("judge"))));
    }

    fn words() -> impl Strategy<Value = String> {
        proptest::collection::vec(proptest::sample::select(vec!["a", "b", "c", "car", "left", ",", "."]), 0..8).prop_map(|v| v.join(" "))
    }

    proptest! {
        #[test]
        fn metric_bounds(p in words(), g in words()) {
            for v in [bleu(&p, &g), rouge_l(&p, &g)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let f = token_f1(&p, &g);
            prop_assert!((0.0..=100.0).contains(&f));
            prop_assert!(cider(&[&p], &[&g]).unwrap() >= 0.0);
            if !g.is_empty() {
                prop_assert_eq!(bleu(&g, &g), 1.0);
                prop_assert_eq!(rouge_l(&g, &g), 1.0);
                prop_assert!(bleu(&p, &g) <= 1.0 && rouge_l(&p, &g) <= 1.0);
            }
            prop_assert_eq!(token_f1(&g, &g), 100.0);
        }
    }
}
