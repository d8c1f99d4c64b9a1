//! Semantic judge: an external HTTP scorer with a token-F1 fallback.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::metrics::token_f1;
use crate::error::{LmadError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub question: String,
    pub reference: String,
    pub candidate: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    External,
    Fallback,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub score: f64,
    pub provenance: Provenance,
}

#[derive(Deserialize)]
struct JudgeResponse {
    score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    /// Endpoint URL; `None` scores everything with the fallback.
    pub url: Option<String>,
    /// Environment variable holding a bearer token.
    pub token_env: String,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self { url: None, token_env: "LMAD_JUDGE_TOKEN".into(), max_in_flight: 4, timeout_secs: 30 }
    }
}

pub fn fallback_score(req: &JudgeRequest) -> JudgeScore {
    JudgeScore { score: token_f1(&req.candidate, &req.reference), provenance: Provenance::Fallback }
}

#[derive(Clone, Debug)]
pub struct Judge {
    cfg: JudgeConfig,
}

impl Judge {
    pub fn new(cfg: JudgeConfig) -> Self {
        Self { cfg }
    }

    pub fn fallback() -> Self {
        Self::new(JudgeConfig::default())
    }

    pub fn config(&self) -> &JudgeConfig {
        &self.cfg
    }

    fn request(&self, agent: &ureq::Agent, url: &str, token: Option<&str>, req: &JudgeRequest) -> Result<f64> {
        let mut call = agent.post(url);
        if let Some(t) = token {
            call = call.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = call.send_json(req).map_err(|e| LmadError::Judge(e.to_string()))?;
        let body: JudgeResponse = resp.body_mut().read_json().map_err(|e| LmadError::Judge(e.to_string()))?;
        if !(0.0..=100.0).contains(&body.score) {
            return Err(LmadError::Judge(format!("score {} outside [0, 100]", body.score)));
        }
        Ok(body.score)
    }

    /// Scores in input order. Failed requests fall back per item, so the
    /// provenance of each score says which path produced it.
    pub fn score_all(&self, reqs: &[JudgeRequest]) -> Vec<JudgeScore> {
        let Some(url) = self.cfg.url.as_deref() else {
            return reqs.iter().map(fallback_score).collect();
        };
        let token = std::env::var(&self.cfg.token_env).ok();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(self.cfg.timeout_secs)))
            .build()
            .into();
        let results: Vec<Mutex<Option<JudgeScore>>> = reqs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.cfg.max_in_flight.clamp(1, reqs.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(req) = reqs.get(i) else { break };
                    let score = match self.request(&agent, url, token.as_deref(), req) {
                        Ok(score) => JudgeScore { score, provenance: Provenance::External },
                        Err(e) => {
                            log::warn!("judge request {i} failed, using fallback: {e}");
                            fallback_score(req)
                        }
                    };
                    *results[i].lock().expect("judge result slot") = Some(score);
                });
            }
        });
        results.into_iter().map(|m| m.into_inner().expect("judge result slot").expect("every request scored")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(c: &str, r: &str) -> JudgeRequest {
        JudgeRequest { question: "q".into(), reference: r.into(), candidate: c.into() }
    }

    #[test]
    fn fallback_examples() {
        let j = Judge::fallback();
        let s = j.score_all(&[req("turn left", "turn left"), req("stop", "turn left"), req("turn left slowly", "turn left")]);
        assert_eq!(s[0].score, 100.0);
        assert_eq!(s[1].score, 0.0);
        assert!((s[2].score - 80.0).abs() < 1e-9);
        assert!(s.iter().all(|x| x.provenance == Provenance::Fallback));
    }

    #[test]
    fn unreachable_endpoint_falls_back() {
        let j = Judge::new(JudgeConfig { url: Some("http://127.0.0.1:9/score".into()), timeout_secs: 2, ..JudgeConfig::default() });
        let s = j.score_all(&[req("a", "a")]);
        assert_eq!(s[0], JudgeScore { score: 100.0, provenance: Provenance::Fallback });
    }
}
