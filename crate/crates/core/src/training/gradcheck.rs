//! Central finite-difference gradient checks.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{sample_objective, trainable_params, Strategy};
use crate::autograd::{Graph, Var};
use crate::error::{LmadError, Result};
use crate::model::{LmadModel, Sample};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub rtol: f64,
    /// Coordinates sampled per parameter; entire tensors when smaller.
    pub coords_per_param: usize,
    pub seed: u64,
    /// Multiply the analytic gradient of one parameter by a factor.
    pub corrupt: Option<(ParamId, f64)>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, rtol: 1e-4, coords_per_param: 6, seed: 0, corrupt: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖a − n‖ / max(‖a‖, ‖n‖, floor)` over the sampled coordinates.
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn failed(&self) -> Vec<&str> {
        self.params.iter().filter(|p| !p.passed).map(|p| p.name.as_str()).collect()
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }
}

/// Denominator floor so that exactly-zero gradients compare cleanly.
const REL_FLOOR: f64 = 1e-8;

/// Checks `loss` against finite differences for every id in `params`.
/// Detached nodes replay their baseline values in the perturbed runs, so
/// stop-gradients hold exactly under finite differences too.
pub fn check_gradients(
    store: &ParamStore,
    params: &[ParamId],
    cfg: &GradCheckConfig,
    loss: &dyn Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let base = g.value(out).item();
    if !base.is_finite() {
        return Err(LmadError::GradCheck(format!("non-finite baseline loss {base}")));
    }
    let analytic: BTreeMap<ParamId, Tensor> = g.backward(out).into_params();
    let replay = Rc::new(g.detached_values());
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::replaying(replay.clone());
        let out = loss(&mut g, s)?;
        Ok(g.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut checks = Vec::with_capacity(params.len());
    for &id in params {
        let len = store.get(id).len();
        let coords: Vec<usize> = if len <= cfg.coords_per_param {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, cfg.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let factor = match cfg.corrupt {
            Some((cid, f)) if cid == id => f,
            _ => 1.0,
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &i in &coords {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + cfg.eps;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - cfg.eps;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(LmadError::GradCheck(format!("non-finite loss perturbing {}[{i}]", store.name(id))));
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = factor * analytic.get(&id).map_or(0.0, |t| t.data()[i]);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(REL_FLOOR);
        checks.push(ParamCheck {
            name: store.name(id).to_string(),
            coords: coords.len(),
            analytic_norm: a2.sqrt(),
            numeric_norm: n2.sqrt(),
            rel_error: rel,
            passed: rel <= cfg.rtol,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { params: checks, max_rel_error })
}

/// Perturbs zero-initialized adapter factors and prefix gates so every
/// trainable parameter carries a nonzero gradient.
pub fn perturb_zero_inits(model: &mut LmadModel, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.store.ids().filter(|&id| model.store.get(id).max_abs() == 0.0).collect();
    for id in ids {
        let (r, c) = model.store.get(id).shape();
        model.store.set(id, Tensor::randn(r, c, std, &mut rng));
    }
}

/// Checks the full objective of `batch` (summed) for every parameter the
/// strategy trains, plus the backbone heads.
pub fn grad_check(model: &LmadModel, batch: &[&Sample], strategy: Strategy, lambda: f64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut ids = trainable_params(model, strategy);
    for id in model.backbone_params() {
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    let loss = |g: &mut Graph, store: &ParamStore| -> Result<Var> {
        let view = LmadModel { store: store.clone(), ..model.clone() };
        let mut total: Option<Var> = None;
        for s in batch {
            let obj = sample_objective(g, &view, s, strategy, lambda)?;
            total = Some(match total {
                Some(t) => g.add(t, obj.total),
                None => obj.total,
            });
        }
        total.ok_or_else(|| LmadError::Input("empty batch".into()))
    };
    check_gradients(&model.store, &ids, cfg, &loss)
}
