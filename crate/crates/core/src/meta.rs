//! First-order MAML over weights and architecture logits.
//!
//! `task_adapt` runs M plain gradient steps on a support batch from a copy
//! of the parameters; `meta_step` evaluates the query loss at the adapted
//! point and applies that gradient to the original parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, Batch, Dataset, DataError};
use crate::error::{Error, Result};
use crate::metrics::EpochMetrics;
use crate::params::ParamSet;
use crate::prune::{fix_orphans, prune_check, MaskEntry, PruneMask};
use crate::search::{register, ArchParams, Mode, SuperNet};
use crate::tensor::{Tape, TensorError};

/// Network weights and architecture logits, updated together.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub w: ParamSet,
    pub alpha: ParamSet,
}

/// Loss, accuracy counts and gradient at one parameter point.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
    pub grad: Params,
}

pub trait Objective {
    type Batch;

    fn evaluate<R: Rng + ?Sized>(&self, params: &Params, batch: &Self::Batch, rng: &mut R) -> Result<Evaluation>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// One backward pass per inner step; w and α step together.
    #[default]
    Joint,
    /// Step w first, then recompute the gradient for the α step.
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearnerConfig {
    /// Inner rates for (w, α).
    pub eta_task: (f32, f32),
    /// Meta rates for (w, α).
    pub eta_meta: (f32, f32),
    pub inner_steps: usize,
    pub epochs: usize,
    pub rule: UpdateRule,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            eta_task: (0.05, 0.01),
            eta_meta: (0.025, 0.005),
            inner_steps: 3,
            epochs: 5,
            rule: UpdateRule::Joint,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.eta_task.0, self.eta_task.1, self.eta_meta.0, self.eta_meta.1];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidLearner(format!("learning rates must be finite and >= 0, got {rates:?}")));
        }
        if self.inner_steps == 0 {
            return Err(Error::InvalidLearner("inner_steps must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidLearner("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

fn step(params: &mut Params, grad: &Params, rates: (f32, f32)) {
    params.w.sub_scaled(&grad.w, rates.0);
    params.alpha.sub_scaled(&grad.alpha, rates.1);
}

fn checked<O: Objective, R: Rng + ?Sized>(
    obj: &O,
    params: &Params,
    batch: &O::Batch,
    step: usize,
    rng: &mut R,
) -> Result<Evaluation> {
    match obj.evaluate(params, batch, rng) {
        Ok(e) if e.loss.is_finite() => Ok(e),
        Ok(_) | Err(Error::Tensor(TensorError::NonFinite { .. })) => Err(Error::NonFiniteLoss { step }),
        Err(e) => Err(e),
    }
}

/// Adapted parameters plus the support evaluation at the starting point.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub params: Params,
    pub initial: Evaluation,
}

/// M gradient steps on `support` from a copy of `params`.
pub fn task_adapt<O: Objective, R: Rng + ?Sized>(
    cfg: &LearnerConfig,
    obj: &O,
    params: &Params,
    support: &O::Batch,
    rng: &mut R,
) -> Result<Adapted> {
    cfg.validate()?;
    let mut cur = params.clone();
    let mut initial = None;
    for m in 0..cfg.inner_steps {
        let eval = checked(obj, &cur, support, m, rng)?;
        match cfg.rule {
            UpdateRule::Joint => step(&mut cur, &eval.grad, cfg.eta_task),
            UpdateRule::Sequential => {
                cur.w.sub_scaled(&eval.grad.w, cfg.eta_task.0);
                let second = checked(obj, &cur, support, m, rng)?;
                cur.alpha.sub_scaled(&second.grad.alpha, cfg.eta_task.1);
            }
        }
        if !(cur.w.is_finite() && cur.alpha.is_finite()) {
            return Err(Error::NonFiniteLoss { step: m });
        }
        initial.get_or_insert(eval);
    }
    Ok(Adapted {
        params: cur,
        initial: initial.expect("at least one inner step"),
    })
}

/// Outcome of one meta update.
#[derive(Clone, Debug)]
pub struct MetaStep {
    pub params: Params,
    pub support_loss: f64,
    pub query: Evaluation,
}

/// First-order meta update: the query gradient at the adapted point is
/// applied to the original parameters.
pub fn meta_step<O: Objective, R: Rng + ?Sized>(
    cfg: &LearnerConfig,
    obj: &O,
    params: &Params,
    support: &O::Batch,
    query: &O::Batch,
    rng: &mut R,
) -> Result<MetaStep> {
    let adapted = task_adapt(cfg, obj, params, support, rng)?;
    let q = checked(obj, &adapted.params, query, cfg.inner_steps, rng)?;
    let mut next = params.clone();
    step(&mut next, &q.grad, cfg.eta_meta);
    if !(next.w.is_finite() && next.alpha.is_finite()) {
        return Err(Error::NonFiniteLoss { step: cfg.inner_steps });
    }
    Ok(MetaStep {
        params: next,
        support_loss: adapted.initial.loss,
        query: q,
    })
}

/// Cross-entropy of the supernet at a fixed temperature and mask.
pub struct SupernetObjective<'a> {
    pub net: &'a SuperNet,
    pub lambda: f32,
    pub mask: &'a [MaskEntry],
    pub mode: Mode,
}

impl Objective for SupernetObjective<'_> {
    type Batch = Batch;

    fn evaluate<R: Rng + ?Sized>(&self, params: &Params, batch: &Batch, rng: &mut R) -> Result<Evaluation> {
        let mut tape = Tape::new();
        let wv = register(&mut tape, &params.w, true)?;
        let av = register(&mut tape, &params.alpha, true)?;
        let sel = self.net.select(&mut tape, &av, self.lambda, self.mask, self.mode, rng)?;
        let x = tape.constant(batch.inputs.clone())?;
        let logits = self.net.forward(&mut tape, &wv, &sel, x)?;
        let loss = tape.cross_entropy(logits, &batch.labels)?;
        tape.backward(loss)?;
        let correct = count_correct(tape.value(logits)?.data(), &batch.labels);
        let grads = |vars: &[crate::tensor::Var], set: &ParamSet| -> Result<ParamSet> {
            let mut g = set.zeros_like();
            for (p, &v) in g.iter_mut().zip(vars) {
                if let Some(d) = tape.grad(v)? {
                    p.data.copy_from_slice(d);
                }
            }
            Ok(g)
        };
        Ok(Evaluation {
            loss: tape.value(loss)?.data()[0] as f64,
            correct,
            total: batch.labels.len(),
            grad: Params {
                w: grads(&wv, &params.w)?,
                alpha: grads(&av, &params.alpha)?,
            },
        })
    }
}

/// Rows of `logits` (row-major, one row per label) whose argmax matches.
pub fn count_correct(logits: &[f32], labels: &[usize]) -> usize {
    if labels.is_empty() {
        return 0;
    }
    let c = logits.len() / labels.len();
    logits
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &l)| crate::search::argmax(row) == l)
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSizes {
    pub support: usize,
    pub query: usize,
}

impl Default for EpisodeSizes {
    fn default() -> Self {
        Self { support: 32, query: 32 }
    }
}

/// Result of one client's local search.
#[derive(Clone, Debug)]
pub struct ClientResult {
    pub params: Params,
    pub mask: PruneMask,
    pub metrics: Vec<EpochMetrics>,
}

/// E epochs of (sample episode, meta update, pruning check) on one shard.
/// `epoch_offset` is the number of meta epochs already run on this model
/// before this call; pruning checks use the cumulative count.
#[allow(clippy::too_many_arguments)]
pub fn client_search<R: Rng + ?Sized>(
    cfg: &LearnerConfig,
    net: &SuperNet,
    params: &Params,
    mask: &PruneMask,
    lambda: f32,
    data: &Dataset,
    shard: &[usize],
    sizes: EpisodeSizes,
    epoch_offset: usize,
    rng: &mut R,
) -> Result<ClientResult> {
    cfg.validate()?;
    if shard.is_empty() || sizes.support + sizes.query > shard.len() {
        return Err(DataError::ShardTooSmall {
            needed: sizes.support + sizes.query,
            available: shard.len(),
        }
        .into());
    }
    let mut cur = params.clone();
    let mut mask = mask.clone();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for e in 1..=cfg.epochs {
        let ep = sample_episode(&data.labels, shard, sizes.support, sizes.query, rng)?;
        let (support, query) = (data.batch(&ep.support), data.batch(&ep.query));
        let obj = SupernetObjective {
            net,
            lambda,
            mask: mask.entries(),
            mode: Mode::Search,
        };
        let out = meta_step(cfg, &obj, &cur, &support, &query, rng)?;
        cur = out.params;
        let arch = ArchParams {
            logits: cur.alpha.clone(),
            lambda,
            combo_size: net.geometry.combo_size,
        };
        let (next, fixed) = prune_check(&arch, &mask, epoch_offset + e)?;
        let (next, orphans) = fix_orphans(&net.layout, &arch, &next);
        mask = next;
        metrics.push(EpochMetrics {
            epoch: e as u32,
            support_loss: out.support_loss,
            query_loss: out.query.loss,
            query_acc: out.query.correct as f64 / out.query.total.max(1) as f64,
            lambda: lambda as f64,
            prune_events: (fixed + orphans) as u32,
        });
    }
    Ok(ClientResult {
        params: cur,
        mask,
        metrics,
    })
}
