//! Joint task + alignment fine-tuning loop and evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_grad, relative_error, Tape, Var, GRAD_CHECK_FLOOR};
use crate::backbone::Backbone;
use crate::data::{average_precision, Dataset, GroundingSample};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::pot::{pvla_loss_var, pvla_loss_with_plan, SolverConfig, TransportMode, TransportPlan};
use crate::tensor::Tensor;

use super::adamw::{adamw_step, AdamHyper, AdamState};
use super::strategy::{masked_numel, select_trainable, FinetuneStrategy};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PvlaMode {
    Off,
    /// Transport all of the mass.
    Vla,
    #[default]
    Pvla,
}

impl std::str::FromStr for PvlaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "off" => Ok(PvlaMode::Off),
            "vla" => Ok(PvlaMode::Vla),
            "pvla" => Ok(PvlaMode::Pvla),
            other => Err(Error::Config(format!("unknown pvla mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for PvlaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PvlaMode::Off => "off",
            PvlaMode::Vla => "vla",
            PvlaMode::Pvla => "pvla",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub lambda_pvla: f64,
    pub pvla_mode: PvlaMode,
    pub solver: SolverConfig,
    pub seed: u64,
    pub preset: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 4,
            learning_rate: 1e-2,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            lambda_pvla: 1.0,
            pvla_mode: PvlaMode::Pvla,
            solver: SolverConfig::default(),
            seed: 0,
            preset: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        // a zero rate is allowed: it turns a run into a pure evaluation pass
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.lambda_pvla >= 0.0) || !self.lambda_pvla.is_finite() {
            return Err(Error::Config(format!("lambda_pvla must be >= 0, got {}", self.lambda_pvla)));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("weight_decay must be >= 0 and eps > 0".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        self.solver.validate()
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            betas: self.betas,
            eps: self.eps,
        }
    }

    /// Solver settings for the configured alignment mode, `None` when off.
    pub fn alignment_solver(&self) -> Option<SolverConfig> {
        match self.pvla_mode {
            PvlaMode::Off => None,
            PvlaMode::Vla => Some(SolverConfig {
                mode: TransportMode::Full,
                ..self.solver.clone()
            }),
            PvlaMode::Pvla => Some(SolverConfig {
                mode: TransportMode::Partial,
                ..self.solver.clone()
            }),
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub task_loss: f64,
    pub pvla_loss: f64,
    pub total_loss: f64,
    pub val_map: f64,
    pub trainable_params: usize,
    pub total_params: usize,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub initial_val_map: f64,
    pub final_val_map: f64,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub mask: Vec<bool>,
}

/// Objective over a batch recorded on a tape.
pub struct BatchObjective {
    pub loss: Var,
    /// Mean task loss over the batch.
    pub task: f64,
    /// Mean (over samples) of the per-sample mean over blocks.
    pub pvla: f64,
    /// Plans used, per sample then per block.
    pub plans: Vec<Vec<TransportPlan>>,
}

/// `mean_s [BCE_s + λ · mean_m ⟨T, C(H_V, H_L^m)⟩]`.
///
/// With `frozen_plans`, the supplied plans are used instead of solving,
/// which makes the objective an ordinary smooth function of the parameters.
pub fn batch_objective(
    model: &Backbone,
    tape: &mut Tape,
    bound: &Bound,
    samples: &[&GroundingSample],
    cfg: &TrainConfig,
    frozen_plans: Option<&[Vec<TransportPlan>]>,
) -> Result<BatchObjective> {
    if samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let solver = cfg.alignment_solver();
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut plans = Vec::with_capacity(samples.len());
    let (mut task_sum, mut pvla_sum) = (0.0, 0.0);
    for (si, s) in samples.iter().enumerate() {
        let fv = model.forward_vars(tape, bound, &s.video, &s.lang)?;
        let task = tape.bce_with_logits(fv.logits, &s.targets())?;
        task_sum += tape.value(task).item();
        let Some(solver) = &solver else {
            per_sample.push(task);
            plans.push(Vec::new());
            continue;
        };
        let mut block_terms = Vec::with_capacity(fv.pairs.len());
        let mut block_plans = Vec::with_capacity(fv.pairs.len());
        for (m, &(hv, hl)) in fv.pairs.iter().enumerate() {
            let term = match frozen_plans {
                Some(p) => {
                    let plan = &p[si][m];
                    block_plans.push(plan.clone());
                    pvla_loss_with_plan(tape, hv, hl, plan)?
                }
                None => {
                    let (term, res) = pvla_loss_var(tape, hv, hl, solver)?;
                    block_plans.push(res.plan);
                    term
                }
            };
            block_terms.push(term);
        }
        let mut pv = block_terms[0];
        for &t in &block_terms[1..] {
            pv = tape.add(pv, t)?;
        }
        let pv = tape.scale(pv, 1.0 / block_terms.len() as f64)?;
        pvla_sum += tape.value(pv).item();
        let weighted = tape.scale(pv, cfg.lambda_pvla)?;
        per_sample.push(tape.add(task, weighted)?);
        plans.push(block_plans);
    }
    let mut total = per_sample[0];
    for &t in &per_sample[1..] {
        total = tape.add(total, t)?;
    }
    let n = samples.len() as f64;
    let loss = tape.scale(total, 1.0 / n)?;
    let (task, pvla) = (task_sum / n, pvla_sum / n);
    if !task.is_finite() {
        return Err(Error::Training(format!("non-finite task loss ({task})")));
    }
    if !pvla.is_finite() {
        return Err(Error::Training(format!("non-finite alignment loss ({pvla})")));
    }
    Ok(BatchObjective { loss, task, pvla, plans })
}

/// Mean frame-level AP of the model's logits over `samples`.
pub fn evaluate_map(model: &Backbone, samples: &[GroundingSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::UndefinedMetric("mAP over an empty split".into()));
    }
    let mut sum = 0.0;
    for s in samples {
        let scores = model.forward(&s.video, &s.lang)?;
        sum += average_precision(&scores, &s.labels)?;
    }
    Ok(sum / samples.len() as f64)
}

/// Mean task loss (no alignment term) over `samples`.
pub fn evaluate_task_loss(model: &Backbone, samples: &[GroundingSample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape, None);
        let fv = model.forward_vars(&mut tape, &bound, &s.video, &s.lang)?;
        let l = tape.bce_with_logits(fv.logits, &s.targets())?;
        sum += tape.value(l).item();
    }
    Ok(sum / samples.len().max(1) as f64)
}

/// Trains the parameters `strategy` selects on `data.train`, reporting
/// validation mAP after every epoch. Modules must already be inserted
/// (see [`FinetuneStrategy::prepare`]).
pub fn train_finetune(
    model: &mut Backbone,
    strategy: &FinetuneStrategy,
    data: &Dataset,
    cfg: &TrainConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let mask = select_trainable(model, strategy)?;
    let trainable_params = masked_numel(model, &mask);
    let total_params = model.total_params();
    let shapes: Vec<Vec<usize>> = model
        .store
        .iter()
        .filter(|(id, _)| mask[id.index()])
        .map(|(_, p)| p.value.shape().to_vec())
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut state = AdamState::new(&shape_refs);
    let hyper = cfg.hyper();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00_0000);

    let initial_val_map = evaluate_map(model, &data.val)?;
    let initial_train_loss = evaluate_task_loss(model, &data.train)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut task_acc, mut pvla_acc, mut total_acc) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&GroundingSample> = batch.iter().map(|&i| &data.train[i]).collect();
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape, Some(&mask));
            let obj = batch_objective(model, &mut tape, &bound, &samples, cfg, None)
                .map_err(|e| annotate(e, epoch))?;
            let n = samples.len() as f64;
            task_acc += obj.task * n;
            pvla_acc += obj.pvla * n;
            total_acc += tape.value(obj.loss).item() * n;
            tape.backward(obj.loss)?;
            let grads: Vec<Tensor> = model
                .store
                .iter()
                .filter(|(id, _)| mask[id.index()])
                .map(|(id, p)| {
                    tape.grad(bound[id])
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
                })
                .collect();
            let mut params = model.store.masked_values_mut(&mask);
            adamw_step(&mut params, &grads, &mut state, &hyper).map_err(|e| annotate(e, epoch))?;
        }
        let n = data.train.len() as f64;
        let row = EpochMetrics {
            epoch,
            task_loss: task_acc / n,
            pvla_loss: pvla_acc / n,
            total_loss: total_acc / n,
            val_map: evaluate_map(model, &data.val)?,
            trainable_params,
            total_params,
        };
        if let Some(w) = metrics.as_deref_mut() {
            let line = serde_json::to_string(&row)?;
            writeln!(w, "{line}").map_err(|e| Error::io("<metrics>", e))?;
        }
        history.push(row);
    }
    let final_val_map = history.last().map(|r| r.val_map).unwrap_or(initial_val_map);
    Ok(TrainReport {
        history,
        initial_val_map,
        final_val_map,
        initial_train_loss,
        final_train_loss: evaluate_task_loss(model, &data.train)?,
        mask,
    })
}

fn annotate(e: Error, epoch: usize) -> Error {
    match e {
        Error::Training(msg) => Error::Training(format!("epoch {epoch}: {msg}")),
        Error::Numeric(msg) => Error::Training(format!("epoch {epoch}: {msg}")),
        other => other,
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: (String, usize),
}

/// Compares tape gradients of the batch objective with central
/// differences for every coordinate of every masked parameter. Transport
/// plans are solved once at the current point and held fixed while probing.
pub fn gradient_check(
    model: &Backbone,
    mask: &[bool],
    samples: &[&GroundingSample],
    cfg: &TrainConfig,
    h: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, Some(mask));
    let obj = batch_objective(model, &mut tape, &bound, samples, cfg, None)?;
    tape.backward(obj.loss)?;
    let plans = obj.plans;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: (String::new(), 0),
    };
    let mut probe = model.clone();
    for (id, p) in model.store.iter().filter(|(id, _)| mask[id.index()]) {
        let analytic = tape
            .grad(bound[id])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let numeric = finite_diff_grad(
            |x| {
                *probe.store.value_mut(id) = x.clone();
                let mut t = Tape::new();
                let b = probe.store.bind(&mut t, None);
                let o = batch_objective(&probe, &mut t, &b, samples, cfg, Some(&plans))?;
                Ok(t.value(o.loss).item())
            },
            &p.value,
            h,
        )?;
        *probe.store.value_mut(id) = p.value.clone();
        for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let err = relative_error(*a, *n, GRAD_CHECK_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (p.name.clone(), i);
            }
        }
    }
    Ok(report)
}
