//! Two-stage training: Stage 1 pretrains the encoders and pretraining
//! classifier under the CMD constraint on full-modality data; Stage 2 trains
//! the student (imagination module + classifier, encoders warm-started from
//! Stage 1) against the frozen teacher under sampled missing-modality
//! conditions.

use crate::cmd::{cmd_loss, CmdConfig};
use crate::data::{weighted_accuracy, RawUtterance};
use crate::error::{Error, Result};
use crate::graph::{Graph, GradMap, VarId};
use crate::model::{pretrain_forward, student_forward, teacher_targets, ModelSpec};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Which modalities are available at the input. Only the six nonempty
/// proper subsets of {a, v, t} are legal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MissingCondition {
    pub a: bool,
    pub v: bool,
    pub t: bool,
}

pub const ALL_CONDITIONS: [MissingCondition; 6] = [
    MissingCondition { a: true, v: false, t: false },
    MissingCondition { a: false, v: true, t: false },
    MissingCondition { a: false, v: false, t: true },
    MissingCondition { a: true, v: true, t: false },
    MissingCondition { a: true, v: false, t: true },
    MissingCondition { a: false, v: true, t: true },
];

impl MissingCondition {
    pub fn label(&self) -> &'static str {
        match (self.a, self.v, self.t) {
            (true, false, false) => "a",
            (false, true, false) => "v",
            (false, false, true) => "t",
            (true, true, false) => "av",
            (true, false, true) => "at",
            (false, true, true) => "vt",
            _ => "invalid",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        ALL_CONDITIONS
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| Error::invalid(format!("unknown condition '{s}'")))
    }
}

/// Uniform over the six legal conditions.
pub fn sample_condition(rng: &mut impl Rng) -> MissingCondition {
    ALL_CONDITIONS[rng.gen_range(0..ALL_CONDITIONS.len())]
}

/// Replace unavailable modalities with all-zero length-1 sequences.
pub fn apply_missing(u: &RawUtterance, c: MissingCondition) -> RawUtterance {
    let zeroed = |t: &Tensor, keep: bool| {
        if keep {
            t.clone()
        } else {
            Tensor::zeros(vec![1, t.cols()])
        }
    };
    RawUtterance {
        id: u.id,
        label: u.label,
        acoustic: zeroed(&u.acoustic, c.a),
        visual: zeroed(&u.visual, c.v),
        textual: zeroed(&u.textual, c.t),
    }
}

/// Constant for the first half of the schedule, then linear decay to zero.
pub fn lr_schedule(epoch: usize, initial_lr: f64, total_epochs: usize) -> Result<f64> {
    if epoch < 1 || epoch > total_epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} out of range 1..={total_epochs}"
        )));
    }
    let half = total_epochs / 2;
    if epoch <= half {
        Ok(initial_lr)
    } else {
        Ok(initial_lr * (total_epochs - epoch) as f64 / (total_epochs - half) as f64)
    }
}

/// Adam accumulator state, keyed by parameter name.
#[derive(Default)]
pub struct AdamState {
    moments: HashMap<String, (Tensor, Tensor)>,
    step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam update over every non-frozen parameter with a gradient.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &HashMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for entry in store.iter_mut() {
        if entry.frozen {
            continue;
        }
        let Some(grad) = grads.get(&entry.name) else {
            continue;
        };
        if grad.shape() != entry.tensor.shape() {
            return Err(Error::ShapeMismatch {
                kind: format!("adam gradient for '{}'", entry.name),
                lhs: entry.tensor.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let (m, v) = state
            .moments
            .entry(entry.name.clone())
            .or_insert_with(|| {
                (
                    Tensor::zeros(entry.tensor.shape().to_vec()),
                    Tensor::zeros(entry.tensor.shape().to_vec()),
                )
            });
        let p = entry.tensor.data_mut();
        for i in 0..p.len() {
            let gi = grad.data()[i];
            let mi = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            p[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

fn collect_grads(
    store: &ParamStore,
    bp: &BoundParams,
    grads: &GradMap,
) -> Result<HashMap<String, Tensor>> {
    let mut out = HashMap::new();
    for e in store.iter() {
        if e.frozen {
            continue;
        }
        let id = bp.var(&e.name)?;
        if let Some(g) = &grads[id] {
            out.insert(e.name.clone(), g.clone());
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Split {
    pub fold: usize,
}

/// One fold's id partition.
#[derive(Clone, Debug)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic shuffled k-fold partition. Per fold, part i is the test
/// set, part (i+1) mod k the validation set, the rest training.
pub fn kfold_split(n: usize, folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if folds < 2 {
        return Err(Error::invalid(format!("folds {folds} < 2")));
    }
    if n < folds {
        return Err(Error::invalid(format!("dataset size {n} < folds {folds}")));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut crate::rng::stream(seed, "kfold"));
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); folds];
    for (i, id) in ids.into_iter().enumerate() {
        parts[i % folds].push(id);
    }
    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let val_part = (f + 1) % folds;
        let mut train = Vec::new();
        for (p, part) in parts.iter().enumerate() {
            if p != f && p != val_part {
                train.extend_from_slice(part);
            }
        }
        out.push(FoldSplit {
            train,
            val: parts[val_part].clone(),
            test: parts[f].clone(),
        });
    }
    Ok(out)
}

/// Loss weights: λ1 on L_img, λ2 on L_inv, λ_cmd on the Stage-1 CMD term.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_cmd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 100.0,
            lambda_cmd: 1.0,
        }
    }
}

/// Everything the training loops need.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub dropout: f64,
    pub initial_lr: f64,
    pub epochs_per_fold: usize,
    pub folds: usize,
    pub fold_index: usize,
    pub cmd: CmdConfig,
    pub m: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub no_inv_loss: bool,
    pub no_cascaded_input: bool,
    pub no_ifim: bool,
    pub freeze_student_encoders: bool,
    pub share_invariance_encoder: bool,
    pub hidden: usize,
    pub dim_a: usize,
    pub dim_v: usize,
    pub dim_t: usize,
}

impl TrainConfig {
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            dim_a: self.dim_a,
            dim_v: self.dim_v,
            dim_t: self.dim_t,
            hidden: self.hidden,
            n_classes: crate::data::N_CLASSES,
            m: self.m,
            dropout: self.dropout,
            share_invariance_encoder: self.share_invariance_encoder,
        }
    }
}

fn labels_tensor(batch: &[&RawUtterance]) -> Tensor {
    Tensor::vector(batch.iter().map(|u| u.label as f64).collect())
}

/// Stage-1 loss terms for one batch.
pub struct PretrainLosses {
    pub l_cls: VarId,
    pub l_cmd: VarId,
    pub total: VarId,
}

pub fn pretrain_losses(
    spec: &ModelSpec,
    g: &mut Graph,
    bp: &BoundParams,
    batch: &[&RawUtterance],
    weights: &LossWeights,
    cmd_cfg: &CmdConfig,
    train: bool,
) -> Result<PretrainLosses> {
    let f = pretrain_forward(spec, g, bp, batch, train)?;
    let labels = g.constant(labels_tensor(batch));
    let l_cls = g.softmax_xent(f.logits, labels)?;
    let l_cmd = cmd_loss(
        g,
        f.invariant.inv_a,
        f.invariant.inv_v,
        f.invariant.inv_t,
        cmd_cfg,
    )?;
    let weighted = g.scale(l_cmd, weights.lambda_cmd)?;
    let total = g.add(l_cls, weighted)?;
    Ok(PretrainLosses { l_cls, l_cmd, total })
}

/// Per-epoch Stage-1 trace entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_cmd: f64,
    pub total: f64,
    pub val_wa: f64,
}

pub struct PretrainResult {
    pub params: ParamStore,
    pub trace: Vec<PretrainEpoch>,
    pub split: FoldSplit,
}

fn batches(ids: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    ids.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Full-modality validation WA of the Stage-1 network.
pub fn pretrain_val_wa(
    spec: &ModelSpec,
    store: &ParamStore,
    data: &[RawUtterance],
    ids: &[usize],
) -> Result<f64> {
    let mut preds = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(64) {
        let batch: Vec<&RawUtterance> = chunk.iter().map(|&i| &data[i]).collect();
        let mut g = Graph::new();
        let bp = store.bind_frozen(&mut g);
        let f = pretrain_forward(spec, &mut g, &bp, &batch, false)?;
        let logits = g.value(f.logits);
        for (r, u) in batch.iter().enumerate() {
            let row = logits.row(r);
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            preds.push(best);
            labels.push(u.label);
        }
    }
    weighted_accuracy(&preds, &labels)
}

/// Stage 1: CMD-constrained full-modality pretraining on the configured fold.
pub fn pretrain(data: &[RawUtterance], cfg: &TrainConfig) -> Result<PretrainResult> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let spec = cfg.model_spec();
    let splits = kfold_split(data.len(), cfg.folds, cfg.seed)?;
    let split = splits
        .get(cfg.fold_index)
        .ok_or_else(|| Error::invalid(format!("fold_index {} >= folds {}", cfg.fold_index, cfg.folds)))?
        .clone();
    let mut store = spec.init_pretrain(cfg.seed)?;
    let mut opt = AdamState::default();
    let mut trace = Vec::with_capacity(cfg.epochs_per_fold);
    let mut step: u64 = 0;
    for epoch in 1..=cfg.epochs_per_fold {
        let lr = lr_schedule(epoch, cfg.initial_lr, cfg.epochs_per_fold)?;
        let mut ids = split.train.clone();
        ids.shuffle(&mut crate::rng::substream(cfg.seed, "stage1-shuffle", epoch as u64));
        let (mut e_cls, mut e_cmd, mut e_total) = (0.0, 0.0, 0.0);
        let batch_list = batches(&ids, cfg.batch_size);
        for batch_ids in &batch_list {
            if batch_ids.len() < 2 {
                continue; // CMD needs at least two samples
            }
            let batch: Vec<&RawUtterance> = batch_ids.iter().map(|&i| &data[i]).collect();
            let mut g =
                Graph::with_dropout_rng(crate::rng::substream(cfg.seed, "stage1-dropout", step));
            let bp = store.bind(&mut g);
            let losses =
                pretrain_losses(&spec, &mut g, &bp, &batch, &cfg.weights, &cfg.cmd, true)?;
            e_cls += g.value(losses.l_cls).item();
            e_cmd += g.value(losses.l_cmd).item();
            e_total += g.value(losses.total).item();
            let grads = g.backward(losses.total)?;
            let grads = collect_grads(&store, &bp, &grads)?;
            adam_step(&mut store, &grads, &mut opt, lr)?;
            step += 1;
        }
        let nb = batch_list.iter().filter(|b| b.len() >= 2).count().max(1) as f64;
        let val_wa = pretrain_val_wa(&spec, &store, data, &split.val)?;
        trace.push(PretrainEpoch {
            epoch,
            l_cls: e_cls / nb,
            l_cmd: e_cmd / nb,
            total: e_total / nb,
            val_wa,
        });
    }
    Ok(PretrainResult {
        params: store,
        trace,
        split,
    })
}

/// Loss components reported by each Stage-2 step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossParts {
    pub l_cls: f64,
    pub l_img: f64,
    pub l_inv: f64,
    pub total: f64,
}

/// Graph-level Stage-2 losses for one (pre-sampled) condition.
pub struct StudentLosses {
    pub l_cls: VarId,
    pub l_img: Option<VarId>,
    pub l_inv: VarId,
    pub total: VarId,
}

pub fn ifmmin_losses(
    spec: &ModelSpec,
    g: &mut Graph,
    teacher: &ParamStore,
    student_bp: &BoundParams,
    batch_full: &[&RawUtterance],
    condition: MissingCondition,
    cfg: &TrainConfig,
    train: bool,
) -> Result<StudentLosses> {
    let masked: Vec<RawUtterance> = batch_full
        .iter()
        .map(|u| apply_missing(u, condition))
        .collect();
    let masked_refs: Vec<&RawUtterance> = masked.iter().collect();
    let targets = teacher_targets(spec, g, teacher, batch_full)?;
    let f = student_forward(
        spec,
        g,
        student_bp,
        &masked_refs,
        cfg.no_ifim,
        !cfg.no_cascaded_input,
        train,
    )?;
    let labels = g.constant(labels_tensor(batch_full));
    let l_cls = g.softmax_xent(f.logits, labels)?;
    let l_inv = g.rmse(targets.h_inv_full, f.invariant.h_inv)?;
    let l_img = match &f.imagination {
        Some(out) => Some(g.rmse(targets.h_full, out.h_prime)?),
        None => None,
    };
    // total = L_cls + λ1·L_img + λ2·L_inv; no_inv_loss drops the L_inv term,
    // no_ifim loses L_img (there is no imagined feature) but keeps L_inv.
    let mut total = l_cls;
    if let Some(img) = l_img {
        let w = g.scale(img, cfg.weights.lambda1)?;
        total = g.add(total, w)?;
    }
    if !cfg.no_inv_loss {
        let w = g.scale(l_inv, cfg.weights.lambda2)?;
        total = g.add(total, w)?;
    }
    Ok(StudentLosses {
        l_cls,
        l_img,
        l_inv,
        total,
    })
}

/// One optimizer step of Stage 2. The teacher must be fully frozen.
#[allow(clippy::too_many_arguments)]
pub fn ifmmin_step(
    spec: &ModelSpec,
    batch_full: &[&RawUtterance],
    teacher: &ParamStore,
    student: &mut ParamStore,
    cfg: &TrainConfig,
    opt: &mut AdamState,
    lr: f64,
    condition: MissingCondition,
    step: u64,
) -> Result<LossParts> {
    if !teacher.all_frozen() {
        return Err(Error::invalid("teacher parameters must be frozen"));
    }
    let mut g = Graph::with_dropout_rng(crate::rng::substream(cfg.seed, "stage2-dropout", step));
    let bp = student.bind(&mut g);
    let losses = ifmmin_losses(spec, &mut g, teacher, &bp, batch_full, condition, cfg, true)?;
    let parts = LossParts {
        l_cls: g.value(losses.l_cls).item(),
        l_img: losses.l_img.map(|v| g.value(v).item()).unwrap_or(0.0),
        l_inv: g.value(losses.l_inv).item(),
        total: g.value(losses.total).item(),
    };
    let grads = g.backward(losses.total)?;
    let grads = collect_grads(student, &bp, &grads)?;
    adam_step(student, &grads, opt, lr)?;
    Ok(parts)
}

/// Per-epoch Stage-2 trace entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_img: f64,
    pub l_inv: f64,
    pub total: f64,
    pub val_wa: f64,
}

pub struct TrainResult {
    /// Best-on-validation checkpoint.
    pub params: ParamStore,
    /// Parameters at the final epoch (the best checkpoint may be earlier).
    pub final_params: ParamStore,
    pub trace: Vec<TrainEpoch>,
    pub best_epoch: usize,
    pub split: FoldSplit,
}

/// Stage 2: IF-MMIN training against the frozen teacher. Returns the
/// checkpoint with the best validation WA (averaged over the six
/// conditions).
pub fn train_ifmmin(
    data: &[RawUtterance],
    pretrained: &ParamStore,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let spec = cfg.model_spec();
    let splits = kfold_split(data.len(), cfg.folds, cfg.seed)?;
    let split = splits
        .get(cfg.fold_index)
        .ok_or_else(|| Error::invalid(format!("fold_index {} >= folds {}", cfg.fold_index, cfg.folds)))?
        .clone();
    let mut teacher = pretrained.clone();
    teacher.freeze_all();
    let mut student = spec.init_student(&teacher, cfg.seed, cfg.no_ifim)?;
    if cfg.freeze_student_encoders {
        for prefix in ["enc_a", "enc_v", "enc_t", "enc_inv"] {
            student.freeze_prefix(prefix);
        }
    }
    let mut opt = AdamState::default();
    let mut trace = Vec::with_capacity(cfg.epochs_per_fold);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut step: u64 = 0;
    let mut cond_rng = crate::rng::stream(cfg.seed, "stage2-condition");
    for epoch in 1..=cfg.epochs_per_fold {
        let lr = lr_schedule(epoch, cfg.initial_lr, cfg.epochs_per_fold)?;
        let mut ids = split.train.clone();
        ids.shuffle(&mut crate::rng::substream(cfg.seed, "stage2-shuffle", epoch as u64));
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut nb = 0usize;
        for batch_ids in batches(&ids, cfg.batch_size) {
            let batch: Vec<&RawUtterance> = batch_ids.iter().map(|&i| &data[i]).collect();
            let condition = sample_condition(&mut cond_rng);
            let parts = ifmmin_step(
                &spec, &batch, &teacher, &mut student, cfg, &mut opt, lr, condition, step,
            )?;
            sums.0 += parts.l_cls;
            sums.1 += parts.l_img;
            sums.2 += parts.l_inv;
            sums.3 += parts.total;
            nb += 1;
            step += 1;
        }
        let nb = nb.max(1) as f64;
        let val: Vec<RawUtterance> = split.val.iter().map(|&i| data[i].clone()).collect();
        let report = crate::data::evaluate_conditions(
            &spec,
            &student,
            cfg.no_ifim,
            !cfg.no_cascaded_input,
            &val,
        )?;
        let val_wa = report.average_wa;
        trace.push(TrainEpoch {
            epoch,
            l_cls: sums.0 / nb,
            l_img: sums.1 / nb,
            l_inv: sums.2 / nb,
            total: sums.3 / nb,
            val_wa,
        });
        let better = match &best {
            None => true,
            Some((_, wa, _)) => val_wa > *wa,
        };
        if better {
            best = Some((epoch, val_wa, student.clone()));
        }
    }
    let (best_epoch, _, params) = best.unwrap();
    Ok(TrainResult {
        params,
        final_params: student,
        trace,
        best_epoch,
        split,
    })
}
