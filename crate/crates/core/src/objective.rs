//! Training loss over matched pairs, AdamW with two learning-rate groups,
//! and the single training step.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::data::{encode_targets, SceneRecord, TargetSet};
use crate::matching::{match_batch, Assignment, CostWeights};
use crate::model::params::{ParamGroup, ParamStore};
use crate::model::{GtrModel, Predictions};
use crate::{Error, Result};

const PROB_FLOOR: f64 = 1e-8;
/// Keeps the heatmap distance differentiable at an exact match.
const SQRT_EPS: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Box L1, heatmap L2, GIoU and gaze-class weights.
    pub eta: [f64; 4],
    pub lambda_head_conf: f64,
    pub lambda_watch: f64,
    /// Train the is-head and watch-in-out heads. When off the total matches
    /// the four-term objective exactly.
    pub aux: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            eta: [2.5, 1.0, 1.0, 2.0],
            lambda_head_conf: 1.0,
            lambda_watch: 1.0,
            aux: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for &v in self.eta.iter().chain([&self.lambda_head_conf, &self.lambda_watch]) {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weights must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub l1: f64,
    pub l2: f64,
    pub giou: f64,
    pub class: f64,
    pub aux_head_conf: f64,
    pub aux_watch: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.total, self.l1, self.l2, self.giou, self.class, self.aux_head_conf, self.aux_watch]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Component-wise mean, for epoch summaries.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.total += r.total / n;
            m.l1 += r.l1 / n;
            m.l2 += r.l2 / n;
            m.giou += r.giou / n;
            m.class += r.class / n;
            m.aux_head_conf += r.aux_head_conf / n;
            m.aux_watch += r.aux_watch / n;
        }
        m
    }
}

impl std::fmt::Display for LossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={:.6} l1={:.6} l2={:.6} giou={:.6} class={:.6} aux_hc={:.6} aux_io={:.6}",
            self.total, self.l1, self.l2, self.giou, self.class, self.aux_head_conf, self.aux_watch
        )
    }
}

/// Differentiable loss with its host-side breakdown.
pub struct Loss {
    pub total: Tensor,
    pub report: LossReport,
}

/// Generalized IoU of matching rows of two `(n, 4)` corner-box tensors.
pub fn giou_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let col = |t: &Tensor, i: usize| t.narrow(D::Minus1, i, 1).and_then(|c| c.squeeze(D::Minus1));
    let (ax0, ay0, ax1, ay1) = (col(a, 0)?, col(a, 1)?, col(a, 2)?, col(a, 3)?);
    let (bx0, by0, bx1, by1) = (col(b, 0)?, col(b, 1)?, col(b, 2)?, col(b, 3)?);
    let area_a = ((&ax1 - &ax0)?.relu()? * (&ay1 - &ay0)?.relu()?)?;
    let area_b = ((&bx1 - &bx0)?.relu()? * (&by1 - &by0)?.relu()?)?;
    let iw = (ax1.minimum(&bx1)? - ax0.maximum(&bx0)?)?.relu()?;
    let ih = (ay1.minimum(&by1)? - ay0.maximum(&by0)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((area_a + area_b)? - &inter)?.maximum(1e-12)?;
    let hw = (ax1.maximum(&bx1)? - ax0.minimum(&bx0)?)?;
    let hh = (ay1.maximum(&by1)? - ay0.minimum(&by0)?)?;
    let hull = (hw * hh)?.maximum(1e-12)?;
    let iou = (&inter / &union)?;
    Ok((iou - ((&hull - &union)? / &hull)?)?)
}

/// Host-side gather plan for one batch: which flattened prediction rows
/// take part in each term, with their targets and averaging weights.
struct Plan {
    dtype: DType,
    device: Device,
    /// Real pairs.
    real_idx: Vec<u32>,
    real_w: Vec<f64>,
    head_box: Vec<f64>,
    watch_class: Vec<u32>,
    /// Real pairs with an in-frame gaze.
    inside_idx: Vec<u32>,
    inside_w: Vec<f64>,
    heatmaps: Vec<f64>,
    /// Real pairs with a gazed object box.
    object_idx: Vec<u32>,
    object_w: Vec<f64>,
    gaze_box: Vec<f64>,
    /// Per slot, over all `batch * N_q` predictions.
    slot_class: Vec<u32>,
    slot_is_real: Vec<f64>,
    slot_w: f64,
}

impl Plan {
    fn new(targets: &[TargetSet], assignments: &[Assignment], n_q: usize, cells: usize, dtype: DType, device: Device) -> Result<Self> {
        let batch = targets.len();
        let mut p = Plan {
            dtype,
            device,
            real_idx: vec![],
            real_w: vec![],
            head_box: vec![],
            watch_class: vec![],
            inside_idx: vec![],
            inside_w: vec![],
            heatmaps: vec![],
            object_idx: vec![],
            object_w: vec![],
            gaze_box: vec![],
            slot_class: vec![0; batch * n_q],
            slot_is_real: vec![0.0; batch * n_q],
            slot_w: 1.0 / (batch * n_q) as f64,
        };
        for (b, (t, a)) in targets.iter().zip(assignments).enumerate() {
            if t.num_queries != n_q || a.slot_to_pred.len() != n_q || !a.is_permutation() {
                return Err(Error::Shape(format!(
                    "image {b}: assignment over {} slots is not a bijection onto {n_q} predictions",
                    a.slot_to_pred.len()
                )));
            }
            for (slot, &j) in a.slot_to_pred.iter().enumerate() {
                let flat = b * n_q + j;
                p.slot_class[flat] = t.instances.get(slot).map_or(t.no_object_class(), |x| x.class_index) as u32;
                p.slot_is_real[flat] = if slot < t.num_real() { 1.0 } else { 0.0 };
            }
            if t.num_real() == 0 {
                continue;
            }
            let w = 1.0 / (t.num_real() * batch) as f64;
            for (slot, inst) in t.instances.iter().enumerate() {
                let flat = (b * n_q + a.slot_to_pred[slot]) as u32;
                p.real_idx.push(flat);
                p.real_w.push(w);
                p.head_box.extend(inst.head_box.to_array());
                p.watch_class.push(if inst.watch_inside() { 0 } else { 1 });
                if inst.watch_inside() {
                    if inst.heatmap.values().len() != cells {
                        return Err(Error::Shape(format!(
                            "target heatmap has {} cells, predictions have {cells}",
                            inst.heatmap.values().len()
                        )));
                    }
                    p.inside_idx.push(flat);
                    p.inside_w.push(w);
                    p.heatmaps.extend_from_slice(inst.heatmap.values());
                    if inst.has_gaze_box {
                        p.object_idx.push(flat);
                        p.object_w.push(w);
                        p.gaze_box.extend(inst.gaze_box.to_array());
                    }
                }
            }
        }
        Ok(p)
    }

    fn tensor(&self, v: &[f64], cols: usize) -> Result<Tensor> {
        Ok(Tensor::from_vec(v.to_vec(), (v.len() / cols, cols), &self.device)?.to_dtype(self.dtype)?)
    }

    fn vector(&self, v: &[f64]) -> Result<Tensor> {
        Ok(Tensor::from_vec(v.to_vec(), v.len(), &self.device)?.to_dtype(self.dtype)?)
    }

    fn ids(&self, v: &[u32]) -> Result<Tensor> {
        Ok(Tensor::from_vec(v.to_vec(), v.len(), &self.device)?)
    }
}

fn flat(t: &Tensor) -> Result<Tensor> {
    let (b, n, k) = t.dims3()?;
    Ok(t.reshape((b * n, k))?)
}

/// `-log(max(p, floor))` of the chosen column of each row.
fn nll(probs: &Tensor, classes: &Tensor) -> Result<Tensor> {
    let picked = probs.gather(&classes.unsqueeze(1)?, 1)?.squeeze(1)?;
    Ok(picked.maximum(PROB_FLOOR)?.log()?.neg()?)
}

/// Loss over a batch given fixed assignments. Pair terms are averaged over
/// each image's real instances, slot terms over its `N_q` slots, and images
/// are averaged.
pub fn training_loss(preds: &Predictions, targets: &[TargetSet], assignments: &[Assignment], w: &LossWeights) -> Result<Loss> {
    let batch = preds.batch_size()?;
    let n_q = preds.num_queries()?;
    if targets.len() != batch || assignments.len() != batch {
        return Err(Error::Shape(format!(
            "{batch} predictions, {} target sets, {} assignments",
            targets.len(),
            assignments.len()
        )));
    }
    let dtype = preds.head_box.dtype();
    let device = preds.head_box.device().clone();
    let cells = preds.heatmap.dim(2)?;
    let plan = Plan::new(targets, assignments, n_q, cells, dtype, device.clone())?;
    let zero = Tensor::zeros((), dtype, &device)?;
    let weighted = |per_pair: &Tensor, weights: &[f64]| -> Result<Tensor> { Ok((per_pair * plan.vector(weights)?)?.sum_all()?) };

    let head_box = flat(&preds.head_box)?;
    let gaze_box = flat(&preds.gaze_box)?;
    let heatmap = flat(&preds.heatmap)?;
    let gaze_class = flat(&preds.gaze_class)?;
    let head_conf = flat(&preds.head_conf)?;
    let watch = flat(&preds.watch)?;

    let (mut l1, mut giou_loss, mut aux_watch) = (zero.clone(), zero.clone(), zero.clone());
    if !plan.real_idx.is_empty() {
        let idx = plan.ids(&plan.real_idx)?;
        let pb = head_box.index_select(&idx, 0)?;
        let tb = plan.tensor(&plan.head_box, 4)?;
        l1 = weighted(&(&pb - &tb)?.abs()?.sum(1)?, &plan.real_w)?;
        giou_loss = weighted(&giou_tensor(&pb, &tb)?.affine(-1.0, 1.0)?, &plan.real_w)?;
        let io = watch.index_select(&idx, 0)?;
        aux_watch = weighted(&nll(&io, &plan.ids(&plan.watch_class)?)?, &plan.real_w)?;
    }
    let mut l2 = zero.clone();
    if !plan.inside_idx.is_empty() {
        let idx = plan.ids(&plan.inside_idx)?;
        let ph = heatmap.index_select(&idx, 0)?;
        let th = plan.tensor(&plan.heatmaps, cells)?;
        let rms = ((&ph - &th)?.sqr()?.mean(1)? + SQRT_EPS)?.sqrt()?;
        l2 = weighted(&rms, &plan.inside_w)?;
    }
    if !plan.object_idx.is_empty() {
        let idx = plan.ids(&plan.object_idx)?;
        let pb = gaze_box.index_select(&idx, 0)?;
        let tb = plan.tensor(&plan.gaze_box, 4)?;
        l1 = (l1 + weighted(&(&pb - &tb)?.abs()?.sum(1)?, &plan.object_w)?)?;
        giou_loss = (giou_loss + weighted(&giou_tensor(&pb, &tb)?.affine(-1.0, 1.0)?, &plan.object_w)?)?;
    }
    let class = (nll(&gaze_class, &plan.ids(&plan.slot_class)?)?.sum_all()? * plan.slot_w)?;
    // Matched predictions should say "head", the rest "not head".
    let hc_class: Vec<u32> = plan.slot_is_real.iter().map(|&r| if r > 0.0 { 0 } else { 1 }).collect();
    let aux_head_conf = (nll(&head_conf, &plan.ids(&hc_class)?)?.sum_all()? * plan.slot_w)?;

    let (lhc, lio) = if w.aux { (w.lambda_head_conf, w.lambda_watch) } else { (0.0, 0.0) };
    let total = ((((l1.affine(w.eta[0], 0.0)? + l2.affine(w.eta[1], 0.0)?)? + giou_loss.affine(w.eta[2], 0.0)?)?
        + class.affine(w.eta[3], 0.0)?)?
        + (aux_head_conf.affine(lhc, 0.0)? + aux_watch.affine(lio, 0.0)?)?)?;

    let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let report = LossReport {
        total: s(&total)?,
        l1: s(&l1)?,
        l2: s(&l2)?,
        giou: s(&giou_loss)?,
        class: s(&class)?,
        aux_head_conf: s(&aux_head_conf)?,
        aux_watch: s(&aux_watch)?,
    };
    Ok(Loss { total, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epoch index from which both learning rates are multiplied by `lr_decay`.
    pub lr_milestone: usize,
    pub lr_decay: f64,
    /// Global gradient-norm clip; off when absent.
    pub clip_grad_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-5,
            lr_rest: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_milestone: 80,
            lr_decay: 0.1,
            clip_grad_norm: None,
        }
    }
}

/// AdamW with decoupled weight decay and a per-group learning rate. State
/// is keyed by parameter name so it can be checkpointed.
pub struct AdamW {
    pub config: OptimConfig,
    step: u64,
    epoch: usize,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            step: 0,
            epoch: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Sets the epoch used by the step-decay schedule.
    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        let base = match group {
            ParamGroup::Backbone => self.config.lr_backbone,
            ParamGroup::Rest => self.config.lr_rest,
        };
        if self.epoch >= self.config.lr_milestone {
            base * self.config.lr_decay
        } else {
            base
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        let present: Vec<(&String, &Var, Tensor)> = params
            .iter()
            .filter_map(|(n, v)| grads.get(v.as_tensor()).map(|g| (n, v, g.detach())))
            .collect();
        let clip_scale = match self.config.clip_grad_norm {
            Some(max_norm) => {
                let mut sq = 0.0;
                for (_, _, g) in &present {
                    sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                }
                let norm = sq.sqrt();
                log::trace!("step {} gradient norm {norm:.4e}", self.step + 1);
                if norm > max_norm {
                    max_norm / (norm + 1e-6)
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, var, g) in present {
            let lr = self.lr(ParamStore::group_of(name));
            let g = if clip_scale != 1.0 { g.affine(clip_scale, 0.0)? } else { g };
            let (m, v) = match self.moments.remove(name) {
                Some(state) => state,
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = (m.affine(c.beta1, 0.0)? + g.affine(1.0 - c.beta1, 0.0)?)?;
            let v = (v.affine(c.beta2, 0.0)? + g.sqr()?.affine(1.0 - c.beta2, 0.0)?)?;
            let update = (m.affine(1.0 / bias1, 0.0)? / (v.affine(1.0 / bias2, 0.0)?.sqrt()? + c.eps)?)?;
            let p = var.as_tensor().detach();
            let next = (p.affine(1.0 - lr * c.weight_decay, 0.0)? - update.affine(lr, 0.0)?)?;
            var.set(&next)?;
            self.moments.insert(name.clone(), (m.detach(), v.detach()));
        }
        Ok(())
    }

    /// Moment tensors keyed `optim/m/<param>` and `optim/v/<param>`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("optim/m/{name}"), m.clone());
            out.insert(format!("optim/v/{name}"), v.clone());
        }
        out
    }

    pub fn restore(&mut self, step: u64, epoch: usize, m: BTreeMap<String, Tensor>, mut v: BTreeMap<String, Tensor>) -> Result<()> {
        let mut moments = BTreeMap::new();
        for (name, mt) in m {
            let vt = v
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for {name} lacks a second moment")))?;
            moments.insert(name, (mt, vt));
        }
        self.moments = moments;
        self.step = step;
        self.epoch = epoch;
        Ok(())
    }
}

/// Forward pass, matching, loss. Returns the loss, the assignments and the
/// traced predictions, without touching the parameters.
pub fn evaluate_batch(
    model: &GtrModel,
    batch: &[&SceneRecord],
    cost: &CostWeights,
    loss: &LossWeights,
) -> Result<(Loss, Vec<Assignment>)> {
    let cfg = model.config();
    let targets = batch.iter().map(|r| encode_targets(r, cfg)).collect::<Result<Vec<_>>>()?;
    let images: Vec<_> = batch.iter().map(|r| &r.image).collect();
    let preds = model.forward(&model.images_to_tensor(&images)?)?;
    let host = preds.to_host(cfg.heatmap_height, cfg.heatmap_width)?;
    let assignments = match_batch(&targets, &host, cost)?;
    let l = training_loss(&preds, &targets, &assignments, loss)?;
    Ok((l, assignments))
}

/// One optimization step. A non-finite loss aborts before any update.
pub fn training_step(
    model: &GtrModel,
    optimizer: &mut AdamW,
    batch: &[&SceneRecord],
    cost: &CostWeights,
    loss: &LossWeights,
) -> Result<LossReport> {
    let (l, _) = evaluate_batch(model, batch, cost, loss)?;
    if !l.report.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss: {}", l.report)));
    }
    let grads = l.total.backward()?;
    optimizer.step(model.params(), &grads)?;
    Ok(l.report)
}

/// Outcome of comparing backprop gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
}

/// Gradient check of the total loss with the assignments held fixed.
/// Parameters are visited round-robin over tensors, at random positions,
/// until `samples` scalars are checked. Relative error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn gradient_check(
    model: &GtrModel,
    batch: &[&SceneRecord],
    cost: &CostWeights,
    loss: &LossWeights,
    samples: usize,
    step: f64,
    floor: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    use rand::Rng;
    if model.dtype() != DType::F64 {
        return Err(Error::Config("gradient checks need a 64-bit model".into()));
    }
    let cfg = model.config();
    let targets = batch.iter().map(|r| encode_targets(r, cfg)).collect::<Result<Vec<_>>>()?;
    let images: Vec<_> = batch.iter().map(|r| &r.image).collect();
    let x = model.images_to_tensor(&images)?;
    let preds = model.forward(&x)?;
    let assignments = match_batch(&targets, &preds.to_host(cfg.heatmap_height, cfg.heatmap_width)?, cost)?;
    let eval = || -> Result<Tensor> { Ok(training_loss(&model.forward(&x)?, &targets, &assignments, loss)?.total) };
    let grads = eval()?.backward()?;

    let names: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
    let mut rng = crate::seed::rng(seed, "gradcheck", 0);
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: String::new() };
    let mut k = 0;
    while report.checked < samples {
        let name = &names[k % names.len()];
        k += 1;
        let var = model.params().get(name).expect("listed parameter");
        let Some(g) = grads.get(var.as_tensor()) else { continue };
        let g = g.flatten_all()?.to_vec1::<f64>()?;
        let shape = var.shape().clone();
        let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let i = rng.random_range(0..base.len());
        let at = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[i] += delta;
            var.set(&Tensor::from_vec(v, &shape, model.device())?)?;
            Ok(eval()?.to_scalar::<f64>()?)
        };
        let numeric = (at(step)? - at(-step)?) / (2.0 * step);
        var.set(&Tensor::from_vec(base, &shape, model.device())?)?;
        let rel = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(floor);
        if rel > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = format!("{name}[{i}] analytic={:.6e} numeric={:.6e}", g[i], numeric);
        }
        report.checked += 1;
    }
    Ok(report)
}
