//! Iterative G-computation over prefixes of one observed trajectory.
//!
//! Prefix `t` (0-based, `t < T - tau`) supplies, for head `k`:
//!
//! * the observed window ending at `s = t + k - 1`, conditioned on `A_s`;
//! * target `y_{t+tau}` for `k = tau`, otherwise the pseudo-outcome
//!   `Q_{k+1}` evaluated on the window ending at `t + k` with treatments
//!   `a_t..a_{t+k-1}` replaced by the plan and conditioned on `plan[k]`.
//!
//! The supervision window depends on `s` only, so training groups the
//! `(t, k)` pairs by `s` and shares one embedding across heads.

mod fit;

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use fit::{EpochRecord, FittedNet, Normaliser, TrainConfig, TrainLog};
pub(crate) use fit::{field_tensor, loss_weights, run_epochs, static_tensor, BatchLoss, Schedule};

use crate::dgp::{InterventionPlan, Trajectory};
use crate::error::{invalid_arg, Result};
use crate::lattice::{Field, RngStream};
use crate::nets::{NetConfig, Network, ParamStore, Tape, Tensor, Var, Window};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrefixSample {
    pub t: usize,
}

/// Encoded trajectory plus the plan, from which every prefix window is
/// cut on demand.
#[derive(Clone, Debug)]
pub struct PrefixData {
    steps: Vec<Tensor>,
    treat: Vec<Tensor>,
    targets: Vec<Tensor>,
    plan: Vec<Tensor>,
    static_v: Option<Tensor>,
    tau: usize,
    context_len: usize,
    pub samples: Vec<PrefixSample>,
}

/// Cut the `T - tau` prefixes of `traj`. The plan, if given, is applied
/// from each prefix's own `t`.
pub fn build_prefixes(
    traj: &Trajectory,
    tau: usize,
    plan: Option<&InterventionPlan>,
    context_len: usize,
    norm: &Normaliser,
) -> Result<PrefixData> {
    traj.validate()?;
    if tau == 0 || context_len == 0 {
        return invalid_arg("tau and context_len must be >= 1");
    }
    if traj.len() <= tau {
        return invalid_arg(format!("trajectory length {} must exceed tau = {tau}", traj.len()));
    }
    let plan = match plan {
        Some(p) => {
            if p.horizon() != tau {
                return invalid_arg(format!("plan horizon {} differs from tau {tau}", p.horizon()));
            }
            if p.a_plan[0].shape() != traj.grid() {
                return invalid_arg("plan grid differs from trajectory grid");
            }
            p.a_plan.iter().map(field_tensor).collect()
        }
        None => Vec::new(),
    };
    Ok(PrefixData {
        steps: norm.encode_trajectory(traj),
        treat: traj.a.iter().map(field_tensor).collect(),
        targets: traj.y.iter().map(|f| field_tensor(&f.map(|v| norm.y(v)))).collect(),
        plan,
        static_v: static_tensor(traj),
        tau,
        context_len,
        samples: (0..traj.len() - tau).map(|t| PrefixSample { t }).collect(),
    })
}

impl PrefixData {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn has_plan(&self) -> bool {
        !self.plan.is_empty()
    }

    /// Window ending at `end`, treatments `a_j` for `j` in
    /// `[start, start + plan.len())` replaced by `plan[j - start]`.
    pub fn window(&self, end: usize, replace: Option<(usize, &[Tensor])>, cond: Option<Tensor>) -> Window {
        let first = (end + 1).saturating_sub(self.context_len);
        let steps = (first..=end)
            .map(|j| {
                let mut step = self.steps[j].clone();
                if let (Some((start, plan)), Some(prev)) = (replace, j.checked_sub(1)) {
                    if prev >= start && prev < start + plan.len() {
                        step.channel_mut(2).copy_from_slice(&plan[prev - start].data);
                    }
                }
                step
            })
            .collect();
        Window { steps, static_v: self.static_v.clone(), cond }
    }

    /// Head `k`'s supervision input for prefix `t`.
    pub fn observed_window(&self, t: usize, k: usize) -> Result<Window> {
        self.check(t, k)?;
        let s = t + k - 1;
        Ok(self.window(s, None, Some(self.treat[s].clone())))
    }

    /// Input of the generation pass that produces head `k`'s target
    /// (`1 <= k < tau`).
    pub fn intervened_window(&self, t: usize, k: usize) -> Result<Window> {
        self.check(t, k)?;
        if k >= self.tau {
            return invalid_arg("the last head has no intervened window");
        }
        if !self.has_plan() {
            return invalid_arg("prefixes were built without a plan");
        }
        Ok(self.window(t + k, Some((t, &self.plan[..k])), Some(self.plan[k].clone())))
    }

    /// Normalised `y_{t+tau}`.
    pub fn target(&self, t: usize) -> &Tensor {
        &self.targets[t + self.tau]
    }

    pub(crate) fn treatment_at(&self, t: usize) -> &Tensor {
        &self.treat[t]
    }

    fn check(&self, t: usize, k: usize) -> Result<()> {
        if t >= self.len() {
            return invalid_arg(format!("prefix {t} out of range ({} prefixes)", self.len()));
        }
        if k == 0 || k > self.tau {
            return invalid_arg(format!("head index {k} outside 1..={}", self.tau));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub e_c: usize,
    pub tau: usize,
    pub curriculum_lr: f64,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self { e_c: 3, tau: 5, curriculum_lr: 5e-4 }
    }
}

impl CurriculumSchedule {
    /// Number of active heads at epoch `e`: `min(tau, ceil(e / e_c))`.
    pub fn phase(&self, epoch: usize) -> usize {
        let e_c = self.e_c.max(1);
        epoch.max(1).div_ceil(e_c).min(self.tau)
    }
}

/// Head weights for epoch `e`: the last `p(e)` heads share weight `1/p(e)`.
pub fn curriculum_weights(epoch: usize, schedule: &CurriculumSchedule) -> Vec<f64> {
    let p = schedule.phase(epoch);
    let tau = schedule.tau;
    (1..=tau).map(|k| if k + p > tau { 1.0 / p as f64 } else { 0.0 }).collect()
}

/// `sum(mask * w * (pred - target)^2) / sum(mask * w)`.
pub fn masked_weighted_mse(pred: &Field, target: &Field, mask: Option<&Field>, weights: Option<&Field>) -> Result<f64> {
    if !pred.same_shape(target) || [mask, weights].into_iter().flatten().any(|f| !f.same_shape(pred)) {
        return invalid_arg("masked_weighted_mse: shapes differ");
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..pred.len() {
        let m = mask.map_or(1.0, |f| f.values()[i]);
        let w = weights.map_or(1.0, |f| f.values()[i]);
        if w < 0.0 {
            return invalid_arg("masked_weighted_mse: negative weight");
        }
        let c = m * w;
        if c != 0.0 {
            num += c * (pred.values()[i] - target.values()[i]).powi(2);
            den += c;
        }
    }
    if den <= 0.0 {
        return invalid_arg("masked_weighted_mse: total weight is zero");
    }
    Ok(num / den)
}

/// `(1/tau) * sum_k alpha_k * L_k`.
pub fn combine_head_losses(alpha: &[f64], losses: &[f64]) -> f64 {
    let tau = alpha.len() as f64;
    alpha.iter().zip(losses).map(|(a, l)| a * l).sum::<f64>() / tau
}

/// Trained G-computation estimator for one plan.
#[derive(Clone, Debug)]
pub struct GstUnet {
    pub model: FittedNet,
    pub tau: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapoEstimate {
    pub values: Field,
    pub horizon: usize,
    pub plan_start: usize,
}

fn pseudo_outcome_tensor(net: &Network, store: &ParamStore, data: &PrefixData, t: usize, k: usize) -> Result<Tensor> {
    if k == data.tau {
        data.check(t, k)?;
        return Ok(data.target(t).clone());
    }
    let window = data.intervened_window(t, k)?;
    // separate tape: nothing here reaches the caller's gradient
    let mut tape = Tape::new();
    let emb = net.embed_history(&mut tape, store, &window)?;
    let out = net.ghead_forward(&mut tape, store, emb, k + 1)?;
    Ok(tape.value(out).clone())
}

/// Target for head `k` of prefix `t` (normalised units): the observed
/// outcome for the last head, otherwise a detached `Q_{k+1}` prediction.
pub fn generate_pseudo_outcomes(model: &FittedNet, data: &PrefixData, t: usize, k: usize) -> Result<Field> {
    Ok(pseudo_outcome_tensor(&model.net, &model.store, data, t, k)?.to_field(0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointLoss {
    pub total: f64,
    pub per_head: Vec<Option<f64>>,
}

/// `(k, t)` pairs with non-zero weight, grouped by supervision time.
fn group_pairs(prefixes: impl IntoIterator<Item = usize>, alpha: &[f64]) -> BTreeMap<usize, Vec<(usize, usize)>> {
    let mut slots: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for t in prefixes {
        for (i, &a) in alpha.iter().enumerate() {
            if a != 0.0 {
                let k = i + 1;
                slots.entry(t + k - 1).or_default().push((k, t));
            }
        }
    }
    slots
}

struct SlotGraph {
    loss: Option<Var>,
    head_mse: Vec<(usize, f64)>,
}

/// Weighted loss of one supervision time: `sum alpha_k / (tau n_k) mse`.
#[allow(clippy::too_many_arguments)]
fn slot_graph(
    tape: &mut Tape,
    net: &Network,
    store: &ParamStore,
    data: &PrefixData,
    s: usize,
    pairs: &[(usize, usize)],
    alpha: &[f64],
    counts: &[usize],
    weights: Option<&[f64]>,
) -> Result<SlotGraph> {
    let tau = alpha.len() as f64;
    let window = data.window(s, None, Some(data.treatment_at(s).clone()));
    let emb = net.embed_history(tape, store, &window)?;
    let mut terms = Vec::with_capacity(pairs.len());
    let mut head_mse = Vec::with_capacity(pairs.len());
    for &(k, t) in pairs {
        let target = pseudo_outcome_tensor(net, store, data, t, k)?;
        let pred = net.ghead_forward(tape, store, emb, k)?;
        let target = tape.constant(target);
        let mse = tape.weighted_mse(pred, target, weights)?;
        head_mse.push((k, tape.value(mse).item()));
        terms.push((mse, alpha[k - 1] / (tau * counts[k - 1] as f64)));
    }
    let loss = if terms.is_empty() { None } else { Some(tape.linear_combination(&terms)?) };
    Ok(SlotGraph { loss, head_mse })
}

fn head_counts(slots: &BTreeMap<usize, Vec<(usize, usize)>>, tau: usize) -> Vec<usize> {
    let mut counts = vec![0usize; tau];
    for (k, _) in slots.values().flatten() {
        counts[k - 1] += 1;
    }
    counts
}

fn summarise(sums: Vec<f64>, counts: &[usize], alpha: &[f64]) -> JointLoss {
    let per_head: Vec<Option<f64>> =
        sums.iter().zip(counts).map(|(&s, &n)| (n > 0).then(|| s / n as f64)).collect();
    let losses: Vec<f64> = per_head.iter().map(|v| v.unwrap_or(0.0)).collect();
    JointLoss { total: combine_head_losses(alpha, &losses), per_head }
}

fn evaluate_slots(
    net: &Network,
    store: &ParamStore,
    data: &PrefixData,
    slots: &BTreeMap<usize, Vec<(usize, usize)>>,
    alpha: &[f64],
    weights: Option<&[f64]>,
    mut grads: Option<&mut ParamStore>,
) -> Result<JointLoss> {
    let tau = alpha.len();
    let counts = head_counts(slots, tau);
    let mut sums = vec![0.0; tau];
    for (&s, pairs) in slots {
        let mut tape = Tape::new();
        let g = slot_graph(&mut tape, net, store, data, s, pairs, alpha, &counts, weights)?;
        for (k, v) in g.head_mse {
            sums[k - 1] += v;
        }
        if let (Some(loss), Some(dst)) = (g.loss, grads.as_deref_mut()) {
            tape.backward(loss, dst)?;
        }
    }
    Ok(summarise(sums, &counts, alpha))
}

/// Joint objective over a batch of prefixes with head weights `alpha`.
pub fn joint_loss(model: &FittedNet, data: &PrefixData, prefixes: &[usize], alpha: &[f64]) -> Result<JointLoss> {
    if prefixes.is_empty() {
        return invalid_arg("joint_loss: empty batch");
    }
    if alpha.len() != data.tau {
        return invalid_arg("joint_loss: alpha length differs from tau");
    }
    let slots = group_pairs(prefixes.iter().copied(), alpha);
    evaluate_slots(&model.net, &model.store, data, &slots, alpha, None, None)
}

/// Gradient of [`joint_loss`] accumulated into `model.store`'s gradient slots.
pub fn joint_loss_backward(model: &mut FittedNet, data: &PrefixData, prefixes: &[usize], alpha: &[f64]) -> Result<JointLoss> {
    if prefixes.is_empty() || alpha.len() != data.tau {
        return invalid_arg("joint_loss_backward: empty batch or alpha length differs from tau");
    }
    let slots = group_pairs(prefixes.iter().copied(), alpha);
    let mut grads = model.store.clone();
    grads.zero_grads();
    let out = evaluate_slots(&model.net, &model.store, data, &slots, alpha, None, Some(&mut grads))?;
    for id in model.store.ids().collect::<Vec<_>>() {
        let g = grads.grad(id).clone();
        model.store.accumulate_grad(id, &g);
    }
    Ok(out)
}

fn gst_net_config(cfg: &NetConfig, traj: &Trajectory, tau: usize) -> NetConfig {
    NetConfig {
        cond_channels: 1,
        n_heads: tau,
        static_channels: traj.static_v.as_ref().map_or(0, Vec::len),
        ..cfg.clone()
    }
}

/// Fit every head of the G-computation estimator for `plan`.
pub fn train_gst_unet(
    traj: &Trajectory,
    plan: &InterventionPlan,
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
    schedule: &CurriculumSchedule,
) -> Result<(GstUnet, TrainLog)> {
    let tau = plan.horizon();
    if schedule.tau != tau {
        return invalid_arg(format!("curriculum tau {} differs from plan horizon {tau}", schedule.tau));
    }
    if schedule.e_c == 0 {
        return invalid_arg("curriculum period e_c must be >= 1");
    }
    train_cfg.validate()?;
    let norm = Normaliser::fit(traj);
    let cfg = gst_net_config(net_cfg, traj, tau);
    let data = build_prefixes(traj, tau, Some(plan), cfg.context_len, &norm)?;
    let weights = loss_weights(traj, train_cfg.cell_weights.as_ref())?;
    let (n_train, n_val) = train_cfg.split(data.len())?;
    let mut model = FittedNet::new(&cfg, norm, train_cfg.seed)?;
    let mut rng = RngStream::new(train_cfg.seed, 1);

    let uniform = vec![1.0 / tau as f64; tau];
    let alpha_at = |epoch: usize| {
        if train_cfg.use_curriculum {
            curriculum_weights(epoch, schedule)
        } else {
            uniform.clone()
        }
    };
    let phase = |epoch: usize| if train_cfg.use_curriculum { schedule.phase(epoch) } else { tau };
    let base_lr = |epoch: usize| {
        if train_cfg.use_curriculum && epoch <= tau * schedule.e_c {
            schedule.curriculum_lr
        } else {
            train_cfg.lr
        }
    };

    // one unit per supervision time s; heads are attached per epoch
    let units: Vec<usize> = (0..n_train + tau - 1).collect();
    let train_range: Range<usize> = 0..n_train;
    let val_range: Range<usize> = n_train..n_train + n_val;
    let net = model.net.clone();
    let w = weights.as_deref();

    let log = run_epochs(
        train_cfg,
        &mut model.store,
        units.len(),
        // validation targets come from the model itself, so its loss cannot rank
        // epochs; keep the last weights
        Schedule { phase: &phase, base_lr: &base_lr, final_phase: tau, restore_best: false },
        &mut rng,
        |store, batch, epoch| {
            let alpha = alpha_at(epoch);
            let mut slots = BTreeMap::new();
            for &u in batch {
                let s = units[u];
                let pairs: Vec<(usize, usize)> = (1..=tau)
                    .filter(|&k| alpha[k - 1] != 0.0 && s + 1 >= k && train_range.contains(&(s + 1 - k)))
                    .map(|k| (k, s + 1 - k))
                    .collect();
                if !pairs.is_empty() {
                    slots.insert(s, pairs);
                }
            }
            if slots.is_empty() {
                return Ok(BatchLoss { total: 0.0, heads: vec![None; tau] });
            }
            let frozen = store.clone();
            let jl = evaluate_slots(&net, &frozen, &data, &slots, &alpha, w, Some(store))?;
            Ok(BatchLoss { total: jl.total, heads: jl.per_head })
        },
        |store, epoch| {
            let alpha = alpha_at(epoch);
            let range = if n_val > 0 { val_range.clone() } else { train_range.clone() };
            let slots = group_pairs(range, &alpha);
            Ok(evaluate_slots(&net, store, &data, &slots, &alpha, w, None)?.total)
        },
    )?;
    Ok((GstUnet { model, tau }, log))
}

/// Encode a standalone history for inference: window ending at `end`.
pub(crate) fn history_window(
    model: &FittedNet,
    history: &Trajectory,
    end: usize,
    cond: Option<Tensor>,
) -> Result<Window> {
    history.validate()?;
    if end >= history.len() {
        return invalid_arg(format!("window end {end} outside history of length {}", history.len()));
    }
    let ctx = model.net.config().context_len;
    let first = (end + 1).saturating_sub(ctx);
    let steps = (first..=end)
        .map(|j| model.norm.encode_step(&history.x[j], &history.y[j], j.checked_sub(1).map(|p| &history.a[p])))
        .collect();
    Ok(Window { steps, static_v: static_tensor(history), cond })
}

impl GstUnet {
    /// `Q_1` on the history up to `plan.start`, conditioned on `plan[0]`.
    pub fn infer_capo(&self, history: &Trajectory, plan: &InterventionPlan) -> Result<CapoEstimate> {
        if plan.horizon() != self.tau {
            return invalid_arg(format!("plan horizon {} differs from trained tau {}", plan.horizon(), self.tau));
        }
        if plan.a_plan[0].shape() != history.grid() {
            return invalid_arg("plan grid differs from history grid");
        }
        let window = history_window(&self.model, history, plan.start, Some(field_tensor(&plan.a_plan[0])))?;
        let out = self.model.predict(&window, 1)?;
        let values = out.to_field(0).map(|v| self.model.norm.y_inverse(v));
        Ok(CapoEstimate { values, horizon: self.tau, plan_start: plan.start })
    }
}

#[cfg(test)]
mod tests;
