//! Comparison estimators: direct plan-conditioned regression (UNet+) and
//! inverse propensity weighting over held-out factual segments.

use serde::{Deserialize, Serialize};

use crate::dgp::{InterventionPlan, Trajectory};
use crate::error::{invalid_arg, Error, Result};
use crate::gcomp::{
    build_prefixes, field_tensor, history_window, loss_weights, run_epochs, BatchLoss, CapoEstimate, FittedNet,
    Normaliser, PrefixData, Schedule, TrainConfig, TrainLog,
};
use crate::lattice::{sigmoid, Field, RngStream};
use crate::nets::{NetConfig, Tape, Tensor};

fn stack(parts: &[&Tensor]) -> Tensor {
    let (_, h, w) = parts[0].shape();
    let data = parts.iter().flat_map(|t| t.data.iter().copied()).collect();
    Tensor::from_vec(parts.iter().map(|t| t.c).sum(), h, w, data)
}

fn single_phase_schedule(lr: f64) -> (impl Fn(usize) -> usize, impl Fn(usize) -> f64) {
    (|_| 1, move |_| lr)
}

/// Direct regression of `Y_{t+tau}` on the history and the whole plan.
#[derive(Clone, Debug)]
pub struct UnetPlus {
    pub model: FittedNet,
    pub tau: usize,
}

fn unet_plus_config(cfg: &NetConfig, traj: &Trajectory, tau: usize) -> NetConfig {
    NetConfig {
        cond_channels: tau,
        n_heads: 1,
        static_channels: traj.static_v.as_ref().map_or(0, Vec::len),
        ..cfg.clone()
    }
}

/// Observed treatments `a_t..a_{t+tau-1}` as conditioning channels.
fn observed_plan(data: &PrefixData, t: usize) -> Tensor {
    let parts: Vec<&Tensor> = (t..t + data.tau()).map(|j| data.treatment_at(j)).collect();
    stack(&parts)
}

pub fn train_unet_plus(
    traj: &Trajectory,
    tau: usize,
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
) -> Result<(UnetPlus, TrainLog)> {
    train_cfg.validate()?;
    let norm = Normaliser::fit(traj);
    let cfg = unet_plus_config(net_cfg, traj, tau);
    let data = build_prefixes(traj, tau, None, cfg.context_len, &norm)?;
    let weights = loss_weights(traj, train_cfg.cell_weights.as_ref())?;
    let (n_train, n_val) = train_cfg.split(data.len())?;
    let mut model = FittedNet::new(&cfg, norm, train_cfg.seed)?;
    let mut rng = RngStream::new(train_cfg.seed, 1);
    let net = model.net.clone();
    let w = weights.as_deref();
    let (phase, base_lr) = single_phase_schedule(train_cfg.lr);

    let sample = |tape: &mut Tape, store: &crate::nets::ParamStore, t: usize| {
        let window = data.window(t, None, Some(observed_plan(&data, t)));
        let emb = net.embed_history(tape, store, &window)?;
        let pred = net.ghead_forward(tape, store, emb, 1)?;
        let target = tape.constant(data.target(t).clone());
        tape.weighted_mse(pred, target, w)
    };

    let log = run_epochs(
        train_cfg,
        &mut model.store,
        n_train,
        Schedule { phase: &phase, base_lr: &base_lr, final_phase: 1, restore_best: true },
        &mut rng,
        |store, batch, _| {
            let mut total = 0.0;
            for &t in batch {
                let mut tape = Tape::new();
                let mse = sample(&mut tape, store, t)?;
                total += tape.value(mse).item();
                let loss = tape.scale(mse, 1.0 / batch.len() as f64);
                tape.backward(loss, store)?;
            }
            let mean = total / batch.len() as f64;
            Ok(BatchLoss { total: mean, heads: vec![Some(mean)] })
        },
        |store, _| {
            let range = if n_val > 0 { n_train..n_train + n_val } else { 0..n_train };
            let n = range.len() as f64;
            let mut total = 0.0;
            for t in range {
                let mut tape = Tape::new();
                let mse = sample(&mut tape, store, t)?;
                total += tape.value(mse).item();
            }
            Ok(total / n)
        },
    )?;
    Ok((UnetPlus { model, tau }, log))
}

impl UnetPlus {
    /// One forward pass on the history up to `plan.start` with the whole
    /// plan as input channels.
    pub fn predict(&self, history: &Trajectory, plan: &InterventionPlan) -> Result<CapoEstimate> {
        predict_unet_plus(self, history, plan)
    }
}

pub fn predict_unet_plus(model: &UnetPlus, history: &Trajectory, plan: &InterventionPlan) -> Result<CapoEstimate> {
    if plan.horizon() != model.tau {
        return invalid_arg(format!("plan horizon {} differs from trained tau {}", plan.horizon(), model.tau));
    }
    if plan.a_plan[0].shape() != history.grid() {
        return invalid_arg("plan grid differs from history grid");
    }
    let parts: Vec<Tensor> = plan.a_plan.iter().map(field_tensor).collect();
    let cond = stack(&parts.iter().collect::<Vec<_>>());
    let window = history_window(&model.model, history, plan.start, Some(cond))?;
    let out = model.model.predict(&window, 1)?;
    let values = out.to_field(0).map(|v| model.model.norm.y_inverse(v));
    Ok(CapoEstimate { values, horizon: model.tau, plan_start: plan.start })
}

/// Per-cell `P(A_t = 1 | history)` network.
#[derive(Clone, Debug)]
pub struct PropensityModel {
    pub model: FittedNet,
    /// Outputs are clipped to `[p_clip, 1 - p_clip]`; `None` disables clipping.
    pub p_clip: Option<f64>,
}

fn check_clip(p_clip: Option<f64>) -> Result<()> {
    match p_clip {
        Some(c) if !(c > 0.0 && c < 0.5) => {
            Err(Error::InvalidConfiguration(format!("p_clip must lie in (0, 0.5), got {c}")))
        }
        _ => Ok(()),
    }
}

fn clip(p: f64, p_clip: Option<f64>) -> f64 {
    match p_clip {
        Some(c) => p.clamp(c, 1.0 - c),
        None => p,
    }
}

pub fn train_propensity(
    traj: &Trajectory,
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
    p_clip: Option<f64>,
) -> Result<(PropensityModel, TrainLog)> {
    check_clip(p_clip)?;
    train_cfg.validate()?;
    let norm = Normaliser::fit(traj);
    let cfg = NetConfig {
        cond_channels: 0,
        n_heads: 1,
        static_channels: traj.static_v.as_ref().map_or(0, Vec::len),
        ..net_cfg.clone()
    };
    // tau = 1 only to reuse the encoded windows; every step is a sample
    let data = build_prefixes(traj, 1, None, cfg.context_len, &norm)?;
    let weights = loss_weights(traj, train_cfg.cell_weights.as_ref())?;
    let n = traj.len();
    let (n_train, n_val) = train_cfg.split(n)?;
    let mut model = FittedNet::new(&cfg, norm, train_cfg.seed)?;
    let mut rng = RngStream::new(train_cfg.seed, 1);
    let net = model.net.clone();
    let w = weights.as_deref();
    let (phase, base_lr) = single_phase_schedule(train_cfg.lr);

    let sample = |tape: &mut Tape, store: &crate::nets::ParamStore, t: usize| {
        let window = data.window(t, None, None);
        let emb = net.embed_history(tape, store, &window)?;
        let logits = net.ghead_forward(tape, store, emb, 1)?;
        tape.weighted_bce_logits(logits, &data.treatment_at(t).data, w)
    };

    let log = run_epochs(
        train_cfg,
        &mut model.store,
        n_train,
        Schedule { phase: &phase, base_lr: &base_lr, final_phase: 1, restore_best: true },
        &mut rng,
        |store, batch, _| {
            let mut total = 0.0;
            for &t in batch {
                let mut tape = Tape::new();
                let bce = sample(&mut tape, store, t)?;
                total += tape.value(bce).item();
                let loss = tape.scale(bce, 1.0 / batch.len() as f64);
                tape.backward(loss, store)?;
            }
            let mean = total / batch.len() as f64;
            Ok(BatchLoss { total: mean, heads: vec![Some(mean)] })
        },
        |store, _| {
            let range = if n_val > 0 { n_train..n_train + n_val } else { 0..n_train };
            let n = range.len() as f64;
            let mut total = 0.0;
            for t in range {
                let mut tape = Tape::new();
                let bce = sample(&mut tape, store, t)?;
                total += tape.value(bce).item();
            }
            Ok(total / n)
        },
    )?;
    Ok((PropensityModel { model, p_clip }, log))
}

impl PropensityModel {
    /// `P(A_t = 1 | H_t)` for each `t` of `traj`, clipped.
    pub fn predict_all(&self, traj: &Trajectory) -> Result<Vec<Field>> {
        (0..traj.len()).map(|t| self.predict_at(traj, t)).collect()
    }

    pub fn predict_at(&self, traj: &Trajectory, t: usize) -> Result<Field> {
        let window = history_window(&self.model, traj, t, None)?;
        let logits = self.model.predict(&window, 1)?;
        Ok(logits.to_field(0).map(|z| clip(sigmoid(z), self.p_clip)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IpwConfig {
    pub p_clip: Option<f64>,
    pub horizon: usize,
}

impl Default for IpwConfig {
    fn default() -> Self {
        Self { p_clip: Some(0.01), horizon: 5 }
    }
}

/// Where the treatment probabilities of the evaluation segments come from.
pub enum Propensities<'a> {
    Model(&'a PropensityModel),
    /// `P(A_l = 1 | H_l)` for every step of the continuation.
    Known(&'a [Field]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct IpwEstimate {
    pub capo: CapoEstimate,
    /// Standard error of the segment average, per cell.
    pub stderr: Field,
    /// 1 where every segment had weight 0.
    pub zero_weight: Field,
    pub n_segments: usize,
}

/// `prod_l 1[A_l = a_l] / pi(a_l)` per cell over one segment.
pub fn ipw_weight(observed: &[&Field], plan: &[Field], p_treat: &[&Field]) -> Result<Field> {
    if observed.len() != plan.len() || p_treat.len() != plan.len() || plan.is_empty() {
        return invalid_arg("ipw_weight: segment lengths differ");
    }
    let mut w = Field::filled(plan[0].width(), plan[0].height(), 1.0);
    for ((a, target), p) in observed.iter().zip(plan).zip(p_treat) {
        if !a.same_shape(target) || !p.same_shape(target) {
            return invalid_arg("ipw_weight: grid shapes differ");
        }
        let out = w.values_mut();
        for i in 0..out.len() {
            let (ai, ti, pi) = (a.values()[i], target.values()[i], p.values()[i]);
            if ai != ti {
                out[i] = 0.0;
            } else if out[i] != 0.0 {
                out[i] /= if ti == 1.0 { pi } else { 1.0 - pi };
            }
        }
    }
    Ok(w)
}

/// Horvitz-Thompson average of `weight * Y_{u+tau}` over every segment
/// `u` of the held-out continuation.
pub fn ipw_estimate(
    continuation: &Trajectory,
    plan: &InterventionPlan,
    propensities: Propensities<'_>,
    cfg: &IpwConfig,
) -> Result<IpwEstimate> {
    check_clip(cfg.p_clip)?;
    continuation.validate()?;
    let tau = plan.horizon();
    if cfg.horizon != tau {
        return invalid_arg(format!("ipw horizon {} differs from plan horizon {tau}", cfg.horizon));
    }
    if plan.a_plan[0].shape() != continuation.grid() {
        return invalid_arg("plan grid differs from continuation grid");
    }
    if continuation.len() <= tau {
        return Err(Error::EmptySupport(format!(
            "continuation of length {} has no segment of horizon {tau}",
            continuation.len()
        )));
    }
    let probs: Vec<Field> = match propensities {
        Propensities::Model(m) => m.predict_all(continuation)?,
        Propensities::Known(p) => {
            if p.len() != continuation.len() {
                return invalid_arg("known propensities must cover the continuation");
            }
            p.iter().map(|f| f.map(|v| clip(v, cfg.p_clip))).collect()
        }
    };

    let (w, h) = continuation.grid();
    let n_seg = continuation.len() - tau;
    let mut sum = vec![0.0; w * h];
    let mut sum_sq = vec![0.0; w * h];
    let mut weight_sum = vec![0.0; w * h];
    for u in 0..n_seg {
        let observed: Vec<&Field> = continuation.a[u..u + tau].iter().collect();
        let p: Vec<&Field> = probs[u..u + tau].iter().collect();
        let wt = ipw_weight(&observed, &plan.a_plan, &p)?;
        let y = &continuation.y[u + tau];
        for i in 0..w * h {
            let v = wt.values()[i] * y.values()[i];
            sum[i] += v;
            sum_sq[i] += v * v;
            weight_sum[i] += wt.values()[i];
        }
    }
    if weight_sum.iter().all(|&s| s == 0.0) {
        return Err(Error::EmptySupport("no segment follows the plan at any cell".into()));
    }
    let n = n_seg as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let stderr: Vec<f64> = if n_seg > 1 {
        sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq - n * m * m).max(0.0) / (n - 1.0) / n).sqrt())
            .collect()
    } else {
        vec![f64::NAN; w * h]
    };
    Ok(IpwEstimate {
        capo: CapoEstimate { values: Field::new(w, h, mean)?, horizon: tau, plan_start: plan.start },
        stderr: Field::new(w, h, stderr)?,
        zero_weight: Field::new(w, h, weight_sum.iter().map(|&s| (s == 0.0) as u8 as f64).collect())?,
        n_segments: n_seg,
    })
}
