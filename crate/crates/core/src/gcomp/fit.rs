//! Optimiser loop shared by every trained estimator: shuffled mini-batches,
//! Adam, plateau halving, early stopping and best-checkpoint tracking.

use serde::{Deserialize, Serialize};

use crate::dgp::Trajectory;
use crate::error::{invalid_arg, Error, Result};
use crate::lattice::{Field, RngStream};
use crate::nets::{AdamConfig, NetConfig, Network, ParamStore, Tape, Tensor, Window};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub scheduler_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    /// Fraction of prefixes held out as the contiguous tail block.
    pub val_fraction: f64,
    pub seed: u64,
    pub use_curriculum: bool,
    /// Relative validation improvement needed to reset the patience counters.
    pub min_rel_improvement: f64,
    /// Extra per-cell loss weights, multiplied with the trajectory mask.
    #[serde(skip)]
    pub cell_weights: Option<Field>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Best-validation settings of the reference experiments.
    pub fn paper() -> Self {
        Self {
            batch_size: 4,
            lr: 5e-4,
            scheduler_patience: 5,
            early_stop_patience: 10,
            max_epochs: 100,
            val_fraction: 40.0 / 190.0,
            seed: 42,
            use_curriculum: true,
            min_rel_improvement: 0.0,
            cell_weights: None,
        }
    }

    /// Shorter schedule sized for one CPU core.
    pub fn desk() -> Self {
        Self { max_epochs: 40, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfiguration(m.to_string()));
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.min_rel_improvement < 0.0 {
            return bad("min_rel_improvement must be >= 0");
        }
        Ok(())
    }

    /// `(n_train, n_val)` for `n` prefixes; the validation block is the tail.
    pub fn split(&self, n: usize) -> Result<(usize, usize)> {
        let n_val = if n >= 2 { ((self.val_fraction * n as f64).round() as usize).min(n - 1) } else { 0 };
        if n == 0 {
            return invalid_arg("no training prefixes");
        }
        Ok((n - n_val, n_val))
    }
}

/// Standardisation of covariate and outcome channels, fitted on the
/// training trajectory and stored with the model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normaliser {
    pub x_mean: f64,
    pub x_std: f64,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Normaliser {
    pub fn identity() -> Self {
        Self { x_mean: 0.0, x_std: 1.0, y_mean: 0.0, y_std: 1.0 }
    }

    pub fn fit(traj: &Trajectory) -> Self {
        let stats = |fields: &[Field]| {
            let n: usize = fields.iter().map(Field::len).sum();
            let mean = fields.iter().flat_map(|f| f.values()).sum::<f64>() / n as f64;
            let var = fields.iter().flat_map(|f| f.values()).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            (mean, if std > 1e-12 { std } else { 1.0 })
        };
        let (x_mean, x_std) = stats(&traj.x);
        let (y_mean, y_std) = stats(&traj.y);
        Self { x_mean, x_std, y_mean, y_std }
    }

    pub fn x(&self, v: f64) -> f64 {
        (v - self.x_mean) / self.x_std
    }

    pub fn y(&self, v: f64) -> f64 {
        (v - self.y_mean) / self.y_std
    }

    pub fn y_inverse(&self, v: f64) -> f64 {
        v * self.y_std + self.y_mean
    }

    /// Input channels of step `j`: `[x_j, y_j, a_{j-1}]`, with `a_{-1} = 0`.
    pub fn encode_step(&self, x: &Field, y: &Field, a_prev: Option<&Field>) -> Tensor {
        let n = x.len();
        let mut data = Vec::with_capacity(3 * n);
        data.extend(x.values().iter().map(|&v| self.x(v)));
        data.extend(y.values().iter().map(|&v| self.y(v)));
        match a_prev {
            Some(a) => data.extend_from_slice(a.values()),
            None => data.extend(std::iter::repeat_n(0.0, n)),
        }
        Tensor::from_vec(3, x.height(), x.width(), data)
    }

    pub fn encode_trajectory(&self, traj: &Trajectory) -> Vec<Tensor> {
        (0..traj.len())
            .map(|j| self.encode_step(&traj.x[j], &traj.y[j], j.checked_sub(1).map(|p| &traj.a[p])))
            .collect()
    }
}

pub(crate) fn field_tensor(f: &Field) -> Tensor {
    Tensor::from_fields([f])
}

/// Static covariates stacked as channels, if the trajectory has any.
pub(crate) fn static_tensor(traj: &Trajectory) -> Option<Tensor> {
    traj.static_v.as_ref().filter(|v| !v.is_empty()).map(|v| Tensor::from_fields(v.iter()))
}

/// Per-cell loss weights from the mask and optional extra weights; `None`
/// when both are absent (uniform).
pub(crate) fn loss_weights(traj: &Trajectory, extra: Option<&Field>) -> Result<Option<Vec<f64>>> {
    let n = traj.x.first().map(Field::len).unwrap_or(0);
    let mut w: Option<Vec<f64>> = None;
    for f in [traj.mask.as_ref(), extra].into_iter().flatten() {
        if f.len() != n {
            return invalid_arg("mask or cell weights do not match the grid");
        }
        if f.values().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return invalid_arg("cell weights must be finite and non-negative");
        }
        let cur = w.get_or_insert_with(|| vec![1.0; n]);
        for (c, v) in cur.iter_mut().zip(f.values()) {
            *c *= v;
        }
    }
    if let Some(w) = &w {
        if w.iter().sum::<f64>() <= 0.0 {
            return invalid_arg("mask and weights leave no cell with positive weight");
        }
    }
    Ok(w)
}

/// A network, its parameters and the input standardisation.
#[derive(Clone, Debug)]
pub struct FittedNet {
    pub net: Network,
    pub store: ParamStore,
    pub norm: Normaliser,
}

impl FittedNet {
    pub fn new(cfg: &NetConfig, norm: Normaliser, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::build(cfg, &mut store, &mut RngStream::new(seed, 0))?;
        Ok(Self { net, store, norm })
    }

    /// Forward pass of head `k` on one window, outside any training tape.
    pub fn predict(&self, window: &Window, k: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let emb = self.net.embed_history(&mut tape, &self.store, window)?;
        let out = self.net.ghead_forward(&mut tape, &self.store, emb, k)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean training loss per head; `None` for heads with zero weight.
    pub head_losses: Vec<Option<f64>>,
    pub val_loss: f64,
    pub best: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("epoch record serialises"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Result of one batch: the objective value and per-head losses.
pub(crate) struct BatchLoss {
    pub total: f64,
    pub heads: Vec<Option<f64>>,
}

pub(crate) struct Schedule<'a> {
    /// Curriculum phase of an epoch; the loop resets its trackers whenever
    /// it changes.
    pub phase: &'a dyn Fn(usize) -> usize,
    pub base_lr: &'a dyn Fn(usize) -> f64,
    pub final_phase: usize,
    /// Restore the best-validation parameters at the end. When false the
    /// loop keeps the final weights and never stops early.
    pub restore_best: bool,
}

/// Run the optimiser. `batch` must accumulate gradients of the batch
/// objective into the store (already zeroed); `validate` returns the
/// held-out objective for an epoch.
pub(crate) fn run_epochs<B, V>(
    cfg: &TrainConfig,
    store: &mut ParamStore,
    n_units: usize,
    schedule: Schedule<'_>,
    rng: &mut RngStream,
    mut batch: B,
    mut validate: V,
) -> Result<TrainLog>
where
    B: FnMut(&mut ParamStore, &[usize], usize) -> Result<BatchLoss>,
    V: FnMut(&ParamStore, usize) -> Result<f64>,
{
    cfg.validate()?;
    if n_units == 0 {
        return invalid_arg("no training units");
    }
    let adam = AdamConfig::default();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n_units).collect();

    let mut phase = 0;
    let mut best = f64::INFINITY;
    let mut best_params = store.snapshot();
    let mut best_epoch = 0;
    let mut best_kept = f64::INFINITY;
    let (mut stale, mut plateau, mut halvings) = (0usize, 0usize, 0i32);

    for epoch in 1..=cfg.max_epochs {
        let p = (schedule.phase)(epoch);
        if p != phase {
            phase = p;
            best = f64::INFINITY;
            best_kept = f64::INFINITY;
            stale = 0;
            plateau = 0;
            halvings = 0;
        }
        let lr = (schedule.base_lr)(epoch) * 0.5f64.powi(halvings);

        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut n_batches = 0usize;
        let mut head_sum: Vec<f64> = Vec::new();
        let mut head_n: Vec<usize> = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            store.zero_grads();
            let bl = batch(store, chunk, epoch)?;
            if !bl.total.is_finite() {
                return Err(Error::InvalidState(format!("non-finite training loss at epoch {epoch}")));
            }
            store.adam_update(lr, adam);
            total += bl.total;
            n_batches += 1;
            if head_sum.len() < bl.heads.len() {
                head_sum.resize(bl.heads.len(), 0.0);
                head_n.resize(bl.heads.len(), 0);
            }
            for (k, h) in bl.heads.iter().enumerate() {
                if let Some(v) = h {
                    head_sum[k] += v;
                    head_n[k] += 1;
                }
            }
        }
        let val = validate(store, epoch)?;
        if !val.is_finite() {
            return Err(Error::InvalidState(format!("non-finite validation loss at epoch {epoch}")));
        }

        let improved = val < best * (1.0 - cfg.min_rel_improvement) || best.is_infinite();
        if improved {
            best = val;
            stale = 0;
            plateau = 0;
        } else {
            stale += 1;
            plateau += 1;
        }
        // checkpoint the best epoch of the latest phase reached
        let keep = val < best_kept;
        if keep {
            best_kept = val;
            best_params = store.snapshot();
            best_epoch = epoch;
            log.best_val_loss = val;
        }
        log.epochs.push(EpochRecord {
            epoch,
            phase,
            lr,
            train_loss: total / n_batches as f64,
            head_losses: head_sum
                .iter()
                .zip(&head_n)
                .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
                .collect(),
            val_loss: val,
            best: keep,
        });

        if plateau >= cfg.scheduler_patience {
            halvings += 1;
            plateau = 0;
        }
        if schedule.restore_best && stale >= cfg.early_stop_patience && phase == schedule.final_phase {
            break;
        }
    }
    if schedule.restore_best {
        store.restore(best_params)?;
    }
    log.best_epoch = best_epoch;
    Ok(log)
}
