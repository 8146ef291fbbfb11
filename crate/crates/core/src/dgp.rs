//! Synthetic confounded spatiotemporal process with counterfactual oracles.
//!
//! Per step, in this order:
//!
//! ```text
//! X_t = a0 + a1 X_{t-1} + a2 A_{t-1} + a3 (K_X * X_{t-1}) + eps_X
//! A_t ~ Bern(sigmoid(b1 (b0 + mean_{l=0..L-1} K_A * X_{t-l})))
//! Y_t = g0 + g1 (K_YA * A_{t-1}) + g2 mean_{l=1..L} (K_YX * X_{t-l}) + g3 Y_{t-1} + eps_Y
//! ```
//!
//! Under a fixed treatment plan the X and Y recursions are linear with
//! additive zero-mean noise, so the conditional mean of every future outcome
//! is exactly the zero-noise rollout. [`analytic_capo`] uses that; the
//! Monte-Carlo oracle exists to cross-check it.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::lattice::{conv2_same, sample_field, sigmoid, Field, FieldDist, Kernel3, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpParams {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    #[serde(rename = "kX")]
    pub k_x: Kernel3,
    #[serde(rename = "kA")]
    pub k_a: Kernel3,
    #[serde(rename = "kYA")]
    pub k_ya: Kernel3,
    #[serde(rename = "kYX")]
    pub k_yx: Kernel3,
    pub lags: usize,
    pub noise_std_x: f64,
    pub noise_std_y: f64,
    /// (N_X, N_Y): width then height.
    pub grid: (usize, usize),
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for DgpParams {
    fn default() -> Self {
        Self {
            alpha0: 0.5,
            alpha1: 0.5,
            alpha2: -2.0,
            alpha3: 0.2,
            beta0: -1.0,
            beta1: 0.0,
            gamma0: 2.0,
            gamma1: 1.5,
            gamma2: 0.5,
            gamma3: 0.5,
            k_x: Kernel3::default_kx(),
            k_a: Kernel3::default_smoothing(),
            k_ya: Kernel3::default_smoothing(),
            k_yx: Kernel3::default_smoothing(),
            lags: 5,
            noise_std_x: 1.0,
            noise_std_y: 1.0,
            grid: (64, 64),
            burn_in: 20,
            seed: 42,
        }
    }
}

impl DgpParams {
    pub fn with_grid(mut self, width: usize, height: usize) -> Self {
        self.grid = (width, height);
        self
    }

    pub fn with_beta1(mut self, beta1: f64) -> Self {
        self.beta1 = beta1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.lags == 0 {
            return Err(Error::InvalidConfiguration("lags must be >= 1".into()));
        }
        if !(self.beta1 >= 0.0) || !self.beta1.is_finite() {
            return Err(Error::InvalidConfiguration(format!("beta1 must be finite and >= 0, got {}", self.beta1)));
        }
        if !(self.noise_std_x >= 0.0) || !(self.noise_std_y >= 0.0) {
            return Err(Error::InvalidConfiguration("noise std must be >= 0".into()));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::InvalidConfiguration("grid dimensions must be positive".into()));
        }
        for k in [&self.k_x, &self.k_a, &self.k_ya, &self.k_yx] {
            if !k.is_finite() {
                return Err(Error::InvalidConfiguration("kernel entries must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Time-indexed stacks of covariate, treatment and outcome fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub x: Vec<Field>,
    pub a: Vec<Field>,
    pub y: Vec<Field>,
    pub static_v: Option<Vec<Field>>,
    pub mask: Option<Field>,
}

impl Trajectory {
    pub fn new(x: Vec<Field>, a: Vec<Field>, y: Vec<Field>) -> Result<Self> {
        let t = Trajectory { x, a, y, static_v: None, mask: None };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// (width, height) of every slice.
    pub fn grid(&self) -> (usize, usize) {
        self.x[0].shape()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.x.len();
        if t == 0 {
            return invalid_arg("trajectory must have at least one step");
        }
        if self.a.len() != t || self.y.len() != t {
            return invalid_arg(format!(
                "stack lengths differ: x={} a={} y={}",
                t,
                self.a.len(),
                self.y.len()
            ));
        }
        let shape = self.x[0].shape();
        let all = self.x.iter().chain(&self.a).chain(&self.y);
        if all.clone().any(|f| f.shape() != shape) {
            return invalid_arg("trajectory slices must share one grid shape");
        }
        if self.a.iter().any(|f| f.values().iter().any(|&v| v != 0.0 && v != 1.0)) {
            return invalid_arg("treatments must be binary");
        }
        if let Some(v) = &self.static_v {
            if v.iter().any(|f| f.shape() != shape) {
                return invalid_arg("static covariates must match the grid");
            }
        }
        if let Some(m) = &self.mask {
            if m.shape() != shape || m.values().iter().any(|&v| v != 0.0 && v != 1.0) {
                return invalid_arg("mask must be a binary field on the grid");
            }
        }
        Ok(())
    }

    /// Slices `[start, end)` in time; static fields and mask carry over.
    pub fn window(&self, start: usize, end: usize) -> Trajectory {
        Trajectory {
            x: self.x[start..end].to_vec(),
            a: self.a[start..end].to_vec(),
            y: self.y[start..end].to_vec(),
            static_v: self.static_v.clone(),
            mask: self.mask.clone(),
        }
    }

    /// Attach a validity mask and zero out every masked cell in all stacks.
    pub fn apply_mask(&mut self, mask: Field) -> Result<()> {
        if mask.shape() != self.grid() {
            return invalid_arg("mask shape does not match trajectory grid");
        }
        let zero_out = |f: &mut Field| {
            for (v, &m) in f.values_mut().iter_mut().zip(mask.values()) {
                if m == 0.0 {
                    *v = 0.0;
                }
            }
        };
        self.x.iter_mut().chain(self.a.iter_mut()).chain(self.y.iter_mut()).for_each(zero_out);
        if let Some(v) = self.static_v.as_mut() {
            v.iter_mut().for_each(zero_out);
        }
        self.mask = Some(mask);
        self.validate()
    }
}

/// A fixed treatment sequence `a_t, ..., a_{t+tau-1}` starting at time `start`.
#[derive(Clone, Debug, PartialEq)]
pub struct InterventionPlan {
    pub start: usize,
    pub a_plan: Vec<Field>,
}

impl InterventionPlan {
    pub fn new(start: usize, a_plan: Vec<Field>) -> Result<Self> {
        if a_plan.is_empty() {
            return invalid_arg("intervention plan needs horizon >= 1");
        }
        let shape = a_plan[0].shape();
        if a_plan.iter().any(|f| f.shape() != shape) {
            return invalid_arg("plan slices must share one grid shape");
        }
        if a_plan.iter().any(|f| f.values().iter().any(|&v| v != 0.0 && v != 1.0)) {
            return invalid_arg("plan treatments must be binary");
        }
        Ok(Self { start, a_plan })
    }

    pub fn horizon(&self) -> usize {
        self.a_plan.len()
    }

    /// Same treatments, anchored at another time.
    pub fn at(&self, start: usize) -> InterventionPlan {
        InterventionPlan { start, a_plan: self.a_plan.clone() }
    }

    /// I.i.d. Bernoulli(0.5) treatment per cell per step.
    pub fn random(start: usize, horizon: usize, grid: (usize, usize), rng: &mut RngStream) -> Result<Self> {
        let half = Field::filled(grid.0, grid.1, 0.5);
        let a_plan =
            (0..horizon).map(|_| sample_field(grid, FieldDist::Bernoulli(&half), rng)).collect::<Result<Vec<_>>>()?;
        Self::new(start, a_plan)
    }
}

/// Rolling state the transition reads: the last `L` covariate slices
/// (oldest first), the previous treatment and the previous outcome.
#[derive(Clone, Debug)]
pub struct LagState {
    pub x: Vec<Field>,
    pub a_prev: Field,
    pub y_prev: Field,
}

impl LagState {
    /// State at the end of `traj` (time `t = len - 1`), with `A_t` taken
    /// from the trajectory.
    pub fn from_trajectory(traj: &Trajectory, lags: usize) -> Result<Self> {
        Self::at(traj, traj.len() - 1, lags)
    }

    /// State after time `t` of `traj`.
    pub fn at(traj: &Trajectory, t: usize, lags: usize) -> Result<Self> {
        if t >= traj.len() {
            return invalid_arg(format!("time {t} outside trajectory of length {}", traj.len()));
        }
        if t + 1 < lags {
            return Err(Error::InvalidState(format!("need {lags} covariate lags, history has {}", t + 1)));
        }
        Ok(Self { x: traj.x[t + 1 - lags..=t].to_vec(), a_prev: traj.a[t].clone(), y_prev: traj.y[t].clone() })
    }
}

pub enum StepNoise<'a> {
    Noisy(&'a mut RngStream),
    Noiseless,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub x: Field,
    pub a: Field,
    pub p_treat: Field,
    pub y: Field,
}

/// One transition. `treatment` overrides the sampled `A_t`; in noisy mode
/// the Bernoulli uniforms are drawn regardless so that intervened and
/// factual runs on the same stream stay aligned draw for draw.
pub fn dgp_step(
    prev: &LagState,
    params: &DgpParams,
    noise: StepNoise<'_>,
    treatment: Option<&Field>,
) -> Result<StepOutput> {
    let lags = params.lags;
    if prev.x.len() < lags {
        return Err(Error::InvalidState(format!("need {lags} covariate lags, got {}", prev.x.len())));
    }
    let lagged = &prev.x[prev.x.len() - lags..];
    let x_prev = &lagged[lags - 1];
    let (w, h) = x_prev.shape();
    let mut rng = match noise {
        StepNoise::Noisy(r) => Some(r),
        StepNoise::Noiseless => None,
    };

    let kx = conv2_same(x_prev, &params.k_x);
    let mut x_new = Field::zeros(w, h);
    {
        let out = x_new.values_mut();
        let (xp, ap, kv) = (x_prev.values(), prev.a_prev.values(), kx.values());
        for i in 0..out.len() {
            out[i] = params.alpha0 + params.alpha1 * xp[i] + params.alpha2 * ap[i] + params.alpha3 * kv[i];
        }
        if let Some(r) = rng.as_deref_mut() {
            for v in out.iter_mut() {
                *v += params.noise_std_x * r.normal();
            }
        }
    }

    // confounding score uses X_t, ..., X_{t-L+1}
    let mut score = conv2_same(&x_new, &params.k_a);
    for xl in &lagged[1..] {
        score.add_scaled(&conv2_same(xl, &params.k_a), 1.0);
    }
    let inv_l = 1.0 / lags as f64;
    let p_treat = score.map(|s| sigmoid(params.beta1 * (params.beta0 + inv_l * s)));

    let a_new = match rng.as_deref_mut() {
        Some(r) => {
            let drawn = sample_field((w, h), FieldDist::Bernoulli(&p_treat), r)?;
            treatment.cloned().unwrap_or(drawn)
        }
        None => treatment.cloned().unwrap_or_else(|| p_treat.clone()),
    };
    if a_new.shape() != (w, h) {
        return invalid_arg("treatment override has wrong shape");
    }

    // outcome uses A_{t-1} and X_{t-1}, ..., X_{t-L}
    let kya = conv2_same(&prev.a_prev, &params.k_ya);
    let mut yx = Field::zeros(w, h);
    for xl in lagged {
        yx.add_scaled(&conv2_same(xl, &params.k_yx), inv_l);
    }
    let mut y_new = Field::zeros(w, h);
    {
        let out = y_new.values_mut();
        let (ka, kxv, yp) = (kya.values(), yx.values(), prev.y_prev.values());
        for i in 0..out.len() {
            out[i] = params.gamma0 + params.gamma1 * ka[i] + params.gamma2 * kxv[i] + params.gamma3 * yp[i];
        }
        if let Some(r) = rng.as_deref_mut() {
            for v in out.iter_mut() {
                *v += params.noise_std_y * r.normal();
            }
        }
    }

    Ok(StepOutput { x: x_new, a: a_new, p_treat, y: y_new })
}

fn advance(state: &mut LagState, out: &StepOutput, a_next: Field) {
    state.x.remove(0);
    state.x.push(out.x.clone());
    state.a_prev = a_next;
    state.y_prev = out.y.clone();
}

/// Gaussian lag buffer, `A_0 ~ Bern(0.5)`, `Y_0 = gamma0`.
pub fn initial_state(params: &DgpParams, rng: &mut RngStream) -> Result<LagState> {
    params.validate()?;
    let grid = params.grid;
    let x = (0..params.lags)
        .map(|_| sample_field(grid, FieldDist::Gaussian { mean: 0.0, std: 1.0 }, rng))
        .collect::<Result<Vec<_>>>()?;
    let a_prev = sample_field(grid, FieldDist::Bernoulli(&Field::filled(grid.0, grid.1, 0.5)), rng)?;
    Ok(LagState { x, a_prev, y_prev: Field::filled(grid.0, grid.1, params.gamma0) })
}

/// Run `steps` factual transitions from `state`, recording each one.
pub fn continue_factual(
    state: &mut LagState,
    params: &DgpParams,
    steps: usize,
    rng: &mut RngStream,
) -> Result<(Trajectory, Vec<Field>)> {
    let mut x = Vec::with_capacity(steps);
    let mut a = Vec::with_capacity(steps);
    let mut y = Vec::with_capacity(steps);
    let mut p = Vec::with_capacity(steps);
    for _ in 0..steps {
        let out = dgp_step(state, params, StepNoise::Noisy(rng), None)?;
        advance(state, &out, out.a.clone());
        x.push(out.x);
        a.push(out.a);
        y.push(out.y);
        p.push(out.p_treat);
    }
    Ok((Trajectory { x, a, y, static_v: None, mask: None }, p))
}

/// Factual trajectory of length `t_len` after `burn_in` discarded steps,
/// together with the realised treatment probabilities.
pub fn simulate_factual_with_propensity(
    params: &DgpParams,
    t_len: usize,
    rng: &mut RngStream,
) -> Result<(Trajectory, Vec<Field>)> {
    if t_len == 0 {
        return invalid_arg("trajectory length must be >= 1");
    }
    let mut state = initial_state(params, rng)?;
    continue_factual(&mut state, params, params.burn_in, rng)?;
    continue_factual(&mut state, params, t_len, rng)
}

pub fn simulate_factual(params: &DgpParams, t_len: usize, rng: &mut RngStream) -> Result<Trajectory> {
    Ok(simulate_factual_with_propensity(params, t_len, rng)?.0)
}

pub enum RolloutMode<'a> {
    Noisy(&'a mut RngStream),
    Noiseless,
}

/// Evolve X and Y for `plan.horizon()` steps from time `plan.start` of
/// `history`, with treatments pinned to the plan. Returns
/// `Y_{t+1}, ..., Y_{t+tau}`.
pub fn counterfactual_rollout(
    history: &Trajectory,
    plan: &InterventionPlan,
    params: &DgpParams,
    mode: RolloutMode<'_>,
) -> Result<Vec<Field>> {
    if plan.a_plan[0].shape() != history.grid() {
        return invalid_arg("plan grid does not match history grid");
    }
    let mut state = LagState::at(history, plan.start, params.lags)?;
    state.a_prev = plan.a_plan[0].clone();
    let tau = plan.horizon();
    let mut rng = match mode {
        RolloutMode::Noisy(r) => Some(r),
        RolloutMode::Noiseless => None,
    };
    let mut outcomes = Vec::with_capacity(tau);
    for step in 0..tau {
        let next_a = plan.a_plan.get(step + 1);
        let noise = match rng.as_deref_mut() {
            Some(r) => StepNoise::Noisy(r),
            None => StepNoise::Noiseless,
        };
        let out = dgp_step(&state, params, noise, next_a)?;
        let a_next = out.a.clone();
        advance(&mut state, &out, a_next);
        outcomes.push(out.y);
    }
    Ok(outcomes)
}

/// Exact conditional mean of the intervened outcomes (zero-noise rollout).
pub fn analytic_capo(history: &Trajectory, plan: &InterventionPlan, params: &DgpParams) -> Result<Vec<Field>> {
    counterfactual_rollout(history, plan, params, RolloutMode::Noiseless)
}

#[derive(Clone, Debug)]
pub struct McCapo {
    pub mean: Vec<Field>,
    pub stderr: Vec<Field>,
}

/// Per-step mean and standard error over `n_rollouts` noisy rollouts. Each
/// rollout draws from its own substream of `rng`.
pub fn monte_carlo_capo(
    history: &Trajectory,
    plan: &InterventionPlan,
    params: &DgpParams,
    n_rollouts: usize,
    rng: &RngStream,
) -> Result<McCapo> {
    if n_rollouts < 2 {
        return invalid_arg(format!("monte carlo needs at least 2 rollouts, got {n_rollouts}"));
    }
    let (w, h) = history.grid();
    let tau = plan.horizon();
    // Welford accumulation: exact mean when every draw is identical
    let mut mean = vec![Field::zeros(w, h); tau];
    let mut m2 = vec![Field::zeros(w, h); tau];
    for r in 0..n_rollouts {
        let mut stream = rng.substream(r as u64);
        let ys = counterfactual_rollout(history, plan, params, RolloutMode::Noisy(&mut stream))?;
        let count = (r + 1) as f64;
        for (k, yk) in ys.iter().enumerate() {
            for ((mu, q), &v) in mean[k].values_mut().iter_mut().zip(m2[k].values_mut()).zip(yk.values()) {
                let delta = v - *mu;
                *mu += delta / count;
                *q += delta * (v - *mu);
            }
        }
    }
    let n = n_rollouts as f64;
    let stderr = m2.iter().map(|q| q.map(|q| (q / (n - 1.0) / n).sqrt())).collect();
    Ok(McCapo { mean, stderr })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestCase {
    pub history: Trajectory,
    pub plan: InterventionPlan,
    /// Exact `E[Y_{t+tau}[a] | history]`.
    pub true_capo: Field,
    /// Monte-Carlo means for steps `1..=tau`, when rollouts were requested.
    pub per_step_capo: Option<Vec<Field>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSetSpec {
    pub n_test: usize,
    pub history_len: usize,
    pub horizon: usize,
    /// 0 skips the Monte-Carlo paths; otherwise at least 2.
    pub n_rollouts: usize,
}

impl Default for TestSetSpec {
    fn default() -> Self {
        Self { n_test: 50, history_len: 10, horizon: 10, n_rollouts: 100 }
    }
}

/// Fresh independent histories sharing one random plan. Stream layout off
/// `rng`: substream 0 draws the plan, `1 + i` simulates history `i`, and
/// `1_000_000 + i` drives its Monte-Carlo rollouts.
pub fn build_test_set(params: &DgpParams, spec: &TestSetSpec, rng: &RngStream) -> Result<Vec<TestCase>> {
    if spec.n_test == 0 {
        return invalid_arg("n_test must be >= 1");
    }
    if spec.n_rollouts == 1 {
        return invalid_arg("n_rollouts must be 0 or >= 2");
    }
    let t = spec.history_len.checked_sub(1).ok_or_else(|| Error::InvalidArgument("history_len must be >= 1".into()))?;
    let plan = InterventionPlan::random(t, spec.horizon, params.grid, &mut rng.substream(0))?;
    (0..spec.n_test)
        .map(|i| {
            let history = simulate_factual(params, spec.history_len, &mut rng.substream(1 + i as u64))?;
            let capo = analytic_capo(&history, &plan, params)?;
            let per_step_capo = if spec.n_rollouts >= 2 {
                let mc = monte_carlo_capo(&history, &plan, params, spec.n_rollouts, &rng.substream(1_000_000 + i as u64))?;
                Some(mc.mean)
            } else {
                None
            };
            Ok(TestCase { history, plan: plan.clone(), true_capo: capo[spec.horizon - 1].clone(), per_step_capo })
        })
        .collect()
}
