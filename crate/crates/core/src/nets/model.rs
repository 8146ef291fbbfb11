//! ConvLSTM + U-Net embedding with attention-gated skips, and per-cell heads.
//!
//! Layout of one forward pass:
//!
//! 1. ConvLSTM over the history window (left-padded with zero steps).
//! 2. Concatenate static covariates to the final hidden state.
//! 3. Encoder: one conv block per ladder level, 2×2 max-pool between levels.
//!    The conditioning channels (treatment at the prediction step, or the
//!    whole plan for the direct-regression baseline) enter through their
//!    own weight tensor added to the first encoder conv.
//! 4. Decoder: nearest upsample + conv, attention gate on the skip, conv
//!    over `[gated skip, upsampled]`.
//! 5. 1×1 projection to `d_h` channels.
//!
//! With `kernel_size = 1` there is no pooling either, so every output cell
//! depends only on its own input cell.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::lattice::RngStream;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Channels per history step: covariate, outcome, previous treatment.
    pub input_channels: usize,
    pub static_channels: usize,
    /// Extra channels fed next to the embedding input (treatment or plan).
    pub cond_channels: usize,
    pub hidden_convlstm: usize,
    pub channel_ladder: Vec<usize>,
    pub d_h: usize,
    pub ghead_hidden: usize,
    pub ghead_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub kernel_size: usize,
    pub use_attention: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::desk(5)
    }
}

impl NetConfig {
    /// Full-size reference architecture for 64×64 grids.
    pub fn paper(n_heads: usize) -> Self {
        Self {
            input_channels: 3,
            static_channels: 0,
            cond_channels: 1,
            hidden_convlstm: 32,
            channel_ladder: vec![16, 32, 64, 128, 256],
            d_h: 16,
            ghead_hidden: 8,
            ghead_layers: 1,
            n_heads,
            context_len: 10,
            kernel_size: 3,
            use_attention: true,
        }
    }

    /// Reduced architecture for 32×32 grids on a single CPU core.
    pub fn desk(n_heads: usize) -> Self {
        Self {
            input_channels: 3,
            static_channels: 0,
            cond_channels: 1,
            hidden_convlstm: 8,
            channel_ladder: vec![8, 16, 32],
            d_h: 16,
            ghead_hidden: 8,
            ghead_layers: 1,
            n_heads,
            context_len: 5,
            kernel_size: 3,
            use_attention: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfiguration(m.to_string()));
        if self.d_h == 0 {
            return bad("d_h must be >= 1");
        }
        if self.n_heads == 0 {
            return bad("n_heads must be >= 1");
        }
        if self.channel_ladder.is_empty() || self.channel_ladder.contains(&0) {
            return bad("channel ladder must be non-empty and positive");
        }
        if self.channel_ladder.windows(2).any(|w| w[0] >= w[1]) {
            return bad("channel ladder must be strictly increasing");
        }
        if self.kernel_size != 1 && self.kernel_size != 3 {
            return bad("kernel_size must be 1 or 3");
        }
        if self.hidden_convlstm == 0 || self.context_len == 0 || self.input_channels == 0 {
            return bad("hidden_convlstm, context_len and input_channels must be >= 1");
        }
        if self.ghead_layers > 0 && self.ghead_hidden == 0 {
            return bad("ghead_hidden must be >= 1 when ghead_layers > 0");
        }
        Ok(())
    }

    pub fn pools(&self) -> bool {
        self.kernel_size == 3
    }

    /// Reject grids that the pooling ladder cannot halve cleanly.
    pub fn check_grid(&self, height: usize, width: usize) -> Result<()> {
        if self.pools() {
            let f = 1usize << (self.channel_ladder.len() - 1);
            if height % f != 0 || width % f != 0 {
                return Err(Error::InvalidConfiguration(format!(
                    "grid {width}x{height} not divisible by {f} for a {}-level ladder",
                    self.channel_ladder.len()
                )));
            }
        }
        Ok(())
    }
}

/// One history window as network input.
#[derive(Clone, Debug)]
pub struct Window {
    /// Oldest first; each `(input_channels, h, w)`.
    pub steps: Vec<Tensor>,
    pub static_v: Option<Tensor>,
    /// `(cond_channels, h, w)`; ignored when the config has none.
    pub cond: Option<Tensor>,
}

#[derive(Clone, Debug)]
struct AttnIds {
    wg: ParamId,
    wx: ParamId,
    b: ParamId,
    psi_w: ParamId,
    psi_b: ParamId,
}

#[derive(Clone, Debug)]
struct DecIds {
    up_w: ParamId,
    up_b: ParamId,
    attn: Option<AttnIds>,
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct HeadIds {
    layers: Vec<(ParamId, ParamId)>,
}

/// Parameter layout of one network; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    cfg: NetConfig,
    lstm_w: ParamId,
    lstm_b: ParamId,
    enc: Vec<(ParamId, ParamId)>,
    cond_w: Option<ParamId>,
    dec: Vec<DecIds>,
    out_w: ParamId,
    out_b: ParamId,
    heads: Vec<HeadIds>,
}

impl Network {
    /// Register every parameter (Xavier-uniform weights, zero biases).
    pub fn build(cfg: &NetConfig, store: &mut ParamStore, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel_size;
        let kk = k * k;
        let hc = cfg.hidden_convlstm;
        let cin = cfg.input_channels + hc;

        let mut weight = |store: &mut ParamStore, name: String, cout: usize, cin: usize, kk: usize| {
            store.add_xavier(name, (cout, 1, cin * kk), cin * kk, cout * kk, rng)
        };
        let bias = |store: &mut ParamStore, name: String, n: usize| store.add(name, Tensor::zeros(n, 1, 1));

        let lstm_w = weight(store, "convlstm.w".into(), 4 * hc, cin, kk)?;
        let lstm_b = bias(store, "convlstm.b".into(), 4 * hc)?;

        let ladder = &cfg.channel_ladder;
        let mut enc = Vec::with_capacity(ladder.len());
        let mut prev = hc + cfg.static_channels;
        for (l, &c) in ladder.iter().enumerate() {
            let w = weight(store, format!("enc{l}.w"), c, prev, kk)?;
            let b = bias(store, format!("enc{l}.b"), c)?;
            enc.push((w, b));
            prev = c;
        }
        let cond_w = if cfg.cond_channels > 0 {
            Some(weight(store, "enc0.cond_w".into(), ladder[0], cfg.cond_channels, kk)?)
        } else {
            None
        };

        let mut dec = Vec::with_capacity(ladder.len().saturating_sub(1));
        for l in (0..ladder.len().saturating_sub(1)).rev() {
            let (c, deeper) = (ladder[l], ladder[l + 1]);
            let up_w = weight(store, format!("dec{l}.up_w"), c, deeper, kk)?;
            let up_b = bias(store, format!("dec{l}.up_b"), c)?;
            let attn = if cfg.use_attention {
                let inter = (c / 2).max(1);
                Some(AttnIds {
                    wg: weight(store, format!("att{l}.wg"), inter, c, 1)?,
                    wx: weight(store, format!("att{l}.wx"), inter, c, 1)?,
                    b: bias(store, format!("att{l}.b"), inter)?,
                    psi_w: weight(store, format!("att{l}.psi_w"), 1, inter, 1)?,
                    psi_b: bias(store, format!("att{l}.psi_b"), 1)?,
                })
            } else {
                None
            };
            let w = weight(store, format!("dec{l}.w"), c, 2 * c, kk)?;
            let b = bias(store, format!("dec{l}.b"), c)?;
            dec.push(DecIds { up_w, up_b, attn, w, b });
        }

        let out_w = weight(store, "out.w".into(), cfg.d_h, ladder[0], 1)?;
        let out_b = bias(store, "out.b".into(), cfg.d_h)?;

        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 1..=cfg.n_heads {
            let mut layers = Vec::with_capacity(cfg.ghead_layers + 1);
            let mut width = cfg.d_h;
            for j in 0..cfg.ghead_layers {
                let w = weight(store, format!("head{h}.l{j}.w"), cfg.ghead_hidden, width, 1)?;
                let b = bias(store, format!("head{h}.l{j}.b"), cfg.ghead_hidden)?;
                layers.push((w, b));
                width = cfg.ghead_hidden;
            }
            let w = weight(store, format!("head{h}.out.w"), 1, width, 1)?;
            let b = bias(store, format!("head{h}.out.b"), 1)?;
            layers.push((w, b));
            heads.push(HeadIds { layers });
        }

        Ok(Self { cfg: cfg.clone(), lstm_w, lstm_b, enc, cond_w, dec, out_w, out_b, heads })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Parameters of the shared embedding, excluding the conditioning-input
    /// weights and the heads.
    pub fn is_backbone_param(name: &str) -> bool {
        !name.starts_with("head") && name != "enc0.cond_w"
    }

    /// Names of parameters used only by head `k` (1-based).
    pub fn head_param_prefix(k: usize) -> String {
        format!("head{k}.")
    }

    /// One ConvLSTM update; returns `(h', c')`.
    pub fn convlstm_step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let hc = self.cfg.hidden_convlstm;
        let (ih, hh, cc) = (tape.value(input).shape(), tape.value(h).shape(), tape.value(c).shape());
        if ih.0 != self.cfg.input_channels || hh.0 != hc || cc != hh || (ih.1, ih.2) != (hh.1, hh.2) {
            return invalid_arg(format!("convlstm shapes: input {ih:?}, h {hh:?}, c {cc:?}"));
        }
        let w = tape.param(store, self.lstm_w);
        let b = tape.param(store, self.lstm_b);
        let z = tape.concat(&[input, h])?;
        let gates = tape.conv(z, w, Some(b), self.cfg.kernel_size)?;
        let i_pre = tape.slice(gates, 0, hc)?;
        let f_pre = tape.slice(gates, hc, hc)?;
        let o_pre = tape.slice(gates, 2 * hc, hc)?;
        let g_pre = tape.slice(gates, 3 * hc, hc)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let o = tape.sigmoid(o_pre);
        let g = tape.tanh(g_pre);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    /// Additive attention on decoder level `level` (0 = finest). With
    /// attention disabled the skip passes through unchanged.
    pub fn attention_gate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        level: usize,
        skip: Var,
        gating: Var,
    ) -> Result<Var> {
        let idx = self.dec_index(level)?;
        let Some(ids) = &self.dec[idx].attn else {
            return Ok(skip);
        };
        if tape.value(skip).shape() != tape.value(gating).shape() {
            return invalid_arg("attention gate: skip and gating shapes differ");
        }
        let wg = tape.param(store, ids.wg);
        let wx = tape.param(store, ids.wx);
        let b = tape.param(store, ids.b);
        let psi_w = tape.param(store, ids.psi_w);
        let psi_b = tape.param(store, ids.psi_b);
        let gp = tape.conv(gating, wg, None, 1)?;
        let xp = tape.conv(skip, wx, Some(b), 1)?;
        let sum = tape.add(gp, xp)?;
        let act = tape.relu(sum);
        let psi = tape.conv(act, psi_w, Some(psi_b), 1)?;
        let alpha = tape.sigmoid(psi);
        tape.channel_gate(skip, alpha)
    }

    fn dec_index(&self, level: usize) -> Result<usize> {
        let n = self.dec.len();
        if level >= n {
            return invalid_arg(format!("decoder level {level} out of range ({n} levels)"));
        }
        // dec is stored deepest first
        Ok(n - 1 - level)
    }

    /// Embedding `(d_h, h, w)` of one history window.
    pub fn embed_history(&self, tape: &mut Tape, store: &ParamStore, window: &Window) -> Result<Var> {
        let cfg = &self.cfg;
        if window.steps.is_empty() {
            return invalid_arg("history window is empty");
        }
        if window.steps.len() > cfg.context_len {
            return invalid_arg(format!(
                "window of {} steps exceeds context length {}",
                window.steps.len(),
                cfg.context_len
            ));
        }
        let (_, gh, gw) = window.steps[0].shape();
        cfg.check_grid(gh, gw)?;
        if window.steps.iter().any(|s| s.shape() != (cfg.input_channels, gh, gw)) {
            return invalid_arg("history steps have inconsistent shapes");
        }

        let hc = cfg.hidden_convlstm;
        let mut h = tape.constant(Tensor::zeros(hc, gh, gw));
        let mut c = tape.constant(Tensor::zeros(hc, gh, gw));
        let pad = cfg.context_len - window.steps.len();
        for _ in 0..pad {
            let zero = tape.constant(Tensor::zeros(cfg.input_channels, gh, gw));
            (h, c) = self.convlstm_step(tape, store, zero, h, c)?;
        }
        for step in &window.steps {
            let input = tape.constant(step.clone());
            (h, c) = self.convlstm_step(tape, store, input, h, c)?;
        }

        let mut feats = h;
        if cfg.static_channels > 0 {
            let v = window
                .static_v
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("network expects static covariates".into()))?;
            if v.shape() != (cfg.static_channels, gh, gw) {
                return invalid_arg("static covariates have the wrong shape");
            }
            let vv = tape.constant(v.clone());
            feats = tape.concat(&[h, vv])?;
        }

        let k = cfg.kernel_size;
        let (w0, b0) = self.enc[0];
        let (w0, b0) = (tape.param(store, w0), tape.param(store, b0));
        let mut x = tape.conv(feats, w0, Some(b0), k)?;
        if let Some(cw) = self.cond_w {
            let cond = window
                .cond
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("network expects conditioning channels".into()))?;
            if cond.shape() != (cfg.cond_channels, gh, gw) {
                return invalid_arg("conditioning channels have the wrong shape");
            }
            let cv = tape.constant(cond.clone());
            let cw = tape.param(store, cw);
            let cx = tape.conv(cv, cw, None, k)?;
            x = tape.add(x, cx)?;
        }
        x = tape.relu(x);

        let mut skips = vec![x];
        for &(w, b) in &self.enc[1..] {
            if cfg.pools() {
                x = tape.maxpool2(x)?;
            }
            let (w, b) = (tape.param(store, w), tape.param(store, b));
            let pre = tape.conv(x, w, Some(b), k)?;
            x = tape.relu(pre);
            skips.push(x);
        }

        for (i, ids) in self.dec.iter().enumerate() {
            let level = self.dec.len() - 1 - i;
            let up = if cfg.pools() { tape.upsample2(x) } else { x };
            let (uw, ub) = (tape.param(store, ids.up_w), tape.param(store, ids.up_b));
            let up_pre = tape.conv(up, uw, Some(ub), k)?;
            let up = tape.relu(up_pre);
            let skip = self.attention_gate(tape, store, level, skips[level], up)?;
            let cat = tape.concat(&[skip, up])?;
            let (w, b) = (tape.param(store, ids.w), tape.param(store, ids.b));
            let pre = tape.conv(cat, w, Some(b), k)?;
            x = tape.relu(pre);
        }

        let (ow, ob) = (tape.param(store, self.out_w), tape.param(store, self.out_b));
        tape.conv(x, ow, Some(ob), 1)
    }

    /// Head `k` (1-based): the same small MLP applied at every cell.
    pub fn ghead_forward(&self, tape: &mut Tape, store: &ParamStore, emb: Var, k: usize) -> Result<Var> {
        if k == 0 || k > self.heads.len() {
            return invalid_arg(format!("head index {k} outside 1..={}", self.heads.len()));
        }
        if tape.value(emb).c != self.cfg.d_h {
            return invalid_arg("embedding channel count does not match d_h");
        }
        let layers = &self.heads[k - 1].layers;
        let mut x = emb;
        for (j, &(w, b)) in layers.iter().enumerate() {
            let (w, b) = (tape.param(store, w), tape.param(store, b));
            x = tape.conv(x, w, Some(b), 1)?;
            if j + 1 < layers.len() {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }
}
