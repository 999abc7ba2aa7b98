//! Leaky integrate-and-fire dynamics with membrane-potential batch norm (MPBN)
//! and threshold modulation (TM).
//!
//! One LIF step is charge, then fire, then hard reset:
//!
//! ```text
//! h_t = x_t + u_{t-1} / tau
//! o_t = step(h_t - threshold)
//! u_t = keep_t * (1 - o_t) + o_t * v_reset
//! ```
//!
//! Under MPBN the firing input and the carried potential are the normalized
//! `BN(h_t)`. A deployed layer folds the normalization into a per-channel
//! threshold instead and, under TM, re-estimates the statistics online with an
//! exponential moving average whose weight decays within every forward pass.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_SURROGATE_ALPHA: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifConfig {
    pub tau: f64,
    pub v_th: f64,
    pub v_reset: f64,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self {
            tau: 2.0,
            v_th: 1.0,
            v_reset: 0.0,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 1.0) {
            return Err(Error::InvalidConfig(format!("tau must be >= 1, got {}", self.tau)));
        }
        if !(self.v_th > self.v_reset) {
            return Err(Error::InvalidConfig(format!(
                "v_th ({}) must exceed v_reset ({})",
                self.v_th, self.v_reset
            )));
        }
        Ok(())
    }
}

/// Per-channel affine parameters and statistics of one MPBN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mu: Tensor,
    pub sigma2: Tensor,
    pub eps: f64,
}

impl NormParams {
    /// γ = 1, β = 0, μ = 0, σ² = 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            mu: Tensor::zeros(&[channels]),
            sigma2: Tensor::full(&[channels], 1.0),
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [("beta", &self.beta), ("mu", &self.mu), ("sigma2", &self.sigma2)] {
            if t.shape() != [c] {
                return Err(Error::ShapeMismatch(format!(
                    "{name} has shape {:?}, expected [{c}]",
                    t.shape()
                )));
            }
        }
        if let Some(ch) = self.sigma2.data().iter().position(|&v| v < 0.0) {
            return Err(Error::DegenerateVariance { channel: ch });
        }
        if !(self.eps >= 0.0) {
            return Err(Error::InvalidConfig("eps must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TmConfig {
    /// Initial EMA weight. Zero freezes the statistics.
    pub rho0: f64,
    /// Per-step decay of the EMA weight.
    pub omega: f64,
    /// Normalize the carried potential of non-firing neurons.
    pub r: bool,
    /// Update γ, β by entropy minimization.
    pub e: bool,
}

impl Default for TmConfig {
    fn default() -> Self {
        Self {
            rho0: 1.0,
            omega: 0.94,
            r: false,
            e: false,
        }
    }
}

impl TmConfig {
    /// Statistics never move; the deployed thresholds are used as-is.
    pub fn frozen() -> Self {
        Self {
            rho0: 0.0,
            omega: 1.0,
            r: false,
            e: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho0) {
            return Err(Error::InvalidConfig(format!("rho0 must be in [0, 1], got {}", self.rho0)));
        }
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::InvalidConfig(format!("omega must be in (0, 1], got {}", self.omega)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TmState {
    pub mu_hat: Tensor,
    pub sigma2_hat: Tensor,
    pub rho_t: f64,
    pub v_th_mod: Tensor,
}

impl TmState {
    /// Starts from the source statistics with the re-parameterized threshold.
    pub fn from_source(norm: &NormParams, lif: &LifConfig) -> Result<Self> {
        let v_th_mod = modulated_threshold(lif.v_th, norm, &norm.mu, &norm.sigma2)?;
        Ok(Self {
            mu_hat: norm.mu.clone(),
            sigma2_hat: norm.sigma2.clone(),
            rho_t: 0.0,
            v_th_mod,
        })
    }
}

/// Per-channel `(v_th - β)·√(σ² + ε)/γ + μ`.
pub fn modulated_threshold(
    v_th: f64,
    norm: &NormParams,
    mu: &Tensor,
    sigma2: &Tensor,
) -> Result<Tensor> {
    let c = norm.channels();
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let gamma = norm.gamma.data()[ch];
        if gamma == 0.0 {
            return Err(Error::ZeroGamma { layer: 0, channel: ch });
        }
        let var = sigma2.data()[ch] + norm.eps;
        if !(var > 0.0) {
            return Err(Error::DegenerateVariance { channel: ch });
        }
        out.push((v_th - norm.beta.data()[ch]) * var.sqrt() / gamma + mu.data()[ch]);
    }
    Ok(Tensor::from_parts(vec![c], out))
}

/// Membrane potential carried between steps of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct LifLayerState {
    /// `None` is the all-zero potential before the first step.
    pub u: Option<Var>,
    pub t: usize,
}

impl LifLayerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Spike nonlinearity: the true step or its smooth twin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpikeFn {
    Heaviside { alpha: f64 },
    Logistic { alpha: f64 },
}

impl Default for SpikeFn {
    fn default() -> Self {
        SpikeFn::Heaviside {
            alpha: DEFAULT_SURROGATE_ALPHA,
        }
    }
}

impl SpikeFn {
    pub fn apply(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            SpikeFn::Heaviside { alpha } => tape.heaviside_sg(v, alpha),
            SpikeFn::Logistic { alpha } => tape.logistic(v, alpha),
        }
    }
}

/// Tape handles for γ and β of one layer.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub gamma: Var,
    pub beta: Var,
}

impl Affine {
    /// Registers γ, β as gradient-receiving leaves when `trainable`, constants otherwise.
    pub fn register(tape: &mut Tape, norm: &NormParams, trainable: bool) -> Self {
        let (g, b) = (norm.gamma.clone(), norm.beta.clone());
        if trainable {
            Self {
                gamma: tape.param(g),
                beta: tape.param(b),
            }
        } else {
            Self {
                gamma: tape.constant(g),
                beta: tape.constant(b),
            }
        }
    }
}

/// `h_t = x_t + u_{t-1}/τ`.
pub fn lif_charge(tape: &mut Tape, x_t: Var, state: &LifLayerState, cfg: &LifConfig) -> Result<Var> {
    match state.u {
        None => Ok(x_t),
        Some(u) => {
            let leak = tape.scale(u, 1.0 / cfg.tau);
            tape.add(x_t, leak)
        }
    }
}

/// `((h - mean) / √(var + ε))·γ + β` per channel.
///
/// MPBN and the r = 1 reset normalization share this so they agree bit for bit.
pub fn normalize(
    tape: &mut Tape,
    h: Var,
    mean: Var,
    var: Var,
    eps: f64,
    affine: Affine,
) -> Result<Var> {
    let shifted = tape.add_scalar(var, eps);
    let std = tape.sqrt(shifted)?;
    let centered = tape.channel_sub(h, mean)?;
    let scaled = tape.channel_div(centered, std)?;
    let stretched = tape.channel_mul(scaled, affine.gamma)?;
    tape.channel_add(stretched, affine.beta)
}

/// Which statistics MPBN normalizes with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnStats {
    /// Stored running statistics.
    Running,
    /// Statistics of the current batch; `momentum` updates the running estimate when set.
    Batch { momentum: Option<f64> },
}

/// Batch-normalizes a charged membrane potential.
pub fn mpbn_apply(
    tape: &mut Tape,
    h: Var,
    norm: &mut NormParams,
    affine: Affine,
    stats: BnStats,
) -> Result<Var> {
    let (mean, var) = match stats {
        BnStats::Running => (tape.constant(norm.mu.clone()), tape.constant(norm.sigma2.clone())),
        BnStats::Batch { momentum } => {
            let (m, v) = tape.batch_stats(h)?;
            if let Some(mo) = momentum {
                let (bm, bv) = (tape.value(m), tape.value(v));
                for (r, b) in norm.mu.data_mut().iter_mut().zip(bm.data()) {
                    *r = (1.0 - mo) * *r + mo * b;
                }
                for (r, b) in norm.sigma2.data_mut().iter_mut().zip(bv.data()) {
                    *r = (1.0 - mo) * *r + mo * b;
                }
            }
            (m, v)
        }
    };
    normalize(tape, h, mean, var, norm.eps, affine)
}

/// Firing threshold handed to [`lif_fire_reset`].
#[derive(Clone, Copy, Debug)]
pub enum Threshold {
    Scalar(f64),
    /// Per-channel threshold; `flip` holds `sign(γ)` when some γ is negative,
    /// which reverses the comparison for those channels.
    PerChannel { thr: Var, flip: Option<Var> },
}

/// Statistics used to normalize the carried potential when `r = 1`.
#[derive(Clone, Copy, Debug)]
pub struct ResetNorm {
    pub mu_hat: Var,
    pub sigma2_hat: Var,
    pub eps: f64,
    pub affine: Affine,
}

/// Fires on `h > threshold` and hard-resets fired neurons to `v_reset`.
///
/// Non-firing neurons carry `h` itself, or its normalization when `r` is set.
#[allow(clippy::too_many_arguments)]
pub fn lif_fire_reset(
    tape: &mut Tape,
    h: Var,
    threshold: Threshold,
    state: &mut LifLayerState,
    cfg: &LifConfig,
    spike: SpikeFn,
    r: bool,
    norm_stats: Option<ResetNorm>,
) -> Result<Var> {
    let v = match threshold {
        Threshold::Scalar(th) => tape.add_scalar(h, -th),
        Threshold::PerChannel { thr, flip } => {
            let d = tape.channel_sub(h, thr)?;
            match flip {
                Some(sign) => tape.channel_mul(d, sign)?,
                None => d,
            }
        }
    };
    let o = spike.apply(tape, v);
    let keep = if r {
        let ns = norm_stats
            .ok_or_else(|| Error::MissingStats("r = 1 requires normalization statistics".into()))?;
        normalize(tape, h, ns.mu_hat, ns.sigma2_hat, ns.eps, ns.affine)?
    } else {
        h
    };
    let stay = tape.rsub_scalar(1.0, o);
    let mut u = tape.mul(keep, stay)?;
    if cfg.v_reset != 0.0 {
        let reset = tape.scale(o, cfg.v_reset);
        u = tape.add(u, reset)?;
    }
    state.u = Some(u);
    state.t += 1;
    Ok(o)
}

/// One EMA step of the TM statistics followed by threshold re-evaluation.
///
/// `tm.rho_t` must hold the previous step's weight (ρ₀ before the first step).
pub fn tm_update(
    h_t: &Tensor,
    tm: &mut TmState,
    cfg: &TmConfig,
    params: &NormParams,
    lif: &LifConfig,
) -> Result<()> {
    if h_t.channels() != tm.mu_hat.len() || params.channels() != tm.mu_hat.len() {
        return Err(Error::ShapeMismatch(format!(
            "membrane has {} channels, TM state {}, params {}",
            h_t.channels(),
            tm.mu_hat.len(),
            params.channels()
        )));
    }
    let rho = cfg.omega * tm.rho_t;
    tm.rho_t = rho;
    if rho > 0.0 {
        let (mean, var) = tensor::batch_stats(h_t)?;
        for (m, b) in tm.mu_hat.data_mut().iter_mut().zip(mean.data()) {
            *m = (1.0 - rho) * *m + rho * b;
        }
        for (s, b) in tm.sigma2_hat.data_mut().iter_mut().zip(var.data()) {
            *s = (1.0 - rho) * *s + rho * b;
        }
    }
    tm.v_th_mod = modulated_threshold(lif.v_th, params, &tm.mu_hat, &tm.sigma2_hat)?;
    Ok(())
}

fn gamma_flip(tape: &mut Tape, norm: &NormParams) -> Option<Var> {
    let g = norm.gamma.data();
    if g.iter().all(|&v| v > 0.0) {
        return None;
    }
    let sign = g.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect();
    Some(tape.constant(Tensor::from_parts(vec![g.len()], sign)))
}

/// Runs one MPBN + LIF layer over a time sequence of inputs.
pub fn mpbn_layer_forward(
    tape: &mut Tape,
    xs: &[Var],
    lif: &LifConfig,
    norm: &mut NormParams,
    affine: Affine,
    stats: BnStats,
    spike: SpikeFn,
) -> Result<Vec<Var>> {
    let mut state = LifLayerState::new();
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let h = lif_charge(tape, x, &state, lif)?;
        let hn = mpbn_apply(tape, h, norm, affine, stats)?;
        out.push(lif_fire_reset(
            tape,
            hn,
            Threshold::Scalar(lif.v_th),
            &mut state,
            lif,
            spike,
            false,
            None,
        )?);
    }
    Ok(out)
}

/// Runs one deployed LIF layer with threshold modulation over a time sequence.
///
/// Per step: charge, EMA statistics update, threshold re-evaluation, fire and
/// reset. `tm.rho_t` restarts at ρ₀ for every call; μ̂ and σ̂² carry over.
/// When `affine` holds trainable leaves, the threshold and the r = 1
/// normalization are recorded on the tape as functions of γ and β; the
/// statistics themselves are treated as constants.
#[allow(clippy::too_many_arguments)]
pub fn tm_layer_forward(
    tape: &mut Tape,
    xs: &[Var],
    lif: &LifConfig,
    norm: &NormParams,
    tm: &mut TmState,
    cfg: &TmConfig,
    affine: Affine,
    spike: SpikeFn,
) -> Result<Vec<Var>> {
    let mut state = LifLayerState::new();
    tm.rho_t = cfg.rho0;
    let flip = gamma_flip(tape, norm);
    let tracked = tape.requires_grad(affine.gamma) || tape.requires_grad(affine.beta);
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let h = lif_charge(tape, x, &state, lif)?;
        tm_update(tape.value(h), tm, cfg, norm, lif)?;
        let thr = if tracked {
            let std = tm
                .sigma2_hat
                .map(|v| v + norm.eps)
                .map(f64::sqrt);
            let std = tape.constant(std);
            let mu_hat = tape.constant(tm.mu_hat.clone());
            let margin = tape.rsub_scalar(lif.v_th, affine.beta);
            let spread = tape.mul(margin, std)?;
            let scaled = tape.div(spread, affine.gamma)?;
            tape.add(scaled, mu_hat)?
        } else {
            tape.constant(tm.v_th_mod.clone())
        };
        let reset_norm = if cfg.r {
            Some(ResetNorm {
                mu_hat: tape.constant(tm.mu_hat.clone()),
                sigma2_hat: tape.constant(tm.sigma2_hat.clone()),
                eps: norm.eps,
                affine,
            })
        } else {
            None
        };
        out.push(lif_fire_reset(
            tape,
            h,
            Threshold::PerChannel { thr, flip },
            &mut state,
            lif,
            spike,
            cfg.r,
            reset_norm,
        )?);
    }
    Ok(out)
}
