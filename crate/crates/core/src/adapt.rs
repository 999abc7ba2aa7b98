//! Online test-time adaptation over a stream of unlabeled batches.
//!
//! Labels travel with each batch only so that running accuracy can be scored;
//! nothing downstream of the forward pass reads them.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::energy::{total_energy, total_energy_with_backward, EnergyConstants, EnergyCounters, EnergyRow};
use crate::error::{Error, Result};
use crate::lif::TmConfig;
use crate::network::{
    channel_rates, predict, FiringRateProbe, ForwardOptions, GradScope, ModelMode, Network, Neuron,
};
use crate::reparam::configure_tm;
use crate::tensor::Tensor;
use crate::trainer::{adam_step, AdamState, OptimizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// No adaptation: MPBN running statistics, or frozen thresholds on a deployed model.
    Source,
    TmNorm,
    TmEnt,
    /// MPBN with per-batch statistics on the undeployed model.
    DirectCalibration,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    pub tm: TmConfig,
    /// Defaults to 2.5e-4 scaled by `batch_size / 64`.
    pub lr: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self::new(AdaptMode::TmNorm)
    }
}

impl AdaptConfig {
    pub fn new(mode: AdaptMode) -> Self {
        let tm = TmConfig {
            e: mode == AdaptMode::TmEnt,
            ..TmConfig::default()
        };
        Self {
            mode,
            tm,
            lr: None,
            batch_size: 64,
            seed: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(2.5e-4 * self.batch_size as f64 / 64.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        self.tm.validate()?;
        match self.mode {
            AdaptMode::TmEnt if !self.tm.e => {
                Err(Error::InvalidConfig("TmEnt requires tm.e = true".into()))
            }
            AdaptMode::TmNorm if self.tm.e => {
                Err(Error::InvalidConfig("TmNorm requires tm.e = false".into()))
            }
            _ => {
                let lr = self.learning_rate();
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(Error::InvalidConfig(format!("lr must be positive, got {lr}")));
                }
                Ok(())
            }
        }
    }
}

/// Mean Shannon entropy (natural log) of the row-wise softmax of `[N, K]` logits.
pub fn entropy_loss(logits: &Tensor) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let z = tape.constant(logits.clone());
    let h = tape.entropy(z)?;
    Ok(tape.value(h).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: usize,
    pub seen: usize,
    pub running_accuracy: f64,
    pub entropy: f64,
    /// Mean firing rate per spiking layer.
    pub layer_rates: Vec<f64>,
    pub updated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineSummary {
    pub layer: usize,
    pub gamma_mean: f64,
    pub beta_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub config: AdaptConfig,
    pub records: Vec<BatchRecord>,
    pub predictions: Vec<usize>,
    pub final_accuracy: f64,
    pub final_error: f64,
    pub skipped_updates: usize,
    /// Per-channel firing rates averaged over the whole stream.
    pub channel_rates: Vec<FiringRateProbe>,
    pub affine_start: Vec<AffineSummary>,
    pub affine_end: Vec<AffineSummary>,
    pub energy: EnergyCounters,
}

impl AdaptReport {
    /// One row per batch: index, running accuracy, entropy, then one mean rate per spiking layer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("batch,seen,running_accuracy,entropy,updated");
        for p in &self.channel_rates {
            s += &format!(",rate_layer{}", p.layer);
        }
        s.push('\n');
        for r in &self.records {
            s += &format!(
                "{},{},{},{},{}",
                r.batch, r.seen, r.running_accuracy, r.entropy, r.updated as u8
            );
            for v in &r.layer_rates {
                s += &format!(",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn summary_json(&self) -> Result<String> {
        let summary = serde_json::json!({
            "toolkit_version": env!("CARGO_PKG_VERSION"),
            "config": self.config,
            "batches": self.records.len(),
            "samples": self.predictions.len(),
            "final_accuracy": self.final_accuracy,
            "final_error": self.final_error,
            "skipped_updates": self.skipped_updates,
            "affine_start": self.affine_start,
            "affine_end": self.affine_end,
            "energy_uj_per_sample": total_energy_with_backward(&self.energy, &EnergyConstants::default()),
        });
        Ok(serde_json::to_string_pretty(&summary)?)
    }

    /// Stream-mean per-channel rates of one layer.
    pub fn rates_of(&self, layer: usize) -> Option<&[f64]> {
        self.channel_rates
            .iter()
            .find(|p| p.layer == layer)
            .map(|p| p.rates.as_slice())
    }
}

fn affine_summary(net: &Network) -> Vec<AffineSummary> {
    net.neurons()
        .iter()
        .enumerate()
        .filter_map(|(layer, n)| {
            n.as_ref().map(|n| AffineSummary {
                layer,
                gamma_mean: n.norm().gamma.mean(),
                beta_mean: n.norm().beta.mean(),
            })
        })
        .collect()
}

fn forward_mode(net: &mut Network, cfg: &AdaptConfig) -> Result<ModelMode> {
    let deployed = net.is_deployed();
    Ok(match cfg.mode {
        AdaptMode::Source if deployed => {
            configure_tm(net, TmConfig::frozen())?;
            ModelMode::DeployedTm
        }
        AdaptMode::Source => ModelMode::Eval,
        AdaptMode::TmNorm | AdaptMode::TmEnt => {
            if !deployed {
                return Err(Error::Mode(format!(
                    "{:?} needs a deployed model",
                    cfg.mode
                )));
            }
            configure_tm(net, cfg.tm)?;
            ModelMode::DeployedTm
        }
        AdaptMode::DirectCalibration => {
            if deployed {
                return Err(Error::Mode("DirectCalibration needs the MPBN model".into()));
            }
            ModelMode::DirectCalibration
        }
    })
}

/// One Adam step on γ, β of every deployed layer from the gradients on `tape`.
/// Returns `false`, leaving the model untouched, when a gradient is not finite.
pub fn affine_update(
    net: &mut Network,
    tape: &Tape,
    trace: &crate::network::ForwardTrace,
    state: &mut AdamState,
    lr: f64,
) -> Result<bool> {
    let mut grads = Vec::new();
    for a in trace.affines.iter().flatten() {
        for v in [a.gamma, a.beta] {
            let g = tape
                .grad(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()]);
            if g.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
            grads.push(g);
        }
    }
    let mut params: Vec<Tensor> = Vec::with_capacity(grads.len());
    for n in net.neurons().iter().flatten() {
        params.push(n.norm().gamma.clone());
        params.push(n.norm().beta.clone());
    }
    let cfg = OptimizerConfig {
        lr,
        ..OptimizerConfig::default()
    };
    {
        let mut slots: Vec<&mut [f64]> = params.iter_mut().map(Tensor::data_mut).collect();
        let g: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        adam_step(&mut slots, &g, state, &cfg)?;
    }
    let mut it = params.into_iter();
    for n in net.neurons_mut().iter_mut().flatten() {
        let (gamma, beta) = (it.next().expect("gamma"), it.next().expect("beta"));
        match n {
            Neuron::Deployed(d) => {
                d.norm.gamma = gamma;
                d.norm.beta = beta;
            }
            Neuron::Mpbn(np) => {
                np.gamma = gamma;
                np.beta = beta;
            }
        }
    }
    Ok(true)
}

/// Feeds `stream` through `net` strictly in order. Each batch is scored with
/// the parameters in effect before it is seen; TM-ENT updates γ, β after.
pub fn adapt_stream<I>(net: &mut Network, stream: I, cfg: &AdaptConfig) -> Result<AdaptReport>
where
    I: IntoIterator<Item = (Tensor, Vec<usize>)>,
{
    cfg.validate()?;
    let mode = forward_mode(net, cfg)?;
    let entropy_update = cfg.mode == AdaptMode::TmEnt;
    let lr = cfg.learning_rate();
    let affine_start = affine_summary(net);
    let mut state = AdamState::default();
    let mut records = Vec::new();
    let mut predictions = Vec::new();
    let (mut seen, mut correct, mut skipped) = (0usize, 0usize, 0usize);
    let mut energy = EnergyCounters::default();
    let mut rate_sums: Vec<FiringRateProbe> = Vec::new();

    for (batch, (x, labels)) in stream.into_iter().enumerate() {
        if labels.len() != x.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "batch {batch}: {} labels for {} images",
                labels.len(),
                x.shape()[0]
            )));
        }
        let mut tape = if entropy_update { Tape::new() } else { Tape::no_grad() };
        let grad = if entropy_update { GradScope::Affine } else { GradScope::None };
        let trace = net.run(&mut tape, &x, &ForwardOptions::new(mode).with_grad(grad))?;
        let logits = tape.value(trace.logits).clone();
        let preds = predict(&logits);
        let n = preds.len();

        let probes = trace.firing_rates(&tape);
        if rate_sums.is_empty() {
            rate_sums = probes
                .iter()
                .map(|p| FiringRateProbe {
                    layer: p.layer,
                    rates: vec![0.0; p.rates.len()],
                })
                .collect();
        }
        for (acc, p) in rate_sums.iter_mut().zip(&probes) {
            for (a, r) in acc.rates.iter_mut().zip(&p.rates) {
                *a += r * n as f64;
            }
        }
        energy.merge(&trace.counters);

        let mut updated = false;
        let entropy = if entropy_update {
            let h = tape.entropy(trace.logits)?;
            let value = tape.value(h).item();
            tape.backward(h)?;
            updated = affine_update(net, &tape, &trace, &mut state, lr)?;
            if !updated {
                skipped += 1;
                warn!("batch {batch}: non-finite entropy gradient, update skipped");
            }
            value
        } else {
            entropy_loss(&logits)?
        };

        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        seen += n;
        predictions.extend(preds);
        records.push(BatchRecord {
            batch,
            seen,
            running_accuracy: correct as f64 / seen as f64,
            entropy,
            layer_rates: probes.iter().map(FiringRateProbe::mean).collect(),
            updated,
        });
    }

    for p in &mut rate_sums {
        for r in &mut p.rates {
            *r /= seen.max(1) as f64;
        }
    }
    let final_accuracy = if seen > 0 { correct as f64 / seen as f64 } else { 0.0 };
    Ok(AdaptReport {
        config: *cfg,
        records,
        predictions,
        final_accuracy,
        final_error: 1.0 - final_accuracy,
        skipped_updates: skipped,
        channel_rates: rate_sums,
        affine_start,
        affine_end: affine_summary(net),
        energy,
    })
}

/// Ordered `(images, labels)` batches of `ds`.
pub fn stream_of(ds: &Dataset, batch_size: usize) -> Result<Vec<(Tensor, Vec<usize>)>> {
    ds.chunks(batch_size)
        .into_iter()
        .map(|idx| Ok((ds.batch(&idx)?, ds.batch_labels(&idx))))
        .collect()
}

/// Convenience wrapper streaming a dataset in stored order.
pub fn adapt_dataset(net: &mut Network, ds: &Dataset, cfg: &AdaptConfig) -> Result<AdaptReport> {
    adapt_stream(net, stream_of(ds, cfg.batch_size)?, cfg)
}

/// Per-channel firing rates of every spiking layer on one batch.
/// The model is not modified; TM statistics move only on a scratch copy.
pub fn firing_rate_probe(net: &Network, x: &Tensor, mode: ModelMode) -> Result<Vec<FiringRateProbe>> {
    let mut scratch = net.clone();
    let mut tape = Tape::no_grad();
    let trace = scratch.run(&mut tape, x, &ForwardOptions::new(mode))?;
    Ok(trace
        .spikes
        .iter()
        .map(|ls| FiringRateProbe {
            layer: ls.layer,
            rates: channel_rates(&tape, &ls.steps),
        })
        .collect())
}

/// Mean absolute per-channel difference between two rate vectors.
pub fn rate_gap(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub tm: TmConfig,
    pub accuracy: f64,
    /// Per-sample energy including the approximate backward pass, μJ.
    pub energy_uj: f64,
    /// Energy above the same stream without any normalization or modulation, μJ.
    pub overhead_uj: f64,
}

/// The five flag combinations, with `rho_lt1` standing in for "ρ₀ < 1".
pub fn ablation_combos(rho_lt1: f64, omega: f64) -> Vec<(String, TmConfig)> {
    let tm = |rho0, r, e| TmConfig { rho0, omega, r, e };
    vec![
        ("V1".into(), tm(rho_lt1, true, true)),
        ("V2".into(), tm(rho_lt1, true, false)),
        ("V3".into(), tm(1.0, true, false)),
        ("V4".into(), tm(rho_lt1, false, false)),
        ("V5".into(), tm(1.0, false, false)),
    ]
}

/// Runs each combination from the same deployed starting point over the same stream.
pub fn ablation_grid(
    deployed: &Network,
    ds: &Dataset,
    combos: &[(String, TmConfig)],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let k = EnergyConstants::default();
    combos
        .iter()
        .map(|(name, tm)| {
            let mut net = deployed.clone();
            let mode = if tm.e { AdaptMode::TmEnt } else { AdaptMode::TmNorm };
            let cfg = AdaptConfig {
                mode,
                tm: *tm,
                lr: None,
                batch_size,
                seed,
            };
            let rep = adapt_dataset(&mut net, ds, &cfg)?;
            let energy = total_energy_with_backward(&rep.energy, &k);
            let bare = total_energy(&rep.energy.without_normalization(), &k);
            Ok(AblationRow {
                name: name.clone(),
                tm: *tm,
                accuracy: rep.final_accuracy,
                energy_uj: energy,
                overhead_uj: energy - bare,
            })
        })
        .collect()
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::from("combo\trho0\tr\te\taccuracy\tenergy_uJ\toverhead_uJ\n");
    for r in rows {
        s += &format!(
            "{}\t{}\t{}\t{}\t{:.4}\t{:.6}\t{:.6}\n",
            r.name, r.tm.rho0, r.tm.r as u8, r.tm.e as u8, r.accuracy, r.energy_uj, r.overhead_uj
        );
    }
    s
}

/// Energy rows for the requested modes. The baseline is the MPBN model in
/// Eval mode with normalization cost removed.
pub fn energy_table(
    mpbn: &Network,
    deployed: &Network,
    ds: &Dataset,
    modes: &[AdaptMode],
    batch_size: usize,
) -> Result<Vec<EnergyRow>> {
    if modes.is_empty() {
        return Err(Error::InvalidConfig("energy table needs at least one mode".into()));
    }
    let k = EnergyConstants::default();
    let mut base_net = mpbn.clone();
    let base = adapt_dataset(&mut base_net, ds, &AdaptConfig { batch_size, ..AdaptConfig::new(AdaptMode::Source) })?;
    let baseline = total_energy(&base.energy.without_normalization(), &k);
    let mut rows = vec![EnergyRow::from_counters(
        "no normalization",
        &base.energy.without_normalization(),
        &k,
        baseline,
    )];
    for &mode in modes {
        let mut net = match mode {
            AdaptMode::Source | AdaptMode::DirectCalibration => mpbn.clone(),
            AdaptMode::TmNorm | AdaptMode::TmEnt => deployed.clone(),
        };
        let cfg = AdaptConfig {
            batch_size,
            ..AdaptConfig::new(mode)
        };
        let rep = adapt_dataset(&mut net, ds, &cfg)?;
        let name = match mode {
            AdaptMode::Source => "source",
            AdaptMode::TmNorm => "tm_norm",
            AdaptMode::TmEnt => "tm_ent",
            AdaptMode::DirectCalibration => "direct_calibration",
        };
        rows.push(EnergyRow::from_counters(name, &rep.energy, &k, baseline));
    }
    Ok(rows)
}
