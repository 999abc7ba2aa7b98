//! Operation counting and theoretical energy estimation.
//!
//! Layers fed by analog values cost multiply-accumulates (MACs). Layers fed by
//! binary spikes cost synaptic operations, one accumulate (AC) per delivered
//! spike, estimated as `fr × T × MACs`. Every LIF neuron costs one AC per
//! step. Normalization and threshold-modulation overhead is tallied as
//! separate ACs and MULs; division and square root count as one MUL each.
//!
//! All tallies are totals over the batch a forward pass processed;
//! [`EnergyCounters::per_sample`] and [`total_energy`] divide by the sample count.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Energy per primitive operation, in picojoules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyConstants {
    pub e_ac: f64,
    pub e_mul: f64,
    pub e_mac: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self {
            e_ac: 0.9,
            e_mul: 3.7,
            e_mac: 4.6,
        }
    }
}

impl EnergyConstants {
    /// A synaptic operation is an accumulate.
    pub fn e_sop(&self) -> f64 {
        self.e_ac
    }
}

/// Synaptic operations `fr × T × MACs` of one spike-input layer.
pub fn sops(fr_prev: f64, time_steps: usize, macs_layer: u64) -> f64 {
    fr_prev * time_steps as f64 * macs_layer as f64
}

/// Rounded for reports.
pub fn sops_count(fr_prev: f64, time_steps: usize, macs_layer: u64) -> u64 {
    sops(fr_prev, time_steps, macs_layer).round() as u64
}

/// Tally of one layer whose input is a binary spike train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynapticLayer {
    pub layer: usize,
    /// Dense MACs of the layer for one sample and one step.
    pub macs_per_sample: u64,
    /// Mean firing rate of the layer's spike input over batch, elements and steps.
    pub fr: f64,
    /// `fr × T × MACs` summed over the batch.
    pub sops: f64,
}

/// Overhead of one normalization or threshold-modulation module.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModuleOps {
    pub layer: usize,
    pub acs: u64,
    pub muls: u64,
}

/// Approximate cost of the entropy-gradient backward pass (γ, β path only).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BackwardOps {
    pub macs: u64,
    pub acs: u64,
    pub muls: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyCounters {
    pub samples: usize,
    pub time_steps: usize,
    /// MACs of layers with analog (non-spike) input; the encoder convolution in practice.
    pub macs_conv1: u64,
    /// Spike-input convolutions.
    pub sops_conv: Vec<SynapticLayer>,
    /// Spike-input fully connected layers.
    pub sops_fc: Vec<SynapticLayer>,
    /// Accumulates of average pooling.
    pub acs_pool: u64,
    pub muls_pool: u64,
    /// Membrane updates: one AC per neuron per step, per LIF layer.
    pub acs_lif: Vec<ModuleOps>,
    /// Batch-norm or threshold-modulation overhead per LIF layer.
    pub tm: Vec<ModuleOps>,
    /// Entropy-minimization backward pass; approximate.
    pub backward: Option<BackwardOps>,
}

impl EnergyCounters {
    pub fn acs_tm(&self) -> u64 {
        self.tm.iter().map(|m| m.acs).sum()
    }

    pub fn muls_tm(&self) -> u64 {
        self.tm.iter().map(|m| m.muls).sum()
    }

    pub fn sops_conv_total(&self) -> f64 {
        self.sops_conv.iter().map(|l| l.sops).sum()
    }

    pub fn acs_fc(&self) -> f64 {
        self.sops_fc.iter().map(|l| l.sops).sum()
    }

    pub fn acs_lif_total(&self) -> u64 {
        self.acs_lif.iter().map(|m| m.acs).sum()
    }

    /// All forward accumulates: TM overhead, spike-driven synapses, FC, LIF and pooling.
    pub fn total_acs(&self) -> f64 {
        self.acs_tm() as f64
            + self.sops_conv_total()
            + self.acs_fc()
            + self.acs_lif_total() as f64
            + self.acs_pool as f64
    }

    pub fn total_muls(&self) -> f64 {
        (self.muls_tm() + self.muls_pool) as f64
    }

    /// Per-sample `(MACs, ACs, MULs)` of the forward pass.
    pub fn per_sample(&self) -> (f64, f64, f64) {
        let n = self.samples.max(1) as f64;
        (
            self.macs_conv1 as f64 / n,
            self.total_acs() / n,
            self.total_muls() / n,
        )
    }

    /// Folds another pass into this one; counts add, firing rates become sample-weighted means.
    pub fn merge(&mut self, other: &EnergyCounters) {
        if self.samples == 0 && self.sops_conv.is_empty() && self.acs_lif.is_empty() {
            *self = other.clone();
            return;
        }
        let (a, b) = (self.samples as f64, other.samples as f64);
        let wavg = |x: f64, y: f64| if a + b > 0.0 { (x * a + y * b) / (a + b) } else { 0.0 };
        self.macs_conv1 += other.macs_conv1;
        for (s, o) in self.sops_conv.iter_mut().zip(&other.sops_conv) {
            s.fr = wavg(s.fr, o.fr);
            s.sops += o.sops;
        }
        for (s, o) in self.sops_fc.iter_mut().zip(&other.sops_fc) {
            s.fr = wavg(s.fr, o.fr);
            s.sops += o.sops;
        }
        self.acs_pool += other.acs_pool;
        self.muls_pool += other.muls_pool;
        for (s, o) in self.acs_lif.iter_mut().zip(&other.acs_lif) {
            s.acs += o.acs;
            s.muls += o.muls;
        }
        for (s, o) in self.tm.iter_mut().zip(&other.tm) {
            s.acs += o.acs;
            s.muls += o.muls;
        }
        self.backward = match (self.backward.take(), &other.backward) {
            (Some(mut s), Some(o)) => {
                s.macs += o.macs;
                s.acs += o.acs;
                s.muls += o.muls;
                Some(s)
            }
            (s, None) => s,
            (None, Some(o)) => Some(o.clone()),
        };
        self.samples += other.samples;
    }

    /// Same counters with the normalization/TM overhead removed.
    pub fn without_normalization(&self) -> Self {
        let mut c = self.clone();
        for m in &mut c.tm {
            m.acs = 0;
            m.muls = 0;
        }
        c.backward = None;
        c
    }
}

/// Forward energy per sample in microjoules:
/// `E_mac·MACs + E_ac·(ACs_TM + SOPs_conv + ACs_FC + ACs_LIF) + E_mul·MULs_TM`.
pub fn total_energy(counters: &EnergyCounters, constants: &EnergyConstants) -> f64 {
    let (macs, acs, muls) = counters.per_sample();
    energy_uj(macs, acs, muls, constants)
}

/// Forward energy plus the approximate backward cost, per sample, in microjoules.
pub fn total_energy_with_backward(counters: &EnergyCounters, constants: &EnergyConstants) -> f64 {
    let fwd = total_energy(counters, constants);
    match &counters.backward {
        None => fwd,
        Some(b) => {
            let n = counters.samples.max(1) as f64;
            fwd + energy_uj(b.macs as f64 / n, b.acs as f64 / n, b.muls as f64 / n, constants)
        }
    }
}

/// `E_mac·macs + E_ac·acs + E_mul·muls`, converted from pJ to μJ.
pub fn energy_uj(macs: f64, acs: f64, muls: f64, c: &EnergyConstants) -> f64 {
    (c.e_mac * macs + c.e_ac * acs + c.e_mul * muls) * 1e-6
}

/// Per-sample operation counts of a spiking VGG-16m on CIFAR-10-C gaussian noise (T = 4).
#[derive(Clone, Copy, Debug)]
pub struct PublishedRow {
    pub method: &'static str,
    pub macs: f64,
    pub acs: f64,
    pub muls: f64,
    pub energy_uj: f64,
}

pub const PUBLISHED_TABLE: [PublishedRow; 5] = [
    PublishedRow { method: "w/o MPBN", macs: 1.84e6, acs: 177.33e6, muls: 0.0, energy_uj: 168.04 },
    PublishedRow { method: "MPBN (pure inference)", macs: 1.84e6, acs: 175.99e6, muls: 2.21e6, energy_uj: 175.01 },
    PublishedRow { method: "MPBN (direct calibration)", macs: 1.84e6, acs: 186.21e6, muls: 3.35e6, energy_uj: 188.43 },
    PublishedRow { method: "TM (pure inference)", macs: 1.84e6, acs: 203.27e6, muls: 0.03e6, energy_uj: 191.51 },
    PublishedRow { method: "TM-NORM", macs: 1.84e6, acs: 182.11e6, muls: 0.26e6, energy_uj: 173.29 },
];

/// One row of an energy report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub mode: String,
    pub macs: f64,
    pub acs: f64,
    pub muls: f64,
    pub energy_uj: f64,
    /// Relative to the report baseline, in percent.
    pub percent_over_baseline: f64,
    pub approximate: bool,
}

impl EnergyRow {
    pub fn from_counters(mode: &str, c: &EnergyCounters, k: &EnergyConstants, baseline_uj: f64) -> Self {
        let (macs, acs, muls) = c.per_sample();
        let (macs, acs, muls, approximate) = match &c.backward {
            Some(b) => {
                let n = c.samples.max(1) as f64;
                (
                    macs + b.macs as f64 / n,
                    acs + b.acs as f64 / n,
                    muls + b.muls as f64 / n,
                    true,
                )
            }
            None => (macs, acs, muls, false),
        };
        let energy = energy_uj(macs, acs, muls, k);
        Self {
            mode: mode.to_string(),
            macs,
            acs,
            muls,
            energy_uj: energy,
            percent_over_baseline: percent_over(energy, baseline_uj),
            approximate,
        }
    }
}

pub fn percent_over(value: f64, baseline: f64) -> f64 {
    if baseline > 0.0 {
        (value / baseline - 1.0) * 100.0
    } else {
        0.0
    }
}

/// Renders rows as a tab-separated table with a header line.
pub fn render_table(rows: &[EnergyRow]) -> String {
    let mut out = String::from("mode\tMACs\tACs\tMULs\tenergy_uJ\tpercent_over_baseline\tapproximate\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{:.2}\t{:.2}\t{:.2}\t{:.4}\t{:+.2}\t{}",
            r.mode, r.macs, r.acs, r.muls, r.energy_uj, r.percent_over_baseline, r.approximate
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sops_examples() {
        assert_eq!(sops_count(0.0, 4, 12345), 0);
        assert_eq!(sops_count(1.0, 1, 777), 777);
        assert_eq!(sops_count(0.25, 4, 1000), 1000);
    }

    #[test]
    fn constants_match_45nm_figures() {
        let k = EnergyConstants::default();
        assert_eq!((k.e_ac, k.e_mul, k.e_mac), (0.9, 3.7, 4.6));
        assert_eq!(k.e_sop(), k.e_ac);
    }

    #[test]
    fn published_rows_reproduce() {
        let k = EnergyConstants::default();
        for row in PUBLISHED_TABLE {
            let e = energy_uj(row.macs, row.acs, row.muls, &k);
            assert!((e - row.energy_uj).abs() <= 0.05, "{}: {e} vs {}", row.method, row.energy_uj);
        }
    }

    #[test]
    fn zero_counters_cost_nothing() {
        let c = EnergyCounters {
            samples: 3,
            ..Default::default()
        };
        assert_eq!(total_energy(&c, &EnergyConstants::default()), 0.0);
    }

    #[test]
    fn energy_is_homogeneous() {
        let c = EnergyCounters {
            samples: 2,
            time_steps: 4,
            macs_conv1: 1000,
            sops_conv: vec![SynapticLayer { layer: 1, macs_per_sample: 50, fr: 0.2, sops: 80.0 }],
            sops_fc: vec![SynapticLayer { layer: 3, macs_per_sample: 10, fr: 0.5, sops: 40.0 }],
            acs_lif: vec![ModuleOps { layer: 0, acs: 64, muls: 0 }],
            tm: vec![ModuleOps { layer: 0, acs: 30, muls: 12 }],
            ..Default::default()
        };
        let mut d = c.clone();
        d.macs_conv1 *= 2;
        d.sops_conv[0].sops *= 2.0;
        d.sops_fc[0].sops *= 2.0;
        d.acs_lif[0].acs *= 2;
        d.tm[0].acs *= 2;
        d.tm[0].muls *= 2;
        let k = EnergyConstants::default();
        let (e1, e2) = (total_energy(&c, &k), total_energy(&d, &k));
        assert!((e2 - 2.0 * e1).abs() < 1e-15);
    }

    #[test]
    fn merge_adds_counts_and_weights_rates() {
        let a = EnergyCounters {
            samples: 1,
            time_steps: 4,
            macs_conv1: 10,
            sops_conv: vec![SynapticLayer { layer: 1, macs_per_sample: 5, fr: 0.1, sops: 2.0 }],
            ..Default::default()
        };
        let b = EnergyCounters {
            samples: 3,
            sops_conv: vec![SynapticLayer { layer: 1, macs_per_sample: 5, fr: 0.5, sops: 30.0 }],
            macs_conv1: 30,
            ..a.clone()
        };
        let mut m = EnergyCounters::default();
        m.merge(&a);
        m.merge(&b);
        assert_eq!(m.samples, 4);
        assert_eq!(m.macs_conv1, 40);
        assert!((m.sops_conv[0].fr - 0.4).abs() < 1e-15);
        assert_eq!(m.sops_conv[0].sops, 32.0);
    }
}
