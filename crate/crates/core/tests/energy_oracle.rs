//! Operation counters checked against a scalar shadow interpreter that tallies
//! every primitive as it executes.

mod common;

use common::uniform;
use tmsnn::energy::{total_energy, EnergyConstants, EnergyCounters};
use tmsnn::lif::{LifConfig, NormParams, TmConfig};
use tmsnn::network::{ForwardOptions, LayerSpec, Neuron};
use tmsnn::reparam::deploy;
use tmsnn::{ModelMode, Network, NetworkSpec, Tape, Tensor};

#[derive(Default, Debug, Clone, Copy, PartialEq)]
struct Tally {
    acs: u64,
    muls: u64,
}

impl Tally {
    fn add(&mut self, a: f64, b: f64) -> f64 {
        self.acs += 1;
        a + b
    }
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        self.acs += 1;
        a - b
    }
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        self.muls += 1;
        a * b
    }
    fn div(&mut self, a: f64, b: f64) -> f64 {
        self.muls += 1;
        a / b
    }
    fn sqrt(&mut self, a: f64) -> f64 {
        self.muls += 1;
        a.sqrt()
    }
}

/// `[N, C, H, W]` activations as nested plain vectors.
type Act = Vec<Vec<Vec<Vec<f64>>>>;

fn to_act(t: &Tensor) -> Act {
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    (0..n)
        .map(|i| {
            (0..c)
                .map(|ch| {
                    (0..h)
                        .map(|y| (0..w).map(|x| t.data()[((i * c + ch) * h + y) * w + x]).collect())
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn flat(a: &Act) -> Vec<f64> {
    a.iter().flatten().flatten().flatten().copied().collect()
}

struct Dense {
    taps: u64,
}

/// Cross-correlation with zero padding; `taps` counts every dense tap, padding included.
fn conv(x: &Act, w: &Tensor, stride: usize, pad: usize, d: &mut Dense) -> Act {
    let ws = w.shape();
    let (f, c, k) = (ws[0], ws[1], ws[2]);
    let (h, wd) = (x[0][0].len(), x[0][0][0].len());
    let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1);
    x.iter()
        .map(|img| {
            (0..f)
                .map(|o| {
                    (0..oh)
                        .map(|y| {
                            (0..ow)
                                .map(|xx| {
                                    let mut acc = 0.0;
                                    for ci in 0..c {
                                        for ky in 0..k {
                                            for kx in 0..k {
                                                d.taps += 1;
                                                let iy = (y * stride + ky) as isize - pad as isize;
                                                let ix = (xx * stride + kx) as isize - pad as isize;
                                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                                    acc += w.data()[((o * c + ci) * k + ky) * k + kx]
                                                        * img[ci][iy as usize][ix as usize];
                                                }
                                            }
                                        }
                                    }
                                    acc
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn mean_rate(steps: &[Vec<f64>]) -> f64 {
    let total: f64 = steps.iter().flatten().sum();
    total / (steps.len() * steps[0].len()) as f64
}

enum Norm<'a> {
    /// MPBN with stored statistics.
    Eval(&'a NormParams),
    /// Threshold modulation; statistics persist in the tuple.
    Tm(&'a NormParams, &'a mut (Vec<f64>, Vec<f64>), TmConfig),
}

/// One spiking layer over `T` steps; returns spike trains and the overhead tally.
fn lif_layer(hs_in: &[Act], lif: &LifConfig, eps: f64, norm: Norm, lif_acs: &mut u64) -> (Vec<Act>, Tally) {
    let mut t = Tally::default();
    let (n, c, h, w) = (hs_in[0].len(), hs_in[0][0].len(), hs_in[0][0][0].len(), hs_in[0][0][0][0].len());
    let mut u = vec![vec![vec![vec![0.0; w]; h]; c]; n];
    let mut out = Vec::new();
    let mut norm = norm;
    let mut rho = match &norm {
        Norm::Tm(_, _, cfg) => cfg.rho0,
        _ => 0.0,
    };
    for x in hs_in {
        let mut hh = x.clone();
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        hh[i][ch][y][xx] = x[i][ch][y][xx] + u[i][ch][y][xx] / lif.tau;
                        *lif_acs += 1;
                    }
                }
            }
        }
        let mut o = hh.clone();
        match &mut norm {
            Norm::Eval(p) => {
                for i in 0..n {
                    for ch in 0..c {
                        let std = (p.sigma2.data()[ch] + eps).sqrt();
                        for y in 0..h {
                            for xx in 0..w {
                                // folded into one multiply-add per neuron
                                t.acs += 1;
                                t.muls += 1;
                                let v = (hh[i][ch][y][xx] - p.mu.data()[ch]) / std * p.gamma.data()[ch]
                                    + p.beta.data()[ch];
                                let s = if v - lif.v_th > 0.0 { 1.0 } else { 0.0 };
                                o[i][ch][y][xx] = s;
                                u[i][ch][y][xx] = v * (1.0 - s);
                            }
                        }
                    }
                }
            }
            Norm::Tm(p, stats, cfg) => {
                if cfg.rho0 > 0.0 {
                    rho = t.mul(cfg.omega, rho);
                }
                let cm = (n * h * w) as f64;
                let mut thr = vec![0.0; c];
                let one_minus = if rho > 0.0 && rho < 1.0 { t.sub(1.0, rho) } else { 1.0 - rho };
                for ch in 0..c {
                    if rho > 0.0 {
                        let vals: Vec<f64> = (0..n)
                            .flat_map(|i| hh[i][ch].iter().flatten().copied().collect::<Vec<_>>())
                            .collect();
                        let mut s = 0.0;
                        for &v in &vals {
                            s = t.add(s, v);
                        }
                        let mean = t.div(s, cm);
                        let mut q = 0.0;
                        for &v in &vals {
                            let d = t.sub(v, mean);
                            let d2 = t.mul(d, d);
                            q = t.add(q, d2);
                        }
                        let var = t.div(q, cm);
                        if rho < 1.0 {
                            let a = t.mul(one_minus, stats.0[ch]);
                            let b = t.mul(rho, mean);
                            stats.0[ch] = t.add(a, b);
                            let a = t.mul(one_minus, stats.1[ch]);
                            let b = t.mul(rho, var);
                            stats.1[ch] = t.add(a, b);
                        } else {
                            stats.0[ch] = mean;
                            stats.1[ch] = var;
                        }
                    }
                    // frozen statistics: the deployed threshold is a constant, nothing to pay
                    let mut scratch = Tally::default();
                    let tt = if rho > 0.0 { &mut t } else { &mut scratch };
                    let ve = tt.add(stats.1[ch], eps);
                    let sd = tt.sqrt(ve);
                    let num = tt.sub(lif.v_th, p.beta.data()[ch]);
                    let prod = tt.mul(num, sd);
                    let q = tt.div(prod, p.gamma.data()[ch]);
                    thr[ch] = tt.add(q, stats.0[ch]);
                }
                if cfg.r {
                    // γ/√(σ̂² + ε) once per channel
                    t.muls += c as u64;
                }
                for i in 0..n {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let v = hh[i][ch][y][xx];
                                let s = if v - thr[ch] > 0.0 { 1.0 } else { 0.0 };
                                o[i][ch][y][xx] = s;
                                u[i][ch][y][xx] = if s == 1.0 {
                                    0.0
                                } else if cfg.r {
                                    // subtract μ̂, scale, add β; the value uses the library's operation order
                                    t.acs += 2;
                                    t.muls += 1;
                                    (v - stats.0[ch]) / (stats.1[ch] + eps).sqrt() * p.gamma.data()[ch]
                                        + p.beta.data()[ch]
                                } else {
                                    v
                                };
                            }
                        }
                    }
                }
            }
        }
        out.push(o);
    }
    (out, t)
}

struct Shadow {
    spikes: Vec<Vec<Vec<f64>>>,
    logits: Vec<f64>,
    macs_conv1: u64,
    sops_conv: f64,
    sops_fc: f64,
    acs_lif: Vec<u64>,
    overhead: Vec<Tally>,
}

/// conv(spiking) → conv(spiking) → flatten → linear, simulated scalar by scalar.
fn shadow_run(net: &Network, x: &Tensor, tm: Option<TmConfig>) -> Shadow {
    let spec = net.spec().clone();
    let t_steps = spec.time_steps;
    let n = x.shape()[0];
    let LayerSpec::Conv { stride: s1, padding: p1, .. } = spec.layers[0] else { panic!() };
    let LayerSpec::Conv { stride: s2, padding: p2, .. } = spec.layers[1] else { panic!() };
    let w1 = net.weights()[0].clone().unwrap();
    let w2 = net.weights()[1].clone().unwrap();
    let w3 = net.weights()[3].clone().unwrap();
    let norm_at = |l: usize| {
        let p = net.neurons()[l].as_ref().unwrap().norm().clone();
        let st = (p.mu.data().to_vec(), p.sigma2.data().to_vec());
        (p, st)
    };
    let (p0, mut st0) = norm_at(0);
    let (p1n, mut st1) = norm_at(1);

    let img = to_act(x);
    let mut d1 = Dense { taps: 0 };
    let mut macs_conv1 = 0;
    let mut h1 = Vec::new();
    for _ in 0..t_steps {
        // analog input: the encoder runs (and is charged) every step
        d1.taps = 0;
        h1.push(conv(&img, &w1, s1, p1, &mut d1));
        macs_conv1 += d1.taps;
    }
    let mut acs_lif = vec![0, 0];
    let mut overhead = Vec::new();
    let mode0 = match tm {
        None => Norm::Eval(&p0),
        Some(cfg) => Norm::Tm(&p0, &mut st0, cfg),
    };
    let (o1, t1) = lif_layer(&h1, &spec.lif, spec.eps, mode0, &mut acs_lif[0]);
    overhead.push(t1);

    let fr1 = mean_rate(&o1.iter().map(flat).collect::<Vec<_>>());
    let mut d2 = Dense { taps: 0 };
    let h2: Vec<Act> = o1.iter().map(|o| conv(o, &w2, s2, p2, &mut d2)).collect();
    let macs2_per_sample = d2.taps / (t_steps * n) as u64;
    let sops_conv = fr1 * t_steps as f64 * macs2_per_sample as f64 * n as f64;

    let mode1 = match tm {
        None => Norm::Eval(&p1n),
        Some(cfg) => Norm::Tm(&p1n, &mut st1, cfg),
    };
    let (o2, t2) = lif_layer(&h2, &spec.lif, spec.eps, mode1, &mut acs_lif[1]);
    overhead.push(t2);

    let feats: Vec<Vec<Vec<f64>>> = o2
        .iter()
        .map(|o| o.iter().map(|img| img.iter().flatten().flatten().copied().collect()).collect())
        .collect();
    let fr2 = mean_rate(&o2.iter().map(flat).collect::<Vec<_>>());
    let (k, d) = (w3.shape()[0], w3.shape()[1]);
    let mut fc_taps = 0u64;
    let mut logits = vec![0.0; n * k];
    for step in &feats {
        for (i, f) in step.iter().enumerate() {
            for j in 0..k {
                let mut acc = 0.0;
                for q in 0..d {
                    fc_taps += 1;
                    acc += w3.data()[j * d + q] * f[q];
                }
                logits[i * k + j] += acc / t_steps as f64;
            }
        }
    }
    let sops_fc = fr2 * t_steps as f64 * (fc_taps / (t_steps * n) as u64) as f64 * n as f64;
    Shadow {
        spikes: vec![o1.iter().map(flat).collect(), o2.iter().map(flat).collect()],
        logits,
        macs_conv1,
        sops_conv,
        sops_fc,
        acs_lif,
        overhead,
    }
}

fn small_net(time_steps: usize) -> Network {
    let spec = NetworkSpec {
        input: [1, 6, 6],
        layers: vec![
            LayerSpec::Conv { in_channels: 1, out_channels: 3, kernel: 3, stride: 1, padding: 1, spiking: true },
            LayerSpec::Conv { in_channels: 3, out_channels: 4, kernel: 3, stride: 2, padding: 1, spiking: true },
            LayerSpec::Flatten,
            LayerSpec::Linear { in_features: 36, out_features: 3, spiking: false },
        ],
        time_steps,
        num_classes: 3,
        lif: LifConfig::default(),
        eps: 1e-5,
        bn_momentum: 0.1,
    };
    let mut net = Network::new(spec, 8).unwrap();
    for (l, n) in net.neurons_mut().iter_mut().enumerate() {
        if let Some(Neuron::Mpbn(p)) = n {
            let c = p.channels();
            p.gamma = uniform(&[c], 0.7, 1.3, 40 + l as u64);
            p.beta = uniform(&[c], 0.3, 0.7, 50 + l as u64);
            p.mu = uniform(&[c], -0.2, 0.2, 60 + l as u64);
            p.sigma2 = uniform(&[c], 0.5, 1.5, 70 + l as u64);
        }
    }
    net
}

fn library_run(net: &mut Network, x: &Tensor, mode: ModelMode) -> (Vec<Vec<Vec<f64>>>, Vec<f64>, EnergyCounters) {
    let mut tape = Tape::no_grad();
    let tr = net.run(&mut tape, x, &ForwardOptions::new(mode)).unwrap();
    let spikes = tr
        .spikes
        .iter()
        .map(|l| l.steps.iter().map(|&s| tape.value(s).data().to_vec()).collect())
        .collect();
    (spikes, tape.value(tr.logits).data().to_vec(), tr.counters)
}

fn assert_matches(shadow: &Shadow, spikes: &[Vec<Vec<f64>>], logits: &[f64], c: &EnergyCounters) {
    assert_eq!(&shadow.spikes, spikes, "spike trains differ");
    for (a, b) in shadow.logits.iter().zip(logits) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(spikes.iter().flatten().flatten().any(|&s| s == 1.0), "test net never fires");
    assert_eq!(c.macs_conv1, shadow.macs_conv1);
    assert_eq!(c.sops_conv.len(), 1);
    assert!((c.sops_conv[0].sops - shadow.sops_conv).abs() < 1e-9);
    assert_eq!(c.sops_fc.len(), 1);
    assert!((c.sops_fc[0].sops - shadow.sops_fc).abs() < 1e-9);
    assert_eq!(c.acs_lif.iter().map(|m| m.acs).collect::<Vec<_>>(), shadow.acs_lif);
    let lib: Vec<Tally> = c.tm.iter().map(|m| Tally { acs: m.acs, muls: m.muls }).collect();
    assert_eq!(lib, shadow.overhead);
    assert_eq!((c.acs_pool, c.muls_pool), (0, 0));
}

#[test]
fn eval_mode_counts_match_shadow() {
    let mut net = small_net(3);
    let x = uniform(&[4, 1, 6, 6], 0.0, 2.0, 80);
    let shadow = shadow_run(&net, &x, None);
    let (spikes, logits, c) = library_run(&mut net, &x, ModelMode::Eval);
    assert_matches(&shadow, &spikes, &logits, &c);
}

#[test]
fn threshold_modulation_counts_match_shadow() {
    for cfg in [
        TmConfig { rho0: 1.0, omega: 0.94, r: false, e: false },
        TmConfig { rho0: 0.9, omega: 0.94, r: true, e: false },
        TmConfig { rho0: 1.0, omega: 1.0, r: false, e: false },
        TmConfig::frozen(),
    ] {
        let mut net = deploy(&small_net(3), cfg).unwrap();
        let x = uniform(&[4, 1, 6, 6], 0.0, 2.0, 81);
        let shadow = shadow_run(&net, &x, Some(cfg));
        let (spikes, logits, c) = library_run(&mut net, &x, ModelMode::DeployedTm);
        assert_matches(&shadow, &spikes, &logits, &c);
    }
}

#[test]
fn silent_network_costs_only_encoder_and_neurons() {
    let mut net = Network::new(small_net(4).spec().clone(), 3).unwrap();
    let x = Tensor::zeros(&[2, 1, 6, 6]);
    let (_, _, c) = library_run(&mut net, &x, ModelMode::Eval);
    assert_eq!(c.sops_conv[0].sops, 0.0);
    assert_eq!(c.sops_fc[0].sops, 0.0);
    assert_eq!(c.macs_conv1, 3 * 9 * 36 * 2 * 4);
}

#[test]
fn ten_neurons_four_steps_cost_forty_acs() {
    let spec = NetworkSpec {
        input: [1, 1, 4],
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Linear { in_features: 4, out_features: 10, spiking: true },
            LayerSpec::Linear { in_features: 10, out_features: 2, spiking: false },
        ],
        time_steps: 4,
        num_classes: 2,
        lif: LifConfig::default(),
        eps: 1e-5,
        bn_momentum: 0.1,
    };
    let mut net = Network::new(spec, 1).unwrap();
    let (_, _, c) = library_run(&mut net, &uniform(&[1, 1, 1, 4], 0.0, 1.0, 2), ModelMode::Eval);
    assert_eq!(c.acs_lif.len(), 1);
    assert_eq!(c.acs_lif[0].acs, 40);
}

#[test]
fn energy_combines_counters_with_unit_costs() {
    let mut net = small_net(3);
    let x = uniform(&[4, 1, 6, 6], 0.0, 2.0, 82);
    let (_, _, c) = library_run(&mut net, &x, ModelMode::Eval);
    let k = EnergyConstants::default();
    let acs = c.tm.iter().map(|m| m.acs as f64).sum::<f64>()
        + c.sops_conv[0].sops
        + c.sops_fc[0].sops
        + c.acs_lif.iter().map(|m| m.acs as f64).sum::<f64>();
    let muls = c.tm.iter().map(|m| m.muls as f64).sum::<f64>();
    let want = (4.6 * c.macs_conv1 as f64 + 0.9 * acs + 3.7 * muls) / 4.0 * 1e-6;
    assert!((total_energy(&c, &k) - want).abs() < 1e-15);
}
