//! Layer graph unrolled over `T` time steps with a mean-over-time readout.
//!
//! The analog input is presented unchanged at every step, so layers ahead of
//! the first spiking layer are evaluated once and reused across steps. Their
//! operation counts are still charged for every step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::energy::{BackwardOps, EnergyCounters, ModuleOps, SynapticLayer};
use crate::error::{Error, Result};
use crate::lif::{self, Affine, BnStats, LifConfig, NormParams, SpikeFn, DEFAULT_EPS};
use crate::reparam::DeployedLayer;
use crate::tensor::{ConvGeometry, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        /// Followed by MPBN and a LIF neuron layer.
        spiking: bool,
    },
    AvgPool {
        size: usize,
    },
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
        spiking: bool,
    },
}

impl LayerSpec {
    pub fn is_spiking(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { spiking: true, .. } | LayerSpec::Linear { spiking: true, .. }
        )
    }

    fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => Some(vec![out_features, in_features]),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// `[C, H, W]` of one input image.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub time_steps: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub lif: LifConfig,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn default_bn_momentum() -> f64 {
    0.1
}

impl NetworkSpec {
    /// conv(3→8, 3×3) → conv(8→16, 3×3, stride 2) → conv(16→16, 3×3), each with
    /// MPBN + LIF, then flatten and a linear readout; `T = 4`.
    pub fn reference(num_classes: usize, image_size: usize) -> Self {
        let conv = |i, o, s| LayerSpec::Conv {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: s,
            padding: 1,
            spiking: true,
        };
        let reduced = image_size.div_ceil(2);
        Self {
            input: [3, image_size, image_size],
            layers: vec![
                conv(3, 8, 1),
                conv(8, 16, 2),
                conv(16, 16, 1),
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 16 * reduced * reduced,
                    out_features: num_classes,
                    spiking: false,
                },
            ],
            time_steps: 4,
            num_classes,
            lif: LifConfig::default(),
            eps: DEFAULT_EPS,
            bn_momentum: 0.1,
        }
    }

    /// Infers per-layer output shapes (without the batch dim), validating the graph.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.time_steps == 0 {
            return Err(Error::InvalidConfig("time_steps must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be at least 2".into()));
        }
        self.lif.validate()?;
        let mut cur: Vec<usize> = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if cur.len() != 3 {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: conv needs a [C,H,W] input, got {cur:?}"
                        )));
                    }
                    let g = ConvGeometry::new(
                        &[1, cur[0], cur[1], cur[2]],
                        &[out_channels, in_channels, kernel, kernel],
                        stride,
                        padding,
                    )
                    .map_err(|e| Error::ShapeMismatch(format!("layer {i}: {e}")))?;
                    vec![g.f, g.oh, g.ow]
                }
                LayerSpec::AvgPool { size } => {
                    if cur.len() != 3 || size == 0 || cur[1] < size || cur[2] < size {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: cannot pool {cur:?} by {size}"
                        )));
                    }
                    vec![cur[0], cur[1] / size, cur[2] / size]
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
                LayerSpec::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    if cur != [in_features] {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: linear expects [{in_features}], got {cur:?}"
                        )));
                    }
                    vec![out_features]
                }
            };
            out.push(cur.clone());
        }
        match self.layers.last() {
            Some(LayerSpec::Linear {
                out_features,
                spiking: false,
                ..
            }) if *out_features == self.num_classes => {}
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "last layer must be a non-spiking linear readout with {} outputs",
                    self.num_classes
                )))
            }
        }
        let readouts = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Linear { spiking: false, .. }))
            .count();
        if readouts != 1 {
            return Err(Error::InvalidConfig(format!(
                "expected exactly one readout layer, found {readouts}"
            )));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelMode {
    /// MPBN with batch statistics; running statistics updated.
    Train,
    /// MPBN with stored running statistics.
    Eval,
    /// Re-parameterized thresholds with threshold modulation.
    DeployedTm,
    /// MPBN with statistics recomputed from every test batch.
    DirectCalibration,
}

/// Which parameters become gradient-receiving leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    None,
    All,
    Affine,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: ModelMode,
    pub spike: SpikeFn,
    pub grad: GradScope,
}

impl ForwardOptions {
    pub fn new(mode: ModelMode) -> Self {
        Self {
            mode,
            spike: SpikeFn::default(),
            grad: GradScope::None,
        }
    }

    pub fn with_grad(mut self, grad: GradScope) -> Self {
        self.grad = grad;
        self
    }

    pub fn with_spike(mut self, spike: SpikeFn) -> Self {
        self.spike = spike;
        self
    }
}

/// Normalization attached to a spiking layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Neuron {
    Mpbn(NormParams),
    Deployed(DeployedLayer),
}

impl Neuron {
    pub fn norm(&self) -> &NormParams {
        match self {
            Neuron::Mpbn(n) => n,
            Neuron::Deployed(d) => &d.norm,
        }
    }
}

/// Spike trains emitted by one LIF layer, one tape node per step.
#[derive(Clone, Debug)]
pub struct LayerSpikes {
    pub layer: usize,
    pub steps: Vec<Var>,
}

/// Per-channel mean firing rate of one LIF layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiringRateProbe {
    pub layer: usize,
    pub rates: Vec<f64>,
}

impl FiringRateProbe {
    pub fn mean(&self) -> f64 {
        if self.rates.is_empty() {
            0.0
        } else {
            self.rates.iter().sum::<f64>() / self.rates.len() as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Weight node per layer, where the layer has weights.
    pub weights: Vec<Option<Var>>,
    /// γ, β nodes per spiking layer.
    pub affines: Vec<Option<Affine>>,
    pub spikes: Vec<LayerSpikes>,
    pub counters: EnergyCounters,
}

impl ForwardTrace {
    /// Per-channel firing rates averaged over batch, space and time.
    pub fn firing_rates(&self, tape: &Tape) -> Vec<FiringRateProbe> {
        self.spikes
            .iter()
            .map(|ls| FiringRateProbe {
                layer: ls.layer,
                rates: channel_rates(tape, &ls.steps),
            })
            .collect()
    }
}

pub(crate) fn channel_rates(tape: &Tape, steps: &[Var]) -> Vec<f64> {
    let first = tape.value(steps[0]);
    let (c, sp) = (first.channels(), first.spatial());
    let per_channel = (first.len() / c * steps.len()) as f64;
    let mut acc = vec![0.0; c];
    for &s in steps {
        for (i, v) in tape.value(s).data().iter().enumerate() {
            acc[(i / sp) % c] += v;
        }
    }
    acc.into_iter().map(|a| a / per_channel).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<Vec<usize>>,
    weights: Vec<Option<Tensor>>,
    neurons: Vec<Option<Neuron>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Signal {
    /// Real-valued and identical at every step.
    Static,
    Analog,
    Spikes,
}

impl Network {
    /// He-normal weights, identity MPBN parameters.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(spec.layers.len());
        let mut neurons = Vec::with_capacity(spec.layers.len());
        for (layer, shape) in spec.layers.iter().zip(&shapes) {
            let w = layer.weight_shape().map(|ws| {
                let fan_in: usize = ws[1..].iter().product();
                let gain = if layer.is_spiking() { 2.0 } else { 1.0 };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("valid std");
                let n: usize = ws.iter().product();
                Tensor::from_parts(ws, (0..n).map(|_| normal.sample(&mut rng)).collect())
            });
            weights.push(w);
            neurons.push(layer.is_spiking().then(|| {
                let mut np = NormParams::identity(shape[0]);
                np.eps = spec.eps;
                Neuron::Mpbn(np)
            }));
        }
        Ok(Self {
            spec,
            shapes,
            weights,
            neurons,
        })
    }

    /// Rebuilds a network from stored parts, checking every shape.
    pub fn from_parts(
        spec: NetworkSpec,
        weights: Vec<Option<Tensor>>,
        neurons: Vec<Option<Neuron>>,
    ) -> Result<Self> {
        let shapes = spec.shapes()?;
        if weights.len() != spec.layers.len() || neurons.len() != spec.layers.len() {
            return Err(Error::Format("layer count does not match the spec".into()));
        }
        for (i, (layer, w)) in spec.layers.iter().zip(&weights).enumerate() {
            if layer.weight_shape().as_deref() != w.as_ref().map(|t| t.shape()) {
                return Err(Error::ShapeMismatch(format!("layer {i}: weight shape")));
            }
            let want = layer.is_spiking().then_some(shapes[i][0]);
            let have = neurons[i].as_ref().map(|n| n.norm().channels());
            if want != have {
                return Err(Error::ShapeMismatch(format!("layer {i}: neuron channels")));
            }
            if let Some(n) = &neurons[i] {
                n.norm().validate()?;
            }
        }
        Ok(Self {
            spec,
            shapes,
            weights,
            neurons,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Option<Tensor>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Option<Tensor>] {
        &mut self.weights
    }

    pub fn neurons(&self) -> &[Option<Neuron>] {
        &self.neurons
    }

    pub fn neurons_mut(&mut self) -> &mut [Option<Neuron>] {
        &mut self.neurons
    }

    /// Indices of layers followed by LIF neurons.
    pub fn spiking_layers(&self) -> Vec<usize> {
        (0..self.neurons.len())
            .filter(|&i| self.neurons[i].is_some())
            .collect()
    }

    pub fn is_deployed(&self) -> bool {
        self.neurons
            .iter()
            .flatten()
            .any(|n| matches!(n, Neuron::Deployed(_)))
    }

    pub fn output_shape(&self, layer: usize) -> &[usize] {
        &self.shapes[layer]
    }

    /// Logits for `x: [N, C, H, W]` without gradient tracking.
    pub fn forward(&mut self, x: &Tensor, mode: ModelMode) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let trace = self.run(&mut tape, x, &ForwardOptions::new(mode))?;
        Ok(tape.value(trace.logits).clone())
    }

    fn check_mode(&self, mode: ModelMode) -> Result<()> {
        let deployed = self.is_deployed();
        match mode {
            ModelMode::DeployedTm if !deployed => Err(Error::Mode(
                "DeployedTm needs a re-parameterized model; call deploy first".into(),
            )),
            ModelMode::Train | ModelMode::Eval | ModelMode::DirectCalibration if deployed => {
                Err(Error::Mode(format!(
                    "{mode:?} needs MPBN layers but the model is deployed"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Full forward pass on `tape`, returning the logits node and diagnostics.
    pub fn run(&mut self, tape: &mut Tape, x: &Tensor, opts: &ForwardOptions) -> Result<ForwardTrace> {
        self.check_mode(opts.mode)?;
        let xs = x.shape();
        if xs.len() != 4 || xs[1..] != self.spec.input {
            return Err(Error::ShapeMismatch(format!(
                "expected input [N, {}, {}, {}], got {xs:?}",
                self.spec.input[0], self.spec.input[1], self.spec.input[2]
            )));
        }
        let n = xs[0];
        let t_steps = self.spec.time_steps;
        let lif_cfg = self.spec.lif;
        let bn_momentum = self.spec.bn_momentum;
        let mut counters = EnergyCounters {
            samples: n,
            time_steps: t_steps,
            ..Default::default()
        };
        let train_weights = opts.grad == GradScope::All;
        let train_affine = matches!(opts.grad, GradScope::All | GradScope::Affine);

        let input = tape.constant(x.clone());
        let mut seq = vec![input];
        let mut signal = Signal::Static;
        let mut weight_vars = vec![None; self.spec.layers.len()];
        let mut affines = vec![None; self.spec.layers.len()];
        let mut spikes = Vec::new();
        let mut first_lif: Option<usize> = None;
        let mut backward = BackwardOps::default();

        for (li, layer) in self.spec.layers.clone().iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    stride, padding, ..
                } => {
                    let w = self.weights[li].clone().expect("conv weight");
                    let wv = if train_weights { tape.param(w) } else { tape.constant(w) };
                    weight_vars[li] = Some(wv);
                    let in_shape = tape.value(seq[0]).shape().to_vec();
                    let geom = ConvGeometry::new(&in_shape, tape.value(wv).shape(), stride, padding)?;
                    count_synapses(
                        tape,
                        &mut counters,
                        &mut backward,
                        &seq,
                        signal,
                        li,
                        geom.macs_per_sample(),
                        true,
                        first_lif.is_some() && opts.grad == GradScope::Affine,
                    );
                    seq = seq
                        .iter()
                        .map(|&s| tape.conv2d(s, wv, stride, padding))
                        .collect::<Result<_>>()?;
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    let w = self.weights[li].clone().expect("linear weight");
                    let wv = if train_weights { tape.param(w) } else { tape.constant(w) };
                    weight_vars[li] = Some(wv);
                    count_synapses(
                        tape,
                        &mut counters,
                        &mut backward,
                        &seq,
                        signal,
                        li,
                        (in_features * out_features) as u64,
                        false,
                        first_lif.is_some() && opts.grad == GradScope::Affine,
                    );
                    seq = seq
                        .iter()
                        .map(|&s| tape.linear(s, wv))
                        .collect::<Result<_>>()?;
                }
                LayerSpec::AvgPool { size } => {
                    let in_len = tape.value(seq[0]).len() as u64;
                    let out_len = in_len / (size * size) as u64;
                    let steps = t_steps as u64;
                    counters.acs_pool += out_len * (size * size) as u64 * steps;
                    counters.muls_pool += out_len * steps;
                    seq = seq
                        .iter()
                        .map(|&s| tape.avg_pool2d(s, size))
                        .collect::<Result<_>>()?;
                    if signal == Signal::Spikes {
                        signal = Signal::Analog;
                    }
                }
                LayerSpec::Flatten => {
                    let d: usize = self.shapes[li][0];
                    seq = seq
                        .iter()
                        .map(|&s| tape.reshape(s, &[n, d]))
                        .collect::<Result<_>>()?;
                }
            }

            if self.neurons[li].is_some() {
                if seq.len() == 1 {
                    seq = vec![seq[0]; t_steps];
                }
                first_lif.get_or_insert(li);
                let neuron = self.neurons[li].as_mut().expect("checked");
                let out = match (neuron, opts.mode) {
                    (Neuron::Mpbn(norm), mode) => {
                        let affine = Affine::register(tape, norm, train_affine);
                        affines[li] = Some(affine);
                        let stats = match mode {
                            ModelMode::Train => BnStats::Batch {
                                momentum: Some(bn_momentum),
                            },
                            ModelMode::DirectCalibration => BnStats::Batch { momentum: None },
                            _ => BnStats::Running,
                        };
                        let out =
                            lif::mpbn_layer_forward(tape, &seq, &lif_cfg, norm, affine, stats, opts.spike)?;
                        counters.tm.push(mpbn_ops(li, tape.value(seq[0]), t_steps, mode));
                        out
                    }
                    (Neuron::Deployed(dl), _) => {
                        let affine = Affine::register(tape, &dl.norm, train_affine);
                        affines[li] = Some(affine);
                        let out = lif::tm_layer_forward(
                            tape,
                            &seq,
                            &dl.lif,
                            &dl.norm,
                            &mut dl.tm,
                            &dl.tm_cfg,
                            affine,
                            opts.spike,
                        )?;
                        let fired: f64 = out.iter().map(|&o| tape.value(o).sum()).sum();
                        counters.tm.push(tm_ops(
                            li,
                            tape.value(seq[0]),
                            t_steps,
                            &dl.tm_cfg,
                            fired,
                        ));
                        out
                    }
                };
                let h = tape.value(seq[0]);
                let neurons_per_step = h.len() as u64;
                counters.acs_lif.push(ModuleOps {
                    layer: li,
                    acs: neurons_per_step * t_steps as u64,
                    muls: 0,
                });
                if opts.grad == GradScope::Affine {
                    let (c, m) = (h.channels() as u64, (h.len() / h.channels()) as u64);
                    let cmt = c * m * t_steps as u64;
                    backward.acs += 4 * cmt;
                    backward.muls += 5 * cmt;
                }
                spikes.push(LayerSpikes {
                    layer: li,
                    steps: out.clone(),
                });
                seq = out;
                signal = Signal::Spikes;
            } else if signal == Signal::Static && seq.len() == 1 {
                // still time-invariant
            } else if signal == Signal::Static {
                signal = Signal::Analog;
            }
        }

        if seq.len() == 1 {
            seq = vec![seq[0]; t_steps];
        }
        let logits = tape.mean_of(&seq)?;
        if opts.grad == GradScope::Affine {
            backward.muls += 3 * (n * self.spec.num_classes) as u64;
            counters.backward = Some(backward);
        }
        Ok(ForwardTrace {
            logits,
            weights: weight_vars,
            affines,
            spikes,
            counters,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn count_synapses(
    tape: &Tape,
    counters: &mut EnergyCounters,
    backward: &mut BackwardOps,
    seq: &[Var],
    signal: Signal,
    layer: usize,
    macs_per_sample: u64,
    is_conv: bool,
    on_grad_path: bool,
) {
    let n = counters.samples as u64;
    let t = counters.time_steps;
    if signal == Signal::Spikes {
        let total: f64 = seq.iter().map(|&s| tape.value(s).sum()).sum();
        let elems = (tape.value(seq[0]).len() * seq.len()) as f64;
        let fr = total / elems;
        let entry = SynapticLayer {
            layer,
            macs_per_sample,
            fr,
            sops: crate::energy::sops(fr, t, macs_per_sample) * n as f64,
        };
        if is_conv {
            counters.sops_conv.push(entry);
        } else {
            counters.sops_fc.push(entry);
        }
    } else {
        counters.macs_conv1 += macs_per_sample * n * t as u64;
    }
    if on_grad_path {
        backward.macs += macs_per_sample * n * t as u64;
    }
}

/// MPBN overhead per layer. Running statistics fold into one multiply-add per
/// neuron; batch statistics add mean/variance reductions and a full normalization.
fn mpbn_ops(layer: usize, h: &Tensor, t: usize, mode: ModelMode) -> ModuleOps {
    let c = h.channels() as u64;
    let cm = h.len() as u64;
    let t = t as u64;
    match mode {
        ModelMode::Eval => ModuleOps {
            layer,
            acs: cm * t,
            muls: cm * t,
        },
        _ => {
            let (sa, sm) = stats_ops(c, cm);
            ModuleOps {
                layer,
                // statistics, ε add, then sub and add per neuron
                acs: (sa + c + 2 * cm) * t,
                // statistics, sqrt and γ/σ per channel, one scale per neuron
                muls: (sm + 2 * c + cm) * t,
            }
        }
    }
}

/// ACs and MULs of a per-channel mean and biased variance over `cm` elements.
fn stats_ops(c: u64, cm: u64) -> (u64, u64) {
    // mean: accumulate + divide; variance: subtract, square, accumulate, divide
    (3 * cm, cm + 2 * c)
}

/// Threshold-modulation overhead of one layer for one forward pass.
fn tm_ops(layer: usize, h: &Tensor, t: usize, cfg: &lif::TmConfig, fired: f64) -> ModuleOps {
    let c = h.channels() as u64;
    let cm = h.len() as u64;
    let mut ops = ModuleOps {
        layer,
        acs: 0,
        muls: 0,
    };
    let mut rho = cfg.rho0;
    for step in 0..t {
        if cfg.rho0 > 0.0 {
            ops.muls += 1;
        }
        rho *= cfg.omega;
        if rho > 0.0 {
            let (sa, sm) = stats_ops(c, cm);
            ops.acs += sa;
            ops.muls += sm;
            if rho < 1.0 {
                // (1 - ρ) once, then two products and a sum per statistic
                ops.acs += 1 + 2 * c;
                ops.muls += 4 * c;
            }
            // ε add, V_th - β, + μ̂ ; sqrt, ×, ÷
            ops.acs += 3 * c;
            ops.muls += 3 * c;
        } else if cfg.e && step == 0 {
            ops.acs += 3 * c;
            ops.muls += 3 * c;
        }
        if cfg.r {
            ops.muls += c;
        }
    }
    if cfg.r {
        let silent = (cm * t as u64).saturating_sub(fired.round() as u64);
        ops.acs += 2 * silent;
        ops.muls += silent;
    }
    ops
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape().get(1).copied().unwrap_or(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.shape().get(1).copied().unwrap_or(1);
    let data = crate::autodiff::log_softmax_rows(logits.data(), k)
        .into_iter()
        .map(f64::exp)
        .collect();
    Tensor::from_parts(logits.shape().to_vec(), data)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}
