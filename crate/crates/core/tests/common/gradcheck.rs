//! Finite-difference and hand-rolled oracles for the autodiff tape.

use super::{rng, uniform};
use rand::Rng;
use tmsnn::autodiff::surrogate_grad;
use tmsnn::lif::{self, LifConfig, LifLayerState, NormParams, SpikeFn, Threshold, TmConfig};
use tmsnn::network::{ForwardOptions, GradScope, LayerSpec, Neuron};
use tmsnn::reparam::deploy;
use tmsnn::{ModelMode, Network, NetworkSpec, Tape, Tensor, Var};

pub const H: f64 = 1e-4;

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Scalar probe `Σ out ⊙ R` with a fixed random `R`.
fn probe(tape: &mut Tape, out: Var) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(uniform(&shape, -1.0, 1.0, 99));
    let prod = tape.mul(out, r).unwrap();
    tape.sum(prod)
}

fn loss_at(inputs: &[Tensor], f: &Build) -> f64 {
    let mut tape = Tape::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let l = probe(&mut tape, out);
    tape.value(l).item()
}

/// Relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` over every input element.
pub fn grad_error(inputs: &[Tensor], f: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let l = probe(&mut tape, out);
    tape.backward(l).unwrap();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (i, t) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (loss_at(&plus, f) - loss_at(&minus, f)) / (2.0 * H);
            diff += (analytic[j] - numeric).powi(2);
            na += analytic[j].powi(2);
            nn += numeric.powi(2);
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-8 {
        // all gradients vanish: the check says nothing
        return f64::INFINITY;
    }
    diff.sqrt() / scale
}

fn x4(seed: u64) -> Tensor {
    uniform(&[2, 3, 4, 4], -1.0, 1.0, seed)
}

/// Relative finite-difference error of every differentiable tape op.
pub fn op_suite() -> Vec<(&'static str, f64)> {
    let a = uniform(&[2, 5], -1.0, 1.0, 1);
    let b = uniform(&[2, 5], 0.5, 2.0, 2);
    let x = x4(3);
    let c = uniform(&[3], 0.5, 2.0, 4);
    let w = uniform(&[2, 3, 3, 3], -0.5, 0.5, 11);
    let la = uniform(&[3, 6], -1.0, 1.0, 12);
    let lw = uniform(&[4, 6], -1.0, 1.0, 13);
    let z = uniform(&[4, 3], -2.0, 2.0, 17);
    let ab = vec![a.clone(), b.clone()];
    let xc = vec![x.clone(), c.clone()];
    let cases: Vec<(&'static str, Vec<Tensor>, Box<Build>)> = vec![
        ("add", ab.clone(), Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", ab.clone(), Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", ab.clone(), Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("div", ab.clone(), Box::new(|t, v| t.div(v[0], v[1]).unwrap())),
        ("scale", vec![a.clone()], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("add_scalar", vec![a.clone()], Box::new(|t, v| t.add_scalar(v[0], 0.3))),
        ("rsub_scalar", vec![a.clone()], Box::new(|t, v| t.rsub_scalar(2.0, v[0]))),
        ("sqrt", vec![b.clone()], Box::new(|t, v| t.sqrt(v[0]).unwrap())),
        ("logistic", vec![a.clone()], Box::new(|t, v| t.logistic(v[0], 4.0))),
        ("channel_add", xc.clone(), Box::new(|t, v| t.channel_add(v[0], v[1]).unwrap())),
        ("channel_sub", xc.clone(), Box::new(|t, v| t.channel_sub(v[0], v[1]).unwrap())),
        ("channel_mul", xc.clone(), Box::new(|t, v| t.channel_mul(v[0], v[1]).unwrap())),
        ("channel_div", xc.clone(), Box::new(|t, v| t.channel_div(v[0], v[1]).unwrap())),
        ("batch_stats mean", vec![x4(5)], Box::new(|t, v| t.batch_stats(v[0]).unwrap().0)),
        ("batch_stats var", vec![x4(6)], Box::new(|t, v| t.batch_stats(v[0]).unwrap().1)),
        (
            "normalize",
            vec![x4(7), uniform(&[3], 0.5, 1.5, 8), uniform(&[3], -0.5, 0.5, 9)],
            Box::new(|t, v| {
                let (m, s) = t.batch_stats(v[0]).unwrap();
                let affine = lif::Affine { gamma: v[1], beta: v[2] };
                lif::normalize(t, v[0], m, s, 1e-5, affine).unwrap()
            }),
        ),
        ("conv2d s1 p1", vec![x4(10), w.clone()], Box::new(|t, v| t.conv2d(v[0], v[1], 1, 1).unwrap())),
        ("conv2d s2 p0", vec![x4(10), w.clone()], Box::new(|t, v| t.conv2d(v[0], v[1], 2, 0).unwrap())),
        ("linear", vec![la, lw], Box::new(|t, v| t.linear(v[0], v[1]).unwrap())),
        ("avg_pool2d", vec![x4(14)], Box::new(|t, v| t.avg_pool2d(v[0], 2).unwrap())),
        ("reshape", vec![x4(14)], Box::new(|t, v| t.reshape(v[0], &[2, 48]).unwrap())),
        ("sum", vec![x4(14)], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![x4(14)], Box::new(|t, v| t.mean(v[0]))),
        (
            "mean_of",
            vec![uniform(&[2, 3], -1.0, 1.0, 15), uniform(&[2, 3], -1.0, 1.0, 16)],
            Box::new(|t, v| t.mean_of(&[v[0], v[1], v[0]]).unwrap()),
        ),
        ("cross_entropy", vec![z.clone()], Box::new(|t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap())),
        ("entropy", vec![z], Box::new(|t, v| t.entropy(v[0]).unwrap())),
    ];
    cases.into_iter().map(|(name, inputs, f)| (name, grad_error(&inputs, f.as_ref()))).collect()
}

/// One LIF neuron driven by `w·x_t`, hard reset, loss `Σ c_t·o_t`.
/// Returns (loss, dL/dw) from a hand-written backward sweep.
pub fn one_neuron_oracle(w: f64, xs: &[f64], cs: &[f64], tau: f64, v_th: f64, alpha: f64) -> (f64, f64) {
    let t_len = xs.len();
    let (mut h, mut o) = (vec![0.0; t_len], vec![0.0; t_len]);
    let mut u = 0.0;
    let mut loss = 0.0;
    for t in 0..t_len {
        h[t] = w * xs[t] + u / tau;
        o[t] = if h[t] - v_th > 0.0 { 1.0 } else { 0.0 };
        u = h[t] * (1.0 - o[t]);
        loss += cs[t] * o[t];
    }
    let mut d_w = 0.0;
    let mut d_u = 0.0; // dL/du_t, arriving from step t+1
    for t in (0..t_len).rev() {
        let d_o = cs[t] - d_u * h[t];
        let d_h = d_o * surrogate_grad(h[t] - v_th, alpha) + d_u * (1.0 - o[t]);
        d_w += d_h * xs[t];
        d_u = d_h / tau;
    }
    (loss, d_w)
}

/// Largest |tape − oracle| of dL/dw over random one-neuron sequences; also
/// reports whether every forward loss matched exactly.
pub fn bptt_max_error(cases: usize) -> (f64, bool) {
    let cfg = LifConfig { tau: 2.0, v_th: 1.0, v_reset: 0.0 };
    let mut r = rng(21);
    let (mut worst, mut exact) = (0.0f64, true);
    for case in 0..cases {
        let t_len = 2 + case % 6;
        let w: f64 = r.gen_range(0.2..1.6);
        let xs: Vec<f64> = (0..t_len).map(|_| r.gen_range(0.0..1.5)).collect();
        let cs: Vec<f64> = (0..t_len).map(|_| r.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let wv = tape.param(Tensor::from_vec(vec![w]).unwrap());
        let mut state = LifLayerState::new();
        let mut loss = None;
        for t in 0..t_len {
            let x = tape.constant(Tensor::from_vec(vec![xs[t]]).unwrap());
            let drive = tape.mul(wv, x).unwrap();
            let h = lif::lif_charge(&mut tape, drive, &state, &cfg).unwrap();
            let o = lif::lif_fire_reset(
                &mut tape,
                h,
                Threshold::Scalar(cfg.v_th),
                &mut state,
                &cfg,
                SpikeFn::Heaviside { alpha: 4.0 },
                false,
                None,
            )
            .unwrap();
            let term = tape.scale(o, cs[t]);
            loss = Some(match loss {
                None => term,
                Some(acc) => tape.add(acc, term).unwrap(),
            });
        }
        let loss = tape.sum(loss.unwrap());
        tape.backward(loss).unwrap();
        let (want_loss, want_dw) = one_neuron_oracle(w, &xs, &cs, cfg.tau, cfg.v_th, 4.0);
        exact &= tape.value(loss).item() == want_loss;
        worst = worst.max((tape.grad(wv).unwrap().item() - want_dw).abs());
    }
    (worst, exact)
}

/// conv(1→4) + LIF, flatten, linear readout, deployed with `tm`.
pub fn toy_deployed(time_steps: usize, tm: TmConfig) -> Network {
    let spec = NetworkSpec {
        input: [1, 6, 6],
        layers: vec![
            LayerSpec::Conv { in_channels: 1, out_channels: 4, kernel: 3, stride: 1, padding: 1, spiking: true },
            LayerSpec::Flatten,
            LayerSpec::Linear { in_features: 144, out_features: 3, spiking: false },
        ],
        time_steps,
        num_classes: 3,
        lif: LifConfig::default(),
        eps: 1e-5,
        bn_momentum: 0.1,
    };
    let mut net = Network::new(spec, 5).unwrap();
    let Some(Neuron::Mpbn(p)) = &mut net.neurons_mut()[0] else { panic!() };
    *p = NormParams {
        gamma: Tensor::from_vec(vec![1.2, 0.8, -0.9, 1.0]).unwrap(),
        beta: Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.0]).unwrap(),
        mu: Tensor::from_vec(vec![0.05, -0.1, 0.0, 0.2]).unwrap(),
        sigma2: Tensor::from_vec(vec![0.6, 1.1, 0.9, 1.4]).unwrap(),
        eps: 1e-5,
    };
    deploy(&net, tm).unwrap()
}

fn smooth_entropy(net: &Network, x: &Tensor) -> f64 {
    let mut scratch = net.clone();
    let mut tape = Tape::no_grad();
    let opts = ForwardOptions::new(ModelMode::DeployedTm).with_spike(SpikeFn::Logistic { alpha: 4.0 });
    let tr = scratch.run(&mut tape, x, &opts).unwrap();
    let h = tape.entropy(tr.logits).unwrap();
    tape.value(h).item()
}

/// Per-channel relative error of ∂H/∂β against finite differences of the
/// logistic-spike twin of `net`.
pub fn entropy_beta_errors(net: &Network, x: &Tensor) -> Vec<f64> {
    let mut scratch = net.clone();
    let mut tape = Tape::new();
    let opts = ForwardOptions::new(ModelMode::DeployedTm)
        .with_grad(GradScope::Affine)
        .with_spike(SpikeFn::Logistic { alpha: 4.0 });
    let tr = scratch.run(&mut tape, x, &opts).unwrap();
    let h = tape.entropy(tr.logits).unwrap();
    tape.backward(h).unwrap();
    let beta = tr.affines[0].unwrap().beta;
    let analytic = tape.grad(beta).unwrap().data().to_vec();
    (0..analytic.len())
        .map(|ch| {
            let shifted = |d: f64| {
                let mut n = net.clone();
                let Some(Neuron::Deployed(dl)) = &mut n.neurons_mut()[0] else { panic!() };
                dl.norm.beta.data_mut()[ch] += d;
                smooth_entropy(&n, x)
            };
            let numeric = (shifted(H) - shifted(-H)) / (2.0 * H);
            (analytic[ch] - numeric).abs() / analytic[ch].abs().max(numeric.abs()).max(1e-12)
        })
        .collect()
}

/// The three twin configurations: one live-statistics step, then frozen
/// statistics over several steps with and without reset normalization.
pub fn entropy_beta_suite() -> Vec<f64> {
    let x = uniform(&[5, 1, 6, 6], 0.0, 1.0, 31);
    let mut errs = entropy_beta_errors(&toy_deployed(1, TmConfig { rho0: 1.0, omega: 0.94, r: false, e: true }), &x);
    for r in [false, true] {
        errs.extend(entropy_beta_errors(&toy_deployed(3, TmConfig { rho0: 0.0, omega: 1.0, r, e: true }), &x));
    }
    errs
}
