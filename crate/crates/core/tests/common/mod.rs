#![allow(dead_code)]

pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmsnn::lif::NormParams;
use tmsnn::network::{ForwardOptions, Neuron};
use tmsnn::{ModelMode, Network, NetworkSpec, Tape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Non-trivial MPBN parameters, with a few negative γ.
pub fn randomize_norms(net: &mut Network, seed: u64) {
    let mut r = rng(seed);
    for n in net.neurons_mut().iter_mut().flatten() {
        let Neuron::Mpbn(p) = n else { panic!("expected MPBN") };
        let c = p.channels();
        let mut q = NormParams::identity(c);
        for ch in 0..c {
            let g: f64 = r.gen_range(0.5..1.5);
            q.gamma.data_mut()[ch] = if r.gen_bool(0.15) { -g } else { g };
            q.beta.data_mut()[ch] = r.gen_range(-0.4..0.4);
            q.mu.data_mut()[ch] = r.gen_range(-0.3..0.3);
            q.sigma2.data_mut()[ch] = r.gen_range(0.3..2.0);
        }
        *p = q;
    }
}

pub fn random_net(num_classes: usize, size: usize, time_steps: usize, seed: u64) -> Network {
    let mut spec = NetworkSpec::reference(num_classes, size);
    spec.time_steps = time_steps;
    let mut net = Network::new(spec, seed).unwrap();
    randomize_norms(&mut net, seed + 1000);
    net
}

/// Spike tensors per spiking layer and step, plus logits.
pub fn spike_trains(net: &mut Network, x: &Tensor, mode: ModelMode) -> (Vec<Vec<Tensor>>, Tensor) {
    let mut tape = Tape::no_grad();
    let tr = net.run(&mut tape, x, &ForwardOptions::new(mode)).unwrap();
    let spikes = tr
        .spikes
        .iter()
        .map(|l| l.steps.iter().map(|&s| tape.value(s).clone()).collect())
        .collect();
    (spikes, tape.value(tr.logits).clone())
}

pub fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
