//! Folds trained MPBN statistics into per-channel firing thresholds.

use crate::error::{Error, Result};
use crate::lif::{modulated_threshold, LifConfig, NormParams, TmConfig, TmState};
use crate::network::{Network, Neuron};
use crate::tensor::Tensor;

/// A LIF layer whose normalization has been folded into its threshold.
///
/// `norm` keeps γ, β and the source statistics: they are needed again when the
/// statistics are re-estimated online.
#[derive(Clone, Debug, PartialEq)]
pub struct DeployedLayer {
    pub lif: LifConfig,
    pub norm: NormParams,
    pub tm: TmState,
    pub tm_cfg: TmConfig,
}

impl DeployedLayer {
    /// Thresholds currently in effect.
    pub fn threshold(&self) -> &Tensor {
        &self.tm.v_th_mod
    }

    /// Drops any adaptation: statistics back to the source values.
    pub fn reset(&mut self) -> Result<()> {
        self.tm = TmState::from_source(&self.norm, &self.lif)?;
        Ok(())
    }
}

/// `(v_th - β)·√(σ² + ε)/γ + μ` per channel, from running statistics.
pub fn reparam_threshold(v_th: f64, norm: &NormParams) -> Result<Tensor> {
    modulated_threshold(v_th, norm, &norm.mu, &norm.sigma2)
}

/// Replaces every MPBN layer of `net` by a re-parameterized LIF layer.
///
/// Fails on γ = 0, where no equivalent threshold exists, and on networks
/// that are already deployed.
pub fn deploy(net: &Network, tm_cfg: TmConfig) -> Result<Network> {
    tm_cfg.validate()?;
    let lif = net.spec().lif;
    let mut out = net.clone();
    for (li, slot) in out.neurons_mut().iter_mut().enumerate() {
        let Some(neuron) = slot else { continue };
        let norm = match neuron {
            Neuron::Mpbn(n) => n.clone(),
            Neuron::Deployed(_) => {
                return Err(Error::MissingStats(format!(
                    "layer {li} is already deployed; no MPBN statistics to fold"
                )))
            }
        };
        norm.validate()?;
        let tm = TmState::from_source(&norm, &lif).map_err(|e| match e {
            Error::ZeroGamma { channel, .. } => Error::ZeroGamma { layer: li, channel },
            other => other,
        })?;
        *neuron = Neuron::Deployed(DeployedLayer {
            lif,
            norm,
            tm,
            tm_cfg,
        });
    }
    Ok(out)
}

/// Sets the TM configuration of every deployed layer and restarts its statistics.
pub fn configure_tm(net: &mut Network, tm_cfg: TmConfig) -> Result<()> {
    tm_cfg.validate()?;
    for neuron in net.neurons_mut().iter_mut().flatten() {
        match neuron {
            Neuron::Deployed(d) => {
                d.tm_cfg = tm_cfg;
                d.reset()?;
            }
            Neuron::Mpbn(_) => {
                return Err(Error::Mode("model is not deployed".into()));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkSpec;

    fn norm1(gamma: f64, beta: f64, mu: f64, sigma2: f64) -> NormParams {
        NormParams {
            gamma: Tensor::from_vec(vec![gamma]).unwrap(),
            beta: Tensor::from_vec(vec![beta]).unwrap(),
            mu: Tensor::from_vec(vec![mu]).unwrap(),
            sigma2: Tensor::from_vec(vec![sigma2]).unwrap(),
            eps: 0.0,
        }
    }

    #[test]
    fn threshold_point_values() {
        let t = reparam_threshold(1.0, &norm1(2.0, 0.2, 0.0, 4.0)).unwrap();
        assert!((t.data()[0] - 0.8).abs() < 1e-15);
        let t = reparam_threshold(1.0, &norm1(1.0, 0.0, 0.0, 1.0)).unwrap();
        assert_eq!(t.data()[0], 1.0);
        let t = reparam_threshold(1.0, &norm1(3.0, 1.0, 0.7, 2.0)).unwrap();
        assert_eq!(t.data()[0], 0.7);
    }

    #[test]
    fn deploy_reports_zero_gamma_with_layer() {
        let mut net = Network::new(NetworkSpec::reference(3, 8), 0).unwrap();
        if let Some(Neuron::Mpbn(n)) = &mut net.neurons_mut()[1] {
            n.gamma.data_mut()[5] = 0.0;
        }
        assert!(matches!(
            deploy(&net, TmConfig::frozen()),
            Err(Error::ZeroGamma { layer: 1, channel: 5 })
        ));
    }

    #[test]
    fn deploy_twice_fails() {
        let net = Network::new(NetworkSpec::reference(3, 8), 0).unwrap();
        let d = deploy(&net, TmConfig::frozen()).unwrap();
        assert!(d.is_deployed());
        assert!(deploy(&d, TmConfig::frozen()).is_err());
    }
}
