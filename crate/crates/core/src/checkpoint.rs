//! JSON checkpoints. Tensor payloads are base64 of little-endian f64 so a
//! round trip is bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lif::{LifConfig, NormParams, TmConfig, TmState};
use crate::network::{Network, NetworkSpec, Neuron};
use crate::reparam::DeployedLayer;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct StoredTensor {
    shape: Vec<usize>,
    data: String,
}

impl From<&Tensor> for StoredTensor {
    fn from(t: &Tensor) -> Self {
        let mut s = Self::raw(t.data());
        s.shape = t.shape().to_vec();
        s
    }
}

impl StoredTensor {
    pub(crate) fn raw(values: &[f64]) -> Self {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            shape: vec![values.len()],
            data: STANDARD.encode(bytes),
        }
    }

    pub(crate) fn decode_raw(&self) -> Result<Vec<f64>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Format(format!("bad tensor payload: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format("tensor payload is not a whole number of f64".into()));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn decode(&self) -> Result<Tensor> {
        Tensor::new(&self.shape, self.decode_raw()?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredNorm {
    gamma: StoredTensor,
    beta: StoredTensor,
    mu: StoredTensor,
    sigma2: StoredTensor,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredTm {
    config: TmConfig,
    lif: LifConfig,
    mu_hat: StoredTensor,
    sigma2_hat: StoredTensor,
    threshold: StoredTensor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredLayer {
    weight: Option<StoredTensor>,
    norm: Option<StoredNorm>,
    /// Present only on deployed models.
    tm: Option<StoredTm>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredModel {
    format_version: u32,
    deployed: bool,
    spec: NetworkSpec,
    layers: Vec<StoredLayer>,
}

fn store_norm(n: &NormParams) -> StoredNorm {
    StoredNorm {
        gamma: (&n.gamma).into(),
        beta: (&n.beta).into(),
        mu: (&n.mu).into(),
        sigma2: (&n.sigma2).into(),
        eps: n.eps,
    }
}

fn load_norm(s: &StoredNorm) -> Result<NormParams> {
    Ok(NormParams {
        gamma: s.gamma.decode()?,
        beta: s.beta.decode()?,
        mu: s.mu.decode()?,
        sigma2: s.sigma2.decode()?,
        eps: s.eps,
    })
}

pub fn to_json(net: &Network) -> Result<String> {
    let layers = net
        .weights()
        .iter()
        .zip(net.neurons())
        .map(|(w, n)| StoredLayer {
            weight: w.as_ref().map(Into::into),
            norm: n.as_ref().map(|n| store_norm(n.norm())),
            tm: match n {
                Some(Neuron::Deployed(d)) => Some(StoredTm {
                    config: d.tm_cfg,
                    lif: d.lif,
                    mu_hat: (&d.tm.mu_hat).into(),
                    sigma2_hat: (&d.tm.sigma2_hat).into(),
                    threshold: (&d.tm.v_th_mod).into(),
                }),
                _ => None,
            },
        })
        .collect();
    let model = StoredModel {
        format_version: FORMAT_VERSION,
        deployed: net.is_deployed(),
        spec: net.spec().clone(),
        layers,
    };
    Ok(serde_json::to_string_pretty(&model)?)
}

pub fn from_json(text: &str) -> Result<Network> {
    let model: StoredModel = serde_json::from_str(text)?;
    if model.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
            model.format_version
        )));
    }
    let mut weights = Vec::with_capacity(model.layers.len());
    let mut neurons = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        weights.push(layer.weight.as_ref().map(StoredTensor::decode).transpose()?);
        let neuron = match (&layer.norm, &layer.tm) {
            (None, None) => None,
            (None, Some(_)) => return Err(Error::Format("TM state without norm parameters".into())),
            (Some(n), None) => {
                if model.deployed {
                    return Err(Error::Format("deployed model has a layer without TM state".into()));
                }
                Some(Neuron::Mpbn(load_norm(n)?))
            }
            (Some(n), Some(tm)) => {
                if !model.deployed {
                    return Err(Error::Format("undeployed model carries TM state".into()));
                }
                tm.config.validate()?;
                Some(Neuron::Deployed(DeployedLayer {
                    lif: tm.lif,
                    norm: load_norm(n)?,
                    tm: TmState {
                        mu_hat: tm.mu_hat.decode()?,
                        sigma2_hat: tm.sigma2_hat.decode()?,
                        rho_t: 0.0,
                        v_th_mod: tm.threshold.decode()?,
                    },
                    tm_cfg: tm.config,
                }))
            }
        };
        neurons.push(neuron);
    }
    Network::from_parts(model.spec, weights, neurons)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    write_atomic(path, to_json(net)?.as_bytes())
}

pub fn load(path: &Path) -> Result<Network> {
    from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reparam::deploy;

    #[test]
    fn tensor_payload_is_bit_exact() {
        let t = Tensor::from_vec(vec![0.1, -1e-300, 1.0 / 3.0, 5e300]).unwrap();
        let back = StoredTensor::from(&t).decode().unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn round_trip_both_forms() {
        let net = Network::new(NetworkSpec::reference(3, 8), 4).unwrap();
        assert_eq!(from_json(&to_json(&net).unwrap()).unwrap(), net);
        let d = deploy(&net, TmConfig::default()).unwrap();
        let back = from_json(&to_json(&d).unwrap()).unwrap();
        assert_eq!(back, d);
        assert!(back.is_deployed());
    }

    #[test]
    fn rejects_foreign_version_and_garbage() {
        let net = Network::new(NetworkSpec::reference(3, 8), 4).unwrap();
        let text = to_json(&net).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        assert!(matches!(from_json(&text), Err(Error::Format(_))));
        assert!(matches!(from_json("{"), Err(Error::Format(_))));
    }
}
