//! Browser bindings: a single LIF neuron, a threshold-modulation trace under
//! input shift, and the per-sample energy formula.

use serde_json::json;
use tmsnn::autodiff::Tape;
use tmsnn::energy::{energy_uj, EnergyConstants};
use tmsnn::lif::{self, LifConfig, LifLayerState, NormParams, SpikeFn, Threshold, TmConfig, TmState};
use tmsnn::{Result, Tensor};
use wasm_bindgen::prelude::*;

/// Membrane potential and spikes of one neuron driven by a constant input.
pub fn lif_trace_json(input: f64, steps: usize, tau: f64, v_th: f64) -> Result<String> {
    let cfg = LifConfig {
        tau,
        v_th,
        v_reset: 0.0,
    };
    cfg.validate()?;
    let mut tape = Tape::no_grad();
    let x = tape.constant(Tensor::new(&[1, 1], vec![input])?);
    let mut state = LifLayerState::new();
    let (mut membrane, mut spikes) = (Vec::new(), Vec::new());
    for _ in 0..steps {
        let h = lif::lif_charge(&mut tape, x, &state, &cfg)?;
        membrane.push(tape.value(h).item());
        let o = lif::lif_fire_reset(
            &mut tape,
            h,
            Threshold::Scalar(v_th),
            &mut state,
            &cfg,
            SpikeFn::default(),
            false,
            None,
        )?;
        spikes.push(tape.value(o).item());
    }
    Ok(json!({ "membrane": membrane, "spikes": spikes }).to_string())
}

/// A batch of 64 membrane values with the given mean and spread.
fn shifted_batch(mean: f64, std: f64) -> Result<Tensor> {
    // evenly spaced on [-√3, √3]: unit variance
    let n = 64;
    let data = (0..n)
        .map(|i| {
            let z = (2.0 * (i as f64 + 0.5) / n as f64 - 1.0) * 3f64.sqrt();
            mean + std * z
        })
        .collect();
    Tensor::new(&[n, 1], data)
}

/// Modulated threshold over `batches` steps when the membrane statistics move
/// from (0, 1) to (`shift`, `spread`²). `ideal` is the threshold an oracle with
/// the true shifted statistics would use.
pub fn tm_trace_json(shift: f64, spread: f64, rho0: f64, omega: f64, batches: usize) -> Result<String> {
    let tm_cfg = TmConfig {
        rho0,
        omega,
        r: false,
        e: false,
    };
    tm_cfg.validate()?;
    let lif_cfg = LifConfig::default();
    let mut norm = NormParams::identity(1);
    norm.eps = 0.0;
    let mut state = TmState::from_source(&norm, &lif_cfg)?;
    state.rho_t = rho0;
    let batch = shifted_batch(shift, spread)?;
    let mut thresholds = vec![state.v_th_mod.item()];
    for _ in 0..batches {
        lif::tm_update(&batch, &mut state, &tm_cfg, &norm, &lif_cfg)?;
        thresholds.push(state.v_th_mod.item());
    }
    let ideal = lif_cfg.v_th * spread + shift;
    Ok(json!({ "thresholds": thresholds, "ideal": ideal }).to_string())
}

/// Per-sample energy in μJ.
#[wasm_bindgen]
pub fn energy_estimate(macs: f64, acs: f64, muls: f64) -> f64 {
    energy_uj(macs, acs, muls, &EnergyConstants::default())
}

#[wasm_bindgen]
pub fn lif_trace(input: f64, steps: usize, tau: f64, v_th: f64) -> std::result::Result<String, JsError> {
    lif_trace_json(input, steps, tau, v_th).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn tm_trace(
    shift: f64,
    spread: f64,
    rho0: f64,
    omega: f64,
    batches: usize,
) -> std::result::Result<String, JsError> {
    tm_trace_json(shift, spread, rho0, omega, batches).map_err(|e| JsError::new(&e.to_string()))
}
