//! Heavy-ball SGD state and per-epoch learning-rate schedules.
//!
//! Update rules produce raw update tensors with the learning rate already
//! folded in, so the optimizer only adds momentum: v <- mu*v + dw, w <- w + v.

use crate::error::{Error, Result};
use crate::grad::UpdateSet;
use crate::layer::Network;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub use crate::layer::InitScheme;

/// Per-weight-tensor velocities, aligned with the network's layer indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub momentum: f64,
    pub velocities: Vec<Option<(Tensor, Tensor)>>,
}

impl OptimizerState {
    pub fn new(network: &Network, momentum: f64) -> OptimizerState {
        let velocities = network
            .layers
            .iter()
            .map(|l| {
                l.weights.as_ref().map(|w| {
                    (
                        Tensor::zeros(w.shape()),
                        Tensor::zeros(l.bias.as_ref().expect("bias").shape()),
                    )
                })
            })
            .collect();
        OptimizerState {
            momentum,
            velocities,
        }
    }
}

/// v <- mu*v + dw; w <- w + v, for every layer carrying an update.
pub fn apply_updates(
    network: &mut Network,
    updates: &UpdateSet,
    state: &mut OptimizerState,
) -> Result<()> {
    for (i, layer) in network.layers.iter_mut().enumerate() {
        let Some((dw, db)) = updates.get(i) else {
            continue;
        };
        let (w, b) = match (layer.weights.as_mut(), layer.bias.as_mut()) {
            (Some(w), Some(b)) => (w, b),
            _ => {
                return Err(Error::Unsupported(format!(
                    "update for non-adaptive layer {i}"
                )))
            }
        };
        if dw.shape() != w.shape() || db.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                layer: i,
                expected: w.shape().to_vec(),
                got: dw.shape().to_vec(),
            });
        }
        let (vw, vb) = state.velocities[i]
            .as_mut()
            .expect("velocity for adaptive layer");
        let mu = state.momentum;
        for ((wv, vv), dv) in w
            .data_mut()
            .iter_mut()
            .zip(vw.data_mut())
            .zip(dw.data())
        {
            *vv = mu * *vv + dv;
            *wv += *vv;
        }
        for ((bv, vv), dv) in b
            .data_mut()
            .iter_mut()
            .zip(vb.data_mut())
            .zip(db.data())
        {
            *vv = mu * *vv + dv;
            *bv += *vv;
        }
    }
    Ok(())
}

/// How per-layer learning rates evolve over epochs. Rates are listed for the
/// adaptive layers in forward order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// rate_l(e) = base_l * gamma^e
    Decay { base: Vec<f64>, gamma: f64 },
    /// Bottom-up ladder for fine-tuning: layer u sleeps until epoch 3u, then
    /// starts at 1e-3 and decays by 10x per epoch. A layer wakes exactly when
    /// the rate of the layer below has fallen under 1e-5 (three epochs after
    /// it started), which enforces asynchronous layer-by-layer adaptation.
    Staggered { units: usize },
}

pub const STAGGER_START: f64 = 1e-3;
pub const STAGGER_EPOCHS_PER_UNIT: usize = 3;

/// Per-layer rates at the given epoch.
pub fn lr_at_epoch(schedule: &LrSchedule, epoch: usize) -> Vec<f64> {
    match schedule {
        LrSchedule::Decay { base, gamma } => base
            .iter()
            .map(|b| b * gamma.powi(epoch as i32))
            .collect(),
        LrSchedule::Staggered { units } => (0..*units)
            .map(|u| {
                let start = u * STAGGER_EPOCHS_PER_UNIT;
                if epoch < start {
                    0.0
                } else {
                    STAGGER_START * 0.1f64.powi((epoch - start) as i32)
                }
            })
            .collect(),
    }
}

impl LrSchedule {
    /// Epoch count after which every unit of a staggered ladder has both
    /// started and decayed through its useful range.
    pub fn staggered_span(units: usize) -> usize {
        units * STAGGER_EPOCHS_PER_UNIT + STAGGER_EPOCHS_PER_UNIT
    }
}
