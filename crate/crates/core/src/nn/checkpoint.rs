//! JSON checkpoint format for dense networks.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "layers": [
//!     {"in_dim": 2, "out_dim": 3, "activation": "relu",
//!      "weights": [/* out_dim * in_dim, row-major */], "biases": [/* out_dim */]}
//!   ],
//!   "optimizer": null
//! }
//! ```

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Activation, AdamState, DenseNetwork, Layer};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkCheckpoint {
    pub format_version: u32,
    pub layers: Vec<LayerRecord>,
    #[serde(default)]
    pub optimizer: Option<AdamState>,
}

impl DenseNetwork {
    pub fn to_checkpoint(&self, optimizer: Option<&AdamState>) -> NetworkCheckpoint {
        NetworkCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layers: self
                .layers()
                .iter()
                .map(|l| LayerRecord {
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    activation: l.activation,
                    weights: l.weights.iter().copied().collect(),
                    biases: l.biases.to_vec(),
                })
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn from_checkpoint(ck: &NetworkCheckpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint format_version {}",
                ck.format_version
            )));
        }
        let layers = ck
            .layers
            .iter()
            .map(|r| {
                let weights = Array2::from_shape_vec((r.out_dim, r.in_dim), r.weights.clone())
                    .map_err(|e| Error::invalid(format!("weights: {e}")))?;
                if r.biases.len() != r.out_dim {
                    return Err(Error::invalid("bias length does not match out_dim"));
                }
                Ok(Layer { weights, biases: Array1::from(r.biases.clone()), activation: r.activation })
            })
            .collect::<Result<Vec<_>>>()?;
        DenseNetwork::from_layers(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AdamConfig;

    #[test]
    fn checkpoint_json_round_trip() {
        let net = DenseNetwork::new(&[3, 4, 2], &[Activation::Relu, Activation::Softmax], 4).unwrap();
        let st = AdamState::new(net.parameter_count(), AdamConfig::default());
        let json = serde_json::to_string(&net.to_checkpoint(Some(&st))).unwrap();
        let ck: NetworkCheckpoint = serde_json::from_str(&json).unwrap();
        let back = DenseNetwork::from_checkpoint(&ck).unwrap();
        assert_eq!(back, net);
        assert_eq!(ck.optimizer.unwrap(), st);
        assert!(json.contains("\"format_version\":1"));
    }

    #[test]
    fn bad_shapes_rejected() {
        let net = DenseNetwork::new(&[3, 2], &[Activation::Identity], 4).unwrap();
        let mut ck = net.to_checkpoint(None);
        ck.layers[0].weights.pop();
        assert!(DenseNetwork::from_checkpoint(&ck).is_err());
        let mut ck = net.to_checkpoint(None);
        ck.format_version = 99;
        assert!(DenseNetwork::from_checkpoint(&ck).is_err());
    }
}
