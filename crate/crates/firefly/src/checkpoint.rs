//! Network checkpoints: a JSON document that round-trips bit-exactly.
//!
//! Floats are written as 17-significant-digit scientific notation (see
//! [`crate::jsonfmt`]), so `save` followed by `load` reproduces every weight
//! bit for bit. `schema_version` guards against silently reading a future
//! layout.

use crate::error::{Error, Result};
use crate::network::{Activation, GrowableNetwork, HeadKind, Layer, Neuron, ResidualBlock};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NeuronDoc {
    theta: Vec<f64>,
    out_weight: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    activation: String,
    neurons: Vec<NeuronDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockDoc {
    slot: usize,
    neurons: Vec<NeuronDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    schema_version: u32,
    input_dim: usize,
    head_kind: String,
    layers: Vec<LayerDoc>,
    residual_blocks: Vec<BlockDoc>,
}

fn neuron_doc(n: &Neuron) -> NeuronDoc {
    NeuronDoc {
        theta: n.theta.clone(),
        out_weight: n.out_weight.clone(),
    }
}

fn neuron_from(doc: NeuronDoc) -> Neuron {
    Neuron {
        theta: doc.theta,
        out_weight: doc.out_weight,
    }
}

fn check_finite(neuron: &Neuron, what: &str) -> Result<()> {
    let ok = neuron.theta.iter().chain(&neuron.out_weight).all(|v| v.is_finite());
    if !ok {
        return Err(Error::numeric(format!("non-finite weight in {what}")));
    }
    Ok(())
}

/// Renders `net` as the checkpoint document.
pub fn to_json(net: &GrowableNetwork) -> Result<String> {
    net.validate()?;
    for (l, layer) in net.layers.iter().enumerate() {
        for n in &layer.neurons {
            check_finite(n, &format!("layer {l}"))?;
        }
    }
    for b in &net.residual_blocks {
        for n in &b.neurons {
            check_finite(n, &format!("residual block at slot {}", b.slot))?;
        }
    }
    let doc = NetworkDoc {
        schema_version: SCHEMA_VERSION,
        input_dim: net.input_dim,
        head_kind: net.head.name().to_string(),
        layers: net
            .layers
            .iter()
            .map(|l| LayerDoc {
                activation: l.activation.name().to_string(),
                neurons: l.neurons.iter().map(neuron_doc).collect(),
            })
            .collect(),
        residual_blocks: net
            .residual_blocks
            .iter()
            .map(|b| BlockDoc {
                slot: b.slot,
                neurons: b.neurons.iter().map(neuron_doc).collect(),
            })
            .collect(),
    };
    let mut s = crate::jsonfmt::to_string_pretty(&doc)?;
    s.push('\n');
    Ok(s)
}

/// Parses a checkpoint document and validates the resulting network.
pub fn from_json(text: &str) -> Result<GrowableNetwork> {
    let doc: NetworkDoc = serde_json::from_str(text)
        .map_err(|e| Error::contract(format!("malformed checkpoint: {e}")))?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::contract(format!(
            "checkpoint schema version {} (this build reads {SCHEMA_VERSION})",
            doc.schema_version
        )));
    }
    let net = GrowableNetwork {
        input_dim: doc.input_dim,
        head: HeadKind::from_name(&doc.head_kind)?,
        layers: doc
            .layers
            .into_iter()
            .map(|l| {
                Ok(Layer {
                    activation: Activation::from_name(&l.activation)?,
                    neurons: l.neurons.into_iter().map(neuron_from).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?,
        residual_blocks: doc
            .residual_blocks
            .into_iter()
            .map(|b| ResidualBlock {
                slot: b.slot,
                neurons: b.neurons.into_iter().map(neuron_from).collect(),
            })
            .collect(),
    };
    net.validate()?;
    Ok(net)
}

pub fn save(net: &GrowableNetwork, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, to_json(net)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<GrowableNetwork> {
    let text = std::fs::read_to_string(path)?;
    from_json(&text).map_err(|e| match e {
        Error::Contract(m) => Error::contract(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::stream_rng;

    fn sample_net() -> GrowableNetwork {
        let mut rng = stream_rng(7, "ckpt", 0);
        let mut net = GrowableNetwork::mlp(
            2,
            &[(3, 3), (2, 2)],
            Activation::Rectifier,
            HeadKind::Classification,
            0.8,
            &mut rng,
        );
        net.residual_blocks.push(ResidualBlock {
            slot: 0,
            neurons: vec![Neuron::random(3, 3, 0.5, &mut rng)],
        });
        net.validate().unwrap();
        net
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = sample_net();
        let text = to_json(&net).unwrap();
        let back = from_json(&text).unwrap();
        assert_eq!(back.input_dim, net.input_dim);
        assert_eq!(back.head, net.head);
        for (a, b) in back.layers.iter().zip(&net.layers) {
            assert_eq!(a.activation, b.activation);
            for (x, y) in a.neurons.iter().zip(&b.neurons) {
                for (p, q) in x.theta.iter().zip(&y.theta) {
                    assert_eq!(p.to_bits(), q.to_bits());
                }
                for (p, q) in x.out_weight.iter().zip(&y.out_weight) {
                    assert_eq!(p.to_bits(), q.to_bits());
                }
            }
        }
        assert_eq!(back.residual_blocks.len(), 1);
        for (p, q) in back.residual_blocks[0].neurons[0]
            .theta
            .iter()
            .zip(&net.residual_blocks[0].neurons[0].theta)
        {
            assert_eq!(p.to_bits(), q.to_bits());
        }
        // Serializing the reloaded network reproduces the document itself.
        assert_eq!(to_json(&back).unwrap(), text);
    }

    #[test]
    fn file_round_trip() {
        let net = sample_net();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save(&net, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(to_json(&back).unwrap(), to_json(&net).unwrap());
    }

    #[test]
    fn version_and_shape_are_checked() {
        let net = sample_net();
        let good = to_json(&net).unwrap();
        let bumped = good.replace("\"schema_version\": 1", "\"schema_version\": 9");
        let err = from_json(&bumped).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");

        // A checkpoint describing an inconsistent network fails validation.
        let broken = good.replace("\"slot\": 0", "\"slot\": 7");
        assert!(from_json(&broken).is_err());

        assert!(from_json("{\"not\": \"a checkpoint\"}").is_err());
    }
}
