//! The growable feed-forward model.
//!
//! A network is a stack of layers. Each layer holds neurons that all read the
//! layer's input vector: neuron `i` computes `act(theta_i . [v, 1])` and
//! scatters it into the layer output through its own output weight vector, so
//! a layer's output dimension is the (shared) length of its neurons' output
//! weights. Residual blocks sit at slots strictly between consecutive layers
//! and add `sum_i w_i act(theta_i . [u, 1])` on top of the passed-through
//! vector `u`. The head either sums into a scalar regression output (the
//! final layer must have output dimension 1) or treats the final output as
//! class logits.
//!
//! This shape is what lets the grower act locally: a neuron is split by
//! replacing it with two copies at perturbed incoming weights and half the
//! output weight, a neuron is added by appending to `neurons`, and a layer is
//! added by occupying an empty residual slot. None of those edits disturb any
//! other neuron's parameters.
//!
//! Two evaluation paths exist and must agree: a plain `f64` walk used for
//! reporting and baselines, and tape emission used for training. Both
//! accumulate neuron contributions in neuron order.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{GroupId, NodeRef, ParameterStore, TapeBuilder};
use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `exp(-t^2 / 2)`, the radial bump used by the toy benchmark.
    RbfGaussian,
    /// `max(t, 0)`.
    Rectifier,
    /// Pass-through, for linear layers.
    Identity,
}

impl Activation {
    pub fn apply(self, t: f64) -> f64 {
        match self {
            Activation::RbfGaussian => (-t * t / 2.0).exp(),
            Activation::Rectifier => {
                if t > 0.0 {
                    t
                } else {
                    0.0
                }
            }
            Activation::Identity => t,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::RbfGaussian => "rbf-gaussian",
            Activation::Rectifier => "rectifier",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "rbf-gaussian" => Ok(Activation::RbfGaussian),
            "rectifier" => Ok(Activation::Rectifier),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::config(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Scalar output, mean squared error loss. Final layer output dim is 1.
    Regression,
    /// Final layer output is class logits, mean softmax cross-entropy loss.
    Classification,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Regression => "regression",
            HeadKind::Classification => "classification",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "regression" => Ok(HeadKind::Regression),
            "classification" => Ok(HeadKind::Classification),
            other => Err(Error::config(format!("unknown head kind '{other}'"))),
        }
    }
}

/// One unit: incoming affine weights (bias last) and outgoing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Neuron {
    /// Incoming weights, length = layer input dim + 1, bias last.
    pub theta: Vec<f64>,
    /// Outgoing weights, length = layer output dim.
    pub out_weight: Vec<f64>,
}

impl Neuron {
    pub fn new(theta: Vec<f64>, out_weight: Vec<f64>) -> Self {
        Neuron { theta, out_weight }
    }

    /// Neuron with all weights drawn i.i.d. from `N(0, sd^2)`.
    pub fn random(in_dim: usize, out_dim: usize, sd: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, sd).expect("sd must be finite and non-negative");
        Neuron {
            theta: (0..in_dim + 1).map(|_| normal.sample(rng)).collect(),
            out_weight: (0..out_dim).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.theta.len() + self.out_weight.len()
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub activation: Activation,
    pub neurons: Vec<Neuron>,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.neurons[0].out_weight.len()
    }

    pub fn in_dim(&self) -> usize {
        self.neurons[0].theta.len() - 1
    }
}

/// Residual neurons occupying the slot after layer `slot`.
///
/// The block reads the output `u` of layer `slot`, shares that layer's
/// activation, and its contribution is added on top of `u`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub slot: usize,
    pub neurons: Vec<Neuron>,
}

#[derive(Debug, Clone)]
pub struct GrowableNetwork {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
    /// Sorted by slot, at most one block per slot.
    pub residual_blocks: Vec<ResidualBlock>,
    pub head: HeadKind,
}

/// Parameter groups for one neuron on a tape.
#[derive(Debug, Clone, Copy)]
pub struct NeuronGroups {
    pub theta: GroupId,
    pub out: GroupId,
}

/// Map from network structure to parameter groups, produced by
/// [`GrowableNetwork::register_params`]. Shapes mirror `layers` and
/// `residual_blocks`.
#[derive(Debug, Clone)]
pub struct NetBinding {
    pub layers: Vec<Vec<NeuronGroups>>,
    pub blocks: Vec<Vec<NeuronGroups>>,
}

impl GrowableNetwork {
    /// Single RBF layer summing to a scalar: the toy benchmark model family.
    pub fn rbf_regression(input_dim: usize, neurons: usize, init_sd: f64, rng: &mut impl Rng) -> Self {
        let layer = Layer {
            activation: Activation::RbfGaussian,
            neurons: (0..neurons)
                .map(|_| Neuron::random(input_dim, 1, init_sd, rng))
                .collect(),
        };
        GrowableNetwork {
            input_dim,
            layers: vec![layer],
            residual_blocks: Vec::new(),
            head: HeadKind::Regression,
        }
    }

    /// Multi-layer network from `(neuron_count, out_dim)` specs per layer.
    pub fn mlp(
        input_dim: usize,
        specs: &[(usize, usize)],
        activation: Activation,
        head: HeadKind,
        init_sd: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(specs.len());
        let mut in_dim = input_dim;
        for &(n, out) in specs {
            layers.push(Layer {
                activation,
                neurons: (0..n).map(|_| Neuron::random(in_dim, out, init_sd, rng)).collect(),
            });
            in_dim = out;
        }
        GrowableNetwork {
            input_dim,
            layers,
            residual_blocks: Vec::new(),
            head,
        }
    }

    /// Checks dimension chaining, block placement, and weight finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::structural("input_dim must be positive"));
        }
        if self.layers.is_empty() {
            return Err(Error::structural("network needs at least one layer"));
        }
        let mut in_dim = self.input_dim;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.neurons.is_empty() {
                return Err(Error::structural(format!("layer {l} has no neurons")));
            }
            let out_dim = layer.neurons[0].out_weight.len();
            if out_dim == 0 {
                return Err(Error::structural(format!("layer {l} has zero output dim")));
            }
            for (i, n) in layer.neurons.iter().enumerate() {
                if n.theta.len() != in_dim + 1 {
                    return Err(Error::structural(format!(
                        "layer {l} neuron {i}: theta length {} != input dim {in_dim} + 1",
                        n.theta.len()
                    )));
                }
                if n.out_weight.len() != out_dim {
                    return Err(Error::structural(format!(
                        "layer {l} neuron {i}: output weight length {} != layer output dim {out_dim}",
                        n.out_weight.len()
                    )));
                }
                if n.theta.iter().chain(&n.out_weight).any(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!(
                        "layer {l} neuron {i} has non-finite weights"
                    )));
                }
            }
            in_dim = out_dim;
        }
        let mut last_slot = None;
        for block in &self.residual_blocks {
            if block.slot + 1 >= self.layers.len() {
                return Err(Error::structural(format!(
                    "residual slot {} is not between two layers",
                    block.slot
                )));
            }
            if let Some(prev) = last_slot {
                if block.slot <= prev {
                    return Err(Error::structural(
                        "residual blocks must be sorted by slot, one block per slot",
                    ));
                }
            }
            last_slot = Some(block.slot);
            let dim = self.layers[block.slot].out_dim();
            if block.neurons.is_empty() {
                return Err(Error::structural(format!(
                    "residual block at slot {} has no neurons",
                    block.slot
                )));
            }
            for (i, n) in block.neurons.iter().enumerate() {
                if n.theta.len() != dim + 1 || n.out_weight.len() != dim {
                    return Err(Error::structural(format!(
                        "residual block at slot {} neuron {i} does not match interface dim {dim}",
                        block.slot
                    )));
                }
                if n.theta.iter().chain(&n.out_weight).any(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!(
                        "residual block at slot {} neuron {i} has non-finite weights",
                        block.slot
                    )));
                }
            }
        }
        match self.head {
            HeadKind::Regression => {
                if self.out_dim() != 1 {
                    return Err(Error::structural(
                        "regression head requires final output dim 1",
                    ));
                }
            }
            HeadKind::Classification => {
                if self.out_dim() < 2 {
                    return Err(Error::structural(
                        "classification head requires at least two logits",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("validated").out_dim()
    }

    pub fn block_at(&self, slot: usize) -> Option<&ResidualBlock> {
        self.residual_blocks.iter().find(|b| b.slot == slot)
    }

    /// Residual slots not yet occupied: every position strictly between two
    /// consecutive layers without a block.
    pub fn empty_slots(&self) -> Vec<usize> {
        (0..self.layers.len().saturating_sub(1))
            .filter(|s| self.block_at(*s).is_none())
            .collect()
    }

    pub fn count_neurons(&self, layer: usize) -> usize {
        self.layers[layer].neurons.len()
    }

    pub fn total_neurons(&self) -> usize {
        self.layers.iter().map(|l| l.neurons.len()).sum::<usize>()
            + self.residual_blocks.iter().map(|b| b.neurons.len()).sum::<usize>()
    }

    pub fn count_params(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.neurons)
            .map(Neuron::param_count)
            .sum::<usize>()
            + self
                .residual_blocks
                .iter()
                .flat_map(|b| &b.neurons)
                .map(Neuron::param_count)
                .sum::<usize>()
    }

    /// Plain forward pass for one input point.
    pub fn forward_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::structural(format!(
                "input length {} != input dim {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut v = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.out_dim()];
            for neuron in &layer.neurons {
                let a = layer.activation.apply(affine_point(&v, &neuron.theta));
                for (o, w) in out.iter_mut().zip(&neuron.out_weight) {
                    *o += w * a;
                }
            }
            if let Some(block) = self.block_at(l) {
                let u = out.clone();
                for neuron in &block.neurons {
                    let a = layer.activation.apply(affine_point(&u, &neuron.theta));
                    for (o, w) in out.iter_mut().zip(&neuron.out_weight) {
                        *o += w * a;
                    }
                }
            }
            v = out;
        }
        Ok(v)
    }

    /// Row-major outputs over a dataset: `outputs[point][dim]`.
    pub fn outputs(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        let n = data.n_points();
        let mut rows = Vec::with_capacity(n);
        let mut x = vec![0.0; data.input_dim()];
        for j in 0..n {
            data.copy_row(j, &mut x);
            rows.push(self.forward_point(&x)?);
        }
        Ok(rows)
    }

    /// Mean loss over the dataset under this network's head.
    ///
    /// Matches the tape-emitted loss: same per-point formulas, same
    /// accumulation order.
    pub fn loss(&self, data: &Dataset) -> Result<f64> {
        let outputs = self.outputs(data)?;
        let n = outputs.len() as f64;
        match (&self.head, data.targets()) {
            (HeadKind::Regression, Targets::Regression(ys)) => {
                let mut acc = 0.0;
                for (out, &y) in outputs.iter().zip(ys) {
                    let d = out[0] - y;
                    acc += d * d;
                }
                Ok(acc / n)
            }
            (HeadKind::Classification, Targets::Classification { labels, classes }) => {
                if self.out_dim() != *classes {
                    return Err(Error::structural(format!(
                        "network emits {} logits for {classes} classes",
                        self.out_dim()
                    )));
                }
                let mut acc = 0.0;
                for (out, &y) in outputs.iter().zip(labels) {
                    acc += xent_point(out, y as usize);
                }
                Ok(acc / n)
            }
            _ => Err(Error::structural("dataset targets do not match network head")),
        }
    }

    /// Fraction of points whose argmax logit equals the label.
    /// Ties resolve to the lowest class index.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let Targets::Classification { labels, .. } = data.targets() else {
            return Err(Error::structural("accuracy needs classification targets"));
        };
        let outputs = self.outputs(data)?;
        let mut hits = 0usize;
        for (out, &y) in outputs.iter().zip(labels) {
            let mut best = 0usize;
            for (k, &z) in out.iter().enumerate() {
                if z > out[best] {
                    best = k;
                }
            }
            if best == y as usize {
                hits += 1;
            }
        }
        Ok(hits as f64 / outputs.len() as f64)
    }

    /// Registers every weight as parameter groups (one group per neuron
    /// theta, one per neuron output weight), in layer-then-block order.
    pub fn register_params(&self, store: &mut ParameterStore) -> Result<NetBinding> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut groups = Vec::with_capacity(layer.neurons.len());
            for n in &layer.neurons {
                groups.push(NeuronGroups {
                    theta: store.add_group(&n.theta)?,
                    out: store.add_group(&n.out_weight)?,
                });
            }
            layers.push(groups);
        }
        let mut blocks = Vec::with_capacity(self.residual_blocks.len());
        for block in &self.residual_blocks {
            let mut groups = Vec::with_capacity(block.neurons.len());
            for n in &block.neurons {
                groups.push(NeuronGroups {
                    theta: store.add_group(&n.theta)?,
                    out: store.add_group(&n.out_weight)?,
                });
            }
            blocks.push(groups);
        }
        Ok(NetBinding { layers, blocks })
    }

    /// Copies trained values from the store back into the network.
    pub fn write_back(&mut self, store: &ParameterStore, binding: &NetBinding) -> Result<()> {
        if binding.layers.len() != self.layers.len() || binding.blocks.len() != self.residual_blocks.len()
        {
            return Err(Error::structural("binding does not match network structure"));
        }
        for (layer, groups) in self.layers.iter_mut().zip(&binding.layers) {
            if layer.neurons.len() != groups.len() {
                return Err(Error::structural("binding does not match layer width"));
            }
            for (n, g) in layer.neurons.iter_mut().zip(groups) {
                n.theta.copy_from_slice(store.group_slice(g.theta)?);
                n.out_weight.copy_from_slice(store.group_slice(g.out)?);
            }
        }
        for (block, groups) in self.residual_blocks.iter_mut().zip(&binding.blocks) {
            if block.neurons.len() != groups.len() {
                return Err(Error::structural("binding does not match block width"));
            }
            for (n, g) in block.neurons.iter_mut().zip(groups) {
                n.theta.copy_from_slice(store.group_slice(g.theta)?);
                n.out_weight.copy_from_slice(store.group_slice(g.out)?);
            }
        }
        Ok(())
    }

    /// Emits the network's output columns given input column nodes.
    pub fn emit_output(
        &self,
        b: &mut TapeBuilder,
        binding: &NetBinding,
        inputs: &[NodeRef],
    ) -> Result<Vec<NodeRef>> {
        if inputs.len() != self.input_dim {
            return Err(Error::structural("wrong number of input columns"));
        }
        let mut v: Vec<NodeRef> = inputs.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out: Vec<Option<NodeRef>> = vec![None; layer.out_dim()];
            for (neuron, groups) in layer.neurons.iter().zip(&binding.layers[l]) {
                let theta = b.param(groups.theta)?;
                let act = emit_unit(b, &v, theta, layer.activation)?;
                for (o, out_slot) in out.iter_mut().enumerate() {
                    let _ = neuron; // out dims follow the group's length
                    let w = b.param_elem(groups.out, o)?;
                    let term = b.mul(w, act)?;
                    *out_slot = Some(match out_slot.take() {
                        Some(acc) => b.add(acc, term)?,
                        None => term,
                    });
                }
            }
            let mut outv: Vec<NodeRef> = out.into_iter().map(|o| o.expect("layer non-empty")).collect();
            if let Some(idx) = self.residual_blocks.iter().position(|bl| bl.slot == l) {
                let u = outv.clone();
                for (neuron, groups) in self.residual_blocks[idx].neurons.iter().zip(&binding.blocks[idx])
                {
                    let _ = neuron;
                    let theta = b.param(groups.theta)?;
                    let act = emit_unit(b, &u, theta, layer.activation)?;
                    for (o, out_slot) in outv.iter_mut().enumerate() {
                        let w = b.param_elem(groups.out, o)?;
                        let term = b.mul(w, act)?;
                        *out_slot = b.add(*out_slot, term)?;
                    }
                }
            }
            v = outv;
        }
        Ok(v)
    }

    /// Emits the full loss over a dataset: input constants, network output,
    /// head loss. Returns the scalar loss node.
    pub fn emit_loss(&self, b: &mut TapeBuilder, binding: &NetBinding, data: &Dataset) -> Result<NodeRef> {
        let inputs = emit_input_columns(b, data)?;
        let outputs = self.emit_output(b, binding, &inputs)?;
        emit_head_loss(b, self.head, &outputs, data)
    }
}

/// `theta . [v, 1]` with bias last, accumulated bias-first to match the
/// tape's affine op exactly.
pub(crate) fn affine_point(v: &[f64], theta: &[f64]) -> f64 {
    debug_assert_eq!(theta.len(), v.len() + 1);
    let mut acc = theta[v.len()];
    for (x, w) in v.iter().zip(theta) {
        acc += w * x;
    }
    acc
}

/// Per-point softmax cross-entropy, stabilized by max subtraction. The same
/// formula the tape op evaluates.
pub(crate) fn xent_point(logits: &[f64], label: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &z in logits {
        if z > m {
            m = z;
        }
    }
    let mut sum = 0.0;
    for &z in logits {
        sum += (z - m).exp();
    }
    m + sum.ln() - logits[label]
}

/// Emits `act(theta . [v, 1])` for a weight node of matching length.
pub(crate) fn emit_unit(
    b: &mut TapeBuilder,
    v: &[NodeRef],
    theta: NodeRef,
    activation: Activation,
) -> Result<NodeRef> {
    let pre = b.affine(v, theta)?;
    emit_activation(b, pre, activation)
}

pub(crate) fn emit_activation(b: &mut TapeBuilder, pre: NodeRef, activation: Activation) -> Result<NodeRef> {
    match activation {
        Activation::RbfGaussian => {
            let sq = b.mul(pre, pre)?;
            let neg_half = b.scalar(-0.5)?;
            let scaled = b.mul(sq, neg_half)?;
            b.exp(scaled)
        }
        Activation::Rectifier => b.relu(pre),
        Activation::Identity => Ok(pre),
    }
}

/// One constant node per input dimension, holding that feature column.
pub(crate) fn emit_input_columns(b: &mut TapeBuilder, data: &Dataset) -> Result<Vec<NodeRef>> {
    let mut cols = Vec::with_capacity(data.input_dim());
    for d in 0..data.input_dim() {
        cols.push(b.constant(data.column(d))?);
    }
    Ok(cols)
}

/// Head loss over emitted output columns.
pub(crate) fn emit_head_loss(
    b: &mut TapeBuilder,
    head: HeadKind,
    outputs: &[NodeRef],
    data: &Dataset,
) -> Result<NodeRef> {
    match (head, data.targets()) {
        (HeadKind::Regression, Targets::Regression(ys)) => {
            if outputs.len() != 1 {
                return Err(Error::structural("regression head requires one output"));
            }
            let y = b.constant(ys)?;
            let se = b.squared_error(outputs[0], y)?;
            b.mean(se)
        }
        (HeadKind::Classification, Targets::Classification { labels, classes }) => {
            if outputs.len() != *classes {
                return Err(Error::structural(format!(
                    "network emits {} logits for {classes} classes",
                    outputs.len()
                )));
            }
            let xent = b.softmax_xent(outputs, labels)?;
            b.mean(xent)
        }
        _ => Err(Error::structural("dataset targets do not match network head")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::record_forward;
    use crate::data::Dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_net(neurons: usize, seed: u64) -> GrowableNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrowableNetwork::rbf_regression(1, neurons, 1.0, &mut rng)
    }

    #[test]
    fn single_rbf_unit_matches_closed_form() {
        // One unit, theta = (1, 0), w = 1: f(x) = exp(-x^2 / 2).
        let net = GrowableNetwork {
            input_dim: 1,
            layers: vec![Layer {
                activation: Activation::RbfGaussian,
                neurons: vec![Neuron::new(vec![1.0, 0.0], vec![1.0])],
            }],
            residual_blocks: Vec::new(),
            head: HeadKind::Regression,
        };
        net.validate().unwrap();
        let out = net.forward_point(&[0.0]).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-15);

        // Against target y = f(x) the loss is zero at x = 0...
        let data = Dataset::regression(vec![vec![0.0]], vec![1.0]).unwrap();
        assert!(net.loss(&data).unwrap().abs() < 1e-15);

        // ...and at x = sqrt(2), y = 0, loss = exp(-2)^... : f = exp(-1),
        // loss = exp(-2)? No: (exp(-1) - 0)^2 = exp(-2). Pin the e^-1 output.
        let out = net.forward_point(&[std::f64::consts::SQRT_2]).unwrap();
        assert!((out[0] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((out[0] - 0.367_879_441_171_442_33).abs() < 1e-12);
    }

    #[test]
    fn two_half_weight_copies_equal_one_neuron() {
        let net = toy_net(3, 9);
        let mut split = net.clone();
        let host = split.layers[0].neurons[1].clone();
        let mut a = host.clone();
        let mut bn = host.clone();
        a.out_weight[0] /= 2.0;
        bn.out_weight[0] /= 2.0;
        split.layers[0].neurons[1] = a;
        split.layers[0].neurons.insert(2, bn);

        for i in 0..50 {
            let x = -5.0 + 10.0 * (i as f64) / 49.0;
            let y0 = net.forward_point(&[x]).unwrap()[0];
            let y1 = split.forward_point(&[x]).unwrap()[0];
            assert!(
                (y0 - y1).abs() <= 1e-15,
                "split changed function at x = {x}: {y0} vs {y1}"
            );
        }
    }

    #[test]
    fn plain_loss_matches_tape_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = toy_net(4, 3);
        let xs: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random_range(-5.0..5.0)]).collect();
        let ys: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
        let data = Dataset::regression(xs, ys).unwrap();

        let mut store = ParameterStore::new();
        let binding = net.register_params(&mut store).unwrap();
        let (_, tape_loss) = record_forward(&store, |b| net.emit_loss(b, &binding, &data)).unwrap();
        let plain_loss = net.loss(&data).unwrap();
        assert!(
            (tape_loss - plain_loss).abs() <= 1e-12 * plain_loss.abs().max(1.0),
            "tape {tape_loss} vs plain {plain_loss}"
        );
    }

    #[test]
    fn classifier_paths_agree_and_count_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = GrowableNetwork::mlp(
            2,
            &[(5, 3)],
            Activation::Rectifier,
            HeadKind::Classification,
            0.8,
            &mut rng,
        );
        net.validate().unwrap();
        let xs: Vec<Vec<f64>> = (0..30)
            .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let labels: Vec<u32> = (0..30).map(|_| rng.random_range(0..3)).collect();
        let data = Dataset::classification(xs, labels, 3).unwrap();

        let mut store = ParameterStore::new();
        let binding = net.register_params(&mut store).unwrap();
        let (_, tape_loss) = record_forward(&store, |b| net.emit_loss(b, &binding, &data)).unwrap();
        let plain_loss = net.loss(&data).unwrap();
        assert!((tape_loss - plain_loss).abs() <= 1e-12 * plain_loss.max(1.0));

        let acc = net.accuracy(&data).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn residual_block_applies_between_layers() {
        // Identity activations so no rectifier can mask the block's effect.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = GrowableNetwork::mlp(
            2,
            &[(3, 3), (3, 2)],
            Activation::Identity,
            HeadKind::Classification,
            0.7,
            &mut rng,
        );
        assert_eq!(net.empty_slots(), vec![0]);
        net.residual_blocks.push(ResidualBlock {
            slot: 0,
            neurons: vec![Neuron::random(3, 3, 0.5, &mut rng)],
        });
        net.validate().unwrap();
        assert!(net.empty_slots().is_empty());

        // Zero output weights make the block an exact identity.
        let x = [0.3, -1.2];
        let with = net.forward_point(&x).unwrap();
        net.residual_blocks[0].neurons[0].out_weight = vec![0.0; 3];
        let zeroed = net.forward_point(&x).unwrap();
        let mut plain = net.clone();
        plain.residual_blocks.clear();
        let without = plain.forward_point(&x).unwrap();
        assert_eq!(zeroed, without);
        assert_ne!(with, without);
    }

    #[test]
    fn write_back_round_trips_through_store() {
        let mut net = toy_net(3, 2);
        let reference = net.clone();
        let mut store = ParameterStore::new();
        let binding = net.register_params(&mut store).unwrap();
        net.write_back(&store, &binding).unwrap();
        for (a, b) in net.layers[0].neurons.iter().zip(&reference.layers[0].neurons) {
            assert_eq!(a.theta, b.theta);
            assert_eq!(a.out_weight, b.out_weight);
        }
    }

    #[test]
    fn param_and_neuron_counts() {
        let net = toy_net(3, 4);
        // Each 1-D RBF unit: 2 incoming + 1 outgoing.
        assert_eq!(net.count_params(), 9);
        assert_eq!(net.count_neurons(0), 3);
        assert_eq!(net.total_neurons(), 3);
    }

    #[test]
    fn validate_rejects_bad_shapes() {
        let mut net = toy_net(2, 1);
        net.layers[0].neurons[0].theta = vec![1.0, 2.0, 3.0];
        assert!(net.validate().is_err());

        let mut net = toy_net(2, 1);
        net.layers[0].neurons[1].out_weight = vec![];
        assert!(net.validate().is_err());

        let mut net = toy_net(2, 1);
        net.residual_blocks.push(ResidualBlock {
            slot: 0,
            neurons: vec![Neuron::new(vec![0.0, 0.0], vec![0.0])],
        });
        // Slot 0 of a single-layer network is not between two layers.
        assert!(net.validate().is_err());
    }
}
