//! Candidate gates attached to a base network.
//!
//! An [`AugmentedNetwork`] wraps a frozen base network plus a list of
//! [`CandidateGate`]s, each a potential structure change controlled by a
//! bounded width `epsilon` and a unit-ball direction `delta`:
//!
//! * `Split { layer, host }`: the host's contribution becomes
//!   `(w/2) * (act(theta + eps*delta) + act(theta - eps*delta))`. At
//!   `eps = 0` this is bit-identical to the host (halving and doubling by two
//!   are exact, and `x + 0*delta` leaves `x` untouched), so unselected gates
//!   vanish without residue. `delta` spans the host's incoming weights.
//! * `NewNeuron { layer }`: adds `eps * delta_out[o] * act(delta_in . [v,1])`
//!   to each layer output `o`. `delta` concatenates incoming weights (with
//!   bias) and output weights, constrained jointly.
//! * `UnlockCopy { layer, host }`: the host's contribution becomes
//!   `w * act((theta + eps*delta) . [v,1])`. At `eps = 0` this is the host
//!   exactly; a nonzero selection re-seats the slot on a perturbed copy of
//!   the host's incoming weights while keeping its output weight. This is
//!   the continual-learning unlock move, where the untouched original is
//!   retained elsewhere.
//! * `LayerNeuron { slot }`: same form as a new neuron but reading and
//!   feeding the interface at an *empty* residual slot, so a selected gate
//!   founds a new identity-plus-residual layer there.
//!
//! A host neuron can carry at most one structural gate (split or unlock) at
//! a time; the gate builders here never produce both.
//!
//! Gates start at `epsilon = step_size` on the boundary of the allowed
//! interval and keep `|epsilon| <= step_size`, `|delta| <= 1` throughout via
//! projection (see the growth module). [`AugmentedNetwork::materialize`]
//! turns chosen widths into a plain network again; everything else about the
//! base is left byte-for-byte unchanged.

use rand::Rng;

use crate::autodiff::{record_forward, GroupId, NodeRef, ParameterStore, Tape};
use crate::data::{random_direction, Dataset};
use crate::error::{Error, Result};
use crate::network::{
    affine_point, emit_activation, emit_head_loss, emit_input_columns, emit_unit, GrowableNetwork,
    NetBinding, Neuron, ResidualBlock,
};

/// Rescales `v` onto the unit ball if its Euclidean norm exceeds one.
pub fn project_unit_ball(v: &mut [f64]) {
    let norm_sq: f64 = v.iter().map(|x| x * x).sum();
    if norm_sq > 1.0 {
        let inv = 1.0 / norm_sq.sqrt();
        for x in v.iter_mut() {
            *x *= inv;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GateKind {
    /// Split an existing neuron into two perturbed half-weight copies.
    Split { layer: usize, host: usize },
    /// Append a brand-new neuron to a layer.
    NewNeuron { layer: usize },
    /// Perturb an existing neuron's incoming weights in place (the
    /// continual-learning unlock move).
    UnlockCopy { layer: usize, host: usize },
    /// Found a residual layer at an empty slot with one new neuron.
    LayerNeuron { slot: usize },
}

impl GateKind {
    pub fn name(&self) -> &'static str {
        match self {
            GateKind::Split { .. } => "split",
            GateKind::NewNeuron { .. } => "new-neuron",
            GateKind::UnlockCopy { .. } => "unlock-copy",
            GateKind::LayerNeuron { .. } => "layer-neuron",
        }
    }

    /// The host neuron this gate re-seats, if any.
    fn host_of(&self, layer: usize, neuron: usize) -> bool {
        match *self {
            GateKind::Split { layer: l, host } | GateKind::UnlockCopy { layer: l, host } => {
                l == layer && host == neuron
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CandidateGate {
    pub kind: GateKind,
    /// Gate width, always within `[-step_size, step_size]`.
    pub epsilon: f64,
    /// Direction on the unit ball. Splits span the host's incoming weights;
    /// new-neuron and layer-neuron gates concatenate incoming (bias last)
    /// and output weights.
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AugmentedNetwork {
    pub base: GrowableNetwork,
    pub step_size: f64,
    pub gates: Vec<CandidateGate>,
}

/// Parameter groups backing one gate on a tape: the width plus one or two
/// direction groups (incoming / output parts).
#[derive(Debug, Clone)]
pub struct GateGroupIds {
    pub eps: GroupId,
    pub deltas: Vec<GroupId>,
}

/// A recorded gated-loss program: tape, store, and the gate group handles the
/// two-step optimizer needs. Base parameters are registered frozen.
pub struct GateProgram {
    pub store: ParameterStore,
    pub tape: Tape,
    pub gates: Vec<GateGroupIds>,
}

impl AugmentedNetwork {
    pub fn new(base: GrowableNetwork, step_size: f64) -> Result<Self> {
        base.validate()?;
        if !(step_size > 0.0) || !step_size.is_finite() {
            return Err(Error::contract(format!(
                "step size must be positive and finite, got {step_size}"
            )));
        }
        Ok(AugmentedNetwork {
            base,
            step_size,
            gates: Vec::new(),
        })
    }

    /// Attaches the full width candidate set for one layer: a split gate per
    /// existing neuron (in neuron order) followed by `m_prime` new-neuron
    /// gates. Directions are `N(0, init_scale^2)` draws projected onto the
    /// unit ball; widths start at `step_size`.
    pub fn add_width_gates(
        &mut self,
        layer: usize,
        m_prime: usize,
        init_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if layer >= self.base.layers.len() {
            return Err(Error::structural(format!("no layer {layer}")));
        }
        let theta_len = self.base.layers[layer].in_dim() + 1;
        for host in 0..self.base.layers[layer].neurons.len() {
            self.gates.push(CandidateGate {
                kind: GateKind::Split { layer, host },
                epsilon: self.step_size,
                delta: random_direction(theta_len, init_scale, rng),
            });
        }
        self.add_new_gates(layer, m_prime, init_scale, rng)
    }

    /// Attaches `m_prime` brand-new-neuron gates to one layer.
    pub fn add_new_gates(
        &mut self,
        layer: usize,
        m_prime: usize,
        init_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if layer >= self.base.layers.len() {
            return Err(Error::structural(format!("no layer {layer}")));
        }
        let theta_len = self.base.layers[layer].in_dim() + 1;
        let out_dim = self.base.layers[layer].out_dim();
        for _ in 0..m_prime {
            self.gates.push(CandidateGate {
                kind: GateKind::NewNeuron { layer },
                epsilon: self.step_size,
                delta: random_direction(theta_len + out_dim, init_scale, rng),
            });
        }
        Ok(())
    }

    /// Attaches an unlock-copy gate for each listed host neuron, in the
    /// given order. Hosts must be distinct and carry no other structural
    /// gate.
    pub fn add_unlock_gates(
        &mut self,
        layer: usize,
        hosts: &[usize],
        init_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if layer >= self.base.layers.len() {
            return Err(Error::structural(format!("no layer {layer}")));
        }
        let theta_len = self.base.layers[layer].in_dim() + 1;
        for &host in hosts {
            if host >= self.base.layers[layer].neurons.len() {
                return Err(Error::structural(format!(
                    "no neuron {host} in layer {layer}"
                )));
            }
            if self.gates.iter().any(|g| g.kind.host_of(layer, host)) {
                return Err(Error::structural(format!(
                    "neuron {host} in layer {layer} already carries a gate"
                )));
            }
            self.gates.push(CandidateGate {
                kind: GateKind::UnlockCopy { layer, host },
                epsilon: self.step_size,
                delta: random_direction(theta_len, init_scale, rng),
            });
        }
        Ok(())
    }

    /// Attaches `m_prime_per_slot` layer-neuron gates at every empty residual
    /// slot, in slot order.
    pub fn add_depth_gates(
        &mut self,
        m_prime_per_slot: usize,
        init_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        for slot in self.base.empty_slots() {
            let dim = self.base.layers[slot].out_dim();
            for _ in 0..m_prime_per_slot {
                self.gates.push(CandidateGate {
                    kind: GateKind::LayerNeuron { slot },
                    epsilon: self.step_size,
                    delta: random_direction(dim + 1 + dim, init_scale, rng),
                });
            }
        }
        Ok(())
    }

    /// Splits one gate's delta into its incoming part (bias last) and output
    /// part. The split kind has no output part.
    fn delta_parts<'a>(&self, gate: &'a CandidateGate) -> (&'a [f64], &'a [f64]) {
        match gate.kind {
            GateKind::Split { .. } | GateKind::UnlockCopy { .. } => (&gate.delta, &[]),
            GateKind::NewNeuron { layer } => {
                let d = self.base.layers[layer].in_dim() + 1;
                (&gate.delta[..d], &gate.delta[d..])
            }
            GateKind::LayerNeuron { slot } => {
                let d = self.base.layers[slot].out_dim() + 1;
                (&gate.delta[..d], &gate.delta[d..])
            }
        }
    }

    /// Gated forward pass for one point, using each gate's stored width
    /// unless `widths` overrides them (aligned with `gates`).
    pub fn forward_point(&self, x: &[f64], widths: Option<&[f64]>) -> Result<Vec<f64>> {
        if let Some(w) = widths {
            if w.len() != self.gates.len() {
                return Err(Error::structural("width override length mismatch"));
            }
        }
        let eps = |i: usize| widths.map_or(self.gates[i].epsilon, |w| w[i]);
        if x.len() != self.base.input_dim {
            return Err(Error::structural("input length mismatch"));
        }

        let mut v = x.to_vec();
        for (l, layer) in self.base.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.out_dim()];
            for (i, neuron) in layer.neurons.iter().enumerate() {
                let hosted = self.gates.iter().position(|g| g.kind.host_of(l, i));
                match hosted.map(|gi| (gi, &self.gates[gi].kind)) {
                    Some((gi, GateKind::Split { .. })) => {
                        // Accumulation order (bias first, inputs in order)
                        // matches `affine_point`, so eps = 0 is bit-exact.
                        let e = eps(gi);
                        let delta = &self.gates[gi].delta;
                        let last = v.len();
                        let mut plus = neuron.theta[last] + e * delta[last];
                        let mut minus = neuron.theta[last] - e * delta[last];
                        for (j, &xj) in v.iter().enumerate() {
                            plus += (neuron.theta[j] + e * delta[j]) * xj;
                            minus += (neuron.theta[j] - e * delta[j]) * xj;
                        }
                        let s = layer.activation.apply(plus) + layer.activation.apply(minus);
                        for (o, w) in out.iter_mut().zip(&neuron.out_weight) {
                            *o += (w / 2.0) * s;
                        }
                    }
                    Some((gi, _)) => {
                        let e = eps(gi);
                        let delta = &self.gates[gi].delta;
                        let last = v.len();
                        let mut pre = neuron.theta[last] + e * delta[last];
                        for (j, &xj) in v.iter().enumerate() {
                            pre += (neuron.theta[j] + e * delta[j]) * xj;
                        }
                        let a = layer.activation.apply(pre);
                        for (o, w) in out.iter_mut().zip(&neuron.out_weight) {
                            *o += w * a;
                        }
                    }
                    None => {
                        let a = layer.activation.apply(affine_point(&v, &neuron.theta));
                        for (o, w) in out.iter_mut().zip(&neuron.out_weight) {
                            *o += w * a;
                        }
                    }
                }
            }
            for (gi, gate) in self.gates.iter().enumerate() {
                if matches!(gate.kind, GateKind::NewNeuron { layer } if layer == l) {
                    let (din, dout) = self.delta_parts(gate);
                    let a = layer.activation.apply(affine_point(&v, din));
                    let e = eps(gi);
                    for (o, d) in out.iter_mut().zip(dout) {
                        *o += (e * d) * a;
                    }
                }
            }
            if let Some(block) = self.base.block_at(l) {
                let u = out.clone();
                for neuron in &block.neurons {
                    let a = layer.activation.apply(affine_point(&u, &neuron.theta));
                    for (o, w) in out.iter_mut().zip(&neuron.out_weight) {
                        *o += w * a;
                    }
                }
            }
            let has_slot_gates = self
                .gates
                .iter()
                .any(|g| matches!(g.kind, GateKind::LayerNeuron { slot } if slot == l));
            if has_slot_gates {
                let u = out.clone();
                for (gi, gate) in self.gates.iter().enumerate() {
                    if matches!(gate.kind, GateKind::LayerNeuron { slot } if slot == l) {
                        let (din, dout) = self.delta_parts(gate);
                        let a = layer.activation.apply(affine_point(&u, din));
                        let e = eps(gi);
                        for (o, d) in out.iter_mut().zip(dout) {
                            *o += (e * d) * a;
                        }
                    }
                }
            }
            v = out;
        }
        Ok(v)
    }

    /// Mean loss of the gated network over a dataset (plain evaluation).
    pub fn loss(&self, data: &Dataset, widths: Option<&[f64]>) -> Result<f64> {
        use crate::data::Targets;
        use crate::network::{xent_point, HeadKind};
        let n = data.n_points();
        let mut x = vec![0.0; data.input_dim()];
        let mut acc = 0.0;
        match (self.base.head, data.targets()) {
            (HeadKind::Regression, Targets::Regression(ys)) => {
                for j in 0..n {
                    data.copy_row(j, &mut x);
                    let out = self.forward_point(&x, widths)?;
                    let d = out[0] - ys[j];
                    acc += d * d;
                }
            }
            (HeadKind::Classification, Targets::Classification { labels, .. }) => {
                for j in 0..n {
                    data.copy_row(j, &mut x);
                    let out = self.forward_point(&x, widths)?;
                    acc += xent_point(&out, labels[j] as usize);
                }
            }
            _ => return Err(Error::structural("dataset targets do not match network head")),
        }
        Ok(acc / n as f64)
    }

    /// Records the gated loss as a tape program. Base parameters are
    /// registered frozen; gate widths and directions are trainable. With
    /// `penalty_weight > 0` the loss gains `penalty_weight * sum |delta|^2`.
    pub fn build_program(&self, data: &Dataset, penalty_weight: f64) -> Result<GateProgram> {
        let mut store = ParameterStore::new();
        let binding = self.base.register_params(&mut store)?;
        store.freeze_all();

        let mut gate_ids = Vec::with_capacity(self.gates.len());
        for gate in &self.gates {
            let eps = store.add_group(&[gate.epsilon])?;
            let (din, dout) = self.delta_parts(gate);
            let mut deltas = vec![store.add_group(din)?];
            if !dout.is_empty() {
                deltas.push(store.add_group(dout)?);
            }
            gate_ids.push(GateGroupIds { eps, deltas });
        }

        let (tape, _) = record_forward(&store, |b| {
            let inputs = emit_input_columns(b, data)?;
            let outputs = self.emit_gated_output(b, &binding, &gate_ids, &inputs)?;
            let mut loss = emit_head_loss(b, self.base.head, &outputs, data)?;
            if penalty_weight > 0.0 {
                let mut pen: Option<NodeRef> = None;
                for ids in &gate_ids {
                    for &dg in &ids.deltas {
                        let d = b.param(dg)?;
                        let sq = b.dot(d, d)?;
                        pen = Some(match pen {
                            Some(p) => b.add(p, sq)?,
                            None => sq,
                        });
                    }
                }
                let lambda = b.scalar(penalty_weight)?;
                let scaled = b.mul(lambda, pen.expect("gates exist"))?;
                loss = b.add(loss, scaled)?;
            }
            Ok(loss)
        })?;

        Ok(GateProgram {
            store,
            tape,
            gates: gate_ids,
        })
    }

    /// Tape emission of the gated forward pass, mirroring `forward_point`.
    fn emit_gated_output(
        &self,
        b: &mut crate::autodiff::TapeBuilder,
        binding: &NetBinding,
        gate_ids: &[GateGroupIds],
        inputs: &[NodeRef],
    ) -> Result<Vec<NodeRef>> {
        let mut v: Vec<NodeRef> = inputs.to_vec();
        let half = b.scalar(0.5)?;
        for (l, layer) in self.base.layers.iter().enumerate() {
            let mut out: Vec<Option<NodeRef>> = vec![None; layer.out_dim()];
            let push = |b: &mut crate::autodiff::TapeBuilder,
                        out: &mut Vec<Option<NodeRef>>,
                        o: usize,
                        term: NodeRef|
             -> Result<()> {
                out[o] = Some(match out[o].take() {
                    Some(acc) => b.add(acc, term)?,
                    None => term,
                });
                Ok(())
            };
            for (i, groups) in binding.layers[l].iter().enumerate() {
                let hosted = self.gates.iter().position(|g| g.kind.host_of(l, i));
                let theta = b.param(groups.theta)?;
                match hosted.map(|gi| (gi, &self.gates[gi].kind)) {
                    Some((gi, GateKind::Split { .. })) => {
                        let eps = b.param(gate_ids[gi].eps)?;
                        let delta = b.param(gate_ids[gi].deltas[0])?;
                        let md = b.mul(eps, delta)?;
                        let wp = b.add(theta, md)?;
                        let wm = b.sub(theta, md)?;
                        let ap = emit_unit(b, &v, wp, layer.activation)?;
                        let am = emit_unit(b, &v, wm, layer.activation)?;
                        let s = b.add(ap, am)?;
                        for o in 0..layer.out_dim() {
                            let w = b.param_elem(groups.out, o)?;
                            let hw = b.mul(w, half)?;
                            let term = b.mul(hw, s)?;
                            push(b, &mut out, o, term)?;
                        }
                    }
                    Some((gi, _)) => {
                        let eps = b.param(gate_ids[gi].eps)?;
                        let delta = b.param(gate_ids[gi].deltas[0])?;
                        let md = b.mul(eps, delta)?;
                        let wp = b.add(theta, md)?;
                        let act = emit_unit(b, &v, wp, layer.activation)?;
                        for o in 0..layer.out_dim() {
                            let w = b.param_elem(groups.out, o)?;
                            let term = b.mul(w, act)?;
                            push(b, &mut out, o, term)?;
                        }
                    }
                    None => {
                        let act = emit_unit(b, &v, theta, layer.activation)?;
                        for o in 0..layer.out_dim() {
                            let w = b.param_elem(groups.out, o)?;
                            let term = b.mul(w, act)?;
                            push(b, &mut out, o, term)?;
                        }
                    }
                }
            }
            for (gi, gate) in self.gates.iter().enumerate() {
                if matches!(gate.kind, GateKind::NewNeuron { layer } if layer == l) {
                    let eps = b.param(gate_ids[gi].eps)?;
                    let din = b.param(gate_ids[gi].deltas[0])?;
                    let pre = b.affine(&v, din)?;
                    let act = emit_activation(b, pre, layer.activation)?;
                    for o in 0..layer.out_dim() {
                        let dout = b.param_elem(gate_ids[gi].deltas[1], o)?;
                        let w = b.mul(eps, dout)?;
                        let term = b.mul(w, act)?;
                        push(b, &mut out, o, term)?;
                    }
                }
            }
            let mut outv: Vec<NodeRef> = out.into_iter().map(|o| o.expect("layer non-empty")).collect();
            if let Some(idx) = self.base.residual_blocks.iter().position(|bl| bl.slot == l) {
                let u = outv.clone();
                for groups in &binding.blocks[idx] {
                    let theta = b.param(groups.theta)?;
                    let act = emit_unit(b, &u, theta, layer.activation)?;
                    for (o, slot) in outv.iter_mut().enumerate() {
                        let w = b.param_elem(groups.out, o)?;
                        let term = b.mul(w, act)?;
                        *slot = b.add(*slot, term)?;
                    }
                }
            }
            let has_slot_gates = self
                .gates
                .iter()
                .any(|g| matches!(g.kind, GateKind::LayerNeuron { slot } if slot == l));
            if has_slot_gates {
                let u = outv.clone();
                for (gi, gate) in self.gates.iter().enumerate() {
                    if matches!(gate.kind, GateKind::LayerNeuron { slot } if slot == l) {
                        let eps = b.param(gate_ids[gi].eps)?;
                        let din = b.param(gate_ids[gi].deltas[0])?;
                        let pre = b.affine(&u, din)?;
                        let act = emit_activation(b, pre, layer.activation)?;
                        for (o, slot) in outv.iter_mut().enumerate() {
                            let dout = b.param_elem(gate_ids[gi].deltas[1], o)?;
                            let w = b.mul(eps, dout)?;
                            let term = b.mul(w, act)?;
                            *slot = b.add(*slot, term)?;
                        }
                    }
                }
            }
            v = outv;
        }
        Ok(v)
    }

    /// Copies trained gate parameters back from a program's store.
    pub fn read_back(&mut self, prog: &GateProgram) -> Result<()> {
        if prog.gates.len() != self.gates.len() {
            return Err(Error::structural("program does not match gate list"));
        }
        for (gate, ids) in self.gates.iter_mut().zip(&prog.gates) {
            gate.epsilon = prog.store.group_slice(ids.eps)?[0];
            let mut delta = Vec::with_capacity(gate.delta.len());
            for &dg in &ids.deltas {
                delta.extend_from_slice(prog.store.group_slice(dg)?);
            }
            if delta.len() != gate.delta.len() {
                return Err(Error::structural("direction length changed"));
            }
            gate.delta = delta;
        }
        Ok(())
    }

    /// Applies selected widths and returns the resulting plain network.
    ///
    /// `widths` aligns with `gates`; entries must satisfy
    /// `|width| <= step_size`. Zero-width gates vanish. Unlock gates shift
    /// their host's incoming weights in place; split children occupy the
    /// host's position (plus child first); new neurons append in gate order;
    /// layer-neuron gates found one residual block per slot holding its
    /// selected gates in order.
    pub fn materialize(&self, widths: &[f64]) -> Result<GrowableNetwork> {
        if widths.len() != self.gates.len() {
            return Err(Error::structural("width vector does not match gate list"));
        }
        for (i, (&w, gate)) in widths.iter().zip(&self.gates).enumerate() {
            if !w.is_finite() || w.abs() > self.step_size {
                return Err(Error::contract(format!(
                    "width {w} for gate {i} ({}) outside [-{step}, {step}]",
                    gate.kind.name(),
                    step = self.step_size
                )));
            }
        }

        let mut net = self.base.clone();
        // Unlock gates first: they mutate hosts in place, before any split
        // insertion can shift neuron indices.
        for (gi, gate) in self.gates.iter().enumerate() {
            if let GateKind::UnlockCopy { layer, host } = gate.kind {
                if widths[gi] != 0.0 {
                    let theta = &mut net.layers[layer].neurons[host].theta;
                    for (t, d) in theta.iter_mut().zip(&gate.delta) {
                        *t += widths[gi] * d;
                    }
                }
            }
        }

        // Then splits, walking hosts from the back so earlier indices stay
        // valid while children are inserted.
        let mut splits: Vec<(usize, usize, usize)> = Vec::new();
        for (gi, gate) in self.gates.iter().enumerate() {
            if let GateKind::Split { layer, host } = gate.kind {
                if widths[gi] != 0.0 {
                    splits.push((layer, host, gi));
                }
            }
        }
        splits.sort_by_key(|&(l, h, _)| (l, std::cmp::Reverse(h)));
        for (l, h, gi) in splits {
            let host = net.layers[l].neurons[h].clone();
            let e = widths[gi];
            let delta = &self.gates[gi].delta;
            let mut plus = host.clone();
            let mut minus = host;
            for ((p, m), d) in plus.theta.iter_mut().zip(&mut minus.theta).zip(delta) {
                *p += e * d;
                *m -= e * d;
            }
            for (p, m) in plus.out_weight.iter_mut().zip(&mut minus.out_weight) {
                *p /= 2.0;
                *m /= 2.0;
            }
            net.layers[l].neurons[h] = plus;
            net.layers[l].neurons.insert(h + 1, minus);
        }

        for (gi, gate) in self.gates.iter().enumerate() {
            if let GateKind::NewNeuron { layer } = gate.kind {
                if widths[gi] != 0.0 {
                    let (din, dout) = self.delta_parts(gate);
                    let out = dout.iter().map(|d| widths[gi] * d).collect();
                    net.layers[layer].neurons.push(Neuron::new(din.to_vec(), out));
                }
            }
        }

        let mut new_blocks: Vec<ResidualBlock> = Vec::new();
        for (gi, gate) in self.gates.iter().enumerate() {
            if let GateKind::LayerNeuron { slot } = gate.kind {
                if widths[gi] != 0.0 {
                    let (din, dout) = self.delta_parts(gate);
                    let neuron = Neuron::new(
                        din.to_vec(),
                        dout.iter().map(|d| widths[gi] * d).collect(),
                    );
                    match new_blocks.iter_mut().find(|b| b.slot == slot) {
                        Some(block) => block.neurons.push(neuron),
                        None => new_blocks.push(ResidualBlock {
                            slot,
                            neurons: vec![neuron],
                        }),
                    }
                }
            }
        }
        net.residual_blocks.extend(new_blocks);
        net.residual_blocks.sort_by_key(|b| b.slot);

        net.validate()?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_toy_dataset, gen_toy_truth, stream_rng};
    use crate::network::{Activation, HeadKind};

    fn toy_aug(neurons: usize, m_prime: usize, seed: u64) -> AugmentedNetwork {
        let mut rng = stream_rng(seed, "net", 0);
        let base = GrowableNetwork::rbf_regression(1, neurons, 1.0, &mut rng);
        let mut aug = AugmentedNetwork::new(base, 0.01).unwrap();
        let mut grng = stream_rng(seed, "gates", 0);
        aug.add_width_gates(0, m_prime, 0.1, &mut grng).unwrap();
        aug
    }

    #[test]
    fn candidate_count_is_hosts_plus_m_prime() {
        let aug = toy_aug(3, 5, 1);
        assert_eq!(aug.gates.len(), 8);
        assert_eq!(
            aug.gates.iter().filter(|g| matches!(g.kind, GateKind::Split { .. })).count(),
            3
        );
        // Every direction is inside the unit ball, every width on the boundary.
        for g in &aug.gates {
            let norm: f64 = g.delta.iter().map(|d| d * d).sum::<f64>().sqrt();
            assert!(norm <= 1.0 + 1e-12);
            assert_eq!(g.epsilon, 0.01);
        }
    }

    #[test]
    fn all_gates_off_is_bit_exact_identity() {
        let aug = toy_aug(4, 3, 2);
        let zeros = vec![0.0; aug.gates.len()];
        for i in 0..60 {
            let x = -5.0 + 10.0 * i as f64 / 59.0;
            let gated = aug.forward_point(&[x], Some(&zeros)).unwrap()[0];
            let plain = aug.base.forward_point(&[x]).unwrap()[0];
            assert_eq!(
                gated.to_bits(),
                plain.to_bits(),
                "zero-width gates altered the function at x = {x}"
            );
        }
    }

    #[test]
    fn gated_tape_matches_gated_plain_eval() {
        let aug = toy_aug(3, 2, 3);
        let truth = gen_toy_truth(3);
        let data = gen_toy_dataset(&truth, 50, 3).unwrap();
        let mut prog = aug.build_program(&data, 0.0).unwrap();
        let tape_loss = prog.tape.forward(&prog.store).unwrap();
        let plain_loss = aug.loss(&data, None).unwrap();
        assert!(
            (tape_loss - plain_loss).abs() <= 1e-12 * plain_loss.abs().max(1.0),
            "tape {tape_loss} vs plain {plain_loss}"
        );
    }

    #[test]
    fn materialized_network_matches_gated_evaluation() {
        let aug = toy_aug(3, 3, 4);
        // Mixed selection: one split, one new neuron, signs both ways.
        let mut widths = vec![0.0; aug.gates.len()];
        widths[1] = 0.01;
        widths[4] = -0.01;
        let net = aug.materialize(&widths).unwrap();
        assert_eq!(net.total_neurons(), 5); // 3 + split child + new neuron
        for i in 0..60 {
            let x = -5.0 + 10.0 * i as f64 / 59.0;
            let gated = aug.forward_point(&[x], Some(&widths)).unwrap()[0];
            let plain = net.forward_point(&[x]).unwrap()[0];
            assert!(
                (gated - plain).abs() <= 1e-12 * gated.abs().max(1.0),
                "materialization drifted at x = {x}: {gated} vs {plain}"
            );
        }
    }

    #[test]
    fn split_children_replace_their_host() {
        let aug = toy_aug(3, 0, 5);
        let host_theta = aug.base.layers[0].neurons[1].theta.clone();
        let host_w = aug.base.layers[0].neurons[1].out_weight[0];
        let mut widths = vec![0.0; 3];
        widths[1] = 0.01;
        let net = aug.materialize(&widths).unwrap();
        assert_eq!(net.count_neurons(0), 4);
        let plus = &net.layers[0].neurons[1];
        let minus = &net.layers[0].neurons[2];
        for j in 0..2 {
            let d = 0.01 * aug.gates[1].delta[j];
            assert!((plus.theta[j] - (host_theta[j] + d)).abs() < 1e-15);
            assert!((minus.theta[j] - (host_theta[j] - d)).abs() < 1e-15);
        }
        assert_eq!(plus.out_weight[0], host_w / 2.0);
        assert_eq!(minus.out_weight[0], host_w / 2.0);
        // The untouched neurons kept their exact weights.
        assert_eq!(net.layers[0].neurons[0].theta, aug.base.layers[0].neurons[0].theta);
        assert_eq!(net.layers[0].neurons[3].theta, aug.base.layers[0].neurons[2].theta);
    }

    #[test]
    fn new_neuron_output_deviation_scales_linearly() {
        // A single new-neuron gate produces an O(eps) output change: the
        // log-log slope over a halving sweep must sit near 1.
        let mut rng = stream_rng(6, "net", 0);
        let base = GrowableNetwork::rbf_regression(1, 2, 1.0, &mut rng);
        let mut aug = AugmentedNetwork::new(base, 0.02).unwrap();
        let mut grng = stream_rng(6, "gates", 0);
        aug.add_width_gates(0, 1, 0.5, &mut grng).unwrap();
        let gi = aug.gates.len() - 1;
        assert!(matches!(aug.gates[gi].kind, GateKind::NewNeuron { .. }));

        let deviation = |eps: f64| -> f64 {
            let mut widths = vec![0.0; aug.gates.len()];
            widths[gi] = eps;
            let mut max_dev: f64 = 0.0;
            for i in 0..40 {
                let x = -5.0 + 10.0 * i as f64 / 39.0;
                let gated = aug.forward_point(&[x], Some(&widths)).unwrap()[0];
                let plain = aug.base.forward_point(&[x]).unwrap()[0];
                max_dev = max_dev.max((gated - plain).abs());
            }
            max_dev
        };
        let d1 = deviation(0.02);
        let d2 = deviation(0.01);
        assert!(d1 > 0.0 && d2 > 0.0, "gate has no effect");
        let slope = (d1 / d2).log2();
        assert!(
            (slope - 1.0).abs() <= 0.1,
            "new-neuron deviation slope {slope} not linear"
        );
    }

    #[test]
    fn split_output_deviation_scales_quadratically() {
        // Splitting is function-preserving to first order, so the deviation
        // from the base must shrink like eps^2 (log-log slope near 2).
        let mut rng = stream_rng(7, "net", 0);
        let base = GrowableNetwork::rbf_regression(1, 2, 1.0, &mut rng);
        let mut aug = AugmentedNetwork::new(base, 0.02).unwrap();
        let mut grng = stream_rng(7, "gates", 0);
        aug.add_width_gates(0, 0, 0.5, &mut grng).unwrap();

        let deviation = |eps: f64| -> f64 {
            let widths: Vec<f64> = aug.gates.iter().map(|_| eps).collect();
            let mut total = 0.0;
            for i in 0..40 {
                let x = -5.0 + 10.0 * i as f64 / 39.0;
                let gated = aug.forward_point(&[x], Some(&widths)).unwrap()[0];
                let plain = aug.base.forward_point(&[x]).unwrap()[0];
                total += (gated - plain).abs();
            }
            total
        };
        let d1 = deviation(0.02);
        let d2 = deviation(0.01);
        assert!(d1 > 0.0 && d2 > 0.0);
        let slope = (d1 / d2).log2();
        assert!(
            (slope - 2.0).abs() <= 0.2,
            "split deviation slope {slope} not quadratic"
        );
    }

    /// 2-input classifier with unlock gates on a subset of hosts, the shape
    /// the continual learner builds.
    fn unlock_aug(seed: u64) -> (AugmentedNetwork, crate::data::Dataset) {
        let mut rng = stream_rng(seed, "net", 0);
        let base = GrowableNetwork::mlp(
            2,
            &[(5, 4)],
            Activation::Rectifier,
            HeadKind::Classification,
            0.8,
            &mut rng,
        );
        let mut aug = AugmentedNetwork::new(base, 0.01).unwrap();
        let mut grng = stream_rng(seed, "gates", 0);
        aug.add_unlock_gates(0, &[0, 2, 4], 0.1, &mut grng).unwrap();
        aug.add_new_gates(0, 2, 0.1, &mut grng).unwrap();
        let tasks = crate::data::gen_cl_tasks(1, seed).unwrap();
        (aug, tasks.into_iter().next().unwrap())
    }

    #[test]
    fn unlock_gates_off_is_bit_exact_identity() {
        let (aug, data) = unlock_aug(11);
        let zeros = vec![0.0; aug.gates.len()];
        let mut x = vec![0.0; 2];
        for j in 0..data.n_points().min(100) {
            data.copy_row(j, &mut x);
            let gated = aug.forward_point(&x, Some(&zeros)).unwrap();
            let plain = aug.base.forward_point(&x).unwrap();
            for (g, p) in gated.iter().zip(&plain) {
                assert_eq!(g.to_bits(), p.to_bits(), "zero-width unlock gate leaked");
            }
        }
    }

    #[test]
    fn unlock_tape_matches_plain_eval() {
        let (aug, data) = unlock_aug(12);
        let mut prog = aug.build_program(&data, 0.0).unwrap();
        let tape_loss = prog.tape.forward(&prog.store).unwrap();
        let plain_loss = aug.loss(&data, None).unwrap();
        assert!(
            (tape_loss - plain_loss).abs() <= 1e-12 * plain_loss.abs().max(1.0),
            "tape {tape_loss} vs plain {plain_loss}"
        );
    }

    #[test]
    fn unlock_materializes_in_place() {
        let (aug, data) = unlock_aug(13);
        let mut widths = vec![0.0; aug.gates.len()];
        widths[1] = -0.01; // host 2
        let net = aug.materialize(&widths).unwrap();
        assert_eq!(net.total_neurons(), 5, "unlock must not change the count");
        for (i, (a, b)) in net.layers[0]
            .neurons
            .iter()
            .zip(&aug.base.layers[0].neurons)
            .enumerate()
        {
            assert_eq!(a.out_weight, b.out_weight);
            if i == 2 {
                for (j, (p, q)) in a.theta.iter().zip(&b.theta).enumerate() {
                    let want = q - 0.01 * aug.gates[1].delta[j];
                    assert_eq!(*p, want);
                }
            } else {
                assert_eq!(a.theta, b.theta, "neuron {i} moved without a width");
            }
        }
        // The materialized shift agrees with the gated evaluation.
        let mut x = vec![0.0; 2];
        for j in 0..data.n_points().min(40) {
            data.copy_row(j, &mut x);
            let gated = aug.forward_point(&x, Some(&widths)).unwrap();
            let plain = net.forward_point(&x).unwrap();
            for (g, p) in gated.iter().zip(&plain) {
                assert!((g - p).abs() <= 1e-12 * g.abs().max(1.0));
            }
        }
    }

    #[test]
    fn unlock_gate_rejects_double_hosting() {
        let (mut aug, _) = unlock_aug(14);
        let mut rng = stream_rng(14, "more", 0);
        let err = aug.add_unlock_gates(0, &[2], 0.1, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Structural(_)), "{err}");
    }

    #[test]
    fn depth_gates_only_attach_at_empty_slots() {
        let mut rng = stream_rng(8, "net", 0);
        let mut base = GrowableNetwork::mlp(
            2,
            &[(3, 3), (3, 3), (3, 2)],
            Activation::Rectifier,
            HeadKind::Classification,
            0.7,
            &mut rng,
        );
        base.residual_blocks.push(ResidualBlock {
            slot: 0,
            neurons: vec![Neuron::random(3, 3, 0.5, &mut rng)],
        });
        let mut aug = AugmentedNetwork::new(base, 0.01).unwrap();
        aug.add_depth_gates(4, 0.1, &mut rng).unwrap();
        assert_eq!(aug.gates.len(), 4, "only slot 1 is empty");
        assert!(aug
            .gates
            .iter()
            .all(|g| matches!(g.kind, GateKind::LayerNeuron { slot: 1 })));

        // Selecting two of them founds one block with two neurons at slot 1.
        let widths = vec![0.01, 0.0, -0.01, 0.0];
        let net = aug.materialize(&widths).unwrap();
        assert_eq!(net.residual_blocks.len(), 2);
        assert_eq!(net.residual_blocks[1].slot, 1);
        assert_eq!(net.residual_blocks[1].neurons.len(), 2);
    }

    #[test]
    fn materialize_rejects_out_of_range_widths() {
        let aug = toy_aug(2, 1, 9);
        let mut widths = vec![0.0; aug.gates.len()];
        widths[0] = 0.0100001;
        assert!(matches!(
            aug.materialize(&widths),
            Err(Error::Contract(_))
        ));
        assert!(aug.materialize(&[0.0; 2]).is_err(), "length mismatch accepted");
    }

    #[test]
    fn projection_helper_only_shrinks() {
        let mut v = vec![3.0, 4.0];
        project_unit_ball(&mut v);
        assert!((v[0] - 0.6).abs() < 1e-15);
        assert!((v[1] - 0.8).abs() < 1e-15);
        let mut small = vec![0.1, 0.2];
        let copy = small.clone();
        project_unit_ball(&mut small);
        assert_eq!(small, copy, "inside-ball vector must be untouched");
    }
}
