//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every node on the tape holds a vector value: either one scalar or a batch
//! of per-example values, with scalar-to-batch broadcasting in the elementwise
//! ops. Recording is eager (each node's value is computed as it is appended),
//! and [`Tape::forward`] re-evaluates the recorded graph in place after
//! parameter updates. Optimization loops therefore record once and then
//! alternate `forward` / `backward` / [`sgd_step`] without reallocating.
//!
//! Parameters live in a [`ParameterStore`]: a flat `f64` buffer carved into
//! named groups. A tape is bound to the store it was recorded against and
//! refuses to evaluate against any other. Frozen parameters receive exactly
//! zero gradient and are never touched by the optimizer, bit for bit.
//!
//! Evaluation order equals recording order and all reductions run in index
//! order, so forward values, gradients, and optimizer steps are deterministic
//! for a given store and tape.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to one parameter group inside a specific [`ParameterStore`].
///
/// The handle remembers which store created it; using it against another
/// store is a structural error rather than silent aliasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupId {
    store: u64,
    index: u32,
}

/// Flat parameter buffer split into non-overlapping, covering groups.
///
/// Groups model one logical parameter vector each (a neuron's incoming
/// weights, a gate's direction, a single gate width). Freezing is tracked per
/// scalar but toggled per group.
pub struct ParameterStore {
    id: u64,
    values: Vec<f64>,
    frozen: Vec<bool>,
    /// (offset, len) per group, in creation order. Groups tile `values`.
    groups: Vec<(usize, usize)>,
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            frozen: Vec::new(),
            groups: Vec::new(),
        }
    }

    /// Appends a group initialized from `init`. Empty groups are not allowed.
    pub fn add_group(&mut self, init: &[f64]) -> Result<GroupId> {
        if init.is_empty() {
            return Err(Error::structural("parameter group must be non-empty"));
        }
        if init.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("parameter group initialized with non-finite value"));
        }
        let offset = self.values.len();
        self.values.extend_from_slice(init);
        self.frozen.extend(std::iter::repeat(false).take(init.len()));
        let index = self.groups.len() as u32;
        self.groups.push((offset, init.len()));
        Ok(GroupId { store: self.id, index })
    }

    fn group_range(&self, g: GroupId) -> Result<std::ops::Range<usize>> {
        if g.store != self.id {
            return Err(Error::structural(
                "parameter group belongs to a different store",
            ));
        }
        let (off, len) = self.groups[g.index as usize];
        Ok(off..off + len)
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn group_len(&self, g: GroupId) -> Result<usize> {
        Ok(self.group_range(g)?.len())
    }

    pub fn group_slice(&self, g: GroupId) -> Result<&[f64]> {
        let r = self.group_range(g)?;
        Ok(&self.values[r])
    }

    pub fn group_slice_mut(&mut self, g: GroupId) -> Result<&mut [f64]> {
        let r = self.group_range(g)?;
        Ok(&mut self.values[r])
    }

    pub fn set_group(&mut self, g: GroupId, vals: &[f64]) -> Result<()> {
        let r = self.group_range(g)?;
        if r.len() != vals.len() {
            return Err(Error::structural(format!(
                "set_group: expected {} values, got {}",
                r.len(),
                vals.len()
            )));
        }
        self.values[r].copy_from_slice(vals);
        Ok(())
    }

    pub fn freeze_group(&mut self, g: GroupId, frozen: bool) -> Result<()> {
        let r = self.group_range(g)?;
        for f in &mut self.frozen[r] {
            *f = frozen;
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for f in &mut self.frozen {
            *f = true;
        }
    }

    pub fn group_frozen(&self, g: GroupId) -> Result<bool> {
        let r = self.group_range(g)?;
        Ok(self.frozen[r].iter().all(|&f| f))
    }

    /// Raw scalar access by flat index, for diagnostics and probing.
    pub fn raw_value(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn set_raw_value(&mut self, i: usize, v: f64) {
        self.values[i] = v;
    }

    pub fn raw_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    /// Copy of the full flat parameter vector, in group creation order.
    pub fn snapshot(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn id(&self) -> u64 {
        self.id
    }
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of a scalar loss with respect to every parameter in one store.
///
/// Entries for frozen parameters are exactly `0.0`.
pub struct Gradient {
    store_id: u64,
    values: Vec<f64>,
}

impl Gradient {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn group(&self, store: &ParameterStore, g: GroupId) -> Result<&[f64]> {
        if self.store_id != store.id {
            return Err(Error::structural("gradient belongs to a different store"));
        }
        let r = store.group_range(g)?;
        Ok(&self.values[r])
    }
}

/// One plain gradient-descent step: `p -= lr * g` on unfrozen parameters.
///
/// Frozen parameters are left bit-identical. Errors if the learning rate is
/// not a positive finite number, if the gradient belongs to another store, or
/// if any unfrozen gradient entry is non-finite (the store is not modified in
/// that case).
pub fn sgd_step(store: &mut ParameterStore, grad: &Gradient, learning_rate: f64) -> Result<()> {
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(Error::contract(format!(
            "learning rate must be positive and finite, got {learning_rate}"
        )));
    }
    if grad.store_id != store.id {
        return Err(Error::structural("gradient belongs to a different store"));
    }
    if grad.values.len() != store.values.len() {
        return Err(Error::structural(
            "gradient length does not match store (parameters added after backward?)",
        ));
    }
    for (i, (&g, &f)) in grad.values.iter().zip(&store.frozen).enumerate() {
        if !f && !g.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite gradient entry at parameter {i}"
            )));
        }
    }
    for ((v, &g), &f) in store.values.iter_mut().zip(&grad.values).zip(&store.frozen) {
        if !f {
            *v -= learning_rate * g;
        }
    }
    Ok(())
}

/// Reference to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef(u32);

impl NodeRef {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

enum Op {
    /// Fixed data captured at record time.
    Const,
    /// Whole parameter group, value length = group length.
    Param { group: GroupId },
    /// Single scalar read out of a parameter group.
    ParamElem { group: GroupId, index: usize },
    Add(NodeRef, NodeRef),
    Sub(NodeRef, NodeRef),
    Mul(NodeRef, NodeRef),
    Div(NodeRef, NodeRef),
    Neg(NodeRef),
    Exp(NodeRef),
    Relu(NodeRef),
    /// Scalar product of two equal-length vectors.
    Dot(NodeRef, NodeRef),
    /// `out[j] = w[d] + sum_i w[i] * x_i[j]` for `d` input nodes and a
    /// weight node of length `d + 1` (bias last).
    Affine { inputs: Box<[NodeRef]>, weights: NodeRef },
    /// Elementwise `(a - b)^2`.
    SquaredError(NodeRef, NodeRef),
    /// Scalar mean over one node's entries.
    Mean(NodeRef),
    /// Per-example `logsumexp(z) - z[label]` over K logit nodes.
    SoftmaxXent { logits: Box<[NodeRef]>, labels: Box<[u32]> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param { .. } => "param",
            Op::ParamElem { .. } => "param-elem",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Exp(..) => "exp",
            Op::Relu(..) => "relu",
            Op::Dot(..) => "dot",
            Op::Affine { .. } => "affine",
            Op::SquaredError(..) => "squared-error",
            Op::Mean(..) => "mean",
            Op::SoftmaxXent { .. } => "softmax-xent",
        }
    }
}

struct Node {
    op: Op,
    value: Box<[f64]>,
}

/// A recorded computation ending in a scalar loss.
///
/// The tape owns its node values and adjoint buffers, so repeated
/// `forward`/`backward` cycles do no allocation beyond the returned
/// [`Gradient`].
pub struct Tape {
    store_id: u64,
    nodes: Vec<Node>,
    loss: NodeRef,
    adjoints: Vec<Box<[f64]>>,
}

/// Builder handed to the recording closure of [`record_forward`].
pub struct TapeBuilder<'a> {
    store: &'a ParameterStore,
    nodes: Vec<Node>,
}

/// Records a forward computation and returns the finished tape together with
/// the loss value at the current parameters.
///
/// The closure builds the graph through the [`TapeBuilder`] and returns the
/// loss node, which must be scalar and must be the last node recorded. Any
/// non-finite intermediate aborts recording with a numeric error naming the
/// offending node.
pub fn record_forward<F>(store: &ParameterStore, build: F) -> Result<(Tape, f64)>
where
    F: FnOnce(&mut TapeBuilder) -> Result<NodeRef>,
{
    let mut builder = TapeBuilder {
        store,
        nodes: Vec::new(),
    };
    let loss = build(&mut builder)?;
    let nodes = builder.nodes;
    if loss.index() + 1 != nodes.len() {
        return Err(Error::structural(
            "loss must be the last node recorded on the tape",
        ));
    }
    if nodes[loss.index()].value.len() != 1 {
        return Err(Error::structural("loss node must be scalar"));
    }
    let adjoints = nodes
        .iter()
        .map(|n| vec![0.0; n.value.len()].into_boxed_slice())
        .collect();
    let value = nodes[loss.index()].value[0];
    Ok((
        Tape {
            store_id: store.id,
            nodes,
            loss,
            adjoints,
        },
        value,
    ))
}

/// Elementwise binary evaluation with scalar broadcasting on either side.
fn binary_eval(a: &[f64], b: &[f64], out: &mut [f64], f: impl Fn(f64, f64) -> f64) {
    if a.len() == b.len() {
        for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
            *o = f(x, y);
        }
    } else if a.len() == 1 {
        let x = a[0];
        for (o, &y) in out.iter_mut().zip(b) {
            *o = f(x, y);
        }
    } else {
        let y = b[0];
        for (o, &x) in out.iter_mut().zip(a) {
            *o = f(x, y);
        }
    }
}

/// Broadcast result length for a binary op, or an error when incompatible.
fn broadcast_len(a: usize, b: usize, what: &str) -> Result<usize> {
    if a == b {
        Ok(a)
    } else if a == 1 {
        Ok(b)
    } else if b == 1 {
        Ok(a)
    } else {
        Err(Error::structural(format!(
            "{what}: incompatible lengths {a} and {b}"
        )))
    }
}

/// Evaluates `op` into `out`, reading earlier nodes from `prior`.
///
/// Shared by eager recording and in-place re-evaluation so both paths produce
/// bit-identical values.
fn eval_op(op: &Op, prior: &[Node], store: &ParameterStore, out: &mut [f64]) -> Result<()> {
    let val = |r: NodeRef| -> &[f64] { &prior[r.index()].value };
    match op {
        Op::Const => {}
        Op::Param { group } => {
            out.copy_from_slice(store.group_slice(*group)?);
        }
        Op::ParamElem { group, index } => {
            out[0] = store.group_slice(*group)?[*index];
        }
        Op::Add(a, b) => binary_eval(val(*a), val(*b), out, |x, y| x + y),
        Op::Sub(a, b) => binary_eval(val(*a), val(*b), out, |x, y| x - y),
        Op::Mul(a, b) => binary_eval(val(*a), val(*b), out, |x, y| x * y),
        Op::Div(a, b) => binary_eval(val(*a), val(*b), out, |x, y| x / y),
        Op::Neg(a) => {
            for (o, &x) in out.iter_mut().zip(val(*a)) {
                *o = -x;
            }
        }
        Op::Exp(a) => {
            for (o, &x) in out.iter_mut().zip(val(*a)) {
                *o = x.exp();
            }
        }
        Op::Relu(a) => {
            for (o, &x) in out.iter_mut().zip(val(*a)) {
                *o = if x > 0.0 { x } else { 0.0 };
            }
        }
        Op::Dot(a, b) => {
            let (xa, xb) = (val(*a), val(*b));
            let mut acc = 0.0;
            for (&x, &y) in xa.iter().zip(xb) {
                acc += x * y;
            }
            out[0] = acc;
        }
        Op::Affine { inputs, weights } => {
            let w = val(*weights);
            let bias = w[inputs.len()];
            for o in out.iter_mut() {
                *o = bias;
            }
            for (i, inp) in inputs.iter().enumerate() {
                let x = val(*inp);
                let wi = w[i];
                if x.len() == 1 {
                    let c = wi * x[0];
                    for o in out.iter_mut() {
                        *o += c;
                    }
                } else {
                    for (o, &xv) in out.iter_mut().zip(x) {
                        *o += wi * xv;
                    }
                }
            }
        }
        Op::SquaredError(a, b) => binary_eval(val(*a), val(*b), out, |x, y| (x - y) * (x - y)),
        Op::Mean(a) => {
            let x = val(*a);
            let mut acc = 0.0;
            for &v in x {
                acc += v;
            }
            out[0] = acc / x.len() as f64;
        }
        Op::SoftmaxXent { logits, labels } => {
            let k = logits.len();
            for (j, o) in out.iter_mut().enumerate() {
                let mut m = f64::NEG_INFINITY;
                for l in logits.iter() {
                    let z = val(*l);
                    let zj = if z.len() == 1 { z[0] } else { z[j] };
                    if zj > m {
                        m = zj;
                    }
                }
                let mut sum = 0.0;
                for l in logits.iter() {
                    let z = val(*l);
                    let zj = if z.len() == 1 { z[0] } else { z[j] };
                    sum += (zj - m).exp();
                }
                let label = labels[j] as usize;
                debug_assert!(label < k);
                let zy = {
                    let z = val(logits[label]);
                    if z.len() == 1 {
                        z[0]
                    } else {
                        z[j]
                    }
                };
                *o = m + sum.ln() - zy;
            }
        }
    }
    Ok(())
}

impl<'a> TapeBuilder<'a> {
    fn node_len(&self, r: NodeRef) -> Result<usize> {
        self.nodes
            .get(r.index())
            .map(|n| n.value.len())
            .ok_or_else(|| Error::structural("node reference out of range"))
    }

    fn push(&mut self, op: Op, len: usize) -> Result<NodeRef> {
        let mut value = vec![0.0; len].into_boxed_slice();
        eval_op(&op, &self.nodes, self.store, &mut value)?;
        if let Some(pos) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite value in node {} ({}) at entry {pos}",
                self.nodes.len(),
                op.name()
            )));
        }
        let idx = self.nodes.len();
        if idx > u32::MAX as usize - 1 {
            return Err(Error::structural("tape too large"));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeRef(idx as u32))
    }

    /// Fixed vector captured on the tape; unchanged by re-evaluation.
    pub fn constant(&mut self, values: &[f64]) -> Result<NodeRef> {
        if values.is_empty() {
            return Err(Error::structural("constant node must be non-empty"));
        }
        let idx = self.nodes.len();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite value in node {idx} (const)"
            )));
        }
        self.nodes.push(Node {
            op: Op::Const,
            value: values.to_vec().into_boxed_slice(),
        });
        Ok(NodeRef(idx as u32))
    }

    /// Scalar constant.
    pub fn scalar(&mut self, v: f64) -> Result<NodeRef> {
        self.constant(&[v])
    }

    /// Reads a whole parameter group as a vector node.
    pub fn param(&mut self, group: GroupId) -> Result<NodeRef> {
        let len = self.store.group_len(group)?;
        self.push(Op::Param { group }, len)
    }

    /// Reads one scalar out of a parameter group.
    pub fn param_elem(&mut self, group: GroupId, index: usize) -> Result<NodeRef> {
        let len = self.store.group_len(group)?;
        if index >= len {
            return Err(Error::structural(format!(
                "param_elem index {index} out of range for group of length {len}"
            )));
        }
        self.push(Op::ParamElem { group, index }, 1)
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let len = broadcast_len(self.node_len(a)?, self.node_len(b)?, "add")?;
        self.push(Op::Add(a, b), len)
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let len = broadcast_len(self.node_len(a)?, self.node_len(b)?, "sub")?;
        self.push(Op::Sub(a, b), len)
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let len = broadcast_len(self.node_len(a)?, self.node_len(b)?, "mul")?;
        self.push(Op::Mul(a, b), len)
    }

    pub fn div(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let len = broadcast_len(self.node_len(a)?, self.node_len(b)?, "div")?;
        self.push(Op::Div(a, b), len)
    }

    pub fn neg(&mut self, a: NodeRef) -> Result<NodeRef> {
        let len = self.node_len(a)?;
        self.push(Op::Neg(a), len)
    }

    pub fn exp(&mut self, a: NodeRef) -> Result<NodeRef> {
        let len = self.node_len(a)?;
        self.push(Op::Exp(a), len)
    }

    /// Rectifier. The derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: NodeRef) -> Result<NodeRef> {
        let len = self.node_len(a)?;
        self.push(Op::Relu(a), len)
    }

    /// Scalar product of two equal-length nodes.
    pub fn dot(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (la, lb) = (self.node_len(a)?, self.node_len(b)?);
        if la != lb {
            return Err(Error::structural(format!(
                "dot: lengths differ ({la} vs {lb})"
            )));
        }
        self.push(Op::Dot(a, b), 1)
    }

    /// Affine combination `w[d] + sum_i w[i] * x_i` of `d` input nodes with a
    /// weight node of length `d + 1` (bias last). Inputs must share one batch
    /// length (scalars broadcast).
    pub fn affine(&mut self, inputs: &[NodeRef], weights: NodeRef) -> Result<NodeRef> {
        if inputs.is_empty() {
            return Err(Error::structural("affine needs at least one input"));
        }
        let wlen = self.node_len(weights)?;
        if wlen != inputs.len() + 1 {
            return Err(Error::structural(format!(
                "affine: weight node length {} does not match {} inputs + bias",
                wlen,
                inputs.len()
            )));
        }
        let mut len = 1;
        for r in inputs {
            let l = self.node_len(*r)?;
            len = broadcast_len(len, l, "affine inputs")?;
        }
        self.push(
            Op::Affine {
                inputs: inputs.to_vec().into_boxed_slice(),
                weights,
            },
            len,
        )
    }

    /// Elementwise squared difference `(a - b)^2`.
    pub fn squared_error(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let len = broadcast_len(self.node_len(a)?, self.node_len(b)?, "squared_error")?;
        self.push(Op::SquaredError(a, b), len)
    }

    /// Scalar mean over all entries of `a`.
    pub fn mean(&mut self, a: NodeRef) -> Result<NodeRef> {
        let len = self.node_len(a)?;
        if len == 0 {
            return Err(Error::structural("mean of empty node"));
        }
        self.push(Op::Mean(a), 1)
    }

    /// Per-example cross-entropy `logsumexp(z) - z[label]` over K logit
    /// nodes. Labels index the logit list and must all be in range.
    pub fn softmax_xent(&mut self, logits: &[NodeRef], labels: &[u32]) -> Result<NodeRef> {
        if logits.len() < 2 {
            return Err(Error::structural("softmax_xent needs at least two logits"));
        }
        if labels.is_empty() {
            return Err(Error::structural("softmax_xent needs at least one label"));
        }
        let mut len = 1;
        for r in logits {
            let l = self.node_len(*r)?;
            len = broadcast_len(len, l, "softmax_xent logits")?;
        }
        if len != labels.len() {
            return Err(Error::structural(format!(
                "softmax_xent: {} labels for batch length {len}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= logits.len()) {
            return Err(Error::structural(format!(
                "softmax_xent: label {bad} out of range for {} classes",
                logits.len()
            )));
        }
        self.push(
            Op::SoftmaxXent {
                logits: logits.to_vec().into_boxed_slice(),
                labels: labels.to_vec().into_boxed_slice(),
            },
            len,
        )
    }
}

/// Adds `src`, possibly reducing a batch adjoint onto a scalar operand.
fn accumulate(dst: &mut [f64], src: impl Iterator<Item = f64>) {
    if dst.len() == 1 {
        let mut acc = 0.0;
        for v in src {
            acc += v;
        }
        dst[0] += acc;
    } else {
        for (d, v) in dst.iter_mut().zip(src) {
            *d += v;
        }
    }
}

/// Reads entry `j` from a value that may be scalar-broadcast.
#[inline]
fn bget(v: &[f64], j: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[j]
    }
}

impl Tape {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn loss_node(&self) -> NodeRef {
        self.loss
    }

    /// Loss value from the most recent evaluation.
    pub fn loss_value(&self) -> f64 {
        self.nodes[self.loss.index()].value[0]
    }

    /// Value of an arbitrary node from the most recent evaluation.
    pub fn node_value(&self, r: NodeRef) -> &[f64] {
        &self.nodes[r.index()].value
    }

    fn check_store(&self, store: &ParameterStore) -> Result<()> {
        if store.id != self.store_id {
            return Err(Error::structural(
                "tape was recorded against a different parameter store",
            ));
        }
        Ok(())
    }

    /// Re-evaluates the recorded graph against current parameter values.
    ///
    /// Node values are updated in place; the result is bit-identical to
    /// re-recording the same graph. Errors on non-finite intermediates.
    pub fn forward(&mut self, store: &ParameterStore) -> Result<f64> {
        self.check_store(store)?;
        for i in 0..self.nodes.len() {
            let (prior, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            match node.op {
                Op::Const => {}
                _ => eval_op(&node.op, prior, store, &mut node.value)?,
            }
            if let Some(pos) = node.value.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite value in node {i} ({}) at entry {pos}",
                    node.op.name()
                )));
            }
        }
        Ok(self.loss_value())
    }

    /// Reverse pass from the loss node. Returns the gradient with respect to
    /// every parameter in the store; frozen entries are exactly zero.
    ///
    /// Uses the node values from the most recent `forward` (or from
    /// recording), so call it only when those match the store's parameters.
    pub fn backward(&mut self, store: &ParameterStore) -> Result<Gradient> {
        self.check_store(store)?;
        for a in &mut self.adjoints {
            for v in a.iter_mut() {
                *v = 0.0;
            }
        }
        self.adjoints[self.loss.index()][0] = 1.0;
        let mut grad = vec![0.0; store.values.len()];

        for i in (0..self.nodes.len()).rev() {
            let (prior_adj, rest_adj) = self.adjoints.split_at_mut(i);
            let adj: &[f64] = &rest_adj[0];
            let node = &self.nodes[i];
            let val = |r: NodeRef| -> &[f64] { &self.nodes[r.index()].value };
            match &node.op {
                Op::Const => {}
                Op::Param { group } => {
                    let r = store.group_range(*group)?;
                    for (g, &a) in grad[r].iter_mut().zip(adj.iter()) {
                        *g += a;
                    }
                }
                Op::ParamElem { group, index } => {
                    let r = store.group_range(*group)?;
                    grad[r.start + index] += adj[0];
                }
                Op::Add(a, b) => {
                    let n = adj.len();
                    accumulate(&mut prior_adj[a.index()], (0..n).map(|j| adj[j]));
                    accumulate(&mut prior_adj[b.index()], (0..n).map(|j| adj[j]));
                }
                Op::Sub(a, b) => {
                    let n = adj.len();
                    accumulate(&mut prior_adj[a.index()], (0..n).map(|j| adj[j]));
                    accumulate(&mut prior_adj[b.index()], (0..n).map(|j| -adj[j]));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let n = adj.len();
                    accumulate(
                        &mut prior_adj[a.index()],
                        (0..n).map(|j| bget(vb, j) * adj[j]),
                    );
                    accumulate(
                        &mut prior_adj[b.index()],
                        (0..n).map(|j| bget(va, j) * adj[j]),
                    );
                }
                Op::Div(a, b) => {
                    let (vb, vout) = (val(*b), &node.value);
                    let n = adj.len();
                    accumulate(
                        &mut prior_adj[a.index()],
                        (0..n).map(|j| adj[j] / bget(vb, j)),
                    );
                    accumulate(
                        &mut prior_adj[b.index()],
                        (0..n).map(|j| -bget(vout, j) / bget(vb, j) * adj[j]),
                    );
                }
                Op::Neg(a) => {
                    let n = adj.len();
                    accumulate(&mut prior_adj[a.index()], (0..n).map(|j| -adj[j]));
                }
                Op::Exp(a) => {
                    let vout = &node.value;
                    let n = adj.len();
                    accumulate(
                        &mut prior_adj[a.index()],
                        (0..n).map(|j| vout[j] * adj[j]),
                    );
                }
                Op::Relu(a) => {
                    let va = val(*a);
                    let n = adj.len();
                    accumulate(
                        &mut prior_adj[a.index()],
                        (0..n).map(|j| if va[j] > 0.0 { adj[j] } else { 0.0 }),
                    );
                }
                Op::Dot(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let s = adj[0];
                    accumulate(&mut prior_adj[a.index()], vb.iter().map(|&y| s * y));
                    accumulate(&mut prior_adj[b.index()], va.iter().map(|&x| s * x));
                }
                Op::Affine { inputs, weights } => {
                    let w = val(*weights);
                    let n = adj.len();
                    for (i, inp) in inputs.iter().enumerate() {
                        let wi = w[i];
                        accumulate(&mut prior_adj[inp.index()], (0..n).map(|j| wi * adj[j]));
                    }
                    // Weight adjoints: dot of each input with adj, bias last.
                    let wadj = &mut prior_adj[weights.index()];
                    for (i, inp) in inputs.iter().enumerate() {
                        let x = val(*inp);
                        let mut acc = 0.0;
                        for (j, &a) in adj.iter().enumerate() {
                            acc += bget(x, j) * a;
                        }
                        wadj[i] += acc;
                    }
                    let mut acc = 0.0;
                    for &a in adj.iter() {
                        acc += a;
                    }
                    wadj[inputs.len()] += acc;
                }
                Op::SquaredError(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let n = adj.len();
                    accumulate(
                        &mut prior_adj[a.index()],
                        (0..n).map(|j| 2.0 * (bget(va, j) - bget(vb, j)) * adj[j]),
                    );
                    accumulate(
                        &mut prior_adj[b.index()],
                        (0..n).map(|j| -2.0 * (bget(va, j) - bget(vb, j)) * adj[j]),
                    );
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.index()].value.len();
                    let s = adj[0] / n as f64;
                    accumulate(&mut prior_adj[a.index()], (0..n).map(|_| s));
                }
                Op::SoftmaxXent { logits, labels } => {
                    let n = adj.len();
                    // Softmax probabilities are recomputed here; storing them
                    // would double the node's footprint for a pass that runs
                    // once per forward.
                    for (k, lr) in logits.iter().enumerate() {
                        let contrib = (0..n).map(|j| {
                            let mut m = f64::NEG_INFINITY;
                            for l in logits.iter() {
                                let zj = bget(val(*l), j);
                                if zj > m {
                                    m = zj;
                                }
                            }
                            let mut sum = 0.0;
                            for l in logits.iter() {
                                sum += (bget(val(*l), j) - m).exp();
                            }
                            let p = (bget(val(*lr), j) - m).exp() / sum;
                            let ind = if labels[j] as usize == k { 1.0 } else { 0.0 };
                            (p - ind) * adj[j]
                        });
                        accumulate(&mut prior_adj[lr.index()], contrib);
                    }
                }
            }
        }

        for (g, &f) in grad.iter_mut().zip(&store.frozen) {
            if f {
                *g = 0.0;
            } else if !g.is_finite() {
                return Err(Error::numeric("non-finite gradient"));
            }
        }
        Ok(Gradient {
            store_id: store.id,
            values: grad,
        })
    }
}
