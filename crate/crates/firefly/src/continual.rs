//! Sequential-task learning over a masked master network.
//!
//! The master holds every hidden neuron any task has ever committed, all
//! locked; a task is a binary mask over those neurons plus a private output
//! head. Training a new task never writes to the master, only to a working
//! copy, so earlier tasks stay retrievable bit for bit.
//!
//! Per task the pipeline is:
//!
//! 1. **Mask training** (tasks after the first): a relaxed gate in `[0, 1]`
//!    per master neuron, initialized at one, trained jointly with a fresh
//!    head while every hidden weight stays a constant. Gates at `>= 0.5`
//!    select the neuron; an all-below draft falls back to the single best
//!    gate. Zero iterations therefore select everything.
//! 2. **Growing**: while training accuracy is short of the target, attach
//!    unlock-copy gates on the still-inherited slots and a pool of
//!    brand-new-neuron gates, run the usual two-step cycle, and take the top
//!    candidates under the per-round budget in one ranking across both
//!    families. A selected unlock re-seats that slot on a perturbed private
//!    copy (the master original is untouched); a selected new gate appends a
//!    fresh neuron. Copies and new neurons train on the task, inherited
//!    slots stay frozen.
//! 3. **Commit**: the task's additions are appended to the master, every
//!    older mask is extended with zeros, and the new mask plus trained head
//!    are recorded. Capacity grows by exactly the selected candidates.
//!
//! Retrieval rebuilds a task's network from (mask, head) alone. Because
//! committed neurons never change and masks only ever extend with zeros,
//! retrieval at any later time is bit-identical to retrieval at commit time,
//! which is the non-forgetting contract the tests pin down.

use rand::Rng;

use crate::augment::{AugmentedNetwork, GateKind};
use crate::autodiff::{record_forward, sgd_step, ParameterStore};
use crate::data::{stream_rng, Dataset, Targets};
use crate::error::{Error, Result};
use crate::growth::{
    fit, grow_step, integrated_gradient_scores, select_width, step_one, GrowMode, GrowthConfig,
    WidthBudget,
};
use crate::network::{Activation, GrowableNetwork, HeadKind, Layer, Neuron};

/// How a master neuron came to exist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    /// Created fresh for its origin task (task-one stock and selected
    /// brand-new candidates).
    BrandNew,
    /// Unlock-copy of master neuron `source`, trained for its origin task.
    UnlockedCopy { source: usize },
}

/// How a neuron participates in a given task's subnetwork.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeuronRole {
    /// Owned by an earlier task, reused read-only.
    InheritedLocked,
    /// Created by this task as a copy of an inherited neuron.
    UnlockedCopy,
    /// Created by this task from scratch.
    BrandNew,
}

#[derive(Debug, Clone)]
pub struct MasterNeuron {
    /// Incoming weights, bias last.
    pub theta: Vec<f64>,
    pub origin_task: usize,
    pub provenance: Provenance,
    /// Committed neurons are always locked; the flag exists so the
    /// discipline is checkable rather than implicit.
    pub locked: bool,
}

/// Binary selection over the master's neurons at recording time, extended
/// with zeros whenever the master grows afterwards.
#[derive(Debug, Clone)]
pub struct TaskMask {
    pub task_id: usize,
    pub bits: Vec<bool>,
}

impl TaskMask {
    /// Selected master indices, ascending.
    pub fn members(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }
}

/// A task's private output weights, one row per mask member in ascending
/// master-index order.
#[derive(Debug, Clone)]
pub struct TaskHead {
    pub task_id: usize,
    pub weights: Vec<Vec<f64>>,
}

/// The union of all task subnetworks: a single hidden layer of locked
/// neurons, plus per-task masks and heads.
#[derive(Debug, Clone)]
pub struct MasterNetwork {
    pub input_dim: usize,
    pub classes: usize,
    pub activation: Activation,
    pub neurons: Vec<MasterNeuron>,
    pub masks: Vec<TaskMask>,
    pub heads: Vec<TaskHead>,
}

impl MasterNetwork {
    pub fn new(input_dim: usize, classes: usize, activation: Activation) -> Self {
        MasterNetwork {
            input_dim,
            classes,
            activation,
            neurons: Vec::new(),
            masks: Vec::new(),
            heads: Vec::new(),
        }
    }

    pub fn tasks_completed(&self) -> usize {
        self.masks.len()
    }

    /// Total stored parameters: hidden weights plus every task head.
    pub fn count_params(&self) -> usize {
        let hidden: usize = self.neurons.iter().map(|n| n.theta.len()).sum();
        let heads: usize = self
            .heads
            .iter()
            .map(|h| h.weights.iter().map(Vec::len).sum::<usize>())
            .sum();
        hidden + heads
    }

    /// How neuron `i` participates in `task`, or None if the task's mask
    /// excludes it.
    pub fn role_in_task(&self, i: usize, task: usize) -> Option<NeuronRole> {
        let mask = self.masks.get(task)?;
        if !mask.bits.get(i).copied().unwrap_or(false) {
            return None;
        }
        let n = &self.neurons[i];
        Some(if n.origin_task != task {
            NeuronRole::InheritedLocked
        } else {
            match n.provenance {
                Provenance::BrandNew => NeuronRole::BrandNew,
                Provenance::UnlockedCopy { .. } => NeuronRole::UnlockedCopy,
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (i, n) in self.neurons.iter().enumerate() {
            if n.theta.len() != self.input_dim + 1 {
                return Err(Error::structural(format!("neuron {i} has a bad shape")));
            }
            if !n.locked {
                return Err(Error::structural(format!(
                    "neuron {i} is unlocked in a committed master"
                )));
            }
            if let Provenance::UnlockedCopy { source } = n.provenance {
                if source >= i {
                    return Err(Error::structural(format!(
                        "neuron {i} copies a later neuron {source}"
                    )));
                }
            }
        }
        if self.masks.len() != self.heads.len() {
            return Err(Error::structural("masks and heads out of step"));
        }
        for (t, (mask, head)) in self.masks.iter().zip(&self.heads).enumerate() {
            if mask.task_id != t || head.task_id != t {
                return Err(Error::structural("task records out of order"));
            }
            if mask.bits.len() > self.neurons.len() {
                return Err(Error::structural(format!(
                    "mask {t} indexes past the master"
                )));
            }
            let members = mask.members();
            if members.is_empty() {
                return Err(Error::structural(format!("mask {t} selects nothing")));
            }
            if head.weights.len() != members.len()
                || head.weights.iter().any(|w| w.len() != self.classes)
            {
                return Err(Error::structural(format!("head {t} misaligned with mask")));
            }
            // A neuron owned by a later task cannot appear in this mask.
            for &m in &members {
                if self.neurons[m].origin_task > t {
                    return Err(Error::structural(format!(
                        "mask {t} references neuron {m} from task {}",
                        self.neurons[m].origin_task
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rebuilds the task's subnetwork from its mask and head.
    pub fn retrieve_task_model(&self, task_id: usize) -> Result<GrowableNetwork> {
        let mask = self.masks.get(task_id).ok_or_else(|| {
            Error::structural(format!(
                "no recorded task {task_id} (have {})",
                self.masks.len()
            ))
        })?;
        let head = &self.heads[task_id];
        let neurons = mask
            .members()
            .into_iter()
            .zip(&head.weights)
            .map(|(i, w)| Neuron::new(self.neurons[i].theta.clone(), w.clone()))
            .collect();
        let net = GrowableNetwork {
            input_dim: self.input_dim,
            layers: vec![Layer {
                activation: self.activation,
                neurons,
            }],
            residual_blocks: Vec::new(),
            head: HeadKind::Classification,
        };
        net.validate()?;
        Ok(net)
    }
}

#[derive(Debug, Clone)]
pub struct ClConfig {
    pub input_dim: usize,
    pub classes: usize,
    /// Hidden width the first task starts from.
    pub initial_neurons: usize,
    /// Gate width bound for every growth cycle.
    pub step_size: f64,
    /// Brand-new-neuron candidates per growth round.
    pub m_prime: usize,
    /// Top candidates (copies and new pooled) selected per round.
    pub budget_per_round: usize,
    pub mask_iters: usize,
    pub mask_lr: f64,
    /// Full-batch iterations after re-initialization and after each round.
    pub finetune_iters: usize,
    pub learning_rate: f64,
    /// Grow rounds stop once training accuracy reaches this.
    pub target_accuracy: f64,
    pub max_grow_rounds: usize,
    pub init_scale: f64,
    pub step_one_iters: usize,
    pub step_one_lr: f64,
    pub quadrature_points: usize,
    /// Squared-norm penalty on copy/new directions during step one.
    pub penalty_weight: f64,
    pub seed: u64,
}

impl Default for ClConfig {
    fn default() -> Self {
        ClConfig {
            input_dim: 2,
            classes: 4,
            initial_neurons: 8,
            step_size: 0.01,
            m_prime: 15,
            budget_per_round: 4,
            mask_iters: 200,
            mask_lr: 0.25,
            finetune_iters: 400,
            learning_rate: 0.25,
            target_accuracy: 0.95,
            max_grow_rounds: 3,
            init_scale: 0.1,
            step_one_iters: 100,
            step_one_lr: 0.5,
            quadrature_points: 3,
            penalty_weight: 0.0,
            seed: 0,
        }
    }
}

impl ClConfig {
    fn growth_config(&self, task: usize, round: usize) -> GrowthConfig {
        GrowthConfig {
            step_size: self.step_size,
            m_prime: self.m_prime,
            width_budget: WidthBudget::Count(self.budget_per_round),
            depth_neuron_budget: 0,
            depth_layer_budget: 0,
            quadrature_points: self.quadrature_points,
            step_one_iters: self.step_one_iters,
            step_one_lr: self.step_one_lr,
            init_scale: self.init_scale,
            penalty_weight: self.penalty_weight,
            rng_seed: mix_task_round(self.seed, task, round),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 {
            return Err(Error::contract("need at least one input and two classes"));
        }
        if self.initial_neurons == 0 {
            return Err(Error::contract("the first task needs at least one neuron"));
        }
        if !(self.target_accuracy > 0.0 && self.target_accuracy <= 1.0) {
            return Err(Error::contract("target accuracy outside (0, 1]"));
        }
        self.growth_config(0, 0).validate()
    }
}

fn mix_task_round(seed: u64, task: usize, round: usize) -> u64 {
    let mut rng = stream_rng(seed, "cl-task-round", (task as u64) * 1024 + round as u64);
    rng.random()
}

/// The relaxed-gate draft produced by mask training.
#[derive(Debug, Clone)]
pub struct MaskDraft {
    /// Trained gate per master neuron, in `[0, 1]`.
    pub alphas: Vec<f64>,
    /// `alpha >= 0.5`, with a best-gate fallback when nothing clears it.
    pub bits: Vec<bool>,
    /// Trained head row per master neuron, pre-scaled by its gate so a
    /// selected row reproduces the trained contribution.
    pub head: Vec<Vec<f64>>,
}

/// Thresholds relaxed gates at 0.5 (inclusive). An all-below draft keeps the
/// single largest gate so the task never starts from an empty subnetwork.
pub fn binarize_mask(alphas: &[f64]) -> Vec<bool> {
    let mut bits: Vec<bool> = alphas.iter().map(|&a| a >= 0.5).collect();
    if !bits.iter().any(|&b| b) && !alphas.is_empty() {
        let best = (0..alphas.len())
            .max_by(|&a, &b| alphas[a].partial_cmp(&alphas[b]).expect("gates are finite"))
            .expect("non-empty");
        bits[best] = true;
    }
    bits
}

/// Trains a relaxed selection gate per master neuron on the task data, with
/// every hidden weight held constant. Gates start at one, a fresh head at
/// zero; both train jointly, gates clamped to `[0, 1]` after every step.
pub fn train_selection_mask(
    master: &MasterNetwork,
    data: &Dataset,
    iters: usize,
    learning_rate: f64,
) -> Result<MaskDraft> {
    if master.neurons.is_empty() {
        return Err(Error::structural("mask training needs an existing master"));
    }
    if data.input_dim() != master.input_dim {
        return Err(Error::structural("task data does not match the master"));
    }
    let labels = match data.targets() {
        Targets::Classification { labels, classes } if *classes == master.classes => labels,
        _ => return Err(Error::structural("mask training needs matching class labels")),
    };

    let m = master.neurons.len();
    let mut store = ParameterStore::new();
    let alpha = store.add_group(&vec![1.0; m])?;
    let mut head_groups = Vec::with_capacity(m);
    for _ in 0..m {
        head_groups.push(store.add_group(&vec![0.0; master.classes])?);
    }

    let (mut tape, _) = record_forward(&store, |b| {
        let cols = crate::network::emit_input_columns(b, data)?;
        let mut acts = Vec::with_capacity(m);
        for n in &master.neurons {
            let theta = b.constant(&n.theta)?;
            acts.push(crate::network::emit_unit(b, &cols, theta, master.activation)?);
        }
        let mut logits = Vec::with_capacity(master.classes);
        for o in 0..master.classes {
            let mut acc = None;
            for (i, &act) in acts.iter().enumerate() {
                let a = b.param_elem(alpha, i)?;
                let w = b.param_elem(head_groups[i], o)?;
                let aw = b.mul(a, w)?;
                let term = b.mul(aw, act)?;
                acc = Some(match acc {
                    Some(s) => b.add(s, term)?,
                    None => term,
                });
            }
            logits.push(acc.expect("master is non-empty"));
        }
        let xent = b.softmax_xent(&logits, labels)?;
        b.mean(xent)
    })?;

    for _ in 0..iters {
        let grad = tape.backward(&store)?;
        sgd_step(&mut store, &grad, learning_rate)?;
        for a in store.group_slice_mut(alpha)? {
            *a = a.clamp(0.0, 1.0);
        }
        tape.forward(&store)?;
    }

    let alphas = store.group_slice(alpha)?.to_vec();
    let bits = binarize_mask(&alphas);
    let mut head = Vec::with_capacity(m);
    for (i, g) in head_groups.iter().enumerate() {
        head.push(store.group_slice(*g)?.iter().map(|w| alphas[i] * w).collect());
    }
    Ok(MaskDraft { alphas, bits, head })
}

/// Where a working-net slot currently points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotSrc {
    /// A locked master neuron.
    Inherited(usize),
    /// The n-th neuron this task will commit.
    Pending(usize),
}

/// Full-batch training of a working net with the inherited slots' incoming
/// weights frozen; heads and task-owned neurons train freely.
fn fit_masked(
    net: &mut GrowableNetwork,
    data: &Dataset,
    iters: usize,
    learning_rate: f64,
    frozen_slots: &[usize],
) -> Result<f64> {
    let mut store = ParameterStore::new();
    let binding = net.register_params(&mut store)?;
    for &s in frozen_slots {
        store.freeze_group(binding.layers[0][s].theta, true)?;
    }
    let (mut tape, mut loss) = record_forward(&store, |b| net.emit_loss(b, &binding, data))?;
    for _ in 0..iters {
        let grad = tape.backward(&store)?;
        sgd_step(&mut store, &grad, learning_rate)?;
        loss = tape.forward(&store)?;
    }
    net.write_back(&store, &binding)?;
    Ok(loss)
}

/// One growth round's bookkeeping.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub added_copy: usize,
    pub added_new: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Working-net neuron count after the round.
    pub neurons: usize,
}

/// What one task's training produced.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub task_id: usize,
    /// Round 0 is the pre-growth state after re-initialization.
    pub rounds: Vec<RoundRecord>,
    pub train_acc: f64,
    /// Master neurons added by this task, split by provenance.
    pub added_copy: usize,
    pub added_new: usize,
}

/// Trains one task end to end and commits it into the master. Task ids are
/// assigned sequentially: the next task is always `master.tasks_completed()`.
pub fn grow_for_task(
    master: &mut MasterNetwork,
    data: &Dataset,
    cfg: &ClConfig,
) -> Result<TaskOutcome> {
    cfg.validate()?;
    master.validate()?;
    if data.n_points() == 0 {
        return Err(Error::contract("task data is empty"));
    }
    let task_id = master.tasks_completed();
    if task_id == 0 {
        grow_first_task(master, data, cfg)
    } else {
        grow_later_task(master, data, cfg, task_id)
    }
}

fn grow_first_task(
    master: &mut MasterNetwork,
    data: &Dataset,
    cfg: &ClConfig,
) -> Result<TaskOutcome> {
    let mut rng = stream_rng(cfg.seed, "cl-init", 0);
    let mut working = GrowableNetwork::mlp(
        cfg.input_dim,
        &[(cfg.initial_neurons, cfg.classes)],
        master.activation,
        HeadKind::Classification,
        cfg.init_scale.max(0.5),
        &mut rng,
    );
    let mut loss = fit(&mut working, data, cfg.finetune_iters, cfg.learning_rate)?;
    let mut acc = working.accuracy(data)?;
    let mut rounds = vec![RoundRecord {
        round: 0,
        added_copy: 0,
        added_new: 0,
        train_loss: loss,
        train_acc: acc,
        neurons: working.total_neurons(),
    }];

    let mut round = 0;
    while acc < cfg.target_accuracy && round < cfg.max_grow_rounds {
        round += 1;
        let gcfg = cfg.growth_config(0, round);
        let outcome = grow_step(&working, data, &gcfg, &GrowMode::Width { layers: vec![0] })?;
        working = outcome.net;
        loss = fit(&mut working, data, cfg.finetune_iters, cfg.learning_rate)?;
        acc = working.accuracy(data)?;
        let splits = outcome
            .candidates
            .iter()
            .filter(|c| c.selected && matches!(c.kind, GateKind::Split { .. }))
            .count();
        rounds.push(RoundRecord {
            round,
            added_copy: splits,
            added_new: outcome.width_selected - splits,
            train_loss: loss,
            train_acc: acc,
            neurons: working.total_neurons(),
        });
    }

    // Commit: the whole first network enters the master, mask all ones.
    let n = working.layers[0].neurons.len();
    let mut head_rows = Vec::with_capacity(n);
    for neuron in &working.layers[0].neurons {
        master.neurons.push(MasterNeuron {
            theta: neuron.theta.clone(),
            origin_task: 0,
            provenance: Provenance::BrandNew,
            locked: true,
        });
        head_rows.push(neuron.out_weight.clone());
    }
    master.masks.push(TaskMask {
        task_id: 0,
        bits: vec![true; n],
    });
    master.heads.push(TaskHead {
        task_id: 0,
        weights: head_rows,
    });
    master.validate()?;
    Ok(TaskOutcome {
        task_id: 0,
        rounds,
        train_acc: acc,
        added_copy: 0,
        added_new: n,
    })
}

fn grow_later_task(
    master: &mut MasterNetwork,
    data: &Dataset,
    cfg: &ClConfig,
    task_id: usize,
) -> Result<TaskOutcome> {
    let draft = train_selection_mask(master, data, cfg.mask_iters, cfg.mask_lr)?;

    // Re-initialize the working net as the selected old neurons with the
    // draft head; nothing here is task-owned yet.
    let mut neurons = Vec::new();
    let mut slot_src = Vec::new();
    for (i, &keep) in draft.bits.iter().enumerate() {
        if keep {
            neurons.push(Neuron::new(
                master.neurons[i].theta.clone(),
                draft.head[i].clone(),
            ));
            slot_src.push(SlotSrc::Inherited(i));
        }
    }
    let mut working = GrowableNetwork {
        input_dim: cfg.input_dim,
        layers: vec![Layer {
            activation: master.activation,
            neurons,
        }],
        residual_blocks: Vec::new(),
        head: HeadKind::Classification,
    };
    working.validate()?;
    let mut pending: Vec<Provenance> = Vec::new();

    let inherited = |srcs: &[SlotSrc]| -> Vec<usize> {
        srcs.iter()
            .enumerate()
            .filter_map(|(s, src)| matches!(src, SlotSrc::Inherited(_)).then_some(s))
            .collect()
    };

    let mut loss = fit_masked(
        &mut working,
        data,
        cfg.finetune_iters,
        cfg.learning_rate,
        &inherited(&slot_src),
    )?;
    let mut acc = working.accuracy(data)?;
    let mut rounds = vec![RoundRecord {
        round: 0,
        added_copy: 0,
        added_new: 0,
        train_loss: loss,
        train_acc: acc,
        neurons: working.total_neurons(),
    }];

    let mut round = 0;
    while acc < cfg.target_accuracy && round < cfg.max_grow_rounds {
        round += 1;
        let gcfg = cfg.growth_config(task_id, round);
        let mut gate_rng = stream_rng(gcfg.rng_seed, "gate-init", 0);
        let mut aug = AugmentedNetwork::new(working.clone(), cfg.step_size)?;
        let unlock_slots = inherited(&slot_src);
        aug.add_unlock_gates(0, &unlock_slots, cfg.init_scale, &mut gate_rng)?;
        aug.add_new_gates(0, cfg.m_prime, cfg.init_scale, &mut gate_rng)?;

        let trained = step_one(&mut aug, data, &gcfg)?;
        let scores = integrated_gradient_scores(
            &aug,
            &trained.tilde_epsilon,
            &trained.tilde_delta,
            data,
            cfg.quadrature_points,
        )?;
        let widths = select_width(&scores, cfg.budget_per_round, cfg.step_size);
        let next = aug.materialize(&widths)?;

        // Bookkeeping must mirror materialization: unlocks re-seat their
        // slot in place, selected new gates append in gate order.
        let before = working.layers[0].neurons.len();
        let mut added_copy = 0;
        let mut added_new = 0;
        for (gi, gate) in aug.gates.iter().enumerate() {
            if widths[gi] == 0.0 {
                continue;
            }
            match gate.kind {
                GateKind::UnlockCopy { host, .. } => {
                    let SlotSrc::Inherited(mi) = slot_src[host] else {
                        return Err(Error::structural("unlock gate on a task-owned slot"));
                    };
                    slot_src[host] = SlotSrc::Pending(pending.len());
                    pending.push(Provenance::UnlockedCopy { source: mi });
                    added_copy += 1;
                }
                GateKind::NewNeuron { .. } => {
                    slot_src.push(SlotSrc::Pending(pending.len()));
                    pending.push(Provenance::BrandNew);
                    added_new += 1;
                }
                _ => return Err(Error::structural("unexpected gate kind in task growth")),
            }
        }
        debug_assert_eq!(next.layers[0].neurons.len(), before + added_new);
        working = next;

        loss = fit_masked(
            &mut working,
            data,
            cfg.finetune_iters,
            cfg.learning_rate,
            &inherited(&slot_src),
        )?;
        acc = working.accuracy(data)?;
        rounds.push(RoundRecord {
            round,
            added_copy,
            added_new,
            train_loss: loss,
            train_acc: acc,
            neurons: working.total_neurons(),
        });
    }

    // Commit. Pending neuron j gets master index old_len + j.
    let old_len = master.neurons.len();
    let mut theta_of_pending: Vec<Option<Vec<f64>>> = vec![None; pending.len()];
    for (slot, src) in slot_src.iter().enumerate() {
        if let SlotSrc::Pending(j) = *src {
            theta_of_pending[j] = Some(working.layers[0].neurons[slot].theta.clone());
        }
    }
    for (j, prov) in pending.iter().enumerate() {
        master.neurons.push(MasterNeuron {
            theta: theta_of_pending[j].take().expect("every pending neuron has a slot"),
            origin_task: task_id,
            provenance: prov.clone(),
            locked: true,
        });
    }
    for mask in &mut master.masks {
        mask.bits.resize(master.neurons.len(), false);
    }
    let mut bits = vec![false; master.neurons.len()];
    let mut members: Vec<(usize, Vec<f64>)> = Vec::with_capacity(slot_src.len());
    for (slot, src) in slot_src.iter().enumerate() {
        let mi = match *src {
            SlotSrc::Inherited(mi) => mi,
            SlotSrc::Pending(j) => old_len + j,
        };
        bits[mi] = true;
        members.push((mi, working.layers[0].neurons[slot].out_weight.clone()));
    }
    members.sort_by_key(|&(mi, _)| mi);
    master.masks.push(TaskMask { task_id, bits });
    master.heads.push(TaskHead {
        task_id,
        weights: members.into_iter().map(|(_, w)| w).collect(),
    });
    master.validate()?;

    let (added_copy, added_new) = pending.iter().fold((0, 0), |(c, n), p| match p {
        Provenance::UnlockedCopy { .. } => (c + 1, n),
        Provenance::BrandNew => (c, n + 1),
    });
    Ok(TaskOutcome {
        task_id,
        rounds,
        train_acc: acc,
        added_copy,
        added_new,
    })
}

/// Per-task metrics of a finished master.
#[derive(Debug, Clone)]
pub struct TaskEval {
    pub task_id: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Evaluates every recorded task on its own dataset.
pub fn evaluate_all_tasks(master: &MasterNetwork, tasks: &[Dataset]) -> Result<Vec<TaskEval>> {
    if tasks.len() < master.tasks_completed() {
        return Err(Error::structural("fewer datasets than recorded tasks"));
    }
    let mut evals = Vec::with_capacity(master.tasks_completed());
    for t in 0..master.tasks_completed() {
        let net = master.retrieve_task_model(t)?;
        evals.push(TaskEval {
            task_id: t,
            loss: net.loss(&tasks[t])?,
            accuracy: net.accuracy(&tasks[t])?,
        });
    }
    Ok(evals)
}

/// Unweighted mean accuracy over tasks.
pub fn average_accuracy(evals: &[TaskEval]) -> f64 {
    assert!(!evals.is_empty(), "no tasks evaluated");
    evals.iter().map(|e| e.accuracy).sum::<f64>() / evals.len() as f64
}

/// An independent fixed-width model per task: the capacity baseline the
/// master is compared against.
#[derive(Debug, Clone)]
pub struct ScratchTaskModel {
    pub task_id: usize,
    pub accuracy: f64,
    pub params: usize,
}

pub fn scratch_task_models(
    tasks: &[Dataset],
    cfg: &ClConfig,
    width: usize,
    train_iters: usize,
) -> Result<Vec<ScratchTaskModel>> {
    let mut out = Vec::with_capacity(tasks.len());
    for (t, data) in tasks.iter().enumerate() {
        let mut rng = stream_rng(cfg.seed, "cl-scratch", t as u64);
        let mut net = GrowableNetwork::mlp(
            cfg.input_dim,
            &[(width, cfg.classes)],
            Activation::Rectifier,
            HeadKind::Classification,
            cfg.init_scale.max(0.5),
            &mut rng,
        );
        fit(&mut net, data, train_iters, cfg.learning_rate)?;
        out.push(ScratchTaskModel {
            task_id: t,
            accuracy: net.accuracy(data)?,
            params: net.count_params(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_cl_tasks_with, ClTaskOpts};

    fn small_opts() -> ClTaskOpts {
        ClTaskOpts {
            classes: 3,
            points_per_task: 120,
            cluster_sd: 0.3,
            clusters_per_class: 1,
        }
    }

    fn small_cfg(seed: u64) -> ClConfig {
        ClConfig {
            classes: 3,
            initial_neurons: 6,
            m_prime: 6,
            budget_per_round: 3,
            mask_iters: 120,
            finetune_iters: 250,
            max_grow_rounds: 2,
            step_one_iters: 40,
            seed,
            ..ClConfig::default()
        }
    }

    fn probe_outputs(net: &GrowableNetwork, data: &Dataset) -> Vec<u64> {
        let mut x = vec![0.0; data.input_dim()];
        let mut bits = Vec::new();
        for j in 0..data.n_points().min(64) {
            data.copy_row(j, &mut x);
            for o in net.forward_point(&x).unwrap() {
                bits.push(o.to_bits());
            }
        }
        bits
    }

    #[test]
    fn binarize_includes_the_boundary_and_never_empties() {
        assert_eq!(binarize_mask(&[0.5, 0.3]), vec![true, false]);
        assert_eq!(binarize_mask(&[0.9, 0.5001, 0.4999]), vec![true, true, false]);
        // All below threshold: the best gate survives.
        assert_eq!(binarize_mask(&[0.1, 0.4, 0.2]), vec![false, true, false]);
    }

    #[test]
    fn zero_iteration_mask_selects_everything() {
        let tasks = gen_cl_tasks_with(2, 5, &small_opts()).unwrap();
        let mut master = MasterNetwork::new(2, 3, Activation::Rectifier);
        grow_for_task(&mut master, &tasks[0], &small_cfg(5)).unwrap();
        let draft = train_selection_mask(&master, &tasks[1], 0, 0.2).unwrap();
        assert!(draft.bits.iter().all(|&b| b));
        assert!(draft.alphas.iter().all(|&a| a == 1.0));
    }

    /// A full reuse mask with its trained head can never lose to the empty
    /// subnetwork, whose loss on balanced labels is ln(classes).
    #[test]
    fn full_mask_beats_the_empty_mask() {
        let tasks = gen_cl_tasks_with(2, 6, &small_opts()).unwrap();
        let cfg = small_cfg(6);
        let mut master = MasterNetwork::new(2, 3, Activation::Rectifier);
        grow_for_task(&mut master, &tasks[0], &cfg).unwrap();
        let draft = train_selection_mask(&master, &tasks[1], cfg.mask_iters, cfg.mask_lr).unwrap();

        let neurons: Vec<Neuron> = (0..master.neurons.len())
            .map(|i| Neuron::new(master.neurons[i].theta.clone(), draft.head[i].clone()))
            .collect();
        let full = GrowableNetwork {
            input_dim: 2,
            layers: vec![Layer {
                activation: Activation::Rectifier,
                neurons,
            }],
            residual_blocks: Vec::new(),
            head: HeadKind::Classification,
        };
        let empty_loss = (3.0f64).ln();
        let full_loss = full.loss(&tasks[1]).unwrap();
        assert!(
            full_loss <= empty_loss + 1e-9,
            "trained full mask ({full_loss}) lost to the empty mask ({empty_loss})"
        );
    }

    #[test]
    fn first_task_commits_everything_with_an_all_ones_mask() {
        let tasks = gen_cl_tasks_with(1, 7, &small_opts()).unwrap();
        let cfg = small_cfg(7);
        let mut master = MasterNetwork::new(2, 3, Activation::Rectifier);
        let outcome = grow_for_task(&mut master, &tasks[0], &cfg).unwrap();
        assert_eq!(outcome.task_id, 0);
        assert_eq!(master.tasks_completed(), 1);
        assert!(master.masks[0].bits.iter().all(|&b| b));
        assert_eq!(master.neurons.len(), outcome.added_new);
        assert!(master.neurons.iter().all(|n| n.locked));
        let net = master.retrieve_task_model(0).unwrap();
        assert_eq!(net.total_neurons(), master.neurons.len());
    }

    #[test]
    fn non_forgetting_is_bitwise_across_later_tasks() {
        let tasks = gen_cl_tasks_with(3, 8, &small_opts()).unwrap();
        let cfg = small_cfg(8);
        let mut master = MasterNetwork::new(2, 3, Activation::Rectifier);
        let mut snapshots = Vec::new();
        for (t, data) in tasks.iter().enumerate() {
            grow_for_task(&mut master, data, &cfg).unwrap();
            let snap = master.retrieve_task_model(t).unwrap();
            snapshots.push(probe_outputs(&snap, data));
        }
        for (t, data) in tasks.iter().enumerate() {
            let retrieved = master.retrieve_task_model(t).unwrap();
            assert_eq!(
                probe_outputs(&retrieved, data),
                snapshots[t],
                "task {t} outputs drifted after later tasks"
            );
        }
    }

    #[test]
    fn capacity_grows_by_exactly_the_selected_candidates() {
        let tasks = gen_cl_tasks_with(3, 9, &small_opts()).unwrap();
        let cfg = small_cfg(9);
        let mut master = MasterNetwork::new(2, 3, Activation::Rectifier);
        let mut prev_neurons = 0;
        let mut prev_params = 0;
        for data in &tasks {
            let outcome = grow_for_task(&mut master, data, &cfg).unwrap();
            let added = outcome.added_copy + outcome.added_new;
            assert_eq!(master.neurons.len(), prev_neurons + added);
            let round_added: usize = outcome
                .rounds
                .iter()
                .map(|r| r.added_copy + r.added_new)
                .sum();
            if outcome.task_id > 0 {
                assert_eq!(round_added, added, "rounds and commit disagree");
            }
            assert!(master.count_params() > prev_params);
            prev_neurons = master.neurons.len();
            prev_params = master.count_params();
        }
        // Provenance of copies points at strictly earlier neurons.
        for (i, n) in master.neurons.iter().enumerate() {
            if let Provenance::UnlockedCopy { source } = n.provenance {
                assert!(source < i);
                assert!(master.neurons[source].origin_task < n.origin_task);
            }
        }
    }

    #[test]
    fn masks_only_extend_with_zeros() {
        let tasks = gen_cl_tasks_with(3, 10, &small_opts()).unwrap();
        let cfg = small_cfg(10);
        let mut master = MasterNetwork::new(2, 3, Activation::Rectifier);
        let mut recorded: Vec<Vec<bool>> = Vec::new();
        for data in &tasks {
            grow_for_task(&mut master, data, &cfg).unwrap();
            for (t, old) in recorded.iter().enumerate() {
                let now = &master.masks[t].bits;
                assert!(now.len() >= old.len());
                assert_eq!(&now[..old.len()], &old[..], "mask {t} was edited");
                assert!(now[old.len()..].iter().all(|&b| !b), "mask {t} gained bits");
            }
            recorded = master.masks.iter().map(|m| m.bits.clone()).collect();
        }
    }

    #[test]
    fn roles_partition_each_tasks_subnetwork() {
        let tasks = gen_cl_tasks_with(2, 11, &small_opts()).unwrap();
        let cfg = small_cfg(11);
        let mut master = MasterNetwork::new(2, 3, Activation::Rectifier);
        for data in &tasks {
            grow_for_task(&mut master, data, &cfg).unwrap();
        }
        for i in 0..master.neurons.len() {
            match master.role_in_task(i, 0) {
                Some(NeuronRole::BrandNew) | None => {}
                other => panic!("task 0 can only own brand-new neurons, got {other:?}"),
            }
            if let Some(role) = master.role_in_task(i, 1) {
                match role {
                    NeuronRole::InheritedLocked => assert_eq!(master.neurons[i].origin_task, 0),
                    _ => assert_eq!(master.neurons[i].origin_task, 1),
                }
            }
        }
    }

    #[test]
    fn retrieval_of_unknown_task_is_a_structural_error() {
        let master = MasterNetwork::new(2, 3, Activation::Rectifier);
        assert!(matches!(
            master.retrieve_task_model(0),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn task_pipeline_is_deterministic() {
        let tasks = gen_cl_tasks_with(2, 12, &small_opts()).unwrap();
        let cfg = small_cfg(12);
        let run = || {
            let mut master = MasterNetwork::new(2, 3, Activation::Rectifier);
            for data in &tasks {
                grow_for_task(&mut master, data, &cfg).unwrap();
            }
            let mut bits = Vec::new();
            for t in 0..tasks.len() {
                bits.extend(probe_outputs(&master.retrieve_task_model(t).unwrap(), &tasks[t]));
            }
            bits
        };
        assert_eq!(run(), run());
    }
}
