//! The two-step growth cycle: optimize gates, score candidates by integrated
//! gradients, select under budgets, materialize.
//!
//! Step one trains every gate's width and direction jointly by projected
//! gradient descent on the gated loss, with the base network frozen: after
//! each step widths clamp to `[-step_size, step_size]` and each direction
//! rescales onto the unit ball. No sparsity is imposed here.
//!
//! Step two scores each candidate by a midpoint-rule integrated gradient
//! along its own width axis: `s_i` averages `dL/deps_i` at
//! `c_z = (2z - 1) / (2n) * eps_i~` for `z = 1..n`, holding every other gate
//! at its trained width and all directions fixed. For a gate whose trained
//! width is zero this degenerates to the plain gradient at zero. The product
//! `s_i * eps_i~` then approximates the loss change from switching gate `i`
//! off, which is what makes the scores comparable across candidates.
//!
//! Selection turns scores into materialization widths `-step_size * sign(s)`
//! for the top candidates by `|s|` under the budget; ties break toward the
//! lower index and zero scores are never selected. Depth selection walks the
//! combined ranking and skips any candidate that would exceed the neuron
//! budget or activate more slots than the layer budget allows.

use crate::augment::{AugmentedNetwork, GateGroupIds, GateKind, GateProgram};
use crate::autodiff::{record_forward, sgd_step, ParameterStore};
use crate::data::{stream_rng, Dataset};
use crate::error::{Error, Result};
use crate::network::GrowableNetwork;

/// How many width candidates one grow step may select.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WidthBudget {
    /// A fixed count.
    Count(usize),
    /// A fraction of the existing neurons in the targeted layers, rounded
    /// down but never below one. Must lie in `(0, 1]`.
    Fraction(f64),
}

impl WidthBudget {
    pub fn resolve(&self, existing_neurons: usize) -> Result<usize> {
        match *self {
            WidthBudget::Count(c) => Ok(c),
            WidthBudget::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::contract(format!(
                        "width budget fraction {f} outside (0, 1]"
                    )));
                }
                Ok(((f * existing_neurons as f64).floor() as usize).max(1))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct GrowthConfig {
    /// Gate width bound and materialization magnitude (the neighborhood
    /// radius the method searches over).
    pub step_size: f64,
    /// Brand-new-neuron candidates per targeted layer (and per empty slot in
    /// depth mode).
    pub m_prime: usize,
    pub width_budget: WidthBudget,
    /// Depth mode: max layer-neuron candidates selected in one step.
    pub depth_neuron_budget: usize,
    /// Depth mode: max distinct slots activated in one step.
    pub depth_layer_budget: usize,
    /// Midpoint quadrature points for integrated-gradient scores.
    pub quadrature_points: usize,
    pub step_one_iters: usize,
    pub step_one_lr: f64,
    /// Standard deviation of direction initialization draws.
    pub init_scale: f64,
    /// Weight of the optional `|delta|^2` penalty in step one; zero disables.
    pub penalty_weight: f64,
    pub rng_seed: u64,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        GrowthConfig {
            step_size: 0.01,
            m_prime: 5,
            width_budget: WidthBudget::Count(1),
            depth_neuron_budget: 0,
            depth_layer_budget: 0,
            quadrature_points: 3,
            step_one_iters: 100,
            step_one_lr: 0.5,
            init_scale: 0.1,
            penalty_weight: 0.0,
            rng_seed: 0,
        }
    }
}

impl GrowthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::contract("step_size must be positive and finite"));
        }
        if self.quadrature_points == 0 {
            return Err(Error::contract("quadrature_points must be at least 1"));
        }
        if !(self.step_one_lr > 0.0) || !self.step_one_lr.is_finite() {
            return Err(Error::contract("step_one_lr must be positive and finite"));
        }
        if !(self.init_scale > 0.0) || !self.init_scale.is_finite() {
            return Err(Error::contract("init_scale must be positive and finite"));
        }
        if self.penalty_weight < 0.0 || !self.penalty_weight.is_finite() {
            return Err(Error::contract("penalty_weight must be non-negative"));
        }
        if let WidthBudget::Fraction(f) = self.width_budget {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::contract("width budget fraction outside (0, 1]"));
            }
        }
        Ok(())
    }

    /// Copy with a phase-specific RNG stream, so every grow phase draws
    /// independent candidate directions.
    pub fn for_phase(&self, phase: usize) -> GrowthConfig {
        let mut cfg = self.clone();
        let mut rng = stream_rng(self.rng_seed, "grow-phase", phase as u64);
        cfg.rng_seed = rand::Rng::random(&mut rng);
        cfg
    }
}

/// Trained gate state after step one.
#[derive(Debug, Clone)]
pub struct StepOneResult {
    pub tilde_epsilon: Vec<f64>,
    /// Per gate, the full (possibly concatenated) direction vector.
    pub tilde_delta: Vec<Vec<f64>>,
    pub final_loss: f64,
}

/// Integrated-gradient scores aligned with a gate list.
#[derive(Debug, Clone)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub tilde_epsilon: Vec<f64>,
}

/// Clamps widths into `[-step, step]` and rescales each gate's direction
/// (jointly over its groups) onto the unit ball.
fn project_gates(store: &mut ParameterStore, gates: &[GateGroupIds], step: f64) -> Result<()> {
    for ids in gates {
        let e = &mut store.group_slice_mut(ids.eps)?[0];
        *e = e.clamp(-step, step);
        let mut norm_sq = 0.0;
        for &dg in &ids.deltas {
            norm_sq += store.group_slice(dg)?.iter().map(|v| v * v).sum::<f64>();
        }
        if norm_sq > 1.0 {
            let inv = 1.0 / norm_sq.sqrt();
            for &dg in &ids.deltas {
                for v in store.group_slice_mut(dg)? {
                    *v *= inv;
                }
            }
        }
    }
    Ok(())
}

/// Projected gradient descent over an already-built gate program.
///
/// The continual-learning grower shares this core with [`step_one`].
pub fn step_one_program(
    prog: &mut GateProgram,
    step_size: f64,
    iters: usize,
    learning_rate: f64,
) -> Result<StepOneResult> {
    for it in 0..iters {
        let grad = prog
            .tape
            .backward(&prog.store)
            .map_err(|e| step_one_err(e, it))?;
        sgd_step(&mut prog.store, &grad, learning_rate).map_err(|e| step_one_err(e, it))?;
        project_gates(&mut prog.store, &prog.gates, step_size)?;
        prog.tape
            .forward(&prog.store)
            .map_err(|e| step_one_err(e, it))?;
    }
    let mut tilde_epsilon = Vec::with_capacity(prog.gates.len());
    let mut tilde_delta = Vec::with_capacity(prog.gates.len());
    for ids in &prog.gates {
        tilde_epsilon.push(prog.store.group_slice(ids.eps)?[0]);
        let mut delta = Vec::new();
        for &dg in &ids.deltas {
            delta.extend_from_slice(prog.store.group_slice(dg)?);
        }
        tilde_delta.push(delta);
    }
    Ok(StepOneResult {
        tilde_epsilon,
        tilde_delta,
        final_loss: prog.tape.loss_value(),
    })
}

fn step_one_err(e: Error, iteration: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("step one iteration {iteration}: {m}")),
        other => other,
    }
}

/// Step one of the growth cycle: jointly optimizes all gate widths and
/// directions on `data` with the base frozen, writing the trained values
/// back into `aug` and returning them.
pub fn step_one(aug: &mut AugmentedNetwork, data: &Dataset, cfg: &GrowthConfig) -> Result<StepOneResult> {
    cfg.validate()?;
    if aug.gates.is_empty() {
        return Err(Error::contract("step one needs at least one gate"));
    }
    let mut prog = aug.build_program(data, cfg.penalty_weight)?;
    let res = step_one_program(&mut prog, aug.step_size, cfg.step_one_iters, cfg.step_one_lr)?;
    aug.read_back(&prog)?;
    Ok(res)
}

/// Midpoint integrated-gradient scores over an already-built program.
///
/// Gate parameters in the program are set to the supplied trained values
/// first; on return every gate is back at its trained width.
pub fn score_program(
    prog: &mut GateProgram,
    tilde_epsilon: &[f64],
    tilde_delta: &[Vec<f64>],
    n: usize,
) -> Result<ScoreVector> {
    if n == 0 {
        return Err(Error::contract("quadrature needs at least one point"));
    }
    if tilde_epsilon.len() != prog.gates.len() || tilde_delta.len() != prog.gates.len() {
        return Err(Error::structural("trained gate state does not match gate list"));
    }
    for (i, ids) in prog.gates.iter().enumerate() {
        prog.store.set_group(ids.eps, &[tilde_epsilon[i]])?;
        let mut offset = 0;
        for &dg in &ids.deltas {
            let len = prog.store.group_len(dg)?;
            if offset + len > tilde_delta[i].len() {
                return Err(Error::structural("direction length mismatch"));
            }
            prog.store.set_group(dg, &tilde_delta[i][offset..offset + len])?;
            offset += len;
        }
        if offset != tilde_delta[i].len() {
            return Err(Error::structural("direction length mismatch"));
        }
    }

    let mut scores = Vec::with_capacity(prog.gates.len());
    for (i, _) in prog.gates.iter().enumerate() {
        let eps_group = prog.gates[i].eps;
        let tilde = tilde_epsilon[i];
        let mut acc = 0.0;
        if tilde == 0.0 {
            // Every midpoint collapses onto zero: one gradient evaluation.
            prog.tape.forward(&prog.store)?;
            let grad = prog.tape.backward(&prog.store)?;
            acc = grad.group(&prog.store, eps_group)?[0];
        } else {
            for z in 1..=n {
                let c = (2 * z - 1) as f64 / (2 * n) as f64 * tilde;
                prog.store.set_group(eps_group, &[c])?;
                prog.tape.forward(&prog.store)?;
                let grad = prog.tape.backward(&prog.store)?;
                acc += grad.group(&prog.store, eps_group)?[0];
            }
            acc /= n as f64;
            prog.store.set_group(eps_group, &[tilde])?;
        }
        scores.push(acc);
    }
    prog.tape.forward(&prog.store)?;
    Ok(ScoreVector {
        scores,
        tilde_epsilon: tilde_epsilon.to_vec(),
    })
}

/// Step two scoring for an augmented network: integrated gradients of the
/// data loss along each gate's width axis at the trained gate state.
pub fn integrated_gradient_scores(
    aug: &AugmentedNetwork,
    tilde_epsilon: &[f64],
    tilde_delta: &[Vec<f64>],
    data: &Dataset,
    n: usize,
) -> Result<ScoreVector> {
    if tilde_epsilon.iter().any(|e| e.abs() > aug.step_size) {
        return Err(Error::contract("trained width outside the step-size interval"));
    }
    // Scores come from the plain data loss; the direction penalty has no
    // width dependence and is omitted.
    let mut prog = aug.build_program(data, 0.0)?;
    score_program(&mut prog, tilde_epsilon, tilde_delta, n)
}

/// Width selection: the top `budget` candidates by `|score|` (ties to the
/// lower index, zero scores skipped) get width `-step_size * sign(score)`;
/// everything else gets zero.
pub fn select_width(scores: &ScoreVector, budget: usize, step_size: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .abs()
            .partial_cmp(&scores.scores[a].abs())
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut widths = vec![0.0; scores.scores.len()];
    let mut taken = 0;
    for idx in order {
        if taken == budget {
            break;
        }
        let s = scores.scores[idx];
        if s == 0.0 {
            continue;
        }
        widths[idx] = if s > 0.0 { -step_size } else { step_size };
        taken += 1;
    }
    widths
}

/// Depth selection over `(slot, score)` entries: walk candidates by `|score|`
/// descending (ties by slot then index) and accept each unless it would
/// exceed `neuron_budget` accepted gates or activate more than
/// `layer_budget` distinct slots; the slot check runs first. Zero scores are
/// never accepted.
pub fn select_depth(
    slot_scores: &[(usize, f64)],
    neuron_budget: usize,
    layer_budget: usize,
    step_size: f64,
) -> Vec<f64> {
    let mut order: Vec<usize> = (0..slot_scores.len()).collect();
    order.sort_by(|&a, &b| {
        slot_scores[b]
            .1
            .abs()
            .partial_cmp(&slot_scores[a].1.abs())
            .expect("scores are finite")
            .then(slot_scores[a].0.cmp(&slot_scores[b].0))
            .then(a.cmp(&b))
    });
    let mut widths = vec![0.0; slot_scores.len()];
    let mut active: std::collections::BTreeSet<usize> = std::collections::BTreeSet::new();
    let mut taken = 0;
    for idx in order {
        let (slot, s) = slot_scores[idx];
        if s == 0.0 {
            continue;
        }
        if !active.contains(&slot) && active.len() == layer_budget {
            continue;
        }
        if taken == neuron_budget {
            continue;
        }
        widths[idx] = if s > 0.0 { -step_size } else { step_size };
        taken += 1;
        active.insert(slot);
    }
    widths
}

/// What a grow step may change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GrowMode {
    /// Width candidates on the listed layers.
    Width { layers: Vec<usize> },
    /// Layer-neuron candidates at every empty residual slot.
    Depth,
    /// Both candidate families in one step, each under its own budget.
    Both { layers: Vec<usize> },
}

/// Record of one candidate's fate in a grow step.
#[derive(Debug, Clone)]
pub struct CandidateOutcome {
    pub candidate_id: usize,
    pub kind: GateKind,
    pub tilde_epsilon: f64,
    pub score: f64,
    pub width: f64,
    pub selected: bool,
}

/// Result of one grow step.
#[derive(Debug, Clone)]
pub struct GrowOutcome {
    pub net: GrowableNetwork,
    pub loss_before: f64,
    pub loss_after: f64,
    pub candidates: Vec<CandidateOutcome>,
    pub width_selected: usize,
    pub depth_selected: usize,
    pub slots_activated: usize,
}

/// One full growth cycle: attach candidates per `mode`, run step one, score,
/// select under the configured budgets, and materialize.
///
/// With all budgets zero (or no candidates to attach) the returned network
/// is the unchanged input. The width budget resolves against the number of
/// existing neurons across the targeted layers, selection ranks their
/// candidates in one pool.
pub fn grow_step(
    net: &GrowableNetwork,
    data: &Dataset,
    cfg: &GrowthConfig,
    mode: &GrowMode,
) -> Result<GrowOutcome> {
    cfg.validate()?;
    net.validate()?;
    let loss_before = net.loss(data)?;

    let mut aug = AugmentedNetwork::new(net.clone(), cfg.step_size)?;
    let mut rng = stream_rng(cfg.rng_seed, "gate-init", 0);
    let mut width_hosts = 0usize;
    match mode {
        GrowMode::Width { layers } | GrowMode::Both { layers } => {
            let mut seen = std::collections::BTreeSet::new();
            for &l in layers {
                if !seen.insert(l) {
                    return Err(Error::contract(format!("layer {l} listed twice")));
                }
                if l >= net.layers.len() {
                    return Err(Error::contract(format!("no layer {l} to grow")));
                }
                width_hosts += net.layers[l].neurons.len();
                aug.add_width_gates(l, cfg.m_prime, cfg.init_scale, &mut rng)?;
            }
        }
        GrowMode::Depth => {}
    }
    if matches!(mode, GrowMode::Depth | GrowMode::Both { .. }) {
        aug.add_depth_gates(cfg.m_prime, cfg.init_scale, &mut rng)?;
    }

    if aug.gates.is_empty() {
        return Ok(GrowOutcome {
            net: net.clone(),
            loss_before,
            loss_after: loss_before,
            candidates: Vec::new(),
            width_selected: 0,
            depth_selected: 0,
            slots_activated: 0,
        });
    }

    let trained = step_one(&mut aug, data, cfg)?;
    let scored = integrated_gradient_scores(
        &aug,
        &trained.tilde_epsilon,
        &trained.tilde_delta,
        data,
        cfg.quadrature_points,
    )?;

    // Split the pool by family and select each under its own budget.
    let mut widths = vec![0.0; aug.gates.len()];
    let width_idx: Vec<usize> = aug
        .gates
        .iter()
        .enumerate()
        .filter(|(_, g)| !matches!(g.kind, GateKind::LayerNeuron { .. }))
        .map(|(i, _)| i)
        .collect();
    let depth_idx: Vec<usize> = aug
        .gates
        .iter()
        .enumerate()
        .filter(|(_, g)| matches!(g.kind, GateKind::LayerNeuron { .. }))
        .map(|(i, _)| i)
        .collect();

    let mut width_selected = 0;
    if !width_idx.is_empty() {
        let sub = ScoreVector {
            scores: width_idx.iter().map(|&i| scored.scores[i]).collect(),
            tilde_epsilon: width_idx.iter().map(|&i| scored.tilde_epsilon[i]).collect(),
        };
        let budget = cfg.width_budget.resolve(width_hosts)?;
        let sel = select_width(&sub, budget, cfg.step_size);
        for (k, &i) in width_idx.iter().enumerate() {
            widths[i] = sel[k];
            if sel[k] != 0.0 {
                width_selected += 1;
            }
        }
    }

    let mut depth_selected = 0;
    let mut slots_activated = 0;
    if !depth_idx.is_empty() {
        let entries: Vec<(usize, f64)> = depth_idx
            .iter()
            .map(|&i| match aug.gates[i].kind {
                GateKind::LayerNeuron { slot } => (slot, scored.scores[i]),
                _ => unreachable!("filtered above"),
            })
            .collect();
        let sel = select_depth(
            &entries,
            cfg.depth_neuron_budget,
            cfg.depth_layer_budget,
            cfg.step_size,
        );
        let mut slots = std::collections::BTreeSet::new();
        for (k, &i) in depth_idx.iter().enumerate() {
            widths[i] = sel[k];
            if sel[k] != 0.0 {
                depth_selected += 1;
                slots.insert(entries[k].0);
            }
        }
        slots_activated = slots.len();
    }

    let grown = aug.materialize(&widths)?;
    let loss_after = grown.loss(data)?;

    let candidates = aug
        .gates
        .iter()
        .enumerate()
        .map(|(i, g)| CandidateOutcome {
            candidate_id: i,
            kind: g.kind.clone(),
            tilde_epsilon: scored.tilde_epsilon[i],
            score: scored.scores[i],
            width: widths[i],
            selected: widths[i] != 0.0,
        })
        .collect();

    Ok(GrowOutcome {
        net: grown,
        loss_before,
        loss_after,
        candidates,
        width_selected,
        depth_selected,
        slots_activated,
    })
}

/// Plain full-batch training of every network parameter: record once, then
/// `backward` / `sgd_step` / `forward` for `iters` iterations. Returns the
/// loss after the final step and writes trained weights back into `net`.
pub fn fit(net: &mut GrowableNetwork, data: &Dataset, iters: usize, learning_rate: f64) -> Result<f64> {
    net.validate()?;
    let mut store = ParameterStore::new();
    let binding = net.register_params(&mut store)?;
    let (mut tape, mut loss) = record_forward(&store, |b| net.emit_loss(b, &binding, data))?;
    for it in 0..iters {
        let grad = tape.backward(&store).map_err(|e| fit_err(e, it))?;
        sgd_step(&mut store, &grad, learning_rate).map_err(|e| fit_err(e, it))?;
        loss = tape.forward(&store).map_err(|e| fit_err(e, it))?;
    }
    net.write_back(&store, &binding)?;
    Ok(loss)
}

fn fit_err(e: Error, iteration: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("training iteration {iteration}: {m}")),
        other => other,
    }
}

/// Training schedule around grow phases.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub grow_phases: usize,
    /// Full-batch iterations between grows (and before the first/after the
    /// last).
    pub train_iters: usize,
    pub learning_rate: f64,
}

/// Loss and size at one phase boundary (after that phase's fine-tune).
#[derive(Debug, Clone)]
pub struct PhaseRecord {
    pub phase: usize,
    pub loss: f64,
    pub neurons: usize,
    pub params: usize,
}

/// A finished growing run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub net: GrowableNetwork,
    /// One record per phase boundary: `grow_phases + 1` entries.
    pub phases: Vec<PhaseRecord>,
    pub grows: Vec<GrowOutcome>,
}

/// Alternates fine-tuning and growing: `fit` then `grow_step`, repeated for
/// `schedule.grow_phases` phases, with a final `fit` on the last network.
/// Phase `p` draws its candidates from a stream derived from
/// `cfg.rng_seed` and `p`, so runs are reproducible end to end.
pub fn firefly_train(
    net: &GrowableNetwork,
    data: &Dataset,
    cfg: &GrowthConfig,
    schedule: &Schedule,
    mode: &GrowMode,
) -> Result<TrainRun> {
    cfg.validate()?;
    let mut current = net.clone();
    let mut phases = Vec::with_capacity(schedule.grow_phases + 1);
    let mut grows = Vec::with_capacity(schedule.grow_phases);
    for phase in 0..=schedule.grow_phases {
        let loss = fit(&mut current, data, schedule.train_iters, schedule.learning_rate)?;
        phases.push(PhaseRecord {
            phase,
            loss,
            neurons: current.total_neurons(),
            params: current.count_params(),
        });
        if phase < schedule.grow_phases {
            let outcome = grow_step(&current, data, &cfg.for_phase(phase), mode)?;
            current = outcome.net.clone();
            grows.push(outcome);
        }
    }
    Ok(TrainRun {
        net: current,
        phases,
        grows,
    })
}
