//! Synthetic benchmarks, dataset plumbing, and baseline growers.
//!
//! The regression benchmark is a random mixture of Gaussian-bump units: draw
//! a ground-truth network, sample uniform inputs, and fit models of growing
//! width against the noiseless function values. The continual-learning
//! benchmark is a sequence of 2-D classification tasks, each a ring of
//! Gaussian class clusters at a task-specific rotation and radius.
//!
//! Baselines mirror the gate-scored grower with undirected randomness: pick a
//! random neuron to split (or a random brand-new neuron from a proposal
//! pool), briefly fine-tune each of `k` such candidates, and keep the best.
//! Training from scratch at fixed widths anchors the comparison.
//!
//! All generators are seeded through [`stream_rng`], which derives an
//! independent ChaCha stream per (seed, purpose) pair, so adding a new
//! consumer never shifts the draws of an existing one.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::project_unit_ball;
use crate::error::{Error, Result};
use crate::growth::fit;
use crate::network::{affine_point, Activation, GrowableNetwork, Neuron};

/// RNG for one named purpose under a base seed.
///
/// The purpose tag and counter pick a ChaCha stream, so draws for different
/// purposes are independent and stable: reordering call sites or adding new
/// tags leaves existing streams untouched.
pub fn stream_rng(seed: u64, tag: &str, counter: u64) -> ChaCha8Rng {
    // FNV-1a over the tag, then mix the counter in with a golden-ratio step.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= counter.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Supervision targets for a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Regression(Vec<f64>),
    Classification { labels: Vec<u32>, classes: usize },
}

/// A fixed batch of points, stored column-major (one vector per feature).
///
/// Column storage is what tape emission wants: each feature column becomes
/// one constant node covering the whole batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<Vec<f64>>,
    targets: Targets,
}

impl Dataset {
    pub fn from_columns(columns: Vec<Vec<f64>>, targets: Targets) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::structural("dataset needs at least one feature"));
        }
        let n = columns[0].len();
        if n == 0 {
            return Err(Error::structural("dataset needs at least one point"));
        }
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::structural("feature columns have unequal lengths"));
        }
        if columns.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite feature value"));
        }
        match &targets {
            Targets::Regression(ys) => {
                if ys.len() != n {
                    return Err(Error::structural("target length does not match points"));
                }
                if ys.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric("non-finite regression target"));
                }
            }
            Targets::Classification { labels, classes } => {
                if labels.len() != n {
                    return Err(Error::structural("label length does not match points"));
                }
                if *classes < 2 {
                    return Err(Error::structural("classification needs at least two classes"));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l as usize >= *classes) {
                    return Err(Error::structural(format!(
                        "label {bad} out of range for {classes} classes"
                    )));
                }
            }
        }
        Ok(Dataset { columns, targets })
    }

    /// Row-major construction for regression targets.
    pub fn regression(rows: Vec<Vec<f64>>, ys: Vec<f64>) -> Result<Self> {
        let columns = rows_to_columns(rows)?;
        Dataset::from_columns(columns, Targets::Regression(ys))
    }

    /// Row-major construction for classification targets.
    pub fn classification(rows: Vec<Vec<f64>>, labels: Vec<u32>, classes: usize) -> Result<Self> {
        let columns = rows_to_columns(rows)?;
        Dataset::from_columns(columns, Targets::Classification { labels, classes })
    }

    pub fn n_points(&self) -> usize {
        self.columns[0].len()
    }

    pub fn input_dim(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, d: usize) -> &[f64] {
        &self.columns[d]
    }

    pub fn copy_row(&self, j: usize, buf: &mut [f64]) {
        for (b, c) in buf.iter_mut().zip(&self.columns) {
            *b = c[j];
        }
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    /// CSV rendering with 17-significant-digit floats.
    ///
    /// Headers are fixed by dimensionality: `x,y` for 1-D regression,
    /// `x1,x2,label` for 2-D classification. Other shapes have no CSV form.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::new();
        match (&self.targets, self.input_dim()) {
            (Targets::Regression(ys), 1) => {
                out.push_str("x,y\n");
                for (x, y) in self.columns[0].iter().zip(ys) {
                    out.push_str(&format!("{x:.16e},{y:.16e}\n"));
                }
            }
            (Targets::Classification { labels, .. }, 2) => {
                out.push_str("x1,x2,label\n");
                for ((x1, x2), l) in self.columns[0].iter().zip(&self.columns[1]).zip(labels) {
                    out.push_str(&format!("{x1:.16e},{x2:.16e},{l}\n"));
                }
            }
            _ => {
                return Err(Error::structural(
                    "CSV export covers 1-D regression and 2-D classification only",
                ))
            }
        }
        Ok(out)
    }
}

fn rows_to_columns(rows: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    if rows.is_empty() {
        return Err(Error::structural("dataset needs at least one point"));
    }
    let d = rows[0].len();
    if d == 0 {
        return Err(Error::structural("dataset needs at least one feature"));
    }
    let mut columns = vec![Vec::with_capacity(rows.len()); d];
    for row in &rows {
        if row.len() != d {
            return Err(Error::structural("ragged feature rows"));
        }
        for (c, &v) in columns.iter_mut().zip(row) {
            c.push(v);
        }
    }
    Ok(columns)
}

/// Ground truth for the regression benchmark: a random mixture of
/// Gaussian-bump units `sum_i w_i exp(-(a_i x + b_i)^2 / 2)`.
#[derive(Debug, Clone)]
pub struct ToyRbfTruth {
    pub neurons: Vec<Neuron>,
    pub seed: u64,
}

/// Width of the default ground-truth mixture.
pub const TOY_TRUTH_NEURONS: usize = 15;
/// Standard deviation of the ground-truth weight draws.
pub const TOY_TRUTH_SD: f64 = 3.0;
/// Input domain of the regression benchmark.
pub const TOY_X_RANGE: (f64, f64) = (-5.0, 5.0);

pub fn gen_toy_truth(seed: u64) -> ToyRbfTruth {
    gen_toy_truth_sized(seed, TOY_TRUTH_NEURONS)
}

/// Ground truth with `m` units; all weights i.i.d. `N(0, 3^2)`.
/// Draw order per unit: slope, bias, output weight.
pub fn gen_toy_truth_sized(seed: u64, m: usize) -> ToyRbfTruth {
    let mut rng = stream_rng(seed, "toy-truth", 0);
    let normal = Normal::new(0.0, TOY_TRUTH_SD).expect("valid sd");
    let neurons = (0..m)
        .map(|_| {
            let slope = normal.sample(&mut rng);
            let bias = normal.sample(&mut rng);
            let w = normal.sample(&mut rng);
            Neuron::new(vec![slope, bias], vec![w])
        })
        .collect();
    ToyRbfTruth { neurons, seed }
}

impl ToyRbfTruth {
    pub fn eval(&self, x: f64) -> f64 {
        let v = [x];
        let mut acc = 0.0;
        for n in &self.neurons {
            acc += n.out_weight[0] * Activation::RbfGaussian.apply(affine_point(&v, &n.theta));
        }
        acc
    }

    /// The truth as a network, for reuse of the evaluation paths.
    pub fn to_network(&self) -> GrowableNetwork {
        GrowableNetwork {
            input_dim: 1,
            layers: vec![crate::network::Layer {
                activation: Activation::RbfGaussian,
                neurons: self.neurons.clone(),
            }],
            residual_blocks: Vec::new(),
            head: crate::network::HeadKind::Regression,
        }
    }
}

/// Noiseless regression samples: `x ~ U[-5, 5]`, `y = truth(x)`.
pub fn gen_toy_dataset(truth: &ToyRbfTruth, n_points: usize, seed: u64) -> Result<Dataset> {
    if n_points == 0 {
        return Err(Error::contract("need at least one point"));
    }
    let mut rng = stream_rng(seed, "toy-data", 0);
    let (lo, hi) = TOY_X_RANGE;
    let xs: Vec<f64> = (0..n_points).map(|_| rng.random_range(lo..hi)).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| truth.eval(x)).collect();
    Dataset::from_columns(vec![xs], Targets::Regression(ys))
}

/// Shape of one continual-learning task family.
#[derive(Debug, Clone)]
pub struct ClTaskOpts {
    pub classes: usize,
    pub points_per_task: usize,
    pub cluster_sd: f64,
    /// Clusters per class, interleaved around the ring. Above 1 the classes
    /// stop being linearly separable, so solving a task takes real capacity.
    pub clusters_per_class: usize,
}

impl Default for ClTaskOpts {
    fn default() -> Self {
        ClTaskOpts {
            classes: 4,
            points_per_task: 400,
            cluster_sd: 0.35,
            clusters_per_class: 1,
        }
    }
}

/// `num_tasks` classification tasks: class clusters sit on a ring whose
/// rotation (`U[0, 2pi)`) and radius (`U[1.6, 2.4]`) are redrawn per task.
/// Points cycle through clusters so every task is class-balanced.
pub fn gen_cl_tasks(num_tasks: usize, seed: u64) -> Result<Vec<Dataset>> {
    gen_cl_tasks_with(num_tasks, seed, &ClTaskOpts::default())
}

pub fn gen_cl_tasks_with(num_tasks: usize, seed: u64, opts: &ClTaskOpts) -> Result<Vec<Dataset>> {
    if num_tasks == 0 {
        return Err(Error::contract("need at least one task"));
    }
    if opts.classes < 2 || opts.clusters_per_class == 0 {
        return Err(Error::contract("task shape too small"));
    }
    let slots = opts.classes * opts.clusters_per_class;
    if opts.points_per_task < slots {
        return Err(Error::contract("task shape too small"));
    }
    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let mut rng = stream_rng(seed, "cl-task", t as u64);
        let rotation = rng.random_range(0.0..std::f64::consts::TAU);
        let radius = rng.random_range(1.6..2.4);
        let noise = Normal::new(0.0, opts.cluster_sd).expect("valid sd");
        let mut rows = Vec::with_capacity(opts.points_per_task);
        let mut labels = Vec::with_capacity(opts.points_per_task);
        for j in 0..opts.points_per_task {
            let slot = j % slots;
            let angle = rotation + std::f64::consts::TAU * slot as f64 / slots as f64;
            rows.push(vec![
                radius * angle.cos() + noise.sample(&mut rng),
                radius * angle.sin() + noise.sample(&mut rng),
            ]);
            labels.push((slot % opts.classes) as u32);
        }
        tasks.push(Dataset::classification(rows, labels, opts.classes)?);
    }
    Ok(tasks)
}

/// Knobs shared by the random-candidate baselines.
#[derive(Debug, Clone)]
pub struct BaselineOpts {
    /// Candidates tried per grow event; the best post-polish loss wins.
    pub k_trials: usize,
    /// Brand-new-neuron proposals in the pool (plus-new variant only).
    pub m_prime: usize,
    /// Fine-tune iterations given to each candidate before comparison.
    pub finetune_iters: usize,
    pub learning_rate: f64,
    /// Split perturbation radius, matching the gated grower's step size.
    pub step_size: f64,
    /// Standard deviation of direction draws before ball projection.
    pub init_scale: f64,
}

impl Default for BaselineOpts {
    fn default() -> Self {
        BaselineOpts {
            k_trials: 3,
            m_prime: 5,
            finetune_iters: 100,
            learning_rate: 0.5,
            step_size: 0.01,
            init_scale: 0.1,
        }
    }
}

/// Hosts available for a random split: every (layer, neuron) pair.
fn all_hosts(net: &GrowableNetwork) -> Vec<(usize, usize)> {
    let mut hosts = Vec::new();
    for (l, layer) in net.layers.iter().enumerate() {
        for i in 0..layer.neurons.len() {
            hosts.push((l, i));
        }
    }
    hosts
}

/// Random direction of the given length: i.i.d. `N(0, scale^2)`, projected
/// onto the unit ball.
pub(crate) fn random_direction(len: usize, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, scale).expect("valid scale");
    let mut v: Vec<f64> = (0..len).map(|_| normal.sample(rng)).collect();
    project_unit_ball(&mut v);
    v
}

/// Replaces `net.layers[l].neurons[i]` by two half-output-weight copies at
/// `theta +- step * delta`, the plus child taking the host's position.
fn apply_split(net: &mut GrowableNetwork, l: usize, i: usize, delta: &[f64], step: f64) {
    let host = net.layers[l].neurons[i].clone();
    let mut plus = host.clone();
    let mut minus = host;
    for ((p, m), d) in plus.theta.iter_mut().zip(&mut minus.theta).zip(delta) {
        *p += step * d;
        *m -= step * d;
    }
    for (p, m) in plus.out_weight.iter_mut().zip(&mut minus.out_weight) {
        *p /= 2.0;
        *m /= 2.0;
    }
    net.layers[l].neurons[i] = plus;
    net.layers[l].neurons.insert(i + 1, minus);
}

/// Grows by one neuron via undirected random splitting: `k` candidate splits
/// (uniform host, random direction), each fine-tuned briefly; the best
/// post-polish loss wins, ties to the earliest trial.
pub fn baseline_random_split(
    net: &GrowableNetwork,
    data: &Dataset,
    opts: &BaselineOpts,
    rng: &mut impl Rng,
) -> Result<GrowableNetwork> {
    if opts.k_trials == 0 {
        return Err(Error::contract("k_trials must be positive"));
    }
    let hosts = all_hosts(net);
    let mut best: Option<(f64, GrowableNetwork)> = None;
    for _ in 0..opts.k_trials {
        let (l, i) = hosts[rng.random_range(0..hosts.len())];
        let delta = random_direction(net.layers[l].neurons[i].theta.len(), opts.init_scale, rng);
        let mut cand = net.clone();
        apply_split(&mut cand, l, i, &delta, opts.step_size);
        let loss = fit(&mut cand, data, opts.finetune_iters, opts.learning_rate)?;
        if best.as_ref().map_or(true, |(b, _)| loss < *b) {
            best = Some((loss, cand));
        }
    }
    Ok(best.expect("k_trials >= 1").1)
}

/// Like [`baseline_random_split`], but the pool also holds `m_prime`
/// brand-new-neuron proposals (drawn once per call, initialized like the
/// gated grower's new-neuron candidates), and each trial picks uniformly
/// from existing-neuron splits and proposals together.
pub fn baseline_random_split_plus_new(
    net: &GrowableNetwork,
    data: &Dataset,
    opts: &BaselineOpts,
    rng: &mut impl Rng,
) -> Result<GrowableNetwork> {
    if opts.k_trials == 0 {
        return Err(Error::contract("k_trials must be positive"));
    }
    let hosts = all_hosts(net);
    // Proposals first, so the pool is fixed before any trial draws.
    let proposals: Vec<(usize, Vec<f64>)> = (0..opts.m_prime)
        .map(|_| {
            let l = rng.random_range(0..net.layers.len());
            let len = net.layers[l].in_dim() + 1 + net.layers[l].out_dim();
            (l, random_direction(len, opts.init_scale, rng))
        })
        .collect();
    let pool = hosts.len() + proposals.len();
    let mut best: Option<(f64, GrowableNetwork)> = None;
    for _ in 0..opts.k_trials {
        let pick = rng.random_range(0..pool);
        let mut cand = net.clone();
        if pick < hosts.len() {
            let (l, i) = hosts[pick];
            let delta =
                random_direction(net.layers[l].neurons[i].theta.len(), opts.init_scale, rng);
            apply_split(&mut cand, l, i, &delta, opts.step_size);
        } else {
            let (l, delta) = &proposals[pick - hosts.len()];
            let d = net.layers[*l].in_dim() + 1;
            let theta = delta[..d].to_vec();
            let out = delta[d..].iter().map(|v| opts.step_size * v).collect();
            cand.layers[*l].neurons.push(Neuron::new(theta, out));
        }
        let loss = fit(&mut cand, data, opts.finetune_iters, opts.learning_rate)?;
        if best.as_ref().map_or(true, |(b, _)| loss < *b) {
            best = Some((loss, cand));
        }
    }
    Ok(best.expect("k_trials >= 1").1)
}

/// One fixed-width from-scratch training run.
#[derive(Debug, Clone)]
pub struct ScratchResult {
    pub width: usize,
    pub final_loss: f64,
    pub net: GrowableNetwork,
}

/// Trains a fresh Gaussian-unit regressor per width, each from its own
/// seeded initialization.
pub fn baseline_scratch(
    data: &Dataset,
    widths: &[usize],
    train_iters: usize,
    learning_rate: f64,
    init_scale: f64,
    seed: u64,
) -> Result<Vec<ScratchResult>> {
    let mut results = Vec::with_capacity(widths.len());
    for &w in widths {
        if w == 0 {
            return Err(Error::contract("scratch width must be positive"));
        }
        let mut rng = stream_rng(seed, "scratch-init", w as u64);
        let mut net = GrowableNetwork::rbf_regression(data.input_dim(), w, init_scale, &mut rng);
        let final_loss = fit(&mut net, data, train_iters, learning_rate)?;
        results.push(ScratchResult {
            width: w,
            final_loss,
            net,
        });
    }
    Ok(results)
}
