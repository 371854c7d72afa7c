//! KNODE residual learning: FIFO data queue, one-step RK4 prediction loss, exact
//! reverse-mode gradients through the unrolled integrator, and an Adam optimizer.
//!
//! The hybrid model is `ẋ = Ax + Bu + d̂_θ(x)`. Consecutive samples `(x_i, u_i)`,
//! `(x_{i+1}, ·)` give one prediction `x̂_{i+1}`: a single RK4 step of the hybrid model
//! from `x_i` across `[t_i, t_{i+1}]` with `u_i` held. The loss is
//!
//! ```text
//! L(θ) = 1/(m−1) Σ_i ‖x̂_{i+1} − x_{i+1}‖² + λ‖θ‖²
//! ```

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::dynamics::{nominal_vec, rk4_step, State, Vec3, Vec6};
use crate::error::TrainError;
use crate::neural::{FoldCache, FoldedNet, GradAccum, ParamVector, ResidualNet, DEFAULT_HIDDEN};

/// One observed state-control pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: State,
    pub u: Vec3,
}

impl Sample {
    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.x.is_finite() && self.u.iter().all(|c| c.is_finite())
    }
}

/// FIFO buffer holding at most `capacity` seconds of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingQueue {
    samples: VecDeque<Sample>,
    capacity: f64,
}

impl TrainingQueue {
    pub fn new(capacity: f64) -> Self {
        TrainingQueue {
            samples: VecDeque::new(),
            capacity,
        }
    }

    /// A queue that never evicts.
    pub fn unbounded() -> Self {
        Self::new(f64::INFINITY)
    }

    pub fn from_samples(samples: &[Sample], capacity: f64) -> Result<Self, TrainError> {
        let mut q = Self::new(capacity);
        for s in samples {
            q.push(*s)?;
        }
        Ok(q)
    }

    /// Appends `s` and evicts from the front until the time span fits the capacity.
    pub fn push(&mut self, s: Sample) -> Result<(), TrainError> {
        if !s.is_finite() {
            return Err(TrainError::NonFiniteSample(s.t));
        }
        if let Some(last) = self.samples.back() {
            if s.t <= last.t {
                return Err(TrainError::NonMonotoneTimestamp { last: last.t, got: s.t });
            }
        }
        self.samples.push_back(s);
        // Timestamps are usually k·dt, so spans carry rounding error.
        let limit = self.capacity * (1.0 + 1e-9);
        while let (Some(first), Some(last)) = (self.samples.front(), self.samples.back()) {
            if last.t - first.t > limit {
                self.samples.pop_front();
            } else {
                break;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn span(&self) -> f64 {
        match (self.samples.front(), self.samples.back()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter()
    }

    pub fn to_vec(&self) -> Vec<Sample> {
        self.samples.iter().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    /// Weight of the `‖θ‖²` regularizer.
    pub lambda: f64,
    pub learning_rate: f64,
    /// Passes over the queue per training round.
    pub epochs: usize,
    /// Contiguous samples per optimizer step; 0 means one full-batch step per epoch.
    pub batch_size: usize,
    /// Number of prediction steps rolled out from each sample.
    pub horizon: usize,
    /// Rounds used by [`offline_train`].
    pub offline_rounds: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lambda: 1e-10,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 0,
            horizon: 1,
            offline_rounds: 10,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.horizon == 0 {
            return Err(TrainError::Config("horizon must be >= 1".into()));
        }
        if self.hidden == 0 {
            return Err(TrainError::Config("hidden width must be >= 1".into()));
        }
        Ok(())
    }
}

/// Immutable published model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    pub net: ResidualNet,
    pub seed: u64,
    pub version: u64,
    pub trained_at: f64,
}

impl ModelSnapshot {
    /// Version-0 snapshot of the training initialization (`d̂ ≡ 0`).
    pub fn initial(hidden: usize, seed: u64) -> Self {
        ModelSnapshot {
            net: ResidualNet::init(hidden, seed),
            seed,
            version: 0,
            trained_at: 0.0,
        }
    }

    pub fn params(&self) -> ParamVector {
        self.net.flatten()
    }
}

/// Single-slot publication point shared between a trainer and a controller.
///
/// Readers clone an `Arc`, so they always see a complete snapshot; the lock is only held
/// for the pointer swap.
#[derive(Debug)]
pub struct SnapshotSlot {
    inner: Mutex<Arc<ModelSnapshot>>,
}

impl SnapshotSlot {
    pub fn new(initial: ModelSnapshot) -> Self {
        SnapshotSlot {
            inner: Mutex::new(Arc::new(initial)),
        }
    }

    /// Replaces the current snapshot; stale versions are ignored. Returns whether it was stored.
    pub fn publish(&self, snapshot: ModelSnapshot) -> bool {
        let mut guard = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        if snapshot.version <= guard.version {
            return false;
        }
        *guard = Arc::new(snapshot);
        true
    }

    pub fn latest(&self) -> Arc<ModelSnapshot> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

fn hybrid(net: &ResidualNet, x: &Vec6, u: &Vec3) -> Vec6 {
    nominal_vec(x, u) + net.forward(x)
}

/// Prediction of the state at `to.t` starting from `from`, with `from.u` held over the interval.
pub fn predict(net: &ResidualNet, from: &Sample, to: &Sample) -> Result<State, TrainError> {
    let dt = to.t - from.t;
    Ok(rk4_step(|y, _| hybrid(net, y, &from.u), &from.x, from.t, dt)?)
}

/// Same as [`predict`] but with a flat parameter vector.
pub fn predict_with_params(
    params: &ParamVector,
    hidden: usize,
    from: &Sample,
    to: &Sample,
) -> Result<State, TrainError> {
    let net = ResidualNet::from_params(hidden, params.clone())?;
    predict(&net, from, to)
}

/// Per-stage storage of one RK4 step, reused across samples.
struct StepTape {
    caches: [FoldCache; 4],
    dt: f64,
}

impl StepTape {
    fn new(hidden: usize) -> Self {
        StepTape {
            caches: std::array::from_fn(|_| FoldCache::new(hidden)),
            dt: 0.0,
        }
    }
}

/// Workspace for loss/gradient evaluation.
struct Tape {
    steps: Vec<StepTape>,
    preds: Vec<Vec6>,
}

impl Tape {
    fn new(hidden: usize, horizon: usize) -> Self {
        Tape {
            steps: (0..horizon).map(|_| StepTape::new(hidden)).collect(),
            preds: vec![Vec6::zeros(); horizon],
        }
    }
}

/// RK4 step of the hybrid model recording the network activations of every stage.
fn taped_step(net: &FoldedNet, x: &Vec6, u: &Vec3, dt: f64, tape: &mut StepTape) -> Vec6 {
    tape.dt = dt;
    let half = 0.5 * dt;
    let [c1, c2, c3, c4] = &mut tape.caches;
    let k1 = nominal_vec(x, u) + net.forward(x, c1);
    let y2 = x + k1 * half;
    let k2 = nominal_vec(&y2, u) + net.forward(&y2, c2);
    let y3 = x + k2 * half;
    let k3 = nominal_vec(&y3, u) + net.forward(&y3, c3);
    let y4 = x + k3 * dt;
    let k4 = nominal_vec(&y4, u) + net.forward(&y4, c4);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// `Aᵀg + J_d̂ᵀg` at a taped stage. Since `(Ay)_i = y_{i+3}`, `Aᵀ` moves the
/// position-row adjoint onto the velocity entries.
fn field_vjp(net: &FoldedNet, cache: &FoldCache, g: &Vec6, acc: &mut GradAccum) -> Vec6 {
    let mut out = net.backward(cache, g, acc);
    out[3] += g[0];
    out[4] += g[1];
    out[5] += g[2];
    out
}

/// Backpropagates `x̄'` through one taped RK4 step; returns `x̄`.
fn step_backward(net: &FoldedNet, tape: &StepTape, bar_next: &Vec6, acc: &mut GradAccum) -> Vec6 {
    let dt = tape.dt;
    let half = 0.5 * dt;
    let mut bar_x = *bar_next;
    let bar_k4 = bar_next * (dt / 6.0);
    let mut bar_k3 = bar_next * (dt / 3.0);
    let mut bar_k2 = bar_next * (dt / 3.0);
    let mut bar_k1 = bar_next * (dt / 6.0);

    let bar_y4 = field_vjp(net, &tape.caches[3], &bar_k4, acc);
    bar_x += bar_y4;
    bar_k3 += bar_y4 * dt;
    let bar_y3 = field_vjp(net, &tape.caches[2], &bar_k3, acc);
    bar_x += bar_y3;
    bar_k2 += bar_y3 * half;
    let bar_y2 = field_vjp(net, &tape.caches[1], &bar_k2, acc);
    bar_x += bar_y2;
    bar_k1 += bar_y2 * half;
    let bar_y1 = field_vjp(net, &tape.caches[0], &bar_k1, acc);
    bar_x += bar_y1;
    bar_x
}

fn term_count(m: usize, horizon: usize) -> usize {
    (0..m.saturating_sub(1)).map(|i| horizon.min(m - 1 - i)).sum()
}

/// Data term over the prediction windows starting at `starts`, normalized by `norm`.
/// Accumulates its gradient into `grad` when given.
fn data_term(
    net: &FoldedNet,
    samples: &[Sample],
    starts: std::ops::Range<usize>,
    horizon: usize,
    norm: f64,
    mut grad: Option<&mut GradAccum>,
    tape: &mut Tape,
) -> Result<f64, TrainError> {
    let m = samples.len();
    let mut total = 0.0;
    for i in starts {
        let steps = horizon.min(m - 1 - i);
        let mut x = samples[i].x.0;
        for s in 0..steps {
            let (from, to) = (&samples[i + s], &samples[i + s + 1]);
            x = taped_step(net, &x, &from.u, to.t - from.t, &mut tape.steps[s]);
            tape.preds[s] = x;
        }
        let mut bar = Vec6::zeros();
        for s in (0..steps).rev() {
            let err = tape.preds[s] - samples[i + s + 1].x.0;
            let e2 = err.norm_squared();
            if !e2.is_finite() {
                return Err(TrainError::NonFiniteLoss);
            }
            total += e2 / norm;
            if let Some(g) = grad.as_deref_mut() {
                bar += err * (2.0 / norm);
                bar = step_backward(net, &tape.steps[s], &bar, g);
            }
        }
    }
    Ok(total)
}

fn check_samples(samples: &[Sample]) -> Result<(), TrainError> {
    if samples.len() < 2 {
        return Err(TrainError::NotEnoughSamples(samples.len()));
    }
    for w in samples.windows(2) {
        if w[1].t <= w[0].t {
            return Err(TrainError::NonMonotoneTimestamp { last: w[0].t, got: w[1].t });
        }
    }
    Ok(())
}

/// KNODE loss of `net` on a time-ordered sample sequence.
pub fn loss_on_samples(net: &ResidualNet, samples: &[Sample], cfg: &TrainerConfig) -> Result<f64, TrainError> {
    check_samples(samples)?;
    let horizon = cfg.horizon.max(1);
    let norm = term_count(samples.len(), horizon) as f64;
    let mut tape = Tape::new(net.hidden(), horizon);
    let data = data_term(&net.folded(), samples, 0..samples.len() - 1, horizon, norm, None, &mut tape)?;
    Ok(data + cfg.lambda * net.flatten().norm_squared())
}

/// KNODE loss of the parameters `params` on the queue contents.
pub fn knode_loss(params: &ParamVector, q: &TrainingQueue, cfg: &TrainerConfig) -> Result<f64, TrainError> {
    let net = ResidualNet::from_params(cfg.hidden, params.clone())?;
    loss_on_samples(&net, &q.to_vec(), cfg)
}

/// Loss and its exact gradient with respect to every network parameter.
pub fn loss_and_gradient(
    net: &ResidualNet,
    samples: &[Sample],
    cfg: &TrainerConfig,
) -> Result<(f64, ParamVector), TrainError> {
    check_samples(samples)?;
    let horizon = cfg.horizon.max(1);
    let norm = term_count(samples.len(), horizon) as f64;
    let mut tape = Tape::new(net.hidden(), horizon);
    let mut acc = GradAccum::new(net);
    let data = data_term(&net.folded(), samples, 0..samples.len() - 1, horizon, norm, Some(&mut acc), &mut tape)?;
    let mut grad = vec![0.0; net.param_len()];
    acc.finish(net, &mut grad);
    let params = net.params();
    for (g, p) in grad.iter_mut().zip(params) {
        *g += 2.0 * cfg.lambda * p;
    }
    let loss = data + cfg.lambda * net.flatten().norm_squared();
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteLoss);
    }
    Ok((loss, ParamVector(grad)))
}

/// Adam with the usual bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            // The KNODE gradients scale with dt², far below the customary 1e-8.
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Runs `cfg.epochs` passes of Adam over `samples` starting from `net`.
fn run_epochs(net: &ResidualNet, samples: &[Sample], cfg: &TrainerConfig, lr: f64) -> Result<ResidualNet, TrainError> {
    let mut current = net.clone();
    let mut adam = Adam::new(current.param_len(), lr);
    let horizon = cfg.horizon.max(1);
    let m = samples.len();
    let windows = m - 1;
    let batch = if cfg.batch_size == 0 { windows } else { cfg.batch_size.min(windows) };
    let mut tape = Tape::new(current.hidden(), horizon);
    let mut grad = vec![0.0; current.param_len()];
    let mut acc = GradAccum::new(&current);
    for _ in 0..cfg.epochs {
        let mut start = 0;
        while start < windows {
            let end = (start + batch).min(windows);
            let norm = (start..end).map(|i| horizon.min(m - 1 - i)).sum::<usize>() as f64;
            grad.iter_mut().for_each(|g| *g = 0.0);
            acc.reset();
            data_term(&current.folded(), samples, start..end, horizon, norm, Some(&mut acc), &mut tape)?;
            acc.finish(&current, &mut grad);
            for (g, p) in grad.iter_mut().zip(current.params()) {
                *g += 2.0 * cfg.lambda * p;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteLoss);
            }
            adam.update(current.params_mut(), &grad);
            start = end;
        }
    }
    Ok(current)
}

/// Outcome of a training round.
#[derive(Clone, Debug)]
pub struct RoundReport {
    pub snapshot: ModelSnapshot,
    pub loss_before: f64,
    pub loss_after: f64,
    /// Number of learning-rate halvings that were needed.
    pub halvings: u32,
    /// False when every attempt increased the loss and the previous parameters were kept.
    pub improved: bool,
}

const MAX_HALVINGS: u32 = 3;

/// One training round on a frozen copy of the data.
///
/// If the loss on `samples` increases, the round is retried from the same starting point
/// with the learning rate halved, at most three times; if it still increases the previous
/// parameters are kept.
pub fn train_round_on(
    prev: &ModelSnapshot,
    samples: &[Sample],
    cfg: &TrainerConfig,
    trained_at: f64,
) -> Result<RoundReport, TrainError> {
    cfg.validate()?;
    check_samples(samples)?;
    let loss_before = loss_on_samples(&prev.net, samples, cfg)?;
    let mut lr = cfg.learning_rate;
    let mut halvings = 0;
    loop {
        let attempt = run_epochs(&prev.net, samples, cfg, lr).and_then(|net| {
            let loss = loss_on_samples(&net, samples, cfg)?;
            if loss.is_finite() {
                Ok((net, loss))
            } else {
                Err(TrainError::NonFiniteLoss)
            }
        });
        match attempt {
            Ok((net, loss_after)) if loss_after <= loss_before => {
                return Ok(RoundReport {
                    snapshot: ModelSnapshot {
                        net,
                        seed: prev.seed,
                        version: prev.version + 1,
                        trained_at,
                    },
                    loss_before,
                    loss_after,
                    halvings,
                    improved: true,
                })
            }
            Ok(_) | Err(TrainError::NonFiniteLoss) if halvings < MAX_HALVINGS => {
                halvings += 1;
                lr *= 0.5;
            }
            Ok(_) => {
                return Ok(RoundReport {
                    snapshot: ModelSnapshot {
                        net: prev.net.clone(),
                        seed: prev.seed,
                        version: prev.version + 1,
                        trained_at,
                    },
                    loss_before,
                    loss_after: loss_before,
                    halvings,
                    improved: false,
                })
            }
            Err(e) => return Err(e),
        }
    }
}

/// Trains from `prev` on a copy of the queue contents; returns the next snapshot.
pub fn train_round(
    prev: &ModelSnapshot,
    q: &TrainingQueue,
    cfg: &TrainerConfig,
    trained_at: f64,
) -> Result<ModelSnapshot, TrainError> {
    Ok(train_round_on(prev, &q.to_vec(), cfg, trained_at)?.snapshot)
}

/// Pre-trains a model on a whole recorded dataset (`cfg.offline_rounds` rounds).
pub fn offline_train(dataset: &[Sample], cfg: &TrainerConfig) -> Result<ModelSnapshot, TrainError> {
    cfg.validate()?;
    check_samples(dataset)?;
    if dataset.iter().any(|s| !s.is_finite()) {
        return Err(TrainError::NonFiniteSample(f64::NAN));
    }
    let trained_at = dataset.last().map(|s| s.t).unwrap_or(0.0);
    let mut snapshot = ModelSnapshot::initial(cfg.hidden, cfg.seed);
    for round in 0..cfg.offline_rounds {
        let report = train_round_on(&snapshot, dataset, cfg, trained_at)?;
        log::debug!(
            "offline round {round}: loss {:.3e} -> {:.3e} (halvings {})",
            report.loss_before,
            report.loss_after,
            report.halvings
        );
        snapshot = report.snapshot;
    }
    Ok(snapshot)
}
