//! Closed-loop simulation harness: scenario configuration, the 100 Hz control loop with an
//! interleaved or concurrent online trainer, metrics and the benchmark runner.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controllers::{
    hoacbf_control, hoacbf_update, history_with_derivatives, nodehoacbf_control, pid_desired_control,
    reference_circle, safety_filter, AdaptiveEstimate, CbfGains, ControlOutcome, KnowledgeKind, Obstacle,
    PidGains, ZeroResidual,
};
use crate::dynamics::{true_step, ResidualKind, State, Vec3, DEFAULT_DT};
use crate::error::SimError;
use crate::knode::{offline_train, train_round_on, ModelSnapshot, Sample, SnapshotSlot, TrainerConfig, TrainingQueue};

/// Safety controller under test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ControllerSpec {
    /// HOCBF with the plant's residual switched off.
    HocbfNoResidual,
    Hocbf,
    /// Concurrent-learning adaptive HOCBF with `d(x) = Y(x) θ̂`.
    HoAcbf {
        #[serde(default = "default_variant")]
        variant: String,
        kappa: f64,
        /// Γ = gamma · I.
        gamma: f64,
        knowledge: KnowledgeKind,
        #[serde(default = "default_history")]
        history_span: f64,
        #[serde(default = "default_bound")]
        bound: f64,
    },
    NodeOnline,
    /// Neural residual trained offline on a HOCBF run, or loaded from `model`.
    NodeOffline {
        #[serde(default)]
        model: Option<PathBuf>,
        #[serde(default = "default_pretrain")]
        pretrain_duration: f64,
    },
}

fn default_variant() -> String {
    "tuned".into()
}
fn default_history() -> f64 {
    0.5
}
fn default_bound() -> f64 {
    4.0
}
fn default_pretrain() -> f64 {
    40.0
}

impl ControllerSpec {
    pub fn label(&self) -> String {
        match self {
            ControllerSpec::HocbfNoResidual => "hocbf-no-residual".into(),
            ControllerSpec::Hocbf => "hocbf".into(),
            ControllerSpec::HoAcbf { variant, .. } => format!("hoacbf-{variant}"),
            ControllerSpec::NodeOnline => "node-online".into(),
            ControllerSpec::NodeOffline { .. } => "node-offline".into(),
        }
    }

    /// Tuned concurrent-learning gains used by the default suite.
    pub fn hoacbf_tuned(knowledge: KnowledgeKind, variant: &str) -> Self {
        ControllerSpec::HoAcbf {
            variant: variant.into(),
            kappa: 1.0,
            gamma: 1e-2,
            knowledge,
            history_span: 0.5,
            bound: 4.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub center: [f64; 3],
    pub radius: f64,
}

impl From<&ObstacleSpec> for Obstacle {
    fn from(o: &ObstacleSpec) -> Self {
        Obstacle::new(Vec3::from(o.center), o.radius)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpec {
    pub radius: f64,
    pub height: f64,
    pub omega: f64,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec {
            radius: 2.0,
            height: 1.0,
            omega: 0.5,
        }
    }
}

/// Everything needed to reproduce one closed-loop run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub controller: ControllerSpec,
    pub residual: ResidualKind,
    pub duration: f64,
    pub dt: f64,
    pub obstacles: Vec<ObstacleSpec>,
    pub gains: CbfGains,
    /// Bound on how fast ψ₂ can drift while a control is held, 1/s; the filter enforces
    /// `ψ₂ ≥ intersample_bound · dt` on top of `gains.margin`. Zero gives the continuous-time filter.
    pub intersample_bound: f64,
    pub pid: PidGains,
    pub reference: ReferenceSpec,
    /// Seconds of data kept by the online training queue.
    pub queue_capacity: f64,
    pub trainer: TrainerConfig,
    /// Simulated seconds between online training rounds in interleaved mode; 0 disables training.
    pub train_every: f64,
    pub seed: u64,
    /// `[r; v]` at t = 0; see [`Scenario::start_state`] for the default.
    pub initial_state: Option<[f64; 6]>,
    /// Minimum distance outside an obstacle's safety radius for the default start, m.
    pub initial_clearance: f64,
    /// Upper end of the seeded extra clearance of the default start, m.
    pub initial_jitter: f64,
    /// Transient excluded from the settled metrics, s.
    pub settle_exclude: f64,
    /// Restrict metrics to the azimuth sectors [0, π/4] ∪ [π, 5π/4].
    pub wedge_filter: bool,
    /// Optional symmetric box on every control component.
    pub u_bound: Option<f64>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "scenario".into(),
            controller: ControllerSpec::Hocbf,
            residual: ResidualKind::None,
            duration: 40.0,
            dt: DEFAULT_DT,
            obstacles: vec![ObstacleSpec {
                center: [0.0, 0.0, 0.0],
                radius: 3.0,
            }],
            gains: CbfGains::default(),
            intersample_bound: 36.0,
            pid: PidGains::default(),
            reference: ReferenceSpec::default(),
            queue_capacity: 10.0,
            trainer: TrainerConfig::default(),
            train_every: 1.0,
            seed: 0,
            initial_state: None,
            initial_clearance: 0.1,
            initial_jitter: 0.1,
            settle_exclude: 20.0,
            wedge_filter: false,
            u_bound: None,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be > 0, got {}", self.duration));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if self.settle_exclude >= self.duration {
            return bad(format!(
                "settle exclusion {} must be shorter than the duration {}",
                self.settle_exclude, self.duration
            ));
        }
        if self.obstacles.iter().any(|o| o.radius.is_nan() || o.radius <= 0.0) {
            return bad("obstacle radius must be > 0".into());
        }
        if !(self.gains.gamma1 > 0.0 && self.gains.gamma2 > 0.0) {
            return bad("CBF gains must be > 0".into());
        }
        if !(self.gains.margin >= 0.0 && self.intersample_bound >= 0.0) {
            return bad("constraint tightening must be >= 0".into());
        }
        if self.reference.radius <= 0.0 {
            return bad("reference radius must be > 0".into());
        }
        if self.queue_capacity <= 0.0 {
            return bad("queue capacity must be > 0".into());
        }
        if !(self.initial_clearance >= 0.0 && self.initial_jitter >= 0.0) {
            return bad("initial clearance and jitter must be >= 0".into());
        }
        if self.train_every < 0.0 {
            return bad("train_every must be >= 0".into());
        }
        if let ControllerSpec::HoAcbf { kappa, gamma, bound, history_span, .. } = &self.controller {
            if !(*kappa > 0.0 && *gamma > 0.0 && *bound >= 0.0 && *history_span > 0.0) {
                return bad("HO-aCBF needs kappa > 0, gamma > 0, bound >= 0, history_span > 0".into());
            }
        }
        self.residual.validate().map_err(|e| SimError::Config(e.to_string()))?;
        self.trainer.validate()?;
        Ok(())
    }

    /// Gains handed to the safety filter, including the sampled-data tightening.
    pub fn filter_gains(&self) -> CbfGains {
        CbfGains {
            margin: self.gains.margin + self.intersample_bound * self.dt,
            ..self.gains
        }
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn obstacle_list(&self) -> Vec<Obstacle> {
        self.obstacles.iter().map(Obstacle::from).collect()
    }

    /// Residual actually applied to the plant.
    pub fn plant_residual(&self) -> ResidualKind {
        match self.controller {
            ControllerSpec::HocbfNoResidual => ResidualKind::None,
            _ => self.residual,
        }
    }

    /// Initial state: the configured one, or the reference point at t = 0 with the reference
    /// velocity. A reference point inside an obstacle is pushed radially out to
    /// `radius + initial_clearance + U(0, initial_jitter)` (seeded).
    pub fn start_state(&self) -> State {
        if let Some(x) = self.initial_state {
            return State(x.into());
        }
        let p = reference_circle(0.0, self.reference.radius, self.reference.height, self.reference.omega);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_1a77);
        let extra = if self.initial_jitter > 0.0 {
            rng.gen_range(0.0..=self.initial_jitter)
        } else {
            0.0
        };
        let mut r = p.r_des;
        for o in &self.obstacles {
            let c = Vec3::from(o.center);
            let e = r - c;
            if e.norm() < o.radius + self.initial_clearance {
                let dir = if e.norm() > 1e-9 { e.normalize() } else { Vec3::x() };
                r = c + dir * (o.radius + self.initial_clearance + extra);
            }
        }
        State::new(r, p.v_des)
    }

    /// Short stable digest of the scenario contents.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).unwrap_or_else(|_| format!("{self:?}"));
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn with_seed(&self, seed: u64) -> Scenario {
        let mut s = self.clone();
        s.seed = seed;
        s.trainer.seed = seed;
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Single-threaded; training rounds run every `train_every` simulated seconds.
    #[default]
    Interleaved,
    /// Trainer on its own thread, exchanging data copies and snapshots without blocking the loop.
    Concurrent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x: State,
    pub u_des: Vec3,
    pub u: Vec3,
    pub h: Vec<f64>,
    pub psi2_margin: f64,
    pub snapshot_version: u64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrajectoryLog {
    pub rows: Vec<TrajectoryRow>,
    pub obstacles: Vec<Obstacle>,
    pub infeasible_steps: usize,
    /// Set when the run stopped early because the plant diverged.
    pub aborted: bool,
}

impl TrajectoryLog {
    pub fn samples(&self) -> Vec<Sample> {
        self.rows.iter().map(|r| Sample { t: r.t, x: r.x, u: r.u }).collect()
    }
}

/// Options for the concurrent mode.
#[derive(Clone, Copy, Debug)]
pub struct ConcurrentOptions {
    /// Simulated seconds per wall-clock second; `None` runs the loop unthrottled.
    pub realtime_factor: Option<f64>,
    /// Control steps between queue hand-offs to the trainer.
    pub handoff_every: usize,
}

impl Default for ConcurrentOptions {
    fn default() -> Self {
        ConcurrentOptions {
            realtime_factor: Some(1.0),
            handoff_every: 10,
        }
    }
}

enum Policy {
    Hocbf,
    HoAcbf {
        est: AdaptiveEstimate,
        kind: KnowledgeKind,
        kappa: f64,
        gamma: Matrix3<f64>,
        span: f64,
        stack: VecDeque<Sample>,
    },
    Node {
        snapshot: Arc<ModelSnapshot>,
        online: bool,
    },
}

fn clamp_control(u: Vec3, bound: Option<f64>) -> Vec3 {
    match bound {
        Some(b) => u.map(|c| c.clamp(-b, b)),
        None => u,
    }
}

impl Policy {
    fn new(s: &Scenario, model: Option<ModelSnapshot>) -> Result<Self, SimError> {
        Ok(match &s.controller {
            ControllerSpec::HocbfNoResidual | ControllerSpec::Hocbf => Policy::Hocbf,
            ControllerSpec::HoAcbf { kappa, gamma, knowledge, history_span, bound, .. } => Policy::HoAcbf {
                est: AdaptiveEstimate::symmetric(*bound),
                kind: *knowledge,
                kappa: *kappa,
                gamma: Matrix3::identity() * *gamma,
                span: *history_span,
                stack: VecDeque::new(),
            },
            ControllerSpec::NodeOnline => Policy::Node {
                snapshot: Arc::new(model.unwrap_or_else(|| ModelSnapshot::initial(s.trainer.hidden, s.trainer.seed))),
                online: true,
            },
            ControllerSpec::NodeOffline { .. } => Policy::Node {
                snapshot: Arc::new(model.ok_or_else(|| {
                    SimError::Config("offline NODE controller needs a trained model".into())
                })?),
                online: false,
            },
        })
    }

    fn version(&self) -> u64 {
        match self {
            Policy::Node { snapshot, .. } => snapshot.version,
            _ => 0,
        }
    }

    fn control(&mut self, x: &State, t: f64, s: &Scenario, obstacles: &[Obstacle], u_des: Vec3) -> ControlOutcome {
        let gains = s.filter_gains();
        match self {
            Policy::Hocbf => safety_filter(x, obstacles, &gains, &ZeroResidual, u_des),
            Policy::HoAcbf { est, kind, kappa, gamma, stack, .. } => {
                // Current state closes the central difference of the newest stacked sample.
                let mut window: Vec<Sample> = stack.iter().copied().collect();
                window.push(Sample { t, x: *x, u: Vec3::zeros() });
                let history = history_with_derivatives(&window);
                *est = hoacbf_update(est, &history, *kind, *kappa, gamma, s.dt);
                hoacbf_control(x, obstacles, &gains, est, *kind, u_des)
            }
            Policy::Node { snapshot, .. } => nodehoacbf_control(x, obstacles, &gains, &snapshot.net, u_des),
        }
    }

    fn record(&mut self, sample: Sample) {
        if let Policy::HoAcbf { stack, span, .. } = self {
            stack.push_back(sample);
            while let (Some(a), Some(b)) = (stack.front(), stack.back()) {
                if b.t - a.t > *span * (1.0 + 1e-9) {
                    stack.pop_front();
                } else {
                    break;
                }
            }
        }
    }
}

/// Pre-trains the offline NODE model: runs HOCBF on the same plant for `pretrain_duration`
/// seconds and fits the residual network to the logged data.
pub fn prepare_offline_model(s: &Scenario) -> Result<ModelSnapshot, SimError> {
    let pretrain = match &s.controller {
        ControllerSpec::NodeOffline { model: Some(path), .. } => {
            return Ok(crate::io::load_model(path)?);
        }
        ControllerSpec::NodeOffline { pretrain_duration, .. } => *pretrain_duration,
        _ => s.duration,
    };
    let mut collect = s.clone();
    collect.controller = ControllerSpec::Hocbf;
    collect.duration = pretrain;
    collect.settle_exclude = 0.0;
    let log = run_interleaved(&collect, None)?;
    Ok(offline_train(&log.samples(), &s.trainer)?)
}

/// Runs one closed-loop scenario.
pub fn run_scenario(s: &Scenario, mode: RunMode) -> Result<TrajectoryLog, SimError> {
    run_scenario_with(s, mode, ConcurrentOptions::default())
}

pub fn run_scenario_with(s: &Scenario, mode: RunMode, opts: ConcurrentOptions) -> Result<TrajectoryLog, SimError> {
    s.validate()?;
    let model = match s.controller {
        ControllerSpec::NodeOffline { .. } => Some(prepare_offline_model(s)?),
        _ => None,
    };
    match (mode, &s.controller) {
        (RunMode::Concurrent, ControllerSpec::NodeOnline) => run_concurrent(s, opts),
        _ => run_interleaved(s, model),
    }
}

/// Runs a scenario with an explicitly supplied model (used by the offline controller).
pub fn run_with_model(s: &Scenario, model: ModelSnapshot) -> Result<TrajectoryLog, SimError> {
    s.validate()?;
    run_interleaved(s, Some(model))
}

struct Loop<'a> {
    s: &'a Scenario,
    obstacles: Vec<Obstacle>,
    residual: ResidualKind,
    log: TrajectoryLog,
    x: State,
}

impl<'a> Loop<'a> {
    fn new(s: &'a Scenario) -> Self {
        let obstacles = s.obstacle_list();
        Loop {
            s,
            residual: s.plant_residual(),
            log: TrajectoryLog {
                rows: Vec::with_capacity(s.steps() + 1),
                obstacles: obstacles.clone(),
                infeasible_steps: 0,
                aborted: false,
            },
            obstacles,
            x: s.start_state(),
        }
    }

    /// Computes and logs the control at step `k`; returns it.
    fn control(&mut self, k: usize, policy: &mut Policy) -> Vec3 {
        let s = self.s;
        let t = k as f64 * s.dt;
        let reference = reference_circle(t, s.reference.radius, s.reference.height, s.reference.omega);
        let u_des = pid_desired_control(&self.x, &reference, &s.pid);
        let outcome = policy.control(&self.x, t, s, &self.obstacles, u_des);
        let u = clamp_control(outcome.u, s.u_bound);
        if outcome.infeasible() {
            self.log.infeasible_steps += 1;
        }
        // Logged margin is the untightened ψ₂(x, u).
        let tightening = s.filter_gains().margin;
        let margin = outcome
            .constraints
            .iter()
            .map(|c| c.margin(&u) + tightening)
            .fold(f64::INFINITY, f64::min);
        self.log.rows.push(TrajectoryRow {
            t,
            x: self.x,
            u_des,
            u,
            h: self.obstacles.iter().map(|o| crate::controllers::cbf_value(&self.x, o)).collect(),
            psi2_margin: margin,
            snapshot_version: policy.version(),
        });
        u
    }

    /// Advances the plant; on divergence returns the partial log as an error.
    fn advance(&mut self, k: usize, u: &Vec3) -> Result<Sample, SimError> {
        let t = k as f64 * self.s.dt;
        match true_step(&self.x, u, self.residual, t, self.s.dt) {
            Ok(next) => {
                let sample = Sample { t, x: self.x, u: *u };
                self.x = next;
                Ok(sample)
            }
            Err(_) => {
                let mut partial = std::mem::take(&mut self.log);
                partial.aborted = true;
                Err(SimError::BlowUp {
                    t: t + self.s.dt,
                    partial: Box::new(partial),
                })
            }
        }
    }
}

fn run_interleaved(s: &Scenario, model: Option<ModelSnapshot>) -> Result<TrajectoryLog, SimError> {
    let mut policy = Policy::new(s, model)?;
    let mut lp = Loop::new(s);
    let mut queue = TrainingQueue::new(s.queue_capacity);
    let n = s.steps();
    let train_steps = if s.train_every > 0.0 {
        Some(((s.train_every / s.dt).round() as usize).max(1))
    } else {
        None
    };
    for k in 0..=n {
        if let (Policy::Node { snapshot, online: true }, Some(every)) = (&mut policy, train_steps) {
            if k > 0 && k % every == 0 && queue.len() >= 2 {
                let t = k as f64 * s.dt;
                match train_round_on(snapshot, &queue.to_vec(), &s.trainer, t) {
                    Ok(report) => *snapshot = Arc::new(report.snapshot),
                    Err(e) => log::warn!("training round at t = {t} aborted: {e}"),
                }
            }
        }
        let u = lp.control(k, &mut policy);
        if k == n {
            break;
        }
        let sample = lp.advance(k, &u)?;
        policy.record(sample);
        if matches!(policy, Policy::Node { online: true, .. }) {
            queue.push(sample)?;
        }
    }
    Ok(lp.log)
}

fn run_concurrent(s: &Scenario, opts: ConcurrentOptions) -> Result<TrajectoryLog, SimError> {
    let slot = SnapshotSlot::new(ModelSnapshot::initial(s.trainer.hidden, s.trainer.seed));
    let done = AtomicBool::new(false);
    let (tx, rx) = mpsc::sync_channel::<Vec<Sample>>(1);
    std::thread::scope(|scope| {
        let trainer = scope.spawn(|| {
            let rx = rx;
            let mut current = (*slot.latest()).clone();
            while let Ok(mut data) = rx.recv() {
                // Always train on the newest copy.
                while let Ok(newer) = rx.try_recv() {
                    data = newer;
                }
                if done.load(Ordering::Relaxed) {
                    break;
                }
                let trained_at = data.last().map(|d| d.t).unwrap_or(0.0);
                match train_round_on(&current, &data, &s.trainer, trained_at) {
                    Ok(report) => {
                        current = report.snapshot;
                        slot.publish(current.clone());
                    }
                    Err(e) => log::warn!("training round aborted: {e}"),
                }
            }
        });

        let result = (|| {
            let mut policy = Policy::Node {
                snapshot: slot.latest(),
                online: true,
            };
            let mut lp = Loop::new(s);
            let mut queue = TrainingQueue::new(s.queue_capacity);
            let start = Instant::now();
            let n = s.steps();
            for k in 0..=n {
                let latest = slot.latest();
                if let Policy::Node { snapshot, .. } = &mut policy {
                    if latest.version > snapshot.version {
                        *snapshot = latest;
                    }
                }
                let u = lp.control(k, &mut policy);
                if k == n {
                    break;
                }
                let sample = lp.advance(k, &u)?;
                queue.push(sample)?;
                if queue.len() >= 2 && k % opts.handoff_every.max(1) == 0 {
                    // A full channel means the trainer is busy; skip this hand-off.
                    let _ = tx.try_send(queue.to_vec());
                }
                if let Some(factor) = opts.realtime_factor {
                    let target = Duration::from_secs_f64((k + 1) as f64 * s.dt / factor);
                    let elapsed = start.elapsed();
                    if target > elapsed {
                        std::thread::sleep(target - elapsed);
                    }
                }
            }
            Ok(lp.log)
        })();
        done.store(true, Ordering::Relaxed);
        drop(tx);
        let _ = trainer.join();
        result
    })
}

/// Summary statistics of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub h_min: f64,
    /// Fraction of logged steps with `h < 0`.
    pub h_neg: f64,
    pub avg_dist: f64,
    pub avg_sdist: f64,
    pub s_sdist_var: f64,
    pub infeasible_steps: f64,
}

fn in_wedge(r: &Vec3) -> bool {
    use std::f64::consts::{FRAC_PI_4, PI};
    let mut a = r[1].atan2(r[0]);
    if a < 0.0 {
        a += 2.0 * PI;
    }
    (0.0..=FRAC_PI_4).contains(&a) || (PI..=PI + FRAC_PI_4).contains(&a)
}

/// Distance-based safety metrics. The signed distance of a row is taken to the nearest
/// obstacle surface; variance uses the population convention.
pub fn compute_metrics(log: &TrajectoryLog, settle_exclude: f64, wedge_filter: bool) -> Result<MetricsReport, SimError> {
    if log.rows.is_empty() {
        return Err(SimError::Metrics("empty trajectory".into()));
    }
    if log.obstacles.is_empty() {
        return Err(SimError::Metrics("no obstacles to measure against".into()));
    }
    let t0 = log.rows.iter().map(|r| r.t).fold(f64::INFINITY, f64::min);
    let t1 = log.rows.iter().map(|r| r.t).fold(f64::NEG_INFINITY, f64::max);
    if settle_exclude >= t1 - t0 && settle_exclude > 0.0 {
        return Err(SimError::Metrics(format!(
            "settle exclusion {settle_exclude} s is not shorter than the run ({} s)",
            t1 - t0
        )));
    }
    let rows: Vec<&TrajectoryRow> = log
        .rows
        .iter()
        .filter(|r| !wedge_filter || in_wedge(&r.x.r()))
        .collect();
    if rows.is_empty() {
        return Err(SimError::Metrics("no rows inside the wedge filter".into()));
    }
    let signed = |r: &TrajectoryRow| {
        log.obstacles
            .iter()
            .map(|o| o.signed_distance(&r.x.r()))
            .fold(f64::INFINITY, f64::min)
    };
    let h_of = |r: &TrajectoryRow| {
        log.obstacles
            .iter()
            .map(|o| crate::controllers::cbf_value(&r.x, o))
            .fold(f64::INFINITY, f64::min)
    };
    let n = rows.len() as f64;
    let h_min = rows.iter().map(|r| h_of(r)).fold(f64::INFINITY, f64::min);
    let h_neg = rows.iter().filter(|r| h_of(r) < 0.0).count() as f64 / n;
    let avg_dist = rows.iter().map(|r| signed(r).abs()).sum::<f64>() / n;
    let settled: Vec<f64> = rows
        .iter()
        .filter(|r| r.t - t0 >= settle_exclude - 1e-9)
        .map(|r| signed(r))
        .collect();
    let (avg_sdist, s_sdist_var) = if settled.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let m = settled.len() as f64;
        let mean = settled.iter().sum::<f64>() / m;
        (
            settled.iter().map(|d| d.abs()).sum::<f64>() / m,
            settled.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / m,
        )
    };
    Ok(MetricsReport {
        h_min,
        h_neg,
        avg_dist,
        avg_sdist,
        s_sdist_var,
        infeasible_steps: log.infeasible_steps as f64,
    })
}

/// Metrics of a run plus the metadata needed to reproduce it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub controller: String,
    pub residual: String,
    pub seed: u64,
    pub scenario_hash: String,
    pub aborted: bool,
    pub metrics: MetricsReport,
}

/// Runs a scenario and summarizes it. A diverged run is reported from its partial log.
pub fn evaluate(s: &Scenario, mode: RunMode) -> Result<(TrajectoryLog, RunReport), SimError> {
    let log = match run_scenario(s, mode) {
        Ok(log) => log,
        Err(SimError::BlowUp { partial, .. }) if !partial.rows.is_empty() => *partial,
        Err(e) => return Err(e),
    };
    let report = run_report(s, &log)?;
    Ok((log, report))
}

/// Metrics and metadata of a finished (or aborted) run of `s`. The settle window is dropped
/// when the log ends before it.
pub fn run_report(s: &Scenario, log: &TrajectoryLog) -> Result<RunReport, SimError> {
    let settle = if log.rows.last().map(|r| r.t).unwrap_or(0.0) > s.settle_exclude {
        s.settle_exclude
    } else {
        0.0
    };
    let metrics = compute_metrics(log, settle, s.wedge_filter)?;
    Ok(RunReport {
        scenario: s.name.clone(),
        controller: s.controller.label(),
        residual: s.residual.label().into(),
        seed: s.seed,
        scenario_hash: s.hash(),
        aborted: log.aborted,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub scenario: String,
    pub controller: String,
    pub residual: String,
    pub scenario_hash: String,
    pub seeds: Vec<u64>,
    pub aborted_runs: usize,
    pub mean: MetricsReport,
    pub trials: Vec<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub trials: usize,
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkReport {
    pub fn row(&self, scenario: &str) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.scenario == scenario)
    }
}

fn mean_report(reports: &[MetricsReport]) -> MetricsReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    MetricsReport {
        h_min: avg(|m| m.h_min),
        h_neg: avg(|m| m.h_neg),
        avg_dist: avg(|m| m.avg_dist),
        avg_sdist: avg(|m| m.avg_sdist),
        s_sdist_var: avg(|m| m.s_sdist_var),
        infeasible_steps: avg(|m| m.infeasible_steps),
    }
}

/// Runs every scenario for `trials` seeds (`seed`, `seed + 1`, …) in interleaved mode and
/// averages the metrics.
pub fn benchmark(suite: &[Scenario], trials: usize) -> Result<BenchmarkReport, SimError> {
    benchmark_with(suite, trials, |_, _| {})
}

/// [`benchmark`] with a progress callback invoked after each run.
pub fn benchmark_with<F: FnMut(&Scenario, &RunReport)>(
    suite: &[Scenario],
    trials: usize,
    mut progress: F,
) -> Result<BenchmarkReport, SimError> {
    if trials == 0 {
        return Err(SimError::Config("trials must be >= 1".into()));
    }
    let mut rows = Vec::with_capacity(suite.len());
    for base in suite {
        let mut reports = Vec::with_capacity(trials);
        let mut seeds = Vec::with_capacity(trials);
        let mut aborted = 0;
        for i in 0..trials {
            let s = base.with_seed(base.seed + i as u64);
            let (_, report) = evaluate(&s, RunMode::Interleaved)?;
            progress(&s, &report);
            aborted += report.aborted as usize;
            seeds.push(s.seed);
            reports.push(report.metrics);
        }
        rows.push(BenchmarkRow {
            scenario: base.name.clone(),
            controller: base.controller.label(),
            residual: base.residual.label().into(),
            scenario_hash: base.hash(),
            seeds,
            aborted_runs: aborted,
            mean: mean_report(&reports),
            trials: reports,
        });
    }
    Ok(BenchmarkReport { trials, rows })
}

/// The three perturbation fields of the simulation study with their default gains.
pub fn standard_residuals() -> [ResidualKind; 3] {
    [
        ResidualKind::Attractive(0.4),
        ResidualKind::Repulsive(0.4),
        ResidualKind::TimeVarying(1.0),
    ]
}

/// Full comparison suite: the residual-free HOCBF reference plus every controller under
/// each residual field.
pub fn standard_suite() -> Vec<Scenario> {
    let mut suite = vec![Scenario {
        name: "hocbf-no-residual".into(),
        controller: ControllerSpec::HocbfNoResidual,
        ..Scenario::default()
    }];
    for residual in standard_residuals() {
        let controllers = [
            ControllerSpec::Hocbf,
            ControllerSpec::hoacbf_tuned(KnowledgeKind::StateY, "tuned"),
            ControllerSpec::HoAcbf {
                variant: "gamma-1".into(),
                kappa: 1.0,
                gamma: 1.0,
                knowledge: KnowledgeKind::StateY,
                history_span: 0.5,
                bound: 4.0,
            },
            ControllerSpec::hoacbf_tuned(KnowledgeKind::ConstY, "const-y"),
            ControllerSpec::NodeOnline,
            ControllerSpec::NodeOffline {
                model: None,
                pretrain_duration: 40.0,
            },
        ];
        for controller in controllers {
            suite.push(Scenario {
                name: format!("{}/{}", controller.label(), residual.label()),
                controller,
                residual,
                ..Scenario::default()
            });
        }
    }
    suite
}

/// One point of an HO-aCBF gain sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub kappa: f64,
    pub gamma: f64,
    pub mean: MetricsReport,
}

/// Sweeps κ × γ for an HO-aCBF scenario and returns the points ordered by settled
/// distance to the barrier surface (best first), ties broken by the violation fraction.
///
/// `base` must use an HO-aCBF controller; its other fields are kept.
pub fn hoacbf_grid_search(base: &Scenario, kappas: &[f64], gammas: &[f64], trials: usize) -> Result<Vec<GridPoint>, SimError> {
    let ControllerSpec::HoAcbf { variant, knowledge, history_span, bound, .. } = &base.controller else {
        return Err(SimError::Config("grid search needs an HO-aCBF controller".into()));
    };
    let mut points = Vec::with_capacity(kappas.len() * gammas.len());
    for &kappa in kappas {
        for &gamma in gammas {
            let s = Scenario {
                controller: ControllerSpec::HoAcbf {
                    variant: variant.clone(),
                    kappa,
                    gamma,
                    knowledge: *knowledge,
                    history_span: *history_span,
                    bound: *bound,
                },
                ..base.clone()
            };
            let report = benchmark(std::slice::from_ref(&s), trials)?;
            points.push(GridPoint {
                kappa,
                gamma,
                mean: report.rows[0].mean.clone(),
            });
        }
    }
    points.sort_by(|a, b| {
        a.mean
            .avg_sdist
            .total_cmp(&b.mean.avg_sdist)
            .then(a.mean.h_neg.total_cmp(&b.mean.h_neg))
    });
    Ok(points)
}
