//! Zeroth-order stochastic coordinate descent.
//!
//! Each iteration samples a batch of attack-space coordinates, estimates
//! their derivatives by symmetric differences and moves each one with
//! either a coordinate-wise ADAM step or a coordinate-wise Newton step.
//! [`solve`] runs this on the attack objective
//! `‖D(y)‖² + c · loss(F(x0 + D(y)))` and [`binary_search_c`] tunes `c`.

use std::fmt::Write as _;

use rand::Rng;

use crate::attackspace::AttackSpace;
use crate::error::{invalid, Error, Result};
use crate::estimator::{estimate_gradient, estimate_hessian_diag, sample_coordinates, Objective, Probe};
use crate::loss::{is_success, AttackGoal};
use crate::numerics::Tensor;
use crate::oracle::{Changes, Oracle};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Per-coordinate ADAM moments and step counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: Vec<u32>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: vec![0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t.iter_mut().for_each(|x| *x = 0);
    }

    /// `(M_i, v_i, T_i)`.
    pub fn moments(&self, i: usize) -> (f64, f64, u32) {
        (self.m[i], self.v[i], self.t[i])
    }
}

/// One ADAM step for coordinate `i` with gradient estimate `g`; only that
/// coordinate's state changes. Returns the step `δ`.
pub fn adam_coordinate_update(state: &mut AdamState, i: usize, g: f64, eta: f64) -> Result<f64> {
    if i >= state.len() {
        return Err(Error::IndexOutOfRange {
            index: i,
            dim: state.len(),
        });
    }
    state.t[i] += 1;
    let t = state.t[i] as i32;
    state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
    state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
    let m_hat = state.m[i] / (1.0 - BETA1.powi(t));
    let v_hat = state.v[i] / (1.0 - BETA2.powi(t));
    Ok(-eta * m_hat / (v_hat.sqrt() + EPSILON))
}

/// Newton step along one coordinate, falling back to a plain gradient step
/// where the curvature estimate is not positive.
pub fn newton_coordinate_update(g: f64, h_est: f64, eta: f64) -> f64 {
    if h_est <= 0.0 {
        -eta * g
    } else {
        -eta * g / h_est
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Adam,
    Newton,
}

/// How the pixel box `[0, 1]` is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxMode {
    /// Optimize the noise directly and clamp the image into the box.
    Projection,
    /// Optimize `w` with `x = (1 + tanh w) / 2`.
    Tanh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub step_size: f64,
    pub max_iterations: usize,
    pub batch: usize,
    pub h: f64,
    pub box_mode: BoxMode,
    /// Stop after this many iterations without a new lowest total loss.
    /// `None` disables early stopping.
    pub patience: Option<usize>,
    pub reset_adam_on_first_success: bool,
    pub solver: SolverKind,
    /// Iterations between importance-map refreshes while importance
    /// sampling is active.
    pub importance_cadence: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step_size: 0.01,
            max_iterations: 3000,
            batch: 128,
            h: 1e-4,
            box_mode: BoxMode::Projection,
            patience: Some(100),
            reset_adam_on_first_success: false,
            solver: SolverKind::Adam,
            importance_cadence: 10,
        }
    }
}

impl SolverConfig {
    /// Settings for large images attacked through a staged attack space:
    /// smaller steps, importance refreshed every iteration, ADAM reset on
    /// the first valid attack.
    pub fn hierarchical() -> Self {
        Self {
            step_size: 0.002,
            importance_cadence: 1,
            reset_adam_on_first_success: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(invalid("step size must be positive"));
        }
        if self.batch == 0 {
            return Err(invalid("batch size must be ≥ 1"));
        }
        if !(self.h > 0.0) {
            return Err(invalid("difference step must be positive"));
        }
        if self.patience == Some(0) {
            return Err(invalid("patience must be ≥ 1"));
        }
        if self.importance_cadence == 0 {
            return Err(invalid("importance cadence must be ≥ 1"));
        }
        Ok(())
    }
}

/// Batched coordinate update shared by [`minimize`] and [`solve`].
struct Stepper {
    adam: AdamState,
}

impl Stepper {
    /// Estimates derivatives for `indices` at `x` and moves them in place.
    /// `f_at_x` is required for Newton steps.
    fn step(
        &mut self,
        cfg: &SolverConfig,
        obj: &dyn Objective,
        x: &mut Tensor,
        indices: &[usize],
        f_at_x: f64,
    ) -> Result<()> {
        match cfg.solver {
            SolverKind::Adam => {
                for e in estimate_gradient(obj, x, indices, cfg.h)? {
                    let delta = adam_coordinate_update(&mut self.adam, e.index, e.grad, cfg.step_size)?;
                    x.data_mut()[e.index] += delta;
                }
            }
            SolverKind::Newton => {
                for e in estimate_hessian_diag(obj, x, f_at_x, indices, cfg.h)? {
                    let delta = newton_coordinate_update(e.grad, e.hess.unwrap_or(0.0), cfg.step_size);
                    x.data_mut()[e.index] += delta;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeResult {
    pub x: Tensor,
    pub value: f64,
    pub iterations: usize,
}

/// Unconstrained coordinate descent on a plain objective: no box, no
/// success tracking. Early stopping follows `cfg.patience`.
pub fn minimize<R: Rng + ?Sized>(
    obj: &dyn Objective,
    start: Tensor,
    cfg: &SolverConfig,
    rng: &mut R,
) -> Result<MinimizeResult> {
    cfg.validate()?;
    let n = start.len();
    if cfg.batch > n {
        return Err(invalid(format!("batch {} exceeds dimension {n}", cfg.batch)));
    }
    let mut x = start;
    let mut stepper = Stepper { adam: AdamState::new(n) };
    let mut value = obj.eval(&x)?;
    let mut best = value;
    let mut stale = 0;
    let mut iterations = 0;
    for _ in 0..cfg.max_iterations {
        let indices = sample_coordinates(n, cfg.batch, None, rng)?;
        stepper.step(cfg, obj, &mut x, &indices, value)?;
        value = obj.eval(&x)?;
        iterations += 1;
        if value < best {
            best = value;
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    Ok(MinimizeResult { x, value, iterations })
}

/// Where each query of an attack went.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueryLedger {
    /// Finite-difference probes: exactly `2 · batch` per iteration.
    pub estimator: u64,
    /// Classification of the starting point.
    pub initial: u64,
    /// One evaluation of each new iterate.
    pub iterate: u64,
    /// Re-evaluation after each attack-space upscale.
    pub stage: u64,
}

impl QueryLedger {
    pub fn overhead(&self) -> u64 {
        self.initial + self.iterate + self.stage
    }

    pub fn total(&self) -> u64 {
        self.estimator + self.overhead()
    }

    fn absorb(&mut self, other: &QueryLedger) {
        self.estimator += other.estimator;
        self.initial += other.initial;
        self.iterate += other.iterate;
        self.stage += other.stage;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub iteration: usize,
    pub total_loss: f64,
    pub c_times_f: f64,
    pub l2: f64,
    pub queries: u64,
}

/// Loss just before and just after an attack-space upscale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSwitch {
    pub iteration: usize,
    pub loss_before: f64,
    pub loss_after: f64,
}

/// One run of [`solve`] inside [`binary_search_c`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CTrial {
    pub c: f64,
    pub success: bool,
    pub l2: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub success: bool,
    pub adversarial_image: Tensor,
    /// `‖adversarial_image − x0‖₂`.
    pub l2_distortion: f64,
    pub first_valid_iteration: Option<usize>,
    /// Iterations run (summed over every `c` tried by a binary search).
    pub iterations: usize,
    pub batch: usize,
    pub queries: QueryLedger,
    pub loss_trace: Vec<TracePoint>,
    pub stage_switches: Vec<StageSwitch>,
    pub final_c: f64,
    pub c_trials: Vec<CTrial>,
}

impl AttackResult {
    pub fn total_queries(&self) -> u64 {
        self.queries.total()
    }

    /// `iteration,total_loss,c_times_f,l2,queries` rows with a header.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,total_loss,c_times_f,l2,queries\n");
        for p in &self.loss_trace {
            let _ = writeln!(out, "{},{},{},{},{}", p.iteration, p.total_loss, p.c_times_f, p.l2, p.queries);
        }
        out
    }
}

/// Scale applied before `atanh` so pixels at exactly 0 or 1 stay finite.
const TANH_SHRINK: f64 = 0.999_999;

/// Maps an optimizer variable into the box. In tanh mode `values` holds
/// `w` and the result is `(1 + tanh w) / 2`; in projection mode it holds
/// `x0 + D(y)` and the result is that clamped to `[0, 1]`.
pub fn apply_box_mode(values: &Tensor, mode: BoxMode) -> Tensor {
    match mode {
        BoxMode::Tanh => values.map(|w| 0.5 * (1.0 + w.tanh())),
        BoxMode::Projection => values.map(|v| v.clamp(0.0, 1.0)),
    }
}

#[inline]
fn boxed(v: f64, mode: BoxMode, clamp: bool) -> f64 {
    match mode {
        BoxMode::Tanh => 0.5 * (1.0 + v.tanh()),
        BoxMode::Projection if clamp => v.clamp(0.0, 1.0),
        BoxMode::Projection => v,
    }
}

/// Everything known about one evaluated iterate.
#[derive(Clone)]
struct Evaluated {
    image: Tensor,
    dist: f64,
    c_times_f: f64,
    success: bool,
}

impl Evaluated {
    fn total(&self) -> f64 {
        self.dist + self.c_times_f
    }
}

/// The attack objective as a function of the attack-space variable `y`.
///
/// The image is `box(base + D(y))`, where `base` is `x0` (projection) or
/// `atanh(2 x0 − 1)` (tanh). In projection mode with an identity `D` the
/// image is not clamped, so finite-difference probes that step outside the
/// box see the raw function; accepted updates are projected by the solver.
struct AttackObjective<'a> {
    x0: &'a Tensor,
    base: Tensor,
    space: &'a AttackSpace,
    goal: AttackGoal,
    c: f64,
    mode: BoxMode,
    oracle: &'a dyn Oracle,
}

impl<'a> AttackObjective<'a> {
    fn new(x0: &'a Tensor, space: &'a AttackSpace, goal: AttackGoal, c: f64, mode: BoxMode, oracle: &'a dyn Oracle) -> Self {
        let base = match mode {
            BoxMode::Projection => x0.clone(),
            BoxMode::Tanh => x0.map(|v| ((2.0 * v - 1.0) * TANH_SHRINK).atanh()),
        };
        Self {
            x0,
            base,
            space,
            goal,
            c,
            mode,
            oracle,
        }
    }

    fn clamps(&self) -> bool {
        !self.space.is_identity()
    }

    fn pre_box(&self, y: &Tensor) -> Result<Tensor> {
        self.base.add(&self.space.decode(y)?)
    }

    fn image(&self, y: &Tensor) -> Result<Tensor> {
        let clamp = self.clamps();
        Ok(self.pre_box(y)?.map(|v| boxed(v, self.mode, clamp)))
    }

    /// Evaluates `y` with one query.
    fn evaluate(&self, y: &Tensor) -> Result<Evaluated> {
        let image = self.image(y)?;
        let dist = image.squared_distance(self.x0)?;
        let probs = self.oracle.query(&image)?;
        Ok(Evaluated {
            image,
            dist,
            c_times_f: self.c * self.goal.loss(&probs)?,
            success: is_success(&probs, &self.goal),
        })
    }
}

impl Objective for AttackObjective<'_> {
    fn eval(&self, y: &Tensor) -> Result<f64> {
        self.evaluate(y).map(|e| e.total())
    }

    fn eval_probes(&self, y: &Tensor, probes: &[Probe]) -> Result<Vec<f64>> {
        let pre = self.pre_box(y)?;
        let clamp = self.clamps();
        let image = pre.map(|v| boxed(v, self.mode, clamp));
        let x0 = self.x0.data();
        let img = image.data();
        let base_dist = image.squared_distance(self.x0)?;
        let mut sets: Vec<Changes> = Vec::with_capacity(probes.len());
        let mut dists = Vec::with_capacity(probes.len());
        for p in probes {
            let column = self.space.column(p.index)?;
            let mut dist = base_dist;
            let mut set = Vec::with_capacity(column.len());
            for (pix, weight) in column {
                let new = boxed(pre.data()[pix] + p.offset * weight, self.mode, clamp);
                let (old_d, new_d) = (img[pix] - x0[pix], new - x0[pix]);
                dist += new_d * new_d - old_d * old_d;
                set.push((pix, new));
            }
            sets.push(set);
            dists.push(dist);
        }
        let probs = self.oracle.query_changes(&image, &sets)?;
        probs
            .iter()
            .zip(dists)
            .map(|(p, d)| Ok(d + self.c * self.goal.loss(p)?))
            .collect()
    }
}

/// Runs the zeroth-order attack at a fixed `c`.
///
/// The attack space is cloned; its first stage is the starting grid with
/// zero noise. Each iteration draws `cfg.batch` coordinates (importance
/// weighted when the space says so), estimates their derivatives from
/// `2 · batch` probes, updates them, and evaluates the new iterate once.
/// Among successful iterates the one with the smallest distortion is
/// returned; if none succeeds, the iterate with the lowest total loss.
pub fn solve<R: Rng + ?Sized>(
    x0: &Tensor,
    goal: &AttackGoal,
    c: f64,
    cfg: &SolverConfig,
    space: &AttackSpace,
    oracle: &dyn Oracle,
    rng: &mut R,
) -> Result<AttackResult> {
    solve_observed(x0, goal, c, cfg, space, oracle, rng, &mut |_| {})
}

/// [`solve`], calling `on_importance` with the attack space right after
/// every importance-map refresh.
#[allow(clippy::too_many_arguments)]
pub fn solve_observed<R: Rng + ?Sized>(
    x0: &Tensor,
    goal: &AttackGoal,
    c: f64,
    cfg: &SolverConfig,
    space: &AttackSpace,
    oracle: &dyn Oracle,
    rng: &mut R,
    on_importance: &mut dyn FnMut(&AttackSpace),
) -> Result<AttackResult> {
    cfg.validate()?;
    goal.validate(oracle.num_classes())?;
    if !(c > 0.0) || !c.is_finite() {
        return Err(invalid(format!("c must be positive, got {c}")));
    }
    if x0.shape() != space.target_shape() || x0.shape() != oracle.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: oracle.input_shape().to_vec(),
            actual: x0.shape().to_vec(),
        });
    }
    if cfg.batch > space.min_len() {
        return Err(invalid(format!(
            "batch {} exceeds the smallest attack space ({} coordinates)",
            cfg.batch,
            space.min_len()
        )));
    }

    let mut space = space.clone();
    space.set_y(Tensor::zeros(&space.dims()))?;
    let mut ledger = QueryLedger::default();
    let mut trace = Vec::new();
    let mut switches = Vec::new();

    let mut current = AttackObjective::new(x0, &space, *goal, c, cfg.box_mode, oracle).evaluate(space.y())?;
    ledger.initial += 1;
    let point = |it: usize, e: &Evaluated, ledger: &QueryLedger| TracePoint {
        iteration: it,
        total_loss: e.total(),
        c_times_f: e.c_times_f,
        l2: e.dist.sqrt(),
        queries: ledger.total(),
    };
    trace.push(point(0, &current, &ledger));

    let finish = |best: &Evaluated, success: bool, first: Option<usize>, iterations, ledger, trace, switches| {
        let l2 = best
            .image
            .sub(x0)
            .and_then(|d| d.l2_norm())
            .unwrap_or(0.0);
        AttackResult {
            success,
            adversarial_image: best.image.clone(),
            l2_distortion: l2,
            first_valid_iteration: first,
            iterations,
            batch: cfg.batch,
            queries: ledger,
            loss_trace: trace,
            stage_switches: switches,
            final_c: c,
            c_trials: Vec::new(),
        }
    };

    if current.success {
        return Ok(finish(&current, true, Some(0), 0, ledger, trace, switches));
    }

    let mut adam = Stepper {
        adam: AdamState::new(space.len()),
    };
    let mut best_success: Option<Evaluated> = None;
    let mut best_failure = current.clone();
    let mut first_valid = None;
    let mut lowest_total = current.total();
    let mut stale = 0usize;
    let mut iterations = 0usize;
    let mut importance_age = 0usize;
    let identity_projection = |s: &AttackSpace| cfg.box_mode == BoxMode::Projection && s.is_identity();

    if space.importance_active() {
        space.update_importance(&current.image.sub(x0)?)?;
        on_importance(&space);
    }

    for it in 0..cfg.max_iterations {
        if space.next_stage_start() == Some(it) {
            let before = current.total();
            space.upscale_stage()?;
            adam.adam = AdamState::new(space.len());
            current = AttackObjective::new(x0, &space, *goal, c, cfg.box_mode, oracle).evaluate(space.y())?;
            ledger.stage += 1;
            switches.push(StageSwitch {
                iteration: it,
                loss_before: before,
                loss_after: current.total(),
            });
            if space.importance_active() {
                space.update_importance(&current.image.sub(x0)?)?;
                on_importance(&space);
                importance_age = 0;
            }
            stale = 0;
        }

        let weights = space.importance_active().then(|| space.importance().probs().to_vec());
        let indices = sample_coordinates(space.len(), cfg.batch, weights.as_deref(), rng)?;
        let mut y = space.y().clone();
        {
            let obj = AttackObjective::new(x0, &space, *goal, c, cfg.box_mode, oracle);
            adam.step(cfg, &obj, &mut y, &indices, current.total())?;
        }
        ledger.estimator += 2 * indices.len() as u64;
        if identity_projection(&space) {
            for &i in &indices {
                let x = x0.data()[i];
                let v = &mut y.data_mut()[i];
                *v = v.clamp(-x, 1.0 - x);
            }
        }
        space.set_y(y)?;
        current = AttackObjective::new(x0, &space, *goal, c, cfg.box_mode, oracle).evaluate(space.y())?;
        ledger.iterate += 1;
        iterations += 1;
        trace.push(point(it + 1, &current, &ledger));

        if current.success {
            if first_valid.is_none() {
                first_valid = Some(it + 1);
                if cfg.reset_adam_on_first_success {
                    adam.adam.reset();
                }
            }
            if best_success.as_ref().is_none_or(|b| current.dist < b.dist) {
                best_success = Some(current.clone());
            }
        } else if best_success.is_none() && current.total() < best_failure.total() {
            best_failure = current.clone();
        }

        if space.importance_active() {
            importance_age += 1;
            if importance_age >= cfg.importance_cadence {
                space.update_importance(&current.image.sub(x0)?)?;
                on_importance(&space);
                importance_age = 0;
            }
        }

        if current.total() < lowest_total {
            lowest_total = current.total();
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }

    Ok(match best_success {
        Some(best) => finish(&best, true, first_valid, iterations, ledger, trace, switches),
        None => finish(&best_failure, false, None, iterations, ledger, trace, switches),
    })
}

/// Tunes `c` over `steps` runs of [`solve`]. Success lowers the upper bound
/// and bisects; failure raises the lower bound and either bisects or, while
/// no upper bound is known, multiplies `c` by ten. Returns the successful
/// run with the smallest distortion, else the last run, with queries and
/// iterations summed over all runs.
#[allow(clippy::too_many_arguments)]
pub fn binary_search_c<R: Rng + ?Sized>(
    x0: &Tensor,
    goal: &AttackGoal,
    cfg: &SolverConfig,
    space: &AttackSpace,
    oracle: &dyn Oracle,
    rng: &mut R,
    c0: f64,
    steps: usize,
) -> Result<AttackResult> {
    binary_search_with(c0, steps, |c| solve(x0, goal, c, cfg, space, oracle, rng))
}

/// The `c` schedule of [`binary_search_c`] over any per-`c` runner.
pub fn binary_search_with(
    c0: f64,
    steps: usize,
    mut run: impl FnMut(f64) -> Result<AttackResult>,
) -> Result<AttackResult> {
    if !(c0 > 0.0) || !c0.is_finite() {
        return Err(invalid("initial c must be positive"));
    }
    if steps == 0 {
        return Err(invalid("binary search needs at least one step"));
    }
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut c = c0;
    let mut best: Option<AttackResult> = None;
    let mut last: Option<AttackResult> = None;
    let mut ledger = QueryLedger::default();
    let mut iterations = 0;
    let mut trials = Vec::with_capacity(steps);
    for _ in 0..steps {
        let result = run(c)?;
        ledger.absorb(&result.queries);
        iterations += result.iterations;
        trials.push(CTrial {
            c,
            success: result.success,
            l2: result.l2_distortion,
            iterations: result.iterations,
        });
        if result.success {
            hi = c;
            if best.as_ref().is_none_or(|b| result.l2_distortion < b.l2_distortion) {
                best = Some(result.clone());
            }
            c = (lo + hi) / 2.0;
        } else {
            lo = c;
            c = if hi.is_finite() { (lo + hi) / 2.0 } else { c * 10.0 };
        }
        last = Some(result);
    }
    let mut out = best.or(last).expect("at least one step ran");
    out.queries = ledger;
    out.iterations = iterations;
    out.c_trials = trials;
    Ok(out)
}
