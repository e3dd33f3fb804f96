//! Leapfrog integration and the dynamic-trajectory HMC transition.
//!
//! The transition is the multinomial No-U-Turn variant: trajectories grow by
//! doubling in a random direction, states are selected with weights
//! `exp(-H)` (biased toward the newer subtree at the top level), and growth
//! stops on the generalized U-turn criterion or a divergence.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metrics::Metric;
use crate::targets::TargetDensity;

/// Energy error above which a trajectory is declared divergent.
pub const MAX_ENERGY_ERROR: f64 = 1000.0;

/// Position with its cached potential and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub q: DVector<f64>,
    pub grad: DVector<f64>,
    pub potential: f64,
}

impl Point {
    /// Evaluates the target once at `q`.
    pub fn new(target: &dyn TargetDensity, q: DVector<f64>) -> Self {
        let mut grad = DVector::zeros(q.len());
        let potential = target.potential_and_gradient(&q, &mut grad);
        Self { q, grad, potential }
    }

    pub fn is_finite(&self) -> bool {
        self.potential.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

/// Position and momentum with cached potential and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub q: DVector<f64>,
    pub p: DVector<f64>,
    pub grad: DVector<f64>,
    pub potential: f64,
}

impl PhaseState {
    pub fn new(point: Point, p: DVector<f64>) -> Self {
        Self { q: point.q, p, grad: point.grad, potential: point.potential }
    }

    pub fn hamiltonian(&self, metric: &Metric) -> f64 {
        self.potential + metric.kinetic_energy(&self.p)
    }

    pub fn point(&self) -> Point {
        Point { q: self.q.clone(), grad: self.grad.clone(), potential: self.potential }
    }
}

fn leapfrog_in_place(target: &dyn TargetDensity, metric: &Metric, state: &mut PhaseState, eps: f64) {
    state.p.axpy(-0.5 * eps, &state.grad, 1.0);
    let velocity = metric.inverse_multiply(&state.p);
    state.q.axpy(eps, &velocity, 1.0);
    state.potential = target.potential_and_gradient(&state.q, &mut state.grad);
    state.p.axpy(-0.5 * eps, &state.grad, 1.0);
}

/// One leapfrog step of size `eps` (negative integrates backward in time).
/// Costs exactly one gradient evaluation.
pub fn leapfrog_step(target: &dyn TargetDensity, metric: &Metric, state: &PhaseState, eps: f64) -> PhaseState {
    let mut next = state.clone();
    leapfrog_in_place(target, metric, &mut next, eps);
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionStats {
    pub accept_stat: f64,
    pub divergent: bool,
    pub depth: u32,
    /// `H(selected) - H(initial)`.
    pub energy_error: f64,
    pub gradient_evaluations: u64,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn no_u_turn(p_sharp_minus: &DVector<f64>, p_sharp_plus: &DVector<f64>, rho: &DVector<f64>) -> bool {
    p_sharp_plus.dot(rho) > 0.0 && p_sharp_minus.dot(rho) > 0.0
}

/// Momentum-side quantities at one end of a subtree.
struct Edge {
    p: DVector<f64>,
    p_sharp: DVector<f64>,
}

struct TreeBuilder<'a, R: Rng> {
    target: &'a dyn TargetDensity,
    metric: &'a Metric,
    eps: f64,
    h0: f64,
    n_leapfrog: u64,
    sum_metro_prob: f64,
    divergent: bool,
    rng: &'a mut R,
}

impl<R: Rng> TreeBuilder<'_, R> {
    /// Extends `frontier` by `2^depth` leapfrog steps in direction `sign`.
    /// Returns `false` when the subtree diverged or made a U-turn.
    #[allow(clippy::too_many_arguments)]
    fn build(
        &mut self,
        depth: u32,
        sign: f64,
        frontier: &mut PhaseState,
        propose: &mut PhaseState,
        begin: &mut Edge,
        end: &mut Edge,
        rho: &mut DVector<f64>,
        log_sum_weight: &mut f64,
    ) -> bool {
        if depth == 0 {
            leapfrog_in_place(self.target, self.metric, frontier, sign * self.eps);
            self.n_leapfrog += 1;
            let mut h = frontier.hamiltonian(self.metric);
            if h.is_nan() {
                h = f64::INFINITY;
            }
            if h - self.h0 > MAX_ENERGY_ERROR {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, self.h0 - h);
            self.sum_metro_prob += if self.h0 - h > 0.0 { 1.0 } else { (self.h0 - h).exp() };
            *propose = frontier.clone();
            let p_sharp = self.metric.inverse_multiply(&frontier.p);
            *rho += &frontier.p;
            begin.p = frontier.p.clone();
            begin.p_sharp = p_sharp.clone();
            end.p = frontier.p.clone();
            end.p_sharp = p_sharp;
            return !self.divergent;
        }

        let d = frontier.q.len();
        let zeros = || DVector::zeros(d);

        let mut init_end = Edge { p: zeros(), p_sharp: zeros() };
        let mut rho_init = zeros();
        let mut lsw_init = f64::NEG_INFINITY;
        if !self.build(depth - 1, sign, frontier, propose, begin, &mut init_end, &mut rho_init, &mut lsw_init) {
            return false;
        }

        let mut propose_final = frontier.clone();
        let mut final_begin = Edge { p: zeros(), p_sharp: zeros() };
        let mut rho_final = zeros();
        let mut lsw_final = f64::NEG_INFINITY;
        if !self.build(depth - 1, sign, frontier, &mut propose_final, &mut final_begin, end, &mut rho_final, &mut lsw_final)
        {
            return false;
        }

        // Uniform multinomial choice between the two halves.
        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *propose = propose_final;
        } else {
            let accept_prob = (lsw_final - lsw_subtree).exp();
            if self.rng.random::<f64>() < accept_prob {
                *propose = propose_final;
            }
        }

        let rho_subtree = &rho_init + &rho_final;
        *rho += &rho_subtree;
        let mut persist = no_u_turn(&begin.p_sharp, &end.p_sharp, &rho_subtree);
        let rho_ext = &rho_init + &final_begin.p;
        persist &= no_u_turn(&begin.p_sharp, &final_begin.p_sharp, &rho_ext);
        let rho_ext = &rho_final + &init_end.p;
        persist &= no_u_turn(&init_end.p_sharp, &end.p_sharp, &rho_ext);
        persist
    }
}

/// One dynamic HMC transition from `start`.
pub fn hmc_transition(
    target: &dyn TargetDensity,
    metric: &Metric,
    start: &Point,
    eps: f64,
    max_depth: u32,
    rng: &mut impl Rng,
) -> Result<(Point, TransitionStats)> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(invalid(format!("step size must be positive, got {eps}")));
    }
    if max_depth < 1 {
        return Err(invalid("max_depth must be at least 1"));
    }
    let p0 = metric.sample_momentum(rng);
    let z0 = PhaseState::new(start.clone(), p0.clone());
    let h0 = z0.hamiltonian(metric);
    let p_sharp0 = metric.inverse_multiply(&p0);
    let edge = || Edge { p: p0.clone(), p_sharp: p_sharp0.clone() };

    let mut z_fwd = z0.clone();
    let mut z_bck = z0.clone();
    let mut z_sample = z0.clone();
    let mut z_propose = z0.clone();
    // Edges: outermost and innermost momentum of each side.
    let (mut fwd_fwd, mut fwd_bck, mut bck_fwd, mut bck_bck) = (edge(), edge(), edge(), edge());
    let mut rho = p0.clone();
    let mut log_sum_weight = 0.0;
    let mut depth = 0;

    let mut builder = TreeBuilder {
        target,
        metric,
        eps,
        h0,
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
        rng,
    };

    let d = p0.len();
    while depth < max_depth {
        let mut rho_fwd = DVector::zeros(d);
        let mut rho_bck = DVector::zeros(d);
        let mut lsw_subtree = f64::NEG_INFINITY;
        let forward = builder.rng.random::<f64>() > 0.5;
        let valid = if forward {
            rho_bck.copy_from(&rho);
            bck_fwd.p.copy_from(&fwd_bck.p);
            bck_fwd.p_sharp.copy_from(&fwd_bck.p_sharp);
            builder.build(depth, 1.0, &mut z_fwd, &mut z_propose, &mut fwd_bck, &mut fwd_fwd, &mut rho_fwd, &mut lsw_subtree)
        } else {
            rho_fwd.copy_from(&rho);
            fwd_bck.p.copy_from(&bck_fwd.p);
            fwd_bck.p_sharp.copy_from(&bck_fwd.p_sharp);
            builder.build(depth, -1.0, &mut z_bck, &mut z_propose, &mut bck_fwd, &mut bck_bck, &mut rho_bck, &mut lsw_subtree)
        };
        if !valid {
            break;
        }
        depth += 1;

        // Biased progressive sampling toward the new subtree.
        if lsw_subtree > log_sum_weight {
            z_sample = z_propose.clone();
        } else {
            let accept_prob = (lsw_subtree - log_sum_weight).exp();
            if builder.rng.random::<f64>() < accept_prob {
                z_sample = z_propose.clone();
            }
        }
        log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

        rho = &rho_bck + &rho_fwd;
        let mut persist = no_u_turn(&bck_bck.p_sharp, &fwd_fwd.p_sharp, &rho);
        let rho_ext = &rho_bck + &fwd_bck.p;
        persist &= no_u_turn(&bck_bck.p_sharp, &fwd_bck.p_sharp, &rho_ext);
        let rho_ext = &rho_fwd + &bck_fwd.p;
        persist &= no_u_turn(&bck_fwd.p_sharp, &fwd_fwd.p_sharp, &rho_ext);
        if !persist {
            break;
        }
    }

    let n_leapfrog = builder.n_leapfrog;
    let accept_stat = if n_leapfrog > 0 { (builder.sum_metro_prob / n_leapfrog as f64).clamp(0.0, 1.0) } else { 0.0 };
    let stats = TransitionStats {
        accept_stat,
        divergent: builder.divergent,
        depth,
        energy_error: z_sample.hamiltonian(metric) - h0,
        gradient_evaluations: n_leapfrog,
    };
    Ok((z_sample.point(), stats))
}

/// Doubles or halves `eps` until the acceptance probability of a single
/// leapfrog step from `start` crosses 1/2. Returns the step and the number of
/// gradient evaluations spent.
pub fn find_reasonable_step<R: Rng>(
    target: &dyn TargetDensity,
    metric: &Metric,
    start: &Point,
    initial: f64,
    rng: &mut R,
) -> Result<(f64, u64)> {
    let threshold = 0.5f64.ln();
    let mut eps = initial;
    let mut evals = 0;
    let mut trial = |eps: f64, rng: &mut R| -> f64 {
        let z = PhaseState::new(start.clone(), metric.sample_momentum(rng));
        let h0 = z.hamiltonian(metric);
        let next = leapfrog_step(target, metric, &z, eps);
        evals += 1;
        let h = next.hamiltonian(metric);
        if h.is_nan() {
            f64::NEG_INFINITY
        } else {
            h0 - h
        }
    };
    let direction = if trial(eps, rng) > threshold { 1 } else { -1 };
    for _ in 0..200 {
        let delta = trial(eps, rng);
        if direction == 1 && !(delta > threshold) {
            break;
        }
        if direction == -1 && !(delta < threshold) {
            break;
        }
        eps = if direction == 1 { 2.0 * eps } else { 0.5 * eps };
        if eps > 1e7 {
            return Err(invalid("step size search diverged upward; posterior may be improper"));
        }
        if eps < 1e-300 {
            return Err(invalid("step size search collapsed to zero"));
        }
    }
    Ok((eps, evals))
}

/// Dual-averaging step-size adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSizeAdapter {
    target_accept: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    mu: f64,
    log_step: f64,
    log_step_bar: f64,
    h_bar: f64,
    counter: f64,
}

impl StepSizeAdapter {
    /// Starts adaptation from `initial`, shrinking toward `10 · initial`.
    pub fn new(initial: f64) -> Self {
        Self {
            target_accept: 0.8,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            mu: (10.0 * initial).ln(),
            log_step: initial.ln(),
            log_step_bar: 0.0,
            h_bar: 0.0,
            counter: 0.0,
        }
    }

    pub fn restart(&mut self, initial: f64) {
        *self = Self { target_accept: self.target_accept, ..Self::new(initial) };
    }

    pub fn with_target_accept(mut self, target: f64) -> Self {
        self.target_accept = target;
        self
    }

    /// One update from the latest acceptance statistic.
    pub fn adapt(&mut self, accept_stat: f64) {
        let accept = accept_stat.clamp(0.0, 1.0);
        self.counter += 1.0;
        let eta = 1.0 / (self.counter + self.t0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target_accept - accept);
        self.log_step = self.mu - self.h_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.log_step_bar = x_eta * self.log_step + (1.0 - x_eta) * self.log_step_bar;
    }

    /// Step size to use for the next transition.
    pub fn current(&self) -> f64 {
        self.log_step.exp()
    }

    /// Averaged step size, used once adaptation ends.
    pub fn averaged(&self) -> f64 {
        if self.counter == 0.0 {
            self.current()
        } else {
            self.log_step_bar.exp()
        }
    }
}
