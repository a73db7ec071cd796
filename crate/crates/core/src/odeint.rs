//! Fixed-step integration of a velocity field in either direction, with
//! optional trajectory recording and a differentiable unrolled mode that
//! backpropagates through every solver step.
//!
//! Gradients go through the unrolled discretization (discretize-then-
//! optimize) rather than a continuous adjoint: at these step counts and
//! model sizes the memory cost is trivial and the gradient is exact for the
//! discrete objective.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::net::{BoundNet, ParamNet};
use crate::tensor::Tensor;

/// Any state whose magnitude passes this is treated as a blow-up; untrained
/// trig-path fields can be stiff near t = 1.
pub const BLOWUP_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// t: 1 -> 0, Gaussian to data.
    Generate,
    /// t: 0 -> 1, data to Gaussian; intermediate states serve as features.
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverKind {
    Euler,
    Midpoint,
    Rk4,
}

/// Uniform discretization of [0,1] with a traversal direction and the index
/// where features are taken / fine-tuning gradients enter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeGrid {
    pub t_span: usize,
    pub direction: Direction,
    pub cutoff_index: usize,
}

impl TimeGrid {
    pub fn new(t_span: usize, direction: Direction, cutoff_index: usize) -> Result<Self> {
        if t_span == 0 {
            return Err(Error::Contract(String::from("t_span must be >= 1")));
        }
        if cutoff_index > t_span {
            return Err(Error::Contract(format!(
                "cutoff_index {cutoff_index} > t_span {t_span}"
            )));
        }
        Ok(TimeGrid { t_span, direction, cutoff_index })
    }

    pub fn infer(t_span: usize, cutoff_index: usize) -> Result<Self> {
        Self::new(t_span, Direction::Infer, cutoff_index)
    }

    pub fn generate(t_span: usize) -> Result<Self> {
        Self::new(t_span, Direction::Generate, t_span)
    }

    /// Infer grid whose cutoff sits at the given fraction of the traversal
    /// (rounded to the nearest step) — how a checkpoint trained at one
    /// t_span is evaluated at another.
    pub fn infer_fraction(t_span: usize, fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Contract(format!("cutoff fraction {fraction} outside [0,1]")));
        }
        let cutoff = libm::round(fraction * t_span as f64) as usize;
        Self::infer(t_span, cutoff.min(t_span))
    }

    pub fn cutoff_fraction(&self) -> f64 {
        self.cutoff_index as f64 / self.t_span as f64
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.t_span as f64
    }

    pub fn signed_step(&self) -> f64 {
        match self.direction {
            Direction::Infer => self.step_size(),
            Direction::Generate => -self.step_size(),
        }
    }

    /// Time value at grid index i (computed fresh, no accumulation drift).
    pub fn time_at(&self, i: usize) -> f64 {
        let f = i as f64 / self.t_span as f64;
        match self.direction {
            Direction::Infer => f,
            Direction::Generate => 1.0 - f,
        }
    }
}

/// Ordered states along one solve; `states[0]` is the initial condition and
/// `times` follow the grid direction.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<Tensor>,
    pub times: Vec<f64>,
}

/// Anything that can be integrated: the learned net, or a closed-form field
/// in tests and diagnostics.
pub trait VelocityField {
    fn velocity_at(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl VelocityField for ParamNet {
    fn velocity_at(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.velocity(x, t)
    }
}

pub struct FieldFn<F: Fn(&Tensor, f64) -> Result<Tensor>>(pub F);

impl<F: Fn(&Tensor, f64) -> Result<Tensor>> VelocityField for FieldFn<F> {
    fn velocity_at(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        (self.0)(x, t)
    }
}

fn check_state(x: &Tensor, step_index: usize) -> Result<()> {
    let max_abs = x.max_abs();
    if !max_abs.is_finite() || max_abs > BLOWUP_LIMIT {
        return Err(Error::Blowup { step: step_index, max_abs });
    }
    Ok(())
}

fn step_inner(
    solver: SolverKind,
    field: &dyn VelocityField,
    x: &Tensor,
    t: f64,
    h: f64,
    step_index: usize,
) -> Result<Tensor> {
    let next = match solver {
        SolverKind::Euler => {
            let k1 = field.velocity_at(x, t)?;
            x.add_scaled(&k1, h)?
        }
        SolverKind::Midpoint => {
            let k1 = field.velocity_at(x, t)?;
            let mid = x.add_scaled(&k1, h / 2.0)?;
            let k2 = field.velocity_at(&mid, t + h / 2.0)?;
            x.add_scaled(&k2, h)?
        }
        SolverKind::Rk4 => {
            let k1 = field.velocity_at(x, t)?;
            let k2 = field.velocity_at(&x.add_scaled(&k1, h / 2.0)?, t + h / 2.0)?;
            let k3 = field.velocity_at(&x.add_scaled(&k2, h / 2.0)?, t + h / 2.0)?;
            let k4 = field.velocity_at(&x.add_scaled(&k3, h)?, t + h)?;
            let mut combo = k1;
            combo = combo.add_scaled(&k2, 2.0)?;
            combo = combo.add_scaled(&k3, 2.0)?;
            combo = combo.add(&k4)?;
            x.add_scaled(&combo, h / 6.0)?
        }
    };
    check_state(&next, step_index)?;
    Ok(next)
}

/// One explicit step of the named scheme.
pub fn step(
    solver: SolverKind,
    field: &dyn VelocityField,
    x: &Tensor,
    t: f64,
    h: f64,
) -> Result<Tensor> {
    if h == 0.0 {
        return Err(Error::Contract(String::from("step size must be nonzero")));
    }
    step_inner(solver, field, x, t, h, 0)
}

/// Compose steps over the whole grid, returning only the final state.
pub fn integrate(
    solver: SolverKind,
    field: &dyn VelocityField,
    x_init: &Tensor,
    grid: &TimeGrid,
) -> Result<Tensor> {
    let h = grid.signed_step();
    let mut x = x_init.clone();
    check_state(&x, 0)?;
    for i in 0..grid.t_span {
        x = step_inner(solver, field, &x, grid.time_at(i), h, i)?;
    }
    Ok(x)
}

/// Compose the first `steps` grid intervals only — the inference path for
/// feature extraction at a cutoff short of the full traversal.
pub fn integrate_steps(
    solver: SolverKind,
    field: &dyn VelocityField,
    x_init: &Tensor,
    grid: &TimeGrid,
    steps: usize,
) -> Result<Tensor> {
    if steps > grid.t_span {
        return Err(Error::Contract(format!(
            "requested {steps} steps on a t_span {} grid",
            grid.t_span
        )));
    }
    let h = grid.signed_step();
    let mut x = x_init.clone();
    check_state(&x, 0)?;
    for i in 0..steps {
        x = step_inner(solver, field, &x, grid.time_at(i), h, i)?;
    }
    Ok(x)
}

/// Compose steps over the whole grid, recording every state.
pub fn integrate_recorded(
    solver: SolverKind,
    field: &dyn VelocityField,
    x_init: &Tensor,
    grid: &TimeGrid,
) -> Result<Trajectory> {
    let h = grid.signed_step();
    let mut states = Vec::with_capacity(grid.t_span + 1);
    let mut times = Vec::with_capacity(grid.t_span + 1);
    check_state(x_init, 0)?;
    states.push(x_init.clone());
    times.push(grid.time_at(0));
    for i in 0..grid.t_span {
        let next = step_inner(solver, field, &states[i], grid.time_at(i), h, i)?;
        states.push(next);
        times.push(grid.time_at(i + 1));
    }
    Ok(Trajectory { states, times })
}

/// The recorded state at the grid's cutoff index.
pub fn feature_at(trajectory: &Trajectory, grid: &TimeGrid) -> Result<Tensor> {
    trajectory
        .states
        .get(grid.cutoff_index)
        .cloned()
        .ok_or_else(|| {
            Error::Contract(format!(
                "trajectory has {} states, cutoff_index {} not recorded",
                trajectory.states.len(),
                grid.cutoff_index
            ))
        })
}

/// Differentiable unrolled solve: every step is recorded on the graph so
/// gradients flow to the parameters through all of them. Integrates `steps`
/// grid intervals from the grid start and returns every intermediate state
/// node (length steps + 1).
pub fn integrate_graph(
    g: &mut Graph,
    net: &BoundNet,
    x_init: NodeId,
    grid: &TimeGrid,
    solver: SolverKind,
    steps: usize,
) -> Result<Vec<NodeId>> {
    if steps > grid.t_span {
        return Err(Error::Contract(format!(
            "requested {steps} steps on a t_span {} grid",
            grid.t_span
        )));
    }
    let h = grid.signed_step();
    let mut nodes = Vec::with_capacity(steps + 1);
    nodes.push(x_init);
    let mut x = x_init;
    for i in 0..steps {
        let t = grid.time_at(i);
        x = match solver {
            SolverKind::Euler => {
                let k1 = net.velocity(g, x, t)?;
                let inc = g.scale(k1, h)?;
                g.add(x, inc)?
            }
            SolverKind::Midpoint => {
                let k1 = net.velocity(g, x, t)?;
                let inc1 = g.scale(k1, h / 2.0)?;
                let mid = g.add(x, inc1)?;
                let k2 = net.velocity(g, mid, t + h / 2.0)?;
                let inc2 = g.scale(k2, h)?;
                g.add(x, inc2)?
            }
            SolverKind::Rk4 => {
                let k1 = net.velocity(g, x, t)?;
                let s1 = g.scale(k1, h / 2.0)?;
                let x1 = g.add(x, s1)?;
                let k2 = net.velocity(g, x1, t + h / 2.0)?;
                let s2 = g.scale(k2, h / 2.0)?;
                let x2 = g.add(x, s2)?;
                let k3 = net.velocity(g, x2, t + h / 2.0)?;
                let s3 = g.scale(k3, h)?;
                let x3 = g.add(x, s3)?;
                let k4 = net.velocity(g, x3, t + h)?;
                let k2x2 = g.scale(k2, 2.0)?;
                let k3x2 = g.scale(k3, 2.0)?;
                let mut combo = g.add(k1, k2x2)?;
                combo = g.add(combo, k3x2)?;
                combo = g.add(combo, k4)?;
                let inc = g.scale(combo, h / 6.0)?;
                g.add(x, inc)?
            }
        };
        check_state(g.value(x), i)?;
        nodes.push(x);
    }
    Ok(nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn decay_field() -> impl VelocityField {
        FieldFn(|x: &Tensor, _t: f64| Ok(x.scale(-1.0)))
    }

    fn solvers() -> [SolverKind; 3] {
        [SolverKind::Euler, SolverKind::Midpoint, SolverKind::Rk4]
    }

    #[test]
    fn zero_field_is_the_identity_for_every_solver() {
        let mut rng = Rng::seed_from(2);
        let net = ParamNet::new(2, &[8], 4, &mut rng).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.5, -0.5, 1.0, 2.0]).unwrap();
        for solver in solvers() {
            let y = step(solver, &net, &x, 0.3, 0.1).unwrap();
            assert_eq!(y.data(), x.data());
            let grid = TimeGrid::infer(16, 16).unwrap();
            let z = integrate(solver, &net, &x, &grid).unwrap();
            assert_eq!(z.data(), x.data());
        }
    }

    #[test]
    fn euler_step_on_decay_field() {
        // v(x) = -x, x = 1, h = 0.1 -> 0.9
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let y = step(SolverKind::Euler, &decay_field(), &x, 0.0, 0.1).unwrap();
        assert!((y.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn rk4_hits_exp_minus_one_through_the_net_path() {
        // v(x) = -x as a linear net; 100 steps 0 -> 1 gives e^-1 to 1e-8
        let minus_i = Tensor::matrix(2, 2, vec![-1.0, 0.0, 0.0, -1.0]).unwrap();
        let net = ParamNet::linear(&minus_i, 4).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let grid = TimeGrid::infer(100, 100).unwrap();
        let y = integrate(SolverKind::Rk4, &net, &x, &grid).unwrap();
        for &c in y.data() {
            assert!((c - (-1.0f64).exp()).abs() < 1e-8, "{c}");
        }
    }

    #[test]
    fn single_step_grid_equals_one_step_call() {
        let field = decay_field();
        let x = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let grid = TimeGrid::infer(1, 1).unwrap();
        let via_grid = integrate(SolverKind::Euler, &field, &x, &grid).unwrap();
        let via_step = step(SolverKind::Euler, &field, &x, 0.0, 1.0).unwrap();
        assert_eq!(via_grid.data(), via_step.data());
    }

    #[test]
    fn constant_field_is_exact_for_every_solver() {
        // v = c: final state = x + c in the infer direction, exactly
        // (t_span a power of two keeps the arithmetic exact)
        let net = ParamNet::constant(&[0.5, -0.25], 4);
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let grid = TimeGrid::infer(16, 16).unwrap();
        for solver in solvers() {
            let y = integrate(solver, &net, &x, &grid).unwrap();
            assert_eq!(y.data(), &[1.5, 1.75]);
        }
    }

    #[test]
    fn recorded_trajectory_structure_and_feature_at() {
        let field = decay_field();
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let grid = TimeGrid::infer(10, 5).unwrap();
        let traj = integrate_recorded(SolverKind::Euler, &field, &x, &grid).unwrap();
        assert_eq!(traj.states.len(), 11);
        assert_eq!(traj.states[0].data(), x.data());
        for w in traj.times.windows(2) {
            assert!(w[1] > w[0]);
        }

        // cutoff 0 -> raw input; cutoff t_span -> terminal state
        let g0 = TimeGrid::infer(10, 0).unwrap();
        assert_eq!(feature_at(&traj, &g0).unwrap().data(), x.data());
        let gend = TimeGrid::infer(10, 10).unwrap();
        assert_eq!(
            feature_at(&traj, &gend).unwrap().data(),
            traj.states[10].data()
        );

        // generate-direction times decrease
        let gen = TimeGrid::generate(4).unwrap();
        let traj = integrate_recorded(SolverKind::Euler, &field, &x, &gen).unwrap();
        for w in traj.times.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn convergence_orders_on_the_decay_field() {
        // global error at t = 1 scales as O(h), O(h^2), O(h^4)
        let field = decay_field();
        let exact = (-1.0f64).exp();
        for (solver, nominal) in [
            (SolverKind::Euler, 1.0),
            (SolverKind::Midpoint, 2.0),
            (SolverKind::Rk4, 4.0),
        ] {
            let mut logs: Vec<(f64, f64)> = Vec::new();
            for &n in &[10usize, 20, 40, 80, 160] {
                let grid = TimeGrid::infer(n, n).unwrap();
                let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
                let y = integrate(solver, &field, &x, &grid).unwrap();
                let err = (y.data()[0] - exact).abs();
                logs.push(((1.0 / n as f64).ln(), err.ln()));
            }
            // least-squares slope of ln err vs ln h
            let n = logs.len() as f64;
            let sx: f64 = logs.iter().map(|p| p.0).sum();
            let sy: f64 = logs.iter().map(|p| p.1).sum();
            let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
            let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
            let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
            assert!(
                (slope - nominal).abs() < 0.2,
                "{solver:?}: slope {slope} vs nominal {nominal}"
            );
        }
    }

    #[test]
    fn blowup_reports_the_step_index() {
        // v(x) = 10 x doubles fast; trust region is 1e6
        let field = FieldFn(|x: &Tensor, _| Ok(x.scale(10.0)));
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let grid = TimeGrid::infer(40, 40).unwrap();
        match integrate(SolverKind::Euler, &field, &x, &grid) {
            Err(Error::Blowup { step, max_abs }) => {
                assert!(step > 0);
                assert!(max_abs > BLOWUP_LIMIT);
            }
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::infer(0, 0).is_err());
        assert!(TimeGrid::infer(10, 11).is_err());
        assert!(TimeGrid::infer_fraction(20, 0.5).unwrap().cutoff_index == 10);
        assert!(TimeGrid::infer_fraction(20, 1.5).is_err());
        let g = TimeGrid::generate(8).unwrap();
        assert_eq!(g.time_at(0), 1.0);
        assert_eq!(g.time_at(8), 0.0);
    }

    #[test]
    fn graph_mode_matches_inference_mode_bitwise() {
        let mut rng = Rng::seed_from(31);
        let mut net = ParamNet::new(2, &[8], 4, &mut rng).unwrap();
        let n = net.layers.last().unwrap().weight.numel();
        net.layers.last_mut().unwrap().weight = Tensor::new(
            net.layers.last().unwrap().weight.shape().to_vec(),
            rng.normal_vec(n).iter().map(|v| v * 0.1).collect(),
        )
        .unwrap();
        let x = Tensor::matrix(3, 2, rng.normal_vec(6)).unwrap();
        let grid = TimeGrid::infer(12, 12).unwrap();

        for solver in solvers() {
            let direct = integrate(solver, &net, &x, &grid).unwrap();
            let mut g = Graph::new();
            let bound = net.bind(&mut g);
            let xi = g.leaf(x.clone());
            let nodes = integrate_graph(&mut g, &bound, xi, &grid, solver, 12).unwrap();
            assert_eq!(direct.data(), g.value(*nodes.last().unwrap()).data(), "{solver:?}");
        }
    }
}
