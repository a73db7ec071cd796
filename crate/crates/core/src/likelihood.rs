//! Log-density through the flow and the mutual-information proxy.
//!
//! The state and its log-density increment are integrated jointly on one
//! grid: d(x)/dt = v(x,t), d(logp)/dt tracked via the divergence of v.
//! Traversing data -> Gaussian (infer direction) and accumulating
//! delta = integral of Tr(dv/dx) dt over [0,1] gives
//! logp(x0) = logN(x1) + delta, the instantaneous change of variables.
//! Divergence is evaluated at the pre-step state for Euler and at each
//! internal stage for Midpoint/RK4, so state and log-density share one
//! discretization.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::net::ParamNet;
use crate::odeint::{Direction, SolverKind, TimeGrid};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Exact divergence sums d Jacobian rows; past this width the cost guard
/// forces the Hutchinson estimator.
pub const EXACT_DIM_LIMIT: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeLaw {
    /// Lower variance for trace estimation; the default.
    Rademacher,
    /// The textbook estimator with standard Gaussian probes.
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DivergenceMode {
    Exact,
    Hutchinson { probes: usize, law: ProbeLaw },
}

impl DivergenceMode {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            DivergenceMode::Exact => {
                if dim > EXACT_DIM_LIMIT {
                    return Err(Error::Contract(format!(
                        "exact divergence permitted only for d <= {EXACT_DIM_LIMIT}, got d = {dim}"
                    )));
                }
            }
            DivergenceMode::Hutchinson { probes, .. } => {
                if *probes == 0 {
                    return Err(Error::Contract(String::from("probe count must be >= 1")));
                }
            }
        }
        Ok(())
    }
}

/// v(x, t) and the per-sample divergence Tr(dv/dx) in one recorded forward
/// pass; divergence comes from one backward sweep per basis vector (exact)
/// or per probe (Hutchinson).
fn velocity_and_divergence(
    net: &ParamNet,
    x: &Tensor,
    t: f64,
    mode: &DivergenceMode,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<f64>)> {
    let (b, d) = x.dims2()?;
    mode.validate(d)?;
    let mut g = Graph::new();
    let bound = net.bind(&mut g);
    let xi = g.leaf(x.clone());
    let v = bound.velocity(&mut g, xi, t)?;
    let mut div = vec![0.0f64; b];
    match mode {
        DivergenceMode::Exact => {
            for j in 0..d {
                let mut seed = Tensor::zeros(vec![b, d]);
                for i in 0..b {
                    seed.data_mut()[i * d + j] = 1.0;
                }
                let grads = g.backward_seeded(v, &seed)?;
                if let Some(xg) = grads.get(xi) {
                    for i in 0..b {
                        div[i] += xg.row(i)[j];
                    }
                }
            }
        }
        DivergenceMode::Hutchinson { probes, law } => {
            for _ in 0..*probes {
                let eps_data: Vec<f64> = match law {
                    ProbeLaw::Rademacher => (0..b * d).map(|_| rng.rademacher()).collect(),
                    ProbeLaw::Gaussian => rng.normal_vec(b * d),
                };
                let eps = Tensor::new(vec![b, d], eps_data)?;
                let grads = g.backward_seeded(v, &eps)?;
                if let Some(xg) = grads.get(xi) {
                    for i in 0..b {
                        let quad: f64 = xg.row(i).iter().zip(eps.row(i)).map(|(a, e)| a * e).sum();
                        div[i] += quad;
                    }
                }
            }
            for di in &mut div {
                *di /= *probes as f64;
            }
        }
    }
    Ok((g.value(v).clone(), div))
}

/// Per-sample divergence of the learned field at (x, t).
pub fn divergence(
    net: &ParamNet,
    x: &Tensor,
    t: f64,
    mode: &DivergenceMode,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    velocity_and_divergence(net, x, t, mode, rng).map(|(_, d)| d)
}

/// Log-density of the standard normal at a point.
pub fn std_normal_logpdf(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().map(|v| v * v).sum();
    -0.5 * (d * libm::log(2.0 * core::f64::consts::PI) + sq)
}

#[derive(Clone, Debug)]
pub struct LogDensityResult {
    /// Terminal latent reached by the infer traversal.
    pub x1: Tensor,
    /// Accumulated integral of Tr(dv/dx) dt over [0,1].
    pub delta_logp: f64,
    /// logN(x1) + delta_logp, exact by construction.
    pub logp_x0: f64,
}

/// Model log-density of each data row via the augmented solve.
pub fn log_density(
    net: &ParamNet,
    x0: &Tensor,
    grid: &TimeGrid,
    solver: SolverKind,
    mode: &DivergenceMode,
    rng: &mut Rng,
) -> Result<Vec<LogDensityResult>> {
    if grid.direction != Direction::Infer {
        return Err(Error::Contract(String::from(
            "log_density requires an infer-direction grid",
        )));
    }
    let (b, _) = x0.dims2()?;
    let h = grid.signed_step();
    let mut x = x0.clone();
    let mut ell = vec![0.0f64; b];

    for i in 0..grid.t_span {
        let t = grid.time_at(i);
        match solver {
            SolverKind::Euler => {
                let (v, dv) = velocity_and_divergence(net, &x, t, mode, rng)?;
                x = x.add_scaled(&v, h)?;
                for (e, d) in ell.iter_mut().zip(&dv) {
                    *e += h * d;
                }
            }
            SolverKind::Midpoint => {
                let v1 = net.velocity(&x, t)?;
                let mid = x.add_scaled(&v1, h / 2.0)?;
                let (v2, d2) = velocity_and_divergence(net, &mid, t + h / 2.0, mode, rng)?;
                x = x.add_scaled(&v2, h)?;
                for (e, d) in ell.iter_mut().zip(&d2) {
                    *e += h * d;
                }
            }
            SolverKind::Rk4 => {
                let (v1, d1) = velocity_and_divergence(net, &x, t, mode, rng)?;
                let x1s = x.add_scaled(&v1, h / 2.0)?;
                let (v2, d2) = velocity_and_divergence(net, &x1s, t + h / 2.0, mode, rng)?;
                let x2s = x.add_scaled(&v2, h / 2.0)?;
                let (v3, d3) = velocity_and_divergence(net, &x2s, t + h / 2.0, mode, rng)?;
                let x3s = x.add_scaled(&v3, h)?;
                let (v4, d4) = velocity_and_divergence(net, &x3s, t + h, mode, rng)?;
                let mut combo = v1;
                combo = combo.add_scaled(&v2, 2.0)?;
                combo = combo.add_scaled(&v3, 2.0)?;
                combo = combo.add(&v4)?;
                x = x.add_scaled(&combo, h / 6.0)?;
                for (idx, e) in ell.iter_mut().enumerate() {
                    *e += h / 6.0 * (d1[idx] + 2.0 * d2[idx] + 2.0 * d3[idx] + d4[idx]);
                }
            }
        }
        let max_abs = x.max_abs();
        if !max_abs.is_finite() || max_abs > crate::odeint::BLOWUP_LIMIT {
            return Err(Error::Blowup { step: i, max_abs });
        }
    }

    let (_, d) = x.dims2()?;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let row = &x.data()[i * d..(i + 1) * d];
        let delta_logp = ell[i];
        out.push(LogDensityResult {
            x1: Tensor::vector(row.to_vec()),
            delta_logp,
            logp_x0: std_normal_logpdf(row) + delta_logp,
        });
    }
    Ok(out)
}

/// Mean model log-density over a dataset: the training-time proxy that
/// tracks mutual information between data and latent up to constant
/// entropies. Once fine-tuning reshapes the terminal distribution the value
/// is reported as a trend only, not an absolute mutual information.
pub fn mi_proxy(
    net: &ParamNet,
    data: &Tensor,
    grid: &TimeGrid,
    solver: SolverKind,
    mode: &DivergenceMode,
    rng: &mut Rng,
) -> Result<f64> {
    let (n, d) = data.dims2()?;
    let chunk = 256usize;
    let mut total = 0.0;
    let mut row = 0;
    while row < n {
        let hi = (row + chunk).min(n);
        let batch = Tensor::new(
            vec![hi - row, d],
            data.data()[row * d..hi * d].to_vec(),
        )?;
        for r in log_density(net, &batch, grid, solver, mode, rng)? {
            total += r.logp_x0;
        }
        row = hi;
    }
    Ok(total / n as f64)
}
