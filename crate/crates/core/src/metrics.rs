//! Trajectory straightness, encode/decode round-trip error, and cutoff-offset
//! robustness probes.
//!
//! Straightness here is the mean squared deviation between the field's
//! velocity along a trajectory and the trajectory's unit-time chord — zero
//! exactly when every trajectory is affine in t. The mean runs over samples
//! and grid times, normalized to unit time so values are comparable across
//! step counts.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::net::ParamNet;
use crate::odeint::{
    integrate, integrate_recorded, Direction, SolverKind, TimeGrid, VelocityField,
};
use crate::tensor::Tensor;
use crate::training::{evaluate, EvalResult};

#[derive(Clone, Debug)]
pub struct StraightnessReport {
    pub value: f64,
    pub t_span: usize,
    pub samples: usize,
}

/// Mean over samples and grid times of ||chord - v(x_t, t)||^2, where the
/// chord is the trajectory's displacement from t = 0 to t = 1.
pub fn straightness(
    field: &dyn VelocityField,
    x1_samples: &Tensor,
    grid: &TimeGrid,
    solver: SolverKind,
) -> Result<StraightnessReport> {
    if grid.direction != Direction::Generate {
        return Err(Error::Contract(String::from(
            "straightness expects a generate-direction grid",
        )));
    }
    let (b, _) = x1_samples.dims2()?;
    let traj = integrate_recorded(solver, field, x1_samples, grid)?;
    // generate runs 1 -> 0: first state is x(t=1), last is x(t=0)
    let chord = traj.states.first().unwrap().sub(traj.states.last().unwrap())?;
    let mut total = 0.0;
    for (state, &t) in traj.states.iter().zip(&traj.times) {
        let v = field.velocity_at(state, t)?;
        let dev = chord.sub(&v)?;
        total += dev.sq_l2();
    }
    let value = total / (b * traj.states.len()) as f64;
    Ok(StraightnessReport { value, t_span: grid.t_span, samples: b })
}

#[derive(Clone, Debug)]
pub struct RoundTripReport {
    pub per_sample: Vec<f64>,
    pub median: f64,
    pub p95: f64,
}

/// Relative L2 error of decode(encode(x0)) against x0: encode integrates
/// 0 -> 1, decode 1 -> 0, both over the grid's full span.
pub fn roundtrip_error(
    field: &dyn VelocityField,
    x0: &Tensor,
    grid: &TimeGrid,
    solver: SolverKind,
) -> Result<RoundTripReport> {
    let (b, d) = x0.dims2()?;
    let infer = TimeGrid::infer(grid.t_span, grid.t_span)?;
    let generate = TimeGrid::generate(grid.t_span)?;
    let latent = integrate(solver, field, x0, &infer)?;
    let back = integrate(solver, field, &latent, &generate)?;
    let mut per_sample = Vec::with_capacity(b);
    for i in 0..b {
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..d {
            let orig = x0.row(i)[j];
            let diff = back.row(i)[j] - orig;
            num += diff * diff;
            den += orig * orig;
        }
        per_sample.push(libm::sqrt(num) / (libm::sqrt(den) + 1e-12));
    }
    let mut sorted = per_sample.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let p95_idx = (libm::ceil(0.95 * sorted.len() as f64) as usize).clamp(1, sorted.len()) - 1;
    Ok(RoundTripReport { per_sample, median, p95: sorted[p95_idx] })
}

/// Accuracy with features taken at the base cutoff shifted by each signed
/// fraction of the span. Offset 0 is exactly `evaluate`.
pub fn offset_probe(
    net: &ParamNet,
    data: &LabeledDataset,
    base_grid: &TimeGrid,
    solver: SolverKind,
    offsets: &[f64],
) -> Result<Vec<(f64, EvalResult)>> {
    let mut out = Vec::with_capacity(offsets.len());
    for &offset in offsets {
        let shift = libm::round(offset * base_grid.t_span as f64) as i64;
        let cutoff = base_grid.cutoff_index as i64 + shift;
        if cutoff < 0 || cutoff > base_grid.t_span as i64 {
            return Err(Error::Contract(format!(
                "offset {offset} moves the cutoff to {cutoff}, outside [0, {}]",
                base_grid.t_span
            )));
        }
        let grid = TimeGrid::infer(base_grid.t_span, cutoff as usize)?;
        out.push((offset, evaluate(net, data, &grid, solver)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, Layer};
    use crate::rng::Rng;

    #[test]
    fn constant_velocity_flow_has_zero_straightness() {
        let net = ParamNet::constant(&[0.5, -0.25], 4);
        let x1 = Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, -1.0, 0.5, 2.0]).unwrap();
        let grid = TimeGrid::generate(16).unwrap();
        let rep = straightness(&net, &x1, &grid, SolverKind::Euler).unwrap();
        assert_eq!(rep.value, 0.0);
        assert_eq!(rep.t_span, 16);
        assert_eq!(rep.samples, 3);
    }

    #[test]
    fn semicircular_trajectory_matches_the_closed_form() {
        // Field v(x,t) = pi (-sin pi t, cos pi t), a pure function of t built
        // from the first sinusoidal-embedding pair. Trajectories are unit
        // semicircles; the closed form of the mean squared chord-tangent
        // deviation is integral_0^1 (4 + pi^2 - 4 pi sin(pi t)) dt = pi^2 - 4.
        let te = 4;
        let d = 2;
        let mut layer = Layer::zeros(d + te, d, Activation::Linear);
        // embedding columns: [sin(pi t), cos(pi t), sin(2 pi t), cos(2 pi t)]
        // weight rows are indexed by input: rows d.. are the embedding
        let w = layer.weight.data_mut();
        // row (d + 0) = sin(pi t) -> output 0 with weight -pi
        w[(d + 0) * d + 0] = -core::f64::consts::PI;
        // row (d + 1) = cos(pi t) -> output 1 with weight +pi
        w[(d + 1) * d + 1] = core::f64::consts::PI;
        let net = ParamNet { data_dim: d, time_embed_dim: te, layers: vec![layer], head: None };

        let x1 = Tensor::matrix(1, 2, vec![-1.0, 0.0]).unwrap(); // x(t=1)
        let grid = TimeGrid::generate(2000).unwrap();
        let rep = straightness(&net, &x1, &grid, SolverKind::Rk4).unwrap();
        let exact = core::f64::consts::PI * core::f64::consts::PI - 4.0;
        assert!(
            (rep.value - exact).abs() < 0.01 * exact,
            "measured {} vs closed form {exact}",
            rep.value
        );
    }

    #[test]
    fn straightness_requires_generate_direction_and_is_shuffle_invariant() {
        let net = ParamNet::constant(&[0.1, 0.1], 4);
        let grid = TimeGrid::infer(8, 8).unwrap();
        let x1 = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            straightness(&net, &x1, &grid, SolverKind::Euler),
            Err(Error::Contract(_))
        ));

        let mut rng = Rng::seed_from(3);
        let mut inner = ParamNet::new(2, &[8], 4, &mut rng).unwrap();
        let last = inner.layers.last_mut().unwrap();
        let shape = last.weight.shape().to_vec();
        let m = last.weight.numel();
        last.weight =
            Tensor::new(shape, rng.normal_vec(m).iter().map(|v| 0.3 * v).collect()).unwrap();
        let a = Tensor::matrix(4, 2, rng.normal_vec(8)).unwrap();
        // shuffled row order
        let mut rows: Vec<Vec<f64>> = (0..4).map(|i| a.row(i).to_vec()).collect();
        rows.swap(0, 3);
        rows.swap(1, 2);
        let b = Tensor::from_rows(&rows).unwrap();
        let gen = TimeGrid::generate(32).unwrap();
        let ra = straightness(&inner, &a, &gen, SolverKind::Euler).unwrap();
        let rb = straightness(&inner, &b, &gen, SolverKind::Euler).unwrap();
        assert!((ra.value - rb.value).abs() < 1e-12);
    }

    #[test]
    fn roundtrip_error_is_zero_for_identity_flows() {
        // zero-init net: the flow is the identity map
        let mut rng = Rng::seed_from(5);
        let net = ParamNet::new(2, &[8], 4, &mut rng).unwrap();
        let x0 = Tensor::matrix(4, 2, rng.normal_vec(8)).unwrap();
        let grid = TimeGrid::infer(20, 20).unwrap();
        let rep = roundtrip_error(&net, &x0, &grid, SolverKind::Rk4).unwrap();
        assert_eq!(rep.median, 0.0);
        assert_eq!(rep.p95, 0.0);
        for e in rep.per_sample {
            assert_eq!(e, 0.0);
        }
    }

    #[test]
    fn roundtrip_error_shrinks_with_refinement_on_a_smooth_field() {
        // mild rotation field: exact round trip in the continuum, so the
        // error is pure discretization and must drop as t_span grows
        let m = Tensor::matrix(2, 2, vec![0.0, -1.0, 1.0, 0.0]).unwrap();
        let net = ParamNet::linear(&m, 4).unwrap();
        let mut rng = Rng::seed_from(6);
        let x0 = Tensor::matrix(8, 2, rng.normal_vec(16)).unwrap();
        let coarse = roundtrip_error(&net, &x0, &TimeGrid::infer(20, 20).unwrap(), SolverKind::Euler)
            .unwrap();
        let fine = roundtrip_error(&net, &x0, &TimeGrid::infer(100, 100).unwrap(), SolverKind::Euler)
            .unwrap();
        assert!(
            fine.median < coarse.median,
            "refinement did not help: {} -> {}",
            coarse.median,
            fine.median
        );
    }

    #[test]
    fn offset_probe_at_zero_matches_evaluate_bitwise() {
        let mut rng = Rng::seed_from(7);
        let net = ParamNet::new(2, &[8], 4, &mut rng)
            .unwrap()
            .with_head(2, 8, &mut rng);
        let data =
            crate::datasets::gaussian_mixture(64, &[vec![1.0, 0.0], vec![-1.0, 0.0]], 0.3, 4)
                .unwrap();
        let grid = TimeGrid::infer(10, 5).unwrap();
        let probes = offset_probe(&net, &data, &grid, SolverKind::Euler, &[0.0]).unwrap();
        let direct = evaluate(&net, &data, &grid, SolverKind::Euler).unwrap();
        assert_eq!(probes[0].1.accuracy, direct.accuracy);
        assert_eq!(probes[0].1.confusion, direct.confusion);
    }

    #[test]
    fn offset_probe_rejects_out_of_range_offsets() {
        let mut rng = Rng::seed_from(8);
        let net = ParamNet::new(2, &[8], 4, &mut rng)
            .unwrap()
            .with_head(2, 8, &mut rng);
        let data =
            crate::datasets::gaussian_mixture(16, &[vec![1.0, 0.0], vec![-1.0, 0.0]], 0.3, 4)
                .unwrap();
        let grid = TimeGrid::infer(10, 9).unwrap();
        assert!(matches!(
            offset_probe(&net, &data, &grid, SolverKind::Euler, &[0.2]),
            Err(Error::Contract(_))
        ));
    }
}
