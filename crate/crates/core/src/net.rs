//! The learned model: a velocity-field MLP conditioned on time through a
//! sinusoidal embedding, plus an optional two-layer tanh classifier head.
//!
//! Default backbone is deliberately small (3 hidden tanh layers of 128) — a
//! desk-scale stand-in for the image backbones this pipeline is normally run
//! with. The final velocity layer is zero-initialized so an untrained flow is
//! the identity map.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: [usize; 3] = [128, 128, 128];
pub const DEFAULT_TIME_EMBED_DIM: usize = 16;
pub const DEFAULT_HEAD_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Linear,
}

#[derive(Clone, Debug)]
pub struct Layer {
    /// [fan_in, fan_out], applied as y = x . W + b.
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Layer {
            weight: Tensor::zeros(alloc::vec![fan_in, fan_out]),
            bias: Tensor::zeros(alloc::vec![fan_out]),
            activation,
        }
    }

    /// Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn uniform(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut Rng) -> Self {
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let wdata: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        let bdata: Vec<f64> = (0..fan_out).map(|_| rng.uniform_in(-bound, bound)).collect();
        Layer {
            weight: Tensor::new(alloc::vec![fan_in, fan_out], wdata).unwrap(),
            bias: Tensor::vector(bdata),
            activation,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?.add_row_broadcast(&self.bias)?;
        let y = match self.activation {
            Activation::Tanh => y.tanh(),
            Activation::Linear => y,
        };
        y.check_finite("layer forward")?;
        Ok(y)
    }
}

/// Sinusoidal embedding of a time scalar: pairs (sin(2^i pi t), cos(2^i pi t))
/// for i = 0..dim/2, a geometric frequency ladder over [0,1].
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    let mut freq = core::f64::consts::PI;
    for _ in 0..dim / 2 {
        out.push(libm::sin(freq * t));
        out.push(libm::cos(freq * t));
        freq *= 2.0;
    }
    out
}

fn embed_rows(ts: &[f64], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend_from_slice(&time_embedding(t, dim));
    }
    Tensor::new(alloc::vec![ts.len(), dim], data).unwrap()
}

fn check_time(t: f64) -> Result<()> {
    if !(-1e-9..=1.0 + 1e-9).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0,1]")));
    }
    Ok(())
}

/// Velocity field v(x, t) plus optional classifier head p(y|z); the only
/// mutable learned state in the toolkit.
#[derive(Clone, Debug)]
pub struct ParamNet {
    pub data_dim: usize,
    pub time_embed_dim: usize,
    /// Velocity branch; input width data_dim + time_embed_dim, output data_dim.
    pub layers: Vec<Layer>,
    /// Classifier head on extracted features; input width data_dim.
    pub head: Option<Vec<Layer>>,
}

impl ParamNet {
    pub fn new(data_dim: usize, hidden: &[usize], time_embed_dim: usize, rng: &mut Rng) -> Result<Self> {
        if time_embed_dim == 0 || time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be positive and even, got {time_embed_dim}"
            )));
        }
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = data_dim + time_embed_dim;
        for &h in hidden {
            layers.push(Layer::uniform(fan_in, h, Activation::Tanh, rng));
            fan_in = h;
        }
        // zero final layer: the untrained flow is the identity map
        layers.push(Layer::zeros(fan_in, data_dim, Activation::Linear));
        Ok(ParamNet { data_dim, time_embed_dim, layers, head: None })
    }

    /// A net computing exactly v(x, t) = x . M for a [d,d] matrix M, with
    /// zero time-embedding weights. Linear flows have closed-form solutions,
    /// which makes this the workhorse of solver and divergence checks.
    pub fn linear(matrix: &Tensor, time_embed_dim: usize) -> Result<Self> {
        let (d, d2) = matrix.dims2()?;
        if d != d2 {
            return Err(Error::Dim(format!("linear field needs a square matrix, got [{d},{d2}]")));
        }
        let mut layer = Layer::zeros(d + time_embed_dim, d, Activation::Linear);
        for i in 0..d {
            for j in 0..d {
                layer.weight.data_mut()[i * d + j] = matrix.data()[i * d + j];
            }
        }
        Ok(ParamNet { data_dim: d, time_embed_dim, layers: alloc::vec![layer], head: None })
    }

    /// A net computing the constant field v(x, t) = c.
    pub fn constant(c: &[f64], time_embed_dim: usize) -> Self {
        let d = c.len();
        let mut layer = Layer::zeros(d + time_embed_dim, d, Activation::Linear);
        layer.bias = Tensor::vector(c.to_vec());
        ParamNet { data_dim: d, time_embed_dim, layers: alloc::vec![layer], head: None }
    }

    /// Attach a two-layer tanh classifier head with `classes` outputs.
    pub fn with_head(mut self, classes: usize, head_hidden: usize, rng: &mut Rng) -> Self {
        let head = alloc::vec![
            Layer::uniform(self.data_dim, head_hidden, Activation::Tanh, rng),
            Layer::zeros(head_hidden, classes, Activation::Linear),
        ];
        self.head = Some(head);
        self
    }

    pub fn classes(&self) -> Option<usize> {
        self.head.as_ref().map(|h| h.last().unwrap().bias.numel())
    }

    /// v(x, t) with one time value per row. Inference path: nothing recorded.
    pub fn velocity_rows(&self, x: &Tensor, ts: &[f64]) -> Result<Tensor> {
        let (b, d) = x.dims2()?;
        if d != self.data_dim {
            return Err(Error::Dim(format!(
                "input width {d} does not match net data_dim {}",
                self.data_dim
            )));
        }
        if ts.len() != b {
            return Err(Error::Dim(format!("{b} rows but {} time values", ts.len())));
        }
        for &t in ts {
            check_time(t)?;
        }
        x.check_finite("velocity input")?;
        let mut h = x.concat_cols(&embed_rows(ts, self.time_embed_dim))?;
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// v(x, t) with a single time value shared across the batch.
    pub fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let (b, _) = x.dims2()?;
        let ts = alloc::vec![t; b];
        self.velocity_rows(x, &ts)
    }

    /// Classifier logits for feature rows z.
    pub fn classify(&self, z: &Tensor) -> Result<Tensor> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Config(String::from("classifier head not attached")))?;
        let mut h = z.clone();
        for layer in head {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Named parameters in a fixed order (velocity layers then head layers).
    /// The order is the contract shared by `bind`, Adam state, and checkpoints.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.layers.len() {
            names.push(format!("v{i}.w"));
            names.push(format!("v{i}.b"));
        }
        if let Some(head) = &self.head {
            for i in 0..head.len() {
                names.push(format!("head{i}.w"));
                names.push(format!("head{i}.b"));
            }
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        if let Some(head) = &self.head {
            for l in head {
                out.push(&l.weight);
                out.push(&l.bias);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let Some(head) = &mut self.head {
            for l in head {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    /// True for parameters belonging to the classifier head, by position in
    /// `param_names` order.
    pub fn is_head_param(&self, index: usize) -> bool {
        index >= 2 * self.layers.len()
    }

    /// Register every parameter as a graph leaf for differentiable passes.
    pub fn bind(&self, g: &mut Graph) -> BoundNet {
        let mut param_ids = Vec::new();
        let mut layer_ids = Vec::new();
        for l in &self.layers {
            let w = g.leaf(l.weight.clone());
            let b = g.leaf(l.bias.clone());
            param_ids.push(w);
            param_ids.push(b);
            layer_ids.push((w, b, l.activation));
        }
        let head_ids = self.head.as_ref().map(|head| {
            let mut ids = Vec::new();
            for l in head {
                let w = g.leaf(l.weight.clone());
                let b = g.leaf(l.bias.clone());
                param_ids.push(w);
                param_ids.push(b);
                ids.push((w, b, l.activation));
            }
            ids
        });
        BoundNet {
            data_dim: self.data_dim,
            time_embed_dim: self.time_embed_dim,
            layer_ids,
            head_ids,
            param_ids,
        }
    }
}

/// A [`ParamNet`] whose parameters live as leaves of some [`Graph`], so
/// forward passes record nodes and gradients flow back to the parameters.
pub struct BoundNet {
    pub data_dim: usize,
    pub time_embed_dim: usize,
    layer_ids: Vec<(NodeId, NodeId, Activation)>,
    head_ids: Option<Vec<(NodeId, NodeId, Activation)>>,
    /// Same order as `ParamNet::param_names`.
    param_ids: Vec<NodeId>,
}

impl BoundNet {
    pub fn param_ids(&self) -> &[NodeId] {
        &self.param_ids
    }

    fn run_layers(
        g: &mut Graph,
        layers: &[(NodeId, NodeId, Activation)],
        mut h: NodeId,
    ) -> Result<NodeId> {
        for &(w, b, act) in layers {
            h = g.matmul(h, w)?;
            h = g.add_bias(h, b)?;
            if act == Activation::Tanh {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Recorded v(x, t), one time value per row.
    pub fn velocity_rows(&self, g: &mut Graph, x: NodeId, ts: &[f64]) -> Result<NodeId> {
        let (b, d) = g.value(x).dims2()?;
        if d != self.data_dim {
            return Err(Error::Dim(format!(
                "input width {d} does not match net data_dim {}",
                self.data_dim
            )));
        }
        if ts.len() != b {
            return Err(Error::Dim(format!("{b} rows but {} time values", ts.len())));
        }
        for &t in ts {
            check_time(t)?;
        }
        let embed = g.leaf(embed_rows(ts, self.time_embed_dim));
        let h = g.concat_cols(x, embed)?;
        Self::run_layers(g, &self.layer_ids, h)
    }

    pub fn velocity(&self, g: &mut Graph, x: NodeId, t: f64) -> Result<NodeId> {
        let (b, _) = g.value(x).dims2()?;
        let ts = alloc::vec![t; b];
        self.velocity_rows(g, x, &ts)
    }

    pub fn classify(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let head = self
            .head_ids
            .as_ref()
            .ok_or_else(|| Error::Config(String::from("classifier head not attached")))?
            .clone();
        Self::run_layers(g, &head, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::softmax_rows;

    fn test_net() -> ParamNet {
        let mut rng = Rng::seed_from(5);
        ParamNet::new(2, &[8, 8], 4, &mut rng).unwrap()
    }

    #[test]
    fn zero_final_layer_gives_zero_velocity() {
        let net = test_net();
        let x = Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.9]).unwrap();
        for &t in &[0.0, 0.37, 1.0] {
            let v = net.velocity(&x, t).unwrap();
            assert!(v.data().iter().all(|&c| c == 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let a = test_net();
        let b = test_net();
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, -0.5, 0.25]).unwrap();
        let va = a.velocity(&x, 0.4).unwrap();
        let vb = b.velocity(&x, 0.4).unwrap();
        assert_eq!(va.data(), vb.data());
        let again = a.velocity(&x, 0.4).unwrap();
        assert_eq!(va.data(), again.data());
    }

    #[test]
    fn single_linear_layer_matches_hand_matrix_product() {
        // one linear layer, t-embedding weights zero: v = x . A
        let d = 2;
        let te = 4;
        let a = [[1.0, 2.0], [3.0, 4.0]]; // [in,out]
        let mut w = Tensor::zeros(vec![d + te, d]);
        for i in 0..d {
            for j in 0..d {
                w.data_mut()[i * d + j] = a[i][j];
            }
        }
        let net = ParamNet {
            data_dim: d,
            time_embed_dim: te,
            layers: vec![Layer { weight: w, bias: Tensor::zeros(vec![d]), activation: Activation::Linear }],
            head: None,
        };
        let x = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let v = net.velocity(&x, 0.7).unwrap();
        // hand product: (1*1 + 1*3, 1*2 + 1*4) = (4, 6)
        assert_eq!(v.data(), &[4.0, 6.0]);
    }

    #[test]
    fn velocity_rejects_width_mismatch_and_bad_time() {
        let net = test_net();
        let bad = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(net.velocity(&bad, 0.5), Err(Error::Dim(_))));
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(net.velocity(&x, 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_weight_head_gives_uniform_probabilities() {
        let mut rng = Rng::seed_from(5);
        let mut net = test_net().with_head(6, 16, &mut rng);
        // zero out the whole head, not just the final layer
        for l in net.head.as_mut().unwrap() {
            l.weight = Tensor::zeros(l.weight.shape().to_vec());
            l.bias = Tensor::zeros(l.bias.shape().to_vec());
        }
        let z = Tensor::matrix(2, 2, vec![0.3, -0.8, 1.4, 0.0]).unwrap();
        let logits = net.classify(&z).unwrap();
        let p = softmax_rows(&logits).unwrap();
        for i in 0..2 {
            for j in 0..6 {
                assert!((p.row(i)[j] - 1.0 / 6.0).abs() < 1e-12);
            }
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_logits_split_probability_evenly() {
        let logits = Tensor::matrix(1, 2, vec![3.7, 3.7]).unwrap();
        let p = softmax_rows(&logits).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-15);
        assert!((p.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hand_set_head_matches_hand_evaluation() {
        // hidden: identity weights + tanh; output: hand 2x2 matrix
        let head = vec![
            Layer {
                weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                bias: Tensor::zeros(vec![2]),
                activation: Activation::Tanh,
            },
            Layer {
                weight: Tensor::matrix(2, 2, vec![1.0, -1.0, 2.0, 0.5]).unwrap(),
                bias: Tensor::vector(vec![0.1, 0.2]),
                activation: Activation::Linear,
            },
        ];
        let mut net = test_net();
        net.head = Some(head);
        let z = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let logits = net.classify(&z).unwrap();
        // hand: h = (tanh 1, tanh 0) = (0.76159..., 0)
        // logits = (h0*1 + h1*2 + 0.1, h0*(-1) + h1*0.5 + 0.2)
        let h0 = (1.0f64).tanh();
        assert!((logits.data()[0] - (h0 + 0.1)).abs() < 1e-15);
        assert!((logits.data()[1] - (-h0 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn classify_without_head_is_a_config_error() {
        let net = test_net();
        let z = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(net.classify(&z), Err(Error::Config(_))));
    }

    #[test]
    fn bound_forward_matches_inference_forward_bitwise() {
        let mut rng = Rng::seed_from(17);
        let mut net = ParamNet::new(2, &[8, 8], 4, &mut rng).unwrap().with_head(3, 8, &mut rng);
        // give the final layers nonzero weights so the check is non-trivial
        let n = net.layers.last().unwrap().weight.numel();
        net.layers.last_mut().unwrap().weight =
            Tensor::new(net.layers.last().unwrap().weight.shape().to_vec(), rng.normal_vec(n))
                .unwrap();
        let x = Tensor::matrix(3, 2, rng.normal_vec(6)).unwrap();
        let ts = [0.1, 0.5, 0.9];

        let direct = net.velocity_rows(&x, &ts).unwrap();
        let mut g = Graph::new();
        let bound = net.bind(&mut g);
        let xi = g.leaf(x.clone());
        let v = bound.velocity_rows(&mut g, xi, &ts).unwrap();
        assert_eq!(direct.data(), g.value(v).data());

        let logits_direct = net.classify(&x).unwrap();
        let li = bound.classify(&mut g, xi).unwrap();
        assert_eq!(logits_direct.data(), g.value(li).data());
    }

    #[test]
    fn param_names_align_with_params() {
        let mut rng = Rng::seed_from(1);
        let net = ParamNet::new(2, &[8], 4, &mut rng).unwrap().with_head(3, 8, &mut rng);
        let names = net.param_names();
        let params = net.params();
        assert_eq!(names.len(), params.len());
        assert_eq!(names, vec!["v0.w", "v0.b", "v1.w", "v1.b", "head0.w", "head0.b", "head1.w", "head1.b"]);
        assert!(!net.is_head_param(3));
        assert!(net.is_head_param(4));
    }
}
