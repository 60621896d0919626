//! Dense feed-forward networks with explicit forward and backward passes.
//!
//! A [`Network`] is an ordered list of [`DenseLayer`]s, each computing
//! `activation(x Wᵀ + b)` row-wise over a batch. [`Network::forward`] records a
//! [`ForwardTrace`] which [`Network::backward`] consumes to produce parameter
//! gradients and the gradient with respect to the network input. The input
//! gradient is what lets the adversarial model chain a frozen network's
//! gradient into the network that feeds it.

use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Row-major dense matrix. Rows index examples in a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::input(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::input(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Single-column matrix.
    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols && self.rows > 0 && other.rows > 0 {
            return Err(Error::input(format!(
                "cannot stack {}-column matrix onto {}-column matrix",
                other.cols, self.cols
            )));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, _z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Linear => 1.0,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    /// Row-major, shape (out_dim, in_dim).
    weights: Vec<f64>,
    biases: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config("layer dimensions must be positive"));
        }
        if weights.len() != in_dim * out_dim || biases.len() != out_dim {
            return Err(Error::config(format!(
                "layer {in_dim}->{out_dim} given {} weights and {} biases",
                weights.len(),
                biases.len()
            )));
        }
        Ok(DenseLayer {
            in_dim,
            out_dim,
            weights,
            biases,
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        Self::new(
            in_dim,
            out_dim,
            vec![0.0; in_dim * out_dim],
            vec![0.0; out_dim],
            activation,
        )
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    /// Returns (pre-activation, activation) for a batch.
    fn forward(&self, x: &Matrix) -> (Matrix, Matrix) {
        let n = x.rows;
        let mut pre = Matrix::zeros(n, self.out_dim);
        for i in 0..n {
            let xi = x.row(i);
            let zi = &mut pre.data[i * self.out_dim..(i + 1) * self.out_dim];
            for (o, z) in zi.iter_mut().enumerate() {
                let w = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
                *z = self.biases[o] + w.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let post = Matrix {
            rows: n,
            cols: self.out_dim,
            data: pre.data.iter().map(|&z| self.activation.apply(z)).collect(),
        };
        (pre, post)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Gradients for every parameter of a [`Network`], layer-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetworkGrads {
    pub fn zeros_like(net: &Network) -> Self {
        NetworkGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    /// Flattened in the same order as [`Network::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    pub fn add_assign(&mut self, other: &NetworkGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.biases.iter_mut().zip(&b.biases).for_each(|(x, y)| *x += y);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }
}

/// Values recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Matrix,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.post.len()
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }

    pub fn activations(&self) -> &[Matrix] {
        &self.post
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<DenseLayer>,
}

impl Network {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::config(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(Network { layers })
    }

    /// Builds a network with weights uniform in `±1/√in_dim` and zero biases.
    ///
    /// `layer_dims` lists the input width followed by each layer's output
    /// width, so it has one more entry than `activations`.
    pub fn init(layer_dims: &[usize], activations: &[Activation], rng_seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.len() != activations.len() + 1 {
            return Err(Error::config(format!(
                "{} layer dims need {} activations, got {}",
                layer_dims.len(),
                layer_dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        let mut rng = seed::rng(rng_seed);
        let layers = layer_dims
            .windows(2)
            .zip(activations)
            .map(|(dims, &act)| {
                let (in_dim, out_dim) = (dims[0], dims[1]);
                if in_dim == 0 || out_dim == 0 {
                    return Err(Error::config("layer dimensions must be positive"));
                }
                let bound = 1.0 / (in_dim as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                let weights = (0..in_dim * out_dim).map(|_| dist.sample(&mut rng)).collect();
                DenseLayer::new(in_dim, out_dim, weights, vec![0.0; out_dim], act)
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    /// Mutable access to the `index`-th parameter in [`Network::flat_params`] order.
    pub fn param_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for l in &mut self.layers {
            let nw = l.weights.len();
            if index < nw {
                return Some(&mut l.weights[index]);
            }
            index -= nw;
            if index < l.biases.len() {
                return Some(&mut l.biases[index]);
            }
            index -= l.biases.len();
        }
        None
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols != self.in_dim() {
            return Err(Error::input(format!(
                "network expects {} input columns, got {}",
                self.in_dim(),
                x.cols
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        self.check_input(x)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (z, a) = layer.forward(post.last().unwrap_or(x));
            pre.push(z);
            post.push(a);
        }
        let output = post[post.len() - 1].clone();
        Ok((
            output,
            ForwardTrace {
                input: x.clone(),
                pre,
                post,
            },
        ))
    }

    /// Forward pass without keeping intermediate values.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut current = self.layers[0].forward(x).1;
        for layer in &self.layers[1..] {
            current = layer.forward(&current).1;
        }
        Ok(current)
    }

    /// Backpropagates `output_grad` (dLoss/dOutput, same shape as the forward
    /// output) and returns parameter gradients plus dLoss/dInput.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        output_grad: &Matrix,
    ) -> Result<(NetworkGrads, Matrix)> {
        if trace.depth() != self.depth() {
            return Err(Error::Internal(format!(
                "trace depth {} does not match network depth {}",
                trace.depth(),
                self.depth()
            )));
        }
        for (l, a) in self.layers.iter().zip(&trace.post) {
            if a.cols != l.out_dim || a.rows != trace.batch_size() {
                return Err(Error::Internal("trace shapes do not match network".into()));
            }
        }
        let n = trace.batch_size();
        if output_grad.rows != n || output_grad.cols != self.out_dim() {
            return Err(Error::input(format!(
                "output gradient is {}x{}, forward output was {}x{}",
                output_grad.rows,
                output_grad.cols,
                n,
                self.out_dim()
            )));
        }

        let mut grads = NetworkGrads::zeros_like(self);
        let mut upstream = output_grad.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let input = if k == 0 { &trace.input } else { &trace.post[k - 1] };
            let (pre, post) = (&trace.pre[k], &trace.post[k]);
            let (din, dout) = (layer.in_dim, layer.out_dim);

            // delta = upstream ⊙ activation'(z)
            let delta: Vec<f64> = upstream
                .data
                .iter()
                .zip(pre.data.iter().zip(&post.data))
                .map(|(g, (&z, &a))| g * layer.activation.derivative(z, a))
                .collect();

            let lg = &mut grads.layers[k];
            let mut next = Matrix::zeros(n, din);
            for i in 0..n {
                let xi = input.row(i);
                let di = &delta[i * dout..(i + 1) * dout];
                let ni = &mut next.data[i * din..(i + 1) * din];
                for (o, &d) in di.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    lg.biases[o] += d;
                    let wrow = &layer.weights[o * din..(o + 1) * din];
                    let grow = &mut lg.weights[o * din..(o + 1) * din];
                    for j in 0..din {
                        grow[j] += d * xi[j];
                        ni[j] += d * wrow[j];
                    }
                }
            }
            upstream = next;
        }
        Ok((grads, upstream))
    }

    /// Plain SGD: `p ← p − lr·grad(p)`. Rejects non-finite gradients before
    /// touching any parameter.
    pub fn sgd_step(&mut self, grads: &NetworkGrads, learning_rate: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len()
            || grads.layers.iter().zip(&self.layers).any(|(g, l)| {
                g.weights.len() != l.weights.len() || g.biases.len() != l.biases.len()
            })
        {
            return Err(Error::input("gradient shapes do not match network"));
        }
        if !grads.all_finite() {
            return Err(Error::training("non-finite gradient"));
        }
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.weights
                .iter_mut()
                .zip(&g.weights)
                .for_each(|(p, d)| *p -= learning_rate * d);
            l.biases
                .iter_mut()
                .zip(&g.biases)
                .for_each(|(p, d)| *p -= learning_rate * d);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = seed::rng(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn zero_net(dims: &[usize], acts: &[Activation]) -> Network {
        let layers = dims
            .windows(2)
            .zip(acts)
            .map(|(d, &a)| DenseLayer::zeros(d[0], d[1], a).unwrap())
            .collect();
        Network::new(layers).unwrap()
    }

    /// Loss = Σ output ⊙ probe, so dLoss/dOutput = probe.
    fn probe_loss(net: &Network, x: &Matrix, probe: &Matrix) -> f64 {
        let out = net.predict(x).unwrap();
        out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt()
            + b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    #[test]
    fn init_shapes_and_zero_biases() {
        let net = Network::init(&[10, 5, 1], &[Activation::Tanh, Activation::Sigmoid], 7).unwrap();
        assert_eq!(net.depth(), 2);
        assert_eq!(net.layers()[0].weights().len(), 5 * 10);
        assert_eq!(net.layers()[1].weights().len(), 5);
        assert!(net.layers().iter().all(|l| l.biases().iter().all(|&b| b == 0.0)));
        let bound = 1.0 / 10f64.sqrt();
        assert!(net.layers()[0].weights().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn init_is_seeded() {
        let a = Network::init(&[10, 10], &[Activation::Tanh], 7).unwrap();
        let b = Network::init(&[10, 10], &[Activation::Tanh], 7).unwrap();
        let c = Network::init(&[10, 10], &[Activation::Tanh], 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn init_rejects_mismatched_config() {
        assert!(matches!(
            Network::init(&[10, 5, 1], &[Activation::Tanh], 0),
            Err(Error::Config(_))
        ));
        assert!(Network::init(&[10, 0], &[Activation::Tanh], 0).is_err());
        let l1 = DenseLayer::zeros(3, 4, Activation::Tanh).unwrap();
        let l2 = DenseLayer::zeros(5, 1, Activation::Linear).unwrap();
        assert!(matches!(Network::new(vec![l1, l2]), Err(Error::Config(_))));
    }

    #[test]
    fn forward_zero_weights() {
        let x = random_matrix(4, 3, 1);
        let tanh = zero_net(&[3, 2], &[Activation::Tanh]);
        assert!(tanh.predict(&x).unwrap().data().iter().all(|&v| v == 0.0));
        let sig = zero_net(&[3, 2], &[Activation::Sigmoid]);
        assert!(sig.predict(&x).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn forward_identity_linear() {
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let layer = DenseLayer::new(3, 3, w, vec![0.0; 3], Activation::Linear).unwrap();
        let net = Network::new(vec![layer]).unwrap();
        let x = random_matrix(5, 3, 2);
        let (out, trace) = net.forward(&x).unwrap();
        assert_eq!(out, x);
        assert_eq!(trace.depth(), 1);
        assert_eq!(trace.batch_size(), 5);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = zero_net(&[3, 2], &[Activation::Tanh]);
        assert!(matches!(net.forward(&random_matrix(2, 4, 0)), Err(Error::Input(_))));
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let net = Network::init(&[3, 4, 1], &[Activation::Tanh, Activation::Sigmoid], 3).unwrap();
        let x = random_matrix(6, 3, 4);
        let (_, trace) = net.forward(&x).unwrap();
        let (g, dx) = net.backward(&trace, &Matrix::zeros(6, 1)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_linear_single_example() {
        // y = W x with loss = y: dL/dW = xᵀ, dL/db = 1, dL/dx = W.
        let w = vec![0.3, -0.7, 1.1];
        let layer = DenseLayer::new(3, 1, w.clone(), vec![0.0], Activation::Linear).unwrap();
        let net = Network::new(vec![layer]).unwrap();
        let x = Matrix::from_vec(1, 3, vec![2.0, -1.0, 0.5]).unwrap();
        let (_, trace) = net.forward(&x).unwrap();
        let (g, dx) = net.backward(&trace, &Matrix::column(&[1.0])).unwrap();
        assert_eq!(g.layers[0].weights, vec![2.0, -1.0, 0.5]);
        assert_eq!(g.layers[0].biases, vec![1.0]);
        assert_eq!(dx.data(), &w[..]);
    }

    #[test]
    fn backward_rejects_mismatched_trace() {
        let a = Network::init(&[3, 4, 1], &[Activation::Tanh, Activation::Linear], 1).unwrap();
        let b = Network::init(&[3, 1], &[Activation::Linear], 1).unwrap();
        let x = random_matrix(2, 3, 0);
        let (_, trace) = b.forward(&x).unwrap();
        assert!(matches!(
            a.backward(&trace, &Matrix::zeros(2, 1)),
            Err(Error::Internal(_))
        ));
    }

    fn gradient_check(dims: &[usize], acts: &[Activation], seed: u64) {
        let net = Network::init(dims, acts, seed).unwrap();
        let n = 5;
        let x = random_matrix(n, dims[0], seed + 100);
        let probe = random_matrix(n, *dims.last().unwrap(), seed + 200);
        let (_, trace) = net.forward(&x).unwrap();
        let (g, dx) = net.backward(&trace, &probe).unwrap();

        let eps = 1e-5;
        let fd_params: Vec<f64> = (0..net.param_count())
            .map(|k| {
                let mut plus = net.clone();
                *plus.param_mut(k).unwrap() += eps;
                let mut minus = net.clone();
                *minus.param_mut(k).unwrap() -= eps;
                (probe_loss(&plus, &x, &probe) - probe_loss(&minus, &x, &probe)) / (2.0 * eps)
            })
            .collect();
        let e = rel_err(&g.flatten(), &fd_params);
        assert!(e < 1e-5, "param grad rel err {e} for {acts:?}");

        let fd_input: Vec<f64> = (0..x.data().len())
            .map(|k| {
                let mut xp = x.clone();
                xp.data_mut()[k] += eps;
                let mut xm = x.clone();
                xm.data_mut()[k] -= eps;
                (probe_loss(&net, &xp, &probe) - probe_loss(&net, &xm, &probe)) / (2.0 * eps)
            })
            .collect();
        let e = rel_err(dx.data(), &fd_input);
        assert!(e < 1e-5, "input grad rel err {e} for {acts:?}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        use Activation::*;
        gradient_check(&[3, 4, 1], &[Tanh, Sigmoid], 11);
        for (i, &a) in [Tanh, Sigmoid, Linear].iter().enumerate() {
            gradient_check(&[4, 3], &[a], 20 + i as u64);
            gradient_check(&[3, 5, 2], &[a, Tanh], 30 + i as u64);
            gradient_check(&[2, 4, 3, 1], &[Tanh, a, Sigmoid], 40 + i as u64);
            gradient_check(&[2, 4, 3, 2], &[a, a, a], 50 + i as u64);
        }
    }

    #[test]
    fn sgd_zero_lr_is_noop() {
        let mut net = Network::init(&[3, 2], &[Activation::Tanh], 5).unwrap();
        let before = net.clone();
        let mut g = NetworkGrads::zeros_like(&net);
        g.layers[0].weights.iter_mut().for_each(|w| *w = 3.0);
        net.sgd_step(&g, 0.0).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn sgd_single_weight_arithmetic() {
        let layer = DenseLayer::new(1, 1, vec![1.0], vec![0.0], Activation::Linear).unwrap();
        let mut net = Network::new(vec![layer]).unwrap();
        let g = NetworkGrads {
            layers: vec![LayerGrads {
                weights: vec![2.0],
                biases: vec![0.0],
            }],
        };
        net.sgd_step(&g, 0.1).unwrap();
        assert!((net.layers()[0].weights()[0] - 0.8).abs() < 1e-15);
        assert_eq!(net.layers()[0].biases()[0], 0.0);
    }

    #[test]
    fn sgd_rejects_non_finite_without_partial_update() {
        let mut net = Network::init(&[2, 2], &[Activation::Tanh], 5).unwrap();
        let before = net.clone();
        let mut g = NetworkGrads::zeros_like(&net);
        g.layers[0].weights[0] = 1.0;
        g.layers[0].biases[1] = f64::NAN;
        assert!(matches!(net.sgd_step(&g, 0.1), Err(Error::Training { .. })));
        assert_eq!(net, before);
    }

    #[test]
    fn sgd_steps_are_additive() {
        let net = Network::init(&[3, 2], &[Activation::Tanh], 9).unwrap();
        let mut g = NetworkGrads::zeros_like(&net);
        for (k, w) in g.layers[0].weights.iter_mut().enumerate() {
            *w = 0.25 * k as f64;
        }
        g.layers[0].biases = vec![0.5, -0.5];
        let mut twice = net.clone();
        twice.sgd_step(&g, 0.1).unwrap();
        twice.sgd_step(&g, 0.1).unwrap();
        let mut summed = g.clone();
        summed.add_assign(&g);
        let mut once = net.clone();
        once.sgd_step(&summed, 0.1).unwrap();
        for (a, b) in twice.flat_params().iter().zip(once.flat_params()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn batch_forward_equals_row_forward(seed in 0u64..1000, n in 1usize..12) {
            let net = Network::init(&[4, 6, 3], &[Activation::Tanh, Activation::Sigmoid], seed).unwrap();
            let x = random_matrix(n, 4, seed ^ 0xABCD);
            let batch = net.predict(&x).unwrap();
            for i in 0..n {
                let xi = Matrix::from_vec(1, 4, x.row(i).to_vec()).unwrap();
                let single = net.predict(&xi).unwrap();
                for j in 0..3 {
                    prop_assert!((single.get(0, j) - batch.get(i, j)).abs() <= 1e-12);
                }
            }
            // determinism
            prop_assert_eq!(net.predict(&x).unwrap(), batch);
        }
    }
}
