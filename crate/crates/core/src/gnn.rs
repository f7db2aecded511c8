//! Graph convolutional backbone.
//!
//! Each layer propagates along a fixed convex mixture of two normalized
//! adjacencies (the observed graph and the learned one) and applies a shared
//! weight matrix: `R_{l+1} = relu(M R_l W_l)` with `M = lambda*A_hat +
//! (1-lambda)*A'_hat`, ReLU omitted on the final layer. The backward pass is
//! hand-derived and validated by the finite-difference harness.

use crate::numeric::{glorot_uniform, DenseMatrix, DiffParam};
use crate::rng::SeededRng;
use crate::{Error, Result};

/// Layer weights W_0 .. W_{L-1} with chained dimensions.
#[derive(Debug, Clone)]
pub struct GnnParams {
    pub layers: Vec<DiffParam>,
}

impl GnnParams {
    /// `dims = [input, hidden.., output]`, one weight per consecutive pair.
    pub fn init(dims: &[usize], rng: &mut SeededRng) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| DiffParam::new(format!("gnn.w{l}"), glorot_uniform(w[0], w[1], rng)))
            .collect();
        GnnParams { layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().value.cols()
    }

    pub fn params(&self) -> Vec<&DiffParam> {
        self.layers.iter().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut DiffParam> {
        self.layers.iter_mut().collect()
    }

    fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |bits: u64| {
            h ^= bits;
            h = h.wrapping_mul(0x1000_0000_01b3);
        };
        for p in &self.layers {
            eat(p.value.rows() as u64);
            eat(p.value.cols() as u64);
            for &v in p.value.data() {
                eat(v.to_bits());
            }
        }
        h
    }
}

/// Forward intermediates needed by [`gcn_backward`].
#[derive(Debug, Clone)]
pub struct GcnCache {
    mixed: DenseMatrix,
    /// R_l for l = 0..L-1 (inputs to each layer; R_0 is X).
    layer_inputs: Vec<DenseMatrix>,
    /// M * R_l for each layer.
    propagated: Vec<DenseMatrix>,
    /// Pre-activations Z_l = M * R_l * W_l.
    preacts: Vec<DenseMatrix>,
    fingerprint: u64,
}

impl GcnCache {
    /// Pre-activation of layer `l` (exposed for invariant tests).
    pub fn preactivation(&self, l: usize) -> &DenseMatrix {
        &self.preacts[l]
    }

    /// Input representation of layer `l`; `l = 0` is X.
    pub fn layer_input(&self, l: usize) -> &DenseMatrix {
        &self.layer_inputs[l]
    }
}

/// Runs the mixed-propagation GCN. `lambda` must be in [0, 1]; both
/// adjacencies are expected to be normalized n x n operators.
pub fn gcn_forward(
    x: &DenseMatrix,
    a_hat: &DenseMatrix,
    a_prime_hat: &DenseMatrix,
    params: &GnnParams,
    lambda: f64,
) -> Result<(DenseMatrix, GcnCache)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let n = x.rows();
    if a_hat.shape() != (n, n) || a_prime_hat.shape() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "adjacency shapes {:?} / {:?} do not match {n} nodes",
            a_hat.shape(),
            a_prime_hat.shape()
        )));
    }
    let mut mixed = a_hat.clone();
    mixed.scale(lambda);
    mixed.add_scaled(a_prime_hat, 1.0 - lambda);

    let num_layers = params.num_layers();
    let mut layer_inputs = Vec::with_capacity(num_layers);
    let mut propagated = Vec::with_capacity(num_layers);
    let mut preacts = Vec::with_capacity(num_layers);
    let mut rep = x.clone();
    for (l, w) in params.layers.iter().enumerate() {
        if rep.cols() != w.value.rows() {
            return Err(Error::ShapeMismatch(format!(
                "layer {l}: input dim {} does not match weight rows {}",
                rep.cols(),
                w.value.rows()
            )));
        }
        let prop = mixed.matmul(&rep);
        let z = prop.matmul(&w.value);
        layer_inputs.push(rep);
        propagated.push(prop);
        rep = if l + 1 == num_layers {
            z.clone()
        } else {
            z.map(|v| v.max(0.0))
        };
        preacts.push(z);
    }
    let cache = GcnCache {
        mixed,
        layer_inputs,
        propagated,
        preacts,
        fingerprint: params.fingerprint(),
    };
    Ok((rep, cache))
}

/// Backpropagates `upstream` (dLoss/dR_L) through the cached forward pass.
/// Accumulates `grad_scale * grad` into the layer weights and returns the
/// gradient with respect to the input features.
pub fn gcn_backward(
    upstream: &DenseMatrix,
    cache: &GcnCache,
    params: &mut GnnParams,
    grad_scale: f64,
) -> Result<DenseMatrix> {
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::Config(
            "stale cache: parameters changed since the forward pass".into(),
        ));
    }
    let num_layers = params.num_layers();
    if upstream.shape() != cache.preacts[num_layers - 1].shape() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient shape {:?} does not match output {:?}",
            upstream.shape(),
            cache.preacts[num_layers - 1].shape()
        )));
    }
    let mut grad = upstream.clone();
    for l in (0..num_layers).rev() {
        if l + 1 != num_layers {
            // grad arrives at relu(Z_l); gate it
            let z = &cache.preacts[l];
            for (g, &zv) in grad.data_mut().iter_mut().zip(z.data()) {
                if zv <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let grad_w = cache.propagated[l].matmul_tn(&grad);
        params.layers[l].grad.add_scaled(&grad_w, grad_scale);
        // dR_l = M^T * (dZ * W_l^T)
        let back = grad.matmul_nt(&params.layers[l].value);
        grad = cache.mixed.matmul_tn(&back);
    }
    Ok(grad)
}
