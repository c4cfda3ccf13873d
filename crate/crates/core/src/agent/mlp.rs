//! Dense feed-forward network with ReLU hidden units and hand-written
//! backpropagation.

use rand::Rng;

/// Fully connected layer, `y = W·x + b` with `W` stored row-major
/// (`out_dim × in_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// He-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let mut layer = Self::zeros(in_dim, out_dim);
        for w in &mut layer.weights {
            *w = rng.random_range(-bound..bound);
        }
        layer
    }

    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(acc);
        }
    }
}

/// Activations recorded by [`Mlp::forward_cached`]; `acts[0]` is the input
/// and `acts[i + 1]` the post-activation output of layer `i`.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    pub acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    /// Apply ReLU after the last layer too (used for shared trunks).
    pub relu_output: bool,
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], relu_output: bool, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least an input and an output size");
        let layers = sizes.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        Self { layers, relu_output }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect(),
            relu_output: self.relu_output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.out_dim));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.relu_output
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache);
        cache.acts.pop().unwrap_or_default()
    }

    pub fn forward_cached(&self, x: &[f64], cache: &mut ForwardCache) {
        assert_eq!(x.len(), self.input_dim(), "input width");
        cache.acts.resize(self.layers.len() + 1, Vec::new());
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, rest) = cache.acts.split_at_mut(i + 1);
            let out = &mut rest[0];
            layer.forward_into(&done[i], out);
            if self.activated(i) {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
    }

    /// Accumulate parameter gradients into `grads` given `d_out = ∂L/∂output`
    /// and return `∂L/∂input`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let mut delta = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if self.activated(i) {
                for (d, a) in delta.iter_mut().zip(&cache.acts[i + 1]) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &cache.acts[i];
            let g = &mut grads.layers[i];
            let mut d_input = vec![0.0; layer.in_dim];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = o * layer.in_dim;
                for j in 0..layer.in_dim {
                    g.weights[row + j] += d * input[j];
                    d_input[j] += d * layer.weights[row + j];
                }
            }
            delta = d_input;
        }
        delta
    }

    /// Parameter slices in a fixed order: per layer, weights then bias.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&[17, 8, 8, 5], false, &mut rng);
        assert_eq!(net.sizes(), vec![17, 8, 8, 5]);
        assert_eq!(net.param_count(), 17 * 8 + 8 + 8 * 8 + 8 + 8 * 5 + 5);
        assert_eq!(net.forward(&[0.1; 17]).len(), 5);
    }

    #[test]
    fn identity_output_can_be_negative() {
        let mut net = Mlp::new(&[1, 1], false, &mut ChaCha8Rng::seed_from_u64(0));
        net.layers[0].weights[0] = -2.0;
        net.layers[0].bias[0] = 0.5;
        assert_eq!(net.forward(&[1.0]), vec![-1.5]);
        net.relu_output = true;
        assert_eq!(net.forward(&[1.0]), vec![0.0]);
    }

    /// Central differences on `L = Σ c_i · out_i` for every parameter.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = Mlp::new(&[4, 6, 5, 3], false, &mut rng);
        let x = [0.3, -0.7, 0.9, 0.2];
        let c = [0.5, -1.0, 2.0];
        let loss = |n: &Mlp| n.forward(&x).iter().zip(&c).map(|(o, c)| o * c).sum::<f64>();

        let mut cache = ForwardCache::default();
        net.forward_cached(&x, &mut cache);
        let mut grads = net.zeros_like();
        net.backward(&cache, &c, &mut grads);
        let analytic: Vec<f64> = grads.param_slices().concat();

        let h = 1e-5;
        let mut k = 0;
        for s in 0..net.param_slices().len() {
            for j in 0..net.param_slices()[s].len() {
                let orig = net.param_slices()[s][j];
                net.param_slices_mut()[s][j] = orig + h;
                let up = loss(&net);
                net.param_slices_mut()[s][j] = orig - h;
                let down = loss(&net);
                net.param_slices_mut()[s][j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let err = (numeric - analytic[k]).abs() / numeric.abs().max(analytic[k].abs()).max(1e-6);
                assert!(err < 1e-4, "param {k}: analytic {} numeric {numeric}", analytic[k]);
                k += 1;
            }
        }
    }
}
