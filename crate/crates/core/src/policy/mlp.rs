use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgdaError};

/// Fully connected network with tanh on every layer, output included.
///
/// Parameters live in one flat vector: for each layer the row-major weight
/// matrix (outputs x inputs) followed by the bias vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Scratch buffers reused across samples.
#[derive(Debug, Default)]
struct Workspace {
    activations: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Mlp {
    fn param_count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(SgdaError::config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self { sizes: sizes.to_vec(), params: vec![0.0; Self::param_count(sizes)] })
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = rng.random_range(-limit..limit);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(SgdaError::input(format!(
                "expected {} parameters for sizes {sizes:?}, got {}",
                net.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(SgdaError::input("non-finite parameter"));
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    fn workspace(&self) -> Workspace {
        Workspace {
            activations: self.sizes.iter().map(|&n| vec![0.0; n]).collect(),
            deltas: self.sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn forward_ws(&self, x: &[f64], ws: &mut Workspace) {
        ws.activations[0].copy_from_slice(x);
        let mut off = 0;
        for l in 1..self.sizes.len() {
            let (n_in, n_out) = (self.sizes[l - 1], self.sizes[l]);
            let (prev, rest) = ws.activations.split_at_mut(l);
            let input = &prev[l - 1];
            let out = &mut rest[0];
            let weights = &self.params[off..off + n_in * n_out];
            let biases = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            for (j, o) in out.iter_mut().enumerate() {
                let row = &weights[j * n_in..(j + 1) * n_in];
                let z: f64 = biases[j] + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
                *o = z.tanh();
            }
            off += n_in * n_out + n_out;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim(), "input dimension mismatch");
        let mut ws = self.workspace();
        self.forward_ws(x, &mut ws);
        ws.activations.pop().unwrap()
    }

    /// Mean absolute error of the first output against `targets`.
    pub fn l1_loss<X: AsRef<[f64]>>(&self, inputs: &[X], targets: &[f64]) -> f64 {
        let mut ws = self.workspace();
        let total: f64 = inputs
            .iter()
            .zip(targets)
            .map(|(x, t)| {
                self.forward_ws(x.as_ref(), &mut ws);
                (ws.activations.last().unwrap()[0] - t).abs()
            })
            .sum();
        total / inputs.len().max(1) as f64
    }

    /// Mean L1 loss over the batch; its gradient is written into `grad`.
    pub fn l1_loss_and_grad<X: AsRef<[f64]>>(&self, inputs: &[X], targets: &[f64], grad: &mut [f64]) -> f64 {
        assert_eq!(grad.len(), self.params.len());
        assert_eq!(inputs.len(), targets.len());
        grad.iter_mut().for_each(|g| *g = 0.0);
        let n = inputs.len().max(1) as f64;
        let mut ws = self.workspace();
        let depth = self.sizes.len();
        let mut loss = 0.0;
        for (x, &t) in inputs.iter().zip(targets) {
            self.forward_ws(x.as_ref(), &mut ws);
            let y = ws.activations[depth - 1][0];
            let err = y - t;
            loss += err.abs();
            let dy = if err > 0.0 {
                1.0 / n
            } else if err < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
            let out = &mut ws.deltas[depth - 1];
            out.iter_mut().for_each(|d| *d = 0.0);
            out[0] = dy * (1.0 - y * y);
            self.backward(&mut ws, grad);
        }
        loss / n
    }

    /// Accumulates parameter gradients given output-layer deltas (already
    /// multiplied by the activation derivative).
    fn backward(&self, ws: &mut Workspace, grad: &mut [f64]) {
        let offsets: Vec<usize> = self
            .sizes
            .windows(2)
            .scan(0, |acc, w| {
                let o = *acc;
                *acc += w[0] * w[1] + w[1];
                Some(o)
            })
            .collect();
        for l in (1..self.sizes.len()).rev() {
            let (n_in, n_out) = (self.sizes[l - 1], self.sizes[l]);
            let off = offsets[l - 1];
            let (lower, upper) = ws.deltas.split_at_mut(l);
            let delta = &upper[0];
            let input = &ws.activations[l - 1];
            for j in 0..n_out {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[off + j * n_in..off + (j + 1) * n_in];
                for (gi, a) in g.iter_mut().zip(input) {
                    *gi += d * a;
                }
                grad[off + n_in * n_out + j] += d;
            }
            if l > 1 {
                let weights = &self.params[off..off + n_in * n_out];
                let below = &mut lower[l - 1];
                below.iter_mut().for_each(|b| *b = 0.0);
                for j in 0..n_out {
                    let d = delta[j];
                    if d == 0.0 {
                        continue;
                    }
                    for (b, w) in below.iter_mut().zip(&weights[j * n_in..(j + 1) * n_in]) {
                        *b += w * d;
                    }
                }
                for (b, a) in below.iter_mut().zip(input) {
                    *b *= 1.0 - a * a;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[10, 8, 8, 8, 1]).unwrap();
        assert_eq!(net.forward(&[0.3; 10]), vec![0.0]);
    }

    #[test]
    fn parameter_layout_matches_sizes() {
        let net = Mlp::zeros(&[3, 4, 1]).unwrap();
        assert_eq!(net.params().len(), 3 * 4 + 4 + 4 + 1);
        assert!(Mlp::zeros(&[3]).is_err());
        assert!(Mlp::zeros(&[3, 0, 1]).is_err());
        assert!(Mlp::from_params(&[3, 4, 1], vec![0.0; 5]).is_err());
    }

    #[test]
    fn forward_matches_hand_computation() {
        // 2 -> 1 -> 1
        let net = Mlp::from_params(&[2, 1, 1], vec![0.5, -1.0, 0.1, 2.0, -0.3]).unwrap();
        let h = (0.5 * 0.4 - 1.0 * 0.2 + 0.1_f64).tanh();
        let y = (2.0 * h - 0.3_f64).tanh();
        assert!((net.forward(&[0.4, 0.2])[0] - y).abs() < 1e-15);
    }

    #[test]
    fn output_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::init(&[4, 16, 1], &mut rng).unwrap();
        net.params_mut().iter_mut().for_each(|p| *p *= 50.0);
        for i in 0..50 {
            let x = [i as f64, -(i as f64), 3.0, 1e3];
            assert!(net.forward(&x)[0].abs() <= 1.0);
        }
    }
}
