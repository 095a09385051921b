//! Multilayer perceptrons for the 2D encoder and decoder.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{check_dim, Error, Result};
use crate::tensor::Matrix;

/// Hidden layers in both networks.
pub const HIDDEN_LAYERS: usize = 3;

/// Fully connected layers with SiLU between them and a linear output.
/// Weights are stored `fan_in × fan_out` so a batch maps as `x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

impl Mlp {
    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            weights.push(Matrix::from_fn(w[0], w[1], |_, _| rng.random_range(-bound..bound)));
            biases.push(Matrix::from_fn(1, w[1], |_, _| rng.random_range(-bound..bound)));
        }
        Mlp { weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().cols()
    }

    /// Forward pass without recording a tape.
    pub fn forward_value(&self, x: &Matrix) -> Result<Matrix> {
        check_dim(self.input_dim(), x.cols())?;
        let last = self.weights.len() - 1;
        let mut h = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.matmul(w);
            for i in 0..z.rows() {
                for (v, bb) in z.row_mut(i).iter_mut().zip(b.as_slice()) {
                    *v += bb;
                }
            }
            if l != last {
                z = z.map(|v| v * sigmoid(v));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Names matching [`Mlp::tensors`], e.g. `enc.w0`, `enc.b0`.
    pub fn tensor_names(&self, prefix: &str) -> Vec<String> {
        (0..self.weights.len())
            .flat_map(|l| [format!("{prefix}.w{l}"), format!("{prefix}.b{l}")])
            .collect()
    }
}

#[inline]
fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// An [`Mlp`] bound to a tape. `leaves` always hold trainable copies of the
/// parameters; the forward pass reads `active`, which are detached copies
/// when the network is frozen.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub leaves: Vec<Var>,
    active: Vec<Var>,
}

impl MlpVars {
    pub fn bind(g: &mut Graph, net: &Mlp, live: bool) -> Self {
        let leaves: Vec<Var> = net.tensors().into_iter().map(|m| g.param(m)).collect();
        let active = if live {
            leaves.clone()
        } else {
            leaves.iter().map(|&v| g.detach(v)).collect()
        };
        MlpVars { leaves, active }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let layers = self.active.len() / 2;
        let mut h = x;
        for l in 0..layers {
            let z = g.matmul(h, self.active[2 * l]);
            let z = g.add(z, self.active[2 * l + 1]);
            h = if l + 1 == layers { z } else { g.silu(z) };
        }
        h
    }
}

/// `q_φ(z|x)`: data → (mean, log-variance).
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub net: Mlp,
    pub latent_dim: usize,
}

/// `p_θ(x|z)`: latent → reconstruction mean (unit-variance Gaussian).
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub net: Mlp,
}

fn layer_sizes(input: usize, width: usize, output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend(std::iter::repeat_n(width, HIDDEN_LAYERS));
    s.push(output);
    s
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, data_dim: usize, latent_dim: usize, width: usize) -> Self {
        Encoder {
            net: Mlp::new(rng, &layer_sizes(data_dim, width, 2 * latent_dim)),
            latent_dim,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// `(means, log_vars)`, each `n × D`.
    pub fn encode(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        if !x.all_finite() {
            return Err(Error::NonFinite("encoder input"));
        }
        let out = self.net.forward_value(x)?;
        let d = self.latent_dim;
        Ok((out.columns(0, d), out.columns(d, d)))
    }

    /// Tape version of [`Encoder::encode`].
    pub fn encode_graph(&self, g: &mut Graph, vars: &MlpVars, x: Var) -> (Var, Var) {
        let out = vars.forward(g, x);
        let d = self.latent_dim;
        (g.columns(out, 0, d), g.columns(out, d, d))
    }
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, latent_dim: usize, data_dim: usize, width: usize) -> Self {
        Decoder {
            net: Mlp::new(rng, &layer_sizes(latent_dim, width, data_dim)),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn decode(&self, z: &Matrix) -> Result<Matrix> {
        if !z.all_finite() {
            return Err(Error::NonFinite("decoder input"));
        }
        self.net.forward_value(z)
    }

    pub fn decode_graph(&self, g: &mut Graph, vars: &MlpVars, z: Var) -> Var {
        vars.forward(g, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::sample_reparam_graph;
    use crate::gradcheck::{central_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encode_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(&mut rng, 2, 3, 16);
        let x = Matrix::from_rows(&[vec![0.1, 0.2], vec![0.1, 0.2], vec![-1.0, 3.0]]);
        let (mu, lv) = enc.encode(&x).unwrap();
        assert_eq!(mu.shape(), (3, 3));
        assert_eq!(lv.shape(), (3, 3));
        assert_eq!(mu.row(0), mu.row(1));
        assert_eq!(lv.row(0), lv.row(1));
        assert!(enc.encode(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn decode_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dec = Decoder::new(&mut rng, 2, 2, 16);
        let z = Matrix::from_rows(&[vec![0.5, -0.5], vec![0.5, -0.5]]);
        let x = dec.decode(&z).unwrap();
        assert_eq!(x.shape(), (2, 2));
        assert_eq!(x.row(0), x.row(1));
        assert!(dec.decode(&Matrix::zeros(1, 5)).is_err());
    }

    #[test]
    fn tape_and_value_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::new(&mut rng, 2, 2, 8);
        let x = Matrix::from_fn(5, 2, |i, j| (i as f64 - 2.0) * 0.3 + j as f64);
        let mut g = Graph::new();
        let vars = MlpVars::bind(&mut g, &enc.net, true);
        let xv = g.constant(x.clone());
        let (mu, lv) = enc.encode_graph(&mut g, &vars, xv);
        let (m2, l2) = enc.encode(&x).unwrap();
        assert_eq!(g.value(mu), &m2);
        assert_eq!(g.value(lv), &l2);
    }

    fn flat(net: &Mlp) -> Matrix {
        let v: Vec<f64> = net.tensors().iter().flat_map(|m| m.as_slice().to_vec()).collect();
        Matrix::row_vector(&v)
    }

    fn unflat(net: &Mlp, p: &Matrix) -> Mlp {
        let mut out = net.clone();
        let mut off = 0;
        for t in out.tensors_mut() {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&p.as_slice()[off..off + n]);
            off += n;
        }
        out
    }

    #[test]
    fn encoder_mean_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::new(&mut rng, 2, 1, 2);
        let x = Matrix::from_rows(&[vec![0.4, -0.8], vec![1.1, 0.3]]);
        let mut g = Graph::new();
        let vars = MlpVars::bind(&mut g, &enc.net, true);
        let xv = g.constant(x.clone());
        let (mu, _) = enc.encode_graph(&mut g, &vars, xv);
        let loss = g.sum_all(mu);
        let grads = g.backward(loss);
        let analytic: Vec<f64> = vars.leaves.iter().flat_map(|&v| grads.wrt(v).into_vec()).collect();
        let numeric = central_difference(&flat(&enc.net), 1e-6, |p| {
            let e = Encoder { net: unflat(&enc.net, p), latent_dim: 1 };
            e.encode(&x).unwrap().0.sum()
        });
        let err = relative_error(&Matrix::row_vector(&analytic), &numeric);
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dec = Decoder::new(&mut rng, 2, 2, 2);
        let z = Matrix::from_rows(&[vec![0.4, -0.8], vec![-1.1, 0.3]]);
        let w = Matrix::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5]]);
        let mut g = Graph::new();
        let vars = MlpVars::bind(&mut g, &dec.net, true);
        let zv = g.constant(z.clone());
        let out = dec.decode_graph(&mut g, &vars, zv);
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        let analytic: Vec<f64> = vars.leaves.iter().flat_map(|&v| grads.wrt(v).into_vec()).collect();
        let numeric = central_difference(&flat(&dec.net), 1e-6, |p| {
            let d = Decoder { net: unflat(&dec.net, p) };
            d.decode(&z).unwrap().zip_map(&w, |a, b| a * b).sum()
        });
        let err = relative_error(&Matrix::row_vector(&analytic), &numeric);
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn end_to_end_gradient_through_reparameterization() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = Encoder::new(&mut rng, 2, 2, 8);
        let dec = Decoder::new(&mut rng, 2, 2, 8);
        let x = Matrix::from_rows(&[vec![0.5, -0.2], vec![-1.0, 1.5], vec![0.1, 0.1]]);
        let noise = crate::distributions::standard_normal(&mut rng, 3, 2);
        let loss_of = |enc: &Encoder, dec: &Decoder| -> f64 {
            let (mu, lv) = enc.encode(&x).unwrap();
            let z = Matrix::from_fn(3, 2, |i, j| mu.get(i, j) + (0.5 * lv.get(i, j)).exp() * noise.get(i, j));
            let r = dec.decode(&z).unwrap();
            0.5 * r.zip_map(&x, |a, b| (a - b) * (a - b)).sum()
        };
        let mut g = Graph::new();
        let ev = MlpVars::bind(&mut g, &enc.net, true);
        let dv = MlpVars::bind(&mut g, &dec.net, true);
        let xv = g.constant(x.clone());
        let (mu, lv) = enc.encode_graph(&mut g, &ev, xv);
        let z = sample_reparam_graph(&mut g, mu, lv, &noise, 1);
        let r = dec.decode_graph(&mut g, &dv, z);
        let diff = g.sub(r, xv);
        let sq = g.square(diff);
        let s = g.sum_all(sq);
        let loss = g.scale(s, 0.5);
        assert!((g.scalar(loss) - loss_of(&enc, &dec)).abs() < 1e-12);
        let grads = g.backward(loss);

        let enc_an: Vec<f64> = ev.leaves.iter().flat_map(|&v| grads.wrt(v).into_vec()).collect();
        let enc_fd = central_difference(&flat(&enc.net), 1e-3, |p| {
            loss_of(&Encoder { net: unflat(&enc.net, p), latent_dim: 2 }, &dec)
        });
        let err = relative_error(&Matrix::row_vector(&enc_an), &enc_fd);
        assert!(err <= 1e-3, "encoder {err}");

        let dec_an: Vec<f64> = dv.leaves.iter().flat_map(|&v| grads.wrt(v).into_vec()).collect();
        let dec_fd = central_difference(&flat(&dec.net), 1e-3, |p| {
            loss_of(&enc, &Decoder { net: unflat(&dec.net, p) })
        });
        let err = relative_error(&Matrix::row_vector(&dec_an), &dec_fd);
        assert!(err <= 1e-3, "decoder {err}");
    }

    #[test]
    fn frozen_network_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dec = Decoder::new(&mut rng, 2, 2, 4);
        let mut g = Graph::new();
        let vars = MlpVars::bind(&mut g, &dec.net, false);
        let z = g.param(&Matrix::row_vector(&[0.3, 0.1]));
        let out = dec.decode_graph(&mut g, &vars, z);
        let loss = g.sum_all(out);
        let grads = g.backward(loss);
        assert!(vars.leaves.iter().all(|&v| grads.get(v).is_none()));
        assert!(grads.wrt(z).max_abs() > 0.0);
    }
}
