use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Logits are clamped here before `tanh`; beyond it `tanh` rounds to ±1 in f64.
const TANH_LOGIT_LIMIT: f64 = 18.0;

/// How the last affine layer's output is turned into the network output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Linear,
    /// `tanh(z)`, output strictly inside (-1, 1) even in floating point.
    Tanh,
    /// Output width `2d`: the first `d` columns are a mean, the last `d` a
    /// log standard deviation squashed smoothly into `[log_std_min, log_std_max]`.
    Gaussian {
        log_std_min: f64,
        log_std_max: f64,
    },
}

impl Head {
    fn apply(&self, raw: &Array2<f64>) -> Array2<f64> {
        match *self {
            Head::Linear => raw.clone(),
            Head::Tanh => raw.mapv(|z| z.clamp(-TANH_LOGIT_LIMIT, TANH_LOGIT_LIMIT).tanh()),
            Head::Gaussian {
                log_std_min,
                log_std_max,
            } => {
                let d = raw.ncols() / 2;
                let half = 0.5 * (log_std_max - log_std_min);
                let mut out = raw.clone();
                out.slice_mut(ndarray::s![.., d..])
                    .mapv_inplace(|z| log_std_min + half * (z.tanh() + 1.0));
                out
            }
        }
    }

    fn backward(
        &self,
        raw: &Array2<f64>,
        out: &Array2<f64>,
        upstream: ArrayView2<f64>,
    ) -> Array2<f64> {
        match *self {
            Head::Linear => upstream.to_owned(),
            Head::Tanh => {
                let mut dz = upstream.to_owned();
                ndarray::Zip::from(&mut dz)
                    .and(out)
                    .and(raw)
                    .for_each(|g, &y, &z| {
                        *g *= if z.abs() > TANH_LOGIT_LIMIT {
                            0.0
                        } else {
                            1.0 - y * y
                        };
                    });
                dz
            }
            Head::Gaussian {
                log_std_min,
                log_std_max,
            } => {
                let d = raw.ncols() / 2;
                let half = 0.5 * (log_std_max - log_std_min);
                let mut dz = upstream.to_owned();
                dz.slice_mut(ndarray::s![.., d..]).zip_mut_with(
                    &raw.slice(ndarray::s![.., d..]),
                    |g, &z| {
                        let t = z.tanh();
                        *g *= half * (1.0 - t * t);
                    },
                );
                dz
            }
        }
    }

    /// Inverse of the log-std squash; used to pin a head to a given log-std.
    pub fn raw_for_log_std(&self, log_std: f64) -> Option<f64> {
        match *self {
            Head::Gaussian {
                log_std_min,
                log_std_max,
            } => {
                let y = 2.0 * (log_std - log_std_min) / (log_std_max - log_std_min) - 1.0;
                (y.abs() < 1.0).then(|| y.atanh())
            }
            _ => None,
        }
    }
}

/// Affine layer `y = W x + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Fully connected network. The activation sits between hidden layers; the
/// head is applied to the last layer's output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub head: Head,
    version: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.activation == other.activation
            && self.head == other.head
    }
}

/// Intermediates recorded by [`Mlp::forward`] for a later [`Mlp::backward`].
#[derive(Clone, Debug)]
pub struct MlpTape {
    inputs: Vec<Array2<f64>>,
    raw: Array2<f64>,
    out: Array2<f64>,
    version: u64,
    shape: Vec<(usize, usize)>,
}

impl MlpTape {
    pub fn output(&self) -> &Array2<f64> {
        &self.out
    }
}

/// Gradient with the same layout as the network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<Linear>,
}

impl MlpGrad {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }
}

impl Mlp {
    /// Builds a network with layer widths `sizes` (input first, raw output
    /// last), initialized uniformly in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        activation: Activation,
        head: Head,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, activation, head)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.input_dim() as f64).sqrt();
            layer
                .weight
                .mapv_inplace(|_| rng.random_range(-bound..bound));
            layer.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], activation: Activation, head: Head) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        if matches!(head, Head::Gaussian { .. }) && !sizes[sizes.len() - 1].is_multiple_of(2) {
            return Err(Error::Config(
                "gaussian head needs an even output width".into(),
            ));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Linear::zeros(w[0], w[1]))
            .collect();
        Ok(Self {
            layers,
            activation,
            head,
            version: 0,
        })
    }

    /// Assembles a network from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Linear>, activation: Activation, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::dim(
                    format!("layer {} input", i + 1),
                    pair[0].output_dim(),
                    pair[1].input_dim(),
                ));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::dim(
                    format!("layer {i} bias"),
                    l.output_dim(),
                    l.bias.len(),
                ));
            }
        }
        Ok(Self {
            layers,
            activation,
            head,
            version: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Linear::output_dim));
        s
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn shape(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.output_dim(), l.input_dim()))
            .collect()
    }

    /// Forward pass over a batch (one row per sample), recording a tape.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, MlpTape)> {
        if input.ncols() != self.input_dim() {
            return Err(Error::dim("mlp input", self.input_dim(), input.ncols()));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = input.to_owned();
        let mut raw = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            inputs.push(h);
            if i == last {
                raw = Some(z);
                break;
            }
            match self.activation {
                Activation::Tanh => z.mapv_inplace(f64::tanh),
                Activation::Relu => z.mapv_inplace(|x| x.max(0.0)),
            }
            h = z;
        }
        let raw = raw.expect("at least one layer");
        let out = self.head.apply(&raw);
        let tape = MlpTape {
            inputs,
            raw,
            out: out.clone(),
            version: self.version,
            shape: self.shape(),
        };
        Ok((out, tape))
    }

    /// Forward pass without recording intermediates.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        if input.ncols() != self.input_dim() {
            return Err(Error::dim("mlp input", self.input_dim(), input.ncols()));
        }
        let last = self.layers.len() - 1;
        let mut h = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            if i < last {
                match self.activation {
                    Activation::Tanh => z.mapv_inplace(f64::tanh),
                    Activation::Relu => z.mapv_inplace(|x| x.max(0.0)),
                }
            }
            h = z;
        }
        Ok(self.head.apply(&h))
    }

    pub fn predict_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Usage(e.to_string()))?;
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    /// Backpropagates `upstream` (∂loss/∂output, one row per sample) and returns
    /// the parameter gradient plus ∂loss/∂input.
    pub fn backward(
        &self,
        tape: &MlpTape,
        upstream: ArrayView2<f64>,
    ) -> Result<(MlpGrad, Array2<f64>)> {
        if tape.version != self.version || tape.shape != self.shape() {
            return Err(Error::Usage(
                "tape does not belong to the current parameters".into(),
            ));
        }
        if upstream.dim() != tape.out.dim() {
            return Err(Error::dim(
                "mlp upstream rows",
                tape.out.nrows(),
                upstream.nrows(),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut dz = self.head.backward(&tape.raw, &tape.out, upstream);
        let mut d_input = None;
        for i in (0..self.layers.len()).rev() {
            let h_in = &tape.inputs[i];
            let weight = dz.t().dot(h_in).as_standard_layout().into_owned();
            let bias = dz.sum_axis(Axis(0));
            let dh = dz.dot(&self.layers[i].weight);
            grads.push(Linear { weight, bias });
            if i == 0 {
                d_input = Some(dh);
            } else {
                let mut next = dh;
                match self.activation {
                    Activation::Tanh => next.zip_mut_with(h_in, |g, &h| *g *= 1.0 - h * h),
                    Activation::Relu => next.zip_mut_with(h_in, |g, &h| {
                        if h <= 0.0 {
                            *g = 0.0
                        }
                    }),
                }
                dz = next;
            }
        }
        grads.reverse();
        Ok((
            MlpGrad { layers: grads },
            d_input.expect("at least one layer"),
        ))
    }

    /// Parameters flattened layer by layer: weight (row-major) then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim(
                "flat parameter vector",
                self.num_params(),
                flat.len(),
            ));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = flat[offset];
                offset += 1;
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Mutable parameter chunks paired with the matching gradient chunks.
    pub(crate) fn param_chunks_mut<'a>(
        &'a mut self,
        grad: &'a MlpGrad,
    ) -> impl Iterator<Item = (&'a mut [f64], &'a [f64])> + 'a {
        self.version += 1;
        self.layers.iter_mut().zip(&grad.layers).flat_map(|(l, g)| {
            [
                (
                    l.weight.as_slice_mut().expect("standard layout"),
                    g.weight.as_slice().expect("standard layout"),
                ),
                (
                    l.bias.as_slice_mut().expect("standard layout"),
                    g.bias.as_slice().expect("standard layout"),
                ),
            ]
        })
    }

    /// `self ← τ·source + (1-τ)·self`.
    pub fn polyak_from(&mut self, source: &Mlp, tau: f64) {
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            t.weight
                .zip_mut_with(&s.weight, |a, &b| *a = tau * b + (1.0 - tau) * *a);
            t.bias
                .zip_mut_with(&s.bias, |a, &b| *a = tau * b + (1.0 - tau) * *a);
        }
        self.version += 1;
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }

    /// Zeroes the last layer, making the raw output identically zero.
    pub fn zero_last_layer(&mut self) {
        let last = self.layers.last_mut().expect("at least one layer");
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        self.version += 1;
    }

    pub(crate) fn touch(&mut self) {
        self.version += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, GradCheckMode};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2], Activation::Tanh, Head::Linear).unwrap();
        let y = net.predict(array![[0.3, -1.2, 4.0]].view()).unwrap();
        assert_eq!(y, array![[0.0, 0.0]]);
    }

    #[test]
    fn identity_layer() {
        let mut net = Mlp::zeros(&[1, 1], Activation::Tanh, Head::Linear).unwrap();
        net.layers[0].weight[[0, 0]] = 1.0;
        assert_eq!(net.predict_one(&[0.7]).unwrap(), vec![0.7]);
    }

    #[test]
    fn two_layer_hand_evaluation() {
        let w1 = array![[0.5, -0.25], [1.5, 0.75], [-1.0, 2.0]];
        let b1 = array![0.1, -0.2, 0.05];
        let w2 = array![[0.3, -0.6, 0.9]];
        let b2 = array![0.25];
        let net = Mlp::from_layers(
            vec![
                Linear {
                    weight: w1,
                    bias: b1,
                },
                Linear {
                    weight: w2,
                    bias: b2,
                },
            ],
            Activation::Tanh,
            Head::Linear,
        )
        .unwrap();
        let (x0, x1) = (0.4_f64, -0.8_f64);
        let h0 = (0.5 * x0 - 0.25 * x1 + 0.1).tanh();
        let h1 = (1.5 * x0 + 0.75 * x1 - 0.2).tanh();
        let h2 = (-x0 + 2.0 * x1 + 0.05).tanh();
        let expected = 0.3 * h0 - 0.6 * h1 + 0.9 * h2 + 0.25;
        let y = net.predict_one(&[x0, x1]).unwrap();
        assert!((y[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let net = Mlp::zeros(&[3, 2], Activation::Tanh, Head::Linear).unwrap();
        assert!(matches!(
            net.forward(array![[1.0, 2.0]].view()),
            Err(Error::Dimension { .. })
        ));
        let bad = vec![Linear::zeros(2, 3), Linear::zeros(4, 1)];
        assert!(Mlp::from_layers(bad, Activation::Tanh, Head::Linear).is_err());
    }

    #[test]
    fn zero_net_gradients() {
        let net = Mlp::zeros(&[2, 3, 2], Activation::Tanh, Head::Linear).unwrap();
        let (_, tape) = net.forward(array![[1.0, -2.0]].view()).unwrap();
        let up = array![[0.7, -1.1]];
        let (g, _) = net.backward(&tape, up.view()).unwrap();
        assert!(g.layers[0].weight.iter().all(|&x| x == 0.0));
        assert_eq!(g.layers[1].bias, array![0.7, -1.1]);
    }

    #[test]
    fn single_linear_layer_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[3, 2], Activation::Tanh, Head::Linear, &mut rng).unwrap();
        let x = array![[0.5, -1.0, 2.0]];
        let (_, tape) = net.forward(x.view()).unwrap();
        let up = array![[1.5, -0.5]];
        let (g, _) = net.backward(&tape, up.view()).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert!((g.layers[0].weight[[o, i]] - up[[0, o]] * x[[0, i]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::new(&[2, 2], Activation::Tanh, Head::Linear, &mut rng).unwrap();
        let (_, tape) = net.forward(array![[1.0, 1.0]].view()).unwrap();
        let p = net.flat_params();
        net.set_flat_params(&p).unwrap();
        assert!(matches!(
            net.backward(&tape, array![[1.0, 1.0]].view()),
            Err(Error::Usage(_))
        ));
        let other = Mlp::new(&[2, 3, 2], Activation::Tanh, Head::Linear, &mut rng).unwrap();
        let (_, tape) = other.forward(array![[1.0, 1.0]].view()).unwrap();
        assert!(net.backward(&tape, array![[1.0, 1.0]].view()).is_err());
    }

    fn check_heads(head: Head, out: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::new(&[3, 8, 8, out], Activation::Tanh, head, &mut rng).unwrap();
        let x = array![[0.3, -0.7, 1.1], [-0.2, 0.4, 0.9]];
        let up = Array2::from_shape_fn((2, out), |(i, j)| 0.3 + 0.5 * i as f64 - 0.4 * j as f64);
        let loss = |p: &[f64]| {
            let mut n = net.clone();
            n.set_flat_params(p).unwrap();
            let (y, tape) = n.forward(x.view()).unwrap();
            let (g, _) = n.backward(&tape, up.view()).unwrap();
            ((&y * &up).sum(), g.flat())
        };
        let err =
            finite_diff_check(loss, &net.flat_params(), 1e-5, GradCheckMode::Coordinates).unwrap();
        assert!(err < 1e-4, "{head:?}: {err}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        check_heads(Head::Linear, 2);
        check_heads(Head::Tanh, 1);
        check_heads(
            Head::Gaussian {
                log_std_min: -5.0,
                log_std_max: 1.0,
            },
            4,
        );
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&[3, 6, 1], Activation::Tanh, Head::Tanh, &mut rng).unwrap();
        let x = [0.2, -0.5, 0.8];
        let loss = |p: &[f64]| {
            let v = ArrayView2::from_shape((1, 3), p).unwrap();
            let (y, tape) = net.forward(v).unwrap();
            let (_, dx) = net.backward(&tape, array![[1.0]].view()).unwrap();
            (y[[0, 0]], dx.into_raw_vec_and_offset().0)
        };
        let err = finite_diff_check(loss, &x, 1e-5, GradCheckMode::Coordinates).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gaussian_head_bounds_log_std() {
        let head = Head::Gaussian {
            log_std_min: -5.0,
            log_std_max: 1.0,
        };
        let raw = array![[0.0, -1e6], [0.0, 1e6], [0.0, 0.0]];
        let y = head.apply(&raw);
        assert!(y[[0, 1]] >= -5.0 && y[[1, 1]] <= 1.0);
        assert!((y[[2, 1]] + 2.0).abs() < 1e-12);
        let z = head.raw_for_log_std(0.0).unwrap();
        assert!(head.apply(&array![[0.0, z]])[[0, 1]].abs() < 1e-12);
    }
}
