use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{add_bias, matmul, Activation, NodeId, Tape};
use super::tensor::TensorBuf;
use crate::error::{invalid, Error, Result};

/// Fully connected network over a flat parameter vector.
///
/// Parameter layout is layer-major; within a layer the `[in, out]` row-major
/// weight matrix precedes the `out` biases. Hidden layers apply the
/// activation, the output layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Parameter count of an MLP with the given layer widths.
pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl Mlp {
    /// Network with all parameters zero.
    pub fn zeros(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(invalid(
                "widths",
                format!("need at least two positive widths, got {widths:?}"),
            ));
        }
        let n = param_count(&widths);
        Ok(Self {
            widths,
            activation,
            params: vec![0.0; n],
        })
    }

    /// Uniform fan-in initialisation, `U(-1/√in, 1/√in)` for weights and biases.
    pub fn init<R: Rng + ?Sized>(
        widths: Vec<usize>,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(widths, activation)?;
        let mut offset = 0;
        for l in 0..net.layers() {
            let (fan_in, fan_out) = (net.widths[l], net.widths[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut net.params[offset..offset + (fan_in + 1) * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            offset += (fan_in + 1) * fan_out;
        }
        Ok(net)
    }

    pub fn from_params(
        widths: Vec<usize>,
        activation: Activation,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut net = Self::zeros(widths, activation)?;
        if params.len() != net.params.len() {
            return Err(Error::ShapeMismatch {
                context: "mlp parameters".into(),
                expected: vec![net.params.len()],
                got: vec![params.len()],
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Offsets of the weight matrix and bias vector of layer `l`.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let w = param_count(&self.widths[..=l]);
        (w, w + self.widths[l] * self.widths[l + 1])
    }

    fn weight(&self, l: usize) -> TensorBuf {
        let (w, b) = self.layer_offsets(l);
        TensorBuf::matrix(
            self.widths[l],
            self.widths[l + 1],
            self.params[w..b].to_vec(),
        )
        .expect("layout is consistent")
    }

    fn bias(&self, l: usize) -> TensorBuf {
        let (_, b) = self.layer_offsets(l);
        let n = self.widths[l + 1];
        TensorBuf::new(vec![n], self.params[b..b + n].to_vec()).expect("layout is consistent")
    }

    fn check_input(&self, input: &TensorBuf) -> Result<()> {
        if input.shape().len() != 2 || input.cols() != self.widths[0] {
            return Err(Error::ShapeMismatch {
                context: "mlp layer 0 input".into(),
                expected: vec![input.rows(), self.widths[0]],
                got: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass without recording.
    pub fn forward(&self, input: &TensorBuf) -> Result<TensorBuf> {
        self.check_input(input)?;
        let mut h = input.clone();
        for l in 0..self.layers() {
            let ctx = format!("mlp layer {l}");
            h = add_bias(&matmul(&h, &self.weight(l), &ctx)?, &self.bias(l), &ctx)?;
            if l + 1 < self.layers() {
                let act = self.activation;
                h.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
        Ok(h)
    }

    /// Forward pass recorded on `tape`, with parameters registered at
    /// `param_base + local offset`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        input: NodeId,
        param_base: usize,
    ) -> Result<NodeId> {
        self.check_input(tape.value(input))?;
        let mut h = input;
        for l in 0..self.layers() {
            let (wo, bo) = self.layer_offsets(l);
            let w = tape.param(param_base + wo, self.weight(l));
            let b = tape.param(param_base + bo, self.bias(l));
            h = tape.matmul(h, w)?;
            h = tape.add_bias(h, b)?;
            if l + 1 < self.layers() {
                h = tape.activation(h, self.activation)?;
            }
        }
        Ok(h)
    }
}

/// Records `net` on a fresh tape for `input`, returning the output value.
pub fn mlp_forward(net: &Mlp, input: &TensorBuf, tape: &mut Tape) -> Result<TensorBuf> {
    let x = tape.leaf(input.clone());
    let y = net.forward_tape(tape, x, 0)?;
    Ok(tape.value(y).clone())
}

/// Backpropagates `output_grad` from the last node of `tape` (an MLP output
/// recorded by [`mlp_forward`]) into a parameter gradient of length `n_params`.
pub fn backprop(tape: &mut Tape, output_grad: &TensorBuf, n_params: usize) -> Result<Vec<f64>> {
    let out = tape
        .last()
        .ok_or(Error::EmptyBatch("backprop on empty tape"))?;
    Ok(tape
        .backward(&[(out, output_grad)], n_params)?
        .into_params())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_count_matches_layout() {
        assert_eq!(param_count(&[3, 5, 2]), 4 * 5 + 6 * 2);
        let net = Mlp::zeros(vec![3, 5, 2], Activation::Silu).unwrap();
        assert_eq!(net.layer_offsets(1), (20, 30));
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut net = Mlp::zeros(vec![3, 4, 2], Activation::Tanh).unwrap();
        let (_, b) = net.layer_offsets(1);
        net.params_mut()[b] = 0.7;
        net.params_mut()[b + 1] = -1.5;
        let x = TensorBuf::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 9.0]]).unwrap();
        let y = net.forward(&x).unwrap();
        for r in y.iter_rows() {
            assert_eq!(r, &[0.7, -1.5]);
        }
    }

    #[test]
    fn identity_layer() {
        let net = Mlp::from_params(
            vec![2, 2],
            Activation::Silu,
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        let x = TensorBuf::from_rows(&[[0.25, -4.0]]).unwrap();
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn shape_error_names_layer() {
        let net = Mlp::zeros(vec![3, 2], Activation::Silu).unwrap();
        let err = net.forward(&TensorBuf::zeros(&[1, 4])).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn tape_and_plain_forward_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let net = Mlp::init(vec![3, 8, 8, 2], Activation::Silu, &mut rng).unwrap();
        let x = TensorBuf::from_rows(&[[0.1, 0.2, 0.3], [-1.0, 2.0, 0.5]]).unwrap();
        let mut tape = Tape::new();
        assert_eq!(
            mlp_forward(&net, &x, &mut tape).unwrap(),
            net.forward(&x).unwrap()
        );
    }
}
