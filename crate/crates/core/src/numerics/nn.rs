use serde::{Deserialize, Serialize};

use super::rng::Rng;
use super::tape::{Activation, ForwardRecord, Tape, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// One affine layer followed by a pointwise activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub activation: Activation,
}

/// Parameters of a fully connected network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub layers: Vec<Layer>,
}

/// Gradients aligned with [`NetParams::params`]: `[w0, b0, w1, b1, ...]`.
pub type ParamGrads = Vec<Tensor>;

impl NetParams {
    /// Glorot-uniform MLP with the given layer widths. Hidden layers use
    /// `hidden`, the last layer uses `output`.
    pub fn mlp(widths: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fi, fo) = (widths[i], widths[i + 1]);
                let a = (6.0 / (fi + fo) as f64).sqrt();
                let w = (0..fi * fo).map(|_| rng.uniform_range(-a, a)).collect();
                Layer {
                    weight: Tensor::new(vec![fi, fo], w).expect("consistent"),
                    bias: Tensor::zeros(&[fo]),
                    activation: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    /// Single affine layer with identity output.
    pub fn affine(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.len() != weight.cols() {
            return Err(shape_err(
                "NetParams::affine",
                format!("bias of len {}", weight.cols()),
                bias.len(),
            ));
        }
        Ok(Self {
            layers: vec![Layer {
                weight,
                bias,
                activation: Activation::Identity,
            }],
        })
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Records the network applied to `x` using previously bound parameters.
    pub fn forward_with(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let hv = tape.value(h);
            if hv.shape().len() != 2 || hv.cols() != layer.weight.rows() {
                return Err(shape_err(
                    format!("layer {i} input"),
                    format!("[n, {}]", layer.weight.rows()),
                    format!("{:?}", hv.shape()),
                ));
            }
            let a = tape.affine(h, params[2 * i], params[2 * i + 1])?;
            h = match layer.activation {
                Activation::Identity => a,
                act => tape.activation(a, act),
            };
        }
        Ok(h)
    }

    /// Tape-free evaluation; numerically identical to the recorded path.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if h.shape().len() != 2 || h.cols() != layer.weight.rows() {
                return Err(shape_err(
                    format!("layer {i} input"),
                    format!("[n, {}]", layer.weight.rows()),
                    format!("{:?}", h.shape()),
                ));
            }
            let mut a = h.matmul(&layer.weight)?;
            let out = layer.weight.cols();
            for r in a.data_mut().chunks_mut(out) {
                for (v, b) in r.iter_mut().zip(layer.bias.data()) {
                    *v += b;
                }
            }
            if layer.activation != Activation::Identity {
                let act = layer.activation;
                for v in a.data_mut() {
                    *v = act.apply(*v);
                }
            }
            h = a;
        }
        Ok(h)
    }

    /// Clamps every parameter into `[-bound, bound]`.
    pub fn clip(&mut self, bound: f64) {
        for p in self.params_mut() {
            for v in p.data_mut() {
                *v = v.clamp(-bound, bound);
            }
        }
    }
}

/// Collects parameter gradients from a backward sweep.
pub fn collect_grads(adj: &super::tape::Adjoints, params: &[Var]) -> ParamGrads {
    params.iter().map(|&p| adj.wrt(p)).collect()
}

/// Evaluates `net` on `input`, recording onto `tape` for a later [`backward`].
pub fn forward(net: &NetParams, input: &Tensor, tape: &mut Tape) -> Result<Tensor> {
    let params = net.bind(tape);
    let x = tape.leaf(input.clone());
    let out = net.forward_with(tape, &params, x)?;
    tape.last_forward = Some(ForwardRecord {
        input: x,
        output: out,
        params,
    });
    Ok(tape.value(out).clone())
}

/// Gradients of `<seed, output>` with respect to the parameters and the
/// input of the last [`forward`] recorded on `tape`.
pub fn backward(tape: &Tape, seed_adjoint: &Tensor) -> Result<(ParamGrads, Tensor)> {
    let rec = tape
        .last_forward
        .as_ref()
        .ok_or_else(|| Error::Usage("backward called before forward".into()))?;
    let adj = tape.backward(rec.output, seed_adjoint)?;
    Ok((collect_grads(&adj, &rec.params), adj.wrt(rec.input)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_affine_layer() {
        let net = NetParams::affine(Tensor::matrix(1, 1, vec![2.0]).unwrap(), Tensor::vector(vec![1.0])).unwrap();
        let mut tape = Tape::new();
        let y = forward(&net, &Tensor::matrix(1, 1, vec![3.0]).unwrap(), &mut tape).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn zero_weight_net_returns_bias() {
        let mut net = NetParams::mlp(&[3, 4, 2], Activation::Identity, Activation::Identity, &mut Rng::new(0));
        for l in &mut net.layers {
            l.weight = Tensor::zeros(l.weight.shape());
        }
        net.layers[1].bias = Tensor::vector(vec![0.5, -1.5]);
        let y = net
            .eval(&Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap())
            .unwrap();
        assert_eq!(y.data(), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn output_shape_contract() {
        let mut rng = Rng::new(5);
        let net = NetParams::mlp(&[2, 16, 16, 1], Activation::LEAKY, Activation::Identity, &mut rng);
        let x = rng.normal_matrix(8, 2);
        let mut tape = Tape::new();
        let y = forward(&net, &x, &mut tape).unwrap();
        assert_eq!(y.shape(), &[8, 1]);
        assert_eq!(y, net.eval(&x).unwrap());
    }

    #[test]
    fn shape_error_names_layer() {
        let net = NetParams::mlp(&[2, 4, 1], Activation::Tanh, Activation::Identity, &mut Rng::new(0));
        let err = net.eval(&Tensor::zeros(&[3, 5])).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn backward_before_forward_is_usage_error() {
        let tape = Tape::new();
        assert!(matches!(backward(&tape, &Tensor::scalar(1.0)), Err(Error::Usage(_))));
    }

    #[test]
    fn linear_net_input_grad_is_weight() {
        let net = NetParams::affine(
            Tensor::matrix(2, 1, vec![0.7, -1.3]).unwrap(),
            Tensor::vector(vec![0.2]),
        )
        .unwrap();
        let mut rng = Rng::new(9);
        let x = rng.normal_matrix(5, 2);
        let mut tape = Tape::new();
        forward(&net, &x, &mut tape).unwrap();
        let (_, gx) = backward(&tape, &Tensor::full(&[5, 1], 1.0)).unwrap();
        for r in gx.iter_rows() {
            assert_eq!(r, &[0.7, -1.3]);
        }
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let mut rng = Rng::new(2);
        let net = NetParams::mlp(&[2, 8, 1], Activation::Tanh, Activation::Identity, &mut rng);
        let x = rng.normal_matrix(4, 2);
        let mut tape = Tape::new();
        forward(&net, &x, &mut tape).unwrap();
        let (pg, gx) = backward(&tape, &Tensor::zeros(&[4, 1])).unwrap();
        assert!(pg.iter().all(|g| g.max_abs() == 0.0));
        assert_eq!(gx.max_abs(), 0.0);
    }
}
