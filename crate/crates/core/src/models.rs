//! Discriminator and generator networks, the analytic optimal
//! discriminator, and generator distillation.

use crate::distributions::GaussianMixture;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{collect_grads, optimizer_step, Activation, NetParams, OptimizerState, Rng, Tape, Tensor};

/// Anything that yields a scalar field and its input gradient.
pub trait Critic: Sync {
    fn values_and_input_grads(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)>;
}

/// Logit-scale discriminator `D(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub net: NetParams,
    pub opt: OptimizerState,
}

impl Discriminator {
    /// Leaky-ReLU MLP over `widths` (last must be 1), trained with Adam.
    pub fn new(widths: &[usize], lr: f64, rng: &mut Rng) -> Self {
        assert_eq!(widths.last(), Some(&1), "discriminator output width must be 1");
        let net = NetParams::mlp(widths, Activation::LEAKY, Activation::Identity, rng);
        let opt = OptimizerState::adam(lr, &net);
        Self { net, opt }
    }

    pub fn from_net(net: NetParams, opt: OptimizerState) -> Result<Self> {
        if net.output_width() != 1 {
            return Err(shape_err("discriminator output", 1, net.output_width()));
        }
        Ok(Self { net, opt })
    }

    pub fn dim(&self) -> usize {
        self.net.input_width()
    }

    pub fn values(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.net.eval(x)?.into_data())
    }

    pub(crate) fn apply_grads(&mut self, grads: &[Tensor]) -> Result<()> {
        optimizer_step(&mut self.net, grads, &mut self.opt)
    }
}

/// Raw `D(x)` and `grad_x D(x)` for every row of `x`.
pub fn disc_value_and_input_grad(d: &Discriminator, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let mut tape = Tape::new();
    let params = d.net.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let out = d.net.forward_with(&mut tape, &params, xv)?;
    let values = tape.value(out).data().to_vec();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discriminator output".into()));
    }
    let adj = tape.backward(out, &Tensor::full(&[x.rows(), 1], 1.0))?;
    Ok((values, adj.wrt(xv)))
}

impl Critic for Discriminator {
    fn values_and_input_grads(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        disc_value_and_input_grad(self, x)
    }
}

/// One Adam step on `mean softplus(-D(real)) + mean softplus(D(fake))`.
/// Returns the loss before the step.
pub fn logistic_disc_update(d: &mut Discriminator, real: &Tensor, fake: &Tensor) -> Result<f64> {
    if real.rows() == 0 || fake.rows() == 0 {
        return Err(Error::Invalid("logistic_disc_update needs non-empty batches".into()));
    }
    let mut tape = Tape::new();
    let params = d.net.bind(&mut tape);
    let xr = tape.leaf(real.clone());
    let xf = tape.leaf(fake.clone());
    let dr = d.net.forward_with(&mut tape, &params, xr)?;
    let df = d.net.forward_with(&mut tape, &params, xf)?;
    let neg = tape.scale(dr, -1.0);
    let lr = tape.activation(neg, Activation::Softplus);
    let lf = tape.activation(df, Activation::Softplus);
    let mr = tape.mean(lr);
    let mf = tape.mean(lf);
    let loss = tape.add(mr, mf)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("logistic discriminator loss".into()));
    }
    let adj = tape.backward(loss, &Tensor::scalar(1.0))?;
    d.apply_grads(&collect_grads(&adj, &params))?;
    Ok(value)
}

/// Generator `G(z)` from latent width `k` to data width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub net: NetParams,
    pub latent_dim: usize,
    pub opt: OptimizerState,
}

impl Generator {
    /// Leaky-ReLU hidden layers, linear output, Adam.
    pub fn new(widths: &[usize], lr: f64, rng: &mut Rng) -> Self {
        let net = NetParams::mlp(widths, Activation::LEAKY, Activation::Identity, rng);
        let opt = OptimizerState::adam(lr, &net);
        Self {
            latent_dim: widths[0],
            net,
            opt,
        }
    }

    pub fn from_net(net: NetParams, opt: OptimizerState) -> Self {
        Self {
            latent_dim: net.input_width(),
            net,
            opt,
        }
    }

    pub fn dim(&self) -> usize {
        self.net.output_width()
    }

    pub fn latents(&self, n: usize, rng: &mut Rng) -> Tensor {
        rng.normal_matrix(n, self.latent_dim)
    }

    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        self.net.eval(z)
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Tensor> {
        let z = self.latents(n, rng);
        self.generate(&z)
    }

    pub(crate) fn apply_grads(&mut self, grads: &[Tensor]) -> Result<()> {
        optimizer_step(&mut self.net, grads, &mut self.opt)
    }
}

fn regression_loss(g: &Generator, z: &Tensor, targets: &Tensor) -> Result<f64> {
    let y = g.generate(z)?;
    let n = z.rows().max(1) as f64;
    let sq: f64 = y
        .data()
        .iter()
        .zip(targets.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(0.5 * sq / n)
}

/// One optimizer step on `mean_i 1/2 |G(z_i) - t_i|^2`; returns the pre-step loss.
pub(crate) fn distill_step(g: &mut Generator, z: &Tensor, targets: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let params = g.net.bind(&mut tape);
    let zv = tape.leaf(z.clone());
    let out = g.net.forward_with(&mut tape, &params, zv)?;
    let t = tape.leaf(targets.clone());
    let diff = tape.sub(out, t)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    let loss = tape.scale(total, 0.5 / z.rows() as f64);
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("distillation loss".into()));
    }
    let adj = tape.backward(loss, &Tensor::scalar(1.0))?;
    g.apply_grads(&collect_grads(&adj, &params))?;
    Ok(value)
}

/// Regresses `G` onto `targets` for `steps` full-batch optimizer steps and
/// returns the loss after the last step.
pub fn distill_generator(g: &mut Generator, z: &Tensor, targets: &Tensor, steps: usize) -> Result<f64> {
    if z.rows() != targets.rows() {
        return Err(shape_err("distill_generator batch", z.rows(), targets.rows()));
    }
    if z.cols() != g.latent_dim || targets.cols() != g.dim() {
        return Err(shape_err(
            "distill_generator widths",
            format!("z [n, {}] and targets [n, {}]", g.latent_dim, g.dim()),
            format!("{:?} and {:?}", z.shape(), targets.shape()),
        ));
    }
    for _ in 0..steps {
        distill_step(g, z, targets)?;
    }
    regression_loss(g, z, targets)
}

/// `D*(x) = log p_*(x) - log p_g(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticDiscriminator {
    pub p_star: GaussianMixture,
    pub p_g: GaussianMixture,
}

impl AnalyticDiscriminator {
    pub fn new(p_star: GaussianMixture, p_g: GaussianMixture) -> Result<Self> {
        if p_star.dim() != p_g.dim() {
            return Err(shape_err("analytic discriminator dimensions", p_star.dim(), p_g.dim()));
        }
        Ok(Self { p_star, p_g })
    }
}

/// Log-ratio values and the score difference `score(p_*) - score(p_g)`.
pub fn analytic_disc(d: &AnalyticDiscriminator, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let ls = d.p_star.log_pdf(x)?;
    let lg = d.p_g.log_pdf(x)?;
    let values = ls.iter().zip(&lg).map(|(a, b)| a - b).collect();
    let grads = d.p_star.score(x)?.zip_map(&d.p_g.score(x)?, |a, b| a - b);
    Ok((values, grads))
}

impl Critic for AnalyticDiscriminator {
    fn values_and_input_grads(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        analytic_disc(self, x)
    }
}
