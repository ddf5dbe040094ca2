use rand::Rng;

use crate::error::{DiffError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParameterStore;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

/// A stack of dense layers with an activation between layers (not after the
/// last one), optionally followed by layer norm and a residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input_width: usize,
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub output_layer_norm: bool,
    pub output_residual: bool,
}

impl MlpSpec {
    pub fn new(input_width: usize, layer_widths: &[usize]) -> Self {
        Self {
            input_width,
            layer_widths: layer_widths.to_vec(),
            activation: Activation::Relu,
            output_layer_norm: false,
            output_residual: false,
        }
    }

    pub fn with_layer_norm(mut self) -> Self {
        self.output_layer_norm = true;
        self
    }

    pub fn with_residual(mut self) -> Self {
        self.output_residual = true;
        self
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.is_empty() || self.layer_widths.contains(&0) || self.input_width == 0 {
            return Err(DiffError::Config(format!(
                "mlp needs at least one layer of positive width: {self:?}"
            )));
        }
        if self.output_residual && self.input_width != self.output_width() {
            return Err(DiffError::Config(format!(
                "residual mlp needs input width {} == output width {}",
                self.input_width,
                self.output_width()
            )));
        }
        Ok(())
    }
}

/// Initializes `{prefix}.{i}.w/b` and, if requested, `{prefix}.ln.g/b`.
pub fn init_mlp<T: Real>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    spec: &MlpSpec,
    rng: &mut impl Rng,
) -> Result<()> {
    spec.validate()?;
    let mut fan_in = spec.input_width;
    for (i, &w) in spec.layer_widths.iter().enumerate() {
        store.init_linear(&format!("{prefix}.{i}"), fan_in, w, rng);
        fan_in = w;
    }
    if spec.output_layer_norm {
        let n = spec.output_width();
        store.insert(format!("{prefix}.ln.g"), Tensor::full(&[n], T::one()));
        store.insert(format!("{prefix}.ln.b"), Tensor::zeros(&[n]));
    }
    Ok(())
}

/// Runs the MLP named `prefix` on `x: [n, input_width]`.
pub fn forward_mlp<T: Real>(
    g: &mut Graph<T>,
    params: &ParameterStore<T>,
    prefix: &str,
    spec: &MlpSpec,
    x: Var,
) -> Result<Var> {
    spec.validate()?;
    let mut h = x;
    let last = spec.layer_widths.len() - 1;
    for i in 0..=last {
        let w = g.param(params, &format!("{prefix}.{i}.w"))?;
        let b = g.param(params, &format!("{prefix}.{i}.b"))?;
        let expected = g.shape(w)[0];
        let got = g.value(h).cols();
        if g.value(h).rank() != 2 || expected != got {
            return Err(DiffError::Dimension {
                layer: format!("{prefix}.{i}"),
                expected,
                got,
            });
        }
        h = g.linear(h, w, b)?;
        if i < last {
            h = match spec.activation {
                Activation::Relu => g.relu(h),
            };
        }
    }
    if spec.output_layer_norm {
        let gamma = g.param(params, &format!("{prefix}.ln.g"))?;
        let beta = g.param(params, &format!("{prefix}.ln.b"))?;
        h = g.layer_norm(h, gamma, beta)?;
    }
    if spec.output_residual {
        h = g.add(h, x)?;
    }
    Ok(h)
}
