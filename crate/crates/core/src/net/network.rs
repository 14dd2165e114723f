use std::ops::Range;

use super::layer::Layer;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Sequential composition of layers. Skip layers nest further networks.
///
/// Parameters are ordered depth-first: layer by layer, weights before biases,
/// with a skip layer's sub-network expanded in place.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

/// Activations recorded by a forward pass.
///
/// `activations[0]` is the input and `activations[i + 1]` the output of layer
/// `i`. Skip layers keep the trace of their sub-network as well.
#[derive(Clone, Debug)]
pub struct Trace {
    activations: Vec<Tensor>,
    inner: Vec<Option<Trace>>,
}

impl Trace {
    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }

    pub fn input(&self) -> &Tensor {
        &self.activations[0]
    }

    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("trace holds at least the input")
    }

    /// Input of layer `i`.
    pub fn layer_input(&self, i: usize) -> &Tensor {
        &self.activations[i]
    }

    /// Sub-network trace of layer `i` when it is a skip layer.
    pub fn inner(&self, i: usize) -> Option<&Trace> {
        self.inner[i].as_ref()
    }

    pub fn into_output(mut self) -> Tensor {
        self.activations.pop().expect("trace holds at least the input")
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Flat parameter range owned by each top-level layer.
    pub fn param_ranges(&self) -> Vec<Range<usize>> {
        let mut at = 0;
        self.layers
            .iter()
            .map(|l| {
                let r = at..at + l.param_count();
                at = r.end;
                r
            })
            .collect()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            l.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!("network has {} parameters, got {}", self.param_count(), params.len())));
        }
        let mut at = 0;
        for l in &mut self.layers {
            at += l.read_params(&params[at..]);
        }
        Ok(())
    }

    pub fn init(&mut self, rng: &mut Rng) {
        for l in &mut self.layers {
            l.init(rng);
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers.iter().try_fold(input.to_vec(), |shape, l| l.output_shape(&shape))
    }

    /// Runs every layer and records `x_0 .. x_L`.
    pub fn forward(&self, x: &Tensor) -> Result<Trace> {
        x.ensure_finite("network input")?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut inner = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, sub) = layer.forward(&activations[i])?;
            if !y.is_finite() {
                return Err(Error::Numeric(format!("output of layer {i} ({:?})", layer.kind())));
            }
            activations.push(y);
            inner.push(sub);
        }
        Ok(Trace { activations, inner })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.into_output())
    }

    /// Reverse pass: `(dLoss/dθ, dLoss/dx)` given `dLoss/dx_L`.
    pub fn backward(&self, trace: &Trace, grad_out: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        if grad_out.shape() != trace.output().shape() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} vs output {:?}",
                grad_out.shape(),
                trace.output().shape()
            )));
        }
        grad_out.ensure_finite("upstream gradient")?;
        self.backward_inner(trace, grad_out, true)
    }

    pub(crate) fn backward_inner(
        &self,
        trace: &Trace,
        grad_out: &Tensor,
        want_params: bool,
    ) -> Result<(Vec<f64>, Tensor)> {
        self.backward_from(trace, self.layers.len(), grad_out, want_params)
    }

    /// Reverse pass starting from the gradient w.r.t. `x_end`, i.e. through
    /// layers `end-1 .. 0`. Parameter gradients of later layers stay zero.
    pub(crate) fn backward_from(
        &self,
        trace: &Trace,
        end: usize,
        grad: &Tensor,
        want_params: bool,
    ) -> Result<(Vec<f64>, Tensor)> {
        let ranges = self.param_ranges();
        let mut grads = if want_params { vec![0.0; self.param_count()] } else { Vec::new() };
        let mut g = grad.clone();
        for (i, layer) in self.layers[..end].iter().enumerate().rev() {
            let (dp, dx) = layer.vjp(&trace.activations[i], trace.inner[i].as_ref(), &g, want_params)?;
            if want_params && !dp.is_empty() {
                grads[ranges[i].clone()].copy_from_slice(&dp);
            }
            g = dx;
        }
        Ok((grads, g))
    }

    /// `J_θᵢ f⁽ⁱ⁾(x)ᵀ v` for layer `i`. Empty for layers without parameters.
    pub fn param_vjp(&self, i: usize, x: &Tensor, v: &Tensor) -> Result<Vec<f64>> {
        let layer = self.layer(i)?;
        if layer.param_count() == 0 {
            return Ok(Vec::new());
        }
        Ok(layer.vjp(x, None, v, true)?.0)
    }

    /// `J_x f⁽ⁱ⁾(x)ᵀ v` for layer `i`.
    pub fn input_vjp(&self, i: usize, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        Ok(self.layer(i)?.vjp(x, None, v, false)?.1)
    }

    fn layer(&self, i: usize) -> Result<&Layer> {
        self.layers
            .get(i)
            .ok_or_else(|| Error::Structure(format!("layer {i} out of range ({} layers)", self.layers.len())))
    }
}
