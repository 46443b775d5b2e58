//! Sequential models built from [`LayerSpec`] lists.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{GridUpdatePolicy, Layer, LayerSpec, Mode};
use crate::tensor::Tensor;

/// Tape handles of every layer's parameters, in [`Layer::params`] order.
pub type Bindings = Vec<Vec<Var>>;

/// A feed-forward stack of layers.
#[derive(Debug, Clone)]
pub struct Model {
    pub name: String,
    /// Per-sample input shape, e.g. `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Parameter count of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    pub index: usize,
    pub kind: &'static str,
    /// Scalars actually stored and trained.
    pub exact: usize,
    /// Learnable-activation layers counted at `G + 2` per activation; equal
    /// to `exact` for every other kind.
    pub formula: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub layers: Vec<LayerCount>,
    pub exact: usize,
    pub formula: usize,
}

impl Model {
    /// Builds and shape-checks a model; initialization draws from `seed`.
    pub fn from_specs(name: impl Into<String>, input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs.iter().map(|s| s.build(&mut rng)).collect::<Result<Vec<_>>>()?;
        Self::from_layers(name, input_shape, layers)
    }

    pub fn from_layers(name: impl Into<String>, input_shape: &[usize], layers: Vec<Layer>) -> Result<Self> {
        let model = Self {
            name: name.into(),
            input_shape: input_shape.to_vec(),
            layers,
        };
        model.shapes()?;
        Ok(model)
    }

    /// Output shape of every layer for a batch of one, or the first
    /// chaining error annotated with the layer index.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = vec![1];
        shape.extend(&self.input_shape);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::Shape(format!("layer {i} ({}): {e}", layer.kind())))?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Total number of trainable scalars, by enumeration.
    pub fn scalar_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn count_parameters(&self) -> ParamCount {
        let layers: Vec<LayerCount> = self
            .layers
            .iter()
            .enumerate()
            .map(|(index, layer)| {
                let exact = layer.params().iter().map(|p| p.len()).sum();
                let formula = match layer.bank() {
                    Some(bank) => bank.activation_count() * (bank.grid.grid_size() + 2),
                    None => exact,
                };
                LayerCount {
                    index,
                    kind: layer.kind(),
                    exact,
                    formula,
                }
            })
            .collect();
        ParamCount {
            exact: layers.iter().map(|l| l.exact).sum(),
            formula: layers.iter().map(|l| l.formula).sum(),
            layers,
        }
    }

    /// Puts every parameter on the tape, as gradient-tracking leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bindings {
        self.layers
            .iter()
            .map(|layer| {
                layer
                    .params()
                    .into_iter()
                    .map(|p| {
                        if trainable {
                            tape.param(p)
                        } else {
                            tape.constant(p.clone())
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Runs every layer; returns each layer's output.
    pub fn forward(&self, tape: &mut Tape, x: Var, bindings: &[Vec<Var>], mode: Mode) -> Result<Vec<Var>> {
        if bindings.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "{} binding groups for {} layers",
                bindings.len(),
                self.layers.len()
            )));
        }
        let in_shape = tape.shape(x);
        if in_shape.len() != self.input_shape.len() + 1 || in_shape[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "model `{}` expects [B, {:?}], got {:?}",
                self.name, self.input_shape, in_shape
            )));
        }
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, (layer, params)) in self.layers.iter().zip(bindings).enumerate() {
            h = layer.forward(tape, h, params, mode).map_err(|e| match e {
                Error::Shape(m) => Error::Shape(format!("layer {i} ({}): {m}", layer.kind())),
                other => other,
            })?;
            outputs.push(h);
        }
        Ok(outputs)
    }

    /// Feeds each layer the input it saw in a training forward pass.
    pub fn observe(&mut self, tape: &Tape, x: Var, outputs: &[Var]) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let input = if i == 0 { x } else { outputs[i - 1] };
            layer.observe(tape.value(input))?;
        }
        Ok(())
    }

    /// Mean absolute output of every activation of every learnable-activation
    /// layer on this pass, one tensor per such layer.
    pub fn activation_l1(&self, tape: &mut Tape, x: Var, outputs: &[Var], bindings: &[Vec<Var>]) -> Result<Vec<Var>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { x } else { outputs[i - 1] };
            match layer {
                Layer::KanConv(l) => out.push(l.activation_l1(tape, input, &bindings[i])?),
                Layer::KanLinear(l) => out.push(l.activation_l1(tape, input, &bindings[i])?),
                _ => {}
            }
        }
        Ok(out)
    }

    /// Adds tape gradients into each parameter's `grad`.
    pub fn write_grads(&mut self, tape: &Tape, bindings: &[Vec<Var>]) -> Result<()> {
        for (layer, vars) in self.layers.iter_mut().zip(bindings) {
            for (p, &v) in layer.params_mut().into_iter().zip(vars) {
                tape.write_grad(v, p)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Evaluation-mode output for a batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bindings = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let outputs = self.forward(&mut tape, xv, &bindings, Mode::Eval)?;
        let last = *outputs
            .last()
            .ok_or_else(|| Error::Contract("model has no layers".into()))?;
        Ok(tape.value(last).clone())
    }

    /// Grid update of every learnable-activation layer; returns the indices
    /// of layers whose grid changed.
    pub fn grid_update(&mut self, policy: GridUpdatePolicy) -> Result<Vec<usize>> {
        let mut changed = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Some(bank) = layer.bank_mut() {
                if bank.grid_update(policy)? {
                    changed.push(i);
                }
            }
        }
        Ok(changed)
    }

    /// Drops every recorded input without touching the grids.
    pub fn reset_observers(&mut self) {
        for layer in &mut self.layers {
            if let Some(bank) = layer.bank_mut() {
                bank.observer.reset();
            }
        }
    }
}
