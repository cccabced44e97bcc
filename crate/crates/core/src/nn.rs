//! Parameter plumbing shared by the flow and the denoiser.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{DiffArray, Gradients, Padding, Tape, Var};

/// Whether a forward pass records parameters as trainable leaves or as
/// constants that never receive gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    Frozen,
}

/// Named tape variables for the parameters used in one forward pass.
#[derive(Default, Debug)]
pub struct Bindings<'t> {
    vars: Vec<(String, Var<'t>)>,
}

impl<'t> Bindings<'t> {
    pub fn new() -> Self {
        Self { vars: Vec::new() }
    }

    pub fn bind(&mut self, tape: &'t Tape, name: String, array: &DiffArray, mode: ParamMode) -> Var<'t> {
        let var = match mode {
            ParamMode::Trainable => tape.leaf(array),
            ParamMode::Frozen => tape.constant(array),
        };
        self.vars.push((name, var));
        var
    }

    pub fn get(&self, name: &str) -> Option<Var<'t>> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Adds each bound parameter's gradient into the matching array of `model`.
    pub fn accumulate_grads(&self, grads: &Gradients, model: &mut impl Parameterized) -> Result<()> {
        for (name, array) in model.parameters_mut() {
            match self.get(&name) {
                Some(var) => grads.accumulate_into(var, array)?,
                None => return Err(Error::Config(format!("parameter {name} was not bound in this pass"))),
            }
        }
        Ok(())
    }
}

/// A model whose trainable state is a flat list of named arrays.
pub trait Parameterized {
    fn parameters(&self) -> Vec<(String, &DiffArray)>;
    fn parameters_mut(&mut self) -> Vec<(String, &mut DiffArray)>;

    fn zero_grad(&mut self) {
        for (_, p) in self.parameters_mut() {
            p.zero_grad();
        }
    }

    fn set_trainable(&mut self, trainable: bool) {
        for (_, p) in self.parameters_mut() {
            p.set_requires_grad(trainable);
        }
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.numel()).sum()
    }

    /// Overwrites parameter values by name, checking shapes.
    fn load_parameters(&mut self, values: &[(String, DiffArray)]) -> Result<()> {
        let mut params = self.parameters_mut();
        if params.len() != values.len() {
            return Err(Error::Config(format!("expected {} parameter arrays, got {}", params.len(), values.len())));
        }
        for (name, p) in params.iter_mut() {
            let (_, v) = values
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if v.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_parameters",
                    lhs: p.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            p.data_mut().copy_from_slice(v.data());
        }
        Ok(())
    }
}

pub(crate) fn gaussian_array(shape: &[usize], std: f64, rng: &mut impl Rng) -> DiffArray {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    DiffArray::new(shape.to_vec(), data).expect("shape matches data")
}

/// A square-kernel convolution with per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: DiffArray,
    pub bias: DiffArray,
    pub padding: Padding,
}

impl Conv {
    /// Weights drawn from `N(0, 1/fan_in)`, zero bias.
    pub fn random(out_ch: usize, in_ch: usize, kernel: usize, padding: Padding, rng: &mut impl Rng) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        Self::random_with_std(out_ch, in_ch, kernel, padding, fan_in.recip().sqrt(), rng)
    }

    pub fn random_with_std(
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        padding: Padding,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: gaussian_array(&[out_ch, in_ch, kernel, kernel], std, rng).with_grad(),
            bias: DiffArray::zeros([out_ch]).with_grad(),
            padding,
        }
    }

    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize, padding: Padding) -> Self {
        Self {
            weight: DiffArray::zeros([out_ch, in_ch, kernel, kernel]).with_grad(),
            bias: DiffArray::zeros([out_ch]).with_grad(),
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        mode: ParamMode,
        prefix: &str,
        bindings: &mut Bindings<'t>,
    ) -> Result<Var<'t>> {
        let w = bindings.bind(tape, format!("{prefix}.weight"), &self.weight, mode);
        let b = bindings.bind(tape, format!("{prefix}.bias"), &self.bias, mode);
        x.conv2d(&w, self.padding)?.add(&b)
    }

    pub(crate) fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a DiffArray)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut DiffArray)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}
