use crate::error::{Error, Result};

/// A dense row-major `f64` array that can take part in a [`Tape`](super::Tape).
///
/// Image data uses the `N x C x H x W` layout throughout the crate. The
/// gradient buffer is allocated lazily and always matches `shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffArray {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl DiffArray {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        validate_shape("DiffArray::new", &shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "DiffArray::new",
                shape,
                reason: format!("{} elements supplied", data.len()),
            });
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Vec::new(), value)
    }

    /// Marks the array as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Resets the gradient buffer to zeros (allocating it if needed).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Adds `g` into the gradient buffer. Repeated calls accumulate.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::ShapeMismatch { op: "accumulate_grad", lhs: self.shape.clone(), rhs: vec![g.len()] });
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        validate_shape("reshape", &shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: self.shape, rhs: shape });
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Copies out batch item `n` of an array whose first axis is the batch.
    pub fn item(&self, n: usize) -> Result<DiffArray> {
        let batch = *self.shape.first().ok_or_else(|| Error::InvalidShape {
            op: "item",
            shape: self.shape.clone(),
            reason: "rank 0".into(),
        })?;
        if n >= batch {
            return Err(Error::InvalidAxis { axis: n, shape: self.shape.clone() });
        }
        let stride = self.data.len() / batch;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        DiffArray::new(shape, self.data[n * stride..(n + 1) * stride].to_vec())
    }

    /// Stacks same-shaped arrays along the leading (batch) axis.
    pub fn stack(items: &[DiffArray]) -> Result<DiffArray> {
        let first = items.first().ok_or_else(|| Error::Empty("stack of zero arrays".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for it in items {
            if it.shape != first.shape {
                return Err(Error::ShapeMismatch { op: "stack", lhs: first.shape.clone(), rhs: it.shape.clone() });
            }
            data.extend_from_slice(&it.data);
        }
        let mut shape = first.shape.clone();
        if shape.first() == Some(&1) {
            shape[0] = items.len();
        } else {
            shape.insert(0, items.len());
        }
        DiffArray::new(shape, data)
    }
}

pub(crate) fn validate_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape { op, shape: shape.to_vec(), reason: "zero-sized dimension".into() });
    }
    Ok(())
}
