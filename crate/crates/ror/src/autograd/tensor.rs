//! Dense row-major f64 tensor. Deliberately minimal: the graph ops in the
//! parent module do all the real math, this is just shaped storage.

/// Row-major dense tensor. Dims like `[C, H, W]` or `[rows, cols]`; a scalar
/// is `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    /// Wraps existing data. Panics if the element count does not match the
    /// dims — that is always a programming error, not an input error.
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "tensor dims {:?} do not match {} elements",
            dims,
            data.len()
        );
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    /// Scalar convenience: the single element of a `[1]` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with dims {:?}", self.dims);
        self.data[0]
    }

    /// 2-D indexed read, for tests and small glue code.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[r * self.dims[1] + c]
    }

    /// 3-D indexed read (`[C, H, W]` layout).
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 3);
        self.data[(c * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}
