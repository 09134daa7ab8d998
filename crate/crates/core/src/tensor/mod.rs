//! Dense tensors, a define-by-run autodiff graph and the Adam optimizer.

mod adam;
mod conv;
mod graph;

pub use adam::{Adam, AdamConfig};
pub use graph::{DiffAxis, Graph, Var};

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type of the numeric core.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = a·b (+ c if accumulate)` on row-major operands.
    ///
    /// `a` is `m×k` (stored `k×m` when `ta`), `b` is `k×n` (stored `n×k` when `tb`),
    /// `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

macro_rules! gemm_strides {
    ($m:expr, $k:expr, $n:expr, $ta:expr, $tb:expr) => {{
        let (rsa, csa) = if $ta { (1, $m as isize) } else { ($k as isize, 1) };
        let (rsb, csb) = if $tb { (1, $k as isize) } else { ($n as isize, 1) };
        (rsa, csa, rsb, csb)
    }};
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        ta: bool,
        b: &[f32],
        tb: bool,
        c: &mut [f32],
        accumulate: bool,
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        if m == 0 || n == 0 {
            return;
        }
        let (rsa, csa, rsb, csb) = gemm_strides!(m, k, n, ta, tb);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: bounds asserted above; strides describe dense row-major storage.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        ta: bool,
        b: &[f64],
        tb: bool,
        c: &mut [f64],
        accumulate: bool,
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        if m == 0 || n == 0 {
            return;
        }
        let (rsa, csa, rsb, csb) = gemm_strides!(m, k, n, ta, tb);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: bounds asserted above; strides describe dense row-major storage.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// A row-major array with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Config(format!("tensor dims must be positive: {shape:?}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape, vec![T::zero(); shape.iter().product()]).expect("positive dims")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of learnable tensors.
///
/// Every mutation through [`ParamStore::data_mut`] or the optimizer bumps the
/// parameter's version counter, which caches derived from a parameter use to
/// detect staleness.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    versions: Vec<u64>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            versions: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        if self.find(name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.versions.push(0);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        self.versions[id.0] += 1;
        self.tensors[id.0].data_mut()
    }

    pub fn version(&self, id: ParamId) -> u64 {
        self.versions[id.0]
    }

    pub fn grad(&self, id: ParamId) -> Option<&[T]> {
        self.tensors[id.0].grad()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        self.tensors[id.0].accumulate_grad(g);
    }

    pub(crate) fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        self.versions[id.0] += 1;
        &mut self.tensors[id.0]
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}
