use crate::error::{Error, Result};
use crate::linalg::{norm1, Lu, MIN_PIVOT};
use crate::tensor::{ParamId, ParamStore, Real};

/// Largest accepted 1-norm condition number of `A`.
pub const MAX_CONDITION: f64 = 1e6;

/// Cached `A⁻¹` stamped with the parameter version it was computed from.
#[derive(Clone, Debug)]
pub struct MixingMatrix<T: Real> {
    id: ParamId,
    d: usize,
    inverse: Vec<T>,
    stamp: Option<u64>,
    condition: f64,
}

impl<T: Real> MixingMatrix<T> {
    pub(crate) fn new(id: ParamId, d: usize) -> Self {
        MixingMatrix {
            id,
            d,
            inverse: Vec::new(),
            stamp: None,
            condition: f64::INFINITY,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// 1-norm condition number at the last refresh.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn is_current(&self, params: &ParamStore<T>) -> bool {
        self.stamp == Some(params.version(self.id))
    }

    fn compute(&self, params: &ParamStore<T>) -> Result<(Vec<T>, f64)> {
        let a: Vec<f64> = params.get(self.id).data().iter().map(|v| v.f64()).collect();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged("mixing matrix has non-finite entries".into()));
        }
        let lu = Lu::factor(&a, self.d)?;
        let inv = lu.inverse();
        let cond = norm1(&a, self.d) * norm1(&inv, self.d);
        if !(cond <= MAX_CONDITION) {
            return Err(Error::IllConditioned(format!(
                "mixing matrix condition number {cond:.3e} exceeds {MAX_CONDITION:.0e} (min pivot {MIN_PIVOT:.0e})"
            )));
        }
        Ok((inv.into_iter().map(T::of).collect(), cond))
    }

    pub(crate) fn refresh(&mut self, params: &ParamStore<T>) -> Result<()> {
        let (inv, cond) = self.compute(params)?;
        self.inverse = inv;
        self.condition = cond;
        self.stamp = Some(params.version(self.id));
        Ok(())
    }

    /// The cached inverse when current, otherwise a freshly computed one.
    pub fn current_inverse(&self, params: &ParamStore<T>) -> Result<Vec<T>> {
        if self.is_current(params) {
            Ok(self.inverse.clone())
        } else {
            Ok(self.compute(params)?.0)
        }
    }

    /// `max |A·A⁻¹ − I|` for the cached inverse.
    pub fn residual(&self, params: &ParamStore<T>) -> f64 {
        let d = self.d;
        let a = params.get(self.id).data();
        let inv = &self.inverse;
        if inv.len() != d * d {
            return f64::INFINITY;
        }
        let mut worst = 0f64;
        for i in 0..d {
            for j in 0..d {
                let s: f64 = (0..d).map(|k| a[i * d + k].f64() * inv[k * d + j].f64()).sum();
                let eye = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((s - eye).abs());
            }
        }
        worst
    }
}
