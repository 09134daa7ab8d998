//! Reconstruction, gradient, mask and entropy losses, their weighted sum and the
//! latent mixing operator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, SubspaceLayout};
use crate::tensor::{DiffAxis, Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 2.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64, lambda4: f64) -> Self {
        LossWeights {
            lambda1,
            lambda2,
            lambda3,
            lambda4,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4]
    }

    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.as_array().iter().enumerate() {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::Config(format!("lambda{} must be a finite non-negative number, got {w}", i + 1)));
            }
        }
        Ok(())
    }
}

/// Which source each subspace is copied from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixSpec {
    /// Subspace `m` from the target (source 1), all others from the input (source 0).
    Swap(usize),
    /// Subspace `i` from source `j(i)`.
    Assign(Vec<usize>),
}

impl MixSpec {
    /// Per-subspace source indices, each checked against `sources`.
    pub fn assignment(&self, layout: &SubspaceLayout, sources: usize) -> Result<Vec<usize>> {
        let c = layout.count();
        let out = match self {
            MixSpec::Swap(m) => {
                if *m >= c {
                    return Err(Error::Config(format!("mask index {m} out of range 0..{c}")));
                }
                (0..c).map(|i| usize::from(i == *m)).collect()
            }
            MixSpec::Assign(a) => {
                if a.len() != c {
                    return Err(Error::Config(format!("assignment has {} entries, layout has {c} subspaces", a.len())));
                }
                a.clone()
            }
        };
        if let Some(bad) = out.iter().find(|&&j| j >= sources) {
            return Err(Error::Config(format!("assignment references source {bad} but only {sources} given")));
        }
        Ok(out)
    }
}

/// Copies each subspace `i` from `sources[j(i)]`.
pub fn mix_many<T: Copy>(layout: &SubspaceLayout, sources: &[&[T]], spec: &MixSpec) -> Result<Vec<T>> {
    let d = layout.total();
    if sources.is_empty() {
        return Err(Error::Config("mixing needs at least one source".into()));
    }
    for s in sources {
        if s.len() != d {
            return Err(Error::shape("mix_sources", &[s.len()], &[d]));
        }
    }
    let assign = spec.assignment(layout, sources.len())?;
    let mut out = sources[0].to_vec();
    for (i, &j) in assign.iter().enumerate() {
        let r = layout.range(i);
        out[r.clone()].copy_from_slice(&sources[j][r]);
    }
    Ok(out)
}

/// `s_mix = D_{−m}·s_in + D_m·s_t`, or the two-source form of an assignment.
pub fn mix_sources<T: Copy>(layout: &SubspaceLayout, s_in: &[T], s_t: &[T], spec: &MixSpec) -> Result<Vec<T>> {
    mix_many(layout, &[s_in, s_t], spec)
}

/// Diagonal of `D_m` as a 0/1 vector.
pub fn selector<T: Real>(layout: &SubspaceLayout, m: usize) -> Vec<T> {
    let mut d = vec![T::zero(); layout.total()];
    for k in layout.range(m) {
        d[k] = T::one();
    }
    d
}

/// Batched `s_in ⊙ (1 − D_m) + s_t ⊙ D_m` on `B×d` rows.
pub fn mix_graph<T: Real>(g: &mut Graph<T>, layout: &SubspaceLayout, s_in: Var, s_t: Var, m: usize) -> Result<Var> {
    let shape = g.shape(s_in).to_vec();
    if shape != g.shape(s_t) || shape.len() != 2 || shape[1] != layout.total() {
        return Err(Error::shape("mix_graph", &shape, g.shape(s_t)));
    }
    if m >= layout.count() {
        return Err(Error::Config(format!("mask index {m} out of range 0..{}", layout.count())));
    }
    let sel = selector::<T>(layout, m);
    let keep: Vec<T> = sel.iter().map(|&v| T::one() - v).collect();
    let rows = shape[0];
    let d_t = g.constant(&shape, sel.repeat(rows))?;
    let d_in = g.constant(&shape, keep.repeat(rows))?;
    let a = g.mul(s_in, d_in)?;
    let b = g.mul(s_t, d_t)?;
    g.add(a, b)
}

/// Mean squared difference.
pub fn recon_loss<T: Real>(g: &mut Graph<T>, i_in: Var, i_out: Var) -> Result<Var> {
    let diff = g.sub(i_in, i_out)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// `(1/p)·‖∇I_in − ∇I_out‖²` with forward differences in x and y and `p = H·W`,
/// averaged over the leading batch axis when the input is 4-D.
pub fn gradient_loss<T: Real>(g: &mut Graph<T>, i_in: Var, i_out: Var) -> Result<Var> {
    let shape = g.shape(i_in).to_vec();
    if shape != g.shape(i_out) {
        return Err(Error::shape("gradient_loss", &shape, g.shape(i_out)));
    }
    if shape.len() < 2 {
        return Err(Error::shape("gradient_loss", &shape, &[0, 0]));
    }
    let p = shape[shape.len() - 2] * shape[shape.len() - 1];
    let batch = if shape.len() == 4 { shape[0] } else { 1 };
    let mut total = None;
    for axis in [DiffAxis::X, DiffAxis::Y] {
        let a = g.spatial_diff(i_in, axis)?;
        let b = g.spatial_diff(i_out, axis)?;
        let diff = g.sub(a, b)?;
        let sq = g.square(diff);
        let s = g.sum(sq);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.expect("two axes");
    Ok(g.mul_scalar(total, T::of(1.0 / (p * batch) as f64)))
}

/// Mean of `(I_mix − I_in)²·(1 − max(M_in, M_t)) + (I_mix − I_t)²·min(M_in, M_t)`.
pub fn mask_loss<T: Real>(g: &mut Graph<T>, i_mix: Var, i_in: Var, i_t: Var, m_in: Var, m_t: Var) -> Result<Var> {
    let hi = g.maximum(m_in, m_t)?;
    let lo = g.minimum(m_in, m_t)?;
    let neg = g.mul_scalar(hi, -T::one());
    let outside = g.add_scalar(neg, T::one());
    let d_in = g.sub(i_mix, i_in)?;
    let d_in = g.square(d_in);
    let d_t = g.sub(i_mix, i_t)?;
    let d_t = g.square(d_t);
    let a = g.mul(d_in, outside)?;
    let b = g.mul(d_t, lo)?;
    let per_pixel = g.add(a, b)?;
    Ok(g.mean(per_pixel))
}

/// Categorical cross-entropy of the subspace classifier over all `C·B` stacked
/// head outputs; the target of `F_i(s)` is class `i`.
pub fn entropy_loss<T: Real>(g: &mut Graph<T>, model: &Model<T>, s: Var) -> Result<Var> {
    let batch = g.shape(s)[0];
    if batch == 0 {
        return Err(Error::shape("entropy_loss", g.shape(s), &[1, model.layout().total()]));
    }
    let c = model.layout().count();
    let logits = model.stacked_logits(g, s)?;
    let logp = g.log_softmax(logits)?;
    let mut onehot = vec![T::zero(); c * batch * c];
    for i in 0..c {
        for b in 0..batch {
            onehot[(i * batch + b) * c + i] = T::one();
        }
    }
    let target = g.constant(&[c * batch, c], onehot)?;
    let picked = g.mul(logp, target)?;
    let total = g.sum(picked);
    Ok(g.mul_scalar(total, T::of(-1.0 / (c * batch) as f64)))
}

/// The four loss terms of one step; `entropy` is absent without the subspace layer.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub recon: Var,
    pub gradient: Var,
    pub mask: Var,
    pub entropy: Option<Var>,
}

pub const TERM_NAMES: [&str; 4] = ["L_a", "L_g", "L_m", "L_e"];

/// `λ1·L_a + λ2·L_g + λ3·L_m + λ4·L_e`; fails on the first non-finite term.
pub fn total_loss<T: Real>(g: &mut Graph<T>, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let weights = w.as_array();
    let vars = [Some(terms.recon), Some(terms.gradient), Some(terms.mask), terms.entropy];
    let mut total: Option<Var> = None;
    for ((var, name), weight) in vars.iter().zip(TERM_NAMES).zip(weights) {
        let Some(v) = *var else { continue };
        let value = g.scalar(v);
        if !value.is_finite() {
            return Err(Error::Diverged(format!("loss term {name} is {value}")));
        }
        let scaled = g.mul_scalar(v, T::of(weight));
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled)?,
        });
    }
    Ok(total.expect("at least three terms"))
}
