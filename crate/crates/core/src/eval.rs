//! Mixing error, subspace PCA analysis, attribute editing and mixing grids.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::jacobi_eigen;
use crate::losses::{mix_many, MixSpec};
use crate::model::Model;
use crate::rng::Rng;
use crate::synthdata::{Attribute, Dataset, Image, Part, Sprite, CHANNELS, NUM_PARTS};
use crate::tensor::{Graph, Real};

/// Convergence tolerance of the PCA eigensolver.
pub const PCA_TOL: f64 = 1e-10;
/// Minimum samples on each side of an attribute for it to be analysed.
pub const MIN_ATTRIBUTE_SAMPLES: usize = 10;
/// Separator value between grid cells.
pub const GRID_SEPARATOR: f32 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingErrorReport {
    /// Mean normalized error `e_j` per subspace.
    pub per_subspace: Vec<f64>,
    pub groups: usize,
}

impl MixingErrorReport {
    pub fn mean(&self) -> f64 {
        self.per_subspace.iter().sum::<f64>() / self.per_subspace.len() as f64
    }
}

fn require_part_layout<T: Real>(model: &Model<T>) -> Result<usize> {
    let c = model.layout().count();
    if c != NUM_PARTS {
        return Err(Error::Config(format!(
            "model has {c} subspaces but sprites have {NUM_PARTS} parts"
        )));
    }
    Ok(c)
}

/// `e_j` for one decoded mix whose subspace `j` came from `members[j]`; `None`
/// where the mask of `members[j]` has zero area.
pub fn group_errors(mix: &Image, members: &[&Sprite]) -> Vec<Option<f64>> {
    let hw = mix.height * mix.width;
    members
        .iter()
        .enumerate()
        .map(|(j, sprite)| {
            let part = Part::ALL[j];
            let mask = sprite.mask(part);
            let area: f64 = mask.iter().map(|&m| m as f64).sum();
            if area <= 0.0 {
                return None;
            }
            let img = sprite.image();
            let mut err = 0.0;
            for (p, &m) in mask.iter().enumerate() {
                let diff: f64 = (0..CHANNELS)
                    .map(|c| ((mix.data[c * hw + p] - img.data[c * hw + p]) as f64 * m as f64).abs())
                    .sum();
                err += diff / CHANNELS as f64;
            }
            Some(err / area)
        })
        .collect()
}

/// Decodes `to_latent(mix_many(sources, spec))` for each group of source images.
///
/// The latent is formed as `z_r + A·(s_mix − s_r)` with `r` the source supplying
/// most subspaces, which equals `A·s_mix` and is exactly `z_r` when every
/// subspace comes from `r`.
fn decode_mixes<T: Real>(model: &Model<T>, groups: &[Vec<&Image>], specs: &[MixSpec]) -> Result<Vec<Image>> {
    let mut flat: Vec<Image> = Vec::new();
    let mut sizes = Vec::with_capacity(groups.len());
    for g in groups {
        sizes.push(g.len());
        flat.extend(g.iter().map(|&i| i.clone()));
    }
    let z = model.encode(&flat)?;
    let s = z.iter().map(|z| model.to_sources(z)).collect::<Result<Vec<_>>>()?;
    let mut latents = Vec::with_capacity(groups.len());
    let mut at = 0;
    for (n, spec) in sizes.into_iter().zip(specs) {
        let srcs: Vec<&[T]> = s[at..at + n].iter().map(Vec::as_slice).collect();
        let mixed = mix_many(model.layout(), &srcs, spec)?;
        let assign = spec.assignment(model.layout(), n)?;
        let base = (0..n)
            .max_by_key(|&j| (assign.iter().filter(|&&a| a == j).count(), std::cmp::Reverse(j)))
            .expect("non-empty group");
        let delta: Vec<T> = mixed.iter().zip(srcs[base]).map(|(&m, &b)| m - b).collect();
        let dz = model.to_latent(&delta)?;
        latents.push(z[at + base].iter().zip(&dz).map(|(&z, &d)| z + d).collect());
        at += n;
    }
    model.decode(&latents)
}

/// Averages `e_j` over `groups` random groups of five distinct sprites, where
/// subspace `j` of the mix comes from member `j` of the group.
pub fn mixing_error<T: Real>(model: &Model<T>, dataset: &Dataset, groups: usize, seed: u64) -> Result<MixingErrorReport> {
    let c = require_part_layout(model)?;
    if groups == 0 || dataset.len() < c * groups {
        return Err(Error::InsufficientData(format!(
            "mixing error needs {} sprites for {groups} groups, dataset has {}",
            c * groups,
            dataset.len()
        )));
    }
    let picks = Rng::new(seed).sample_without_replacement(dataset.len(), c * groups);
    let images: Vec<Image> = picks.iter().map(|&i| dataset.sprites[i].image()).collect();
    let grouped: Vec<Vec<&Image>> = images.chunks(c).map(|g| g.iter().collect()).collect();
    let spec = MixSpec::Assign((0..c).collect());
    let mixes = decode_mixes(model, &grouped, &vec![spec; groups])?;

    let mut sums = vec![0.0; c];
    let mut counts = vec![0usize; c];
    for (g, mix) in mixes.iter().enumerate() {
        let members: Vec<&Sprite> = picks[g * c..(g + 1) * c].iter().map(|&i| &dataset.sprites[i]).collect();
        for (j, e) in group_errors(mix, &members).into_iter().enumerate() {
            match e {
                Some(e) => {
                    sums[j] += e;
                    counts[j] += 1;
                }
                None => log::warn!("group {g}: {} mask of sprite {} has zero area; skipped", Part::ALL[j].name(), picks[g * c + j]),
            }
        }
    }
    let per_subspace = sums
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(j, (&s, &n))| {
            if n == 0 {
                Err(Error::InsufficientData(format!("no group had a non-empty {} mask", Part::ALL[j].name())))
            } else {
                Ok(s / n as f64)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MixingErrorReport { per_subspace, groups })
}

/// Top-3 principal axes of a sample matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca3 {
    pub mean: Vec<f64>,
    /// Rows are unit axes, ordered by descending eigenvalue.
    pub axes: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// `N×3` coordinates of the centred samples on the axes.
    pub projected: Vec<[f64; 3]>,
    /// Fewer than three non-negligible eigenvalues; trailing axes are an arbitrary
    /// orthonormal completion.
    pub rank_deficient: bool,
}

pub fn pca3(samples: &[Vec<f64>]) -> Result<Pca3> {
    let n = samples.len();
    if n <= 3 {
        return Err(Error::InsufficientData(format!("PCA needs more than 3 samples, got {n}")));
    }
    let d = samples[0].len();
    if d < 3 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::shape("pca3 samples", &[n, d], &[n, 3]));
    }
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for s in samples {
        for i in 0..d {
            let a = s[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += a * (s[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    let eig = jacobi_eigen(&cov, d, PCA_TOL)?;
    let axes: Vec<Vec<f64>> = eig.vectors[..3].to_vec();
    let eigenvalues = eig.values[..3].to_vec();
    let top = eig.values[0].abs().max(f64::MIN_POSITIVE);
    let rank_deficient = eigenvalues.iter().any(|&v| v <= 1e-12 * top);
    if rank_deficient {
        log::warn!("pca3: samples span fewer than 3 dimensions");
    }
    let projected = samples
        .iter()
        .map(|s| {
            let mut p = [0.0; 3];
            for (k, axis) in axes.iter().enumerate() {
                p[k] = axis.iter().zip(s).zip(&mean).map(|((a, v), m)| a * (v - m)).sum();
            }
            p
        })
        .collect();
    Ok(Pca3 {
        mean,
        axes,
        eigenvalues,
        projected,
        rank_deficient,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceStats {
    pub part: String,
    pub pca: Pca3Summary,
    /// Class-mean distance per analysed attribute.
    pub distances: BTreeMap<String, f64>,
}

/// [`Pca3`] without the per-sample projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca3Summary {
    pub axes: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub rank_deficient: bool,
}

impl Pca3Summary {
    /// Root of the summed top-3 variances: the spread of the projected cloud.
    pub fn spread(&self) -> f64 {
        self.eigenvalues.iter().map(|v| v.max(0.0)).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceAnalysis {
    pub subspaces: Vec<SubspaceStats>,
    /// Attributes skipped for having too few samples on one side.
    pub excluded: Vec<String>,
}

impl SubspaceAnalysis {
    pub fn distance(&self, subspace: usize, attr: Attribute) -> Option<f64> {
        self.subspaces.get(subspace)?.distances.get(attr.name()).copied()
    }

    /// Subspace with the largest distance for `attr`.
    pub fn argmax(&self, attr: Attribute) -> Option<usize> {
        (0..self.subspaces.len())
            .filter_map(|i| self.distance(i, attr).map(|d| (i, d)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }

    /// `{subspace → {attribute → distance}}`.
    pub fn distance_table(&self) -> BTreeMap<String, BTreeMap<String, f64>> {
        self.subspaces.iter().map(|s| (s.part.clone(), s.distances.clone())).collect()
    }
}

/// Source vectors of every sprite, in dataset order.
pub fn encode_sources<T: Real>(model: &Model<T>, sprites: &[Sprite]) -> Result<Vec<Vec<T>>> {
    let images: Vec<Image> = sprites.iter().map(Sprite::image).collect();
    model.encode(&images)?.iter().map(|z| model.to_sources(z)).collect()
}

/// Per-subspace PCA of the sources with class-mean distances for labels given
/// as `(name, per-sample flags)`.
pub fn separation_from_sources<T: Real>(
    model: &Model<T>,
    sources: &[Vec<T>],
    labels: &[(String, Vec<bool>)],
) -> Result<SubspaceAnalysis> {
    let layout = model.layout();
    let mut excluded = Vec::new();
    let mut used = Vec::new();
    for (name, flags) in labels {
        let on = flags.iter().filter(|&&f| f).count();
        let off = flags.len() - on;
        if flags.len() != sources.len() {
            return Err(Error::shape("attribute labels", &[flags.len()], &[sources.len()]));
        }
        if on < MIN_ATTRIBUTE_SAMPLES || off < MIN_ATTRIBUTE_SAMPLES {
            log::warn!("attribute {name}: {on} positive / {off} negative samples; excluded");
            excluded.push(name.clone());
        } else {
            used.push((name, flags));
        }
    }
    let mut subspaces = Vec::with_capacity(layout.count());
    for i in 0..layout.count() {
        let r = layout.range(i);
        let samples: Vec<Vec<f64>> = sources.iter().map(|s| s[r.clone()].iter().map(|v| v.f64()).collect()).collect();
        let pca = pca3(&samples)?;
        let mut distances = BTreeMap::new();
        for (name, flags) in &used {
            let mut sum = [[0.0; 3]; 2];
            let mut count = [0usize; 2];
            for (p, &f) in pca.projected.iter().zip(flags.iter()) {
                let k = usize::from(f);
                count[k] += 1;
                for a in 0..3 {
                    sum[k][a] += p[a];
                }
            }
            let dist = (0..3)
                .map(|a| sum[1][a] / count[1] as f64 - sum[0][a] / count[0] as f64)
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            distances.insert((*name).clone(), dist);
        }
        let part = Part::ALL.get(i).map_or_else(|| format!("subspace{i}"), |p| p.name().to_string());
        subspaces.push(SubspaceStats {
            part,
            pca: Pca3Summary {
                axes: pca.axes,
                eigenvalues: pca.eigenvalues,
                rank_deficient: pca.rank_deficient,
            },
            distances,
        });
    }
    Ok(SubspaceAnalysis { subspaces, excluded })
}

pub fn attribute_separation<T: Real>(model: &Model<T>, dataset: &Dataset) -> Result<SubspaceAnalysis> {
    let sources = encode_sources(model, &dataset.sprites)?;
    let labels: Vec<(String, Vec<bool>)> = Attribute::ALL
        .iter()
        .map(|&a| (a.name().to_string(), dataset.sprites.iter().map(|s| s.attrs.has(a)).collect()))
        .collect();
    separation_from_sources(model, &sources, &labels)
}

/// `mean(s | attr) − mean(s)` over the dataset.
pub fn attribute_direction<T: Real>(model: &Model<T>, dataset: &Dataset, attr: Attribute) -> Result<Vec<f64>> {
    let sources = encode_sources(model, &dataset.sprites)?;
    direction_from_sources(&sources, &dataset.sprites, attr)
}

pub fn direction_from_sources<T: Real>(sources: &[Vec<T>], sprites: &[Sprite], attr: Attribute) -> Result<Vec<f64>> {
    let d = sources.first().map_or(0, Vec::len);
    let mut all = vec![0.0; d];
    let mut on = vec![0.0; d];
    let mut n_on = 0usize;
    for (s, sprite) in sources.iter().zip(sprites) {
        let has = sprite.attrs.has(attr);
        n_on += usize::from(has);
        for k in 0..d {
            all[k] += s[k].f64();
            if has {
                on[k] += s[k].f64();
            }
        }
    }
    if n_on == 0 {
        return Err(Error::InsufficientData(format!("no sprite has attribute {}", attr.name())));
    }
    let n = sources.len() as f64;
    Ok((0..d).map(|k| on[k] / n_on as f64 - all[k] / n).collect())
}

/// A latent code plus an attribute offset, edited by accumulating strength.
///
/// The offset is carried in latent space as `A·v`, so the edited latent is
/// `z + strength·A·v = A·(s + strength·v)` and strength 0 returns `z` untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEdit<T: Real> {
    z: Vec<T>,
    offset: Vec<T>,
    strength: f64,
}

impl<T: Real> LatentEdit<T> {
    pub fn new(model: &Model<T>, z: Vec<T>, direction: &[f64]) -> Result<Self> {
        let v: Vec<T> = direction.iter().map(|&x| T::of(x)).collect();
        let offset = model.to_latent(&v)?;
        if z.len() != offset.len() {
            return Err(Error::shape("latent edit", &[z.len()], &[offset.len()]));
        }
        Ok(LatentEdit { z, offset, strength: 0.0 })
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    /// Adds `k` to the accumulated strength.
    pub fn shift(&mut self, k: f64) {
        self.strength += k;
    }

    pub fn latent(&self) -> Vec<T> {
        if self.strength == 0.0 {
            return self.z.clone();
        }
        let k = T::of(self.strength);
        self.z.iter().zip(&self.offset).map(|(&z, &o)| z + k * o).collect()
    }
}

pub fn attribute_edit<T: Real>(
    model: &Model<T>,
    dataset: &Dataset,
    attr: Attribute,
    image: &Image,
    strength: f64,
) -> Result<Image> {
    let direction = attribute_direction(model, dataset, attr)?;
    let mut edit = LatentEdit::new(model, model.encode_one(image)?, &direction)?;
    edit.shift(strength);
    model.decode_one(&edit.latent())
}

/// Mean absolute change inside and outside a soft mask: `(Σ|Δ|·M / ΣM, Σ|Δ|·(1−M) / Σ(1−M))`
/// with `|Δ|` averaged over channels.
pub fn masked_change(before: &Image, after: &Image, mask: &[f32]) -> (f64, f64) {
    let hw = before.height * before.width;
    let (mut inside, mut outside, mut area_in, mut area_out) = (0.0, 0.0, 0.0, 0.0);
    for (p, &m) in mask.iter().enumerate().take(hw) {
        let delta: f64 = (0..CHANNELS)
            .map(|c| (after.data[c * hw + p] - before.data[c * hw + p]).abs() as f64)
            .sum::<f64>()
            / CHANNELS as f64;
        let m = m as f64;
        inside += delta * m;
        outside += delta * (1.0 - m);
        area_in += m;
        area_out += 1.0 - m;
    }
    (inside / area_in.max(f64::MIN_POSITIVE), outside / area_out.max(f64::MIN_POSITIVE))
}

/// Row-major grid layout for [`mix_grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<MixSpec>,
}

impl GridSpec {
    /// Default layout for `n` source images and `c` subspaces.
    ///
    /// One image gives a single reconstruction. With two or three images, row `r`
    /// starts with the reconstruction of image `r`, followed by image `r` with
    /// subspace `m` taken from image `(r + 1) mod n`; the last row is mirrored so
    /// its reconstruction sits in the bottom-right corner.
    pub fn default_for(n: usize, c: usize) -> Result<Self> {
        match n {
            1 => Ok(GridSpec {
                rows: 1,
                cols: 1,
                cells: vec![MixSpec::Assign(vec![0; c])],
            }),
            2 | 3 => {
                let mut cells = Vec::new();
                for r in 0..n {
                    let other = (r + 1) % n;
                    let recon = MixSpec::Assign(vec![r; c]);
                    let swaps = (0..c).map(|m| MixSpec::Assign((0..c).map(|i| if i == m { other } else { r }).collect()));
                    if r + 1 == n {
                        cells.extend(swaps);
                        cells.push(recon);
                    } else {
                        cells.push(recon);
                        cells.extend(swaps);
                    }
                }
                Ok(GridSpec { rows: n, cols: c + 1, cells })
            }
            _ => Err(Error::Config(format!("mix grid takes 1 to 3 images, got {n}"))),
        }
    }
}

/// Decodes every cell of `spec` and tiles the results with 1-pixel separators.
pub fn mix_grid<T: Real>(model: &Model<T>, images: &[Image], spec: &GridSpec) -> Result<Image> {
    if images.is_empty() || images.len() > 3 {
        return Err(Error::Config(format!("mix grid takes 1 to 3 images, got {}", images.len())));
    }
    if spec.cells.len() != spec.rows * spec.cols || spec.rows == 0 || spec.cols == 0 {
        return Err(Error::Config(format!(
            "grid of {}x{} needs {} cells, got {}",
            spec.rows,
            spec.cols,
            spec.rows * spec.cols,
            spec.cells.len()
        )));
    }
    let group: Vec<&Image> = images.iter().collect();
    let groups = vec![group; spec.cells.len()];
    let cells = decode_mixes(model, &groups, &spec.cells)?;
    let (h, w) = (cells[0].height, cells[0].width);
    let gh = spec.rows * h + spec.rows - 1;
    let gw = spec.cols * w + spec.cols - 1;
    let mut grid = Image::filled(gh, gw, GRID_SEPARATOR);
    for (k, cell) in cells.iter().enumerate() {
        let (r, c) = (k / spec.cols, k % spec.cols);
        let (y0, x0) = (r * (h + 1), c * (w + 1));
        for ch in 0..CHANNELS {
            for y in 0..h {
                let src = &cell.data[(ch * h + y) * w..(ch * h + y + 1) * w];
                let at = (ch * gh + y0 + y) * gw + x0;
                grid.data[at..at + w].copy_from_slice(src);
            }
        }
    }
    Ok(grid)
}

/// Fraction of `(sample, subspace)` pairs whose head output the classifier
/// assigns to the right subspace.
pub fn entropy_accuracy<T: Real>(model: &Model<T>, sprites: &[Sprite]) -> Result<f64> {
    if !model.isa_enabled() {
        return Err(Error::Config("entropy heads are unused without the subspace layer".into()));
    }
    if sprites.is_empty() {
        return Err(Error::InsufficientData("no sprites to classify".into()));
    }
    let sources = encode_sources(model, sprites)?;
    let c = model.layout().count();
    let d = model.layout().total();
    let mut correct = 0usize;
    for chunk in sources.chunks(64) {
        let b = chunk.len();
        let mut g = Graph::inference();
        let s = g.constant(&[b, d], chunk.concat())?;
        let logits = model.stacked_logits(&mut g, s)?;
        let values = g.value(logits);
        for (row, l) in values.chunks(c).enumerate() {
            let truth = row / b;
            let pred = (0..c).max_by(|&x, &y| l[x].f64().total_cmp(&l[y].f64())).expect("non-empty");
            correct += usize::from(pred == truth);
        }
    }
    Ok(correct as f64 / (sources.len() * c) as f64)
}
