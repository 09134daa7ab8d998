//! Procedural face sprites with exact per-part coverage masks and attribute labels.
//!
//! Layers are painted back to front (background with hair, face, eyebrows, eyes,
//! mouth). With per-layer coverage `α_k` the mask of layer `k` is
//! `α_k · Π_{j>k} (1 − α_j)`, which telescopes to an exact partition of unity
//! because the background layer has `α_0 = 1`.

mod codec;
mod ppm;

pub use codec::{decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use ppm::{encode_ppm, export_ppm};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Side length of generated sprites.
pub const SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const NUM_PARTS: usize = 5;

const MAX_ATTEMPTS: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    BgHair,
    Face,
    Eyebrows,
    Eyes,
    Mouth,
}

impl Part {
    pub const ALL: [Part; NUM_PARTS] = [Part::BgHair, Part::Face, Part::Eyebrows, Part::Eyes, Part::Mouth];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::BgHair => "bg_hair",
            Part::Face => "face",
            Part::Eyebrows => "eyebrows",
            Part::Eyes => "eyes",
            Part::Mouth => "mouth",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    MouthOpen,
    DarkHair,
    PaleSkin,
    LargeEyes,
    ThickEyebrows,
    RoundFace,
}

impl Attribute {
    pub const ALL: [Attribute; 6] = [
        Attribute::MouthOpen,
        Attribute::DarkHair,
        Attribute::PaleSkin,
        Attribute::LargeEyes,
        Attribute::ThickEyebrows,
        Attribute::RoundFace,
    ];

    pub fn bit(self) -> u32 {
        1 << self as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::MouthOpen => "mouth_open",
            Attribute::DarkHair => "dark_hair",
            Attribute::PaleSkin => "pale_skin",
            Attribute::LargeEyes => "large_eyes",
            Attribute::ThickEyebrows => "thick_eyebrows",
            Attribute::RoundFace => "round_face",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Attribute::ALL.into_iter().find(|a| a.name() == name)
    }
}

/// Attribute bitfield; bit `i` is `Attribute::ALL[i]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Attributes(pub u32);

impl Attributes {
    pub fn has(self, a: Attribute) -> bool {
        self.0 & a.bit() != 0
    }

    pub fn set(&mut self, a: Attribute, on: bool) {
        if on {
            self.0 |= a.bit();
        } else {
            self.0 &= !a.bit();
        }
    }
}

/// A real-valued RGB picture stored channel-major (`3×H×W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::shape("image", &[CHANNELS, height, width], &[data.len()]));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Closed sampling interval; `lo < hi` is required.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        rng.uniform(self.lo, self.hi)
    }

    fn lerp(&self, t: f64) -> f64 {
        self.lo + (self.hi - self.lo) * t
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(Error::Config(format!("range {name} is degenerate: {self:?}")));
        }
        Ok(())
    }
}

/// Generator settings. Every boolean attribute is thresholded at the midpoint of
/// the range that drives it, so each label is true for about half the sprites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub seed: u64,
    pub count: usize,
    /// Offset of the face centre from the canvas centre, per axis, in pixels.
    pub face_center_jitter: Range,
    pub face_half_height: Range,
    /// Half-width as a fraction of half-height; drives `round_face`.
    pub face_roundness: Range,
    /// 0 = tan, 1 = pale; drives `pale_skin`.
    pub skin_paleness: Range,
    /// 0 = blond, 1 = black; drives `dark_hair`.
    pub hair_darkness: Range,
    pub hair_volume: Range,
    pub eye_radius: Range,
    pub eyebrow_thickness: Range,
    /// Weight of hair darkness in eyebrow thickness (the rest is independent noise).
    pub brow_hair_coupling: f64,
    /// 0 = closed, 1 = wide open; drives `mouth_open`.
    pub mouth_openness: Range,
    pub mouth_half_width: Range,
    /// Uniform per-channel perturbation amplitude applied to every palette colour.
    pub color_jitter: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            seed: 0,
            count: 4096,
            face_center_jitter: Range::new(-1.5, 1.5),
            face_half_height: Range::new(10.0, 12.0),
            face_roundness: Range::new(0.70, 0.95),
            skin_paleness: Range::new(0.0, 1.0),
            hair_darkness: Range::new(0.0, 1.0),
            hair_volume: Range::new(1.5, 3.5),
            eye_radius: Range::new(1.5, 2.7),
            eyebrow_thickness: Range::new(0.9, 2.1),
            brow_hair_coupling: 0.6,
            mouth_openness: Range::new(0.0, 1.0),
            mouth_half_width: Range::new(0.30, 0.42),
            color_jitter: 0.05,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("sprite count must be at least 1".into()));
        }
        let ranges = [
            ("face_center_jitter", &self.face_center_jitter),
            ("face_half_height", &self.face_half_height),
            ("face_roundness", &self.face_roundness),
            ("skin_paleness", &self.skin_paleness),
            ("hair_darkness", &self.hair_darkness),
            ("hair_volume", &self.hair_volume),
            ("eye_radius", &self.eye_radius),
            ("eyebrow_thickness", &self.eyebrow_thickness),
            ("mouth_openness", &self.mouth_openness),
            ("mouth_half_width", &self.mouth_half_width),
        ];
        for (name, r) in ranges {
            r.validate(name)?;
        }
        if !(0.0..=1.0).contains(&self.brow_hair_coupling) {
            return Err(Error::Config("brow_hair_coupling must lie in [0, 1]".into()));
        }
        if !(0.0..0.5).contains(&self.color_jitter) {
            return Err(Error::Config("color_jitter must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// The sampled parameter record a sprite is rendered from.
#[derive(Clone, Debug, PartialEq)]
pub struct SpriteParams {
    pub face_cx: f64,
    pub face_cy: f64,
    pub face_rx: f64,
    pub face_ry: f64,
    pub roundness: f64,
    pub paleness: f64,
    pub darkness: f64,
    pub hair_volume: f64,
    pub eye_radius: f64,
    pub brow_thickness: f64,
    pub openness: f64,
    pub mouth_half_width: f64,
    pub background: [f64; 3],
    pub hair: [f64; 3],
    pub skin: [f64; 3],
    pub iris: [f64; 3],
    pub lips: [f64; 3],
    pub attrs: Attributes,
}

const TAN_SKIN: [f64; 3] = [0.60, 0.40, 0.27];
const PALE_SKIN: [f64; 3] = [0.98, 0.86, 0.80];
const BLOND_HAIR: [f64; 3] = [0.90, 0.75, 0.40];
const DARK_HAIR: [f64; 3] = [0.10, 0.07, 0.05];
const SCLERA: [f64; 3] = [0.96, 0.96, 0.94];
const MOUTH_INSIDE: [f64; 3] = [0.18, 0.04, 0.06];

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

fn jitter(rng: &mut Rng, base: [f64; 3], amp: f64) -> [f64; 3] {
    base.map(|v| (v + rng.uniform(-amp, amp)).clamp(0.0, 1.0))
}

impl SpriteParams {
    /// Draws a parameter record; the draw order is part of the dataset format.
    pub fn sample(gen: &GenParams, rng: &mut Rng) -> Self {
        let centre = SIZE as f64 / 2.0;
        let face_cx = centre + gen.face_center_jitter.sample(rng);
        let face_cy = centre + 1.0 + gen.face_center_jitter.sample(rng);
        let face_ry = gen.face_half_height.sample(rng);
        let roundness = gen.face_roundness.sample(rng);
        let paleness = gen.skin_paleness.sample(rng);
        let darkness = gen.hair_darkness.sample(rng);
        let hair_volume = gen.hair_volume.sample(rng);
        let eye_radius = gen.eye_radius.sample(rng);
        let brow_noise = rng.next_f64();
        let openness = gen.mouth_openness.sample(rng);
        let mouth_half_width = gen.mouth_half_width.sample(rng);

        let dark_t = (darkness - gen.hair_darkness.lo) / (gen.hair_darkness.hi - gen.hair_darkness.lo);
        let pale_t = (paleness - gen.skin_paleness.lo) / (gen.skin_paleness.hi - gen.skin_paleness.lo);
        let k = gen.brow_hair_coupling;
        let brow_thickness = gen.eyebrow_thickness.lerp(k * dark_t + (1.0 - k) * brow_noise);

        let amp = gen.color_jitter;
        let background = [rng.uniform(0.25, 0.85), rng.uniform(0.25, 0.85), rng.uniform(0.25, 0.85)];
        let hair = jitter(rng, lerp3(BLOND_HAIR, DARK_HAIR, dark_t), amp);
        let skin = jitter(rng, lerp3(TAN_SKIN, PALE_SKIN, pale_t), amp);
        let iris_t = rng.next_f64();
        let iris = jitter(rng, lerp3([0.20, 0.45, 0.75], [0.35, 0.20, 0.08], iris_t), amp);
        let lips = jitter(rng, [0.75, 0.25, 0.30], amp);

        let mut attrs = Attributes::default();
        attrs.set(Attribute::MouthOpen, openness > gen.mouth_openness.mid());
        attrs.set(Attribute::DarkHair, darkness > gen.hair_darkness.mid());
        attrs.set(Attribute::PaleSkin, paleness > gen.skin_paleness.mid());
        attrs.set(Attribute::LargeEyes, eye_radius > gen.eye_radius.mid());
        attrs.set(Attribute::ThickEyebrows, brow_thickness > gen.eyebrow_thickness.mid());
        attrs.set(Attribute::RoundFace, roundness > gen.face_roundness.mid());

        SpriteParams {
            face_cx,
            face_cy,
            face_rx: roundness * face_ry,
            face_ry,
            roundness,
            paleness,
            darkness,
            hair_volume,
            eye_radius,
            brow_thickness,
            openness,
            mouth_half_width,
            background,
            hair,
            skin,
            iris,
            lips,
            attrs,
        }
    }

    fn eye_y(&self) -> f64 {
        self.face_cy - 0.18 * self.face_ry
    }

    fn eye_dx(&self) -> f64 {
        0.42 * self.face_rx
    }

    /// Mouth half-height in pixels for the recorded openness.
    pub fn mouth_half_height(&self) -> f64 {
        0.6 + 2.0 * self.openness
    }
}

/// One generated sample: quantized image, quantized masks and labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sprite {
    pub height: usize,
    pub width: usize,
    /// Row-major interleaved RGB bytes.
    pub pixels: Vec<u8>,
    /// Part-major mask planes; per pixel the five bytes sum to 255.
    pub masks: Vec<u8>,
    pub attrs: Attributes,
}

impl Sprite {
    pub fn image(&self) -> Image {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; CHANNELS * h * w];
        for (i, px) in self.pixels.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                data[c * h * w + i] = px[c] as f32 / 255.0;
            }
        }
        Image { height: h, width: w, data }
    }

    /// Mask plane of `part` with values in `[0, 1]`.
    pub fn mask(&self, part: Part) -> Vec<f32> {
        let n = self.height * self.width;
        self.masks[part.index() * n..(part.index() + 1) * n]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect()
    }

    /// Sum of the soft mask values of `part`.
    pub fn mask_area(&self, part: Part) -> f64 {
        let n = self.height * self.width;
        self.masks[part.index() * n..(part.index() + 1) * n]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub sprites: Vec<Sprite>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sprites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sprites.is_empty()
    }
}

fn coverage(signed_distance: f64) -> f64 {
    (0.5 - signed_distance).clamp(0.0, 1.0)
}

/// Approximate Euclidean signed distance to an axis-aligned ellipse.
fn ellipse_sd(px: f64, py: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let (dx, dy) = (px - cx, py - cy);
    let k0 = ((dx / rx).powi(2) + (dy / ry).powi(2)).sqrt();
    let k1 = ((dx / (rx * rx)).powi(2) + (dy / (ry * ry)).powi(2)).sqrt();
    if k1 < 1e-12 {
        -rx.min(ry)
    } else {
        k0 * (k0 - 1.0) / k1
    }
}

fn box_sd(px: f64, py: f64, cx: f64, cy: f64, hx: f64, hy: f64) -> f64 {
    let qx = (px - cx).abs() - hx;
    let qy = (py - cy).abs() - hy;
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0)
}

fn disk_sd(px: f64, py: f64, cx: f64, cy: f64, r: f64) -> f64 {
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() - r
}

/// Rounds per-pixel mask values so the five bytes sum to exactly 255, giving the
/// leftover units to the largest fractional parts (ties to the lower part index).
fn quantize_partition(values: &[f64; NUM_PARTS]) -> [u8; NUM_PARTS] {
    let scaled = values.map(|v| v.clamp(0.0, 1.0) * 255.0);
    let mut out = scaled.map(|v| v.floor() as u8);
    let assigned: u32 = out.iter().map(|&b| b as u32).sum();
    let deficit = 255u32.saturating_sub(assigned) as usize;
    let mut order: [usize; NUM_PARTS] = [0, 1, 2, 3, 4];
    order.sort_by(|&a, &b| {
        let fa = scaled[a] - scaled[a].floor();
        let fb = scaled[b] - scaled[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(deficit) {
        out[i] += 1;
    }
    out
}

/// Per-pixel layer coverages after clipping features to the face.
struct Coverage {
    alpha: [f64; NUM_PARTS],
    colors: [[f64; 3]; NUM_PARTS],
}

fn shade(p: &SpriteParams, px: f64, py: f64) -> Coverage {
    let (cx, cy, rx, ry) = (p.face_cx, p.face_cy, p.face_rx, p.face_ry);

    let hair_shape = coverage(ellipse_sd(
        px,
        py,
        cx,
        cy - 0.2 * ry,
        rx + p.hair_volume,
        ry + p.hair_volume,
    ));
    let hairline = (cy + 0.35 * ry - py + 0.5).clamp(0.0, 1.0);
    let bg = lerp3(p.background, p.hair, hair_shape * hairline);

    let face = coverage(ellipse_sd(px, py, cx, cy, rx, ry));

    let (ey, edx, er) = (p.eye_y(), p.eye_dx(), p.eye_radius);
    let brow_y = ey - er - 1.2 - p.brow_thickness / 2.0;
    let brow_hw = 0.28 * rx;
    let brows = [cx - edx, cx + edx]
        .map(|bx| coverage(box_sd(px, py, bx, brow_y, brow_hw, p.brow_thickness / 2.0)))
        .into_iter()
        .fold(0.0, f64::max);
    let brow_color = p.hair.map(|v| v * 0.8);

    let mut eyes = 0.0f64;
    let mut iris = 0.0f64;
    for ex in [cx - edx, cx + edx] {
        eyes = eyes.max(coverage(disk_sd(px, py, ex, ey, er)));
        iris = iris.max(coverage(disk_sd(px, py, ex, ey, 0.55 * er)));
    }
    let eye_color = lerp3(SCLERA, p.iris, iris);

    let (my, mw, mh) = (cy + 0.52 * ry, p.mouth_half_width * rx, p.mouth_half_height());
    let mouth = coverage(ellipse_sd(px, py, cx, my, mw, mh));
    let inner = if mh > 1.2 {
        coverage(ellipse_sd(px, py, cx, my, (mw - 1.0).max(0.5), mh - 0.9))
    } else {
        0.0
    };
    let mouth_color = lerp3(p.lips, MOUTH_INSIDE, inner);

    Coverage {
        alpha: [1.0, face, brows * face, eyes * face, mouth * face],
        colors: [bg, p.skin, brow_color, eye_color, mouth_color],
    }
}

/// Paints a parameter record into a quantized sprite.
pub fn render(p: &SpriteParams) -> Sprite {
    let (h, w) = (SIZE, SIZE);
    let mut pixels = vec![0u8; h * w * CHANNELS];
    let mut masks = vec![0u8; NUM_PARTS * h * w];
    for y in 0..h {
        for x in 0..w {
            let cov = shade(p, x as f64 + 0.5, y as f64 + 0.5);
            let mut m = [0.0; NUM_PARTS];
            let mut above = 1.0;
            for k in (0..NUM_PARTS).rev() {
                m[k] = cov.alpha[k] * above;
                above *= 1.0 - cov.alpha[k];
            }
            let i = y * w + x;
            for c in 0..CHANNELS {
                let v: f64 = (0..NUM_PARTS).map(|k| m[k] * cov.colors[k][c]).sum();
                pixels[i * CHANNELS + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            for (k, b) in quantize_partition(&m).into_iter().enumerate() {
                masks[k * h * w + i] = b;
            }
        }
    }
    Sprite {
        height: h,
        width: w,
        pixels,
        masks,
        attrs: p.attrs,
    }
}

/// Samples and renders sprite `index`, resampling geometry that leaves a part
/// without any visible pixels.
pub fn generate_one(gen: &GenParams, index: usize) -> Result<(SpriteParams, Sprite)> {
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = Rng::substream(gen.seed, ((index as u64) << 8) | attempt);
        let params = SpriteParams::sample(gen, &mut rng);
        let sprite = render(&params);
        if Part::ALL.iter().all(|&p| sprite.mask_area(p) > 0.0) {
            return Ok((params, sprite));
        }
    }
    Err(Error::Config(format!(
        "sprite {index}: a part stayed off-canvas after {MAX_ATTEMPTS} attempts"
    )))
}

/// Generates `gen.count` sprites; sprite `i` depends only on `(gen, i)`.
pub fn generate(gen: &GenParams) -> Result<Dataset> {
    gen.validate()?;
    let sprites = (0..gen.count)
        .map(|i| generate_one(gen, i).map(|(_, s)| s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        height: SIZE,
        width: SIZE,
        sprites,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(count: usize, seed: u64) -> GenParams {
        GenParams {
            seed,
            count,
            ..GenParams::default()
        }
    }

    #[test]
    fn deterministic_for_equal_params() {
        let a = generate(&small(20, 3)).unwrap();
        let b = generate(&small(20, 3)).unwrap();
        assert_eq!(encode_dataset(&a), encode_dataset(&b));
        let c = generate(&small(20, 4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sprite_depends_only_on_seed_and_index() {
        let gen = small(30, 11);
        let all = generate(&gen).unwrap();
        let (_, s17) = generate_one(&gen, 17).unwrap();
        assert_eq!(all.sprites[17], s17);
    }

    #[test]
    fn masks_partition_every_pixel() {
        let ds = generate(&small(50, 1)).unwrap();
        for s in &ds.sprites {
            let planes: Vec<Vec<f32>> = Part::ALL.iter().map(|&p| s.mask(p)).collect();
            for i in 0..SIZE * SIZE {
                let total: f32 = planes.iter().map(|m| m[i]).sum();
                assert!((total - 1.0).abs() <= 1e-6, "pixel {i}: {total}");
            }
        }
    }

    #[test]
    fn features_stay_inside_face_support() {
        let gen = small(40, 2);
        for i in 0..gen.count {
            let (p, s) = generate_one(&gen, i).unwrap();
            for y in 0..SIZE {
                for x in 0..SIZE {
                    let sd = ellipse_sd(x as f64 + 0.5, y as f64 + 0.5, p.face_cx, p.face_cy, p.face_rx, p.face_ry);
                    if sd > 0.5 + 1e-9 {
                        for part in [Part::Eyebrows, Part::Eyes, Part::Mouth] {
                            assert_eq!(s.mask(part)[y * SIZE + x], 0.0, "{part:?} at ({x},{y})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn open_mouth_has_larger_mouth_mask_than_closed_rerender() {
        let gen = small(60, 5);
        let mut checked = 0;
        for i in 0..gen.count {
            let (p, s) = generate_one(&gen, i).unwrap();
            if !p.attrs.has(Attribute::MouthOpen) {
                continue;
            }
            let mut closed = p.clone();
            closed.openness = gen.mouth_openness.lo + gen.mouth_openness.hi - p.openness;
            closed.attrs.set(Attribute::MouthOpen, false);
            let c = render(&closed);
            assert!(s.mask_area(Part::Mouth) > c.mask_area(Part::Mouth));
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn labels_are_balanced() {
        let ds = generate(&small(1000, 8)).unwrap();
        for a in Attribute::ALL {
            let frac = ds.sprites.iter().filter(|s| s.attrs.has(a)).count() as f64 / 1000.0;
            assert!((0.3..=0.7).contains(&frac), "{}: {frac}", a.name());
        }
    }

    #[test]
    fn dark_hair_correlates_with_thick_eyebrows() {
        let ds = generate(&small(1000, 9)).unwrap();
        let both = ds
            .sprites
            .iter()
            .filter(|s| s.attrs.has(Attribute::DarkHair) == s.attrs.has(Attribute::ThickEyebrows))
            .count();
        assert!(both > 700, "{both}");
    }

    #[test]
    fn attrs_recorded_from_parameters() {
        let gen = small(50, 10);
        for i in 0..gen.count {
            let (p, s) = generate_one(&gen, i).unwrap();
            assert_eq!(s.attrs.has(Attribute::MouthOpen), p.openness > gen.mouth_openness.mid());
            assert_eq!(s.attrs.has(Attribute::LargeEyes), p.eye_radius > gen.eye_radius.mid());
        }
    }

    #[test]
    fn quantized_partition_sums_to_255() {
        let cases = [[0.2, 0.2, 0.2, 0.2, 0.2], [1.0, 0.0, 0.0, 0.0, 0.0], [0.333, 0.333, 0.334, 0.0, 0.0]];
        for m in cases {
            let q = quantize_partition(&m);
            assert_eq!(q.iter().map(|&b| b as u32).sum::<u32>(), 255);
        }
        assert_eq!(quantize_partition(&[1.0, 0.0, 0.0, 0.0, 0.0]), [255, 0, 0, 0, 0]);
    }

    #[test]
    fn degenerate_ranges_rejected() {
        let mut gen = small(1, 0);
        gen.eye_radius = Range::new(2.0, 2.0);
        assert!(generate(&gen).is_err());
        assert!(generate(&small(0, 0)).is_err());
    }

    #[test]
    fn attribute_names_round_trip() {
        for a in Attribute::ALL {
            assert_eq!(Attribute::from_name(a.name()), Some(a));
        }
        assert_eq!(Attribute::MouthOpen.bit(), 1);
        assert_eq!(Attribute::from_name("male"), None);
    }
}
