//! Residual autoencoder, the invertible subspace layer and the entropy heads.

mod checkpoint;
mod layout;
mod mixing;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint,
    ARCHITECTURE, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use layout::SubspaceLayout;
pub use mixing::MixingMatrix;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synthdata::{Image, CHANNELS, SIZE};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Channel widths of the three strided encoder convolutions.
pub const ENCODER_CHANNELS: [usize; 3] = [16, 32, 64];
/// Channel widths after each decoder upsampling stage.
pub const DECODER_CHANNELS: [usize; 3] = [32, 16, 16];
const BOTTLENECK_SIDE: usize = SIZE / 8;
const BOTTLENECK_CHANNELS: usize = 64;
const FLAT: usize = BOTTLENECK_CHANNELS * BOTTLENECK_SIDE * BOTTLENECK_SIDE;
const KERNEL: usize = 3;
/// Images per forward pass in the batched inference helpers.
const INFERENCE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layout: SubspaceLayout,
    /// `false` replaces the mixing matrix by the identity (ablation baseline).
    pub enable_isa: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layout: SubspaceLayout::default(),
            enable_isa: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct ParamIds {
    enc_convs: [Layer; 3],
    enc_res: [Layer; 2],
    enc_fc: Layer,
    dec_fc: Layer,
    dec_res: [Layer; 2],
    dec_convs: [Layer; 3],
    dec_out: Layer,
    mixing: ParamId,
    heads: Vec<Layer>,
    classifier: Layer,
}

/// How a parameter tensor is initialized.
#[derive(Clone, Copy)]
enum Init {
    /// Normal with std `sqrt(gain / fan_in)`.
    Normal { gain: f64 },
    Zero,
}

struct Builder<'a, T: Real> {
    params: ParamStore<T>,
    rng: Option<&'a mut Rng>,
}

impl<T: Real> Builder<'_, T> {
    fn tensor(&mut self, name: &str, shape: &[usize], fan_in: usize, init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = match (init, self.rng.as_deref_mut()) {
            (Init::Normal { gain }, Some(rng)) => {
                let std = (gain / fan_in as f64).sqrt();
                (0..n).map(|_| T::of(rng.normal() * std)).collect()
            }
            _ => vec![T::zero(); n],
        };
        self.params.insert(name, Tensor::new(shape, data)?)
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, gain: f64) -> Result<Layer> {
        let fan_in = c_in * KERNEL * KERNEL;
        Ok(Layer {
            w: self.tensor(&format!("{name}.w"), &[c_out, c_in, KERNEL, KERNEL], fan_in, Init::Normal { gain })?,
            b: self.tensor(&format!("{name}.b"), &[c_out], fan_in, Init::Zero)?,
        })
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Result<Layer> {
        Ok(Layer {
            w: self.tensor(&format!("{name}.w"), &[fan_out, fan_in], fan_in, Init::Normal { gain })?,
            b: self.tensor(&format!("{name}.b"), &[fan_out], fan_in, Init::Zero)?,
        })
    }
}

/// The full model: encoder `Q`, decoder `P`, mixing matrix `A`, subspace heads
/// `F_i` and the subspace classifier.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    ids: ParamIds,
    mixing: MixingMatrix<T>,
}

impl<T: Real> Model<T> {
    /// He-initialized convolutions, zero biases and `A = I + 0.01·N(0, 1)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let mut model = Self::build(config, Some(&mut rng))?;
        let d = model.config.layout.total();
        let a = model.ids.mixing;
        let data = model.params.data_mut(a);
        for i in 0..d {
            for j in 0..d {
                let eye = if i == j { 1.0 } else { 0.0 };
                data[i * d + j] = T::of(eye + 0.01 * rng.normal());
            }
        }
        model.refresh_inverse()?;
        Ok(model)
    }

    /// Every weight and bias zero, except `A = I`.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut model = Self::build(config, None)?;
        let d = model.config.layout.total();
        let a = model.ids.mixing;
        let data = model.params.data_mut(a);
        for i in 0..d {
            data[i * d + i] = T::one();
        }
        model.refresh_inverse()?;
        Ok(model)
    }

    fn build(config: ModelConfig, rng: Option<&mut Rng>) -> Result<Self> {
        let layout = config.layout.clone();
        let mut b = Builder {
            params: ParamStore::new(),
            rng,
        };
        let [e1, e2, e3] = ENCODER_CHANNELS;
        let enc_convs = [
            b.conv("enc.conv1", CHANNELS, e1, 2.0)?,
            b.conv("enc.conv2", e1, e2, 2.0)?,
            b.conv("enc.conv3", e2, e3, 2.0)?,
        ];
        let enc_res = [b.conv("enc.res.conv1", e3, e3, 2.0)?, b.conv("enc.res.conv2", e3, e3, 1.0)?];
        let enc_fc = b.linear("enc.fc", FLAT, layout.total(), 1.0)?;
        let dec_fc = b.linear("dec.fc", layout.total(), FLAT, 1.0)?;
        let dec_res = [
            b.conv("dec.res.conv1", BOTTLENECK_CHANNELS, BOTTLENECK_CHANNELS, 2.0)?,
            b.conv("dec.res.conv2", BOTTLENECK_CHANNELS, BOTTLENECK_CHANNELS, 1.0)?,
        ];
        let [d1, d2, d3] = DECODER_CHANNELS;
        let dec_convs = [
            b.conv("dec.up1", BOTTLENECK_CHANNELS, d1, 2.0)?,
            b.conv("dec.up2", d1, d2, 2.0)?,
            b.conv("dec.up3", d2, d3, 2.0)?,
        ];
        let dec_out = b.conv("dec.out", d3, CHANNELS, 1.0)?;
        let d = layout.total();
        let mixing = b.tensor("isa.A", &[d, d], d, Init::Zero)?;
        let heads = (0..layout.count())
            .map(|i| b.linear(&format!("head.{i}"), layout.dim(i), layout.d_max(), 2.0))
            .collect::<Result<Vec<_>>>()?;
        let classifier = b.linear("classifier", layout.d_max(), layout.count(), 1.0)?;
        let ids = ParamIds {
            enc_convs,
            enc_res,
            enc_fc,
            dec_fc,
            dec_res,
            dec_convs,
            dec_out,
            mixing,
            heads,
            classifier,
        };
        Ok(Model {
            mixing: MixingMatrix::new(mixing, d),
            config,
            params: b.params,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &SubspaceLayout {
        &self.config.layout
    }

    pub fn isa_enabled(&self) -> bool {
        self.config.enable_isa
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn mixing(&self) -> &MixingMatrix<T> {
        &self.mixing
    }

    pub fn mixing_param(&self) -> ParamId {
        self.ids.mixing
    }

    /// Encoder and decoder parameters (`Q` and `P`).
    pub fn autoencoder_params(&self) -> Vec<ParamId> {
        let ids = &self.ids;
        let mut out = Vec::new();
        for l in ids
            .enc_convs
            .iter()
            .chain(&ids.enc_res)
            .chain([&ids.enc_fc, &ids.dec_fc])
            .chain(&ids.dec_res)
            .chain(&ids.dec_convs)
            .chain([&ids.dec_out])
        {
            out.extend([l.w, l.b]);
        }
        out
    }

    /// Subspace heads and classifier parameters.
    pub fn entropy_params(&self) -> Vec<ParamId> {
        self.ids
            .heads
            .iter()
            .chain([&self.ids.classifier])
            .flat_map(|l| [l.w, l.b])
            .collect()
    }

    /// Recomputes and stamps the cached inverse of `A`.
    pub fn refresh_inverse(&mut self) -> Result<()> {
        self.mixing.refresh(&self.params)
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, l: Layer, stride: usize) -> Result<Var> {
        let w = g.param(&self.params, l.w);
        let b = g.param(&self.params, l.b);
        g.conv2d(x, w, b, stride, 1)
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, l: Layer) -> Result<Var> {
        let w = g.param(&self.params, l.w);
        let b = g.param(&self.params, l.b);
        g.linear(x, w, b)
    }

    fn residual(&self, g: &mut Graph<T>, x: Var, layers: [Layer; 2]) -> Result<Var> {
        let h = self.conv(g, x, layers[0], 1)?;
        let h = g.relu(h);
        let h = self.conv(g, h, layers[1], 1)?;
        let sum = g.add(x, h)?;
        Ok(g.relu(sum))
    }

    /// `Q`: images `N×3×32×32` to latents `N×d`.
    pub fn encode_graph(&self, g: &mut Graph<T>, images: Var) -> Result<Var> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1..] != [CHANNELS, SIZE, SIZE] {
            return Err(Error::shape("encode input", &shape, &[0, CHANNELS, SIZE, SIZE]));
        }
        let mut h = images;
        for l in self.ids.enc_convs {
            h = self.conv(g, h, l, 2)?;
            h = g.relu(h);
        }
        h = self.residual(g, h, self.ids.enc_res)?;
        let flat = g.reshape(h, &[shape[0], FLAT])?;
        self.linear(g, flat, self.ids.enc_fc)
    }

    /// `P`: latents `N×d` to images `N×3×32×32` in `(0, 1)`.
    pub fn decode_graph(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != self.layout().total() {
            return Err(Error::shape("decode input", &shape, &[0, self.layout().total()]));
        }
        let n = shape[0];
        let h = self.linear(g, z, self.ids.dec_fc)?;
        let mut h = g.reshape(h, &[n, BOTTLENECK_CHANNELS, BOTTLENECK_SIDE, BOTTLENECK_SIDE])?;
        h = self.residual(g, h, self.ids.dec_res)?;
        for l in self.ids.dec_convs {
            h = g.upsample2x(h)?;
            h = self.conv(g, h, l, 1)?;
            h = g.relu(h);
        }
        let out = self.conv(g, h, self.ids.dec_out, 1)?;
        Ok(g.sigmoid(out))
    }

    /// `s = A⁻¹·z` row-wise on `N×d`; identity when the subspace layer is disabled.
    pub fn sources_graph(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        if !self.isa_enabled() {
            return Ok(z);
        }
        let a = g.param(&self.params, self.ids.mixing);
        let inv = g.inverse_with(a, self.mixing.current_inverse(&self.params)?)?;
        let inv_t = g.transpose(inv)?;
        g.matmul(z, inv_t)
    }

    /// `z = A·s` row-wise on `N×d`; identity when the subspace layer is disabled.
    pub fn latent_graph(&self, g: &mut Graph<T>, s: Var) -> Result<Var> {
        if !self.isa_enabled() {
            return Ok(s);
        }
        let a = g.param(&self.params, self.ids.mixing);
        let a_t = g.transpose(a)?;
        g.matmul(s, a_t)
    }

    /// `F_i`: ReLU-activated projection of subspace `i` of `s: N×d` to `N×d_max`.
    pub fn head_graph(&self, g: &mut Graph<T>, s: Var, i: usize) -> Result<Var> {
        let layout = self.layout();
        if i >= layout.count() {
            return Err(Error::Config(format!("subspace index {i} out of range 0..{}", layout.count())));
        }
        let part = g.narrow(s, 1, layout.offset(i), layout.dim(i))?;
        let h = self.linear(g, part, self.ids.heads[i])?;
        Ok(g.relu(h))
    }

    /// Classifier logits for embedded rows `N×d_max`.
    pub fn classifier_logits(&self, g: &mut Graph<T>, embedded: Var) -> Result<Var> {
        let shape = g.shape(embedded);
        if shape.len() != 2 || shape[1] != self.layout().d_max() {
            return Err(Error::shape("classifier input", shape, &[0, self.layout().d_max()]));
        }
        self.linear(g, embedded, self.ids.classifier)
    }

    /// Stacks `F_1(s) … F_C(s)` row-wise (`C·N×d_max`) and returns class logits.
    pub fn stacked_logits(&self, g: &mut Graph<T>, s: Var) -> Result<Var> {
        let heads = (0..self.layout().count())
            .map(|i| self.head_graph(g, s, i))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat(&heads, 0)?;
        self.classifier_logits(g, stacked)
    }

    fn images_tensor(&self, images: &[Image]) -> Result<Vec<T>> {
        let mut data = Vec::with_capacity(images.len() * CHANNELS * SIZE * SIZE);
        for img in images {
            if img.height != SIZE || img.width != SIZE {
                return Err(Error::shape("encode image", &[CHANNELS, img.height, img.width], &[CHANNELS, SIZE, SIZE]));
            }
            data.extend(img.data.iter().map(|&v| T::of(v as f64)));
        }
        Ok(data)
    }

    /// Latent codes of `images`.
    pub fn encode(&self, images: &[Image]) -> Result<Vec<Vec<T>>> {
        let d = self.layout().total();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::inference();
            let x = g.constant(&[chunk.len(), CHANNELS, SIZE, SIZE], self.images_tensor(chunk)?)?;
            let z = self.encode_graph(&mut g, x)?;
            out.extend(g.value(z).chunks(d).map(<[T]>::to_vec));
        }
        Ok(out)
    }

    pub fn encode_one(&self, image: &Image) -> Result<Vec<T>> {
        Ok(self.encode(std::slice::from_ref(image))?.remove(0))
    }

    pub fn decode(&self, latents: &[Vec<T>]) -> Result<Vec<Image>> {
        let d = self.layout().total();
        let mut out = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(INFERENCE_CHUNK) {
            let mut flat = Vec::with_capacity(chunk.len() * d);
            for z in chunk {
                if z.len() != d {
                    return Err(Error::shape("decode latent", &[z.len()], &[d]));
                }
                flat.extend_from_slice(z);
            }
            let mut g = Graph::inference();
            let z = g.constant(&[chunk.len(), d], flat)?;
            let y = self.decode_graph(&mut g, z)?;
            let per = CHANNELS * SIZE * SIZE;
            for img in g.value(y).chunks(per) {
                out.push(Image::new(SIZE, SIZE, img.iter().map(|v| v.f64() as f32).collect())?);
            }
        }
        Ok(out)
    }

    pub fn decode_one(&self, z: &[T]) -> Result<Image> {
        Ok(self.decode(&[z.to_vec()])?.remove(0))
    }

    /// `decode(encode(x))`; never passes through the mixing matrix.
    pub fn reconstruct(&self, images: &[Image]) -> Result<Vec<Image>> {
        let z = self.encode(images)?;
        self.decode(&z)
    }

    pub fn to_sources(&self, z: &[T]) -> Result<Vec<T>> {
        self.check_len(z)?;
        if !self.isa_enabled() {
            return Ok(z.to_vec());
        }
        let inv = self.mixing.current_inverse(&self.params)?;
        Ok(matvec(&inv, z))
    }

    pub fn to_latent(&self, s: &[T]) -> Result<Vec<T>> {
        self.check_len(s)?;
        if !self.isa_enabled() {
            return Ok(s.to_vec());
        }
        Ok(matvec(self.params.get(self.ids.mixing).data(), s))
    }

    fn check_len(&self, v: &[T]) -> Result<()> {
        let d = self.layout().total();
        if v.len() != d {
            return Err(Error::shape("latent vector", &[v.len()], &[d]));
        }
        Ok(())
    }

    /// `F_i(s)` for one source vector.
    pub fn head_forward(&self, s: &[T], i: usize) -> Result<Vec<T>> {
        self.check_len(s)?;
        let mut g = Graph::inference();
        let sv = g.constant(&[1, s.len()], s.to_vec())?;
        let h = self.head_graph(&mut g, sv, i)?;
        Ok(g.value(h).to_vec())
    }

    /// Softmax class probabilities for one embedded vector of length `d_max`.
    pub fn classify_subspace(&self, embedded: &[T]) -> Result<Vec<T>> {
        let mut g = Graph::inference();
        let e = g.constant(&[1, embedded.len()], embedded.to_vec())?;
        let logits = self.classifier_logits(&mut g, e)?;
        let p = g.softmax(logits)?;
        Ok(g.value(p).to_vec())
    }
}

fn matvec<T: Real>(m: &[T], v: &[T]) -> Vec<T> {
    let n = v.len();
    (0..n)
        .map(|i| m[i * n..(i + 1) * n].iter().zip(v).fold(T::zero(), |s, (&a, &b)| s + a * b))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, GenParams};

    fn sprites(n: usize) -> Vec<Image> {
        generate(&GenParams {
            seed: 4,
            count: n,
            ..GenParams::default()
        })
        .unwrap()
        .sprites
        .iter()
        .map(|s| s.image())
        .collect()
    }

    #[test]
    fn latent_has_default_length() {
        let model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
        let z = model.encode_one(&sprites(1)[0]).unwrap();
        assert_eq!(z.len(), 32);
    }

    #[test]
    fn zero_model_encodes_to_zero_and_decodes_to_half() {
        let model = Model::<f32>::zeros(ModelConfig::default()).unwrap();
        let z = model.encode_one(&sprites(1)[0]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let img = model.decode_one(&z).unwrap();
        assert_eq!((img.height, img.width), (32, 32));
        assert!(img.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decoder_output_in_open_unit_interval() {
        let model = Model::<f32>::new(ModelConfig::default(), 2).unwrap();
        let mut rng = Rng::new(0);
        let z: Vec<f32> = (0..32).map(|_| rng.normal() as f32 * 3.0).collect();
        let img = model.decode_one(&z).unwrap();
        assert_eq!(img.data.len(), 3 * 32 * 32);
        assert!(img.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn distinct_images_give_distinct_latents_at_init() {
        let model = Model::<f32>::new(ModelConfig::default(), 3).unwrap();
        let imgs = sprites(2);
        let z = model.encode(&imgs).unwrap();
        let diff: f32 = z[0].iter().zip(&z[1]).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-3, "{diff}");
    }

    #[test]
    fn wrong_shapes_rejected() {
        let model = Model::<f32>::new(ModelConfig::default(), 3).unwrap();
        assert!(model.encode_one(&Image::filled(16, 16, 0.0)).is_err());
        assert!(model.decode_one(&[0.0; 31]).is_err());
        assert!(model.to_sources(&[0.0; 5]).is_err());
        assert!(model.head_forward(&[0.0; 32], 5).is_err());
        assert!(model.classify_subspace(&[0.0; 11]).is_err());
    }

    #[test]
    fn identity_and_scalar_mixing() {
        let mut model = Model::<f64>::zeros(ModelConfig::default()).unwrap();
        let z: Vec<f64> = (0..32).map(|i| i as f64 - 7.5).collect();
        assert_eq!(model.to_sources(&z).unwrap(), z);
        assert_eq!(model.to_latent(&z).unwrap(), z);
        assert!(model.to_latent(&[0.0; 32]).unwrap().iter().all(|&v| v == 0.0));
        let a = model.mixing_param();
        for i in 0..32 {
            model.params_mut().data_mut(a)[i * 32 + i] = 2.0;
        }
        // Stale cache: recomputed on the fly.
        let s = model.to_sources(&z).unwrap();
        assert!(s.iter().zip(&z).all(|(s, z)| *s == z / 2.0));
    }

    #[test]
    fn sources_round_trip_random_mixing() {
        let mut model = Model::<f32>::new(ModelConfig::default(), 9).unwrap();
        let mut rng = Rng::new(1);
        let a = model.mixing_param();
        for v in model.params_mut().data_mut(a).iter_mut() {
            *v += rng.normal() as f32 / (32f32).sqrt();
        }
        model.refresh_inverse().unwrap();
        for _ in 0..20 {
            let z: Vec<f32> = (0..32).map(|_| rng.normal() as f32).collect();
            let back = model.to_latent(&model.to_sources(&z).unwrap()).unwrap();
            let zmax = z.iter().fold(0f32, |m, v| m.max(v.abs()));
            let err = back.iter().zip(&z).fold(0f32, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-4 * (1.0 + zmax), "{err}");
        }
    }

    #[test]
    fn zero_heads_and_uniform_classifier() {
        let model = Model::<f32>::zeros(ModelConfig::default()).unwrap();
        let s = vec![1.0f32; 32];
        for i in 0..5 {
            let e = model.head_forward(&s, i).unwrap();
            assert_eq!(e, vec![0.0; 12]);
        }
        let p = model.classify_subspace(&[0.3; 12]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-7));
    }

    #[test]
    fn head_relu_clamps_negative_preactivations() {
        let mut model = Model::<f32>::zeros(ModelConfig::default()).unwrap();
        let b = model.ids.heads[2].b;
        model.params_mut().data_mut(b).fill(-1.0);
        assert_eq!(model.head_forward(&[0.5; 32], 2).unwrap(), vec![0.0; 12]);
    }

    #[test]
    fn classifier_output_is_a_simplex() {
        let model = Model::<f32>::new(ModelConfig::default(), 5).unwrap();
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let s: Vec<f32> = (0..32).map(|_| rng.normal() as f32 * 2.0).collect();
            for i in 0..5 {
                let p = model.classify_subspace(&model.head_forward(&s, i).unwrap()).unwrap();
                assert_eq!(p.len(), 5);
                assert!((p.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn reconstruction_ignores_subspace_layer() {
        let model = Model::<f32>::new(ModelConfig::default(), 6).unwrap();
        let mut plain = model.clone();
        plain.config.enable_isa = false;
        let imgs = sprites(3);
        assert_eq!(model.reconstruct(&imgs).unwrap(), plain.reconstruct(&imgs).unwrap());
    }

    #[test]
    fn parameter_groups_are_disjoint_and_complete() {
        let model = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
        let mut all: Vec<ParamId> = model.autoencoder_params();
        all.extend(model.entropy_params());
        all.push(model.mixing_param());
        all.sort();
        all.dedup();
        assert_eq!(all.len(), model.params().len());
    }
}
