//! Convolutional generator with an exposed feature pyramid, and a U-Net
//! discriminator: shared encoder, scalar logit head, and a compact decoder
//! that predicts the generator's guidance feature map.
//!
//! The backbone is deliberately plain (DCGAN-style blocks): one conv per
//! resolution, nearest-neighbor upsampling, leaky ReLU. The decoder follows
//! the compact recipe: per stage, upsample the previous decoder output,
//! concatenate the matching-resolution encoder map, and apply a single
//! (default 1x1, linear) convolution. Stages stack until the guidance
//! resolution is reached; the final stage projects to the guidance map's
//! channel count.

use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    Linear,
    LeakyRelu,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Architecture hyperparameters shared by the generator and discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// Output resolution; must be a power of two >= 8.
    pub image_size: usize,
    pub z_dim: usize,
    /// Channel count at resolution image_size/2; doubles as resolution halves.
    pub base_channels: usize,
    pub max_channels: usize,
    /// Guidance resolution t: the decoder regresses the generator feature map
    /// at this resolution. Power of two in [4, image_size/2].
    pub guidance_res: usize,
    /// Decoder conv kernel: 1 or 3.
    pub decoder_kernel: usize,
    pub decoder_activation: Activation,
    pub upsample: UpsampleMode,
    /// When set, the decoder continues to full image resolution and a
    /// per-pixel class head with this many classes is attached (auxiliary
    /// segmentation mode).
    pub seg_classes: Option<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_size: 32,
            z_dim: 64,
            base_channels: 64,
            max_channels: 512,
            guidance_res: 8,
            decoder_kernel: 1,
            decoder_activation: Activation::Linear,
            upsample: UpsampleMode::Nearest,
            seg_classes: None,
        }
    }
}

impl NetConfig {
    /// The default configuration for a given resolution (guidance at
    /// image_size/4).
    pub fn for_image_size(image_size: usize) -> Self {
        NetConfig {
            image_size,
            guidance_res: (image_size / 4).max(4),
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 8 {
            return Err(Error::config(format!(
                "image_size must be a power of two >= 8, got {}",
                self.image_size
            )));
        }
        if !self.guidance_res.is_power_of_two()
            || self.guidance_res < 4
            || self.guidance_res > self.image_size / 2
        {
            return Err(Error::config(format!(
                "guidance_res must be a power of two in [4, {}], got {}",
                self.image_size / 2,
                self.guidance_res
            )));
        }
        if self.z_dim == 0 {
            return Err(Error::config("z_dim must be positive"));
        }
        if self.base_channels < 4 {
            return Err(Error::config("base_channels must be >= 4"));
        }
        if self.decoder_kernel != 1 && self.decoder_kernel != 3 {
            return Err(Error::config(format!(
                "decoder_kernel must be 1 or 3, got {}",
                self.decoder_kernel
            )));
        }
        if let Some(k) = self.seg_classes {
            if k < 2 {
                return Err(Error::config("seg_classes must be >= 2"));
            }
        }
        Ok(())
    }

    /// Channel count at spatial resolution `r`.
    pub fn channels(&self, r: usize) -> usize {
        (self.base_channels * self.image_size / (2 * r)).clamp(4, self.max_channels)
    }

    /// Resolutions of the generator pyramid taps: 4, 8, ..., image_size.
    pub fn tap_resolutions(&self) -> Vec<usize> {
        let mut v = vec![4];
        let mut r = 8;
        while r <= self.image_size {
            v.push(r);
            r *= 2;
        }
        v
    }
}

/// Named, ordered parameter storage. Order is fixed at construction, which
/// keeps optimizer state, checkpoints and digests aligned.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.entries.push((name.into(), t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), &mut *t))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Create one graph leaf per parameter, in storage order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| g.leaf(t.clone()))
            .collect()
    }

    /// FNV-1a digest over the exact parameter bytes; any bit flip changes it.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in &self.entries {
            eat(name.as_bytes());
            for v in t.iter() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

/// Total scalar parameter count of a parameter set.
pub fn count_params(params: &ParamSet) -> usize {
    params.scalar_count()
}

#[derive(Clone, Copy, Debug)]
struct ConvIdx {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_shape_fn(IxDyn(shape), |_| {
        let n: f64 = rng.sample(StandardNormal);
        n * std
    })
}

fn add_conv(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    out_ch: usize,
    in_ch: usize,
    kernel: usize,
    stride: usize,
) -> ConvIdx {
    let w = he_normal(rng, &[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel);
    let wi = params.push(format!("{name}.w"), w);
    let bi = params.push(format!("{name}.b"), Tensor::zeros(IxDyn(&[out_ch])));
    ConvIdx {
        w: wi,
        b: bi,
        stride,
        pad: kernel / 2,
    }
}

fn apply_conv(g: &mut Graph, bound: &[Var], c: ConvIdx, x: Var) -> Var {
    let y = g.conv2d(x, bound[c.w], c.stride, c.pad);
    g.add_bias(y, bound[c.b])
}

fn upsample(g: &mut Graph, mode: UpsampleMode, x: Var) -> Var {
    match mode {
        UpsampleMode::Nearest => g.upsample_nearest2x(x),
        UpsampleMode::Bilinear => g.upsample_bilinear2x(x),
    }
}

/// Generator forward output: image plus the tapped feature pyramid, as graph
/// vars.
pub struct GeneratorOutput {
    pub image: Var,
    pub pyramid: BTreeMap<usize, Var>,
}

/// Forward output captured as plain tensors (detached from any graph).
pub struct GeneratorValue {
    pub image: Tensor,
    pub pyramid: BTreeMap<usize, Tensor>,
}

pub struct Generator {
    pub cfg: NetConfig,
    pub params: ParamSet,
    seed: ConvIdx,
    blocks: Vec<(usize, ConvIdx)>,
    to_rgb: ConvIdx,
}

impl Generator {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let ch4 = cfg.channels(4);
        let seed = add_conv(&mut params, rng, "seed", ch4 * 16, cfg.z_dim, 1, 1);
        let mut blocks = Vec::new();
        let mut r = 8;
        while r <= cfg.image_size {
            let c = add_conv(
                &mut params,
                rng,
                &format!("block{r}"),
                cfg.channels(r),
                cfg.channels(r / 2),
                3,
                1,
            );
            blocks.push((r, c));
            r *= 2;
        }
        let to_rgb = add_conv(&mut params, rng, "to_rgb", 3, cfg.channels(cfg.image_size), 1, 1);
        Ok(Generator {
            cfg: cfg.clone(),
            params,
            seed,
            blocks,
            to_rgb,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Graph forward. `bound` must come from `self.params.bind(graph)` (or be
    /// per-entry `stop_grad`/leaf equivalents in the same order). `z` has
    /// shape [batch, z_dim].
    pub fn forward(&self, g: &mut Graph, bound: &[Var], z: Var) -> GeneratorOutput {
        let zs = g.shape(z).to_vec();
        assert_eq!(zs.len(), 2, "latent batch must be [n, z_dim]");
        assert_eq!(zs[1], self.cfg.z_dim, "latent dim mismatch");
        let n = zs[0];
        let ch4 = self.cfg.channels(4);
        let z4 = g.reshape(z, &[n, self.cfg.z_dim, 1, 1]);
        let s = apply_conv(g, bound, self.seed, z4);
        let s = g.reshape(s, &[n, ch4, 4, 4]);
        let mut h = g.leaky_relu(s, LEAKY_SLOPE);
        let mut pyramid = BTreeMap::new();
        pyramid.insert(4, h);
        for &(r, c) in &self.blocks {
            let up = upsample(g, self.cfg.upsample, h);
            let y = apply_conv(g, bound, c, up);
            h = g.leaky_relu(y, LEAKY_SLOPE);
            pyramid.insert(r, h);
        }
        let rgb = apply_conv(g, bound, self.to_rgb, h);
        let image = g.tanh(rgb);
        GeneratorOutput { image, pyramid }
    }
}

/// Sample a batch of latent codes from the standard normal.
pub fn sample_latents(rng: &mut ChaCha8Rng, n: usize, z_dim: usize) -> Tensor {
    Tensor::from_shape_fn(IxDyn(&[n, z_dim]), |_| rng.sample(StandardNormal))
}

/// Run the generator on a latent batch, returning detached tensors.
pub fn generate(gen: &Generator, z: &Tensor) -> Result<GeneratorValue> {
    if z.ndim() != 2 || z.shape()[1] != gen.cfg.z_dim {
        return Err(Error::input(format!(
            "latent batch must be [n, {}], got {:?}",
            gen.cfg.z_dim,
            z.shape()
        )));
    }
    if z.shape()[0] == 0 {
        return Err(Error::input("latent batch is empty"));
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::input("latent batch contains non-finite values"));
    }
    let mut g = Graph::new();
    let bound = gen.params.bind(&mut g);
    let zv = g.leaf(z.clone());
    let out = gen.forward(&mut g, &bound, zv);
    Ok(GeneratorValue {
        image: g.val(out.image).clone(),
        pyramid: out
            .pyramid
            .iter()
            .map(|(&r, &v)| (r, g.val(v).clone()))
            .collect(),
    })
}

/// Discriminator forward output as graph vars.
pub struct DiscriminatorOutput {
    /// Pre-sigmoid real/fake logit, shape [batch].
    pub logit: Var,
    /// Decoder stage outputs keyed by resolution. The entry at the guidance
    /// resolution matches the generator pyramid map's shape exactly.
    pub decoder_maps: BTreeMap<usize, Var>,
    /// Encoder activations keyed by resolution (image_size down to 4).
    pub encoder_maps: BTreeMap<usize, Var>,
    /// Per-pixel class logits at image resolution (aux segmentation mode).
    pub seg_logits: Option<Var>,
}

/// Forward output captured as plain tensors.
pub struct DiscriminatorValue {
    pub logit: Tensor,
    pub decoder_maps: BTreeMap<usize, Tensor>,
    pub seg_logits: Option<Tensor>,
}

/// Frozen-encoder activations at one resolution, computed in small chunks.
pub fn encoder_features(disc: &Discriminator, images: &Tensor, res: usize) -> Result<Tensor> {
    use ndarray::{Axis, Slice};
    let n = images.shape()[0];
    let mut out: Option<Tensor> = None;
    let mut start = 0;
    while start < n {
        let end = (start + 32).min(n);
        let chunk = images
            .slice_axis(Axis(0), Slice::from(start..end))
            .to_owned();
        let mut g = Graph::new();
        let bound = disc.params.bind(&mut g);
        let iv = g.leaf(chunk);
        let dout = disc.forward(&mut g, &bound, iv);
        let fmap = dout
            .encoder_maps
            .get(&res)
            .ok_or_else(|| Error::config(format!("no encoder map at resolution {res}")))?;
        let vals = g.val(*fmap).clone();
        match &mut out {
            None => {
                let mut shape = vals.shape().to_vec();
                shape[0] = n;
                let mut full = Tensor::zeros(ndarray::IxDyn(&shape));
                full.slice_axis_mut(Axis(0), Slice::from(start..end))
                    .assign(&vals);
                out = Some(full);
            }
            Some(full) => {
                full.slice_axis_mut(Axis(0), Slice::from(start..end))
                    .assign(&vals);
            }
        }
        start = end;
    }
    Ok(out.unwrap())
}

pub struct Discriminator {
    pub cfg: NetConfig,
    pub params: ParamSet,
    from_rgb: ConvIdx,
    downs: Vec<ConvIdx>,
    head_conv: ConvIdx,
    head_fc: ConvIdx,
    dec_stages: Vec<(usize, ConvIdx)>,
    seg_head: Option<ConvIdx>,
    decoder_param_range: (usize, usize),
}

impl Discriminator {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let s = cfg.image_size;
        let from_rgb = add_conv(&mut params, rng, "from_rgb", cfg.channels(s), 3, 3, 1);
        let mut downs = Vec::new();
        let mut r = s;
        while r > 4 {
            let c = add_conv(
                &mut params,
                rng,
                &format!("enc{}", r / 2),
                cfg.channels(r / 2),
                cfg.channels(r),
                3,
                2,
            );
            downs.push(c);
            r /= 2;
        }
        let ch4 = cfg.channels(4);
        let head_conv = add_conv(&mut params, rng, "head.conv", ch4, ch4, 3, 1);
        let head_fc = add_conv(&mut params, rng, "head.fc", 1, ch4 * 16, 1, 1);

        // decoder: from the deepest encoder map up to the guidance resolution
        // (and on to image resolution in aux segmentation mode)
        let dec_start = params.len();
        let top = if cfg.seg_classes.is_some() {
            s
        } else {
            cfg.guidance_res
        };
        let mut dec_stages = Vec::new();
        let mut prev_ch = ch4;
        if cfg.guidance_res == 4 {
            // degenerate decoder: a single projection of the deepest encoder map
            let c = add_conv(&mut params, rng, "dec4", ch4, ch4, cfg.decoder_kernel, 1);
            dec_stages.push((4, c));
        }
        let mut r = 8;
        while r <= top {
            let out_ch = if r == cfg.guidance_res {
                cfg.channels(cfg.guidance_res)
            } else {
                (cfg.channels(r) / 2).max(8)
            };
            let c = add_conv(
                &mut params,
                rng,
                &format!("dec{r}"),
                out_ch,
                prev_ch + cfg.channels(r),
                cfg.decoder_kernel,
                1,
            );
            dec_stages.push((r, c));
            prev_ch = out_ch;
            r *= 2;
        }
        let seg_head = cfg
            .seg_classes
            .map(|k| add_conv(&mut params, rng, "seg", k, prev_ch, 1, 1));
        let dec_end = params.len();

        Ok(Discriminator {
            cfg: cfg.clone(),
            params,
            from_rgb,
            downs,
            head_conv,
            head_fc,
            dec_stages,
            seg_head,
            decoder_param_range: (dec_start, dec_end),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Scalar parameters belonging to the U-Net decoder (and segmentation
    /// head, when present).
    pub fn decoder_param_count(&self) -> usize {
        let (a, b) = self.decoder_param_range;
        (a..b).map(|i| self.params.tensor(i).len()).sum()
    }

    /// Graph forward on an image batch [n, 3, s, s].
    pub fn forward(&self, g: &mut Graph, bound: &[Var], image: Var) -> DiscriminatorOutput {
        let sh = g.shape(image).to_vec();
        let s = self.cfg.image_size;
        assert_eq!(sh.len(), 4, "image batch must be NCHW");
        assert_eq!((sh[1], sh[2], sh[3]), (3, s, s), "image shape mismatch");
        let n = sh[0];

        let mut enc = BTreeMap::new();
        let y = apply_conv(g, bound, self.from_rgb, image);
        let mut h = g.leaky_relu(y, LEAKY_SLOPE);
        enc.insert(s, h);
        let mut r = s;
        for &c in &self.downs {
            let y = apply_conv(g, bound, c, h);
            h = g.leaky_relu(y, LEAKY_SLOPE);
            r /= 2;
            enc.insert(r, h);
        }
        let e4 = h;

        let y = apply_conv(g, bound, self.head_conv, e4);
        let hh = g.leaky_relu(y, LEAKY_SLOPE);
        let flat = g.reshape(hh, &[n, self.cfg.channels(4) * 16, 1, 1]);
        let logit4 = apply_conv(g, bound, self.head_fc, flat);
        let logit = g.reshape(logit4, &[n]);

        let mut decoder_maps = BTreeMap::new();
        let mut d = e4;
        for &(r, c) in &self.dec_stages {
            let y = if r == 4 {
                apply_conv(g, bound, c, d)
            } else {
                let up = upsample(g, self.cfg.upsample, d);
                let cat = g.concat_channels(up, enc[&r]);
                apply_conv(g, bound, c, cat)
            };
            d = match self.cfg.decoder_activation {
                Activation::Linear => y,
                Activation::LeakyRelu => g.leaky_relu(y, LEAKY_SLOPE),
            };
            decoder_maps.insert(r, d);
        }
        let seg_logits = self.seg_head.map(|c| apply_conv(g, bound, c, d));

        DiscriminatorOutput {
            logit,
            decoder_maps,
            encoder_maps: enc,
            seg_logits,
        }
    }
}

/// Run the discriminator on an image batch, returning detached tensors.
pub fn discriminate(disc: &Discriminator, image: &Tensor) -> Result<DiscriminatorValue> {
    let s = disc.cfg.image_size;
    if image.ndim() != 4 || image.shape()[1] != 3 || image.shape()[2] != s || image.shape()[3] != s
    {
        return Err(Error::input(format!(
            "image batch must be [n, 3, {s}, {s}], got {:?}",
            image.shape()
        )));
    }
    if image.shape()[0] == 0 {
        return Err(Error::input("image batch is empty"));
    }
    let mut g = Graph::new();
    let bound = disc.params.bind(&mut g);
    let iv = g.leaf(image.clone());
    let out = disc.forward(&mut g, &bound, iv);
    Ok(DiscriminatorValue {
        logit: g.val(out.logit).clone(),
        decoder_maps: out
            .decoder_maps
            .iter()
            .map(|(&r, &v)| (r, g.val(v).clone()))
            .collect(),
        seg_logits: out.seg_logits.map(|v| g.val(v).clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_cfg() -> NetConfig {
        NetConfig {
            base_channels: 8,
            ..NetConfig::default()
        }
    }

    #[test]
    fn taps_double_from_4x4_seed() {
        let cfg = small_cfg();
        let gen = Generator::new(&cfg, &mut rng(0)).unwrap();
        let z = sample_latents(&mut rng(1), 2, cfg.z_dim);
        let out = generate(&gen, &z).unwrap();
        let taps: Vec<usize> = out.pyramid.keys().copied().collect();
        assert_eq!(taps, vec![4, 8, 16, 32]);

        let cfg64 = NetConfig {
            base_channels: 8,
            ..NetConfig::for_image_size(64)
        };
        let gen = Generator::new(&cfg64, &mut rng(0)).unwrap();
        let z = sample_latents(&mut rng(1), 1, cfg64.z_dim);
        let out = generate(&gen, &z).unwrap();
        let taps: Vec<usize> = out.pyramid.keys().copied().collect();
        assert_eq!(taps, vec![4, 8, 16, 32, 64]);
    }

    #[test]
    fn non_power_of_two_image_size_rejected() {
        let cfg = NetConfig {
            image_size: 48,
            ..NetConfig::default()
        };
        assert!(matches!(
            Generator::new(&cfg, &mut rng(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_guidance_res_rejected() {
        for t in [2, 3, 32, 64] {
            let cfg = NetConfig {
                guidance_res: t,
                ..NetConfig::default()
            };
            assert!(
                matches!(Discriminator::new(&cfg, &mut rng(0)), Err(Error::Config(_))),
                "t={t} should be rejected"
            );
        }
    }

    #[test]
    fn generate_shapes_and_determinism() {
        let cfg = small_cfg();
        let gen = Generator::new(&cfg, &mut rng(5)).unwrap();
        let z = sample_latents(&mut rng(6), 4, cfg.z_dim);
        let a = generate(&gen, &z).unwrap();
        assert_eq!(a.image.shape(), &[4, 3, 32, 32]);
        assert_eq!(a.pyramid[&8].shape(), &[4, cfg.channels(8), 8, 8]);
        // bounded output
        assert!(a.image.iter().all(|v| v.abs() <= 1.0));
        // deterministic
        let b = generate(&gen, &z).unwrap();
        assert_eq!(a.image, b.image);
        // sensitivity: a one-coordinate change must move the output
        let mut z2 = z.clone();
        z2[[0, 0]] += 0.37;
        let c = generate(&gen, &z2).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn non_finite_latent_rejected() {
        let cfg = small_cfg();
        let gen = Generator::new(&cfg, &mut rng(5)).unwrap();
        let mut z = sample_latents(&mut rng(6), 2, cfg.z_dim);
        z[[1, 3]] = f64::NAN;
        assert!(matches!(generate(&gen, &z), Err(Error::Input(_))));
    }

    #[test]
    fn discriminator_shapes_match_contract() {
        let cfg = small_cfg();
        let disc = Discriminator::new(&cfg, &mut rng(7)).unwrap();
        let gen = Generator::new(&cfg, &mut rng(8)).unwrap();
        let z = sample_latents(&mut rng(9), 4, cfg.z_dim);
        let gv = generate(&gen, &z).unwrap();
        let dv = discriminate(&disc, &gv.image).unwrap();
        assert_eq!(dv.logit.shape(), &[4]);
        // guidance-resolution decoder map matches the pyramid map exactly
        assert_eq!(
            dv.decoder_maps[&cfg.guidance_res].shape(),
            gv.pyramid[&cfg.guidance_res].shape()
        );
        // single upsample from 4 when t == 8
        let stages: Vec<usize> = dv.decoder_maps.keys().copied().collect();
        assert_eq!(stages, vec![8]);
        // determinism
        let dv2 = discriminate(&disc, &gv.image).unwrap();
        assert_eq!(dv.logit, dv2.logit);
    }

    #[test]
    fn decoder_stage_stacking_to_guidance() {
        // image 256 with t=64 -> stages 8,16,32,64; kept desk-sized via tiny channels
        let cfg = NetConfig {
            base_channels: 4,
            max_channels: 16,
            ..NetConfig::for_image_size(256)
        };
        assert_eq!(cfg.guidance_res, 64);
        let disc = Discriminator::new(&cfg, &mut rng(2)).unwrap();
        let stages: Vec<usize> = disc.dec_stages.iter().map(|&(r, _)| r).collect();
        assert_eq!(stages, vec![8, 16, 32, 64]);
    }

    #[test]
    fn wrong_image_shape_rejected() {
        let cfg = small_cfg();
        let disc = Discriminator::new(&cfg, &mut rng(3)).unwrap();
        let bad = Tensor::zeros(IxDyn(&[2, 3, 16, 16]));
        assert!(matches!(discriminate(&disc, &bad), Err(Error::Input(_))));
    }

    #[test]
    fn decoder_overhead_within_bound_at_defaults() {
        for s in [32usize, 64] {
            let cfg = NetConfig::for_image_size(s);
            let disc = Discriminator::new(&cfg, &mut rng(4)).unwrap();
            let frac = disc.decoder_param_count() as f64 / disc.param_count() as f64;
            assert!(
                frac <= 0.08,
                "decoder fraction {frac:.4} exceeds 8% at image_size={s}"
            );
        }
    }

    #[test]
    fn count_params_examples() {
        // single 1x1 conv, 8 -> 16 channels, with bias
        let mut p = ParamSet::new();
        p.push("w", Tensor::zeros(IxDyn(&[16, 8, 1, 1])));
        p.push("b", Tensor::zeros(IxDyn(&[16])));
        assert_eq!(count_params(&p), 8 * 16 + 16);
        assert_eq!(count_params(&ParamSet::new()), 0);
        // discriminator with vs without decoder differs by the decoder size
        let cfg = small_cfg();
        let with = Discriminator::new(&cfg, &mut rng(1)).unwrap();
        assert!(with.decoder_param_count() > 0);
        assert!(with.param_count() > with.decoder_param_count());
    }

    #[test]
    fn seg_mode_extends_decoder_to_image_resolution() {
        let cfg = NetConfig {
            base_channels: 8,
            seg_classes: Some(4),
            ..NetConfig::default()
        };
        let disc = Discriminator::new(&cfg, &mut rng(11)).unwrap();
        let img = Tensor::zeros(IxDyn(&[2, 3, 32, 32]));
        let dv = discriminate(&disc, &img).unwrap();
        let stages: Vec<usize> = dv.decoder_maps.keys().copied().collect();
        assert_eq!(stages, vec![8, 16, 32]);
        let seg = dv.seg_logits.expect("seg head missing");
        assert_eq!(seg.shape(), &[2, 4, 32, 32]);
    }
}
