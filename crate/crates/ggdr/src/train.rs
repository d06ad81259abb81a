//! Alternating D/G optimization: the adversarial objectives plus the
//! generator-guided decoder regularizer on fake images, lazy R1 on reals,
//! paired geometric augmentation, EMA weights, CSV logging and bit-exact
//! checkpoint/resume.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{self, AdaState, GeometricTransform};
use crate::autodiff::{Graph, Tensor};
use crate::checkpoint::Archive;
use crate::data_io::{BatchIter, Dataset};
use crate::error::{Error, Result};
use crate::losses::{self, LossReport};
use crate::nets::{
    sample_latents, Activation, Discriminator, Generator, GeneratorOutput, NetConfig, ParamSet,
    UpsampleMode,
};
use crate::optim::Adam;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Fixed per-op application probability (ignored when adaptive).
    pub p: f64,
    pub adaptive: bool,
    pub target_rt: f64,
    pub step_size: f64,
    pub window: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: false,
            p: 0.0,
            adaptive: false,
            target_rt: 0.6,
            step_size: 0.002,
            window: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_reg: f64,
    pub r1_gamma: f64,
    /// Lazy R1 cadence: the penalty is applied every this many d-steps,
    /// scaled by the interval.
    pub r1_interval: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub ema_enabled: bool,
    pub ema_decay: f64,
    /// First step at which the regularizer activates.
    pub ggdr_start_step: u64,
    /// Train the decoder's per-pixel class head on real images.
    pub aux_seg_mode: bool,
    pub log_interval: u64,
    pub ckpt_interval: u64,
    pub sample_interval: u64,
    pub aug: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_reg: 10.0,
            r1_gamma: 1.0,
            r1_interval: 16,
            lr: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            batch_size: 16,
            total_steps: 20_000,
            seed: 0,
            ema_enabled: true,
            ema_decay: 0.999,
            ggdr_start_step: 0,
            aux_seg_mode: false,
            log_interval: 50,
            ckpt_interval: 5_000,
            sample_interval: 0,
            aug: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_reg < 0.0 {
            return Err(Error::config("lambda_reg must be >= 0"));
        }
        if self.r1_gamma < 0.0 {
            return Err(Error::config("r1_gamma must be >= 0"));
        }
        if self.r1_interval == 0 {
            return Err(Error::config("r1_interval must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay must lie in [0, 1]"));
        }
        if self.aug.enabled && !(0.0..=1.0).contains(&self.aug.p) {
            return Err(Error::config("augment.p must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Full mutable training state; serializable bit-exactly.
pub struct TrainState {
    pub net_cfg: NetConfig,
    pub cfg: TrainConfig,
    pub gen: Generator,
    pub disc: Discriminator,
    pub ema: ParamSet,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub ada: AdaState,
    pub data_epoch: u64,
    pub data_pos: usize,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl TrainState {
    pub fn new(net_cfg: &NetConfig, cfg: &TrainConfig) -> Result<Self> {
        net_cfg.validate()?;
        cfg.validate()?;
        let gen = Generator::new(net_cfg, &mut stream_rng(cfg.seed, 1))?;
        let disc = Discriminator::new(net_cfg, &mut stream_rng(cfg.seed, 2))?;
        let ema = gen.params.clone();
        let opt_g = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, &gen.params);
        let opt_d = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, &disc.params);
        let ada = AdaState {
            p: if cfg.aug.enabled && !cfg.aug.adaptive {
                cfg.aug.p
            } else {
                0.0
            },
            target_rt: cfg.aug.target_rt,
            step_size: cfg.aug.step_size,
            window: cfg.aug.window,
            history: Default::default(),
        };
        Ok(TrainState {
            net_cfg: net_cfg.clone(),
            cfg: cfg.clone(),
            gen,
            disc,
            ema,
            opt_g,
            opt_d,
            step: 0,
            rng: stream_rng(cfg.seed, 3),
            ada,
            data_epoch: 0,
            data_pos: 0,
        })
    }

    /// Effective augmentation probability for the current step.
    pub fn aug_p(&self) -> f64 {
        if !self.cfg.aug.enabled {
            0.0
        } else if self.cfg.aug.adaptive {
            self.ada.p
        } else {
            self.cfg.aug.p
        }
    }

    fn sample_transforms(&mut self, n: usize) -> Result<Vec<GeometricTransform>> {
        let p = self.aug_p();
        (0..n)
            .map(|_| augment::sample_transform(&mut self.rng, p))
            .collect()
    }

    /// One discriminator update on a real batch (paired with freshly
    /// generated fakes). Generator parameters are untouched.
    pub fn d_step(
        &mut self,
        real: &Tensor,
        real_masks: Option<&ArrayD<usize>>,
    ) -> Result<LossReport> {
        let n = real.shape()[0];
        if n == 0 {
            return Err(Error::input("d_step: empty real batch"));
        }
        let t = self.net_cfg.guidance_res;
        let ggdr_active = self.cfg.lambda_reg > 0.0 && self.step >= self.cfg.ggdr_start_step;

        // fakes, detached from the generator by construction (separate graph)
        let z = sample_latents(&mut self.rng, n, self.net_cfg.z_dim);
        let (mut fake_img, mut fake_pyr_t) = {
            let mut gg = Graph::new();
            let gb = self.gen.params.bind(&mut gg);
            let zv = gg.leaf(z);
            let out = self.gen.forward(&mut gg, &gb, zv);
            (
                gg.val(out.image).clone(),
                gg.val(out.pyramid[&t]).clone(),
            )
        };

        // paired augmentation: the same transform instance warps a fake image
        // and its guidance map; reals get their own transforms
        let mut real_in = real.clone();
        let aug_on = self.cfg.aug.enabled;
        if aug_on {
            let ts_fake = self.sample_transforms(n)?;
            fake_img = augment::apply_per_sample(&ts_fake, &fake_img);
            fake_pyr_t = {
                let per_map: Vec<Tensor> = vec![];
                drop(per_map);
                // feature maps receive exactly the paired transforms
                let mut out = fake_pyr_t.clone();
                for (i, tr) in ts_fake.iter().enumerate() {
                    debug_assert_eq!(tr.id, ts_fake[i].id);
                }
                out = augment::apply_per_sample(&ts_fake, &out);
                out
            };
            if !self.cfg.aux_seg_mode {
                let ts_real = self.sample_transforms(n)?;
                real_in = augment::apply_per_sample(&ts_real, &real_in);
            }
        }

        let mut g = Graph::new();
        let db = self.disc.params.bind(&mut g);
        let real_v = g.leaf(real_in);
        let fake_v = g.leaf(fake_img);
        let out_real = self.disc.forward(&mut g, &db, real_v);
        let out_fake = self.disc.forward(&mut g, &db, fake_v);

        let adv = losses::adv_loss_d(&mut g, out_real.logit, out_fake.logit)?;
        let mut total = adv;

        let mut ggdr_val = 0.0;
        if ggdr_active {
            let pyr_leaf = g.leaf(fake_pyr_t);
            let gen_like = GeneratorOutput {
                image: fake_v,
                pyramid: BTreeMap::from([(t, pyr_leaf)]),
            };
            let ggdr = losses::ggdr_loss(&mut g, &out_fake, &gen_like, t)?;
            ggdr_val = g.scalar_val(ggdr);
            let scaled = g.scale(ggdr, self.cfg.lambda_reg);
            total = g.add(total, scaled);
        }

        let mut aux_val = None;
        if self.cfg.aux_seg_mode {
            let seg = out_real
                .seg_logits
                .ok_or_else(|| Error::config("aux_seg_mode requires net.seg_classes"))?;
            let masks = real_masks
                .ok_or_else(|| Error::config("aux_seg_mode requires a dataset with masks"))?;
            let ce = losses::aux_segmentation_loss(&mut g, seg, masks)?;
            aux_val = Some(g.scalar_val(ce));
            total = g.add(total, ce);
        }

        let mut r1_val = 0.0;
        if self.cfg.r1_gamma > 0.0 && self.step % self.cfg.r1_interval == 0 {
            let r1 = losses::r1_term(&mut g, out_real.logit, real_v, self.cfg.r1_gamma)?;
            let scaled = g.scale(r1, self.cfg.r1_interval as f64);
            r1_val = g.scalar_val(scaled);
            total = g.add(total, scaled);
        }

        let adv_val = g.scalar_val(adv);
        let total_val = g.scalar_val(total);
        if !total_val.is_finite() {
            return Err(Error::Diverged(format!(
                "d_step {}: non-finite loss (adv_d={adv_val}, ggdr={ggdr_val}, r1={r1_val}, aux={aux_val:?})",
                self.step
            )));
        }

        let grads = g.grad(total, &db);
        let grad_tensors: Vec<Tensor> = grads.iter().map(|&v| g.val(v).clone()).collect();
        self.opt_d.step(&mut self.disc.params, &grad_tensors);

        if self.cfg.aug.enabled && self.cfg.aug.adaptive {
            self.ada = augment::ada_update(&self.ada, g.val(out_real.logit));
        }

        Ok(LossReport {
            adv_d: adv_val,
            ggdr: ggdr_val,
            r1: r1_val,
            aux_seg: aux_val,
            total_d: total_val,
            lambda_reg: self.cfg.lambda_reg,
            r1_gamma: self.cfg.r1_gamma,
            ..LossReport::default()
        })
    }

    /// One generator update. Discriminator parameters are untouched; the
    /// regularizer contributes no gradient here.
    pub fn g_step(&mut self) -> Result<LossReport> {
        let n = self.cfg.batch_size;
        let z = sample_latents(&mut self.rng, n, self.net_cfg.z_dim);

        let mut g = Graph::new();
        let gb = self.gen.params.bind(&mut g);
        let db = self.disc.params.bind(&mut g);
        let zv = g.leaf(z);
        let gout = self.gen.forward(&mut g, &gb, zv);
        let mut fake = gout.image;
        if self.cfg.aug.enabled {
            let ts = self.sample_transforms(n)?;
            fake = augment::apply_per_sample_var(&mut g, &ts, fake);
        }
        let dout = self.disc.forward(&mut g, &db, fake);
        let adv_g = losses::adv_loss_g(&mut g, dout.logit)?;
        let adv_val = g.scalar_val(adv_g);
        if !adv_val.is_finite() {
            return Err(Error::Diverged(format!(
                "g_step {}: non-finite loss (adv_g={adv_val})",
                self.step
            )));
        }

        let grads = g.grad(adv_g, &gb);
        let grad_tensors: Vec<Tensor> = grads.iter().map(|&v| g.val(v).clone()).collect();
        self.opt_g.step(&mut self.gen.params, &grad_tensors);

        // EMA tracks the live generator; disabled mode keeps an exact copy
        if self.cfg.ema_enabled {
            let d = self.cfg.ema_decay;
            for i in 0..self.ema.len() {
                let live = self.gen.params.tensor(i).clone();
                self.ema
                    .tensor_mut(i)
                    .zip_mut_with(&live, |e, &l| *e = d * *e + (1.0 - d) * l);
            }
        } else {
            self.ema = self.gen.params.clone();
        }

        Ok(LossReport {
            adv_g: adv_val,
            total_g: adv_val,
            lambda_reg: self.cfg.lambda_reg,
            r1_gamma: self.cfg.r1_gamma,
            ..LossReport::default()
        })
    }

    /// Generator wired to the EMA parameters (the sampling model).
    pub fn ema_generator(&self) -> Generator {
        let mut g = Generator::new(&self.net_cfg, &mut stream_rng(self.cfg.seed, 1))
            .expect("config was validated at construction");
        g.params = self.ema.clone();
        g
    }

    // ---- checkpointing ----

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new();
        a.put_u64("meta.version", 1);
        a.put_u64("meta.step", self.step);

        let nc = &self.net_cfg;
        a.put_u64("net.image_size", nc.image_size as u64);
        a.put_u64("net.z_dim", nc.z_dim as u64);
        a.put_u64("net.base_channels", nc.base_channels as u64);
        a.put_u64("net.max_channels", nc.max_channels as u64);
        a.put_u64("net.guidance_res", nc.guidance_res as u64);
        a.put_u64("net.decoder_kernel", nc.decoder_kernel as u64);
        a.put_str(
            "net.decoder_activation",
            match nc.decoder_activation {
                Activation::Linear => "linear",
                Activation::LeakyRelu => "leaky_relu",
            },
        );
        a.put_str(
            "net.upsample",
            match nc.upsample {
                UpsampleMode::Nearest => "nearest",
                UpsampleMode::Bilinear => "bilinear",
            },
        );
        a.put_u64("net.seg_classes", nc.seg_classes.unwrap_or(0) as u64);

        let c = &self.cfg;
        a.put_f64("train.lambda_reg", c.lambda_reg);
        a.put_f64("train.r1_gamma", c.r1_gamma);
        a.put_u64("train.r1_interval", c.r1_interval);
        a.put_f64("train.lr", c.lr);
        a.put_f64("train.beta1", c.beta1);
        a.put_f64("train.beta2", c.beta2);
        a.put_u64("train.batch_size", c.batch_size as u64);
        a.put_u64("train.total_steps", c.total_steps);
        a.put_u64("train.seed", c.seed);
        a.put_u64("train.ema_enabled", c.ema_enabled as u64);
        a.put_f64("train.ema_decay", c.ema_decay);
        a.put_u64("train.ggdr_start_step", c.ggdr_start_step);
        a.put_u64("train.aux_seg_mode", c.aux_seg_mode as u64);
        a.put_u64("train.log_interval", c.log_interval);
        a.put_u64("train.ckpt_interval", c.ckpt_interval);
        a.put_u64("train.sample_interval", c.sample_interval);
        a.put_u64("aug.enabled", c.aug.enabled as u64);
        a.put_f64("aug.p", c.aug.p);
        a.put_u64("aug.adaptive", c.aug.adaptive as u64);
        a.put_f64("aug.target_rt", c.aug.target_rt);
        a.put_f64("aug.step_size", c.aug.step_size);
        a.put_u64("aug.window", c.aug.window as u64);

        for (name, t) in self.gen.params.iter() {
            a.put_tensor(&format!("gen.{name}"), t);
        }
        for (name, t) in self.disc.params.iter() {
            a.put_tensor(&format!("disc.{name}"), t);
        }
        for (name, t) in self.ema.iter() {
            a.put_tensor(&format!("ema.{name}"), t);
        }
        save_adam(&mut a, "opt_g", &self.opt_g, &self.gen.params);
        save_adam(&mut a, "opt_d", &self.opt_d, &self.disc.params);

        a.put_bytes("rng.seed", &self.rng.get_seed());
        a.put_u64("rng.stream", self.rng.get_stream());
        let pos = self.rng.get_word_pos();
        a.put_u64("rng.word_pos_lo", pos as u64);
        a.put_u64("rng.word_pos_hi", (pos >> 64) as u64);

        a.put_f64("ada.p", self.ada.p);
        a.put_f64("ada.target_rt", self.ada.target_rt);
        a.put_f64("ada.step_size", self.ada.step_size);
        a.put_u64("ada.window", self.ada.window as u64);
        let hist: Vec<f64> = self.ada.history.iter().copied().collect();
        a.put_tensor(
            "ada.history",
            &Tensor::from_shape_vec(ndarray::IxDyn(&[hist.len()]), hist).unwrap(),
        );

        a.put_u64("data.epoch", self.data_epoch);
        a.put_u64("data.pos", self.data_pos as u64);

        a.save(path)
    }

    pub fn load(path: &Path) -> Result<TrainState> {
        let a = Archive::load(path)?;
        let net_cfg = NetConfig {
            image_size: a.u64("net.image_size")? as usize,
            z_dim: a.u64("net.z_dim")? as usize,
            base_channels: a.u64("net.base_channels")? as usize,
            max_channels: a.u64("net.max_channels")? as usize,
            guidance_res: a.u64("net.guidance_res")? as usize,
            decoder_kernel: a.u64("net.decoder_kernel")? as usize,
            decoder_activation: match a.str("net.decoder_activation")? {
                "linear" => Activation::Linear,
                "leaky_relu" => Activation::LeakyRelu,
                other => {
                    return Err(Error::Checkpoint(format!(
                        "unknown decoder activation '{other}'"
                    )))
                }
            },
            upsample: match a.str("net.upsample")? {
                "nearest" => UpsampleMode::Nearest,
                "bilinear" => UpsampleMode::Bilinear,
                other => {
                    return Err(Error::Checkpoint(format!(
                        "unknown upsample mode '{other}'"
                    )))
                }
            },
            seg_classes: match a.u64("net.seg_classes")? {
                0 => None,
                k => Some(k as usize),
            },
        };
        let cfg = TrainConfig {
            lambda_reg: a.f64("train.lambda_reg")?,
            r1_gamma: a.f64("train.r1_gamma")?,
            r1_interval: a.u64("train.r1_interval")?,
            lr: a.f64("train.lr")?,
            beta1: a.f64("train.beta1")?,
            beta2: a.f64("train.beta2")?,
            batch_size: a.u64("train.batch_size")? as usize,
            total_steps: a.u64("train.total_steps")?,
            seed: a.u64("train.seed")?,
            ema_enabled: a.u64("train.ema_enabled")? != 0,
            ema_decay: a.f64("train.ema_decay")?,
            ggdr_start_step: a.u64("train.ggdr_start_step")?,
            aux_seg_mode: a.u64("train.aux_seg_mode")? != 0,
            log_interval: a.u64("train.log_interval")?,
            ckpt_interval: a.u64("train.ckpt_interval")?,
            sample_interval: a.u64("train.sample_interval")?,
            aug: AugmentConfig {
                enabled: a.u64("aug.enabled")? != 0,
                p: a.f64("aug.p")?,
                adaptive: a.u64("aug.adaptive")? != 0,
                target_rt: a.f64("aug.target_rt")?,
                step_size: a.f64("aug.step_size")?,
                window: a.u64("aug.window")? as usize,
            },
        };

        let mut st = TrainState::new(&net_cfg, &cfg)?;
        load_params(&a, "gen", &mut st.gen.params)?;
        load_params(&a, "disc", &mut st.disc.params)?;
        load_params(&a, "ema", &mut st.ema)?;
        load_adam(&a, "opt_g", &mut st.opt_g, &st.gen.params)?;
        load_adam(&a, "opt_d", &mut st.opt_d, &st.disc.params)?;
        st.step = a.u64("meta.step")?;

        let seed_bytes: [u8; 32] = a
            .bytes("rng.seed")?
            .try_into()
            .map_err(|_| Error::Checkpoint("rng.seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed_bytes);
        rng.set_stream(a.u64("rng.stream")?);
        let pos =
            (a.u64("rng.word_pos_hi")? as u128) << 64 | a.u64("rng.word_pos_lo")? as u128;
        rng.set_word_pos(pos);
        st.rng = rng;

        st.ada = AdaState {
            p: a.f64("ada.p")?,
            target_rt: a.f64("ada.target_rt")?,
            step_size: a.f64("ada.step_size")?,
            window: a.u64("ada.window")? as usize,
            history: a.tensor("ada.history")?.iter().copied().collect(),
        };
        st.data_epoch = a.u64("data.epoch")?;
        st.data_pos = a.u64("data.pos")? as usize;
        Ok(st)
    }

    /// Explicit incompatibility check for resuming under a config file.
    /// Run-control fields (total_steps and the logging intervals) may change
    /// across a resume; everything that shapes the trajectory may not.
    pub fn check_compat(&self, net_cfg: &NetConfig, cfg: &TrainConfig) -> Result<()> {
        let mut diffs = Vec::new();
        if &self.net_cfg != net_cfg {
            diffs.push("net config differs".to_string());
        }
        let mut a = self.cfg.clone();
        a.total_steps = cfg.total_steps;
        a.log_interval = cfg.log_interval;
        a.ckpt_interval = cfg.ckpt_interval;
        a.sample_interval = cfg.sample_interval;
        if a.seed != cfg.seed {
            diffs.push(format!("train.seed {} vs {}", a.seed, cfg.seed));
        }
        if a.batch_size != cfg.batch_size {
            diffs.push(format!(
                "train.batch_size {} vs {}",
                a.batch_size, cfg.batch_size
            ));
        }
        if a != *cfg && diffs.is_empty() {
            diffs.push("training hyperparameters differ".to_string());
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "checkpoint is incompatible with the config: {}",
                diffs.join("; ")
            )))
        }
    }
}

fn save_adam(a: &mut Archive, prefix: &str, opt: &Adam, params: &ParamSet) {
    a.put_u64(&format!("{prefix}.t"), opt.t);
    for i in 0..params.len() {
        a.put_tensor(&format!("{prefix}.m.{}", params.name(i)), &opt.m[i]);
        a.put_tensor(&format!("{prefix}.v.{}", params.name(i)), &opt.v[i]);
    }
}

fn load_adam(a: &Archive, prefix: &str, opt: &mut Adam, params: &ParamSet) -> Result<()> {
    opt.t = a.u64(&format!("{prefix}.t"))?;
    for i in 0..params.len() {
        let m = a.tensor(&format!("{prefix}.m.{}", params.name(i)))?;
        let v = a.tensor(&format!("{prefix}.v.{}", params.name(i)))?;
        if m.shape() != opt.m[i].shape() || v.shape() != opt.v[i].shape() {
            return Err(Error::Checkpoint(format!(
                "optimizer state '{}' has wrong shape",
                params.name(i)
            )));
        }
        opt.m[i] = m;
        opt.v[i] = v;
    }
    Ok(())
}

fn load_params(a: &Archive, prefix: &str, params: &mut ParamSet) -> Result<()> {
    for i in 0..params.len() {
        let key = format!("{prefix}.{}", params.name(i));
        let t = a.tensor(&key)?;
        if t.shape() != params.tensor(i).shape() {
            return Err(Error::Checkpoint(format!(
                "parameter '{key}': shape {:?} in file, {:?} expected",
                t.shape(),
                params.tensor(i).shape()
            )));
        }
        *params.tensor_mut(i) = t;
    }
    Ok(())
}

/// Artifacts produced by a training run.
pub struct TrainRun {
    pub state: TrainState,
    pub metrics_path: PathBuf,
    pub final_ckpt: PathBuf,
}

/// Run the full training loop. Writes metrics.csv, periodic checkpoints and
/// sample grids under `out_dir`; fully deterministic given the config seed
/// and dataset order.
pub fn train(
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainRun> {
    if dataset.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    if dataset.resolution != net_cfg.image_size {
        return Err(Error::config(format!(
            "dataset resolution {} != net image_size {}",
            dataset.resolution, net_cfg.image_size
        )));
    }
    fs::create_dir_all(out_dir)?;

    let mut state = match resume {
        Some(p) => {
            let mut st = TrainState::load(p)?;
            st.check_compat(net_cfg, cfg)?;
            st.cfg = cfg.clone();
            st
        }
        None => TrainState::new(net_cfg, cfg)?,
    };

    let mut iter = BatchIter::new(
        dataset.len(),
        cfg.seed ^ 0xda7a_5eed,
        cfg.batch_size,
        false,
    )?;
    iter.seek(state.data_epoch, state.data_pos);

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = if resume.is_some() && metrics_path.exists() {
        fs::OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = fs::File::create(&metrics_path)?;
        writeln!(f, "step,adv_d,adv_g,ggdr,r1,p_aug")?;
        f
    };

    while state.step < cfg.total_steps {
        let (real, masks) = iter.next_batch(dataset);
        let rd = state.d_step(&real, masks.as_ref())?;
        let rg = state.g_step()?;

        if state.step % cfg.log_interval == 0 || state.step + 1 == cfg.total_steps {
            writeln!(
                metrics,
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.6}",
                state.step,
                rd.adv_d,
                rg.adv_g,
                rd.ggdr,
                rd.r1,
                state.aug_p()
            )?;
        }

        state.step += 1;
        state.data_epoch = iter.epoch;
        state.data_pos = iter.pos;

        if cfg.ckpt_interval > 0 && state.step % cfg.ckpt_interval == 0 && state.step < cfg.total_steps
        {
            state.save(&out_dir.join(format!("ckpt_{:08}.ckpt", state.step)))?;
        }
        if cfg.sample_interval > 0 && state.step % cfg.sample_interval == 0 {
            write_sample_grid(&state, &out_dir.join(format!("samples_{:08}.png", state.step)))?;
        }
    }

    let final_ckpt = out_dir.join("final.ckpt");
    state.save(&final_ckpt)?;
    metrics.flush()?;
    Ok(TrainRun {
        state,
        metrics_path,
        final_ckpt,
    })
}

fn write_sample_grid(state: &TrainState, path: &Path) -> Result<()> {
    // a fixed preview stream, independent of the training rng
    let mut preview = stream_rng(state.cfg.seed, 4);
    let z = sample_latents(&mut preview, 16, state.net_cfg.z_dim);
    let ema = state.ema_generator();
    let v = crate::nets::generate(&ema, &z)?;
    crate::data_io::save_sample_grid(path, &v.image, 4)
}
