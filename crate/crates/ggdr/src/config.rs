//! Flat key/value config files: `key = value` lines, `#` comments. Every
//! recognized key maps onto one NetConfig/TrainConfig/DatasetSpec field;
//! unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data_io::{DatasetSpec, Source};
use crate::error::{Error, Result};
use crate::nets::{Activation, NetConfig, UpsampleMode};
use crate::train::{AugmentConfig, TrainConfig};

#[derive(Clone, Debug)]
pub struct FileConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: expected an integer, got '{v}'")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: expected an integer, got '{v}'")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: expected a number, got '{v}'")))
}

pub fn parse_config(text: &str) -> Result<FileConfig> {
    let mut kv = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }

    let mut net = NetConfig::default();
    let mut train = TrainConfig::default();
    let mut aug = AugmentConfig::default();
    let mut source = String::from("shapes");
    let mut path: Option<PathBuf> = None;
    let mut data_n = 5000usize;
    let mut data_seed = 7u64;
    let mut data_resolution: Option<usize> = None;
    let mut horizontal_flip = false;
    let mut label_masks = false;
    let mut guidance_set = false;

    for (k, v) in &kv {
        match k.as_str() {
            "net.image_size" => net.image_size = parse_usize(k, v)?,
            "net.z_dim" => net.z_dim = parse_usize(k, v)?,
            "net.base_channels" => net.base_channels = parse_usize(k, v)?,
            "net.max_channels" => net.max_channels = parse_usize(k, v)?,
            "net.guidance_resolution" => {
                net.guidance_res = parse_usize(k, v)?;
                guidance_set = true;
            }
            "net.decoder_kernel" => net.decoder_kernel = parse_usize(k, v)?,
            "net.decoder_activation" => {
                net.decoder_activation = match v.as_str() {
                    "linear" => Activation::Linear,
                    "leaky_relu" => Activation::LeakyRelu,
                    _ => {
                        return Err(Error::config(format!(
                            "{k}: expected linear|leaky_relu, got '{v}'"
                        )))
                    }
                }
            }
            "net.upsample" => {
                net.upsample = match v.as_str() {
                    "nearest" => UpsampleMode::Nearest,
                    "bilinear" => UpsampleMode::Bilinear,
                    _ => {
                        return Err(Error::config(format!(
                            "{k}: expected nearest|bilinear, got '{v}'"
                        )))
                    }
                }
            }
            "net.seg_classes" => {
                let n = parse_usize(k, v)?;
                net.seg_classes = if n == 0 { None } else { Some(n) };
            }
            "train.lambda_reg" => train.lambda_reg = parse_f64(k, v)?,
            "train.r1_gamma" => train.r1_gamma = parse_f64(k, v)?,
            "train.r1_interval" => train.r1_interval = parse_u64(k, v)?,
            "train.lr" => train.lr = parse_f64(k, v)?,
            "train.beta1" => train.beta1 = parse_f64(k, v)?,
            "train.beta2" => train.beta2 = parse_f64(k, v)?,
            "train.batch_size" => train.batch_size = parse_usize(k, v)?,
            "train.total_steps" => train.total_steps = parse_u64(k, v)?,
            "train.seed" => train.seed = parse_u64(k, v)?,
            "train.ema" => train.ema_enabled = parse_bool(k, v)?,
            "train.ema_decay" => train.ema_decay = parse_f64(k, v)?,
            "train.ggdr_start_step" => train.ggdr_start_step = parse_u64(k, v)?,
            "train.aux_seg_mode" => train.aux_seg_mode = parse_bool(k, v)?,
            "train.log_interval" => train.log_interval = parse_u64(k, v)?,
            "train.ckpt_interval" => train.ckpt_interval = parse_u64(k, v)?,
            "train.sample_interval" => train.sample_interval = parse_u64(k, v)?,
            "augment.enabled" => aug.enabled = parse_bool(k, v)?,
            "augment.p" => aug.p = parse_f64(k, v)?,
            "augment.adaptive" => aug.adaptive = parse_bool(k, v)?,
            "augment.target_rt" => aug.target_rt = parse_f64(k, v)?,
            "augment.step_size" => aug.step_size = parse_f64(k, v)?,
            "augment.window" => aug.window = parse_usize(k, v)?,
            "data.source" => source = v.clone(),
            "data.path" => path = Some(PathBuf::from(v)),
            "data.n" => data_n = parse_usize(k, v)?,
            "data.seed" => data_seed = parse_u64(k, v)?,
            "data.resolution" => data_resolution = Some(parse_usize(k, v)?),
            "data.horizontal_flip" => horizontal_flip = parse_bool(k, v)?,
            "data.label_masks" => label_masks = parse_bool(k, v)?,
            _ => return Err(Error::config(format!("unknown config key '{k}'"))),
        }
    }
    if !guidance_set {
        net.guidance_res = (net.image_size / 4).max(4);
    }
    train.aug = aug;

    let resolution = data_resolution.unwrap_or(net.image_size);
    let src = match source.as_str() {
        "shapes" => Source::SyntheticShapes {
            n: data_n,
            seed: data_seed,
        },
        "folder" => Source::Folder(
            path.ok_or_else(|| Error::config("data.source=folder requires data.path"))?,
        ),
        "packed" => Source::Packed(
            path.ok_or_else(|| Error::config("data.source=packed requires data.path"))?,
        ),
        other => {
            return Err(Error::config(format!(
                "data.source must be shapes|folder|packed, got '{other}'"
            )))
        }
    };
    let data = DatasetSpec {
        source: src,
        resolution,
        channels: 3,
        horizontal_flip,
        label_masks: label_masks || train.aux_seg_mode,
    };

    net.validate()?;
    train.validate()?;
    Ok(FileConfig { net, train, data })
}

pub fn load_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_defaults_and_overrides() {
        let cfg = parse_config(
            "# comment\n\
             net.image_size = 32\n\
             train.lambda_reg = 10.0\n\
             train.batch_size = 8   # inline comment\n\
             augment.enabled = true\n\
             augment.p = 0.3\n\
             data.source = shapes\n\
             data.n = 100\n",
        )
        .unwrap();
        assert_eq!(cfg.net.image_size, 32);
        assert_eq!(cfg.net.guidance_res, 8, "default guidance is image_size/4");
        assert_eq!(cfg.train.batch_size, 8);
        assert!(cfg.train.aug.enabled);
        assert_eq!(cfg.train.aug.p, 0.3);
        assert!(matches!(
            cfg.data.source,
            Source::SyntheticShapes { n: 100, .. }
        ));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(parse_config("net.imagesize = 32\n").is_err());
        assert!(parse_config("train.batch_size = many\n").is_err());
        assert!(parse_config("no equals sign here\n").is_err());
        assert!(parse_config("data.source = hdf5\n").is_err());
    }

    #[test]
    fn guidance_override_wins() {
        let cfg = parse_config("net.image_size = 64\nnet.guidance_resolution = 8\n").unwrap();
        assert_eq!(cfg.net.guidance_res, 8);
    }
}
