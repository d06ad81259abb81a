//! Command-line front end: training, metric evaluation, feature-map
//! visualization, the linear segmentation probe, and synthetic dataset
//! generation.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use ndarray::{Axis, Slice};

use ggdr::analysis::{kmeans_features, linear_probe, render_overlay, PALETTE6};
use ggdr::config::load_config;
use ggdr::data_io::{
    load_dataset, make_synthetic_shapes, save_image_folder, write_packed, write_packed_masks,
    DatasetSpec, Source, SHAPE_CLASSES,
};
use ggdr::error::{Error, Result};
use ggdr::eval::{
    dominant_class_labels, fid, gaussian_stats, inception_score, precision_recall,
    ClassifierExtractor, FeatureExtractor, RandomConvExtractor,
};
use ggdr::losses::downsample_labels;
use ggdr::nets::{encoder_features, generate, sample_latents};
use ggdr::train::TrainState;
use ggdr::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "ggdr", about = "GAN training with generator-guided discriminator regularization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute metrics for a checkpoint against a dataset; appends to a CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of fid,pr,is
        #[arg(long, default_value = "fid,pr")]
        metrics: String,
        /// Number of generated samples.
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "eval.csv")]
        out: PathBuf,
        /// Use the live generator instead of the EMA weights.
        #[arg(long, default_value_t = false)]
        no_ema: bool,
    },
    /// Cluster a generator feature map with k-means and render overlays.
    Visualize {
        #[arg(long)]
        ckpt: PathBuf,
        /// Pyramid resolution to cluster.
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch: usize,
    },
    /// Linear segmentation probe on the frozen discriminator encoder.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        iters: usize,
    },
    /// Generate the synthetic colored-shapes dataset.
    MakeShapes {
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write a packed array file instead of a PNG folder.
        #[arg(long, default_value_t = false)]
        packed: bool,
    },
}

fn data_spec_for(path: &PathBuf, resolution: usize, masks: bool) -> Result<DatasetSpec> {
    let source = if path.is_dir() {
        Source::Folder(path.clone())
    } else if path.extension().map(|e| e == "pack").unwrap_or(false) {
        Source::Packed(path.clone())
    } else {
        return Err(Error::config(format!(
            "{}: expected an image folder or a .pack file",
            path.display()
        )));
    };
    Ok(DatasetSpec {
        source,
        resolution,
        channels: 3,
        horizontal_flip: false,
        label_masks: masks,
    })
}

fn generate_images(state: &TrainState, n: usize, seed: u64, use_ema: bool) -> Result<Tensor> {
    let gen = if use_ema {
        state.ema_generator()
    } else {
        let mut g = state.ema_generator();
        g.params = state.gen.params.clone();
        g
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5a3);
    let s = state.net_cfg.image_size;
    let mut out = Tensor::zeros(ndarray::IxDyn(&[n, 3, s, s]));
    let mut start = 0;
    while start < n {
        let end = (start + 64).min(n);
        let z = sample_latents(&mut rng, end - start, state.net_cfg.z_dim);
        let v = generate(&gen, &z)?;
        out.slice_axis_mut(Axis(0), Slice::from(start..end))
            .assign(&v.image);
        start = end;
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt: PathBuf,
    data: PathBuf,
    metrics: String,
    n: usize,
    seed: u64,
    out: PathBuf,
    no_ema: bool,
) -> Result<()> {
    let state = TrainState::load(&ckpt)?;
    let res = state.net_cfg.image_size;
    let wanted: Vec<&str> = metrics.split(',').map(|s| s.trim()).collect();
    for m in &wanted {
        if !["fid", "pr", "is"].contains(m) {
            return Err(Error::config(format!("unknown metric '{m}'")));
        }
    }
    let need_masks = wanted.contains(&"is");
    let ds = load_dataset(&data_spec_for(&data, res, need_masks)?)?;
    let fakes = generate_images(&state, n, seed, !no_ema)?;

    let extractor = RandomConvExtractor::new(res, 0)?;
    let real_feats = extractor.embed(&ds.images)?;
    let fake_feats = extractor.embed(&fakes)?;

    let mut fid_v = None;
    let mut p_v = None;
    let mut r_v = None;
    let mut is_v = None;
    if wanted.contains(&"fid") {
        let a = gaussian_stats(&real_feats)?;
        let b = gaussian_stats(&fake_feats)?;
        fid_v = Some(fid(&a, &b)?);
    }
    if wanted.contains(&"pr") {
        let (p, r) = precision_recall(&real_feats, &fake_feats, 3)?;
        p_v = Some(p);
        r_v = Some(r);
    }
    let mut tag = extractor.tag().to_string();
    if wanted.contains(&"is") {
        let masks = ds.masks.as_ref().ok_or_else(|| {
            Error::config("inception score needs a labeled dataset (masks) to fit the classifier")
        })?;
        let labels = dominant_class_labels(masks, SHAPE_CLASSES);
        let clf = ClassifierExtractor::train(&ds.images, &labels, SHAPE_CLASSES, 0, 200)?;
        let probs = clf.class_probs(&fakes)?;
        is_v = Some(inception_score(&probs)?);
        tag = format!("{tag}+{}", clf.tag());
    }

    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let new_file = !out.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&out)?;
    if new_file {
        writeln!(
            f,
            "ckpt,step,extractor,n_real,n_fake,seed,fid,precision,recall,inception_score"
        )?;
    }
    writeln!(
        f,
        "{},{},{},{},{},{},{},{},{},{}",
        ckpt.display(),
        state.step,
        tag,
        ds.len(),
        n,
        seed,
        fmt(fid_v),
        fmt(p_v),
        fmt(r_v),
        fmt(is_v),
    )?;
    println!(
        "step {}: fid={} precision={} recall={} is={} ({})",
        state.step,
        fmt(fid_v),
        fmt(p_v),
        fmt(r_v),
        fmt(is_v),
        tag
    );
    Ok(())
}

fn cmd_visualize(
    ckpt: PathBuf,
    layer: usize,
    k: usize,
    seed: u64,
    out: PathBuf,
    batch: usize,
) -> Result<()> {
    let state = TrainState::load(&ckpt)?;
    let gen = state.ema_generator();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x715);
    let z = sample_latents(&mut rng, batch, state.net_cfg.z_dim);
    let v = generate(&gen, &z)?;
    let fmap = v
        .pyramid
        .get(&layer)
        .ok_or_else(|| {
            Error::config(format!(
                "no pyramid map at {layer}; available: {:?}",
                v.pyramid.keys().collect::<Vec<_>>()
            ))
        })?
        .clone();
    let cm = kmeans_features(&fmap, k, seed)?;

    // grid: row of images, row of cluster overlays
    let cell = state.net_cfg.image_size;
    let mut grid = image::RgbImage::new((batch * cell) as u32, (2 * cell) as u32);
    for i in 0..batch {
        let one = v
            .image
            .slice_axis(Axis(0), Slice::from(i..i + 1))
            .to_owned()
            .into_shape_with_order(ndarray::IxDyn(&[1, 3, cell, cell]))
            .unwrap();
        for y in 0..cell {
            for x in 0..cell {
                grid.put_pixel(
                    (i * cell + x) as u32,
                    y as u32,
                    image::Rgb([
                        ggdr::data_io::unit_to_u8(one[[0, 0, y, x]]),
                        ggdr::data_io::unit_to_u8(one[[0, 1, y, x]]),
                        ggdr::data_io::unit_to_u8(one[[0, 2, y, x]]),
                    ]),
                );
            }
        }
        let labels = cm.labels.index_axis(Axis(0), i);
        let overlay = render_overlay(&labels, &PALETTE6, cell, Some(&one), 0.6)?;
        for y in 0..cell {
            for x in 0..cell {
                grid.put_pixel(
                    (i * cell + x) as u32,
                    (cell + y) as u32,
                    *overlay.get_pixel(x as u32, y as u32),
                );
            }
        }
    }
    grid.save(&out).map_err(Error::from)?;
    println!(
        "wrote {} ({} samples, layer {layer}, k={k}, inertia {:.4})",
        out.display(),
        batch,
        cm.inertia
    );
    Ok(())
}

fn cmd_probe(ckpt: PathBuf, data: PathBuf, out: PathBuf, seed: u64, iters: usize) -> Result<()> {
    let state = TrainState::load(&ckpt)?;
    let res = state.net_cfg.image_size;
    let t = state.net_cfg.guidance_res;
    let ds = load_dataset(&data_spec_for(&data, res, true)?)?;
    let masks = ds
        .masks
        .as_ref()
        .ok_or_else(|| Error::config("probe needs a dataset with label masks"))?;

    let feats = encoder_features(&state.disc, &ds.images, t)?;
    let labels = downsample_labels(masks, t, t);
    let n = ds.len();
    let split = (n * 4) / 5;
    if split == 0 || split == n {
        return Err(Error::config("dataset too small for an 80/20 split"));
    }
    let tr_f = feats.slice_axis(Axis(0), Slice::from(0..split)).to_owned();
    let te_f = feats.slice_axis(Axis(0), Slice::from(split..n)).to_owned();
    let tr_l = labels.slice_axis(Axis(0), Slice::from(0..split)).to_owned();
    let te_l = labels.slice_axis(Axis(0), Slice::from(split..n)).to_owned();
    let resu = linear_probe(&tr_f, &tr_l, &te_f, &te_l, SHAPE_CLASSES, seed, iters)?;

    let new_file = !out.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&out)?;
    if new_file {
        writeln!(f, "ckpt,step,resolution,seed,accuracy,train_accuracy")?;
    }
    writeln!(
        f,
        "{},{},{},{},{:.6},{:.6}",
        ckpt.display(),
        state.step,
        t,
        seed,
        resu.accuracy,
        resu.train_accuracy
    )?;
    println!(
        "probe accuracy {:.4} (train {:.4}) at {t}x{t}",
        resu.accuracy, resu.train_accuracy
    );
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train {
            config,
            out,
            resume,
        } => {
            let fc = load_config(&config)?;
            let ds = load_dataset(&fc.data)?;
            let run = ggdr::train::train(&fc.net, &fc.train, &ds, &out, resume.as_deref())?;
            println!(
                "done: {} steps, metrics at {}, checkpoint at {}",
                run.state.step,
                run.metrics_path.display(),
                run.final_ckpt.display()
            );
            Ok(())
        }
        Cmd::Eval {
            ckpt,
            data,
            metrics,
            n,
            seed,
            out,
            no_ema,
        } => cmd_eval(ckpt, data, metrics, n, seed, out, no_ema),
        Cmd::Visualize {
            ckpt,
            layer,
            k,
            seed,
            out,
            batch,
        } => cmd_visualize(ckpt, layer, k, seed, out, batch),
        Cmd::Probe {
            ckpt,
            data,
            out,
            seed,
            iters,
        } => cmd_probe(ckpt, data, out, seed, iters),
        Cmd::MakeShapes {
            n,
            resolution,
            seed,
            out,
            packed,
        } => {
            let (images, masks) = make_synthetic_shapes(n, resolution, seed)?;
            if packed {
                if let Some(parent) = out.parent() {
                    if !parent.as_os_str().is_empty() {
                        fs::create_dir_all(parent)?;
                    }
                }
                write_packed(&out, &images)?;
                write_packed_masks(&out.with_extension("masks"), &masks)?;
            } else {
                save_image_folder(&out, &images, Some(&masks))?;
            }
            println!(
                "wrote {n} images at {resolution}x{resolution} to {}",
                out.display()
            );
            Ok(())
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
