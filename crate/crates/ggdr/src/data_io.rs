//! Dataset ingestion and output artifacts: image folders, a packed array
//! file format, procedurally generated colored-shape datasets with exact
//! per-pixel class masks, deterministic batch iteration, and PNG grids.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, Axis, IxDyn, Slice};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Mask classes produced by the synthetic-shapes generator.
pub const SHAPE_CLASSES: usize = 4; // background, disk, square, triangle

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    /// Directory of PNG images (optionally with a masks/ subdirectory).
    Folder(PathBuf),
    /// Packed array file written by [`write_packed`].
    Packed(PathBuf),
    /// Procedural colored-shapes images with exact masks.
    SyntheticShapes { n: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub source: Source,
    pub resolution: usize,
    pub channels: usize,
    /// Random horizontal flip with probability 1/2 during iteration.
    pub horizontal_flip: bool,
    /// Load per-pixel label masks (segmentation / probe modes).
    pub label_masks: bool,
}

impl DatasetSpec {
    pub fn shapes(n: usize, resolution: usize, seed: u64) -> Self {
        DatasetSpec {
            source: Source::SyntheticShapes { n, seed },
            resolution,
            channels: 3,
            horizontal_flip: false,
            label_masks: true,
        }
    }
}

/// In-memory dataset: images in [-1, 1], optional integer masks.
#[derive(Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub masks: Option<ArrayD<usize>>,
    pub resolution: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Load a dataset per its spec. Images are decoded, checked against the
/// configured resolution and normalized to [-1, 1].
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let ds = match &spec.source {
        Source::SyntheticShapes { n, seed } => {
            let (images, masks) = make_synthetic_shapes(*n, spec.resolution, *seed)?;
            Dataset {
                images,
                masks: spec.label_masks.then_some(masks),
                resolution: spec.resolution,
            }
        }
        Source::Packed(path) => load_packed_dataset(path, spec)?,
        Source::Folder(path) => load_folder_dataset(path, spec)?,
    };
    if ds.is_empty() {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    Ok(ds)
}

// ---- synthetic shapes ----

fn disk_hit(px: f64, py: f64, cx: f64, cy: f64, r: f64) -> bool {
    let dx = px - cx;
    let dy = py - cy;
    dx * dx + dy * dy <= r * r
}

fn square_hit(px: f64, py: f64, cx: f64, cy: f64, half: f64) -> bool {
    (px - cx).abs() <= half && (py - cy).abs() <= half
}

fn triangle_hit(px: f64, py: f64, cx: f64, cy: f64, r: f64) -> bool {
    // upward-pointing triangle inscribed in the radius-r circle
    let v = [
        (cx, cy - r),
        (cx - r * 0.866, cy + r * 0.5),
        (cx + r * 0.866, cy + r * 0.5),
    ];
    let sign = |a: (f64, f64), b: (f64, f64)| (px - b.0) * (a.1 - b.1) - (a.0 - b.0) * (py - b.1);
    let d1 = sign(v[0], v[1]);
    let d2 = sign(v[1], v[2]);
    let d3 = sign(v[2], v[0]);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

/// Generate `n` images of 1-3 colored primitives (disk, square, triangle)
/// over a smooth textured background, with exact per-pixel class masks
/// (0 background, 1 disk, 2 square, 3 triangle). Deterministic per seed.
pub fn make_synthetic_shapes(
    n: usize,
    resolution: usize,
    seed: u64,
) -> Result<(Tensor, ArrayD<usize>)> {
    if n == 0 {
        return Err(Error::input("synthetic dataset needs n >= 1"));
    }
    let s = resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Tensor::zeros(IxDyn(&[n, 3, s, s]));
    let mut masks = ArrayD::<usize>::zeros(IxDyn(&[n, s, s]));

    for i in 0..n {
        // background: linear gradient between two colors plus a low-frequency wave
        let c0: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>() * 1.6 - 0.8);
        let c1: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>() * 1.6 - 0.8);
        let ang = rng.random::<f64>() * std::f64::consts::TAU;
        let (gx, gy) = (ang.cos(), ang.sin());
        let freq = 1.0 + rng.random::<f64>() * 2.0;
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        for y in 0..s {
            for x in 0..s {
                let u = x as f64 / s as f64;
                let v = y as f64 / s as f64;
                let t = ((u - 0.5) * gx + (v - 0.5) * gy + 0.5).clamp(0.0, 1.0);
                let wave = 0.08 * (std::f64::consts::TAU * freq * (u + v) + phase).sin();
                for ch in 0..3 {
                    images[[i, ch, y, x]] = (c0[ch] + (c1[ch] - c0[ch]) * t + wave).clamp(-1.0, 1.0);
                }
            }
        }
        // 1-3 primitives, later ones drawn on top
        let count = rng.random_range(1..=3usize);
        for _ in 0..count {
            let kind = rng.random_range(0..3usize); // 0 disk, 1 square, 2 triangle
            let r = (0.10 + rng.random::<f64>() * 0.18) * s as f64;
            let cx = r + rng.random::<f64>() * (s as f64 - 2.0 * r);
            let cy = r + rng.random::<f64>() * (s as f64 - 2.0 * r);
            let color: [f64; 3] = std::array::from_fn(|_| {
                let v: f64 = rng.random();
                if v < 0.5 {
                    -1.0 + v * 0.6
                } else {
                    0.7 + (v - 0.5) * 0.6
                }
            });
            for y in 0..s {
                for x in 0..s {
                    let px = x as f64 + 0.5;
                    let py = y as f64 + 0.5;
                    let hit = match kind {
                        0 => disk_hit(px, py, cx, cy, r),
                        1 => square_hit(px, py, cx, cy, r * 0.8),
                        _ => triangle_hit(px, py, cx, cy, r),
                    };
                    if hit {
                        for ch in 0..3 {
                            images[[i, ch, y, x]] = color[ch];
                        }
                        masks[[i, y, x]] = kind + 1;
                    }
                }
            }
        }
    }
    Ok((images, masks))
}

// ---- packed array file ----

const PACK_MAGIC: &[u8; 8] = b"GGPACK01";

/// dtype tags in the packed format
const DTYPE_IMAGE_U8: u8 = 0;
const DTYPE_LABEL_U8: u8 = 1;

/// Write an image tensor ([-1,1] floats, NCHW) as a packed u8 array file.
pub fn write_packed(path: &Path, images: &Tensor) -> Result<()> {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h != w {
        return Err(Error::input("packed files hold square images"));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(PACK_MAGIC)?;
    f.write_all(&1u32.to_le_bytes())?;
    f.write_all(&(n as u64).to_le_bytes())?;
    f.write_all(&(h as u32).to_le_bytes())?;
    f.write_all(&(c as u32).to_le_bytes())?;
    f.write_all(&[DTYPE_IMAGE_U8])?;
    f.write_all(&[0u8; 3])?;
    let bytes: Vec<u8> = images.iter().map(|&v| unit_to_u8(v)).collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Write an integer mask tensor [N,H,W] as a packed label file.
pub fn write_packed_masks(path: &Path, masks: &ArrayD<usize>) -> Result<()> {
    let s = masks.shape();
    let (n, h, w) = (s[0], s[1], s[2]);
    if h != w {
        return Err(Error::input("packed files hold square masks"));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(PACK_MAGIC)?;
    f.write_all(&1u32.to_le_bytes())?;
    f.write_all(&(n as u64).to_le_bytes())?;
    f.write_all(&(h as u32).to_le_bytes())?;
    f.write_all(&1u32.to_le_bytes())?;
    f.write_all(&[DTYPE_LABEL_U8])?;
    f.write_all(&[0u8; 3])?;
    let bytes: Vec<u8> = masks.iter().map(|&v| v as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}

struct PackedHeader {
    count: usize,
    resolution: usize,
    channels: usize,
    dtype: u8,
}

fn read_packed_header(f: &mut fs::File, path: &Path) -> Result<PackedHeader> {
    let mut head = [0u8; 32];
    f.read_exact(&mut head)
        .map_err(|e| Error::Dataset(format!("{}: short header: {e}", path.display())))?;
    if &head[0..8] != PACK_MAGIC {
        return Err(Error::Dataset(format!(
            "{}: bad magic, not a packed array file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
    if version != 1 {
        return Err(Error::Dataset(format!(
            "{}: unsupported packed version {version}",
            path.display()
        )));
    }
    Ok(PackedHeader {
        count: u64::from_le_bytes(head[12..20].try_into().unwrap()) as usize,
        resolution: u32::from_le_bytes(head[20..24].try_into().unwrap()) as usize,
        channels: u32::from_le_bytes(head[24..28].try_into().unwrap()) as usize,
        dtype: head[28],
    })
}

fn load_packed_dataset(path: &Path, spec: &DatasetSpec) -> Result<Dataset> {
    let mut f = fs::File::open(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let h = read_packed_header(&mut f, path)?;
    if h.dtype != DTYPE_IMAGE_U8 {
        return Err(Error::Dataset(format!(
            "{}: expected an image file, found dtype {}",
            path.display(),
            h.dtype
        )));
    }
    if h.resolution != spec.resolution || h.channels != spec.channels {
        return Err(Error::Dataset(format!(
            "{}: file is {}x{} ch{}, spec wants {}x{} ch{}",
            path.display(),
            h.resolution,
            h.resolution,
            h.channels,
            spec.resolution,
            spec.resolution,
            spec.channels
        )));
    }
    let mut bytes = vec![0u8; h.count * h.channels * h.resolution * h.resolution];
    f.read_exact(&mut bytes)
        .map_err(|e| Error::Dataset(format!("{}: truncated payload: {e}", path.display())))?;
    let images = Tensor::from_shape_vec(
        IxDyn(&[h.count, h.channels, h.resolution, h.resolution]),
        bytes.iter().map(|&b| u8_to_unit(b)).collect(),
    )
    .unwrap();

    let masks = if spec.label_masks {
        let mpath = path.with_extension("masks");
        let mut mf = fs::File::open(&mpath)
            .map_err(|e| Error::Dataset(format!("{}: {e}", mpath.display())))?;
        let mh = read_packed_header(&mut mf, &mpath)?;
        if mh.dtype != DTYPE_LABEL_U8 || mh.count != h.count || mh.resolution != h.resolution {
            return Err(Error::Dataset(format!(
                "{}: mask file does not match images",
                mpath.display()
            )));
        }
        let mut mbytes = vec![0u8; mh.count * mh.resolution * mh.resolution];
        mf.read_exact(&mut mbytes)
            .map_err(|e| Error::Dataset(format!("{}: truncated payload: {e}", mpath.display())))?;
        Some(
            ArrayD::from_shape_vec(
                IxDyn(&[mh.count, mh.resolution, mh.resolution]),
                mbytes.iter().map(|&b| b as usize).collect(),
            )
            .unwrap(),
        )
    } else {
        None
    };

    Ok(Dataset {
        images,
        masks,
        resolution: h.resolution,
    })
}

fn load_folder_dataset(dir: &Path, spec: &DatasetSpec) -> Result<Dataset> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no .png files found",
            dir.display()
        )));
    }
    let s = spec.resolution;
    let mut images = Tensor::zeros(IxDyn(&[names.len(), 3, s, s]));
    let mut failures: Vec<String> = Vec::new();
    for (i, p) in names.iter().enumerate() {
        match image::open(p) {
            Ok(img) => {
                let rgb = img.to_rgb8();
                if rgb.width() as usize != s || rgb.height() as usize != s {
                    failures.push(format!(
                        "{}: is {}x{}, expected {s}x{s}",
                        p.display(),
                        rgb.width(),
                        rgb.height()
                    ));
                    continue;
                }
                for y in 0..s {
                    for x in 0..s {
                        let px = rgb.get_pixel(x as u32, y as u32);
                        for ch in 0..3 {
                            images[[i, ch, y, x]] = u8_to_unit(px.0[ch]);
                        }
                    }
                }
            }
            Err(e) => failures.push(format!("{}: {e}", p.display())),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Dataset(format!(
            "{} unreadable or mis-sized files:\n{}",
            failures.len(),
            failures.join("\n")
        )));
    }

    let masks = if spec.label_masks {
        let mdir = dir.join("masks");
        let mut masks = ArrayD::<usize>::zeros(IxDyn(&[names.len(), s, s]));
        for (i, p) in names.iter().enumerate() {
            let mp = mdir.join(p.file_name().unwrap());
            let img = image::open(&mp)
                .map_err(|e| Error::Dataset(format!("{}: {e}", mp.display())))?
                .to_luma8();
            if img.width() as usize != s || img.height() as usize != s {
                return Err(Error::Dataset(format!(
                    "{}: mask size mismatch",
                    mp.display()
                )));
            }
            for y in 0..s {
                for x in 0..s {
                    masks[[i, y, x]] = img.get_pixel(x as u32, y as u32).0[0] as usize;
                }
            }
        }
        Some(masks)
    } else {
        None
    };

    Ok(Dataset {
        images,
        masks,
        resolution: s,
    })
}

// ---- iteration ----

/// Deterministic epoch-shuffled batch iterator. The permutation and flip
/// coins for epoch `e` derive from (seed, e) only, so any position is
/// reconstructible for checkpoint resume.
pub struct BatchIter {
    seed: u64,
    batch_size: usize,
    flip: bool,
    n: usize,
    pub epoch: u64,
    pub pos: usize,
    perm: Vec<usize>,
    flips: Vec<bool>,
}

impl BatchIter {
    pub fn new(n: usize, seed: u64, batch_size: usize, flip: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if n == 0 {
            return Err(Error::config("cannot iterate an empty dataset"));
        }
        let mut it = BatchIter {
            seed,
            batch_size,
            flip,
            n,
            epoch: 0,
            pos: 0,
            perm: Vec::new(),
            flips: Vec::new(),
        };
        it.reshuffle();
        Ok(it)
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch.wrapping_add(1));
        self.perm = (0..self.n).collect();
        self.perm.shuffle(&mut rng);
        self.flips = (0..self.n)
            .map(|_| self.flip && rng.random::<f64>() < 0.5)
            .collect();
    }

    /// Restore iteration state (for checkpoint resume).
    pub fn seek(&mut self, epoch: u64, pos: usize) {
        self.epoch = epoch;
        self.pos = pos.min(self.n);
        self.reshuffle();
    }

    /// Indices and flip flags of the next batch; advances the cursor and
    /// rolls epochs automatically.
    pub fn next_indices(&mut self) -> Vec<(usize, bool)> {
        if self.pos >= self.n {
            self.epoch += 1;
            self.pos = 0;
            self.reshuffle();
        }
        let end = (self.pos + self.batch_size).min(self.n);
        let out = (self.pos..end)
            .map(|i| (self.perm[i], self.flips[i]))
            .collect();
        self.pos = end;
        out
    }

    /// Gather the next image batch (and masks when present).
    pub fn next_batch(&mut self, ds: &Dataset) -> (Tensor, Option<ArrayD<usize>>) {
        let idx = self.next_indices();
        gather_batch(ds, &idx)
    }
}

fn gather_batch(ds: &Dataset, idx: &[(usize, bool)]) -> (Tensor, Option<ArrayD<usize>>) {
    let s = ds.resolution;
    let c = ds.images.shape()[1];
    let mut images = Tensor::zeros(IxDyn(&[idx.len(), c, s, s]));
    for (bi, &(i, fl)) in idx.iter().enumerate() {
        let src = ds.images.slice_axis(Axis(0), Slice::from(i..i + 1));
        let mut dst = images.slice_axis_mut(Axis(0), Slice::from(bi..bi + 1));
        if fl {
            dst.assign(&src.slice_axis(Axis(3), Slice::new(0, None, -1)));
        } else {
            dst.assign(&src);
        }
    }
    let masks = ds.masks.as_ref().map(|m| {
        let mut out = ArrayD::<usize>::zeros(IxDyn(&[idx.len(), s, s]));
        for (bi, &(i, fl)) in idx.iter().enumerate() {
            let src = m.slice_axis(Axis(0), Slice::from(i..i + 1));
            let mut dst = out.slice_axis_mut(Axis(0), Slice::from(bi..bi + 1));
            if fl {
                dst.assign(&src.slice_axis(Axis(2), Slice::new(0, None, -1)));
            } else {
                dst.assign(&src);
            }
        }
        out
    });
    (images, masks)
}

// ---- value conversion & PNG output ----

pub fn unit_to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn u8_to_unit(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Write an image batch as a tiled PNG grid.
pub fn save_sample_grid(path: &Path, images: &Tensor, cols: usize) -> Result<()> {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert_eq!(c, 3, "sample grids are RGB");
    let cols = cols.max(1).min(n);
    let rows = n.div_ceil(cols);
    let mut img = image::RgbImage::new((cols * w) as u32, (rows * h) as u32);
    for i in 0..n {
        let (r0, c0) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                let px = image::Rgb([
                    unit_to_u8(images[[i, 0, y, x]]),
                    unit_to_u8(images[[i, 1, y, x]]),
                    unit_to_u8(images[[i, 2, y, x]]),
                ]);
                img.put_pixel((c0 * w + x) as u32, (r0 * h + y) as u32, px);
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Write every image of a dataset tensor into a folder as zero-padded PNGs.
pub fn save_image_folder(dir: &Path, images: &Tensor, masks: Option<&ArrayD<usize>>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let s = images.shape();
    let (n, _c, h, w) = (s[0], s[1], s[2], s[3]);
    if masks.is_some() {
        fs::create_dir_all(dir.join("masks"))?;
    }
    for i in 0..n {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([
                        unit_to_u8(images[[i, 0, y, x]]),
                        unit_to_u8(images[[i, 1, y, x]]),
                        unit_to_u8(images[[i, 2, y, x]]),
                    ]),
                );
            }
        }
        let name = format!("{i:06}.png");
        img.save(dir.join(&name))?;
        if let Some(m) = masks {
            let mut mi = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    mi.put_pixel(x as u32, y as u32, image::Luma([m[[i, y, x]] as u8]));
                }
            }
            mi.save(dir.join("masks").join(&name))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_deterministic_per_seed() {
        let (a_img, a_m) = make_synthetic_shapes(6, 16, 99).unwrap();
        let (b_img, b_m) = make_synthetic_shapes(6, 16, 99).unwrap();
        assert_eq!(a_img, b_img);
        assert_eq!(a_m, b_m);
        let (c_img, _) = make_synthetic_shapes(6, 16, 100).unwrap();
        assert_ne!(a_img, c_img);
    }

    #[test]
    fn mask_classes_are_bounded() {
        let (img, m) = make_synthetic_shapes(20, 32, 3).unwrap();
        assert!(m.iter().all(|&c| c < SHAPE_CLASSES));
        assert!(img.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        // at least one non-background pixel per image
        for i in 0..20 {
            let any = m
                .slice_axis(Axis(0), Slice::from(i..i + 1))
                .iter()
                .any(|&c| c > 0);
            assert!(any, "image {i} has no shape");
        }
    }

    #[test]
    fn disk_pixel_area_close_to_analytic() {
        // pixel-count oracle over the rasterizer
        let s = 64usize;
        for r in [6.0f64, 10.0, 14.0] {
            let (cx, cy) = (32.0, 32.0);
            let mut count = 0usize;
            for y in 0..s {
                for x in 0..s {
                    if disk_hit(x as f64 + 0.5, y as f64 + 0.5, cx, cy, r) {
                        count += 1;
                    }
                }
            }
            let area = std::f64::consts::PI * r * r;
            let perimeter = std::f64::consts::TAU * r;
            assert!(
                (count as f64 - area).abs() <= perimeter,
                "disk r={r}: {count} px vs area {area:.1}"
            );
        }
    }

    #[test]
    fn batch_iterator_partial_batches_and_determinism() {
        let mut it = BatchIter::new(10, 5, 4, false).unwrap();
        let sizes: Vec<usize> = (0..3).map(|_| it.next_indices().len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        // same seed -> identical order
        let mut a = BatchIter::new(10, 5, 4, false).unwrap();
        let mut b = BatchIter::new(10, 5, 4, false).unwrap();
        for _ in 0..7 {
            assert_eq!(a.next_indices(), b.next_indices());
        }
        // epochs reshuffle but stay deterministic
        let mut c = BatchIter::new(10, 5, 4, false).unwrap();
        c.seek(1, 0);
        let mut d = BatchIter::new(10, 5, 4, false).unwrap();
        for _ in 0..3 {
            d.next_indices();
        }
        assert_eq!(c.next_indices(), d.next_indices());
    }

    #[test]
    fn packed_roundtrip_preserves_values_within_quantization() {
        let dir = std::env::temp_dir().join("ggdr_test_packed");
        fs::create_dir_all(&dir).unwrap();
        let (img, masks) = make_synthetic_shapes(4, 16, 1).unwrap();
        let p = dir.join("data.pack");
        write_packed(&p, &img).unwrap();
        write_packed_masks(&p.with_extension("masks"), &masks).unwrap();
        let spec = DatasetSpec {
            source: Source::Packed(p.clone()),
            resolution: 16,
            channels: 3,
            horizontal_flip: false,
            label_masks: true,
        };
        let ds = load_dataset(&spec).unwrap();
        assert_eq!(ds.len(), 4);
        let max_err = ds
            .images
            .iter()
            .zip(img.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1.0 / 255.0 + 1e-12, "max err {max_err}");
        assert_eq!(ds.masks.unwrap(), masks);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn png_folder_roundtrip_and_error_listing() {
        let dir = std::env::temp_dir().join("ggdr_test_folder");
        fs::remove_dir_all(&dir).ok();
        let (img, masks) = make_synthetic_shapes(3, 16, 2).unwrap();
        save_image_folder(&dir, &img, Some(&masks)).unwrap();
        let spec = DatasetSpec {
            source: Source::Folder(dir.clone()),
            resolution: 16,
            channels: 3,
            horizontal_flip: false,
            label_masks: true,
        };
        let ds = load_dataset(&spec).unwrap();
        assert_eq!(ds.len(), 3);
        let max_err = ds
            .images
            .iter()
            .zip(img.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1.0 / 255.0 + 1e-12);

        // an odd-sized intruder must abort with a per-file listing
        image::RgbImage::new(7, 7).save(dir.join("zzz_bad.png")).unwrap();
        let err = load_dataset(&spec).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("zzz_bad.png"), "missing file name in: {msg}");
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn flip_gather_mirrors_pixels() {
        let (img, _) = make_synthetic_shapes(2, 8, 4).unwrap();
        let ds = Dataset {
            images: img.clone(),
            masks: None,
            resolution: 8,
        };
        let (batch, _) = gather_batch(&ds, &[(0, true), (1, false)]);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(batch[[0, 0, y, x]], img[[0, 0, y, 7 - x]]);
                assert_eq!(batch[[1, 0, y, x]], img[[1, 0, y, x]]);
            }
        }
    }
}
