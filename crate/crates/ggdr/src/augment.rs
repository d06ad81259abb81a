//! Geometric augmentations applied consistently to fake images and their
//! generator feature maps, plus a threshold controller for the augmentation
//! probability.
//!
//! Every transform is a single affine map of normalized [-1, 1] coordinates,
//! so the same instance applies at any resolution. Color operations, were
//! they ever added, would be image-only; feature maps receive geometric ops
//! exclusively.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kernels, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Which op gates fired while sampling a transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpFlags {
    pub flip: bool,
    pub rotate: bool,
    pub translate: bool,
    pub scale: bool,
}

/// An invertible geometric transform, stored as the affine map that takes
/// normalized output coordinates to normalized source coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricTransform {
    /// [a, b, c, d, e, f]: x_src = a x + b y + c; y_src = d x + e y + f.
    pub matrix: [f64; 6],
    pub flags: OpFlags,
    /// Pairing id: the training step applies one instance to both the image
    /// and its feature map; the id makes that contract assertable.
    pub id: u64,
}

pub const IDENTITY_MATRIX: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

impl GeometricTransform {
    pub fn identity() -> Self {
        GeometricTransform {
            matrix: IDENTITY_MATRIX,
            flags: OpFlags::default(),
            id: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.matrix == IDENTITY_MATRIX
    }
}

/// Compose two sampling matrices: result maps output coords through `second`
/// then `first` (i.e. the forward op of `second` is applied after `first`).
fn compose(first: &[f64; 6], second: &[f64; 6]) -> [f64; 6] {
    // sampling matrices are inverse maps, so applying forward op B after A
    // means sampling through A_inv . B_inv: x_src = A(B(x_out))
    let [a1, b1, c1, d1, e1, f1] = *first;
    let [a2, b2, c2, d2, e2, f2] = *second;
    [
        a1 * a2 + b1 * d2,
        a1 * b2 + b1 * e2,
        a1 * c2 + b1 * f2 + c1,
        d1 * a2 + e1 * d2,
        d1 * b2 + e1 * e2,
        d1 * c2 + e1 * f2 + f1,
    ]
}

/// Maximum translation, as a fraction of the image width.
pub const MAX_TRANSLATE_FRAC: f64 = 0.125;
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.25);

/// Sample a transform. Each geometric op independently activates with
/// probability `p`; an active flip mirrors horizontally with probability 1/2,
/// rotation picks k*90 degrees uniformly, translation is uniform within
/// 12.5% of the width per axis, and isotropic scale is uniform in
/// [0.8, 1.25].
pub fn sample_transform(rng: &mut ChaCha8Rng, p: f64) -> Result<GeometricTransform> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!(
            "augmentation probability must lie in [0, 1], got {p}"
        )));
    }
    let mut flags = OpFlags::default();
    let mut m = IDENTITY_MATRIX;
    if p > 0.0 {
        if rng.random::<f64>() < p {
            flags.flip = true;
            if rng.random::<f64>() < 0.5 {
                // inverse of a horizontal mirror is itself
                m = compose(&m, &[-1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
            }
        }
        if rng.random::<f64>() < p {
            flags.rotate = true;
            let k = rng.random_range(0..4u32);
            // sampling matrix of rot(k*90deg) is rot(-k*90deg)
            let (c, s) = match k {
                0 => (1.0, 0.0),
                1 => (0.0, -1.0),
                2 => (-1.0, 0.0),
                _ => (0.0, 1.0),
            };
            m = compose(&m, &[c, s, 0.0, -s, c, 0.0]);
        }
        if rng.random::<f64>() < p {
            flags.translate = true;
            // normalized width is 2, so 12.5% of width is 0.25
            let dx = (rng.random::<f64>() * 2.0 - 1.0) * 2.0 * MAX_TRANSLATE_FRAC;
            let dy = (rng.random::<f64>() * 2.0 - 1.0) * 2.0 * MAX_TRANSLATE_FRAC;
            m = compose(&m, &[1.0, 0.0, -dx, 0.0, 1.0, -dy]);
        }
        if rng.random::<f64>() < p {
            flags.scale = true;
            let s = SCALE_RANGE.0 + rng.random::<f64>() * (SCALE_RANGE.1 - SCALE_RANGE.0);
            m = compose(&m, &[1.0 / s, 0.0, 0.0, 0.0, 1.0 / s, 0.0]);
        }
    }
    Ok(GeometricTransform {
        matrix: m,
        flags,
        id: rng.random::<u64>(),
    })
}

fn affine_apply(t: &GeometricTransform, x: &Tensor) -> Tensor {
    if t.is_identity() {
        return x.clone();
    }
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let taps = kernels::affine_taps(&t.matrix, h, w, h, w);
    kernels::affine_resample_fwd(x, &taps, h, w)
}

/// Apply a transform to an image batch [N,C,H,W] with bilinear resampling
/// and reflection padding. The identity transform is bit-exact.
pub fn apply_to_image(t: &GeometricTransform, image: &Tensor) -> Tensor {
    affine_apply(t, image)
}

/// Apply the same transform at feature resolution. Only the geometric part
/// of a transform ever reaches feature maps.
pub fn apply_to_feature_map(t: &GeometricTransform, fmap: &Tensor) -> Tensor {
    affine_apply(t, fmap)
}

/// Per-sample graph-op version; keeps the warp differentiable so generator
/// gradients flow through augmented fakes.
pub fn apply_per_sample_var(g: &mut Graph, ts: &[GeometricTransform], v: Var) -> Var {
    if ts.iter().all(|t| t.is_identity()) {
        return v;
    }
    let s = g.shape(v).to_vec();
    let mats: Vec<[f64; 6]> = ts.iter().map(|t| t.matrix).collect();
    g.affine_resample_per_sample(v, std::sync::Arc::new(mats), s[2], s[3])
}

/// Graph-op version used inside differentiable paths (generator step).
pub fn apply_var(g: &mut Graph, t: &GeometricTransform, v: Var) -> Var {
    if t.is_identity() {
        return v;
    }
    let s = g.shape(v).to_vec();
    g.affine_resample(v, t.matrix, s[2], s[3])
}

/// Apply per-sample transforms to an image batch (one transform per sample).
pub fn apply_per_sample(ts: &[GeometricTransform], batch: &Tensor) -> Tensor {
    assert_eq!(ts.len(), batch.shape()[0], "one transform per sample");
    if ts.iter().all(|t| t.is_identity()) {
        return batch.clone();
    }
    use ndarray::{Axis, Slice};
    let mut out = batch.clone();
    let s = batch.shape().to_vec();
    for (i, t) in ts.iter().enumerate() {
        if t.is_identity() {
            continue;
        }
        let one = batch
            .slice_axis(Axis(0), Slice::from(i..i + 1))
            .to_owned()
            .into_shape_with_order(ndarray::IxDyn(&[1, s[1], s[2], s[3]]))
            .unwrap();
        let warped = affine_apply(t, &one);
        out.slice_axis_mut(Axis(0), Slice::from(i..i + 1))
            .assign(&warped);
    }
    out
}

/// Adaptive augmentation controller state. Tracks a window of discriminator
/// overfitting estimates r_t = mean(sign(real logits)) and nudges p toward
/// keeping r_t at the target.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaState {
    pub p: f64,
    pub target_rt: f64,
    pub step_size: f64,
    pub window: usize,
    pub history: VecDeque<f64>,
}

impl Default for AdaState {
    fn default() -> Self {
        AdaState {
            p: 0.0,
            target_rt: 0.6,
            step_size: 0.002,
            window: 16,
            history: VecDeque::new(),
        }
    }
}

/// Update the controller from a batch of real logits: push the batch r_t
/// estimate, then move p by one step toward the target and clamp to [0, 1].
pub fn ada_update(state: &AdaState, real_logits: &Tensor) -> AdaState {
    let mut next = state.clone();
    let n = real_logits.len();
    if n == 0 {
        return next;
    }
    let rt_batch = real_logits
        .iter()
        .map(|&v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / n as f64;
    next.history.push_back(rt_batch);
    while next.history.len() > next.window {
        next.history.pop_front();
    }
    let rt = next.history.iter().sum::<f64>() / next.history.len() as f64;
    if rt > next.target_rt {
        next.p += next.step_size;
    } else {
        next.p -= next.step_size;
    }
    next.p = next.p.clamp(0.0, 1.0);
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn p_zero_always_identity() {
        let mut r = rng(1);
        for _ in 0..100 {
            let t = sample_transform(&mut r, 0.0).unwrap();
            assert!(t.is_identity());
            assert_eq!(t.flags, OpFlags::default());
        }
    }

    #[test]
    fn p_one_is_deterministic_and_nontrivial() {
        let a = sample_transform(&mut rng(7), 1.0).unwrap();
        let b = sample_transform(&mut rng(7), 1.0).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_identity());
        assert!(a.flags.flip && a.flags.rotate && a.flags.translate && a.flags.scale);
    }

    #[test]
    fn invalid_probability_rejected() {
        assert!(matches!(
            sample_transform(&mut rng(0), 1.5),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            sample_transform(&mut rng(0), -0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn per_op_application_rate_matches_p() {
        let mut r = rng(42);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let t = sample_transform(&mut r, 0.5).unwrap();
            counts[0] += t.flags.flip as usize;
            counts[1] += t.flags.rotate as usize;
            counts[2] += t.flags.translate as usize;
            counts[3] += t.flags.scale as usize;
        }
        for c in counts {
            let rate = c as f64 / n as f64;
            assert!((rate - 0.5).abs() < 0.02, "op rate {rate} not within 0.02");
        }
    }

    fn flip_transform() -> GeometricTransform {
        GeometricTransform {
            matrix: [-1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            flags: OpFlags {
                flip: true,
                ..OpFlags::default()
            },
            id: 1,
        }
    }

    #[test]
    fn horizontal_flip_is_exact_pixel_mirror() {
        let w = 16;
        let img = Tensor::from_shape_fn(IxDyn(&[1, 1, 4, w]), |ix| (ix[3] * 10 + ix[2]) as f64);
        let flipped = apply_to_image(&flip_transform(), &img);
        for y in 0..4 {
            for x in 0..w {
                assert_eq!(flipped[[0, 0, y, x]], img[[0, 0, y, w - 1 - x]]);
            }
        }
        // involution
        let back = apply_to_image(&flip_transform(), &flipped);
        let mae: f64 = (&back - &img).iter().map(|v| v.abs()).sum::<f64>() / img.len() as f64;
        assert!(mae < 1e-6);
    }

    #[test]
    fn rotation_90_is_exact() {
        // rot90 forward: sampling matrix is rot(-90)
        let t = GeometricTransform {
            matrix: [0.0, 1.0, 0.0, -1.0, 0.0, 0.0],
            flags: OpFlags {
                rotate: true,
                ..OpFlags::default()
            },
            id: 2,
        };
        let n = 8;
        let img = Tensor::from_shape_fn(IxDyn(&[1, 1, n, n]), |ix| (ix[2] * n + ix[3]) as f64);
        let rot = apply_to_image(&t, &img);
        // four rotations come back exactly
        let r4 = apply_to_image(
            &t,
            &apply_to_image(&t, &apply_to_image(&t, &rot)),
        );
        assert_eq!(r4, img);
        // every output pixel is one of the input pixels (no interpolation)
        let vals: std::collections::BTreeSet<u64> = img.iter().map(|&v| v as u64).collect();
        assert!(rot.iter().all(|&v| vals.contains(&(v as u64))));
    }

    #[test]
    fn identity_is_bit_exact() {
        let img = Tensor::from_shape_fn(IxDyn(&[2, 3, 8, 8]), |ix| {
            (ix[0] + ix[1] * 7 + ix[2] * 13 + ix[3] * 29) as f64 * 0.017
        });
        let t = GeometricTransform::identity();
        assert_eq!(apply_to_image(&t, &img), img);
        assert_eq!(apply_to_feature_map(&t, &img), img);
    }

    /// 4x box downsample used by the commutation oracle.
    fn downsample4(x: &Tensor) -> Tensor {
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 4, w / 4);
        let mut out = Tensor::zeros(IxDyn(&[n, c, oh, ow]));
        for i in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for x2 in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..4 {
                            for dx in 0..4 {
                                acc += x[[i, ch, 4 * y + dy, 4 * x2 + dx]];
                            }
                        }
                        out[[i, ch, y, x2]] = acc / 16.0;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn image_and_feature_transforms_commute_with_downsampling() {
        // smooth synthetic input: sum of low-frequency sinusoids
        let img = Tensor::from_shape_fn(IxDyn(&[1, 2, 32, 32]), |ix| {
            let y = ix[2] as f64 / 32.0;
            let x = ix[3] as f64 / 32.0;
            let ph = ix[1] as f64;
            (2.0 * std::f64::consts::PI * (x + 0.3 * ph)).sin() * 0.5
                + (2.0 * std::f64::consts::PI * (y - 0.2 * ph)).cos() * 0.5
        });
        let mut r = rng(5);
        for _ in 0..5 {
            let t = sample_transform(&mut r, 1.0).unwrap();
            let a = downsample4(&apply_to_image(&t, &img));
            let b = apply_to_feature_map(&t, &downsample4(&img));
            let mae: f64 = (&a - &b).iter().map(|v| v.abs()).sum::<f64>() / a.len() as f64;
            assert!(mae < 0.05, "commutation MAE {mae} >= 0.05");
        }
    }

    #[test]
    fn graph_apply_matches_tensor_apply() {
        let img = Tensor::from_shape_fn(IxDyn(&[2, 3, 8, 8]), |ix| {
            ((ix[0] * 3 + ix[1]) * 64 + ix[2] * 8 + ix[3]) as f64 * 0.01
        });
        let t = sample_transform(&mut rng(9), 1.0).unwrap();
        let direct = apply_to_image(&t, &img);
        let mut g = Graph::new();
        let v = g.leaf(img);
        let warped = apply_var(&mut g, &t, v);
        assert_eq!(g.val(warped), &direct);
    }

    #[test]
    fn per_sample_graph_apply_matches_tensor_apply() {
        let img = Tensor::from_shape_fn(IxDyn(&[3, 2, 8, 8]), |ix| {
            ((ix[0] * 2 + ix[1]) * 64 + ix[2] * 8 + ix[3]) as f64 * 0.013
        });
        let mut r = rng(12);
        let ts: Vec<GeometricTransform> = (0..3)
            .map(|_| sample_transform(&mut r, 0.7).unwrap())
            .collect();
        let direct = apply_per_sample(&ts, &img);
        let mut g = Graph::new();
        let v = g.leaf(img.clone());
        let warped = apply_per_sample_var(&mut g, &ts, v);
        assert_eq!(g.val(warped), &direct);
        // gradcheck through the per-sample warp
        let y0 = g.mul(warped, warped);
        let y = g.sum_all(y0);
        let gv = g.grad(y, &[v])[0];
        let analytic = g.val(gv).clone();
        let eps = 1e-6;
        for i in [0usize, 17, 100, 300] {
            let mut up = img.clone();
            up.as_slice_mut().unwrap()[i] += eps;
            let a: f64 = apply_per_sample(&ts, &up).iter().map(|x| x * x).sum();
            let mut dn = img.clone();
            dn.as_slice_mut().unwrap()[i] -= eps;
            let b: f64 = apply_per_sample(&ts, &dn).iter().map(|x| x * x).sum();
            let fd = (a - b) / (2.0 * eps);
            let an = analytic.as_slice().unwrap()[i];
            assert!((fd - an).abs() < 1e-5, "per-sample warp grad {fd} vs {an}");
        }
    }

    #[test]
    fn ada_update_moves_p_toward_target() {
        let st = AdaState::default();
        let pos = Tensor::from_elem(IxDyn(&[8]), 3.0);
        let up = ada_update(&st, &pos);
        assert!(up.p > st.p);

        let st = AdaState {
            p: 0.5,
            ..AdaState::default()
        };
        let neg = Tensor::from_elem(IxDyn(&[8]), -3.0);
        let down = ada_update(&st, &neg);
        assert!(down.p < 0.5);

        // clamp at zero
        let st = AdaState::default();
        let stay = ada_update(&st, &neg);
        assert_eq!(stay.p, 0.0);
    }
}
