//! Desk-scale evaluation: Frechet distance between Gaussian feature fits,
//! k-NN-manifold precision/recall, inception score, and Gaussian
//! log-likelihood worst-sample ranking — all over pluggable feature
//! extractors. Absolute values are comparable only within one extractor tag.

use ndarray::{Array1, Array2, Axis, IxDyn, Slice};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::softmax_rows;
use crate::nets::ParamSet;
use crate::optim::Adam;

/// Deterministic image-batch embedding with a stable identity tag.
pub trait FeatureExtractor {
    fn tag(&self) -> &str;
    /// images [n, 3, s, s] -> features [n, d]
    fn embed(&self, images: &Tensor) -> Result<Array2<f64>>;
    fn dim(&self) -> usize;
}

const EMBED_BATCH: usize = 64;

/// Small fixed-seed random convolutional embedding (three strided conv
/// blocks, global mean pool). The tag pins the architecture version, seed
/// and input resolution.
pub struct RandomConvExtractor {
    tag: String,
    image_size: usize,
    params: ParamSet,
    widths: Vec<usize>,
}

impl RandomConvExtractor {
    pub fn new(image_size: usize, seed: u64) -> Result<Self> {
        if !image_size.is_power_of_two() || image_size < 8 {
            return Err(Error::config("extractor needs a power-of-two resolution"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xfea7);
        let widths = vec![16usize, 32, 64];
        let mut params = ParamSet::new();
        let mut c_in = 3usize;
        for (i, &c_out) in widths.iter().enumerate() {
            let fan_in = c_in * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            let w = Tensor::from_shape_fn(IxDyn(&[c_out, c_in, 3, 3]), |_| {
                let n: f64 = rand_distr::Distribution::sample(
                    &rand_distr::StandardNormal,
                    &mut rng,
                );
                n * std
            });
            params.push(format!("conv{i}.w"), w);
            params.push(format!("conv{i}.b"), Tensor::zeros(IxDyn(&[c_out])));
            c_in = c_out;
        }
        Ok(RandomConvExtractor {
            tag: format!("randconv-v1-s{seed}-d64-r{image_size}"),
            image_size,
            params,
            widths,
        })
    }

    fn trunk(&self, g: &mut Graph, bound: &[crate::autodiff::Var], images: crate::autodiff::Var) -> crate::autodiff::Var {
        let mut h = images;
        for i in 0..self.widths.len() {
            let w = bound[2 * i];
            let b = bound[2 * i + 1];
            let y = g.conv2d(h, w, 2, 1);
            let y = g.add_bias(y, b);
            h = g.leaky_relu(y, 0.2);
        }
        h
    }
}

/// Global average pool of a NCHW var into [n, c].
fn global_mean_pool(g: &mut Graph, v: crate::autodiff::Var) -> Array2<f64> {
    let t = g.val(v);
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Array2::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    acc += t[[i, ch, y, x]];
                }
            }
            out[[i, ch]] = acc / (h * w) as f64;
        }
    }
    out
}

fn check_images(images: &Tensor, image_size: usize) -> Result<()> {
    if images.ndim() != 4 || images.shape()[1] != 3 || images.shape()[2] != image_size {
        return Err(Error::input(format!(
            "extractor expects [n, 3, {image_size}, {image_size}], got {:?}",
            images.shape()
        )));
    }
    Ok(())
}

impl FeatureExtractor for RandomConvExtractor {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn dim(&self) -> usize {
        64
    }

    fn embed(&self, images: &Tensor) -> Result<Array2<f64>> {
        check_images(images, self.image_size)?;
        let n = images.shape()[0];
        let mut out = Array2::zeros((n, self.dim()));
        let mut start = 0;
        while start < n {
            let end = (start + EMBED_BATCH).min(n);
            let chunk = images
                .slice_axis(Axis(0), Slice::from(start..end))
                .to_owned();
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g);
            let iv = g.leaf(chunk);
            let h = self.trunk(&mut g, &bound, iv);
            let feats = global_mean_pool(&mut g, h);
            out.slice_mut(ndarray::s![start..end, ..]).assign(&feats);
            start = end;
        }
        Ok(out)
    }
}

/// Random-trunk classifier with a trained linear head. Supplies both an
/// embedding (penultimate features) and class posteriors for the inception
/// score.
pub struct ClassifierExtractor {
    trunk: RandomConvExtractor,
    head_w: Array2<f64>,
    head_b: Array1<f64>,
    tag: String,
    classes: usize,
}

impl ClassifierExtractor {
    /// Train the linear head on (images, labels) with the trunk frozen.
    pub fn train(
        images: &Tensor,
        labels: &[usize],
        classes: usize,
        seed: u64,
        iters: usize,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config("classifier needs >= 2 classes"));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::input("images/labels length mismatch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let image_size = images.shape()[2];
        let trunk = RandomConvExtractor::new(image_size, seed)?;
        let feats = trunk.embed(images)?;
        let d = trunk.dim();

        // logistic regression on the frozen embedding
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1a55);
        let std = (1.0 / d as f64).sqrt();
        params.push(
            "w",
            Tensor::from_shape_fn(IxDyn(&[classes, d, 1, 1]), |_| {
                let n: f64 =
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                n * std
            }),
        );
        params.push("b", Tensor::zeros(IxDyn(&[classes])));
        let mut opt = Adam::new(0.05, 0.9, 0.999, &params);

        let n = feats.nrows();
        // features as a [1, d, n, 1] map so the 1x1 conv scores all samples at once
        let mut fmap = Tensor::zeros(IxDyn(&[1, d, n, 1]));
        for i in 0..n {
            for j in 0..d {
                fmap[[0, j, i, 0]] = feats[[i, j]];
            }
        }
        let label_map =
            ndarray::ArrayD::from_shape_vec(IxDyn(&[1, n, 1]), labels.to_vec()).unwrap();
        for _ in 0..iters {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let fv = g.leaf(fmap.clone());
            let logits0 = g.conv2d(fv, bound[0], 1, 0);
            let logits = g.add_bias(logits0, bound[1]);
            let ce = crate::losses::aux_segmentation_loss(&mut g, logits, &label_map)?;
            let grads = g.grad(ce, &bound);
            let gt: Vec<Tensor> = grads.iter().map(|&v| g.val(v).clone()).collect();
            opt.step(&mut params, &gt);
        }

        let wt = params.get("w").unwrap();
        let mut head_w = Array2::zeros((classes, d));
        for c in 0..classes {
            for j in 0..d {
                head_w[[c, j]] = wt[[c, j, 0, 0]];
            }
        }
        let head_b = Array1::from_iter(params.get("b").unwrap().iter().copied());
        Ok(ClassifierExtractor {
            tag: format!("tinyclf-v1-s{seed}-c{classes}-r{image_size}"),
            trunk,
            head_w,
            head_b,
            classes,
        })
    }

    /// Class posteriors p(y|x) for an image batch.
    pub fn class_probs(&self, images: &Tensor) -> Result<Array2<f64>> {
        let feats = self.trunk.embed(images)?;
        let logits = feats.dot(&self.head_w.t()) + &self.head_b;
        Ok(softmax_rows(&logits))
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

impl FeatureExtractor for ClassifierExtractor {
    fn tag(&self) -> &str {
        &self.tag
    }
    fn dim(&self) -> usize {
        self.trunk.dim()
    }
    fn embed(&self, images: &Tensor) -> Result<Array2<f64>> {
        self.trunk.embed(images)
    }
}

/// Dominant foreground class per image from label masks (0 when the image is
/// all background).
pub fn dominant_class_labels(masks: &ndarray::ArrayD<usize>, classes: usize) -> Vec<usize> {
    let n = masks.shape()[0];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut counts = vec![0usize; classes];
        for &v in masks.index_axis(Axis(0), i).iter() {
            counts[v.min(classes - 1)] += 1;
        }
        counts[0] = 0; // background never dominates
        let best = (0..classes).max_by_key(|&c| counts[c]).unwrap();
        out.push(if counts[best] == 0 { 0 } else { best });
    }
    out
}

/// First two moments of a feature matrix.
#[derive(Clone, Debug)]
pub struct GaussianStats {
    pub mu: Array1<f64>,
    pub sigma: Array2<f64>,
}

/// Sample mean and unbiased covariance of features [n, d]; needs n >= 2.
pub fn gaussian_stats(features: &Array2<f64>) -> Result<GaussianStats> {
    let n = features.nrows();
    let d = features.ncols();
    if n < 2 {
        return Err(Error::input(format!(
            "gaussian_stats needs n >= 2, got {n}"
        )));
    }
    let mu = features.mean_axis(Axis(0)).unwrap();
    let centered = features - &mu.view().insert_axis(Axis(0));
    let sigma = centered.t().dot(&centered) / (n - 1) as f64;
    debug_assert_eq!(sigma.shape(), &[d, d]);
    Ok(GaussianStats { mu, sigma })
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(a.nrows(), a.ncols(), a.iter().copied())
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// are clamped to zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Frechet distance between two Gaussians:
/// |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)), with the cross term
/// computed as Tr((Sa^(1/2) Sb Sa^(1/2))^(1/2)). Slightly negative results
/// within 1e-6 are floored to zero.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mu.len() != b.mu.len() {
        return Err(Error::input(format!(
            "fid dimension mismatch: {} vs {}",
            a.mu.len(),
            b.mu.len()
        )));
    }
    let diff = &a.mu - &b.mu;
    let mean_term: f64 = diff.iter().map(|v| v * v).sum();
    let sa = to_dmatrix(&a.sigma);
    let sb = to_dmatrix(&b.sigma);
    let sa_half = sqrtm_psd(&sa);
    let inner = &sa_half * &sb * &sa_half;
    let inner_sym = (&inner + inner.transpose()) * 0.5;
    let eig = inner_sym.symmetric_eigen();
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).sum();
    let val = mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(if val < 0.0 && val >= -1e-6 { 0.0 } else { val })
}

/// Squared Euclidean distances between row sets, via the Gram expansion.
fn pairwise_sq(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let an: Array1<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let bn: Array1<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut d = a.dot(&b.t());
    for i in 0..d.nrows() {
        for j in 0..d.ncols() {
            d[[i, j]] = (an[i] + bn[j] - 2.0 * d[[i, j]]).max(0.0);
        }
    }
    d
}

/// k-th nearest-neighbor distance of each row within its own set (self
/// excluded).
fn knn_radii(x: &Array2<f64>, k: usize) -> Vec<f64> {
    let d = pairwise_sq(x, x);
    let n = x.nrows();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[[i, j]]).collect();
        row.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.push(row[k - 1].sqrt());
    }
    out
}

/// Improved k-NN-manifold precision and recall. Precision: fraction of fake
/// points inside some real point's k-NN ball; recall: fraction of real
/// points inside some fake point's ball.
pub fn precision_recall(
    real: &Array2<f64>,
    fake: &Array2<f64>,
    k: usize,
) -> Result<(f64, f64)> {
    if real.ncols() != fake.ncols() {
        return Err(Error::input("precision_recall dimension mismatch"));
    }
    if real.nrows() <= k || fake.nrows() <= k {
        return Err(Error::input(format!(
            "precision_recall needs more than k={k} points per set (got {} real, {} fake)",
            real.nrows(),
            fake.nrows()
        )));
    }
    let rr = knn_radii(real, k);
    let fr = knn_radii(fake, k);
    let d_fr = pairwise_sq(fake, real);
    let mut covered_fake = 0usize;
    for i in 0..fake.nrows() {
        if (0..real.nrows()).any(|j| d_fr[[i, j]].sqrt() <= rr[j]) {
            covered_fake += 1;
        }
    }
    let d_rf = pairwise_sq(real, fake);
    let mut covered_real = 0usize;
    for i in 0..real.nrows() {
        if (0..fake.nrows()).any(|j| d_rf[[i, j]].sqrt() <= fr[j]) {
            covered_real += 1;
        }
    }
    Ok((
        covered_fake as f64 / fake.nrows() as f64,
        covered_real as f64 / real.nrows() as f64,
    ))
}

/// Inception score over class posterior rows: exp(E_x KL(p(y|x) || p(y))).
pub fn inception_score(class_probs: &Array2<f64>) -> Result<f64> {
    let n = class_probs.nrows();
    if n == 0 {
        return Err(Error::input("inception_score: empty batch"));
    }
    for row in class_probs.rows() {
        if row.iter().any(|&p| p < 0.0) || (row.sum() - 1.0).abs() > 1e-6 {
            return Err(Error::input(
                "inception_score rows must be probability vectors",
            ));
        }
    }
    let marginal = class_probs.mean_axis(Axis(0)).unwrap();
    let mut kl_mean = 0.0;
    for row in class_probs.rows() {
        let mut kl = 0.0;
        for (p, q) in row.iter().zip(marginal.iter()) {
            if *p > 0.0 {
                kl += p * (p / q.max(1e-300)).ln();
            }
        }
        kl_mean += kl;
    }
    kl_mean /= n as f64;
    Ok(kl_mean.exp())
}

/// Output of [`rank_worst`].
#[derive(Clone, Debug)]
pub struct RankResult {
    /// Sample indices sorted ascending by Gaussian log-likelihood
    /// (worst first). Ties keep input order.
    pub order: Vec<usize>,
    pub log_likelihood: Vec<f64>,
    /// True when the covariance was degenerate (or n < d + 2) and a diagonal
    /// fit was used instead.
    pub diagonal_fallback: bool,
}

/// Fit a Gaussian to the features and rank samples by log-likelihood,
/// worst first.
pub fn rank_worst(features: &Array2<f64>) -> Result<RankResult> {
    let n = features.nrows();
    let d = features.ncols();
    let stats = gaussian_stats(features)?;
    let mut diagonal_fallback = n < d + 2;
    let mut ll = vec![0.0f64; n];
    let mut full_ok = false;
    if !diagonal_fallback {
        let sigma = to_dmatrix(&stats.sigma);
        if let Some(chol) = sigma.clone().cholesky() {
            let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            for i in 0..n {
                let x = DVector::from_iterator(
                    d,
                    features.row(i).iter().copied().zip(stats.mu.iter()).map(|(a, m)| a - m),
                );
                let solved = chol.solve(&x);
                let maha = x.dot(&solved);
                ll[i] = -0.5 * (maha + logdet + d as f64 * (2.0 * std::f64::consts::PI).ln());
            }
            full_ok = true;
        } else {
            diagonal_fallback = true;
        }
    }
    if !full_ok {
        eprintln!(
            "rank_worst: degenerate covariance (n={n}, d={d}); falling back to a diagonal fit"
        );
        let var: Vec<f64> = (0..d)
            .map(|j| stats.sigma[[j, j]].max(1e-12))
            .collect();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..d {
                let z = features[[i, j]] - stats.mu[j];
                acc += z * z / var[j] + var[j].ln() + (2.0 * std::f64::consts::PI).ln();
            }
            ll[i] = -0.5 * acc;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        ll[a].partial_cmp(&ll[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(RankResult {
        order,
        log_likelihood: ll,
        diagonal_fallback,
    })
}

/// Bundle of metric outputs with the extractor identity attached.
#[derive(Clone, Debug)]
pub struct MetricResult {
    pub fid: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub inception_score: Option<f64>,
    pub extractor: String,
    pub n_real: usize,
    pub n_fake: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn gaussian_stats_closed_and_oracle() {
        let f = array![[0.0, 0.0], [2.0, 0.0]];
        let s = gaussian_stats(&f).unwrap();
        assert_eq!(s.mu, array![1.0, 0.0]);
        assert_eq!(s.sigma, array![[2.0, 0.0], [0.0, 0.0]]);

        let c = Array2::from_elem((5, 3), 0.7);
        let s = gaussian_stats(&c).unwrap();
        assert!(s.sigma.iter().all(|&v| v.abs() < 1e-15));

        // double-loop covariance oracle on random data
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Array2::from_shape_fn((100, 4), |_| rng.random::<f64>() * 2.0 - 1.0);
        let s = gaussian_stats(&f).unwrap();
        let n = 100;
        for a in 0..4 {
            for b in 0..4 {
                let ma = f.column(a).mean().unwrap();
                let mb = f.column(b).mean().unwrap();
                let mut acc = 0.0;
                for i in 0..n {
                    acc += (f[[i, a]] - ma) * (f[[i, b]] - mb);
                }
                acc /= (n - 1) as f64;
                assert!((s.sigma[[a, b]] - acc).abs() < 1e-10);
            }
        }

        assert!(gaussian_stats(&Array2::zeros((1, 3))).is_err());
    }

    #[test]
    fn fid_closed_forms() {
        let d = 6;
        let eye = Array2::eye(d);
        let a = GaussianStats {
            mu: Array1::zeros(d),
            sigma: eye.clone(),
        };
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);

        let mut mu_b = Array1::zeros(d);
        mu_b[0] = 1.0;
        let b = GaussianStats {
            mu: mu_b,
            sigma: eye.clone(),
        };
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-6);

        let c = GaussianStats {
            mu: Array1::zeros(d),
            sigma: &eye * 4.0,
        };
        assert!((fid(&a, &c).unwrap() - d as f64).abs() < 1e-6);

        // symmetry on random PSD stats
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = Array2::from_shape_fn((d, d), |_| rng.random::<f64>() - 0.5);
        let s1 = m.t().dot(&m) + &(&eye * 0.1);
        let m2 = Array2::from_shape_fn((d, d), |_| rng.random::<f64>() - 0.5);
        let s2 = m2.t().dot(&m2) + &(&eye * 0.1);
        let ga = GaussianStats {
            mu: Array1::from_shape_fn(d, |_| rng.random::<f64>()),
            sigma: s1,
        };
        let gb = GaussianStats {
            mu: Array1::from_shape_fn(d, |_| rng.random::<f64>()),
            sigma: s2,
        };
        let ab = fid(&ga, &gb).unwrap();
        let ba = fid(&gb, &ga).unwrap();
        assert!((ab - ba).abs() < 1e-8 * ab.abs().max(1.0));
        assert!(ab >= 0.0);

        let short = GaussianStats {
            mu: Array1::zeros(3),
            sigma: Array2::eye(3),
        };
        assert!(fid(&a, &short).is_err());
    }

    #[test]
    fn precision_recall_identical_and_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((20, 2), |_| rng.random::<f64>());
        let (p, r) = precision_recall(&x, &x, 3).unwrap();
        assert_eq!((p, r), (1.0, 1.0));

        // two far-separated clusters
        let far = &x + 1000.0;
        let (p, r) = precision_recall(&x, &far, 3).unwrap();
        assert_eq!((p, r), (0.0, 0.0));

        assert!(precision_recall(&x, &Array2::zeros((3, 2)), 3).is_err());
    }

    /// Brute-force oracle mirroring the estimator definition directly.
    fn pr_oracle(real: &Array2<f64>, fake: &Array2<f64>, k: usize) -> (f64, f64) {
        let dist = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let radius = |set: &Array2<f64>, i: usize| {
            let mut ds: Vec<f64> = (0..set.nrows())
                .filter(|&j| j != i)
                .map(|j| dist(set.row(i), set.row(j)))
                .collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ds[k - 1]
        };
        let mut p = 0;
        for i in 0..fake.nrows() {
            if (0..real.nrows()).any(|j| dist(fake.row(i), real.row(j)) <= radius(real, j)) {
                p += 1;
            }
        }
        let mut r = 0;
        for i in 0..real.nrows() {
            if (0..fake.nrows()).any(|j| dist(real.row(i), fake.row(j)) <= radius(fake, j)) {
                r += 1;
            }
        }
        (
            p as f64 / fake.nrows() as f64,
            r as f64 / real.nrows() as f64,
        )
    }

    #[test]
    fn precision_recall_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let real = Array2::from_shape_fn((40, 3), |_| rng.random::<f64>() * 2.0);
        let fake = Array2::from_shape_fn((30, 3), |_| rng.random::<f64>() * 2.0 + 0.5);
        let got = precision_recall(&real, &fake, 3).unwrap();
        let want = pr_oracle(&real, &fake, 3);
        assert_eq!(got, want);
    }

    #[test]
    fn precision_recall_dense_fakes_inside_wider_reals() {
        // fakes concentrated inside a dense region of the real manifold:
        // precision 1, recall < 1 (verified by the same brute-force rule)
        let mut real_v: Vec<f64> = (0..30).map(|i| i as f64 * 0.01).collect();
        real_v.extend((0..10).map(|i| 10.0 + i as f64)); // sparse far tail
        let real = Array2::from_shape_vec((40, 1), real_v).unwrap();
        let fake = Array2::from_shape_vec((20, 1), (0..20).map(|i| i as f64 * 0.012).collect())
            .unwrap();
        let (p, r) = precision_recall(&real, &fake, 3).unwrap();
        let (po, ro) = pr_oracle(&real, &fake, 3);
        assert_eq!((p, r), (po, ro));
        assert_eq!(p, 1.0);
        assert!(r < 1.0);
    }

    #[test]
    fn precision_recall_invariant_under_orthogonal_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let real = Array2::from_shape_fn((25, 3), |_| rng.random::<f64>());
        let fake = Array2::from_shape_fn((25, 3), |_| rng.random::<f64>() + 0.2);
        // a fixed rotation: Householder reflection then axis swap
        let v: Array1<f64> = Array1::from_vec(vec![1.0, 2.0, -1.0]);
        let vn = &v / (v.dot(&v)).sqrt();
        let mut q = Array2::eye(3);
        for i in 0..3 {
            for j in 0..3 {
                q[[i, j]] -= 2.0 * vn[i] * vn[j];
            }
        }
        let before = precision_recall(&real, &fake, 3).unwrap();
        let after = precision_recall(&real.dot(&q), &fake.dot(&q), 3).unwrap();
        assert!((before.0 - after.0).abs() < 1e-12);
        assert!((before.1 - after.1).abs() < 1e-12);
    }

    #[test]
    fn inception_score_closed_forms() {
        let c = 5;
        let uniform = Array2::from_elem((10, c), 1.0 / c as f64);
        assert!((inception_score(&uniform).unwrap() - 1.0).abs() < 1e-9);

        let mut onehot = Array2::zeros((c, c));
        for i in 0..c {
            onehot[[i, i]] = 1.0;
        }
        assert!((inception_score(&onehot).unwrap() - c as f64).abs() < 1e-9);

        let mut same = Array2::zeros((7, c));
        for i in 0..7 {
            same[[i, 2]] = 1.0;
        }
        assert!((inception_score(&same).unwrap() - 1.0).abs() < 1e-9);

        let bad = Array2::from_elem((2, 3), 0.5);
        assert!(inception_score(&bad).is_err());
    }

    #[test]
    fn rank_worst_behaviour() {
        let f = Array2::from_shape_vec((4, 1), vec![0.0, 0.0, 0.0, 10.0]).unwrap();
        let r = rank_worst(&f).unwrap();
        assert_eq!(r.order[0], 3, "outlier must rank worst");
        assert!(!r.diagonal_fallback);

        // all identical -> stable input order
        let c = Array2::from_elem((5, 2), 1.0);
        let r = rank_worst(&c).unwrap();
        assert_eq!(r.order, vec![0, 1, 2, 3, 4]);
        assert!(r.diagonal_fallback, "constant features are degenerate");

        // permutation equivariance of the worst set
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = Array2::from_shape_fn((30, 2), |_| rng.random::<f64>());
        let r1 = rank_worst(&f).unwrap();
        let perm: Vec<usize> = (0..30).rev().collect();
        let mut fp = Array2::zeros((30, 2));
        for (dst, &src) in perm.iter().enumerate() {
            fp.row_mut(dst).assign(&f.row(src));
        }
        let r2 = rank_worst(&fp).unwrap();
        let worst1: std::collections::BTreeSet<usize> =
            r1.order[..5].iter().copied().collect();
        let worst2: std::collections::BTreeSet<usize> =
            r2.order[..5].iter().map(|&i| perm[i]).collect();
        assert_eq!(worst1, worst2);
    }

    #[test]
    fn random_conv_extractor_is_deterministic_and_discriminative() {
        let (imgs, _) = crate::data_io::make_synthetic_shapes(8, 16, 44).unwrap();
        let e1 = RandomConvExtractor::new(16, 7).unwrap();
        let e2 = RandomConvExtractor::new(16, 7).unwrap();
        assert_eq!(e1.tag(), e2.tag());
        let f1 = e1.embed(&imgs).unwrap();
        let f2 = e2.embed(&imgs).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.shape(), &[8, 64]);
        // different images produce different features
        let d = (&f1.row(0) - &f1.row(1)).iter().map(|v| v.abs()).sum::<f64>();
        assert!(d > 1e-6);
    }

    #[test]
    fn classifier_extractor_learns_shapes() {
        let (imgs, masks) = crate::data_io::make_synthetic_shapes(96, 16, 50).unwrap();
        let labels = dominant_class_labels(&masks, 4);
        let clf = ClassifierExtractor::train(&imgs, &labels, 4, 1, 150).unwrap();
        let probs = clf.class_probs(&imgs).unwrap();
        let mut correct = 0usize;
        for (i, &l) in labels.iter().enumerate() {
            let pred = (0..4)
                .max_by(|&a, &b| probs[[i, a]].partial_cmp(&probs[[i, b]]).unwrap())
                .unwrap();
            correct += (pred == l) as usize;
        }
        let acc = correct as f64 / labels.len() as f64;
        assert!(acc > 0.5, "train accuracy {acc} too low");
        let is = inception_score(&probs).unwrap();
        assert!((1.0..=4.0).contains(&is));
    }
}
