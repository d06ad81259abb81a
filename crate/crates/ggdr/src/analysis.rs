//! Feature-map interpretation: seeded k-means over channel vectors with
//! overlay rendering, and a linear per-pixel probe on frozen encoder
//! features.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::nets::ParamSet;
use crate::optim::Adam;

/// Cluster assignment of every spatial location in a feature-map batch.
#[derive(Clone, Debug)]
pub struct ClusterMap {
    /// labels [batch, r, r], values in [0, k)
    pub labels: Array3<usize>,
    /// centroids [k, channels]
    pub centroids: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each Lloyd round; non-increasing.
    pub inertia_trace: Vec<f64>,
}

/// Default six-color palette for overlays.
pub const PALETTE6: [[u8; 3]; 6] = [
    [230, 60, 60],
    [60, 140, 230],
    [70, 190, 90],
    [240, 200, 60],
    [170, 90, 220],
    [90, 210, 200],
];

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Pool channel vectors from every location of every batch element and run
/// seeded k-means (k-means++ init, Lloyd iterations to an assignment
/// fixpoint or 100 rounds, empty clusters reseeded to the farthest point).
pub fn kmeans_features(fmap: &Tensor, k: usize, seed: u64) -> Result<ClusterMap> {
    if fmap.ndim() != 4 {
        return Err(Error::input("kmeans_features expects [N,C,r,r] maps"));
    }
    if k < 1 {
        return Err(Error::input("k must be >= 1"));
    }
    let s = fmap.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let npts = n * h * w;
    if npts < k {
        return Err(Error::input(format!(
            "{npts} locations cannot support k={k}"
        )));
    }
    // points[p] = channel vector at location p (batch-major, row-major)
    let mut points = Array2::<f64>::zeros((npts, c));
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = (i * h + y) * w + x;
                for ch in 0..c {
                    points[[p, ch]] = fmap[[i, ch, y, x]];
                }
            }
        }
    }
    {
        let mut distinct: Vec<&[f64]> = Vec::new();
        'outer: for p in 0..npts {
            let row = points.row(p);
            let rs = row.to_slice().unwrap();
            for d in &distinct {
                if *d == rs {
                    continue 'outer;
                }
            }
            distinct.push(points.row(p).to_slice().unwrap());
            if distinct.len() >= k {
                break;
            }
        }
        if distinct.len() < k {
            return Err(Error::input(format!(
                "only {} distinct points for k={k}",
                distinct.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // k-means++ seeding
    let mut centroids = Array2::<f64>::zeros((k, c));
    let first = rng.random_range(0..npts);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = (0..npts)
        .map(|p| sq_dist(points.row(p).to_slice().unwrap(), centroids.row(0).to_slice().unwrap()))
        .collect();
    for ci in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..npts)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = npts - 1;
            for (p, &d) in d2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = p;
                    break;
                }
            }
            chosen
        };
        centroids.row_mut(ci).assign(&points.row(pick));
        for p in 0..npts {
            let d = sq_dist(
                points.row(p).to_slice().unwrap(),
                centroids.row(ci).to_slice().unwrap(),
            );
            if d < d2[p] {
                d2[p] = d;
            }
        }
    }

    // Lloyd iterations to an assignment fixpoint (or 100 rounds)
    let assignments = |centroids: &Array2<f64>| -> Vec<usize> {
        (0..npts)
            .map(|p| {
                let ps = points.row(p);
                let psl = ps.to_slice().unwrap();
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for ci in 0..k {
                    let d = sq_dist(psl, centroids.row(ci).to_slice().unwrap());
                    if d < best_d {
                        best_d = d;
                        best = ci;
                    }
                }
                best
            })
            .collect()
    };
    let inertia_of = |assign: &[usize], centroids: &Array2<f64>| -> f64 {
        (0..npts)
            .map(|p| {
                sq_dist(
                    points.row(p).to_slice().unwrap(),
                    centroids.row(assign[p]).to_slice().unwrap(),
                )
            })
            .sum()
    };
    let mut assign = assignments(&centroids);
    let mut iterations = 0;
    let mut inertia_trace = Vec::new();
    for _ in 0..100 {
        iterations += 1;
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros((k, c));
        for p in 0..npts {
            counts[assign[p]] += 1;
            let mut row = sums.row_mut(assign[p]);
            row += &points.row(p);
        }
        for ci in 0..k {
            if counts[ci] > 0 {
                let mut row = sums.row_mut(ci);
                row /= counts[ci] as f64;
                centroids.row_mut(ci).assign(&row);
            } else {
                // reseed an empty cluster to the point farthest from its centroid
                let far = (0..npts)
                    .max_by(|&a, &b| {
                        let da = sq_dist(
                            points.row(a).to_slice().unwrap(),
                            centroids.row(assign[a]).to_slice().unwrap(),
                        );
                        let db = sq_dist(
                            points.row(b).to_slice().unwrap(),
                            centroids.row(assign[b]).to_slice().unwrap(),
                        );
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids.row_mut(ci).assign(&points.row(far));
            }
        }
        let next = assignments(&centroids);
        inertia_trace.push(inertia_of(&next, &centroids));
        if next == assign {
            break;
        }
        assign = next;
    }
    let inertia = inertia_of(&assign, &centroids);

    let mut labels = Array3::<usize>::zeros((n, h, w));
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                labels[[i, y, x]] = assign[(i * h + y) * w + x];
            }
        }
    }
    Ok(ClusterMap {
        labels,
        centroids,
        inertia,
        iterations,
        inertia_trace,
    })
}

/// Render one label map as a color image at `out_size` (nearest-neighbor
/// upsampling), optionally alpha-blended over a source image in [-1, 1].
pub fn render_overlay(
    labels: &ndarray::ArrayView2<usize>,
    palette: &[[u8; 3]],
    out_size: usize,
    base: Option<&Tensor>,
    alpha: f64,
) -> Result<image::RgbImage> {
    let k = labels.iter().max().map(|&m| m + 1).unwrap_or(1);
    if palette.len() < k {
        return Err(Error::input(format!(
            "palette has {} colors, labels need {k}",
            palette.len()
        )));
    }
    let (lh, lw) = (labels.shape()[0], labels.shape()[1]);
    let mut img = image::RgbImage::new(out_size as u32, out_size as u32);
    for y in 0..out_size {
        let sy = y * lh / out_size;
        for x in 0..out_size {
            let sx = x * lw / out_size;
            let color = palette[labels[[sy, sx]]];
            let px = if let Some(b) = base {
                let bs = b.shape();
                let (bh, bw) = (bs[2], bs[3]);
                let by = y * bh / out_size;
                let bx = x * bw / out_size;
                let mix = |c: u8, ch: usize| {
                    let bg = crate::data_io::unit_to_u8(b[[0, ch, by, bx]]) as f64;
                    (alpha * c as f64 + (1.0 - alpha) * bg).round() as u8
                };
                image::Rgb([mix(color[0], 0), mix(color[1], 1), mix(color[2], 2)])
            } else {
                image::Rgb(color)
            };
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    Ok(img)
}

/// Result of a linear probe run.
#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    /// Classes absent from the training split, excluded from the accuracy
    /// denominator.
    pub excluded_classes: Vec<usize>,
}

/// Train a single linear per-pixel classifier on frozen features
/// [n, C, r, r] against labels [n, r, r]; report held-out pixel accuracy.
pub fn linear_probe(
    train_feats: &Tensor,
    train_labels: &ArrayD<usize>,
    test_feats: &Tensor,
    test_labels: &ArrayD<usize>,
    classes: usize,
    seed: u64,
    iters: usize,
) -> Result<ProbeResult> {
    let fs = train_feats.shape();
    if fs.len() != 4 {
        return Err(Error::input("probe features must be [n,C,r,r]"));
    }
    let (n, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    if train_labels.shape() != [n, h, w] {
        return Err(Error::input("probe train labels shape mismatch"));
    }
    let mut present = vec![false; classes];
    for &l in train_labels.iter() {
        if l >= classes {
            return Err(Error::input(format!("label {l} out of range")));
        }
        present[l] = true;
    }
    let excluded: Vec<usize> = (0..classes).filter(|&cl| !present[cl]).collect();
    if !excluded.is_empty() {
        eprintln!(
            "linear_probe: classes {excluded:?} absent from the training split; excluded from accuracy"
        );
    }

    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = (1.0 / c as f64).sqrt();
    params.push(
        "w",
        Tensor::from_shape_fn(IxDyn(&[classes, c, 1, 1]), |_| {
            let v: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            v * std
        }),
    );
    params.push("b", Tensor::zeros(IxDyn(&[classes])));
    let mut opt = Adam::new(0.05, 0.9, 0.999, &params);
    for _ in 0..iters {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let fv = g.leaf(train_feats.clone());
        let logits0 = g.conv2d(fv, bound[0], 1, 0);
        let logits = g.add_bias(logits0, bound[1]);
        let ce = crate::losses::aux_segmentation_loss(&mut g, logits, train_labels)?;
        let grads = g.grad(ce, &bound);
        let gt: Vec<Tensor> = grads.iter().map(|&v| g.val(v).clone()).collect();
        opt.step(&mut params, &gt);
    }

    let accuracy_of = |feats: &Tensor, labels: &ArrayD<usize>| -> f64 {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let fv = g.leaf(feats.clone());
        let logits0 = g.conv2d(fv, bound[0], 1, 0);
        let logits = g.add_bias(logits0, bound[1]);
        let lv = g.val(logits);
        let ls = labels.shape();
        let (n2, h2, w2) = (ls[0], ls[1], ls[2]);
        let mut correct = 0usize;
        let mut counted = 0usize;
        for i in 0..n2 {
            for y in 0..h2 {
                for x in 0..w2 {
                    let l = labels[[i, y, x]];
                    if !present[l] {
                        continue;
                    }
                    let mut best = 0usize;
                    let mut bv = f64::NEG_INFINITY;
                    for cl in 0..classes {
                        let v = lv[[i, cl, y, x]];
                        if v > bv {
                            bv = v;
                            best = cl;
                        }
                    }
                    counted += 1;
                    correct += (best == l) as usize;
                }
            }
        }
        if counted == 0 {
            0.0
        } else {
            correct as f64 / counted as f64
        }
    };

    let _ = (n, w, h);
    Ok(ProbeResult {
        accuracy: accuracy_of(test_feats, test_labels),
        train_accuracy: accuracy_of(train_feats, train_labels),
        excluded_classes: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn kmeans_two_repeated_points() {
        // two distinct repeated points, k=2 -> centroids equal the points
        let mut fmap = Tensor::zeros(IxDyn(&[1, 2, 2, 2]));
        for y in 0..2 {
            for x in 0..2 {
                let v: f64 = if (y + x) % 2 == 0 { 1.0 } else { -1.0 };
                fmap[[0, 0, y, x]] = v;
                fmap[[0, 1, y, x]] = 2.0 * v;
            }
        }
        let cm = kmeans_features(&fmap, 2, 7).unwrap();
        assert!(cm.inertia < 1e-12);
        let mut rows: Vec<Vec<i64>> = cm
            .centroids
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| v.round() as i64).collect())
            .collect();
        rows.sort();
        assert_eq!(rows, vec![vec![-1, -2], vec![1, 2]]);
    }

    #[test]
    fn kmeans_k1_is_global_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fmap = Tensor::from_shape_fn(IxDyn(&[2, 3, 4, 4]), |_| rng.random::<f64>());
        let cm = kmeans_features(&fmap, 1, 0).unwrap();
        for ch in 0..3 {
            let mean = fmap
                .index_axis(ndarray::Axis(1), ch)
                .mean()
                .unwrap();
            assert!((cm.centroids[[0, ch]] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_beats_random_restart_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // 20 random 2-channel points as a 1x2x4x5 map
        let fmap = Tensor::from_shape_fn(IxDyn(&[1, 2, 4, 5]), |_| rng.random::<f64>() * 4.0);
        let cm = kmeans_features(&fmap, 3, 0).unwrap();
        // inertia never increases across Lloyd rounds
        for w in cm.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "inertia increased: {:?}", cm.inertia_trace);
        }

        // oracle: 50 random centroid triples, single assignment pass
        let mut pts = Vec::new();
        for y in 0..4 {
            for x in 0..5 {
                pts.push([fmap[[0, 0, y, x]], fmap[[0, 1, y, x]]]);
            }
        }
        let mut best = f64::INFINITY;
        for _ in 0..50 {
            let picks: Vec<usize> = (0..3).map(|_| rng.random_range(0..pts.len())).collect();
            let mut inertia = 0.0;
            for p in &pts {
                let d = picks
                    .iter()
                    .map(|&c| sq_dist(p, &pts[c]))
                    .fold(f64::INFINITY, f64::min);
                inertia += d;
            }
            best = best.min(inertia);
        }
        assert!(
            cm.inertia <= best + 1e-9,
            "kmeans inertia {} worse than oracle {best}",
            cm.inertia
        );
    }

    #[test]
    fn kmeans_is_deterministic_and_rejects_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let fmap = Tensor::from_shape_fn(IxDyn(&[1, 4, 6, 6]), |_| rng.random::<f64>());
        let a = kmeans_features(&fmap, 6, 5).unwrap();
        let b = kmeans_features(&fmap, 6, 5).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.centroids, b.centroids);
        // fewer distinct points than k
        let flat = Tensor::zeros(IxDyn(&[1, 2, 2, 2]));
        assert!(kmeans_features(&flat, 2, 0).is_err());
    }

    #[test]
    fn overlay_rendering() {
        use ndarray::array;
        let labels = array![[0usize, 1], [1, 0]];
        // constant labels -> solid color
        let solid = array![[2usize, 2], [2, 2]];
        let img = render_overlay(&solid.view(), &PALETTE6, 8, None, 1.0).unwrap();
        let c = PALETTE6[2];
        assert!(img.pixels().all(|p| p.0 == c));

        // 2x2 upsampled x2: each label becomes a 2x2 block
        let img = render_overlay(&labels.view(), &PALETTE6, 4, None, 1.0).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expect = PALETTE6[labels[[y / 2, x / 2]]];
                assert_eq!(img.get_pixel(x as u32, y as u32).0, expect);
            }
        }

        // byte-determinism through PNG encoding
        let dir = std::env::temp_dir().join("ggdr_overlay");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.png");
        let p2 = dir.join("b.png");
        render_overlay(&labels.view(), &PALETTE6, 16, None, 1.0)
            .unwrap()
            .save(&p1)
            .unwrap();
        render_overlay(&labels.view(), &PALETTE6, 16, None, 1.0)
            .unwrap()
            .save(&p2)
            .unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_dir_all(&dir).ok();

        // palette too small
        let big = array![[5usize]];
        assert!(render_overlay(&big.view(), &PALETTE6[..3], 4, None, 1.0).is_err());
    }

    fn synthetic_probe_data(
        n: usize,
        c: usize,
        r: usize,
        separable: bool,
        seed: u64,
    ) -> (Tensor, ArrayD<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feats = Tensor::zeros(IxDyn(&[n, c, r, r]));
        let mut labels = ArrayD::<usize>::zeros(IxDyn(&[n, r, r]));
        for i in 0..n {
            for y in 0..r {
                for x in 0..r {
                    let l = rng.random_range(0..2usize);
                    labels[[i, y, x]] = l;
                    for ch in 0..c {
                        let noise: f64 = rng.random::<f64>() * 0.1;
                        feats[[i, ch, y, x]] = if separable {
                            (if l == 1 { 1.0 } else { -1.0 }) * (ch as f64 + 1.0) * 0.5 + noise
                        } else {
                            rng.random::<f64>()
                        };
                    }
                }
            }
        }
        (feats, labels)
    }

    #[test]
    fn probe_separates_separable_features() {
        let (tr_f, tr_l) = synthetic_probe_data(8, 3, 4, true, 1);
        let (te_f, te_l) = synthetic_probe_data(4, 3, 4, true, 2);
        let res = linear_probe(&tr_f, &tr_l, &te_f, &te_l, 2, 0, 200).unwrap();
        assert!(res.accuracy >= 0.99, "accuracy {}", res.accuracy);
    }

    #[test]
    fn probe_is_chance_level_on_shuffled_labels() {
        let (tr_f, _) = synthetic_probe_data(16, 3, 8, false, 3);
        let (_, tr_l) = synthetic_probe_data(16, 3, 8, false, 4);
        let (te_f, _) = synthetic_probe_data(12, 3, 8, false, 5);
        let (_, te_l) = synthetic_probe_data(12, 3, 8, false, 6);
        let res = linear_probe(&tr_f, &tr_l, &te_f, &te_l, 2, 0, 120).unwrap();
        assert!(
            (res.accuracy - 0.5).abs() < 0.05,
            "accuracy {} not near chance",
            res.accuracy
        );
    }

    #[test]
    fn probe_memorizes_identical_splits() {
        let (f, l) = synthetic_probe_data(6, 3, 4, true, 7);
        let res = linear_probe(&f, &l, &f, &l, 2, 0, 200).unwrap();
        assert!(res.accuracy >= res.train_accuracy - 1e-12);
    }

    #[test]
    fn probe_excludes_absent_classes() {
        let (tr_f, tr_l) = synthetic_probe_data(4, 3, 4, true, 8);
        let (te_f, mut te_l) = synthetic_probe_data(2, 3, 4, true, 9);
        te_l[[0, 0, 0]] = 2; // class never seen in training
        let res = linear_probe(&tr_f, &tr_l, &te_f, &te_l, 3, 0, 100).unwrap();
        assert_eq!(res.excluded_classes, vec![2]);
    }
}
