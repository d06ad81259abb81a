//! Scalar training objectives: non-saturating adversarial losses, the
//! generator-guided cosine-distance regularizer (with stop-gradient on the
//! generator side), the R1 gradient penalty, and the optional auxiliary
//! per-pixel segmentation cross-entropy.

use ndarray::{ArrayD, Axis, IxDyn};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{DiscriminatorOutput, GeneratorOutput};

/// Epsilon added to the norm product in the cosine distance.
pub const COSINE_EPS: f64 = 1e-8;

/// Per-step scalar loss components.
#[derive(Clone, Debug, Default)]
pub struct LossReport {
    pub adv_d: f64,
    pub adv_g: f64,
    pub ggdr: f64,
    pub r1: f64,
    pub aux_seg: Option<f64>,
    pub total_d: f64,
    pub total_g: f64,
    pub lambda_reg: f64,
    pub r1_gamma: f64,
}

fn check_logits(g: &Graph, logits: Var, what: &str) -> Result<()> {
    let t = g.val(logits);
    if t.is_empty() {
        return Err(Error::input(format!("{what}: empty batch")));
    }
    if !t.iter().all(|v| v.is_finite()) {
        return Err(Error::input(format!("{what}: non-finite logits")));
    }
    Ok(())
}

/// Discriminator adversarial loss: mean softplus(-real) + mean softplus(fake).
/// Minimizing it is equivalent to maximizing the non-saturating objective.
pub fn adv_loss_d(g: &mut Graph, real_logits: Var, fake_logits: Var) -> Result<Var> {
    check_logits(g, real_logits, "adv_loss_d real")?;
    check_logits(g, fake_logits, "adv_loss_d fake")?;
    let nr = g.neg(real_logits);
    let sr = g.softplus(nr);
    let lr = g.mean_all(sr);
    let sf = g.softplus(fake_logits);
    let lf = g.mean_all(sf);
    Ok(g.add(lr, lf))
}

/// Generator adversarial loss: mean softplus(-fake).
pub fn adv_loss_g(g: &mut Graph, fake_logits: Var) -> Result<Var> {
    check_logits(g, fake_logits, "adv_loss_g")?;
    let nf = g.neg(fake_logits);
    let sf = g.softplus(nf);
    Ok(g.mean_all(sf))
}

/// Mean cosine distance between channel vectors at every spatial location:
/// 1 - (p.t) / (|p||t| + eps), averaged over batch and locations.
pub fn cosine_distance(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let sp = g.shape(pred).to_vec();
    let st = g.shape(target).to_vec();
    if sp != st {
        return Err(Error::input(format!(
            "cosine_distance shape mismatch: {sp:?} vs {st:?}"
        )));
    }
    if sp.len() != 4 {
        return Err(Error::input("cosine_distance expects NCHW feature maps"));
    }
    let pt = g.mul(pred, target);
    let dot = g.channel_sum(pt);
    let pp = g.mul(pred, pred);
    let pp = g.channel_sum(pp);
    // tiny offset under the sqrt keeps the gradient finite for zero vectors;
    // it perturbs the norm by ~1e-24
    let pp = g.add_scalar(pp, 1e-24);
    let np = g.sqrt(pp);
    let tt = g.mul(target, target);
    let tt = g.channel_sum(tt);
    let tt = g.add_scalar(tt, 1e-24);
    let nt = g.sqrt(tt);
    let denom0 = g.mul(np, nt);
    let denom = g.add_scalar(denom0, COSINE_EPS);
    let cos = g.div(dot, denom);
    let ncos = g.neg(cos);
    let dist = g.add_scalar(ncos, 1.0);
    Ok(g.mean_all(dist))
}

/// GGDR: cosine distance between the decoder output at the guidance
/// resolution and the (stop-gradient) generator feature map. Applied to fake
/// images only; the generator never receives gradient from this term.
pub fn ggdr_loss(
    g: &mut Graph,
    disc_out: &DiscriminatorOutput,
    gen_out: &GeneratorOutput,
    t: usize,
) -> Result<Var> {
    let pred = *disc_out.decoder_maps.get(&t).ok_or_else(|| {
        Error::config(format!("discriminator decoder has no map at resolution {t}"))
    })?;
    let target = *gen_out
        .pyramid
        .get(&t)
        .ok_or_else(|| Error::config(format!("generator pyramid has no map at resolution {t}")))?;
    let frozen = g.stop_grad(target);
    cosine_distance(g, pred, frozen)
}

/// R1 term as a graph node: (gamma / 2) * mean_n |grad_x logit_n|^2.
/// `images` must be the leaf the logits were computed from.
pub fn r1_term(g: &mut Graph, logit: Var, images: Var, gamma: f64) -> Result<Var> {
    if gamma < 0.0 {
        return Err(Error::config(format!("r1 gamma must be >= 0, got {gamma}")));
    }
    let n = g.shape(logit)[0] as f64;
    let s = g.sum_all(logit);
    let gx = g.grad(s, &[images])[0];
    let sq = g.mul(gx, gx);
    let ssq = g.sum_all(sq);
    Ok(g.scale(ssq, gamma / (2.0 * n)))
}

/// Standalone R1 penalty of a discriminator on a real image batch.
pub fn r1_penalty(
    disc: &crate::nets::Discriminator,
    images: &Tensor,
    gamma: f64,
) -> Result<f64> {
    if gamma < 0.0 {
        return Err(Error::config(format!("r1 gamma must be >= 0, got {gamma}")));
    }
    let mut g = Graph::new();
    let bound = disc.params.bind(&mut g);
    let iv = g.leaf(images.clone());
    let out = disc.forward(&mut g, &bound, iv);
    let r1 = r1_term(&mut g, out.logit, iv, gamma)?;
    Ok(g.scalar_val(r1))
}

/// Mean per-pixel cross-entropy of class logits [N,K,H,W] against integer
/// labels [N,H,W]. Used on real images only (labels do not exist for fakes).
pub fn aux_segmentation_loss(g: &mut Graph, seg_logits: Var, labels: &ArrayD<usize>) -> Result<Var> {
    let sl = g.shape(seg_logits).to_vec();
    if sl.len() != 4 {
        return Err(Error::input("segmentation logits must be [N,K,H,W]"));
    }
    let (n, k, h, w) = (sl[0], sl[1], sl[2], sl[3]);
    if labels.shape() != [n, h, w] {
        return Err(Error::input(format!(
            "label map shape {:?} does not match logits {:?}",
            labels.shape(),
            sl
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::input(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut onehot = Tensor::zeros(IxDyn(&[n, k, h, w]));
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let l = labels[[i, y, x]];
                onehot[[i, l, y, x]] = 1.0;
            }
        }
    }
    let oh = g.leaf(onehot);
    let lse = g.logsumexp_c(seg_logits);
    let sel = g.mul(seg_logits, oh);
    let picked = g.channel_sum(sel);
    let ce = g.sub(lse, picked);
    Ok(g.mean_all(ce))
}

/// Total discriminator objective: adv + lambda * ggdr (+ r1 on penalty steps;
/// pass the already-scaled r1 contribution, 0 otherwise).
pub fn total_d_loss(adv_d: f64, ggdr: f64, lambda_reg: f64, r1: f64) -> f64 {
    adv_d + lambda_reg * ggdr + r1
}

/// Downsample an integer label map [N,H,W] by nearest sampling to [N,h,w].
pub fn downsample_labels(labels: &ArrayD<usize>, h: usize, w: usize) -> ArrayD<usize> {
    let s = labels.shape();
    let (n, ih, iw) = (s[0], s[1], s[2]);
    let mut out = ArrayD::zeros(IxDyn(&[n, h, w]));
    for i in 0..n {
        for y in 0..h {
            let sy = (y * ih + ih / 2) / h;
            for x in 0..w {
                let sx = (x * iw + iw / 2) / w;
                out[[i, y, x]] = labels[[i, sy.min(ih - 1), sx.min(iw - 1)]];
            }
        }
    }
    out
}

/// Mean softmax probabilities check used by tests and the evaluation module.
pub fn softmax_rows(logits: &ndarray::Array2<f64>) -> ndarray::Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}
