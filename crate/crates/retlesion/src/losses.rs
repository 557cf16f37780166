//! Training losses: the dual Dice loss (pixel-level Dice plus an image-level
//! Dice over global-max-pooled presences), the ablation losses (weighted
//! cross-entropy, focal) and the grading cross-entropy.
//!
//! Dice sums run globally over the whole mini-batch, all pixels and all
//! lesion channels. Every loss comes with an analytic gradient with respect
//! to the predictions.

use crate::error::{Error, Result};
use crate::nn::layers::global_max_pool;
use crate::tensor::Tensor;
use crate::types::DRGrade;
use serde::{Deserialize, Serialize};

/// Clamp bound for log-based losses; keeps saturated predictions finite.
pub const CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DualLossConfig {
    /// Balance between the segmentation and classification terms.
    pub lambda: f64,
    /// Smoothing added to numerator and denominator of both Dice terms.
    pub epsilon: f64,
}

impl Default for DualLossConfig {
    fn default() -> Self {
        DualLossConfig {
            lambda: 0.8,
            epsilon: 1e-6,
        }
    }
}

impl DualLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0,1]", self.lambda)));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

fn check_batch(p: &[&Tensor], t: &[&Tensor]) -> Result<()> {
    if p.len() != t.len() {
        return Err(Error::Shape(format!(
            "batch length mismatch: {} vs {}",
            p.len(),
            t.len()
        )));
    }
    for (a, b) in p.iter().zip(t) {
        if !a.same_shape(b) {
            return Err(Error::Shape("prediction/target shape mismatch".into()));
        }
    }
    Ok(())
}

/// Pixel-level Dice: 1 - (2 sum(p t) + eps) / (sum(p^2) + sum(t^2) + eps).
pub fn dice_seg_loss(p: &[&Tensor], t: &[&Tensor], epsilon: f64) -> Result<f64> {
    Ok(dice_seg_loss_grad(p, t, epsilon)?.0)
}

/// Loss plus gradient with respect to each prediction tensor.
pub fn dice_seg_loss_grad(p: &[&Tensor], t: &[&Tensor], epsilon: f64) -> Result<(f64, Vec<Tensor>)> {
    check_batch(p, t)?;
    let mut inter = 0.0;
    let mut p_sq = 0.0;
    let mut t_sq = 0.0;
    for (pm, tm) in p.iter().zip(t) {
        for (&pv, &tv) in pm.data.iter().zip(&tm.data) {
            inter += pv * tv;
            p_sq += pv * pv;
            t_sq += tv * tv;
        }
    }
    let num = 2.0 * inter + epsilon;
    let den = p_sq + t_sq + epsilon;
    let loss = 1.0 - num / den;
    // d/dp = -(2 t den - num 2 p) / den^2
    let den_sq = den * den;
    let grads = p
        .iter()
        .zip(t)
        .map(|(pm, tm)| {
            let data = pm
                .data
                .iter()
                .zip(&tm.data)
                .map(|(&pv, &tv)| -(2.0 * tv * den - num * 2.0 * pv) / den_sq)
                .collect();
            Tensor::from_vec(pm.h, pm.w, pm.c, data)
        })
        .collect();
    Ok((loss, grads))
}

/// Image-level Dice over presence vectors, same formula with images as units.
pub fn dice_clf_loss(p: &[Vec<f64>], t: &[Vec<f64>], epsilon: f64) -> Result<f64> {
    Ok(dice_clf_loss_grad(p, t, epsilon)?.0)
}

pub fn dice_clf_loss_grad(
    p: &[Vec<f64>],
    t: &[Vec<f64>],
    epsilon: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if p.len() != t.len() || p.iter().zip(t).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Shape("presence batch shape mismatch".into()));
    }
    let mut inter = 0.0;
    let mut p_sq = 0.0;
    let mut t_sq = 0.0;
    for (pv, tv) in p.iter().zip(t) {
        for (&a, &b) in pv.iter().zip(tv) {
            inter += a * b;
            p_sq += a * a;
            t_sq += b * b;
        }
    }
    let num = 2.0 * inter + epsilon;
    let den = p_sq + t_sq + epsilon;
    let loss = 1.0 - num / den;
    let den_sq = den * den;
    let grads = p
        .iter()
        .zip(t)
        .map(|(pv, tv)| {
            pv.iter()
                .zip(tv)
                .map(|(&a, &b)| -(2.0 * b * den - num * 2.0 * a) / den_sq)
                .collect()
        })
        .collect();
    Ok((loss, grads))
}

/// Dual loss: lambda * dice_seg + (1 - lambda) * dice_clf, where the
/// presence vectors on both sides are obtained by global max pooling over
/// the map/mask stacks.
pub fn dual_loss(p: &[&Tensor], t: &[&Tensor], config: &DualLossConfig) -> Result<f64> {
    Ok(dual_loss_grad(p, t, config)?.0)
}

/// Loss plus gradient on the prediction maps; the classification term's
/// gradient is routed to each channel's argmax pixel.
pub fn dual_loss_grad(
    p: &[&Tensor],
    t: &[&Tensor],
    config: &DualLossConfig,
) -> Result<(f64, Vec<Tensor>)> {
    config.validate()?;
    check_batch(p, t)?;
    let (seg, mut grads) = dice_seg_loss_grad(p, t, config.epsilon)?;
    let pooled: Vec<(Vec<f64>, Vec<usize>)> = p.iter().map(|m| global_max_pool(m)).collect();
    let pres_p: Vec<Vec<f64>> = pooled.iter().map(|(v, _)| v.clone()).collect();
    let pres_t: Vec<Vec<f64>> = t.iter().map(|m| global_max_pool(m).0).collect();
    let (clf, clf_grads) = dice_clf_loss_grad(&pres_p, &pres_t, config.epsilon)?;
    let loss = config.lambda * seg + (1.0 - config.lambda) * clf;
    for ((g, (_, argmax)), cg) in grads.iter_mut().zip(&pooled).zip(&clf_grads) {
        for d in g.data.iter_mut() {
            *d *= config.lambda;
        }
        let c = g.c;
        for (ch, (&pix, &cgv)) in argmax.iter().zip(cg).enumerate() {
            g.data[pix * c + ch] += (1.0 - config.lambda) * cgv;
        }
    }
    Ok((loss, grads))
}

/// Weighted binary cross-entropy, mean over all pixels/channels/batch, with
/// a per-lesion positive-class weight.
pub fn weighted_cross_entropy(p: &[&Tensor], t: &[&Tensor], weights: &[f64]) -> Result<f64> {
    Ok(weighted_cross_entropy_grad(p, t, weights)?.0)
}

pub fn weighted_cross_entropy_grad(
    p: &[&Tensor],
    t: &[&Tensor],
    weights: &[f64],
) -> Result<(f64, Vec<Tensor>)> {
    check_batch(p, t)?;
    if weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::Config("class weights must be positive".into()));
    }
    let n: usize = p.iter().map(|m| m.data.len()).sum();
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(p.len());
    for (pm, tm) in p.iter().zip(t) {
        if pm.c != weights.len() {
            return Err(Error::Shape("weights length must equal channel count".into()));
        }
        let mut g = Tensor::zeros(pm.h, pm.w, pm.c);
        for (i, (&pv, &tv)) in pm.data.iter().zip(&tm.data).enumerate() {
            let w = weights[i % pm.c];
            let pc = pv.clamp(CLAMP, 1.0 - CLAMP);
            loss -= scale * (w * tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln());
            g.data[i] = -scale * (w * tv / pc - (1.0 - tv) / (1.0 - pc));
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Focal loss, mean over all pixels/channels/batch.
pub fn focal_loss(p: &[&Tensor], t: &[&Tensor], alpha: f64, gamma: f64) -> Result<f64> {
    Ok(focal_loss_grad(p, t, alpha, gamma)?.0)
}

pub fn focal_loss_grad(
    p: &[&Tensor],
    t: &[&Tensor],
    alpha: f64,
    gamma: f64,
) -> Result<(f64, Vec<Tensor>)> {
    check_batch(p, t)?;
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (0,1)")));
    }
    if gamma < 0.0 {
        return Err(Error::Config(format!("gamma {gamma} must be >= 0")));
    }
    let n: usize = p.iter().map(|m| m.data.len()).sum();
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(p.len());
    for (pm, tm) in p.iter().zip(t) {
        let mut g = Tensor::zeros(pm.h, pm.w, pm.c);
        for (i, (&pv, &tv)) in pm.data.iter().zip(&tm.data).enumerate() {
            let pc = pv.clamp(CLAMP, 1.0 - CLAMP);
            let pos = -alpha * (1.0 - pc).powf(gamma) * pc.ln();
            let neg = -(1.0 - alpha) * pc.powf(gamma) * (1.0 - pc).ln();
            loss += scale * (tv * pos + (1.0 - tv) * neg);
            let dpos = if gamma == 0.0 {
                -alpha / pc
            } else {
                -alpha * ((1.0 - pc).powf(gamma) / pc
                    - gamma * (1.0 - pc).powf(gamma - 1.0) * pc.ln())
            };
            let dneg = if gamma == 0.0 {
                (1.0 - alpha) / (1.0 - pc)
            } else {
                -(1.0 - alpha)
                    * (gamma * pc.powf(gamma - 1.0) * (1.0 - pc).ln() - pc.powf(gamma) / (1.0 - pc))
            };
            g.data[i] = scale * (tv * dpos + (1.0 - tv) * dneg);
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Multi-class grading loss: mean of -log p[true grade] over the batch.
/// Rows must already be normalized probabilities.
pub fn cross_entropy_grading(probabilities: &[Vec<f64>], grades: &[DRGrade]) -> Result<f64> {
    if probabilities.len() != grades.len() || probabilities.is_empty() {
        return Err(Error::Shape("probability/grade batch mismatch".into()));
    }
    let mut loss = 0.0;
    for (row, grade) in probabilities.iter().zip(grades) {
        if row.len() != 5 {
            return Err(Error::Shape("grade probability row must have 5 entries".into()));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "probability row sums to {sum}, not 1"
            )));
        }
        let p = row[grade.value() as usize].clamp(CLAMP, 1.0);
        loss -= p.ln();
    }
    Ok(loss / probabilities.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    const EPS: f64 = 1e-6;

    fn t1(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::from_vec(1, n, 1, data)
    }

    #[test]
    fn dice_seg_perfect_binary_is_zero() {
        let m = t1(vec![1.0, 0.0, 1.0, 1.0]);
        let loss = dice_seg_loss(&[&m], &[&m], EPS).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn dice_seg_all_negative_close_to_one() {
        let p = t1(vec![0.0; 4]);
        let t = t1(vec![1.0, 1.0, 0.0, 0.0]);
        let loss = dice_seg_loss(&[&p], &[&t], EPS).unwrap();
        assert!(loss > 0.999);
    }

    #[test]
    fn dice_seg_direct_evaluation() {
        let p = t1(vec![0.5, 0.5]);
        let t = t1(vec![1.0, 0.0]);
        let loss = dice_seg_loss(&[&p], &[&t], EPS).unwrap();
        let expect = 1.0 - (2.0 * 0.5 + EPS) / (0.5 + 1.0 + EPS);
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn dice_clf_perfect_and_empty() {
        let one = vec![vec![1.0, 0.0]];
        assert!(dice_clf_loss(&one, &one, EPS).unwrap().abs() < 1e-12);
        let zero = vec![vec![0.0, 0.0]];
        assert!(dice_clf_loss(&zero, &zero, EPS).unwrap().abs() < 1e-12);
    }

    #[test]
    fn dice_clf_direct_evaluation() {
        let p = vec![vec![0.9, 0.1]];
        let t = vec![vec![1.0, 0.0]];
        let loss = dice_clf_loss(&p, &t, EPS).unwrap();
        let expect = 1.0 - (1.8 + EPS) / (0.81 + 0.01 + 1.0 + EPS);
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 0.0110).abs() < 1e-4);
    }

    #[test]
    fn dual_loss_endpoints_and_composition() {
        let p = t1(vec![0.5, 0.5]);
        let t = t1(vec![1.0, 0.0]);
        let seg = dice_seg_loss(&[&p], &[&t], EPS).unwrap();
        let lam1 = DualLossConfig { lambda: 1.0, epsilon: EPS };
        assert_eq!(dual_loss(&[&p], &[&t], &lam1).unwrap(), seg);
        let lam0 = DualLossConfig { lambda: 0.0, epsilon: EPS };
        let pres_p = vec![vec![0.5]];
        let pres_t = vec![vec![1.0]];
        let clf = dice_clf_loss(&pres_p, &pres_t, EPS).unwrap();
        assert_eq!(dual_loss(&[&p], &[&t], &lam0).unwrap(), clf);
        let cfg = DualLossConfig { lambda: 0.8, epsilon: EPS };
        let combined = dual_loss(&[&p], &[&t], &cfg).unwrap();
        assert!((combined - (0.8 * seg + 0.2 * clf)).abs() < 1e-12);
    }

    #[test]
    fn dual_loss_linear_in_lambda() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let p = Tensor::from_vec(2, 2, 2, (0..8).map(|_| rng.gen_range(0.0..1.0)).collect());
        let t = Tensor::from_vec(2, 2, 2, (0..8).map(|_| f64::from(rng.gen_bool(0.5))).collect());
        let at = |lam: f64| {
            dual_loss(&[&p], &[&t], &DualLossConfig { lambda: lam, epsilon: EPS }).unwrap()
        };
        let (l0, l5, l1) = (at(0.0), at(0.5), at(1.0));
        assert!((l5 - 0.5 * (l0 + l1)).abs() < 1e-12);
    }

    #[test]
    fn wce_reduces_to_bce_and_direct_value() {
        // p=0.5 everywhere, half the targets 1, positive weight 2
        let p = t1(vec![0.5, 0.5]);
        let t = t1(vec![1.0, 0.0]);
        let loss = weighted_cross_entropy(&[&p], &[&t], &[2.0]).unwrap();
        let expect = 1.5 * 2.0_f64.ln();
        assert!((loss - expect).abs() < 1e-12);
        // unit weights equal plain BCE
        let bce = weighted_cross_entropy(&[&p], &[&t], &[1.0]).unwrap();
        assert!((bce - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn wce_near_zero_on_perfect_predictions() {
        let p = t1(vec![1.0 - CLAMP, CLAMP]);
        let t = t1(vec![1.0, 0.0]);
        let loss = weighted_cross_entropy(&[&p], &[&t], &[1.0]).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn wce_rejects_nonpositive_weight() {
        let p = t1(vec![0.5]);
        let t = t1(vec![1.0]);
        assert!(weighted_cross_entropy(&[&p], &[&t], &[0.0]).is_err());
    }

    #[test]
    fn focal_degenerates_to_half_bce() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let p = t1((0..6).map(|_| rng.gen_range(0.05..0.95)).collect());
        let t = t1((0..6).map(|_| f64::from(rng.gen_bool(0.5))).collect());
        let focal = focal_loss(&[&p], &[&t], 0.5, 0.0).unwrap();
        let bce = weighted_cross_entropy(&[&p], &[&t], &[1.0]).unwrap();
        assert!((focal - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn focal_direct_single_pixel() {
        let p = t1(vec![0.9]);
        let t = t1(vec![1.0]);
        let loss = focal_loss(&[&p], &[&t], 0.8, 2.0).unwrap();
        let expect = -0.8 * 0.01 * 0.9_f64.ln();
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 8.43e-4).abs() < 1e-5);
    }

    #[test]
    fn focal_zero_at_exact_predictions() {
        let p = t1(vec![1.0, 0.0]);
        let t = t1(vec![1.0, 0.0]);
        let loss = focal_loss(&[&p], &[&t], 0.8, 2.0).unwrap();
        assert!(loss.abs() < 1e-10);
    }

    #[test]
    fn grading_ce_examples() {
        let g = |v: u8| DRGrade::new(v).unwrap();
        let onehot = vec![vec![0.0, 0.0, 1.0, 0.0, 0.0]];
        let loss = cross_entropy_grading(&onehot, &[g(2)]).unwrap();
        assert!(loss.abs() < 1e-6);
        let uniform = vec![vec![0.2; 5]];
        let loss = cross_entropy_grading(&uniform, &[g(0)]).unwrap();
        assert!((loss - 5.0_f64.ln()).abs() < 1e-12);
        // probability ~0 at the true grade stays finite
        let bad = vec![vec![1.0, 0.0, 0.0, 0.0, 0.0]];
        let loss = cross_entropy_grading(&bad, &[g(4)]).unwrap();
        assert!(loss.is_finite() && loss > 10.0);
        // non-normalized rows rejected
        let broken = vec![vec![0.5; 5]];
        assert!(cross_entropy_grading(&broken, &[g(0)]).is_err());
    }

    #[test]
    fn dice_losses_bounded_and_permutation_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = Tensor::from_vec(2, 3, 2, (0..12).map(|_| rng.gen_range(0.0..1.0)).collect());
            let t = Tensor::from_vec(
                2,
                3,
                2,
                (0..12).map(|_| f64::from(rng.gen_bool(0.4))).collect(),
            );
            let loss = dice_seg_loss(&[&p], &[&t], EPS).unwrap();
            assert!((0.0..1.0).contains(&loss));
            // swap the two channels consistently
            let swap = |m: &Tensor| {
                let mut out = m.clone();
                for px in out.data.chunks_exact_mut(2) {
                    px.swap(0, 1);
                }
                out
            };
            let (ps, ts) = (swap(&p), swap(&t));
            let swapped = dice_seg_loss(&[&ps], &[&ts], EPS).unwrap();
            assert!((loss - swapped).abs() < 1e-12);
            let cfg = DualLossConfig { lambda: 0.7, epsilon: EPS };
            let a = dual_loss(&[&p], &[&t], &cfg).unwrap();
            let b = dual_loss(&[&ps], &[&ts], &cfg).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clf_term_invariant_to_lesion_size() {
        // replacing a channel's mask with another nonempty mask leaves the
        // clf term unchanged while presences stay fixed
        let t_small = t1(vec![1.0, 0.0, 0.0, 0.0]);
        let t_large = t1(vec![1.0, 1.0, 1.0, 0.0]);
        let pres = |m: &Tensor| vec![global_max_pool(m).0];
        let p = vec![vec![0.8]];
        let a = dice_clf_loss(&p, &pres(&t_small), EPS).unwrap();
        let b = dice_clf_loss(&p, &pres(&t_large), EPS).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let p = Tensor::from_vec(4, 4, 2, (0..32).map(|_| rng.gen_range(0.05..0.95)).collect());
        let t = Tensor::from_vec(
            4,
            4,
            2,
            (0..32).map(|_| f64::from(rng.gen_bool(0.3))).collect(),
        );
        let cfg = DualLossConfig::default();
        let weights = [1.5, 2.5];

        type LossFn<'a> = Box<dyn Fn(&Tensor) -> f64 + 'a>;
        let cases: Vec<(&str, LossFn, Vec<f64>)> = vec![
            (
                "dice_seg",
                Box::new(|p: &Tensor| dice_seg_loss(&[p], &[&t], 1e-6).unwrap()),
                dice_seg_loss_grad(&[&p], &[&t], 1e-6).unwrap().1[0].data.clone(),
            ),
            (
                "dual",
                Box::new(|p: &Tensor| dual_loss(&[p], &[&t], &cfg).unwrap()),
                dual_loss_grad(&[&p], &[&t], &cfg).unwrap().1[0].data.clone(),
            ),
            (
                "wce",
                Box::new(|p: &Tensor| weighted_cross_entropy(&[p], &[&t], &weights).unwrap()),
                weighted_cross_entropy_grad(&[&p], &[&t], &weights).unwrap().1[0]
                    .data
                    .clone(),
            ),
            (
                "focal",
                Box::new(|p: &Tensor| focal_loss(&[p], &[&t], 0.8, 2.0).unwrap()),
                focal_loss_grad(&[&p], &[&t], 0.8, 2.0).unwrap().1[0].data.clone(),
            ),
        ];
        let step = 1e-6;
        for (name, f, grad) in cases {
            for i in 0..p.data.len() {
                let mut pp = p.clone();
                pp.data[i] += step;
                let mut pm = p.clone();
                pm.data[i] -= step;
                let fd = (f(&pp) - f(&pm)) / (2.0 * step);
                let rel = (fd - grad[i]).abs() / fd.abs().max(1e-6);
                assert!(rel < 1e-4, "{name}[{i}]: fd={fd} analytic={}", grad[i]);
            }
        }
    }
}
