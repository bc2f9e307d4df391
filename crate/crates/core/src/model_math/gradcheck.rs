//! Central finite-difference checks of every analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::raster::{Footprint, InstanceMask};

use super::eca::{apply_channel_attention, eca_weights, eca_weights_with_jacobian, EcaParams, RoiFeature};
use super::loss::{
    bce_with_logits, composite_loss, mask_loss_logits, smooth_l1, softmax_cross_entropy, HeadLogits, LossWeights,
};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub parameters: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`; the floor keeps vanishing entries from
/// dividing rounding noise by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `analytic` with central differences of `f` around `x`.
pub fn check(name: &str, x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> GradCheck {
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + STEP;
        let up = f(&probe);
        probe[i] = x[i] - STEP;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * STEP)));
    }
    GradCheck {
        name: name.to_string(),
        parameters: x.len(),
        max_rel_err: worst,
        pass: worst < GRADCHECK_TOLERANCE && worst.is_finite(),
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Runs the full table on inputs drawn from `seed`.
pub fn run_selftest(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (c, h, w) = (8, 4, 5);
    let feat = RoiFeature::new(c, h, w, uniform(&mut rng, c * h * w, -2.0, 2.0))?;
    let kernel = uniform(&mut rng, 3, -1.5, 1.5);
    let bias = rng.random_range(-0.5..0.5);
    let jac = eca_weights_with_jacobian(&feat, &EcaParams::new(kernel.clone(), bias)?)?;
    for ch in [0, 3, c - 1] {
        let f = |k: &[f64]| eca_weights(&feat, &EcaParams::new(k.to_vec(), bias).unwrap()).unwrap()[ch];
        out.push(check(
            &format!("eca weight {ch} / kernel"),
            &kernel,
            &jac.d_kernel[ch],
            f,
        ));
    }
    let f = |b: &[f64]| eca_weights(&feat, &EcaParams::new(kernel.clone(), b[0]).unwrap()).unwrap()[1];
    out.push(check("eca weight 1 / bias", &[bias], &[jac.d_bias[1]], f));

    // scalar read-out of the attended map, chained through the weights
    let r = uniform(&mut rng, c * h * w, -1.0, 1.0);
    let readout = |k: &[f64]| {
        let p = EcaParams::new(k.to_vec(), bias).unwrap();
        let att = apply_channel_attention(&feat, &eca_weights(&feat, &p).unwrap()).unwrap();
        att.values().iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
    };
    let n = h * w;
    let analytic: Vec<f64> = (0..3)
        .map(|i| {
            (0..c)
                .map(|ch| {
                    let dot: f64 = (0..n).map(|p| feat.values()[ch * n + p] * r[ch * n + p]).sum();
                    dot * jac.d_kernel[ch][i]
                })
                .sum()
        })
        .collect();
    out.push(check("attended read-out / kernel", &kernel, &analytic, readout));

    let logits = uniform(&mut rng, 30, -4.0, 4.0);
    let target: Vec<bool> = (0..30).map(|_| rng.random_bool(0.4)).collect();
    let (_, g) = bce_with_logits(&logits, &target)?;
    out.push(check("pixel cross-entropy / logits", &logits, &g, |z| {
        bce_with_logits(z, &target).unwrap().0
    }));

    let (a, b) = (
        InstanceMask::from_footprint(1, &Footprint::rect(0, 0, 5, 4))?
            .with_overlap_region(Some(&Footprint::rect(3, 0, 2, 4))),
        InstanceMask::from_footprint(2, &Footprint::rect(0, 0, 4, 4))?,
    );
    let mk = |rng: &mut ChaCha8Rng, m: &InstanceMask| {
        let n = (m.bbox().w * m.bbox().h) as usize;
        HeadLogits {
            width: m.bbox().w,
            height: m.bbox().h,
            heads: [
                uniform(rng, n, -3.0, 3.0),
                uniform(rng, n, -3.0, 3.0),
                uniform(rng, n, -3.0, 3.0),
            ],
        }
    };
    let la = mk(&mut rng, &a);
    let lb = mk(&mut rng, &b);
    let lc = mk(&mut rng, &a);
    let (_, grads) = mask_loss_logits(&[vec![(&la, &a, true), (&lb, &b, false)], vec![(&lc, &a, true)]])?;
    let flat: Vec<f64> = la.heads.iter().chain(&lc.heads).flatten().copied().collect();
    let analytic: Vec<f64> = grads[0][0].iter().chain(&grads[1][0]).flatten().copied().collect();
    let na = la.heads[0].len();
    let f = |x: &[f64]| {
        let split = |o: usize| HeadLogits {
            width: la.width,
            height: la.height,
            heads: [
                x[o..o + na].to_vec(),
                x[o + na..o + 2 * na].to_vec(),
                x[o + 2 * na..o + 3 * na].to_vec(),
            ],
        };
        let (pa, pc) = (split(0), split(3 * na));
        mask_loss_logits(&[vec![(&pa, &a, true), (&lb, &b, false)], vec![(&pc, &a, true)]])
            .unwrap()
            .0
    };
    out.push(check("non-concave mask loss / head logits", &flat, &analytic, f));
    let gated_zero = grads[0][1].iter().flatten().all(|&v| v == 0.0);
    out.push(GradCheck {
        name: "gated instance gradient is zero".into(),
        parameters: grads[0][1].iter().map(|g| g.len()).sum(),
        max_rel_err: if gated_zero { 0.0 } else { f64::INFINITY },
        pass: gated_zero,
    });

    // keep differences clear of the kink at ±beta
    let pred: Vec<f64> = (0..12)
        .map(|i| {
            let mag = if i % 2 == 0 {
                rng.random_range(0.05..0.8)
            } else {
                rng.random_range(1.2..3.0)
            };
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let zeros = vec![0.0; 12];
    let (_, g) = smooth_l1(&pred, &zeros, 1.0)?;
    out.push(check("smooth-l1 / prediction", &pred, &g, |p| {
        smooth_l1(p, &zeros, 1.0).unwrap().0
    }));

    let cls = uniform(&mut rng, 6, -3.0, 3.0);
    let (_, g) = softmax_cross_entropy(&cls, 2)?;
    out.push(check("class cross-entropy / logits", &cls, &g, |z| {
        softmax_cross_entropy(z, 2).unwrap().0
    }));

    let parts = uniform(&mut rng, 3, 0.1, 2.0);
    let lw = LossWeights {
        lambda1: 1.0,
        lambda2: 0.7,
        lambda3: 0.0,
    };
    let analytic = [lw.lambda1, lw.lambda2, lw.lambda3];
    out.push(check("composite / terms (mask weight 0)", &parts, &analytic, |x| {
        composite_loss(x[0], x[1], x[2], &lw)
    }));
    let lam = [1.0, 1.0, 1.0];
    out.push(check("composite / weights", &lam, &parts, |l| {
        composite_loss(
            parts[0],
            parts[1],
            parts[2],
            &LossWeights {
                lambda1: l[0],
                lambda2: l[1],
                lambda3: l[2],
            },
        )
    }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_gradients_match() {
        for seed in 0..5 {
            for c in run_selftest(seed).unwrap() {
                assert!(c.pass, "seed {seed}: {} rel err {}", c.name, c.max_rel_err);
            }
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let c = check("x^2", &[1.5], &[2.0], |x| x[0] * x[0]);
        assert!(!c.pass);
    }
}
