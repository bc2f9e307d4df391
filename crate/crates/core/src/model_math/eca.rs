//! Channel attention: global average pooling, a circular 1-D convolution
//! across channels and a sigmoid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;

/// Per-ROI feature map, channel-major `channels × height × width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiFeature {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    values: Vec<f64>,
}

impl RoiFeature {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::param("roi_feature", "every dimension must be positive"));
        }
        if values.len() != channels * height * width {
            return Err(Error::param(
                "roi_feature",
                format!("{} values for a {channels}x{height}x{width} map", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("roi feature"));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    /// Global average pool: one mean per channel.
    pub fn gap(&self) -> Vec<f64> {
        let n = (self.height * self.width) as f64;
        (0..self.channels).map(|c| pairwise_sum(self.channel(c)) / n).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EcaParams {
    pub kernel: Vec<f64>,
    pub bias: f64,
}

impl EcaParams {
    pub fn new(kernel: Vec<f64>, bias: f64) -> Result<Self> {
        let p = Self { kernel, bias };
        p.validate()?;
        Ok(p)
    }

    /// Size-`k` kernel that passes each channel's pooled value through unchanged.
    pub fn identity(k: usize) -> Result<Self> {
        let mut kernel = vec![0.0; k];
        if k > 0 {
            kernel[k / 2] = 1.0;
        }
        Self::new(kernel, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_empty() || self.kernel.len().is_multiple_of(2) {
            return Err(Error::param(
                "kernel",
                format!("length {} is not odd", self.kernel.len()),
            ));
        }
        if self.kernel.iter().any(|v| !v.is_finite()) || !self.bias.is_finite() {
            return Err(Error::NonFinite("eca parameters"));
        }
        Ok(())
    }
}

impl Default for EcaParams {
    fn default() -> Self {
        Self::identity(3).expect("odd kernel")
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn tap(c: usize, i: usize, k: usize, channels: usize) -> usize {
    let off = i as i64 - (k / 2) as i64;
    (c as i64 + off).rem_euclid(channels as i64) as usize
}

fn conv(pooled: &[f64], p: &EcaParams) -> Vec<f64> {
    let (k, n) = (p.kernel.len(), pooled.len());
    (0..n)
        .map(|c| {
            let terms: Vec<f64> = (0..k).map(|i| p.kernel[i] * pooled[tap(c, i, k, n)]).collect();
            pairwise_sum(&terms) + p.bias
        })
        .collect()
}

/// Channel weights `sigmoid(kernel ⊛ GAP(f) + bias)`, each in (0, 1).
pub fn eca_weights(f: &RoiFeature, p: &EcaParams) -> Result<Vec<f64>> {
    p.validate()?;
    Ok(conv(&f.gap(), p).into_iter().map(sigmoid).collect())
}

/// Weights with their Jacobians: `d_kernel[c][i] = ∂w_c/∂kernel_i` and
/// `d_bias[c] = ∂w_c/∂bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct EcaJacobian {
    pub weights: Vec<f64>,
    pub d_kernel: Vec<Vec<f64>>,
    pub d_bias: Vec<f64>,
}

pub fn eca_weights_with_jacobian(f: &RoiFeature, p: &EcaParams) -> Result<EcaJacobian> {
    p.validate()?;
    let pooled = f.gap();
    let weights: Vec<f64> = conv(&pooled, p).into_iter().map(sigmoid).collect();
    let k = p.kernel.len();
    let n = pooled.len();
    let slope: Vec<f64> = weights.iter().map(|w| w * (1.0 - w)).collect();
    let d_kernel = (0..n)
        .map(|c| (0..k).map(|i| slope[c] * pooled[tap(c, i, k, n)]).collect())
        .collect();
    Ok(EcaJacobian {
        weights,
        d_kernel,
        d_bias: slope,
    })
}

/// Scales channel `c` of `f` by `weights[c]`.
pub fn apply_channel_attention(f: &RoiFeature, weights: &[f64]) -> Result<RoiFeature> {
    if weights.len() != f.channels {
        return Err(Error::param(
            "weights",
            format!("{} weights for {} channels", weights.len(), f.channels),
        ));
    }
    let n = f.height * f.width;
    let values = f.values.iter().enumerate().map(|(i, v)| v * weights[i / n]).collect();
    RoiFeature::new(f.channels, f.height, f.width, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feature(channels: usize, fill: impl Fn(usize) -> f64) -> RoiFeature {
        RoiFeature::new(channels, 3, 4, (0..channels * 12).map(fill).collect()).unwrap()
    }

    #[test]
    fn zero_features_give_half() {
        let w = eca_weights(
            &feature(8, |_| 0.0),
            &EcaParams::new(vec![0.3, -1.0, 2.0], 0.0).unwrap(),
        )
        .unwrap();
        assert!(w.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn identity_kernel_saturates_monotonically() {
        let p = EcaParams::new(vec![1.0], 0.0).unwrap();
        let mut last = 0.5;
        for level in [1.0, 4.0, 10.0, 30.0] {
            let w = eca_weights(&feature(2, |_| level), &p).unwrap();
            assert!(w[0] > last);
            last = w[0];
        }
        assert!(last > 1.0 - 1e-12);
    }

    #[test]
    fn circular_neighbourhood() {
        // channel 0 sees channel 3 on its left when wrapping
        let f = feature(4, |i| (i / 12) as f64);
        let p = EcaParams::new(vec![1.0, 0.0, 0.0], 0.0).unwrap();
        let w = eca_weights(&f, &p).unwrap();
        assert!((w[0] - sigmoid(3.0)).abs() < 1e-15);
        assert!((w[1] - sigmoid(0.0)).abs() < 1e-15);
    }

    #[test]
    fn invalid_inputs() {
        assert!(EcaParams::new(vec![1.0, 2.0], 0.0).is_err());
        assert!(EcaParams::new(vec![], 0.0).is_err());
        assert!(RoiFeature::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(apply_channel_attention(&feature(2, |_| 1.0), &[1.0]).is_err());
    }

    #[test]
    fn large_bias_is_near_identity() {
        let f = feature(3, |i| i as f64 * 0.1 - 1.0);
        let w = eca_weights(&f, &EcaParams::new(vec![0.1, 0.2, 0.3], 30.0).unwrap()).unwrap();
        let out = apply_channel_attention(&f, &w).unwrap();
        for (a, b) in out.values().iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(apply_channel_attention(&f, &[1.0; 3]).unwrap(), f);
    }

    proptest! {
        #[test]
        fn weights_in_open_interval(vals in prop::collection::vec(-5.0f64..5.0, 24), k in prop::collection::vec(-2.0f64..2.0, 3), b in -3.0f64..3.0) {
            let f = RoiFeature::new(6, 2, 2, vals).unwrap();
            for w in eca_weights(&f, &EcaParams::new(k, b).unwrap()).unwrap() {
                prop_assert!(w > 0.0 && w < 1.0);
            }
        }
    }
}
