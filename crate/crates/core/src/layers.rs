//! Tiny dense layers shared by the fusion and selection modules: 3x3
//! convolutions over BEV rasters and affine maps over flat vectors. All
//! parameters are plain `f64` buffers so they can be flattened for
//! finite-difference fitting and serialized through the tensor container.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::BevRaster;

/// 3x3 convolution, zero-padded by one cell. Weights are laid out
/// `[out][in][ky][kx]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        ConvLayer {
            in_channels,
            out_channels,
            stride,
            weights: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * 3 + ky) * 3 + kx]
    }

    pub fn weight_mut(&mut self, o: usize, i: usize, ky: usize, kx: usize) -> &mut f64 {
        &mut self.weights[((o * self.in_channels + i) * 3 + ky) * 3 + kx]
    }

    pub fn validate(&self, input_channels: usize) -> Result<()> {
        if self.in_channels != input_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, raster has {input_channels}",
                self.in_channels
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidParameter("conv stride must be >= 1".into()));
        }
        if self.weights.len() != self.out_channels * self.in_channels * 9
            || self.bias.len() != self.out_channels
        {
            return Err(Error::ShapeMismatch(
                "conv weight/bias buffers do not match declared channels".into(),
            ));
        }
        Ok(())
    }

    /// Applies the convolution to raw raster data of shape `h x w x in`.
    /// Output is `ceil(h/stride) x ceil(w/stride) x out`.
    pub fn forward(&self, data: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let oh = h.div_ceil(self.stride);
        let ow = w.div_ceil(self.stride);
        let mut out = vec![0.0; oh * ow * self.out_channels];
        for oy in 0..oh {
            for ox in 0..ow {
                let cy = (oy * self.stride) as i64;
                let cx = (ox * self.stride) as i64;
                for o in 0..self.out_channels {
                    let mut acc = self.bias[o];
                    for ky in 0..3usize {
                        let iy = cy + ky as i64 - 1;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = cx + kx as i64 - 1;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            let base = (iy as usize * w + ix as usize) * self.in_channels;
                            for i in 0..self.in_channels {
                                acc += data[base + i] * self.weight(o, i, ky, kx);
                            }
                        }
                    }
                    out[(oy * ow + ox) * self.out_channels + o] = acc;
                }
            }
        }
        (out, oh, ow)
    }

    /// Stride-1 convolution of a raster into a single score channel.
    pub fn forward_raster(&self, r: &BevRaster) -> Result<Vec<f64>> {
        self.validate(r.channels)?;
        if self.out_channels != 1 || self.stride != 1 {
            return Err(Error::InvalidParameter(
                "score conv must have one output channel and stride 1".into(),
            ));
        }
        let (out, _, _) = self.forward(&r.data, r.spec.h(), r.spec.w());
        Ok(out)
    }
}

/// Fully-connected affine map `y = W x + b` with `W` laid out `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        AffineLayer {
            in_dim,
            out_dim,
            weights: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.out_dim * self.in_dim || self.bias.len() != self.out_dim {
            return Err(Error::ShapeMismatch(
                "affine weight/bias buffers do not match declared dims".into(),
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, v) in row.iter().zip(x.iter()) {
                acc += w * v;
            }
            *slot = acc;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        self.forward_into(x, &mut out);
        out
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::BevGridSpec;
    use approx::assert_relative_eq;

    #[test]
    fn conv_center_tap_passthrough() {
        let mut conv = ConvLayer::zeros(1, 1, 1);
        *conv.weight_mut(0, 0, 1, 1) = 1.0;
        let data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let (out, oh, ow) = conv.forward(&data, 2, 3);
        assert_eq!((oh, ow), (2, 3));
        assert_eq!(out, data);
    }

    #[test]
    fn conv_stride_two_halves_dims() {
        let conv = ConvLayer::zeros(1, 2, 2);
        let (out, oh, ow) = conv.forward(&vec![0.0; 5 * 7], 5, 7);
        assert_eq!((oh, ow), (3, 4));
        assert_eq!(out.len(), 3 * 4 * 2);
    }

    #[test]
    fn conv_sums_neighborhood_with_zero_padding() {
        let mut conv = ConvLayer::zeros(1, 1, 1);
        for ky in 0..3 {
            for kx in 0..3 {
                *conv.weight_mut(0, 0, ky, kx) = 1.0;
            }
        }
        let data = vec![1.0; 9];
        let (out, _, _) = conv.forward(&data, 3, 3);
        // Corner sees a 2x2 window, center the full 3x3.
        assert_relative_eq!(out[0], 4.0);
        assert_relative_eq!(out[4], 9.0);
    }

    #[test]
    fn score_conv_rejects_bad_shape() {
        let spec = BevGridSpec::default_extent();
        let r = BevRaster::zeros(spec, 3);
        let conv = ConvLayer::zeros(2, 1, 1);
        assert!(conv.forward_raster(&r).is_err());
    }

    #[test]
    fn affine_applies_weights_and_bias() {
        let layer = AffineLayer {
            in_dim: 2,
            out_dim: 2,
            weights: vec![1.0, 2.0, 0.0, -1.0],
            bias: vec![0.5, 0.0],
        };
        assert_eq!(layer.forward(&[3.0, 4.0]), vec![11.5, -4.0]);
    }
}
