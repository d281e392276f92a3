//! Network layers with hand-derived backward passes.
//!
//! Each layer exposes `forward` plus a `backward` that maps the upstream
//! gradient to parameter and input gradients. Accumulation orders are fixed,
//! so training is bit-reproducible.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{conv2d, Padding, Tensor};

fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// 3x3 convolution, zero-padded to preserve the spatial extent, plus a per
/// output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// [F, C, 3, 3]
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn glorot(in_channels: usize, out_channels: usize, rng: &mut Rng) -> Self {
        let lim = glorot_limit(in_channels * 9, out_channels * 9);
        ConvLayer {
            weight: Tensor::from_fn(&[out_channels, in_channels, 3, 3], |_| rng.uniform(-lim, lim)),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `conv2d(input, weight, SameZero) + bias`, input [C, H, W].
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut out = conv2d(input, &self.weight, Padding::SameZero)?;
        let hw = out.shape()[1] * out.shape()[2];
        for (f, &b) in self.bias.iter().enumerate() {
            for v in &mut out.data_mut()[f * hw..(f + 1) * hw] {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Gradients of (weight, bias, input) given the upstream gradient.
    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Vec<f64>, Tensor)> {
        let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let f = self.out_channels();
        if grad_out.shape() != [f, h, w] {
            return Err(Error::Dimension(format!(
                "conv backward: upstream {:?} does not match output [{f}, {h}, {w}]",
                grad_out.shape()
            )));
        }
        if c != self.in_channels() {
            return Err(Error::Dimension(format!(
                "conv backward: input has {c} channels, layer expects {}",
                self.in_channels()
            )));
        }
        let hw = h * w;
        let go = grad_out.data();
        let inp = input.data();

        let mut grad_b = vec![0.0; f];
        for (fo, gb) in grad_b.iter_mut().enumerate() {
            *gb = go[fo * hw..(fo + 1) * hw].iter().sum();
        }

        let mut grad_w = vec![0.0; f * c * 9];
        let mut grad_in = vec![0.0; c * hw];
        for fo in 0..f {
            let go_plane = &go[fo * hw..(fo + 1) * hw];
            for ci in 0..c {
                let in_plane = &inp[ci * hw..(ci + 1) * hw];
                let gi_plane = &mut grad_in[ci * hw..(ci + 1) * hw];
                for dy in 0..3usize {
                    for dx in 0..3usize {
                        let shift = dx as isize - 1;
                        let ox_lo = (-shift).max(0) as usize;
                        let ox_hi = (w as isize - shift).clamp(0, w as isize) as usize;
                        let wgt = self.weight.at4(fo, ci, dy, dx);
                        let mut gw = 0.0;
                        for oy in 0..h {
                            let iy = oy as isize + dy as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let go_row = &go_plane[oy * w + ox_lo..oy * w + ox_hi];
                            let in_base = iy as usize * w;
                            let in_row = &in_plane
                                [(in_base as isize + ox_lo as isize + shift) as usize
                                    ..(in_base as isize + ox_hi as isize + shift) as usize];
                            gw += go_row.iter().zip(in_row).map(|(a, b)| a * b).sum::<f64>();
                            if wgt != 0.0 {
                                let gi_row = &mut gi_plane
                                    [(in_base as isize + ox_lo as isize + shift) as usize
                                        ..(in_base as isize + ox_hi as isize + shift) as usize];
                                for (gi, &g) in gi_row.iter_mut().zip(go_row) {
                                    *gi += wgt * g;
                                }
                            }
                        }
                        grad_w[((fo * c + ci) * 3 + dy) * 3 + dx] = gw;
                    }
                }
            }
        }
        Ok((
            Tensor::new(self.weight.shape(), grad_w)?,
            grad_b,
            Tensor::new(input.shape(), grad_in)?,
        ))
    }
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    /// [out, in]
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl FcLayer {
    pub fn glorot(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let lim = glorot_limit(inputs, outputs);
        FcLayer {
            weight: Tensor::from_fn(&[outputs, inputs], |_| rng.uniform(-lim, lim)),
            bias: vec![0.0; outputs],
        }
    }

    /// All-zero layer; makes an untrained model predict zeros.
    pub fn zeroed(inputs: usize, outputs: usize) -> Self {
        FcLayer {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (o, i) = (self.outputs(), self.inputs());
        if x.len() != i {
            return Err(Error::Dimension(format!(
                "fc forward: input of {} values, layer expects {i}",
                x.len()
            )));
        }
        let w = self.weight.data();
        Ok((0..o)
            .map(|r| self.bias[r] + w[r * i..(r + 1) * i].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let (o, i) = (self.outputs(), self.inputs());
        if x.len() != i || grad_out.len() != o {
            return Err(Error::Dimension("fc backward: shape mismatch".into()));
        }
        let w = self.weight.data();
        let mut grad_w = vec![0.0; o * i];
        let mut grad_in = vec![0.0; i];
        for r in 0..o {
            let g = grad_out[r];
            let w_row = &w[r * i..(r + 1) * i];
            let gw_row = &mut grad_w[r * i..(r + 1) * i];
            for k in 0..i {
                gw_row[k] = g * x[k];
                grad_in[k] += g * w_row[k];
            }
        }
        Ok((
            Tensor::new(self.weight.shape(), grad_w)?,
            grad_out.to_vec(),
            grad_in,
        ))
    }
}

/// Elementwise max(0, x).
pub fn relu_forward(x: &Tensor) -> Tensor {
    crate::tensor::relu(x)
}

/// Gradient through ReLU given the pre-activation values.
pub fn relu_backward(pre_activation: &Tensor, grad_out: &Tensor) -> Tensor {
    debug_assert_eq!(pre_activation.shape(), grad_out.shape());
    Tensor::new(
        pre_activation.shape(),
        pre_activation
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
            .collect(),
    )
    .expect("relu shapes match")
}

/// 2x2 max pooling with stride 2. Returns pooled features plus the flat
/// input index of each selected maximum (first occurrence wins ties).
pub fn max_pool2(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "max_pool2 needs even spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = input.data();
    let mut out = vec![0.0; c * oh * ow];
    let mut argmax = vec![0u32; c * oh * ow];
    for ci in 0..c {
        let plane = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let base = plane + 2 * oy * w + 2 * ox;
                let candidates = [base, base + 1, base + w, base + w + 1];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                let o = (ci * oh + oy) * ow + ox;
                out[o] = data[best];
                argmax[o] = best as u32;
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, argmax))
}

/// Route pooled gradients back to the positions that won the forward pass.
pub fn max_pool2_backward(argmax: &[u32], grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::Dimension("max_pool2 backward: argmax length mismatch".into()));
    }
    let mut grad_in = Tensor::zeros(input_shape);
    let gi = grad_in.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gi[idx as usize] += g;
    }
    Ok(grad_in)
}

/// Parameter-free local correlation of two feature maps [C, H, W]: one
/// output channel per offset (dy, dx) in a (2r+1)^2 grid, row-major,
/// holding `gain * Σ_c a[c][i] b[c][i + (dy, dx)]` with zero outside the
/// map. The output channel grid directly encodes local displacement.
pub fn correlation_forward(a: &Tensor, b: &Tensor, radius: usize, gain: f64) -> Result<Tensor> {
    if a.rank() != 3 || a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "correlation needs matching [C, H, W] maps, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let side = 2 * radius + 1;
    let hw = h * w;
    let mut out = vec![0.0; side * side * hw];
    let r = radius as isize;
    for (d, (dy, dx)) in offset_grid(r).enumerate() {
        let plane = &mut out[d * hw..(d + 1) * hw];
        for ci in 0..c {
            let pa = &a.data()[ci * hw..(ci + 1) * hw];
            let pb = &b.data()[ci * hw..(ci + 1) * hw];
            for y in 0..h as isize {
                let sy = y + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let x_lo = (-dx).max(0);
                let x_hi = (w as isize - dx).min(w as isize);
                for x in x_lo..x_hi {
                    plane[(y * w as isize + x) as usize] +=
                        pa[(y * w as isize + x) as usize] * pb[(sy * w as isize + x + dx) as usize];
                }
            }
        }
        for v in plane.iter_mut() {
            *v *= gain;
        }
    }
    Tensor::new(&[side * side, h, w], out)
}

/// Gradients of [`correlation_forward`] with respect to both maps.
pub fn correlation_backward(
    a: &Tensor,
    b: &Tensor,
    radius: usize,
    gain: f64,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let side = 2 * radius + 1;
    if grad_out.shape() != [side * side, h, w] {
        return Err(Error::Dimension(format!(
            "correlation backward: upstream {:?} does not match [{}, {h}, {w}]",
            grad_out.shape(),
            side * side
        )));
    }
    let hw = h * w;
    let mut da = vec![0.0; c * hw];
    let mut db = vec![0.0; c * hw];
    let r = radius as isize;
    for (d, (dy, dx)) in offset_grid(r).enumerate() {
        let plane = &grad_out.data()[d * hw..(d + 1) * hw];
        for ci in 0..c {
            let pa = &a.data()[ci * hw..(ci + 1) * hw];
            let pb = &b.data()[ci * hw..(ci + 1) * hw];
            let ga = &mut da[ci * hw..(ci + 1) * hw];
            // split borrows: db touched in a second pass per channel
            let gb = &mut db[ci * hw..(ci + 1) * hw];
            for y in 0..h as isize {
                let sy = y + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let x_lo = (-dx).max(0);
                let x_hi = (w as isize - dx).min(w as isize);
                for x in x_lo..x_hi {
                    let i = (y * w as isize + x) as usize;
                    let j = (sy * w as isize + x + dx) as usize;
                    let g = gain * plane[i];
                    ga[i] += g * pb[j];
                    gb[j] += g * pa[i];
                }
            }
        }
    }
    Ok((Tensor::new(a.shape(), da)?, Tensor::new(b.shape(), db)?))
}

fn offset_grid(r: isize) -> impl Iterator<Item = (isize, isize)> {
    (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| (dy, dx)))
}

/// Pooled normalized cross-correlation descriptor of two feature maps.
///
/// Both maps are centred per channel, then for every offset in the
/// (2r+1)^2 grid the full-map correlation sum is divided by the product of
/// the centred maps' Frobenius norms and scaled by `scale`. Outputs are
/// correlation coefficients (times `scale`), so the descriptor and its
/// gradients stay bounded no matter how the upstream features drift.
pub struct NccDescriptor {
    pub values: Vec<f64>,
    pub centred_a: Tensor,
    pub centred_b: Tensor,
    norm_a: f64,
    norm_b: f64,
    radius: usize,
    scale: f64,
}

pub fn ncc_descriptor(a: &Tensor, b: &Tensor, radius: usize, scale: f64) -> Result<NccDescriptor> {
    let centred_a = channel_mean_subtract(a);
    let centred_b = channel_mean_subtract(b);
    let norm = |t: &Tensor| {
        t.data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(1e-12)
    };
    let norm_a = norm(&centred_a);
    let norm_b = norm(&centred_b);
    let raw = correlation_forward(&centred_a, &centred_b, radius, 1.0)?;
    let side = 2 * radius + 1;
    let hw = a.shape()[1] * a.shape()[2];
    let inv = scale / (norm_a * norm_b);
    let values = (0..side * side)
        .map(|d| raw.data()[d * hw..(d + 1) * hw].iter().sum::<f64>() * inv)
        .collect();
    Ok(NccDescriptor {
        values,
        centred_a,
        centred_b,
        norm_a,
        norm_b,
        radius,
        scale,
    })
}

impl NccDescriptor {
    /// Gradients of a scalar loss w.r.t. the two (uncentred) input maps,
    /// given the gradient on the descriptor values.
    pub fn backward(&self, grad_values: &[f64]) -> Result<(Tensor, Tensor)> {
        let side = 2 * self.radius + 1;
        if grad_values.len() != side * side {
            return Err(Error::Dimension(format!(
                "ncc backward: {} gradients for {} offsets",
                grad_values.len(),
                side * side
            )));
        }
        let (h, w) = (self.centred_a.shape()[1], self.centred_a.shape()[2]);
        let inv = self.scale / (self.norm_a * self.norm_b);
        // quotient rule: the raw-correlation term plus the norm terms
        let mut d_raw = Tensor::zeros(&[side * side, h, w]);
        {
            let data = d_raw.data_mut();
            let hw = h * w;
            for (d, &g) in grad_values.iter().enumerate() {
                for v in &mut data[d * hw..(d + 1) * hw] {
                    *v = g * inv;
                }
            }
        }
        let (mut d_ca, mut d_cb) =
            correlation_backward(&self.centred_a, &self.centred_b, self.radius, 1.0, &d_raw)?;
        let dot: f64 = grad_values.iter().zip(&self.values).map(|(g, v)| g * v).sum();
        let coeff_a = dot / (self.norm_a * self.norm_a);
        let coeff_b = dot / (self.norm_b * self.norm_b);
        for (d, &c) in d_ca.data_mut().iter_mut().zip(self.centred_a.data()) {
            *d -= coeff_a * c;
        }
        for (d, &c) in d_cb.data_mut().iter_mut().zip(self.centred_b.data()) {
            *d -= coeff_b * c;
        }
        Ok((
            channel_mean_subtract_backward(&d_ca),
            channel_mean_subtract_backward(&d_cb),
        ))
    }
}

/// Subtract each channel's spatial mean, leaving zero-mean planes.
/// Correlating zero-mean features makes the offset of best alignment stand
/// out instead of riding on a large common plateau.
pub fn channel_mean_subtract(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let hw = h * w;
    let mut out = t.clone();
    for ci in 0..c {
        let plane = &mut out.data_mut()[ci * hw..(ci + 1) * hw];
        let mean = plane.iter().sum::<f64>() / hw as f64;
        for v in plane.iter_mut() {
            *v -= mean;
        }
    }
    out
}

/// Gradient of [`channel_mean_subtract`]: the same centering applied to the
/// upstream gradient.
pub fn channel_mean_subtract_backward(grad_out: &Tensor) -> Tensor {
    channel_mean_subtract(grad_out)
}

/// Spatial mean per channel: [C, H, W] -> length-C vector.
pub fn global_mean_pool(t: &Tensor) -> Vec<f64> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let hw = h * w;
    (0..c)
        .map(|ci| t.data()[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect()
}

/// Gradient of [`global_mean_pool`]: broadcast each channel gradient over
/// its plane, scaled by 1/(H*W).
pub fn global_mean_pool_backward(grad_out: &[f64], shape: &[usize]) -> Result<Tensor> {
    if shape.len() != 3 || grad_out.len() != shape[0] {
        return Err(Error::Dimension(format!(
            "mean pool backward: {} gradients for shape {shape:?}",
            grad_out.len()
        )));
    }
    let hw = shape[1] * shape[2];
    let inv = 1.0 / hw as f64;
    let mut out = Tensor::zeros(shape);
    for (ci, &g) in grad_out.iter().enumerate() {
        for v in &mut out.data_mut()[ci * hw..(ci + 1) * hw] {
            *v = g * inv;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_bias_is_added_per_channel() {
        let mut layer = ConvLayer::glorot(1, 2, &mut Rng::new(1));
        layer.weight = Tensor::zeros(&[2, 1, 3, 3]);
        layer.bias = vec![0.5, -1.0];
        let out = layer.forward(&Tensor::zeros(&[1, 4, 4])).unwrap();
        assert!(out.data()[..16].iter().all(|&v| v == 0.5));
        assert!(out.data()[16..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn fc_zeroed_outputs_zero() {
        let layer = FcLayer::zeroed(5, 3);
        let y = layer.forward(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap();
        assert_eq!(y, vec![0.0; 3]);
    }

    #[test]
    fn fc_rejects_wrong_input_length() {
        let layer = FcLayer::zeroed(4, 2);
        assert!(layer.forward(&[1.0; 3]).is_err());
    }

    #[test]
    fn max_pool_picks_maxima_and_routes_gradients() {
        let input = Tensor::new(
            &[1, 2, 4],
            vec![1.0, 5.0, 2.0, 0.0, 3.0, -1.0, 0.0, 7.0],
        )
        .unwrap();
        let (out, argmax) = max_pool2(&input).unwrap();
        assert_eq!(out.data(), &[5.0, 7.0]);
        let grad = max_pool2_backward(&argmax, &Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap(), &[1, 2, 4]).unwrap();
        assert_eq!(grad.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn max_pool_rejects_odd_extents() {
        assert!(max_pool2(&Tensor::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn relu_masks_gradient_by_preactivation_sign() {
        let pre = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let grad = relu_backward(&pre, &Tensor::new(&[3], vec![1.0, 1.0, 1.0]).unwrap());
        assert_eq!(grad.data(), &[0.0, 0.0, 1.0]);
    }
}
