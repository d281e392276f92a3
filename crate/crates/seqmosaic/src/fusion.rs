//! Non-local query/key/value frame fusion.
//!
//! For feature maps of a query, key and value frame, every output position
//! reweights unary query features by the softmax affinity between the value
//! feature at that position and key features over a neighbourhood:
//!
//! ```text
//! y_i = g(q_i) ⊙ Σ_j softmax_j( θ(v_i) · φ(k_j) ) g(q_j)
//! ```
//!
//! θ, φ and g are learned 1x1-convolution (per-position linear) embeddings.
//! The neighbourhood is either the in-bounds 8-neighbours of `i` or every
//! position. The affinity `exp(θ(v_i)·φ(k_j))`, normalized over the
//! neighbourhood, is exactly the softmax computed here with max subtraction.
//! Analytic gradients for all weights and inputs are provided for training.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{softmax_slice, Tensor};

/// Which positions `j` contribute to output position `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighborhood {
    /// The in-bounds 8-neighbours of `i` (excluding `i`). A 1x1 map has no
    /// neighbours and falls back to `i` itself.
    EightNeighbor,
    /// Every spatial position, including `i`.
    AllPositions,
}

impl Neighborhood {
    /// Contributing positions for (x, y), in a fixed order.
    pub(crate) fn collect(&self, x: usize, y: usize, w: usize, h: usize, out: &mut Vec<usize>) {
        out.clear();
        match self {
            Neighborhood::AllPositions => out.extend(0..w * h),
            Neighborhood::EightNeighbor => {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let nx = x as i64 + dx;
                        let ny = y as i64 + dy;
                        if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                            out.push(ny as usize * w + nx as usize);
                        }
                    }
                }
                if out.is_empty() {
                    out.push(y * w + x);
                }
            }
        }
    }
}

/// Learned weights of the fusion head.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    /// [C', C] embedding applied to value features.
    w_theta: Tensor,
    /// [C', C] embedding applied to key features.
    w_phi: Tensor,
    /// [C, C] unary embedding applied to query features.
    w_g: Tensor,
    neighborhood: Neighborhood,
}

impl FusionHead {
    pub fn new(w_theta: Tensor, w_phi: Tensor, w_g: Tensor, neighborhood: Neighborhood) -> Result<Self> {
        if w_theta.rank() != 2 || w_phi.rank() != 2 || w_g.rank() != 2 {
            return Err(Error::Dimension("fusion weights must be rank-2".into()));
        }
        let embed = w_theta.shape()[0];
        let channels = w_theta.shape()[1];
        if w_phi.shape() != [embed, channels] {
            return Err(Error::Dimension(format!(
                "w_phi shape {:?} does not match w_theta {:?}",
                w_phi.shape(),
                w_theta.shape()
            )));
        }
        if w_g.shape() != [channels, channels] {
            return Err(Error::Dimension(format!(
                "w_g must be [{channels}, {channels}], got {:?}",
                w_g.shape()
            )));
        }
        if embed > channels {
            return Err(Error::Dimension(format!(
                "embedding width {embed} exceeds channel count {channels}"
            )));
        }
        for t in [&w_theta, &w_phi, &w_g] {
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("fusion weights must be finite".into()));
            }
        }
        Ok(FusionHead {
            w_theta,
            w_phi,
            w_g,
            neighborhood,
        })
    }

    /// Glorot-uniform initialization.
    pub fn glorot(channels: usize, embed: usize, neighborhood: Neighborhood, rng: &mut Rng) -> Self {
        let lim = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        let le = lim(channels, embed);
        let lg = lim(channels, channels);
        let w_theta = Tensor::from_fn(&[embed, channels], |_| rng.uniform(-le, le));
        let w_phi = Tensor::from_fn(&[embed, channels], |_| rng.uniform(-le, le));
        let w_g = Tensor::from_fn(&[channels, channels], |_| rng.uniform(-lg, lg));
        FusionHead::new(w_theta, w_phi, w_g, neighborhood).expect("glorot shapes are consistent")
    }

    /// Identity embeddings, untrained; handy as a fixed reference head.
    pub fn identity(channels: usize, neighborhood: Neighborhood) -> Self {
        let eye = Tensor::from_fn(&[channels, channels], |i| {
            if i / channels == i % channels {
                1.0
            } else {
                0.0
            }
        });
        FusionHead::new(eye.clone(), eye.clone(), eye, neighborhood).expect("identity shapes")
    }

    pub fn channels(&self) -> usize {
        self.w_theta.shape()[1]
    }

    pub fn embed(&self) -> usize {
        self.w_theta.shape()[0]
    }

    pub fn neighborhood(&self) -> Neighborhood {
        self.neighborhood
    }

    pub fn w_theta(&self) -> &Tensor {
        &self.w_theta
    }

    pub fn w_phi(&self) -> &Tensor {
        &self.w_phi
    }

    pub fn w_g(&self) -> &Tensor {
        &self.w_g
    }

    pub(crate) fn weights_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_theta, &mut self.w_phi, &mut self.w_g]
    }
}

/// Feature maps of the query, key and value frames, each [C, H, W].
#[derive(Debug, Clone)]
pub struct FrameTriple {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

impl FrameTriple {
    pub fn new(query: Tensor, key: Tensor, value: Tensor) -> Result<Self> {
        if query.rank() != 3 {
            return Err(Error::Dimension(format!(
                "frame features must be [C, H, W], got {:?}",
                query.shape()
            )));
        }
        if key.shape() != query.shape() || value.shape() != query.shape() {
            return Err(Error::Dimension(format!(
                "query/key/value shapes differ: {:?}, {:?}, {:?}",
                query.shape(),
                key.shape(),
                value.shape()
            )));
        }
        Ok(FrameTriple { query, key, value })
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.query.shape()[0], self.query.shape()[1], self.query.shape()[2])
    }
}

/// Affinity of a value feature and a key feature: `exp(v · k)`.
pub fn pairwise_gaussian(vi: &[f64], kj: &[f64]) -> Result<f64> {
    if vi.len() != kj.len() {
        return Err(Error::Dimension(format!(
            "pairwise channel counts differ: {} vs {}",
            vi.len(),
            kj.len()
        )));
    }
    Ok(dot(vi, kj).exp())
}

/// Embedded affinity: `exp(θ(v) · φ(k))` with the head's linear embeddings.
pub fn pairwise_embedded(head: &FusionHead, vi: &[f64], kj: &[f64]) -> Result<f64> {
    let c = head.channels();
    if vi.len() != c || kj.len() != c {
        return Err(Error::Dimension(format!(
            "pairwise inputs must have {c} channels, got {} and {}",
            vi.len(),
            kj.len()
        )));
    }
    let theta_v = mat_vec(&head.w_theta, vi);
    let phi_k = mat_vec(&head.w_phi, kj);
    pairwise_gaussian(&theta_v, &phi_k)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let rows = m.shape()[0];
    let cols = m.shape()[1];
    (0..rows)
        .map(|r| dot(&m.data()[r * cols..(r + 1) * cols], v))
        .collect()
}

/// [rows, cols] = m [rows, C] times feature map [C, HW].
fn embed_map(m: &Tensor, features: &Tensor, hw: usize) -> Vec<f64> {
    let rows = m.shape()[0];
    let c = m.shape()[1];
    let data = features.data();
    let mut out = vec![0.0; rows * hw];
    for r in 0..rows {
        let w_row = &m.data()[r * c..(r + 1) * c];
        let out_row = &mut out[r * hw..(r + 1) * hw];
        for (ci, &w) in w_row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let f_row = &data[ci * hw..(ci + 1) * hw];
            for (o, &f) in out_row.iter_mut().zip(f_row) {
                *o += w * f;
            }
        }
    }
    out
}

/// Forward pass of the fusion head. Output shape equals the input shape.
pub fn fuse(head: &FusionHead, x: &FrameTriple) -> Result<Tensor> {
    let (c, h, w) = x.dims();
    check_channels(head, c)?;
    let hw = h * w;
    let theta_v = embed_map(&head.w_theta, &x.value, hw);
    let phi_k = embed_map(&head.w_phi, &x.key, hw);
    let g_q = embed_map(&head.w_g, &x.query, hw);
    let embed = head.embed();

    let mut out = vec![0.0; c * hw];
    let mut neighbors = Vec::with_capacity(hw.min(9));
    let mut scores: Vec<f64> = Vec::with_capacity(hw.min(9));
    for y in 0..h {
        for xx in 0..w {
            let i = y * w + xx;
            head.neighborhood.collect(xx, y, w, h, &mut neighbors);
            scores.clear();
            for &j in &neighbors {
                let mut s = 0.0;
                for e in 0..embed {
                    s += theta_v[e * hw + i] * phi_k[e * hw + j];
                }
                scores.push(s);
            }
            softmax_slice(&mut scores)?;
            for ci in 0..c {
                let g_row = &g_q[ci * hw..(ci + 1) * hw];
                let mut m = 0.0;
                for (&j, &wgt) in neighbors.iter().zip(&scores) {
                    m += wgt * g_row[j];
                }
                out[ci * hw + i] = g_row[i] * m;
            }
        }
    }
    Tensor::new(x.query.shape(), out)
}

/// Softmax attention weights at one spatial position, as (position, weight)
/// pairs over the configured neighbourhood.
pub fn attention_weights(head: &FusionHead, x: &FrameTriple, position: usize) -> Result<Vec<(usize, f64)>> {
    let (c, h, w) = x.dims();
    check_channels(head, c)?;
    let hw = h * w;
    if position >= hw {
        return Err(Error::Range(format!(
            "position {position} outside spatial domain of {hw}"
        )));
    }
    let theta_v = embed_map(&head.w_theta, &x.value, hw);
    let phi_k = embed_map(&head.w_phi, &x.key, hw);
    let embed = head.embed();
    let mut neighbors = Vec::new();
    head.neighborhood
        .collect(position % w, position / w, w, h, &mut neighbors);
    let mut scores: Vec<f64> = neighbors
        .iter()
        .map(|&j| (0..embed).map(|e| theta_v[e * hw + position] * phi_k[e * hw + j]).sum())
        .collect();
    softmax_slice(&mut scores)?;
    Ok(neighbors.into_iter().zip(scores).collect())
}

/// Gradients of a scalar loss with respect to the head weights and inputs.
#[derive(Debug, Clone)]
pub struct FusionGradients {
    pub w_theta: Tensor,
    pub w_phi: Tensor,
    pub w_g: Tensor,
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

/// Backward pass: given `upstream = dL/dy`, return gradients for every
/// weight and input of [`fuse`].
pub fn fuse_backward(head: &FusionHead, x: &FrameTriple, upstream: &Tensor) -> Result<FusionGradients> {
    let (c, h, w) = x.dims();
    check_channels(head, c)?;
    if upstream.shape() != x.query.shape() {
        return Err(Error::Dimension(format!(
            "upstream gradient shape {:?} does not match input {:?}",
            upstream.shape(),
            x.query.shape()
        )));
    }
    let hw = h * w;
    let embed = head.embed();
    let theta_v = embed_map(&head.w_theta, &x.value, hw);
    let phi_k = embed_map(&head.w_phi, &x.key, hw);
    let g_q = embed_map(&head.w_g, &x.query, hw);
    let u = upstream.data();

    // gradients w.r.t. the embedded maps
    let mut d_theta_v = vec![0.0; embed * hw];
    let mut d_phi_k = vec![0.0; embed * hw];
    let mut d_g_q = vec![0.0; c * hw];

    let mut neighbors = Vec::with_capacity(hw.min(9));
    let mut scores: Vec<f64> = Vec::with_capacity(hw.min(9));
    let mut d_weights: Vec<f64> = Vec::with_capacity(hw.min(9));
    for y in 0..h {
        for xx in 0..w {
            let i = y * w + xx;
            head.neighborhood.collect(xx, y, w, h, &mut neighbors);
            scores.clear();
            for &j in &neighbors {
                let mut s = 0.0;
                for e in 0..embed {
                    s += theta_v[e * hw + i] * phi_k[e * hw + j];
                }
                scores.push(s);
            }
            softmax_slice(&mut scores)?;

            // y_i[c] = g_q[c][i] * m[c],  m[c] = sum_j w_j g_q[c][j]
            d_weights.clear();
            d_weights.resize(neighbors.len(), 0.0);
            for ci in 0..c {
                let g_row = &g_q[ci * hw..(ci + 1) * hw];
                let mut m = 0.0;
                for (&j, &wgt) in neighbors.iter().zip(&scores) {
                    m += wgt * g_row[j];
                }
                let ui = u[ci * hw + i];
                d_g_q[ci * hw + i] += ui * m;
                let dm = ui * g_row[i];
                for ((&j, &wgt), dw) in neighbors.iter().zip(&scores).zip(d_weights.iter_mut()) {
                    *dw += dm * g_row[j];
                    d_g_q[ci * hw + j] += wgt * dm;
                }
            }

            // softmax backward
            let dot_wd: f64 = scores.iter().zip(&d_weights).map(|(w, d)| w * d).sum();
            for ((&j, &wgt), &dw) in neighbors.iter().zip(&scores).zip(&d_weights) {
                let ds = wgt * (dw - dot_wd);
                if ds == 0.0 {
                    continue;
                }
                for e in 0..embed {
                    d_theta_v[e * hw + i] += ds * phi_k[e * hw + j];
                    d_phi_k[e * hw + j] += ds * theta_v[e * hw + i];
                }
            }
        }
    }

    // pull embedded-map gradients back through the linear embeddings
    let (gw_theta, gv) = linear_backward(&head.w_theta, &x.value, &d_theta_v, hw);
    let (gw_phi, gk) = linear_backward(&head.w_phi, &x.key, &d_phi_k, hw);
    let (gw_g, gq) = linear_backward(&head.w_g, &x.query, &d_g_q, hw);

    Ok(FusionGradients {
        w_theta: Tensor::new(head.w_theta.shape(), gw_theta)?,
        w_phi: Tensor::new(head.w_phi.shape(), gw_phi)?,
        w_g: Tensor::new(head.w_g.shape(), gw_g)?,
        query: Tensor::new(x.query.shape(), gq)?,
        key: Tensor::new(x.key.shape(), gk)?,
        value: Tensor::new(x.value.shape(), gv)?,
    })
}

/// For `out = m · features` (rows x HW), accumulate gradients of `m` and of
/// the features given `d_out`.
fn linear_backward(m: &Tensor, features: &Tensor, d_out: &[f64], hw: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = m.shape()[0];
    let c = m.shape()[1];
    let f = features.data();
    let mut d_m = vec![0.0; rows * c];
    let mut d_f = vec![0.0; c * hw];
    for r in 0..rows {
        let d_row = &d_out[r * hw..(r + 1) * hw];
        for ci in 0..c {
            let f_row = &f[ci * hw..(ci + 1) * hw];
            d_m[r * c + ci] += dot(d_row, f_row);
            let w = m.data()[r * c + ci];
            if w != 0.0 {
                let df_row = &mut d_f[ci * hw..(ci + 1) * hw];
                for (dfv, &dv) in df_row.iter_mut().zip(d_row) {
                    *dfv += w * dv;
                }
            }
        }
    }
    (d_m, d_f)
}

fn check_channels(head: &FusionHead, c: usize) -> Result<()> {
    if head.channels() != c {
        return Err(Error::Dimension(format!(
            "head expects {} channels, features have {c}",
            head.channels()
        )));
    }
    Ok(())
}
