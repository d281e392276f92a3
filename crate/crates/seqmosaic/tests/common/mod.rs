//! Shared test helpers: independent oracles and fixtures.
#![allow(dead_code)]

use seqmosaic::fusion::{FrameTriple, FusionHead, Neighborhood};
use seqmosaic::rng::Rng;
use seqmosaic::tensor::Tensor;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

/// Literal evaluation of the fusion rule, written independently of the
/// implementation: per position i, affinities F = exp(θ(v_i)·φ(k_j)) over
/// the neighbourhood, normalized by their sum, contracted against unary
/// query features g(q_j), then multiplied elementwise by g(q_i).
/// `shift` adds a constant to every exponent, which must not change the
/// result.
pub fn fusion_oracle(head: &FusionHead, x: &FrameTriple, shift: f64) -> Tensor {
    let c = x.query.shape()[0];
    let h = x.query.shape()[1];
    let w = x.query.shape()[2];
    let hw = h * w;

    let channel_vec = |t: &Tensor, pos: usize| -> Vec<f64> {
        (0..c).map(|ci| t.data()[ci * hw + pos]).collect()
    };
    let mat_vec = |m: &Tensor, v: &[f64]| -> Vec<f64> {
        let rows = m.shape()[0];
        let cols = m.shape()[1];
        (0..rows)
            .map(|r| (0..cols).map(|cc| m.data()[r * cols + cc] * v[cc]).sum())
            .collect()
    };

    let neighbors = |pos: usize| -> Vec<usize> {
        match head.neighborhood() {
            Neighborhood::AllPositions => (0..hw).collect(),
            Neighborhood::EightNeighbor => {
                let (px, py) = (pos % w, pos / w);
                let mut out = Vec::new();
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let nx = px as i64 + dx;
                        let ny = py as i64 + dy;
                        if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                            out.push(ny as usize * w + nx as usize);
                        }
                    }
                }
                if out.is_empty() {
                    out.push(pos);
                }
                out
            }
        }
    };

    let mut out = Tensor::zeros(x.query.shape());
    for i in 0..hw {
        let theta_vi = mat_vec(head.w_theta(), &channel_vec(&x.value, i));
        let ns = neighbors(i);
        // raw affinities, no softmax trick
        let affinities: Vec<f64> = ns
            .iter()
            .map(|&j| {
                let phi_kj = mat_vec(head.w_phi(), &channel_vec(&x.key, j));
                let dot: f64 = theta_vi.iter().zip(&phi_kj).map(|(a, b)| a * b).sum();
                (dot + shift).exp()
            })
            .collect();
        let norm: f64 = affinities.iter().sum();
        let g_qi = mat_vec(head.w_g(), &channel_vec(&x.query, i));
        for ci in 0..c {
            let mut acc = 0.0;
            for (&j, &f) in ns.iter().zip(&affinities) {
                let g_qj = mat_vec(head.w_g(), &channel_vec(&x.query, j));
                acc += f * g_qj[ci];
            }
            out.data_mut()[ci * hw + i] = g_qi[ci] * acc / norm;
        }
    }
    out
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

pub fn random_triple(c: usize, h: usize, w: usize, rng: &mut Rng) -> FrameTriple {
    FrameTriple::new(
        random_tensor(&[c, h, w], rng, -1.0, 1.0),
        random_tensor(&[c, h, w], rng, -1.0, 1.0),
        random_tensor(&[c, h, w], rng, -1.0, 1.0),
    )
    .unwrap()
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Fresh temp directory, removed on drop.
pub struct TempDir {
    pub path: PathBuf,
}

impl TempDir {
    pub fn new(tag: &str) -> Self {
        let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let path = std::env::temp_dir().join(format!(
            "seqmosaic_{tag}_{}_{n}",
            std::process::id()
        ));
        std::fs::create_dir_all(&path).expect("create temp dir");
        TempDir { path }
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for TempDir {
    fn drop(&mut self) {
        std::fs::remove_dir_all(&self.path).ok();
    }
}
