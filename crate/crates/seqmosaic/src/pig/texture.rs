//! Procedural vessel-like textures: branching dark curves over a bright
//! noisy background, blurred so bilinear resampling error stays small.

use crate::frame::ImageFrame;
use crate::rng::Rng;

const NOISE_CELL: usize = 16;

pub(crate) fn vessel_texture(width: usize, height: usize, rng: &mut Rng) -> ImageFrame {
    let mut img = noise_background(width, height, rng);
    let absorption = draw_vessels(width, height, rng);
    for (pixel, a) in img.data_mut().iter_mut().zip(&absorption) {
        *pixel *= 1.0 - a;
    }
    let img = binomial_blur(&img);
    let img = binomial_blur(&img);
    img.map(|v| v.clamp(0.02, 1.0))
}

/// Value noise: a coarse random lattice sampled bilinearly.
fn noise_background(width: usize, height: usize, rng: &mut Rng) -> ImageFrame {
    let lw = width / NOISE_CELL + 2;
    let lh = height / NOISE_CELL + 2;
    let lattice: Vec<f64> = (0..lw * lh).map(|_| rng.uniform(0.55, 0.95)).collect();
    ImageFrame::from_fn(width, height, |x, y| {
        let fx = x as f64 / NOISE_CELL as f64;
        let fy = y as f64 / NOISE_CELL as f64;
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let v00 = lattice[y0 * lw + x0];
        let v10 = lattice[y0 * lw + x0 + 1];
        let v01 = lattice[(y0 + 1) * lw + x0];
        let v11 = lattice[(y0 + 1) * lw + x0 + 1];
        (1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11)
    })
}

struct Walker {
    x: f64,
    y: f64,
    angle: f64,
    sigma: f64,
    darkness: f64,
    steps_left: usize,
}

/// Per-pixel absorption in [0, 1): max of Gaussian stamps dropped along
/// randomly wandering, occasionally branching walks.
fn draw_vessels(width: usize, height: usize, rng: &mut Rng) -> Vec<f64> {
    let mut absorption = vec![0.0f64; width * height];
    let seeds = 4 + width * height / 6000;
    let max_walkers = seeds * 4;
    let mut queue: Vec<Walker> = (0..seeds)
        .map(|_| Walker {
            x: rng.uniform(0.0, width as f64),
            y: rng.uniform(0.0, height as f64),
            angle: rng.uniform(0.0, std::f64::consts::TAU),
            sigma: rng.uniform(1.0, 2.4),
            darkness: rng.uniform(0.35, 0.6),
            steps_left: (rng.uniform(0.5, 1.4) * width.min(height) as f64) as usize,
        })
        .collect();
    let mut spawned = seeds;

    while let Some(mut w) = queue.pop() {
        while w.steps_left > 0 {
            w.steps_left -= 1;
            w.angle += rng.uniform(-0.18, 0.18);
            w.x += w.angle.cos();
            w.y += w.angle.sin();
            if w.x < -8.0 || w.y < -8.0 || w.x > width as f64 + 8.0 || w.y > height as f64 + 8.0 {
                break;
            }
            stamp(&mut absorption, width, height, &w);
            if spawned < max_walkers && rng.next_f64() < 0.01 {
                spawned += 1;
                let side = if rng.next_f64() < 0.5 { 1.0 } else { -1.0 };
                queue.push(Walker {
                    x: w.x,
                    y: w.y,
                    angle: w.angle + side * rng.uniform(0.4, 0.9),
                    sigma: (w.sigma * 0.75).max(0.8),
                    darkness: w.darkness * 0.9,
                    steps_left: w.steps_left / 2,
                });
            }
        }
    }
    absorption
}

fn stamp(absorption: &mut [f64], width: usize, height: usize, w: &Walker) {
    let radius = (3.0 * w.sigma).ceil() as isize;
    let cx = w.x.round() as isize;
    let cy = w.y.round() as isize;
    let inv_two_sigma_sq = 1.0 / (2.0 * w.sigma * w.sigma);
    for py in (cy - radius).max(0)..=(cy + radius).min(height as isize - 1) {
        for px in (cx - radius).max(0)..=(cx + radius).min(width as isize - 1) {
            let dx = px as f64 - w.x;
            let dy = py as f64 - w.y;
            let a = w.darkness * (-(dx * dx + dy * dy) * inv_two_sigma_sq).exp();
            let cell = &mut absorption[py as usize * width + px as usize];
            if a > *cell {
                *cell = a;
            }
        }
    }
}

/// Separable 3x3 binomial blur with replicated edges.
fn binomial_blur(img: &ImageFrame) -> ImageFrame {
    let w = img.width();
    let h = img.height();
    let horizontal = ImageFrame::from_fn(w, h, |x, y| {
        let xm = x.saturating_sub(1);
        let xp = (x + 1).min(w - 1);
        0.25 * img.get(xm, y) + 0.5 * img.get(x, y) + 0.25 * img.get(xp, y)
    });
    ImageFrame::from_fn(w, h, |x, y| {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        0.25 * horizontal.get(x, ym) + 0.5 * horizontal.get(x, y) + 0.25 * horizontal.get(x, yp)
    })
}
