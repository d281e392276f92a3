//! Central finite-difference verification of every analytic gradient.
//!
//! Each check compares the hand-derived backward pass of one layer (and of
//! the whole regressor) against `(f(x + h e_i) - f(x - h e_i)) / 2h` with
//! h = 1e-5, elementwise, using the relative error
//! `|a - n| / max(1, |a|, |n|)`. Instances are drawn from the given seed;
//! for paths through ReLU and max pooling the suite deterministically skips
//! to the next substream until the instance sits clear of the kinks, where
//! finite differences are meaningful.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::{fuse, fuse_backward, FrameTriple, FusionHead, Neighborhood};
use crate::homography::ThreePointDelta;
use crate::regressor::{
    FC_HIDDEN, OUTPUT_DIM,
    backward, euclidean_loss, forward, kink_margins, max_pool2, max_pool2_backward,
    ncc_descriptor, relu_backward, relu_forward, ConvLayer, FcLayer, RegressorModel,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest admissible relative error per gradient component.
pub const REL_TOL: f64 = 1e-4;
/// Minimum distance to a ReLU/pool switch point for a usable instance: the
/// probe step times a bound on how fast any single parameter can move an
/// activation. Instances below this are skipped deterministically.
const KINK_MARGIN: f64 = 8e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub params_checked: usize,
    pub worst_rel_err: f64,
    pub passed: bool,
}

/// Outcome of the whole suite.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<CheckResult>,
    pub worst_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{:<24} {:>6} params  worst rel err {:.3e}  {}\n",
                c.name,
                c.params_checked,
                c.worst_rel_err,
                if c.passed { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "worst relative error {:.3e} ({})\n",
            self.worst_rel_err,
            if self.passed { "all checks passed" } else { "FAILURES" }
        ));
        out
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

/// Compare an analytic gradient against central differences of `f` at `x`.
pub fn check_gradient(
    name: &str,
    x: &[f64],
    analytic: &[f64],
    f: &(dyn Fn(&[f64]) -> Result<f64> + Sync),
) -> Result<CheckResult> {
    assert_eq!(x.len(), analytic.len(), "{name}: gradient length mismatch");
    let errs: Vec<f64> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut probe = x.to_vec();
            probe[i] = x[i] + FD_STEP;
            let hi = f(&probe)?;
            probe[i] = x[i] - FD_STEP;
            let lo = f(&probe)?;
            let numeric = (hi - lo) / (2.0 * FD_STEP);
            Ok(rel_err(analytic[i], numeric))
        })
        .collect::<Result<_>>()?;
    let worst = errs.into_iter().fold(0.0, f64::max);
    Ok(CheckResult {
        name: name.to_string(),
        params_checked: x.len(),
        worst_rel_err: worst,
        passed: worst < REL_TOL,
    })
}

fn rand_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

/// Random values bounded away from zero, for ReLU inputs.
fn rand_vec_off_zero(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
            sign * rng.uniform(0.05, 1.0)
        })
        .collect()
}

fn weighted_sum(t: &Tensor, weights: &[f64]) -> f64 {
    t.data().iter().zip(weights).map(|(a, b)| a * b).sum()
}

fn check_conv(seed: u64, results: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = Rng::stream(seed, 10);
    let (c, f, h, w) = (2, 3, 6, 6);
    let layer = ConvLayer {
        weight: Tensor::new(&[f, c, 3, 3], rand_vec(&mut rng, f * c * 9, -0.5, 0.5))?,
        bias: rand_vec(&mut rng, f, -0.5, 0.5),
    };
    let input = Tensor::new(&[c, h, w], rand_vec(&mut rng, c * h * w, -1.0, 1.0))?;
    let probe = rand_vec(&mut rng, f * h * w, -1.0, 1.0);
    let upstream = Tensor::new(&[f, h, w], probe.clone())?;
    let (gw, gb, gin) = layer.backward(&input, &upstream)?;

    let layer_w = layer.clone();
    let input_w = input.clone();
    let probe_w = probe.clone();
    results.push(check_gradient("conv2d/weight", layer.weight.data(), gw.data(), &move |p| {
        let mut l = layer_w.clone();
        l.weight.data_mut().copy_from_slice(p);
        Ok(weighted_sum(&l.forward(&input_w)?, &probe_w))
    })?);

    let layer_b = layer.clone();
    let input_b = input.clone();
    let probe_b = probe.clone();
    results.push(check_gradient("conv2d/bias", &layer.bias, &gb, &move |p| {
        let mut l = layer_b.clone();
        l.bias.copy_from_slice(p);
        Ok(weighted_sum(&l.forward(&input_b)?, &probe_b))
    })?);

    let layer_i = layer.clone();
    let shape = input.shape().to_vec();
    results.push(check_gradient("conv2d/input", input.data(), gin.data(), &move |p| {
        Ok(weighted_sum(&layer_i.forward(&Tensor::new(&shape, p.to_vec())?)?, &probe))
    })?);
    Ok(())
}

fn check_fc(seed: u64, results: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = Rng::stream(seed, 11);
    let (inputs, outputs) = (10, 7);
    let layer = FcLayer {
        weight: Tensor::new(&[outputs, inputs], rand_vec(&mut rng, outputs * inputs, -0.5, 0.5))?,
        bias: rand_vec(&mut rng, outputs, -0.5, 0.5),
    };
    let x = rand_vec(&mut rng, inputs, -1.0, 1.0);
    let probe = rand_vec(&mut rng, outputs, -1.0, 1.0);
    let (gw, gb, gin) = layer.backward(&x, &probe)?;

    let sum = |y: &[f64], r: &[f64]| y.iter().zip(r).map(|(a, b)| a * b).sum::<f64>();
    let l1 = layer.clone();
    let x1 = x.clone();
    let p1 = probe.clone();
    results.push(check_gradient("fc/weight", layer.weight.data(), gw.data(), &move |p| {
        let mut l = l1.clone();
        l.weight.data_mut().copy_from_slice(p);
        Ok(sum(&l.forward(&x1)?, &p1))
    })?);
    let l2 = layer.clone();
    let x2 = x.clone();
    let p2 = probe.clone();
    results.push(check_gradient("fc/bias", &layer.bias, &gb, &move |p| {
        let mut l = l2.clone();
        l.bias.copy_from_slice(p);
        Ok(sum(&l.forward(&x2)?, &p2))
    })?);
    let l3 = layer.clone();
    let p3 = probe.clone();
    results.push(check_gradient("fc/input", &x, &gin, &move |p| {
        Ok(sum(&l3.forward(p)?, &p3))
    })?);
    Ok(())
}

fn check_relu(seed: u64, results: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = Rng::stream(seed, 12);
    let n = 40;
    let x = rand_vec_off_zero(&mut rng, n);
    let probe = rand_vec(&mut rng, n, -1.0, 1.0);
    let pre = Tensor::new(&[n], x.clone())?;
    let grad = relu_backward(&pre, &Tensor::new(&[n], probe.clone())?);
    results.push(check_gradient("relu/input", &x, grad.data(), &move |p| {
        Ok(weighted_sum(&relu_forward(&Tensor::new(&[n], p.to_vec())?), &probe))
    })?);
    Ok(())
}

fn check_max_pool(seed: u64, results: &mut Vec<CheckResult>) -> Result<()> {
    let (c, h, w) = (2, 4, 4);
    // resample until every pooling window has a clear winner
    let mut substream = 0;
    let x = loop {
        let mut rng = Rng::stream(seed, 13 + substream * 1000);
        let x = rand_vec(&mut rng, c * h * w, 0.0, 1.0);
        let mut ok = true;
        for ci in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let base = ci * h * w + 2 * oy * w + 2 * ox;
                    let mut vals = [x[base], x[base + 1], x[base + w], x[base + w + 1]];
                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if vals[0] - vals[1] < KINK_MARGIN {
                        ok = false;
                    }
                }
            }
        }
        if ok {
            break x;
        }
        substream += 1;
        if substream > 256 {
            return Err(Error::Numeric("could not find a tie-free pooling instance".into()));
        }
    };
    let mut rng = Rng::stream(seed, 14);
    let t = Tensor::new(&[c, h, w], x.clone())?;
    let (out, arg) = max_pool2(&t)?;
    let probe = rand_vec(&mut rng, out.len(), -1.0, 1.0);
    let grad = max_pool2_backward(&arg, &Tensor::new(out.shape(), probe.clone())?, &[c, h, w])?;
    results.push(check_gradient("max_pool2/input", &x, grad.data(), &move |p| {
        let (y, _) = max_pool2(&Tensor::new(&[c, h, w], p.to_vec())?)?;
        Ok(weighted_sum(&y, &probe))
    })?);
    Ok(())
}

fn check_ncc(seed: u64, results: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = Rng::stream(seed, 18);
    let (c, h, w) = (3, 6, 6);
    let radius = 2;
    let scale = 8.0;
    let a = Tensor::new(&[c, h, w], rand_vec(&mut rng, c * h * w, -1.0, 1.0))?;
    let b = Tensor::new(&[c, h, w], rand_vec(&mut rng, c * h * w, -1.0, 1.0))?;
    let side = 2 * radius + 1;
    let probe = rand_vec(&mut rng, side * side, -1.0, 1.0);
    let desc = ncc_descriptor(&a, &b, radius, scale)?;
    let (da, db) = desc.backward(&probe)?;

    let loss = |a: &Tensor, b: &Tensor| -> Result<f64> {
        let d = ncc_descriptor(a, b, radius, scale)?;
        Ok(d.values.iter().zip(&probe).map(|(v, p)| v * p).sum())
    };
    let (a0, b0) = (a.clone(), b.clone());
    let shape = a.shape().to_vec();
    let l1 = loss;
    results.push(check_gradient("ncc/map_a", a.data(), da.data(), &move |p| {
        l1(&Tensor::new(&shape, p.to_vec())?, &b0)
    })?);
    let shape = b.shape().to_vec();
    results.push(check_gradient("ncc/map_b", b.data(), db.data(), &move |p| {
        loss(&a0, &Tensor::new(&shape, p.to_vec())?)
    })?);
    Ok(())
}

fn check_fusion(seed: u64, results: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = Rng::stream(seed, 15);
    let (c, h, w) = (4, 3, 3);
    let head = FusionHead::glorot(c, 3, Neighborhood::EightNeighbor, &mut rng);
    let mk = |rng: &mut Rng| Tensor::from_fn(&[c, h, w], |_| rng.uniform(-1.0, 1.0));
    let triple = FrameTriple::new(mk(&mut rng), mk(&mut rng), mk(&mut rng))?;
    let probe = rand_vec(&mut rng, c * h * w, -1.0, 1.0);
    let upstream = Tensor::new(&[c, h, w], probe.clone())?;
    let grads = fuse_backward(&head, &triple, &upstream)?;

    let cases: [(&str, &Tensor, &Tensor); 3] = [
        ("fusion/w_theta", head.w_theta(), &grads.w_theta),
        ("fusion/w_phi", head.w_phi(), &grads.w_phi),
        ("fusion/w_g", head.w_g(), &grads.w_g),
    ];
    for (idx, (name, tensor, grad)) in cases.into_iter().enumerate() {
        let head0 = head.clone();
        let triple0 = triple.clone();
        let probe0 = probe.clone();
        results.push(check_gradient(name, tensor.data(), grad.data(), &move |p| {
            let w_theta = if idx == 0 {
                Tensor::new(head0.w_theta().shape(), p.to_vec())?
            } else {
                head0.w_theta().clone()
            };
            let w_phi = if idx == 1 {
                Tensor::new(head0.w_phi().shape(), p.to_vec())?
            } else {
                head0.w_phi().clone()
            };
            let w_g = if idx == 2 {
                Tensor::new(head0.w_g().shape(), p.to_vec())?
            } else {
                head0.w_g().clone()
            };
            let h2 = FusionHead::new(w_theta, w_phi, w_g, head0.neighborhood())?;
            Ok(weighted_sum(&fuse(&h2, &triple0)?, &probe0))
        })?);
    }

    let inputs: [(&str, &Tensor, &Tensor); 3] = [
        ("fusion/query", &triple.query, &grads.query),
        ("fusion/key", &triple.key, &grads.key),
        ("fusion/value", &triple.value, &grads.value),
    ];
    for (idx, (name, tensor, grad)) in inputs.into_iter().enumerate() {
        let head0 = head.clone();
        let triple0 = triple.clone();
        let probe0 = probe.clone();
        let shape = tensor.shape().to_vec();
        results.push(check_gradient(name, tensor.data(), grad.data(), &move |p| {
            let t = Tensor::new(&shape, p.to_vec())?;
            let mut q = triple0.query.clone();
            let mut k = triple0.key.clone();
            let mut v = triple0.value.clone();
            match idx {
                0 => q = t,
                1 => k = t,
                _ => v = t,
            }
            Ok(weighted_sum(&fuse(&head0, &FrameTriple::new(q, k, v)?)?, &probe0))
        })?);
    }
    Ok(())
}

fn check_full_regressor(seed: u64, results: &mut Vec<CheckResult>) -> Result<()> {
    let patch = 8;
    // skip to an instance clear of ReLU and pooling switch points; the
    // output layer is randomized so gradients reach every parameter (the
    // shipped zero initialization would make upstream gradients vanish)
    let mut substream = 0u64;
    let (model, triple) = loop {
        let mut model = RegressorModel::new(patch, 4, seed.wrapping_add(substream))?;
        let mut rng = Rng::stream(seed, 16 + substream * 7919);
        let mut params = model.params_vec();
        let n = params.len();
        for p in &mut params[n - OUTPUT_DIM * (FC_HIDDEN + 1)..] {
            *p = rng.uniform(-0.3, 0.3);
        }
        model.set_params_vec(&params)?;
        let mk = |rng: &mut Rng| Tensor::from_fn(&[1, patch, patch], |_| rng.uniform(0.0, 1.0));
        let triple = FrameTriple::new(mk(&mut rng), mk(&mut rng), mk(&mut rng))?;
        let (relu_margin, pool_gap) = kink_margins(&model, &triple)?;
        if relu_margin > KINK_MARGIN && pool_gap > KINK_MARGIN {
            break (model, triple);
        }
        substream += 1;
        if substream > 512 {
            return Err(Error::Numeric(
                "could not find a kink-free regressor instance".into(),
            ));
        }
    };
    let mut rng = Rng::stream(seed, 17);
    let truth = ThreePointDelta::from_flat([
        rng.uniform(-2.0, 2.0),
        rng.uniform(-2.0, 2.0),
        rng.uniform(-2.0, 2.0),
        rng.uniform(-2.0, 2.0),
        rng.uniform(-2.0, 2.0),
        rng.uniform(-2.0, 2.0),
    ]);
    let (_, grads) = backward(&model, &triple, &truth)?;
    let params = model.params_vec();
    let model0 = model.clone();
    let triple0 = triple.clone();
    results.push(check_gradient("regressor/all", &params, &grads.to_vec(), &move |p| {
        let mut m = model0.clone();
        m.set_params_vec(p)?;
        Ok(euclidean_loss(&forward(&m, &triple0)?, &truth))
    })?);
    Ok(())
}

/// Run every gradient check and collect a report. The model instance has
/// fewer than 10^4 parameters, so the full sweep stays fast.
pub fn run_suite(seed: u64) -> Result<GradCheckReport> {
    let mut checks = Vec::new();
    check_conv(seed, &mut checks)?;
    check_fc(seed, &mut checks)?;
    check_relu(seed, &mut checks)?;
    check_max_pool(seed, &mut checks)?;
    check_ncc(seed, &mut checks)?;
    check_fusion(seed, &mut checks)?;
    check_full_regressor(seed, &mut checks)?;
    let worst = checks.iter().map(|c| c.worst_rel_err).fold(0.0, f64::max);
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradCheckReport {
        checks,
        worst_rel_err: worst,
        passed,
    })
}
