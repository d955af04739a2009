//! Independent reference implementations shared by the integration tests.
//!
//! Everything here is written the slow, obvious way in `f64` so it can serve
//! as an oracle for the optimized code paths.

#![allow(dead_code)]

pub mod cases;

use modvqa::nn::{Graph, NodeId, ParamSet, Tensor};
use modvqa::{Image, Result};
use rand::Rng;

pub const GRADCHECK_H: f64 = 1e-5;
/// Denominator floor so that near-zero gradients are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Worst relative disagreement between backprop and central differences,
/// with the name and flat index where it occurred.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: (String, usize),
    pub checked: usize,
}

/// Compares analytic parameter gradients of the scalar built by `loss`
/// against central differences with step [`GRADCHECK_H`].
pub fn gradcheck<F>(params: &ParamSet<f64>, loss: F) -> GradReport
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let l = loss(&mut g, params).expect("loss builds");
    g.backward(l).expect("backward");
    let grads = g.param_grads();

    let eval = |p: &ParamSet<f64>| {
        let mut g = Graph::new();
        let l = loss(&mut g, p).expect("loss builds");
        g.scalar_value(l)
    };
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name).unwrap().len();
        let analytic = grads.get(name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[i] += GRADCHECK_H;
            let up = eval(&p);
            p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * GRADCHECK_H;
            let down = eval(&p);
            let numeric = (up - down) / (2.0 * GRADCHECK_H);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (name.clone(), i);
            }
            report.checked += 1;
        }
    }
    report
}

/// Reduces a node of any shape to a scalar with fixed pseudo-random weights,
/// so every output element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph<f64>, x: NodeId, seed: u64) -> Result<NodeId> {
    let n = g.value(x).len();
    let shape = g.value(x).shape().to_vec();
    let mut rng = rng(seed);
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn random_image(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Image<f32> {
    Image::from_fn(c, h, w, |_, _, _| rng.gen::<f32>())
}

/// Replaces every parameter with uniform noise of magnitude `1/sqrt(fan_in)`,
/// so no layer sits at a zero initialization.
pub fn randomize(params: &mut ParamSet<f64>, rng: &mut impl Rng) {
    for (_, t) in params.iter_mut() {
        let fan_in: usize = t.shape().iter().skip(1).product::<usize>().max(1);
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in t.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
    }
}

/// Keys cubic convolution kernel, `a = -0.5`, written from its textbook form.
pub fn keys_kernel(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        1.5 * t.powi(3) - 2.5 * t.powi(2) + 1.0
    } else if t < 2.0 {
        -0.5 * t.powi(3) + 2.5 * t.powi(2) - 4.0 * t + 2.0
    } else {
        0.0
    }
}

/// Per-pixel 2-D bicubic resampling: half-pixel centers, kernel widened by
/// the scale factor when shrinking, edge clamping, weights normalized over
/// the full 2-D support.
pub fn naive_bicubic(img: &Image<f32>, out_h: usize, out_w: usize) -> Vec<f64> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let (ky, kx) = (sy.max(1.0), sx.max(1.0));
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let cy = (oy as f64 + 0.5) * sy - 0.5;
                let cx = (ox as f64 + 0.5) * sx - 0.5;
                let (mut acc, mut total) = (0.0, 0.0);
                let ry = (2.0 * ky).ceil() as i64 + 1;
                let rx = (2.0 * kx).ceil() as i64 + 1;
                for iy in (cy.floor() as i64 - ry)..=(cy.floor() as i64 + ry) {
                    for ix in (cx.floor() as i64 - rx)..=(cx.floor() as i64 + rx) {
                        let wgt = keys_kernel((iy as f64 - cy) / ky) * keys_kernel((ix as f64 - cx) / kx);
                        let yy = iy.clamp(0, h as i64 - 1) as usize;
                        let xx = ix.clamp(0, w as i64 - 1) as usize;
                        acc += wgt * img.get(ch, yy, xx) as f64;
                        total += wgt;
                    }
                }
                out.push(acc / total);
            }
        }
    }
    out
}

/// Average ranks by counting: smaller values plus half of the other ties.
pub fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let below = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Pearson correlation from raw sums.
pub fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

pub fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
    brute_pearson(&brute_ranks(x), &brute_ranks(y))
}
