//! Gradient-check cases covering every graph operation, the three backbone
//! kinds, both rectifier heads, the PLCC loss and a whole clip forward pass.

use modvqa::media::VideoTensor;
use modvqa::nn::{Backbone, ConvBackbone, Graph, MlpHead, NodeId, ParamSet};
use modvqa::pyramid::RhoMode;
use modvqa::rectify::{apply_nodes, combine_nodes, rectifier_nodes, Architecture, ClipInputs, ModelConfig};
use modvqa::train::plcc_loss_nodes;
use modvqa::Result;
use rand::Rng;

use super::{gradcheck, random_image, random_tensor, randomize, rng, weighted_sum, GradReport};

type LossFn = Box<dyn Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<NodeId>>;

fn params(entries: &[(&str, &[usize], f64)], seed: u64) -> ParamSet<f64> {
    let mut r = rng(seed);
    let mut p = ParamSet::new();
    for &(name, shape, scale) in entries {
        p.insert(name, random_tensor(&mut r, shape, scale));
    }
    p
}

fn case(name: &str, p: &ParamSet<f64>, f: LossFn) -> (String, GradReport) {
    (name.to_string(), gradcheck(p, f))
}

/// Elementwise and reduction operations on two length-6 inputs, `y` kept positive.
fn elementwise() -> Vec<(String, GradReport)> {
    let mut p = params(&[("x", &[6], 1.0), ("y", &[6], 1.0), ("s", &[], 1.0)], 11);
    for v in p.get_mut("y").unwrap().data_mut() {
        *v = v.abs() + 0.5;
    }
    type Unary = fn(&mut Graph<f64>, NodeId, NodeId, NodeId) -> Result<NodeId>;
    let ops: Vec<(&str, Unary)> = vec![
        ("add", |g, x, y, _| g.add(x, y)),
        ("sub", |g, x, y, _| g.sub(x, y)),
        ("mul", |g, x, y, _| g.mul(x, y)),
        ("div", |g, x, y, _| g.div(x, y)),
        ("add_scalar_broadcast", |g, x, _, s| g.add(x, s)),
        ("mul_scalar_broadcast", |g, x, _, s| g.mul(x, s)),
        ("div_scalar_broadcast", |g, x, y, _| {
            let m = g.mean(y);
            g.div(x, m)
        }),
        ("scale", |g, x, _, _| Ok(g.scale(x, -1.7))),
        ("shift", |g, x, _, _| Ok(g.shift(x, 0.3))),
        ("relu", |g, x, _, _| Ok(g.relu(x))),
        ("softplus", |g, x, _, _| Ok(g.softplus(x))),
        ("exp", |g, x, _, _| Ok(g.exp(x))),
        ("ln", |g, _, y, _| Ok(g.ln(y))),
        ("sqrt", |g, _, y, _| Ok(g.sqrt(y))),
        ("sum", |g, x, _, _| Ok(g.sum(x))),
        ("mean", |g, x, _, _| Ok(g.mean(x))),
        ("select", |g, x, _, _| g.select(x, 4)),
        ("concat", |g, x, y, s| g.concat(&[x, s, y])),
        ("mean_of", |g, x, y, _| g.mean_of(&[x, y, x])),
    ];
    ops.into_iter()
        .enumerate()
        .map(|(i, (name, op))| {
            let f: LossFn = Box::new(move |g, p| {
                let x = g.param(p, "x")?;
                let y = g.param(p, "y")?;
                let s = g.param(p, "s")?;
                let out = op(g, x, y, s)?;
                weighted_sum(g, out, 100 + i as u64)
            });
            case(name, &p, f)
        })
        .collect()
}

fn layers() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();

    let p = params(&[("x", &[5], 1.0), ("w", &[3, 5], 0.5), ("b", &[3], 0.5)], 21);
    out.push(case(
        "linear",
        &p,
        Box::new(|g, p| {
            let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
            let y = g.linear(x, w, b)?;
            weighted_sum(g, y, 1)
        }),
    ));

    for (name, stride, pad) in [("conv2d_s2_p1", 2, 1), ("conv2d_s1_p0", 1, 0)] {
        let p = params(&[("x", &[2, 7, 6], 1.0), ("w", &[3, 2, 3, 3], 0.4), ("b", &[3], 0.4)], 22);
        out.push(case(
            name,
            &p,
            Box::new(move |g, p| {
                let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
                let y = g.conv2d(x, w, b, stride, pad)?;
                weighted_sum(g, y, 2)
            }),
        ));
    }

    for (name, stride) in [("conv3d_s122_p1", [1, 2, 2]), ("conv3d_s222_p1", [2, 2, 2])] {
        let p = params(&[("x", &[2, 5, 6, 5], 1.0), ("w", &[2, 2, 3, 3, 3], 0.3), ("b", &[2], 0.3)], 23);
        out.push(case(
            name,
            &p,
            Box::new(move |g, p| {
                let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
                let y = g.conv3d(x, w, b, stride, [1, 1, 1])?;
                weighted_sum(g, y, 3)
            }),
        ));
    }

    type Pool = fn(&mut Graph<f64>, NodeId) -> Result<NodeId>;
    let pools: [(&str, Pool); 3] = [
        ("global_avg_pool", |g, x| g.global_avg_pool(x)),
        ("global_std_pool", |g, x| g.global_std_pool(x)),
        ("avg_std_pool", |g, x| g.avg_std_pool(x)),
    ];
    for (name, pool) in pools {
        let p = params(&[("x", &[3, 4, 5], 1.0)], 24);
        out.push(case(
            name,
            &p,
            Box::new(move |g, p| {
                let x = g.param(p, "x")?;
                let y = pool(g, x)?;
                weighted_sum(g, y, 4)
            }),
        ));
    }
    out
}

fn backbones() -> Vec<(String, GradReport)> {
    let kinds: [(&str, ConvBackbone, Vec<usize>); 3] = [
        ("image_encoder", ConvBackbone::image_encoder("enc", &[3, 4, 6, 8]).unwrap(), vec![3, 12, 10]),
        ("subband_cnn", ConvBackbone::subband_cnn("sub", &[3, 4, 5]).unwrap(), vec![3, 12, 10]),
        ("temporal_cnn", ConvBackbone::temporal_cnn("tmp", &[3, 3, 4]).unwrap(), vec![3, 6, 8, 8]),
    ];
    kinds
        .into_iter()
        .enumerate()
        .map(|(i, (name, bb, shape))| {
            let mut r = rng(30 + i as u64);
            let mut p = ParamSet::new();
            bb.init_params(&mut p, &mut r);
            randomize(&mut p, &mut r);
            p.insert("x", random_tensor(&mut r, &shape, 1.0));
            let f: LossFn = Box::new(move |g, p| {
                let x = g.param(p, "x")?;
                let y = bb.forward(g, p, x)?;
                weighted_sum(g, y, 5)
            });
            case(name, &p, f)
        })
        .collect()
}

fn heads() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    let base = MlpHead::new("head", 6, 5, 1).unwrap();
    let rect = MlpHead::new("rect", 6, 5, 2).unwrap();
    let mut r = rng(40);
    let mut p = ParamSet::new();
    base.init_params(&mut p, &mut r);
    rect.init_params(&mut p, &mut r);
    randomize(&mut p, &mut r);
    p.insert("x", random_tensor(&mut r, &[6], 1.0));

    let b = base.clone();
    out.push(case(
        "base_head",
        &p,
        Box::new(move |g, p| {
            let x = g.param(p, "x")?;
            let y = b.forward(g, p, x)?;
            weighted_sum(g, y, 6)
        }),
    ));
    // The rectifier head through its (alpha, beta) mapping and the affine correction.
    let (b, h) = (base.clone(), rect.clone());
    out.push(case(
        "rectifier_head",
        &p,
        Box::new(move |g, p| {
            let x = g.param(p, "x")?;
            let q = b.forward(g, p, x)?;
            let raw = h.forward(g, p, x)?;
            let r = rectifier_nodes(g, raw)?;
            apply_nodes(g, q, r)
        }),
    ));
    let (b, h) = (base, rect);
    out.push(case(
        "combined_rectifiers",
        &p,
        Box::new(move |g, p| {
            let x = g.param(p, "x")?;
            let q = b.forward(g, p, x)?;
            let raw = h.forward(g, p, x)?;
            let s = rectifier_nodes(g, raw)?;
            let x2 = g.scale(x, -0.6);
            let raw2 = h.forward(g, p, x2)?;
            let t = rectifier_nodes(g, raw2)?;
            combine_nodes(g, q, Some(s), Some(t))
        }),
    ));
    out
}

fn loss() -> (String, GradReport) {
    let mut r = rng(50);
    let mos: Vec<f64> = (0..7).map(|_| r.gen()).collect();
    let p = params(&[("pred", &[7], 1.0)], 51);
    case("plcc_loss", &p, Box::new(move |g, p| {
        let x = g.param(p, "pred")?;
        plcc_loss_nodes(g, x, &mos)
    }))
}

/// Small configuration with every branch present.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        m_keyframes: 2,
        k_levels: 2,
        rho_mode: RhoMode::Geometric,
        base_size: 8,
        chunk_len: 4,
        hv: 8,
        wv: 8,
        hidden_dim: 4,
        encoder_channels: vec![3, 3, 4],
        subband_channels: vec![3, 2],
        temporal_channels: vec![3, 2, 3],
    }
}

pub fn tiny_video(seed: u64) -> VideoTensor {
    let mut r = rng(seed);
    let frames = (0..8).map(|_| random_image(&mut r, 3, 12, 16)).collect();
    VideoTensor::new(frames, 30.0, "clip", "scene").unwrap()
}

fn full_model() -> (String, GradReport) {
    let config = tiny_model_config();
    let arch = Architecture::new(&config).unwrap();
    let mut r = rng(60);
    let mut p: ParamSet<f64> = arch.init_params(&mut r);
    randomize(&mut p, &mut r);
    // Keep the base score away from zero so q_st depends on every alpha.
    p.get_mut("base.head.fc1.bias").unwrap().data_mut()[0] = 0.8;
    let inputs = ClipInputs::prepare(&tiny_video(61), &config).unwrap();
    let crops = vec![(0, 2); config.m_keyframes];
    case("full_q_st", &p, Box::new(move |g, p| {
        let nodes = arch.clip_nodes(g, p, &inputs, &crops, config.base_size, true, true)?;
        Ok(nodes.q_st)
    }))
}

/// Every case, named.
pub fn all() -> Vec<(String, GradReport)> {
    let mut v = elementwise();
    v.extend(layers());
    v.extend(backbones());
    v.extend(heads());
    v.push(loss());
    v.push(full_model());
    v
}
