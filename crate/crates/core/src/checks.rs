//! Finite-difference checks of every differentiable tape operation on
//! random seeded inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cdam::{attention_maps, bns_loss, cda_loss, kl_rows, BnStats};
use crate::error::{invalid, Result};
use crate::prototypes::{class_mse, loss_sft, loss_un, pool_on_graph};
use crate::pseudo::PseudoLabel;
use crate::tensor::{grad_check, BnMode, GradCheckReport, Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-3;

pub const OPS: [&str; 36] = [
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "exp",
    "log",
    "square",
    "relu",
    "reshape",
    "transpose",
    "permute",
    "concat",
    "narrow",
    "matmul",
    "sum",
    "mean",
    "sum_axis",
    "mean_axis",
    "softmax",
    "conv2d",
    "conv2d_strided",
    "resize_nearest",
    "resize_bilinear",
    "avg_pool",
    "batch_norm_train",
    "batch_norm_eval",
    "cross_entropy",
    "masked_mean",
    "class_mse",
    "loss_un",
    "loss_sft",
    "bns_loss",
    "kl_rows",
    "cda_loss",
];

type Body = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero, for kinks and divisions.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v: f32 = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize, ignore: bool) -> Vec<u16> {
    let hi = if ignore { k + 1 } else { k };
    let mut v: Vec<u16> = (0..n).map(|_| rng.random_range(0..hi) as u16).collect();
    v[0] = 0;
    v
}

fn pseudo(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> PseudoLabel {
    PseudoLabel::new(h, w, k, labels(rng, h * w, k, true)).expect("labels within range")
}

struct Case {
    shapes: Vec<Vec<usize>>,
    values: Vec<f32>,
    body: Body,
}

impl Case {
    fn new(inputs: Vec<(Vec<usize>, Vec<f32>)>, body: Body) -> Self {
        let mut shapes = Vec::new();
        let mut values = Vec::new();
        for (s, v) in inputs {
            debug_assert_eq!(s.iter().product::<usize>(), v.len());
            shapes.push(s);
            values.extend(v);
        }
        Self { shapes, values, body }
    }
}

fn build(name: &str, rng: &mut ChaCha8Rng) -> Result<Case> {
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| (s.to_vec(), rand_vec(rng, s.iter().product(), -1.0, 1.0));
    let nz = |rng: &mut ChaCha8Rng, s: &[usize]| (s.to_vec(), away_from_zero(rng, s.iter().product()));
    let pos = |rng: &mut ChaCha8Rng, s: &[usize]| (s.to_vec(), rand_vec(rng, s.iter().product(), 0.2, 2.0));
    let case = match name {
        "add" => Case::new(vec![r(rng, &[3, 4]), r(rng, &[3, 4])], Box::new(|g, v| g.add(v[0], v[1]))),
        "sub" => Case::new(vec![r(rng, &[3, 4]), r(rng, &[3, 4])], Box::new(|g, v| g.sub(v[0], v[1]))),
        "mul" => Case::new(vec![r(rng, &[3, 4]), r(rng, &[3, 4])], Box::new(|g, v| g.mul(v[0], v[1]))),
        "div" => Case::new(vec![r(rng, &[3, 4]), nz(rng, &[3, 4])], Box::new(|g, v| g.div(v[0], v[1]))),
        "scale" => {
            let s = rng.random_range(-2.0..2.0);
            Case::new(vec![r(rng, &[5])], Box::new(move |g, v| Ok(g.scale(v[0], s))))
        }
        "add_scalar" => Case::new(vec![r(rng, &[5])], Box::new(|g, v| Ok(g.add_scalar(v[0], 0.7)))),
        "exp" => Case::new(vec![r(rng, &[6])], Box::new(|g, v| Ok(g.exp(v[0])))),
        "log" => Case::new(vec![pos(rng, &[6])], Box::new(|g, v| Ok(g.log(v[0])))),
        "square" => Case::new(vec![r(rng, &[6])], Box::new(|g, v| Ok(g.square(v[0])))),
        "relu" => Case::new(vec![nz(rng, &[8])], Box::new(|g, v| Ok(g.relu(v[0])))),
        "reshape" => Case::new(vec![r(rng, &[2, 6])], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        "transpose" => Case::new(vec![r(rng, &[3, 4])], Box::new(|g, v| g.transpose(v[0]))),
        "permute" => Case::new(vec![r(rng, &[2, 3, 4])], Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        "concat" => Case::new(
            vec![r(rng, &[2, 3]), r(rng, &[2, 2])],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
        ),
        "narrow" => Case::new(vec![r(rng, &[4, 5])], Box::new(|g, v| g.narrow(v[0], 1, 1, 3))),
        "matmul" => Case::new(vec![r(rng, &[3, 4]), r(rng, &[4, 2])], Box::new(|g, v| g.matmul(v[0], v[1]))),
        "sum" => Case::new(vec![r(rng, &[3, 4])], Box::new(|g, v| Ok(g.sum(v[0])))),
        "mean" => Case::new(vec![r(rng, &[3, 4])], Box::new(|g, v| g.mean(v[0]))),
        "sum_axis" => Case::new(vec![r(rng, &[2, 3, 4])], Box::new(|g, v| g.sum_axis(v[0], 1))),
        "mean_axis" => Case::new(vec![r(rng, &[2, 3, 4])], Box::new(|g, v| g.mean_axis(v[0], 2))),
        "softmax" => Case::new(vec![r(rng, &[3, 5])], Box::new(|g, v| g.softmax(v[0]))),
        "conv2d" => Case::new(
            vec![r(rng, &[2, 2, 5, 5]), r(rng, &[3, 2, 3, 3]), r(rng, &[3])],
            Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        ),
        "conv2d_strided" => Case::new(
            vec![r(rng, &[1, 2, 6, 6]), r(rng, &[2, 2, 3, 3])],
            Box::new(|g, v| g.conv2d(v[0], v[1], None, 2, 1)),
        ),
        "resize_nearest" => Case::new(vec![r(rng, &[1, 2, 3, 4])], Box::new(|g, v| g.resize_nearest(v[0], 5, 7))),
        "resize_bilinear" => Case::new(vec![r(rng, &[1, 2, 3, 4])], Box::new(|g, v| g.resize_bilinear(v[0], 7, 6))),
        "avg_pool" => Case::new(vec![r(rng, &[1, 2, 4, 6])], Box::new(|g, v| g.avg_pool(v[0], 2, 3))),
        "batch_norm_train" => Case::new(
            vec![r(rng, &[3, 2, 3, 3]), pos(rng, &[2]), r(rng, &[2])],
            Box::new(|g, v| Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Train)?.y)),
        ),
        "batch_norm_eval" => {
            let mean = rand_vec(rng, 2, -0.5, 0.5);
            let var = rand_vec(rng, 2, 0.5, 2.0);
            Case::new(
                vec![r(rng, &[2, 2, 3, 3]), pos(rng, &[2]), r(rng, &[2])],
                Box::new(move |g, v| {
                    Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var })?.y)
                }),
            )
        }
        "cross_entropy" => {
            let t = labels(rng, 2 * 3 * 4, 4, true);
            Case::new(
                vec![r(rng, &[2, 4, 3, 4])],
                Box::new(move |g, v| g.cross_entropy(v[0], &t, 4)),
            )
        }
        "masked_mean" => {
            let t = labels(rng, 10, 3, true);
            Case::new(vec![r(rng, &[4, 10])], Box::new(move |g, v| Ok(g.masked_mean(v[0], &t, 3)?.0)))
        }
        "class_mse" => Case::new(
            vec![r(rng, &[4, 3]), r(rng, &[4, 3])],
            Box::new(|g, v| class_mse(g, v[0], v[1], &[0, 2, 3])),
        ),
        "loss_un" => {
            let con = pseudo(rng, 4, 4, 3);
            let un = pseudo(rng, 4, 4, 3);
            // the confident side is a stop-gradient target, so it stays off the probe
            let fixed = Tensor::new(vec![1, 5, 2, 2], rand_vec(rng, 20, -1.0, 1.0))?;
            Case::new(
                vec![r(rng, &[1, 5, 2, 2])],
                Box::new(move |g, v| {
                    let fc = g.constant(&fixed);
                    let a = pool_on_graph(g, fc, &[&con])?;
                    let b = pool_on_graph(g, v[0], &[&un])?;
                    loss_un(g, &a, &b)
                }),
            )
        }
        "loss_sft" => {
            let ls: Vec<PseudoLabel> = (0..3).map(|_| pseudo(rng, 4, 2, 3)).collect();
            Case::new(
                vec![r(rng, &[3, 4, 2, 1])],
                Box::new(move |g, v| {
                    let sets = (0..3)
                        .map(|i| {
                            let f = g.narrow(v[0], 0, i, 1)?;
                            pool_on_graph(g, f, &[&ls[i]])
                        })
                        .collect::<Result<Vec<_>>>()?;
                    loss_sft(g, &sets)
                }),
            )
        }
        "bns_loss" => {
            let stats = BnStats::new(rand_vec(rng, 3, -0.5, 0.5), rand_vec(rng, 3, 0.5, 1.5))?;
            Case::new(
                vec![r(rng, &[2, 3, 2, 3]), r(rng, &[2, 3, 2, 3])],
                Box::new(move |g, v| bns_loss(g, v[0], v[1], &stats)),
            )
        }
        "kl_rows" => Case::new(
            vec![r(rng, &[3, 4]), r(rng, &[3, 4])],
            Box::new(|g, v| {
                let p = g.softmax(v[0])?;
                let q = g.softmax(v[1])?;
                kl_rows(g, p, q)
            }),
        ),
        "cda_loss" => Case::new(
            vec![r(rng, &[5, 3]), r(rng, &[5, 3])],
            Box::new(|g, v| {
                let maps = attention_maps(g, v[0], v[1])?;
                cda_loss(g, &maps)
            }),
        ),
        _ => return Err(invalid(format!("no gradient check named '{name}'"))),
    };
    Ok(case)
}

/// Gradient check of one operation on inputs drawn from `seed`. Non-scalar
/// outputs are contracted with fixed random weights.
pub fn check_op(name: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c4e_c4ec);
    let case = build(name, &mut rng)?;
    let total = case.values.len();
    let shapes = case.shapes.clone();
    let mut weight_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let weights: Vec<f32> = rand_vec(&mut weight_rng, 4096, -1.0, 1.0);
    let body = case.body;
    let f = move |g: &mut Graph, x: Var| -> Result<Var> {
        let mut parts = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for s in &shapes {
            let n: usize = s.iter().product();
            let piece = g.narrow(x, 0, off, n)?;
            parts.push(g.reshape(piece, s)?);
            off += n;
        }
        let y = body(g, &parts)?;
        let shape = g.shape(y).to_vec();
        let n: usize = shape.iter().product();
        if n == 1 {
            return g.reshape(y, &[1]);
        }
        let w = g.constant(&Tensor::new(shape, weights[..n].to_vec())?);
        let prod = g.mul(y, w)?;
        Ok(g.sum(prod))
    };
    let point = Tensor::new(vec![total], case.values)?;
    grad_check(f, &point, FD_STEP, REL_TOL)
}
