//! Finite-difference verification of analytic gradients.
//!
//! Central differences with step `h = 1e-5` approximate d(loss)/d(input) one
//! element at a time; the analytic gradient from one backward pass must agree
//! within relative error `|g - g_fd| / max(1, |g|, |g_fd|) < 1e-4`. The
//! built-in suite re-derives the gradient of every graph op from nothing but
//! forward evaluations, so a broken backward rule cannot hide behind its own
//! arithmetic.

use alloc::vec::Vec;

use rand_core::RngCore;

use crate::error::{Error, Result};
use crate::graph::{Graph, SampleMode, Var};
use crate::nn::uniform;
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Per-op relative error bound.
pub const FD_TOL: f64 = 1e-4;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct FdResult {
    pub op: &'static str,
    pub max_rel: f64,
}

impl FdResult {
    pub fn passed(&self) -> bool {
        self.max_rel < FD_TOL
    }
}

/// Relative error with a unit floor, so tiny gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = 1.0_f64.max(a.abs()).max(b.abs());
    (a - b).abs() / scale
}

/// Worst relative error between analytic and finite-difference gradients of
/// `build` over every element of every input. `build` must construct the same
/// scalar loss each call; all inputs are treated as differentiable leaves.
pub fn fd_max_rel<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars)?;
        g.value(loss).item()
    };

    // Analytic gradients from one backward pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    if g.value(loss).len() != 1 {
        return Err(Error::shape("fd_check", "build must return a scalar loss"));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], fd));
        }
    }
    Ok(worst)
}

fn rand_tensor(rng: &mut impl RngCore, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| uniform(rng, lo, hi)).collect();
    Tensor::new(shape, data).expect("valid random tensor shape")
}

/// Random tensor bounded away from zero, for kinked ops and denominators.
fn rand_tensor_signed_gap(rng: &mut impl RngCore, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = uniform(rng, lo, hi);
            if uniform(rng, 0.0, 1.0) < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("valid random tensor shape")
}

/// Weighted scalarization: `sum(out * w)` with fixed weights, so every output
/// element feeds the loss with a distinct coefficient.
fn weighted_sum(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv)?;
    Ok(g.sum_all(prod))
}

fn weights_for(rng: &mut impl RngCore, shape: &[usize]) -> Tensor {
    rand_tensor(rng, shape, -1.0, 1.0)
}

/// Runs the finite-difference suite over every graph op and returns one
/// result per op. Deterministic in `seed`.
#[allow(clippy::too_many_lines)]
pub fn run_op_suite(seed: u64) -> Result<Vec<FdResult>> {
    use rand_core::SeedableRng;
    let rng = &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut record = |op: &'static str, max_rel: f64| {
        results.push(FdResult { op, max_rel });
    };

    {
        let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(rng, &[4, 2], -1.0, 1.0);
        let w = weights_for(rng, &[3, 2]);
        let max = fd_max_rel(&[a, b], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, &w)
        })?;
        record("matmul", max);
    }
    {
        let x = rand_tensor(rng, &[2, 5, 6], -1.0, 1.0);
        let k = rand_tensor(rng, &[3, 2, 3, 3], -0.7, 0.7);
        let b = rand_tensor(rng, &[3], -0.5, 0.5);
        let w = weights_for(rng, &[3, 3, 3]);
        let max = fd_max_rel(&[x, k, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            weighted_sum(g, y, &w)
        })?;
        record("conv2d", max);
    }
    {
        let x = rand_tensor(rng, &[2, 2, 4, 5], -1.0, 1.0);
        let k = rand_tensor(rng, &[3, 2, 3, 3], -0.7, 0.7);
        let w = weights_for(rng, &[2, 3, 4, 5]);
        let max = fd_max_rel(&[x, k], |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 1)?;
            weighted_sum(g, y, &w)
        })?;
        record("conv2d_batched", max);
    }
    {
        let x = rand_tensor(rng, &[2, 3, 4], -2.0, 2.0);
        let w = weights_for(rng, &[2, 3, 4]);
        let max = fd_max_rel(&[x], |g, v| {
            let y = g.softmax(v[0], 1)?;
            weighted_sum(g, y, &w)
        })?;
        record("softmax_axis1", max);
    }
    {
        let x = rand_tensor(rng, &[2, 3, 4], -2.0, 2.0);
        let w = weights_for(rng, &[2, 3, 4]);
        let max = fd_max_rel(&[x], |g, v| {
            let y = g.softmax(v[0], 2)?;
            weighted_sum(g, y, &w)
        })?;
        record("softmax_axis2", max);
    }
    {
        let x = rand_tensor(rng, &[3, 5], -1.5, 1.5);
        let gamma = rand_tensor(rng, &[5], 0.5, 1.5);
        let beta = rand_tensor(rng, &[5], -0.5, 0.5);
        let w = weights_for(rng, &[3, 5]);
        let max = fd_max_rel(&[x, gamma, beta], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(g, y, &w)
        })?;
        record("layer_norm", max);
    }
    {
        let a = rand_tensor(rng, &[2, 3], -1.0, 1.0);
        let b = rand_tensor(rng, &[2, 3], -1.0, 1.0);
        let w = weights_for(rng, &[2, 3]);
        for (op, f) in [
            ("add", Graph::add as fn(&mut Graph, Var, Var) -> Result<Var>),
            ("sub", Graph::sub),
            ("mul", Graph::mul),
        ] {
            let max = fd_max_rel(&[a.clone(), b.clone()], |g, v| {
                let y = f(g, v[0], v[1])?;
                weighted_sum(g, y, &w)
            })?;
            record(op, max);
        }
    }
    {
        let a = rand_tensor(rng, &[2, 3], -1.0, 1.0);
        let b = rand_tensor_signed_gap(rng, &[2, 3], 0.5, 1.5);
        let w = weights_for(rng, &[2, 3]);
        let max = fd_max_rel(&[a, b], |g, v| {
            let y = g.div(v[0], v[1])?;
            weighted_sum(g, y, &w)
        })?;
        record("div", max);
    }
    {
        // Operands never tie and each side wins somewhere, so both gradient
        // routes are exercised and the selection is stable under FD.
        let a = rand_tensor(rng, &[3, 3], -1.0, 1.0);
        let offset: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if i % 2 == 0 { x + 0.8 } else { x - 0.8 })
            .collect();
        let b = Tensor::new(&[3, 3], offset).unwrap();
        let w = weights_for(rng, &[3, 3]);
        for (op, f) in [
            ("min_elem", Graph::min_elem as fn(&mut Graph, Var, Var) -> Result<Var>),
            ("max_elem", Graph::max_elem),
        ] {
            let max = fd_max_rel(&[a.clone(), b.clone()], |g, v| {
                let y = f(g, v[0], v[1])?;
                weighted_sum(g, y, &w)
            })?;
            record(op, max);
        }
    }
    {
        let x = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(rng, &[4], -1.0, 1.0);
        let w = weights_for(rng, &[3, 4]);
        let max = fd_max_rel(&[x, b], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            weighted_sum(g, y, &w)
        })?;
        record("add_row", max);
    }
    {
        let smooth = rand_tensor(rng, &[2, 3], -2.0, 2.0);
        let gapped = rand_tensor_signed_gap(rng, &[2, 3], 0.3, 1.5);
        let w = weights_for(rng, &[2, 3]);
        type Unary = fn(&mut Graph, Var) -> Var;
        let cases: [(&'static str, Unary, &Tensor); 6] = [
            ("sigmoid", |g, x| g.sigmoid(x), &smooth),
            ("relu", |g, x| g.relu(x), &gapped),
            ("softplus", |g, x| g.softplus(x), &smooth),
            ("abs", |g, x| g.abs(x), &gapped),
            ("sin", |g, x| g.sin(x), &smooth),
            ("cos", |g, x| g.cos(x), &smooth),
        ];
        for (op, f, input) in cases {
            let max = fd_max_rel(core::slice::from_ref(input), |g, v| {
                let y = f(g, v[0]);
                weighted_sum(g, y, &w)
            })?;
            record(op, max);
        }
    }
    {
        let x = rand_tensor(rng, &[2, 3], 0.3, 1.8);
        let w = weights_for(rng, &[2, 3]);
        let max = fd_max_rel(&[x], |g, v| {
            let y = g.pow_const(v[0], 1.7);
            weighted_sum(g, y, &w)
        })?;
        record("pow_const", max);
    }
    {
        let x = rand_tensor(rng, &[2, 3], -1.0, 1.0);
        let w = weights_for(rng, &[2, 3]);
        let max = fd_max_rel(&[x], |g, v| {
            let y = g.affine(v[0], -1.3, 0.4);
            weighted_sum(g, y, &w)
        })?;
        record("affine", max);
    }
    {
        let a = rand_tensor(rng, &[2, 2], -1.0, 1.0);
        let b = rand_tensor(rng, &[2, 3], -1.0, 1.0);
        let w = weights_for(rng, &[2, 5]);
        let max = fd_max_rel(&[a, b], |g, v| {
            let y = g.concat(1, &[v[0], v[1]])?;
            weighted_sum(g, y, &w)
        })?;
        record("concat", max);
    }
    {
        let x = rand_tensor(rng, &[3, 5], -1.0, 1.0);
        let w = weights_for(rng, &[3, 3]);
        let max = fd_max_rel(&[x], |g, v| {
            let y = g.slice(v[0], 1, 1, 3)?;
            weighted_sum(g, y, &w)
        })?;
        record("slice", max);
    }
    {
        let x = rand_tensor(rng, &[2, 6], -1.0, 1.0);
        let w = weights_for(rng, &[3, 4]);
        let max = fd_max_rel(&[x], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            weighted_sum(g, y, &w)
        })?;
        record("reshape", max);
    }
    {
        let x = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = weights_for(rng, &[4, 3]);
        let max = fd_max_rel(&[x], |g, v| {
            let y = g.transpose(v[0])?;
            weighted_sum(g, y, &w)
        })?;
        record("transpose", max);
    }
    {
        let x = rand_tensor(rng, &[2, 3, 4], -1.0, 1.0);
        let w = weights_for(rng, &[4, 2, 3]);
        let max = fd_max_rel(&[x], |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            weighted_sum(g, y, &w)
        })?;
        record("permute", max);
    }
    {
        let x = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = weights_for(rng, &[4]);
        let max = fd_max_rel(&[x], |g, v| {
            let y = g.reduce_sum(v[0], 0)?;
            weighted_sum(g, y, &w)
        })?;
        record("reduce_sum", max);
    }
    {
        let x = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = weights_for(rng, &[3]);
        let max = fd_max_rel(&[x], |g, v| {
            let y = g.reduce_mean(v[0], 1)?;
            weighted_sum(g, y, &w)
        })?;
        record("reduce_mean", max);
    }
    {
        let x = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = weights_for(rng, &[3]);
        let max = fd_max_rel(&[x], |g, v| {
            let y = g.reduce_max(v[0], 1)?;
            weighted_sum(g, y, &w)
        })?;
        record("reduce_max", max);
    }
    {
        let x = rand_tensor(rng, &[2, 3], -1.0, 1.0);
        let max = fd_max_rel(&[x], |g, v| Ok(g.sum_all(v[0])))?;
        record("sum_all", max);
    }
    {
        let x = rand_tensor(rng, &[2, 3], -1.0, 1.0);
        let max = fd_max_rel(&[x], |g, v| Ok(g.mean_all(v[0])))?;
        record("mean_all", max);
    }
    {
        // RoIAlign-style gather: fixed interior stencils on a 4x5x3 map.
        let f = rand_tensor(rng, &[4, 5, 3], -1.0, 1.0);
        let mut stencils = Vec::new();
        for _ in 0..5 {
            let cx = uniform(rng, 0.3, 3.7);
            let cy = uniform(rng, 0.3, 2.7);
            stencils.push(crate::graph::bilinear_stencil(cx, cy, 4, 5, 1.0, 1.0).0);
        }
        let w = weights_for(rng, &[5, 3]);
        let max = fd_max_rel(&[f], |g, v| {
            let y = g.stencil_gather(v[0], stencils.clone(), &[5, 3])?;
            weighted_sum(g, y, &w)
        })?;
        record("stencil_gather", max);
    }
    {
        let grid = rand_tensor(rng, &[2, 3, 3, 4], -1.0, 1.0);
        let pts = rand_tensor(rng, &[2, 2, 2], 0.1, 0.9);
        let w = weights_for(rng, &[2, 2, 4]);
        let max = fd_max_rel(&[grid, pts], |g, v| {
            let y = g.point_sample(v[0], v[1], SampleMode::AlignCorners)?;
            weighted_sum(g, y, &w)
        })?;
        record("point_sample_grid", max);
    }
    {
        let map = rand_tensor(rng, &[4, 5, 2], -1.0, 1.0);
        let pts = rand_tensor(rng, &[1, 3, 2], 0.15, 0.85);
        let w = weights_for(rng, &[1, 3, 2]);
        let max = fd_max_rel(&[map, pts], |g, v| {
            let y = g.point_sample(v[0], v[1], SampleMode::PixelCenter)?;
            weighted_sum(g, y, &w)
        })?;
        record("point_sample_map", max);
    }
    {
        // Two-layer chain: composition exercises scratch-gradient routing.
        let x = rand_tensor(rng, &[2, 4], -1.0, 1.0);
        let w1 = rand_tensor(rng, &[4, 5], -0.7, 0.7);
        let b1 = rand_tensor(rng, &[5], -0.3, 0.3);
        let w2 = rand_tensor(rng, &[5, 3], -0.7, 0.7);
        let w = weights_for(rng, &[2, 3]);
        let max = fd_max_rel(&[x, w1, b1, w2], |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row(h, v[2])?;
            let h = g.relu(h);
            let y = g.matmul(h, v[3])?;
            weighted_sum(g, y, &w)
        })?;
        record("mlp_chain", max);
    }
    Ok(results)
}
