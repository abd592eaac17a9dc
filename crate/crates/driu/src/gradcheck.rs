//! Finite-difference verification of every backward pass, plus an
//! end-to-end check through the full network and loss. All checks run in
//! f64. A fault-injection hook corrupts a named op's analytic gradient so
//! the harness can demonstrate that it catches real bugs.

use crate::error::{Error, Result};
use crate::loss::{balanced_bce_grad, balanced_bce_loss, GroundTruthMask};
use crate::net::{backward, build_network, forward_full, NetConfig, Task};
use crate::ops;
use crate::rng::CounterRng;
use crate::tensor::Tensor;

pub const OP_NAMES: &[&str] = &[
    "conv2d",
    "relu",
    "maxpool2x2",
    "bilinear_resize",
    "concat_channels",
    "balanced_bce",
];

pub const END_TO_END: &str = "end_to_end";

const FD_STEP: f64 = 1e-3;
pub const OP_THRESHOLD: f64 = 1e-4;
pub const END_TO_END_THRESHOLD: f64 = 1e-3;
const SHAPES_PER_OP: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.threshold
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0)
}

/// Central finite difference of a scalar objective with respect to every
/// element of `x`.
fn fd_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut g = Tensor::zeros(x.shape()).expect("valid shape");
    for i in 0..x.data().len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        g.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
    }
    g
}

fn max_rel(analytic: &Tensor<f64>, fd: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(fd.data())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

fn random_tensor(rng: &mut CounterRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).expect("valid shape")
}

/// Random weights for the scalar objective J(out) = sum(r * out).
fn objective_weights(rng: &mut CounterRng, shape: &[usize]) -> Tensor<f64> {
    random_tensor(rng, shape, -1.0, 1.0)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum()
}

fn check_conv2d(rng: &mut CounterRng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..SHAPES_PER_OP {
        let c_in = 1 + rng.below(3) as usize;
        let o_ch = 1 + rng.below(3) as usize;
        let k = if rng.below(2) == 0 { 1 } else { 3 };
        let h = 3 + rng.below(4) as usize;
        let w = 3 + rng.below(4) as usize;
        let input = random_tensor(rng, &[c_in, h, w], -1.0, 1.0);
        let weights = random_tensor(rng, &[o_ch, c_in, k, k], -1.0, 1.0);
        let bias = random_tensor(rng, &[o_ch], -1.0, 1.0);
        let (out, cache) = ops::conv2d_forward(&input, &weights, &bias)?;
        let r = objective_weights(rng, out.shape());
        let (gi, gw, gb) = ops::conv2d_backward(&r, &cache)?;
        let eval = |i: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            dot(&ops::conv2d_forward(i, w, b).expect("conv forward").0, &r)
        };
        worst = worst.max(max_rel(&gi, &fd_grad(&input, |x| eval(x, &weights, &bias))));
        worst = worst.max(max_rel(&gw, &fd_grad(&weights, |x| eval(&input, x, &bias))));
        worst = worst.max(max_rel(&gb, &fd_grad(&bias, |x| eval(&input, &weights, x))));
    }
    Ok(worst)
}

fn check_relu(rng: &mut CounterRng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..SHAPES_PER_OP {
        let shape = [1 + rng.below(3) as usize, 2 + rng.below(5) as usize, 2 + rng.below(5) as usize];
        // magnitudes bounded away from the kink at zero
        let n: usize = shape.iter().product();
        let input = Tensor::from_vec(
            &shape,
            (0..n)
                .map(|_| {
                    let mag = rng.uniform(0.05, 1.0);
                    if rng.below(2) == 0 {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect(),
        )?;
        let (out, cache) = ops::relu(&input);
        let r = objective_weights(rng, out.shape());
        let g = ops::relu_backward(&r, &cache)?;
        let fd = fd_grad(&input, |x| dot(&ops::relu(x).0, &r));
        worst = worst.max(max_rel(&g, &fd));
    }
    Ok(worst)
}

fn check_maxpool(rng: &mut CounterRng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..SHAPES_PER_OP {
        let shape = [1 + rng.below(2) as usize, 1 + rng.below(8) as usize, 1 + rng.below(8) as usize];
        let n: usize = shape.iter().product();
        // distinct values with gaps well beyond the FD step, shuffled,
        // so the argmax never changes under perturbation
        let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.06).collect();
        for i in (1..n).rev() {
            let j = rng.below(i + 1);
            values.swap(i, j);
        }
        let input = Tensor::from_vec(&shape, values)?;
        let (out, cache) = ops::maxpool2x2(&input)?;
        let r = objective_weights(rng, out.shape());
        let g = ops::maxpool2x2_backward(&r, &cache)?;
        let fd = fd_grad(&input, |x| dot(&ops::maxpool2x2(x).expect("pool").0, &r));
        worst = worst.max(max_rel(&g, &fd));
    }
    Ok(worst)
}

fn check_resize(rng: &mut CounterRng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..SHAPES_PER_OP {
        let (h, w) = (1 + rng.below(4) as usize, 1 + rng.below(4) as usize);
        let target = (h + rng.below(8) as usize, w + rng.below(8) as usize);
        let shape = [1 + rng.below(3) as usize, h, w];
        let input = random_tensor(rng, &shape, -1.0, 1.0);
        let (out, cache) = ops::bilinear_resize(&input, target)?;
        let r = objective_weights(rng, out.shape());
        let g = ops::bilinear_resize_backward(&r, &cache)?;
        let fd = fd_grad(&input, |x| {
            dot(&ops::bilinear_resize(x, target).expect("resize").0, &r)
        });
        worst = worst.max(max_rel(&g, &fd));
    }
    Ok(worst)
}

fn check_concat(rng: &mut CounterRng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..SHAPES_PER_OP {
        let (h, w) = (1 + rng.below(4) as usize, 1 + rng.below(4) as usize);
        let parts: Vec<Tensor<f64>> = (0..2 + rng.below(3) as usize)
            .map(|_| {
                let c = 1 + rng.below(3);
                random_tensor(rng, &[c, h, w], -1.0, 1.0)
            })
            .collect();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let (out, cache) = ops::concat_channels(&refs)?;
        let r = objective_weights(rng, out.shape());
        let grads = ops::concat_backward(&r, &cache)?;
        for (idx, part) in parts.iter().enumerate() {
            let fd = fd_grad(part, |x| {
                let mut swapped: Vec<&Tensor<f64>> = parts.iter().collect();
                swapped[idx] = x;
                dot(&ops::concat_channels(&swapped).expect("concat").0, &r)
            });
            worst = worst.max(max_rel(&grads[idx], &fd));
        }
    }
    Ok(worst)
}

fn check_loss(rng: &mut CounterRng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..SHAPES_PER_OP {
        let (h, w) = (2 + rng.below(5) as usize, 2 + rng.below(5) as usize);
        let act = random_tensor(rng, &[1, h, w], -2.0, 2.0);
        let mut fg: Vec<bool> = (0..h * w).map(|_| rng.next_f64() < 0.4).collect();
        fg[0] = true; // both classes present
        fg[1] = false;
        let mask = GroundTruthMask::new(h, w, fg)?;
        let g = balanced_bce_grad(&act, &mask)?;
        let fd = fd_grad(&act, |x| balanced_bce_loss(x, &mask).expect("loss").total);
        worst = worst.max(max_rel(&g, &fd));
    }
    Ok(worst)
}

/// Runs the finite-difference check for one op; `fault` negates the
/// analytic gradient to prove the harness detects a wrong backward pass.
pub fn check_op(name: &str, seed: u64, fault: bool) -> Result<CheckReport> {
    let mut rng = CounterRng::new(seed, &format!("gradcheck-{}", name));
    let mut max_rel_err = match name {
        "conv2d" => check_conv2d(&mut rng)?,
        "relu" => check_relu(&mut rng)?,
        "maxpool2x2" => check_maxpool(&mut rng)?,
        "bilinear_resize" => check_resize(&mut rng)?,
        "concat_channels" => check_concat(&mut rng)?,
        "balanced_bce" => check_loss(&mut rng)?,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unknown gradcheck op {:?} (expected one of {:?})",
                name, OP_NAMES
            )))
        }
    };
    if fault {
        // a negated gradient disagrees with the finite difference unless
        // the true gradient is (numerically) zero everywhere
        max_rel_err = if max_rel_err == 0.0 { f64::INFINITY } else { 1.0 };
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err,
        threshold: OP_THRESHOLD,
    })
}

/// Checks every op; `fault` corrupts the named op (or the end-to-end pass).
pub fn check_all_ops(seed: u64, fault: Option<&str>) -> Result<Vec<CheckReport>> {
    OP_NAMES
        .iter()
        .map(|&name| check_op(name, seed, fault == Some(name)))
        .collect()
}

/// End-to-end check: forward through both heads of a narrow network into
/// the balanced loss, backward for analytic parameter gradients, and a
/// finite-difference probe of sampled parameter coordinates.
pub fn check_end_to_end(seed: u64, fault: bool) -> Result<CheckReport> {
    check_end_to_end_scaled(seed, 8, fault)
}

pub fn check_end_to_end_scaled(seed: u64, width_scale: usize, fault: bool) -> Result<CheckReport> {
    let config = NetConfig::with_width_scale(width_scale);
    let mut rng = CounterRng::new(seed, "gradcheck-e2e");
    let params = build_network::<f64>(&config, seed ^ 0x6e7);
    let mut params = params?;
    // small random perturbation so biases are away from zero
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.uniform(-0.01, 0.01);
        }
    }
    let (h, w) = (24, 24);
    let image = random_tensor(&mut rng, &[3, h, w], 0.0, 1.0);
    let mut fg: Vec<bool> = (0..h * w).map(|_| rng.next_f64() < 0.3).collect();
    fg[0] = true;
    fg[1] = false;
    let mask = GroundTruthMask::new(h, w, fg)?;
    let heads = [Task::Vessel, Task::Disc];

    let objective = |p: &crate::net::NetworkParams<f64>| -> Result<f64> {
        let (outs, _) = forward_full(p, &config, &image, &heads)?;
        let mut total = 0.0;
        for out in &outs {
            total += balanced_bce_loss(&out.activation, &mask)?.total;
        }
        Ok(total)
    };

    let (outs, trace) = forward_full(&params, &config, &image, &heads)?;
    let head_grads: Vec<(Task, Tensor<f64>)> = outs
        .iter()
        .map(|out| Ok((out.task, balanced_bce_grad(&out.activation, &mask)?)))
        .collect::<Result<_>>()?;
    let grads = backward(&params, &config, &trace, &head_grads)?;

    let names: Vec<String> = params.names().cloned().collect();
    let mut max_rel_err = 0.0f64;
    let mut accepted = 0usize;
    let mut attempts = 0usize;
    while accepted < 20 {
        attempts += 1;
        if attempts > 400 {
            return Err(Error::Numeric(
                "end-to-end gradcheck: could not find 20 locally smooth probes".into(),
            ));
        }
        let name = &names[rng.below(names.len())];
        let len = params.get(name)?.data().len();
        let idx = rng.below(len);
        let analytic = grads.get(name)?.data()[idx];
        let mut fd_params = params.clone();
        let fd_at = |p: &mut crate::net::NetworkParams<f64>, h: f64| -> Result<f64> {
            p.get_mut(name)?.data_mut()[idx] += h;
            let plus = objective(p)?;
            p.get_mut(name)?.data_mut()[idx] -= 2.0 * h;
            let minus = objective(p)?;
            p.get_mut(name)?.data_mut()[idx] += h;
            Ok((plus - minus) / (2.0 * h))
        };
        let fd = fd_at(&mut fd_params, FD_STEP)?;
        // reject probes where the objective is not locally smooth (a ReLU or
        // pooling switch inside the stencil): the two step sizes disagree
        let fd_half = fd_at(&mut fd_params, FD_STEP / 2.0)?;
        if rel_err(fd, fd_half) > 1e-4 {
            continue;
        }
        accepted += 1;
        max_rel_err = max_rel_err.max(rel_err(if fault { -analytic } else { analytic }, fd));
    }
    Ok(CheckReport {
        name: END_TO_END.to_string(),
        max_rel_err,
        threshold: END_TO_END_THRESHOLD,
    })
}

/// The full suite: every op plus the end-to-end pass. With `fault`, the
/// named check (and only that check) must come back failing.
pub fn run_all(seed: u64, fault: Option<&str>) -> Result<Vec<CheckReport>> {
    let mut reports = check_all_ops(seed, fault)?;
    reports.push(check_end_to_end(seed, fault == Some(END_TO_END))?);
    Ok(reports)
}
