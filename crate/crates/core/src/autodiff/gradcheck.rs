//! Central finite-difference gradient checking.
//!
//! The checked scalar is a fixed random projection `Σ r ⊙ out` of the op
//! output, so every output element contributes. The error of one gradient
//! entry is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnParams, Mode, OpKind, Reduction, Tape, Tensor, Var};
use crate::error::Result;

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
const FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn projected<F>(tape: &mut Tape<f64>, vars: &[Var], build: &F, proj_seed: u64) -> Result<Var>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let out = build(tape, vars)?;
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
    let n: usize = shape.iter().product();
    let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = tape.constant(Tensor::new(&shape, r)?);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

/// Compares analytic and numeric gradients of a projection of `build`'s
/// output with respect to every element of every input. Returns the largest
/// entry error.
pub fn check<F>(inputs: &[Tensor<f64>], build: F, fault: Option<OpKind>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let proj_seed = 0x5eed;
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone(), true)).collect();
        let l = projected(&mut t, &vars, &build, proj_seed)?;
        Ok(t.value(l).item())
    };
    let mut tape = Tape::new();
    tape.inject_fault(fault);
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let loss = projected(&mut tape, &vars, &build, proj_seed)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(*v).unwrap_or(&zeros);
        for e in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[e];
            work[i].data_mut()[e] = x0 + STEP;
            let up = eval(&work)?;
            work[i].data_mut()[e] = x0 - STEP;
            let down = eval(&work)?;
            work[i].data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[e], numeric));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub error: Option<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_err < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so no ReLU kink lies within the step.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

/// Distinct values on a 0.1 grid plus small jitter: no near-ties for max.
fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut levels: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    for i in (1..n).rev() {
        levels.swap(i, rng.gen_range(0..=i));
    }
    for v in &mut levels {
        *v += rng.gen_range(0.0..0.01);
    }
    Tensor::new(shape, levels).unwrap()
}

type Case = Box<dyn Fn(&mut ChaCha8Rng, Option<OpKind>) -> Result<f64>>;

fn cases() -> Vec<(&'static str, Case)> {
    let mut v: Vec<(&'static str, Case)> = Vec::new();
    v.push((
        "linear",
        Box::new(|rng, fault| {
            let (n, din, dout) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
            let ins = [
                uniform(rng, &[n, din]),
                uniform(rng, &[din, dout]),
                uniform(rng, &[dout]),
            ];
            check(&ins, |t, x| t.linear(x[0], x[1], Some(x[2])), fault)
        }),
    ));
    v.push((
        "relu",
        Box::new(|rng, fault| {
            let n = rng.gen_range(1..5);
            let ins = [off_kink(rng, &[n, 3])];
            check(&ins, |t, x| Ok(t.relu(x[0])), fault)
        }),
    ));
    v.push((
        "batchnorm_train",
        Box::new(|rng, fault| {
            let shape = if rng.gen_bool(0.5) {
                vec![rng.gen_range(2..6), rng.gen_range(1..4)]
            } else {
                vec![rng.gen_range(1..3), rng.gen_range(1..3), 2, 3]
            };
            let c = shape[1];
            let ins = [
                uniform(rng, &shape),
                uniform(rng, &[c]),
                uniform(rng, &[c]),
            ];
            check(
                &ins,
                move |t, x| {
                    let (mut rm, mut rv) = (vec![0.0; c], vec![1.0; c]);
                    t.batchnorm(x[0], x[1], x[2], &mut rm, &mut rv, Mode::Train, BnParams::default())
                },
                fault,
            )
        }),
    ));
    v.push((
        "batchnorm_eval",
        Box::new(|rng, fault| {
            let (n, c) = (rng.gen_range(1..5), rng.gen_range(1..4));
            let rm: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let rv: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
            let ins = [uniform(rng, &[n, c]), uniform(rng, &[c]), uniform(rng, &[c])];
            check(
                &ins,
                move |t, x| {
                    let (mut m, mut v) = (rm.clone(), rv.clone());
                    t.batchnorm(x[0], x[1], x[2], &mut m, &mut v, Mode::Eval, BnParams::default())
                },
                fault,
            )
        }),
    ));
    v.push((
        "conv2d",
        Box::new(|rng, fault| {
            let (cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let k = rng.gen_range(1..4);
            let stride = rng.gen_range(1..3);
            let out = rng.gen_range(1..4);
            let mut pad = rng.gen_range(0..2);
            // Input extent chosen so the output extent is integral.
            if (out - 1) * stride + k <= 2 * pad {
                pad = 0;
            }
            let h = (out - 1) * stride + k - 2 * pad;
            let ins = [
                uniform(rng, &[1, cin, h, h]),
                uniform(rng, &[cout, cin, k, k]),
                uniform(rng, &[cout]),
            ];
            check(&ins, move |t, x| t.conv2d(x[0], x[1], Some(x[2]), stride, pad), fault)
        }),
    ));
    v.push((
        "conv_transpose2d",
        Box::new(|rng, fault| {
            let (cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let (k, stride, pad) = [(2, 2, 0), (4, 2, 1), (3, 1, 1), (3, 2, 1)][rng.gen_range(0..4)];
            let (b, h) = (rng.gen_range(1..3), rng.gen_range(1..4));
            let ins = [
                uniform(rng, &[b, cin, h, h]),
                uniform(rng, &[cin, cout, k, k]),
                uniform(rng, &[cout]),
            ];
            check(
                &ins,
                move |t, x| t.conv_transpose2d(x[0], x[1], Some(x[2]), stride, pad),
                fault,
            )
        }),
    ));
    v.push((
        "max_over_neighbors",
        Box::new(|rng, fault| {
            let shape = [rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4)];
            let ins = [well_separated(rng, &shape)];
            check(&ins, |t, x| t.max_over_neighbors(x[0]), fault)
        }),
    ));
    v.push((
        "concat",
        Box::new(|rng, fault| {
            let n = rng.gen_range(1..4);
            let axis = rng.gen_range(0..2);
            let mut shapes = vec![[n, 2], [n, 3], [n, 1]];
            if axis == 0 {
                shapes = vec![[1, 2], [3, 2], [2, 2]];
            }
            let ins: Vec<_> = shapes.iter().map(|s| uniform(rng, s)).collect();
            check(&ins, move |t, x| t.concat(x, axis), fault)
        }),
    ));
    v.push((
        "add",
        Box::new(|rng, fault| {
            let s = [rng.gen_range(1..4), rng.gen_range(1..4)];
            let ins = [uniform(rng, &s), uniform(rng, &s)];
            check(&ins, |t, x| t.add(x[0], x[1]), fault)
        }),
    ));
    v.push((
        "sub",
        Box::new(|rng, fault| {
            let s = [rng.gen_range(1..4), rng.gen_range(1..4)];
            let ins = [uniform(rng, &s), uniform(rng, &s)];
            check(&ins, |t, x| t.sub(x[0], x[1]), fault)
        }),
    ));
    v.push((
        "mul",
        Box::new(|rng, fault| {
            let s = [rng.gen_range(1..4), rng.gen_range(1..4)];
            let ins = [uniform(rng, &s), uniform(rng, &s)];
            check(&ins, |t, x| t.mul(x[0], x[1]), fault)
        }),
    ));
    v.push((
        "gather_rows",
        Box::new(|rng, fault| {
            let n = rng.gen_range(1..5);
            let idx: Vec<usize> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..n)).collect();
            let ins = [uniform(rng, &[n, 2])];
            check(&ins, move |t, x| t.gather_rows(x[0], &idx), fault)
        }),
    ));
    v.push((
        "scatter_pixels",
        Box::new(|rng, fault| {
            let (h, w) = (3, 4);
            let mut pix: Vec<usize> = (0..h * w).collect();
            for i in (1..pix.len()).rev() {
                pix.swap(i, rng.gen_range(0..=i));
            }
            pix.truncate(rng.gen_range(1..6));
            let ins = [uniform(rng, &[pix.len(), 3])];
            check(&ins, move |t, x| t.scatter_pixels(x[0], &pix, h, w), fault)
        }),
    ));
    v.push((
        "mse_masked",
        Box::new(|rng, fault| {
            let groups = rng.gen_range(1..3);
            let n = groups * 6;
            let target: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..4.0)).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
            for g in 0..groups {
                mask[g * 6] = true;
            }
            let red = if rng.gen_bool(0.5) { Reduction::Mean } else { Reduction::Sum };
            let ins = [uniform(rng, &[groups, 1, 2, 3])];
            check(&ins, move |t, x| t.mse_masked(x[0], &target, &mask, groups, red), fault)
        }),
    ));
    v.push((
        "reshape_sum_scale",
        Box::new(|rng, fault| {
            let ins = [uniform(rng, &[2, 3])];
            check(
                &ins,
                |t, x| {
                    let r = t.reshape(x[0], &[3, 2])?;
                    let s = t.scale(r, 1.7);
                    let m = t.mul(s, r)?;
                    Ok(t.sum(m))
                },
                fault,
            )
        }),
    ));
    v.push((
        "shared_parameter",
        Box::new(|rng, fault| {
            // The same input feeds two paths; gradients must add.
            let ins = [uniform(rng, &[2, 2]), uniform(rng, &[2, 2])];
            check(
                &ins,
                |t, x| {
                    let a = t.linear(x[0], x[1], None)?;
                    let b = t.linear(a, x[1], None)?;
                    t.add(a, b)
                },
                fault,
            )
        }),
    ));
    v
}

/// Names of the checks in [`run_op_suite`].
pub fn op_suite_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

/// Runs every op check on `instances` random instances each.
pub fn run_op_suite(instances: usize, seed: u64, fault: Option<OpKind>) -> Vec<CheckOutcome> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64 * 7919));
            let mut worst = 0.0f64;
            let mut error = None;
            for _ in 0..instances {
                match case(&mut rng, fault) {
                    Ok(e) => worst = worst.max(e),
                    Err(e) => {
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            CheckOutcome {
                name: name.to_string(),
                instances,
                max_rel_err: worst,
                tolerance: OP_TOLERANCE,
                error,
            }
        })
        .collect()
}
