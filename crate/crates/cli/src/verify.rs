//! Numerical self-checks runnable from the command line: finite-difference
//! validation of every differentiable building block, and a brute-force
//! re-computation of the windowed region loss. Exit status 0 means every
//! check stayed inside its tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crowdcount_core::graph::{grad_check, Graph};
use crowdcount_core::losses::{rc_loss, LossConfig};
use crowdcount_core::model::soft_block;
use crowdcount_core::ops::PointwiseFn;
use crowdcount_core::Tensor;

use crate::CliError;

const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-10;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so kinked functions (relu, abs) are
/// differentiable at every probe point.
fn signed_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let mag = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

fn check(name: &str, worst: f64) -> Result<(), CliError> {
    let ok = worst <= FD_TOL;
    println!(
        "  {:<28} worst rel {:.3e}  {}",
        name,
        worst,
        if ok { "ok" } else { "FAIL" }
    );
    if ok {
        Ok(())
    } else {
        Err(CliError::runtime(format!(
            "gradient check `{}` exceeded tolerance: {:.3e} > {:.3e}",
            name, worst, FD_TOL
        )))
    }
}

/// Finite-difference checks over the tensor primitives, the softmax
/// contraction block, and the region loss.
pub fn suite_grads() -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    println!("gradient checks (eps {:.0e}, tolerance {:.0e}):", FD_EPS, FD_TOL);

    let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
    let k = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[4]);
    let w = rand_tensor(&mut rng, &[2, 4, 8, 8]);
    let worst = grad_check(
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
            let wy = g.mul(y, ids[3])?;
            Ok(g.sum_all(wy))
        },
        &[x, k, b, w],
        FD_EPS,
    )?;
    check("conv2d stride 1", worst)?;

    let x = rand_tensor(&mut rng, &[1, 2, 9, 9]);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let w = rand_tensor(&mut rng, &[1, 3, 5, 5]);
    let worst = grad_check(
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
            let wy = g.mul(y, ids[3])?;
            Ok(g.sum_all(wy))
        },
        &[x, k, b, w],
        FD_EPS,
    )?;
    check("conv2d stride 2", worst)?;

    for (name, f) in [
        ("relu", PointwiseFn::Relu),
        ("sigmoid", PointwiseFn::Sigmoid),
        ("abs", PointwiseFn::Abs),
        ("square", PointwiseFn::Square),
        ("silu plus identity", PointwiseFn::SiluPlusIdentity),
    ] {
        let x = signed_tensor(&mut rng, &[2, 3, 6, 6]);
        let w = rand_tensor(&mut rng, &[2, 3, 6, 6]);
        let worst = grad_check(
            |g, ids| {
                let y = g.pointwise(ids[0], f);
                let wy = g.mul(y, ids[1])?;
                Ok(g.sum_all(wy))
            },
            &[x, w],
            FD_EPS,
        )?;
        check(name, worst)?;
    }

    let x = rand_tensor(&mut rng, &[2, 5, 4, 4]);
    let w = rand_tensor(&mut rng, &[2, 5, 4, 4]);
    let worst = grad_check(
        |g, ids| {
            let y = g.channel_softmax(ids[0])?;
            let wy = g.mul(y, ids[1])?;
            Ok(g.sum_all(wy))
        },
        &[x, w],
        FD_EPS,
    )?;
    check("channel softmax", worst)?;

    // Max pooling needs distinct values inside each 2x2 block so the
    // argmax cannot flip under the probe offsets.
    let x = Tensor::from_fn(&[1, 2, 6, 6], |i| (i as f64) * 0.07 - 2.5);
    let w = rand_tensor(&mut rng, &[1, 2, 3, 3]);
    let worst = grad_check(
        |g, ids| {
            let y = g.maxpool2(ids[0])?;
            let wy = g.mul(y, ids[1])?;
            Ok(g.sum_all(wy))
        },
        &[x, w],
        FD_EPS,
    )?;
    check("maxpool 2x2", worst)?;

    let x = rand_tensor(&mut rng, &[1, 3, 5, 5]);
    let w = rand_tensor(&mut rng, &[1, 3, 10, 10]);
    let worst = grad_check(
        |g, ids| {
            let y = g.bilinear_up2(ids[0])?;
            let wy = g.mul(y, ids[1])?;
            Ok(g.sum_all(wy))
        },
        &[x, w],
        FD_EPS,
    )?;
    check("bilinear upsample", worst)?;

    let x = rand_tensor(&mut rng, &[1, 2, 8, 8]);
    let w = rand_tensor(&mut rng, &[1, 2, 2, 2]);
    let worst = grad_check(
        |g, ids| {
            let y = g.sumpool(ids[0], 4)?;
            let wy = g.mul(y, ids[1])?;
            Ok(g.sum_all(wy))
        },
        &[x, w],
        FD_EPS,
    )?;
    check("sum pooling", worst)?;

    // ids[1] feeds both the sum and the product, so this also exercises
    // gradient accumulation across two consumers of one node.
    let a = rand_tensor(&mut rng, &[2, 3, 4, 4]);
    let b = rand_tensor(&mut rng, &[2, 3, 4, 4]);
    let c = rand_tensor(&mut rng, &[2, 3, 4, 4]);
    let worst = grad_check(
        |g, ids| {
            let s = g.add(ids[0], ids[1])?;
            let d = g.sub(s, ids[2])?;
            let m = g.mul(d, ids[1])?;
            let sc = g.scale(m, 0.37)?;
            Ok(g.sum_all(sc))
        },
        &[a, b, c],
        FD_EPS,
    )?;
    check("add/sub/mul/scale", worst)?;

    let a = rand_tensor(&mut rng, &[1, 2, 4, 4]);
    let b = rand_tensor(&mut rng, &[1, 3, 4, 4]);
    let w = rand_tensor(&mut rng, &[1, 5, 4, 4]);
    let worst = grad_check(
        |g, ids| {
            let y = g.concat_channels(ids[0], ids[1])?;
            let wy = g.mul(y, ids[2])?;
            Ok(g.sum_all(wy))
        },
        &[a, b, w],
        FD_EPS,
    )?;
    check("channel concat", worst)?;

    let x = rand_tensor(&mut rng, &[2, 4, 3, 3]);
    let w = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    let worst = grad_check(
        |g, ids| {
            let y = g.sum_channels(ids[0])?;
            let wy = g.mul(y, ids[1])?;
            Ok(g.sum_all(wy))
        },
        &[x, w],
        FD_EPS,
    )?;
    check("channel sum", worst)?;

    let att = rand_tensor(&mut rng, &[1, 4, 5, 5]);
    let mul = rand_tensor(&mut rng, &[1, 4, 5, 5]);
    let w_out = rand_tensor(&mut rng, &[1, 4, 5, 5]);
    let w_wei = rand_tensor(&mut rng, &[1, 1, 5, 5]);
    let worst = grad_check(
        |g, ids| {
            let (f_out, f_wei) = soft_block(g, ids[0], ids[1])?;
            let a = g.mul(f_out, ids[2])?;
            let b = g.mul(f_wei, ids[3])?;
            let sa = g.sum_all(a);
            let sb = g.sum_all(b);
            g.add(sa, sb)
        },
        &[att, mul, w_out, w_wei],
        FD_EPS,
    )?;
    check("softmax contraction", worst)?;

    for case in 0..3 {
        let (b_n, h, w) = (1 + case % 2, 6 + case, 7 + case);
        let cfg = LossConfig {
            window_k: 3,
            stride_s: 2,
            threshold: 0.6,
            ..LossConfig::default()
        };
        let e = branch_safe_plane(&mut rng, b_n, h, w, &cfg);
        let worst = grad_check(
            |g, ids| rc_loss(g, ids[0], &cfg),
            &[e],
            FD_EPS,
        )?;
        check(&format!("region loss case {}", case + 1), worst)?;
    }

    Ok(())
}

/// Edge-flush window offsets: multiples of the stride while a full window
/// fits, plus a final flush window when the last multiple stops short.
fn offsets(dim: usize, k: usize, s: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos + k <= dim {
        out.push(pos);
        pos += s;
    }
    if *out.last().unwrap() + k < dim {
        out.push(dim - k);
    }
    out
}

/// Scalar recomputation of the region loss straight from its definition.
fn reference_rc(values: &[f64], b_n: usize, h: usize, w: usize, k: usize, s: usize, t: f64) -> f64 {
    let mut total = 0.0;
    for b in 0..b_n {
        let plane = &values[b * h * w..][..h * w];
        for &r0 in &offsets(h, k, s) {
            for &c0 in &offsets(w, k, s) {
                let mut max = f64::NEG_INFINITY;
                for r in r0..r0 + k {
                    for c in c0..c0 + k {
                        max = max.max(plane[r * w + c]);
                    }
                }
                for r in r0..r0 + k {
                    for c in c0..c0 + k {
                        let e = plane[r * w + c];
                        total += if e > max * t {
                            let amp = e / (1.0 + (-e).exp()) + e;
                            amp * amp
                        } else {
                            e * e
                        };
                    }
                }
            }
        }
    }
    total / b_n as f64
}

/// Error planes where no value sits near any window's branch cut, so the
/// loss is differentiable and the oracle comparison is exact.
fn branch_safe_plane(rng: &mut ChaCha8Rng, b_n: usize, h: usize, w: usize, cfg: &LossConfig) -> Tensor {
    loop {
        let t = Tensor::from_fn(&[b_n, 1, h, w], |_| rng.gen_range(0.05..1.0));
        let safe = (0..b_n).all(|b| {
            let plane = &t.data()[b * h * w..][..h * w];
            offsets(h, cfg.window_k, cfg.stride_s).iter().all(|&r0| {
                offsets(w, cfg.window_k, cfg.stride_s).iter().all(|&c0| {
                    let mut max = f64::NEG_INFINITY;
                    for r in r0..r0 + cfg.window_k {
                        for c in c0..c0 + cfg.window_k {
                            max = max.max(plane[r * w + c]);
                        }
                    }
                    (r0..r0 + cfg.window_k).all(|r| {
                        (c0..c0 + cfg.window_k).all(|c| {
                            (plane[r * w + c] - max * cfg.threshold).abs() > 1e-3
                        })
                    })
                })
            })
        });
        if safe {
            return t;
        }
    }
}

/// Compares the region loss against the scalar reference on randomized
/// shapes, strides, and thresholds.
pub fn suite_rcloss() -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    println!("region loss oracle (tolerance {:.0e}):", ORACLE_TOL);
    let cases = 200;
    let mut worst = 0.0_f64;
    for i in 0..cases {
        let b_n = rng.gen_range(1..=3);
        let h = rng.gen_range(4..=14);
        let w = rng.gen_range(4..=14);
        let k = rng.gen_range(2..=h.min(w).min(6));
        let s = rng.gen_range(1..=k);
        let t = rng.gen_range(0.3..=1.0);
        let e = Tensor::from_fn(&[b_n, 1, h, w], |_| rng.gen_range(-1.0..1.0));
        let want = reference_rc(e.data(), b_n, h, w, k, s, t);

        let cfg = LossConfig {
            window_k: k,
            stride_s: s,
            threshold: t,
            ..LossConfig::default()
        };
        let mut g = Graph::new();
        let node = g.leaf(e);
        let loss = rc_loss(&mut g, node, &cfg)?;
        let got = g.value(loss).item();

        let rel = (got - want).abs() / want.abs().max(1.0);
        worst = worst.max(rel);
        if rel > ORACLE_TOL {
            println!(
                "  case {}: b {} h {} w {} k {} s {} threshold {:.3}: got {}, want {}",
                i, b_n, h, w, k, s, t, got, want
            );
            return Err(CliError::runtime(format!(
                "region loss disagrees with the scalar reference: rel {:.3e}",
                rel
            )));
        }
    }
    println!("  {} randomized cases, worst rel {:.3e}  ok", cases, worst);
    Ok(())
}

pub fn cmd_verify(args: &crate::VerifyArgs) -> Result<(), CliError> {
    match args.suite.as_str() {
        "grads" => suite_grads(),
        "rcloss" => suite_rcloss(),
        "all" => {
            suite_grads()?;
            suite_rcloss()
        }
        other => Err(CliError::config(format!(
            "unknown suite `{}`; expected grads, rcloss, or all",
            other
        ))),
    }
}
