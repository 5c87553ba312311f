//! Training objectives: per-pixel Euclidean loss on the prediction map and
//! the windowed region correlation loss on the intermediate weighted maps.
//!
//! The region loss slides a k x k window with stride s over the absolute
//! error map E. Within each window the maximum error (a detached value, no
//! gradient) sets a bar; pixels above `max * threshold` are "error-prone"
//! and pay the amplified penalty (E*sigmoid(E) + E)^2, the rest pay E^2.
//! Window losses are summed over all windows and images and divided by the
//! batch size, so pixels under several overlapping windows count once per
//! window by design.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, NodeId};
use crate::model::ForwardOutputs;
use crate::ops::{self, PointwiseFn};
use crate::tensor::Tensor;

fn default_window_k() -> usize {
    27
}
fn default_stride_s() -> usize {
    23
}
fn default_threshold() -> f64 {
    0.95
}
fn default_lambda() -> f64 {
    1.5
}
fn default_gamma() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Window side length on the 1/8-resolution maps.
    pub window_k: usize,
    /// Window stride; overlap is `window_k - stride_s`.
    pub stride_s: usize,
    /// Error-prone cut as a fraction of the window maximum, in (0, 1].
    /// At exactly 1 no pixel clears the strict inequality and the loss
    /// degenerates to a windowed sum of squared errors.
    pub threshold: f64,
    /// Weight of each weighted-map region loss term.
    pub lambda: f64,
    /// Weight of the prediction-map Euclidean term.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            window_k: default_window_k(),
            stride_s: default_stride_s(),
            threshold: default_threshold(),
            lambda: default_lambda(),
            gamma: default_gamma(),
        }
    }
}

impl LossConfig {
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.window_k < 1 {
            out.push("loss: window_k must be at least 1".to_string());
        }
        if self.stride_s < 1 || self.stride_s > self.window_k {
            out.push(format!(
                "loss: need 1 <= stride_s <= window_k, got stride {} window {}",
                self.stride_s, self.window_k
            ));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            out.push(format!(
                "loss: threshold must lie in (0, 1], got {}",
                self.threshold
            ));
        }
        if !self.lambda.is_finite() || !self.gamma.is_finite() {
            out.push(format!(
                "loss: weights must be finite, got lambda {} gamma {}",
                self.lambda, self.gamma
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { issues })
        }
    }
}

/// Top-left corners of every window, as separate row and column offset
/// axes; the full set is their cross product in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub k: usize,
    pub row_offsets: Vec<usize>,
    pub col_offsets: Vec<usize>,
}

impl WindowGrid {
    /// All (row, col) corners, lexicographically increasing.
    pub fn offsets(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.row_offsets.len() * self.col_offsets.len());
        for &r in &self.row_offsets {
            for &c in &self.col_offsets {
                out.push((r, c));
            }
        }
        out
    }

    pub fn window_count(&self) -> usize {
        self.row_offsets.len() * self.col_offsets.len()
    }
}

/// Stride positions along one axis: floor((extent - k) / s) + 1 regular
/// offsets at multiples of s, plus one extra flushed to the far edge when
/// the regular grid stops short of covering the last pixels.
fn axis_offsets(extent: usize, k: usize, s: usize) -> Vec<usize> {
    let n = (extent - k) / s + 1;
    let mut offs: Vec<usize> = (0..n).map(|i| i * s).collect();
    let last = offs[n - 1];
    if last + k < extent {
        offs.push(extent - k);
    }
    offs
}

/// Window corners for an h x w map. Every pixel ends up inside at least one
/// window.
pub fn window_grid(h: usize, w: usize, k: usize, s: usize) -> Result<WindowGrid> {
    if k < 1 || s < 1 {
        return Err(Error::invalid(
            "window_grid",
            format!("window {} and stride {} must be at least 1", k, s),
        ));
    }
    if k > h || k > w {
        return Err(Error::invalid(
            "window_grid",
            format!("window {} exceeds map extent {}x{}", k, h, w),
        ));
    }
    Ok(WindowGrid {
        k,
        row_offsets: axis_offsets(h, k, s),
        col_offsets: axis_offsets(w, k, s),
    })
}

/// Mean over the batch of per-image sums of squared pixel differences.
pub fn euclidean_loss(g: &mut Graph, pred: NodeId, gt: NodeId) -> Result<NodeId> {
    let n = g.value(pred).dims4()?.0;
    let diff = g.sub(pred, gt)?;
    let sq = g.pointwise(diff, PointwiseFn::Square);
    let total = g.sum_all(sq);
    g.scale(total, 1.0 / n as f64)
}

/// E = |pred - gt| elementwise; downstream gradients pass through the
/// absolute value with subgradient 0 at exact ties.
pub fn error_map(g: &mut Graph, pred: NodeId, gt: NodeId) -> Result<NodeId> {
    let diff = g.sub(pred, gt)?;
    Ok(g.pointwise(diff, PointwiseFn::Abs))
}

/// The amplified error-prone penalty before squaring: E*sigmoid(E) + E.
#[inline(always)]
fn amplify(e: f64) -> f64 {
    PointwiseFn::SiluPlusIdentity.apply(e)
}

#[inline(always)]
fn amplify_grad(e: f64) -> f64 {
    PointwiseFn::SiluPlusIdentity.derivative(e, 0.0)
}

/// Region loss of one single-channel plane.
fn plane_rc_loss(plane: &[f64], w: usize, grid: &WindowGrid, threshold: f64) -> f64 {
    let k = grid.k;
    let mut total = 0.0;
    for &r0 in &grid.row_offsets {
        for &c0 in &grid.col_offsets {
            let mut max = f64::NEG_INFINITY;
            for r in r0..r0 + k {
                for c in c0..c0 + k {
                    max = max.max(plane[r * w + c]);
                }
            }
            let cut = max * threshold;
            let mut window = 0.0;
            for r in r0..r0 + k {
                for c in c0..c0 + k {
                    let e = plane[r * w + c];
                    window += if e > cut {
                        let t = amplify(e);
                        t * t
                    } else {
                        e * e
                    };
                }
            }
            total += window;
        }
    }
    total
}

/// d(plane region loss)/d(plane), scaled by `factor`, added into `out`.
fn plane_rc_grad(plane: &[f64], w: usize, grid: &WindowGrid, threshold: f64, factor: f64, out: &mut [f64]) {
    let k = grid.k;
    for &r0 in &grid.row_offsets {
        for &c0 in &grid.col_offsets {
            let mut max = f64::NEG_INFINITY;
            for r in r0..r0 + k {
                for c in c0..c0 + k {
                    max = max.max(plane[r * w + c]);
                }
            }
            let cut = max * threshold;
            for r in r0..r0 + k {
                for c in c0..c0 + k {
                    let e = plane[r * w + c];
                    let d = if e > cut {
                        2.0 * amplify(e) * amplify_grad(e)
                    } else {
                        2.0 * e
                    };
                    out[r * w + c] += factor * d;
                }
            }
        }
    }
}

#[derive(Debug)]
struct RcWindowLoss {
    grid: WindowGrid,
    threshold: f64,
    inv_batch: f64,
}

impl CustomOp for RcWindowLoss {
    fn name(&self) -> &'static str {
        "rc_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
        let e = inputs[0];
        let (_, _, h, w) = e.dims4().expect("rc_loss input is 4-d");
        let factor = grad_out[0] * self.inv_batch;
        let mut grad = vec![0.0; e.numel()];
        let data = e.data();
        ops::for_each_chunk(&mut grad, h * w, |b, dst| {
            let plane = &data[b * h * w..][..h * w];
            plane_rc_grad(plane, w, &self.grid, self.threshold, factor, dst);
        });
        vec![grad]
    }
}

/// Region correlation loss over a (B, 1, h, w) error map. The window
/// maximum and the error-prone membership are decided on detached values;
/// gradients flow only through the per-pixel branch formulas.
pub fn rc_loss(g: &mut Graph, e: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    cfg.validate()?;
    let (b_n, c, h, w) = g.value(e).dims4()?;
    if c != 1 {
        return Err(Error::shape(
            "rc_loss",
            format!("expected a single-channel error map, got {:?}", g.value(e).shape()),
        ));
    }
    let grid = window_grid(h, w, cfg.window_k, cfg.stride_s)?;
    let data = g.value(e).data();

    let per_image: Vec<f64> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            (0..b_n)
                .into_par_iter()
                .map(|b| plane_rc_loss(&data[b * h * w..][..h * w], w, &grid, cfg.threshold))
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        (0..b_n)
            .map(|b| plane_rc_loss(&data[b * h * w..][..h * w], w, &grid, cfg.threshold))
            .collect()
    };
    let value = per_image.iter().sum::<f64>() / b_n as f64;

    let op = RcWindowLoss {
        grid,
        threshold: cfg.threshold,
        inv_batch: 1.0 / b_n as f64,
    };
    Ok(g.custom(&[e], Tensor::scalar(value), Box::new(op)))
}

/// Per-head loss values recorded next to the differentiable total.
#[derive(Clone, Debug, PartialEq)]
pub struct LossParts {
    /// Region loss of each weighted map, unweighted, in module order.
    pub wei: Vec<f64>,
    /// Euclidean loss of the prediction map, unweighted.
    pub pre: f64,
    /// lambda * sum(wei) + gamma * pre.
    pub total: f64,
}

/// The composite objective: lambda times the region loss of every weighted
/// map plus gamma times the Euclidean loss of the prediction map.
pub fn total_loss(
    g: &mut Graph,
    outputs: &ForwardOutputs,
    gt: NodeId,
    cfg: &LossConfig,
) -> Result<(NodeId, LossParts)> {
    if outputs.f_wei.is_empty() {
        return Err(Error::invalid("total_loss", "no weighted maps to supervise"));
    }
    let mut wei_values = Vec::with_capacity(outputs.f_wei.len());
    let mut wei_sum: Option<NodeId> = None;
    for &f_wei in &outputs.f_wei {
        let e = error_map(g, f_wei, gt)?;
        let l = rc_loss(g, e, cfg)?;
        wei_values.push(g.value(l).item());
        wei_sum = Some(match wei_sum {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    let l_pre = euclidean_loss(g, outputs.f_pre, gt)?;
    let pre_value = g.value(l_pre).item();

    let weighted_wei = g.scale(wei_sum.expect("at least one head"), cfg.lambda)?;
    let weighted_pre = g.scale(l_pre, cfg.gamma)?;
    let total = g.add(weighted_wei, weighted_pre)?;

    let parts = LossParts {
        wei: wei_values,
        pre: pre_value,
        total: g.value(total).item(),
    };
    Ok((total, parts))
}
