//! Augmentation, Adam optimization, and the seeded training loop.
//!
//! Determinism contract: parameter init is seeded by the model config,
//! while shuffling and per-sample augmentation draw from separate ChaCha
//! streams of the training seed. Augmentation of sample i at epoch e uses
//! its own stream, so worker threads can prepare batches in any order
//! without changing a single bit of the trajectory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::densitymap::{to_target_grid, AnnotationSet, DensityMap, LabelSpec};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{total_loss, LossConfig};
use crate::model::{
    insert_params, network_forward, save_checkpoint, ModelConfig, ModelParams, ParamNodes,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Square patch side in pixels; must be divisible by 16 so the encoder
    /// pools evenly and the 1/8 target grid is exact.
    pub crop: usize,
    /// Horizontal flip probability.
    pub flip_p: f64,
    /// Grayscale conversion probability.
    pub gray_p: f64,
    /// Initial learning rate.
    pub lr0: f64,
    /// Epoch interval between learning-rate halvings.
    pub halve_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seed for shuffling and augmentation draws. Parameter init is seeded
    /// separately through the model config.
    pub seed: u64,
    /// Optional global-norm gradient cap; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            crop: 400,
            flip_p: 0.5,
            gray_p: 0.1,
            lr0: 1e-4,
            halve_every: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            epochs: 400,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.crop == 0 || self.crop % 16 != 0 {
            out.push(format!(
                "train: crop must be a positive multiple of 16, got {}",
                self.crop
            ));
        }
        for (name, p) in [("flip_p", self.flip_p), ("gray_p", self.gray_p)] {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("train: {} must lie in [0, 1], got {}", name, p));
            }
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            out.push(format!("train: lr0 must be positive, got {}", self.lr0));
        }
        if self.halve_every == 0 {
            out.push("train: halve_every must be at least 1".to_string());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("train: {} must lie in [0, 1), got {}", name, b));
            }
        }
        if !(self.adam_eps > 0.0) {
            out.push(format!(
                "train: adam_eps must be positive, got {}",
                self.adam_eps
            ));
        }
        if self.batch_size == 0 {
            out.push("train: batch_size must be at least 1".to_string());
        }
        if self.epochs == 0 {
            out.push("train: epochs must be at least 1".to_string());
        }
        if let Some(cap) = self.grad_clip {
            if !(cap > 0.0 && cap.is_finite()) {
                out.push(format!("train: grad_clip must be positive, got {}", cap));
            }
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

/// One training image with its head annotations.
#[derive(Clone, Debug)]
pub struct TrainSample {
    /// (3, H, W) RGB in [0, 1].
    pub image: Tensor,
    pub ann: AnnotationSet,
}

use crate::ops::mirror;

/// Points inside the crop window, translated to crop coordinates.
fn crop_points(points: &[(f64, f64)], x0: usize, y0: usize, crop: usize) -> Vec<(f64, f64)> {
    let (x0, y0, side) = (x0 as f64, y0 as f64, crop as f64);
    points
        .iter()
        .filter(|&&(x, y)| x >= x0 && x < x0 + side && y >= y0 && y < y0 + side)
        .map(|&(x, y)| (x - x0, y - y0))
        .collect()
}

/// Mirrors a square patch and its annotations about the vertical center
/// line. Pixel column c swaps with crop-1-c, so a point at x maps to
/// crop-1-x (clamped into the image for points in the last sub-pixel
/// sliver, which would otherwise land just below zero).
fn flip_horizontal(patch: &mut Tensor, points: &mut [(f64, f64)], crop: usize) {
    let data = patch.data_mut();
    for c in 0..3 {
        for r in 0..crop {
            let row = &mut data[(c * crop + r) * crop..][..crop];
            row.reverse();
        }
    }
    let limit = crop as f64 - 0.001;
    for p in points.iter_mut() {
        p.0 = ((crop - 1) as f64 - p.0).clamp(0.0, limit);
    }
}

/// Replaces RGB with the Rec. 601 luminance replicated to all channels.
fn to_grayscale(patch: &mut Tensor, crop: usize) {
    let data = patch.data_mut();
    let plane = crop * crop;
    for i in 0..plane {
        let y = 0.299 * data[i] + 0.587 * data[plane + i] + 0.114 * data[2 * plane + i];
        data[i] = y;
        data[plane + i] = y;
        data[2 * plane + i] = y;
    }
}

/// One augmented training example: a random crop (reflection-padded when
/// the image is smaller than the crop), optional horizontal flip, optional
/// grayscale, and a fresh density target rendered from the surviving
/// points and sum-pooled to the 1/8 prediction grid.
pub fn augment(
    image: &Tensor,
    ann: &AnnotationSet,
    cfg: &TrainConfig,
    label: &LabelSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, DensityMap)> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape(
            "augment",
            format!("expected a (3, H, W) image, got {:?}", shape),
        ));
    }
    let (h, w) = (shape[1], shape[2]);
    if h == 0 || w == 0 {
        return Err(Error::shape("augment", "image has an empty axis".to_string()));
    }
    let crop = cfg.crop;
    let h_pad = h.max(crop);
    let w_pad = w.max(crop);

    let y0 = rng.gen_range(0..=h_pad - crop);
    let x0 = rng.gen_range(0..=w_pad - crop);

    let src = image.data();
    let mut out = vec![0.0; 3 * crop * crop];
    for c in 0..3 {
        for r in 0..crop {
            let sr = mirror(y0 + r, h);
            for col in 0..crop {
                let sc = mirror(x0 + col, w);
                out[(c * crop + r) * crop + col] = src[(c * h + sr) * w + sc];
            }
        }
    }
    let mut patch = Tensor::from_vec(vec![3, crop, crop], out)?;
    let mut points = crop_points(&ann.points, x0, y0, crop);

    // Draw both coins unconditionally so the crop/flip/gray stream layout
    // is identical across probability settings.
    let flip_draw: f64 = rng.gen();
    let gray_draw: f64 = rng.gen();
    if flip_draw < cfg.flip_p {
        flip_horizontal(&mut patch, &mut points, crop);
    }
    if gray_draw < cfg.gray_p {
        to_grayscale(&mut patch, crop);
    }

    let patch_ann = AnnotationSet {
        image_id: ann.image_id.clone(),
        width: crop,
        height: crop,
        points,
    };
    let dense = label.render(&patch_ann)?;
    let target = to_target_grid(&dense, 8)?;
    Ok((patch, target))
}

/// lr0 halved once per completed halving interval.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * 0.5f64.powi((epoch / cfg.halve_every) as i32)
}

/// First and second gradient moments per parameter, plus the shared step
/// counter for bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = |p: &ModelParams| {
            p.iter()
                .map(|(name, t)| (name.clone(), vec![0.0; t.numel()]))
                .collect()
        };
        AdamState {
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }
}

/// Scales all gradients so their global L2 norm does not exceed `cap`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, cap: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.values() {
        for &x in g {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > cap {
        let scale = cap / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Gradients deposited on the parameter leaves by the last backward sweep.
pub fn collect_grads(g: &Graph, nodes: &ParamNodes) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (name, &id) in nodes.iter() {
        let grad = g.grad(id).ok_or_else(|| {
            Error::invalid(
                "collect_grads",
                format!("parameter `{}` has no gradient; run backward first", name),
            )
        })?;
        out.insert(name.clone(), grad.to_vec());
    }
    Ok(out)
}

/// One bias-corrected Adam update over every parameter, in name order.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, grad) in grads {
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of `{}`", name),
            });
        }
        let numel = params
            .get(name)
            .ok_or_else(|| Error::invalid("adam_step", format!("unknown parameter `{}`", name)))?
            .numel();
        if grad.len() != numel {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "gradient for `{}` has {} elements, parameter has {}",
                    name,
                    grad.len(),
                    numel
                ),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - cfg.adam_beta1.powi(t);
    let bias2 = 1.0 - cfg.adam_beta2.powi(t);
    for (name, tensor) in params.iter_mut() {
        let grad = match grads.get(name) {
            Some(g) => g,
            None => continue,
        };
        let m = state.m.get_mut(name).expect("state matches params");
        let v = state.v.get_mut(name).expect("state matches params");
        let data = tensor.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g;
            v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Loss components of one epoch, averaged per image, as logged to CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_wei: Vec<f64>,
    pub loss_pre: f64,
    pub train_mae: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_train_mae: f64,
    pub final_train_mae: f64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

fn augment_rng(seed: u64, epoch: usize, sample: usize) -> ChaCha8Rng {
    assert!(sample < 1 << 24, "dataset too large for the stream layout");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 63 | (epoch as u64) << 24 | sample as u64);
    rng
}

fn write_csv_row(out: &mut impl Write, m: &EpochMetrics) -> std::io::Result<()> {
    write!(out, "{},{},{}", m.epoch, m.lr, m.loss_total)?;
    for w in &m.loss_wei {
        write!(out, ",{}", w)?;
    }
    writeln!(out, ",{},{}", m.loss_pre, m.train_mae)
}

/// Trains from scratch on the given samples, writing `metrics.csv`,
/// `best.cckp` (lowest train MAE), and `last.cckp` under `out_dir`.
///
/// A non-finite loss aborts the run before the offending update, so the
/// checkpoints on disk always come from a finite epoch.
pub fn train_loop(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    label: &LabelSpec,
    dataset: &[TrainSample],
    out_dir: &Path,
) -> Result<TrainSummary> {
    let mut issues = model_cfg.issues();
    issues.extend(train_cfg.issues());
    issues.extend(loss_cfg.issues());
    issues.extend(label.issues());
    if !issues.is_empty() {
        return Err(Error::Config { issues });
    }
    if dataset.is_empty() {
        return Err(Error::invalid("train_loop", "dataset is empty"));
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let best_path = out_dir.join("best.cckp");
    let last_path = out_dir.join("last.cckp");
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = BufWriter::new(file);
    let io_err = |e| Error::io(&metrics_path, e);
    write!(log, "epoch,lr,loss_total").map_err(io_err)?;
    for i in 1..=model_cfg.iiao_stack {
        write!(log, ",loss_wei{}", i).map_err(io_err)?;
    }
    writeln!(log, ",loss_pre,train_mae").map_err(io_err)?;

    let mut params = crate::model::init_params(model_cfg)?;
    let mut state = AdamState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    shuffle_rng.set_stream(1);

    let n = dataset.len();
    let target_side = train_cfg.crop / 8;
    let mut metrics = Vec::with_capacity(train_cfg.epochs);
    let mut best_mae = f64::INFINITY;
    let mut best_epoch = 0;

    for epoch in 0..train_cfg.epochs {
        let lr = lr_at(epoch, train_cfg);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);

        let mut sum_total = 0.0;
        let mut sum_wei = vec![0.0; model_cfg.iiao_stack];
        let mut sum_pre = 0.0;
        let mut sum_abs_err = 0.0;

        for chunk in order.chunks(train_cfg.batch_size) {
            let examples: Vec<(Tensor, DensityMap)> = {
                let build = |&idx: &usize| {
                    let mut rng = augment_rng(train_cfg.seed, epoch, idx);
                    augment(&dataset[idx].image, &dataset[idx].ann, train_cfg, label, &mut rng)
                };
                #[cfg(feature = "parallel")]
                {
                    use rayon::prelude::*;
                    chunk.par_iter().map(build).collect::<Result<_>>()?
                }
                #[cfg(not(feature = "parallel"))]
                chunk.iter().map(build).collect::<Result<_>>()?
            };

            let b = examples.len();
            let crop = train_cfg.crop;
            let mut images = vec![0.0; b * 3 * crop * crop];
            let mut targets = vec![0.0; b * target_side * target_side];
            for (i, (patch, map)) in examples.iter().enumerate() {
                images[i * 3 * crop * crop..][..3 * crop * crop].copy_from_slice(patch.data());
                targets[i * target_side * target_side..][..target_side * target_side]
                    .copy_from_slice(map.values());
            }
            let images = Tensor::from_vec(vec![b, 3, crop, crop], images)?;
            let targets = Tensor::from_vec(vec![b, 1, target_side, target_side], targets)?;

            let mut g = Graph::new();
            let nodes = insert_params(&mut g, &params);
            let img_id = g.leaf(images);
            let gt_id = g.leaf(targets);
            let outputs = network_forward(&mut g, img_id, &nodes, model_cfg)?;
            let (loss_id, parts) = total_loss(&mut g, &outputs, gt_id, loss_cfg)?;
            if !parts.total.is_finite() {
                return Err(Error::NonFinite {
                    context: format!(
                        "total loss at epoch {}; aborting before the update, last saved checkpoint is intact",
                        epoch
                    ),
                });
            }

            g.backward(loss_id)?;
            let mut grads = collect_grads(&g, &nodes)?;
            if let Some(cap) = train_cfg.grad_clip {
                clip_global_norm(&mut grads, cap);
            }
            adam_step(&mut params, &grads, &mut state, lr, train_cfg)?;

            let bf = b as f64;
            sum_total += parts.total * bf;
            for (acc, w) in sum_wei.iter_mut().zip(&parts.wei) {
                *acc += w * bf;
            }
            sum_pre += parts.pre * bf;

            let pred = g.value(outputs.f_pre).data();
            let plane = target_side * target_side;
            for i in 0..b {
                let p: f64 = pred[i * plane..][..plane].iter().sum();
                let t: f64 = g.value(gt_id).data()[i * plane..][..plane].iter().sum();
                sum_abs_err += (p - t).abs();
            }
        }

        let nf = n as f64;
        let m = EpochMetrics {
            epoch,
            lr,
            loss_total: sum_total / nf,
            loss_wei: sum_wei.iter().map(|s| s / nf).collect(),
            loss_pre: sum_pre / nf,
            train_mae: sum_abs_err / nf,
        };
        write_csv_row(&mut log, &m).map_err(io_err)?;
        log.flush().map_err(io_err)?;

        save_checkpoint(&last_path, model_cfg, &params)?;
        if m.train_mae < best_mae {
            best_mae = m.train_mae;
            best_epoch = epoch;
            save_checkpoint(&best_path, model_cfg, &params)?;
        }
        metrics.push(m);
    }

    let final_train_mae = metrics.last().expect("at least one epoch").train_mae;
    Ok(TrainSummary {
        metrics,
        best_epoch,
        best_train_mae: best_mae,
        final_train_mae,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        metrics_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossConfig;
    use crate::model::load_checkpoint;
    use tempfile::tempdir;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            base_channels: 16,
            reduction_ratio: 4,
            iiao_stack: 2,
            encoder_widths: vec![4, 4, 8, 8],
            seed: 7,
            ..ModelConfig::default()
        }
    }

    fn tiny_train(epochs: usize) -> TrainConfig {
        TrainConfig {
            crop: 32,
            batch_size: 2,
            epochs,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn tiny_loss() -> LossConfig {
        LossConfig {
            window_k: 2,
            stride_s: 2,
            ..LossConfig::default()
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        let data = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(vec![3, h, w], data).unwrap()
    }

    fn tiny_dataset(n: usize, side: usize, points_per: usize) -> Vec<TrainSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..n)
            .map(|i| {
                let image = random_image(&mut rng, side, side);
                let points = (0..points_per)
                    .map(|_| {
                        (
                            rng.gen_range(0.5..side as f64 - 0.5),
                            rng.gen_range(0.5..side as f64 - 0.5),
                        )
                    })
                    .collect();
                let ann = AnnotationSet {
                    image_id: format!("scene_{}", i),
                    width: side,
                    height: side,
                    points,
                };
                TrainSample { image, ann }
            })
            .collect()
    }

    #[test]
    fn default_config_matches_training_recipe() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.crop, 400);
        assert_eq!(cfg.flip_p, 0.5);
        assert_eq!(cfg.gray_p, 0.1);
        assert_eq!(cfg.lr0, 1e-4);
        assert_eq!(cfg.halve_every, 100);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.grad_clip, None);
        assert!(cfg.issues().is_empty());
    }

    #[test]
    fn config_collects_every_problem() {
        let cfg = TrainConfig {
            crop: 100,
            flip_p: 1.5,
            lr0: 0.0,
            grad_clip: Some(-1.0),
            ..TrainConfig::default()
        };
        assert_eq!(cfg.issues().len(), 4, "{:?}", cfg.issues());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn learning_rate_halves_on_interval_boundaries() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert_eq!(lr_at(99, &cfg), 1e-4);
        assert_eq!(lr_at(100, &cfg), 5e-5);
        assert_eq!(lr_at(250, &cfg), 2.5e-5);
    }

    #[test]
    fn mirror_reflects_without_repeating_the_edge() {
        assert_eq!(mirror(4, 5), 4);
        assert_eq!(mirror(5, 5), 3);
        assert_eq!(mirror(6, 5), 2);
        assert_eq!(mirror(8, 5), 0);
        assert_eq!(mirror(9, 5), 1);
        assert_eq!(mirror(3, 1), 0);
    }

    #[test]
    fn crop_points_translates_and_drops() {
        let points = vec![(10.0, 5.0), (15.9, 20.0), (48.0, 5.0), (16.0, 31.5)];
        let kept = crop_points(&points, 16, 0, 32);
        assert_eq!(kept, vec![(0.0, 31.5)]);
        let all = crop_points(&points, 0, 0, 64);
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn flip_mirrors_a_point_at_10_in_a_400_crop_to_389() {
        let mut patch = Tensor::zeros(&[3, 400, 400]);
        let mut points = vec![(10.0, 7.0)];
        flip_horizontal(&mut patch, &mut points, 400);
        assert_eq!(points, vec![(389.0, 7.0)]);
    }

    #[test]
    fn flipping_twice_is_the_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let original = random_image(&mut rng, 16, 16);
        let mut patch = original.clone();
        let orig_points = vec![(3.25, 9.0), (15.0, 0.5)];
        let mut points = orig_points.clone();
        flip_horizontal(&mut patch, &mut points, 16);
        flip_horizontal(&mut patch, &mut points, 16);
        assert_eq!(patch.data(), original.data());
        assert_eq!(points, orig_points);
    }

    #[test]
    fn forced_flip_reverses_pixel_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image = random_image(&mut rng, 16, 16);
        let ann = AnnotationSet {
            image_id: "flip".into(),
            width: 16,
            height: 16,
            points: vec![(4.0, 4.0)],
        };
        let cfg = TrainConfig {
            crop: 16,
            flip_p: 1.0,
            gray_p: 0.0,
            ..TrainConfig::default()
        };
        let mut arng = ChaCha8Rng::seed_from_u64(5);
        let (patch, _) = augment(&image, &ann, &cfg, &LabelSpec::default(), &mut arng).unwrap();
        for c in 0..3 {
            for r in 0..16 {
                for col in 0..16 {
                    assert_eq!(
                        patch.data()[(c * 16 + r) * 16 + col],
                        image.data()[(c * 16 + r) * 16 + (15 - col)]
                    );
                }
            }
        }
    }

    #[test]
    fn forced_grayscale_replicates_rec601_luminance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let image = random_image(&mut rng, 16, 16);
        let ann = AnnotationSet {
            image_id: "gray".into(),
            width: 16,
            height: 16,
            points: vec![],
        };
        let cfg = TrainConfig {
            crop: 16,
            flip_p: 0.0,
            gray_p: 1.0,
            ..TrainConfig::default()
        };
        let mut arng = ChaCha8Rng::seed_from_u64(5);
        let (patch, _) = augment(&image, &ann, &cfg, &LabelSpec::default(), &mut arng).unwrap();
        let plane = 256;
        let d = patch.data();
        let s = image.data();
        for i in 0..plane {
            let y = 0.299 * s[i] + 0.587 * s[plane + i] + 0.114 * s[2 * plane + i];
            assert_eq!(d[i], y);
            assert_eq!(d[plane + i], y);
            assert_eq!(d[2 * plane + i], y);
        }
    }

    #[test]
    fn full_coverage_crop_conserves_the_head_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let image = random_image(&mut rng, 32, 32);
        let points: Vec<(f64, f64)> =
            (0..7).map(|_| (rng.gen_range(0.5..31.5), rng.gen_range(0.5..31.5))).collect();
        let ann = AnnotationSet {
            image_id: "conserve".into(),
            width: 32,
            height: 32,
            points,
        };
        let cfg = TrainConfig {
            crop: 32,
            flip_p: 0.5,
            gray_p: 0.5,
            ..TrainConfig::default()
        };
        let label = LabelSpec::Fixed { sigma: 1.5 };
        for seed in 0..4 {
            let mut arng = ChaCha8Rng::seed_from_u64(seed);
            let (_, target) = augment(&image, &ann, &cfg, &label, &mut arng).unwrap();
            assert_eq!(target.width(), 4);
            assert!((target.sum() - 7.0).abs() < 1e-6, "sum {}", target.sum());
        }
    }

    #[test]
    fn small_images_are_reflection_padded() {
        let data: Vec<f64> = (0..3 * 5 * 5).map(|i| i as f64).collect();
        let image = Tensor::from_vec(vec![3, 5, 5], data).unwrap();
        let ann = AnnotationSet {
            image_id: "pad".into(),
            width: 5,
            height: 5,
            points: vec![(4.2, 3.1)],
        };
        let cfg = TrainConfig {
            crop: 16,
            flip_p: 0.0,
            gray_p: 0.0,
            ..TrainConfig::default()
        };
        let mut arng = ChaCha8Rng::seed_from_u64(5);
        let (patch, target) =
            augment(&image, &ann, &cfg, &LabelSpec::Fixed { sigma: 1.0 }, &mut arng).unwrap();
        assert_eq!(patch.shape(), &[3, 16, 16]);
        for c in 0..3 {
            for r in 0..16 {
                for col in 0..16 {
                    let expect = image.data()[(c * 5 + mirror(r, 5)) * 5 + mirror(col, 5)];
                    assert_eq!(patch.data()[(c * 16 + r) * 16 + col], expect);
                }
            }
        }
        assert!((target.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn augment_rejects_non_rgb_shapes() {
        let image = Tensor::zeros(&[1, 8, 8]);
        let ann = AnnotationSet {
            image_id: "bad".into(),
            width: 8,
            height: 8,
            points: vec![],
        };
        let mut arng = ChaCha8Rng::seed_from_u64(0);
        let got = augment(&image, &ann, &TrainConfig::default(), &LabelSpec::default(), &mut arng);
        assert!(got.is_err());
    }

    fn single_param(value: f64) -> (ModelParams, BTreeMap<String, Vec<f64>>) {
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), Tensor::from_vec(vec![1], vec![value]).unwrap());
        (ModelParams::from_map(map), BTreeMap::new())
    }

    #[test]
    fn zero_gradient_is_an_adam_fixed_point() {
        let (mut params, mut grads) = single_param(0.75);
        grads.insert("w".to_string(), vec![0.0]);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.1, &TrainConfig::default()).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[0.75]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn one_step_matches_a_scalar_reference_implementation() {
        let (mut params, mut grads) = single_param(0.0);
        grads.insert("w".to_string(), vec![1.0]);
        let mut state = AdamState::new(&params);
        let cfg = TrainConfig::default();
        adam_step(&mut params, &grads, &mut state, 0.1, &cfg).unwrap();
        let got = params.get("w").unwrap().data()[0];

        // Independent scalar recomputation of the bias-corrected update.
        let (b1, b2, eps, lr, g) = (0.9, 0.999, 1e-8, 0.1, 1.0);
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat: f64 = v / (1.0 - b2);
        let expect = 0.0 - lr * m_hat / (v_hat.sqrt() + eps);
        assert_eq!(got, expect);
        assert!((got.abs() - 0.099999999).abs() < 1e-9, "step {}", got);
    }

    #[test]
    fn nan_gradient_is_rejected_with_the_parameter_name() {
        let (mut params, mut grads) = single_param(0.0);
        grads.insert("w".to_string(), vec![f64::NAN]);
        let mut state = AdamState::new(&params);
        let err = adam_step(&mut params, &grads, &mut state, 0.1, &TrainConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("`w`"), "{}", err);
        assert_eq!(params.get("w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn adam_updates_are_deterministic() {
        let run = || {
            let (mut params, mut grads) = single_param(1.0);
            grads.insert("w".to_string(), vec![0.3]);
            let mut state = AdamState::new(&params);
            let cfg = TrainConfig::default();
            for _ in 0..5 {
                adam_step(&mut params, &grads, &mut state, 0.01, &cfg).unwrap();
            }
            params.get("w").unwrap().data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn global_norm_clip_rescales_only_above_the_cap() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), vec![3.0, 4.0]);
        let norm = clip_global_norm(&mut grads, 1.0);
        assert_eq!(norm, 5.0);
        assert!((grads["a"][0] - 0.6).abs() < 1e-15);
        assert!((grads["a"][1] - 0.8).abs() < 1e-15);
        let norm = clip_global_norm(&mut grads, 10.0);
        assert!((norm - 1.0).abs() < 1e-15);
        assert!((grads["a"][0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn csv_row_uses_shortest_roundtrip_float_formatting() {
        let m = EpochMetrics {
            epoch: 3,
            lr: 1e-4,
            loss_total: 1.5,
            loss_wei: vec![0.25, 0.3],
            loss_pre: 0.7,
            train_mae: 2.5,
        };
        let mut buf = Vec::new();
        write_csv_row(&mut buf, &m).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "3,0.0001,1.5,0.25,0.3,0.7,2.5\n");
    }

    #[test]
    fn one_small_step_on_a_fixed_batch_decreases_the_loss() {
        let model_cfg = tiny_model();
        let train_cfg = tiny_train(1);
        let loss_cfg = tiny_loss();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let image_data: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
        let image = Tensor::from_vec(vec![1, 3, 32, 32], image_data).unwrap();
        let target_data: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..0.5)).collect();
        let target = Tensor::from_vec(vec![1, 1, 4, 4], target_data).unwrap();

        let mut params = crate::model::init_params(&model_cfg).unwrap();
        let loss_of = |params: &ModelParams| -> (f64, BTreeMap<String, Vec<f64>>) {
            let mut g = Graph::new();
            let nodes = insert_params(&mut g, params);
            let img = g.leaf(image.clone());
            let gt = g.leaf(target.clone());
            let outputs = network_forward(&mut g, img, &nodes, &model_cfg).unwrap();
            let (loss, parts) = total_loss(&mut g, &outputs, gt, &loss_cfg).unwrap();
            g.backward(loss).unwrap();
            (parts.total, collect_grads(&g, &nodes).unwrap())
        };

        let (before, grads) = loss_of(&params);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 1e-6, &train_cfg).unwrap();
        let (after, _) = loss_of(&params);
        assert!(after < before, "loss went {} -> {}", before, after);
    }

    #[test]
    fn train_loop_smoke_writes_log_and_checkpoints() {
        let dir = tempdir().unwrap();
        let dataset = tiny_dataset(2, 32, 4);
        let summary = train_loop(
            &tiny_model(),
            &tiny_train(2),
            &tiny_loss(),
            &LabelSpec::Fixed { sigma: 1.5 },
            &dataset,
            dir.path(),
        )
        .unwrap();

        assert_eq!(summary.metrics.len(), 2);
        for m in &summary.metrics {
            assert!(m.loss_total.is_finite() && m.loss_total >= 0.0);
            assert_eq!(m.loss_wei.len(), 2);
        }
        let log = fs::read_to_string(&summary.metrics_path).unwrap();
        let mut lines = log.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,lr,loss_total,loss_wei1,loss_wei2,loss_pre,train_mae"
        );
        assert_eq!(lines.count(), 2);

        let (cfg, params) = load_checkpoint(&summary.last_checkpoint).unwrap();
        assert_eq!(cfg, tiny_model());
        assert_eq!(params.len(), 74);
        assert!(load_checkpoint(&summary.best_checkpoint).is_ok());
    }

    #[test]
    fn two_runs_produce_bit_identical_logs_and_checkpoints() {
        let dataset = tiny_dataset(3, 32, 4);
        let run = || {
            let dir = tempdir().unwrap();
            let summary = train_loop(
                &tiny_model(),
                &tiny_train(2),
                &tiny_loss(),
                &LabelSpec::Fixed { sigma: 1.5 },
                &dataset,
                dir.path(),
            )
            .unwrap();
            (
                fs::read(&summary.metrics_path).unwrap(),
                fs::read(&summary.best_checkpoint).unwrap(),
                fs::read(&summary.last_checkpoint).unwrap(),
            )
        };
        let (log_a, best_a, last_a) = run();
        let (log_b, best_b, last_b) = run();
        assert_eq!(log_a, log_b);
        assert_eq!(best_a, best_b);
        assert_eq!(last_a, last_b);
    }

    #[test]
    fn non_finite_loss_aborts_and_keeps_the_last_good_checkpoint() {
        let dir = tempdir().unwrap();
        let dataset = tiny_dataset(1, 32, 4);
        // One Adam step of this size pushes the weights to ~1e250, so the
        // next forward pass overflows and the loop must bail out.
        let train_cfg = TrainConfig {
            lr0: 1e250,
            batch_size: 1,
            epochs: 4,
            crop: 32,
            seed: 3,
            ..TrainConfig::default()
        };
        let err = train_loop(
            &tiny_model(),
            &train_cfg,
            &tiny_loss(),
            &LabelSpec::Fixed { sigma: 1.5 },
            &dataset,
            dir.path(),
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::NonFinite { .. }),
            "unexpected error {}",
            err
        );
        // The surviving checkpoint loads and is finite (the loader verifies).
        assert!(load_checkpoint(&dir.path().join("last.cckp")).is_ok());
    }

    #[test]
    fn train_loop_rejects_an_empty_dataset() {
        let dir = tempdir().unwrap();
        let got = train_loop(
            &tiny_model(),
            &tiny_train(1),
            &tiny_loss(),
            &LabelSpec::default(),
            &[],
            dir.path(),
        );
        assert!(got.is_err());
    }
}
