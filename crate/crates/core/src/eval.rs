//! Whole-image counting inference, MAE/MSE metrics, density-level
//! breakdowns, and export of prediction maps and scatter data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::densitymap::DensityMap;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{insert_params, network_forward, ModelConfig, ModelParams};
use crate::ops;
use crate::tensor::Tensor;

/// One evaluated image: ground-truth count vs. predicted count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImage {
    pub image_id: String,
    pub gt_count: f64,
    pub pred_count: f64,
}

/// Bucket metrics of a density level; `images` is the bucket size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub images: usize,
    pub mae: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub mse: f64,
    pub per_image: Vec<PerImage>,
    /// Present when a level breakdown was requested; empty buckets are
    /// absent from the map.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub levels: Option<BTreeMap<String, LevelMetrics>>,
}

/// One test image with its ground-truth head count.
#[derive(Clone, Debug)]
pub struct EvalSample {
    /// (3, H, W) RGB in [0, 1].
    pub image: Tensor,
    pub gt_count: f64,
    pub image_id: String,
}

use crate::ops::mirror;

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Runs the network on one whole image. Inputs that are not divisible by
/// 16 are reflection-padded on the right and bottom, and the prediction
/// map is cropped back to ceil(H/8) x ceil(W/8) afterwards, so the count
/// never includes purely padded rows or columns.
pub fn predict_count(
    image: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(f64, DensityMap)> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape(
            "predict_count",
            format!("expected a (3, H, W) image, got {:?}", shape),
        ));
    }
    let (h, w) = (shape[1], shape[2]);
    if h == 0 || w == 0 {
        return Err(Error::shape("predict_count", "image has an empty axis".to_string()));
    }
    let h16 = ceil_div(h, 16) * 16;
    let w16 = ceil_div(w, 16) * 16;

    let src = image.data();
    let mut padded = vec![0.0; 3 * h16 * w16];
    for c in 0..3 {
        for r in 0..h16 {
            let sr = mirror(r, h);
            for col in 0..w16 {
                padded[(c * h16 + r) * w16 + col] = src[(c * h + sr) * w + mirror(col, w)];
            }
        }
    }
    let input = Tensor::from_vec(vec![1, 3, h16, w16], padded)?;

    let mut g = Graph::new();
    let nodes = insert_params(&mut g, params);
    let img = g.leaf(input);
    let outputs = network_forward(&mut g, img, &nodes, cfg)?;
    let pred = g.value(outputs.f_pre);
    let (_, _, ph, pw) = pred.dims4()?;

    let out_h = ceil_div(h, 8);
    let out_w = ceil_div(w, 8);
    debug_assert!(out_h <= ph && out_w <= pw);
    let full = pred.data();
    let mut values = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        values.extend_from_slice(&full[r * pw..][..out_w]);
    }
    let map = DensityMap::from_values(out_w, out_h, values)?;
    Ok((map.sum(), map))
}

/// MAE and MSE over per-image counts: the mean absolute residual, and the
/// root of the mean squared residual (the customary square-rooted form).
pub fn mae_mse(rows: &[PerImage]) -> Result<(f64, f64)> {
    if rows.is_empty() {
        return Err(Error::invalid("mae_mse", "no rows to aggregate"));
    }
    let n = rows.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for r in rows {
        let d = r.pred_count - r.gt_count;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

fn bucket_name(bounds: &[f64], idx: usize) -> String {
    if idx == 0 {
        format!("[0,{}]", bounds[0])
    } else if idx < bounds.len() {
        format!("({},{}]", bounds[idx - 1], bounds[idx])
    } else {
        format!(">{}", bounds[bounds.len() - 1])
    }
}

/// Buckets rows by ground-truth count at the given thresholds (each bucket
/// closed on its upper bound) and aggregates MAE/MSE per bucket. Buckets
/// that receive no rows are left out.
pub fn level_breakdown(
    rows: &[PerImage],
    bounds: &[f64],
) -> Result<BTreeMap<String, LevelMetrics>> {
    if bounds.is_empty() {
        return Err(Error::invalid("level_breakdown", "no level bounds given"));
    }
    if bounds.windows(2).any(|p| !(p[0] < p[1])) || bounds.iter().any(|b| !b.is_finite()) {
        return Err(Error::invalid(
            "level_breakdown",
            format!("bounds must be finite and strictly increasing, got {:?}", bounds),
        ));
    }
    let mut buckets: Vec<Vec<PerImage>> = vec![Vec::new(); bounds.len() + 1];
    for row in rows {
        let idx = bounds
            .iter()
            .position(|&b| row.gt_count <= b)
            .unwrap_or(bounds.len());
        buckets[idx].push(row.clone());
    }
    let mut out = BTreeMap::new();
    for (idx, bucket) in buckets.iter().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        let (mae, mse) = mae_mse(bucket)?;
        out.insert(
            bucket_name(bounds, idx),
            LevelMetrics {
                images: bucket.len(),
                mae,
                mse,
            },
        );
    }
    Ok(out)
}

/// Evaluates every sample (in parallel when enabled; the report order is
/// the input order either way) and aggregates the metrics.
pub fn evaluate(
    samples: &[EvalSample],
    params: &ModelParams,
    cfg: &ModelConfig,
    level_bounds: Option<&[f64]>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate", "no samples to evaluate"));
    }
    if let Some(bad) = samples.iter().find(|s| !(s.gt_count >= 0.0)) {
        return Err(Error::invalid(
            "evaluate",
            format!("ground-truth count of `{}` is {}", bad.image_id, bad.gt_count),
        ));
    }

    let predict = |s: &EvalSample| -> Result<PerImage> {
        let (count, _) = predict_count(&s.image, params, cfg)?;
        Ok(PerImage {
            image_id: s.image_id.clone(),
            gt_count: s.gt_count,
            pred_count: count,
        })
    };
    let per_image: Vec<PerImage> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            samples.par_iter().map(predict).collect::<Result<_>>()?
        }
        #[cfg(not(feature = "parallel"))]
        samples.iter().map(predict).collect::<Result<_>>()?
    };

    let (mae, mse) = mae_mse(&per_image)?;
    let levels = match level_bounds {
        Some(bounds) => Some(level_breakdown(&per_image, bounds)?),
        None => None,
    };
    Ok(EvalReport {
        mae,
        mse,
        per_image,
        levels,
    })
}

/// Shrinks oversized inputs: when the longer side exceeds `max_side` the
/// image is bilinearly resized by `scale` once. Smaller images come back
/// unchanged. Counting is unaffected because the prediction map is
/// re-rendered at the new resolution, not rescaled.
pub fn rescale_if_oversized(image: &Tensor, max_side: usize, scale: f64) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape(
            "rescale_if_oversized",
            format!("expected a (3, H, W) image, got {:?}", shape),
        ));
    }
    if !(scale > 0.0 && scale < 1.0) {
        return Err(Error::invalid(
            "rescale_if_oversized",
            format!("scale must lie in (0, 1), got {}", scale),
        ));
    }
    let (h, w) = (shape[1], shape[2]);
    if h.max(w) <= max_side {
        return Ok(image.clone());
    }
    let out_h = ((h as f64 * scale).round() as usize).max(1);
    let out_w = ((w as f64 * scale).round() as usize).max(1);
    let batched = Tensor::from_vec(vec![1, 3, h, w], image.data().to_vec())?;
    let resized = ops::bilinear_resize(&batched, out_h, out_w)?;
    Tensor::from_vec(vec![3, out_h, out_w], resized.into_data())
}

/// Writes `gt,pred` pairs, one line per evaluated image, for scatter or
/// regression plots.
pub fn write_scatter_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(out, "gt,pred")?;
        for row in &report.per_image {
            writeln!(out, "{},{}", row.gt_count, row.pred_count)?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

/// Report serialization: pretty JSON with a stable field and key order.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, json.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, 0, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
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

    fn rows(residuals: &[f64]) -> Vec<PerImage> {
        residuals
            .iter()
            .enumerate()
            .map(|(i, &d)| PerImage {
                image_id: format!("img_{}", i),
                gt_count: 10.0,
                pred_count: 10.0 + d,
            })
            .collect()
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        let data = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn residuals_3_and_minus_4_give_the_reference_metrics() {
        let (mae, mse) = mae_mse(&rows(&[3.0, -4.0])).unwrap();
        assert_eq!(mae, 3.5);
        // sqrt((9 + 16) / 2), evaluated with 40-digit arithmetic.
        assert!((mse - 3.5355339059327378).abs() < 1e-15, "{}", mse);
    }

    #[test]
    fn perfect_predictions_score_zero() {
        assert_eq!(mae_mse(&rows(&[0.0, 0.0, 0.0])).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn single_residual_makes_mae_equal_mse() {
        let (mae, mse) = mae_mse(&rows(&[-7.0])).unwrap();
        assert_eq!((mae, mse), (7.0, 7.0));
    }

    #[test]
    fn empty_rows_are_rejected() {
        assert!(mae_mse(&[]).is_err());
    }

    #[test]
    fn mae_never_exceeds_mse_on_random_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.gen_range(1..20);
            let residuals: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let (mae, mse) = mae_mse(&rows(&residuals)).unwrap();
            assert!(mae <= mse + 1e-12, "mae {} mse {}", mae, mse);
        }
    }

    fn breakdown_rows() -> Vec<PerImage> {
        vec![
            PerImage { image_id: "low".into(), gt_count: 10.0, pred_count: 12.0 },
            PerImage { image_id: "mid".into(), gt_count: 100.0, pred_count: 90.0 },
            PerImage { image_id: "high".into(), gt_count: 600.0, pred_count: 650.0 },
        ]
    }

    #[test]
    fn counts_bucket_into_the_published_ranges() {
        let levels = level_breakdown(&breakdown_rows(), &[50.0, 500.0]).unwrap();
        assert_eq!(levels.len(), 3);
        assert_eq!(levels["[0,50]"].images, 1);
        assert_eq!(levels["[0,50]"].mae, 2.0);
        assert_eq!(levels["(50,500]"].images, 1);
        assert_eq!(levels["(50,500]"].mae, 10.0);
        assert_eq!(levels[">500"].images, 1);
        assert_eq!(levels[">500"].mae, 50.0);
    }

    #[test]
    fn boundary_count_falls_in_the_closed_lower_bucket() {
        let rows = vec![PerImage {
            image_id: "edge".into(),
            gt_count: 50.0,
            pred_count: 49.0,
        }];
        let levels = level_breakdown(&rows, &[50.0, 500.0]).unwrap();
        assert_eq!(levels.len(), 1);
        assert!(levels.contains_key("[0,50]"));
    }

    #[test]
    fn degenerate_bucketing_reproduces_overall_metrics() {
        let all = rows(&[3.0, -4.0, 1.0]);
        let (mae, mse) = mae_mse(&all).unwrap();
        let levels = level_breakdown(&all, &[1000.0]).unwrap();
        assert_eq!(levels.len(), 1);
        let bucket = &levels["[0,1000]"];
        assert_eq!(bucket.images, 3);
        assert_eq!((bucket.mae, bucket.mse), (mae, mse));
    }

    #[test]
    fn bucket_sizes_partition_the_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<PerImage> = (0..40)
            .map(|i| PerImage {
                image_id: format!("r{}", i),
                gt_count: rng.gen_range(0.0..800.0),
                pred_count: rng.gen_range(0.0..800.0),
            })
            .collect();
        let levels = level_breakdown(&rows, &[50.0, 500.0]).unwrap();
        let total: usize = levels.values().map(|l| l.images).sum();
        assert_eq!(total, 40);
    }

    #[test]
    fn bad_bounds_are_rejected() {
        assert!(level_breakdown(&breakdown_rows(), &[]).is_err());
        assert!(level_breakdown(&breakdown_rows(), &[50.0, 50.0]).is_err());
        assert!(level_breakdown(&breakdown_rows(), &[500.0, 50.0]).is_err());
        assert!(level_breakdown(&breakdown_rows(), &[50.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn zeroed_parameters_predict_a_count_of_zero() {
        let cfg = tiny_model();
        let mut params = init_params(&cfg).unwrap();
        for (_, t) in params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image = random_image(&mut rng, 32, 32);
        let (count, map) = predict_count(&image, &params, &cfg).unwrap();
        assert_eq!(count, 0.0);
        assert!(map.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn awkward_sizes_are_padded_then_cropped_back() {
        let cfg = tiny_model();
        let params = init_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let image = random_image(&mut rng, 35, 41);
        let (count, map) = predict_count(&image, &params, &cfg).unwrap();
        assert_eq!((map.height(), map.width()), (5, 6));
        assert!((count - map.sum()).abs() < 1e-12);
        assert!(count.is_finite());
    }

    #[test]
    fn prediction_is_deterministic() {
        let cfg = tiny_model();
        let params = init_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let image = random_image(&mut rng, 32, 48);
        let (a, _) = predict_count(&image, &params, &cfg).unwrap();
        let (b, _) = predict_count(&image, &params, &cfg).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn exported_csv_map_sums_to_the_predicted_count() {
        let cfg = tiny_model();
        let params = init_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let image = random_image(&mut rng, 32, 32);
        let (count, map) = predict_count(&image, &params, &cfg).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("pred.csv");
        crate::imgio::write_density_csv(&path, &map).unwrap();
        let back = crate::imgio::read_density_csv(&path).unwrap();
        assert!((back.sum() - count).abs() < 1e-6);
    }

    #[test]
    fn evaluate_reports_rows_in_input_order() {
        let cfg = tiny_model();
        let params = init_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples: Vec<EvalSample> = (0..3)
            .map(|i| EvalSample {
                image: random_image(&mut rng, 16, 16),
                gt_count: (i * 5) as f64,
                image_id: format!("scene_{}", i),
            })
            .collect();
        let report = evaluate(&samples, &params, &cfg, Some(&[50.0, 500.0])).unwrap();
        assert_eq!(report.per_image.len(), 3);
        for (i, row) in report.per_image.iter().enumerate() {
            assert_eq!(row.image_id, format!("scene_{}", i));
        }
        let (mae, mse) = mae_mse(&report.per_image).unwrap();
        assert_eq!((report.mae, report.mse), (mae, mse));
        let levels = report.levels.as_ref().unwrap();
        assert_eq!(levels.values().map(|l| l.images).sum::<usize>(), 3);

        let plain = evaluate(&samples, &params, &cfg, None).unwrap();
        assert!(plain.levels.is_none());
        assert_eq!(plain.mae, report.mae);
    }

    #[test]
    fn evaluate_rejects_negative_ground_truth() {
        let cfg = tiny_model();
        let params = init_params(&cfg).unwrap();
        let samples = vec![EvalSample {
            image: Tensor::zeros(&[3, 16, 16]),
            gt_count: -1.0,
            image_id: "bad".into(),
        }];
        assert!(evaluate(&samples, &params, &cfg, None).is_err());
    }

    #[test]
    fn report_json_round_trips() {
        let report = EvalReport {
            mae: 1.25,
            mse: 2.5,
            per_image: breakdown_rows(),
            levels: Some(level_breakdown(&breakdown_rows(), &[50.0]).unwrap()),
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("report.json");
        write_report(&path, &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"mae\"") && text.contains("\"levels\""));
        let back = read_report(&path).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn scatter_csv_has_one_line_per_image() {
        let report = EvalReport {
            mae: 0.0,
            mse: 0.0,
            per_image: breakdown_rows(),
            levels: None,
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("scatter.csv");
        write_scatter_csv(&path, &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "gt,pred");
        assert_eq!(lines[1], "10,12");
    }

    #[test]
    fn oversized_images_shrink_once_smaller_ones_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let small = random_image(&mut rng, 40, 60);
        let same = rescale_if_oversized(&small, 100, 0.8).unwrap();
        assert_eq!(same.data(), small.data());

        let big = random_image(&mut rng, 50, 150);
        let shrunk = rescale_if_oversized(&big, 100, 0.8).unwrap();
        assert_eq!(shrunk.shape(), &[3, 40, 120]);
        assert!(shrunk.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(rescale_if_oversized(&big, 100, 1.5).is_err());
    }
}
