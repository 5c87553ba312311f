//! Point annotations and their conversion to ground-truth density maps.
//!
//! Each annotated head becomes a discrete 2-D Gaussian. The kernel is
//! truncated at 4 sigma and renormalized over the pixels that survive both
//! the truncation and the image boundary, so every head contributes exactly
//! 1.0 to the map total no matter where it sits. Counting ground truth then
//! stays exact: map sum = head count.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Head positions for one image. Coordinates are pixels, x to the right,
/// y downward, with pixel (row r, column c) sitting at position (c, r).
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub points: Vec<(f64, f64)>,
}

impl AnnotationSet {
    /// Validates raw points against the image extent. Out-of-bounds
    /// coordinates are clamped into [0, extent - 0.001] and counted; the
    /// returned tally lets callers log how many annotations were touched.
    /// Non-finite coordinates cannot be clamped meaningfully and are
    /// rejected instead.
    pub fn ingest(
        image_id: impl Into<String>,
        width: usize,
        height: usize,
        points: Vec<(f64, f64)>,
    ) -> Result<(Self, usize)> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(
                "annotations",
                format!("image extent {}x{} must be positive", width, height),
            ));
        }
        let mut clamped = 0;
        let mut clean = Vec::with_capacity(points.len());
        for (i, (x, y)) in points.into_iter().enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::invalid(
                    "annotations",
                    format!("point {} has non-finite coordinates ({}, {})", i, x, y),
                ));
            }
            let cx = x.clamp(0.0, width as f64 - 0.001);
            let cy = y.clamp(0.0, height as f64 - 0.001);
            if cx != x || cy != y {
                clamped += 1;
            }
            clean.push((cx, cy));
        }
        Ok((
            AnnotationSet {
                image_id: image_id.into(),
                width,
                height,
                points: clean,
            },
            clamped,
        ))
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationFormat {
    /// `{"w":int,"h":int,"points":[[x,y],...]}`
    Json,
    /// Header `x,y`, one point per row; image extent in a `<name>.dims.json`
    /// sidecar holding `{"w":int,"h":int}`.
    Csv,
}

#[derive(Serialize, Deserialize)]
struct AnnotationJson {
    w: i64,
    h: i64,
    points: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct DimsJson {
    w: i64,
    h: i64,
}

fn checked_extent(path: &Path, w: i64, h: i64) -> Result<(usize, usize)> {
    if w <= 0 || h <= 0 {
        return Err(Error::parse(
            path,
            0,
            format!("image extent {}x{} must be positive", w, h),
        ));
    }
    Ok((w as usize, h as usize))
}

fn image_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

/// Reads one annotation file. Returns the validated set together with the
/// number of points that had to be clamped into bounds.
pub fn load_annotations(path: &Path, format: AnnotationFormat) -> Result<(AnnotationSet, usize)> {
    match format {
        AnnotationFormat::Json => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let parsed: AnnotationJson = serde_json::from_str(&text)
                .map_err(|e| Error::parse(path, e.line(), format!("bad annotation JSON: {}", e)))?;
            let (w, h) = checked_extent(path, parsed.w, parsed.h)?;
            let points = parsed.points.iter().map(|p| (p[0], p[1])).collect();
            AnnotationSet::ingest(image_id_of(path), w, h, points)
        }
        AnnotationFormat::Csv => {
            let dims_path = path.with_extension("dims.json");
            let dims_text =
                fs::read_to_string(&dims_path).map_err(|e| Error::io(&dims_path, e))?;
            let dims: DimsJson = serde_json::from_str(&dims_text).map_err(|e| {
                Error::parse(&dims_path, e.line(), format!("bad dims JSON: {}", e))
            })?;
            let (w, h) = checked_extent(&dims_path, dims.w, dims.h)?;

            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut lines = text.lines().enumerate();
            match lines.next() {
                Some((_, header)) if header.trim() == "x,y" => {}
                Some((_, header)) => {
                    return Err(Error::parse(
                        path,
                        1,
                        format!("expected header `x,y`, found `{}`", header.trim()),
                    ))
                }
                None => return Err(Error::parse(path, 1, "empty file, expected header `x,y`")),
            }
            let mut points = Vec::new();
            for (i, line) in lines {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let mut fields = line.split(',');
                let x = fields.next().unwrap_or("").trim();
                let y = fields.next().unwrap_or("").trim();
                if y.is_empty() || fields.next().is_some() {
                    return Err(Error::parse(
                        path,
                        i + 1,
                        format!("expected two comma-separated fields, found `{}`", line),
                    ));
                }
                let parse = |s: &str, field: &str| -> Result<f64> {
                    s.parse::<f64>().map_err(|_| {
                        Error::parse(path, i + 1, format!("field {} is not a number: `{}`", field, s))
                    })
                };
                points.push((parse(x, "x")?, parse(y, "y")?));
            }
            AnnotationSet::ingest(image_id_of(path), w, h, points)
        }
    }
}

pub fn save_annotations_json(path: &Path, ann: &AnnotationSet) -> Result<()> {
    let json = AnnotationJson {
        w: ann.width as i64,
        h: ann.height as i64,
        points: ann.points.iter().map(|&(x, y)| [x, y]).collect(),
    };
    let text = serde_json::to_string(&json).expect("annotation serialization cannot fail");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Non-negative per-pixel head density; the pixel sum is the image's count.
/// Values are stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        DensityMap {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(
                "density_map",
                format!("{}x{} map wants {} values, got {}", width, height, width * height, values.len()),
            ));
        }
        Ok(DensityMap {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, &b| a.max(b))
    }

    /// View as a (1, 1, height, width) tensor for the loss pipeline.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![1, 1, self.height, self.width], self.values.clone())
            .expect("size matches by construction")
    }

    /// Inverse of [`DensityMap::to_tensor`]; accepts any single-channel
    /// (1, 1, h, w) tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if b != 1 || c != 1 {
            return Err(Error::shape(
                "density_map",
                format!("expected a (1, 1, h, w) tensor, got {:?}", t.shape()),
            ));
        }
        DensityMap::from_values(w, h, t.data().to_vec())
    }

    pub fn add(&self, other: &DensityMap) -> Result<DensityMap> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::shape(
                "density_map add",
                format!(
                    "{}x{} vs {}x{}",
                    self.width, self.height, other.width, other.height
                ),
            ));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        DensityMap::from_values(self.width, self.height, values)
    }
}

/// Adds one head's Gaussian to the map: truncated at 4 sigma, renormalized
/// over the surviving in-image pixels so the deposit totals exactly 1.
fn splat(map: &mut DensityMap, x: f64, y: f64, sigma: f64) {
    let (w, h) = (map.width, map.height);
    let radius = 4.0 * sigma;
    let c0 = (x - radius).ceil().max(0.0) as usize;
    let c1 = ((x + radius).floor().min(w as f64 - 1.0)).max(0.0) as usize;
    let r0 = (y - radius).ceil().max(0.0) as usize;
    let r1 = ((y + radius).floor().min(h as f64 - 1.0)).max(0.0) as usize;

    // A sub-half-pixel support (sigma < 1/8) can miss every pixel center;
    // the head's unit mass then goes to the nearest pixel instead of
    // silently vanishing.
    if c0 > c1 || r0 > r1 || (x - radius).ceil() > w as f64 - 1.0 || (y - radius).ceil() > h as f64 - 1.0 {
        let c = (x.round().max(0.0) as usize).min(w - 1);
        let r = (y.round().max(0.0) as usize).min(h - 1);
        map.values[r * w + c] += 1.0;
        return;
    }

    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut weights = Vec::with_capacity((r1 - r0 + 1) * (c1 - c0 + 1));
    let mut total = 0.0;
    for r in r0..=r1 {
        let dy = r as f64 - y;
        for c in c0..=c1 {
            let dx = c as f64 - x;
            let wgt = (-(dx * dx + dy * dy) * inv).exp();
            weights.push(wgt);
            total += wgt;
        }
    }
    let mut it = weights.into_iter();
    for r in r0..=r1 {
        for c in c0..=c1 {
            map.values[r * w + c] += it.next().expect("one weight per pixel") / total;
        }
    }
}

/// Renders every head with the same kernel width.
pub fn render_fixed(ann: &AnnotationSet, sigma: f64) -> Result<DensityMap> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(
            "render_fixed",
            format!("sigma must be positive, got {}", sigma),
        ));
    }
    let mut map = DensityMap::zeros(ann.width, ann.height);
    for &(x, y) in &ann.points {
        splat(&mut map, x, y, sigma);
    }
    Ok(map)
}

/// Per-point kernel widths for the geometry-adaptive renderer: beta times
/// the mean distance to the k nearest other points, clamped into
/// [sigma_min, sigma_max]. Points without k neighbours fall back to
/// sigma_max. Exposed separately so the neighbour arithmetic is directly
/// testable against a brute-force oracle.
pub fn adaptive_sigmas(
    ann: &AnnotationSet,
    k: usize,
    beta: f64,
    sigma_min: f64,
    sigma_max: f64,
) -> Result<Vec<f64>> {
    if k < 1 {
        return Err(Error::invalid("render_adaptive", "k must be at least 1"));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(
            "render_adaptive",
            format!("beta must be positive, got {}", beta),
        ));
    }
    if !(sigma_min > 0.0) || !(sigma_max >= sigma_min) {
        return Err(Error::invalid(
            "render_adaptive",
            format!("need 0 < sigma_min <= sigma_max, got [{}, {}]", sigma_min, sigma_max),
        ));
    }
    let pts = &ann.points;
    let n = pts.len();
    let sigma_of = |i: usize| -> f64 {
        if n <= k {
            return sigma_max;
        }
        let (xi, yi) = pts[i];
        let mut d2: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let (xj, yj) = pts[j];
                (xi - xj).powi(2) + (yi - yj).powi(2)
            })
            .collect();
        d2.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
        let mean: f64 = d2[..k].iter().map(|d| d.sqrt()).sum::<f64>() / k as f64;
        (beta * mean).clamp(sigma_min, sigma_max)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        Ok((0..n).into_par_iter().map(sigma_of).collect())
    }
    #[cfg(not(feature = "parallel"))]
    Ok((0..n).map(sigma_of).collect())
}

/// Renders each head with its own neighbour-derived kernel width.
pub fn render_adaptive(
    ann: &AnnotationSet,
    k: usize,
    beta: f64,
    sigma_min: f64,
    sigma_max: f64,
) -> Result<DensityMap> {
    let sigmas = adaptive_sigmas(ann, k, beta, sigma_min, sigma_max)?;
    let mut map = DensityMap::zeros(ann.width, ann.height);
    for (&(x, y), &sigma) in ann.points.iter().zip(&sigmas) {
        splat(&mut map, x, y, sigma);
    }
    Ok(map)
}

/// Brings a full-resolution map down to the prediction resolution by
/// non-overlapping block summation, preserving the total count.
pub fn to_target_grid(dm: &DensityMap, factor: usize) -> Result<DensityMap> {
    let pooled = ops::sumpool_forward(&dm.to_tensor(), factor)?;
    DensityMap::from_tensor(&pooled)
}

/// How ground-truth maps are rendered; serializable so training configs and
/// checkpoints can state it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LabelSpec {
    Fixed {
        sigma: f64,
    },
    Adaptive {
        k: usize,
        beta: f64,
        sigma_min: f64,
        sigma_max: f64,
    },
}

impl Default for LabelSpec {
    fn default() -> Self {
        LabelSpec::Fixed { sigma: 4.0 }
    }
}

impl LabelSpec {
    pub fn default_adaptive() -> Self {
        LabelSpec::Adaptive {
            k: 3,
            beta: 0.3,
            sigma_min: 1.0,
            sigma_max: 15.0,
        }
    }

    pub fn render(&self, ann: &AnnotationSet) -> Result<DensityMap> {
        match *self {
            LabelSpec::Fixed { sigma } => render_fixed(ann, sigma),
            LabelSpec::Adaptive {
                k,
                beta,
                sigma_min,
                sigma_max,
            } => render_adaptive(ann, k, beta, sigma_min, sigma_max),
        }
    }

    /// All problems with the spec, empty when valid.
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        match *self {
            LabelSpec::Fixed { sigma } => {
                if !(sigma > 0.0) {
                    out.push(format!("labels: sigma must be positive, got {}", sigma));
                }
            }
            LabelSpec::Adaptive {
                k,
                beta,
                sigma_min,
                sigma_max,
            } => {
                if k < 1 {
                    out.push("labels: k must be at least 1".to_string());
                }
                if !(beta > 0.0) {
                    out.push(format!("labels: beta must be positive, got {}", beta));
                }
                if !(sigma_min > 0.0) || !(sigma_max >= sigma_min) {
                    out.push(format!(
                        "labels: need 0 < sigma_min <= sigma_max, got [{}, {}]",
                        sigma_min, sigma_max
                    ));
                }
            }
        }
        out
    }
}
