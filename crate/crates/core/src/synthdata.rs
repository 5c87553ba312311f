//! Synthetic crowd scenes: light backgrounds with dark head discs at known
//! positions, so the whole pipeline can be exercised and overfit without
//! any external dataset. Everything is seeded and byte-reproducible.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::densitymap::{save_annotations_json, AnnotationSet};
use crate::error::{Error, Result};
use crate::imgio::write_ppm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    /// One uniform light color.
    Flat,
    /// Linear blend between two light colors across the diagonal.
    Gradient,
    /// Flat base with per-pixel uniform noise.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub n_points: usize,
    /// Head disc radius range in pixels, inclusive on both ends.
    pub head_radius_range: (f64, f64),
    pub background: Background,
    /// Sample positions from a 1-4 component Gaussian mixture instead of
    /// uniformly, giving the dense clumps real crowds have.
    pub clustered: bool,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 256,
            height: 256,
            n_points: 50,
            head_radius_range: (2.0, 5.0),
            background: Background::Gradient,
            clustered: true,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.width < 2 || self.height < 2 {
            out.push(format!(
                "scene: extent must be at least 2x2, got {}x{}",
                self.width, self.height
            ));
        }
        let (lo, hi) = self.head_radius_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            out.push(format!(
                "scene: head radius range must satisfy 0 < min <= max, got ({}, {})",
                lo, hi
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

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn paint_background(spec: &SceneSpec, rng: &mut ChaCha8Rng, data: &mut [f64]) {
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let light = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        [
            rng.gen_range(0.55..0.9),
            rng.gen_range(0.55..0.9),
            rng.gen_range(0.55..0.9),
        ]
    };
    match spec.background {
        Background::Flat => {
            let color = light(rng);
            for c in 0..3 {
                data[c * plane..(c + 1) * plane].fill(color[c]);
            }
        }
        Background::Gradient => {
            let a = light(rng);
            let b = light(rng);
            for r in 0..h {
                let ty = if h > 1 { r as f64 / (h - 1) as f64 } else { 0.0 };
                for col in 0..w {
                    let tx = if w > 1 { col as f64 / (w - 1) as f64 } else { 0.0 };
                    let t = 0.5 * (ty + tx);
                    for c in 0..3 {
                        data[c * plane + r * w + col] = a[c] + (b[c] - a[c]) * t;
                    }
                }
            }
        }
        Background::Noise => {
            let base = light(rng);
            for c in 0..3 {
                for i in 0..plane {
                    data[c * plane + i] = clamp01(base[c] + rng.gen_range(-0.08..0.08));
                }
            }
        }
    }
}

/// Head positions, either uniform over the usable area or from a small
/// Gaussian mixture whose components are themselves seeded draws.
fn sample_points(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let x_hi = spec.width as f64 - 0.5;
    let y_hi = spec.height as f64 - 0.5;
    if !spec.clustered {
        return (0..spec.n_points)
            .map(|_| (rng.gen_range(0.5..x_hi), rng.gen_range(0.5..y_hi)))
            .collect();
    }
    let k = rng.gen_range(1..=4usize);
    let spread = (spec.width.min(spec.height) as f64 / 6.0).max(1.0);
    let clusters: Vec<(f64, f64, Normal<f64>)> = (0..k)
        .map(|_| {
            let cx = rng.gen_range(0.5..x_hi);
            let cy = rng.gen_range(0.5..y_hi);
            (cx, cy, Normal::new(0.0, spread).expect("positive spread"))
        })
        .collect();
    (0..spec.n_points)
        .map(|_| {
            let (cx, cy, normal) = &clusters[rng.gen_range(0..k)];
            let x = (cx + normal.sample(rng)).clamp(0.5, x_hi - 1e-9);
            let y = (cy + normal.sample(rng)).clamp(0.5, y_hi - 1e-9);
            (x, y)
        })
        .collect()
}

fn draw_disc(data: &mut [f64], w: usize, h: usize, x: f64, y: f64, rad: f64, rng: &mut ChaCha8Rng) {
    let plane = h * w;
    let body = [
        rng.gen_range(0.05..0.4),
        rng.gen_range(0.05..0.4),
        rng.gen_range(0.05..0.4),
    ];
    let rim_w = (0.4 * rad).min(1.0);
    let r0 = ((y - rad).floor().max(0.0)) as usize;
    let r1 = ((y + rad).ceil() as usize).min(h - 1);
    let c0 = ((x - rad).floor().max(0.0)) as usize;
    let c1 = ((x + rad).ceil() as usize).min(w - 1);
    for r in r0..=r1 {
        for col in c0..=c1 {
            let d = ((col as f64 - x).powi(2) + (r as f64 - y).powi(2)).sqrt();
            if d > rad {
                continue;
            }
            // The rim ring is darker than the body so heads stay visually
            // separable even when discs touch.
            let factor = if d > rad - rim_w { 0.45 } else { 1.0 };
            for c in 0..3 {
                data[c * plane + r * w + col] = clamp01(body[c] * factor);
            }
        }
    }
}

/// Renders one scene. All randomness comes from the spec seed, in a fixed
/// draw order, so equal specs give bit-identical images and annotations.
pub fn generate(spec: &SceneSpec) -> Result<(Tensor, AnnotationSet)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = vec![0.0; 3 * h * w];
    paint_background(spec, &mut rng, &mut data);
    let points = sample_points(spec, &mut rng);
    for &(x, y) in &points {
        let rad = rng.gen_range(spec.head_radius_range.0..=spec.head_radius_range.1);
        draw_disc(&mut data, w, h, x, y, rad, &mut rng);
    }
    let image = Tensor::from_vec(vec![3, h, w], data)?;
    let ann = AnnotationSet {
        image_id: format!("synthetic_{}", spec.seed),
        width: w,
        height: h,
        points,
    };
    Ok((image, ann))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub seed: u64,
    pub n_points: usize,
}

/// Everything needed to regenerate a split byte-for-byte: the template and
/// the per-scene seeds and densities drawn from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub master_seed: u64,
    pub density_range: (usize, usize),
    pub template: SceneSpec,
    pub train: Vec<SceneEntry>,
    pub test: Vec<SceneEntry>,
}

fn write_scene(dir: &Path, template: &SceneSpec, entry: &SceneEntry) -> Result<()> {
    let spec = SceneSpec {
        seed: entry.seed,
        n_points: entry.n_points,
        ..template.clone()
    };
    let (image, mut ann) = generate(&spec)?;
    ann.image_id = entry.id.clone();
    write_ppm(&dir.join(format!("{}.ppm", entry.id)), &image)?;
    save_annotations_json(&dir.join(format!("{}.json", entry.id)), &ann)
}

/// Generates `n_train` + `n_test` scenes under `out/train` and `out/test`,
/// with per-scene head counts drawn uniformly from `density_range`, and
/// writes a manifest from which the whole split can be regenerated.
pub fn generate_split(
    out: &Path,
    n_train: usize,
    n_test: usize,
    template: &SceneSpec,
    density_range: (usize, usize),
    seed: u64,
) -> Result<SplitManifest> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::invalid(
            "generate_split",
            format!("need at least one scene per split, got {}/{}", n_train, n_test),
        ));
    }
    if density_range.0 > density_range.1 {
        return Err(Error::invalid(
            "generate_split",
            format!("density range is inverted: {:?}", density_range),
        ));
    }
    template.validate()?;

    let mut layout_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw_entries = |count: usize, start: usize| -> Vec<SceneEntry> {
        (0..count)
            .map(|i| SceneEntry {
                id: format!("scene_{:03}", start + i),
                seed: layout_rng.gen(),
                n_points: layout_rng.gen_range(density_range.0..=density_range.1),
            })
            .collect()
    };
    let train = draw_entries(n_train, 0);
    let test = draw_entries(n_test, n_train);

    for (split, entries) in [("train", &train), ("test", &test)] {
        let dir = out.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let write = |entry: &SceneEntry| write_scene(&dir, template, entry);
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            entries.par_iter().try_for_each(write)?;
        }
        #[cfg(not(feature = "parallel"))]
        entries.iter().try_for_each(write)?;
    }

    let manifest = SplitManifest {
        master_seed: seed,
        density_range,
        template: template.clone(),
        train,
        test,
    };
    let path = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<SplitManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, 0, e.to_string()))
}
