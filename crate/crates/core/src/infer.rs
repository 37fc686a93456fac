//! Sliding-window and point-prompted inference over full images, and the
//! dataset evaluation report.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{sample_sparse_points, Sample};
use crate::dataset::labels_to_png_bytes;
use crate::error::{Error, Result};
use crate::grid::{Grid, Point};
use crate::metrics::{aji, connected_components, dice, pq, Rle};
use crate::model::ModelState;
use crate::seed::{self, salt};

/// Window origins along one axis: multiples of `stride`, with the last window
/// clamped to end at the border.
pub fn window_offsets(len: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 || stride > window {
        return Err(Error::invalid("stride must lie in 1..=window"));
    }
    if len < window {
        return Err(Error::invalid(format!(
            "image extent {len} smaller than window {window}"
        )));
    }
    let mut out: Vec<usize> = (0..=len - window).step_by(stride).collect();
    if *out.last().unwrap() != len - window {
        out.push(len - window);
    }
    Ok(out)
}

/// Stitched logits and density for a full image.
#[derive(Clone, Debug, PartialEq)]
pub struct FullPrediction {
    /// `[H·W, 2]` row-major logits.
    pub logits: Vec<f64>,
    pub density: Grid<f64>,
    pub windows: usize,
}

impl FullPrediction {
    pub fn dims(&self) -> (usize, usize) {
        self.density.dims()
    }

    pub fn foreground(&self) -> Grid<bool> {
        let (h, w) = self.dims();
        let fg = self.logits.chunks_exact(2).map(|l| l[1] > l[0]).collect();
        Grid::from_vec(h, w, fg).expect("sized by construction")
    }

    pub fn foreground_probability(&self) -> Grid<f64> {
        let (h, w) = self.dims();
        let p = self
            .logits
            .chunks_exact(2)
            .map(|l| 1.0 / (1.0 + (l[0] - l[1]).exp()))
            .collect();
        Grid::from_vec(h, w, p).expect("sized by construction")
    }
}

/// Tiles the image into crop-sized windows, routes each prompt into every
/// window containing it, and averages overlapping outputs uniformly.
pub fn sliding_window_predict(
    model: &ModelState,
    image: &Grid<f64>,
    stride: usize,
    prompts: &[Point],
) -> Result<FullPrediction> {
    let win = model.config().image_crop;
    let (h, w) = image.dims();
    for (i, p) in prompts.iter().enumerate() {
        if !image.contains(*p) {
            return Err(Error::OutOfBounds { index: i });
        }
    }
    let rows = window_offsets(h, win, stride)?;
    let cols = window_offsets(w, win, stride)?;
    let mut logits = vec![0.0; h * w * 2];
    let mut density = vec![0.0; h * w];
    let mut count = vec![0u32; h * w];
    for &top in &rows {
        for &left in &cols {
            let crop = image.crop(top, left, win, win);
            let local: Vec<Point> = prompts
                .iter()
                .filter(|p| {
                    p.row >= top && p.row < top + win && p.col >= left && p.col < left + win
                })
                .map(|p| Point::new(p.row - top, p.col - left))
                .collect();
            let pred = model.predict(&crop, &local)?;
            for r in 0..win {
                for c in 0..win {
                    let (src, dst) = (r * win + c, (top + r) * w + left + c);
                    logits[2 * dst] += pred.logits[2 * src];
                    logits[2 * dst + 1] += pred.logits[2 * src + 1];
                    density[dst] += pred.density[src];
                    count[dst] += 1;
                }
            }
        }
    }
    for (i, &n) in count.iter().enumerate() {
        let n = n as f64;
        logits[2 * i] /= n;
        logits[2 * i + 1] /= n;
        density[i] /= n;
    }
    Ok(FullPrediction {
        logits,
        density: Grid::from_vec(h, w, density)?,
        windows: rows.len() * cols.len(),
    })
}

pub fn default_stride(model: &ModelState) -> usize {
    (model.config().image_crop / 2).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub mask: Grid<bool>,
    pub instances: Grid<u32>,
    pub num_instances: usize,
}

/// Duplicate points collapse to their first occurrence.
pub fn dedup_points(points: &[Point]) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::with_capacity(points.len());
    for p in points {
        if !out.contains(p) {
            out.push(*p);
        }
    }
    out
}

/// Point-prompted segmentation of a full image; an empty point list is the
/// promptless path.
pub fn interactive_predict(
    model: &ModelState,
    image: &Grid<f64>,
    points: &[Point],
) -> Result<Segmentation> {
    for (i, p) in points.iter().enumerate() {
        if !image.contains(*p) {
            return Err(Error::OutOfBounds { index: i });
        }
    }
    let pred = sliding_window_predict(model, image, default_stride(model), &dedup_points(points))?;
    Ok(segment(&pred))
}

pub fn segment(pred: &FullPrediction) -> Segmentation {
    let mask = pred.foreground();
    let instances = connected_components(&mask);
    let num_instances = instances.data().iter().copied().max().unwrap_or(0) as usize;
    Segmentation {
        mask,
        instances,
        num_instances,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dice: f64,
    pub aji: f64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub dice: f64,
    pub aji: f64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub prompt_fraction: f64,
    pub seed: u64,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean: MeanMetrics,
    pub config_digest: String,
}

/// Hex SHA-256 of a value's JSON serialization.
pub fn digest<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

pub fn score(id: &str, seg: &Segmentation, sample: &Sample) -> Result<ImageMetrics> {
    let q = pq(&seg.instances, &sample.instances)?;
    Ok(ImageMetrics {
        id: id.to_string(),
        dice: dice(&seg.mask, &sample.foreground())?,
        aji: aji(&seg.instances, &sample.instances)?,
        pq: q.pq,
        sq: q.sq,
        rq: q.rq,
    })
}

pub fn mean_metrics(per_image: &[ImageMetrics]) -> MeanMetrics {
    let n = per_image.len().max(1) as f64;
    let avg = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    MeanMetrics {
        dice: avg(|m| m.dice),
        aji: avg(|m| m.aji),
        pq: avg(|m| m.pq),
        sq: avg(|m| m.sq),
        rq: avg(|m| m.rq),
    }
}

/// Test prompts for a sample: a fixed-seed fraction of its ground-truth
/// centers.
pub fn test_prompts(sample: &Sample, fraction: f64, seed: u64, index: usize) -> Vec<Point> {
    if fraction <= 0.0 {
        return Vec::new();
    }
    sample_sparse_points(
        &sample.centers,
        fraction,
        seed::mix(seed, salt::EVAL, index as u64),
    )
}

/// Per-image segmentations and metrics.
pub fn evaluate_with_masks(
    model: &ModelState,
    samples: &[Sample],
    config: &EvalConfig,
) -> Result<(MetricsReport, Vec<Segmentation>)> {
    if !(0.0..=1.0).contains(&config.prompt_fraction) {
        return Err(Error::invalid("prompt fraction must lie in [0, 1]"));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    let mut segs = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let prompts = test_prompts(s, config.prompt_fraction, config.seed, i);
        let pred = sliding_window_predict(model, &s.image, config.stride, &prompts)?;
        let seg = segment(&pred);
        per_image.push(score(&s.id, &seg, s)?);
        segs.push(seg);
    }
    let mean = mean_metrics(&per_image);
    let config_digest = digest(&serde_json::json!({
        "eval": config,
        "model": model.config(),
        "step": model.step,
    }))?;
    Ok((
        MetricsReport {
            per_image,
            mean,
            config_digest,
        },
        segs,
    ))
}

pub fn evaluate(
    model: &ModelState,
    samples: &[Sample],
    config: &EvalConfig,
) -> Result<MetricsReport> {
    Ok(evaluate_with_masks(model, samples, config)?.0)
}

/// Writes `<id>_pred.png` (16-bit instance map) and `<id>_pred.rle.json`.
pub fn export_masks(dir: &Path, ids: &[&str], segs: &[Segmentation]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (id, seg) in ids.iter().zip(segs) {
        std::fs::write(
            dir.join(format!("{id}_pred.png")),
            labels_to_png_bytes(&seg.instances)?,
        )?;
        std::fs::write(
            dir.join(format!("{id}_pred.rle.json")),
            serde_json::to_vec(&Rle::encode(&seg.mask))?,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn offsets() {
        assert_eq!(window_offsets(64, 64, 32).unwrap(), vec![0]);
        assert_eq!(window_offsets(96, 64, 32).unwrap(), vec![0, 32]);
        assert_eq!(window_offsets(100, 64, 32).unwrap(), vec![0, 32, 36]);
        assert!(window_offsets(63, 64, 32).is_err());
        assert!(window_offsets(64, 64, 65).is_err());
    }

    #[test]
    fn single_window_is_identity() {
        let m = ModelState::new(ModelConfig::tiny(), 1).unwrap();
        let img = Grid::from_vec(16, 16, (0..256).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let full = sliding_window_predict(&m, &img, 8, &[Point::new(3, 4)]).unwrap();
        let one = m.predict(&img, &[Point::new(3, 4)]).unwrap();
        assert_eq!(full.windows, 1);
        assert_eq!(full.logits, one.logits);
        assert_eq!(full.density.data(), &one.density[..]);
    }

    #[test]
    fn stride_equal_to_window_matches_tiles() {
        let m = ModelState::new(ModelConfig::tiny(), 2).unwrap();
        let img = Grid::from_vec(
            32,
            48,
            (0..32 * 48)
                .map(|i| ((i * 13) % 17) as f64 / 17.0)
                .collect(),
        )
        .unwrap();
        let full = sliding_window_predict(&m, &img, 16, &[]).unwrap();
        assert_eq!(full.windows, 6);
        for top in [0, 16] {
            for left in [0, 16, 32] {
                let tile = m.predict(&img.crop(top, left, 16, 16), &[]).unwrap();
                for r in 0..16 {
                    for c in 0..16 {
                        let i = (top + r) * 48 + left + c;
                        assert_eq!(full.logits[2 * i + 1], tile.logits[2 * (r * 16 + c) + 1]);
                    }
                }
            }
        }
    }

    #[test]
    fn duplicate_and_invalid_points() {
        let m = ModelState::new(ModelConfig::tiny(), 3).unwrap();
        let img = Grid::filled(24, 24, 0.3);
        let p = Point::new(5, 6);
        let once = interactive_predict(&m, &img, &[p]).unwrap();
        let twice = interactive_predict(&m, &img, &[p, p]).unwrap();
        assert_eq!(once, twice);
        assert!(matches!(
            interactive_predict(&m, &img, &[p, Point::new(0, 24)]),
            Err(Error::OutOfBounds { index: 1 })
        ));
        assert_eq!(
            interactive_predict(&m, &img, &[]).unwrap(),
            segment(&sliding_window_predict(&m, &img, 8, &[]).unwrap())
        );
    }

    #[test]
    fn constant_image_overlaps_average_uniformly() {
        let m = ModelState::new(ModelConfig::tiny(), 4).unwrap();
        let img = Grid::filled(24, 24, 0.5);
        let full = sliding_window_predict(&m, &img, 8, &[]).unwrap();
        assert_eq!(full.windows, 4);
        // Every window sees the same constant crop.
        let tile = m.predict(&img.crop(0, 0, 16, 16), &[]).unwrap();
        for r in 0..24 {
            for c in 0..24 {
                let rs: Vec<usize> = [0, 8]
                    .into_iter()
                    .filter(|&t| r >= t && r < t + 16)
                    .map(|t| r - t)
                    .collect();
                let cs: Vec<usize> = [0, 8]
                    .into_iter()
                    .filter(|&t| c >= t && c < t + 16)
                    .map(|t| c - t)
                    .collect();
                let mut want = 0.0;
                for &a in &rs {
                    for &b in &cs {
                        want += tile.logits[2 * (a * 16 + b)];
                    }
                }
                want /= (rs.len() * cs.len()) as f64;
                assert!((full.logits[2 * (r * 24 + c)] - want).abs() < 1e-6);
            }
        }
    }
}
