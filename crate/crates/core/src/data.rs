//! Synthetic EM-like domains: generation, dot/density labels, sparse
//! annotation sampling, and paired weak/strong augmentation.

use std::collections::VecDeque;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{rot90_point, Grid, Point};
use crate::seed::{self, salt};

/// Density-map Gaussian width in pixels.
pub const DEFAULT_SIGMA: f64 = 4.0;
pub const DEFAULT_SPARSE_FRACTION: f64 = 0.15;
/// Minimum Chebyshev gap between two instances.
const INSTANCE_GAP: usize = 2;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub image_size: usize,
    /// Inclusive range.
    pub instances_per_image: (usize, usize),
    /// Semi-major axis range in pixels.
    pub instance_radius: (f64, f64),
    pub instance_eccentricity: (f64, f64),
    /// Per-instance multiplier on the foreground/background difference.
    pub instance_contrast: (f64, f64),
    pub foreground_mean: f64,
    pub background_mean: f64,
    pub noise_std: f64,
    /// Cycles per pixel of the background texture.
    pub texture_frequency: f64,
    pub texture_amplitude: f64,
    /// Relative radial wobble of instance boundaries.
    pub boundary_jitter: f64,
    pub seed: u64,
}

impl DomainSpec {
    /// Few large, high-contrast instances.
    pub fn source() -> Self {
        Self {
            image_size: 128,
            instances_per_image: (4, 7),
            instance_radius: (9.0, 14.0),
            instance_eccentricity: (0.0, 0.75),
            instance_contrast: (0.6, 1.0),
            foreground_mean: 0.72,
            background_mean: 0.36,
            noise_std: 0.06,
            texture_frequency: 0.05,
            texture_amplitude: 0.06,
            boundary_jitter: 0.08,
            seed: 11,
        }
    }

    /// More and smaller instances, a wider contrast range, stronger texture.
    pub fn target() -> Self {
        Self {
            image_size: 128,
            instances_per_image: (6, 10),
            instance_radius: (7.0, 11.0),
            instance_eccentricity: (0.0, 0.8),
            instance_contrast: (0.5, 1.0),
            foreground_mean: 0.72,
            background_mean: 0.36,
            noise_std: 0.08,
            texture_frequency: 0.1,
            texture_amplitude: 0.16,
            boundary_jitter: 0.1,
            seed: 23,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if self.image_size < 32 {
            return Err(Error::invalid("image_size must be at least 32"));
        }
        if self.instances_per_image.0 > self.instances_per_image.1 {
            return Err(Error::invalid("instances_per_image range is empty"));
        }
        if !ordered(self.instance_radius) || self.instance_radius.0 < 1.0 {
            return Err(Error::invalid(
                "instance_radius must be an ordered range ≥ 1",
            ));
        }
        if 2.0 * self.instance_radius.1 + 6.0 > self.image_size as f64 {
            return Err(Error::invalid("instance_radius too large for image_size"));
        }
        let (e0, e1) = self.instance_eccentricity;
        if !ordered(self.instance_eccentricity) || e0 < 0.0 || e1 >= 1.0 {
            return Err(Error::invalid("instance_eccentricity must lie in [0, 1)"));
        }
        if !ordered(self.instance_contrast) || self.instance_contrast.0 < 0.0 {
            return Err(Error::invalid(
                "instance_contrast must be an ordered non-negative range",
            ));
        }
        if !unit(self.foreground_mean) || !unit(self.background_mean) {
            return Err(Error::invalid("intensity means must lie in [0, 1]"));
        }
        if !(self.noise_std >= 0.0)
            || !(self.texture_amplitude >= 0.0)
            || !(self.texture_frequency >= 0.0)
        {
            return Err(Error::invalid(
                "noise and texture parameters must be non-negative",
            ));
        }
        if !(0.0..0.5).contains(&self.boundary_jitter) {
            return Err(Error::invalid("boundary_jitter must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

/// One image with full instance labels and derived point labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Intensities in [0, 1].
    pub image: Grid<f64>,
    /// 0 is background; instance `k` has center `centers[k - 1]`.
    pub instances: Grid<u32>,
    pub centers: Vec<Point>,
    /// Annotated subset of `centers`.
    pub sparse: Vec<Point>,
    pub density: Grid<f64>,
    pub sigma: f64,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        self.image.dims()
    }

    pub fn foreground(&self) -> Grid<bool> {
        self.instances.map(|v| v != 0)
    }

    /// Checks every structural invariant of a sample.
    pub fn check_invariants(&self) -> Result<()> {
        let (h, w) = self.size();
        if self.instances.dims() != (h, w) || self.density.dims() != (h, w) {
            return Err(Error::invalid("sample maps differ in size"));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image intensity outside [0, 1]"));
        }
        let k = self.centers.len() as u32;
        let mut seen = vec![false; self.centers.len()];
        for &v in self.instances.data() {
            if v > k {
                return Err(Error::invalid(format!("instance id {v} has no center")));
            }
            if v > 0 {
                seen[v as usize - 1] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("center without instance pixels"));
        }
        for (i, &c) in self.centers.iter().enumerate() {
            if !self.instances.contains(c) || self.instances.at(c) != i as u32 + 1 {
                return Err(Error::invalid(format!(
                    "center {i} lies outside its instance"
                )));
            }
        }
        if self.sparse.iter().any(|p| !self.centers.contains(p)) {
            return Err(Error::invalid("sparse point is not a center"));
        }
        if density_from_points(&self.centers, self.sigma, (h, w))? != self.density {
            return Err(Error::invalid("density does not match centers"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptRole {
    TaskPrompt,
    PclQuery,
    PclNegative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    GroundTruth,
    Detected,
    Interactive,
    Bootstrap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointPrompt {
    pub position: Point,
    pub role: PromptRole,
    pub provenance: Provenance,
}

impl PointPrompt {
    pub fn task(position: Point, provenance: Provenance) -> Self {
        Self {
            position,
            role: PromptRole::TaskPrompt,
            provenance,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelOptions {
    pub sigma: f64,
    pub sparse_fraction: f64,
}

impl Default for LabelOptions {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            sparse_fraction: DEFAULT_SPARSE_FRACTION,
        }
    }
}

/// Sum of truncated (±3σ square window) Gaussians, each normalized to unit
/// mass before truncation.
pub fn density_from_points(
    points: &[Point],
    sigma: f64,
    (h, w): (usize, usize),
) -> Result<Grid<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma must be positive"));
    }
    let mut d = Grid::new(h, w);
    let reach = (3.0 * sigma).floor() as isize;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let kernel: Vec<f64> = (-reach..=reach)
        .map(|o| (-((o * o) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    for (i, p) in points.iter().enumerate() {
        if p.row >= h || p.col >= w {
            return Err(Error::OutOfBounds { index: i });
        }
        for dr in -reach..=reach {
            let r = p.row as isize + dr;
            if r < 0 || r >= h as isize {
                continue;
            }
            let kr = kernel[(dr + reach) as usize];
            for dc in -reach..=reach {
                let c = p.col as isize + dc;
                if c < 0 || c >= w as isize {
                    continue;
                }
                let v = d.get(r as usize, c as usize) + norm * kr * kernel[(dc + reach) as usize];
                d.set(r as usize, c as usize, v);
            }
        }
    }
    Ok(d)
}

/// Peak value of one isolated kernel; dividing a density map by it puts a
/// perfect center at 1.0.
pub fn kernel_peak(sigma: f64) -> f64 {
    1.0 / (2.0 * std::f64::consts::PI * sigma * sigma)
}

/// `round(fraction · |centers|)` centers drawn uniformly without
/// replacement, returned in their original order.
pub fn sample_sparse_points(centers: &[Point], fraction: f64, seed: u64) -> Vec<Point> {
    let fraction = fraction.clamp(0.0, 1.0);
    let count = (fraction * centers.len() as f64).round() as usize;
    let mut rng = seed::rng(seed, salt::SPARSE, centers.len() as u64);
    let mut picked = sample_indices(&mut rng, centers.len(), count.min(centers.len())).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| centers[i]).collect()
}

fn band_pass_texture<R: Rng>(size: usize, freq: f64, amplitude: f64, rng: &mut R) -> Grid<f64> {
    const WAVES: usize = 6;
    let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let f = freq * rng.gen_range(0.8..1.25) * std::f64::consts::TAU;
            (
                f * theta.cos(),
                f * theta.sin(),
                rng.gen_range(0.0..std::f64::consts::TAU),
                0.0,
            )
        })
        .collect();
    let scale = amplitude / (WAVES as f64 / 2.0).sqrt();
    let mut g = Grid::new(size, size);
    for r in 0..size {
        for c in 0..size {
            let v: f64 = waves
                .iter()
                .map(|&(fy, fx, ph, _)| (fy * r as f64 + fx * c as f64 + ph).sin())
                .sum();
            g.set(r, c, v * scale);
        }
    }
    g
}

struct Candidate {
    center: Point,
    pixels: Vec<Point>,
}

fn rasterize_instance<R: Rng>(spec: &DomainSpec, rng: &mut R) -> Candidate {
    let size = spec.image_size;
    let a = rng.gen_range(spec.instance_radius.0..=spec.instance_radius.1);
    let e = rng.gen_range(spec.instance_eccentricity.0..=spec.instance_eccentricity.1);
    let b = (a * (1.0 - e * e).sqrt()).max(1.5);
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let (p1, p2) = (
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let jitter = spec.boundary_jitter;
    let reach = (a * (1.0 + jitter)).ceil() as usize + 1;
    let lo = reach + 1;
    let hi = size - reach - 2;
    let center = Point::new(rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
    let (ct, st) = (theta.cos(), theta.sin());
    let mut inside = Grid::<bool>::new(2 * reach + 1, 2 * reach + 1);
    for dr in -(reach as isize)..=reach as isize {
        for dc in -(reach as isize)..=reach as isize {
            let (y, x) = (dr as f64, dc as f64);
            let u = (x * ct + y * st) / a;
            let v = (-x * st + y * ct) / b;
            let rho = (u * u + v * v).sqrt();
            let phi = v.atan2(u);
            let limit =
                1.0 + jitter * (0.6 * (3.0 * phi + p1).sin() + 0.4 * (5.0 * phi + p2).sin());
            if rho <= limit {
                inside.set(
                    (dr + reach as isize) as usize,
                    (dc + reach as isize) as usize,
                    true,
                );
            }
        }
    }
    // Keep the 4-connected piece holding the center.
    let mut pixels = Vec::new();
    let mut seen = Grid::<bool>::new(inside.height(), inside.width());
    let mut queue = VecDeque::from([(reach, reach)]);
    seen.set(reach, reach, true);
    while let Some((r, c)) = queue.pop_front() {
        pixels.push(Point::new(center.row + r - reach, center.col + c - reach));
        let n = inside.height();
        for (nr, nc) in neighbours4(r, c, n, n) {
            if inside.get(nr, nc) && !seen.get(nr, nc) {
                seen.set(nr, nc, true);
                queue.push_back((nr, nc));
            }
        }
    }
    Candidate { center, pixels }
}

pub(crate) fn neighbours4(
    r: usize,
    c: usize,
    h: usize,
    w: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let mut out = [(usize::MAX, usize::MAX); 4];
    if r > 0 {
        out[0] = (r - 1, c);
    }
    if r + 1 < h {
        out[1] = (r + 1, c);
    }
    if c > 0 {
        out[2] = (r, c - 1);
    }
    if c + 1 < w {
        out[3] = (r, c + 1);
    }
    out.into_iter().filter(|&(r, _)| r != usize::MAX)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Generates sample `index` of a domain. Intensities are quantized to 8-bit
/// levels so a sample survives a PNG round trip unchanged.
pub fn generate_sample(spec: &DomainSpec, index: usize, labels: &LabelOptions) -> Result<Sample> {
    spec.validate()?;
    let size = spec.image_size;
    let mut rng = seed::rng(spec.seed, salt::SAMPLE, index as u64);
    let wanted = rng.gen_range(spec.instances_per_image.0..=spec.instances_per_image.1);
    let mut instances = Grid::<u32>::new(size, size);
    let mut blocked = Grid::<bool>::new(size, size);
    let mut centers = Vec::new();
    let mut contrasts = Vec::new();
    for _ in 0..wanted {
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let cand = rasterize_instance(spec, &mut rng);
            cand.pixels.iter().all(|&p| !blocked.at(p)).then_some(cand)
        });
        let Some(cand) = placed else {
            log::debug!(
                "sample {index}: placed {} of {wanted} instances before running out of space",
                centers.len()
            );
            break;
        };
        let id = centers.len() as u32 + 1;
        for &p in &cand.pixels {
            instances.set(p.row, p.col, id);
            let (r0, c0) = (
                p.row.saturating_sub(INSTANCE_GAP),
                p.col.saturating_sub(INSTANCE_GAP),
            );
            for r in r0..(p.row + INSTANCE_GAP + 1).min(size) {
                for c in c0..(p.col + INSTANCE_GAP + 1).min(size) {
                    blocked.set(r, c, true);
                }
            }
        }
        centers.push(cand.center);
        contrasts.push(rng.gen_range(spec.instance_contrast.0..=spec.instance_contrast.1));
    }

    let texture = band_pass_texture(
        size,
        spec.texture_frequency,
        spec.texture_amplitude,
        &mut rng,
    );
    let inner = band_pass_texture(
        size,
        spec.texture_frequency * 2.0,
        spec.texture_amplitude * 0.5,
        &mut rng,
    );
    let noise = Normal::new(0.0, spec.noise_std.max(1e-12)).unwrap();
    let mut image = Grid::new(size, size);
    let delta = spec.foreground_mean - spec.background_mean;
    for r in 0..size {
        for c in 0..size {
            let id = instances.get(r, c);
            let mut v = spec.background_mean + texture.get(r, c);
            if id > 0 {
                v += contrasts[id as usize - 1] * delta + inner.get(r, c);
            }
            if spec.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            image.set(r, c, quantize(v));
        }
    }
    let sparse = sample_sparse_points(
        &centers,
        labels.sparse_fraction,
        seed::mix(spec.seed, salt::SPARSE, index as u64),
    );
    let density = density_from_points(&centers, labels.sigma, (size, size))?;
    Ok(Sample {
        id: format!("{index:04}"),
        image,
        instances,
        centers,
        sparse,
        density,
        sigma: labels.sigma,
    })
}

pub fn generate_domain(
    spec: &DomainSpec,
    n_samples: usize,
    labels: &LabelOptions,
) -> Result<Vec<Sample>> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    (0..n_samples)
        .map(|i| generate_sample(spec, i, labels))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Weak,
    Strong,
}

/// Geometry of a weak view relative to its source image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropGeometry {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flip_vertical: bool,
    pub flip_horizontal: bool,
}

impl CropGeometry {
    pub fn draw<R: Rng>(image: (usize, usize), size: usize, rng: &mut R) -> Self {
        Self {
            top: rng.gen_range(0..=image.0 - size),
            left: rng.gen_range(0..=image.1 - size),
            size,
            flip_vertical: rng.gen_bool(0.5),
            flip_horizontal: rng.gen_bool(0.5),
        }
    }

    fn apply<T: Copy>(&self, g: &Grid<T>) -> Grid<T> {
        let mut out = g.crop(self.top, self.left, self.size, self.size);
        if self.flip_vertical {
            out = out.flip_vertical();
        }
        if self.flip_horizontal {
            out = out.flip_horizontal();
        }
        out
    }

    /// Maps a source point into the view; `None` when it is cropped away.
    pub fn map_point(&self, p: Point) -> Option<Point> {
        if p.row < self.top
            || p.col < self.left
            || p.row >= self.top + self.size
            || p.col >= self.left + self.size
        {
            return None;
        }
        let (mut r, mut c) = (p.row - self.top, p.col - self.left);
        if self.flip_vertical {
            r = self.size - 1 - r;
        }
        if self.flip_horizontal {
            c = self.size - 1 - c;
        }
        Some(Point::new(r, c))
    }

    /// Maps a continuous source coordinate into view pixel space.
    fn map_coord(&self, r: f64, c: f64) -> (f64, f64) {
        let (mut r, mut c) = (r - self.top as f64, c - self.left as f64);
        if self.flip_vertical {
            r = self.size as f64 - 1.0 - r;
        }
        if self.flip_horizontal {
            c = self.size as f64 - 1.0 - c;
        }
        (r, c)
    }
}

/// Photometric and rotation parameters layered on a weak view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrongParams {
    pub quarter_turns: u8,
    pub brightness: f64,
    pub noise_std: f64,
}

impl StrongParams {
    pub fn draw<R: Rng>(rng: &mut R) -> Self {
        Self {
            quarter_turns: rng.gen_range(0..4),
            brightness: rng.gen_range(-0.1..=0.1),
            noise_std: rng.gen_range(0.0..=0.05),
        }
    }
}

fn crop_sample(sample: &Sample, geo: &CropGeometry) -> Result<Sample> {
    let raw = geo.apply(&sample.instances);
    // Ids present in the view, in original order.
    let k = sample.centers.len();
    let mut present = vec![false; k + 1];
    for &v in raw.data() {
        present[v as usize] = true;
    }
    let mut remap = vec![0u32; k + 1];
    let mut centers = Vec::new();
    for id in 1..=k {
        if !present[id] {
            continue;
        }
        remap[id] = centers.len() as u32 + 1;
        let orig = sample.centers[id - 1];
        let center = match geo.map_point(orig) {
            Some(p) => p,
            None => {
                // Truncated instance whose center left the view: use its pixel
                // nearest to where the center would be.
                let (tr, tc) = geo.map_coord(orig.row as f64, orig.col as f64);
                let mut best = (f64::INFINITY, Point::new(0, 0));
                for r in 0..raw.height() {
                    for c in 0..raw.width() {
                        if raw.get(r, c) as usize == id {
                            let d = (r as f64 - tr).powi(2) + (c as f64 - tc).powi(2);
                            if d < best.0 {
                                best = (d, Point::new(r, c));
                            }
                        }
                    }
                }
                best.1
            }
        };
        centers.push(center);
    }
    let instances = raw.map(|v| remap[v as usize]);
    let sparse = sample
        .sparse
        .iter()
        .filter_map(|&p| geo.map_point(p))
        .collect();
    let density = density_from_points(&centers, sample.sigma, instances.dims())?;
    Ok(Sample {
        id: sample.id.clone(),
        image: geo.apply(&sample.image),
        instances,
        centers,
        sparse,
        density,
        sigma: sample.sigma,
    })
}

/// Applies the strong-only extras to a weak view.
pub fn strengthen<R: Rng>(weak: &Sample, params: &StrongParams, rng: &mut R) -> Result<Sample> {
    let (h, w) = weak.size();
    let k = params.quarter_turns;
    let noise = Normal::new(0.0, params.noise_std.max(1e-12)).unwrap();
    let mut image = weak.image.rot90(k);
    for v in image.data_mut() {
        let n = if params.noise_std > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        };
        *v = (*v + params.brightness + n).clamp(0.0, 1.0);
    }
    let centers: Vec<Point> = weak
        .centers
        .iter()
        .map(|&p| rot90_point(p, h, w, k))
        .collect();
    let instances = weak.instances.rot90(k);
    let density = density_from_points(&centers, weak.sigma, instances.dims())?;
    Ok(Sample {
        id: weak.id.clone(),
        image,
        instances,
        centers,
        sparse: weak
            .sparse
            .iter()
            .map(|&p| rot90_point(p, h, w, k))
            .collect(),
        density,
        sigma: weak.sigma,
    })
}

/// Weak view (crop + flips) and the strong view derived from it.
#[derive(Clone, Debug)]
pub struct AugmentedPair {
    pub weak: Sample,
    pub strong: Sample,
    pub geometry: CropGeometry,
    pub strong_params: StrongParams,
}

impl AugmentedPair {
    /// Carries a map from weak-view coordinates into the strong view.
    pub fn warp<T: Copy>(&self, g: &Grid<T>) -> Grid<T> {
        g.rot90(self.strong_params.quarter_turns)
    }

    pub fn warp_point(&self, p: Point) -> Point {
        let (h, w) = self.weak.size();
        rot90_point(p, h, w, self.strong_params.quarter_turns)
    }
}

pub fn augment_pair(sample: &Sample, crop_size: usize, seed: u64) -> Result<AugmentedPair> {
    let (h, w) = sample.size();
    if crop_size == 0 || crop_size > h || crop_size > w {
        return Err(Error::invalid(format!(
            "crop size {crop_size} exceeds image {h}×{w}"
        )));
    }
    let mut rng = seed::rng(seed, salt::AUGMENT, 0);
    let geometry = CropGeometry::draw((h, w), crop_size, &mut rng);
    let strong_params = StrongParams::draw(&mut rng);
    let weak = crop_sample(sample, &geometry)?;
    let strong = strengthen(&weak, &strong_params, &mut rng)?;
    Ok(AugmentedPair {
        weak,
        strong,
        geometry,
        strong_params,
    })
}

/// Weak = random crop + flips; strong additionally rotates by a multiple of
/// 90°, shifts brightness by up to ±0.1 and adds Gaussian noise (std ≤ 0.05).
pub fn crop_and_augment(
    sample: &Sample,
    crop_size: usize,
    strength: Strength,
    seed: u64,
) -> Result<Sample> {
    let pair = augment_pair(sample, crop_size, seed)?;
    Ok(match strength {
        Strength::Weak => pair.weak,
        Strength::Strong => pair.strong,
    })
}

/// Plain crop without flips, used for evaluation-time views.
pub fn crop_exact(sample: &Sample, top: usize, left: usize, size: usize) -> Result<Sample> {
    let (h, w) = sample.size();
    if top + size > h || left + size > w {
        return Err(Error::invalid("crop exceeds image bounds"));
    }
    crop_sample(
        sample,
        &CropGeometry {
            top,
            left,
            size,
            flip_vertical: false,
            flip_horizontal: false,
        },
    )
}
