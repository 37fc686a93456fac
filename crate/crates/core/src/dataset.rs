//! On-disk dataset layout: `manifest.json` plus, per sample, `<id>.png`
//! (8-bit image), `<id>_inst.png` (16-bit instance map) and
//! `<id>_points.json`. Density maps are re-derived on load.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::data::{density_from_points, DomainSpec, LabelOptions, Sample};
use crate::error::{Error, Result};
use crate::grid::{Grid, Point};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DomainSpec,
    pub sigma: f64,
    pub sparse_fraction: f64,
    /// Generator seed and sample indices.
    pub seed: u64,
    pub samples: Vec<SampleEntry>,
}

#[derive(Serialize, Deserialize)]
struct PointsFile {
    centers: Vec<Point>,
    sparse: Vec<Point>,
}

pub fn image_to_png_bytes(image: &Grid<f64>) -> Result<Vec<u8>> {
    let (h, w) = image.dims();
    let raw: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image");
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}

/// Decodes any PNG to grayscale intensities in [0, 1].
pub fn image_from_png_bytes(bytes: &[u8]) -> Result<Grid<f64>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_luma8();
    let (w, h) = img.dimensions();
    Grid::from_vec(
        h as usize,
        w as usize,
        img.into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
    )
}

pub fn labels_to_png_bytes(labels: &Grid<u32>) -> Result<Vec<u8>> {
    let (h, w) = labels.dims();
    let raw = labels
        .data()
        .iter()
        .map(|&v| {
            u16::try_from(v).map_err(|_| Error::invalid(format!("label {v} exceeds 16 bits")))
        })
        .collect::<Result<Vec<u16>>>()?;
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer sized");
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}

pub fn labels_from_png_bytes(bytes: &[u8]) -> Result<Grid<u32>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_luma16();
    let (w, h) = img.dimensions();
    Grid::from_vec(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(u32::from).collect(),
    )
}

pub fn write_dataset(
    dir: &Path,
    spec: &DomainSpec,
    labels: &LabelOptions,
    samples: &[Sample],
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        fs::write(
            dir.join(format!("{}.png", s.id)),
            image_to_png_bytes(&s.image)?,
        )?;
        fs::write(
            dir.join(format!("{}_inst.png", s.id)),
            labels_to_png_bytes(&s.instances)?,
        )?;
        let pts = PointsFile {
            centers: s.centers.clone(),
            sparse: s.sparse.clone(),
        };
        fs::write(
            dir.join(format!("{}_points.json", s.id)),
            serde_json::to_vec(&pts)?,
        )?;
        let (height, width) = s.size();
        entries.push(SampleEntry {
            id: s.id.clone(),
            height,
            width,
            instances: s.centers.len(),
        });
    }
    let manifest = Manifest {
        spec: spec.clone(),
        sigma: labels.sigma,
        sparse_fraction: labels.sparse_fraction,
        seed: spec.seed,
        samples: entries,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Self {
            root: root.to_path_buf(),
            manifest: read_manifest(root)?,
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.samples.iter().map(|e| e.id.as_str())
    }

    pub fn has_labels(&self, id: &str) -> bool {
        self.root.join(format!("{id}_inst.png")).is_file()
    }

    fn entry(&self, id: &str) -> Result<&SampleEntry> {
        self.manifest
            .samples
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::invalid(format!("unknown image id {id:?}")))
    }

    pub fn image_png(&self, id: &str) -> Result<Vec<u8>> {
        self.entry(id)?;
        Ok(fs::read(self.root.join(format!("{id}.png")))?)
    }

    pub fn image(&self, id: &str) -> Result<Grid<f64>> {
        image_from_png_bytes(&self.image_png(id)?)
    }

    pub fn sample(&self, id: &str) -> Result<Sample> {
        let image = self.image(id)?;
        let instances =
            labels_from_png_bytes(&fs::read(self.root.join(format!("{id}_inst.png")))?)?;
        let pts: PointsFile =
            serde_json::from_slice(&fs::read(self.root.join(format!("{id}_points.json")))?)?;
        let density = density_from_points(&pts.centers, self.manifest.sigma, image.dims())?;
        let s = Sample {
            id: id.to_string(),
            image,
            instances,
            centers: pts.centers,
            sparse: pts.sparse,
            density,
            sigma: self.manifest.sigma,
        };
        s.check_invariants()?;
        Ok(s)
    }

    pub fn samples(&self) -> Result<Vec<Sample>> {
        self.manifest
            .samples
            .iter()
            .map(|e| self.sample(&e.id))
            .collect()
    }
}
