//! Slide loading, tissue segmentation and labeled patch extraction.
//!
//! Two extraction strategies are provided. [`extract_grid_patches`] walks
//! a fixed grid over the whole slide and keeps cells that are mostly
//! tissue. [`extract_region_patches`] tiles caller-supplied rectangles
//! (annotated areas) with the same rule. Every patch inherits the slide's
//! diagnosis as its weak label.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{validation_err, Error, Result};

/// A whole-slide raster at some magnification.
#[derive(Clone, Debug, PartialEq)]
pub struct Slide {
    pub slide_id: String,
    pub pixels: RgbImage,
    pub scan_magnification: u32,
    pub diagnosis_label: u8,
}

impl Slide {
    pub fn new(
        slide_id: impl Into<String>,
        pixels: RgbImage,
        scan_magnification: u32,
        diagnosis_label: u8,
    ) -> Result<Self> {
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(validation_err!("slide raster is empty"));
        }
        check_label(diagnosis_label)?;
        if scan_magnification == 0 {
            return Err(Error::Metadata("scan magnification must be positive".into()));
        }
        Ok(Self {
            slide_id: slide_id.into(),
            pixels,
            scan_magnification,
            diagnosis_label,
        })
    }

    pub fn width(&self) -> usize {
        self.pixels.width() as usize
    }

    pub fn height(&self) -> usize {
        self.pixels.height() as usize
    }
}

fn check_label(label: u8) -> Result<()> {
    if label > 1 {
        return Err(Error::Metadata(format!(
            "diagnosis label {label} is not a known class code (0 or 1)"
        )));
    }
    Ok(())
}

/// One row of the slide manifest CSV
/// (`slide_id,path,label,scan_magnification`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideMeta {
    pub slide_id: String,
    pub path: String,
    pub label: u8,
    pub scan_magnification: u32,
}

/// Reads a slide manifest. Relative raster paths are resolved against the
/// manifest's directory.
pub fn read_slide_manifest(path: &Path) -> Result<Vec<SlideMeta>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let expected = ["slide_id", "path", "label", "scan_magnification"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Metadata(format!(
            "{}: header must be {}, found {}",
            path.display(),
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let label: u8 = row[2]
            .parse()
            .map_err(|_| Error::Metadata(format!("row {}: label {:?} is not a class code", i + 1, &row[2])))?;
        check_label(label)?;
        let scan_magnification: u32 = row[3].parse().map_err(|_| {
            Error::Metadata(format!("row {}: bad scan magnification {:?}", i + 1, &row[3]))
        })?;
        let raster = Path::new(&row[1]);
        let resolved = if raster.is_absolute() {
            raster.to_path_buf()
        } else {
            base.join(raster)
        };
        out.push(SlideMeta {
            slide_id: row[0].to_string(),
            path: resolved.to_string_lossy().into_owned(),
            label,
            scan_magnification,
        });
    }
    Ok(out)
}

/// Decodes a PNG or PPM raster and attaches its manifest metadata.
pub fn load_slide(meta: &SlideMeta) -> Result<Slide> {
    let path = Path::new(&meta.path);
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| Error::image(path, e))?;
    Slide::new(
        meta.slide_id.clone(),
        img.to_rgb8(),
        meta.scan_magnification,
        meta.label,
    )
}

/// Integer ratio between scan and extraction magnification.
pub fn magnification_factor(scan: u32, extraction: u32) -> Result<u32> {
    if extraction == 0 || scan % extraction != 0 {
        return Err(validation_err!(
            "scan magnification {scan}x is not an integer multiple of extraction magnification {extraction}x"
        ));
    }
    Ok(scan / extraction)
}

/// Box-filter downsampling by an integer factor. Trailing rows and columns
/// that do not fill a whole block are dropped.
pub fn downsample(slide: &Slide, factor: u32) -> Result<Slide> {
    if factor == 0 {
        return Err(validation_err!("downsample factor must be positive"));
    }
    if factor == 1 {
        return Ok(slide.clone());
    }
    let f = factor as usize;
    let (w, h) = (slide.width() / f, slide.height() / f);
    if w == 0 || h == 0 {
        return Err(validation_err!(
            "a {}x{} slide is smaller than one {f}x{f} block",
            slide.width(),
            slide.height()
        ));
    }
    let src = slide.pixels.as_raw();
    let sw = slide.width();
    let area = (f * f) as u32;
    let mut out = RgbImage::new(w as u32, h as u32);
    for (y, row) in out.as_mut().chunks_mut(w * 3).enumerate() {
        for x in 0..w {
            let mut acc = [0u32; 3];
            for dy in 0..f {
                let base = ((y * f + dy) * sw + x * f) * 3;
                for px in src[base..base + f * 3].chunks(3) {
                    acc[0] += px[0] as u32;
                    acc[1] += px[1] as u32;
                    acc[2] += px[2] as u32;
                }
            }
            for c in 0..3 {
                row[x * 3 + c] = ((acc[c] + area / 2) / area) as u8;
            }
        }
    }
    Ok(Slide {
        slide_id: slide.slide_id.clone(),
        pixels: out,
        scan_magnification: slide.scan_magnification / factor,
        diagnosis_label: slide.diagnosis_label,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Otsu,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileConfig {
    pub patch_size: usize,
    pub extraction_magnification: u32,
    pub stride: usize,
    pub min_tissue_coverage: f64,
    pub threshold_mode: ThresholdMode,
    /// Luminance threshold in `Fixed` mode; in `Otsu` mode it caps the
    /// chosen threshold and is the fallback for flat histograms.
    pub fixed_threshold: u8,
    /// Radius of the box filter applied to luminance before thresholding;
    /// 0 thresholds raw pixels.
    pub smoothing_radius: usize,
    /// Threads used for grid-cell evaluation. Output order never depends
    /// on this.
    pub workers: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            patch_size: 100,
            extraction_magnification: 20,
            stride: 100,
            min_tissue_coverage: 0.5,
            threshold_mode: ThresholdMode::Otsu,
            fixed_threshold: 220,
            smoothing_radius: 16,
            workers: 1,
        }
    }
}

impl TileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.stride == 0 {
            return Err(validation_err!("patch size and stride must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_tissue_coverage) {
            return Err(validation_err!(
                "min tissue coverage {} outside [0, 1]",
                self.min_tissue_coverage
            ));
        }
        if self.extraction_magnification == 0 {
            return Err(validation_err!("extraction magnification must be positive"));
        }
        Ok(())
    }
}

/// Rec. 601 luma, rounded.
pub fn luminance(px: [u8; 3]) -> u8 {
    let y = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
    y.round().clamp(0.0, 255.0) as u8
}

/// Otsu's threshold on a 256-bin histogram: the smallest `t` such that
/// splitting into `< t` and `>= t` maximises between-class variance.
/// `None` when fewer than two bins are populated.
pub fn otsu_threshold(hist: &[u64; 256]) -> Option<u8> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total: f64 = hist.iter().map(|&c| c as f64).sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut w_lo = 0.0;
    let mut sum_lo = 0.0;
    let mut best = (f64::MIN, 0usize);
    for (t, &count) in hist.iter().enumerate().take(255) {
        w_lo += count as f64;
        sum_lo += t as f64 * count as f64;
        let w_hi = total - w_lo;
        if w_lo == 0.0 || w_hi == 0.0 {
            continue;
        }
        let diff = sum_lo / w_lo - (sum_all - sum_lo) / w_hi;
        let between = w_lo * w_hi * diff * diff;
        if between > best.0 {
            best = (between, t);
        }
    }
    Some((best.1 + 1) as u8)
}

/// Binary tissue map aligned to a slide.
#[derive(Clone, Debug, PartialEq)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
    pub tissue_fraction: f64,
    /// Pixels whose smoothed luminance is below this value are tissue.
    pub threshold: u8,
}

impl TissueMask {
    pub fn from_data(width: usize, height: usize, data: Vec<bool>, threshold: u8) -> Result<Self> {
        if data.len() != width * height {
            return Err(validation_err!("mask data does not match {width}x{height}"));
        }
        let count = data.iter().filter(|&&t| t).count();
        let tissue_fraction = if data.is_empty() {
            0.0
        } else {
            count as f64 / data.len() as f64
        };
        Ok(Self {
            width,
            height,
            data,
            tissue_fraction,
            threshold,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Summed-area table with a zero first row and column.
    fn integral(&self) -> Vec<u32> {
        let w1 = self.width + 1;
        let mut sat = vec![0u32; w1 * (self.height + 1)];
        for y in 0..self.height {
            let mut row_sum = 0u32;
            for x in 0..self.width {
                row_sum += self.data[y * self.width + x] as u32;
                sat[(y + 1) * w1 + x + 1] = sat[y * w1 + x + 1] + row_sum;
            }
        }
        sat
    }
}

/// Mean luminance over a `(2r+1)`-square window clipped to the raster.
fn smoothed_luminance(lum: &[u8], w: usize, h: usize, r: usize) -> Vec<u8> {
    if r == 0 {
        return lum.to_vec();
    }
    let w1 = w + 1;
    let mut sat = vec![0u64; w1 * (h + 1)];
    for y in 0..h {
        let mut row = 0u64;
        for x in 0..w {
            row += lum[y * w + x] as u64;
            sat[(y + 1) * w1 + x + 1] = sat[y * w1 + x + 1] + row;
        }
    }
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let sum = sat[y1 * w1 + x1] + sat[y0 * w1 + x0] - sat[y0 * w1 + x1] - sat[y1 * w1 + x0];
            let n = ((y1 - y0) * (x1 - x0)) as u64;
            out.push(((sum + n / 2) / n) as u8);
        }
    }
    out
}

/// Tissue is any pixel whose smoothed luminance is below the threshold.
/// Smoothing merges dark nuclei and pale stroma into one tissue mode, so
/// Otsu separates tissue from glass rather than nuclei from stroma.
pub fn tissue_mask(slide: &Slide, cfg: &TileConfig) -> TissueMask {
    let raw: Vec<u8> = slide.pixels.pixels().map(|p| luminance(p.0)).collect();
    let lum = smoothed_luminance(&raw, slide.width(), slide.height(), cfg.smoothing_radius);
    let threshold = match cfg.threshold_mode {
        ThresholdMode::Fixed => cfg.fixed_threshold,
        ThresholdMode::Otsu => {
            let mut hist = [0u64; 256];
            for &l in &lum {
                hist[l as usize] += 1;
            }
            otsu_threshold(&hist)
                .map_or(cfg.fixed_threshold, |t| t.min(cfg.fixed_threshold))
        }
    };
    let data = lum.iter().map(|&l| l < threshold).collect();
    TissueMask::from_data(slide.width(), slide.height(), data, threshold)
        .expect("mask built from slide dimensions")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionMethod {
    Grid,
    Region,
}

impl std::fmt::Display for ExtractionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExtractionMethod::Grid => "grid",
            ExtractionMethod::Region => "region",
        })
    }
}

/// Axis-aligned rectangle in extraction-magnification pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Region {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self {
            x,
            y,
            w,
            h,
            label: None,
        }
    }
}

/// Reads a region CSV with header `x,y,w,h` (an optional trailing `label`
/// column is accepted).
pub fn read_regions(path: &Path) -> Result<Vec<Region>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers.len() < 4 || headers[..4] != ["x", "y", "w", "h"] {
        return Err(validation_err!(
            "{}: region header must start with x,y,w,h",
            path.display()
        ));
    }
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// One extracted patch with its inherited weak label.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub patch_id: String,
    pub slide_id: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    /// `size * size * 3` interleaved RGB bytes.
    pub pixels: Vec<u8>,
    pub weak_label: u8,
    pub method: ExtractionMethod,
}

impl PatchRecord {
    pub fn patch_id_for(slide_id: &str, x: usize, y: usize) -> String {
        format!("{slide_id}_{x}_{y}")
    }

    pub fn to_image(&self) -> RgbImage {
        RgbImage::from_raw(self.size as u32, self.size as u32, self.pixels.clone())
            .expect("patch buffer matches its size")
    }

    /// Writes `{patch_id}.png` into `dir` and returns its path.
    pub fn write_png(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.png", self.patch_id));
        self.to_image()
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::image(&path, e))?;
        Ok(path)
    }
}

fn crop(slide: &Slide, x: usize, y: usize, size: usize) -> Vec<u8> {
    let w = slide.width();
    let src = slide.pixels.as_raw();
    let mut out = Vec::with_capacity(size * size * 3);
    for row in y..y + size {
        let start = (row * w + x) * 3;
        out.extend_from_slice(&src[start..start + size * 3]);
    }
    out
}

fn check_alignment(slide: &Slide, mask: &TissueMask) -> Result<()> {
    if mask.width != slide.width() || mask.height != slide.height() {
        return Err(validation_err!(
            "mask is {}x{} but slide is {}x{}",
            mask.width,
            mask.height,
            slide.width(),
            slide.height()
        ));
    }
    Ok(())
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| validation_err!("cannot start {workers} extraction workers: {e}"))
}

/// Evaluates candidate origins in parallel and returns kept patches in the
/// candidates' order.
fn emit(
    slide: &Slide,
    mask: &TissueMask,
    cfg: &TileConfig,
    origins: &[(usize, usize)],
    method: ExtractionMethod,
) -> Result<Vec<PatchRecord>> {
    let sat = mask.integral();
    let w1 = mask.width + 1;
    let p = cfg.patch_size;
    let needed = cfg.min_tissue_coverage * (p * p) as f64;
    let keep = |&(x, y): &(usize, usize)| -> Option<PatchRecord> {
        let count = sat[(y + p) * w1 + x + p] + sat[y * w1 + x] - sat[y * w1 + x + p]
            - sat[(y + p) * w1 + x];
        if (count as f64) < needed || count == 0 {
            return None;
        }
        Some(PatchRecord {
            patch_id: PatchRecord::patch_id_for(&slide.slide_id, x, y),
            slide_id: slide.slide_id.clone(),
            x,
            y,
            size: p,
            pixels: crop(slide, x, y, p),
            weak_label: slide.diagnosis_label,
            method,
        })
    };
    let pool = thread_pool(cfg.workers)?;
    Ok(pool.install(|| {
        origins
            .par_iter()
            .filter_map(keep)
            .collect::<Vec<_>>()
    }))
}

/// Row-major grid over the whole slide; a cell is kept when its tissue
/// coverage reaches `min_tissue_coverage`.
pub fn extract_grid_patches(
    slide: &Slide,
    mask: &TissueMask,
    cfg: &TileConfig,
) -> Result<Vec<PatchRecord>> {
    cfg.validate()?;
    check_alignment(slide, mask)?;
    let p = cfg.patch_size;
    let mut origins = Vec::new();
    if slide.width() >= p && slide.height() >= p {
        for y in (0..=slide.height() - p).step_by(cfg.stride) {
            for x in (0..=slide.width() - p).step_by(cfg.stride) {
                origins.push((x, y));
            }
        }
    }
    emit(slide, mask, cfg, &origins, ExtractionMethod::Grid)
}

/// Tiles each region from its own origin, keeping only patches that lie
/// fully inside it and meet the coverage rule. Origins already produced by
/// an earlier region are skipped.
pub fn extract_region_patches(
    slide: &Slide,
    mask: &TissueMask,
    regions: &[Region],
    cfg: &TileConfig,
) -> Result<Vec<PatchRecord>> {
    cfg.validate()?;
    check_alignment(slide, mask)?;
    for (i, r) in regions.iter().enumerate() {
        if r.x + r.w > slide.width() || r.y + r.h > slide.height() {
            return Err(validation_err!(
                "region {i} ({},{} {}x{}) exceeds the {}x{} slide",
                r.x,
                r.y,
                r.w,
                r.h,
                slide.width(),
                slide.height()
            ));
        }
    }
    let p = cfg.patch_size;
    let mut seen = HashSet::new();
    let mut origins = Vec::new();
    for r in regions {
        if r.w < p || r.h < p {
            continue;
        }
        for y in (r.y..=r.y + r.h - p).step_by(cfg.stride) {
            for x in (r.x..=r.x + r.w - p).step_by(cfg.stride) {
                if seen.insert((x, y)) {
                    origins.push((x, y));
                }
            }
        }
    }
    emit(slide, mask, cfg, &origins, ExtractionMethod::Region)
}

/// Brings a slide to extraction magnification, segments it and extracts
/// patches with the chosen method.
pub fn extract_slide(
    slide: &Slide,
    method: ExtractionMethod,
    regions: &[Region],
    cfg: &TileConfig,
) -> Result<Vec<PatchRecord>> {
    cfg.validate()?;
    let factor = magnification_factor(slide.scan_magnification, cfg.extraction_magnification)?;
    let slide = downsample(slide, factor)?;
    let mask = tissue_mask(&slide, cfg);
    match method {
        ExtractionMethod::Grid => extract_grid_patches(&slide, &mask, cfg),
        ExtractionMethod::Region => extract_region_patches(&slide, &mask, regions, cfg),
    }
}
