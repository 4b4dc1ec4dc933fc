//! Procedural stand-in slides with class-specific textures.
//!
//! Class 0 tissue is dotted with round dark nuclei, class 1 tissue is
//! crossed by parallel dark bands. Tissue sits on a white glass background
//! with a thin empty margin.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::{derive_indexed, rng};
use crate::tiling::Slide;

const GLASS: [f64; 3] = [250.0, 250.0, 252.0];
const STROMA: [f64; 3] = [224.0, 152.0, 198.0];
const NUCLEUS: [f64; 3] = [92.0, 52.0, 138.0];

/// One synthetic slide at 20x.
pub fn synthetic_slide(slide_id: &str, label: u8, size: usize, seed: u64) -> Slide {
    let mut r = rng(seed);
    let dark = match label {
        0 => blob_map(size, &mut r),
        _ => stripe_map(size, &mut r),
    };
    let margin = size / 40;
    let stain: f64 = r.random_range(0.92..1.03);
    let mut img = RgbImage::new(size as u32, size as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let (x, y) = (i % size, i / size);
        let inside = x >= margin && y >= margin && x < size - margin && y < size - margin;
        let (base, jitter) = if !inside {
            (GLASS, 3.0)
        } else if dark[i] {
            (NUCLEUS, 14.0)
        } else {
            (STROMA, 10.0)
        };
        let noise: f64 = r.random_range(-jitter..=jitter);
        let scale = if inside { stain } else { 1.0 };
        *px = Rgb(base.map(|c| (c * scale + noise).round().clamp(0.0, 255.0) as u8));
    }
    Slide::new(slide_id, img, 20, label).expect("synthetic slide is valid")
}

fn blob_map(size: usize, r: &mut impl Rng) -> Vec<bool> {
    let mut map = vec![false; size * size];
    let n_blobs = (size * size) / 700;
    for _ in 0..n_blobs {
        let cx = r.random_range(0..size) as i64;
        let cy = r.random_range(0..size) as i64;
        let rad: i64 = r.random_range(4..=8);
        for y in (cy - rad).max(0)..(cy + rad + 1).min(size as i64) {
            for x in (cx - rad).max(0)..(cx + rad + 1).min(size as i64) {
                if (x - cx).pow(2) + (y - cy).pow(2) <= rad * rad {
                    map[y as usize * size + x as usize] = true;
                }
            }
        }
    }
    map
}

fn stripe_map(size: usize, r: &mut impl Rng) -> Vec<bool> {
    let angle: f64 = r.random_range(0.0..std::f64::consts::PI);
    let period: f64 = r.random_range(16.0..22.0);
    let width = period * r.random_range(0.28..0.36);
    let phase: f64 = r.random_range(0.0..period);
    let (s, c) = angle.sin_cos();
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            (x * c + y * s + phase).rem_euclid(period) < width
        })
        .collect()
}

/// `n_per_class` slides of each class, interleaved 0,1,0,1,... with ids
/// `slide_00`, `slide_01`, ...
pub fn synthetic_corpus(n_per_class: usize, size: usize, seed: u64) -> Vec<Slide> {
    (0..2 * n_per_class)
        .map(|i| {
            synthetic_slide(
                &format!("slide_{i:02}"),
                (i % 2) as u8,
                size,
                derive_indexed(seed, i as u64),
            )
        })
        .collect()
}

/// Writes each slide as `{slide_id}.png` plus a `slides.csv` manifest.
pub fn write_corpus(slides: &[Slide], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("slides.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(["slide_id", "path", "label", "scan_magnification"])?;
    for s in slides {
        let name = format!("{}.png", s.slide_id);
        let path = dir.join(&name);
        s.pixels
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::image(&path, e))?;
        w.write_record([
            s.slide_id.as_str(),
            &name,
            &s.diagnosis_label.to_string(),
            &s.scan_magnification.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::{extract_grid_patches, tissue_mask, TileConfig};

    #[test]
    fn synthetic_slides_are_reproducible() {
        assert_eq!(synthetic_slide("a", 0, 200, 5), synthetic_slide("a", 0, 200, 5));
        assert_ne!(synthetic_slide("a", 0, 200, 5), synthetic_slide("a", 0, 200, 6));
    }

    #[test]
    fn full_size_slide_yields_about_a_hundred_patches() {
        for label in 0..2 {
            let s = synthetic_slide("x", label, 1000, 11);
            let cfg = TileConfig::default();
            let m = tissue_mask(&s, &cfg);
            assert!(m.tissue_fraction > 0.85, "{}", m.tissue_fraction);
            let n = extract_grid_patches(&s, &m, &cfg).unwrap().len();
            assert!((90..=100).contains(&n), "label {label}: {n}");
        }
    }

    #[test]
    fn corpus_layout() {
        let c = synthetic_corpus(2, 120, 1);
        let ids: Vec<_> = c.iter().map(|s| (s.slide_id.as_str(), s.diagnosis_label)).collect();
        assert_eq!(ids, [("slide_00", 0), ("slide_01", 1), ("slide_02", 0), ("slide_03", 1)]);
    }
}
