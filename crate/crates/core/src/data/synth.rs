//! Procedural grayscale texture classes for tests and demos.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{GrayImage, LabeledDataset, Sample};
use crate::error::{Result, VimError};

pub const FAMILIES: [&str; 6] = [
    "checkerboard",
    "disk",
    "gradient",
    "hstripes",
    "ring",
    "vstripes",
];

/// Two renderings of the same six families: B shifts the pattern phase and
/// centre, stretches the period and adds noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthVariant {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub variant: SynthVariant,
}

impl SynthSpec {
    pub fn new(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Self {
        SynthSpec {
            num_classes,
            per_class,
            image_size,
            seed,
            variant: SynthVariant::A,
        }
    }
}

struct Look {
    period: f64,
    radius: f64,
    noise: f64,
    /// Range of the sub-pixel pattern shift.
    phase: (f64, f64),
}

impl SynthVariant {
    fn look(self, s: f64) -> Look {
        match self {
            SynthVariant::A => Look {
                period: s / 4.0,
                radius: s * 0.3,
                noise: 0.05,
                phase: (-1.0, 1.0),
            },
            SynthVariant::B => Look {
                period: s / 3.5,
                radius: s * 0.26,
                noise: 0.07,
                phase: (0.5, 2.5),
            },
        }
    }
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<LabeledDataset> {
    if spec.per_class < 1 {
        return Err(VimError::invalid("per_class must be at least 1"));
    }
    if spec.num_classes < 1 || spec.num_classes > FAMILIES.len() {
        return Err(VimError::invalid(format!(
            "num_classes must be between 1 and {}",
            FAMILIES.len()
        )));
    }
    if spec.image_size < 4 {
        return Err(VimError::invalid("image_size must be at least 4"));
    }
    let mut samples = Vec::with_capacity(spec.num_classes * spec.per_class);
    for (label, family) in FAMILIES[..spec.num_classes].iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(31).wrapping_add(label as u64));
        for i in 0..spec.per_class {
            let pixels = render(family, spec.image_size, spec.variant, &mut rng);
            samples.push(Sample {
                id: format!("{family}/{i:05}.png"),
                image: GrayImage::new(spec.image_size, spec.image_size, pixels, 255.0)?,
                label,
            });
        }
    }
    Ok(LabeledDataset {
        samples,
        class_names: FAMILIES[..spec.num_classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        source_dir: None,
    })
}

fn render(family: &str, size: usize, variant: SynthVariant, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = size as f64;
    let look = variant.look(s);
    let lo = rng.random_range(0.1..0.25);
    let hi = rng.random_range(0.75..0.9);
    let (p0, p1) = look.phase;
    let (ox, oy) = (rng.random_range(p0..p1), rng.random_range(p0..p1));
    let (cx, cy) = (s / 2.0 + ox, s / 2.0 + oy);
    let period = look.period * rng.random_range(0.9..1.1);
    let radius = look.radius + rng.random_range(-1.0..1.0);
    let slope = rng.random_range(0.8..1.2);
    let band = |v: f64| ((v / (period / 2.0)).floor() as i64).rem_euclid(2) == 0;
    let noise = Normal::new(0.0, look.noise).unwrap();

    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5 + ox, y as f64 + 0.5 + oy);
            let r = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            let v = match family {
                "checkerboard" => {
                    if band(fx) == band(fy) {
                        hi
                    } else {
                        lo
                    }
                }
                "disk" => {
                    if r <= radius {
                        hi
                    } else {
                        lo
                    }
                }
                "gradient" => lo + (hi - lo) * (slope * fx / s).clamp(0.0, 1.0),
                "hstripes" => {
                    if band(fy) {
                        hi
                    } else {
                        lo
                    }
                }
                "ring" => {
                    if (r - radius * 1.2).abs() <= s * 0.08 {
                        hi
                    } else {
                        lo
                    }
                }
                _ => {
                    if band(fx) {
                        hi
                    } else {
                        lo
                    }
                }
            };
            let v = (v + noise.sample(rng)).clamp(0.0, 1.0);
            out.push((v * 255.0).round() as f32);
        }
    }
    out
}

/// Writes each sample as an 8-bit PNG at `dir/<id>`.
pub fn write_dataset(ds: &LabeledDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for s in &ds.samples {
        let path = dir.join(&s.id);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| VimError::io(parent, e))?;
        }
        let scale = 255.0 / s.image.max_value;
        let raw: Vec<u8> = s
            .image
            .pixels
            .iter()
            .map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8)
            .collect();
        let buf = image::GrayImage::from_raw(s.image.width as u32, s.image.height as u32, raw)
            .ok_or_else(|| VimError::invalid(format!("{}: pixel buffer size mismatch", s.id)))?;
        buf.save(&path)
            .map_err(|e| VimError::invalid(format!("failed to write {}: {e}", path.display())))?;
    }
    Ok(())
}
