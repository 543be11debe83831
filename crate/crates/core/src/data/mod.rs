//! Class-per-folder grayscale datasets, preprocessing, stratified splits
//! and seeded batching.

mod split;
pub mod synth;

pub use split::{
    batch_order, class_names_from_manifest, parse_manifest, read_manifest, stratified_split,
    write_manifest, ManifestEntry, Partition, Split, SplitSpec,
};
pub use synth::{generate_synthetic, write_dataset, SynthSpec, SynthVariant, FAMILIES};

use std::fs;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use rayon::prelude::*;

use crate::error::{DataError, Result, VimError};
use crate::model::VimConfig;
use crate::tensor::{Float, Tensor};

const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm", "bmp"];

/// Single-channel image; `pixels` are raw intensities in `[0, max_value]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub max_value: f32,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>, max_value: f32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(DataError::ZeroArea { width, height }.into());
        }
        if pixels.len() != width * height {
            return Err(VimError::invalid(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
            max_value,
        })
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_parts(
            vec![self.height, self.width],
            self.pixels.iter().map(|&v| T::of(v as f64)).collect(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// Path relative to the dataset root, e.g. `glioma/0001.png`.
    pub id: String,
    pub image: GrayImage,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    /// Sorted; index is the label.
    pub class_names: Vec<String>,
    pub source_dir: Option<PathBuf>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }
}

/// Reads `dir/<class>/<image>`; classes are labeled in lexicographic folder order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let mut classes: Vec<(String, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| VimError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(DataError::NoClasses(dir.to_path_buf()).into());
    }

    let mut files = Vec::new();
    for (label, (name, path)) in classes.iter().enumerate() {
        let mut imgs: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| VimError::io(path, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && has_image_extension(p))
            .collect();
        imgs.sort();
        if imgs.is_empty() {
            return Err(DataError::EmptyClass(path.clone()).into());
        }
        for p in imgs {
            let file = p.file_name().unwrap().to_string_lossy().into_owned();
            files.push((format!("{name}/{file}"), p, label));
        }
    }

    let samples = files
        .into_par_iter()
        .map(|(id, path, label)| read_gray(&path).map(|image| Sample { id, image, label }))
        .collect::<Result<Vec<_>>>()?;

    Ok(LabeledDataset {
        samples,
        class_names: classes.into_iter().map(|(n, _)| n).collect(),
        source_dir: Some(dir.to_path_buf()),
    })
}

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Decodes an 8- or 16-bit grayscale image. RGB files are accepted only when
/// all three channels are identical.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let unreadable = |reason: String| DataError::Unreadable {
        path: path.to_path_buf(),
        reason,
    };
    let img = image::open(path).map_err(|e| unreadable(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (pixels, max) = match img {
        DynamicImage::ImageLuma8(b) => (b.into_raw().into_iter().map(f32::from).collect(), 255.0),
        DynamicImage::ImageLuma16(b) => {
            (b.into_raw().into_iter().map(f32::from).collect(), 65535.0)
        }
        DynamicImage::ImageLumaA8(b) => (b.pixels().map(|p| f32::from(p.0[0])).collect(), 255.0),
        DynamicImage::ImageRgb8(b) => {
            if b.pixels().any(|p| p.0[0] != p.0[1] || p.0[1] != p.0[2]) {
                return Err(unreadable("color image; expected grayscale".into()).into());
            }
            (b.pixels().map(|p| f32::from(p.0[0])).collect(), 255.0)
        }
        DynamicImage::ImageRgba8(b) => {
            if b.pixels().any(|p| p.0[0] != p.0[1] || p.0[1] != p.0[2]) {
                return Err(unreadable("color image; expected grayscale".into()).into());
            }
            (b.pixels().map(|p| f32::from(p.0[0])).collect(), 255.0)
        }
        other => {
            return Err(unreadable(format!("unsupported pixel format {:?}", other.color())).into())
        }
    };
    GrayImage::new(w, h, pixels, max)
}

/// Replicates a `[H, W]` (or `[1, H, W]`) image across three channels.
pub fn to_three_channel<T: Float>(gray: &Tensor<T>) -> Result<Tensor<T>> {
    let s = gray.shape();
    let (h, w) = match s {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        [c, _, _] => return Err(DataError::NotGrayscale(*c).into()),
        _ => return Err(DataError::NotGrayscale(0).into()),
    };
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(gray.data());
    }
    Ok(Tensor::from_parts(vec![3, h, w], data))
}

/// Corner-aligned bilinear resize to `size × size`.
pub fn resize_bilinear(img: &GrayImage, size: usize) -> Vec<f32> {
    if img.width == size && img.height == size {
        return img.pixels.clone();
    }
    let scale = |src: usize| {
        if size > 1 {
            (src - 1) as f64 / (size - 1) as f64
        } else {
            0.0
        }
    };
    let (sy, sx) = (scale(img.height), scale(img.width));
    let px = |x: usize, y: usize| img.pixels[y * img.width + x] as f64;
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        let fy = i as f64 * sy;
        let y0 = (fy.floor() as usize).min(img.height - 1);
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for j in 0..size {
            let fx = j as f64 * sx;
            let x0 = (fx.floor() as usize).min(img.width - 1);
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            let top = px(x0, y0) * (1.0 - wx) + px(x1, y0) * wx;
            let bot = px(x0, y1) * (1.0 - wx) + px(x1, y1) * wx;
            out.push((top * (1.0 - wy) + bot * wy) as f32);
        }
    }
    out
}

/// Resize to the model input, scale to `[0, 1]`, replicate to three channels.
pub fn preprocess<T: Float>(img: &GrayImage, cfg: &VimConfig) -> Result<Tensor<T>> {
    if img.width == 0 || img.height == 0 {
        return Err(DataError::ZeroArea {
            width: img.width,
            height: img.height,
        }
        .into());
    }
    let s = cfg.image_size;
    let inv = 1.0 / img.max_value;
    let scaled: Vec<T> = resize_bilinear(img, s)
        .into_iter()
        .map(|v| T::of((v * inv).clamp(0.0, 1.0) as f64))
        .collect();
    let gray = Tensor::from_parts(vec![s, s], scaled);
    if cfg.in_channels == 1 {
        return gray.reshape(vec![1, s, s]);
    }
    to_three_channel(&gray)
}

/// Preprocessed, model-ready images for one partition.
#[derive(Clone, Debug)]
pub struct PreparedSet<T: Float = f32> {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    images: Vec<T>,
    image_shape: [usize; 3],
}

impl<T: Float> PreparedSet<T> {
    pub fn new(ds: &LabeledDataset, indices: &[usize], cfg: &VimConfig) -> Result<Self> {
        let tensors = indices
            .par_iter()
            .map(|&i| preprocess::<T>(&ds.samples[i].image, cfg))
            .collect::<Result<Vec<_>>>()?;
        let mut images = Vec::with_capacity(tensors.iter().map(|t| t.numel()).sum());
        for t in tensors {
            images.extend_from_slice(t.data());
        }
        Ok(PreparedSet {
            ids: indices.iter().map(|&i| ds.samples[i].id.clone()).collect(),
            labels: indices.iter().map(|&i| ds.samples[i].label).collect(),
            images,
            image_shape: [cfg.in_channels, cfg.image_size, cfg.image_size],
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacks the selected items into a `[B, C, S, S]` tensor.
    pub fn gather(&self, items: &[usize]) -> Tensor<T> {
        let per: usize = self.image_shape.iter().product();
        let mut data = Vec::with_capacity(items.len() * per);
        for &i in items {
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&self.image_shape);
        Tensor::from_parts(shape, data)
    }

    /// Seeded, epoch-keyed shuffled batches; the last batch may be short.
    pub fn batches(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: usize,
    ) -> impl Iterator<Item = (Tensor<T>, Vec<usize>)> + '_ {
        batch_order(self.len(), batch_size, seed, epoch)
            .into_iter()
            .map(move |items| {
                let labels = items.iter().map(|&i| self.labels[i]).collect();
                (self.gather(&items), labels)
            })
    }

    /// Unshuffled consecutive chunks, for evaluation.
    pub fn chunks(&self, batch_size: usize) -> impl Iterator<Item = (Tensor<T>, Vec<usize>)> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1))
            .map(|c| {
                let labels = c.iter().map(|&i| self.labels[i]).collect();
                (self.gather(c), labels)
            })
            .collect::<Vec<_>>()
            .into_iter()
    }
}
