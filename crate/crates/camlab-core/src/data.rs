//! Deterministic synthetic image classification data and folder ingestion.
//!
//! Each class is a distinct glyph stamped onto a noisy canvas at a jittered
//! position. The glyph support, downsampled to the CAM grid, doubles as the
//! per-image beneficial salience target. Splits draw from disjoint seed
//! streams, so regenerating a spec reproduces every pixel.

use crate::error::{Error, Result};
use crate::img;
use crate::seeds;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

const STAMP: usize = 9;
/// Spatial shrink factor from image to CAM grid (two 2x2 pools).
const CAM_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GlyphFamily {
    /// Ten hand-drawn shapes; capacity 10.
    Geometric,
    /// Per-class pseudorandom binary stamps; capacity 4096.
    Coded,
}

impl GlyphFamily {
    pub fn capacity(self) -> usize {
        match self {
            GlyphFamily::Geometric => 10,
            GlyphFamily::Coded => 4096,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GlyphFamily::Geometric => "geometric",
            GlyphFamily::Coded => "coded",
        }
    }

    pub fn from_name(name: &str) -> Option<GlyphFamily> {
        match name {
            "geometric" => Some(GlyphFamily::Geometric),
            "coded" => Some(GlyphFamily::Coded),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub family: GlyphFamily,
    /// Maximum absolute offset of the glyph from the centered position.
    pub jitter: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(class_count: usize, family: GlyphFamily, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            class_count,
            train_per_class: 25,
            val_per_class: 5,
            test_per_class: 5,
            image_size: 28,
            family,
            jitter: 4,
            noise_std: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if self.class_count > self.family.capacity() {
            return Err(Error::InvalidConfig(format!(
                "{} classes exceed the {} glyph capacity of {}",
                self.class_count,
                self.family.name(),
                self.family.capacity()
            )));
        }
        if self.image_size < STAMP || self.image_size % CAM_RATIO != 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {} must be >= {} and divisible by {}",
                self.image_size, STAMP, CAM_RATIO
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::InvalidConfig("negative noise std".into()));
        }
        Ok(())
    }

    pub fn cam_size(&self) -> usize {
        self.image_size / CAM_RATIO
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: Split,
    pub class_count: usize,
    /// `[1, H, W]` images with values in [0,1].
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Per-image salience at CAM resolution; present for synthetic data.
    pub masks: Option<Vec<Tensor>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn geometric_stamp(class: usize) -> [[f64; STAMP]; STAMP] {
    let mut s = [[0.0; STAMP]; STAMP];
    let last = STAMP - 1;
    let mid = STAMP / 2;
    for i in 0..STAMP {
        for j in 0..STAMP {
            let on = match class {
                0 => true,                                         // filled square
                1 => i == 0 || i == last || j == 0 || j == last,   // hollow square
                2 => i == mid || j == mid,                         // plus
                3 => i == j || i + j == last,                      // X
                4 => i % 2 == 0,                                   // horizontal bars
                5 => j % 2 == 0,                                   // vertical bars
                6 => (i + j) % 2 == 0,                             // checkerboard
                7 => i.abs_diff(mid) + j.abs_diff(mid) <= mid,     // diamond
                8 => i < 2 || j < 2,                               // corner L
                9 => i < 2 || j == mid,                            // T
                _ => unreachable!("geometric capacity is 10"),
            };
            if on {
                s[i][j] = 1.0;
            }
        }
    }
    s
}

fn coded_stamp(class: usize, seed: u64) -> [[f64; STAMP]; STAMP] {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 7, class as u64, 0));
    let mut s = [[0.0; STAMP]; STAMP];
    for row in &mut s {
        for cell in row.iter_mut() {
            if rng.gen_bool(0.5) {
                *cell = 1.0;
            }
        }
    }
    // A border ring keeps every pattern clearly visible over noise even if
    // the random bits come out sparse.
    for i in 0..STAMP {
        s[0][i] = 1.0;
        s[i][0] = 1.0;
    }
    s
}

fn stamp_for(spec: &SyntheticSpec, class: usize) -> [[f64; STAMP]; STAMP] {
    match spec.family {
        GlyphFamily::Geometric => geometric_stamp(class),
        GlyphFamily::Coded => coded_stamp(class, spec.seed),
    }
}

fn render_sample(spec: &SyntheticSpec, split: Split, class: usize, index: usize) -> (Tensor, Tensor) {
    let size = spec.image_size;
    let split_id = match split {
        Split::Train => 100,
        Split::Val => 101,
        Split::Test => 102,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
        spec.seed,
        split_id,
        class as u64,
        index as u64,
    ));
    let stamp = stamp_for(spec, class);

    let center = (size - STAMP) / 2;
    let max_off = center.min(size - STAMP - center);
    let jitter = spec.jitter.min(max_off) as i64;
    let dy = rng.gen_range(-jitter..=jitter);
    let dx = rng.gen_range(-jitter..=jitter);
    let top = (center as i64 + dy) as usize;
    let left = (center as i64 + dx) as usize;

    let mut image = Tensor::zeros(&[1, size, size]);
    for a in 0..STAMP {
        for b in 0..STAMP {
            image.data_mut()[(top + a) * size + left + b] = stamp[a][b];
        }
    }

    // Ground-truth salience: glyph bounding support on the CAM grid.
    let cam = spec.cam_size();
    let mut mask = Tensor::zeros(&[cam, cam]);
    for a in 0..STAMP {
        for b in 0..STAMP {
            if stamp[a][b] > 0.0 {
                let ci = (top + a) / CAM_RATIO;
                let cj = (left + b) / CAM_RATIO;
                mask.data_mut()[ci * cam + cj] = 1.0;
            }
        }
    }

    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).unwrap();
        for v in image.data_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    (image, mask)
}

fn generate_split(spec: &SyntheticSpec, split: Split, per_class: usize) -> Dataset {
    let jobs: Vec<(usize, usize)> = (0..spec.class_count)
        .flat_map(|c| (0..per_class).map(move |i| (c, i)))
        .collect();
    let rendered: Vec<(Tensor, Tensor)> = jobs
        .par_iter()
        .map(|&(c, i)| render_sample(spec, split, c, i))
        .collect();
    let mut images = Vec::with_capacity(jobs.len());
    let mut masks = Vec::with_capacity(jobs.len());
    let mut labels = Vec::with_capacity(jobs.len());
    for ((c, _), (image, mask)) in jobs.into_iter().zip(rendered) {
        images.push(image);
        masks.push(mask);
        labels.push(c);
    }
    Dataset {
        split,
        class_count: spec.class_count,
        images,
        labels,
        masks: Some(masks),
    }
}

/// Generate the three splits of a spec.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticSplits> {
    spec.validate()?;
    Ok(SyntheticSplits {
        train: generate_split(spec, Split::Train, spec.train_per_class),
        val: generate_split(spec, Split::Val, spec.val_per_class),
        test: generate_split(spec, Split::Test, spec.test_per_class),
    })
}

/// Bilinear resample in both directions (corner-aligned).
fn resize_bilinear(map: &Tensor, height: usize, width: usize) -> Tensor {
    let (u, v) = (map.shape()[0], map.shape()[1]);
    if (u, v) == (height, width) {
        return map.clone();
    }
    let scale_y = if height > 1 { (u - 1) as f64 / (height - 1) as f64 } else { 0.0 };
    let scale_x = if width > 1 { (v - 1) as f64 / (width - 1) as f64 } else { 0.0 };
    let mut out = Tensor::zeros(&[height, width]);
    for i in 0..height {
        let y = i as f64 * scale_y;
        let y0 = (y.floor() as usize).min(u - 1);
        let y1 = (y0 + 1).min(u - 1);
        let fy = y - y0 as f64;
        for j in 0..width {
            let x = j as f64 * scale_x;
            let x0 = (x.floor() as usize).min(v - 1);
            let x1 = (x0 + 1).min(v - 1);
            let fx = x - x0 as f64;
            out.data_mut()[i * width + j] = map.at(&[y0, x0]) * (1.0 - fy) * (1.0 - fx)
                + map.at(&[y0, x1]) * (1.0 - fy) * fx
                + map.at(&[y1, x0]) * fy * (1.0 - fx)
                + map.at(&[y1, x1]) * fy * fx;
        }
    }
    out
}

/// Parse `label_index.ext` into the label.
fn label_from_name(name: &str) -> Result<usize> {
    let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name);
    let label = stem
        .split('_')
        .next()
        .ok_or_else(|| Error::Format(format!("cannot parse label from {:?}", name)))?;
    label
        .parse()
        .map_err(|_| Error::Format(format!("cannot parse label from {:?}", name)))
}

/// Load a flat folder of `label_index.pgm` grayscale images, resizing each
/// to `image_size`.
pub fn load_folder(path: &Path, image_size: usize) -> Result<Dataset> {
    let mut names: Vec<String> = Vec::new();
    let entries =
        std::fs::read_dir(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(path.display().to_string(), e))?;
        if entry
            .file_type()
            .map_err(|e| Error::io(path.display().to_string(), e))?
            .is_file()
        {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut class_count = 0;
    for name in names {
        match name.rsplit_once('.') {
            Some((_, "pgm")) => {}
            _ => {
                return Err(Error::Format(format!(
                    "unknown extension on {:?} (expected .pgm)",
                    name
                )))
            }
        }
        let label = label_from_name(&name)?;
        let gray = img::read_pgm(&path.join(&name))?;
        let resized = resize_bilinear(&gray, image_size, image_size);
        images.push(resized.reshaped(vec![1, image_size, image_size])?);
        labels.push(label);
        class_count = class_count.max(label + 1);
    }
    Ok(Dataset {
        split: Split::Test,
        class_count,
        images,
        labels,
        masks: None,
    })
}

/// Write one split: images and masks as PGM files plus a manifest line per
/// sample (`relative-image-path label relative-mask-path?`).
pub fn save_split(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("masks"))
        .map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut per_class: Vec<usize> = vec![0; dataset.class_count];
    let mut manifest = String::new();
    for (i, (image, &label)) in dataset.images.iter().zip(&dataset.labels).enumerate() {
        let idx = per_class[label];
        per_class[label] += 1;
        let name = format!("{}_{:04}.pgm", label, idx);
        let (h, w) = (image.shape()[1], image.shape()[2]);
        img::write_pgm(&image.reshaped(vec![h, w])?, &dir.join(&name))?;
        let mask_field = if let Some(masks) = &dataset.masks {
            let mask_name = format!("masks/{}_{:04}.pgm", label, idx);
            img::write_pgm(&masks[i], &dir.join(&mask_name))?;
            mask_name
        } else {
            "-".into()
        };
        let _ = writeln!(manifest, "{} {} {}", name, label, mask_field);
    }
    std::fs::write(dir.join("manifest.txt"), manifest)
        .map_err(|e| Error::io(dir.display().to_string(), e))
}

/// Read a split back through its manifest.
pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut masks = Vec::new();
    let mut class_count = 0;
    let mut all_have_masks = true;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (name, label, mask_field) = match (parts.next(), parts.next(), parts.next()) {
            (Some(n), Some(l), Some(m)) => (n, l, m),
            _ => return Err(Error::Format(format!("bad manifest line: {:?}", line))),
        };
        let label: usize = label
            .parse()
            .map_err(|_| Error::Format(format!("bad label in manifest line: {:?}", line)))?;
        let gray = img::read_pgm(&dir.join(name))?;
        let (h, w) = (gray.shape()[0], gray.shape()[1]);
        images.push(gray.reshaped(vec![1, h, w])?);
        labels.push(label);
        class_count = class_count.max(label + 1);
        if mask_field == "-" {
            all_have_masks = false;
        } else {
            masks.push(img::read_pgm(&dir.join(mask_field))?);
        }
    }
    Ok(Dataset {
        split,
        class_count,
        images,
        labels,
        masks: if all_have_masks && !masks.is_empty() {
            Some(masks)
        } else {
            None
        },
    })
}

/// Write all three splits under `dir/{train,val,test}`.
pub fn save_splits(splits: &SyntheticSplits, dir: &Path) -> Result<()> {
    save_split(&splits.train, &dir.join("train"))?;
    save_split(&splits.val, &dir.join("val"))?;
    save_split(&splits.test, &dir.join("test"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_spec() -> SyntheticSpec {
        let mut spec = SyntheticSpec::new(4, GlyphFamily::Geometric, 17);
        spec.train_per_class = 3;
        spec.val_per_class = 2;
        spec.test_per_class = 2;
        spec
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for (x, y) in a.train.images.iter().zip(&b.train.images) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        assert_eq!(a.train.labels, b.train.labels);
    }

    #[test]
    fn cardinality_193_per_class() {
        let mut spec = SyntheticSpec::new(7, GlyphFamily::Geometric, 1);
        spec.train_per_class = 193;
        spec.val_per_class = 1;
        spec.test_per_class = 1;
        let splits = generate(&spec).unwrap();
        assert_eq!(splits.train.len(), 1351);
    }

    #[test]
    fn zero_noise_zero_jitter_repeats_within_class() {
        let mut spec = small_spec();
        spec.noise_std = 0.0;
        spec.jitter = 0;
        let splits = generate(&spec).unwrap();
        let first = &splits.train.images[0];
        let second = &splits.train.images[1];
        assert_eq!(splits.train.labels[0], splits.train.labels[1]);
        assert_eq!(first.data(), second.data());
    }

    #[test]
    fn masks_nonzero_and_in_bounds() {
        let splits = generate(&small_spec()).unwrap();
        for mask in splits.train.masks.as_ref().unwrap() {
            assert_eq!(mask.shape(), &[7, 7]);
            assert!(mask.data().iter().any(|&v| v > 0.0));
            assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn capacity_enforced() {
        let spec = SyntheticSpec::new(11, GlyphFamily::Geometric, 1);
        assert!(generate(&spec).is_err());
        let spec = SyntheticSpec::new(100, GlyphFamily::Coded, 1);
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn splits_differ() {
        let spec = small_spec();
        let splits = generate(&spec).unwrap();
        assert_ne!(splits.train.images[0].data(), splits.val.images[0].data());
    }

    #[test]
    fn empty_folder_empty_dataset() {
        let dir = tempdir().unwrap();
        let ds = load_folder(dir.path(), 28).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn folder_round_trip_within_quantization() {
        let dir = tempdir().unwrap();
        let spec = small_spec();
        let splits = generate(&spec).unwrap();
        let mut per_class = vec![0usize; spec.class_count];
        for (image, &label) in splits.val.images.iter().zip(&splits.val.labels) {
            let name = format!("{}_{:04}.pgm", label, per_class[label]);
            per_class[label] += 1;
            img::write_pgm(&image.reshaped(vec![28, 28]).unwrap(), &dir.path().join(name)).unwrap();
        }
        let back = load_folder(dir.path(), 28).unwrap();
        assert_eq!(back.len(), splits.val.len());
        // Files sort by label then index, matching generation order.
        for (a, b) in back.images.iter().zip(&splits.val.images) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1.0 / 255.0 + 1e-12);
            }
        }
        assert_eq!(back.labels, splits.val.labels);
    }

    #[test]
    fn manifest_round_trip_keeps_masks() {
        let dir = tempdir().unwrap();
        let spec = small_spec();
        let splits = generate(&spec).unwrap();
        save_split(&splits.train, dir.path()).unwrap();
        let back = load_split(dir.path(), Split::Train).unwrap();
        assert_eq!(back.len(), splits.train.len());
        let masks = back.masks.unwrap();
        for (m, orig) in masks.iter().zip(splits.train.masks.as_ref().unwrap()) {
            assert_eq!(m.data(), orig.data(), "binary masks survive quantization");
        }
    }

    #[test]
    fn wrong_size_file_resized() {
        let dir = tempdir().unwrap();
        let odd = Tensor::filled(&[14, 20], 0.5);
        img::write_pgm(&odd, &dir.path().join("2_0000.pgm")).unwrap();
        let ds = load_folder(dir.path(), 28).unwrap();
        assert_eq!(ds.images[0].shape(), &[1, 28, 28]);
        assert_eq!(ds.labels, vec![2]);
        assert_eq!(ds.class_count, 3);
    }

    #[test]
    fn unknown_extension_rejected() {
        let dir = tempdir().unwrap();
        std::fs::write(dir.path().join("1_0000.png"), b"junk").unwrap();
        assert!(load_folder(dir.path(), 28).is_err());
    }

    #[test]
    fn bad_label_rejected() {
        let dir = tempdir().unwrap();
        let im = Tensor::filled(&[7, 7], 0.5);
        img::write_pgm(&im, &dir.path().join("x_0000.pgm")).unwrap();
        assert!(load_folder(dir.path(), 28).is_err());
    }
}
