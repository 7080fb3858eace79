//! Synthetic long-tailed segmentation data: generation of shape scenes,
//! labeled/unlabeled splitting, and loading of the on-disk dataset layout
//! (`images/<id>.png`, `masks/<id>.png`, `splits/<name>.txt`, `meta.json`).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{derive_seed, hash_id, randn, Image, Mask, IGNORE};

const RENDER_PURPOSE: u64 = 0x5259_4e44;
const SPLIT_PURPOSE: u64 = 0x5350_4c54;

/// Recipe for one synthetic dataset. Identical specs produce byte-identical
/// datasets, regardless of generation thread count.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    /// (height, width) of every image.
    pub image_size: (usize, usize),
    pub num_images: usize,
    /// Relative shape-placement rate per class; normalized before use.
    /// Defaults to a geometric tail: rate(j) = 0.5^j.
    pub class_frequency: Vec<f64>,
    /// Inclusive (min, max) shapes per image.
    pub shapes_per_image: (usize, usize),
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn with_defaults(
        num_classes: usize,
        image_size: (usize, usize),
        num_images: usize,
        seed: u64,
    ) -> Self {
        Self {
            num_classes,
            image_size,
            num_images,
            class_frequency: geometric_frequency(num_classes),
            shapes_per_image: (2, 6),
            noise_std: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::validation("num_classes must be at least 2"));
        }
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return Err(Error::validation("image_size must be at least 16x16"));
        }
        if self.num_images == 0 {
            return Err(Error::validation("num_images must be at least 1"));
        }
        if self.class_frequency.len() != self.num_classes {
            return Err(Error::validation(format!(
                "class_frequency has {} entries, expected {}",
                self.class_frequency.len(),
                self.num_classes
            )));
        }
        if self.class_frequency.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
            return Err(Error::validation(
                "class_frequency entries must be strictly positive and finite",
            ));
        }
        if self.shapes_per_image.0 > self.shapes_per_image.1 {
            return Err(Error::validation("shapes_per_image: min exceeds max"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::validation("noise_std must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn normalized_frequency(&self) -> Vec<f64> {
        let sum: f64 = self.class_frequency.iter().sum();
        self.class_frequency.iter().map(|f| f / sum).collect()
    }
}

pub fn geometric_frequency(num_classes: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..num_classes).map(|j| 0.5f64.powi(j as i32)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|f| f / sum).collect()
}

/// Companion file describing a dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_spec: Option<SynthSpec>,
    /// Shapes placed per class during generation, for frequency audits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_counts: Option<Vec<u64>>,
}

/// View of a dataset directory plus a labeled/unlabeled partition of its
/// item ids. Freshly opened or generated datasets treat every item with a
/// mask file as labeled.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub ids: Vec<String>,
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub num_classes: usize,
}

impl DatasetIndex {
    pub fn open(root: &Path) -> Result<Self> {
        let meta = read_meta(root)?;
        let images_dir = root.join("images");
        let mut ids = Vec::new();
        let entries = fs::read_dir(&images_dir)
            .map_err(|e| Error::io(images_dir.clone(), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(images_dir.clone(), e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name.strip_suffix(".png") {
                ids.push(stem.to_string());
            }
        }
        ids.sort();
        if ids.is_empty() {
            return Err(Error::validation(format!(
                "no images found under {}",
                images_dir.display()
            )));
        }
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        for id in &ids {
            if root.join("masks").join(format!("{id}.png")).exists() {
                labeled.push(id.clone());
            } else {
                unlabeled.push(id.clone());
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            ids,
            labeled_ids: labeled,
            unlabeled_ids: unlabeled,
            num_classes: meta.num_classes,
        })
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.png"))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.root.join("masks").join(format!("{id}.png"))
    }
}

pub fn read_meta(root: &Path) -> Result<DatasetMeta> {
    let path = root.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.clone(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Renders and writes every item of `spec` under `root`. Returns an index
/// with every item labeled.
pub fn generate_dataset(spec: &SynthSpec, root: &Path) -> Result<DatasetIndex> {
    spec.validate()?;
    for sub in ["images", "masks", "splits"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.clone(), e))?;
    }

    let per_item: Vec<Vec<u64>> = (0..spec.num_images)
        .into_par_iter()
        .map(|idx| {
            let id = item_id(idx);
            let rendered = render_item(spec, idx);
            write_png_rgb(&root.join("images").join(format!("{id}.png")), &rendered.image)?;
            write_png_gray(&root.join("masks").join(format!("{id}.png")), &rendered.mask)?;
            Ok(rendered.shape_counts)
        })
        .collect::<Result<_>>()?;

    let mut shape_counts = vec![0u64; spec.num_classes];
    for counts in &per_item {
        for (acc, c) in shape_counts.iter_mut().zip(counts) {
            *acc += c;
        }
    }

    let meta = DatasetMeta {
        num_classes: spec.num_classes,
        class_names: class_names(spec.num_classes),
        generator_spec: Some(spec.clone()),
        shape_counts: Some(shape_counts),
    };
    let meta_path = root.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, text).map_err(|e| Error::io(meta_path.clone(), e))?;

    let ids: Vec<String> = (0..spec.num_images).map(item_id).collect();
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        ids: ids.clone(),
        labeled_ids: ids,
        unlabeled_ids: Vec::new(),
        num_classes: spec.num_classes,
    })
}

fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|j| {
            if j == 0 {
                "background".to_string()
            } else {
                format!("class_{j:02}")
            }
        })
        .collect()
}

pub fn item_id(idx: usize) -> String {
    format!("img_{idx:06}")
}

/// Re-partitions the ids of `index` into ⌈fraction·N⌉ labeled items sampled
/// uniformly by `seed`, with the complement unlabeled.
pub fn split_dataset(index: &DatasetIndex, labeled_fraction: f64, seed: u64) -> Result<DatasetIndex> {
    if index.ids.is_empty() {
        return Err(Error::validation("cannot split an empty dataset"));
    }
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::validation(
            "labeled_fraction must be in (0, 1]",
        ));
    }
    let n = index.ids.len();
    let take = ((labeled_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, n as u64, SPLIT_PURPOSE]));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut chosen: Vec<usize> = order[..take].to_vec();
    chosen.sort_unstable();
    let mut labeled = Vec::with_capacity(take);
    let mut unlabeled = Vec::with_capacity(n - take);
    let mut pick = chosen.iter().peekable();
    for (i, id) in index.ids.iter().enumerate() {
        if pick.peek() == Some(&&i) {
            labeled.push(id.clone());
            pick.next();
        } else {
            unlabeled.push(id.clone());
        }
    }
    Ok(DatasetIndex {
        root: index.root.clone(),
        ids: index.ids.clone(),
        labeled_ids: labeled,
        unlabeled_ids: unlabeled,
        num_classes: index.num_classes,
    })
}

/// Writes the labeled ids of `index` to `splits/<name>.txt`, one per line.
pub fn save_split(index: &DatasetIndex, name: &str) -> Result<()> {
    let dir = index.root.join("splits");
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.clone(), e))?;
    let path = dir.join(format!("{name}.txt"));
    let mut text = String::new();
    for id in &index.labeled_ids {
        text.push_str(id);
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Reloads a split written by [`save_split`] against the full index.
pub fn load_split(index: &DatasetIndex, name: &str) -> Result<DatasetIndex> {
    let path = index.root.join("splits").join(format!("{name}.txt"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.clone(), e))?;
    let labeled: Vec<String> = text.lines().map(str::to_string).filter(|s| !s.is_empty()).collect();
    for id in &labeled {
        if !index.ids.contains(id) {
            return Err(Error::validation(format!(
                "split {} names unknown id {id}",
                path.display()
            )));
        }
    }
    let unlabeled: Vec<String> = index
        .ids
        .iter()
        .filter(|id| !labeled.contains(id))
        .cloned()
        .collect();
    Ok(DatasetIndex {
        root: index.root.clone(),
        ids: index.ids.clone(),
        labeled_ids: labeled,
        unlabeled_ids: unlabeled,
        num_classes: index.num_classes,
    })
}

/// Loads one item: image scaled to [0,1], mask only for labeled ids.
pub fn load_item(index: &DatasetIndex, id: &str) -> Result<(Image, Option<Mask>)> {
    if !index.ids.contains(&id.to_string()) {
        return Err(Error::validation(format!("unknown item id {id}")));
    }
    let img_path = index.image_path(id);
    let img = image::open(&img_path)
        .map_err(|e| Error::image(img_path.clone(), e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut image = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            image[(c, y as usize, x as usize)] = px.0[c] as f64 / 255.0;
        }
    }
    if !index.labeled_ids.contains(&id.to_string()) {
        return Ok((image, None));
    }
    let mask_path = index.mask_path(id);
    let mask_img = image::open(&mask_path)
        .map_err(|e| Error::image(mask_path.clone(), e))?
        .to_luma8();
    let (mw, mh) = mask_img.dimensions();
    if (mw, mh) != (w, h) {
        return Err(Error::validation(format!(
            "mask {} is {}x{}, image is {}x{}",
            mask_path.display(),
            mw,
            mh,
            w,
            h
        )));
    }
    let mut mask = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, px) in mask_img.enumerate_pixels() {
        let v = px.0[0];
        if v != IGNORE && v as usize >= index.num_classes {
            return Err(Error::validation(format!(
                "mask {} holds class {v}, dataset has {} classes",
                mask_path.display(),
                index.num_classes
            )));
        }
        mask[(y as usize, x as usize)] = v;
    }
    Ok((image, Some(mask)))
}

struct RenderedItem {
    image: Image,
    mask: Mask,
    shape_counts: Vec<u64>,
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Rect,
    Circle,
    Triangle,
}

/// Renders one scene. Each item seeds its own RNG from (spec seed, id), so
/// any generation order yields identical pixels.
fn render_item(spec: &SynthSpec, idx: usize) -> RenderedItem {
    let (h, w) = spec.image_size;
    let id = item_id(idx);
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, hash_id(&id), RENDER_PURPOSE]));

    let mut image = Array3::<f64>::zeros((3, h, w));
    let mut mask = Array2::<u8>::zeros((h, w));

    // textured background: tinted base with a gentle two-axis gradient
    let base_v: f64 = rng.random_range(0.55..0.75);
    let tint_hue: f64 = rng.random_range(0.0..360.0);
    let (br, bg, bb) = hsv_to_rgb(tint_hue, 0.08, base_v);
    let grad_x: f64 = rng.random_range(-0.08..0.08);
    let grad_y: f64 = rng.random_range(-0.08..0.08);
    for y in 0..h {
        for x in 0..w {
            let fx = if w > 1 { x as f64 / (w - 1) as f64 - 0.5 } else { 0.0 };
            let fy = if h > 1 { y as f64 / (h - 1) as f64 - 0.5 } else { 0.0 };
            let shade = grad_x * 2.0 * fx + grad_y * 2.0 * fy;
            image[(0, y, x)] = br + shade;
            image[(1, y, x)] = bg + shade;
            image[(2, y, x)] = bb + shade;
        }
    }

    let freq = spec.normalized_frequency();
    let mut cumulative = Vec::with_capacity(freq.len());
    let mut acc = 0.0;
    for f in &freq {
        acc += f;
        cumulative.push(acc);
    }

    let mut shape_counts = vec![0u64; spec.num_classes];
    let (lo, hi) = spec.shapes_per_image;
    let count = rng.random_range(lo..=hi);
    let m = h.min(w) as f64;
    for _ in 0..count {
        let u: f64 = rng.random_range(0.0..1.0);
        let class = cumulative.iter().position(|&c| u < c).unwrap_or(spec.num_classes - 1);
        shape_counts[class] += 1;
        let kind = match rng.random_range(0..3u8) {
            0 => ShapeKind::Rect,
            1 => ShapeKind::Circle,
            _ => ShapeKind::Triangle,
        };
        let cy: f64 = rng.random_range(0.0..h as f64);
        let cx: f64 = rng.random_range(0.0..w as f64);
        let color = class_color(class, spec.num_classes, &mut rng);
        draw_shape(&mut image, &mut mask, kind, class as u8, (cy, cx), m, color, &mut rng);
    }

    if spec.noise_std > 0.0 {
        for v in image.iter_mut() {
            *v += spec.noise_std * randn(&mut rng);
        }
    }
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));
    RenderedItem {
        image,
        mask,
        shape_counts,
    }
}

/// Class 0 shapes are achromatic distractors; other classes get a fixed hue
/// with per-shape brightness jitter.
fn class_color(class: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    if class == 0 {
        let g: f64 = rng.random_range(0.2..0.4);
        (g, g, g)
    } else {
        let hue = class as f64 / num_classes as f64 * 360.0;
        let v: f64 = rng.random_range(0.65..0.9);
        hsv_to_rgb(hue, 0.85, v)
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_shape(
    image: &mut Image,
    mask: &mut Mask,
    kind: ShapeKind,
    class: u8,
    center: (f64, f64),
    m: f64,
    color: (f64, f64, f64),
    rng: &mut ChaCha8Rng,
) {
    let (h, w) = mask.dim();
    let (cy, cx) = center;
    let (extent_y, extent_x, inside): (f64, f64, Box<dyn Fn(f64, f64) -> bool>) = match kind {
        ShapeKind::Rect => {
            let hh: f64 = rng.random_range(0.08..0.2) * m;
            let hw: f64 = rng.random_range(0.08..0.2) * m;
            (
                hh,
                hw,
                Box::new(move |dy: f64, dx: f64| dy.abs() <= hh && dx.abs() <= hw),
            )
        }
        ShapeKind::Circle => {
            let r: f64 = rng.random_range(0.1..0.2) * m;
            (r, r, Box::new(move |dy: f64, dx: f64| dy * dy + dx * dx <= r * r))
        }
        ShapeKind::Triangle => {
            // apex up, flat base down
            let r: f64 = rng.random_range(0.12..0.24) * m;
            (
                r,
                r,
                Box::new(move |dy: f64, dx: f64| {
                    dy >= -r && dy <= r && dx.abs() <= (dy + r) / (2.0 * r) * r
                }),
            )
        }
    };
    let y0 = ((cy - extent_y).floor().max(0.0)) as usize;
    let y1 = ((cy + extent_y).ceil().min(h as f64 - 1.0)) as usize;
    let x0 = ((cx - extent_x).floor().max(0.0)) as usize;
    let x1 = ((cx + extent_x).ceil().min(w as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if inside(y as f64 - cy, x as f64 - cx) {
                image[(0, y, x)] = color.0;
                image[(1, y, x)] = color.1;
                image[(2, y, x)] = color.2;
                mask[(y, x)] = class;
            }
        }
    }
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn write_png_rgb(path: &Path, image: &Image) -> Result<()> {
    let (_, h, w) = image.dim();
    let mut raw = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                raw.push((image[(c, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("raw buffer sized");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path.to_path_buf(), e))
}

fn write_png_gray(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let mut raw = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            raw.push(mask[(y, x)]);
        }
    }
    let buf = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("raw buffer sized");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path.to_path_buf(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn fake_index(n: usize) -> DatasetIndex {
        let ids: Vec<String> = (0..n).map(item_id).collect();
        DatasetIndex {
            root: PathBuf::from("/nonexistent"),
            labeled_ids: ids.clone(),
            unlabeled_ids: Vec::new(),
            ids,
            num_classes: 2,
        }
    }

    fn tmp_root(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "dssn-synth-{tag}-{}",
            std::process::id()
        ));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn zero_shapes_gives_all_background_mask() {
        let root = tmp_root("zeroshapes");
        let mut spec = SynthSpec::with_defaults(2, (32, 32), 1, 3);
        spec.shapes_per_image = (0, 0);
        let index = generate_dataset(&spec, &root).unwrap();
        let (image, mask) = load_item(&index, &index.ids[0]).unwrap();
        let mask = mask.unwrap();
        assert!(mask.iter().all(|&v| v == 0));
        assert!(image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn identical_spec_produces_byte_identical_files() {
        let ra = tmp_root("det-a");
        let rb = tmp_root("det-b");
        let spec = SynthSpec::with_defaults(3, (32, 32), 4, 11);
        let ia = generate_dataset(&spec, &ra).unwrap();
        let ib = generate_dataset(&spec, &rb).unwrap();
        assert_eq!(ia.ids, ib.ids);
        for id in &ia.ids {
            let a = fs::read(ia.image_path(id)).unwrap();
            let b = fs::read(ib.image_path(id)).unwrap();
            assert_eq!(a, b, "image bytes differ for {id}");
            let a = fs::read(ia.mask_path(id)).unwrap();
            let b = fs::read(ib.mask_path(id)).unwrap();
            assert_eq!(a, b, "mask bytes differ for {id}");
        }
        fs::remove_dir_all(&ra).unwrap();
        fs::remove_dir_all(&rb).unwrap();
    }

    #[test]
    fn long_tailed_frequencies_rank_shape_counts() {
        let root = tmp_root("ranks");
        let mut spec = SynthSpec::with_defaults(4, (32, 32), 200, 17);
        spec.class_frequency = vec![0.70, 0.15, 0.10, 0.05];
        spec.noise_std = 0.0;
        generate_dataset(&spec, &root).unwrap();
        let meta = read_meta(&root).unwrap();
        let counts = meta.shape_counts.unwrap();
        assert_eq!(counts.len(), 4);
        assert!(
            counts[0] > counts[1] && counts[1] > counts[2] && counts[2] > counts[3],
            "counts not rank-ordered: {counts:?}"
        );
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn generated_masks_stay_in_class_range() {
        let root = tmp_root("range");
        let spec = SynthSpec::with_defaults(5, (24, 40), 6, 23);
        let index = generate_dataset(&spec, &root).unwrap();
        for id in &index.ids {
            let (_, mask) = load_item(&index, id).unwrap();
            assert!(mask.unwrap().iter().all(|&v| (v as usize) < 5));
        }
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn split_fraction_one_labels_everything() {
        let index = fake_index(10);
        let split = split_dataset(&index, 1.0, 5).unwrap();
        assert_eq!(split.labeled_ids, index.ids);
        assert!(split.unlabeled_ids.is_empty());
    }

    #[test]
    fn split_sixteenth_of_sixteen_gives_one() {
        let index = fake_index(16);
        let split = split_dataset(&index, 1.0 / 16.0, 9).unwrap();
        assert_eq!(split.labeled_ids.len(), 1);
        assert_eq!(split.unlabeled_ids.len(), 15);
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let index = fake_index(37);
        for seed in 0..4u64 {
            for frac in [0.1, 0.33, 0.5, 0.9, 1.0] {
                let a = split_dataset(&index, frac, seed).unwrap();
                let b = split_dataset(&index, frac, seed).unwrap();
                assert_eq!(a.labeled_ids, b.labeled_ids);
                let lab: HashSet<_> = a.labeled_ids.iter().collect();
                let unlab: HashSet<_> = a.unlabeled_ids.iter().collect();
                assert!(lab.is_disjoint(&unlab));
                assert_eq!(lab.len() + unlab.len(), index.ids.len());
                let expect = ((frac * 37.0).ceil() as usize).min(37);
                assert_eq!(a.labeled_ids.len(), expect);
            }
        }
    }

    #[test]
    fn split_rejects_empty_index() {
        let index = fake_index(0);
        assert!(split_dataset(&index, 0.5, 1).is_err());
    }

    #[test]
    fn roundtrip_mask_values_and_sentinel() {
        let root = tmp_root("sentinel");
        fs::create_dir_all(root.join("images")).unwrap();
        fs::create_dir_all(root.join("masks")).unwrap();
        // handmade 2x2 item: image holds a 255 byte, mask holds the sentinel
        let img = image::RgbImage::from_raw(2, 2, vec![255, 0, 0, 0, 255, 0, 0, 0, 255, 9, 9, 9])
            .unwrap();
        img.save_with_format(root.join("images/itm.png"), image::ImageFormat::Png)
            .unwrap();
        let mask = image::GrayImage::from_raw(2, 2, vec![0, 1, 2, IGNORE]).unwrap();
        mask.save_with_format(root.join("masks/itm.png"), image::ImageFormat::Png)
            .unwrap();
        fs::write(
            root.join("meta.json"),
            r#"{"num_classes":3,"class_names":["background","class_01","class_02"]}"#,
        )
        .unwrap();
        let index = DatasetIndex::open(&root).unwrap();
        let (image, mask) = load_item(&index, "itm").unwrap();
        assert_eq!(image[(0, 0, 0)], 1.0);
        let mask = mask.unwrap();
        assert_eq!(mask[(0, 0)], 0);
        assert_eq!(mask[(1, 1)], IGNORE);
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn out_of_range_mask_value_is_rejected() {
        let root = tmp_root("badmask");
        fs::create_dir_all(root.join("images")).unwrap();
        fs::create_dir_all(root.join("masks")).unwrap();
        let img = image::RgbImage::from_raw(1, 1, vec![1, 2, 3]).unwrap();
        img.save_with_format(root.join("images/itm.png"), image::ImageFormat::Png)
            .unwrap();
        let mask = image::GrayImage::from_raw(1, 1, vec![7]).unwrap();
        mask.save_with_format(root.join("masks/itm.png"), image::ImageFormat::Png)
            .unwrap();
        fs::write(
            root.join("meta.json"),
            r#"{"num_classes":3,"class_names":["a","b","c"]}"#,
        )
        .unwrap();
        let index = DatasetIndex::open(&root).unwrap();
        let err = load_item(&index, "itm").unwrap_err();
        assert!(err.is_validation(), "expected validation error, got {err}");
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn unlabeled_ids_load_without_mask() {
        let root = tmp_root("unlab");
        let spec = SynthSpec::with_defaults(3, (16, 16), 4, 2);
        let index = generate_dataset(&spec, &root).unwrap();
        let split = split_dataset(&index, 0.5, 1).unwrap();
        let unlab = &split.unlabeled_ids[0];
        let (_, mask) = load_item(&split, unlab).unwrap();
        assert!(mask.is_none());
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn split_files_roundtrip() {
        let root = tmp_root("splitfile");
        let spec = SynthSpec::with_defaults(2, (16, 16), 8, 4);
        let index = generate_dataset(&spec, &root).unwrap();
        let split = split_dataset(&index, 0.25, 3).unwrap();
        save_split(&split, "lab25").unwrap();
        let reloaded = load_split(&index, "lab25").unwrap();
        assert_eq!(reloaded.labeled_ids, split.labeled_ids);
        assert_eq!(reloaded.unlabeled_ids, split.unlabeled_ids);
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn generate_roundtrip_reproduces_render_masks() {
        let root = tmp_root("maskround");
        let spec = SynthSpec::with_defaults(4, (16, 16), 3, 8);
        let index = generate_dataset(&spec, &root).unwrap();
        for (idx, id) in index.ids.iter().enumerate() {
            let rendered = render_item(&spec, idx);
            let (_, mask) = load_item(&index, id).unwrap();
            assert_eq!(mask.unwrap(), rendered.mask);
        }
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SynthSpec::with_defaults(1, (32, 32), 1, 0);
        spec.class_frequency = vec![1.0];
        assert!(spec.validate().is_err());
        let spec = SynthSpec::with_defaults(2, (8, 32), 1, 0);
        assert!(spec.validate().is_err());
        let mut spec = SynthSpec::with_defaults(2, (32, 32), 1, 0);
        spec.class_frequency = vec![0.5, 0.0];
        assert!(spec.validate().is_err());
        let mut spec = SynthSpec::with_defaults(2, (32, 32), 1, 0);
        spec.shapes_per_image = (5, 2);
        assert!(spec.validate().is_err());
    }
}
