//! Synthetic face-like dataset generation, image-folder ingestion,
//! normalization/augmentation, and verification pair lists.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

/// 8-bit RGB image, row-major HWC.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, rgb: Vec<u8>) -> Self {
        assert_eq!(rgb.len(), 3 * width * height);
        Image { width, height, rgb }
    }

    pub fn flipped_horizontal(&self) -> Image {
        let mut out = vec![0u8; self.rgb.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + x) * 3;
                let dst = (y * self.width + (self.width - 1 - x)) * 3;
                out[dst..dst + 3].copy_from_slice(&self.rgb[src..src + 3]);
            }
        }
        Image {
            width: self.width,
            height: self.height,
            rgb: out,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Holdout,
}

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// per-sample relative path, when the set was loaded from or exported to disk
    pub paths: Vec<String>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Verification pair list over dataset sample indices.
#[derive(Clone, Debug, Default)]
pub struct PairList {
    pub entries: Vec<(usize, usize, bool)>,
}

// ---- synthetic generation ----

fn stream_rng(seed: u64, class: u64, sample: u64) -> ChaCha8Rng {
    // independent deterministic stream per (class, sample)
    let s = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(class.wrapping_mul(0x2545_F491_4F6C_DD1D))
        .wrapping_add(sample.wrapping_add(1).wrapping_mul(0x27D4_EB2F_1656_67C5));
    ChaCha8Rng::seed_from_u64(s)
}

struct Prototype {
    size: usize,
    // f32 HWC in [0, 255]
    pixels: Vec<f32>,
}

fn draw_ellipse(px: &mut [f32], size: usize, cx: f32, cy: f32, rx: f32, ry: f32, color: [f32; 3]) {
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f32 - cx) / rx;
            let dy = (y as f32 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                let i = (y * size + x) * 3;
                px[i] = color[0];
                px[i + 1] = color[1];
                px[i + 2] = color[2];
            }
        }
    }
}

fn draw_rect(px: &mut [f32], size: usize, x0: f32, y0: f32, x1: f32, y1: f32, color: [f32; 3]) {
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f32, y as f32);
            if xf >= x0 && xf <= x1 && yf >= y0 && yf <= y1 {
                let i = (y * size + x) * 3;
                px[i] = color[0];
                px[i + 1] = color[1];
                px[i + 2] = color[2];
            }
        }
    }
}

/// Class prototype: seeded composition of face-like geometric primitives
/// (head ellipse, two eyes, nose, mouth) over a flat background, with
/// class-specific placement and colors.
fn make_prototype(seed: u64, class: u64, size: usize) -> Prototype {
    let mut rng = stream_rng(seed, class, 0);
    let s = size as f32;
    let bg: [f32; 3] = [
        rng.gen_range(30.0..90.0),
        rng.gen_range(30.0..90.0),
        rng.gen_range(30.0..90.0),
    ];
    let mut px = vec![0.0f32; size * size * 3];
    for c in px.chunks_mut(3) {
        c.copy_from_slice(&bg);
    }
    let skin: [f32; 3] = [
        rng.gen_range(140.0..230.0),
        rng.gen_range(110.0..200.0),
        rng.gen_range(90.0..180.0),
    ];
    let cx = s * rng.gen_range(0.45..0.55);
    let cy = s * rng.gen_range(0.45..0.55);
    let rx = s * rng.gen_range(0.28..0.40);
    let ry = s * rng.gen_range(0.32..0.44);
    draw_ellipse(&mut px, size, cx, cy, rx, ry, skin);

    let eye_color: [f32; 3] = [
        rng.gen_range(0.0..60.0),
        rng.gen_range(0.0..60.0),
        rng.gen_range(0.0..90.0),
    ];
    let eye_dx = rx * rng.gen_range(0.35..0.6);
    let eye_dy = ry * rng.gen_range(0.2..0.4);
    let eye_r = s * rng.gen_range(0.03..0.07);
    draw_ellipse(&mut px, size, cx - eye_dx, cy - eye_dy, eye_r, eye_r, eye_color);
    draw_ellipse(&mut px, size, cx + eye_dx, cy - eye_dy, eye_r, eye_r, eye_color);

    let nose_color: [f32; 3] = [skin[0] * 0.7, skin[1] * 0.6, skin[2] * 0.6];
    let nose_w = s * rng.gen_range(0.02..0.05);
    let nose_h = ry * rng.gen_range(0.15..0.3);
    draw_rect(
        &mut px, size,
        cx - nose_w, cy - nose_h * 0.2,
        cx + nose_w, cy + nose_h,
        nose_color,
    );

    let mouth_color: [f32; 3] = [rng.gen_range(90.0..180.0), rng.gen_range(10.0..60.0), rng.gen_range(10.0..60.0)];
    let mouth_w = rx * rng.gen_range(0.35..0.65);
    let mouth_y = cy + ry * rng.gen_range(0.45..0.65);
    let mouth_h = s * rng.gen_range(0.015..0.045);
    draw_rect(
        &mut px, size,
        cx - mouth_w, mouth_y - mouth_h,
        cx + mouth_w, mouth_y + mouth_h,
        mouth_color,
    );

    Prototype { size, pixels: px }
}

/// One sample: small affine warp + brightness jitter + uniform pixel noise.
fn perturb(proto: &Prototype, rng: &mut ChaCha8Rng) -> Image {
    let size = proto.size;
    let s = size as f32;
    let angle: f32 = rng.gen_range(-0.10..0.10); // radians
    let scale: f32 = rng.gen_range(0.94..1.06);
    let tx: f32 = rng.gen_range(-0.05 * s..0.05 * s);
    let ty: f32 = rng.gen_range(-0.05 * s..0.05 * s);
    let brightness: f32 = rng.gen_range(-14.0..14.0);
    let noise_amp: f32 = rng.gen_range(3.0..9.0);

    let (sin, cos) = angle.sin_cos();
    let c = s / 2.0;
    let mut rgb = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            // inverse map output -> source
            let xr = (x as f32 - c - tx) / scale;
            let yr = (y as f32 - c - ty) / scale;
            let sx = cos * xr + sin * yr + c;
            let sy = -sin * xr + cos * yr + c;
            let sample = bilinear(&proto.pixels, size, sx, sy);
            let i = (y * size + x) * 3;
            for ch in 0..3 {
                let noise = rng.gen_range(-noise_amp..noise_amp);
                let v = sample[ch] + brightness + noise;
                rgb[i + ch] = v.clamp(0.0, 255.0) as u8;
            }
        }
    }
    Image::new(size, size, rgb)
}

fn bilinear(px: &[f32], size: usize, x: f32, y: f32) -> [f32; 3] {
    let max = (size - 1) as f32;
    let xc = x.clamp(0.0, max);
    let yc = y.clamp(0.0, max);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(size - 1);
    let y1 = (y0 + 1).min(size - 1);
    let fx = xc - x0 as f32;
    let fy = yc - y0 as f32;
    let mut out = [0.0f32; 3];
    for ch in 0..3 {
        let p00 = px[(y0 * size + x0) * 3 + ch];
        let p01 = px[(y0 * size + x1) * 3 + ch];
        let p10 = px[(y1 * size + x0) * 3 + ch];
        let p11 = px[(y1 * size + x1) * 3 + ch];
        out[ch] = p00 * (1.0 - fx) * (1.0 - fy)
            + p01 * fx * (1.0 - fy)
            + p10 * (1.0 - fx) * fy
            + p11 * fx * fy;
    }
    out
}

/// Deterministic synthetic dataset: identical (seed, parameters) produce
/// identical bytes.
pub fn synth_generate(
    n_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_classes < 2 || per_class < 2 {
        return Err(Error::usage(format!(
            "need at least 2 classes and 2 samples per class, got {n_classes}/{per_class}"
        )));
    }
    if image_size < 16 {
        return Err(Error::usage(format!(
            "image_size {image_size} too small for the primitive layout (minimum 16)"
        )));
    }
    let mut images = Vec::with_capacity(n_classes * per_class);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    let mut paths = Vec::with_capacity(n_classes * per_class);
    for class in 0..n_classes {
        let proto = make_prototype(seed, class as u64, image_size);
        for sample in 0..per_class {
            let mut rng = stream_rng(seed, class as u64, sample as u64 + 1);
            images.push(perturb(&proto, &mut rng));
            labels.push(class);
            paths.push(format!("class_{class:03}/img_{sample:04}.png"));
        }
    }
    Ok(LabeledDataset {
        images,
        labels,
        n_classes,
        paths,
        split: Split::Train,
    })
}

/// Per-class tail split: the last `fraction` of each class goes to holdout.
pub fn split_holdout(set: &LabeledDataset, fraction: f32) -> (LabeledDataset, LabeledDataset) {
    let mut counts = vec![0usize; set.n_classes];
    for &l in &set.labels {
        counts[l] += 1;
    }
    let holdout_per_class: Vec<usize> = counts
        .iter()
        .map(|&c| ((c as f32 * fraction).ceil() as usize).clamp(1, c.saturating_sub(1).max(1)))
        .collect();
    let mut seen = vec![0usize; set.n_classes];
    let mut train = LabeledDataset {
        images: vec![],
        labels: vec![],
        n_classes: set.n_classes,
        paths: vec![],
        split: Split::Train,
    };
    let mut holdout = LabeledDataset {
        images: vec![],
        labels: vec![],
        n_classes: set.n_classes,
        paths: vec![],
        split: Split::Holdout,
    };
    for i in 0..set.len() {
        let l = set.labels[i];
        seen[l] += 1;
        let dest = if seen[l] > counts[l] - holdout_per_class[l] {
            &mut holdout
        } else {
            &mut train
        };
        dest.images.push(set.images[i].clone());
        dest.labels.push(l);
        if !set.paths.is_empty() {
            dest.paths.push(set.paths[i].clone());
        }
    }
    (train, holdout)
}

// ---- normalization & augmentation ----

/// (v - 127.5) / 128 into a [3 x H x W] tensor.
pub fn normalize(image: &Image) -> Tensor<f32> {
    let (h, w) = (image.height, image.width);
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.rgb[(y * w + x) * 3 + c] as f32;
                data[c * h * w + y * w + x] = (v - 127.5) / 128.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("sizes agree by construction")
}

/// Horizontal flip with probability 0.5 from the supplied stream. The eval
/// path never calls this.
pub fn augment_flip(image: &Image, rng: &mut ChaCha8Rng) -> Image {
    if rng.gen_bool(0.5) {
        image.flipped_horizontal()
    } else {
        image.clone()
    }
}

// ---- verification pairs ----

/// Seeded sampling of same-class and cross-class pairs without replacement.
pub fn make_pairs(
    holdout: &LabeledDataset,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<PairList> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); holdout.n_classes];
    for (i, &l) in holdout.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let multi: Vec<usize> = (0..holdout.n_classes)
        .filter(|&c| by_class[c].len() >= 2)
        .collect();
    let nonempty: Vec<usize> = (0..holdout.n_classes)
        .filter(|&c| !by_class[c].is_empty())
        .collect();
    if multi.is_empty() || nonempty.len() < 2 {
        return Err(Error::usage(
            "holdout needs >= 2 samples in some class and >= 2 classes for pairs",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n_pos + n_neg);
    let mut used: HashSet<(usize, usize)> = HashSet::new();
    let mut attempts = 0usize;
    let max_attempts = (n_pos + n_neg) * 1000 + 1000;
    while entries.len() < n_pos {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::usage(format!(
                "could not sample {n_pos} distinct positive pairs"
            )));
        }
        let c = multi[rng.gen_range(0..multi.len())];
        let idxs = &by_class[c];
        let a = idxs[rng.gen_range(0..idxs.len())];
        let b = idxs[rng.gen_range(0..idxs.len())];
        if a == b {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if used.insert(key) {
            entries.push((key.0, key.1, true));
        }
    }
    while entries.len() < n_pos + n_neg {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::usage(format!(
                "could not sample {n_neg} distinct negative pairs"
            )));
        }
        let ca = nonempty[rng.gen_range(0..nonempty.len())];
        let cb = nonempty[rng.gen_range(0..nonempty.len())];
        if ca == cb {
            continue;
        }
        let a = by_class[ca][rng.gen_range(0..by_class[ca].len())];
        let b = by_class[cb][rng.gen_range(0..by_class[cb].len())];
        let key = (a.min(b), a.max(b));
        if used.insert(key) {
            entries.push((key.0, key.1, false));
        }
    }
    Ok(PairList { entries })
}

/// `path_a<TAB>path_b<TAB>0|1` per line, paths relative to the dataset root.
pub fn write_pair_file(path: &Path, pairs: &PairList, set: &LabeledDataset) -> Result<()> {
    if set.paths.is_empty() {
        return Err(Error::data("dataset has no paths; export it first"));
    }
    let mut out = String::new();
    for &(a, b, same) in &pairs.entries {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            set.paths[a],
            set.paths[b],
            if same { 1 } else { 0 }
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_pair_file(path: &Path, set: &LabeledDataset) -> Result<PairList> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let index: std::collections::HashMap<&str, usize> = set
        .paths
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i))
        .collect();
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::data(format!(
                "{}:{}: expected 'path_a<TAB>path_b<TAB>0|1'",
                path.display(),
                lineno + 1
            )));
        }
        let a = *index.get(parts[0]).ok_or_else(|| {
            Error::data(format!("pair file references unknown image '{}'", parts[0]))
        })?;
        let b = *index.get(parts[1]).ok_or_else(|| {
            Error::data(format!("pair file references unknown image '{}'", parts[1]))
        })?;
        let same = match parts[2] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::data(format!(
                    "{}:{}: bad same flag '{other}'",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        entries.push((a, b, same));
    }
    if !entries.iter().any(|e| e.2) || !entries.iter().any(|e| !e.2) {
        return Err(Error::data(
            "pair list needs at least one positive and one negative pair",
        ));
    }
    Ok(PairList { entries })
}

// ---- disk I/O ----

/// Lossless PNG export in the `root/<identity>/<image>` layout.
pub fn export_png(set: &LabeledDataset, root: &Path) -> Result<()> {
    for (i, img) in set.images.iter().enumerate() {
        let rel = if set.paths.is_empty() {
            format!("class_{:03}/img_{i:04}.png", set.labels[i])
        } else {
            set.paths[i].clone()
        };
        let path = root.join(&rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
        let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.rgb.clone())
            .expect("buffer sized by construction");
        buf.save(&path)
            .map_err(|e| Error::data(format!("failed to write {}: {e}", path.display())))?;
    }
    Ok(())
}

pub struct LoadReport {
    pub skipped: Vec<PathBuf>,
}

/// One subdirectory per identity; class indices follow sorted directory
/// names, images follow sorted file names. Non-image files are skipped and
/// reported.
pub fn load_folder(root: &Path, resize_to: Option<usize>) -> Result<(LabeledDataset, LoadReport)> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::data(format!(
            "no identity subdirectories under {}",
            root.display()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut paths = Vec::new();
    let mut skipped = Vec::new();
    for (class, dir) in dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir.display().to_string(), e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            match image::open(&f) {
                Ok(decoded) => {
                    let mut rgb = decoded.to_rgb8();
                    if let Some(sz) = resize_to {
                        if rgb.width() != sz as u32 || rgb.height() != sz as u32 {
                            rgb = image::imageops::resize(
                                &rgb,
                                sz as u32,
                                sz as u32,
                                image::imageops::FilterType::Triangle,
                            );
                        }
                    }
                    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                    images.push(Image::new(w, h, rgb.into_raw()));
                    labels.push(class);
                    let rel = f
                        .strip_prefix(root)
                        .unwrap_or(&f)
                        .to_string_lossy()
                        .into_owned();
                    paths.push(rel);
                }
                Err(_) => {
                    eprintln!("warning: skipping unreadable image {}", f.display());
                    skipped.push(f);
                }
            }
        }
    }
    if images.is_empty() {
        return Err(Error::data(format!(
            "no readable images under {}",
            root.display()
        )));
    }
    let first = (images[0].width, images[0].height);
    if images.iter().any(|i| (i.width, i.height) != first) {
        return Err(Error::data(
            "images have mixed dimensions; pass a resize size",
        ));
    }
    Ok((
        LabeledDataset {
            images,
            labels,
            n_classes: dirs.len(),
            paths,
            split: Split::Train,
        },
        LoadReport { skipped },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_deterministic() {
        let a = synth_generate(3, 4, 16, 7).unwrap();
        let b = synth_generate(3, 4, 16, 7).unwrap();
        assert_eq!(a.images, b.images);
        let c = synth_generate(3, 4, 16, 8).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn synth_parameter_errors() {
        assert!(synth_generate(1, 4, 16, 7).is_err());
        assert!(synth_generate(3, 1, 16, 7).is_err());
        assert!(synth_generate(3, 4, 8, 7).is_err());
    }

    #[test]
    fn intra_class_distance_below_inter() {
        let set = synth_generate(6, 6, 24, 11).unwrap();
        let dist = |a: &Image, b: &Image| -> f64 {
            a.rgb
                .iter()
                .zip(&b.rgb)
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        };
        let mut intra = (0.0, 0usize);
        let mut inter = (0.0, 0usize);
        for i in 0..set.len() {
            for j in (i + 1)..set.len() {
                let d = dist(&set.images[i], &set.images[j]);
                if set.labels[i] == set.labels[j] {
                    intra = (intra.0 + d, intra.1 + 1);
                } else {
                    inter = (inter.0 + d, inter.1 + 1);
                }
            }
        }
        assert!(intra.0 / (intra.1 as f64) < inter.0 / (inter.1 as f64));
    }

    #[test]
    fn minimum_per_class_split() {
        let set = synth_generate(2, 2, 16, 3).unwrap();
        let (train, holdout) = split_holdout(&set, 0.5);
        assert_eq!(train.len(), 2);
        assert_eq!(holdout.len(), 2);
        assert_eq!(holdout.split, Split::Holdout);
    }

    #[test]
    fn normalize_endpoints() {
        let img = Image::new(1, 1, vec![0, 127, 255]);
        let t = normalize(&img);
        assert_eq!(t.data()[0], -0.99609375);
        assert_eq!(t.data()[1], -0.00390625);
        assert_eq!(t.data()[2], 0.99609375);
        let img2 = Image::new(1, 1, vec![128, 128, 128]);
        assert_eq!(normalize(&img2).data()[0], 0.00390625);
    }

    #[test]
    fn normalized_range_open_interval() {
        let set = synth_generate(2, 2, 16, 5).unwrap();
        for img in &set.images {
            let t = normalize(img);
            assert!(t.data().iter().all(|&v| v > -1.0 && v <= 1.0));
        }
    }

    #[test]
    fn flip_involution_and_symmetric_image() {
        let set = synth_generate(2, 2, 16, 9).unwrap();
        let img = &set.images[0];
        assert_eq!(&img.flipped_horizontal().flipped_horizontal(), img);
        // symmetric image unchanged
        let sym = Image::new(2, 1, vec![1, 2, 3, 1, 2, 3]);
        assert_eq!(sym.flipped_horizontal(), sym);
    }

    #[test]
    fn flip_rate_near_half() {
        let img = Image::new(2, 1, vec![1, 2, 3, 4, 5, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut flips = 0usize;
        for _ in 0..10_000 {
            if augment_flip(&img, &mut rng) != img {
                flips += 1;
            }
        }
        let rate = flips as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&rate), "rate {rate}");
    }

    #[test]
    fn pairs_by_construction_and_deterministic() {
        let set = synth_generate(4, 5, 16, 2).unwrap();
        let (_, holdout) = split_holdout(&set, 0.5);
        let p1 = make_pairs(&holdout, 6, 6, 3).unwrap();
        let p2 = make_pairs(&holdout, 6, 6, 3).unwrap();
        assert_eq!(p1.entries, p2.entries);
        for &(a, b, same) in &p1.entries {
            assert_eq!(same, holdout.labels[a] == holdout.labels[b]);
        }
        // minimal list
        assert!(make_pairs(&holdout, 1, 1, 0).is_ok());
    }

    #[test]
    fn pair_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let set = synth_generate(3, 4, 16, 2).unwrap();
        let pairs = make_pairs(&set, 4, 4, 1).unwrap();
        let path = dir.path().join("pairs.txt");
        write_pair_file(&path, &pairs, &set).unwrap();
        let back = read_pair_file(&path, &set).unwrap();
        assert_eq!(back.entries, pairs.entries);
    }

    #[test]
    fn export_and_load_folder() {
        let dir = tempfile::tempdir().unwrap();
        let set = synth_generate(2, 3, 16, 4).unwrap();
        export_png(&set, dir.path()).unwrap();
        // drop a non-image file in; it must be skipped with a report entry
        std::fs::write(dir.path().join("class_000/readme.txt"), "junk").unwrap();
        let (loaded, report) = load_folder(dir.path(), None).unwrap();
        assert_eq!(loaded.n_classes, 2);
        assert_eq!(loaded.len(), 6);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(loaded.images, set.images);
        assert_eq!(loaded.labels, set.labels);
    }

    #[test]
    fn load_folder_empty_root() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_folder(dir.path(), None).is_err());
    }
}
