//! Bi-temporal sample pairs: PNG I/O, patch tiling, split manifests, and a
//! seeded synthetic generator.
//!
//! On-disk layout: `<dir>/A/<id>.png` and `<dir>/B/<id>.png` are the two RGB
//! acquisitions, `<dir>/label/<id>.png` the single-channel change mask.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grey levels a label may contain: 0 is unchanged, 1 and 255 are changed.
pub const LABEL_LEVELS: [u8; 3] = [0, 1, 255];

/// Binary `[H, W]` mask, row-major, entries in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Data(format!(
                "mask of {} pixels for {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Two co-registered `[3, H, W]` images in `[0, 1]` and their change mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub t1: Tensor,
    pub t2: Tensor,
    pub gt: Mask,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, t1: Tensor, t2: Tensor, gt: Mask) -> Result<Self> {
        let id = id.into();
        let ok = t1.shape().len() == 3
            && t1.shape()[0] == 3
            && t1.shape() == t2.shape()
            && t1.shape()[1..] == [gt.height, gt.width];
        if !ok {
            return Err(Error::Data(format!(
                "sample `{id}`: T1 {:?}, T2 {:?}, mask {}x{} are not congruent [3, H, W] / [H, W]",
                t1.shape(),
                t2.shape(),
                gt.height,
                gt.width
            )));
        }
        Ok(Self { id, t1, t2, gt })
    }

    /// `(H, W)`.
    pub fn size(&self) -> (usize, usize) {
        (self.gt.height, self.gt.width)
    }
}

fn image_path(dir: &Path, sub: &str, id: &str) -> PathBuf {
    dir.join(sub).join(format!("{id}.png"))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::Data(format!("missing file {}", path.display())));
    }
    image::open(path).map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    })
}

fn tensor_to_rgb(t: &Tensor) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// The two images of `id`, each `[3, H, W]`; sizes must agree.
pub fn load_images(dir: &Path, id: &str) -> Result<(Tensor, Tensor)> {
    let (pa, pb) = (image_path(dir, "A", id), image_path(dir, "B", id));
    let a = open(&pa)?.to_rgb8();
    let b = open(&pb)?.to_rgb8();
    if a.dimensions() != b.dimensions() {
        return Err(Error::Data(format!(
            "size mismatch for `{id}`: {} is {}x{}, {} is {}x{}",
            pa.display(),
            a.width(),
            a.height(),
            pb.display(),
            b.width(),
            b.height()
        )));
    }
    Ok((rgb_to_tensor(&a), rgb_to_tensor(&b)))
}

pub fn label_exists(dir: &Path, id: &str) -> bool {
    image_path(dir, "label", id).is_file()
}

/// Label of `id`, converted to 8-bit grey; must be `height × width` and use
/// only [`LABEL_LEVELS`].
pub fn load_label(dir: &Path, id: &str, height: usize, width: usize) -> Result<Mask> {
    let path = image_path(dir, "label", id);
    let img = open(&path)?.to_luma8();
    if (img.height() as usize, img.width() as usize) != (height, width) {
        return Err(Error::Data(format!(
            "size mismatch for `{id}`: images are {width}x{height}, label {} is {}x{}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    if let Some((i, &v)) = img.as_raw().iter().enumerate().find(|(_, v)| !LABEL_LEVELS.contains(v)) {
        return Err(Error::Data(format!(
            "label {} is not binary: grey level {v} at row {}, column {} (expected 0, 1 or 255)",
            path.display(),
            i / width,
            i % width
        )));
    }
    let data = img.as_raw().iter().map(|&v| (v != 0) as u8).collect();
    Mask::new(height, width, data)
}

pub fn load_pair(dir: &Path, id: &str) -> Result<SamplePair> {
    let (t1, t2) = load_images(dir, id)?;
    let (h, w) = (t1.shape()[1], t1.shape()[2]);
    let gt = load_label(dir, id, h, w)?;
    SamplePair::new(id, t1, t2, gt)
}

/// Writes the sample as 8-bit PNGs; labels are stored as 0/255.
pub fn write_pair(dir: &Path, s: &SamplePair) -> Result<()> {
    for sub in ["A", "B", "label"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    tensor_to_rgb(&s.t1).save(image_path(dir, "A", &s.id))?;
    tensor_to_rgb(&s.t2).save(image_path(dir, "B", &s.id))?;
    mask_to_gray(&s.gt).save(image_path(dir, "label", &s.id))?;
    Ok(())
}

pub fn mask_to_gray(m: &Mask) -> GrayImage {
    GrayImage::from_fn(m.width as u32, m.height as u32, |x, y| {
        image::Luma([m.data[y as usize * m.width + x as usize] * 255])
    })
}

/// Sorted ids of every `A/<id>.png` in `dir`.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let a = dir.join("A");
    let entries = fs::read_dir(&a).map_err(|e| Error::Data(format!("cannot list {}: {e}", a.display())))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Non-overlapping `patch × patch` tiles in row-major order, with ids
/// suffixed `_r<i>_c<j>`.
pub fn patch_split(s: &SamplePair, patch: usize) -> Result<Vec<SamplePair>> {
    let (h, w) = s.size();
    if patch == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Data(format!(
            "{h}x{w} is not divisible into {patch}-pixel patches (remainder {} rows, {} columns)",
            h % patch,
            w % patch
        )));
    }
    let crop = |t: &Tensor, r: usize, c: usize| {
        Tensor::from_fn([3, patch, patch], |i| {
            let (ch, y, x) = (i / (patch * patch), i / patch % patch, i % patch);
            t.data()[(ch * h + r * patch + y) * w + c * patch + x]
        })
    };
    let mut out = Vec::with_capacity((h / patch) * (w / patch));
    for r in 0..h / patch {
        for c in 0..w / patch {
            let gt = (0..patch * patch)
                .map(|i| s.gt.data[(r * patch + i / patch) * w + c * patch + i % patch])
                .collect();
            out.push(SamplePair::new(
                format!("{}_r{r}_c{c}", s.id),
                crop(&s.t1, r, c),
                crop(&s.t2, r, c),
                Mask::new(patch, patch, gt)?,
            )?);
        }
    }
    Ok(out)
}

/// Disjoint train/validation/test id lists, stored as `train.txt`,
/// `val.txt`, `test.txt` with one id per line.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub const FILES: [&'static str; 3] = ["train.txt", "val.txt", "test.txt"];

    /// Shuffles `ids` with `seed` and cuts off the given validation and test
    /// counts; the rest is training data.
    pub fn random(ids: &[String], val: usize, test: usize, seed: u64) -> Result<Self> {
        if val + test > ids.len() {
            return Err(Error::Config(format!(
                "{val} validation + {test} test ids requested from {}",
                ids.len()
            )));
        }
        let mut ids = ids.to_vec();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test_ids = ids.split_off(ids.len() - test);
        let val_ids = ids.split_off(ids.len() - val);
        let m = Self {
            train: ids,
            val: val_ids,
            test: test_ids,
        };
        m.validate(None)?;
        Ok(m)
    }

    /// Disjointness, and coverage of `all` when given.
    pub fn validate(&self, all: Option<&[String]>) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("id `{id}` appears in more than one split")));
            }
        }
        if let Some(all) = all {
            if let Some(missing) = all.iter().find(|id| !seen.contains(id.as_str())) {
                return Err(Error::Data(format!("id `{missing}` is in no split")));
            }
            if seen.len() != all.len() {
                return Err(Error::Data("manifest lists ids that are not in the dataset".into()));
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (file, ids) in Self::FILES.iter().zip([&self.train, &self.val, &self.test]) {
            let mut text = ids.join("\n");
            if !text.is_empty() {
                text.push('\n');
            }
            fs::write(dir.join(file), text)?;
        }
        Ok(())
    }

    /// Reads the three files; a missing file is an empty split.
    pub fn read(dir: &Path) -> Result<Self> {
        let read = |file: &str| -> Result<Vec<String>> {
            let path = dir.join(file);
            if !path.exists() {
                return Ok(Vec::new());
            }
            Ok(fs::read_to_string(path)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect())
        };
        let m = Self {
            train: read("train.txt")?,
            val: read("val.txt")?,
            test: read("test.txt")?,
        };
        m.validate(None)?;
        Ok(m)
    }
}

/// Axis-aligned building footprint `[y, y + h) × [x, x + w)` with a flat color.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
    pub color: [f64; 3],
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y..self.y + self.h).contains(&y) && (self.x..self.x + self.w).contains(&x)
    }
}

/// A generated pair with the rectangles drawn into each image.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub pair: SamplePair,
    pub rects_t1: Vec<Rect>,
    pub rects_t2: Vec<Rect>,
}

/// Amplitude of the independent per-image noise.
pub const SYNTH_NOISE: f64 = 0.05;
/// Every sample whose index is a multiple of this has no change at all.
pub const SYNTH_UNCHANGED_EVERY: usize = 8;

fn random_rect<R: Rng>(rng: &mut R, size: usize) -> Rect {
    let (lo, hi) = (size / 8, size / 3);
    let h = rng.gen_range(lo..=hi);
    let w = rng.gen_range(lo..=hi);
    Rect {
        y: rng.gen_range(0..=size - h),
        x: rng.gen_range(0..=size - w),
        h,
        w,
        color: std::array::from_fn(|_| rng.gen_range(0.75..0.95)),
    }
}

/// Smooth background: per-channel base level plus three low-frequency waves.
fn background<R: Rng>(rng: &mut R, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * size * size];
    for plane in out.chunks_exact_mut(size * size) {
        let base = rng.gen_range(0.2..0.45);
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let tau = std::f64::consts::TAU;
                (rng.gen_range(0.3..1.5) * tau, rng.gen_range(0.3..1.5) * tau, rng.gen_range(0.0..tau))
            })
            .collect();
        for (i, v) in plane.iter_mut().enumerate() {
            let (y, x) = ((i / size) as f64 / size as f64, (i % size) as f64 / size as f64);
            *v = base + waves.iter().map(|&(fy, fx, ph)| 0.04 * (fy * y + fx * x + ph).sin()).sum::<f64>();
        }
    }
    out
}

fn render<R: Rng>(rng: &mut R, bg: &[f64], rects: &[Rect], size: usize) -> Tensor {
    Tensor::from_fn([3, size, size], |i| {
        let (c, y, x) = (i / (size * size), i / size % size, i % size);
        let base = rects.iter().rev().find(|r| r.contains(y, x)).map_or(bg[i], |r| r.color[c]);
        let v = (base + rng.gen_range(-SYNTH_NOISE..=SYNTH_NOISE)).clamp(0.0, 1.0);
        // Quantised to the 8-bit grid so a PNG round trip is lossless.
        (v * 255.0).round() / 255.0
    })
}

fn footprint(rects: &[Rect], y: usize, x: usize) -> bool {
    rects.iter().any(|r| r.contains(y, x))
}

/// `n` synthetic pairs of `size × size` with their rectangle lists.
pub fn synth_generate_detailed(n: usize, size: usize, seed: u64) -> Result<Vec<SynthSample>> {
    if size < 16 || size % 8 != 0 {
        return Err(Error::Config(format!(
            "synthetic size must be at least 16 and divisible by 8, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let bg = background(&mut rng, size);
        let k = rng.gen_range(1..=4);
        let rects_t1: Vec<Rect> = (0..k).map(|_| random_rect(&mut rng, size)).collect();
        let rects_t2 = if i % SYNTH_UNCHANGED_EVERY == 0 {
            rects_t1.clone()
        } else {
            let mut kept: Vec<Rect> = rects_t1.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
            let mut added = rng.gen_range(0..=2);
            if kept.len() == rects_t1.len() && added == 0 {
                added = 1;
            }
            kept.extend((0..added).map(|_| random_rect(&mut rng, size)));
            kept
        };
        let t1 = render(&mut rng, &bg, &rects_t1, size);
        let t2 = render(&mut rng, &bg, &rects_t2, size);
        let gt = (0..size * size)
            .map(|p| (footprint(&rects_t1, p / size, p % size) != footprint(&rects_t2, p / size, p % size)) as u8)
            .collect();
        let pair = SamplePair::new(format!("synth_{i:04}"), t1, t2, Mask::new(size, size, gt)?)?;
        out.push(SynthSample {
            pair,
            rects_t1,
            rects_t2,
        });
    }
    Ok(out)
}

pub fn synth_generate(n: usize, size: usize, seed: u64) -> Result<Vec<SamplePair>> {
    Ok(synth_generate_detailed(n, size, seed)?.into_iter().map(|s| s.pair).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize, seed: u64) -> SamplePair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = |rng: &mut ChaCha8Rng| rng.gen_range(0..=255u8) as f64 / 255.0;
        let t1 = Tensor::from_fn([3, h, w], |_| q(&mut rng));
        let t2 = Tensor::from_fn([3, h, w], |_| q(&mut rng));
        let gt = Mask::new(h, w, (0..h * w).map(|_| rng.gen_range(0..2)).collect()).unwrap();
        SamplePair::new("s", t1, t2, gt).unwrap()
    }

    #[test]
    fn png_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample(6, 10, 1);
        write_pair(dir.path(), &s).unwrap();
        assert_eq!(load_pair(dir.path(), "s").unwrap(), s);
        assert_eq!(list_ids(dir.path()).unwrap(), vec!["s".to_string()]);
    }

    #[test]
    fn label_and_color_mapping() {
        let dir = tempfile::tempdir().unwrap();
        for sub in ["A", "B", "label"] {
            fs::create_dir_all(dir.path().join(sub)).unwrap();
        }
        let rgb = RgbImage::from_fn(2, 1, |x, _| image::Rgb([255 * x as u8; 3]));
        rgb.save(dir.path().join("A/p.png")).unwrap();
        rgb.save(dir.path().join("B/p.png")).unwrap();
        GrayImage::from_raw(4, 1, vec![0, 255, 127, 128])
            .unwrap()
            .save(dir.path().join("label/p.png"))
            .unwrap();
        // The label is wider than the images.
        let err = load_pair(dir.path(), "p").unwrap_err().to_string();
        assert!(err.contains("2x1") && err.contains("4x1"), "{err}");

        GrayImage::from_raw(2, 1, vec![255, 0]).unwrap().save(dir.path().join("label/p.png")).unwrap();
        let s = load_pair(dir.path(), "p").unwrap();
        assert_eq!(s.gt.data, vec![1, 0]);
        assert_eq!(s.t1.data()[1], 1.0);
        assert_eq!(s.t1.data()[0], 0.0);
        assert_eq!(load_label(dir.path(), "p", 1, 2).unwrap().data, vec![1, 0]);
    }

    #[test]
    fn labels_must_be_binary() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample(1, 4, 2);
        write_pair(dir.path(), &s).unwrap();
        let label = dir.path().join("label/s.png");
        GrayImage::from_raw(4, 1, vec![0, 1, 255, 0]).unwrap().save(&label).unwrap();
        assert_eq!(load_pair(dir.path(), "s").unwrap().gt.data, vec![0, 1, 1, 0]);
        GrayImage::from_raw(4, 1, vec![0, 255, 128, 0]).unwrap().save(&label).unwrap();
        let err = load_pair(dir.path(), "s").unwrap_err().to_string();
        assert!(err.contains("not binary") && err.contains("128") && err.contains("column 2"), "{err}");
    }

    #[test]
    fn missing_files_and_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_pair(dir.path(), "nope").unwrap_err().to_string();
        assert!(err.contains("missing file"), "{err}");
        write_pair(dir.path(), &sample(4, 4, 3)).unwrap();
        tensor_to_rgb(&Tensor::zeros([3, 5, 4])).save(dir.path().join("B/s.png")).unwrap();
        let err = load_pair(dir.path(), "s").unwrap_err().to_string();
        assert!(err.contains("4x4") && err.contains("4x5"), "{err}");
    }

    #[test]
    fn patch_split_counts_and_ids() {
        let s = sample(64, 64, 4);
        let p = patch_split(&s, 32).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p[1].id, "s_r0_c1");
        assert_eq!(p[2].id, "s_r1_c0");
        let whole = patch_split(&s, 64).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!((&whole[0].t1, &whole[0].t2, &whole[0].gt), (&s.t1, &s.t2, &s.gt));
        let err = patch_split(&sample(40, 64, 5), 32).unwrap_err().to_string();
        assert!(err.contains("remainder 8 rows"), "{err}");
        assert!(patch_split(&s, 0).is_err());
    }

    #[test]
    fn patch_grid_of_a_large_scene() {
        let mut s = sample(8, 8, 6);
        s.t1 = Tensor::zeros([3, 1024, 1024]);
        s.t2 = Tensor::zeros([3, 1024, 1024]);
        s.gt = Mask::zeros(1024, 1024);
        assert_eq!(patch_split(&s, 256).unwrap().len(), 16);
    }

    #[test]
    fn manifest_round_trip_and_checks() {
        let ids: Vec<String> = (0..10).map(|i| format!("id{i}")).collect();
        let m = SplitManifest::random(&ids, 2, 3, 7).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (5, 2, 3));
        m.validate(Some(&ids)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.write(dir.path()).unwrap();
        assert_eq!(SplitManifest::read(dir.path()).unwrap(), m);
        let overlap = SplitManifest {
            train: vec!["a".into()],
            val: vec!["a".into()],
            test: vec![],
        };
        assert!(overlap.validate(None).is_err());
        assert!(m.validate(Some(&ids[..9])).is_err());
        assert!(SplitManifest::random(&ids, 6, 5, 0).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_bookkept() {
        let a = synth_generate_detailed(10, 32, 42).unwrap();
        let b = synth_generate_detailed(10, 32, 42).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pair, y.pair);
        }
        assert_ne!(a[1].pair, synth_generate(2, 32, 43).unwrap()[1]);
        for s in &a {
            for y in 0..32 {
                for x in 0..32 {
                    let in1 = s.rects_t1.iter().any(|r| y >= r.y && y < r.y + r.h && x >= r.x && x < r.x + r.w);
                    let in2 = s.rects_t2.iter().any(|r| y >= r.y && y < r.y + r.h && x >= r.x && x < r.x + r.w);
                    assert_eq!(s.pair.gt.data[y * 32 + x], (in1 ^ in2) as u8);
                }
            }
            assert!((1..=4).contains(&s.rects_t1.len()));
            assert!(s.pair.t1.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(a.chunks(8).all(|c| c.iter().any(|s| s.pair.gt.count_ones() == 0)));
        assert_eq!(a[0].rects_t1, a[0].rects_t2);
    }

    #[test]
    fn synth_survives_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_generate(1, 16, 0).unwrap().remove(0);
        write_pair(dir.path(), &s).unwrap();
        assert_eq!(load_pair(dir.path(), &s.id).unwrap(), s);
    }

    #[test]
    fn synth_rejects_bad_sizes() {
        assert!(synth_generate(1, 8, 0).is_err());
        assert!(synth_generate(1, 20, 0).is_err());
        assert!(synth_generate(0, 16, 0).unwrap().is_empty());
    }
}
