//! Synthetic tiny-object scenes.
//!
//! Images are 3-channel f32 tensor files; objects are filled axis-aligned
//! shapes, one shape per class: 0 = square, 1 = disc, 2 = bar. Annotations
//! live in one plain-text file per dataset, one line per box:
//! `image_id class cx cy w h` with normalized coordinates.

use std::fs;
use std::path::{Path, PathBuf};

use fmc_core::error::{Error, Result};
use fmc_core::io::{read_tensor, write_tensor};
use fmc_core::model::GtBox;
use fmc_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::FlatConfig;

pub const ANNOTATION_FILE: &str = "annotations.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    Flat,
    Gradient,
    Noise,
    Checker,
}

impl Background {
    pub fn parse(s: &str) -> Result<Background> {
        match s {
            "flat" => Ok(Background::Flat),
            "gradient" => Ok(Background::Gradient),
            "noise" => Ok(Background::Noise),
            "checker" => Ok(Background::Checker),
            _ => Err(Error::config(
                "background",
                format!("unknown kind {s:?}; expected flat|gradient|noise|checker"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SceneSpec {
    pub extent: (usize, usize),
    /// Inclusive object-count range per image.
    pub count: (usize, usize),
    /// Inclusive object-size range in pixels.
    pub size: (usize, usize),
    pub background: Background,
    /// Alpha blend toward white applied after drawing; 1.0 whitens fully.
    pub haze: f64,
    /// Minimum luminance separation between an object and the background
    /// mean, measured before haze is applied.
    pub min_contrast: f64,
    /// How many of the three shape classes to draw from, starting at square.
    pub classes: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.extent;
        if h < 8 || w < 8 {
            return Err(Error::config("scene.extent", "images must be at least 8x8"));
        }
        if self.count.0 > self.count.1 {
            return Err(Error::config("scene.count", "range must be min max"));
        }
        if self.size.0 < 2 || self.size.0 > self.size.1 {
            return Err(Error::config("scene.size", "sizes must satisfy 2 <= min <= max"));
        }
        if self.size.1 + 2 > h.min(w) {
            return Err(Error::config("scene.size", "largest object does not fit the image"));
        }
        if !(0.0..=1.0).contains(&self.haze) {
            return Err(Error::config("scene.haze", "haze must lie in [0,1]"));
        }
        if !(0.0 < self.min_contrast && self.min_contrast < 0.5) {
            return Err(Error::config("scene.min_contrast", "contrast must lie in (0,0.5)"));
        }
        if self.classes == 0 || self.classes > 3 {
            return Err(Error::config("scene.classes", "only shape classes 1..=3 exist"));
        }
        Ok(())
    }

    pub fn from_config(cfg: &mut FlatConfig) -> Result<SceneSpec> {
        let extent = cfg.take_usize_list("scene.extent", &[64, 64])?;
        let count = cfg.take_usize_list("scene.count", &[1, 3])?;
        let size = cfg.take_usize_list("scene.size", &[4, 12])?;
        let spec = SceneSpec {
            extent: (extent[0], extent[1]),
            count: (count[0], count[1]),
            size: (size[0], size[1]),
            background: Background::parse(&cfg.take_str("scene.background", "flat"))?,
            haze: cfg.take_f64("scene.haze", 0.0)?,
            min_contrast: cfg.take_f64("scene.min_contrast", 0.25)?,
            classes: cfg.take_usize("scene.classes", 3)?,
            seed: cfg.take_u64("scene.seed", 7)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn fill_background(img: &mut Tensor, kind: Background, rng: &mut ChaCha8Rng) -> f64 {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let mut luma = vec![0.0f64; plane];
    match kind {
        Background::Flat => {
            let v = rng.gen_range(0.25..0.6);
            luma.fill(v);
        }
        Background::Gradient => {
            let a = rng.gen_range(0.15..0.45);
            let b = rng.gen_range(0.35..0.7);
            let horizontal = rng.gen_bool(0.5);
            for y in 0..h {
                for x in 0..w {
                    let t = if horizontal {
                        x as f64 / (w - 1) as f64
                    } else {
                        y as f64 / (h - 1) as f64
                    };
                    luma[y * w + x] = a + (b - a) * t;
                }
            }
        }
        Background::Noise => {
            let base = rng.gen_range(0.3..0.55);
            for v in luma.iter_mut() {
                *v = (base + rng.gen_range(-0.08..0.08f64)).clamp(0.0, 1.0);
            }
        }
        Background::Checker => {
            let a = rng.gen_range(0.25..0.4);
            let b = rng.gen_range(0.45..0.6);
            let cell = 8;
            for y in 0..h {
                for x in 0..w {
                    let odd = (y / cell + x / cell) % 2 == 1;
                    luma[y * w + x] = if odd { b } else { a };
                }
            }
        }
    }
    let mean = luma.iter().sum::<f64>() / plane as f64;
    let d = img.data_mut();
    for c in 0..3 {
        d[c * plane..(c + 1) * plane].copy_from_slice(&luma);
    }
    mean
}

/// Pixel footprint of a class-`class` object of nominal size `s`.
fn shape_extent(class: usize, s: usize) -> (usize, usize) {
    match class {
        2 => (s.max(4) / 2, s), // bar: wide and half as tall
        _ => (s, s),
    }
}

fn draw_object(img: &mut Tensor, class: usize, x0: usize, y0: usize, s: usize, value: f64) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (oh, ow) = shape_extent(class, s);
    let plane = h * w;
    let mut put = |y: usize, x: usize| {
        for c in 0..3 {
            img.data_mut()[c * plane + y * w + x] = value;
        }
    };
    match class {
        1 => {
            // Disc inscribed in the s x s box.
            let r = s as f64 / 2.0;
            let (cy, cx) = (y0 as f64 + r, x0 as f64 + r);
            for y in y0..y0 + s {
                for x in x0..x0 + s {
                    let dy = y as f64 + 0.5 - cy;
                    let dx = x as f64 + 0.5 - cx;
                    if dy * dy + dx * dx <= r * r {
                        put(y, x);
                    }
                }
            }
        }
        _ => {
            for y in y0..y0 + oh {
                for x in x0..x0 + ow {
                    put(y, x);
                }
            }
        }
    }
}

fn boxes_overlap(a: &GtBox, b: &GtBox) -> bool {
    let ix = (a.cx - a.w / 2.0).max(b.cx - b.w / 2.0) < (a.cx + a.w / 2.0).min(b.cx + b.w / 2.0);
    let iy = (a.cy - a.h / 2.0).max(b.cy - b.h / 2.0) < (a.cy + a.h / 2.0).min(b.cy + b.h / 2.0);
    ix && iy
}

/// Render one scene. Returns the [3,H,W] image and its ground-truth boxes.
pub fn render_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (Tensor, Vec<GtBox>) {
    let (h, w) = spec.extent;
    let mut img = Tensor::zeros(&[3, h, w]);
    let bg_mean = fill_background(&mut img, spec.background, rng);
    let n = rng.gen_range(spec.count.0..=spec.count.1);
    let mut boxes: Vec<GtBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.gen_range(0..spec.classes);
        let s = rng.gen_range(spec.size.0..=spec.size.1);
        let (oh, ow) = shape_extent(class, s);
        // Contrast pushes away from the background mean toward whichever
        // side has room.
        let margin = spec.min_contrast + rng.gen_range(0.0..0.15);
        let value = if bg_mean >= 0.5 {
            (bg_mean - margin).max(0.0)
        } else {
            (bg_mean + margin).min(1.0)
        };
        let mut placed = None;
        for _attempt in 0..16 {
            let y0 = rng.gen_range(1..h - oh);
            let x0 = rng.gen_range(1..w - ow);
            let gt = GtBox {
                class,
                cx: (x0 as f64 + ow as f64 / 2.0) / w as f64,
                cy: (y0 as f64 + oh as f64 / 2.0) / h as f64,
                w: ow as f64 / w as f64,
                h: oh as f64 / h as f64,
            };
            let clear = boxes.iter().all(|b| !boxes_overlap(b, &gt));
            placed = Some((y0, x0, gt));
            if clear {
                break;
            }
        }
        let (y0, x0, gt) = placed.unwrap();
        draw_object(&mut img, class, x0, y0, s, value);
        boxes.push(gt);
    }
    if spec.haze > 0.0 {
        for v in img.data_mut() {
            *v = (1.0 - spec.haze) * *v + spec.haze;
        }
    }
    (img, boxes)
}

pub fn image_file_name(id: usize) -> String {
    format!("img_{id:05}.fmct")
}

/// Write `n` scenes plus the annotation file into `dir`.
pub fn generate_dataset(spec: &SceneSpec, n: usize, dir: &Path) -> Result<()> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("dataset.images", "need at least one image"));
    }
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut lines = String::new();
    for id in 0..n {
        let (img, boxes) = render_scene(spec, &mut rng);
        write_tensor(&dir.join(image_file_name(id)), &img)?;
        for b in &boxes {
            lines.push_str(&format!("{id} {} {} {} {} {}\n", b.class, b.cx, b.cy, b.w, b.h));
        }
    }
    fs::write(dir.join(ANNOTATION_FILE), lines)?;
    Ok(())
}

/// A dataset directory: image tensor files plus parsed annotations.
pub struct Dataset {
    dir: PathBuf,
    pub extent: (usize, usize),
    boxes: Vec<Vec<GtBox>>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(num) = name.strip_prefix("img_").and_then(|s| s.strip_suffix(".fmct")) {
                let id: usize = num
                    .parse()
                    .map_err(|_| Error::Io(format!("malformed image file name {name:?}")))?;
                ids.push(id);
            }
        }
        if ids.is_empty() {
            return Err(Error::Io(format!("no img_*.fmct files in {}", dir.display())));
        }
        ids.sort_unstable();
        if ids[0] != 0 || *ids.last().unwrap() != ids.len() - 1 {
            return Err(Error::Io("image ids must be contiguous from 0".into()));
        }

        let mut boxes = vec![Vec::new(); ids.len()];
        let text = fs::read_to_string(dir.join(ANNOTATION_FILE))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(Error::contract(
                    "annotations",
                    format!("line {}: expected 6 fields, got {}", lineno + 1, fields.len()),
                ));
            }
            let id: usize = fields[0]
                .parse()
                .map_err(|_| Error::contract("annotations", format!("bad image id {:?}", fields[0])))?;
            if id >= boxes.len() {
                return Err(Error::contract(
                    "annotations",
                    format!("unknown image id {id} (dataset has {} images)", boxes.len()),
                ));
            }
            let nums: std::result::Result<Vec<f64>, _> =
                fields[2..].iter().map(|f| f.parse::<f64>()).collect();
            let nums = nums
                .map_err(|_| Error::contract("annotations", format!("line {}: bad number", lineno + 1)))?;
            let class: usize = fields[1]
                .parse()
                .map_err(|_| Error::contract("annotations", format!("bad class {:?}", fields[1])))?;
            boxes[id].push(GtBox { class, cx: nums[0], cy: nums[1], w: nums[2], h: nums[3] });
        }

        let first = read_tensor(&dir.join(image_file_name(0)))?;
        if first.rank() != 3 || first.shape()[0] != 3 {
            return Err(Error::contract(
                "dataset",
                format!("images must be [3,H,W], got {:?}", first.shape()),
            ));
        }
        let extent = (first.shape()[1], first.shape()[2]);
        Ok(Dataset { dir: dir.to_path_buf(), extent, boxes })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn boxes(&self, id: usize) -> &[GtBox] {
        &self.boxes[id]
    }

    /// Highest class id present plus one, with a floor of one class.
    pub fn classes(&self) -> usize {
        self.boxes
            .iter()
            .flatten()
            .map(|b| b.class + 1)
            .max()
            .unwrap_or(1)
    }

    /// Load one image as [3,H,W].
    pub fn image(&self, id: usize) -> Result<Tensor> {
        let t = read_tensor(&self.dir.join(image_file_name(id)))?;
        if t.rank() != 3 || t.shape() != [3, self.extent.0, self.extent.1] {
            return Err(Error::contract(
                "dataset",
                format!("image {id} has shape {:?}", t.shape()),
            ));
        }
        Ok(t)
    }

    /// Stack a contiguous id range into an [N,3,H,W] batch.
    pub fn batch(&self, ids: &[usize]) -> Result<(Tensor, Vec<Vec<GtBox>>)> {
        let (h, w) = self.extent;
        let mut out = Tensor::zeros(&[ids.len(), 3, h, w]);
        let stride = 3 * h * w;
        let mut gts = Vec::with_capacity(ids.len());
        for (slot, &id) in ids.iter().enumerate() {
            let img = self.image(id)?;
            out.data_mut()[slot * stride..(slot + 1) * stride].copy_from_slice(img.data());
            gts.push(self.boxes[id].clone());
        }
        Ok((out, gts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec {
            extent: (32, 32),
            count: (1, 3),
            size: (4, 8),
            background: Background::Flat,
            haze: 0.0,
            min_contrast: 0.25,
            classes: 3,
            seed: 200,
        }
    }

    #[test]
    fn same_seed_renders_identical_scenes() {
        let s = spec();
        let mut r1 = ChaCha8Rng::seed_from_u64(s.seed);
        let mut r2 = ChaCha8Rng::seed_from_u64(s.seed);
        let (a, ba) = render_scene(&s, &mut r1);
        let (b, bb) = render_scene(&s, &mut r2);
        assert_eq!(a, b);
        assert_eq!(ba.len(), bb.len());
    }

    #[test]
    fn haze_one_whitens_everything() {
        let mut s = spec();
        s.haze = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(201);
        let (img, _) = render_scene(&s, &mut rng);
        assert!(img.data().iter().all(|v| (*v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn fixed_count_range_always_draws_that_many() {
        let mut s = spec();
        s.count = (3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        for _ in 0..10 {
            let (_, boxes) = render_scene(&s, &mut rng);
            assert_eq!(boxes.len(), 3);
        }
    }

    #[test]
    fn objects_clear_the_contrast_floor() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(203);
        for _ in 0..20 {
            let (img, boxes) = render_scene(&s, &mut rng);
            // Flat background with a one-pixel object margin, so the corner
            // pixel is always untouched background.
            let bg = img.data()[0];
            for b in &boxes {
                // Sample the object center pixel.
                let y = (b.cy * 32.0) as usize;
                let x = (b.cx * 32.0) as usize;
                let v = img.data()[y * 32 + x];
                assert!((v - bg).abs() >= s.min_contrast, "contrast {v} vs background {bg}");
            }
        }
    }

    #[test]
    fn boxes_stay_inside_the_unit_square() {
        let s = SceneSpec { background: Background::Noise, count: (4, 6), ..spec() };
        let mut rng = ChaCha8Rng::seed_from_u64(204);
        for _ in 0..10 {
            let (_, boxes) = render_scene(&s, &mut rng);
            for b in &boxes {
                assert!(b.cx - b.w / 2.0 >= 0.0 && b.cx + b.w / 2.0 <= 1.0);
                assert!(b.cy - b.h / 2.0 >= 0.0 && b.cy + b.h / 2.0 <= 1.0);
                assert!(b.class < 3);
            }
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        generate_dataset(&s, 5, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.extent, (32, 32));
        assert!(ds.classes() <= 3);
        let (batch, gts) = ds.batch(&[0, 1, 2]).unwrap();
        assert_eq!(batch.shape(), &[3, 3, 32, 32]);
        assert_eq!(gts.len(), 3);
        for id in 0..5 {
            let img = ds.image(id).unwrap();
            for v in img.data() {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn generation_is_bitwise_deterministic_on_disk() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let s = spec();
        generate_dataset(&s, 4, d1.path()).unwrap();
        generate_dataset(&s, 4, d2.path()).unwrap();
        for name in ["img_00000.fmct", "img_00003.fmct", ANNOTATION_FILE] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec();
        s.haze = 1.5;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.size = (30, 31);
        assert!(s.validate().is_err());
        let mut s = spec();
        s.classes = 4;
        assert!(s.validate().is_err());
    }
}
