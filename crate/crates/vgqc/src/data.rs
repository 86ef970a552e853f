//! Deterministic synthetic referring-expression scenes.
//!
//! Each sample is fully determined by a single u64 seed: colored geometric
//! shapes on a dark background, one of them the referent of a templated
//! query. Rasterization is hard-edged (a pixel belongs to a shape iff its
//! center does), so bounding boxes and oracle checks are exact.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VgqcError};
use crate::losses::{iou, BoxCwh};

/// Derives the i-th stream seed from a base seed (splitmix64 finalizer).
pub fn splitmix64_at(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
pub const SIZES: [Size; 2] = [Size::Small, Size::Large];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    fn base_rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.85, 0.15, 0.15],
            Color::Green => [0.15, 0.75, 0.20],
            Color::Blue => [0.20, 0.25, 0.85],
            Color::Yellow => [0.85, 0.80, 0.15],
        }
    }
}

impl Size {
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Shape half-extent in pixels.
    fn half_extent(self, image_size: usize) -> f64 {
        let frac = match self {
            Size::Small => 0.07,
            Size::Large => 0.12,
        };
        (frac * image_size as f64).round()
    }
}

/// Every word the query templates can emit, sorted; the text vocabulary.
pub fn query_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = SHAPES
        .iter()
        .map(|s| s.word())
        .chain(COLORS.iter().map(|c| c.word()))
        .chain(SIZES.iter().map(|s| s.word()))
        .chain(["left", "right"])
        .collect();
    words.sort_unstable();
    words
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub n_objects_min: usize,
    pub n_objects_max: usize,
    pub min_distractors: usize,
    pub allow_positional: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 128,
            n_objects_min: 2,
            n_objects_max: 5,
            min_distractors: 2,
            allow_positional: true,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(VgqcError::validation("image_size must be at least 16"));
        }
        if self.n_objects_min == 0 || self.n_objects_max < self.n_objects_min {
            return Err(VgqcError::validation(format!(
                "bad n_objects range {}..{}",
                self.n_objects_min, self.n_objects_max
            )));
        }
        if self.min_distractors + 1 > self.n_objects_max {
            return Err(VgqcError::validation(format!(
                "min_distractors {} needs more than n_objects_max {} objects",
                self.min_distractors, self.n_objects_max
            )));
        }
        Ok(())
    }

    /// Smallest object count that can host the required distractors.
    fn effective_min_objects(&self) -> usize {
        self.n_objects_min.max(self.min_distractors + 1)
    }
}

#[derive(Clone, Debug)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// Pixel-space center.
    pub cx: f64,
    pub cy: f64,
    pub half: f64,
    pub rgb: [f64; 3],
    /// Normalized tight box of the rasterized mask.
    pub tight_box: BoxCwh,
}

impl SceneObject {
    fn pixel_inside(&self, px: f64, py: f64) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        let r = self.half;
        match self.shape {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Triangle => {
                // Apex up: (cx, cy-r), base corners (cx±r, cy+r). Half-plane
                // tests against the two slanted edges.
                dy <= r && dy >= 2.0 * dx - r && dy >= -2.0 * dx - r
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub target: usize,
    pub query: String,
    pub gt_box: BoxCwh,
    /// Interleaved RGB, row-major, top row first.
    pub pixels: Vec<u8>,
    pub image_size: usize,
    pub seed: u64,
}

const BACKGROUND: [f64; 3] = [0.10, 0.10, 0.10];
const MAX_ATTEMPTS: usize = 1000;

/// Builds the scene for `seed`. Identical seeds give identical scenes.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempts = 0usize;
    'scene: loop {
        let objects = match place_objects(&mut rng, config, &mut attempts)? {
            Some(objs) => objs,
            None => continue 'scene,
        };
        // Target is index 0 by construction; it is drawn last so its pixels
        // are never occluded.
        let query = match minimal_query(&objects, 0, config.allow_positional) {
            Some(q) => q,
            None => {
                attempts += 1;
                if attempts >= MAX_ATTEMPTS {
                    return Err(VgqcError::validation(
                        "scene rejection sampling exceeded 1000 attempts; config too dense",
                    ));
                }
                continue 'scene;
            }
        };
        let pixels = render(&objects, 0, config.image_size);
        let gt_box = objects[0].tight_box;
        return Ok(Scene {
            query,
            gt_box,
            pixels,
            objects,
            target: 0,
            image_size: config.image_size,
            seed,
        });
    }
}

/// Places target plus distractors plus fillers; `None` asks for a re-roll.
fn place_objects(
    rng: &mut ChaCha8Rng,
    config: &SceneConfig,
    attempts: &mut usize,
) -> Result<Option<Vec<SceneObject>>> {
    let lo = config.effective_min_objects();
    let n = rng.gen_range(lo..=config.n_objects_max);
    let size_px = config.image_size;

    let target_shape = SHAPES[rng.gen_range(0..SHAPES.len())];
    let target_color = COLORS[rng.gen_range(0..COLORS.len())];

    let mut specs: Vec<(Shape, Color, Size)> = Vec::with_capacity(n);
    specs.push((target_shape, target_color, SIZES[rng.gen_range(0..SIZES.len())]));
    for i in 1..n {
        let (shape, color) = if i <= config.min_distractors {
            // Share exactly one of shape/color with the target.
            if rng.gen_bool(0.5) {
                let other = loop {
                    let c = COLORS[rng.gen_range(0..COLORS.len())];
                    if c != target_color {
                        break c;
                    }
                };
                (target_shape, other)
            } else {
                let other = loop {
                    let s = SHAPES[rng.gen_range(0..SHAPES.len())];
                    if s != target_shape {
                        break s;
                    }
                };
                (other, target_color)
            }
        } else {
            (
                SHAPES[rng.gen_range(0..SHAPES.len())],
                COLORS[rng.gen_range(0..COLORS.len())],
            )
        };
        specs.push((shape, color, SIZES[rng.gen_range(0..SIZES.len())]));
    }

    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for (shape, color, size) in specs {
        let half = size.half_extent(size_px);
        let mut placed = false;
        while !placed {
            *attempts += 1;
            if *attempts >= MAX_ATTEMPTS {
                return Err(VgqcError::validation(
                    "scene rejection sampling exceeded 1000 attempts; config too dense",
                ));
            }
            let margin = half + 1.0;
            let cx = rng.gen_range(margin..size_px as f64 - margin);
            let cy = rng.gen_range(margin..size_px as f64 - margin);
            let mut jitter = [0.0; 3];
            let base = color.base_rgb();
            for (j, b) in jitter.iter_mut().zip(base) {
                *j = b * (1.0 + rng.gen_range(-0.1..0.1));
            }
            let mut obj = SceneObject {
                shape,
                color,
                size,
                cx,
                cy,
                half,
                rgb: jitter,
                tight_box: BoxCwh::new(0.0, 0.0, 0.0, 0.0),
            };
            obj.tight_box = match mask_tight_box(&obj, size_px) {
                Some(b) => b,
                None => continue,
            };
            if objects
                .iter()
                .all(|o| iou(&o.tight_box, &obj.tight_box) <= 0.2)
            {
                objects.push(obj);
                placed = true;
            }
        }
    }
    Ok(Some(objects))
}

/// Tight normalized box of the rasterized mask; `None` for an empty mask.
fn mask_tight_box(obj: &SceneObject, image_size: usize) -> Option<BoxCwh> {
    let mut xmin = usize::MAX;
    let mut xmax = 0usize;
    let mut ymin = usize::MAX;
    let mut ymax = 0usize;
    let lo_y = (obj.cy - obj.half - 1.0).floor().max(0.0) as usize;
    let hi_y = ((obj.cy + obj.half + 1.0).ceil() as usize).min(image_size);
    let lo_x = (obj.cx - obj.half - 1.0).floor().max(0.0) as usize;
    let hi_x = ((obj.cx + obj.half + 1.0).ceil() as usize).min(image_size);
    let mut any = false;
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            if obj.pixel_inside(x as f64 + 0.5, y as f64 + 0.5) {
                any = true;
                xmin = xmin.min(x);
                xmax = xmax.max(x);
                ymin = ymin.min(y);
                ymax = ymax.max(y);
            }
        }
    }
    if !any {
        return None;
    }
    let s = image_size as f64;
    Some(BoxCwh::from_corners(
        xmin as f64 / s,
        ymin as f64 / s,
        (xmax + 1) as f64 / s,
        (ymax + 1) as f64 / s,
    ))
}

/// Smallest template that picks out exactly the target.
fn minimal_query(objects: &[SceneObject], target: usize, allow_positional: bool) -> Option<String> {
    let t = &objects[target];
    let same_cs: Vec<usize> = objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.color == t.color && o.shape == t.shape)
        .map(|(i, _)| i)
        .collect();
    if same_cs.len() == 1 {
        return Some(format!("{} {}", t.color.word(), t.shape.word()));
    }
    let same_scs = same_cs
        .iter()
        .filter(|&&i| objects[i].size == t.size)
        .count();
    if same_scs == 1 {
        return Some(format!(
            "{} {} {}",
            t.size.word(),
            t.color.word(),
            t.shape.word()
        ));
    }
    if allow_positional {
        let leftmost = same_cs
            .iter()
            .all(|&i| i == target || objects[i].cx > t.cx);
        if leftmost {
            return Some(format!("left {} {}", t.color.word(), t.shape.word()));
        }
        let rightmost = same_cs
            .iter()
            .all(|&i| i == target || objects[i].cx < t.cx);
        if rightmost {
            return Some(format!("right {} {}", t.color.word(), t.shape.word()));
        }
    }
    None
}

/// Indices of objects a query string selects; the generator guarantees the
/// result is exactly the target. Parses the final string, so it exercises the
/// full path from text back to scene attributes.
pub fn matching_objects(query: &str, objects: &[SceneObject]) -> Vec<usize> {
    let words: Vec<&str> = query.split_whitespace().collect();
    let mut positional: Option<&str> = None;
    let mut size: Option<Size> = None;
    let mut color: Option<Color> = None;
    let mut shape: Option<Shape> = None;
    for w in words {
        match w {
            "left" | "right" => positional = Some(w),
            "small" => size = Some(Size::Small),
            "large" => size = Some(Size::Large),
            "red" => color = Some(Color::Red),
            "green" => color = Some(Color::Green),
            "blue" => color = Some(Color::Blue),
            "yellow" => color = Some(Color::Yellow),
            "circle" => shape = Some(Shape::Circle),
            "square" => shape = Some(Shape::Square),
            "triangle" => shape = Some(Shape::Triangle),
            _ => return Vec::new(),
        }
    }
    let attr_match = |o: &SceneObject| {
        size.map_or(true, |s| o.size == s)
            && color.map_or(true, |c| o.color == c)
            && shape.map_or(true, |s| o.shape == s)
    };
    let candidates: Vec<usize> = objects
        .iter()
        .enumerate()
        .filter(|(_, o)| attr_match(o))
        .map(|(i, _)| i)
        .collect();
    match positional {
        None => candidates,
        Some(dir) => candidates
            .iter()
            .copied()
            .filter(|&i| {
                candidates.iter().all(|&j| {
                    j == i
                        || if dir == "left" {
                            objects[j].cx > objects[i].cx
                        } else {
                            objects[j].cx < objects[i].cx
                        }
                })
            })
            .collect(),
    }
}

/// Paints background then objects; the target index is painted last.
fn render(objects: &[SceneObject], target: usize, image_size: usize) -> Vec<u8> {
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let bg: [u8; 3] = [to_u8(BACKGROUND[0]), to_u8(BACKGROUND[1]), to_u8(BACKGROUND[2])];
    let mut pixels = vec![0u8; image_size * image_size * 3];
    for p in pixels.chunks_mut(3) {
        p.copy_from_slice(&bg);
    }
    let order = objects
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .map(|(i, _)| i)
        .chain(std::iter::once(target));
    for i in order {
        let o = &objects[i];
        let rgb = [to_u8(o.rgb[0]), to_u8(o.rgb[1]), to_u8(o.rgb[2])];
        let lo_y = (o.cy - o.half - 1.0).floor().max(0.0) as usize;
        let hi_y = ((o.cy + o.half + 1.0).ceil() as usize).min(image_size);
        let lo_x = (o.cx - o.half - 1.0).floor().max(0.0) as usize;
        let hi_x = ((o.cx + o.half + 1.0).ceil() as usize).min(image_size);
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                if o.pixel_inside(x as f64 + 0.5, y as f64 + 0.5) {
                    let at = (y * image_size + x) * 3;
                    pixels[at..at + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    pixels
}

/// Scene pixels as `[3, s, s]` planes in [0, 1].
pub fn pixels_to_chw(pixels: &[u8], image_size: usize) -> Vec<f32> {
    let hw = image_size * image_size;
    let mut out = vec![0f32; 3 * hw];
    for (i, px) in pixels.chunks(3).enumerate() {
        for c in 0..3 {
            out[c * hw + i] = px[c] as f32 / 255.0;
        }
    }
    out
}

pub fn write_ppm(path: &Path, pixels: &[u8], image_size: usize) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", image_size, image_size)?;
    f.write_all(pixels)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<(Vec<u8>, usize)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let header_err = || VgqcError::validation(format!("{}: not a P6 ppm", path.display()));
    // Header is exactly what write_ppm emits: three newline-separated fields.
    let mut fields = Vec::new();
    let mut at = 0usize;
    for _ in 0..3 {
        let end = bytes[at..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(header_err)?
            + at;
        fields.push(std::str::from_utf8(&bytes[at..end]).map_err(|_| header_err())?);
        at = end + 1;
    }
    if fields[0] != "P6" || fields[2] != "255" {
        return Err(header_err());
    }
    let dims: Vec<&str> = fields[1].split(' ').collect();
    if dims.len() != 2 || dims[0] != dims[1] {
        return Err(header_err());
    }
    let size: usize = dims[0].parse().map_err(|_| header_err())?;
    let body = &bytes[at..];
    if body.len() != size * size * 3 {
        return Err(VgqcError::validation(format!(
            "{}: expected {} pixel bytes, found {}",
            path.display(),
            size * size * 3,
            body.len()
        )));
    }
    Ok((body.to_vec(), size))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleEntry {
    pub image: String,
    pub query: String,
    pub box_cwh: [f64; 4],
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<SampleEntry>,
    pub val: Vec<SampleEntry>,
    pub test: Vec<SampleEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Token-to-id map, fixed specials first; see [`crate::text::Vocab`].
    pub vocab: std::collections::BTreeMap<String, usize>,
    pub config: SceneConfig,
    pub splits: Splits,
}

impl Manifest {
    pub fn split(&self, name: &str) -> Result<&[SampleEntry]> {
        match name {
            "train" => Ok(&self.splits.train),
            "val" => Ok(&self.splits.val),
            "test" => Ok(&self.splits.test),
            other => Err(VgqcError::validation(format!("unknown split '{other}'"))),
        }
    }
}

/// Generates all samples and writes `images/` plus `manifest.json`.
///
/// Sample i (global index across train then val then test) uses seed
/// `splitmix64_at(base_seed, i)`, so splits stay disjoint and any sample can
/// be regenerated in isolation.
pub fn build_dataset(
    base_seed: u64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    config: &SceneConfig,
    out_dir: &Path,
) -> Result<Manifest> {
    config.validate()?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images)?;
    let total = n_train + n_val + n_test;
    let mut entries = Vec::with_capacity(total);
    for i in 0..total {
        let seed = splitmix64_at(base_seed, i as u64);
        let scene = generate_scene(seed, config)?;
        let name = format!("images/{i:06}.ppm");
        write_ppm(&out_dir.join(&name), &scene.pixels, scene.image_size)?;
        entries.push(SampleEntry {
            image: name,
            query: scene.query,
            box_cwh: [
                scene.gt_box.cx,
                scene.gt_box.cy,
                scene.gt_box.w,
                scene.gt_box.h,
            ],
            seed,
        });
    }
    let mut it = entries.into_iter();
    let manifest = Manifest {
        version: 1,
        vocab: crate::text::Vocab::new(&query_words()).to_id_map(),
        config: config.clone(),
        splits: Splits {
            train: it.by_ref().take(n_train).collect(),
            val: it.by_ref().take(n_val).collect(),
            test: it.collect(),
        },
    };
    fs::write(out_dir.join("manifest.json"), manifest_json(&manifest)?)?;
    Ok(manifest)
}

/// Manifest JSON with box floats fixed at 6 decimal places.
fn manifest_json(m: &Manifest) -> Result<String> {
    let mut v = serde_json::to_value(m)?;
    let splits = v
        .get_mut("splits")
        .and_then(|s| s.as_object_mut())
        .expect("splits object");
    for (_, entries) in splits.iter_mut() {
        for e in entries.as_array_mut().expect("split array") {
            let arr = e
                .get_mut("box_cwh")
                .and_then(|b| b.as_array_mut())
                .expect("box array");
            for coord in arr.iter_mut() {
                let fixed = format!("{:.6}", coord.as_f64().expect("box float"));
                *coord = serde_json::Value::Number(
                    serde_json::Number::from_string_unchecked(fixed),
                );
            }
        }
    }
    Ok(serde_json::to_string_pretty(&v)?)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.version != 1 {
        return Err(VgqcError::validation(format!(
            "unsupported manifest version {}",
            m.version
        )));
    }
    Ok(m)
}

/// On-disk dataset handle: manifest plus image loading.
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest: load_manifest(dir)?,
        })
    }

    /// Tokenizer rebuilt from the manifest's id map.
    pub fn vocab(&self) -> Result<crate::text::Vocab> {
        crate::text::Vocab::from_id_map(&self.manifest.vocab)
    }

    /// Image planes `[3, s, s]` in [0, 1].
    pub fn load_image(&self, entry: &SampleEntry) -> Result<Vec<f32>> {
        let (pixels, size) = read_ppm(&self.dir.join(&entry.image))?;
        if size != self.manifest.config.image_size {
            return Err(VgqcError::validation(format!(
                "{}: image size {} does not match manifest {}",
                entry.image, size, self.manifest.config.image_size
            )));
        }
        Ok(pixels_to_chw(&pixels, size))
    }
}
