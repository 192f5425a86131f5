//! Synthetic compositional scenes: shapes on a 3×3 grid, rendered to
//! small RGB images, with one caption sentence per object.
//!
//! Captions follow the fixed grammar `A {color} {shape} in the {cell}.`,
//! so [`parse_sentence`] recovers the scene and gives a ground-truth
//! alignment oracle independent of any learned model.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::ImageShape;
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::segmentation::{RawPrompt, Vocabulary};
use crate::tensor::Tensor;

pub const GRID: usize = 3;
pub const CELL_PX: usize = 7;
pub const IMAGE_SHAPE: ImageShape = ImageShape { h: GRID * CELL_PX, w: GRID * CELL_PX, c: 3 };
pub const MAX_OBJECTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether offset `(dx, dy)` from the shape centre is filled, on a
    /// 5×5 footprint.
    fn covers(self, dx: i32, dy: i32) -> bool {
        match self {
            Shape::Square => true,
            Shape::Circle => dx * dx + dy * dy <= 4,
            Shape::Triangle => 2 * dx.abs() <= dy + 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Orange,
}

impl Color {
    pub const ALL: [Color; 8] =
        [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Cyan, Color::Magenta, Color::White, Color::Orange];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Orange => "orange",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
            Color::Cyan => [0, 255, 255],
            Color::Magenta => [255, 0, 255],
            Color::White => [255, 255, 255],
            Color::Orange => [255, 128, 0],
        }
    }
}

/// Grid position, row-major `0..9`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell(pub u8);

const CELL_NAMES: [&str; 9] = [
    "top left",
    "top center",
    "top right",
    "middle left",
    "center",
    "middle right",
    "bottom left",
    "bottom center",
    "bottom right",
];

impl Cell {
    pub fn all() -> impl Iterator<Item = Cell> {
        (0..9).map(Cell)
    }

    pub fn name(self) -> &'static str {
        CELL_NAMES[self.0 as usize]
    }

    pub fn row_col(self) -> (usize, usize) {
        (self.0 as usize / GRID, self.0 as usize % GRID)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub cell: Cell,
}

impl SceneObject {
    pub fn sentence(&self) -> String {
        format!("A {} {} in the {}.", self.color.name(), self.shape.name(), self.cell.name())
    }
}

impl fmt::Display for SceneObject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} @ {}", self.color.name(), self.shape.name(), self.cell.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return Err(Error::InvalidScene(format!("scene needs 1..={MAX_OBJECTS} objects, has {}", self.objects.len())));
        }
        let mut seen = HashSet::new();
        for o in &self.objects {
            if o.cell.0 >= 9 {
                return Err(Error::InvalidScene(format!("cell {} outside the grid", o.cell.0)));
            }
            if !seen.insert(o.cell) {
                return Err(Error::InvalidScene(format!("two objects share cell '{}'", o.cell.name())));
            }
        }
        Ok(())
    }

    pub fn caption_long(&self) -> String {
        self.objects.iter().map(SceneObject::sentence).collect::<Vec<_>>().join(" ")
    }

    pub fn caption_short(&self) -> String {
        self.objects[0].sentence()
    }

    pub fn random(rng: &mut impl Rng, seed: u64) -> Self {
        let n = rng.random_range(1..=MAX_OBJECTS);
        let cells = rng::sample_subset(9, n, rng);
        let mut objects: Vec<SceneObject> = cells
            .into_iter()
            .map(|c| SceneObject {
                shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
                color: Color::ALL[rng.random_range(0..Color::ALL.len())],
                cell: Cell(c as u8),
            })
            .collect();
        // caption order is random, not grid order
        for i in (1..objects.len()).rev() {
            let j = rng.random_range(0..=i);
            objects.swap(i, j);
        }
        Self { objects, seed }
    }
}

/// Every word the caption grammar can emit, in a fixed order.
pub fn grammar_vocabulary() -> Vocabulary {
    let mut words: Vec<&str> = vec!["a", "in", "the", "."];
    words.extend(Color::ALL.iter().map(|c| c.name()));
    words.extend(Shape::ALL.iter().map(|s| s.name()));
    words.extend(["top", "middle", "bottom", "left", "center", "right"]);
    Vocabulary::from_words(words)
}

/// Inverse of [`SceneObject::sentence`].
pub fn parse_sentence(sentence: &str) -> Option<(Color, Shape, Cell)> {
    let body = sentence.trim().strip_prefix("A ")?.strip_suffix('.')?;
    let (color, rest) = body.split_once(' ')?;
    let (shape, rest) = rest.split_once(' ')?;
    let cell_name = rest.strip_prefix("in the ")?;
    let color = *Color::ALL.iter().find(|c| c.name() == color)?;
    let shape = *Shape::ALL.iter().find(|s| s.name() == shape)?;
    let cell = Cell::all().find(|c| c.name() == cell_name)?;
    Some((color, shape, cell))
}

/// True when the scene contains an object matching the sentence.
pub fn scene_satisfies(scene: &SceneSpec, sentence: &str) -> bool {
    parse_sentence(sentence).is_some_and(|(color, shape, cell)| {
        scene.objects.iter().any(|o| o.color == color && o.shape == shape && o.cell == cell)
    })
}

/// Raw RGB bytes, HWC order, black background.
pub fn render_pixels(spec: &SceneSpec) -> Result<Vec<u8>> {
    spec.validate()?;
    let s = IMAGE_SHAPE;
    let mut px = vec![0u8; s.numel()];
    for o in &spec.objects {
        let (r, c) = o.cell.row_col();
        let (cy, cx) = (r * CELL_PX + CELL_PX / 2, c * CELL_PX + CELL_PX / 2);
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                if o.shape.covers(dx, dy) {
                    let (y, x) = ((cy as i32 + dy) as usize, (cx as i32 + dx) as usize);
                    px[(y * s.w + x) * 3..(y * s.w + x) * 3 + 3].copy_from_slice(&o.color.rgb());
                }
            }
        }
    }
    Ok(px)
}

pub fn pixels_to_tensor(px: &[u8]) -> Tensor {
    Tensor::row_vector(px.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn tensor_to_pixels(img: &Tensor) -> Vec<u8> {
    img.data().iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Renders to a `1 × (H·W·3)` tensor with values `byte / 255`.
pub fn render_scene(spec: &SceneSpec) -> Result<Tensor> {
    Ok(pixels_to_tensor(&render_pixels(spec)?))
}

pub fn encode_png(px: &[u8], shape: ImageShape) -> Result<Vec<u8>> {
    let img = image::RgbImage::from_raw(shape.w as u32, shape.h as u32, px.to_vec())
        .ok_or_else(|| Error::InvalidImage("pixel buffer does not match image shape".into()))?;
    let mut buf = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png).map_err(|e| Error::Codec(e.to_string()))?;
    Ok(buf)
}

pub fn decode_png(bytes: &[u8]) -> Result<(Vec<u8>, ImageShape)> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Codec(e.to_string()))?
        .to_rgb8();
    let shape = ImageShape { h: img.height() as usize, w: img.width() as usize, c: 3 };
    Ok((img.into_raw(), shape))
}

pub fn load_png_tensor(path: &Path) -> Result<Tensor> {
    let (px, _) = decode_png(&std::fs::read(path)?)?;
    Ok(pixels_to_tensor(&px))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub image: Tensor,
    pub caption_long: String,
    pub caption_short: String,
    pub scene: SceneSpec,
}

impl DatasetRecord {
    pub fn from_scene(scene: SceneSpec) -> Result<Self> {
        Ok(Self { image: render_scene(&scene)?, caption_long: scene.caption_long(), caption_short: scene.caption_short(), scene })
    }

    pub fn prompt(&self) -> RawPrompt {
        RawPrompt { text: self.caption_long.clone(), short_text: Some(self.caption_short.clone()) }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let total = ratios.0 + ratios.1 + ratios.2;
    let train = ((n as f64) * ratios.0 / total).round() as usize;
    let val = (((n as f64) * ratios.1 / total).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// `n` records with pairwise-distinct captions, deterministic in `seed`.
pub fn generate_records(n: usize, seed: u64) -> Result<Vec<DatasetRecord>> {
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    let mut attempt = 0u64;
    while out.len() < n {
        let scene_seed = rng::derive_seed(seed, tags::SCENE, attempt);
        attempt += 1;
        let scene = SceneSpec::random(&mut rng::rng_from(scene_seed), scene_seed);
        if seen.insert(scene.caption_long()) {
            out.push(DatasetRecord::from_scene(scene)?);
        }
    }
    Ok(out)
}

pub fn generate_dataset(n: usize, seed: u64, ratios: (f64, f64, f64)) -> Result<DatasetSplits> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let mut records = generate_records(n, seed)?;
    let (tr, va, _) = split_sizes(n, ratios);
    let test = records.split_off(tr + va);
    let val = records.split_off(tr);
    Ok(DatasetSplits { train: records, val, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corruption {
    SegmentDrop,
    AttributeSwap,
    /// Segment drop for multi-object scenes chosen with probability ½,
    /// otherwise attribute swap.
    Mixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub prompt: RawPrompt,
    pub image_win: Tensor,
    pub image_lose: Tensor,
    pub lose_scene: SceneSpec,
}

fn drop_object(scene: &SceneSpec, rng: &mut impl Rng) -> SceneSpec {
    let mut s = scene.clone();
    s.objects.remove(rng.random_range(0..s.objects.len()));
    s
}

fn swap_attribute(scene: &SceneSpec, rng: &mut impl Rng) -> SceneSpec {
    let mut s = scene.clone();
    let i = rng.random_range(0..s.objects.len());
    let occupied: HashSet<Cell> = s.objects.iter().map(|o| o.cell).collect();
    loop {
        match rng.random_range(0..3) {
            0 => {
                let others: Vec<Color> = Color::ALL.into_iter().filter(|&c| c != s.objects[i].color).collect();
                s.objects[i].color = others[rng.random_range(0..others.len())];
            }
            1 => {
                let others: Vec<Shape> = Shape::ALL.into_iter().filter(|&c| c != s.objects[i].shape).collect();
                s.objects[i].shape = others[rng.random_range(0..others.len())];
            }
            _ => {
                let free: Vec<Cell> = Cell::all().filter(|c| !occupied.contains(c)).collect();
                if free.is_empty() {
                    continue;
                }
                s.objects[i].cell = free[rng.random_range(0..free.len())];
            }
        }
        return s;
    }
}

/// Winner renders the caption faithfully; loser renders a corrupted scene.
/// Returns the pairs and the number of records skipped because segment
/// drop needs at least two objects.
pub fn derive_preference_pairs(
    records: &[DatasetRecord],
    seed: u64,
    corruption: Corruption,
) -> Result<(Vec<PreferencePair>, usize)> {
    let mut pairs = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for (i, rec) in records.iter().enumerate() {
        let mut r = rng::sub_rng(seed, tags::CORRUPT, i as u64);
        let multi = rec.scene.objects.len() >= 2;
        let lose_scene = match corruption {
            Corruption::SegmentDrop if !multi => {
                skipped += 1;
                continue;
            }
            Corruption::SegmentDrop => drop_object(&rec.scene, &mut r),
            Corruption::AttributeSwap => swap_attribute(&rec.scene, &mut r),
            Corruption::Mixed => {
                if multi && r.random_bool(0.5) {
                    drop_object(&rec.scene, &mut r)
                } else {
                    swap_attribute(&rec.scene, &mut r)
                }
            }
        };
        pairs.push(PreferencePair {
            prompt: rec.prompt(),
            image_win: rec.image.clone(),
            image_lose: render_scene(&lose_scene)?,
            lose_scene,
        });
    }
    if skipped > 0 {
        log_warning(&format!("segment drop skipped {skipped} single-object records"));
    }
    Ok((pairs, skipped))
}

fn log_warning(msg: &str) {
    eprintln!("warning: {msg}");
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub caption_long: String,
    pub caption_short: String,
    pub scene: Vec<SceneObject>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub prompt: String,
    pub short: String,
    pub winner: String,
    pub loser: String,
}

/// Writes `px` as `images/<sha256>.png` under `root`; returns the relative path.
pub fn store_png(root: &Path, px: &[u8]) -> Result<String> {
    let png = encode_png(px, IMAGE_SHAPE)?;
    let digest = hex::encode(Sha256::digest(&png));
    let rel = format!("images/{digest}.png");
    let path = root.join(&rel);
    if !path.exists() {
        std::fs::create_dir_all(root.join("images"))?;
        std::fs::write(&path, &png)?;
    }
    Ok(rel)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_manifest(root: &Path, name: &str, records: &[DatasetRecord]) -> Result<PathBuf> {
    let rows = records
        .iter()
        .map(|r| {
            Ok(ManifestRecord {
                image: store_png(root, &tensor_to_pixels(&r.image))?,
                caption_long: r.caption_long.clone(),
                caption_short: r.caption_short.clone(),
                scene: r.scene.objects.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = root.join(format!("{name}.jsonl"));
    write_jsonl(&path, &rows)?;
    Ok(path)
}

pub fn read_manifest(root: &Path, name: &str) -> Result<Vec<DatasetRecord>> {
    let rows: Vec<ManifestRecord> = read_jsonl(&root.join(format!("{name}.jsonl")))?;
    rows.into_iter()
        .map(|m| {
            Ok(DatasetRecord {
                image: load_png_tensor(&root.join(&m.image))?,
                caption_long: m.caption_long,
                caption_short: m.caption_short,
                scene: SceneSpec { objects: m.scene, seed: 0 },
            })
        })
        .collect()
}

pub fn write_pairs(root: &Path, name: &str, pairs: &[PreferencePair]) -> Result<PathBuf> {
    let rows = pairs
        .iter()
        .map(|p| {
            Ok(PairRecord {
                prompt: p.prompt.text.clone(),
                short: p.prompt.short_text.clone().unwrap_or_default(),
                winner: store_png(root, &tensor_to_pixels(&p.image_win))?,
                loser: store_png(root, &tensor_to_pixels(&p.image_lose))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = root.join(format!("{name}.jsonl"));
    write_jsonl(&path, &rows)?;
    Ok(path)
}

/// Loads pairs; the loser scene is not stored and comes back empty.
pub fn read_pairs(root: &Path, name: &str) -> Result<Vec<PreferencePair>> {
    let rows: Vec<PairRecord> = read_jsonl(&root.join(format!("{name}.jsonl")))?;
    rows.into_iter()
        .map(|r| {
            let short = if r.short.is_empty() { None } else { Some(r.short) };
            Ok(PreferencePair {
                prompt: RawPrompt { text: r.prompt, short_text: short },
                image_win: load_png_tensor(&root.join(&r.winner))?,
                image_lose: load_png_tensor(&root.join(&r.loser))?,
                lose_scene: SceneSpec { objects: Vec::new(), seed: 0 },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::{segment_prompt, tokenize_segment};

    fn obj(shape: Shape, color: Color, cell: u8) -> SceneObject {
        SceneObject { shape, color, cell: Cell(cell) }
    }

    /// 4-connected components of non-background pixels.
    fn components(px: &[u8], shape: ImageShape) -> Vec<Vec<(usize, usize)>> {
        let mut seen = vec![false; shape.h * shape.w];
        let lit = |y: usize, x: usize| px[(y * shape.w + x) * 3..(y * shape.w + x) * 3 + 3].iter().any(|&b| b > 0);
        let mut out = Vec::new();
        for y in 0..shape.h {
            for x in 0..shape.w {
                if seen[y * shape.w + x] || !lit(y, x) {
                    continue;
                }
                let mut comp = Vec::new();
                let mut stack = vec![(y, x)];
                seen[y * shape.w + x] = true;
                while let Some((cy, cx)) = stack.pop() {
                    comp.push((cy, cx));
                    let nbrs = [(cy.wrapping_sub(1), cx), (cy + 1, cx), (cy, cx.wrapping_sub(1)), (cy, cx + 1)];
                    for (ny, nx) in nbrs {
                        if ny < shape.h && nx < shape.w && !seen[ny * shape.w + nx] && lit(ny, nx) {
                            seen[ny * shape.w + nx] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
                out.push(comp);
            }
        }
        out
    }

    #[test]
    fn render_rejects_invalid_specs() {
        let empty = SceneSpec { objects: vec![], seed: 0 };
        assert!(matches!(render_scene(&empty), Err(Error::InvalidScene(_))));
        let clash = SceneSpec { objects: vec![obj(Shape::Circle, Color::Red, 4), obj(Shape::Square, Color::Blue, 4)], seed: 0 };
        assert!(matches!(render_scene(&clash), Err(Error::InvalidScene(_))));
    }

    #[test]
    fn single_centre_circle_is_one_component_in_centre_cell() {
        let spec = SceneSpec { objects: vec![obj(Shape::Circle, Color::Red, 4)], seed: 0 };
        let px = render_pixels(&spec).unwrap();
        assert_eq!(px, render_pixels(&spec).unwrap());
        let comps = components(&px, IMAGE_SHAPE);
        assert_eq!(comps.len(), 1);
        let lo = CELL_PX;
        let hi = 2 * CELL_PX;
        assert!(comps[0].iter().all(|&(y, x)| (lo..hi).contains(&y) && (lo..hi).contains(&x)));
        assert_eq!(comps[0].len(), 13);
    }

    #[test]
    fn shapes_have_distinct_footprints() {
        let count = |s: Shape| (-2..=2).flat_map(|y| (-2..=2).map(move |x| (x, y))).filter(|&(x, y)| s.covers(x, y)).count();
        assert_eq!((count(Shape::Square), count(Shape::Circle), count(Shape::Triangle)), (25, 13, 13));
    }

    #[test]
    fn adjacent_objects_do_not_touch() {
        let spec = SceneSpec { objects: (0..4).map(|c| obj(Shape::Square, Color::White, c)).collect(), seed: 0 };
        assert_eq!(components(&render_pixels(&spec).unwrap(), IMAGE_SHAPE).len(), 4);
    }

    #[test]
    fn dataset_is_deterministic_and_split() {
        let a = generate_dataset(100, 7, (0.8, 0.1, 0.1)).unwrap();
        let b = generate_dataset(100, 7, (0.8, 0.1, 0.1)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (80, 10, 10));
        let mut captions = HashSet::new();
        for r in a.train.iter().chain(&a.val).chain(&a.test) {
            assert!(captions.insert(r.caption_long.clone()), "splits share a caption");
        }
    }

    #[test]
    fn captions_round_trip_through_parser_and_vocab() {
        let vocab = grammar_vocabulary();
        for rec in generate_records(200, 3).unwrap() {
            let segs = segment_prompt(&rec.prompt(), &vocab, 12).unwrap();
            assert_eq!(segs.k(), rec.scene.objects.len());
            for (text, o) in segs.texts.iter().zip(&rec.scene.objects) {
                assert_eq!(parse_sentence(text), Some((o.color, o.shape, o.cell)));
            }
            assert!(tokenize_segment(&rec.caption_short, &vocab, 12).is_ok());
        }
    }

    #[test]
    fn segment_drop_removes_one_object() {
        let scene = SceneSpec { objects: vec![obj(Shape::Circle, Color::Red, 0), obj(Shape::Square, Color::Blue, 4), obj(Shape::Triangle, Color::Green, 8)], seed: 0 };
        let rec = DatasetRecord::from_scene(scene.clone()).unwrap();
        let (pairs, skipped) = derive_preference_pairs(&[rec], 1, Corruption::SegmentDrop).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(pairs[0].lose_scene.objects.len(), 2);
        assert!(pairs[0].lose_scene.objects.iter().all(|o| scene.objects.contains(o)));
        assert_eq!(pairs[0].image_lose, render_scene(&pairs[0].lose_scene).unwrap());
    }

    #[test]
    fn attribute_swap_changes_exactly_one_field() {
        let records = generate_records(60, 11).unwrap();
        let (pairs, _) = derive_preference_pairs(&records, 5, Corruption::AttributeSwap).unwrap();
        for (rec, p) in records.iter().zip(&pairs) {
            let mut changed = 0;
            for (a, b) in rec.scene.objects.iter().zip(&p.lose_scene.objects) {
                changed += usize::from(a.color != b.color) + usize::from(a.shape != b.shape) + usize::from(a.cell != b.cell);
            }
            assert_eq!(changed, 1);
        }
    }

    #[test]
    fn drop_only_pair_count_matches_multi_object_records() {
        let records = generate_records(80, 2).unwrap();
        let multi = records.iter().filter(|r| r.scene.objects.len() >= 2).count();
        let (pairs, skipped) = derive_preference_pairs(&records, 0, Corruption::SegmentDrop).unwrap();
        assert_eq!(pairs.len(), multi);
        assert_eq!(skipped, records.len() - multi);
    }

    #[test]
    fn oracle_winner_satisfies_all_loser_violates_one() {
        let records = generate_records(150, 4).unwrap();
        let (pairs, _) = derive_preference_pairs(&records, 9, Corruption::Mixed).unwrap();
        for (rec, p) in records.iter().zip(&pairs) {
            let segs: Vec<String> = rec.scene.objects.iter().map(SceneObject::sentence).collect();
            assert!(segs.iter().all(|s| scene_satisfies(&rec.scene, s)));
            assert!(segs.iter().any(|s| !scene_satisfies(&p.lose_scene, s)));
        }
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let rec = &generate_records(1, 0).unwrap()[0];
        let px = tensor_to_pixels(&rec.image);
        let (back, shape) = decode_png(&encode_png(&px, IMAGE_SHAPE).unwrap()).unwrap();
        assert_eq!(shape, IMAGE_SHAPE);
        assert_eq!(pixels_to_tensor(&back), rec.image);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records = generate_records(5, 1).unwrap();
        write_manifest(dir.path(), "train", &records).unwrap();
        let back = read_manifest(dir.path(), "train").unwrap();
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.caption_long, b.caption_long);
            assert_eq!(a.scene.objects, b.scene.objects);
        }
        let (pairs, _) = derive_preference_pairs(&records, 1, Corruption::Mixed).unwrap();
        write_pairs(dir.path(), "pairs", &pairs).unwrap();
        let back = read_pairs(dir.path(), "pairs").unwrap();
        assert_eq!(back[0].image_lose, pairs[0].image_lose);
        assert_eq!(back[0].prompt, pairs[0].prompt);
    }
}
