//! Dataset layout, PGM I/O, the synthetic cardiac-like generator and scribble synthesis.
//!
//! A dataset root holds `images/`, `labels/`, `scribbles/` (one `<id>.pgm` each) and
//! `splits/{train,val,test}.txt` listing ids one per line.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, WmuError};
use crate::tape::UNLABELED;
use crate::tensor::TensorGrid;

/// Number of classes in the synthetic corpus: background, RV, MYO, LV.
pub const SYNTH_CLASSES: usize = 4;

/// An `H x W` class map. Scribble maps use [`UNLABELED`] for pixels without a label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width, "label map size");
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != UNLABELED).count()
    }

    /// Errors on values `>= classes` other than [`UNLABELED`] (when `allow_unlabeled`).
    pub fn validate(&self, classes: usize, allow_unlabeled: bool, origin: &Path) -> Result<()> {
        for &v in &self.data {
            if (v as usize) >= classes && !(allow_unlabeled && v == UNLABELED) {
                return Err(WmuError::data(
                    origin,
                    format!("label value {v} out of range for {classes} classes"),
                ));
            }
        }
        Ok(())
    }
}

/// An 8-bit grayscale raster as stored in a PGM file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u8>,
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

/// Parses a binary (P5) PGM with maxval at most 255.
pub fn parse_pgm(bytes: &[u8], origin: &Path) -> Result<GrayImage> {
    let bad = |msg: &str| WmuError::data(origin, msg.to_string());
    let mut pos = 0;
    if header_token(bytes, &mut pos) != Some(b"P5") {
        return Err(bad("not a binary PGM (missing P5 magic)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        header_token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("malformed PGM header field {what}")))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if width == 0 || height == 0 {
        return Err(bad("PGM has zero size"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad(&format!("unsupported PGM maxval {maxval} (need 1..=255)")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = width * height;
    if bytes.len() < start + need {
        return Err(bad(&format!(
            "PGM raster truncated: expected {need} bytes, found {}",
            bytes.len().saturating_sub(start)
        )));
    }
    Ok(GrayImage {
        width,
        height,
        maxval: maxval as u16,
        data: bytes[start..start + need].to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| WmuError::io(path, e))?;
    parse_pgm(&bytes, path)
}

pub fn encode_pgm(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    assert_eq!(data.len(), width * height, "pgm raster size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| WmuError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| WmuError::io(path, e))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_file(path, &encode_pgm(width, height, data))
}

pub fn write_label_pgm(path: &Path, label: &LabelMap) -> Result<()> {
    write_pgm(path, label.width, label.height, &label.data)
}

/// Binary PPM (P6) from interleaved RGB bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), 3 * width * height, "ppm raster size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    write_file(path, &out)
}

/// Nearest-neighbour resampling; never introduces new values.
pub fn resize_nearest(src: &LabelMap, height: usize, width: usize) -> LabelMap {
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = ((y as f64 + 0.5) * src.height as f64 / height as f64) as usize;
        for x in 0..width {
            let sx = ((x as f64 + 0.5) * src.width as f64 / width as f64) as usize;
            data.push(src.get(sy.min(src.height - 1), sx.min(src.width - 1)));
        }
    }
    LabelMap::new(height, width, data)
}

/// Bilinear resampling with half-pixel centres and clamped edges.
pub fn resize_bilinear(src: &[f32], sh: usize, sw: usize, height: usize, width: usize) -> Vec<f32> {
    let coord = |o: usize, n_src: usize, n_dst: usize| {
        let c = ((o as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let i0 = c.floor() as usize;
        (i0, (i0 + 1).min(n_src - 1), (c - i0 as f64) as f32)
    };
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, sh, height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, sw, width);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = WmuError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(WmuError::Config(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

/// One loaded sample: a `(1, H, W)` image in `[0, 1]` and its label map.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: TensorGrid<f32>,
    pub label: LabelMap,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetIndex {
    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.pgm"))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.root.join("labels").join(format!("{id}.pgm"))
    }

    pub fn scribble_path(&self, id: &str) -> PathBuf {
        self.root.join("scribbles").join(format!("{id}.pgm"))
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Reads the split files under `root/splits`. A missing split file means an empty split.
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(WmuError::data(root, "dataset root is not a directory"));
        }
        let read = |split: Split| -> Result<Vec<String>> {
            let path = root.join("splits").join(format!("{split}.txt"));
            if !path.exists() {
                return Ok(Vec::new());
            }
            let text = fs::read_to_string(&path).map_err(|e| WmuError::io(&path, e))?;
            Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
        };
        let index = Self {
            root: root.to_path_buf(),
            train: read(Split::Train)?,
            val: read(Split::Val)?,
            test: read(Split::Test)?,
        };
        index.check_disjoint()?;
        Ok(index)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for split in Split::ALL {
            for id in self.ids(split) {
                if !seen.insert(id.as_str()) {
                    return Err(WmuError::data(
                        self.root.join("splits"),
                        format!("id {id:?} appears more than once across splits"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Checks that every listed id has the files its split needs.
    pub fn verify_files(&self) -> Result<()> {
        for split in Split::ALL {
            for id in self.ids(split) {
                let label = match split {
                    Split::Train => self.scribble_path(id),
                    _ => self.label_path(id),
                };
                for path in [self.image_path(id), label] {
                    if !path.is_file() {
                        return Err(WmuError::data(path, format!("missing file for {split} id {id:?}")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write_splits(&self) -> Result<()> {
        for split in Split::ALL {
            let mut text = String::new();
            for id in self.ids(split) {
                text.push_str(id);
                text.push('\n');
            }
            write_file(&self.root.join("splits").join(format!("{split}.txt")), text.as_bytes())?;
        }
        Ok(())
    }

    /// Image resized to `size x size` and scaled to `[0, 1]`.
    pub fn load_image(&self, id: &str, size: usize) -> Result<TensorGrid<f32>> {
        load_image_file(&self.image_path(id), size)
    }

    /// Scribbles for train, dense labels otherwise.
    pub fn load_sample(&self, id: &str, split: Split, size: usize, classes: usize) -> Result<Sample> {
        let label = match split {
            Split::Train => load_label_file(&self.scribble_path(id), size, classes, true)?,
            _ => load_label_file(&self.label_path(id), size, classes, false)?,
        };
        Ok(Sample {
            id: id.to_string(),
            image: self.load_image(id, size)?,
            label,
        })
    }

    pub fn load_dense(&self, id: &str, size: usize, classes: usize) -> Result<LabelMap> {
        load_label_file(&self.label_path(id), size, classes, false)
    }

    pub fn load_split(&self, split: Split, size: usize, classes: usize) -> Result<Vec<Sample>> {
        self.ids(split).iter().map(|id| self.load_sample(id, split, size, classes)).collect()
    }
}

pub fn load_image_file(path: &Path, size: usize) -> Result<TensorGrid<f32>> {
    let img = read_pgm(path)?;
    let scale = 1.0 / img.maxval as f32;
    let mut px: Vec<f32> = img.data.iter().map(|&v| (v as f32 * scale).min(1.0)).collect();
    if img.width != size || img.height != size {
        px = resize_bilinear(&px, img.height, img.width, size, size);
    }
    Ok(TensorGrid::from_vec(&[1, size, size], px))
}

pub fn load_label_file(path: &Path, size: usize, classes: usize, allow_unlabeled: bool) -> Result<LabelMap> {
    let img = read_pgm(path)?;
    let mut map = LabelMap::new(img.height, img.width, img.data);
    map.validate(classes, allow_unlabeled, path)?;
    if map.width != size || map.height != size {
        map = resize_nearest(&map, size, size);
    }
    Ok(map)
}

/// Mixes a base seed with a stream id (splitmix64 finaliser), so per-sample streams stay
/// independent of generation order.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sizes of the splits written by [`gen_synthetic`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 70 / 10 / 20 percent, with at least one val and one test sample when `n >= 3`.
    pub fn from_total(n: usize) -> Self {
        if n < 3 {
            return Self { train: n, val: 0, test: 0 };
        }
        let val = (n / 10).max(1);
        let test = (n / 5).max(1);
        Self { train: n - val - test, val, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// One synthetic sample: 8-bit image and dense label, both `size x size`.
pub fn synth_sample(size: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, LabelMap) {
    let s = size as f64;
    let (cx, cy) = (s * rng.random_range(0.42..0.58), s * rng.random_range(0.42..0.58));
    let (rx, ry) = (s * rng.random_range(0.08..0.13), s * rng.random_range(0.08..0.13));
    let thick = s * rng.random_range(0.035..0.06);
    let theta: f64 = rng.random_range(-0.4..0.4);
    let (ct, st) = (theta.cos(), theta.sin());
    // right ventricle sits to the image left of the ring, slightly above or below
    let phi: f64 = std::f64::consts::PI + rng.random_range(-0.6..0.6);
    let rv_r = s * rng.random_range(0.09..0.14);
    let rv_dist = rx.max(ry) + thick + rv_r * rng.random_range(0.25..0.6);
    let (rvx, rvy) = (cx + rv_dist * phi.cos(), cy + rv_dist * phi.sin());
    let rv_sq = rng.random_range(0.65..1.0);

    let base = [
        rng.random_range(0.08..0.2),
        rng.random_range(0.62..0.74),
        rng.random_range(0.3..0.42),
        rng.random_range(0.8..0.92),
    ];
    let (gx, gy) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");

    let mut label = Vec::with_capacity(size * size);
    let mut image = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (px - cx, py - cy);
            let (u, v) = (dx * ct + dy * st, -dx * st + dy * ct);
            let inner = (u / rx).powi(2) + (v / ry).powi(2);
            let outer = (u / (rx + thick)).powi(2) + (v / (ry + thick)).powi(2);
            let rv = ((px - rvx) / rv_r).powi(2) + ((py - rvy) / (rv_r * rv_sq)).powi(2);
            let class = if inner <= 1.0 {
                3
            } else if outer <= 1.0 {
                2
            } else if rv <= 1.0 {
                1
            } else {
                0
            };
            label.push(class);
            let shade = gx * (px / s - 0.5) + gy * (py / s - 0.5);
            let value = base[class as usize] + shade + noise.sample(rng);
            image.push((value.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    (image, LabelMap::new(size, size, label))
}

pub fn sample_id(i: usize) -> String {
    format!("case_{i:04}")
}

/// Writes a synthetic corpus (images, dense labels, scribbles at `coverage`, splits) under
/// `out`. Deterministic in `seed`.
pub fn gen_synthetic(sizes: SplitSizes, size: usize, seed: u64, coverage: f64, out: &Path) -> Result<DatasetIndex> {
    check_coverage(coverage)?;
    if size < 8 {
        return Err(WmuError::Config(format!("image size {size} too small")));
    }
    fs::create_dir_all(out).map_err(|e| WmuError::io(out, e))?;
    let ids: Vec<String> = (0..sizes.total()).map(sample_id).collect();
    let index = DatasetIndex {
        root: out.to_path_buf(),
        train: ids[..sizes.train].to_vec(),
        val: ids[sizes.train..sizes.train + sizes.val].to_vec(),
        test: ids[sizes.train + sizes.val..].to_vec(),
    };
    for (i, id) in ids.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let (image, label) = synth_sample(size, &mut rng);
        let scrib = scribblify(&label, coverage, derive_seed(seed ^ 0x5C21_B0B5, i as u64))?;
        write_pgm(&index.image_path(id), size, size, &image)?;
        write_label_pgm(&index.label_path(id), &label)?;
        write_label_pgm(&index.scribble_path(id), &scrib)?;
    }
    index.write_splits()?;
    Ok(index)
}

/// Regenerates `scribbles/` for every id in the dataset from its dense labels.
pub fn scribblify_dataset(data: &DatasetIndex, out: &Path, coverage: f64, seed: u64) -> Result<usize> {
    check_coverage(coverage)?;
    let mut count = 0;
    for (i, id) in Split::ALL.iter().flat_map(|&s| data.ids(s)).enumerate() {
        let path = data.label_path(id);
        let img = read_pgm(&path)?;
        let dense = LabelMap::new(img.height, img.width, img.data);
        dense.validate(UNLABELED as usize, false, &path)?;
        let scrib = scribblify(&dense, coverage, derive_seed(seed, i as u64))?;
        write_label_pgm(&out.join("scribbles").join(format!("{id}.pgm")), &scrib)?;
        count += 1;
    }
    Ok(count)
}

fn check_coverage(coverage: f64) -> Result<()> {
    if coverage > 0.0 && coverage <= 1.0 {
        Ok(())
    } else {
        Err(WmuError::Config(format!("scribble coverage must be in (0, 1], got {coverage}")))
    }
}

/// Zhang-Suen thinning of a binary mask; pixels outside the image count as background.
pub fn zhang_suen(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let mut m = mask.to_vec();
    let at = |m: &[bool], y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && m[y as usize * width + x as usize]
    };
    let mut remove = Vec::new();
    loop {
        let mut changed = false;
        for step in 0..2 {
            remove.clear();
            for y in 0..height as isize {
                for x in 0..width as isize {
                    if !at(&m, y, x) {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let p = [
                        at(&m, y - 1, x),
                        at(&m, y - 1, x + 1),
                        at(&m, y, x + 1),
                        at(&m, y + 1, x + 1),
                        at(&m, y + 1, x),
                        at(&m, y + 1, x - 1),
                        at(&m, y, x - 1),
                        at(&m, y - 1, x - 1),
                    ];
                    let b = p.iter().filter(|&&v| v).count();
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    let (c1, c2) = if step == 0 {
                        (p[0] && p[2] && p[4], p[2] && p[4] && p[6])
                    } else {
                        (p[0] && p[2] && p[6], p[0] && p[4] && p[6])
                    };
                    if (2..=6).contains(&b) && a == 1 && !c1 && !c2 {
                        remove.push(y as usize * width + x as usize);
                    }
                }
            }
            for &i in &remove {
                m[i] = false;
            }
            changed |= !remove.is_empty();
        }
        if !changed {
            return m;
        }
    }
}

/// Derives a scribble map from dense labels: for every present class, a connected run of
/// its skeleton covering about `coverage` of the skeleton length (at least one pixel).
/// Every kept pixel carries its dense class, so scribbles are always a subset.
pub fn scribblify(dense: &LabelMap, coverage: f64, seed: u64) -> Result<LabelMap> {
    check_coverage(coverage)?;
    let (h, w) = (dense.height, dense.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = LabelMap::filled(h, w, UNLABELED);
    let mut classes: Vec<u8> = dense.data.iter().copied().collect::<HashSet<_>>().into_iter().collect();
    classes.sort_unstable();
    for class in classes {
        let mask: Vec<bool> = dense.data.iter().map(|&v| v == class).collect();
        let skel = zhang_suen(&mask, h, w);
        let mut pixels: Vec<usize> = (0..h * w).filter(|&i| skel[i]).collect();
        if pixels.is_empty() {
            pixels = (0..h * w).filter(|&i| mask[i]).collect();
        }
        let keep = ((coverage * pixels.len() as f64).round() as usize).clamp(1, pixels.len());
        let start = pixels[rng.random_range(0..pixels.len())];
        for i in bfs_run(&skel, h, w, start, keep) {
            out.data[i] = class;
        }
    }
    Ok(out)
}

/// First `keep` pixels of an 8-connected breadth-first walk over `mask` from `start`.
fn bfs_run(mask: &[bool], h: usize, w: usize, start: usize, keep: usize) -> Vec<usize> {
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    let mut run = Vec::with_capacity(keep);
    while let Some(i) = queue.pop_front() {
        run.push(i);
        if run.len() == keep {
            break;
        }
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    run
}

/// Flip and quarter-turn applied identically to an image and its labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Augment {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            flip: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4),
        }
    }

    /// Source index for each destination pixel of a square `n x n` grid.
    fn source(self, n: usize, y: usize, x: usize) -> usize {
        let (mut y, mut x) = (y, x);
        for _ in 0..self.quarter_turns {
            // destination (y, x) came from (x, n-1-y) under a clockwise quarter turn
            (y, x) = (n - 1 - x, y);
        }
        if self.flip {
            x = n - 1 - x;
        }
        y * n + x
    }

    pub fn apply<T: Copy>(self, data: &[T], n: usize) -> Vec<T> {
        assert_eq!(data.len(), n * n, "augment needs a square grid");
        (0..n * n).map(|i| data[self.source(n, i / n, i % n)]).collect()
    }
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

/// Appends a line to a file opened once by the caller.
pub fn append_line(file: &mut fs::File, path: &Path, line: &str) -> Result<()> {
    writeln!(file, "{line}").map_err(|e| WmuError::io(path, e))
}
