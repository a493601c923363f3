//! Procedural "leaf" images with known generative factors, plus ingestion of
//! labeled PNG folders.
//!
//! A leaf is a vertical ellipse on a black background. Its colour moves from green
//! to yellow with `base_hue`, `shape_eccentricity` narrows it, and `spot_count`
//! hard-edged disease spots are scattered over it. Spot centres come from a
//! sequence seeded by the record's `seed`, so the first `k` spots of a record with
//! `spot_count = n > k` are exactly the spots of the same record with `spot_count = k`:
//! the spot pixel set can only grow with `spot_count`.
//!
//! Classes are conjunctions of two factors (spot count and hue), each split into a
//! low and a high region separated by a margin:
//!
//! | region     | values                                           |
//! |------------|--------------------------------------------------|
//! | spots low  | `0 ..= spot_threshold - spot_margin`             |
//! | spots high | `spot_threshold + 1 ..= max_spots`               |
//! | hue low    | `0 ..= hue_threshold - hue_margin`               |
//! | hue high   | `hue_threshold + hue_margin ..= 1`               |
//!
//! * `Synth2`: `diseased` = spots high AND hue high; `healthy` draws uniformly from
//!   the other three combinations.
//! * `Synth3`: `healthy` (low, low), `chlorosis` (spots low, hue high), `blight` (high, high).
//! * `Synth4`: the full 2x2 grid.
//!
//! Per-sample seeds are `derive(master, [split, class, index])` (splitmix64 chain,
//! see [`crate::seed`]), so every sample can be rendered independently.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{EclfError, Result};
use crate::imageio::{quantize, Image};
use crate::seed::{derive, fnv1a, rng_for};

pub const MAX_SPOTS: u32 = 12;
const SPOT_RADIUS_RANGE: (f64, f64) = (1.0, 6.0);

const GREEN: [f64; 3] = [0.20, 0.58, 0.14];
const YELLOW: [f64; 3] = [0.85, 0.78, 0.16];
const TAN: [f64; 3] = [0.62, 0.46, 0.24];
const DARK_BROWN: [f64; 3] = [0.16, 0.08, 0.03];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorRecord {
    pub base_hue: f64,
    pub spot_count: u32,
    /// Radius in pixels at the 32-pixel reference size; scaled with the image.
    pub spot_radius: f64,
    pub spot_darkness: f64,
    pub shape_eccentricity: f64,
    pub seed: u64,
}

impl FactorRecord {
    pub fn validate(&self) -> Result<()> {
        let unit = |field: &'static str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(EclfError::Factor {
                    field,
                    value: v.to_string(),
                    range: "[0, 1]",
                })
            }
        };
        unit("base_hue", self.base_hue)?;
        unit("spot_darkness", self.spot_darkness)?;
        unit("shape_eccentricity", self.shape_eccentricity)?;
        if self.spot_count > MAX_SPOTS {
            return Err(EclfError::Factor {
                field: "spot_count",
                value: self.spot_count.to_string(),
                range: "0..=12",
            });
        }
        if !(SPOT_RADIUS_RANGE.0..=SPOT_RADIUS_RANGE.1).contains(&self.spot_radius) {
            return Err(EclfError::Factor {
                field: "spot_radius",
                value: self.spot_radius.to_string(),
                range: "[1, 6]",
            });
        }
        Ok(())
    }

    /// Factor values in a fixed order, for alignment scoring.
    pub fn values(&self) -> [f64; 5] {
        [
            self.base_hue,
            self.spot_count as f64,
            self.spot_radius,
            self.spot_darkness,
            self.shape_eccentricity,
        ]
    }

    pub const NAMES: [&'static str; 5] = ["base_hue", "spot_count", "spot_radius", "spot_darkness", "shape_eccentricity"];
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

struct Geometry {
    cx: f64,
    cy: f64,
    semi_major: f64,
    semi_minor: f64,
    spots: Vec<(f64, f64)>,
    spot_r2: f64,
}

impl Geometry {
    fn new(f: &FactorRecord, size: usize) -> Self {
        let s = size as f64;
        let semi_major = 0.42 * s;
        let semi_minor = semi_major * (1.0 - 0.55 * f.shape_eccentricity);
        let r = (f.spot_radius * s / 32.0).max(0.75);
        let spots = spot_offsets(f.seed, f.spot_count as usize)
            .into_iter()
            .map(|(u, v)| (s / 2.0 + 0.75 * semi_minor * u, s / 2.0 + 0.75 * semi_major * v))
            .collect();
        Geometry {
            cx: s / 2.0,
            cy: s / 2.0,
            semi_major,
            semi_minor,
            spots,
            spot_r2: r * r,
        }
    }

    /// Normalized squared radius inside the leaf ellipse (`<= 1` means inside).
    fn leaf_rho2(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.cx) / self.semi_minor;
        let dy = (y - self.cy) / self.semi_major;
        dx * dx + dy * dy
    }

    fn in_spot(&self, x: f64, y: f64) -> bool {
        self.spots.iter().any(|&(sx, sy)| (x - sx) * (x - sx) + (y - sy) * (y - sy) <= self.spot_r2)
    }
}

/// Points in the unit disk by rejection sampling; the sequence is prefix-stable.
fn spot_offsets(seed: u64, count: usize) -> Vec<(f64, f64)> {
    let mut rng = rng_for(seed, &[0x5907]);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let u: f64 = rng.random_range(-1.0..1.0);
        let v: f64 = rng.random_range(-1.0..1.0);
        if u * u + v * v <= 1.0 {
            out.push((u, v));
        }
    }
    out
}

fn check_size(size: usize) -> Result<()> {
    if size < 16 {
        return Err(EclfError::Invalid(format!("image size {size} is below the 16x16 minimum")));
    }
    Ok(())
}

pub fn render(f: &FactorRecord, size: usize) -> Result<Image> {
    f.validate()?;
    check_size(size)?;
    let g = Geometry::new(f, size);
    let leaf = lerp3(GREEN, YELLOW, f.base_hue);
    let spot = lerp3(TAN, DARK_BROWN, f.spot_darkness);
    let mut img = Image::black(size, size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let rho2 = g.leaf_rho2(px, py);
            if rho2 > 1.0 {
                continue;
            }
            let rgb = if g.in_spot(px, py) {
                spot
            } else {
                let shade = 0.8 + 0.2 * (1.0 - rho2);
                leaf.map(|c| c * shade)
            };
            img.set(y, x, rgb.map(quantize));
        }
    }
    Ok(img)
}

/// Pixels painted with spot colour, row-major.
pub fn spot_mask(f: &FactorRecord, size: usize) -> Result<Vec<bool>> {
    f.validate()?;
    check_size(size)?;
    let g = Geometry::new(f, size);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            mask.push(g.leaf_rho2(px, py) <= 1.0 && g.in_spot(px, py));
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Synth2,
    Synth3,
    Synth4,
    Folder,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Synth2 => "synth2",
            Preset::Synth3 => "synth3",
            Preset::Synth4 => "synth4",
            Preset::Folder => "folder",
        })
    }
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        crate::textconf::parse_word(
            s,
            &[
                ("synth2", Preset::Synth2),
                ("synth3", Preset::Synth3),
                ("synth4", Preset::Synth4),
                ("folder", Preset::Folder),
            ],
        )
    }
}

crate::conf_value_via_str!(Preset);

impl Preset {
    pub fn class_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            Preset::Synth2 => &["healthy", "diseased"],
            Preset::Synth3 => &["healthy", "chlorosis", "blight"],
            Preset::Synth4 => &["healthy", "chlorosis", "spotted", "blight"],
            Preset::Folder => &[],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// (spots high, hue high) regions making up each class.
    fn regions(self) -> Vec<Vec<(bool, bool)>> {
        match self {
            Preset::Synth2 => vec![vec![(false, false), (false, true), (true, false)], vec![(true, true)]],
            Preset::Synth3 => vec![vec![(false, false)], vec![(false, true)], vec![(true, true)]],
            Preset::Synth4 => vec![vec![(false, false)], vec![(false, true)], vec![(true, false)], vec![(true, true)]],
            Preset::Folder => Vec::new(),
        }
    }
}

/// Thresholds and margins that define classes from factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassRule {
    pub spot_threshold: u32,
    pub spot_margin: u32,
    pub hue_threshold: f64,
    pub hue_margin: f64,
}

impl Default for ClassRule {
    fn default() -> Self {
        ClassRule {
            spot_threshold: 3,
            spot_margin: 2,
            hue_threshold: 0.5,
            hue_margin: 0.1,
        }
    }
}

impl ClassRule {
    fn spot_range(&self, high: bool) -> Option<(u32, u32)> {
        let (lo, hi) = if high {
            (self.spot_threshold + 1, MAX_SPOTS)
        } else {
            (0, self.spot_threshold.checked_sub(self.spot_margin)?)
        };
        (lo <= hi).then_some((lo, hi))
    }

    fn hue_range(&self, high: bool) -> Option<(f64, f64)> {
        let (lo, hi) = if high {
            (self.hue_threshold + self.hue_margin, 1.0)
        } else {
            (0.0, self.hue_threshold - self.hue_margin)
        };
        (lo <= hi && lo >= 0.0 && hi <= 1.0 && self.hue_margin > 0.0).then_some((lo, hi))
    }

    /// The class a factor record falls in under `preset`, if any.
    pub fn classify(&self, preset: Preset, f: &FactorRecord) -> Option<usize> {
        let spots_high = f.spot_count > self.spot_threshold;
        let hue_high = f.base_hue > self.hue_threshold;
        preset.regions().iter().position(|rs| rs.contains(&(spots_high, hue_high)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub class_id: usize,
    pub factors: Option<FactorRecord>,
    /// Stable identifier (file stem for ingested data).
    pub id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub preset: Preset,
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    pub rule: ClassRule,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            preset: Preset::Synth2,
            image_size: 32,
            train_per_class: 200,
            val_per_class: 30,
            test_per_class: 30,
            seed: 0,
            rule: ClassRule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub preset: Preset,
    pub class_names: Vec<String>,
    pub image_size: usize,
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[LabeledSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self, split: Split) -> Vec<usize> {
        self.split(split).iter().map(|s| s.class_id).collect()
    }
}

fn sample_factors(rule: &ClassRule, regions: &[(bool, bool)], seed: u64, rng: &mut ChaCha8Rng) -> Result<FactorRecord> {
    let (spots_high, hue_high) = regions[rng.random_range(0..regions.len())];
    let (slo, shi) = rule.spot_range(spots_high).expect("checked by caller");
    let (hlo, hhi) = rule.hue_range(hue_high).expect("checked by caller");
    Ok(FactorRecord {
        base_hue: if hlo == hhi { hlo } else { rng.random_range(hlo..=hhi) },
        spot_count: rng.random_range(slo..=shi),
        spot_radius: rng.random_range(2.0..=3.5),
        spot_darkness: rng.random_range(0.6..=1.0),
        shape_eccentricity: rng.random_range(0.0..=1.0),
        seed,
    })
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.preset == Preset::Folder {
        return Err(EclfError::Dataset("the folder preset is loaded with ingest_folder".into()));
    }
    check_size(spec.image_size)?;
    for (name, n) in [
        ("train_per_class", spec.train_per_class),
        ("val_per_class", spec.val_per_class),
        ("test_per_class", spec.test_per_class),
    ] {
        if n == 0 {
            return Err(EclfError::Dataset(format!("{name} must be at least 1")));
        }
    }
    let names = spec.preset.class_names();
    let regions = spec.preset.regions();
    for (class, rs) in regions.iter().enumerate() {
        for &(sh, hh) in rs {
            if spec.rule.spot_range(sh).is_none() || spec.rule.hue_range(hh).is_none() {
                return Err(EclfError::Dataset(format!(
                    "class {:?} is empty under thresholds {:?}",
                    names[class], spec.rule
                )));
            }
        }
    }
    let build = |split: Split, per_class: usize| -> Result<Vec<LabeledSample>> {
        let jobs: Vec<(usize, usize)> = (0..names.len()).flat_map(|c| (0..per_class).map(move |i| (c, i))).collect();
        jobs.par_iter()
            .map(|&(class, index)| {
                let seed = derive(spec.seed, &[split.tag(), class as u64, index as u64]);
                let mut rng = rng_for(seed, &[0xFAC7]);
                let factors = sample_factors(&spec.rule, &regions[class], seed, &mut rng)?;
                debug_assert_eq!(spec.rule.classify(spec.preset, &factors), Some(class));
                Ok(LabeledSample {
                    image: render(&factors, spec.image_size)?,
                    class_id: class,
                    factors: Some(factors),
                    id: format!("{}-{}-{index:05}", split.name(), names[class]),
                })
            })
            .collect()
    };
    Ok(Dataset {
        preset: spec.preset,
        class_names: names.clone(),
        image_size: spec.image_size,
        train: build(Split::Train, spec.train_per_class)?,
        val: build(Split::Val, spec.val_per_class)?,
        test: build(Split::Test, spec.test_per_class)?,
    })
}

/// How a labeled folder is split. `train_per_class = None` keeps every remaining image.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestSpec {
    pub image_size: usize,
    pub train_per_class: Option<usize>,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| EclfError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| EclfError::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Reads `root/<class>/*.png`. Classes are numbered in sorted directory order.
pub fn ingest_folder(root: &Path, spec: &IngestSpec) -> Result<Dataset> {
    check_size(spec.image_size)?;
    let class_dirs: Vec<PathBuf> = read_dir_sorted(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.len() < 2 {
        return Err(EclfError::Dataset(format!(
            "{} has {} class directories, need at least 2",
            root.display(),
            class_dirs.len()
        )));
    }
    let mut ds = Dataset {
        preset: Preset::Folder,
        class_names: Vec::new(),
        image_size: spec.image_size,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (class, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().to_string();
        let mut files: Vec<PathBuf> = read_dir_sorted(dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        if files.is_empty() {
            return Err(EclfError::Dataset(format!("class {name:?} has no PNG images")));
        }
        let needed = spec.val_per_class + spec.test_per_class + spec.train_per_class.unwrap_or(1);
        if files.len() < needed {
            return Err(EclfError::Dataset(format!(
                "class {name:?} has {} images, the requested split needs {needed}",
                files.len()
            )));
        }
        let key = |p: &PathBuf| {
            let fname = p.file_name().unwrap_or_default().to_string_lossy().to_string();
            (derive(spec.seed, &[fnv1a(fname.as_bytes())]), fname)
        };
        files.sort_by_cached_key(key);
        let images: Vec<Image> = files.par_iter().map(|p| Image::load_png(p, Some(spec.image_size))).collect::<Result<_>>()?;
        let train_end = match spec.train_per_class {
            Some(t) => spec.val_per_class + spec.test_per_class + t,
            None => files.len(),
        };
        for (i, (path, image)) in files.iter().zip(images).enumerate().take(train_end) {
            let sample = LabeledSample {
                image,
                class_id: class,
                factors: None,
                id: format!("{name}/{}", path.file_stem().unwrap_or_default().to_string_lossy()),
            };
            if i < spec.val_per_class {
                ds.val.push(sample);
            } else if i < spec.val_per_class + spec.test_per_class {
                ds.test.push(sample);
            } else {
                ds.train.push(sample);
            }
        }
        ds.class_names.push(name);
    }
    Ok(ds)
}

const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: [&str; 11] = [
    "split",
    "class_id",
    "class_name",
    "file",
    "id",
    "base_hue",
    "spot_count",
    "spot_radius",
    "spot_darkness",
    "shape_eccentricity",
    "seed",
];

/// Writes `dir/images/<split>/<nnnnn>.png` and `dir/manifest.csv`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for split in Split::ALL {
        let sub = dir.join("images").join(split.name());
        fs::create_dir_all(&sub).map_err(|e| EclfError::io(&sub, e))?;
        let samples = ds.split(split);
        samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| s.image.save_png(&sub.join(format!("{i:05}.png"))))
            .collect::<Result<()>>()?;
        for (i, s) in samples.iter().enumerate() {
            let mut row = vec![
                split.name().to_string(),
                s.class_id.to_string(),
                ds.class_names[s.class_id].clone(),
                format!("images/{}/{i:05}.png", split.name()),
                s.id.clone(),
            ];
            match &s.factors {
                Some(f) => row.extend([
                    f.base_hue.to_string(),
                    f.spot_count.to_string(),
                    f.spot_radius.to_string(),
                    f.spot_darkness.to_string(),
                    f.shape_eccentricity.to_string(),
                    f.seed.to_string(),
                ]),
                None => row.extend(std::iter::repeat_n(String::new(), 6)),
            }
            rows.push(row);
        }
    }
    let path = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(MANIFEST_HEADER).map_err(|e| csv_err(&path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| EclfError::io(&path, e))?;
    let meta = format!("preset = {}\nimage_size = {}\n", ds.preset, ds.image_size);
    let meta_path = dir.join("dataset.txt");
    fs::write(&meta_path, meta).map_err(|e| EclfError::io(&meta_path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> EclfError {
    EclfError::Dataset(format!("{}: {e}", path.display()))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("dataset.txt");
    let meta = fs::read_to_string(&meta_path).map_err(|e| EclfError::io(&meta_path, e))?;
    let mut preset = None;
    let mut size = None;
    for line in meta.lines() {
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "preset" => preset = Some(v.trim().parse::<Preset>().map_err(EclfError::Dataset)?),
                "image_size" => size = v.trim().parse::<usize>().ok(),
                _ => {}
            }
        }
    }
    let (preset, image_size) = match (preset, size) {
        (Some(p), Some(s)) => (p, s),
        _ => return Err(EclfError::Dataset(format!("{} lacks preset or image_size", meta_path.display()))),
    };
    let path = dir.join(MANIFEST);
    let mut r = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut ds = Dataset {
        preset,
        class_names: Vec::new(),
        image_size,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let bad = |line: usize, what: &str| EclfError::Dataset(format!("{} row {line}: bad {what}", path.display()));
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(&path, e))?;
        if rec.len() != MANIFEST_HEADER.len() {
            return Err(bad(line + 2, "column count"));
        }
        let split = Split::parse(&rec[0]).ok_or_else(|| bad(line + 2, "split"))?;
        let class_id: usize = rec[1].parse().map_err(|_| bad(line + 2, "class_id"))?;
        if ds.class_names.len() <= class_id {
            ds.class_names.resize(class_id + 1, String::new());
        }
        ds.class_names[class_id] = rec[2].to_string();
        let factors = if rec[5].is_empty() {
            None
        } else {
            let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(line + 2, MANIFEST_HEADER[i]));
            let f = FactorRecord {
                base_hue: num(5)?,
                spot_count: rec[6].parse().map_err(|_| bad(line + 2, "spot_count"))?,
                spot_radius: num(7)?,
                spot_darkness: num(8)?,
                shape_eccentricity: num(9)?,
                seed: rec[10].parse().map_err(|_| bad(line + 2, "seed"))?,
            };
            f.validate()?;
            Some(f)
        };
        let image = Image::load_png(&dir.join(&rec[3]), Some(image_size))?;
        let sample = LabeledSample {
            image,
            class_id,
            factors,
            id: rec[4].to_string(),
        };
        match split {
            Split::Train => ds.train.push(sample),
            Split::Val => ds.val.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    if ds.class_names.iter().any(|n| n.is_empty()) || ds.class_names.len() < 2 {
        return Err(EclfError::Dataset(format!("{} does not describe at least two classes", path.display())));
    }
    Ok(ds)
}
