//! Synthetic two-hemisphere phantoms with one-sided lesions, and dataset files.
//!
//! Each hemisphere is a stack of concentric, slightly wobbly ellipses (white
//! matter core, grey matter ring, CSF rim) on a zero background. The left half
//! is drawn and mirrored, so a lesion-free, noise-free phantom is exactly
//! symmetric about the vertical midline. Lesions turn white matter into grey
//! matter on one side only and darken it.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kv::{parse_size, KvText};
use crate::params::mix_seed;
use crate::tensor::{io as tio, Tensor};

pub const BACKGROUND: u8 = 0;
pub const CSF: u8 = 1;
pub const GREY_MATTER: u8 = 2;
pub const WHITE_MATTER: u8 = 3;
pub const NUM_CLASSES: usize = 4;

/// Intensity change inside a lesion.
pub const LESION_SHIFT: f64 = -0.25;
/// Attempts before giving up on a class-complete phantom or a lesion site.
const MAX_RETRIES: usize = 64;

const BASE_INTENSITY: [f64; NUM_CLASSES] = [0.0, 0.25, 0.55, 0.85];

/// A disc of white matter relabelled as grey matter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lesion {
    pub row: usize,
    pub col: usize,
    pub radius: usize,
}

impl Lesion {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        let dr = r as i64 - self.row as i64;
        let dc = c as i64 - self.col as i64;
        dr * dr + dc * dc <= (self.radius * self.radius) as i64
    }

    /// Pixels of the disc clipped to an `h x w` grid, row-major.
    pub fn pixels(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let r0 = self.row.saturating_sub(self.radius);
        let c0 = self.col.saturating_sub(self.radius);
        let mut out = Vec::new();
        for r in r0..(self.row + self.radius + 1).min(h) {
            for c in c0..(self.col + self.radius + 1).min(w) {
                if self.contains(r, c) {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

impl fmt::Display for Lesion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.row, self.col, self.radius)
    }
}

impl FromStr for Lesion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let p: Vec<&str> = s.trim().split(':').collect();
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|e| Error::config(format!("lesion {s:?}: {e}")))
        };
        match p.as_slice() {
            [r, c, rad] => Ok(Lesion {
                row: num(r)?,
                col: num(c)?,
                radius: num(rad)?,
            }),
            _ => Err(Error::config(format!("lesion {s:?} is not row:col:radius"))),
        }
    }
}

/// Random lesion draw: a count and radius range, both inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LesionParams {
    pub min_count: usize,
    pub max_count: usize,
    pub min_radius: usize,
    pub max_radius: usize,
}

impl Default for LesionParams {
    fn default() -> Self {
        Self {
            min_count: 0,
            max_count: 2,
            min_radius: 2,
            max_radius: 4,
        }
    }
}

impl LesionParams {
    pub const NONE: LesionParams = LesionParams {
        min_count: 0,
        max_count: 0,
        min_radius: 1,
        max_radius: 1,
    };

    pub fn validate(&self) -> Result<()> {
        if self.min_count > self.max_count || self.min_radius > self.max_radius || self.min_radius == 0 {
            return Err(Error::config(format!("bad lesion range {self}")));
        }
        Ok(())
    }
}

/// Written as `counts/radii`, e.g. `0-2/2-4`.
impl fmt::Display for LesionParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-{}/{}-{}",
            self.min_count, self.max_count, self.min_radius, self.max_radius
        )
    }
}

impl FromStr for LesionParams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("lesion spec {s:?} is not MIN-MAX/RMIN-RMAX"));
        let range = |v: &str| -> Result<(usize, usize)> {
            let (a, b) = v.split_once('-').unwrap_or((v, v));
            Ok((
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            ))
        };
        let (counts, radii) = s.split_once('/').ok_or_else(bad)?;
        let (min_count, max_count) = range(counts)?;
        let (min_radius, max_radius) = range(radii)?;
        let p = LesionParams {
            min_count,
            max_count,
            min_radius,
            max_radius,
        };
        p.validate()?;
        Ok(p)
    }
}

/// How lesions are chosen for one phantom.
#[derive(Clone, Debug, PartialEq)]
pub enum LesionPlan {
    Random(LesionParams),
    /// Fixed discs; only their white-matter pixels are relabelled.
    Explicit(Vec<Lesion>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Row-major class per pixel.
    pub label: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub lesions: Vec<Lesion>,
}

impl Phantom {
    pub fn label_at(&self, r: usize, c: usize) -> u8 {
        self.label[r * self.width + c]
    }

    /// Pixels whose label differs from the label of their mirror.
    pub fn asymmetric_pixels(&self) -> Vec<(usize, usize)> {
        let w = self.width;
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..w {
                if self.label_at(r, c) != self.label_at(r, w - 1 - c) {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

/// Shape of one hemisphere, drawn once per phantom.
struct Hemisphere {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    wobble: f64,
    lobes: f64,
    phase: f64,
    csf: f64,
    grey: f64,
    intensity: [f64; NUM_CLASSES],
    shading: f64,
}

impl Hemisphere {
    fn draw(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let mut intensity = BASE_INTENSITY;
        for v in intensity.iter_mut().skip(1) {
            *v += rng.random_range(-0.03..0.03);
        }
        Self {
            cy: hf / 2.0 + rng.random_range(-0.03..0.03) * hf,
            cx: wf / 4.0 + rng.random_range(-0.015..0.015) * wf,
            ry: hf * rng.random_range(0.38..0.43),
            rx: wf * rng.random_range(0.205..0.225),
            wobble: rng.random_range(0.0..0.06),
            lobes: rng.random_range(3..6) as f64,
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            csf: rng.random_range(0.14..0.18),
            grey: rng.random_range(0.22..0.28),
            intensity,
            shading: rng.random_range(0.0..0.05),
        }
    }

    fn class_at(&self, r: usize, c: usize) -> u8 {
        let dy = (r as f64 + 0.5 - self.cy) / self.ry;
        let dx = (c as f64 + 0.5 - self.cx) / self.rx;
        let theta = dy.atan2(dx);
        let rho = (dy * dy + dx * dx).sqrt() * (1.0 + self.wobble * (self.lobes * theta + self.phase).cos());
        if rho > 1.0 {
            BACKGROUND
        } else if rho > 1.0 - self.csf {
            CSF
        } else if rho > 1.0 - self.csf - self.grey {
            GREY_MATTER
        } else {
            WHITE_MATTER
        }
    }

    fn intensity_at(&self, class: u8, r: usize, h: usize) -> f64 {
        let t = r as f64 / h as f64;
        self.intensity[class as usize] * (1.0 + self.shading * (std::f64::consts::PI * t).sin())
    }
}

fn check_dims(h: usize, w: usize, noise_sigma: f64) -> Result<()> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::config(format!(
            "phantom size {h}x{w} must be positive multiples of 32"
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::config(format!(
            "noise sigma {noise_sigma} must be finite and >= 0"
        )));
    }
    Ok(())
}

/// Generates one phantom; pure in its arguments.
pub fn generate_phantom(seed: u64, h: usize, w: usize, noise_sigma: f64, lesions: &LesionPlan) -> Result<Phantom> {
    check_dims(h, w, noise_sigma)?;
    if let LesionPlan::Random(p) = lesions {
        p.validate()?;
    }
    for attempt in 0..MAX_RETRIES {
        let s = if attempt == 0 {
            seed
        } else {
            mix_seed(seed, &format!("retry{attempt}"))
        };
        let p = draw_phantom(s, h, w, noise_sigma, lesions)?;
        let mut seen = [false; NUM_CLASSES];
        p.label.iter().for_each(|&l| seen[l as usize] = true);
        if seen.iter().all(|&s| s) {
            return Ok(p);
        }
    }
    Err(Error::precondition(format!(
        "no class-complete {h}x{w} phantom after {MAX_RETRIES} draws"
    )))
}

fn draw_phantom(seed: u64, h: usize, w: usize, noise_sigma: f64, plan: &LesionPlan) -> Result<Phantom> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hemi = Hemisphere::draw(&mut rng, h, w);
    let half = w / 2;
    let mut label = vec![BACKGROUND; h * w];
    let mut image = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..half {
            let k = hemi.class_at(r, c);
            let v = hemi.intensity_at(k, r, h);
            for cc in [c, w - 1 - c] {
                label[r * w + cc] = k;
                image[r * w + cc] = v;
            }
        }
    }

    let lesions = match plan {
        LesionPlan::Explicit(v) => v.clone(),
        LesionPlan::Random(p) => place_lesions(&mut rng, p, &label, h, w),
    };
    for l in &lesions {
        for (r, c) in l.pixels(h, w) {
            let i = r * w + c;
            if label[i] == WHITE_MATTER && label[r * w + (w - 1 - c)] == WHITE_MATTER {
                label[i] = GREY_MATTER;
                image[i] += LESION_SHIFT;
            }
        }
    }

    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::config(e.to_string()))?;
        image.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let image = Tensor::new(vec![1, h, w], image.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect())?;
    Ok(Phantom {
        image,
        label,
        height: h,
        width: w,
        lesions,
    })
}

/// Places discs fully inside white matter, all on one randomly chosen side.
fn place_lesions(rng: &mut ChaCha8Rng, p: &LesionParams, label: &[u8], h: usize, w: usize) -> Vec<Lesion> {
    let count = rng.random_range(p.min_count..=p.max_count);
    let right = rng.random_bool(0.5);
    let mut out: Vec<Lesion> = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = rng.random_range(p.min_radius..=p.max_radius);
        for _ in 0..MAX_RETRIES {
            let row = rng.random_range(0..h);
            let col = rng.random_range(0..w / 2);
            let col = if right { w - 1 - col } else { col };
            let cand = Lesion { row, col, radius };
            let px = cand.pixels(h, w);
            let full = px.len() == cand_area(radius);
            let inside = px.iter().all(|&(r, c)| label[r * w + c] == WHITE_MATTER);
            let apart = out.iter().all(|o| px.iter().all(|&(r, c)| !o.contains(r, c)));
            if full && inside && apart {
                out.push(cand);
                break;
            }
        }
    }
    out
}

fn cand_area(radius: usize) -> usize {
    let r = radius as i64;
    (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .count()
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub lesions: LesionParams,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            n_samples: 240,
            height: 64,
            width: 64,
            seed: 0,
            noise_sigma: 0.02,
            lesions: LesionParams::default(),
            split: [200.0 / 240.0, 40.0 / 240.0, 0.0],
        }
    }
}

const FORMAT_TAG: &str = "pcmamba-phantoms-1";

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        check_dims(self.height, self.width, self.noise_sigma)?;
        self.lesions.validate()?;
        if self.n_samples == 0 {
            return Err(Error::config("n_samples must be at least 1"));
        }
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions {:?} must be in [0,1] and sum to 1",
                self.split
            )));
        }
        Ok(())
    }

    pub fn sample_seed(&self, index: usize) -> u64 {
        mix_seed(self.seed, &format!("sample{index}"))
    }

    pub fn generate(&self, index: usize) -> Result<Phantom> {
        generate_phantom(
            self.sample_seed(index),
            self.height,
            self.width,
            self.noise_sigma,
            &LesionPlan::Random(self.lesions),
        )
    }

    /// Seeded assignment of sample indices to train / val / test.
    ///
    /// Train and validation sizes are rounded to the nearest integer; the test
    /// split takes the remainder.
    pub fn split_indices(&self) -> Split {
        let n = self.n_samples;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(self.seed, "split")));
        let n_train = ((self.split[0] * n as f64).round() as usize).min(n);
        let n_val = ((self.split[1] * n as f64).round() as usize).min(n - n_train);
        let mut train = idx[..n_train].to_vec();
        let mut val = idx[n_train..n_train + n_val].to_vec();
        let mut test = idx[n_train + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Split { train, val, test }
    }

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("format", FORMAT_TAG);
        kv.set("n_samples", self.n_samples);
        kv.set("size", format!("{}x{}", self.height, self.width));
        kv.set("seed", self.seed);
        kv.set("noise_sigma", self.noise_sigma);
        kv.set("lesions", self.lesions);
        kv.set("split_train", self.split[0]);
        kv.set("split_val", self.split[1]);
        kv.set("split_test", self.split[2]);
        kv
    }

    pub fn from_kv(kv: &KvText) -> Result<Self> {
        let fmt: String = kv.require("format")?;
        if fmt != FORMAT_TAG {
            return Err(Error::Format(format!("manifest format {fmt:?}, expected {FORMAT_TAG}")));
        }
        let (height, width) = parse_size(&kv.require::<String>("size")?)?;
        let m = Self {
            n_samples: kv.require("n_samples")?,
            height,
            width,
            seed: kv.require("seed")?,
            noise_sigma: kv.require("noise_sigma")?,
            lesions: kv.require("lesions")?,
            split: [
                kv.require("split_train")?,
                kv.require("split_val")?,
                kv.require("split_test")?,
            ],
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// A manifest and its generated (or loaded) samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Phantom>,
}

impl Dataset {
    pub fn generate(manifest: &DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        let samples = (0..manifest.n_samples)
            .map(|i| manifest.generate(i))
            .collect::<Result<_>>()?;
        Ok(Self {
            manifest: manifest.clone(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self) -> Split {
        self.manifest.split_indices()
    }
}

fn image_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("img_{i:05}.pctn"))
}

fn label_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("lbl_{i:05}.pctn"))
}

/// Writes `manifest.txt` plus one image and one label file per sample.
pub fn write_dataset(data: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut kv = data.manifest.to_kv();
    for (i, s) in data.samples.iter().enumerate() {
        if !s.lesions.is_empty() {
            let v: Vec<String> = s.lesions.iter().map(|l| l.to_string()).collect();
            kv.set(&format!("lesions.{i}"), v.join(" "));
        }
    }
    fs::write(dir.join("manifest.txt"), kv.render())?;
    for (i, s) in data.samples.iter().enumerate() {
        tio::save(&s.image, image_path(dir, i))?;
        let lbl = Tensor::new(vec![s.height, s.width], s.label.iter().map(|&l| l as f32).collect())?;
        tio::save(&lbl, label_path(dir, i))?;
    }
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let kv = KvText::parse(&fs::read_to_string(dir.join("manifest.txt"))?)?;
    let manifest = DatasetManifest::from_kv(&kv)?;
    let (h, w) = (manifest.height, manifest.width);
    let mut samples = Vec::with_capacity(manifest.n_samples);
    for i in 0..manifest.n_samples {
        let image: Tensor<f32> = tio::load(image_path(dir, i))?;
        if image.shape() != [1, h, w] {
            return Err(Error::Format(format!("image {i} has shape {:?}", image.shape())));
        }
        let lbl: Tensor<f32> = tio::load(label_path(dir, i))?;
        if lbl.shape() != [h, w] {
            return Err(Error::Format(format!("label {i} has shape {:?}", lbl.shape())));
        }
        let label = lbl
            .data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..NUM_CLASSES as f32).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Format(format!("label {i} holds non-class value {v}")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        let lesions = match kv.get(&format!("lesions.{i}")) {
            Some(s) => s.split_whitespace().map(str::parse).collect::<Result<Vec<Lesion>>>()?,
            None => Vec::new(),
        };
        samples.push(Phantom {
            image,
            label,
            height: h,
            width: w,
            lesions,
        });
    }
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests;
