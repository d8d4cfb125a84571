//! Synthetic segmentation data, non-IID partitioning, and dataset IO.
//!
//! Images are lesion-like: one or more soft-shaded elliptical shapes on a
//! gently sloped background, plus Gaussian pixel noise. The ground-truth
//! mask is the exact clean-shape indicator, so labels are noise-free even
//! when images are not.

pub mod pgm;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// Grayscale image, row-major `h*w` floats in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn from_bytes(w: usize, h: usize, bytes: &[u8]) -> Image {
        Image { h, w, pixels: bytes.iter().map(|&b| b as f32 / 255.0).collect() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

/// Per-pixel class labels, row-major `h*w`, values in `{0..num_classes-1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    /// Fraction of pixels with a nonzero label.
    pub fn foreground_fraction(&self) -> f64 {
        let fg = self.labels.iter().filter(|&&l| l != 0).count();
        fg as f64 / self.labels.len() as f64
    }
}

/// Foreground shape family; the axis along which clients are skewed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Style {
    Blob,
    Ring,
    MultiBlob,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Blob, Style::Ring, Style::MultiBlob];

    pub fn parse(s: &str) -> Result<Style> {
        match s {
            "blob" => Ok(Style::Blob),
            "ring" => Ok(Style::Ring),
            "multiblob" => Ok(Style::MultiBlob),
            other => Err(Error::InvalidConfig(format!(
                "unknown style `{other}` (expected blob, ring, or multiblob)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Style::Blob => "blob",
            Style::Ring => "ring",
            Style::MultiBlob => "multiblob",
        }
    }
}

/// One dataset element with its generating style (used for skewed splits).
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub mask: Mask,
    pub style: Style,
}

/// How a dataset is divided between the server's public set and clients.
#[derive(Debug, Clone)]
pub struct PartitionSpec {
    pub public_count: usize,
    pub client_counts: Vec<usize>,
    /// 0 = IID, 1 = every client sees only its preferred style.
    pub noniid_skew: f64,
    /// Train/val/test fractions; must sum to 1.
    pub ratios: (f64, f64, f64),
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.public_count == 0 {
            return Err(Error::InvalidConfig("public_count must be >= 1".into()));
        }
        if self.client_counts.is_empty() || self.client_counts.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig("client counts must all be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noniid_skew) {
            return Err(Error::InvalidConfig(format!(
                "noniid_skew {} outside [0, 1]",
                self.noniid_skew
            )));
        }
        let (a, b, c) = self.ratios;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "split ratios {a}:{b}:{c} must be nonnegative and sum to 1"
            )));
        }
        Ok(())
    }
}

/// Index-based dataset assignment (indices into the source sample list).
#[derive(Debug, Clone)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub public: Vec<usize>,
    pub clients: Vec<ClientSplit>,
}

/// Generate `n` image/mask pairs of one style. Deterministic per seed;
/// every mask's foreground fraction lands in [0.05, 0.6] by construction
/// (out-of-range draws are resampled from a derived stream).
pub fn generate_synthetic(
    n: usize,
    size: usize,
    style: Style,
    noise_sd: f64,
    seed: u64,
) -> Result<Vec<(Image, Mask)>> {
    if size < 8 || size % 2 != 0 {
        return Err(Error::InvalidSize(format!("size {size} must be even and >= 8")));
    }
    if !(0.0..=1.0).contains(&noise_sd) {
        return Err(Error::InvalidSize(format!("noise_sd {noise_sd} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut pair = None;
        for attempt in 0..64u64 {
            let mut rng = derive_rng(seed, "gen", &[style as u64, i as u64, attempt]);
            let candidate = render(size, style, noise_sd, &mut rng);
            let frac = candidate.1.foreground_fraction();
            if (0.05..=0.6).contains(&frac) {
                pair = Some(candidate);
                break;
            }
        }
        // The shape parameter ranges make rejection rare; 64 misses in a
        // row would mean the generator itself is broken.
        out.push(pair.ok_or_else(|| {
            Error::InvalidSize(format!("could not place a {} shape at size {size}", style.name()))
        })?);
    }
    Ok(out)
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ra: f64,
    rb: f64,
    rot: f64,
}

impl Ellipse {
    /// Squared elliptical radius of the point; <= 1 means inside.
    fn r2(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (sin, cos) = self.rot.sin_cos();
        let u = (dx * cos + dy * sin) / self.ra;
        let v = (-dx * sin + dy * cos) / self.rb;
        u * u + v * v
    }
}

fn render(size: usize, style: Style, noise_sd: f64, rng: &mut ChaCha8Rng) -> (Image, Mask) {
    let s = size as f64;
    // Shape geometry first, then background, then noise, so the mask is
    // fixed before any intensity sampling.
    let (ellipses, inner): (Vec<Ellipse>, f64) = match style {
        Style::Blob => (
            vec![Ellipse {
                cy: rng.gen_range(0.38..0.62) * s,
                cx: rng.gen_range(0.38..0.62) * s,
                ra: rng.gen_range(0.16..0.30) * s,
                rb: rng.gen_range(0.16..0.30) * s,
                rot: rng.gen_range(0.0..std::f64::consts::PI),
            }],
            0.0,
        ),
        Style::Ring => {
            let ra = rng.gen_range(0.22..0.32) * s;
            (
                vec![Ellipse {
                    cy: rng.gen_range(0.40..0.60) * s,
                    cx: rng.gen_range(0.40..0.60) * s,
                    ra,
                    rb: ra * rng.gen_range(0.75..1.0),
                    rot: rng.gen_range(0.0..std::f64::consts::PI),
                }],
                rng.gen_range(0.45..0.60),
            )
        }
        Style::MultiBlob => {
            let k = rng.gen_range(2..=3);
            let shapes = (0..k)
                .map(|_| Ellipse {
                    cy: rng.gen_range(0.22..0.78) * s,
                    cx: rng.gen_range(0.22..0.78) * s,
                    ra: rng.gen_range(0.12..0.17) * s,
                    rb: rng.gen_range(0.12..0.17) * s,
                    rot: rng.gen_range(0.0..std::f64::consts::PI),
                })
                .collect();
            (shapes, 0.0)
        }
    };
    // Distractors: bright shapes rendered with the lesion's own shading
    // that never enter the mask. Their size bands deliberately collide
    // with other styles' foreground bands (a mid-sized solid blob is
    // foreground in MultiBlob images but a distractor here in Blob and
    // Ring images; a large annulus is foreground in Ring images but a
    // distractor in MultiBlob images), so one shared model is pulled
    // toward a compromise labeling while a per-style specialist is not.
    let distractors: Vec<(Ellipse, f64)> = match style {
        Style::Blob | Style::Ring => {
            let low = if style == Style::Blob { 0.10 } else { 0.115 };
            (0..2)
                .map(|_| {
                    let r = rng.gen_range(low..0.15) * s;
                    (
                        Ellipse {
                            cy: rng.gen_range(0.15..0.85) * s,
                            cx: rng.gen_range(0.15..0.85) * s,
                            ra: r,
                            rb: r * rng.gen_range(0.80..1.0),
                            rot: rng.gen_range(0.0..std::f64::consts::PI),
                        },
                        0.0,
                    )
                })
                .collect()
        }
        Style::MultiBlob => (0..2)
            .map(|_| {
                let ra = rng.gen_range(0.17..0.24) * s;
                (
                    Ellipse {
                        cy: rng.gen_range(0.20..0.80) * s,
                        cx: rng.gen_range(0.20..0.80) * s,
                        ra,
                        rb: ra * rng.gen_range(0.75..1.0),
                        rot: rng.gen_range(0.0..std::f64::consts::PI),
                    },
                    rng.gen_range(0.45..0.60),
                )
            })
            .collect(),
    };
    let contrast = rng.gen_range(0.30..0.45);
    let base = rng.gen_range(0.20..0.30);
    let gy = rng.gen_range(-0.08..0.08);
    let gx = rng.gen_range(-0.08..0.08);

    let mut labels = vec![0u8; size * size];
    let mut clean = vec![0.0f32; size * size];
    let inner2 = inner * inner;
    for y in 0..size {
        for x in 0..size {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            // Shading profile: a sharp step at the shape edge plus a smooth
            // interior gradient, so boundaries stay findable under noise.
            let mut shade = 0.0f64;
            let mut fg = false;
            for e in &ellipses {
                let r2 = e.r2(yf, xf);
                if r2 <= 1.0 && r2 >= inner2 {
                    fg = true;
                    let profile = if inner2 > 0.0 {
                        let t = (r2 - inner2) / (1.0 - inner2);
                        4.0 * t * (1.0 - t)
                    } else {
                        1.0 - r2
                    };
                    shade = shade.max(0.6 + 0.4 * profile);
                }
            }
            if fg {
                labels[y * size + x] = 1;
            }
            for (e, din) in &distractors {
                let r2 = e.r2(yf, xf);
                let din2 = din * din;
                if r2 <= 1.0 && r2 >= din2 {
                    let profile = if din2 > 0.0 {
                        let t = (r2 - din2) / (1.0 - din2);
                        4.0 * t * (1.0 - t)
                    } else {
                        1.0 - r2
                    };
                    shade = shade.max(0.6 + 0.4 * profile);
                }
            }
            let bg = base + gx * (xf / s - 0.5) + gy * (yf / s - 0.5);
            clean[y * size + x] = (bg + contrast * shade) as f32;
        }
    }

    let noise = Normal::new(0.0, noise_sd.max(1e-12)).expect("valid sd");
    let pixels: Vec<f32> = clean
        .iter()
        .map(|&v| {
            let n = if noise_sd > 0.0 { noise.sample(rng) } else { 0.0 };
            (v + n as f32).clamp(0.0, 1.0)
        })
        .collect();

    (Image { h: size, w: size, pixels }, Mask { h: size, w: size, labels })
}

/// Largest-remainder apportionment of `n` into `weights.len()` buckets.
pub(crate) fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        let mut out = vec![0; weights.len()];
        if !weights.is_empty() {
            out[0] = n;
        }
        return out;
    }
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Split a dataset into a style-stratified public set and skewed client
/// train/val/test splits. Returns indices into `data`; assignments are
/// pairwise disjoint.
pub fn partition(data: &[Sample], spec: &PartitionSpec, seed: u64) -> Result<Partition> {
    spec.validate()?;
    let needed = spec.public_count + spec.client_counts.iter().sum::<usize>();
    if needed > data.len() {
        return Err(Error::InsufficientData { needed, available: data.len() });
    }

    // Per-style index pools, shuffled; BTreeMap keeps style order stable.
    let mut pools: BTreeMap<Style, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.iter().enumerate() {
        pools.entry(s.style).or_default().push(i);
    }
    let styles: Vec<Style> = pools.keys().copied().collect();
    for (si, pool) in pools.values_mut().enumerate() {
        pool.shuffle(&mut derive_rng(seed, "pool", &[si as u64]));
    }

    // Public set: round-robin across styles so the server sees all of them.
    let mut public = Vec::with_capacity(spec.public_count);
    let mut cursor = 0;
    while public.len() < spec.public_count {
        let style = styles[cursor % styles.len()];
        cursor += 1;
        if let Some(idx) = pools.get_mut(&style).unwrap().pop() {
            public.push(idx);
        }
        if pools.values().all(|p| p.is_empty()) {
            break;
        }
    }

    // Clients: each slot draws a style from the skewed distribution, then
    // an image from that style's remaining pool.
    let mut clients = Vec::with_capacity(spec.client_counts.len());
    for (c, &count) in spec.client_counts.iter().enumerate() {
        let mut rng = derive_rng(seed, "assign", &[c as u64]);
        let preferred = c % styles.len();
        let weights: Vec<f64> = (0..styles.len())
            .map(|si| {
                let uniform = (1.0 - spec.noniid_skew) / styles.len() as f64;
                if si == preferred {
                    spec.noniid_skew + uniform
                } else {
                    uniform
                }
            })
            .collect();

        let mut items = Vec::with_capacity(count);
        for _ in 0..count {
            let open: Vec<usize> =
                (0..styles.len()).filter(|&si| !pools[&styles[si]].is_empty()).collect();
            if open.is_empty() {
                return Err(Error::InsufficientData { needed, available: data.len() });
            }
            let total: f64 = open.iter().map(|&si| weights[si]).sum();
            let si = if total <= 0.0 {
                open[0]
            } else {
                let mut draw = rng.gen_range(0.0..total);
                let mut chosen = open[open.len() - 1];
                for &si in &open {
                    if draw < weights[si] {
                        chosen = si;
                        break;
                    }
                    draw -= weights[si];
                }
                chosen
            };
            items.push(pools.get_mut(&styles[si]).unwrap().pop().unwrap());
        }

        let counts = apportion(items.len(), &[spec.ratios.0, spec.ratios.1, spec.ratios.2]);
        let val_end = counts[0] + counts[1];
        clients.push(ClientSplit {
            train: items[..counts[0]].to_vec(),
            val: items[counts[0]..val_end].to_vec(),
            test: items[val_end..].to_vec(),
        });
    }

    Ok(Partition { public, clients })
}

/// Load every `img_*.pgm` / `mask_*.pgm` pair from a directory, sorted by
/// file name. An empty (or pair-free) directory yields an empty dataset.
pub fn load_pgm_dataset(dir: &Path, num_classes: usize) -> Result<Vec<(Image, Mask)>> {
    let mut images = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) if n.ends_with(".pgm") => n.to_string(),
            _ => continue,
        };
        let stem = name.trim_end_matches(".pgm");
        if let Some(key) = stem.strip_prefix("img_") {
            images.insert(key.to_string(), path);
        } else if let Some(key) = stem.strip_prefix("mask_") {
            masks.insert(key.to_string(), path);
        }
    }
    for key in images.keys() {
        if !masks.contains_key(key) {
            return Err(Error::MissingPair(format!("mask_{key}.pgm")));
        }
    }
    for key in masks.keys() {
        if !images.contains_key(key) {
            return Err(Error::MissingPair(format!("img_{key}.pgm")));
        }
    }

    let mut out = Vec::with_capacity(images.len());
    for (key, img_path) in &images {
        let (iw, ih, ibytes) = pgm::read_pgm(img_path)?;
        let (mw, mh, mbytes) = pgm::read_pgm(&masks[key])?;
        if (iw, ih) != (mw, mh) {
            return Err(Error::ShapeMismatch(format!(
                "pair {key}: image {iw}x{ih} vs mask {mw}x{mh}"
            )));
        }
        if let Some(&bad) = mbytes.iter().find(|&&b| b as usize >= num_classes) {
            return Err(Error::LabelOutOfRange { label: bad as usize, num_classes });
        }
        out.push((Image::from_bytes(iw, ih, &ibytes), Mask { h: mh, w: mw, labels: mbytes }));
    }
    Ok(out)
}

/// Write one pair as `img_<k>.pgm` / `mask_<k>.pgm` (zero-padded index).
pub fn save_pair(dir: &Path, index: usize, image: &Image, mask: &Mask) -> Result<()> {
    pgm::write_pgm(&dir.join(format!("img_{index:04}.pgm")), image.w, image.h, &image.to_bytes())?;
    pgm::write_pgm(&dir.join(format!("mask_{index:04}.pgm")), mask.w, mask.h, &mask.labels)?;
    Ok(())
}
