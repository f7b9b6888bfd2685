//! Procedural paired healthy/pathological phantoms and dataset files.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::bten::{find, read_bten, write_bten, BtenEntry};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Diffusivity of the explicit 5-point heat step used to smooth lesions.
pub const HEAT_KAPPA: f64 = 0.25;
/// Lesion placements tried before giving up.
pub const LESION_ATTEMPTS: usize = 100;

const STREAM_PHANTOM: u64 = 11;
const STREAM_LESION: u64 = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub image_side: usize,
    /// Inclusive range for the number of ellipses.
    pub n_ellipses: (usize, usize),
    /// One `[lo, hi]` band per tissue class; class `k` (1-based) uses band `k − 1`.
    pub intensity_bands: Vec<(f64, f64)>,
    pub texture_noise_sd: f64,
    pub background_level: f64,
    /// Width in pixels of the linear ramp across each ellipse boundary.
    pub edge_width: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_side: 64,
            n_ellipses: (3, 6),
            intensity_bands: vec![(0.25, 0.35), (0.5, 0.6), (0.75, 0.85)],
            texture_noise_sd: 0.02,
            background_level: 0.02,
            edge_width: 1.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.image_side < 8 {
            return bad(format!("image_side must be at least 8, got {}", self.image_side));
        }
        let (lo, hi) = self.n_ellipses;
        if lo == 0 || lo > hi {
            return bad(format!("invalid ellipse count range {lo}..={hi}"));
        }
        if self.intensity_bands.is_empty() {
            return bad("at least one intensity band is required".into());
        }
        let mut prev = self.background_level;
        if !(0.0..=1.0).contains(&prev) {
            return bad(format!("background_level {prev} outside [0, 1]"));
        }
        for &(blo, bhi) in &self.intensity_bands {
            if !(blo <= bhi && blo > prev && bhi <= 1.0) {
                return bad(format!(
                    "bands must be ordered, disjoint, above the background and inside [0, 1]; got [{blo}, {bhi}]"
                ));
            }
            prev = bhi;
        }
        if !(self.texture_noise_sd >= 0.0 && self.texture_noise_sd.is_finite()) {
            return bad(format!(
                "texture_noise_sd must be non-negative, got {}",
                self.texture_noise_sd
            ));
        }
        if !(self.edge_width > 0.0 && self.edge_width.is_finite()) {
            return bad(format!("edge_width must be positive, got {}", self.edge_width));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.intensity_bands.len() + 1
    }

    /// Reference intensity per class: the background level, then band centers.
    pub fn class_centers(&self) -> Vec<f64> {
        std::iter::once(self.background_level)
            .chain(self.intensity_bands.iter().map(|&(lo, hi)| 0.5 * (lo + hi)))
            .collect()
    }

    /// Index of the nearest class center; ties go to the lower class.
    pub fn nearest_class(&self, value: f64) -> usize {
        nearest(&self.class_centers(), value)
    }
}

fn nearest(centers: &[f64], value: f64) -> usize {
    let mut best = 0;
    for (k, c) in centers.iter().enumerate() {
        if (value - c).abs() < (value - centers[best]).abs() {
            best = k;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionSpec {
    /// Inclusive range of the seed blob radius in pixels.
    pub seed_blob_radius: (f64, f64),
    pub diffusion_iterations: usize,
    pub intensity_shift: f64,
    pub max_area_fraction: f64,
}

impl Default for LesionSpec {
    fn default() -> Self {
        Self {
            seed_blob_radius: (4.0, 9.0),
            diffusion_iterations: 10,
            intensity_shift: 0.3,
            max_area_fraction: 0.3,
        }
    }
}

impl LesionSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.seed_blob_radius;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("invalid lesion radius range [{lo}, {hi}]")));
        }
        if !(self.max_area_fraction > 0.0 && self.max_area_fraction <= 0.3) {
            return Err(Error::Config(format!(
                "max_area_fraction must lie in (0, 0.3], got {}",
                self.max_area_fraction
            )));
        }
        if !(-1.0..=1.0).contains(&self.intensity_shift) {
            return Err(Error::Config(format!(
                "intensity_shift must lie in [-1, 1], got {}",
                self.intensity_shift
            )));
        }
        Ok(())
    }
}

/// Healthy image `x_0`, its pathological counterpart `x_T`, and ground truth.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub healthy: Tensor,
    pub pathological: Tensor,
    /// 0/1 per pixel.
    pub lesion_mask: Tensor,
    /// Tissue class per pixel; 0 is background.
    pub label_map: Tensor,
}

impl PairedSample {
    /// Checks the pairing invariant: identical images off the lesion mask.
    pub fn check_pairing(&self) -> Result<()> {
        let ok = self
            .healthy
            .data()
            .iter()
            .zip(self.pathological.data())
            .zip(self.lesion_mask.data())
            .all(|((h, p), &m)| m != 0.0 || h.to_bits() == p.to_bits());
        if ok {
            Ok(())
        } else {
            Err(Error::Data(
                "healthy and pathological images differ off the lesion mask".into(),
            ))
        }
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Fraction of the pixel at `(x, y)` inside the ellipse, from a linear
    /// ramp on the first-order signed distance to the boundary.
    fn membership(&self, x: f64, y: f64, edge: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        let r = (u * u + v * v).sqrt();
        if r == 0.0 {
            return 1.0;
        }
        let grad = ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt() / r;
        let dist = (r - 1.0) / grad;
        (0.5 - dist / edge).clamp(0.0, 1.0)
    }
}

/// Nested soft-edged ellipses on a dark background. Returns the image and
/// its label map.
pub fn generate_phantom(rng: &mut RngStream, spec: &PhantomSpec) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let s = spec.image_side;
    let sf = s as f64;
    let (nlo, nhi) = spec.n_ellipses;
    let count = nlo + rng.below((nhi - nlo + 1) as u64) as usize;
    let n_tissue = spec.intensity_bands.len();
    let mid = 0.5 * (sf - 1.0);

    let angle = |rng: &mut RngStream| {
        let th = std::f64::consts::PI * rng.uniform();
        (th.cos(), th.sin())
    };
    let (cos, sin) = angle(rng);
    let outer = Ellipse {
        cx: mid + 0.03 * sf * rng.normal(),
        cy: mid + 0.03 * sf * rng.normal(),
        a: sf * rng.uniform_range(0.32, 0.44),
        b: sf * rng.uniform_range(0.32, 0.44),
        cos,
        sin,
    };
    let outer_class = 1 + rng.below(n_tissue as u64) as usize;
    let mut shapes = vec![(outer, outer_class)];
    for _ in 1..count {
        let (cos, sin) = angle(rng);
        let (ox, oy) = (shapes[0].0.cx, shapes[0].0.cy);
        let rad = 0.55 * rng.uniform().sqrt();
        let phi = 2.0 * std::f64::consts::PI * rng.uniform();
        let e = Ellipse {
            cx: ox + rad * shapes[0].0.a * phi.cos(),
            cy: oy + rad * shapes[0].0.b * phi.sin(),
            a: sf * rng.uniform_range(0.06, 0.2),
            b: sf * rng.uniform_range(0.06, 0.2),
            cos,
            sin,
        };
        let class = if n_tissue == 1 {
            1
        } else {
            let k = 1 + rng.below(n_tissue as u64 - 1) as usize;
            if k >= outer_class {
                k + 1
            } else {
                k
            }
        };
        shapes.push((e, class));
    }
    let levels: Vec<f64> = shapes
        .iter()
        .map(|&(_, class)| {
            let (lo, hi) = spec.intensity_bands[class - 1];
            rng.uniform_range(lo, hi)
        })
        .collect();

    // Each pixel belongs to the last shape covering at least half of it;
    // its blended intensity is kept within the inner half of that class's
    // nearest-center cell, so the noiseless image segments back to exactly
    // this label map and texture rarely pushes edges across.
    let centers = spec.class_centers();
    let cells: Vec<(f64, f64)> = (0..centers.len())
        .map(|k| {
            let c = centers[k];
            let lo = if k == 0 {
                f64::NEG_INFINITY
            } else {
                c - 0.25 * (c - centers[k - 1])
            };
            let hi = if k + 1 == centers.len() {
                f64::INFINITY
            } else {
                c + 0.25 * (centers[k + 1] - c)
            };
            (lo, hi)
        })
        .collect();
    let mut image = vec![spec.background_level; s * s];
    let mut labels = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64, y as f64);
            let m0 = shapes[0].0.membership(px, py, spec.edge_width);
            let mut v = spec.background_level * (1.0 - m0) + levels[0] * m0;
            let mut owner = if m0 >= 0.5 { shapes[0].1 } else { 0 };
            for (k, (e, class)) in shapes.iter().enumerate().skip(1) {
                let m = e.membership(px, py, spec.edge_width).min(m0);
                v = v * (1.0 - m) + levels[k] * m;
                if m >= 0.5 {
                    owner = *class;
                }
            }
            let (lo, hi) = cells[owner];
            image[y * s + x] = v.clamp(lo, hi).clamp(0.0, 1.0);
            labels[y * s + x] = owner as f64;
        }
    }
    if spec.texture_noise_sd > 0.0 {
        for v in &mut image {
            *v = (*v + spec.texture_noise_sd * rng.normal()).clamp(0.0, 1.0);
        }
    }
    Ok((Tensor::new(vec![s, s], image)?, Tensor::new(vec![s, s], labels)?))
}

fn heat_step(u: &[f64], side: usize) -> Vec<f64> {
    let at = |x: usize, y: usize| u[y * side + x];
    let mut out = vec![0.0; u.len()];
    for y in 0..side {
        for x in 0..side {
            let c = at(x, y);
            // Zero-flux boundary: missing neighbours mirror the centre.
            let w = if x > 0 { at(x - 1, y) } else { c };
            let e = if x + 1 < side { at(x + 1, y) } else { c };
            let n = if y > 0 { at(x, y - 1) } else { c };
            let s = if y + 1 < side { at(x, y + 1) } else { c };
            out[y * side + x] = c + HEAT_KAPPA * (w + e + n + s - 4.0 * c);
        }
    }
    out
}

/// Adds a smoothed blob lesion inside the foreground. Returns the
/// pathological image and the 0/1 lesion mask; pixels off the mask are
/// copied from `healthy` unchanged.
pub fn inject_lesion(
    rng: &mut RngStream,
    healthy: &Tensor,
    label_map: &Tensor,
    spec: &LesionSpec,
) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    healthy.ensure_same_shape(label_map, "inject_lesion")?;
    let shape = healthy.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Contract(format!("lesions need a square image, got {shape:?}")));
    }
    let side = shape[0];
    let fg: Vec<usize> = (0..side * side).filter(|&i| label_map.data()[i] != 0.0).collect();
    if fg.is_empty() {
        return Err(Error::Generation("image has no foreground to place a lesion in".into()));
    }
    let budget = spec.max_area_fraction * fg.len() as f64;
    let (rlo, rhi) = spec.seed_blob_radius;
    for _ in 0..LESION_ATTEMPTS {
        let center = fg[rng.below(fg.len() as u64) as usize];
        let (cx, cy) = ((center % side) as f64, (center / side) as f64);
        let r = rng.uniform_range(rlo, rhi);
        let mut u: Vec<f64> = (0..side * side)
            .map(|i| {
                let (x, y) = ((i % side) as f64, (i / side) as f64);
                if (x - cx).hypot(y - cy) <= r {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        for _ in 0..spec.diffusion_iterations {
            u = heat_step(&u, side);
        }
        let mask: Vec<bool> = (0..side * side)
            .map(|i| u[i] >= 0.5 && label_map.data()[i] != 0.0)
            .collect();
        let area = mask.iter().filter(|&&m| m).count();
        if area == 0 || area as f64 > budget {
            continue;
        }
        let mut path = healthy.data().to_vec();
        for i in 0..path.len() {
            if mask[i] {
                path[i] = (path[i] + spec.intensity_shift * u[i]).clamp(0.0, 1.0);
            }
        }
        let mask = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        return Ok((Tensor::new(shape.to_vec(), path)?, Tensor::new(shape.to_vec(), mask)?));
    }
    Err(Error::Generation(format!(
        "could not place a lesion within {:.1} pixels after {LESION_ATTEMPTS} attempts",
        budget
    )))
}

/// Generates one pair from its own seed.
pub fn generate_pair(seed: u64, phantom: &PhantomSpec, lesion: &LesionSpec) -> Result<PairedSample> {
    let mut rng = RngStream::new(seed, STREAM_PHANTOM);
    let (healthy, label_map) = generate_phantom(&mut rng, phantom)?;
    let mut rng = RngStream::new(seed, STREAM_LESION);
    let (pathological, lesion_mask) = inject_lesion(&mut rng, &healthy, &label_map, lesion)?;
    Ok(PairedSample {
        healthy,
        pathological,
        lesion_mask,
        label_map,
    })
}

/// Per-sample seed derived from the master seed (splitmix64 finalizer).
pub fn sample_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_id(index: usize) -> String {
    format!("sample_{index:05}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// 80/5/15 split from a 64-bit FNV-1a hash of the id.
pub fn split_of(id: &str) -> Split {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    match h % 100 {
        0..=79 => Split::Train,
        80..=84 => Split::Val,
        _ => Split::Test,
    }
}

pub fn sample_entries(sample: &PairedSample) -> Result<Vec<BtenEntry>> {
    let shape = sample.healthy.shape().to_vec();
    Ok(vec![
        BtenEntry::f64("healthy", &sample.healthy),
        BtenEntry::f64("pathological", &sample.pathological),
        BtenEntry::u8(
            "mask",
            shape.clone(),
            sample.lesion_mask.data().iter().map(|&v| v as u8).collect(),
        )?,
        BtenEntry::i32(
            "label",
            shape,
            sample.label_map.data().iter().map(|&v| v as i32).collect(),
        )?,
    ])
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub healthy_path: String,
    pub pathological_path: String,
    pub mask_path: String,
    pub label_path: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_HEADER: [&str; 6] = [
    "id",
    "healthy_path",
    "pathological_path",
    "mask_path",
    "label_path",
    "seed",
];

impl Manifest {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let ioerr = "writing to memory cannot fail";
        w.write_record(MANIFEST_HEADER).expect(ioerr);
        for r in &self.rows {
            w.write_record([
                r.id.as_str(),
                &r.healthy_path,
                &r.pathological_path,
                &r.mask_path,
                &r.label_path,
                &r.seed.to_string(),
            ])
            .expect(ioerr);
        }
        String::from_utf8(w.into_inner().expect(ioerr)).expect("csv output is UTF-8")
    }

    /// Parses manifest CSV text; errors name the offending line.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(text.as_bytes());
        let header = rd.headers().map_err(|e| Error::Data(format!("manifest header: {e}")))?;
        if header.iter().ne(MANIFEST_HEADER) {
            return Err(Error::Data(format!(
                "manifest header must be `{}`",
                MANIFEST_HEADER.join(",")
            )));
        }
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| Error::Data(format!("manifest: {e}")))?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != MANIFEST_HEADER.len() {
                return Err(Error::Data(format!(
                    "manifest line {line}: expected {} fields, found {}",
                    MANIFEST_HEADER.len(),
                    rec.len()
                )));
            }
            let seed = rec[5]
                .parse()
                .map_err(|_| Error::Data(format!("manifest line {line}: bad seed `{}`", &rec[5])))?;
            let row = ManifestRow {
                id: rec[0].to_string(),
                healthy_path: rec[1].to_string(),
                pathological_path: rec[2].to_string(),
                mask_path: rec[3].to_string(),
                label_path: rec[4].to_string(),
                seed,
            };
            if row.id.is_empty() {
                return Err(Error::Data(format!("manifest line {line}: empty id")));
            }
            if !seen.insert(row.id.clone()) {
                return Err(Error::Data(format!("manifest line {line}: duplicate id `{}`", row.id)));
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.csv");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse_csv(&text)
    }

    pub fn ids_in(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| split_of(&r.id) == split)
    }
}

/// Resolves `file#entry` references relative to a dataset directory.
pub struct SampleLoader {
    dir: PathBuf,
    cache: HashMap<PathBuf, Vec<BtenEntry>>,
}

impl SampleLoader {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            cache: HashMap::new(),
        }
    }

    pub fn tensor(&mut self, reference: &str) -> Result<Tensor> {
        let (file, entry) = reference
            .split_once('#')
            .ok_or_else(|| Error::Data(format!("reference `{reference}` lacks `#entry`")))?;
        let path = self.dir.join(file);
        if !self.cache.contains_key(&path) {
            let entries = read_bten(&path)?;
            self.cache.clear();
            self.cache.insert(path.clone(), entries);
        }
        find(&self.cache[&path], entry)?.to_tensor()
    }

    pub fn load(&mut self, row: &ManifestRow) -> Result<PairedSample> {
        let sample = PairedSample {
            healthy: self.tensor(&row.healthy_path)?,
            pathological: self.tensor(&row.pathological_path)?,
            lesion_mask: self.tensor(&row.mask_path)?,
            label_map: self.tensor(&row.label_path)?,
        };
        sample.check_pairing()?;
        Ok(sample)
    }
}

/// Writes `n` pairs as `sample_XXXXX.bten` files plus `manifest.csv`.
pub fn build_dataset(
    master_seed: u64,
    n: usize,
    phantom: &PhantomSpec,
    lesion: &LesionSpec,
    out_dir: &Path,
) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Contract("dataset size must be at least 1".into()));
    }
    phantom.validate()?;
    lesion.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows = (0..n)
        .into_par_iter()
        .map(|i| {
            let id = sample_id(i);
            let seed = sample_seed(master_seed, i as u64);
            let sample = generate_pair(seed, phantom, lesion)?;
            sample.check_pairing()?;
            let file = format!("{id}.bten");
            write_bten(out_dir.join(&file), &sample_entries(&sample)?)?;
            Ok(ManifestRow {
                healthy_path: format!("{file}#healthy"),
                pathological_path: format!("{file}#pathological"),
                mask_path: format!("{file}#mask"),
                label_path: format!("{file}#label"),
                id,
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { rows };
    let path = out_dir.join("manifest.csv");
    std::fs::write(&path, manifest.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Generates pairs in memory, in index order.
pub fn generate_pairs(
    master_seed: u64,
    n: usize,
    phantom: &PhantomSpec,
    lesion: &LesionSpec,
) -> Result<Vec<PairedSample>> {
    (0..n)
        .into_par_iter()
        .map(|i| generate_pair(sample_seed(master_seed, i as u64), phantom, lesion))
        .collect()
}
