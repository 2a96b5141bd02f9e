//! Seeded synthetic anomaly-detection sets and their on-disk layout.
//!
//! Each category is a texture made of two sinusoids plus pixel noise.
//! Anomalous images carry one rectangular or elliptical defect whose support
//! is the mask. The target split uses its own categories and applies a
//! brightness/frequency/noise shift to every image.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PilotError, Result};
use crate::numerics::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub brightness: f64,
    pub frequency_scale: f64,
    pub noise_std: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            brightness: 0.15,
            frequency_scale: 1.6,
            noise_std: 0.04,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataGenConfig {
    pub n_categories_aux: usize,
    pub n_categories_target: usize,
    pub images_per_category: usize,
    pub anomaly_fraction: f64,
    pub height: usize,
    pub width: usize,
    pub defect_min: usize,
    pub defect_max: usize,
    pub noise_std: f64,
    pub shift: ShiftConfig,
    pub seed: u64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            n_categories_aux: 4,
            n_categories_target: 4,
            images_per_category: 100,
            anomaly_fraction: 0.5,
            height: 32,
            width: 32,
            defect_min: 8,
            defect_max: 16,
            noise_std: 0.03,
            shift: ShiftConfig::default(),
            seed: 7,
        }
    }
}

impl DataGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.anomaly_fraction) {
            return Err(PilotError::config("anomaly fraction must lie in [0, 1]"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(PilotError::config("image size must be positive"));
        }
        if self.defect_min == 0 || self.defect_min > self.defect_max {
            return Err(PilotError::config("defect size range must satisfy 1 <= min <= max"));
        }
        if self.defect_max > self.height.min(self.width) {
            return Err(PilotError::config("defect does not fit inside the image"));
        }
        if self.images_per_category == 0 {
            return Err(PilotError::config("images per category must be positive"));
        }
        if self.noise_std < 0.0 || self.shift.noise_std < 0.0 {
            return Err(PilotError::config("noise std must be non-negative"));
        }
        if !(self.shift.frequency_scale > 0.0) {
            return Err(PilotError::config("frequency multiplier must be positive"));
        }
        Ok(())
    }

    /// Category ids of a split; aux ids come first, target ids follow.
    pub fn category_ids(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Aux => 0..self.n_categories_aux,
            Split::Target => self.n_categories_aux..self.n_categories_aux + self.n_categories_target,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Aux,
    Target,
}

impl std::str::FromStr for Split {
    type Err = PilotError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aux" => Ok(Split::Aux),
            "target" => Ok(Split::Target),
            other => Err(PilotError::config(format!("unknown split '{other}' (aux|target)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// Row-major `H x W`, values in `[0, 1]`.
    pub image: Vec<f64>,
    pub label: bool,
    pub mask: Vec<bool>,
    pub category: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn categories(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.category).collect()
    }

    pub fn images(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.image.as_slice()).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            height: self.height,
            width: self.width,
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Label/mask consistency and pixel range.
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        for (i, r) in self.records.iter().enumerate() {
            if r.image.len() != n || r.mask.len() != n {
                return Err(PilotError::config(format!("record {i} has the wrong size")));
            }
            if r.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(PilotError::config(format!("record {i} has pixels outside [0, 1]")));
            }
            if r.label != r.mask.iter().any(|&m| m) {
                return Err(PilotError::config(format!("record {i}: label disagrees with mask")));
            }
        }
        Ok(())
    }
}

struct Texture {
    base: f64,
    waves: [(f64, f64, f64, f64); 2],
}

impl Texture {
    fn draw(rng: &mut RngStream) -> Self {
        let base = 0.35 + 0.3 * rng.uniform();
        let mut wave = || {
            let fx = 1.0 + 4.0 * rng.uniform();
            let fy = 1.0 + 4.0 * rng.uniform();
            let phase = std::f64::consts::TAU * rng.uniform();
            let amp = 0.06 + 0.08 * rng.uniform();
            (fx, fy, phase, amp)
        };
        Self {
            base,
            waves: [wave(), wave()],
        }
    }

    fn render(&self, h: usize, w: usize, brightness: f64, freq: f64, noise: f64, rng: &mut RngStream) -> Vec<f64> {
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
                let mut p = self.base + brightness;
                for &(fx, fy, phase, amp) in &self.waves {
                    p += amp * (std::f64::consts::TAU * freq * (fx * u + fy * v) + phase).sin();
                }
                p += noise * rng.normal();
                out.push(p.clamp(0.0, 1.0));
            }
        }
        out
    }
}

fn stamp_defect(img: &mut [f64], h: usize, w: usize, cfg: &DataGenConfig, rng: &mut RngStream) -> Vec<bool> {
    let span = cfg.defect_max - cfg.defect_min + 1;
    let dh = cfg.defect_min + rng.below(span);
    let dw = cfg.defect_min + rng.below(span);
    let y0 = rng.below(h - dh + 1);
    let x0 = rng.below(w - dw + 1);
    let ellipse = rng.uniform() < 0.5;
    let offset = if rng.uniform() < 0.5 { 0.5 } else { -0.5 };
    let (cy, cx) = (y0 as f64 + (dh as f64 - 1.0) / 2.0, x0 as f64 + (dw as f64 - 1.0) / 2.0);
    let (ry, rx) = (dh as f64 / 2.0, dw as f64 / 2.0);
    let mut mask = vec![false; h * w];
    for y in y0..y0 + dh {
        for x in x0..x0 + dw {
            let inside = !ellipse || {
                let (a, b) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                a * a + b * b <= 1.0
            };
            if inside {
                mask[y * w + x] = true;
                img[y * w + x] = (img[y * w + x] + offset).clamp(0.0, 1.0);
            }
        }
    }
    mask
}

fn gen_category(cfg: &DataGenConfig, split: Split, cat: usize) -> Vec<Record> {
    let (h, w) = (cfg.height, cfg.width);
    let texture = Texture::draw(&mut RngStream::named(cfg.seed, "category").substream(cat as u64));
    let (brightness, freq, noise) = match split {
        Split::Aux => (0.0, 1.0, cfg.noise_std),
        Split::Target => (
            cfg.shift.brightness,
            cfg.shift.frequency_scale,
            (cfg.noise_std.powi(2) + cfg.shift.noise_std.powi(2)).sqrt(),
        ),
    };
    let n = cfg.images_per_category;
    let n_anom = (cfg.anomaly_fraction * n as f64).round() as usize;
    let mut order_rng = RngStream::named(cfg.seed, "anomalous").substream(cat as u64);
    let mut is_anom = vec![false; n];
    for &i in order_rng.permutation(n).iter().take(n_anom) {
        is_anom[i] = true;
    }
    let base = RngStream::named(cfg.seed, "image").substream(cat as u64);
    (0..n)
        .map(|i| {
            let mut rng = base.substream(i as u64);
            let mut image = texture.render(h, w, brightness, freq, noise, &mut rng);
            let mask = if is_anom[i] {
                stamp_defect(&mut image, h, w, cfg, &mut rng)
            } else {
                vec![false; h * w]
            };
            Record {
                image,
                label: is_anom[i],
                mask,
                category: cat,
            }
        })
        .collect()
}

pub fn gen_dataset(cfg: &DataGenConfig, split: Split) -> Result<Dataset> {
    cfg.validate()?;
    let cats: Vec<usize> = cfg.category_ids(split).collect();
    if cats.is_empty() {
        return Err(PilotError::config("split has no categories"));
    }
    let per_cat: Vec<Vec<Record>> = cats.par_iter().map(|&c| gen_category(cfg, split, c)).collect();
    Ok(Dataset {
        height: cfg.height,
        width: cfg.width,
        records: per_cat.into_iter().flatten().collect(),
    })
}

fn write_pgm(path: &Path, w: usize, h: usize, values: impl Iterator<Item = u16>) -> Result<()> {
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for v in values {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| PilotError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| PilotError::io(path, e))
}

fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => PilotError::format(path, "listed in manifest but missing"),
        _ => PilotError::io(path, e),
    })?;
    let bad = |m: &str| PilotError::format(path, m.to_string());
    // header: magic, width, height, maxval, separated by whitespace
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 65535 {
        return Err(bad("expected maxval 65535"));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != 2 * w * h {
        return Err(bad("pixel data length does not match header"));
    }
    let values = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((w, h, values))
}

/// Writes `manifest.tsv`, `images/*.pgm` and `masks/*.pgm` under `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| PilotError::io(&p, e))?;
    }
    let mut manifest = String::from("file\ty\tcategory\n");
    for (i, r) in ds.records.iter().enumerate() {
        let name = format!("{i:05}.pgm");
        write_pgm(
            &dir.join("images").join(&name),
            ds.width,
            ds.height,
            r.image.iter().map(|&p| (p.clamp(0.0, 1.0) * 65535.0).round() as u16),
        )?;
        write_pgm(
            &dir.join("masks").join(&name),
            ds.width,
            ds.height,
            r.mask.iter().map(|&m| if m { 65535 } else { 0 }),
        )?;
        let _ = writeln!(manifest, "{name}\t{}\t{}", r.label as u8, r.category);
    }
    let p = dir.join("manifest.tsv");
    fs::write(&p, manifest).map_err(|e| PilotError::io(&p, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.tsv");
    let text = fs::read_to_string(&mpath).map_err(|e| PilotError::io(&mpath, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("file\ty\tcategory") {
        return Err(PilotError::format(&mpath, "missing header 'file\\ty\\tcategory'"));
    }
    let mut records = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad_row = || PilotError::format(&mpath, format!("row {}: expected file, y, category", no + 2));
        if cols.len() != 3 {
            return Err(bad_row());
        }
        let label = match cols[1] {
            "0" => false,
            "1" => true,
            _ => return Err(bad_row()),
        };
        let category: usize = cols[2].parse().map_err(|_| bad_row())?;
        let ipath = dir.join("images").join(cols[0]);
        let kpath = dir.join("masks").join(cols[0]);
        let (w, h, img) = read_pgm(&ipath)?;
        let (mw, mh, msk) = read_pgm(&kpath)?;
        if (mw, mh) != (w, h) {
            return Err(PilotError::format(&kpath, "mask size differs from image"));
        }
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => return Err(PilotError::format(&ipath, "image size differs from the rest")),
            _ => {}
        }
        let mask: Vec<bool> = msk.iter().map(|&v| v > 32767).collect();
        if label != mask.iter().any(|&m| m) {
            return Err(PilotError::format(&kpath, "mask disagrees with label"));
        }
        records.push(Record {
            image: img.iter().map(|&v| v as f64 / 65535.0).collect(),
            label,
            mask,
            category,
        });
    }
    let (height, width) = dims.ok_or_else(|| PilotError::format(&mpath, "manifest lists no images"))?;
    Ok(Dataset {
        height,
        width,
        records,
    })
}
