//! Dataset ingestion and preparation: manifest CSV parsing, truncated
//! Gaussian score distributions, P.910 spatial information, stratified
//! splitting, and half-size generation.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::head::QualityDistribution;
use crate::numerics::{normal_cdf, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiClass {
    Low,
    High,
}

#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub image_ref: PathBuf,
    pub mos: f64,
    pub score_std: Option<f64>,
    pub distribution: Option<QualityDistribution>,
    pub si: Option<f64>,
    pub stratum: Option<(SiClass, usize)>,
    pub split: Option<Split>,
}

impl DatasetRecord {
    /// Target distribution for training: explicit p1..p5 wins, otherwise
    /// derived from (mos, std) via the truncated Gaussian.
    pub fn target_distribution(&self) -> Result<QualityDistribution> {
        if let Some(d) = self.distribution {
            return Ok(d);
        }
        match self.score_std {
            Some(std) => discretize_truncated_gaussian(self.mos, std),
            None => Err(Error::Param(format!(
                "{}: needs p1..p5 or std for training",
                self.image_ref.display()
            ))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<DatasetRecord>,
}

pub const MANIFEST_HEADER: [&str; 10] =
    ["path", "mos", "std", "p1", "p2", "p3", "p4", "p5", "si", "split"];

fn parse_opt_f64(field: &str, line: usize, what: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Parse(format!("line {line}: bad {what} value '{field}'")))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    {
        let headers = rdr
            .headers()
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let got: Vec<&str> = headers.iter().collect();
        if got != MANIFEST_HEADER {
            return Err(Error::Parse(format!(
                "{}: header {:?}, expected {:?}",
                path.display(),
                got,
                MANIFEST_HEADER
            )));
        }
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2; // 1-based, after header
        let row = row.map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
        let image_ref = PathBuf::from(&row[0]);
        if row[0].is_empty() {
            return Err(Error::Parse(format!("line {line}: empty path")));
        }
        if !seen.insert(image_ref.clone()) {
            return Err(Error::Parse(format!(
                "line {line}: duplicate image_ref '{}'",
                &row[0]
            )));
        }
        let mos: f64 = row[1]
            .parse()
            .map_err(|_| Error::Parse(format!("line {line}: bad mos '{}'", &row[1])))?;
        if !(1.0..=5.0).contains(&mos) {
            return Err(Error::Parse(format!(
                "line {line}: mos {mos} outside [1,5]"
            )));
        }
        let score_std = parse_opt_f64(&row[2], line, "std")?;
        if let Some(s) = score_std {
            if s <= 0.0 {
                return Err(Error::Parse(format!("line {line}: std {s} must be > 0")));
            }
        }
        let ps: Vec<Option<f64>> = (3..8)
            .map(|c| parse_opt_f64(&row[c], line, "p"))
            .collect::<Result<_>>()?;
        let n_present = ps.iter().filter(|p| p.is_some()).count();
        let distribution = match n_present {
            0 => None,
            5 => {
                let mut p = [0.0; 5];
                for (k, v) in ps.iter().enumerate() {
                    p[k] = v.unwrap();
                }
                let sum: f64 = p.iter().sum();
                if (sum - 1.0).abs() > 1e-3 {
                    return Err(Error::Parse(format!(
                        "line {line}: p1..p5 sum to {sum}, outside 1 +- 1e-3"
                    )));
                }
                for v in &mut p {
                    *v /= sum;
                }
                Some(QualityDistribution::new(p).map_err(|e| {
                    Error::Parse(format!("line {line}: {e}"))
                })?)
            }
            _ => {
                return Err(Error::Parse(format!(
                    "line {line}: p1..p5 must be all present or all absent"
                )))
            }
        };
        let si = parse_opt_f64(&row[8], line, "si")?;
        let split = match &row[9] {
            "" => None,
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            other => {
                return Err(Error::Parse(format!(
                    "line {line}: split '{other}' must be train or test"
                )))
            }
        };
        records.push(DatasetRecord {
            image_ref,
            mos,
            score_std,
            distribution,
            si,
            stratum: None,
            split,
        });
    }
    Ok(Manifest { records })
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| {
        Error::io(path, std::io::Error::other(e.to_string()))
    })?;
    wtr.write_record(MANIFEST_HEADER)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    for r in &manifest.records {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let ps: Vec<String> = match r.distribution {
            Some(d) => d.p.iter().map(|p| format!("{p}")).collect(),
            None => vec![String::new(); 5],
        };
        let split = match r.split {
            Some(Split::Train) => "train",
            Some(Split::Test) => "test",
            None => "",
        };
        let row = vec![
            r.image_ref.display().to_string(),
            format!("{}", r.mos),
            opt(r.score_std),
            ps[0].clone(),
            ps[1].clone(),
            ps[2].clone(),
            ps[3].clone(),
            ps[4].clone(),
            opt(r.si),
            split.to_string(),
        ];
        wtr.write_record(&row)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Grade-bin edges: edge grades keep their full tail mass within [1,5].
const BIN_EDGES: [(f64, f64); 5] = [
    (1.0, 1.5),
    (1.5, 2.5),
    (2.5, 3.5),
    (3.5, 4.5),
    (4.5, 5.0),
];

/// Discretize a Gaussian(mu, sigma) truncated to [1,5] into the five
/// grade bins via normal-CDF differences, renormalized to sum 1.
pub fn discretize_truncated_gaussian(mu: f64, sigma: f64) -> Result<QualityDistribution> {
    if sigma <= 0.0 {
        return Err(Error::Param(format!("sigma {sigma} must be > 0")));
    }
    let mut p = [0.0; 5];
    for (i, (a, b)) in BIN_EDGES.iter().enumerate() {
        p[i] = normal_cdf((b - mu) / sigma) - normal_cdf((a - mu) / sigma);
    }
    let sum: f64 = p.iter().sum();
    if sum <= 0.0 {
        // mass underflow far outside [1,5]; collapse to the nearest grade
        let grade = (mu.round().clamp(1.0, 5.0)) as usize;
        return QualityDistribution::one_hot(grade);
    }
    for v in &mut p {
        *v /= sum;
    }
    QualityDistribution::new(p)
}

/// Rec. 601 luminance.
fn luminance(image: &Tensor) -> Vec<f64> {
    let (h, w) = (image.shape[0], image.shape[1]);
    let mut y = vec![0.0; h * w];
    for p in 0..h * w {
        let r = image.data[p * 3];
        let g = image.data[p * 3 + 1];
        let b = image.data[p * 3 + 2];
        y[p] = 0.299 * r + 0.587 * g + 0.114 * b;
    }
    y
}

/// P.910 spatial information: population std of the 3x3 Sobel gradient
/// magnitude over the image interior (no border padding).
pub fn spatial_information(image: &Tensor) -> Result<f64> {
    if image.shape.len() != 3 || image.shape[2] != 3 {
        return Err(Error::Format(format!(
            "spatial_information: expected [H,W,3], got {:?}",
            image.shape
        )));
    }
    let (h, w) = (image.shape[0], image.shape[1]);
    if h < 3 || w < 3 {
        return Err(Error::Param(format!(
            "spatial_information: image {h}x{w} smaller than 3x3"
        )));
    }
    let y = luminance(image);
    let mut mags = Vec::with_capacity((h - 2) * (w - 2));
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let at = |dr: isize, dc: isize| {
                y[((r as isize + dr) as usize) * w + (c as isize + dc) as usize]
            };
            let gx = -at(-1, -1) + at(-1, 1) - 2.0 * at(0, -1) + 2.0 * at(0, 1) - at(1, -1)
                + at(1, 1);
            let gy = -at(-1, -1) - 2.0 * at(-1, 0) - at(-1, 1)
                + at(1, -1)
                + 2.0 * at(1, 0)
                + at(1, 1);
            mags.push((gx * gx + gy * gy).sqrt());
        }
    }
    let n = mags.len() as f64;
    let mean = mags.iter().sum::<f64>() / n;
    let var = mags.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// Tag each record with its (SI class, MOS class) stratum. The SI
/// threshold is the corpus median; MOS class is the nearest grade.
pub fn assign_strata(manifest: &mut Manifest) -> Result<()> {
    let mut sis: Vec<f64> = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let si = r.si.ok_or_else(|| {
            Error::Param(format!("{}: missing si", r.image_ref.display()))
        })?;
        sis.push(si);
    }
    let mut sorted = sis.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.is_empty() {
        return Err(Error::Param("empty manifest".into()));
    } else if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    for (r, si) in manifest.records.iter_mut().zip(&sis) {
        let si_class = if *si < median { SiClass::Low } else { SiClass::High };
        let mos_class = r.mos.round().clamp(1.0, 5.0) as usize;
        r.stratum = Some((si_class, mos_class));
    }
    Ok(())
}

/// Within each of the 10 (SI, MOS) strata, draw round(fraction * count)
/// records uniformly (seeded) into train; the rest go to test.
pub fn stratified_split(manifest: &mut Manifest, fraction: f64, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Param(format!("fraction {fraction} outside [0,1]")));
    }
    if manifest.records.iter().any(|r| r.stratum.is_none()) {
        assign_strata(manifest)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for si_class in [SiClass::Low, SiClass::High] {
        for mos_class in 1..=5 {
            let mut idx: Vec<usize> = manifest
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.stratum == Some((si_class, mos_class)))
                .map(|(i, _)| i)
                .collect();
            if idx.is_empty() {
                continue;
            }
            idx.shuffle(&mut rng);
            let n_train = ((fraction * idx.len() as f64).round() as usize).min(idx.len());
            for (k, &i) in idx.iter().enumerate() {
                manifest.records[i].split = Some(if k < n_train {
                    Split::Train
                } else {
                    Split::Test
                });
            }
        }
    }
    Ok(())
}

/// 2x2 box-average downsampling to (ceil(H/2), ceil(W/2)); odd edges
/// average over the partial window.
pub fn half_size(image: &Tensor) -> Result<Tensor> {
    if image.shape.len() != 3 {
        return Err(Error::Format(format!(
            "half_size: expected [H,W,C], got {:?}",
            image.shape
        )));
    }
    let (h, w, c) = (image.shape[0], image.shape[1], image.shape[2]);
    if h < 2 || w < 2 {
        return Err(Error::Param(format!("half_size: image {h}x{w} too small")));
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(vec![oh, ow, c]);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut sum = 0.0;
                let mut count = 0.0;
                for iy in oy * 2..(oy * 2 + 2).min(h) {
                    for ix in ox * 2..(ox * 2 + 2).min(w) {
                        sum += image.data[(iy * w + ix) * c + ch];
                        count += 1.0;
                    }
                }
                out.data[(oy * ow + ox) * c + ch] = sum / count;
            }
        }
    }
    Ok(out)
}

/// Decode a PNG or BMP into an [H, W, 3] tensor of [0,1] floats.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for px in rgb.pixels() {
        data.push(f64::from(px[0]) / 255.0);
        data.push(f64::from(px[1]) / 255.0);
        data.push(f64::from(px[2]) / 255.0);
    }
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// Encode an [H, W, 3] tensor of [0,1] floats as RGB PNG.
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    if image.shape.len() != 3 || image.shape[2] != 3 {
        return Err(Error::Format(format!(
            "save_image: expected [H,W,3], got {:?}",
            image.shape
        )));
    }
    let (h, w) = (image.shape[0], image.shape[1]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (p, px) in buf.pixels_mut().enumerate() {
        for ch in 0..3 {
            px[ch] = (image.data[p * 3 + ch].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
