//! Image quality metrics, the colorization AuC and φ correlation analysis.
//!
//! Everything here accumulates in `f64`.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imagestack::{ColorSpace, Image};

/// PSNR in dB; identical inputs give [`Psnr::Infinite`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn value(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Psnr::Infinite)
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.6}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<Psnr> {
    b.require_shape(a.shape())?;
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("peak must be positive, got {peak}")));
    }
    let n = a.data().len();
    if n == 0 {
        return Err(Error::InvalidArgument("PSNR of empty images".into()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
    Ok(if mse == 0.0 { Psnr::Infinite } else { Psnr::Finite(10.0 * (peak * peak / mse).log10()) })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filtering over valid window positions.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean luminance term and mean contrast-structure term of one plane.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> (f64, f64) {
    let win = gaussian_window();
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, &win);
    let mu_b = filter_valid(b, h, w, &win);
    let e_aa = filter_valid(&sq(a, a), h, w, &win);
    let e_bb = filter_valid(&sq(b, b), h, w, &win);
    let e_ab = filter_valid(&sq(a, b), h, w, &win);
    let n = mu_a.len() as f64;
    let (mut full, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        full += lum * cs;
        cs_sum += cs;
    }
    (full / n, cs_sum / n)
}

fn ssim_parts(a: &Image, b: &Image, peak: f64) -> Result<(f64, f64)> {
    b.require_shape(a.shape())?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    let c = a.channels() as f64;
    let (mut full, mut cs) = (0.0, 0.0);
    for ch in 0..a.channels() {
        let (f, s) = ssim_plane(a.channel(ch), b.channel(ch), a.height(), a.width(), peak);
        full += f / c;
        cs += s / c;
    }
    Ok((full, cs))
}

/// Windowed SSIM (11x11 Gaussian, σ = 1.5, `C₁ = (0.01 peak)²`,
/// `C₂ = (0.03 peak)²`), mean over valid windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    ssim_parts(a, b, peak).map(|p| p.0)
}

/// Mean contrast-structure factor `(2σ_ab + C₂)/(σ_a² + σ_b² + C₂)` of
/// [`ssim`], which ignores the window means.
pub fn ssim_contrast_structure(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    ssim_parts(a, b, peak).map(|p| p.1)
}

/// The chromatic planes of a Lab image, on the conventional scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AbGrid {
    pub height: usize,
    pub width: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl AbGrid {
    pub fn new(height: usize, width: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != height * width || b.len() != height * width {
            return Err(Error::shape(format!("{height}x{width} ab planes"), format!("{} and {}", a.len(), b.len())));
        }
        Ok(Self { height, width, a, b })
    }

    pub fn from_lab(img: &Image) -> Result<Self> {
        if img.space() != ColorSpace::Lab || img.channels() != 3 {
            return Err(Error::InvalidArgument("ab planes need a 3-channel Lab image".into()));
        }
        Self::new(img.height(), img.width(), img.channel(1).to_vec(), img.channel(2).to_vec())
    }
}

pub const AUC_MAX_THRESHOLD: usize = 150;

#[derive(Debug, Clone, PartialEq)]
pub struct AuCCurve {
    /// `0..=150`.
    pub thresholds: Vec<usize>,
    /// Fraction of pixels whose ab error is at most each threshold.
    pub cumulative_pct: Vec<f64>,
    /// Mean of the curve, in percent.
    pub auc: f64,
}

/// Cumulative ab-error curve over integer thresholds `0..=150`.
pub fn auc_colorization(pred: &AbGrid, gt: &AbGrid) -> Result<AuCCurve> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(format!("{}x{}", gt.height, gt.width), format!("{}x{}", pred.height, pred.width)));
    }
    let n = pred.a.len();
    if n == 0 {
        return Err(Error::InvalidArgument("AuC of empty grids".into()));
    }
    // e <= t for integer t exactly when ceil(e) <= t
    let mut first_hit = vec![0usize; AUC_MAX_THRESHOLD + 2];
    for i in 0..n {
        let e = (pred.a[i] - gt.a[i]).hypot(pred.b[i] - gt.b[i]);
        let k =
            if e.is_finite() { e.ceil().min((AUC_MAX_THRESHOLD + 1) as f64) as usize } else { AUC_MAX_THRESHOLD + 1 };
        first_hit[k] += 1;
    }
    let mut cumulative_pct = Vec::with_capacity(AUC_MAX_THRESHOLD + 1);
    let mut count = 0;
    for hits in first_hit.iter().take(AUC_MAX_THRESHOLD + 1) {
        count += hits;
        cumulative_pct.push(count as f64 / n as f64);
    }
    let auc = 100.0 * cumulative_pct.iter().sum::<f64>() / (AUC_MAX_THRESHOLD + 1) as f64;
    Ok(AuCCurve { thresholds: (0..=AUC_MAX_THRESHOLD).collect(), cumulative_pct, auc })
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    pearson_named(xs, "xs", ys, "ys")
}

pub(crate) fn pearson_named(xs: &[f64], x_name: &str, ys: &[f64], y_name: &str) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::shape(format!("{} {y_name}", xs.len()), ys.len()));
    }
    if xs.len() < 2 {
        return Err(Error::InsufficientData(format!("correlation needs at least two pairs, got {}", xs.len())));
    }
    if let Some(bad) = xs.iter().chain(ys).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("correlation input {bad}")));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance(x_name.to_string()));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance(y_name.to_string()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhiRecord {
    pub image_id: String,
    pub mean_phi: f64,
    pub sigma_n: f64,
    pub prior_psnr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhiAnalysis {
    pub per_image: Vec<PhiRecord>,
    pub r_phi_sigma: f64,
    pub r_phi_priorpsnr: f64,
}

pub fn analyze_phi(records: &[PhiRecord]) -> Result<PhiAnalysis> {
    if records.len() < 3 {
        return Err(Error::InsufficientData(format!("phi analysis needs at least 3 records, got {}", records.len())));
    }
    let phi: Vec<f64> = records.iter().map(|r| r.mean_phi).collect();
    let sigma: Vec<f64> = records.iter().map(|r| r.sigma_n).collect();
    let prior: Vec<f64> = records.iter().map(|r| r.prior_psnr).collect();
    Ok(PhiAnalysis {
        per_image: records.to_vec(),
        r_phi_sigma: pearson_named(&phi, "mean phi", &sigma, "sigma_n")?,
        r_phi_priorpsnr: pearson_named(&phi, "mean phi", &prior, "prior psnr")?,
    })
}

/// Writes `phi_vs_sigma.tsv` and `phi_vs_prior_psnr.tsv` (header plus one
/// `x<TAB>y` row per image) and returns their paths.
pub fn write_scatter_data(analysis: &PhiAnalysis, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (name, header, pick) in [
        ("phi_vs_sigma.tsv", "sigma_n\tmean_phi", (|r: &PhiRecord| r.sigma_n) as fn(&PhiRecord) -> f64),
        ("phi_vs_prior_psnr.tsv", "prior_psnr\tmean_phi", |r: &PhiRecord| r.prior_psnr),
    ] {
        let mut text = format!("{header}\n");
        for r in &analysis.per_image {
            let _ = writeln!(text, "{:.6}\t{:.6}", pick(r), r.mean_phi);
        }
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

pub const METRIC_COLUMNS: [&str; 8] = ["image_id", "task", "psnr", "ssim", "auc", "mean_phi", "sigma_n", "prior_psnr"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub image_id: String,
    pub task: String,
    pub psnr: Psnr,
    pub ssim: f64,
    pub auc: Option<f64>,
    pub mean_phi: f64,
    pub sigma_n: Option<f64>,
    pub prior_psnr: Psnr,
    /// Values for [`MetricTable::extra_columns`], in order.
    pub extra: Vec<Option<f64>>,
}

/// Tab-separated table in a fixed column order, closed by a mean row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricTable {
    pub extra_columns: Vec<String>,
    pub rows: Vec<MetricRow>,
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(v) if v.is_infinite() => "inf".into(),
        Some(v) => format!("{v:.6}"),
        None => "NA".into(),
    }
}

fn column_mean(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricTable {
    pub fn to_tsv(&self) -> String {
        let mut out = METRIC_COLUMNS.join("\t");
        for c in &self.extra_columns {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        let numeric = |r: &MetricRow| -> Vec<Option<f64>> {
            let mut v = vec![
                Some(r.psnr.value()),
                Some(r.ssim),
                r.auc,
                Some(r.mean_phi),
                r.sigma_n,
                Some(r.prior_psnr.value()),
            ];
            v.extend(r.extra.iter().copied());
            v
        };
        let width = 6 + self.extra_columns.len();
        for r in &self.rows {
            let cells: Vec<String> = numeric(r).into_iter().map(cell).collect();
            let _ = writeln!(out, "{}\t{}\t{}", r.image_id, r.task, cells.join("\t"));
        }
        if !self.rows.is_empty() {
            let all: Vec<Vec<Option<f64>>> = self.rows.iter().map(numeric).collect();
            let means: Vec<String> =
                (0..width).map(|j| cell(column_mean(all.iter().map(|r| r.get(j).copied().flatten())))).collect();
            let _ = writeln!(out, "mean\t{}\t{}", self.rows[0].task, means.join("\t"));
        }
        out
    }

    pub fn mean_of(&self, f: impl Fn(&MetricRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len().max(1) as f64
    }
}
