//! Quantitative evaluation: MSE, PSNR, and windowed SSIM on magnitude
//! images, plus CSV report emission.

use ndarray::{Array2, Axis};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::ComplexVolume;

/// Which volume's peak magnitude normalizes PSNR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PeakMode {
    /// Peak of the reference volume; comparable across methods.
    #[default]
    Reference,
    /// Peak of the reconstruction.
    Output,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub per_frame: Vec<(f64, f64, f64)>,
}

/// Mean squared magnitude of the difference over all entries.
pub fn mse(out: &ComplexVolume, reference: &ComplexVolume) -> Result<f64> {
    out.check_same_dims(reference)?;
    let n = out.data.len() as f64;
    Ok(out
        .data
        .iter()
        .zip(reference.data.iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        / n)
}

/// 20 * log10(peak / sqrt(mse)); infinite when mse = 0.
pub fn psnr(out: &ComplexVolume, reference: &ComplexVolume, peak_mode: PeakMode) -> Result<f64> {
    let e = mse(out, reference)?;
    let peak_of = |v: &ComplexVolume| v.data.iter().map(|z| z.norm()).fold(0.0_f64, f64::max);
    let peak = match peak_mode {
        PeakMode::Reference => peak_of(reference),
        PeakMode::Output => peak_of(out),
    };
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / e.sqrt()).log10())
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Array2<f64> {
    let n = SSIM_WINDOW;
    let c = (n / 2) as f64;
    let mut w = Array2::from_shape_fn((n, n), |(i, j)| {
        let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
        (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let sum: f64 = w.iter().sum();
    w.mapv_inplace(|v| v / sum);
    w
}

fn ssim_frame(a: &Array2<f64>, b: &Array2<f64>, l: f64, w: &Array2<f64>) -> f64 {
    let (nx, ny) = a.dim();
    let n = SSIM_WINDOW;
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let mut acc = 0.0;
    let mut count = 0usize;
    for p in 0..=(nx - n) {
        for q in 0..=(ny - n) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for i in 0..n {
                for j in 0..n {
                    mu_a += w[[i, j]] * a[[p + i, q + j]];
                    mu_b += w[[i, j]] * b[[p + i, q + j]];
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let da = a[[p + i, q + j]] - mu_a;
                    let db = b[[p + i, q + j]] - mu_b;
                    var_a += w[[i, j]] * da * da;
                    var_b += w[[i, j]] * db * db;
                    cov += w[[i, j]] * da * db;
                }
            }
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            acc += num / den;
            count += 1;
        }
    }
    acc / count as f64
}

/// Windowed luminance * contrast * structure on magnitude images,
/// averaged over windows and frames. The dynamic range is the larger of
/// the two volumes' peak magnitudes, which keeps the score symmetric.
pub fn ssim(out: &ComplexVolume, reference: &ComplexVolume) -> Result<f64> {
    out.check_same_dims(reference)?;
    let (nx, ny, nt) = out.dims();
    if nx < SSIM_WINDOW || ny < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "frames {nx}x{ny} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let peak_of = |v: &ComplexVolume| v.data.iter().map(|z| z.norm()).fold(0.0_f64, f64::max);
    let l = peak_of(out).max(peak_of(reference)).max(f64::MIN_POSITIVE);
    let w = gaussian_window();
    let mut acc = 0.0;
    for t in 0..nt {
        let fa = out.data.index_axis(Axis(2), t).mapv(|z| z.norm());
        let fb = reference.data.index_axis(Axis(2), t).mapv(|z| z.norm());
        acc += ssim_frame(&fa, &fb, l, &w);
    }
    Ok(acc / nt as f64)
}

/// Metrics for one volume pair, overall and per frame.
pub fn evaluate(out: &ComplexVolume, reference: &ComplexVolume, peak_mode: PeakMode) -> Result<EvalReport> {
    let total_mse = mse(out, reference)?;
    let total_psnr = psnr(out, reference, peak_mode)?;
    let total_ssim = ssim(out, reference)?;
    let (nx, ny, nt) = out.dims();
    let mut per_frame = Vec::with_capacity(nt);
    for t in 0..nt {
        let fa = ComplexVolume::new(
            out.data
                .index_axis(Axis(2), t)
                .to_owned()
                .into_shape((nx, ny, 1))
                .unwrap(),
            out.domain,
        );
        let fb = ComplexVolume::new(
            reference
                .data
                .index_axis(Axis(2), t)
                .to_owned()
                .into_shape((nx, ny, 1))
                .unwrap(),
            reference.domain,
        );
        per_frame.push((mse(&fa, &fb)?, psnr(&fa, &fb, peak_mode)?, ssim(&fa, &fb)?));
    }
    Ok(EvalReport { mse: total_mse, psnr_db: total_psnr, ssim: total_ssim, per_frame })
}

/// Evaluate volume pairs and write a CSV: one row per frame per case,
/// then a summary row per case (frame = -1).
pub fn report(
    pairs: &[(ComplexVolume, ComplexVolume)],
    peak_mode: PeakMode,
    path: &Path,
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::with_capacity(pairs.len());
    let mut rows = Vec::new();
    for (case, (out, reference)) in pairs.iter().enumerate() {
        let rep = evaluate(out, reference, peak_mode)?;
        for (t, (m, p, s)) in rep.per_frame.iter().enumerate() {
            rows.push(vec![case as f64, t as f64, *m, *p, *s]);
        }
        rows.push(vec![case as f64, -1.0, rep.mse, rep.psnr_db, rep.ssim]);
        reports.push(rep);
    }
    crate::io::write_csv(path, &["case", "frame", "mse", "psnr_db", "ssim"], &rows)?;
    Ok(reports)
}
