//! Hankel lifting and annihilating-filter convolutions.
//!
//! Filters act by valid-mode convolution (no wrap): the Hankel matrix of a
//! series times a filter equals valid convolution of the series with the
//! reversed filter. Adjoints zero-pad, so the Gram identity
//! <A^H A v, v> = ||A v||^2 holds exactly.

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::volume::ComplexVolume;

/// Temporal annihilating filter, taps h[0..=L] for order L.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalFilter {
    pub taps: Vec<Complex64>,
}

impl TemporalFilter {
    pub fn new(taps: Vec<Complex64>) -> Result<Self> {
        if taps.len() < 2 {
            return Err(Error::InvalidArgument("temporal filter needs >= 2 taps".into()));
        }
        if taps[0].norm() == 0.0 {
            return Err(Error::InvalidArgument("leading tap must be nonzero".into()));
        }
        Ok(Self { taps })
    }

    pub fn order(&self) -> usize {
        self.taps.len() - 1
    }

    pub fn normalized(&self) -> Self {
        let n = self.taps.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        Self { taps: self.taps.iter().map(|z| z / n).collect() }
    }
}

/// Spatial annihilating filter for one frame: a kx_len x ky_len tap grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFilter {
    pub taps: Array2<Complex64>,
}

impl SpatialFilter {
    pub fn new(taps: Array2<Complex64>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::InvalidArgument("spatial filter must be non-empty".into()));
        }
        if taps.iter().all(|z| z.norm() == 0.0) {
            return Err(Error::InvalidArgument("spatial filter needs a nonzero tap".into()));
        }
        Ok(Self { taps })
    }
}

/// Per-frame bank of spatial filters. `filters.len()` is either 1 (shared
/// across frames) or the frame count.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFilterBank {
    pub filters: Vec<SpatialFilter>,
}

impl SpatialFilterBank {
    pub fn shared(filter: SpatialFilter) -> Self {
        Self { filters: vec![filter] }
    }

    pub fn for_frame(&self, t: usize) -> &SpatialFilter {
        if self.filters.len() == 1 {
            &self.filters[0]
        } else {
            &self.filters[t]
        }
    }
}

/// Hankel matrix of a series: row r, column c holds series[r + c].
pub fn hankel_temporal(series: &[Complex64], window: usize) -> Result<Array2<Complex64>> {
    if window == 0 || window > series.len() {
        return Err(Error::FilterTooLarge(format!(
            "window {} exceeds series length {}",
            window,
            series.len()
        )));
    }
    let rows = series.len() - window + 1;
    Ok(Array2::from_shape_fn((rows, window), |(r, c)| series[r + c]))
}

/// Valid-mode convolution of a single series with the filter taps:
/// out[r] = sum_k h[k] * s[r + L - k].
pub fn convolve_valid(series: &[Complex64], taps: &[Complex64]) -> Vec<Complex64> {
    let l = taps.len() - 1;
    let out_len = series.len() - l;
    let mut out = vec![Complex64::default(); out_len];
    for r in 0..out_len {
        let mut acc = Complex64::default();
        for (k, h) in taps.iter().enumerate() {
            acc += h * series[r + l - k];
        }
        out[r] = acc;
    }
    out
}

/// Adjoint of `convolve_valid`: zero-padded correlation with conj(taps).
pub fn convolve_valid_adjoint(residual: &[Complex64], taps: &[Complex64], n: usize) -> Vec<Complex64> {
    let l = taps.len() - 1;
    let mut out = vec![Complex64::default(); n];
    for (r, u) in residual.iter().enumerate() {
        for (k, h) in taps.iter().enumerate() {
            out[r + l - k] += h.conj() * u;
        }
    }
    out
}

/// Per-pixel valid temporal convolution; output has Nt - L frames.
pub fn apply_annihilation_temporal(v: &ComplexVolume, h: &TemporalFilter) -> Result<Array3<Complex64>> {
    let (nx, ny, nt) = v.dims();
    let l = h.order();
    if l + 1 > nt {
        return Err(Error::FilterTooLarge(format!(
            "filter length {} exceeds {} frames",
            l + 1,
            nt
        )));
    }
    let mut out = Array3::zeros((nx, ny, nt - l));
    for i in 0..nx {
        for j in 0..ny {
            let series: Vec<Complex64> = (0..nt).map(|t| v.data[[i, j, t]]).collect();
            for (r, z) in convolve_valid(&series, &h.taps).into_iter().enumerate() {
                out[[i, j, r]] = z;
            }
        }
    }
    Ok(out)
}

/// Adjoint of `apply_annihilation_temporal` on a residual volume.
pub fn adjoint_annihilation_temporal(
    residual: &Array3<Complex64>,
    h: &TemporalFilter,
    nt: usize,
) -> Array3<Complex64> {
    let (nx, ny, _) = residual.dim();
    let mut out = Array3::zeros((nx, ny, nt));
    for i in 0..nx {
        for j in 0..ny {
            let res: Vec<Complex64> = residual.index_axis(Axis(0), i).row(j).to_vec();
            for (t, z) in convolve_valid_adjoint(&res, &h.taps, nt).into_iter().enumerate() {
                out[[i, j, t]] = z;
            }
        }
    }
    out
}

/// H^T H along time: convolve with h, then correlate with conj(h), zero-padded.
pub fn gram_apply_temporal(v: &ComplexVolume, h: &TemporalFilter) -> Result<Array3<Complex64>> {
    let residual = apply_annihilation_temporal(v, h)?;
    Ok(adjoint_annihilation_temporal(&residual, h, v.dims().2))
}

/// Valid-mode 2D convolution of one frame with a spatial filter.
pub fn convolve2_valid(frame: &Array2<Complex64>, taps: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let (nx, ny) = frame.dim();
    let (ka, kb) = taps.dim();
    if ka > nx || kb > ny {
        return Err(Error::FilterTooLarge(format!(
            "spatial filter {}x{} exceeds frame {}x{}",
            ka, kb, nx, ny
        )));
    }
    let (ox, oy) = (nx - ka + 1, ny - kb + 1);
    let mut out = Array2::zeros((ox, oy));
    for p in 0..ox {
        for q in 0..oy {
            let mut acc = Complex64::default();
            for a in 0..ka {
                for b in 0..kb {
                    acc += taps[[a, b]] * frame[[p + ka - 1 - a, q + kb - 1 - b]];
                }
            }
            out[[p, q]] = acc;
        }
    }
    Ok(out)
}

/// Adjoint of `convolve2_valid`, zero-padded back to (nx, ny).
pub fn convolve2_valid_adjoint(
    residual: &Array2<Complex64>,
    taps: &Array2<Complex64>,
    nx: usize,
    ny: usize,
) -> Array2<Complex64> {
    let (ka, kb) = taps.dim();
    let (ox, oy) = residual.dim();
    let mut out = Array2::zeros((nx, ny));
    for p in 0..ox {
        for q in 0..oy {
            let u = residual[[p, q]];
            for a in 0..ka {
                for b in 0..kb {
                    out[[p + ka - 1 - a, q + kb - 1 - b]] += taps[[a, b]].conj() * u;
                }
            }
        }
    }
    out
}

/// Valid-mode 2D convolution of the selected frame of a volume.
pub fn apply_annihilation_spatial(
    v: &ComplexVolume,
    h: &SpatialFilter,
    frame: usize,
) -> Result<Array2<Complex64>> {
    let (_, _, nt) = v.dims();
    if frame >= nt {
        return Err(Error::InvalidArgument(format!("frame {frame} out of range {nt}")));
    }
    convolve2_valid(&v.data.index_axis(Axis(2), frame).to_owned(), &h.taps)
}

/// H^T H of one frame's spatial filter.
pub fn gram_apply_spatial(frame: &Array2<Complex64>, h: &SpatialFilter) -> Result<Array2<Complex64>> {
    let (nx, ny) = frame.dim();
    let residual = convolve2_valid(frame, &h.taps)?;
    Ok(convolve2_valid_adjoint(&residual, &h.taps, nx, ny))
}
