//! Complex 3D volumes (space x space x time) with per-frame centered
//! orthonormal 2D Fourier transforms and k-space derivative weights.

use ndarray::{Array2, Array3, Axis, Zip};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Which domain the samples of a volume live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Image,
    KSpace,
}

/// Complex-valued Nx x Ny x Nt volume tagged with its domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVolume {
    pub data: Array3<Complex64>,
    pub domain: Domain,
}

impl ComplexVolume {
    pub fn new(data: Array3<Complex64>, domain: Domain) -> Self {
        Self { data, domain }
    }

    pub fn zeros(nx: usize, ny: usize, nt: usize, domain: Domain) -> Self {
        Self::new(Array3::zeros((nx, ny, nt)), domain)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn check_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimMismatch {
                expected: format!("{:?}", self.dims()),
                got: format!("{:?}", other.dims()),
            });
        }
        Ok(())
    }
}

/// Sum of conj(a) * b over all entries.
pub fn inner(a: &Array3<Complex64>, b: &Array3<Complex64>) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm3(a: &Array3<Complex64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Angular-frequency grids of the centered spectrum, in radians/pixel.
///
/// `wx[k, .] = 2*pi*(k - nx/2)/nx`; zero at the DC bin of the centered
/// spectrum, so multiplying a constant image's spectrum by i*w gives zero.
#[derive(Debug, Clone)]
pub struct GradientWeights {
    pub wx: Array2<f64>,
    pub wy: Array2<f64>,
}

pub fn gradient_weights(nx: usize, ny: usize) -> Result<GradientWeights> {
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument("nx, ny must be >= 1".into()));
    }
    let cx = nx / 2;
    let cy = ny / 2;
    let mut wx = Array2::zeros((nx, ny));
    let mut wy = Array2::zeros((nx, ny));
    for i in 0..nx {
        let fx = i as f64 - cx as f64;
        for j in 0..ny {
            let fy = j as f64 - cy as f64;
            wx[[i, j]] = 2.0 * std::f64::consts::PI * fx / nx as f64;
            wy[[i, j]] = 2.0 * std::f64::consts::PI * fy / ny as f64;
        }
    }
    Ok(GradientWeights { wx, wy })
}

fn transform_frames(v: &ComplexVolume, forward: bool) -> Array3<Complex64> {
    let (nx, ny, nt) = v.dims();
    let mut planner = FftPlanner::new();
    let fft_x = if forward {
        planner.plan_fft_forward(nx)
    } else {
        planner.plan_fft_inverse(nx)
    };
    let fft_y = if forward {
        planner.plan_fft_forward(ny)
    } else {
        planner.plan_fft_inverse(ny)
    };
    let scale = 1.0 / ((nx * ny) as f64).sqrt();
    let cx = nx / 2;
    let cy = ny / 2;

    let mut out = Array3::zeros((nx, ny, nt));
    let frames: Vec<Array2<Complex64>> = (0..nt)
        .into_par_iter()
        .map(|t| {
            let frame = v.data.index_axis(Axis(2), t);
            transform_frame(&frame.to_owned(), &fft_x, &fft_y, cx, cy, scale)
        })
        .collect();
    for (t, frame) in frames.into_iter().enumerate() {
        out.index_axis_mut(Axis(2), t).assign(&frame);
    }
    out
}

// Centered transform of one frame: ifftshift, row/column FFTs, fftshift.
fn transform_frame(
    frame: &Array2<Complex64>,
    fft_x: &Arc<dyn rustfft::Fft<f64>>,
    fft_y: &Arc<dyn rustfft::Fft<f64>>,
    cx: usize,
    cy: usize,
    scale: f64,
) -> Array2<Complex64> {
    let (nx, ny) = frame.dim();
    // ifftshift both axes
    let mut work = Array2::zeros((nx, ny));
    for i in 0..nx {
        for j in 0..ny {
            work[[i, j]] = frame[[(i + cx) % nx, (j + cy) % ny]];
        }
    }
    // transform along x (columns) for each y
    let mut buf = vec![Complex64::default(); nx];
    for j in 0..ny {
        for i in 0..nx {
            buf[i] = work[[i, j]];
        }
        fft_x.process(&mut buf);
        for i in 0..nx {
            work[[i, j]] = buf[i];
        }
    }
    // transform along y (rows) for each x
    let mut buf = vec![Complex64::default(); ny];
    for i in 0..nx {
        for j in 0..ny {
            buf[j] = work[[i, j]];
        }
        fft_y.process(&mut buf);
        for j in 0..ny {
            work[[i, j]] = buf[j];
        }
    }
    // fftshift both axes and apply orthonormal scale
    let mut out = Array2::zeros((nx, ny));
    for i in 0..nx {
        for j in 0..ny {
            out[[(i + cx) % nx, (j + cy) % ny]] = work[[i, j]] * scale;
        }
    }
    out
}

/// Per-frame centered orthonormal 2D DFT (image -> k-space).
pub fn fft2(v: &ComplexVolume) -> ComplexVolume {
    ComplexVolume::new(transform_frames(v, true), Domain::KSpace)
}

/// Per-frame centered orthonormal inverse 2D DFT (k-space -> image).
pub fn ifft2(v: &ComplexVolume) -> ComplexVolume {
    // rustfft's inverse is unscaled; orthonormal scale 1/sqrt(NxNy) applies
    // to both directions, so a round trip carries 1/(NxNy) * NxNy = 1.
    ComplexVolume::new(transform_frames(v, false), Domain::Image)
}

/// Entrywise multiply each frame of `v` by a real 2D grid.
pub fn mul_real_grid(v: &Array3<Complex64>, grid: &Array2<f64>) -> Array3<Complex64> {
    let (nx, ny, nt) = v.dim();
    let mut out = Array3::zeros((nx, ny, nt));
    for t in 0..nt {
        let mut o = out.index_axis_mut(Axis(2), t);
        let f = v.index_axis(Axis(2), t);
        Zip::from(&mut o).and(&f).and(grid).for_each(|o, &a, &g| *o = a * g);
    }
    out
}

/// Entrywise multiply each frame of `v` by a complex 2D grid.
pub fn mul_complex_grid(v: &Array3<Complex64>, grid: &Array2<Complex64>) -> Array3<Complex64> {
    let (nx, ny, nt) = v.dim();
    let mut out = Array3::zeros((nx, ny, nt));
    for t in 0..nt {
        let mut o = out.index_axis_mut(Axis(2), t);
        let f = v.index_axis(Axis(2), t);
        Zip::from(&mut o).and(&f).and(grid).for_each(|o, &a, &g| *o = a * g);
    }
    out
}
