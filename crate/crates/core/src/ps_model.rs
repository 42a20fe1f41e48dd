//! Partially separable model: sum-of-separable phantom synthesis, Prony
//! annihilating filters, and data-driven null-space calibration.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hankel::{SpatialFilter, TemporalFilter};
use crate::volume::{ComplexVolume, Domain};

/// gamma(r, t) = sum_l c_l(r) * phi_l(t).
#[derive(Debug, Clone)]
pub struct PSDecomposition {
    pub spatial_maps: Vec<Array2<Complex64>>,
    pub temporal_basis: Vec<Vec<Complex64>>,
    pub order: usize,
}

/// Output of null-space calibration.
#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub filter: TemporalFilter,
    pub singular_values: Vec<f64>,
    pub residual: f64,
}

/// Config for the seeded default phantom generator.
#[derive(Debug, Clone)]
pub struct PhantomConfig {
    pub seed: u64,
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
    pub order: usize,
    pub root_modulus_min: f64,
    pub root_modulus_max: f64,
    pub noise_level: f64,
    /// Force a single constant-in-time component.
    pub constant: bool,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            nx: 64,
            ny: 64,
            nt: 16,
            order: 3,
            root_modulus_min: 0.97,
            root_modulus_max: 1.0,
            noise_level: 0.0,
            constant: false,
        }
    }
}

pub fn assemble_phantom(decomp: &PSDecomposition) -> Result<ComplexVolume> {
    if decomp.spatial_maps.len() != decomp.order || decomp.temporal_basis.len() != decomp.order {
        return Err(Error::DimMismatch {
            expected: format!("order {}", decomp.order),
            got: format!(
                "{} maps, {} bases",
                decomp.spatial_maps.len(),
                decomp.temporal_basis.len()
            ),
        });
    }
    if decomp.order == 0 {
        return Err(Error::InvalidArgument("order must be >= 1".into()));
    }
    let (nx, ny) = decomp.spatial_maps[0].dim();
    let nt = decomp.temporal_basis[0].len();
    for m in &decomp.spatial_maps {
        if m.dim() != (nx, ny) {
            return Err(Error::DimMismatch {
                expected: format!("{nx}x{ny}"),
                got: format!("{:?}", m.dim()),
            });
        }
    }
    for b in &decomp.temporal_basis {
        if b.len() != nt {
            return Err(Error::DimMismatch {
                expected: format!("{nt} frames"),
                got: format!("{}", b.len()),
            });
        }
    }
    let mut data = Array3::zeros((nx, ny, nt));
    for l in 0..decomp.order {
        let map = &decomp.spatial_maps[l];
        let basis = &decomp.temporal_basis[l];
        for i in 0..nx {
            for j in 0..ny {
                let cij = map[[i, j]];
                for t in 0..nt {
                    data[[i, j, t]] += cij * basis[t];
                }
            }
        }
    }
    Ok(ComplexVolume::new(data, Domain::Image))
}

/// Monic annihilating filter Prod_l (1 - z_l zeta^{-1}); length L + 1.
///
/// Annihilates every signal of the form sum_l a_l z_l^t; for repeated roots
/// it annihilates only the pure exponentials, not polynomial-weighted ones.
pub fn prony_filter(roots: &[Complex64]) -> Result<TemporalFilter> {
    if roots.is_empty() {
        return Err(Error::InvalidArgument("need at least one root".into()));
    }
    let mut taps = vec![Complex64::new(1.0, 0.0)];
    for z in roots {
        // multiply polynomial by (1 - z * x)
        let mut next = vec![Complex64::default(); taps.len() + 1];
        for (k, c) in taps.iter().enumerate() {
            next[k] += c;
            next[k + 1] -= c * z;
        }
        taps = next;
    }
    TemporalFilter::new(taps)
}

/// One-sided Jacobi SVD of a tall complex matrix stored column-wise.
/// Returns singular values (nonincreasing) and the matching right singular
/// vectors as columns. Keeps high relative accuracy for tiny singular
/// values, which the rank checks need.
pub(crate) fn svd_columns(mut cols: Vec<Vec<Complex64>>) -> (Vec<f64>, Array2<Complex64>) {
    let n = cols.len();
    let mut v = Array2::<Complex64>::eye(n);
    let tol = 1e-15;
    for _sweep in 0..60 {
        let mut converged = true;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = Complex64::default();
                for (zp, zq) in cols[p].iter().zip(cols[q].iter()) {
                    app += zp.norm_sqr();
                    aqq += zq.norm_sqr();
                    apq += zp.conj() * zq;
                }
                if apq.norm() <= tol * (app * aqq).sqrt() || apq.norm() == 0.0 {
                    continue;
                }
                converged = false;
                // rotation diagonalizing [[app, apq], [conj(apq), aqq]]
                let phase = apq / apq.norm();
                let theta = 0.5 * (2.0 * apq.norm()).atan2(app - aqq);
                let (s, c) = theta.sin_cos();
                let sn = phase * s;
                for k in 0..cols[p].len() {
                    let zp = cols[p][k];
                    let zq = cols[q][k];
                    cols[p][k] = zp * c + zq * sn.conj();
                    cols[q][k] = zq * c - zp * sn;
                }
                for k in 0..n {
                    let vp = v[[k, p]];
                    let vq = v[[k, q]];
                    v[[k, p]] = vp * c + vq * sn.conj();
                    v[[k, q]] = vq * c - vp * sn;
                }
            }
        }
        if converged {
            break;
        }
    }
    let mut sigma: Vec<f64> = cols
        .iter()
        .map(|col| col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
        .collect();
    // sort nonincreasing, permuting V to match
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).unwrap());
    let sorted_sigma: Vec<f64> = order.iter().map(|&i| sigma[i]).collect();
    let mut sorted_v = Array2::<Complex64>::zeros((n, n));
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            sorted_v[[k, new]] = v[[k, old]];
        }
    }
    sigma = sorted_sigma;
    (sigma, sorted_v)
}

/// Stack temporal Hankel rows from all pixels of all volumes and return the
/// right singular vector of the smallest singular value as the null-space
/// filter, with the singular spectrum and the achieved relative residual.
pub fn calibrate_nullspace(training: &[ComplexVolume], window: usize) -> Result<CalibrationResult> {
    if training.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if window < 2 {
        return Err(Error::InvalidArgument("window must be >= 2".into()));
    }
    for v in training {
        if window > v.dims().2 {
            return Err(Error::FilterTooLarge(format!(
                "window {} exceeds {} frames",
                window,
                v.dims().2
            )));
        }
    }
    // Stack the temporal Hankel rows of every pixel of every volume,
    // stored column-wise for the one-sided Jacobi SVD.
    let total_rows: usize = training
        .iter()
        .map(|v| {
            let (nx, ny, nt) = v.dims();
            nx * ny * (nt - window + 1)
        })
        .sum();
    let mut cols: Vec<Vec<Complex64>> = vec![Vec::with_capacity(total_rows); window];
    for v in training {
        let (nx, ny, nt) = v.dims();
        for i in 0..nx {
            for j in 0..ny {
                for r in 0..=(nt - window) {
                    for (a, col) in cols.iter_mut().enumerate() {
                        col.push(v.data[[i, j, r + a]]);
                    }
                }
            }
        }
    }
    let frob_sq: f64 = cols
        .iter()
        .map(|c| c.iter().map(|z| z.norm_sqr()).sum::<f64>())
        .sum();

    let (singular_values, vecs) = svd_columns(cols);

    // Null vector in Hankel-product orientation; reverse so that valid
    // convolution with the taps annihilates the data.
    let mut taps: Vec<Complex64> = (0..window).map(|k| vecs[[k, window - 1]]).collect();
    taps.reverse();
    // deterministic phase: largest tap real positive
    let lead = taps
        .iter()
        .cloned()
        .max_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap())
        .unwrap();
    if lead.norm() > 0.0 {
        let phase = lead / lead.norm();
        for t in taps.iter_mut() {
            *t /= phase;
        }
    }
    let nrm = taps.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    for t in taps.iter_mut() {
        *t /= nrm;
    }
    let filter = TemporalFilter::new(taps)?;

    // achieved relative residual ||A h|| / ||A||_F on the calibration data
    let mut num = 0.0;
    for v in training {
        let res = crate::hankel::apply_annihilation_temporal(v, &filter)?;
        num += res.iter().map(|z| z.norm_sqr()).sum::<f64>();
    }
    let residual = if frob_sq > 0.0 { (num / frob_sq).sqrt() } else { 0.0 };

    Ok(CalibrationResult { filter, singular_values, residual })
}

/// 3x3 discrete Laplacian stencil, unit-normalized. Kills constant and
/// affine frames; the starting point for the learnable spatial filter.
pub fn spatial_filter_default() -> SpatialFilter {
    let mut taps = Array2::zeros((3, 3));
    taps[[0, 1]] = Complex64::new(1.0, 0.0);
    taps[[1, 0]] = Complex64::new(1.0, 0.0);
    taps[[1, 1]] = Complex64::new(-4.0, 0.0);
    taps[[1, 2]] = Complex64::new(1.0, 0.0);
    taps[[2, 1]] = Complex64::new(1.0, 0.0);
    let n = taps.iter().map(|z: &Complex64| z.norm_sqr()).sum::<f64>().sqrt();
    SpatialFilter::new(taps.mapv(|z| z / n)).unwrap()
}

/// Seeded "beating ring" phantom: ring-shaped smooth spatial maps whose
/// weights oscillate through exponential temporal bases z_l^t.
/// Returns the decomposition and the generating roots.
pub fn default_phantom(cfg: &PhantomConfig) -> Result<(PSDecomposition, Vec<Complex64>)> {
    if cfg.nx == 0 || cfg.ny == 0 || cfg.nt == 0 || cfg.order == 0 {
        return Err(Error::InvalidArgument("dims and order must be >= 1".into()));
    }
    if cfg.order + 1 > cfg.nt {
        return Err(Error::InvalidArgument(format!(
            "order {} needs at least {} frames",
            cfg.order,
            cfg.order + 1
        )));
    }
    if !(cfg.root_modulus_min > 0.0 && cfg.root_modulus_max >= cfg.root_modulus_min) {
        return Err(Error::InvalidArgument("bad root modulus range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut roots = Vec::with_capacity(cfg.order);
    let mut temporal_basis = Vec::with_capacity(cfg.order);
    for l in 0..cfg.order {
        let z = if cfg.constant || l == 0 {
            Complex64::new(1.0, 0.0)
        } else {
            let m = rng.gen_range(cfg.root_modulus_min..=cfg.root_modulus_max);
            // distinct oscillation frequencies, well separated
            let theta = (l as f64) * 0.5 + rng.gen_range(0.0..0.3);
            Complex64::from_polar(m, theta)
        };
        roots.push(z);
        temporal_basis.push((0..cfg.nt).map(|t| z.powu(t as u32)).collect());
    }

    let cx = cfg.nx as f64 / 2.0;
    let cy = cfg.ny as f64 / 2.0;
    let rmax = cx.min(cy);
    let mut spatial_maps = Vec::with_capacity(cfg.order);
    for l in 0..cfg.order {
        let radius = rmax * (0.25 + 0.5 * l as f64 / cfg.order as f64);
        let width = rmax * rng.gen_range(0.08..0.18);
        let amp = Complex64::from_polar(
            rng.gen_range(0.5..1.0),
            rng.gen_range(0.0..std::f64::consts::TAU),
        );
        // a couple of smooth lobes modulating the ring
        let lobes: Vec<(f64, f64, f64)> = (0..2)
            .map(|_| {
                (
                    rng.gen_range(0.0..cfg.nx as f64),
                    rng.gen_range(0.0..cfg.ny as f64),
                    rng.gen_range(0.3..0.8) * rmax,
                )
            })
            .collect();
        let map = Array2::from_shape_fn((cfg.nx, cfg.ny), |(i, j)| {
            let r = ((i as f64 - cx).powi(2) + (j as f64 - cy).powi(2)).sqrt();
            let ring = (-((r - radius) / width).powi(2)).exp();
            let mut modulation = 1.0;
            for (lx, ly, lw) in &lobes {
                let d2 = (i as f64 - lx).powi(2) + (j as f64 - ly).powi(2);
                modulation += 0.5 * (-d2 / (lw * lw)).exp();
            }
            amp * ring * modulation
        });
        spatial_maps.push(map);
    }

    Ok((
        PSDecomposition { spatial_maps, temporal_basis, order: cfg.order },
        roots,
    ))
}

/// Assemble the default phantom and optionally add seeded complex white
/// noise scaled relative to the signal RMS.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(ComplexVolume, Vec<Complex64>)> {
    let (decomp, roots) = default_phantom(cfg)?;
    let mut vol = assemble_phantom(&decomp)?;
    if cfg.noise_level > 0.0 {
        let n = vol.data.len() as f64;
        let rms = (vol.data.iter().map(|z| z.norm_sqr()).sum::<f64>() / n).sqrt();
        let sigma = cfg.noise_level * rms;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e3779b97f4a7c15));
        // zero-mean unit-variance uniform noise, seeded independently of
        // the component draws so the clean phantom is unaffected
        let half_width = 3.0_f64.sqrt();
        for z in vol.data.iter_mut() {
            let re = rng.gen_range(-half_width..half_width);
            let im = rng.gen_range(-half_width..half_width);
            *z += Complex64::new(re, im) * sigma;
        }
    }
    Ok((vol, roots))
}
