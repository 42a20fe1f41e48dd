//! Cartesian undersampling masks, simulated coil sensitivities, and the
//! multi-coil forward/adjoint encoding y_i = M . F(c_i . gamma).

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{fft2, ifft2, ComplexVolume, Domain};

/// Binary Nx x Ny x Nt mask, fully sampled along the frequency-encode (x)
/// axis; undersampling selects phase-encode (y) lines per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    pub mask: Array3<f64>,
    pub acceleration: f64,
}

impl SamplingMask {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.mask.dim()
    }

    pub fn full(nx: usize, ny: usize, nt: usize) -> Self {
        Self { mask: Array3::from_elem((nx, ny, nt), 1.0), acceleration: 1.0 }
    }

    /// Sampled phase-encode lines of one frame.
    pub fn lines(&self, t: usize) -> Vec<usize> {
        let (_, ny, _) = self.dims();
        (0..ny).filter(|&j| self.mask[[0, j, t]] > 0.5).collect()
    }
}

/// Per-coil complex sensitivity maps, sum-of-squares normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilSet {
    pub maps: Vec<Array2<Complex64>>,
}

impl CoilSet {
    pub fn count(&self) -> usize {
        self.maps.len()
    }

    pub fn identity(nx: usize, ny: usize) -> Self {
        Self { maps: vec![Array2::from_elem((nx, ny), Complex64::new(1.0, 0.0))] }
    }
}

/// Per-frame random Cartesian line selection with a fully sampled center
/// block of `acs_lines`; deterministic per seed.
pub fn make_mask(
    nx: usize,
    ny: usize,
    nt: usize,
    acceleration: f64,
    acs_lines: usize,
    seed: u64,
) -> Result<SamplingMask> {
    if nx == 0 || ny == 0 || nt == 0 {
        return Err(Error::InvalidArgument("dims must be >= 1".into()));
    }
    if acceleration < 1.0 {
        return Err(Error::InvalidArgument("acceleration must be >= 1".into()));
    }
    if acs_lines >= ny {
        return Err(Error::InvalidArgument("acs_lines must be < ny".into()));
    }
    let budget = (ny as f64 / acceleration).round() as usize;
    let budget = budget.max(1).min(ny);
    if budget < acs_lines {
        return Err(Error::InvalidArgument(format!(
            "line budget {budget} smaller than acs block {acs_lines}"
        )));
    }
    let acs_start = ny / 2 - acs_lines / 2;
    let acs: Vec<usize> = (acs_start..acs_start + acs_lines).collect();
    let rest: Vec<usize> = (0..ny).filter(|j| !acs.contains(j)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Array3::zeros((nx, ny, nt));
    for t in 0..nt {
        let mut chosen = acs.clone();
        let extra = budget - acs_lines;
        let mut pool = rest.clone();
        pool.shuffle(&mut rng);
        chosen.extend(pool.into_iter().take(extra));
        for j in chosen {
            for i in 0..nx {
                mask[[i, j, t]] = 1.0;
            }
        }
    }
    Ok(SamplingMask { mask, acceleration: ny as f64 / budget as f64 })
}

/// Smooth complex Gaussian-lobe coil maps, sum-of-squares normalized at
/// every pixel. One coil reduces to the identity map.
pub fn make_coils(nx: usize, ny: usize, m: usize, seed: u64) -> Result<CoilSet> {
    if m == 0 {
        return Err(Error::InvalidArgument("coil count must be >= 1".into()));
    }
    if m == 1 {
        return Ok(CoilSet::identity(nx, ny));
    }
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cx = nx as f64 / 2.0;
    let cy = ny as f64 / 2.0;
    let radius = cx.min(cy) * 1.1;
    let width = (nx.max(ny)) as f64 * 0.6;
    let mut maps = Vec::with_capacity(m);
    for k in 0..m {
        let angle = std::f64::consts::TAU * k as f64 / m as f64 + rng.gen_range(-0.1..0.1);
        let (lx, ly) = (cx + radius * angle.cos(), cy + radius * angle.sin());
        let phase0 = rng.gen_range(0.0..std::f64::consts::TAU);
        let phase_slope = rng.gen_range(-0.02..0.02);
        maps.push(Array2::from_shape_fn((nx, ny), |(i, j)| {
            let d2 = (i as f64 - lx).powi(2) + (j as f64 - ly).powi(2);
            let mag = (-d2 / (2.0 * width * width)).exp() + 0.05;
            let ph = phase0 + phase_slope * (i as f64 + j as f64);
            Complex64::from_polar(mag, ph)
        }));
    }
    // pixelwise sum-of-squares normalization
    for i in 0..nx {
        for j in 0..ny {
            let sos: f64 = maps.iter().map(|c| c[[i, j]].norm_sqr()).sum::<f64>().sqrt();
            for map in maps.iter_mut() {
                map[[i, j]] /= sos;
            }
        }
    }
    Ok(CoilSet { maps })
}

fn check_instance(gamma_dims: (usize, usize, usize), coils: &CoilSet, mask: &SamplingMask) -> Result<()> {
    let (nx, ny, _) = gamma_dims;
    if mask.dims() != gamma_dims {
        return Err(Error::DimMismatch {
            expected: format!("{gamma_dims:?}"),
            got: format!("mask {:?}", mask.dims()),
        });
    }
    for c in &coils.maps {
        if c.dim() != (nx, ny) {
            return Err(Error::DimMismatch {
                expected: format!("{nx}x{ny}"),
                got: format!("coil {:?}", c.dim()),
            });
        }
    }
    Ok(())
}

/// y_i = M . fft2(c_i . gamma) per coil.
pub fn encode(gamma: &ComplexVolume, coils: &CoilSet, mask: &SamplingMask) -> Result<Vec<ComplexVolume>> {
    check_instance(gamma.dims(), coils, mask)?;
    let mut out = Vec::with_capacity(coils.count());
    for c in &coils.maps {
        let weighted = ComplexVolume::new(
            crate::volume::mul_complex_grid(&gamma.data, c),
            Domain::Image,
        );
        let mut k = fft2(&weighted);
        k.data.zip_mut_with(&mask.mask, |z, &m| *z *= m);
        out.push(k);
    }
    Ok(out)
}

/// sum_i conj(c_i) . ifft2(M . y_i); the exact adjoint of `encode`.
pub fn adjoint_encode(y: &[ComplexVolume], coils: &CoilSet, mask: &SamplingMask) -> Result<ComplexVolume> {
    if y.len() != coils.count() {
        return Err(Error::DimMismatch {
            expected: format!("{} coils", coils.count()),
            got: format!("{} k-space volumes", y.len()),
        });
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument("no k-space data".into()));
    }
    check_instance(y[0].dims(), coils, mask)?;
    let (nx, ny, nt) = y[0].dims();
    let mut acc = Array3::<Complex64>::zeros((nx, ny, nt));
    for (yi, c) in y.iter().zip(&coils.maps) {
        if yi.dims() != (nx, ny, nt) {
            return Err(Error::DimMismatch {
                expected: format!("{:?}", (nx, ny, nt)),
                got: format!("{:?}", yi.dims()),
            });
        }
        let mut masked = yi.data.clone();
        masked.zip_mut_with(&mask.mask, |z, &m| *z *= m);
        let img = ifft2(&ComplexVolume::new(masked, Domain::KSpace));
        for t in 0..nt {
            let frame = img.data.index_axis(Axis(2), t);
            let mut a = acc.index_axis_mut(Axis(2), t);
            ndarray::Zip::from(&mut a).and(&frame).and(c).for_each(|a, &v, &cc| {
                *a += cc.conj() * v;
            });
        }
    }
    Ok(ComplexVolume::new(acc, Domain::Image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::inner;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    fn random_volume(nx: usize, ny: usize, nt: usize, seed: u64) -> ComplexVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexVolume::new(
            Array3::from_shape_fn((nx, ny, nt), |_| {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            }),
            Domain::Image,
        )
    }

    #[test]
    fn full_acceleration_keeps_everything() {
        let m = make_mask(8, 8, 3, 1.0, 0, 0).unwrap();
        assert!(m.mask.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mask_line_budget_and_acs() {
        let m = make_mask(4, 192, 5, 8.0, 4, 123).unwrap();
        for t in 0..5 {
            let lines = m.lines(t);
            assert_eq!(lines.len(), 24, "frame {t}");
            for j in 94..98 {
                assert!(lines.contains(&j), "acs line {j} missing in frame {t}");
            }
            // every sampled line spans the full frequency-encode extent
            for &j in &lines {
                for i in 0..4 {
                    assert_eq!(m.mask[[i, j, t]], 1.0);
                }
            }
        }
        // binary entries only
        assert!(m.mask.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!((m.acceleration - 8.0).abs() / 8.0 < 0.2);
    }

    #[test]
    fn mask_determinism_and_frame_variation() {
        let a = make_mask(2, 64, 6, 4.0, 4, 9).unwrap();
        let b = make_mask(2, 64, 6, 4.0, 4, 9).unwrap();
        assert_eq!(a.mask, b.mask);
        let c = make_mask(2, 64, 6, 4.0, 4, 10).unwrap();
        assert_ne!(a.mask, c.mask);
        // frames differ from each other (independent draws)
        assert_ne!(a.lines(0), a.lines(1));
    }

    #[test]
    fn mask_errors() {
        assert!(make_mask(4, 8, 2, 0.5, 0, 0).is_err());
        assert!(make_mask(4, 8, 2, 4.0, 8, 0).is_err());
        assert!(make_mask(4, 16, 2, 16.0, 4, 0).is_err());
    }

    #[test]
    fn single_coil_is_identity() {
        let c = make_coils(8, 8, 1, 3).unwrap();
        assert_eq!(c.count(), 1);
        assert!(c.maps[0].iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn coils_sos_normalized_and_deterministic() {
        let c = make_coils(12, 10, 4, 5).unwrap();
        for i in 0..12 {
            for j in 0..10 {
                let sos: f64 = c.maps.iter().map(|m| m[[i, j]].norm_sqr()).sum();
                assert!((sos - 1.0).abs() < 1e-10);
            }
        }
        let c2 = make_coils(12, 10, 4, 5).unwrap();
        assert_eq!(c.maps, c2.maps);
    }

    #[test]
    fn encode_full_mask_single_coil_is_fft() {
        let v = random_volume(8, 8, 2, 1);
        let coils = CoilSet::identity(8, 8);
        let mask = SamplingMask::full(8, 8, 2);
        let y = encode(&v, &coils, &mask).unwrap();
        let k = fft2(&v);
        let err: f64 = y[0]
            .data
            .iter()
            .zip(k.data.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err / k.norm() < 1e-12);
        // adjoint of full-mask single-coil encode is ifft2
        let back = adjoint_encode(&y, &coils, &mask).unwrap();
        let err: f64 = back
            .data
            .iter()
            .zip(v.data.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err / v.norm() < 1e-12);
    }

    #[test]
    fn adjoint_identity_multicoil() {
        let v = random_volume(8, 6, 3, 2);
        let coils = make_coils(8, 6, 3, 7).unwrap();
        let mask = make_mask(8, 6, 3, 2.0, 2, 4).unwrap();
        let ev = encode(&v, &coils, &mask).unwrap();
        // random k-space test vectors
        let u: Vec<ComplexVolume> = (0..3)
            .map(|s| {
                let mut k = random_volume(8, 6, 3, 100 + s);
                k.domain = Domain::KSpace;
                k
            })
            .collect();
        let lhs: Complex64 = ev
            .iter()
            .zip(u.iter())
            .map(|(a, b)| inner(&a.data, &b.data))
            .sum();
        let au = adjoint_encode(&u, &coils, &mask).unwrap();
        let rhs = inner(&v.data, &au.data);
        assert!((lhs - rhs).norm() < 1e-12, "adjoint gap {}", (lhs - rhs).norm());
    }

    #[test]
    fn zero_in_zero_out() {
        let z = ComplexVolume::zeros(4, 4, 2, Domain::KSpace);
        let coils = make_coils(4, 4, 2, 1).unwrap();
        let mask = SamplingMask::full(4, 4, 2);
        let out = adjoint_encode(&[z.clone(), z], &coils, &mask).unwrap();
        assert!(out.norm() == 0.0);
    }

    #[test]
    fn normal_operator_is_psd_self_adjoint() {
        let coils = make_coils(6, 6, 2, 1).unwrap();
        let mask = make_mask(6, 6, 2, 2.0, 2, 8).unwrap();
        let a = random_volume(6, 6, 2, 31);
        let b = random_volume(6, 6, 2, 32);
        let na = adjoint_encode(&encode(&a, &coils, &mask).unwrap(), &coils, &mask).unwrap();
        let nb = adjoint_encode(&encode(&b, &coils, &mask).unwrap(), &coils, &mask).unwrap();
        let lhs = inner(&na.data, &b.data);
        let rhs = inner(&a.data, &nb.data);
        assert!((lhs - rhs).norm() < 1e-12);
        let quad = inner(&a.data, &na.data);
        assert!(quad.re >= -1e-12 && quad.im.abs() < 1e-10);
    }

    #[test]
    fn encode_matches_composed_oracle() {
        // mask . naive-DFT(c . gamma); DFT realized through the already
        // oracle-verified fft2 on an independently composed path
        let v = random_volume(6, 6, 2, 77);
        let coils = make_coils(6, 6, 2, 9).unwrap();
        let mask = make_mask(6, 6, 2, 2.0, 2, 3).unwrap();
        let y = encode(&v, &coils, &mask).unwrap();
        for (ci, yi) in coils.maps.iter().zip(y.iter()) {
            let mut weighted = v.data.clone();
            for t in 0..2 {
                for i in 0..6 {
                    for j in 0..6 {
                        weighted[[i, j, t]] = v.data[[i, j, t]] * ci[[i, j]];
                    }
                }
            }
            let k = fft2(&ComplexVolume::new(weighted, Domain::Image));
            for i in 0..6 {
                for j in 0..6 {
                    for t in 0..2 {
                        let expect = k.data[[i, j, t]] * mask.mask[[i, j, t]];
                        assert!((expect - yi.data[[i, j, t]]).norm() < 1e-10);
                    }
                }
            }
        }
    }
}
