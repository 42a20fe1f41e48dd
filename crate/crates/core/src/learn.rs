//! Unrolled learning of the paper-mode cell: hyperparameters (as logs,
//! to keep them positive) and filter taps are trained by gradient
//! descent on the mean squared reconstruction error.
//!
//! Gradients are hand-written vector-Jacobian products through the
//! sweep. The convention throughout: for a complex intermediate y with
//! cotangent ybar, dL = Re<ybar, dy> with <a, b> = sum conj(a) b, so a
//! linear map y = A x backpropagates as xbar = A^H ybar.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::hankel::{
    apply_annihilation_temporal, convolve2_valid, convolve_valid, gram_apply_spatial,
    gram_apply_temporal, SpatialFilter, TemporalFilter,
};
use crate::hqs::{combined_measurement, gradient_channels, init_state, Hyperparams};
use crate::io::{FORMAT_VERSION, PSNP_MAGIC};
use crate::sampling::{CoilSet, SamplingMask};
use crate::volume::{fft2, gradient_weights, ifft2, mul_complex_grid, ComplexVolume, Domain};

/// Index order of the log-hyperparameter array.
pub const HYPER_NAMES: [&str; 5] = ["lambda1", "lambda2", "rho0", "rho1", "rho2"];

/// Learnable weights of one sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepParams {
    /// log(lambda1), log(lambda2), log(rho0), log(rho1), log(rho2)
    pub log_hyper: [f64; 5],
    pub hps_taps: Vec<Complex64>,
    pub hs_taps: Array2<Complex64>,
}

impl SweepParams {
    pub fn hyper(&self) -> Hyperparams {
        Hyperparams {
            lambda1: self.log_hyper[0].exp(),
            lambda2: self.log_hyper[1].exp(),
            rho0: self.log_hyper[2].exp(),
            rho1: self.log_hyper[3].exp(),
            rho2: self.log_hyper[4].exp(),
        }
    }

    pub fn hps_filter(&self) -> Result<TemporalFilter> {
        TemporalFilter::new(self.hps_taps.clone())
    }

    pub fn hs_filter(&self) -> Result<SpatialFilter> {
        SpatialFilter::new(self.hs_taps.clone())
    }
}

/// Weights of the whole unrolled network. One entry in `sweeps` means
/// tied weights shared by every sweep; `unroll_depth` entries means
/// untied per-sweep weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnableParams {
    pub sweeps: Vec<SweepParams>,
    pub unroll_depth: usize,
}

impl LearnableParams {
    pub fn tied(
        hyper: &Hyperparams,
        hps: &TemporalFilter,
        hs: &SpatialFilter,
        unroll_depth: usize,
    ) -> Result<Self> {
        hyper.validate()?;
        if unroll_depth == 0 {
            return Err(Error::InvalidArgument("unroll depth must be at least 1".into()));
        }
        let sweep = SweepParams {
            log_hyper: [
                hyper.lambda1.ln(),
                hyper.lambda2.ln(),
                hyper.rho0.ln(),
                hyper.rho1.ln(),
                hyper.rho2.ln(),
            ],
            hps_taps: hps.taps.clone(),
            hs_taps: hs.taps.clone(),
        };
        Ok(Self { sweeps: vec![sweep], unroll_depth })
    }

    /// Replicates tied weights into independent per-sweep copies.
    pub fn untie(&self) -> Self {
        let sweeps = (0..self.unroll_depth).map(|s| self.for_sweep(s).clone()).collect();
        Self { sweeps, unroll_depth: self.unroll_depth }
    }

    pub fn is_tied(&self) -> bool {
        self.sweeps.len() == 1
    }

    pub fn for_sweep(&self, s: usize) -> &SweepParams {
        if self.sweeps.len() == 1 {
            &self.sweeps[0]
        } else {
            &self.sweeps[s]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unroll_depth == 0 {
            return Err(Error::InvalidArgument("unroll depth must be at least 1".into()));
        }
        if self.sweeps.len() != 1 && self.sweeps.len() != self.unroll_depth {
            return Err(Error::InvalidArgument(format!(
                "expected 1 or {} sweep parameter sets, got {}",
                self.unroll_depth,
                self.sweeps.len()
            )));
        }
        for s in &self.sweeps {
            s.hps_filter()?;
            s.hs_filter()?;
            for v in s.log_hyper {
                if !v.is_finite() {
                    return Err(Error::NonFinite { context: "in a log-hyperparameter".into() });
                }
            }
        }
        Ok(())
    }
}

/// Gradient with the same shape as the parameters. Complex tap entries
/// hold (d/d Re, d/d Im) packed as a complex number.
#[derive(Debug, Clone)]
pub struct SweepGrad {
    pub log_hyper: [f64; 5],
    pub hps_taps: Vec<Complex64>,
    pub hs_taps: Array2<Complex64>,
}

impl SweepGrad {
    fn zeros_like(p: &SweepParams) -> Self {
        Self {
            log_hyper: [0.0; 5],
            hps_taps: vec![Complex64::default(); p.hps_taps.len()],
            hs_taps: Array2::zeros(p.hs_taps.dim()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub sweeps: Vec<SweepGrad>,
}

impl ParamGrad {
    pub fn zeros_like(params: &LearnableParams) -> Self {
        Self { sweeps: params.sweeps.iter().map(SweepGrad::zeros_like).collect() }
    }

    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for s in &self.sweeps {
            acc += s.log_hyper.iter().map(|v| v * v).sum::<f64>();
            acc += s.hps_taps.iter().map(|z| z.norm_sqr()).sum::<f64>();
            acc += s.hs_taps.iter().map(|z| z.norm_sqr()).sum::<f64>();
        }
        acc.sqrt()
    }
}

/// One supervised example: measurements plus the ground-truth image.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub y: Vec<ComplexVolume>,
    pub mask: SamplingMask,
    pub coils: CoilSet,
    pub truth: ComplexVolume,
}

// Everything the backward pass needs from one sweep's forward pass.
struct SweepCache {
    gamma_in: Array3<Complex64>,
    gx: Array3<Complex64>,
    gy: Array3<Complex64>,
    gs_gx: Array3<Complex64>,
    gs_gy: Array3<Complex64>,
    gt_gamma: Array3<Complex64>,
    ki: Vec<Array3<Complex64>>,
    xk: Vec<Array3<Complex64>>,
    f_xsum: Array3<Complex64>,
    f_z: Array3<Complex64>,
    grad_adj_u: Array3<Complex64>,
    num: Array3<Complex64>,
}

struct PairContext<'a> {
    y: &'a [ComplexVolume],
    mask: &'a SamplingMask,
    coils: &'a CoilSet,
    ysum_masked: Array3<Complex64>,
    wx: Array2<f64>,
    wy: Array2<f64>,
    wsq: Array2<f64>,
}

impl<'a> PairContext<'a> {
    fn build(y: &'a [ComplexVolume], mask: &'a SamplingMask, coils: &'a CoilSet) -> Result<Self> {
        let (nx, ny, _) = y[0].dims();
        let w = gradient_weights(nx, ny)?;
        let wsq = Array2::from_shape_fn((nx, ny), |(i, j)| {
            w.wx[[i, j]] * w.wx[[i, j]] + w.wy[[i, j]] * w.wy[[i, j]]
        });
        Ok(Self {
            y,
            mask,
            coils,
            ysum_masked: combined_measurement(y, coils, mask),
            wx: w.wx,
            wy: w.wy,
            wsq,
        })
    }

    fn den(&self, h: &Hyperparams, t: usize) -> Array2<f64> {
        let m = self.mask.mask.index_axis(Axis(2), t);
        Array2::from_shape_fn(self.wsq.dim(), |(i, j)| {
            m[[i, j]] + h.rho0 + h.rho1 * self.wsq[[i, j]] + h.rho2
        })
    }
}

fn mul_iw(v: &Array3<Complex64>, w: &Array2<f64>, sign: f64) -> Array3<Complex64> {
    let grid = w.mapv(|x| Complex64::new(0.0, sign * x));
    mul_complex_grid(v, &grid)
}

fn fwd_fft(data: Array3<Complex64>) -> Array3<Complex64> {
    fft2(&ComplexVolume::new(data, Domain::Image)).data
}

fn inv_fft(data: Array3<Complex64>) -> Array3<Complex64> {
    ifft2(&ComplexVolume::new(data, Domain::KSpace)).data
}

fn gram_spatial(v: &Array3<Complex64>, f: &SpatialFilter) -> Result<Array3<Complex64>> {
    let (nx, ny, nt) = v.dim();
    let mut out = Array3::zeros((nx, ny, nt));
    for t in 0..nt {
        let g = gram_apply_spatial(&v.index_axis(Axis(2), t).to_owned(), f)?;
        out.index_axis_mut(Axis(2), t).assign(&g);
    }
    Ok(out)
}

fn re_inner(a: &Array3<Complex64>, b: &Array3<Complex64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x.conj() * y).re).sum()
}

// One sweep of the paper-mode cell, caching every intermediate the
// backward pass consumes. Mirrors hqs paper-mode exactly (pinned by a
// test against hqs::reconstruct).
fn forward_sweep(
    gamma: &Array3<Complex64>,
    p: &SweepParams,
    ctx: &PairContext,
) -> Result<(Array3<Complex64>, SweepCache)> {
    let h = p.hyper();
    let hps = p.hps_filter()?;
    let hs = p.hs_filter()?;
    let (_, _, nt) = gamma.dim();

    let gamma_vol = ComplexVolume::new(gamma.clone(), Domain::Image);
    let (gx, gy) = gradient_channels(&gamma_vol);

    let c1 = 2.0 * h.lambda1 / h.rho1;
    let gs_gx = gram_spatial(&gx, &hs)?;
    let gs_gy = gram_spatial(&gy, &hs)?;
    let ux = &gx - &gs_gx.mapv(|z| z * c1);
    let uy = &gy - &gs_gy.mapv(|z| z * c1);

    let c2 = 2.0 * h.lambda2 / h.rho2;
    let gt_gamma = gram_apply_temporal(&gamma_vol, &hps)?;
    let z = gamma - &gt_gamma.mapv(|z| z * c2);

    let mut ki = Vec::with_capacity(ctx.coils.count());
    let mut xk = Vec::with_capacity(ctx.coils.count());
    let mut xsum = Array3::<Complex64>::zeros(gamma.dim());
    for (c, yi) in ctx.coils.maps.iter().zip(ctx.y) {
        let k = fwd_fft(mul_complex_grid(gamma, c));
        let mut num = yi.data.clone();
        num.zip_mut_with(&ctx.mask.mask, |v, &m| *v *= m);
        num.zip_mut_with(&k, |v, &kz| *v += kz * h.rho0);
        num.zip_mut_with(&ctx.mask.mask, |v, &m| *v /= m + h.rho0);
        let xi = inv_fft(num.clone());
        xsum += &mul_complex_grid(&xi, &c.mapv(|z| z.conj()));
        ki.push(k);
        xk.push(num);
    }
    let f_xsum = fwd_fft(xsum);
    let f_z = fwd_fft(z);

    let grad_adj_u = mul_iw(&ux, &ctx.wx, -1.0) + mul_iw(&uy, &ctx.wy, -1.0);
    let mut num = grad_adj_u.mapv(|z| z * h.rho1);
    num += &f_xsum.mapv(|z| z * h.rho0);
    num += &f_z.mapv(|z| z * h.rho2);
    num += &ctx.ysum_masked;

    let mut q = num.clone();
    for t in 0..nt {
        let den = ctx.den(&h, t);
        let mut frame = q.index_axis_mut(Axis(2), t);
        ndarray::Zip::from(&mut frame).and(&den).for_each(|v, &d| *v /= d);
    }
    let gamma_out = inv_fft(q);
    if !gamma_out.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        return Err(Error::NonFinite { context: "in the unrolled forward pass".into() });
    }
    let cache = SweepCache {
        gamma_in: gamma.clone(),
        gx,
        gy,
        gs_gx,
        gs_gy,
        gt_gamma,
        ki,
        xk,
        f_xsum,
        f_z,
        grad_adj_u,
        num,
    };
    Ok((gamma_out, cache))
}

/// Runs the unrolled network: zero-filled init then `unroll_depth`
/// paper-mode sweeps with the per-sweep (or tied) weights.
pub fn forward_unrolled(
    params: &LearnableParams,
    y: &[ComplexVolume],
    mask: &SamplingMask,
    coils: &CoilSet,
) -> Result<ComplexVolume> {
    params.validate()?;
    let ctx = PairContext::build(y, mask, coils)?;
    let state = init_state(y, mask, coils)?;
    let mut gamma = state.gamma.data;
    for s in 0..params.unroll_depth {
        let (next, _) = forward_sweep(&gamma, params.for_sweep(s), &ctx)?;
        gamma = next;
    }
    Ok(ComplexVolume::new(gamma, Domain::Image))
}

/// Mean over pairs of the per-entry mean squared error against truth.
pub fn loss(params: &LearnableParams, pairs: &[TrainingPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    let mut acc = 0.0;
    for pair in pairs {
        let out = forward_unrolled(params, &pair.y, &pair.mask, &pair.coils)?;
        out.check_same_dims(&pair.truth)?;
        let n = out.data.len() as f64;
        let d: f64 = out
            .data
            .iter()
            .zip(pair.truth.data.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        acc += d / n;
    }
    Ok(acc / pairs.len() as f64)
}

// Accumulates tap gradients for a temporal gram node w = H^T H v that
// enters the graph with cotangent wbar. Packing: grad(Re h_k) + i grad(Im h_k).
fn temporal_tap_grads(
    v: &Array3<Complex64>,
    wbar: &Array3<Complex64>,
    taps: &[Complex64],
    grads: &mut [Complex64],
) {
    let (nx, ny, nt) = v.dim();
    let l = taps.len() - 1;
    for i in 0..nx {
        for j in 0..ny {
            let vs: Vec<Complex64> = (0..nt).map(|t| v[[i, j, t]]).collect();
            let ws: Vec<Complex64> = (0..nt).map(|t| wbar[[i, j, t]]).collect();
            let u = convolve_valid(&vs, taps);
            let aw = convolve_valid(&ws, taps);
            for (k, g) in grads.iter_mut().enumerate() {
                let mut d1 = Complex64::default();
                let mut d2 = Complex64::default();
                for r in 0..nt - l {
                    d1 += ws[r + l - k].conj() * u[r];
                    d2 += aw[r].conj() * vs[r + l - k];
                }
                *g += Complex64::new((d1 + d2).re, (d1 - d2).im);
            }
        }
    }
}

// Same accumulation for a 2D spatial gram node, one frame at a time.
fn spatial_tap_grads(
    v: &Array3<Complex64>,
    wbar: &Array3<Complex64>,
    taps: &Array2<Complex64>,
    grads: &mut Array2<Complex64>,
) -> Result<()> {
    let (_, _, nt) = v.dim();
    let (ka, kb) = taps.dim();
    for t in 0..nt {
        let vf = v.index_axis(Axis(2), t).to_owned();
        let wf = wbar.index_axis(Axis(2), t).to_owned();
        let u = convolve2_valid(&vf, taps)?;
        let aw = convolve2_valid(&wf, taps)?;
        let (ox, oy) = u.dim();
        for a in 0..ka {
            for b in 0..kb {
                let mut d1 = Complex64::default();
                let mut d2 = Complex64::default();
                for p in 0..ox {
                    for q in 0..oy {
                        let shifted = [p + ka - 1 - a, q + kb - 1 - b];
                        d1 += wf[shifted].conj() * u[[p, q]];
                        d2 += aw[[p, q]].conj() * vf[shifted];
                    }
                }
                grads[[a, b]] += Complex64::new((d1 + d2).re, (d1 - d2).im);
            }
        }
    }
    Ok(())
}

// Backward pass through one sweep: consumes the output cotangent,
// accumulates this sweep's parameter gradients (in raw hyperparameter
// space; the log chain is applied by the caller), and returns the input
// cotangent.
fn backward_sweep(
    gamma_out_bar: &Array3<Complex64>,
    cache: &SweepCache,
    p: &SweepParams,
    ctx: &PairContext,
    grad: &mut SweepGrad,
) -> Result<Array3<Complex64>> {
    let h = p.hyper();
    let hps = p.hps_filter()?;
    let hs = p.hs_filter()?;
    let (_, _, nt) = cache.gamma_in.dim();
    let mut raw = [0.0f64; 5]; // d/d lambda1, lambda2, rho0, rho1, rho2

    // gamma_out = F^-1(num / den): qbar = F(gamma_out_bar)
    let qbar = fwd_fft(gamma_out_bar.clone());
    let mut numbar = qbar.clone();
    for t in 0..nt {
        let den = ctx.den(&h, t);
        let mut frame = numbar.index_axis_mut(Axis(2), t);
        ndarray::Zip::from(&mut frame).and(&den).for_each(|v, &d| *v /= d);
        // denominator sensitivities: d(num/den)/d rho = -num/den^2 * d(den)/d rho
        let q = cache.num.index_axis(Axis(2), t);
        let qb = qbar.index_axis(Axis(2), t);
        let mut s_flat = 0.0;
        let mut s_w = 0.0;
        ndarray::Zip::indexed(&q).and(&qb).for_each(|(i, j), &nv, &qbv| {
            let d = den[[i, j]];
            let r = (qbv.conj() * nv).re / (d * d);
            s_flat += r;
            s_w += r * ctx.wsq[[i, j]];
        });
        raw[2] -= s_flat; // rho0
        raw[4] -= s_flat; // rho2
        raw[3] -= s_w; // rho1
    }

    // numerator branches
    raw[3] += re_inner(&numbar, &cache.grad_adj_u);
    raw[2] += re_inner(&numbar, &cache.f_xsum);
    raw[4] += re_inner(&numbar, &cache.f_z);

    // num = rho1 (-iwx ux - iwy uy) + ...: conj(-i rho1 w) = i rho1 w
    let uxbar = mul_iw(&numbar, &ctx.wx, 1.0).mapv(|z| z * h.rho1);
    let uybar = mul_iw(&numbar, &ctx.wy, 1.0).mapv(|z| z * h.rho1);
    let xsumbar = inv_fft(numbar.clone()).mapv(|z| z * h.rho0);
    let zbar = inv_fft(numbar).mapv(|z| z * h.rho2);

    let mut gammabar = Array3::<Complex64>::zeros(cache.gamma_in.dim());

    // per-coil data-consistency branch
    for ((c, ki), xk) in ctx.coils.maps.iter().zip(&cache.ki).zip(&cache.xk) {
        let xibar = mul_complex_grid(&xsumbar, c);
        let xkbar = fwd_fft(xibar);
        // d xk / d rho0 = (ki - xk) / (M + rho0)
        let mut kibar = Array3::<Complex64>::zeros(xkbar.dim());
        let (nx, ny, ntt) = xkbar.dim();
        let mut rho0_acc = 0.0;
        for i in 0..nx {
            for j in 0..ny {
                for t in 0..ntt {
                    let d = ctx.mask.mask[[i, j, t]] + h.rho0;
                    let xb = xkbar[[i, j, t]];
                    rho0_acc += (xb.conj() * ((ki[[i, j, t]] - xk[[i, j, t]]) / d)).re;
                    kibar[[i, j, t]] = xb * (h.rho0 / d);
                }
            }
        }
        raw[2] += rho0_acc;
        gammabar += &mul_complex_grid(&inv_fft(kibar), &c.mapv(|z| z.conj()));
    }

    // low-rank branch: z = gamma - c2 Gt(gamma)
    let c2 = 2.0 * h.lambda2 / h.rho2;
    let grad_c2 = -re_inner(&zbar, &cache.gt_gamma);
    raw[1] += grad_c2 * 2.0 / h.rho2;
    raw[4] += -grad_c2 * c2 / h.rho2;
    let zbar_vol = ComplexVolume::new(zbar.clone(), Domain::Image);
    gammabar += &(&zbar - &gram_apply_temporal(&zbar_vol, &hps)?.mapv(|z| z * c2));
    let wbar_t = zbar.mapv(|z| z * (-c2));
    temporal_tap_grads(&cache.gamma_in, &wbar_t, &hps.taps, &mut grad.hps_taps);

    // sparse branch: u = g - c1 Gs(g), per channel
    let c1 = 2.0 * h.lambda1 / h.rho1;
    let grad_c1 = -(re_inner(&uxbar, &cache.gs_gx) + re_inner(&uybar, &cache.gs_gy));
    raw[0] += grad_c1 * 2.0 / h.rho1;
    raw[3] += -grad_c1 * c1 / h.rho1;
    let gxbar = &uxbar - &gram_spatial(&uxbar, &hs)?.mapv(|z| z * c1);
    let gybar = &uybar - &gram_spatial(&uybar, &hs)?.mapv(|z| z * c1);
    let wxbar_s = uxbar.mapv(|z| z * (-c1));
    let wybar_s = uybar.mapv(|z| z * (-c1));
    spatial_tap_grads(&cache.gx, &wxbar_s, &hs.taps, &mut grad.hs_taps)?;
    spatial_tap_grads(&cache.gy, &wybar_s, &hs.taps, &mut grad.hs_taps)?;

    // gradient channels: g = iw F(gamma)
    let kbar = mul_iw(&gxbar, &ctx.wx, -1.0) + mul_iw(&gybar, &ctx.wy, -1.0);
    gammabar += &inv_fft(kbar);

    // chain to log-parameters
    let hyper_vals = [h.lambda1, h.lambda2, h.rho0, h.rho1, h.rho2];
    for k in 0..5 {
        grad.log_hyper[k] += raw[k] * hyper_vals[k];
    }
    Ok(gammabar)
}

/// Loss and its gradient, summed deterministically over the pairs.
pub fn gradient(params: &LearnableParams, pairs: &[TrainingPair]) -> Result<(f64, ParamGrad)> {
    params.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    let mut grad = ParamGrad::zeros_like(params);
    let mut total_loss = 0.0;
    let npairs = pairs.len() as f64;
    for pair in pairs {
        let ctx = PairContext::build(&pair.y, &pair.mask, &pair.coils)?;
        let state = init_state(&pair.y, &pair.mask, &pair.coils)?;
        let mut gamma = state.gamma.data;
        let mut caches = Vec::with_capacity(params.unroll_depth);
        for s in 0..params.unroll_depth {
            let (next, cache) = forward_sweep(&gamma, params.for_sweep(s), &ctx)?;
            caches.push(cache);
            gamma = next;
        }
        let n = gamma.len() as f64;
        let diff = &gamma - &pair.truth.data;
        total_loss += diff.iter().map(|z| z.norm_sqr()).sum::<f64>() / n;
        // seed: d/d gamma of |gamma - truth|^2 / (n P) under Re<.,.>
        let mut cot = diff.mapv(|z| z * (2.0 / (n * npairs)));
        for s in (0..params.unroll_depth).rev() {
            let slot = if params.is_tied() { 0 } else { s };
            cot = backward_sweep(&cot, &caches[s], params.for_sweep(s), &ctx, &mut grad.sweeps[slot])?;
        }
    }
    Ok((total_loss / npairs, grad))
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr_hyper: f64,
    pub lr_taps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 50, lr_hyper: 1e-2, lr_taps: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

pub const TRAIN_CSV_HEADER: [&str; 3] = ["step", "loss", "grad_norm"];

/// Plain gradient descent. Records the pre-update loss and gradient norm
/// at every step; aborts if the loss blows past 1e6 times its initial
/// value or stops being finite.
pub fn train(
    params: &LearnableParams,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
) -> Result<(LearnableParams, Vec<TrainRecord>)> {
    let mut p = params.clone();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut initial = None;
    for step in 0..cfg.steps {
        let (l, g) = gradient(&p, pairs)?;
        let l0 = *initial.get_or_insert(l);
        if !l.is_finite() || (l0 > 0.0 && l > 1e6 * l0) {
            return Err(Error::SolverDiverged { residual: l / l0, iterations: step });
        }
        history.push(TrainRecord { step, loss: l, grad_norm: g.norm() });
        for (sp, sg) in p.sweeps.iter_mut().zip(&g.sweeps) {
            for k in 0..5 {
                sp.log_hyper[k] -= cfg.lr_hyper * sg.log_hyper[k];
            }
            for (t, gt) in sp.hps_taps.iter_mut().zip(&sg.hps_taps) {
                *t -= Complex64::new(cfg.lr_taps * gt.re, cfg.lr_taps * gt.im);
            }
            sp.hs_taps.zip_mut_with(&sg.hs_taps, |t, &gt| {
                *t -= Complex64::new(cfg.lr_taps * gt.re, cfg.lr_taps * gt.im);
            });
        }
        p.validate()?;
    }
    Ok((p, history))
}

// ---- learned-parameter file format (PSNP) ----

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated parameter file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn c64(&mut self) -> Result<Complex64> {
        Ok(Complex64::new(self.f64()?, self.f64()?))
    }
}

/// Serializes learned parameters: magic, version, unroll depth, then
/// each sweep's log-hyperparameters and filter taps.
pub fn write_params(path: &Path, params: &LearnableParams) -> Result<()> {
    params.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(PSNP_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&[0u8, 0u8]); // reserved
    put_u64(&mut buf, params.unroll_depth as u64);
    put_u64(&mut buf, params.sweeps.len() as u64);
    for s in &params.sweeps {
        for v in s.log_hyper {
            put_f64(&mut buf, v);
        }
        put_u64(&mut buf, s.hps_taps.len() as u64);
        for t in &s.hps_taps {
            put_f64(&mut buf, t.re);
            put_f64(&mut buf, t.im);
        }
        let (ka, kb) = s.hs_taps.dim();
        put_u64(&mut buf, ka as u64);
        put_u64(&mut buf, kb as u64);
        for t in s.hs_taps.iter() {
            put_f64(&mut buf, t.re);
            put_f64(&mut buf, t.im);
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<LearnableParams> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != PSNP_MAGIC {
        return Err(Error::Format("bad magic, expected PSNP".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    r.take(2)?; // reserved
    let depth = r.u64()? as usize;
    let count = r.u64()? as usize;
    let mut sweeps = Vec::with_capacity(count);
    for _ in 0..count {
        let mut log_hyper = [0.0; 5];
        for v in &mut log_hyper {
            *v = r.f64()?;
        }
        let nh = r.u64()? as usize;
        if nh < 2 || nh > 1 << 20 {
            return Err(Error::Format(format!("implausible temporal tap count {nh}")));
        }
        let mut hps_taps = Vec::with_capacity(nh);
        for _ in 0..nh {
            hps_taps.push(r.c64()?);
        }
        let ka = r.u64()? as usize;
        let kb = r.u64()? as usize;
        if ka == 0 || kb == 0 || ka * kb > 1 << 20 {
            return Err(Error::Format(format!("implausible spatial tap shape {ka}x{kb}")));
        }
        let mut hs = Array2::zeros((ka, kb));
        for a in 0..ka {
            for b in 0..kb {
                hs[[a, b]] = r.c64()?;
            }
        }
        sweeps.push(SweepParams { log_hyper, hps_taps, hs_taps: hs });
    }
    let params = LearnableParams { sweeps, unroll_depth: depth };
    params.validate()?;
    Ok(params)
}

/// Residual of a temporal filter against a stack of volumes, normalized
/// like the calibration residual: ||H h|| / ||H||_F over the stacked
/// per-pixel Hankel rows.
pub fn annihilation_residual(volumes: &[ComplexVolume], taps: &[Complex64]) -> Result<f64> {
    if taps.len() < 2 {
        return Err(Error::InvalidArgument("filter needs at least 2 taps".into()));
    }
    let filter = TemporalFilter::new(taps.to_vec())?.normalized();
    let mut res_sq = 0.0;
    let mut frob_sq = 0.0;
    let l = filter.order();
    for v in volumes {
        let (nx, ny, nt) = v.dims();
        if nt <= l {
            return Err(Error::FilterTooLarge(format!(
                "filter length {} exceeds {} frames",
                l + 1,
                nt
            )));
        }
        let r = apply_annihilation_temporal(v, &filter)?;
        res_sq += r.iter().map(|z| z.norm_sqr()).sum::<f64>();
        for i in 0..nx {
            for j in 0..ny {
                for row in 0..nt - l {
                    for c in 0..=l {
                        frob_sq += v.data[[i, j, row + c]].norm_sqr();
                    }
                }
            }
        }
    }
    if frob_sq == 0.0 {
        return Err(Error::InvalidArgument("training data is all zero".into()));
    }
    Ok((res_sq / frob_sq).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hankel::SpatialFilterBank;
    use crate::hqs::{reconstruct, FilterBank, SolverConfig, SolverMode};
    use crate::ps_model::{generate_phantom, prony_filter, spatial_filter_default, PhantomConfig};
    use crate::sampling::{encode, make_mask};
    use tempfile::tempdir;

    fn small_pair(seed: u64, noise: f64) -> TrainingPair {
        let cfg = PhantomConfig {
            seed,
            nx: 6,
            ny: 6,
            nt: 6,
            order: 2,
            noise_level: noise,
            ..Default::default()
        };
        let (truth, _) = generate_phantom(&cfg).unwrap();
        let coils = CoilSet::identity(6, 6);
        let mask = make_mask(6, 6, 6, 2.0, 2, seed + 100).unwrap();
        let y = encode(&truth, &coils, &mask).unwrap();
        TrainingPair { y, mask, coils, truth }
    }

    fn base_params(depth: usize) -> LearnableParams {
        let hps = TemporalFilter::new(vec![
            Complex64::new(0.8, 0.1),
            Complex64::new(-0.5, 0.3),
            Complex64::new(0.2, -0.4),
        ])
        .unwrap();
        LearnableParams::tied(&Hyperparams::default(), &hps, &spatial_filter_default(), depth)
            .unwrap()
    }

    #[test]
    fn forward_matches_hqs_paper_mode() {
        let pair = small_pair(3, 0.0);
        let roots = vec![Complex64::from_polar(1.0, 0.4), Complex64::from_polar(0.98, -0.6)];
        let hps = prony_filter(&roots).unwrap();
        let params =
            LearnableParams::tied(&Hyperparams::default(), &hps, &spatial_filter_default(), 4)
                .unwrap();
        let out = forward_unrolled(&params, &pair.y, &pair.mask, &pair.coils).unwrap();
        let cfg = SolverConfig {
            mode: SolverMode::Paper,
            iterations: 4,
            hyper: Hyperparams::default(),
            filters: FilterBank {
                h_ps: hps,
                h_s: SpatialFilterBank::shared(spatial_filter_default()),
            },
        };
        let (gamma, _) = reconstruct(&pair.y, &pair.mask, &pair.coils, &cfg).unwrap();
        let diff: f64 = out
            .data
            .iter()
            .zip(gamma.data.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(diff / gamma.norm() < 1e-12, "rel diff {}", diff / gamma.norm());
    }

    #[test]
    fn untied_replicates_tied() {
        let pair = small_pair(7, 1e-2);
        let params = base_params(3);
        let untied = params.untie();
        assert_eq!(untied.sweeps.len(), 3);
        let a = forward_unrolled(&params, &pair.y, &pair.mask, &pair.coils).unwrap();
        let b = forward_unrolled(&untied, &pair.y, &pair.mask, &pair.coils).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn loss_zero_on_perfect_reconstruction() {
        // full mask, lambda -> tiny: unrolled cell reproduces truth
        let cfg = PhantomConfig { seed: 5, nx: 6, ny: 6, nt: 6, order: 2, ..Default::default() };
        let (truth, _) = generate_phantom(&cfg).unwrap();
        let coils = CoilSet::identity(6, 6);
        let mask = SamplingMask::full(6, 6, 6);
        let y = encode(&truth, &coils, &mask).unwrap();
        let mut params = base_params(2);
        params.sweeps[0].log_hyper[0] = -600.0;
        params.sweeps[0].log_hyper[1] = -600.0;
        let pair = TrainingPair { y, mask, coils, truth };
        let l = loss(&params, &[pair]).unwrap();
        assert!(l < 1e-20, "loss {l}");
    }

    fn perturb(params: &LearnableParams, slot: usize, which: Coord, eps: f64) -> LearnableParams {
        let mut p = params.clone();
        match which {
            Coord::Hyper(k) => p.sweeps[slot].log_hyper[k] += eps,
            Coord::HpsRe(k) => p.sweeps[slot].hps_taps[k].re += eps,
            Coord::HpsIm(k) => p.sweeps[slot].hps_taps[k].im += eps,
            Coord::HsRe(a, b) => p.sweeps[slot].hs_taps[[a, b]].re += eps,
            Coord::HsIm(a, b) => p.sweeps[slot].hs_taps[[a, b]].im += eps,
        }
        p
    }

    #[derive(Clone, Copy, Debug)]
    enum Coord {
        Hyper(usize),
        HpsRe(usize),
        HpsIm(usize),
        HsRe(usize, usize),
        HsIm(usize, usize),
    }

    #[test]
    fn gradient_matches_central_differences() {
        let pairs = vec![small_pair(11, 1e-2), small_pair(12, 1e-2)];
        let params = base_params(2);
        let (_, g) = gradient(&params, &pairs).unwrap();

        let mut coords = vec![
            Coord::Hyper(0),
            Coord::Hyper(1),
            Coord::Hyper(2),
            Coord::Hyper(3),
            Coord::Hyper(4),
        ];
        for k in 0..3 {
            coords.push(Coord::HpsRe(k));
            coords.push(Coord::HpsIm(k));
        }
        for a in 0..3 {
            for b in 0..3 {
                coords.push(Coord::HsRe(a, b));
                coords.push(Coord::HsIm(a, b));
            }
        }
        let eps = 1e-5;
        for c in coords {
            let lp = loss(&perturb(&params, 0, c, eps), &pairs).unwrap();
            let lm = loss(&perturb(&params, 0, c, -eps), &pairs).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            let an = match c {
                Coord::Hyper(k) => g.sweeps[0].log_hyper[k],
                Coord::HpsRe(k) => g.sweeps[0].hps_taps[k].re,
                Coord::HpsIm(k) => g.sweeps[0].hps_taps[k].im,
                Coord::HsRe(a, b) => g.sweeps[0].hs_taps[[a, b]].re,
                Coord::HsIm(a, b) => g.sweeps[0].hs_taps[[a, b]].im,
            };
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-4,
                "{c:?}: fd {fd:.10e} vs analytic {an:.10e}"
            );
        }
    }

    #[test]
    fn gradient_matches_central_differences_untied() {
        let pairs = vec![small_pair(21, 1e-2)];
        let params = base_params(2).untie();
        let (_, g) = gradient(&params, &pairs).unwrap();
        let eps = 1e-5;
        for slot in 0..2 {
            for c in [Coord::Hyper(0), Coord::Hyper(4), Coord::HpsRe(1), Coord::HsIm(1, 2)] {
                let lp = loss(&perturb(&params, slot, c, eps), &pairs).unwrap();
                let lm = loss(&perturb(&params, slot, c, -eps), &pairs).unwrap();
                let fd = (lp - lm) / (2.0 * eps);
                let an = match c {
                    Coord::Hyper(k) => g.sweeps[slot].log_hyper[k],
                    Coord::HpsRe(k) => g.sweeps[slot].hps_taps[k].re,
                    Coord::HpsIm(k) => g.sweeps[slot].hps_taps[k].im,
                    Coord::HsRe(a, b) => g.sweeps[slot].hs_taps[[a, b]].re,
                    Coord::HsIm(a, b) => g.sweeps[slot].hs_taps[[a, b]].im,
                };
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "slot {slot} {c:?}: fd {fd:.10e} vs analytic {an:.10e}"
                );
            }
        }
    }

    #[test]
    fn gradient_is_deterministic() {
        let pairs = vec![small_pair(31, 1e-2)];
        let params = base_params(2);
        let (l1, g1) = gradient(&params, &pairs).unwrap();
        let (l2, g2) = gradient(&params, &pairs).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1.sweeps[0].log_hyper, g2.sweeps[0].log_hyper);
        assert_eq!(g1.sweeps[0].hps_taps, g2.sweeps[0].hps_taps);
        assert_eq!(g1.sweeps[0].hs_taps, g2.sweeps[0].hs_taps);
    }

    #[test]
    fn training_reduces_loss() {
        let pairs = vec![small_pair(41, 1e-2), small_pair(42, 1e-2)];
        let params = base_params(3);
        let cfg = TrainConfig { steps: 20, ..Default::default() };
        let (trained, history) = train(&params, &pairs, &cfg).unwrap();
        assert_eq!(history.len(), 20);
        let first = history.first().unwrap().loss;
        let last = history.last().unwrap().loss;
        assert!(last < first, "loss {first} -> {last}");
        let final_loss = loss(&trained, &pairs).unwrap();
        assert!(final_loss <= last * (1.0 + 1e-12));
    }

    #[test]
    fn params_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("weights.psnp");
        let params = base_params(4).untie();
        write_params(&path, &params).unwrap();
        let back = read_params(&path).unwrap();
        assert_eq!(params, back);
        // corrupt the magic
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_params(&path).is_err());
    }

    #[test]
    fn annihilation_residual_cases() {
        let cfg = PhantomConfig { seed: 9, nx: 6, ny: 6, nt: 8, order: 2, ..Default::default() };
        let (truth, roots) = generate_phantom(&cfg).unwrap();
        let exact = prony_filter(&roots).unwrap();
        let r = annihilation_residual(&[truth.clone()], &exact.taps).unwrap();
        assert!(r < 1e-12, "exact filter residual {r}");
        let bad = [Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)];
        let rb = annihilation_residual(&[truth], &bad).unwrap();
        assert!(rb > 1e-3);
    }
}
