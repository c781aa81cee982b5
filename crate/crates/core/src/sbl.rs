//! Per-subarray multipath estimation by sparse Bayesian learning.
//!
//! The received subarray snapshot `y` (element-major, `M·N` samples) is
//! modeled as `y = Φ(θ) w + noise`, where every column of `Φ` is a unit-norm
//! wideband plane-wave atom with continuous parameters `θ = (delay, az, el)`,
//! `w_k ~ CN(0, γ_k)` and the noise is white with variance `σ²`.
//!
//! Components are added greedily. Each pass scans a coarse dictionary for the
//! atom with the largest marginal-likelihood gain, refines its continuous
//! parameters, re-estimates all `γ_k` and `σ²`, and prunes components whose
//! SNR does not clear the detection floor. A pass is accepted only if the log
//! evidence increases, so the accepted sequence is monotone.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::array::{local_angles, local_direction, phase_ramp, plane_wave_atom, ArrayGeometry, Subarray};
use crate::error::{Error, Result};
use crate::synth::FreqGrid;
use crate::vec3::Vec3;
use crate::SPEED_OF_LIGHT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SblConfig {
    /// Hard budget of components per subarray.
    pub k_max: usize,
    /// Bandwidth of the estimation sub-band [Hz].
    pub band_hz: f64,
    /// Relative log-evidence change below which the loop stops.
    pub convergence_tol: f64,
    pub max_iters: usize,
    /// Components whose SNR is less than this many dB above the noise-only
    /// peak level are pruned.
    pub prune_threshold_db: f64,
    /// Coarse delay step is `1 / (delay_oversampling · B)`.
    pub delay_oversampling: usize,
    /// Coarse angle step [rad]; `None` uses `2 / side` for a square tile.
    pub angle_step: Option<f64>,
    /// Coordinate-ascent rounds per refinement.
    pub refine_rounds: usize,
    /// Golden-section iterations per parameter and round.
    pub golden_iters: usize,
}

impl Default for SblConfig {
    fn default() -> Self {
        Self {
            k_max: 20,
            band_hz: 500e6,
            convergence_tol: 1e-4,
            max_iters: 200,
            prune_threshold_db: 3.0,
            delay_oversampling: 2,
            angle_step: None,
            refine_rounds: 3,
            golden_iters: 30,
        }
    }
}

impl SblConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        if !(self.band_hz > 0.0) {
            return Err(Error::Config(format!("band_hz must be positive, got {}", self.band_hz)));
        }
        if self.delay_oversampling == 0 || self.refine_rounds == 0 || self.golden_iters == 0 {
            return Err(Error::Config("oversampling, refine_rounds and golden_iters must be positive".into()));
        }
        if let Some(s) = self.angle_step {
            if !(s > 0.0) {
                return Err(Error::Config(format!("angle_step must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcEstimate {
    pub delay: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub amplitude: Complex64,
    /// Prior variance.
    pub gamma: f64,
    /// Integrated SNR `|amplitude|² / σ²` in dB.
    pub component_snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubarrayResult {
    pub subarray_index: usize,
    pub estimates: Vec<MpcEstimate>,
    pub noise_var: f64,
    pub residual_energy_frac: f64,
    pub total_energy: f64,
    pub log_evidence: f64,
    pub iterations: usize,
}

/// Noise-only peak level in dB: the largest of `L` unit-variance
/// exponential correlations is about `ln L`.
pub fn detection_floor_db(samples: usize) -> f64 {
    10.0 * (samples.max(3) as f64).ln().log10()
}

// ---------------------------------------------------------------------------
// small dense Hermitian algebra

/// Cholesky factor `L` (row-major, lower) of a Hermitian positive-definite
/// matrix, or `None` when it is not numerically positive definite.
fn cholesky(a: &[Complex64], k: usize) -> Option<Vec<Complex64>> {
    let mut l = vec![Complex64::new(0.0, 0.0); k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut sum = a[i * k + j];
            for p in 0..j {
                sum -= l[i * k + p] * l[j * k + p].conj();
            }
            if i == j {
                if !(sum.re > 0.0) || !sum.re.is_finite() {
                    return None;
                }
                l[i * k + i] = Complex64::new(sum.re.sqrt(), 0.0);
            } else {
                l[i * k + j] = sum / l[j * k + j].re;
            }
        }
    }
    Some(l)
}

/// Inverse and log-determinant from a Cholesky factor.
fn cholesky_inverse(l: &[Complex64], k: usize) -> (Vec<Complex64>, f64) {
    let zero = Complex64::new(0.0, 0.0);
    // inverse of L by forward substitution
    let mut linv = vec![zero; k * k];
    for i in 0..k {
        linv[i * k + i] = Complex64::new(1.0 / l[i * k + i].re, 0.0);
        for j in 0..i {
            let mut sum = zero;
            for p in j..i {
                sum -= l[i * k + p] * linv[p * k + j];
            }
            linv[i * k + j] = sum / l[i * k + i].re;
        }
    }
    // A⁻¹ = L⁻ᴴ L⁻¹
    let mut inv = vec![zero; k * k];
    for i in 0..k {
        for j in 0..k {
            let mut sum = zero;
            for p in i.max(j)..k {
                sum += linv[p * k + i].conj() * linv[p * k + j];
            }
            inv[i * k + j] = sum;
        }
    }
    let logdet = 2.0 * (0..k).map(|i| l[i * k + i].re.ln()).sum::<f64>();
    (inv, logdet)
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn energy(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

// ---------------------------------------------------------------------------
// atoms and the coarse dictionary

/// Per-subarray geometry needed to evaluate atoms quickly.
struct AtomContext<'a> {
    sub: &'a Subarray,
    arr: &'a ArrayGeometry,
    freqs: FreqGrid,
    n: usize,
    scale: f64,
}

impl<'a> AtomContext<'a> {
    fn new(sub: &'a Subarray, arr: &'a ArrayGeometry, freqs: FreqGrid) -> Self {
        let n = freqs.count;
        Self {
            sub,
            arr,
            freqs,
            n,
            scale: 1.0 / ((sub.len() * n) as f64).sqrt(),
        }
    }

    fn len(&self) -> usize {
        self.sub.len() * self.n
    }

    fn lags(&self, az: f64, el: f64) -> Vec<f64> {
        let u = self.arr.frame.to_global(local_direction(az, el));
        self.sub
            .element_indices
            .iter()
            .map(|&k| (self.arr.element_positions[k] - self.sub.centroid).dot(u) / SPEED_OF_LIGHT)
            .collect()
    }

    fn atom(&self, p: &Params) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.len());
        for lag in self.lags(p.azimuth, p.elevation) {
            let (mut rot, step) = phase_ramp(self.freqs.start, self.freqs.step, lag - p.delay);
            rot *= self.scale;
            for _ in 0..self.n {
                out.push(rot);
                rot *= step;
            }
        }
        out
    }

    /// `atom(p)ᴴ v` without materializing the atom.
    fn correlate(&self, p: &Params, v: &[Complex64]) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (m, lag) in self.lags(p.azimuth, p.elevation).into_iter().enumerate() {
            let (mut rot, step) = phase_ramp(self.freqs.start, self.freqs.step, p.delay - lag);
            for x in &v[m * self.n..(m + 1) * self.n] {
                acc += rot * x;
                rot *= step;
            }
        }
        acc * self.scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Params {
    delay: f64,
    azimuth: f64,
    elevation: f64,
}

/// Coarse (delay, az, el) dictionary. Delays come from a zero-padded inverse
/// DFT over frequency, so each angle pair costs one FFT per scanned vector.
struct Dictionary {
    angles: Vec<(f64, f64)>,
    /// Per angle: `exp(−j2π f_n lag_m)`, element-major.
    steer: Vec<Vec<Complex64>>,
    fft_len: usize,
    delay_step: f64,
    /// `exp(j2π f_0 τ_k)` for every delay bin.
    start_phase: Vec<Complex64>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    angle_step: f64,
}

fn angle_axis(step: f64) -> Vec<f64> {
    let k = (FRAC_PI_2 / step + 1e-9).floor() as i64;
    (-k..=k).map(|i| i as f64 * step).collect()
}

impl Dictionary {
    fn new(ctx: &AtomContext<'_>, cfg: &SblConfig) -> Self {
        let side = (ctx.sub.len() as f64).sqrt().round().max(1.0);
        let angle_step = cfg.angle_step.unwrap_or(2.0 / side);
        let az_axis = angle_axis(angle_step);
        let el_axis = angle_axis(angle_step);
        let angles: Vec<(f64, f64)> = el_axis
            .iter()
            .flat_map(|&el| az_axis.iter().map(move |&az| (az, el)))
            .collect();
        let freqs = ctx.freqs.freqs();
        let steer = angles
            .iter()
            .map(|&(az, el)| {
                ctx.lags(az, el)
                    .into_iter()
                    .flat_map(|lag| freqs.iter().map(move |&f| Complex64::from_polar(1.0, -2.0 * PI * f * lag)))
                    .collect()
            })
            .collect();
        let fft_len = cfg.delay_oversampling * ctx.n;
        let delay_step = 1.0 / (fft_len as f64 * ctx.freqs.step);
        let start_phase = (0..fft_len)
            .map(|k| Complex64::from_polar(1.0, 2.0 * PI * ctx.freqs.start * k as f64 * delay_step))
            .collect();
        let fft = FftPlanner::new().plan_fft_inverse(fft_len);
        Self {
            angles,
            steer,
            fft_len,
            delay_step,
            start_phase,
            fft,
            angle_step,
        }
    }

    fn size(&self) -> usize {
        self.angles.len() * self.fft_len
    }

    fn params(&self, idx: usize) -> Params {
        let (a, k) = (idx / self.fft_len, idx % self.fft_len);
        Params {
            delay: k as f64 * self.delay_step,
            azimuth: self.angles[a].0,
            elevation: self.angles[a].1,
        }
    }

    /// `φᴴ v` for every dictionary atom, indexed `angle * fft_len + delay`.
    fn scan(&self, ctx: &AtomContext<'_>, v: &[Complex64]) -> Vec<Complex64> {
        let n = ctx.n;
        let mut out = Vec::with_capacity(self.size());
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_len];
        for steer in &self.steer {
            buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for (m, chunk) in v.chunks_exact(n).enumerate() {
                let s = &steer[m * n..(m + 1) * n];
                for ((b, x), w) in buf.iter_mut().zip(chunk).zip(s) {
                    *b += x * w;
                }
            }
            self.fft.process(&mut buf);
            out.extend(buf.iter().zip(&self.start_phase).map(|(z, p)| z * p * ctx.scale));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// model state

#[derive(Debug, Clone)]
struct Model {
    params: Vec<Params>,
    atoms: Vec<Vec<Complex64>>,
    gammas: Vec<f64>,
    noise_var: f64,
    /// Gram matrix `ΦᴴΦ`, row-major.
    gram: Vec<Complex64>,
    /// `Φᴴ y`
    proj: Vec<Complex64>,
}

struct Posterior {
    mean: Vec<Complex64>,
    /// `(σ²Γ⁻¹ + G)⁻¹`
    kinv: Vec<Complex64>,
    log_evidence: f64,
}

impl Model {
    fn empty(noise_var: f64) -> Self {
        Self {
            params: Vec::new(),
            atoms: Vec::new(),
            gammas: Vec::new(),
            noise_var,
            gram: Vec::new(),
            proj: Vec::new(),
        }
    }

    fn k(&self) -> usize {
        self.params.len()
    }

    fn rebuild(&mut self, y: &[Complex64]) {
        let k = self.k();
        self.gram = vec![Complex64::new(0.0, 0.0); k * k];
        for i in 0..k {
            for j in i..k {
                let g = dot(&self.atoms[i], &self.atoms[j]);
                self.gram[i * k + j] = g;
                self.gram[j * k + i] = g.conj();
            }
        }
        self.proj = self.atoms.iter().map(|a| dot(a, y)).collect();
    }

    fn push(&mut self, ctx: &AtomContext<'_>, p: Params, gamma: f64, y: &[Complex64]) {
        self.params.push(p);
        self.atoms.push(ctx.atom(&p));
        self.gammas.push(gamma);
        self.rebuild(y);
    }

    fn remove(&mut self, idx: &[usize], y: &[Complex64]) {
        if idx.is_empty() {
            return;
        }
        let keep: Vec<usize> = (0..self.k()).filter(|i| !idx.contains(i)).collect();
        self.params = keep.iter().map(|&i| self.params[i]).collect();
        self.atoms = keep.iter().map(|&i| self.atoms[i].clone()).collect();
        self.gammas = keep.iter().map(|&i| self.gammas[i]).collect();
        self.rebuild(y);
    }

    fn posterior(&self, y_energy: f64, samples: usize) -> Option<Posterior> {
        let k = self.k();
        let s2 = self.noise_var;
        let mut kmat = self.gram.clone();
        for j in 0..k {
            kmat[j * k + j] += s2 / self.gammas[j];
        }
        let l = cholesky(&kmat, k)?;
        let (kinv, logdet_k) = cholesky_inverse(&l, k);
        let mean: Vec<Complex64> = (0..k)
            .map(|i| (0..k).map(|j| kinv[i * k + j] * self.proj[j]).sum())
            .collect();
        let quad: f64 = self.proj.iter().zip(&mean).map(|(b, m)| (b.conj() * m).re).sum();
        let log_det_c = (samples - k) as f64 * s2.ln() + self.gammas.iter().map(|g| g.ln()).sum::<f64>() + logdet_k;
        let data_term = (y_energy - quad).max(0.0) / s2;
        let log_evidence = -(samples as f64) * PI.ln() - log_det_c - data_term;
        Some(Posterior {
            mean,
            kinv,
            log_evidence,
        })
    }

    /// `‖y − Φμ‖²` from cached Gram quantities.
    fn residual_energy(&self, y: &[Complex64], mean: &[Complex64]) -> f64 {
        let mut r = y.to_vec();
        for (a, m) in self.atoms.iter().zip(mean) {
            for (ri, ai) in r.iter_mut().zip(a) {
                *ri -= ai * m;
            }
        }
        energy(&r)
    }
}

/// Everything fixed for one estimation run.
struct Estimator<'a> {
    ctx: AtomContext<'a>,
    cfg: &'a SblConfig,
    y: &'a [Complex64],
    y_energy: f64,
    samples: usize,
    noise_floor: f64,
    delay_span: f64,
    prune_db: f64,
}

impl<'a> Estimator<'a> {
    /// Sequential per-component variance updates with noise re-estimation,
    /// iterated to a fixed point. Components whose leave-one-out evidence
    /// gain vanishes are dropped.
    fn update_hyper(&self, model: &mut Model) -> Option<Posterior> {
        for _ in 0..200 {
            let old_gammas = model.gammas.clone();
            let old_noise = model.noise_var;
            let mut drop = Vec::new();
            for j in 0..model.k() {
                let post = model.posterior(self.y_energy, self.samples)?;
                let k = model.k();
                let sigma_jj = model.noise_var * post.kinv[j * k + j].re;
                let g = model.gammas[j];
                let s = 1.0 / sigma_jj - 1.0 / g;
                let q = post.mean[j] / sigma_jj;
                let q2 = q.norm_sqr();
                if s > 0.0 && q2 > s {
                    model.gammas[j] = (q2 - s) / (s * s);
                } else {
                    drop.push(j);
                    model.gammas[j] = 1e-300_f64.max(g * 1e-12);
                }
            }
            model.remove(&drop, self.y);

            let post = model.posterior(self.y_energy, self.samples)?;
            let k = model.k();
            let dof: f64 = (0..k)
                .map(|j| model.noise_var * post.kinv[j * k + j].re / model.gammas[j])
                .sum::<f64>();
            let res = model.residual_energy(self.y, &post.mean);
            let denom = (self.samples as f64 - k as f64 + dof).max(1.0);
            model.noise_var = (res / denom).max(self.noise_floor);

            let settled = drop.is_empty()
                && (model.noise_var - old_noise).abs() <= 1e-12 * old_noise
                && model
                    .gammas
                    .iter()
                    .zip(&old_gammas)
                    .all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs());
            if settled {
                break;
            }
        }
        model.posterior(self.y_energy, self.samples)
    }

    fn snr_db(&self, amplitude: Complex64, noise_var: f64) -> f64 {
        10.0 * (amplitude.norm_sqr() / noise_var).log10()
    }

    fn prune(&self, model: &mut Model, post: &Posterior) -> bool {
        let drop: Vec<usize> = (0..model.k())
            .filter(|&j| self.snr_db(post.mean[j], model.noise_var) < self.prune_db)
            .collect();
        let any = !drop.is_empty();
        model.remove(&drop, self.y);
        any
    }

    /// Best dictionary atom by marginal-likelihood gain against the current
    /// model; `None` when no atom improves the evidence.
    fn best_candidate(&self, dict: &Dictionary, model: &Model, post: &Posterior) -> Option<(Params, f64)> {
        let k = model.k();
        let s2 = model.noise_var;
        let cy = dict.scan(&self.ctx, self.y);
        let cphi: Vec<Vec<Complex64>> = model.atoms.iter().map(|a| dict.scan(&self.ctx, a)).collect();
        let mut best: Option<(usize, f64, f64)> = None;
        let mut c = vec![Complex64::new(0.0, 0.0); k];
        for idx in 0..dict.size() {
            for j in 0..k {
                c[j] = cphi[j][idx];
            }
            let mut proj = Complex64::new(0.0, 0.0);
            let mut quad = 0.0;
            for a in 0..k {
                proj += c[a] * post.mean[a];
                let mut row = Complex64::new(0.0, 0.0);
                for b in 0..k {
                    row += post.kinv[a * k + b] * c[b].conj();
                }
                quad += (c[a] * row).re;
            }
            let s_raw = 1.0 - quad;
            if s_raw < 1e-6 {
                continue;
            }
            let s = s_raw / s2;
            let q = (cy[idx] - proj) / s2;
            let gain = q.norm_sqr() / s;
            if gain > 1.0 && best.is_none_or(|(_, g, _)| gain > g) {
                best = Some((idx, gain, (q.norm_sqr() - s) / (s * s)));
            }
        }
        best.map(|(idx, _, gamma)| (dict.params(idx), gamma))
    }

    /// Coordinate ascent of `|φ(θ)ᴴ r|²` with golden-section line searches.
    ///
    /// Directions are searched in the local direction cosines `(u_y, u_z)`:
    /// element phases are linear in them, so the two coordinates are nearly
    /// decoupled even far off boresight, unlike `(az, el)`.
    fn refine(&self, start: Params, r: &[Complex64], steps: (f64, f64), rounds: usize) -> Params {
        let objective = |p: &Params| self.ctx.correlate(p, r).norm_sqr();
        let to_params = |x: [f64; 3]| {
            let (mut v, mut w) = (x[1], x[2]);
            let n = v.hypot(w);
            if n > 1.0 {
                v /= n;
                w /= n;
            }
            let (az, el) = local_angles(Vec3::new((1.0 - v * v - w * w).max(0.0).sqrt(), v, w));
            Params {
                delay: x[0].clamp(0.0, self.delay_span),
                azimuth: az,
                elevation: el,
            }
        };
        let d = local_direction(start.azimuth, start.elevation);
        let mut x = [start.delay, d.y, d.z];
        let mut best_val = objective(&start);
        let (mut h_delay, mut h_angle) = steps;
        for _ in 0..rounds {
            for coord in 0..3 {
                let h = if coord == 0 { h_delay } else { h_angle };
                let with = |t: f64| {
                    let mut c = x;
                    c[coord] = t;
                    c
                };
                let (t, v) = golden_max(|t| objective(&to_params(with(t))), x[coord] - h, x[coord] + h, self.cfg.golden_iters);
                if v > best_val {
                    x = with(t);
                    best_val = v;
                }
            }
            h_delay *= 0.5;
            h_angle *= 0.5;
        }
        // Golden-section comparisons tie at rounding level near the optimum,
        // so its arg-max is only stable to ~sqrt(eps). Finish with parabolic
        // vertex steps, which move continuously with the data.
        for _ in 0..2 {
            for coord in 0..3 {
                let delta = 1e-2 * if coord == 0 { steps.0 } else { steps.1 };
                let at = |t: f64| {
                    let mut c = x;
                    c[coord] += t;
                    objective(&to_params(c))
                };
                let (fm, f0, fp) = (at(-delta), at(0.0), at(delta));
                let curv = fp - 2.0 * f0 + fm;
                if curv < 0.0 {
                    let step = (0.5 * delta * (fm - fp) / curv).clamp(-delta, delta);
                    x[coord] += step;
                }
            }
        }
        to_params(x)
    }

    fn residual_without(&self, model: &Model, mean: &[Complex64], skip: usize) -> Vec<Complex64> {
        let mut r = self.y.to_vec();
        for (i, (a, m)) in model.atoms.iter().zip(mean).enumerate() {
            if i == skip {
                continue;
            }
            for (ri, ai) in r.iter_mut().zip(a) {
                *ri -= ai * m;
            }
        }
        r
    }

    fn refine_component(&self, model: &mut Model, mean: &[Complex64], j: usize, steps: (f64, f64), rounds: usize) {
        let r = self.residual_without(model, mean, j);
        let p = self.refine(model.params[j], &r, steps, rounds);
        model.params[j] = p;
        model.atoms[j] = self.ctx.atom(&p);
        model.rebuild(self.y);
    }

    /// One SAGE sweep: every component is re-fitted to the data with all
    /// other components subtracted.
    fn sweep(&self, model: &mut Model, steps: (f64, f64)) {
        for j in 0..model.k() {
            let Some(p) = model.posterior(self.y_energy, self.samples) else { return };
            self.refine_component(model, &p.mean, j, steps, 2);
        }
    }

    /// Hyperparameter fixed point followed by pruning.
    fn settle(&self, model: &mut Model) -> Option<Posterior> {
        let p = self.update_hyper(model)?;
        if self.prune(model, &p) {
            self.update_hyper(model)
        } else {
            Some(p)
        }
    }
}

fn golden_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64, iters: usize) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Estimate the multipath components of one subarray snapshot.
///
/// `y` is element-major over `sub.element_indices` and `freqs`.
pub fn sbl_estimate(
    y: &[Complex64],
    sub: &Subarray,
    arr: &ArrayGeometry,
    freqs: &FreqGrid,
    cfg: &SblConfig,
) -> Result<SubarrayResult> {
    cfg.validate()?;
    let samples = sub.len() * freqs.count;
    if y.len() != samples {
        return Err(Error::Dimension(format!(
            "snapshot has {} samples, subarray {} x {} frequencies needs {samples}",
            y.len(),
            sub.len(),
            freqs.count
        )));
    }
    if let Some(i) = y.iter().position(|z| !(z.re.is_finite() && z.im.is_finite())) {
        return Err(Error::NonFinite(format!("snapshot sample {i} of subarray {}", sub.index)));
    }
    let y_energy = energy(y);
    if y_energy == 0.0 {
        return Ok(SubarrayResult {
            subarray_index: sub.index,
            estimates: Vec::new(),
            noise_var: f64::MIN_POSITIVE,
            residual_energy_frac: 0.0,
            total_energy: 0.0,
            log_evidence: 0.0,
            iterations: 0,
        });
    }

    // Estimate on a phase-canonical copy so a global rotation of `y` only
    // rotates the amplitudes, up to rounding.
    let peak = y
        .iter()
        .enumerate()
        .fold((0, 0.0), |best, (i, z)| if z.norm_sqr() > best.1 { (i, z.norm_sqr()) } else { best })
        .0;
    let phase = y[peak] / y[peak].norm();
    let canon: Vec<Complex64> = y.iter().map(|z| z * phase.conj()).collect();
    let y = &canon[..];

    let ctx = AtomContext::new(sub, arr, *freqs);
    let dict = Dictionary::new(&ctx, cfg);
    let mean_power = y_energy / samples as f64;
    let est = Estimator {
        ctx,
        cfg,
        y,
        y_energy,
        samples,
        noise_floor: mean_power * 1e-14,
        delay_span: 1.0 / freqs.step,
        prune_db: cfg.prune_threshold_db + detection_floor_db(samples),
    };
    let coarse_steps = (dict.delay_step, dict.angle_step);
    let fine_steps = (coarse_steps.0 / 4.0, coarse_steps.1 / 4.0);

    let mut model = Model::empty(mean_power);
    let mut post = model
        .posterior(y_energy, samples)
        .ok_or_else(|| Error::Invariant("empty model posterior".into()))?;
    let mut iterations = 0;

    while iterations < cfg.max_iters && model.k() < cfg.k_max {
        iterations += 1;
        let Some((cand, gamma)) = est.best_candidate(&dict, &model, &post) else {
            break;
        };
        let mut trial = model.clone();
        trial.push(&est.ctx, cand, gamma, y);
        let new = trial.k() - 1;
        if let Some(p) = trial.posterior(y_energy, samples) {
            est.refine_component(&mut trial, &p.mean, new, coarse_steps, cfg.refine_rounds);
        }
        if est.update_hyper(&mut trial).is_none() {
            break;
        }
        est.sweep(&mut trial, fine_steps);
        let Some(p) = est.settle(&mut trial) else { break };
        if !(p.log_evidence > post.log_evidence) {
            break;
        }
        let rel = (p.log_evidence - post.log_evidence) / post.log_evidence.abs().max(1e-300);
        debug_assert!(p.log_evidence >= post.log_evidence);
        model = trial;
        post = p;
        if rel < cfg.convergence_tol {
            break;
        }
    }

    // polish: further sweeps while they still raise the evidence
    for _ in 0..cfg.refine_rounds {
        if model.k() == 0 {
            break;
        }
        let mut trial = model.clone();
        est.sweep(&mut trial, fine_steps);
        match est.settle(&mut trial) {
            Some(p) if p.log_evidence > post.log_evidence => {
                model = trial;
                post = p;
            }
            _ => break,
        }
    }

    let estimates: Vec<MpcEstimate> = (0..model.k())
        .map(|j| MpcEstimate {
            delay: model.params[j].delay,
            azimuth: model.params[j].azimuth,
            elevation: model.params[j].elevation,
            amplitude: post.mean[j] * phase,
            gamma: model.gammas[j],
            component_snr_db: est.snr_db(post.mean[j], model.noise_var),
        })
        .collect();
    let residual = model.residual_energy(y, &post.mean);
    Ok(SubarrayResult {
        subarray_index: sub.index,
        estimates,
        noise_var: model.noise_var,
        residual_energy_frac: (residual / y_energy).clamp(0.0, 1.0),
        total_energy: y_energy,
        log_evidence: post.log_evidence,
        iterations,
    })
}

/// `Σ_k amplitude_k · atom_k`, element-major.
pub fn reconstruct(result: &SubarrayResult, sub: &Subarray, arr: &ArrayGeometry, freqs: &FreqGrid) -> Vec<Complex64> {
    let f = freqs.freqs();
    let mut out = vec![Complex64::new(0.0, 0.0); sub.len() * f.len()];
    for e in &result.estimates {
        let atom = plane_wave_atom(sub, arr, &f, e.delay, e.azimuth, e.elevation);
        for (o, a) in out.iter_mut().zip(atom) {
            *o += a * e.amplitude;
        }
    }
    out
}

/// Fraction of the snapshot energy carried by estimate `k`.
pub fn component_energy_frac(result: &SubarrayResult, k: usize) -> Result<f64> {
    if result.total_energy <= 0.0 {
        return Err(Error::Invariant(format!("subarray {} has zero energy", result.subarray_index)));
    }
    let e = result.estimates.get(k).ok_or_else(|| {
        Error::Dimension(format!(
            "estimate {k} out of range ({} estimates)",
            result.estimates.len()
        ))
    })?;
    Ok(e.amplitude.norm_sqr() / result.total_energy)
}
