//! Frequency-domain channel synthesis.
//!
//! The channel at element `m` and frequency `f_n` is the visibility-gated sum
//! of specular components, each with its own per-element delay, direction and
//! amplitude, plus an optional stochastic diffuse tail and white noise:
//!
//! `H[m,n] = Σ_k v[k,m] α[k,m] exp(−j2π f_n τ[k,m]) + D[m,n] + W[m,n]`
//!
//! Amplitudes are evaluated once at the carrier and held flat over the band.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{antenna_gain, local_angles, phase_ramp, AntennaPattern, ArrayFrame, ArrayGeometry};
use crate::error::{Error, Result};
use crate::geometry::{compute_image_sources, trace_specular_path, EnvironmentModel, ImageSource, SpecularPath, VisibilityMask, ComponentVisibility};
use crate::vec3::Vec3;
use crate::SPEED_OF_LIGHT;

/// Uniform frequency grid `start + n·step`, `n < count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreqGrid {
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl FreqGrid {
    pub fn new(start: f64, step: f64, count: usize) -> Result<Self> {
        if count < 2 {
            return Err(Error::Config(format!("frequency grid needs at least 2 points, got {count}")));
        }
        if !(step > 0.0 && step.is_finite() && start.is_finite()) {
            return Err(Error::Config(format!("invalid frequency grid start={start} step={step}")));
        }
        Ok(Self { start, step, count })
    }

    /// `count` points of spacing `bandwidth / count`, symmetric about `f_c`.
    pub fn centered(f_c: f64, bandwidth: f64, count: usize) -> Result<Self> {
        if !(bandwidth > 0.0) {
            return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth}")));
        }
        let step = bandwidth / count as f64;
        Self::new(f_c - step * (count as f64 - 1.0) / 2.0, step, count)
    }

    pub fn freqs(&self) -> Vec<f64> {
        (0..self.count).map(|n| self.freq(n)).collect()
    }

    pub fn freq(&self, n: usize) -> f64 {
        self.start + n as f64 * self.step
    }

    /// Occupied bandwidth `count · step`.
    pub fn bandwidth(&self) -> f64 {
        self.count as f64 * self.step
    }

    pub fn center(&self) -> f64 {
        self.start + self.step * (self.count as f64 - 1.0) / 2.0
    }

    pub fn min(&self) -> f64 {
        self.start
    }

    pub fn max(&self) -> f64 {
        self.freq(self.count - 1)
    }

    /// Contiguous index range of points within `[f_c − bw/2, f_c + bw/2]`.
    pub fn sub_band(&self, f_c: f64, bandwidth: f64) -> Result<std::ops::Range<usize>> {
        let lo = f_c - bandwidth / 2.0;
        let hi = f_c + bandwidth / 2.0;
        let tol = 1e-9 * self.step;
        let first = (0..self.count).find(|&n| self.freq(n) >= lo - tol);
        let last = (0..self.count).rev().find(|&n| self.freq(n) <= hi + tol);
        match (first, last) {
            (Some(a), Some(b)) if b >= a + 1 => Ok(a..b + 1),
            _ => Err(Error::Config(format!(
                "sub-band {:.3} GHz ± {:.1} MHz has fewer than 2 points in [{:.3}, {:.3}] GHz",
                f_c / 1e9,
                bandwidth / 2e6,
                self.min() / 1e9,
                self.max() / 1e9
            ))),
        }
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        Self::new(self.freq(range.start), self.step, range.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMetadata {
    pub f_c: f64,
    pub bandwidth: f64,
    pub scenario: String,
    pub seed: u64,
}

/// Complex frequency response per array element, `M × N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTensor {
    pub freqs: FreqGrid,
    pub h: Array2<Complex64>,
    pub element_positions: Vec<Vec3>,
    pub metadata: TensorMetadata,
}

impl ChannelTensor {
    pub fn new(freqs: FreqGrid, h: Array2<Complex64>, element_positions: Vec<Vec3>, metadata: TensorMetadata) -> Result<Self> {
        if h.ncols() != freqs.count || h.nrows() != element_positions.len() {
            return Err(Error::Dimension(format!(
                "tensor is {}x{} but grid has {} frequencies and {} elements",
                h.nrows(),
                h.ncols(),
                freqs.count,
                element_positions.len()
            )));
        }
        Ok(Self {
            freqs,
            h,
            element_positions,
            metadata,
        })
    }

    pub fn n_elements(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_freqs(&self) -> usize {
        self.h.ncols()
    }

    /// Copy restricted to the frequency points in `[f_c − bw/2, f_c + bw/2]`.
    pub fn sub_band(&self, f_c: f64, bandwidth: f64) -> Result<Self> {
        let range = self.freqs.sub_band(f_c, bandwidth)?;
        let freqs = self.freqs.slice(range.clone())?;
        let h = self.h.slice(ndarray::s![.., range]).to_owned();
        Ok(Self {
            freqs,
            h,
            element_positions: self.element_positions.clone(),
            metadata: TensorMetadata {
                bandwidth: freqs.bandwidth(),
                ..self.metadata.clone()
            },
        })
    }

    /// Rows of the given elements, element-major flattened.
    pub fn gather(&self, element_indices: &[usize]) -> Vec<Complex64> {
        element_indices
            .iter()
            .flat_map(|&m| self.h.row(m).to_vec())
            .collect()
    }
}

/// One specular component as seen by every array element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticComponent {
    pub component_id: String,
    pub visible: Vec<bool>,
    pub delay: Vec<f64>,
    pub azimuth: Vec<f64>,
    pub elevation: Vec<f64>,
    pub distance: Vec<f64>,
    /// Zero where the component is invisible.
    pub amplitude: Vec<Complex64>,
}

impl SyntheticComponent {
    /// Component with no element visible.
    pub fn dark(component_id: impl Into<String>, n_elements: usize) -> Self {
        Self {
            component_id: component_id.into(),
            visible: vec![false; n_elements],
            delay: vec![0.0; n_elements],
            azimuth: vec![0.0; n_elements],
            elevation: vec![0.0; n_elements],
            distance: vec![0.0; n_elements],
            amplitude: vec![Complex64::new(0.0, 0.0); n_elements],
        }
    }

    /// Blank out the component at element `m`.
    pub fn hide(&mut self, m: usize) {
        self.visible[m] = false;
        self.amplitude[m] = Complex64::new(0.0, 0.0);
    }
}

/// Stochastic exponential power-delay profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffuseSpec {
    pub enabled: bool,
    /// [s]
    pub onset: f64,
    /// Linear power of the first tap.
    pub power: f64,
    /// [s]
    pub decay: f64,
}

impl Default for DiffuseSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            onset: 0.0,
            power: 0.0,
            decay: 10e-9,
        }
    }
}

impl DiffuseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0) || !(self.power >= 0.0) || !(self.onset >= 0.0) {
            return Err(Error::Config(format!(
                "diffuse spec needs decay > 0, power >= 0, onset >= 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// An antenna with a pattern and pointing direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Antenna {
    pub pattern: AntennaPattern,
    pub boresight: Vec3,
}

impl Antenna {
    pub fn isotropic() -> Self {
        Self {
            pattern: AntennaPattern::isotropic(),
            boresight: Vec3::X,
        }
    }

    pub fn gain(&self, direction: Vec3) -> f64 {
        antenna_gain(&self.pattern, direction, self.boresight)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub delay: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
}

/// Delay, arrival angles in the array-local frame, and path length.
pub fn path_params(path: &SpecularPath, frame: &ArrayFrame) -> PathParams {
    let (azimuth, elevation) = local_angles(frame.to_local(path.arrival_direction()));
    PathParams {
        delay: path.length / SPEED_OF_LIGHT,
        azimuth,
        elevation,
        distance: path.length,
    }
}

/// Free-space amplitude of a specular component including both antenna
/// patterns: `Γ · g_tx(dod) · g_rx(doa) · c / (4π f_c d)`.
pub fn amplitude(
    gain_factor: Complex64,
    distance: f64,
    doa: Vec3,
    dod: Vec3,
    f_c: f64,
    rx: &Antenna,
    tx: &Antenna,
) -> Result<Complex64> {
    if !(distance > 0.0) {
        return Err(Error::InvalidGeometry(format!("path distance must be positive, got {distance}")));
    }
    let loss = SPEED_OF_LIGHT / (4.0 * PI * f_c * distance);
    Ok(gain_factor * (tx.gain(dod) * rx.gain(doa) * loss))
}

/// Inputs to [`synthesize`].
#[derive(Debug, Clone)]
pub struct SynthesisSetup<'a> {
    pub env: &'a EnvironmentModel,
    pub ue: Vec3,
    pub ue_antenna: Antenna,
    pub array: &'a ArrayGeometry,
    pub element_pattern: AntennaPattern,
    pub freqs: FreqGrid,
    pub max_order: usize,
    pub diffuse: DiffuseSpec,
    pub noise_var: f64,
    pub seed: u64,
    pub scenario: String,
}

/// Result of a synthesis run. `noise` is the white-noise realization that
/// was added, kept so the SNR can be measured.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub tensor: ChannelTensor,
    pub components: Vec<SyntheticComponent>,
    pub visibility: VisibilityMask,
    pub sources: Vec<ImageSource>,
    pub noise: Array2<Complex64>,
}

impl Synthesis {
    pub fn snr_db(&self, noise_var: f64) -> f64 {
        snr_of(&self.tensor, &self.noise, noise_var)
    }
}

/// Specular components for every image source at every element.
pub fn specular_components(setup: &SynthesisSetup<'_>) -> Result<(Vec<ImageSource>, Vec<SyntheticComponent>)> {
    let sources = compute_image_sources(setup.env, setup.ue, setup.max_order)?;
    let arr = setup.array;
    let rx = Antenna {
        pattern: setup.element_pattern,
        boresight: arr.boresight(),
    };
    let f_c = arr.f_c;

    let per_element: Vec<Vec<Option<(PathParams, Complex64)>>> = arr
        .element_positions
        .par_iter()
        .map(|&p| {
            sources
                .iter()
                .map(|src| {
                    let path = trace_specular_path(setup.env, src, p)?;
                    let params = path_params(&path, &arr.frame);
                    let alpha = amplitude(
                        src.gain_factor,
                        params.distance,
                        path.arrival_direction(),
                        path.departure_direction(),
                        f_c,
                        &rx,
                        &setup.ue_antenna,
                    )
                    .ok()?;
                    Some((params, alpha))
                })
                .collect()
        })
        .collect();

    let components = sources
        .iter()
        .enumerate()
        .map(|(k, src)| {
            let mut c = SyntheticComponent::dark(src.component_id.clone(), arr.len());
            for (m, row) in per_element.iter().enumerate() {
                if let Some((pp, alpha)) = row[k] {
                    c.visible[m] = true;
                    c.delay[m] = pp.delay;
                    c.azimuth[m] = pp.azimuth;
                    c.elevation[m] = pp.elevation;
                    c.distance[m] = pp.distance;
                    c.amplitude[m] = alpha;
                }
            }
            c
        })
        .collect();
    Ok((sources, components))
}

/// Noiseless specular sum over the given components.
pub fn render_components(components: &[SyntheticComponent], freqs: &FreqGrid, n_elements: usize) -> Result<Array2<Complex64>> {
    for c in components {
        if c.visible.len() != n_elements || c.amplitude.len() != n_elements || c.delay.len() != n_elements {
            return Err(Error::Dimension(format!(
                "component `{}` covers {} elements, array has {n_elements}",
                c.component_id,
                c.visible.len()
            )));
        }
    }
    let n = freqs.count;
    let mut h = Array2::<Complex64>::zeros((n_elements, n));
    h.axis_iter_mut(ndarray::Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(m, mut row)| {
            for c in components {
                if !c.visible[m] {
                    continue;
                }
                let (mut rot, step) = phase_ramp(freqs.start, freqs.step, -c.delay[m]);
                rot *= c.amplitude[m];
                for v in row.iter_mut() {
                    *v += rot;
                    rot *= step;
                }
            }
        });
    Ok(h)
}

fn element_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn complex_gaussian(rng: &mut ChaCha8Rng, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

/// Diffuse tail realization. Tap `l` sits at `onset + l/B` with power
/// `power · exp(−l/(B·decay))`; taps below 1e−6 of the first are dropped.
pub fn diffuse_realization(spec: &DiffuseSpec, freqs: &FreqGrid, n_elements: usize, seed: u64) -> Array2<Complex64> {
    let mut d = Array2::<Complex64>::zeros((n_elements, freqs.count));
    if !spec.enabled || spec.power == 0.0 {
        return d;
    }
    let tap_spacing = 1.0 / freqs.bandwidth();
    let n_taps = ((spec.decay * 1e6f64.ln() / tap_spacing).ceil() as usize + 1).min(8 * freqs.count);
    d.axis_iter_mut(ndarray::Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(m, mut row)| {
            let mut rng = element_rng(seed, 2 * m as u64);
            for l in 0..n_taps {
                let tau = spec.onset + l as f64 * tap_spacing;
                let var = spec.power * (-(l as f64) * tap_spacing / spec.decay).exp();
                let a = complex_gaussian(&mut rng, var);
                let (mut rot, step) = phase_ramp(freqs.start, freqs.step, -tau);
                rot *= a;
                for v in row.iter_mut() {
                    *v += rot;
                    rot *= step;
                }
            }
        });
    d
}

/// Circular white noise with variance `noise_var`, one RNG stream per element.
pub fn noise_realization(noise_var: f64, n_freqs: usize, n_elements: usize, seed: u64) -> Array2<Complex64> {
    let mut w = Array2::<Complex64>::zeros((n_elements, n_freqs));
    if noise_var == 0.0 {
        return w;
    }
    w.axis_iter_mut(ndarray::Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(m, mut row)| {
            let mut rng = element_rng(seed, 2 * m as u64 + 1);
            for v in row.iter_mut() {
                *v = complex_gaussian(&mut rng, noise_var);
            }
        });
    w
}

/// Full synthesis: specular sum, optional diffuse tail, white noise.
pub fn synthesize(setup: &SynthesisSetup<'_>) -> Result<Synthesis> {
    if !(setup.noise_var >= 0.0 && setup.noise_var.is_finite()) {
        return Err(Error::Config(format!("noise variance must be >= 0, got {}", setup.noise_var)));
    }
    setup.diffuse.validate()?;
    setup.element_pattern.validate()?;
    setup.ue_antenna.pattern.validate()?;
    let m = setup.array.len();
    let (sources, components) = specular_components(setup)?;
    let mut h = render_components(&components, &setup.freqs, m)?;
    h += &diffuse_realization(&setup.diffuse, &setup.freqs, m, setup.seed);
    let noise = noise_realization(setup.noise_var, setup.freqs.count, m, setup.seed);
    h += &noise;

    let visibility = VisibilityMask {
        components: components
            .iter()
            .map(|c| ComponentVisibility {
                component_id: c.component_id.clone(),
                visible: c.visible.clone(),
            })
            .collect(),
    };
    let tensor = ChannelTensor::new(
        setup.freqs,
        h,
        setup.array.element_positions.clone(),
        TensorMetadata {
            f_c: setup.array.f_c,
            bandwidth: setup.freqs.bandwidth(),
            scenario: setup.scenario.clone(),
            seed: setup.seed,
        },
    )?;
    Ok(Synthesis {
        tensor,
        components,
        visibility,
        sources,
        noise,
    })
}

/// `10·log10(mean|H − W|² / noise_var)`; `+∞` when `noise_var` is zero,
/// `−∞` when there is no signal.
pub fn snr_of(tensor: &ChannelTensor, noise: &Array2<Complex64>, noise_var: f64) -> f64 {
    if noise_var == 0.0 {
        return f64::INFINITY;
    }
    let signal = (&tensor.h - noise).iter().map(|z| z.norm_sqr()).sum::<f64>() / tensor.h.len() as f64;
    if signal == 0.0 {
        return f64::NEG_INFINITY;
    }
    10.0 * (signal / noise_var).log10()
}

/// Noise variance that puts the mean per-sample power of `signal` at `snr_db`.
pub fn noise_var_for_snr(signal: &Array2<Complex64>, snr_db: f64) -> f64 {
    let p = signal.iter().map(|z| z.norm_sqr()).sum::<f64>() / signal.len() as f64;
    p / 10f64.powf(snr_db / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{make_ura, ArrayFrame};
    use crate::geometry::Facet;

    fn arr(rows: usize, cols: usize) -> ArrayGeometry {
        make_ura(rows, cols, 6.95e9, Vec3::ZERO, ArrayFrame::facing_x()).unwrap()
    }

    fn setup<'a>(env: &'a EnvironmentModel, a: &'a ArrayGeometry, ue: Vec3) -> SynthesisSetup<'a> {
        SynthesisSetup {
            env,
            ue,
            ue_antenna: Antenna::isotropic(),
            array: a,
            element_pattern: AntennaPattern::isotropic(),
            freqs: FreqGrid::centered(6.95e9, 500e6, 32).unwrap(),
            max_order: 1,
            diffuse: DiffuseSpec::default(),
            noise_var: 0.0,
            seed: 7,
            scenario: "test".into(),
        }
    }

    fn floor() -> Facet {
        Facet::new(
            "floor",
            "floor",
            vec![
                Vec3::new(-50.0, -50.0, -1.0),
                Vec3::new(50.0, -50.0, -1.0),
                Vec3::new(50.0, 50.0, -1.0),
                Vec3::new(-50.0, 50.0, -1.0),
            ],
            Complex64::new(-0.6, 0.2),
        )
        .unwrap()
    }

    #[test]
    fn centered_grid() {
        let g = FreqGrid::centered(6.95e9, 500e6, 50).unwrap();
        assert!((g.center() - 6.95e9).abs() < 1e-3);
        assert!((g.bandwidth() - 500e6).abs() < 1e-3);
        let wide = FreqGrid::centered(6.95e9, 3e9, 300).unwrap();
        let r = wide.sub_band(6.95e9, 500e6).unwrap();
        assert_eq!(r.len(), 50);
        let sub = wide.slice(r).unwrap();
        assert!((sub.center() - 6.95e9).abs() < 1e-3);
        assert!(FreqGrid::new(1e9, 1e6, 1).is_err());
    }

    #[test]
    fn direct_path_parameters() {
        let a = arr(1, 1);
        let env = EnvironmentModel::empty("e");
        let src = &compute_image_sources(&env, Vec3::new(3.0, 0.0, 0.0), 0).unwrap()[0];
        let path = trace_specular_path(&env, src, Vec3::ZERO).unwrap();
        let pp = path_params(&path, &a.frame);
        assert!(pp.azimuth.abs() < 1e-15 && pp.elevation.abs() < 1e-15);
        assert!((pp.delay - 10.007e-9).abs() < 1e-12);
        assert_eq!(pp.distance, 3.0);
    }

    #[test]
    fn free_space_amplitude() {
        let iso = Antenna::isotropic();
        let one = Complex64::new(1.0, 0.0);
        let a1 = amplitude(one, 1.0, Vec3::X, Vec3::X, 6.95e9, &iso, &iso).unwrap();
        assert!((a1.norm() - 3.433e-3).abs() < 1e-6);
        let a2 = amplitude(one, 2.0, Vec3::X, Vec3::X, 6.95e9, &iso, &iso).unwrap();
        assert!((a2.norm() * 2.0 - a1.norm()).abs() < 1e-18);
        let patch = Antenna {
            pattern: AntennaPattern::patch(2.0),
            boresight: Vec3::X,
        };
        let off = Vec3::new(0.5, 3f64.sqrt() / 2.0, 0.0);
        let ap = amplitude(one, 1.0, off, off, 6.95e9, &patch, &patch).unwrap();
        assert!((ap.norm() / a1.norm() - 0.0625).abs() < 1e-12);
        let g = Complex64::from_polar(0.5, 1.2);
        assert!((amplitude(g, 1.0, Vec3::X, Vec3::X, 6.95e9, &iso, &iso).unwrap().arg() - 1.2).abs() < 1e-12);
        assert!(amplitude(one, 0.0, Vec3::X, Vec3::X, 6.95e9, &iso, &iso).is_err());
    }

    #[test]
    fn single_path_has_flat_magnitude() {
        let a = arr(2, 2);
        let env = EnvironmentModel::empty("e");
        let s = synthesize(&setup(&env, &a, Vec3::new(3.0, 0.2, 0.1))).unwrap();
        for row in s.tensor.h.rows() {
            let m0 = row[0].norm();
            assert!(row.iter().all(|z| (z.norm() - m0).abs() < 1e-12 * m0));
        }
        assert_eq!(s.snr_db(0.0), f64::INFINITY);
    }

    #[test]
    fn matches_direct_sum_oracle() {
        let a = arr(4, 4);
        let env = EnvironmentModel::new("f", vec![floor()]).unwrap();
        let mut st = setup(&env, &a, Vec3::new(2.5, 0.4, 0.3));
        st.element_pattern = AntennaPattern::patch(2.0);
        let s = synthesize(&st).unwrap();
        assert_eq!(s.components.len(), 2);

        // third path added by hand
        let mut extra = SyntheticComponent::dark("extra", a.len());
        for m in 0..a.len() {
            extra.visible[m] = true;
            extra.delay[m] = 30e-9 + m as f64 * 1e-12;
            extra.amplitude[m] = Complex64::from_polar(1e-3, m as f64 * 0.1);
        }
        let mut comps = s.components.clone();
        comps.push(extra);
        let h = render_components(&comps, &st.freqs, a.len()).unwrap();
        let f = st.freqs.freqs();
        for m in 0..a.len() {
            for n in 0..f.len() {
                let mut z = Complex64::new(0.0, 0.0);
                for c in &comps {
                    if c.visible[m] {
                        z += c.amplitude[m] * Complex64::from_polar(1.0, -2.0 * PI * f[n] * c.delay[m]);
                    }
                }
                assert!((h[[m, n]] - z).norm() <= 1e-12 * z.norm().max(1e-3));
            }
        }
    }

    #[test]
    fn superposition_and_gating() {
        let a = arr(3, 3);
        let env = EnvironmentModel::new("f", vec![floor()]).unwrap();
        let st = setup(&env, &a, Vec3::new(2.0, -0.3, 0.5));
        let (_, comps) = specular_components(&st).unwrap();
        let full = render_components(&comps, &st.freqs, a.len()).unwrap();
        let parts: Array2<Complex64> = comps
            .iter()
            .map(|c| render_components(std::slice::from_ref(c), &st.freqs, a.len()).unwrap())
            .fold(Array2::zeros(full.dim()), |acc, x| acc + x);
        assert!(full.iter().zip(parts.iter()).all(|(x, y)| (x - y).norm() < 1e-12 * x.norm().max(1e-6)));

        let mut gated = comps.clone();
        gated[1].hide(4);
        gated[1].hide(7);
        let h2 = render_components(&gated, &st.freqs, a.len()).unwrap();
        for m in 0..a.len() {
            let changed = full.row(m).iter().zip(h2.row(m).iter()).any(|(x, y)| x != y);
            assert_eq!(changed, m == 4 || m == 7, "row {m}");
        }
    }

    #[test]
    fn noise_statistics_and_snr() {
        let a = arr(8, 8);
        let env = EnvironmentModel::empty("e");
        let mut st = setup(&env, &a, Vec3::new(3.0, 0.0, 0.0));
        st.max_order = 0;
        st.noise_var = 0.25;
        st.seed = 1;
        st.freqs = FreqGrid::centered(6.95e9, 500e6, 64).unwrap();
        let s = synthesize(&st).unwrap();
        let mean = s.noise.iter().map(|z| z.norm_sqr()).sum::<f64>() / s.noise.len() as f64;
        assert!((mean / 0.25 - 1.0).abs() < 3.0 / (s.noise.len() as f64).sqrt(), "mean {mean}");

        // snr by construction from the free-space amplitude at each element
        let signal: f64 = a
            .element_positions
            .iter()
            .map(|p| (SPEED_OF_LIGHT / (4.0 * PI * 6.95e9 * p.distance(st.ue))).powi(2))
            .sum::<f64>()
            / a.len() as f64;
        assert!((s.snr_db(0.25) - 10.0 * (signal / 0.25).log10()).abs() < 1e-9);

        // pure noise: the UE is hidden behind an absorbing screen
        let blocked_env = EnvironmentModel::new(
            "blk",
            vec![Facet::new(
                "blk",
                "",
                vec![Vec3::new(1.0, -5.0, -5.0), Vec3::new(1.0, 5.0, -5.0), Vec3::new(1.0, 5.0, 5.0), Vec3::new(1.0, -5.0, 5.0)],
                Complex64::new(0.0, 0.0),
            )
            .unwrap()],
        )
        .unwrap();
        let pure = synthesize(&SynthesisSetup {
            env: &blocked_env,
            max_order: 0,
            ..st.clone()
        })
        .unwrap();
        assert_eq!(pure.snr_db(0.25), f64::NEG_INFINITY);
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let a = arr(4, 4);
        let env = EnvironmentModel::new("f", vec![floor()]).unwrap();
        let mut st = setup(&env, &a, Vec3::new(2.0, 0.0, 0.0));
        st.noise_var = 1e-6;
        st.diffuse = DiffuseSpec {
            enabled: true,
            onset: 10e-9,
            power: 1e-7,
            decay: 8e-9,
        };
        let x = synthesize(&st).unwrap();
        let y = synthesize(&st).unwrap();
        assert_eq!(x.tensor.h, y.tensor.h);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let z = pool.install(|| synthesize(&st).unwrap());
        assert_eq!(x.tensor.h, z.tensor.h);
        st.seed += 1;
        assert_ne!(x.tensor.h, synthesize(&st).unwrap().tensor.h);
    }

    #[test]
    fn parseval_over_the_frequency_grid() {
        let a = arr(2, 2);
        let env = EnvironmentModel::new("f", vec![floor()]).unwrap();
        let mut st = setup(&env, &a, Vec3::new(2.0, 0.5, 0.0));
        st.diffuse = DiffuseSpec {
            enabled: true,
            onset: 5e-9,
            power: 1e-6,
            decay: 5e-9,
        };
        st.noise_var = 1e-8;
        let s = synthesize(&st).unwrap();
        let n = st.freqs.count;
        for row in s.tensor.h.rows() {
            let freq_energy: f64 = row.iter().map(|z| z.norm_sqr()).sum();
            let mut time_energy = 0.0;
            for k in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for (i, z) in row.iter().enumerate() {
                    acc += z * Complex64::from_polar(1.0, 2.0 * PI * (i * k) as f64 / n as f64);
                }
                time_energy += (acc / n as f64).norm_sqr();
            }
            assert!((time_energy * n as f64 - freq_energy).abs() <= 1e-9 * freq_energy);
        }
    }

    #[test]
    fn diffuse_power_follows_profile() {
        let f = FreqGrid::centered(6.95e9, 500e6, 64).unwrap();
        let spec = DiffuseSpec {
            enabled: true,
            onset: 0.0,
            power: 1.0,
            decay: 10e-9,
        };
        let d = diffuse_realization(&spec, &f, 400, 3);
        // expected per-sample power: Σ_l power·exp(-l Δτ / decay)
        let dt = 1.0 / f.bandwidth();
        let n_taps = (spec.decay * 1e6f64.ln() / dt).ceil() as usize + 1;
        let expected: f64 = (0..n_taps).map(|l| (-(l as f64) * dt / spec.decay).exp()).sum();
        let mean = d.iter().map(|z| z.norm_sqr()).sum::<f64>() / d.len() as f64;
        assert!((mean / expected - 1.0).abs() < 0.1, "{mean} vs {expected}");
    }
}
