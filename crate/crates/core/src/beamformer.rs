//! Spherical-wave (near-field) beamforming over the full array and band.
//!
//! Each grid node `(az, el, dist)` is converted to a focal point in front of
//! the array centroid, and the received tensor is matched against the exact
//! per-element distances to that point. Power is normalized by `(M·N)²`, so a
//! unit-amplitude path focused exactly gives power `|α|²`.

use std::cmp::Ordering;

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{local_direction, phase_ramp, ArrayGeometry};
use crate::error::{Error, Result};
use crate::synth::ChannelTensor;
use crate::vec3::Vec3;
use crate::SPEED_OF_LIGHT;

/// Axes of the search grid, radians and meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumGrid {
    pub azimuths: Vec<f64>,
    pub elevations: Vec<f64>,
    pub distances: Vec<f64>,
}

fn strictly_increasing(v: &[f64]) -> bool {
    !v.is_empty() && v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[0] < w[1])
}

/// `count` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

impl SpectrumGrid {
    pub fn new(azimuths: Vec<f64>, elevations: Vec<f64>, distances: Vec<f64>) -> Result<Self> {
        for (name, axis) in [("azimuth", &azimuths), ("elevation", &elevations), ("distance", &distances)] {
            if !strictly_increasing(axis) {
                return Err(Error::Config(format!("{name} axis must be non-empty and strictly increasing")));
            }
        }
        if distances[0] <= 0.0 {
            return Err(Error::Config("distances must be positive".into()));
        }
        Ok(Self {
            azimuths,
            elevations,
            distances,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.azimuths.len(), self.elevations.len(), self.distances.len())
    }

    /// Global focal point for node `(i, j, k)`.
    pub fn focal_point(&self, arr: &ArrayGeometry, i: usize, j: usize, k: usize) -> Vec3 {
        arr.centroid() + arr.frame.to_global(local_direction(self.azimuths[i], self.elevations[j])) * self.distances[k]
    }
}

/// Linear power over `az × el × dist`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamSpectrum {
    pub grid: SpectrumGrid,
    pub power: Array3<f64>,
}

/// Max-projections of a spectrum onto the three coordinate planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    /// `[az, el]`
    pub az_el: Array2<f64>,
    /// `[az, dist]`
    pub az_dist: Array2<f64>,
    /// `[el, dist]`
    pub el_dist: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
    pub power: f64,
    pub index: (usize, usize, usize),
}

/// Conventional (unweighted) spherical-wave spectrum.
pub fn spherical_spectrum(tensor: &ChannelTensor, arr: &ArrayGeometry, grid: &SpectrumGrid) -> Result<BeamSpectrum> {
    if tensor.n_elements() != arr.len() {
        return Err(Error::Dimension(format!(
            "tensor has {} elements, array has {}",
            tensor.n_elements(),
            arr.len()
        )));
    }
    let (na, ne, nd) = grid.shape();
    let centroid = arr.centroid();
    let m = arr.len();
    let n = tensor.n_freqs();
    let norm = ((m * n) as f64).powi(2);
    let f0 = tensor.freqs.start;
    let df = tensor.freqs.step;

    let nodes: Vec<(usize, usize, usize)> = (0..na)
        .flat_map(|i| (0..ne).flat_map(move |j| (0..nd).map(move |k| (i, j, k))))
        .collect();

    let power: Vec<f64> = nodes
        .par_iter()
        .map(|&(i, j, k)| {
            let p = centroid + arr.frame.to_global(local_direction(grid.azimuths[i], grid.elevations[j])) * grid.distances[k];
            let mut acc = Complex64::new(0.0, 0.0);
            for (mi, pos) in arr.element_positions.iter().enumerate() {
                let d = p.distance(*pos);
                if d <= 1e-12 {
                    return Err(Error::InvalidGeometry(format!(
                        "grid node ({i},{j},{k}) coincides with element {mi}"
                    )));
                }
                // conj(S) = exp(+j2π f d / c)
                let (mut rot, step) = phase_ramp(f0, df, d / SPEED_OF_LIGHT);
                for h in tensor.h.row(mi) {
                    acc += h * rot;
                    rot *= step;
                }
            }
            Ok(acc.norm_sqr() / norm)
        })
        .collect::<Result<_>>()?;

    let power = Array3::from_shape_vec((na, ne, nd), power).expect("node count matches grid shape");
    Ok(BeamSpectrum {
        grid: grid.clone(),
        power,
    })
}

fn max_over(a: &Array3<f64>, axis: usize) -> Array2<f64> {
    a.fold_axis(Axis(axis), f64::NEG_INFINITY, |acc, &x| acc.max(x))
}

pub fn marginals(spec: &BeamSpectrum) -> Marginals {
    Marginals {
        az_el: max_over(&spec.power, 2),
        az_dist: max_over(&spec.power, 1),
        el_dist: max_over(&spec.power, 0),
    }
}

/// Local maxima over the 26-neighborhood within `min_db_below_max` of the
/// global maximum, strongest first. Equal powers are ordered by the lower
/// `(az, el, dist)` index.
pub fn find_peaks(spec: &BeamSpectrum, min_db_below_max: f64, max_peaks: usize) -> Vec<Peak> {
    let p = &spec.power;
    let (na, ne, nd) = p.dim();
    let global = p.iter().cloned().fold(0.0, f64::max);
    if global <= 0.0 {
        return Vec::new();
    }
    let floor = global * 10f64.powf(-min_db_below_max.abs() / 10.0);
    let mut peaks = Vec::new();
    for i in 0..na {
        for j in 0..ne {
            for k in 0..nd {
                let v = p[[i, j, k]];
                if v < floor || v <= 0.0 {
                    continue;
                }
                let mut is_max = true;
                'nb: for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        for dk in -1i64..=1 {
                            if di == 0 && dj == 0 && dk == 0 {
                                continue;
                            }
                            let (a, b, c) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                            if a < 0 || b < 0 || c < 0 || a >= na as i64 || b >= ne as i64 || c >= nd as i64 {
                                continue;
                            }
                            if p[[a as usize, b as usize, c as usize]] > v {
                                is_max = false;
                                break 'nb;
                            }
                        }
                    }
                }
                if is_max {
                    peaks.push(Peak {
                        azimuth: spec.grid.azimuths[i],
                        elevation: spec.grid.elevations[j],
                        distance: spec.grid.distances[k],
                        power: v,
                        index: (i, j, k),
                    });
                }
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.power
            .partial_cmp(&a.power)
            .unwrap_or(Ordering::Equal)
            .then(a.index.cmp(&b.index))
    });
    peaks.truncate(max_peaks);
    peaks
}

/// Index of the global maximum, lowest index on ties.
pub fn argmax(spec: &BeamSpectrum) -> (usize, usize, usize) {
    let mut best = (0, 0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for ((i, j, k), &v) in spec.power.indexed_iter() {
        if v > best_v {
            best_v = v;
            best = (i, j, k);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::array::{make_ura, ArrayFrame};
    use crate::synth::{FreqGrid, TensorMetadata};

    fn tensor(arr: &ArrayGeometry, freqs: FreqGrid, h: Array2<Complex64>) -> ChannelTensor {
        ChannelTensor::new(
            freqs,
            h,
            arr.element_positions.clone(),
            TensorMetadata {
                f_c: arr.f_c,
                bandwidth: freqs.bandwidth(),
                scenario: "t".into(),
                seed: 0,
            },
        )
        .unwrap()
    }

    fn small() -> (ArrayGeometry, FreqGrid, SpectrumGrid) {
        let arr = make_ura(6, 5, 6.95e9, Vec3::new(0.0, -0.05, 1.0), ArrayFrame::facing_x()).unwrap();
        let freqs = FreqGrid::centered(6.95e9, 3e9, 12).unwrap();
        let grid = SpectrumGrid::new(
            linspace(-0.6, 0.6, 7),
            linspace(-0.3, 0.3, 4),
            linspace(1.0, 3.0, 5),
        )
        .unwrap();
        (arr, freqs, grid)
    }

    fn point_source(arr: &ArrayGeometry, freqs: &FreqGrid, p: Vec3, amp: Complex64) -> Array2<Complex64> {
        let f = freqs.freqs();
        Array2::from_shape_fn((arr.len(), f.len()), |(m, n)| {
            let d = p.distance(arr.element_positions[m]);
            amp * Complex64::from_polar(1.0, -2.0 * PI * f[n] * d / SPEED_OF_LIGHT)
        })
    }

    #[test]
    fn zero_tensor_gives_zero_spectrum() {
        let (arr, freqs, grid) = small();
        let t = tensor(&arr, freqs, Array2::zeros((arr.len(), freqs.count)));
        let s = spherical_spectrum(&t, &arr, &grid).unwrap();
        assert!(s.power.iter().all(|&p| p == 0.0));
        assert!(find_peaks(&s, 30.0, 5).is_empty());
    }

    #[test]
    fn matches_direct_sum() {
        let (arr, freqs, grid) = small();
        let f = freqs.freqs();
        let h = Array2::from_shape_fn((arr.len(), f.len()), |(m, n)| {
            Complex64::new(((m * 7 + n * 3) % 11) as f64 - 5.0, ((m + 2 * n) % 5) as f64)
        });
        let t = tensor(&arr, freqs, h.clone());
        let s = spherical_spectrum(&t, &arr, &grid).unwrap();
        for i in 0..7 {
            for j in 0..4 {
                for k in 0..5 {
                    let p = grid.focal_point(&arr, i, j, k);
                    let mut acc = Complex64::new(0.0, 0.0);
                    for m in 0..arr.len() {
                        for n in 0..f.len() {
                            let d = p.distance(arr.element_positions[m]);
                            acc += h[[m, n]] * Complex64::from_polar(1.0, -2.0 * PI * f[n] * d / SPEED_OF_LIGHT).conj();
                        }
                    }
                    let want = acc.norm_sqr() / ((arr.len() * f.len()) as f64).powi(2);
                    assert!((s.power[[i, j, k]] - want).abs() <= 1e-9 * want.max(1e-300));
                }
            }
        }
    }

    #[test]
    fn focused_path_peaks_at_its_node() {
        let (arr, freqs, grid) = small();
        let p = grid.focal_point(&arr, 4, 2, 3);
        let t = tensor(&arr, freqs, point_source(&arr, &freqs, p, Complex64::new(0.3, 0.0)));
        let s = spherical_spectrum(&t, &arr, &grid).unwrap();
        assert_eq!(argmax(&s), (4, 2, 3));
        assert!((s.power[[4, 2, 3]] - 0.09).abs() < 1e-12);
        let peaks = find_peaks(&s, 3.0, 4);
        assert_eq!(peaks[0].index, (4, 2, 3));
    }

    #[test]
    fn scaling_by_complex_constant() {
        let (arr, freqs, grid) = small();
        let p = grid.focal_point(&arr, 1, 1, 1);
        let h = point_source(&arr, &freqs, p, Complex64::new(1.0, 0.0));
        let c = Complex64::new(-0.4, 1.3);
        let a = spherical_spectrum(&tensor(&arr, freqs, h.clone()), &arr, &grid).unwrap();
        let b = spherical_spectrum(&tensor(&arr, freqs, h.mapv(|z| z * c)), &arr, &grid).unwrap();
        for (x, y) in a.power.iter().zip(b.power.iter()) {
            assert!((x * c.norm_sqr() - y).abs() <= 1e-12 * y.max(1e-300));
        }
        assert_eq!(argmax(&a), argmax(&b));
    }

    #[test]
    fn node_on_an_element_is_rejected() {
        let arr = make_ura(2, 2, 6.95e9, Vec3::ZERO, ArrayFrame::facing_x()).unwrap();
        let freqs = FreqGrid::centered(6.95e9, 1e9, 4).unwrap();
        let c = arr.centroid();
        let off = arr.element_positions[0] - c;
        let (az, el) = crate::array::local_angles(arr.frame.to_local(off / off.norm()));
        let grid = SpectrumGrid::new(vec![az], vec![el], vec![off.norm()]).unwrap();
        let t = tensor(&arr, freqs, Array2::zeros((4, 4)));
        assert!(spherical_spectrum(&t, &arr, &grid).is_err());
    }

    fn spectrum_from(power: Array3<f64>) -> BeamSpectrum {
        let (a, e, d) = power.dim();
        BeamSpectrum {
            grid: SpectrumGrid::new(linspace(-1.0, 1.0, a), linspace(-0.5, 0.5, e), linspace(1.0, 2.0, d)).unwrap(),
            power,
        }
    }

    #[test]
    fn single_voxel_marginals_and_peak() {
        let mut p = Array3::zeros((5, 4, 3));
        p[[3, 1, 2]] = 2.0;
        let s = spectrum_from(p);
        let m = marginals(&s);
        for (arr, at) in [(&m.az_el, (3, 1)), (&m.az_dist, (3, 2)), (&m.el_dist, (1, 2))] {
            assert_eq!(arr.iter().filter(|&&v| v != 0.0).count(), 1);
            assert_eq!(arr[at], 2.0);
        }
        let peaks = find_peaks(&s, 10.0, 3);
        assert_eq!(peaks.len(), 1);
        assert_eq!(peaks[0].index, (3, 1, 2));
    }

    #[test]
    fn constant_spectrum_has_constant_marginals() {
        let s = spectrum_from(Array3::from_elem((3, 3, 3), 0.7));
        let m = marginals(&s);
        assert!(m.az_el.iter().chain(m.az_dist.iter()).chain(m.el_dist.iter()).all(|&v| v == 0.7));
    }

    #[test]
    fn equal_peaks_break_ties_by_index() {
        let mut p = Array3::zeros((8, 3, 3));
        p[[6, 1, 1]] = 1.0;
        p[[1, 1, 1]] = 1.0;
        let peaks = find_peaks(&spectrum_from(p), 10.0, 1);
        assert_eq!(peaks[0].index, (1, 1, 1));
    }

    #[test]
    fn marginals_match_loop_oracle() {
        let mut state = 12345u64;
        let p = Array3::from_shape_fn((6, 5, 4), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        });
        let s = spectrum_from(p.clone());
        let m = marginals(&s);
        let global = p.iter().cloned().fold(0.0, f64::max);
        for i in 0..6 {
            for j in 0..5 {
                let mut best = f64::NEG_INFINITY;
                for k in 0..4 {
                    best = best.max(p[[i, j, k]]);
                }
                assert_eq!(m.az_el[[i, j]], best);
            }
        }
        for arr in [&m.az_el, &m.az_dist, &m.el_dist] {
            assert_eq!(arr.iter().cloned().fold(0.0, f64::max), global);
        }
    }

    #[test]
    fn two_separated_paths_are_both_found() {
        let (arr, freqs, _) = small();
        let arr = make_ura(12, 12, arr.f_c, arr.element_positions[0], arr.frame).unwrap();
        let grid = SpectrumGrid::new(linspace(-0.8, 0.8, 9), linspace(-0.4, 0.4, 5), linspace(1.0, 4.0, 7)).unwrap();
        let a = grid.focal_point(&arr, 1, 1, 1);
        let b = grid.focal_point(&arr, 6, 3, 5);
        let h = point_source(&arr, &freqs, a, Complex64::new(1.0, 0.0)) + point_source(&arr, &freqs, b, Complex64::new(0.0, 0.8));
        let s = spherical_spectrum(&tensor(&arr, freqs, h), &arr, &grid).unwrap();
        let peaks = find_peaks(&s, 6.0, 2);
        let idx: Vec<_> = peaks.iter().map(|p| p.index).collect();
        assert_eq!(idx, vec![(1, 1, 1), (6, 3, 5)]);
    }
}
