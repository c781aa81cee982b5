//! Planar array geometry, subarray tiling, steering vectors and antenna
//! gain patterns.
//!
//! The array-local frame has `x` along the boresight, `z` along the array's
//! vertical axis and `y = z × x`. Azimuth is measured from `x` toward `y`,
//! elevation from the `xy`-plane toward `z`.

use std::f64::consts::{FRAC_PI_2, PI};

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vec3::Vec3;
use crate::SPEED_OF_LIGHT;

/// Orthonormal array-local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayFrame {
    /// Local `x`: boresight.
    pub boresight: Vec3,
    /// Local `y`: first in-plane axis (grid rows advance along it).
    pub horizontal: Vec3,
    /// Local `z`: second in-plane axis (grid columns advance along it).
    pub vertical: Vec3,
}

impl ArrayFrame {
    /// Frame with the given boresight and the in-plane vertical axis as
    /// close to `up` as possible.
    pub fn new(boresight: Vec3, up: Vec3) -> Result<Self> {
        let x = boresight
            .normalized()
            .ok_or_else(|| Error::Config("boresight must be non-zero".into()))?;
        let z = (up - x * up.dot(x))
            .normalized()
            .ok_or_else(|| Error::Config("`up` must not be parallel to the boresight".into()))?;
        Ok(Self {
            boresight: x,
            horizontal: z.cross(x),
            vertical: z,
        })
    }

    /// Boresight `+x`, vertical `+z`.
    pub fn facing_x() -> Self {
        Self {
            boresight: Vec3::X,
            horizontal: Vec3::Y,
            vertical: Vec3::Z,
        }
    }

    pub fn to_global(&self, local: Vec3) -> Vec3 {
        self.boresight * local.x + self.horizontal * local.y + self.vertical * local.z
    }

    pub fn to_local(&self, global: Vec3) -> Vec3 {
        Vec3::new(
            global.dot(self.boresight),
            global.dot(self.horizontal),
            global.dot(self.vertical),
        )
    }
}

/// Unit direction for `(az, el)` in array-local coordinates.
pub fn local_direction(az: f64, el: f64) -> Vec3 {
    Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

/// `(az, el)` of a local unit direction.
pub fn local_angles(dir: Vec3) -> (f64, f64) {
    (dir.y.atan2(dir.x), dir.z.clamp(-1.0, 1.0).asin())
}

/// Wrap an angle difference into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// Uniform rectangular array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    /// Row-major: element `(r, c)` sits at index `r * cols + c`.
    pub element_positions: Vec<Vec3>,
    pub rows: usize,
    pub cols: usize,
    pub f_c: f64,
    pub frame: ArrayFrame,
    pub spacing: f64,
}

impl ArrayGeometry {
    pub fn len(&self) -> usize {
        self.element_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.element_positions.is_empty()
    }

    pub fn boresight(&self) -> Vec3 {
        self.frame.boresight
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn centroid(&self) -> Vec3 {
        centroid_of(self.element_positions.iter().copied())
    }

    /// Copy restricted to the given rectangular block of the grid.
    pub fn sub_grid(&self, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || row0 + rows > self.rows || col0 + cols > self.cols {
            return Err(Error::Dimension(format!(
                "block {rows}x{cols} at ({row0},{col0}) outside {}x{} array",
                self.rows, self.cols
            )));
        }
        let element_positions = (row0..row0 + rows)
            .flat_map(|r| (col0..col0 + cols).map(move |c| (r, c)))
            .map(|(r, c)| self.element_positions[self.index(r, c)])
            .collect();
        Ok(Self {
            element_positions,
            rows,
            cols,
            ..self.clone()
        })
    }
}

fn centroid_of(points: impl Iterator<Item = Vec3>) -> Vec3 {
    let (sum, n) = points.fold((Vec3::ZERO, 0usize), |(s, n), p| (s + p, n + 1));
    sum / n.max(1) as f64
}

/// Half-wavelength URA with element `(0, 0)` at `origin`.
pub fn make_ura(rows: usize, cols: usize, f_c: f64, origin: Vec3, frame: ArrayFrame) -> Result<ArrayGeometry> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config(format!("array dimensions must be positive, got {rows}x{cols}")));
    }
    if !(f_c > 0.0 && f_c.is_finite()) {
        return Err(Error::Config(format!("carrier frequency must be positive, got {f_c}")));
    }
    let spacing = SPEED_OF_LIGHT / (2.0 * f_c);
    let element_positions = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| origin + frame.horizontal * (r as f64 * spacing) + frame.vertical * (c as f64 * spacing))
        .collect();
    Ok(ArrayGeometry {
        element_positions,
        rows,
        cols,
        f_c,
        frame,
        spacing,
    })
}

/// Square tile of array elements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subarray {
    pub index: usize,
    /// Tile coordinates in the subarray grid.
    pub tile_row: usize,
    pub tile_col: usize,
    pub element_indices: Vec<usize>,
    pub centroid: Vec3,
}

impl Subarray {
    pub fn len(&self) -> usize {
        self.element_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.element_indices.is_empty()
    }
}

/// Number of complete `size × size` tiles along each grid axis.
pub fn tile_counts(arr: &ArrayGeometry, size: usize) -> (usize, usize) {
    (arr.rows / size.max(1), arr.cols / size.max(1))
}

/// Non-overlapping `size × size` tiles from the grid origin; incomplete edge
/// tiles are dropped. Tiles are numbered row-major over the tile grid.
pub fn partition_subarrays(arr: &ArrayGeometry, size: usize) -> Result<Vec<Subarray>> {
    if size == 0 || size > arr.rows.min(arr.cols) {
        return Err(Error::Config(format!(
            "subarray size {size} does not fit a {}x{} array",
            arr.rows, arr.cols
        )));
    }
    let (tr, tc) = tile_counts(arr, size);
    let mut out = Vec::with_capacity(tr * tc);
    for i in 0..tr {
        for j in 0..tc {
            let element_indices: Vec<usize> = (0..size)
                .flat_map(|r| (0..size).map(move |c| (i * size + r, j * size + c)))
                .map(|(r, c)| arr.index(r, c))
                .collect();
            let centroid = centroid_of(element_indices.iter().map(|&k| arr.element_positions[k]));
            out.push(Subarray {
                index: out.len(),
                tile_row: i,
                tile_col: j,
                element_indices,
                centroid,
            });
        }
    }
    Ok(out)
}

/// Accumulates `Σ_n x_n e^{jθ(f_n)}` over a uniform grid `f_n = f0 + n·df`
/// with phase `2π f_n · lag`, using one complex rotation per step.
#[inline]
pub(crate) fn phase_ramp(f0: f64, df: f64, lag: f64) -> (Complex64, Complex64) {
    (
        Complex64::from_polar(1.0, 2.0 * PI * f0 * lag),
        Complex64::from_polar(1.0, 2.0 * PI * df * lag),
    )
}

/// Per-element projected lag `(p_m − centroid)·u / c` for a plane wave from
/// local direction `(az, el)`.
pub fn plane_wave_lags(sub: &Subarray, arr: &ArrayGeometry, az: f64, el: f64) -> Vec<f64> {
    let u = arr.frame.to_global(local_direction(az, el));
    sub.element_indices
        .iter()
        .map(|&k| (arr.element_positions[k] - sub.centroid).dot(u) / SPEED_OF_LIGHT)
        .collect()
}

/// Unit-norm wideband plane-wave atom, element-major (`m * N + n`).
///
/// Entry `(m, n)` is `exp(j2π f_n (lag_m − delay)) / √(M·N)`.
pub fn plane_wave_atom(sub: &Subarray, arr: &ArrayGeometry, freqs: &[f64], delay: f64, az: f64, el: f64) -> Vec<Complex64> {
    let lags = plane_wave_lags(sub, arr, az, el);
    let scale = 1.0 / ((lags.len() * freqs.len()) as f64).sqrt();
    let mut out = Vec::with_capacity(lags.len() * freqs.len());
    for lag in lags {
        for &f in freqs {
            out.push(Complex64::from_polar(scale, 2.0 * PI * f * (lag - delay)));
        }
    }
    out
}

/// Spherical-wave steering matrix, `S[m, n] = exp(−j2π f_n ‖point − p_m‖ / c)`.
pub fn spherical_steering(arr: &ArrayGeometry, point: Vec3, freqs: &[f64]) -> Result<Array2<Complex64>> {
    let mut s = Array2::zeros((arr.len(), freqs.len()));
    for (m, p) in arr.element_positions.iter().enumerate() {
        let d = point.distance(*p);
        if d <= 1e-12 {
            return Err(Error::InvalidGeometry(format!("steering point coincides with element {m}")));
        }
        for (n, &f) in freqs.iter().enumerate() {
            s[[m, n]] = Complex64::from_polar(1.0, -2.0 * PI * f * d / SPEED_OF_LIGHT);
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternKind {
    Isotropic,
    Patch,
}

/// Amplitude gain pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AntennaPattern {
    pub kind: PatternKind,
    /// cos exponent (patch only)
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default)]
    pub back_floor: f64,
}

fn default_q() -> f64 {
    2.0
}

impl Default for AntennaPattern {
    fn default() -> Self {
        Self::isotropic()
    }
}

impl AntennaPattern {
    pub fn isotropic() -> Self {
        Self {
            kind: PatternKind::Isotropic,
            q: 0.0,
            back_floor: 0.0,
        }
    }

    pub fn patch(q: f64) -> Self {
        Self {
            kind: PatternKind::Patch,
            q,
            back_floor: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q >= 0.0 && self.q.is_finite()) {
            return Err(Error::Config(format!("pattern exponent q must be >= 0, got {}", self.q)));
        }
        if !(0.0..1.0).contains(&self.back_floor) {
            return Err(Error::Config(format!("back_floor must lie in [0, 1), got {}", self.back_floor)));
        }
        Ok(())
    }
}

/// Linear amplitude gain toward `direction` for an antenna pointing along
/// `boresight`. Both inputs are unit vectors.
pub fn antenna_gain(pattern: &AntennaPattern, direction: Vec3, boresight: Vec3) -> f64 {
    match pattern.kind {
        PatternKind::Isotropic => 1.0,
        PatternKind::Patch => {
            let cos = direction.dot(boresight).clamp(-1.0, 1.0);
            if cos.acos() <= FRAC_PI_2 {
                cos.max(0.0).powf(pattern.q).max(pattern.back_floor)
            } else {
                pattern.back_floor
            }
        }
    }
}
