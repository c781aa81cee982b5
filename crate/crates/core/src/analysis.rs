//! Prediction, data association and the per-subarray analysis products.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::array::{local_angles, wrap_angle, ArrayGeometry, Subarray};
use crate::error::{Error, Result};
use crate::geometry::{trace_specular_path, EnvironmentModel, ImageSource, VisibilityMask};
use crate::sbl::{component_energy_frac, MpcEstimate, SubarrayResult};
use crate::synth::path_params;
use crate::SPEED_OF_LIGHT;

/// Expected parameters of one component at a subarray centroid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub component_id: String,
    pub delay: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
}

/// How predictions are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// Only sources whose specular path traces to the centroid.
    #[default]
    Traced,
    /// Every source, from the straight line image → centroid. Keeps the
    /// estimated presence map independent of geometric visibility.
    ImageOnly,
}

pub fn predict(
    env: &EnvironmentModel,
    sub: &Subarray,
    arr: &ArrayGeometry,
    sources: &[ImageSource],
    mode: PredictionMode,
) -> Vec<Prediction> {
    sources
        .iter()
        .filter_map(|src| match mode {
            PredictionMode::Traced => {
                let path = trace_specular_path(env, src, sub.centroid)?;
                let p = path_params(&path, &arr.frame);
                Some(Prediction {
                    component_id: src.component_id.clone(),
                    delay: p.delay,
                    azimuth: p.azimuth,
                    elevation: p.elevation,
                    distance: p.distance,
                })
            }
            PredictionMode::ImageOnly => {
                let v = src.position - sub.centroid;
                let distance = v.norm();
                let dir = v.normalized()?;
                let (azimuth, elevation) = local_angles(arr.frame.to_local(dir));
                Some(Prediction {
                    component_id: src.component_id.clone(),
                    delay: distance / SPEED_OF_LIGHT,
                    azimuth,
                    elevation,
                    distance,
                })
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gates {
    pub delay: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

impl Gates {
    /// Delay gate `2/B`, angle gates 5°.
    pub fn for_bandwidth(bandwidth: f64) -> Self {
        Self {
            delay: 2.0 / bandwidth,
            azimuth: 5f64.to_radians(),
            elevation: 5f64.to_radians(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.delay, self.azimuth, self.elevation].iter().all(|g| *g > 0.0 && g.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("gates must be positive: {self:?}")))
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            delay: self.delay * s,
            azimuth: self.azimuth * s,
            elevation: self.elevation * s,
        }
    }

    /// Normalized distance `max(|Δτ|/g_τ, |Δaz|/g_az, |Δel|/g_el)`.
    pub fn distance(&self, e: &MpcEstimate, p: &Prediction) -> f64 {
        ((e.delay - p.delay).abs() / self.delay)
            .max(wrap_angle(e.azimuth - p.azimuth).abs() / self.azimuth)
            .max((e.elevation - p.elevation).abs() / self.elevation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub component_id: String,
    pub estimate_index: usize,
    pub estimate: MpcEstimate,
    /// Normalized gate distance, ≤ 1.
    pub distance: f64,
    /// Predicted path length at the centroid [m].
    pub predicted_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Association {
    pub subarray_index: usize,
    /// Sorted by component id.
    pub matches: Vec<Match>,
    /// Predicted components without an estimate.
    pub unmatched: Vec<String>,
    /// Estimates no prediction claimed.
    pub unassociated: Vec<usize>,
}

impl Association {
    pub fn get(&self, component_id: &str) -> Option<&Match> {
        self.matches.iter().find(|m| m.component_id == component_id)
    }
}

/// Greedy one-to-one gated nearest-neighbour association.
///
/// Admissible pairs (`d ≤ 1`) are taken in ascending `d`; ties go to the
/// prediction with the lower `(delay, az, el)`, then to the lower estimate
/// index.
pub fn associate(subarray_index: usize, estimates: &[MpcEstimate], predictions: &[Prediction], gates: &Gates) -> Association {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, p) in predictions.iter().enumerate() {
        for (ei, e) in estimates.iter().enumerate() {
            let d = gates.distance(e, p);
            if d <= 1.0 {
                pairs.push((d, pi, ei));
            }
        }
    }
    pairs.sort_by(|a, b| {
        let (pa, pb) = (&predictions[a.1], &predictions[b.1]);
        a.0.total_cmp(&b.0)
            .then(pa.delay.total_cmp(&pb.delay))
            .then(pa.azimuth.total_cmp(&pb.azimuth))
            .then(pa.elevation.total_cmp(&pb.elevation))
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut pred_used = vec![false; predictions.len()];
    let mut est_used = vec![false; estimates.len()];
    let mut matches = Vec::new();
    for (d, pi, ei) in pairs {
        if pred_used[pi] || est_used[ei] {
            continue;
        }
        pred_used[pi] = true;
        est_used[ei] = true;
        matches.push(Match {
            component_id: predictions[pi].component_id.clone(),
            estimate_index: ei,
            estimate: estimates[ei],
            distance: d,
            predicted_distance: predictions[pi].distance,
        });
    }
    matches.sort_by(|a, b| a.component_id.cmp(&b.component_id));
    Association {
        subarray_index,
        matches,
        unmatched: predictions
            .iter()
            .zip(&pred_used)
            .filter(|(_, u)| !**u)
            .map(|(p, _)| p.component_id.clone())
            .collect(),
        unassociated: (0..estimates.len()).filter(|&i| !est_used[i]).collect(),
    }
}

/// Row-major grid over the subarray tiling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileGrid<T> {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<T>,
}

impl<T: Clone> TileGrid<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            cells: vec![value; rows * cols],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.cells[row * self.cols + col]
    }

    fn set(&mut self, row: usize, col: usize, v: T) {
        self.cells[row * self.cols + col] = v;
    }
}

fn tile_shape(subarrays: &[Subarray]) -> (usize, usize) {
    let rows = subarrays.iter().map(|s| s.tile_row + 1).max().unwrap_or(0);
    let cols = subarrays.iter().map(|s| s.tile_col + 1).max().unwrap_or(0);
    (rows, cols)
}

/// Estimated amplitude per subarray; `None` marks estimated invisibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentMap {
    pub component_id: String,
    pub grid: TileGrid<Option<f64>>,
}

/// One map per component id. With `compensate_pathloss` the amplitude is
/// multiplied by `4π f_c d / c` using the predicted path length.
pub fn amplitude_maps(
    component_ids: &[String],
    associations: &[Association],
    subarrays: &[Subarray],
    f_c: f64,
    compensate_pathloss: bool,
) -> Result<Vec<ComponentMap>> {
    let (rows, cols) = tile_shape(subarrays);
    let by_index: BTreeMap<usize, &Subarray> = subarrays.iter().map(|s| (s.index, s)).collect();
    let mut maps: Vec<ComponentMap> = component_ids
        .iter()
        .map(|id| ComponentMap {
            component_id: id.clone(),
            grid: TileGrid::filled(rows, cols, None),
        })
        .collect();
    for assoc in associations {
        let sub = by_index.get(&assoc.subarray_index).ok_or_else(|| {
            Error::Dimension(format!("association for unknown subarray {}", assoc.subarray_index))
        })?;
        for m in &assoc.matches {
            let Some(map) = maps.iter_mut().find(|x| x.component_id == m.component_id) else {
                continue;
            };
            let mut a = m.estimate.amplitude.norm();
            if compensate_pathloss {
                a *= 4.0 * PI * f_c * m.predicted_distance / SPEED_OF_LIGHT;
            }
            map.grid.set(sub.tile_row, sub.tile_col, Some(a));
        }
    }
    Ok(maps)
}

/// Per-subarray geometric visibility: a strict majority of the tile's
/// elements sees the component.
pub fn subarray_visibility(mask: &VisibilityMask, component_id: &str, subarrays: &[Subarray]) -> Result<TileGrid<bool>> {
    let visible = mask
        .get(component_id)
        .ok_or_else(|| Error::Dimension(format!("no visibility for component {component_id}")))?;
    let (rows, cols) = tile_shape(subarrays);
    let mut grid = TileGrid::filled(rows, cols, false);
    for s in subarrays {
        let mut n = 0;
        for &k in &s.element_indices {
            match visible.get(k) {
                Some(true) => n += 1,
                Some(false) => {}
                None => return Err(Error::Dimension(format!("element {k} outside visibility mask"))),
            }
        }
        grid.set(s.tile_row, s.tile_col, 2 * n > s.len());
    }
    Ok(grid)
}

/// Fraction of tiles where geometric visibility and estimated presence
/// disagree.
pub fn mismatch_score(geometric: &TileGrid<bool>, estimated: &TileGrid<Option<f64>>) -> Result<f64> {
    if geometric.rows != estimated.rows || geometric.cols != estimated.cols {
        return Err(Error::Dimension(format!(
            "visibility grid {}x{} vs amplitude grid {}x{}",
            geometric.rows, geometric.cols, estimated.rows, estimated.cols
        )));
    }
    if geometric.cells.is_empty() {
        return Err(Error::Dimension("empty tile grid".into()));
    }
    let diff = geometric
        .cells
        .iter()
        .zip(&estimated.cells)
        .filter(|(g, e)| **g != e.is_some())
        .count();
    Ok(diff as f64 / geometric.cells.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean_pct: f64,
    pub std_pct: f64,
}

impl Stat {
    fn of(fracs: &[f64]) -> Self {
        let n = fracs.len() as f64;
        let mean = fracs.iter().sum::<f64>() / n;
        let var = fracs.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean_pct: 100.0 * mean,
            std_pct: 100.0 * var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub component_id: String,
    #[serde(flatten)]
    pub stat: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// Strongest components by mean share, strongest first.
    pub components: Vec<EnergyRow>,
    pub residual: Stat,
    /// Share of all estimates, capped at 100% per subarray.
    pub captured: Stat,
    pub n_subarrays: usize,
    /// Subarrays whose component shares plus residual exceed 101%, which
    /// happens when estimated atoms overlap.
    pub overlap_subarrays: usize,
}

pub fn energy_report(results: &[SubarrayResult], associations: &[Association], top_k: usize) -> Result<EnergyReport> {
    if results.is_empty() {
        return Err(Error::Invariant("energy report needs at least one subarray".into()));
    }
    if top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    let by_index: BTreeMap<usize, &Association> = associations.iter().map(|a| (a.subarray_index, a)).collect();
    let mut per_component: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for a in associations {
        for m in &a.matches {
            per_component.entry(m.component_id.clone()).or_default();
        }
    }
    let n = results.len();
    let mut residual = Vec::with_capacity(n);
    let mut captured = Vec::with_capacity(n);
    let mut overlap = 0;
    for (i, r) in results.iter().enumerate() {
        let fracs: Vec<f64> = if r.total_energy > 0.0 {
            (0..r.estimates.len()).map(|k| component_energy_frac(r, k)).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let sum: f64 = fracs.iter().sum();
        if sum + r.residual_energy_frac > 1.01 {
            overlap += 1;
        }
        residual.push(r.residual_energy_frac.clamp(0.0, 1.0));
        captured.push(sum.min(1.0));
        for v in per_component.values_mut() {
            v.push(0.0);
        }
        if let Some(a) = by_index.get(&r.subarray_index) {
            for m in &a.matches {
                if let (Some(v), Some(f)) = (per_component.get_mut(&m.component_id), fracs.get(m.estimate_index)) {
                    v[i] = f.min(1.0);
                }
            }
        }
    }
    let mut components: Vec<EnergyRow> = per_component
        .into_iter()
        .map(|(component_id, v)| EnergyRow {
            component_id,
            stat: Stat::of(&v),
        })
        .collect();
    components.sort_by(|a, b| {
        b.stat
            .mean_pct
            .total_cmp(&a.stat.mean_pct)
            .then_with(|| a.component_id.cmp(&b.component_id))
    });
    components.truncate(top_k);
    Ok(EnergyReport {
        components,
        residual: Stat::of(&residual),
        captured: Stat::of(&captured),
        n_subarrays: n,
        overlap_subarrays: overlap,
    })
}

impl EnergyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,mean_pct,std_pct\n");
        let rows = self
            .components
            .iter()
            .map(|r| (r.component_id.as_str(), r.stat))
            .chain([("residual", self.residual), ("total_captured", self.captured)]);
        for (id, st) in rows {
            let _ = writeln!(s, "{id},{:.6},{:.6}", st.mean_pct, st.std_pct);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let width = self
            .components
            .iter()
            .map(|r| r.component_id.len())
            .chain([14])
            .max()
            .unwrap_or(14);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>8}  {:>8}", "component", "mean %", "std %");
        let _ = writeln!(s, "{}", "-".repeat(width + 20));
        for r in &self.components {
            let _ = writeln!(s, "{:<width$}  {:>8.2}  {:>8.2}", r.component_id, r.stat.mean_pct, r.stat.std_pct);
        }
        let _ = writeln!(s, "{}", "-".repeat(width + 20));
        let _ = writeln!(s, "{:<width$}  {:>8.2}  {:>8.2}", "residual", self.residual.mean_pct, self.residual.std_pct);
        let _ = writeln!(s, "{:<width$}  {:>8.2}  {:>8.2}", "total captured", self.captured.mean_pct, self.captured.std_pct);
        let _ = writeln!(s, "N_s = {}", self.n_subarrays);
        if self.overlap_subarrays > 0 {
            let _ = writeln!(
                s,
                "note: {} subarrays have overlapping estimates (shares + residual > 101%)",
                self.overlap_subarrays
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{make_ura, partition_subarrays, ArrayFrame};
    use crate::geometry::{compute_image_sources, Facet};
    use crate::vec3::Vec3;
    use num_complex::Complex64;
    use proptest::prelude::*;

    fn est(delay: f64, az: f64, el: f64) -> MpcEstimate {
        MpcEstimate {
            delay,
            azimuth: az,
            elevation: el,
            amplitude: Complex64::new(1.0, 0.0),
            gamma: 1.0,
            component_snr_db: 30.0,
        }
    }

    fn pred(id: &str, delay: f64, az: f64, el: f64) -> Prediction {
        Prediction {
            component_id: id.into(),
            delay,
            azimuth: az,
            elevation: el,
            distance: delay * SPEED_OF_LIGHT,
        }
    }

    const G: Gates = Gates {
        delay: 1e-9,
        azimuth: 0.1,
        elevation: 0.1,
    };

    #[test]
    fn direct_path_prediction() {
        let arr = make_ura(4, 4, 6.95e9, Vec3::new(0.0, -0.03, 1.0), ArrayFrame::facing_x()).unwrap();
        let sub = partition_subarrays(&arr, 4).unwrap().remove(0);
        let env = EnvironmentModel::empty("free");
        let ue = sub.centroid + Vec3::new(3.0, 0.0, 0.0);
        let src = compute_image_sources(&env, ue, 0).unwrap();
        for mode in [PredictionMode::Traced, PredictionMode::ImageOnly] {
            let p = predict(&env, &sub, &arr, &src, mode);
            assert_eq!(p.len(), 1);
            assert!(p[0].azimuth.abs() < 1e-12 && p[0].elevation.abs() < 1e-12);
            assert!((p[0].delay * 1e9 - 10.007).abs() < 1e-3);
        }
    }

    #[test]
    fn occluded_source_is_absent_only_when_traced() {
        let arr = make_ura(4, 4, 6.95e9, Vec3::new(0.0, -0.03, 1.0), ArrayFrame::facing_x()).unwrap();
        let sub = partition_subarrays(&arr, 4).unwrap().remove(0);
        let wall = Facet::new(
            "w",
            "screen",
            vec![
                Vec3::new(1.5, -1.0, 0.0),
                Vec3::new(1.5, 1.0, 0.0),
                Vec3::new(1.5, 1.0, 2.0),
                Vec3::new(1.5, -1.0, 2.0),
            ],
            Complex64::new(-0.5, 0.0),
        )
        .unwrap();
        let env = EnvironmentModel::new("blocked", vec![wall]).unwrap();
        let src = compute_image_sources(&env, sub.centroid + Vec3::new(3.0, 0.0, 0.0), 0).unwrap();
        assert!(predict(&env, &sub, &arr, &src, PredictionMode::Traced).is_empty());
        assert_eq!(predict(&env, &sub, &arr, &src, PredictionMode::ImageOnly).len(), 1);
    }

    #[test]
    fn exact_and_out_of_gate() {
        let p = vec![pred("A", 10e-9, 0.1, 0.0)];
        let a = associate(0, &[est(10e-9, 0.1, 0.0)], &p, &G);
        assert_eq!(a.matches.len(), 1);
        assert_eq!(a.matches[0].distance, 0.0);
        let b = associate(0, &[est(12e-9, 0.1, 0.0)], &p, &G);
        assert!(b.matches.is_empty());
        assert_eq!(b.unassociated, vec![0]);
        assert_eq!(b.unmatched, vec!["A".to_string()]);
    }

    #[test]
    fn closer_estimate_wins() {
        let p = vec![pred("A", 10e-9, 0.0, 0.0)];
        let e = [est(10.6e-9, 0.0, 0.0), est(10.2e-9, 0.0, 0.0)];
        let a = associate(0, &e, &p, &G);
        assert_eq!(a.matches[0].estimate_index, 1);
        assert_eq!(a.unassociated, vec![0]);
    }

    #[test]
    fn azimuth_wraps() {
        let p = vec![pred("A", 10e-9, PI - 0.01, 0.0)];
        let a = associate(0, &[est(10e-9, -PI + 0.01, 0.0)], &p, &G);
        assert!((a.matches[0].distance - 0.2).abs() < 1e-9);
    }

    #[test]
    fn ties_prefer_lower_prediction() {
        let p = vec![pred("late", 10.5e-9, 0.0, 0.0), pred("early", 9.5e-9, 0.0, 0.0)];
        let a = associate(0, &[est(10e-9, 0.0, 0.0)], &p, &G);
        assert_eq!(a.matches[0].component_id, "early");
    }

    fn distances(e: &[MpcEstimate], p: &[Prediction], g: &Gates) -> Vec<Vec<f64>> {
        p.iter().map(|p| e.iter().map(|e| g.distance(e, p)).collect()).collect()
    }

    /// All one-to-one matchings over admissible pairs; returns the one whose
    /// ascending distance vector is lexicographically smallest, a missing
    /// entry counting as +∞.
    fn oracle(d: &[Vec<f64>]) -> Vec<(usize, usize)> {
        fn rec(d: &[Vec<f64>], pi: usize, used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, best: &mut Option<(Vec<f64>, Vec<(usize, usize)>)>) {
            if pi == d.len() {
                let mut key: Vec<f64> = cur.iter().map(|&(p, e)| d[p][e]).collect();
                key.sort_by(f64::total_cmp);
                let better = match best {
                    None => true,
                    Some((bk, _)) => {
                        let n = key.len().max(bk.len());
                        let at = |v: &Vec<f64>, i: usize| v.get(i).copied().unwrap_or(f64::INFINITY);
                        (0..n)
                            .map(|i| at(&key, i).total_cmp(&at(bk, i)))
                            .find(|o| o.is_ne())
                            .is_some_and(|o| o.is_lt())
                    }
                };
                if better {
                    *best = Some((key, cur.clone()));
                }
                return;
            }
            rec(d, pi + 1, used, cur, best);
            for e in 0..d[pi].len() {
                if !used[e] && d[pi][e] <= 1.0 {
                    used[e] = true;
                    cur.push((pi, e));
                    rec(d, pi + 1, used, cur, best);
                    cur.pop();
                    used[e] = false;
                }
            }
        }
        let mut best = None;
        let ne = d.first().map_or(0, |r| r.len());
        rec(d, 0, &mut vec![false; ne], &mut Vec::new(), &mut best);
        let mut m = best.map(|b| b.1).unwrap_or_default();
        m.sort();
        m
    }

    fn max_cardinality(d: &[Vec<f64>]) -> usize {
        fn rec(d: &[Vec<f64>], pi: usize, used: &mut Vec<bool>) -> usize {
            if pi == d.len() {
                return 0;
            }
            let mut best = rec(d, pi + 1, used);
            for e in 0..d[pi].len() {
                if !used[e] && d[pi][e] <= 1.0 {
                    used[e] = true;
                    best = best.max(1 + rec(d, pi + 1, used));
                    used[e] = false;
                }
            }
            best
        }
        let ne = d.first().map_or(0, |r| r.len());
        rec(d, 0, &mut vec![false; ne])
    }

    fn scene() -> impl Strategy<Value = (Vec<MpcEstimate>, Vec<Prediction>)> {
        let e = prop::collection::vec((0.0..4e-9f64, -0.3..0.3f64, -0.3..0.3f64), 0..5);
        let p = prop::collection::vec((0.0..4e-9f64, -0.3..0.3f64, -0.3..0.3f64), 0..5);
        (e, p).prop_map(|(e, p)| {
            (
                e.into_iter().map(|(t, a, b)| est(t, a, b)).collect(),
                p.into_iter()
                    .enumerate()
                    .map(|(i, (t, a, b))| pred(&format!("P{i}"), t, a, b))
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn greedy_matches_exhaustive_oracle((e, p) in scene(), s in 0.5..3.0f64) {
            let g = G.scaled(s);
            let a = associate(0, &e, &p, &g);
            let mut got: Vec<(usize, usize)> = a
                .matches
                .iter()
                .map(|m| (p.iter().position(|x| x.component_id == m.component_id).unwrap(), m.estimate_index))
                .collect();
            got.sort();
            prop_assert_eq!(got, oracle(&distances(&e, &p, &g)));
        }

        #[test]
        fn association_is_injective_and_gated((e, p) in scene(), s in 0.5..3.0f64) {
            let a = associate(0, &e, &p, &G.scaled(s));
            let mut est_seen = std::collections::BTreeSet::new();
            let mut pred_seen = std::collections::BTreeSet::new();
            for m in &a.matches {
                prop_assert!(m.distance <= 1.0);
                prop_assert!(est_seen.insert(m.estimate_index));
                prop_assert!(pred_seen.insert(m.component_id.clone()));
            }
            prop_assert_eq!(a.matches.len() + a.unassociated.len(), e.len());
            prop_assert_eq!(a.matches.len() + a.unmatched.len(), p.len());
        }

        #[test]
        fn uniform_gate_growth_keeps_matches((e, p) in scene(), s in 0.3..2.0f64, k in 1.0..3.0f64) {
            let small = associate(0, &e, &p, &G.scaled(s));
            let large = associate(0, &e, &p, &G.scaled(s * k));
            for m in &small.matches {
                let l = large.get(&m.component_id);
                prop_assert!(l.is_some_and(|l| l.estimate_index == m.estimate_index));
            }
        }

        #[test]
        fn any_gate_growth_keeps_max_cardinality((e, p) in scene(), k in prop::array::uniform3(1.0..3.0f64)) {
            let big = Gates { delay: G.delay * k[0], azimuth: G.azimuth * k[1], elevation: G.elevation * k[2] };
            prop_assert!(max_cardinality(&distances(&e, &p, &big)) >= max_cardinality(&distances(&e, &p, &G)));
        }
    }

    fn result(index: usize, amps: &[f64], residual: f64, total: f64) -> SubarrayResult {
        SubarrayResult {
            subarray_index: index,
            estimates: amps
                .iter()
                .map(|&a| MpcEstimate {
                    amplitude: Complex64::new(a, 0.0),
                    ..est(1e-8, 0.0, 0.0)
                })
                .collect(),
            noise_var: 1e-6,
            residual_energy_frac: residual,
            total_energy: total,
            log_evidence: 0.0,
            iterations: 1,
        }
    }

    fn subs4() -> (ArrayGeometry, Vec<Subarray>) {
        let arr = make_ura(8, 8, 6.95e9, Vec3::ZERO, ArrayFrame::facing_x()).unwrap();
        let subs = partition_subarrays(&arr, 4).unwrap();
        (arr, subs)
    }

    fn matched(index: usize, id: &str, amp: f64, dist: f64) -> Association {
        Association {
            subarray_index: index,
            matches: vec![Match {
                component_id: id.into(),
                estimate_index: 0,
                estimate: MpcEstimate {
                    amplitude: Complex64::new(0.0, amp),
                    ..est(1e-8, 0.0, 0.0)
                },
                distance: 0.0,
                predicted_distance: dist,
            }],
            ..Association::default()
        }
    }

    #[test]
    fn compensated_map_is_flat_for_free_space_amplitudes() {
        let (_, subs) = subs4();
        let f_c = 6.95e9;
        let assoc: Vec<Association> = subs
            .iter()
            .map(|s| {
                let d = 2.0 + 0.3 * s.index as f64;
                matched(s.index, "LOS", SPEED_OF_LIGHT / (4.0 * PI * f_c * d), d)
            })
            .collect();
        let maps = amplitude_maps(&["LOS".into(), "ghost".into()], &assoc, &subs, f_c, true).unwrap();
        assert!(maps[0].grid.cells.iter().all(|c| (c.unwrap() - 1.0).abs() < 1e-12));
        assert!(maps[1].grid.cells.iter().all(Option::is_none));
        let raw = amplitude_maps(&["LOS".into()], &assoc, &subs, f_c, false).unwrap();
        assert!(raw[0].grid.get(0, 0).unwrap() > raw[0].grid.get(1, 1).unwrap());
    }

    #[test]
    fn map_is_empty_on_unassociated_tiles() {
        let (_, subs) = subs4();
        let assoc: Vec<Association> = subs
            .iter()
            .map(|s| if s.tile_col == 0 { matched(s.index, "A", 1.0, 1.0) } else { Association { subarray_index: s.index, ..Default::default() } })
            .collect();
        let m = amplitude_maps(&["A".into()], &assoc, &subs, 6.95e9, false).unwrap();
        for s in &subs {
            assert_eq!(m[0].grid.get(s.tile_row, s.tile_col).is_some(), s.tile_col == 0);
        }
    }

    #[test]
    fn majority_visibility_and_mismatch() {
        let (arr, subs) = subs4();
        // element visible when its column index < 6: tiles at col 0 fully, col 1 half
        let visible: Vec<bool> = (0..arr.len()).map(|k| k % 8 < 6).collect();
        let mask = VisibilityMask {
            components: vec![crate::geometry::ComponentVisibility {
                component_id: "A".into(),
                visible,
            }],
        };
        let geo = subarray_visibility(&mask, "A", &subs).unwrap();
        assert_eq!(geo.cells.iter().filter(|v| **v).count(), 2);
        assert!(subarray_visibility(&mask, "B", &subs).is_err());

        let same = TileGrid {
            rows: geo.rows,
            cols: geo.cols,
            cells: geo.cells.iter().map(|v| v.then_some(1.0)).collect(),
        };
        assert_eq!(mismatch_score(&geo, &same).unwrap(), 0.0);
        let flipped = TileGrid {
            rows: geo.rows,
            cols: geo.cols,
            cells: geo.cells.iter().map(|v| (!v).then_some(1.0)).collect(),
        };
        assert_eq!(mismatch_score(&geo, &flipped).unwrap(), 1.0);
        let wrong = TileGrid::filled(1, 4, None);
        assert!(matches!(mismatch_score(&geo, &wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn energy_report_statistics() {
        // two subarrays; A carries 60% and 40%, B only in the first
        let results = vec![result(0, &[0.6f64.sqrt(), 0.3f64.sqrt()], 0.1, 1.0), result(1, &[0.4f64.sqrt()], 0.6, 1.0)];
        let assoc = vec![
            Association {
                subarray_index: 0,
                matches: vec![
                    Match { estimate_index: 0, ..matched(0, "A", 0.0, 1.0).matches[0].clone() },
                    Match { estimate_index: 1, ..matched(0, "B", 0.0, 1.0).matches[0].clone() },
                ],
                ..Default::default()
            },
            matched(1, "A", 0.0, 1.0),
        ];
        let r = energy_report(&results, &assoc, 6).unwrap();
        assert_eq!(r.n_subarrays, 2);
        assert_eq!(r.components[0].component_id, "A");
        assert!((r.components[0].stat.mean_pct - 50.0).abs() < 1e-9);
        assert!((r.components[0].stat.std_pct - 10.0).abs() < 1e-9);
        assert!((r.components[1].stat.mean_pct - 15.0).abs() < 1e-9);
        assert!((r.residual.mean_pct - 35.0).abs() < 1e-9);
        assert!((r.captured.mean_pct - 65.0).abs() < 1e-9);
        assert_eq!(r.overlap_subarrays, 0);
        assert_eq!(energy_report(&results, &assoc, 1).unwrap().components.len(), 1);
        assert!(energy_report(&[], &assoc, 6).is_err());

        let csv = r.to_csv();
        assert!(csv.starts_with("component,mean_pct,std_pct\nA,50.000000,10.000000\n"));
        assert!(csv.contains("residual,35.000000"));
        assert!(r.to_table().contains("N_s = 2"));
    }

    #[test]
    fn overlapping_estimates_are_flagged_and_capped() {
        let results = vec![result(0, &[1.0, 1.0], 0.0, 1.0)];
        let r = energy_report(&results, &[], 6).unwrap();
        assert_eq!(r.overlap_subarrays, 1);
        assert!((r.captured.mean_pct - 100.0).abs() < 1e-12);
        assert!(r.to_table().contains("overlapping"));
    }
}
