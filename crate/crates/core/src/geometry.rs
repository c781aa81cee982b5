//! Polygonal environment model, mirror (image) sources, specular path
//! tracing and per-element visibility.
//!
//! Facets are finite planar polygons. A specular path of order `k` is found
//! by mirroring the transmitter across the facet chain and then unfolding the
//! straight line from the receiver to the image back through the chain. The
//! path exists only when every reflection point lies inside its facet and no
//! segment is blocked by another facet.

use std::collections::HashMap;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vec3::Vec3;
use crate::SPEED_OF_LIGHT;

/// Tolerance for coplanarity and polygon boundary membership [m].
pub const PLANE_TOL: f64 = 1e-9;

/// Intersections closer than this to a segment endpoint do not occlude [m].
pub const OCCLUSION_EPS: f64 = 1e-6;

/// Component id of the direct path.
pub const LOS_ID: &str = "LOS";

/// Reflection coefficient as stored in environment files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflectionCoeff {
    pub re: f64,
    pub im: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FacetSpec {
    id: String,
    #[serde(default)]
    name: String,
    vertices: Vec<Vec3>,
    reflection_coeff: ReflectionCoeff,
}

/// A finite planar reflector. Construction validates the polygon, so every
/// `Facet` in circulation has a well-defined supporting plane.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "FacetSpec", into = "FacetSpec")]
pub struct Facet {
    id: String,
    name: String,
    vertices: Vec<Vec3>,
    reflection_coeff: Complex64,
    normal: Vec3,
    offset: f64,
    // in-plane orthonormal basis and the polygon expressed in it
    basis_u: Vec3,
    basis_v: Vec3,
    outline: Vec<(f64, f64)>,
}

impl Facet {
    pub fn new(
        id: impl Into<String>,
        name: impl Into<String>,
        vertices: Vec<Vec3>,
        reflection_coeff: Complex64,
    ) -> Result<Self> {
        let id = id.into();
        let name = name.into();
        let bad = |msg: String| Error::InvalidGeometry(format!("facet `{id}`: {msg}"));

        if vertices.len() < 3 {
            return Err(bad(format!("needs at least 3 vertices, got {}", vertices.len())));
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite vertex".into()));
        }
        if !(reflection_coeff.re.is_finite() && reflection_coeff.im.is_finite())
            || reflection_coeff.norm() > 1.0 + 1e-12
        {
            return Err(bad(format!(
                "reflection coefficient magnitude {} exceeds 1",
                reflection_coeff.norm()
            )));
        }

        // Newell's method: robust normal for any simple polygon.
        let mut newell = Vec3::ZERO;
        for (i, a) in vertices.iter().enumerate() {
            let b = vertices[(i + 1) % vertices.len()];
            newell += a.cross(b);
        }
        let area = 0.5 * newell.norm();
        let scale = vertices
            .iter()
            .map(|v| v.distance(vertices[0]))
            .fold(0.0, f64::max);
        if area <= 1e-12 * scale.max(1.0).powi(2) {
            return Err(bad("zero-area polygon".into()));
        }
        let normal = newell / (2.0 * area);
        let offset = normal.dot(vertices[0]);
        for v in &vertices {
            let dev = (normal.dot(*v) - offset).abs();
            if dev > PLANE_TOL {
                return Err(bad(format!("vertices not coplanar (deviation {dev:.3e} m)")));
            }
        }

        let basis_u = vertices
            .iter()
            .skip(1)
            .filter_map(|v| (*v - vertices[0]).normalized())
            .next()
            .ok_or_else(|| bad("coincident vertices".into()))?;
        let basis_v = normal.cross(basis_u);
        let outline: Vec<(f64, f64)> = vertices
            .iter()
            .map(|v| {
                let d = *v - vertices[0];
                (d.dot(basis_u), d.dot(basis_v))
            })
            .collect();

        if !is_simple_polygon(&outline) {
            return Err(bad("polygon is self-intersecting or has repeated vertices".into()));
        }

        Ok(Self {
            id,
            name,
            vertices,
            reflection_coeff,
            normal,
            offset,
            basis_u,
            basis_v,
            outline,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn reflection_coeff(&self) -> Complex64 {
        self.reflection_coeff
    }

    /// Unit normal given by the right-hand rule over the vertex order.
    pub fn normal(&self) -> Vec3 {
        self.normal
    }

    /// Signed distance of `p` from the supporting plane.
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }

    /// Whether a point on (or within [`PLANE_TOL`] of) the plane lies inside
    /// the polygon. Boundary points count as inside.
    pub fn contains(&self, p: Vec3) -> bool {
        if self.signed_distance(p).abs() > PLANE_TOL {
            return false;
        }
        let d = p - self.vertices[0];
        point_in_polygon((d.dot(self.basis_u), d.dot(self.basis_v)), &self.outline)
    }

    /// Parameter `t` and point where segment `a→b` crosses the plane, if the
    /// segment is not parallel to it and `t ∈ [0, 1]`.
    fn cross_plane(&self, a: Vec3, b: Vec3) -> Option<(f64, Vec3)> {
        let da = self.signed_distance(a);
        let db = self.signed_distance(b);
        let denom = da - db;
        if denom.abs() < 1e-300 {
            return None;
        }
        let t = da / denom;
        if !(0.0..=1.0).contains(&t) {
            return None;
        }
        Some((t, a + (b - a) * t))
    }
}

impl TryFrom<FacetSpec> for Facet {
    type Error = Error;

    fn try_from(s: FacetSpec) -> Result<Self> {
        Facet::new(
            s.id,
            s.name,
            s.vertices,
            Complex64::new(s.reflection_coeff.re, s.reflection_coeff.im),
        )
    }
}

impl From<Facet> for FacetSpec {
    fn from(f: Facet) -> Self {
        FacetSpec {
            id: f.id,
            name: f.name,
            vertices: f.vertices,
            reflection_coeff: ReflectionCoeff {
                re: f.reflection_coeff.re,
                im: f.reflection_coeff.im,
            },
        }
    }
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn on_segment(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> bool {
    p.0 >= a.0.min(b.0) - PLANE_TOL
        && p.0 <= a.0.max(b.0) + PLANE_TOL
        && p.1 >= a.1.min(b.1) - PLANE_TOL
        && p.1 <= a.1.max(b.1) + PLANE_TOL
}

fn segments_intersect(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

fn is_simple_polygon(pts: &[(f64, f64)]) -> bool {
    let n = pts.len();
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (pts[i], pts[j]);
            if (a.0 - b.0).hypot(a.1 - b.1) <= PLANE_TOL {
                return false;
            }
        }
    }
    for i in 0..n {
        let (a1, a2) = (pts[i], pts[(i + 1) % n]);
        for j in (i + 1)..n {
            // adjacent edges share a vertex by construction
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (b1, b2) = (pts[j], pts[(j + 1) % n]);
            if segments_intersect(a1, a2, b1, b2) {
                return false;
            }
        }
    }
    true
}

fn distance_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

fn point_in_polygon(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if distance_to_segment(p, a, b) <= PLANE_TOL {
            return true;
        }
        if (a.1 > p.1) != (b.1 > p.1) {
            let x = a.0 + (p.1 - a.1) * (b.0 - a.0) / (b.1 - a.1);
            if p.0 < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// A named set of facets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "EnvironmentSpec", into = "EnvironmentSpec")]
pub struct EnvironmentModel {
    name: String,
    facets: Vec<Facet>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EnvironmentSpec {
    name: String,
    facets: Vec<Facet>,
}

impl TryFrom<EnvironmentSpec> for EnvironmentModel {
    type Error = Error;

    fn try_from(s: EnvironmentSpec) -> Result<Self> {
        EnvironmentModel::new(s.name, s.facets)
    }
}

impl From<EnvironmentModel> for EnvironmentSpec {
    fn from(e: EnvironmentModel) -> Self {
        EnvironmentSpec {
            name: e.name,
            facets: e.facets,
        }
    }
}

impl EnvironmentModel {
    pub fn new(name: impl Into<String>, facets: Vec<Facet>) -> Result<Self> {
        let mut index = HashMap::with_capacity(facets.len());
        for (i, f) in facets.iter().enumerate() {
            if f.id.is_empty() || f.id.contains('+') {
                return Err(Error::InvalidGeometry(format!(
                    "facet id `{}` must be non-empty and must not contain `+`",
                    f.id
                )));
            }
            if f.id == LOS_ID {
                return Err(Error::InvalidGeometry(format!(
                    "facet id `{LOS_ID}` is reserved for the direct path"
                )));
            }
            if index.insert(f.id.clone(), i).is_some() {
                return Err(Error::InvalidGeometry(format!("duplicate facet id `{}`", f.id)));
            }
        }
        Ok(Self {
            name: name.into(),
            facets,
            index,
        })
    }

    pub fn empty(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            facets: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn facets(&self) -> &[Facet] {
        &self.facets
    }

    pub fn facet(&self, id: &str) -> Option<&Facet> {
        self.index.get(id).map(|&i| &self.facets[i])
    }

    /// Copy of this environment with one more facet.
    pub fn with_facet(&self, facet: Facet) -> Result<Self> {
        let mut facets = self.facets.clone();
        facets.push(facet);
        EnvironmentModel::new(self.name.clone(), facets)
    }

    /// True when no facet blocks the open segment `a→b`. Crossings within
    /// [`OCCLUSION_EPS`] of either endpoint are ignored.
    pub fn segment_clear(&self, a: Vec3, b: Vec3) -> bool {
        let len = a.distance(b);
        self.facets.iter().all(|f| match f.cross_plane(a, b) {
            Some((t, hit)) => {
                let along = t * len;
                along <= OCCLUSION_EPS || len - along <= OCCLUSION_EPS || !f.contains(hit)
            }
            None => true,
        })
    }
}

/// Reflect `p` across the supporting plane of `facet`.
pub fn mirror_point(p: Vec3, facet: &Facet) -> Vec3 {
    p - facet.normal * (2.0 * facet.signed_distance(p))
}

/// Virtual transmitter obtained by mirroring the UE across a facet chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSource {
    pub component_id: String,
    pub order: usize,
    /// Facet ids in the order the wave meets them, starting at the UE.
    pub facet_chain: Vec<String>,
    pub position: Vec3,
    /// Product of the reflection coefficients along the chain.
    pub gain_factor: Complex64,
    /// UE position the source was derived from.
    pub origin: Vec3,
}

/// Component id for a facet chain: `LOS` for the empty chain, otherwise the
/// facet ids joined with `+`.
pub fn component_id(chain: &[String]) -> String {
    if chain.is_empty() {
        LOS_ID.to_string()
    } else {
        chain.join("+")
    }
}

/// Direct path plus every chain of facets up to `max_order` with no facet
/// repeated consecutively. Ordered by order, then lexicographically by facet
/// position in the environment.
pub fn compute_image_sources(
    env: &EnvironmentModel,
    ue: Vec3,
    max_order: usize,
) -> Result<Vec<ImageSource>> {
    if max_order > 2 {
        return Err(Error::Config(format!(
            "max_order must be 0, 1 or 2 (got {max_order})"
        )));
    }
    let mut out = vec![ImageSource {
        component_id: LOS_ID.to_string(),
        order: 0,
        facet_chain: Vec::new(),
        position: ue,
        gain_factor: Complex64::new(1.0, 0.0),
        origin: ue,
    }];
    let mut frontier: Vec<(Vec<usize>, Vec3, Complex64)> = vec![(Vec::new(), ue, Complex64::new(1.0, 0.0))];
    for _ in 0..max_order {
        let mut next = Vec::new();
        for (chain, pos, gain) in &frontier {
            for (fi, facet) in env.facets.iter().enumerate() {
                if chain.last() == Some(&fi) {
                    continue;
                }
                let mut c = chain.clone();
                c.push(fi);
                next.push((c, mirror_point(*pos, facet), gain * facet.reflection_coeff));
            }
        }
        for (chain, pos, gain) in &next {
            let ids: Vec<String> = chain.iter().map(|&i| env.facets[i].id.clone()).collect();
            out.push(ImageSource {
                component_id: component_id(&ids),
                order: chain.len(),
                facet_chain: ids,
                position: *pos,
                gain_factor: *gain,
                origin: ue,
            });
        }
        frontier = next;
    }
    Ok(out)
}

/// Geometric specular path from a receiver element back to the UE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecularPath {
    /// RX element, reflection points (last bounce first), UE.
    pub points: Vec<Vec3>,
    pub length: f64,
    pub delay: f64,
}

impl SpecularPath {
    fn from_points(points: Vec<Vec3>) -> Self {
        let length = points.windows(2).map(|w| w[0].distance(w[1])).sum::<f64>();
        Self {
            delay: length / SPEED_OF_LIGHT,
            points,
            length,
        }
    }

    /// Unit vector from the receiver toward where the wave arrives from.
    pub fn arrival_direction(&self) -> Vec3 {
        (self.points[1] - self.points[0])
            .normalized()
            .unwrap_or(Vec3::X)
    }

    /// Unit vector from the UE toward its first segment's end.
    pub fn departure_direction(&self) -> Vec3 {
        let n = self.points.len();
        (self.points[n - 2] - self.points[n - 1])
            .normalized()
            .unwrap_or(Vec3::X)
    }
}

/// Unfold the path from `rx` to the image source. Returns `None` when a
/// reflection point misses its facet or a segment is occluded.
pub fn trace_specular_path(env: &EnvironmentModel, src: &ImageSource, rx: Vec3) -> Option<SpecularPath> {
    let facets: Vec<&Facet> = src
        .facet_chain
        .iter()
        .map(|id| env.facet(id))
        .collect::<Option<Vec<_>>>()?;

    // images[i] = UE mirrored across the first i facets
    let mut images = Vec::with_capacity(facets.len() + 1);
    images.push(src.origin);
    for f in &facets {
        let last = *images.last().unwrap();
        images.push(mirror_point(last, f));
    }

    let mut points = Vec::with_capacity(facets.len() + 2);
    points.push(rx);
    let mut current = rx;
    for i in (0..facets.len()).rev() {
        let facet = facets[i];
        let target = images[i + 1];
        let (t, hit) = facet.cross_plane(current, target)?;
        // the bounce must lie strictly between the current point and the image
        let len = current.distance(target);
        if t * len <= PLANE_TOL || (1.0 - t) * len <= PLANE_TOL {
            return None;
        }
        if !facet.contains(hit) {
            return None;
        }
        points.push(hit);
        current = hit;
    }
    points.push(src.origin);

    for w in points.windows(2) {
        if w[0].distance(w[1]) <= 0.0 || !env.segment_clear(w[0], w[1]) {
            return None;
        }
    }
    Some(SpecularPath::from_points(points))
}

/// Per-component boolean visibility over array elements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibilityMask {
    pub components: Vec<ComponentVisibility>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentVisibility {
    pub component_id: String,
    pub visible: Vec<bool>,
}

impl VisibilityMask {
    pub fn get(&self, component_id: &str) -> Option<&[bool]> {
        self.components
            .iter()
            .find(|c| c.component_id == component_id)
            .map(|c| c.visible.as_slice())
    }

    pub fn component_ids(&self) -> impl Iterator<Item = &str> {
        self.components.iter().map(|c| c.component_id.as_str())
    }
}

/// Visibility of each source at each element.
pub fn visibility_mask(
    env: &EnvironmentModel,
    element_positions: &[Vec3],
    sources: &[ImageSource],
) -> VisibilityMask {
    let components = sources
        .iter()
        .map(|src| ComponentVisibility {
            component_id: src.component_id.clone(),
            visible: element_positions
                .par_iter()
                .map(|&rx| trace_specular_path(env, src, rx).is_some())
                .collect(),
        })
        .collect();
    VisibilityMask { components }
}
