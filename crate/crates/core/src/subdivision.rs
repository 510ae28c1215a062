//! Loop subdivision surfaces: control meshes, refinement, limit formulas and
//! basis evaluation on regular and irregular patches.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::{add, axpy, cross, norm, scale, zero3, Real, Vec3};

/// Recursion cap for irregular-patch evaluation.
pub const MAX_DEPTH: usize = 30;

/// Closed, consistently oriented, 2-manifold triangle mesh.
#[derive(Clone, Debug)]
pub struct ControlMesh<T> {
    vertices: Vec<Vec3<T>>,
    triangles: Vec<[usize; 3]>,
    rings: Vec<Vec<usize>>,
    half_edges: HashMap<(usize, usize), usize>,
}

/// Point in the parametric triangle of an element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamPoint<T> {
    pub element: usize,
    pub xi: [T; 2],
}

impl<T: Real> ParamPoint<T> {
    pub fn new(element: usize, xi1: T, xi2: T) -> Self {
        Self { element, xi: [xi1, xi2] }
    }
}

/// Basis values and parametric derivatives of the vertices influencing one element.
#[derive(Clone, Debug)]
pub struct PatchBasis<T> {
    pub element: usize,
    /// Global control-vertex ids, aligned with `values`, `d1` and `d2`.
    pub vertices: Vec<usize>,
    pub values: Vec<T>,
    /// (d/dxi1, d/dxi2)
    pub d1: Vec<[T; 2]>,
    /// (d2/dxi1^2, d2/dxi1 dxi2, d2/dxi2^2)
    pub d2: Vec<[T; 3]>,
    /// Set when the point is an irregular corner; derivatives there come from
    /// tangent masks and second derivatives are reported as zero.
    pub at_irregular_corner: bool,
}

impl<T: Real> PatchBasis<T> {
    pub fn n_v(&self) -> usize {
        self.vertices.len()
    }
}

fn mesh_err(msg: impl Into<String>) -> Error {
    Error::Topology(msg.into())
}

/// Loop's original vertex weight.
pub fn loop_beta<T: Real>(valence: usize) -> T {
    let n = T::from_usize_lossy(valence);
    let c = T::lit(0.375) + T::lit(0.25) * (T::TAU() / n).cos();
    (T::lit(0.625) - c * c) / n
}

/// Limit-point mask as (centre weight, weight of each one-ring vertex).
pub fn limit_weights<T: Real>(valence: usize) -> (T, T) {
    let n = T::from_usize_lossy(valence);
    let chi = T::one() / (T::lit(3.0) / (T::lit(8.0) * loop_beta::<T>(valence)) + n);
    (T::one() - n * chi, chi)
}

/// Tangent mask pointing toward ring vertex `j`, scaled so that valence 6
/// reproduces the box-spline edge derivative.
pub fn tangent_weights<T: Real>(valence: usize, j: usize) -> Vec<T> {
    let n = T::from_usize_lossy(valence);
    let s = T::lit(2.0) / n;
    (0..valence)
        .map(|i| {
            let d = T::from_usize_lossy((i + valence - j) % valence);
            s * (T::TAU() * d / n).cos()
        })
        .collect()
}

fn third(t: [usize; 3], a: usize, b: usize) -> usize {
    t[0] + t[1] + t[2] - a - b
}

fn rotate_to(t: [usize; 3], v: usize) -> Option<[usize; 3]> {
    if t[0] == v {
        Some(t)
    } else if t[1] == v {
        Some([t[1], t[2], t[0]])
    } else if t[2] == v {
        Some([t[2], t[0], t[1]])
    } else {
        None
    }
}

fn half_edge_map(triangles: &[[usize; 3]]) -> std::result::Result<HashMap<(usize, usize), usize>, (usize, usize, usize)> {
    let mut he = HashMap::with_capacity(triangles.len() * 3);
    for (ti, t) in triangles.iter().enumerate() {
        for k in 0..3 {
            let e = (t[k], t[(k + 1) % 3]);
            if let Some(prev) = he.insert(e, ti) {
                return Err((e.0, e.1, prev.min(ti)));
            }
        }
    }
    Ok(he)
}

/// Walks the triangle fan of `v` counter-clockwise starting at `start`.
/// Returns `None` when the fan is open.
fn walk_ring(
    triangles: &[[usize; 3]],
    he: &HashMap<(usize, usize), usize>,
    v: usize,
    start: usize,
) -> Option<Vec<usize>> {
    let t0 = rotate_to(triangles[start], v)?;
    let first = t0[1];
    let mut ring = vec![first];
    let mut cur = t0[2];
    for _ in 0..triangles.len() + 1 {
        if cur == first {
            return Some(ring);
        }
        ring.push(cur);
        let t = *he.get(&(v, cur))?;
        cur = third(triangles[t], v, cur);
    }
    None
}

impl<T: Real> ControlMesh<T> {
    /// Validates topology and builds ordered one-rings.
    pub fn new(vertices: Vec<Vec3<T>>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(mesh_err("no triangles"));
        }
        let nv = vertices.len();
        for (ti, t) in triangles.iter().enumerate() {
            if t.iter().any(|&i| i >= nv) {
                return Err(mesh_err(format!("triangle {ti} references a vertex outside 0..{nv}")));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(mesh_err(format!("triangle {ti} is degenerate {t:?}")));
            }
        }
        let he = half_edge_map(&triangles).map_err(|(a, b, t)| {
            mesh_err(format!(
                "edge ({a},{b}) appears twice with the same direction (triangle {t}): non-manifold or inconsistent winding"
            ))
        })?;
        for (&(a, b), &t) in &he {
            if !he.contains_key(&(b, a)) {
                return Err(mesh_err(format!("edge ({a},{b}) of triangle {t} is a boundary edge; the mesh must be closed")));
            }
        }
        let mut incident: Vec<Vec<usize>> = vec![Vec::new(); nv];
        for (ti, t) in triangles.iter().enumerate() {
            for &v in t {
                incident[v].push(ti);
            }
        }
        let mut rings = Vec::with_capacity(nv);
        for (v, inc) in incident.iter().enumerate() {
            let Some(&start) = inc.first() else {
                return Err(mesh_err(format!("vertex {v} is not used by any triangle")));
            };
            let ring = walk_ring(&triangles, &he, v, start)
                .ok_or_else(|| mesh_err(format!("vertex {v} has an open fan")))?;
            if ring.len() != inc.len() {
                return Err(mesh_err(format!(
                    "vertex {v} is non-manifold: its triangles form more than one fan"
                )));
            }
            if ring.len() < 3 {
                return Err(mesh_err(format!("vertex {v} has valence {}", ring.len())));
            }
            rings.push(ring);
        }
        Ok(Self { vertices, triangles, rings, half_edges: he })
    }

    pub fn vertices(&self) -> &[Vec3<T>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn num_edges(&self) -> usize {
        self.half_edges.len() / 2
    }

    /// Ordered (counter-clockwise seen from outside) one-ring of `v`.
    pub fn ring(&self, v: usize) -> &[usize] {
        &self.rings[v]
    }

    pub fn valence(&self, v: usize) -> usize {
        self.rings[v].len()
    }

    pub fn valences(&self) -> Vec<usize> {
        self.rings.iter().map(Vec::len).collect()
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.num_vertices() as i64 - self.num_edges() as i64 + self.num_triangles() as i64
    }

    pub fn genus(&self) -> i64 {
        (2 - self.euler_characteristic()) / 2
    }

    /// Triangle owning the directed edge `a -> b`.
    pub fn edge_triangle(&self, a: usize, b: usize) -> Option<usize> {
        self.half_edges.get(&(a, b)).copied()
    }

    /// Undirected edges `(a, b)` with `a < b`, in first-appearance order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Same connectivity with new control points.
    pub fn with_vertices(&self, vertices: Vec<Vec3<T>>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::Dimension(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        let mut m = self.clone();
        m.vertices = vertices;
        Ok(m)
    }

    /// Signed volume enclosed by the control polyhedron.
    pub fn signed_volume(&self) -> T {
        let six = T::lit(6.0);
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                crate::scalar::dot(a, cross(b, c)) / six
            })
            .sum()
    }

    /// Reverses the winding of every triangle.
    pub fn flipped(&self) -> Self {
        let tris = self.triangles.iter().map(|t| [t[0], t[2], t[1]]).collect();
        Self::new(self.vertices.clone(), tris).expect("flipping preserves validity")
    }

    /// Flips the winding when the enclosed volume is negative.
    pub fn oriented_outward(self) -> Self {
        if self.signed_volume() < T::zero() {
            self.flipped()
        } else {
            self
        }
    }

    pub fn is_regular_element(&self, e: usize) -> bool {
        self.triangles[e].iter().all(|&v| self.valence(v) == 6)
    }

    /// Limit position of control vertex `v`.
    pub fn vertex_limit_position(&self, v: usize) -> Vec3<T> {
        let ring = &self.rings[v];
        let (wc, wr) = limit_weights::<T>(ring.len());
        let mut x = scale(self.vertices[v], wc);
        for &r in ring {
            axpy(&mut x, wr, self.vertices[r]);
        }
        x
    }

    /// Unit outward limit normal at control vertex `v`.
    pub fn vertex_limit_normal(&self, v: usize) -> Result<Vec3<T>> {
        let ring = &self.rings[v];
        let n = ring.len();
        let t0 = tangent_weights::<T>(n, 0);
        let tq = tangent_weights::<T>(n, 1);
        let mut a = zero3();
        let mut b = zero3();
        for (i, &r) in ring.iter().enumerate() {
            axpy(&mut a, t0[i], self.vertices[r]);
            axpy(&mut b, tq[i], self.vertices[r]);
        }
        let c = cross(a, b);
        let l = norm(c);
        if !(l > T::zero()) {
            let element = self.half_edges[&(v, ring[0])];
            return Err(Error::DegenerateTangent { element });
        }
        Ok(scale(c, T::one() / l))
    }

    /// Patch (influencing vertices and local topology) of element `e`.
    pub fn element_patch(&self, e: usize) -> Result<ElementPatch> {
        let t = *self
            .triangles
            .get(e)
            .ok_or(Error::NoSuchElement { element: e, count: self.triangles.len() })?;
        let irregular: Vec<usize> = (0..3).filter(|&k| self.valence(t[k]) != 6).collect();
        if irregular.is_empty() {
            let st = regular_stencil(t, |x, y, excl| self.opposite(x, y, excl))
                .ok_or_else(|| mesh_err(format!("element {e}: regular stencil incomplete")))?;
            return Ok(ElementPatch { element: e, vertices: st.to_vec(), local: None });
        }
        if irregular.len() > 1 {
            return Err(Error::MultipleIrregular { element: e });
        }
        let mut tris_global: Vec<usize> = vec![e];
        for &c in &t {
            for &r in &self.rings[c] {
                let ti = self.half_edges[&(c, r)];
                if !tris_global.contains(&ti) {
                    tris_global.push(ti);
                }
            }
        }
        let mut vertices: Vec<usize> = t.to_vec();
        let mut local_of: HashMap<usize, usize> = t.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let mut tris = Vec::with_capacity(tris_global.len());
        for &ti in &tris_global {
            let lt = self.triangles[ti].map(|v| {
                *local_of.entry(v).or_insert_with(|| {
                    vertices.push(v);
                    vertices.len() - 1
                })
            });
            tris.push(lt);
        }
        Ok(ElementPatch {
            element: e,
            vertices,
            local: Some(LocalPatch { tris, corner: irregular[0] }),
        })
    }

    /// Patches of all elements.
    pub fn patches(&self) -> Result<Vec<ElementPatch>> {
        (0..self.num_triangles()).map(|e| self.element_patch(e)).collect()
    }

    fn opposite(&self, x: usize, y: usize, excl: usize) -> Option<usize> {
        for (a, b) in [(x, y), (y, x)] {
            if let Some(&t) = self.half_edges.get(&(a, b)) {
                let z = third(self.triangles[t], a, b);
                if z != excl {
                    return Some(z);
                }
            }
        }
        None
    }
}

/// Twelve-vertex box-spline stencil of element (a, b, c), in the ordering used
/// by [`box_spline`].
fn regular_stencil(
    t: [usize; 3],
    opp: impl Fn(usize, usize, usize) -> Option<usize>,
) -> Option<[usize; 12]> {
    let [a, b, c] = t;
    let mut s = [0usize; 12];
    s[3] = a;
    s[6] = b;
    s[7] = c;
    s[2] = opp(a, b, c)?;
    s[4] = opp(a, c, b)?;
    s[10] = opp(b, c, a)?;
    s[0] = opp(a, s[2], b)?;
    s[1] = opp(a, s[4], c)?;
    s[5] = opp(b, s[2], a)?;
    s[9] = opp(b, s[10], c)?;
    s[8] = opp(c, s[4], a)?;
    s[11] = opp(c, s[10], b)?;
    Some(s)
}

/// Monomial coefficients (times 12) of the quartic box splines in
/// xi1^i xi2^j, ordered 1, x, y, x^2, xy, y^2, x^3, x^2y, xy^2, y^3, x^4, x^3y, x^2y^2, xy^3, y^4.
const BOX: [[i8; 15]; 12] = [
    [1, -2, -4, 0, 6, 6, 2, 0, -6, -4, -1, -2, 0, 2, 1],
    [1, -4, -2, 6, 6, 0, -4, -6, 0, 2, 1, 2, 0, -2, -1],
    [1, 2, -2, 0, -6, 0, -4, 0, 6, 2, 2, 4, 0, -2, -1],
    [6, 0, 0, -12, -12, -12, 8, 12, 12, 8, -1, -2, 0, -2, -1],
    [1, -2, 2, 0, -6, 0, 2, 6, 0, -4, -1, -2, 0, 4, 2],
    [0, 0, 0, 0, 0, 0, 2, 0, 0, 0, -1, -2, 0, 0, 0],
    [1, 4, 2, 6, 6, 0, -4, -6, -12, -4, -1, -2, 0, 4, 2],
    [1, 2, 4, 0, 6, 6, -4, -12, -6, -4, 2, 4, 0, -2, -1],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, -2, -1],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 2, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 2, 6, 6, 2, -1, -2, 0, -2, -1],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 2, 1],
];

const MONO: [(i32, i32); 15] = [
    (0, 0),
    (1, 0),
    (0, 1),
    (2, 0),
    (1, 1),
    (0, 2),
    (3, 0),
    (2, 1),
    (1, 2),
    (0, 3),
    (4, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 4),
];

/// Quartic box-spline values and derivatives of a regular patch.
pub fn box_spline<T: Real>(xi: [T; 2]) -> ([T; 12], [[T; 2]; 12], [[T; 3]; 12]) {
    let [x, y] = xi;
    let mut px = [T::one(); 5];
    let mut py = [T::one(); 5];
    for i in 1..5 {
        px[i] = px[i - 1] * x;
        py[i] = py[i - 1] * y;
    }
    let pw = |p: &[T; 5], e: i32| if e < 0 { T::zero() } else { p[e as usize] };
    let mut m = [[T::zero(); 6]; 15];
    for (k, &(i, j)) in MONO.iter().enumerate() {
        let (fi, fj) = (T::lit(i as f64), T::lit(j as f64));
        m[k][0] = pw(&px, i) * pw(&py, j);
        m[k][1] = fi * pw(&px, i - 1) * pw(&py, j);
        m[k][2] = fj * pw(&px, i) * pw(&py, j - 1);
        m[k][3] = fi * (fi - T::one()) * pw(&px, i - 2) * pw(&py, j);
        m[k][4] = fi * fj * pw(&px, i - 1) * pw(&py, j - 1);
        m[k][5] = fj * (fj - T::one()) * pw(&px, i) * pw(&py, j - 2);
    }
    let inv12 = T::one() / T::lit(12.0);
    let mut v = [T::zero(); 12];
    let mut d1 = [[T::zero(); 2]; 12];
    let mut d2 = [[T::zero(); 3]; 12];
    for b in 0..12 {
        let mut acc = [T::zero(); 6];
        for k in 0..15 {
            let c = BOX[b][k];
            if c != 0 {
                let c = T::lit(c as f64);
                for (a, mk) in acc.iter_mut().zip(m[k]) {
                    *a += c * mk;
                }
            }
        }
        v[b] = acc[0] * inv12;
        d1[b] = [acc[1] * inv12, acc[2] * inv12];
        d2[b] = [acc[3] * inv12, acc[4] * inv12, acc[5] * inv12];
    }
    (v, d1, d2)
}

/// Influencing vertices of one element plus, for irregular elements, the
/// local topology used by the recursive evaluator.
#[derive(Clone, Debug)]
pub struct ElementPatch {
    pub element: usize,
    /// Global vertex ids in basis order.
    pub vertices: Vec<usize>,
    local: Option<LocalPatch>,
}

#[derive(Clone, Debug)]
struct LocalPatch {
    /// Triangles in local ids; the element is `tris[0] == [0, 1, 2]`.
    tris: Vec<[usize; 3]>,
    /// Element corner (0, 1, 2) holding the irregular vertex.
    corner: usize,
}

/// Scratch output for [`ElementPatch::eval_into`].
#[derive(Clone, Debug, Default)]
pub struct BasisEval<T> {
    pub values: Vec<T>,
    pub d1: Vec<[T; 2]>,
    pub d2: Vec<[T; 3]>,
    pub at_irregular_corner: bool,
}

impl<T: Real> BasisEval<T> {
    fn reset(&mut self, n: usize) {
        self.values.clear();
        self.values.resize(n, T::zero());
        self.d1.clear();
        self.d1.resize(n, [T::zero(); 2]);
        self.d2.clear();
        self.d2.resize(n, [T::zero(); 3]);
        self.at_irregular_corner = false;
    }
}

fn check_xi<T: Real>(xi: [T; 2]) -> Result<()> {
    let tol = T::lit(1e-12);
    if !(xi[0] >= -tol && xi[1] >= -tol && xi[0] + xi[1] <= T::one() + tol) {
        return Err(Error::OutsideTriangle { xi1: xi[0].to_f64_lossy(), xi2: xi[1].to_f64_lossy() });
    }
    Ok(())
}

impl ElementPatch {
    pub fn n_v(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_regular(&self) -> bool {
        self.local.is_none()
    }

    /// Corner (0, 1, 2) of the element that holds an irregular vertex.
    pub fn irregular_corner(&self) -> Option<usize> {
        self.local.as_ref().map(|l| l.corner)
    }

    /// Evaluates the basis at `xi`; `xi` is clamped into the triangle.
    pub fn eval_into<T: Real>(&self, xi: [T; 2], out: &mut BasisEval<T>) {
        let n = self.n_v();
        out.reset(n);
        let xi = clamp_xi(xi);
        match &self.local {
            None => {
                let (v, d1, d2) = box_spline(xi);
                out.values.copy_from_slice(&v);
                out.d1.copy_from_slice(&d1);
                out.d2.copy_from_slice(&d2);
            }
            Some(lp) => lp.eval(n, xi, out),
        }
    }

    /// Limit mask of element corner `k` (values only).
    pub fn corner_values<T: Real>(&self, k: usize) -> Vec<T> {
        let corner = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]][k];
        let mut out = BasisEval::default();
        self.eval_into([T::lit(corner[0]), T::lit(corner[1])], &mut out);
        out.values
    }
}

fn clamp_xi<T: Real>(xi: [T; 2]) -> [T; 2] {
    let x0 = xi[0].max(T::zero());
    let x1 = xi[1].max(T::zero());
    let s = x0 + x1;
    if s > T::one() {
        [x0 / s, x1 / s]
    } else {
        [x0, x1]
    }
}

/// Element patch with the regular sub-patches of an irregular element
/// tabulated down to a fixed depth, so that evaluation is one box-spline
/// pass instead of a chain of local refinements.
#[derive(Clone, Debug)]
pub struct CompiledPatch<T> {
    pub patch: ElementPatch,
    /// levels[j][c]: 12 x n_v stencil weights of child c at depth j.
    levels: Vec<[Option<Vec<T>>; 4]>,
}

impl ElementPatch {
    pub fn compile<T: Real>(&self, depth: usize) -> CompiledPatch<T> {
        let mut levels = Vec::new();
        if let Some(lp) = &self.local {
            let n = self.n_v();
            let mut tris = lp.tris.clone();
            let mut weights = vec![T::zero(); n * n];
            for a in 0..n {
                weights[a * n + a] = T::one();
            }
            for _ in 0..depth {
                let topo = LocalTopo::new(&tris);
                let mut lvl: [Option<Vec<T>>; 4] = [None, None, None, None];
                for (c, slot) in lvl.iter_mut().enumerate() {
                    if c == lp.corner {
                        continue;
                    }
                    let (t2, w2) = refine_local(&tris, &topo, &weights, n, c);
                    let topo2 = LocalTopo::new(&t2);
                    let regular = (0..3).all(|v| topo2.ring(&t2, v, None).is_some_and(|r| r.len() == 6));
                    if !regular {
                        continue;
                    }
                    if let Some(st) = regular_stencil([0, 1, 2], |x, y, e| topo2.opp(&t2, x, y, e)) {
                        let mut m = Vec::with_capacity(12 * n);
                        for &v in &st {
                            m.extend_from_slice(&w2[v * n..(v + 1) * n]);
                        }
                        *slot = Some(m);
                    }
                }
                levels.push(lvl);
                let (t2, w2) = refine_local(&tris, &topo, &weights, n, lp.corner);
                tris = t2;
                weights = w2;
            }
        }
        CompiledPatch { patch: self.clone(), levels }
    }
}

impl<T: Real> CompiledPatch<T> {
    pub fn n_v(&self) -> usize {
        self.patch.n_v()
    }

    /// Same result as [`ElementPatch::eval_into`].
    pub fn eval_into(&self, xi: [T; 2], out: &mut BasisEval<T>) {
        let Some(lp) = &self.patch.local else {
            self.patch.eval_into(xi, out);
            return;
        };
        let n = self.n_v();
        let mut x = clamp_xi(xi);
        let mut sgn = T::one();
        for lvl in &self.levels {
            let (c, nx, f) = choose_child(x);
            if c == lp.corner {
                x = nx;
                sgn *= f;
                continue;
            }
            let Some(m) = &lvl[c] else { break };
            out.reset(n);
            let s = sgn * f;
            let s2 = s * s;
            let (bv, bd1, bd2) = box_spline(nx);
            for j in 0..12 {
                let row = &m[j * n..(j + 1) * n];
                for a in 0..n {
                    let w = row[a];
                    out.values[a] += bv[j] * w;
                    out.d1[a][0] += s * bd1[j][0] * w;
                    out.d1[a][1] += s * bd1[j][1] * w;
                    out.d2[a][0] += s2 * bd2[j][0] * w;
                    out.d2[a][1] += s2 * bd2[j][1] * w;
                    out.d2[a][2] += s2 * bd2[j][2] * w;
                }
            }
            return;
        }
        self.patch.eval_into(xi, out);
    }
}

/// Small directed-edge map over a local triangle list.
struct LocalTopo {
    he: HashMap<(usize, usize), usize>,
}

impl LocalTopo {
    fn new(tris: &[[usize; 3]]) -> Self {
        let mut he = HashMap::with_capacity(tris.len() * 3);
        for (ti, t) in tris.iter().enumerate() {
            for k in 0..3 {
                he.insert((t[k], t[(k + 1) % 3]), ti);
            }
        }
        Self { he }
    }

    fn opp(&self, tris: &[[usize; 3]], x: usize, y: usize, excl: usize) -> Option<usize> {
        for (a, b) in [(x, y), (y, x)] {
            if let Some(&t) = self.he.get(&(a, b)) {
                let z = third(tris[t], a, b);
                if z != excl {
                    return Some(z);
                }
            }
        }
        None
    }

    /// Closed one-ring of `v` starting after `start` in triangle `start_tri`, if complete.
    fn ring(&self, tris: &[[usize; 3]], v: usize, first: Option<usize>) -> Option<Vec<usize>> {
        let start_tri = match first {
            Some(f) => *self.he.get(&(v, f))?,
            None => tris.iter().position(|t| t.contains(&v))?,
        };
        let t0 = rotate_to(tris[start_tri], v)?;
        let first = t0[1];
        let mut ring = vec![first];
        let mut cur = t0[2];
        for _ in 0..tris.len() + 1 {
            if cur == first {
                return Some(ring);
            }
            ring.push(cur);
            let t = *self.he.get(&(v, cur))?;
            cur = third(tris[t], v, cur);
        }
        None
    }
}

impl LocalPatch {
    fn eval<T: Real>(&self, n: usize, xi: [T; 2], out: &mut BasisEval<T>) {
        let corner_xi = [[T::zero(), T::zero()], [T::one(), T::zero()], [T::zero(), T::one()]][self.corner];
        if xi == corner_xi {
            self.corner_eval(n, out);
            return;
        }
        // weights[v * n + a]: level vertex v as a combination of patch vertex a
        let mut tris = self.tris.clone();
        let mut weights = vec![T::zero(); n * n];
        for a in 0..n {
            weights[a * n + a] = T::one();
        }
        let mut xi = xi;
        let mut sgn = T::one();
        for _ in 0..=MAX_DEPTH {
            let topo = LocalTopo::new(&tris);
            let regular = (0..3).all(|c| topo.ring(&tris, c, None).is_some_and(|r| r.len() == 6));
            if regular {
                let st = regular_stencil([0, 1, 2], |x, y, e| topo.opp(&tris, x, y, e))
                    .expect("regular local stencil");
                let (bv, bd1, bd2) = box_spline(xi);
                let s2 = sgn * sgn;
                for (j, &v) in st.iter().enumerate() {
                    let row = &weights[v * n..(v + 1) * n];
                    for a in 0..n {
                        let w = row[a];
                        if w != T::zero() {
                            out.values[a] += bv[j] * w;
                            out.d1[a][0] += sgn * bd1[j][0] * w;
                            out.d1[a][1] += sgn * bd1[j][1] * w;
                            out.d2[a][0] += s2 * bd2[j][0] * w;
                            out.d2[a][1] += s2 * bd2[j][1] * w;
                            out.d2[a][2] += s2 * bd2[j][2] * w;
                        }
                    }
                }
                return;
            }
            let (child, next_xi, factor) = choose_child(xi);
            let (t2, w2) = refine_local(&tris, &topo, &weights, n, child);
            tris = t2;
            weights = w2;
            xi = next_xi;
            sgn *= factor;
        }
        self.corner_eval(n, out);
    }

    fn corner_eval<T: Real>(&self, n: usize, out: &mut BasisEval<T>) {
        out.reset(n);
        out.at_irregular_corner = true;
        let k = self.corner;
        let topo = LocalTopo::new(&self.tris);
        let next = (k + 1) % 3;
        let ring = topo.ring(&self.tris, k, Some(next)).expect("closed fan at element corner");
        let val = ring.len();
        let (wc, wr) = limit_weights::<T>(val);
        out.values[k] = wc;
        for &r in &ring {
            out.values[r] += wr;
        }
        let d_next = tangent_weights::<T>(val, 0);
        let d_prev = tangent_weights::<T>(val, 1);
        for (i, &r) in ring.iter().enumerate() {
            let (a, b) = (d_next[i], d_prev[i]);
            let d = match k {
                0 => [a, b],
                1 => [-b, a - b],
                _ => [b - a, -a],
            };
            out.d1[r][0] += d[0];
            out.d1[r][1] += d[1];
        }
    }
}

/// Child index, coordinates in the child and derivative scale d(xi')/d(xi).
fn choose_child<T: Real>(xi: [T; 2]) -> (usize, [T; 2], T) {
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let [x, y] = xi;
    if x > half {
        (1, [two * x - T::one(), two * y], two)
    } else if y > half {
        (2, [two * x, two * y - T::one()], two)
    } else if x + y < half {
        (0, [two * x, two * y], two)
    } else {
        (3, [T::one() - two * x, T::one() - two * y], -two)
    }
}

/// Children of triangle (a, b, c) with edge points m_ab, m_bc, m_ca, in the
/// order used by [`loop_subdivide`].
fn children(a: usize, b: usize, c: usize, mab: usize, mbc: usize, mca: usize) -> [[usize; 3]; 4] {
    [[a, mab, mca], [mab, b, mbc], [mca, mbc, c], [mbc, mca, mab]]
}

/// One step of local refinement, restricted to the triangles that touch child
/// `child` of the current element.
fn refine_local<T: Real>(
    tris: &[[usize; 3]],
    topo: &LocalTopo,
    weights: &[T],
    n: usize,
    child: usize,
) -> (Vec<[usize; 3]>, Vec<T>) {
    let nloc = weights.len() / n;
    let mut new_w: Vec<T> = Vec::new();
    let mut vert_new = vec![usize::MAX; nloc];
    let mut count = 0usize;
    for v in 0..nloc {
        if let Some(ring) = topo.ring(tris, v, None) {
            let beta = loop_beta::<T>(ring.len());
            let wc = T::one() - T::from_usize_lossy(ring.len()) * beta;
            let base = new_w.len();
            new_w.extend(weights[v * n..(v + 1) * n].iter().map(|&w| w * wc));
            for &r in &ring {
                for a in 0..n {
                    new_w[base + a] += beta * weights[r * n + a];
                }
            }
            vert_new[v] = count;
            count += 1;
        }
    }
    let mut edge_new: HashMap<(usize, usize), usize> = HashMap::new();
    let e38 = T::lit(0.375);
    let e18 = T::lit(0.125);
    for t in tris {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            if edge_new.contains_key(&key) {
                continue;
            }
            let (Some(&t1), Some(&t2)) = (topo.he.get(&(a, b)), topo.he.get(&(b, a))) else {
                continue;
            };
            let c = third(tris[t1], a, b);
            let d = third(tris[t2], a, b);
            for i in 0..n {
                let w = e38 * (weights[a * n + i] + weights[b * n + i])
                    + e18 * (weights[c * n + i] + weights[d * n + i]);
                new_w.push(w);
            }
            edge_new.insert(key, count);
            count += 1;
        }
    }
    let mid = |a: usize, b: usize| edge_new.get(&(a.min(b), a.max(b))).copied().unwrap_or(usize::MAX);
    let mut refined: Vec<[usize; 3]> = Vec::new();
    let mut chosen = [0usize; 3];
    for (ti, t) in tris.iter().enumerate() {
        let [a, b, c] = *t;
        let ch = children(vert_new[a], vert_new[b], vert_new[c], mid(a, b), mid(b, c), mid(c, a));
        if ti == 0 {
            chosen = ch[child];
        }
        for tri in ch {
            if tri.iter().all(|&v| v != usize::MAX) {
                refined.push(tri);
            }
        }
    }
    debug_assert!(chosen.iter().all(|&v| v != usize::MAX));
    // keep triangles sharing a vertex with the chosen child; chosen first
    let mut remap = vec![usize::MAX; count];
    let mut order: Vec<usize> = Vec::new();
    for &v in &chosen {
        remap[v] = order.len();
        order.push(v);
    }
    let mut out_tris = vec![[0usize, 1, 2]];
    for tri in refined {
        if tri == chosen || !tri.iter().any(|v| chosen.contains(v)) {
            continue;
        }
        let lt = tri.map(|v| {
            if remap[v] == usize::MAX {
                remap[v] = order.len();
                order.push(v);
            }
            remap[v]
        });
        out_tris.push(lt);
    }
    let mut out_w = Vec::with_capacity(order.len() * n);
    for &v in &order {
        out_w.extend_from_slice(&new_w[v * n..(v + 1) * n]);
    }
    (out_tris, out_w)
}

/// One Loop refinement step. Child `j` of element `e` becomes element `4e + j`
/// (see [`refine_param`]); new edge vertices follow the old ones.
pub fn loop_subdivide<T: Real>(mesh: &ControlMesh<T>) -> ControlMesh<T> {
    let nv = mesh.num_vertices();
    let mut verts: Vec<Vec3<T>> = Vec::with_capacity(nv + mesh.num_edges());
    for v in 0..nv {
        let ring = mesh.ring(v);
        let beta = loop_beta::<T>(ring.len());
        let mut p = scale(mesh.vertices[v], T::one() - T::from_usize_lossy(ring.len()) * beta);
        for &r in ring {
            axpy(&mut p, beta, mesh.vertices[r]);
        }
        verts.push(p);
    }
    let mut edge_id: HashMap<(usize, usize), usize> = HashMap::with_capacity(mesh.num_edges());
    let e38 = T::lit(0.375);
    let e18 = T::lit(0.125);
    for (ti, t) in mesh.triangles.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            if edge_id.contains_key(&key) {
                continue;
            }
            let c = t[(k + 2) % 3];
            let other = mesh.half_edges[&(b, a)];
            let d = third(mesh.triangles[other], a, b);
            debug_assert_eq!(mesh.half_edges[&(a, b)], ti);
            let p = add(
                scale(add(mesh.vertices[a], mesh.vertices[b]), e38),
                scale(add(mesh.vertices[c], mesh.vertices[d]), e18),
            );
            edge_id.insert(key, verts.len());
            verts.push(p);
        }
    }
    let mid = |a: usize, b: usize| edge_id[&(a.min(b), a.max(b))];
    let mut tris = Vec::with_capacity(4 * mesh.num_triangles());
    for t in &mesh.triangles {
        let [a, b, c] = *t;
        tris.extend(children(a, b, c, mid(a, b), mid(b, c), mid(c, a)));
    }
    ControlMesh::new(verts, tris).expect("Loop refinement of a valid mesh is valid")
}

/// Parameter of the same surface point after one [`loop_subdivide`] step.
pub fn refine_param<T: Real>(p: ParamPoint<T>) -> ParamPoint<T> {
    let (child, xi, _) = choose_child(p.xi);
    ParamPoint { element: 4 * p.element + child, xi }
}

/// Basis functions of the element containing `p`.
pub fn evaluate_basis<T: Real>(mesh: &ControlMesh<T>, p: ParamPoint<T>) -> Result<PatchBasis<T>> {
    check_xi(p.xi)?;
    let patch = mesh.element_patch(p.element)?;
    let mut ev = BasisEval::default();
    patch.eval_into(p.xi, &mut ev);
    Ok(PatchBasis {
        element: p.element,
        vertices: patch.vertices,
        values: ev.values,
        d1: ev.d1,
        d2: ev.d2,
        at_irregular_corner: ev.at_irregular_corner,
    })
}

/// Position, tangents and second derivatives of the limit surface.
#[derive(Clone, Copy, Debug)]
pub struct SurfaceJet<T> {
    pub x: Vec3<T>,
    pub a1: Vec3<T>,
    pub a2: Vec3<T>,
    pub a11: Vec3<T>,
    pub a12: Vec3<T>,
    pub a22: Vec3<T>,
}

impl<T: Real> SurfaceJet<T> {
    pub fn from_basis(vertices: &[Vec3<T>], ids: &[usize], ev: &BasisEval<T>) -> Self {
        let mut j = Self { x: zero3(), a1: zero3(), a2: zero3(), a11: zero3(), a12: zero3(), a22: zero3() };
        for (i, &v) in ids.iter().enumerate() {
            let p = vertices[v];
            axpy(&mut j.x, ev.values[i], p);
            axpy(&mut j.a1, ev.d1[i][0], p);
            axpy(&mut j.a2, ev.d1[i][1], p);
            axpy(&mut j.a11, ev.d2[i][0], p);
            axpy(&mut j.a12, ev.d2[i][1], p);
            axpy(&mut j.a22, ev.d2[i][2], p);
        }
        j
    }

    /// Unscaled normal a1 x a2; its length is the area Jacobian.
    pub fn normal_raw(&self) -> Vec3<T> {
        cross(self.a1, self.a2)
    }
}

pub fn limit_position<T: Real>(mesh: &ControlMesh<T>, p: ParamPoint<T>) -> Result<Vec3<T>> {
    let b = evaluate_basis(mesh, p)?;
    let mut x = zero3();
    for (i, &v) in b.vertices.iter().enumerate() {
        axpy(&mut x, b.values[i], mesh.vertices[v]);
    }
    Ok(x)
}

pub fn limit_normal<T: Real>(mesh: &ControlMesh<T>, p: ParamPoint<T>) -> Result<Vec3<T>> {
    let b = evaluate_basis(mesh, p)?;
    let mut a1 = zero3();
    let mut a2 = zero3();
    for (i, &v) in b.vertices.iter().enumerate() {
        axpy(&mut a1, b.d1[i][0], mesh.vertices[v]);
        axpy(&mut a2, b.d1[i][1], mesh.vertices[v]);
    }
    let c = cross(a1, a2);
    let l = norm(c);
    if !(l > T::epsilon() * (norm(a1) * norm(a2))) || !(l > T::zero()) {
        return Err(Error::DegenerateTangent { element: p.element });
    }
    Ok(scale(c, T::one() / l))
}

/// Regular icosahedron with vertices on the sphere of the given radius.
pub fn icosahedron<T: Real>(radius: T) -> ControlMesh<T> {
    let phi = (T::one() + T::lit(5.0).sqrt()) / T::lit(2.0);
    let o = T::one();
    let z = T::zero();
    let raw = [
        [-o, phi, z],
        [o, phi, z],
        [-o, -phi, z],
        [o, -phi, z],
        [z, -o, phi],
        [z, o, phi],
        [z, -o, -phi],
        [z, o, -phi],
        [phi, z, -o],
        [phi, z, o],
        [-phi, z, -o],
        [-phi, z, o],
    ];
    let verts = raw.iter().map(|&p| scale(p, radius / norm(p))).collect();
    let tris = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    ControlMesh::new(verts, tris).expect("icosahedron is valid")
}

/// Regular octahedron (valence-4 vertices) of the given circumradius.
pub fn octahedron<T: Real>(radius: T) -> ControlMesh<T> {
    let o = radius;
    let z = T::zero();
    let verts = vec![[o, z, z], [-o, z, z], [z, o, z], [z, -o, z], [z, z, o], [z, z, -o]];
    let tris = vec![
        [0, 2, 4],
        [2, 1, 4],
        [1, 3, 4],
        [3, 0, 4],
        [2, 0, 5],
        [1, 2, 5],
        [3, 1, 5],
        [0, 3, 5],
    ];
    ControlMesh::new(verts, tris).expect("octahedron is valid")
}

/// Regular tetrahedron (valence-3 vertices).
pub fn tetrahedron<T: Real>(radius: T) -> ControlMesh<T> {
    let s = radius / T::lit(3.0).sqrt();
    let o = T::one();
    let verts = vec![[o, o, o], [o, -o, -o], [-o, o, -o], [-o, -o, o]].into_iter().map(|p| scale(p, s)).collect();
    let tris = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
    ControlMesh::new(verts, tris).expect("tetrahedron is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{dist, dot, sub};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn jitter(mesh: &ControlMesh<f64>, amp: f64, seed: u64) -> ControlMesh<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = mesh
            .vertices()
            .iter()
            .map(|p| [p[0] + amp * rng.gen_range(-1.0..1.0), p[1] + amp * rng.gen_range(-1.0..1.0), p[2] + amp * rng.gen_range(-1.0..1.0)])
            .collect();
        mesh.with_vertices(v).unwrap()
    }

    fn random_xi(rng: &mut ChaCha8Rng) -> [f64; 2] {
        let mut a: f64 = rng.gen();
        let mut b: f64 = rng.gen();
        if a + b > 1.0 {
            a = 1.0 - a;
            b = 1.0 - b;
        }
        [a, b]
    }

    #[test]
    fn icosahedron_counts() {
        let m = icosahedron(1.0_f64);
        assert_eq!((m.num_vertices(), m.num_triangles(), m.num_edges()), (12, 20, 30));
        assert_eq!(m.euler_characteristic(), 2);
        let s = loop_subdivide(&m);
        assert_eq!((s.num_vertices(), s.num_triangles()), (42, 80));
        assert!(s.valences()[12..].iter().all(|&v| v == 6));
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn rejects_open_and_inconsistent_meshes() {
        let v = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let open = ControlMesh::new(v.clone(), vec![[0, 1, 2], [0, 3, 1], [0, 2, 3]]);
        assert!(matches!(open, Err(Error::Topology(_))));
        let bad = ControlMesh::new(v, vec![[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 3, 2]]);
        assert!(matches!(bad, Err(Error::Topology(_))));
    }

    #[test]
    fn beta_and_limit_weights() {
        assert!((loop_beta::<f64>(6) - 1.0 / 16.0).abs() < 1e-15);
        assert!((loop_beta::<f64>(3) - 3.0 / 16.0).abs() < 1e-15);
        let (c, r) = limit_weights::<f64>(6);
        assert!((c - 0.5).abs() < 1e-15 && (r - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn box_spline_corner_is_limit_mask() {
        let (v, _, _) = box_spline([0.0_f64, 0.0]);
        assert!((v[3] - 0.5).abs() < 1e-15);
        for j in [0, 1, 2, 4, 6, 7] {
            assert!((v[j] - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn multiple_irregular_is_rejected() {
        let m = icosahedron(1.0_f64);
        assert!(matches!(m.element_patch(0), Err(Error::MultipleIrregular { element: 0 })));
    }

    #[test]
    fn irregular_matches_explicit_refinement() {
        for (name, base) in [("ico", icosahedron(1.0)), ("oct", octahedron(1.0)), ("tet", tetrahedron(1.0))] {
            let m = jitter(&loop_subdivide(&base), 0.05, 7);
            // an element whose first corner is irregular
            let e = (0..m.num_triangles()).find(|&e| m.valence(m.triangles()[e][0]) != 6).unwrap();
            for k in 0..5usize {
                let s = 0.3 * 0.5f64.powi(k as i32);
                let jet = surface_jet(&m, ParamPoint::new(e, s, s));
                // explicit: k+1 global steps, child 0 k times then the middle child
                let mut r = m.clone();
                for _ in 0..=k {
                    r = loop_subdivide(&r);
                }
                let mut el = e;
                for _ in 0..k {
                    el *= 4;
                }
                el = 4 * el + 3;
                let patch = r.element_patch(el).unwrap();
                assert!(patch.is_regular(), "{name} k={k}");
                let mut ev = BasisEval::default();
                patch.eval_into([0.4, 0.4], &mut ev);
                let sj = SurfaceJet::from_basis(r.vertices(), &patch.vertices, &ev);
                let f = -(2f64.powi(k as i32 + 1));
                assert!(dist(jet.x, sj.x) < 1e-12, "{name} k={k}");
                assert!(dist(jet.a1, scale(sj.a1, f)) < 1e-12 * f.abs(), "{name} k={k}");
                assert!(dist(jet.a2, scale(sj.a2, f)) < 1e-12 * f.abs(), "{name} k={k}");
                assert!(dist(jet.a12, scale(sj.a12, f * f)) < 1e-11 * f * f, "{name} k={k}");
            }
        }
    }

    #[test]
    fn compiled_patch_matches_recursive_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for base in [icosahedron(1.0), octahedron(1.0), tetrahedron(1.0)] {
            let m = jitter(&loop_subdivide(&base), 0.05, 2);
            for patch in m.patches().unwrap().iter().filter(|p| !p.is_regular()) {
                let cp = patch.compile::<f64>(8);
                let (mut a, mut b) = (BasisEval::default(), BasisEval::default());
                for i in 0..40 {
                    let xi = if i < 10 {
                        let s = 0.37 * 0.5f64.powi(i);
                        [s, 0.5 * s]
                    } else {
                        random_xi(&mut rng)
                    };
                    patch.eval_into(xi, &mut a);
                    cp.eval_into(xi, &mut b);
                    for j in 0..patch.n_v() {
                        assert!((a.values[j] - b.values[j]).abs() < 1e-13);
                        for c in 0..2 {
                            assert!((a.d1[j][c] - b.d1[j][c]).abs() < 1e-11);
                        }
                        for c in 0..3 {
                            assert!((a.d2[j][c] - b.d2[j][c]).abs() < 1e-9 * (1.0 + a.d2[j][c].abs()));
                        }
                    }
                }
            }
        }
    }

    fn surface_jet(m: &ControlMesh<f64>, p: ParamPoint<f64>) -> SurfaceJet<f64> {
        let patch = m.element_patch(p.element).unwrap();
        let mut ev = BasisEval::default();
        patch.eval_into(p.xi, &mut ev);
        SurfaceJet::from_basis(m.vertices(), &patch.vertices, &ev)
    }

    #[test]
    fn partition_of_unity_and_derivative_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for base in [icosahedron(1.0), octahedron(1.0), tetrahedron(1.0)] {
            let m = jitter(&loop_subdivide(&base), 0.05, 1);
            for _ in 0..100 {
                let e = rng.gen_range(0..m.num_triangles());
                let b = evaluate_basis(&m, ParamPoint { element: e, xi: random_xi(&mut rng) }).unwrap();
                let s: f64 = b.values.iter().sum();
                assert!((s - 1.0).abs() < 1e-10);
                for c in 0..2 {
                    assert!(b.d1.iter().map(|d| d[c]).sum::<f64>().abs() < 1e-8);
                }
                for c in 0..3 {
                    assert!(b.d2.iter().map(|d| d[c]).sum::<f64>().abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let m = jitter(&loop_subdivide(&loop_subdivide(&icosahedron(1.0))), 0.02, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..40 {
            let e = rng.gen_range(0..m.num_triangles());
            let mut xi = random_xi(&mut rng);
            xi = [0.05 + 0.85 * xi[0], 0.05 + 0.85 * xi[1]];
            if xi[0] + xi[1] > 0.95 {
                continue;
            }
            let b = evaluate_basis(&m, ParamPoint { element: e, xi }).unwrap();
            for dir in 0..2 {
                let mut p = xi;
                let mut q = xi;
                p[dir] += h;
                q[dir] -= h;
                let bp = evaluate_basis(&m, ParamPoint { element: e, xi: p }).unwrap();
                let bq = evaluate_basis(&m, ParamPoint { element: e, xi: q }).unwrap();
                let scale_d: f64 = b.d1.iter().map(|d| d[dir].abs()).fold(0.0, f64::max);
                for a in 0..b.n_v() {
                    let fd = (bp.values[a] - bq.values[a]) / (2.0 * h);
                    assert!((fd - b.d1[a][dir]).abs() <= 1e-6 * scale_d, "fd {fd} vs {}", b.d1[a][dir]);
                }
            }
        }
    }

    #[test]
    fn refinement_invariance() {
        let m = jitter(&loop_subdivide(&octahedron(1.0)), 0.05, 2);
        let r = loop_subdivide(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let p = ParamPoint { element: rng.gen_range(0..m.num_triangles()), xi: random_xi(&mut rng) };
            let a = limit_position(&m, p).unwrap();
            let b = limit_position(&r, refine_param(p)).unwrap();
            assert!(dist(a, b) < 1e-12);
        }
    }

    #[test]
    fn vertex_limit_matches_corner_evaluation() {
        let m = jitter(&loop_subdivide(&icosahedron(1.0)), 0.05, 9);
        for (e, t) in m.triangles().iter().enumerate() {
            for (k, xi) in [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]].into_iter().enumerate() {
                let x = limit_position(&m, ParamPoint { element: e, xi }).unwrap();
                assert!(dist(x, m.vertex_limit_position(t[k])) < 1e-13);
                let n = limit_normal(&m, ParamPoint { element: e, xi }).unwrap();
                assert!(dist(n, m.vertex_limit_normal(t[k]).unwrap()) < 1e-10);
            }
        }
    }

    #[test]
    fn continuity_across_edges() {
        let m = jitter(&loop_subdivide(&icosahedron(1.0)), 0.05, 13);
        for e in 0..m.num_triangles() {
            let t = m.triangles()[e];
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let f = m.edge_triangle(b, a).unwrap();
                let tf = m.triangles()[f];
                let kf = tf.iter().position(|&v| v == b).unwrap();
                for i in 1..=20 {
                    let s = i as f64 / 21.0;
                    let corner = |k: usize| [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]][k];
                    let lerp = |p: [f64; 2], q: [f64; 2], s: f64| [p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])];
                    let xi_e = lerp(corner(k), corner((k + 1) % 3), s);
                    let xi_f = lerp(corner((kf + 1) % 3), corner(kf), s);
                    let pe = ParamPoint { element: e, xi: xi_e };
                    let pf = ParamPoint { element: f, xi: xi_f };
                    assert!(dist(limit_position(&m, pe).unwrap(), limit_position(&m, pf).unwrap()) < 1e-12);
                    let ne = limit_normal(&m, pe).unwrap();
                    let nf = limit_normal(&m, pf).unwrap();
                    assert!(dist(ne, nf) < 1e-8);
                }
            }
        }
    }

    #[test]
    fn planar_patch_normal() {
        // regular planar triangulated grid, wrapped into a closed torus so that topology is valid
        let (nu, nw) = (8usize, 8usize);
        let mut verts = Vec::new();
        for i in 0..nu {
            for j in 0..nw {
                verts.push([i as f64 + 0.5 * j as f64, j as f64 * 0.75f64.sqrt(), 0.0]);
            }
        }
        let id = |i: usize, j: usize| (i % nu) * nw + (j % nw);
        let mut tris = Vec::new();
        for i in 0..nu {
            for j in 0..nw {
                tris.push([id(i, j), id(i + 1, j), id(i, j + 1)]);
                tris.push([id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        let m = ControlMesh::new(verts, tris).unwrap();
        assert_eq!(m.genus(), 1);
        // element away from the periodic seam: all stencil vertices unwrapped
        let e = 2 * (3 * nw + 3);
        let n = limit_normal(&m, ParamPoint::new(e, 0.2, 0.3)).unwrap();
        assert!((n[2] - 1.0).abs() < 1e-14);
        // linear reproduction: limit of a linear control net is the linear function
        let x = limit_position(&m, ParamPoint::new(e, 0.2, 0.3)).unwrap();
        let t = m.triangles()[e];
        let v = m.vertices();
        let expect = [
            0.5 * v[t[0]][0] + 0.2 * v[t[1]][0] + 0.3 * v[t[2]][0],
            0.5 * v[t[0]][1] + 0.2 * v[t[1]][1] + 0.3 * v[t[2]][1],
        ];
        assert!((x[0] - expect[0]).abs() < 1e-12 && (x[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn irregular_corner_uses_limit_formulas() {
        let m = loop_subdivide(&icosahedron(1.0_f64));
        let e = (0..m.num_triangles()).find(|&e| m.valence(m.triangles()[e][0]) == 5).unwrap();
        let b = evaluate_basis(&m, ParamPoint::new(e, 0.0, 0.0)).unwrap();
        assert!(b.at_irregular_corner);
        let n = limit_normal(&m, ParamPoint::new(e, 0.0, 0.0)).unwrap();
        let x = limit_position(&m, ParamPoint::new(e, 0.0, 0.0)).unwrap();
        assert!(dot(n, scale(x, 1.0 / norm(x))) > 0.999);
        let near = limit_position(&m, ParamPoint::new(e, 1e-9, 1e-9)).unwrap();
        assert!(norm(sub(near, x)) < 1e-7);
    }

    #[test]
    fn f32_evaluation() {
        let m = loop_subdivide(&octahedron(1.0_f32));
        let b = evaluate_basis(&m, ParamPoint::new(0, 0.25_f32, 0.25)).unwrap();
        assert!((b.values.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}
