//! Collocation BEM for the exterior Helmholtz problem on the limit surface.
//!
//! Conventions (time factor e^{-i omega t}): normal derivatives are taken
//! along n_in, the normal pointing from the fluid into the body. The
//! discrete equation at collocation point x_A is
//!
//!   1/2 p(x_A) + int dG/dn_in p dS = int G q dS + p_inc(x_A),  q = dp/dn_in,
//!
//! and the exterior field is p(x) = p_inc(x) + int G q dS - int dG/dn_in p dS.
//! The static double layer with this orientation integrates to +1/2 over a
//! closed surface, which is the constant used by the singularity subtraction.

use std::io::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use faer::Mat;
use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quadrature::{duffy, dunavant7, split4, TriangleRule};
use crate::scalar::{dist, dot, norm, scale, sub, Vec3};
use crate::subdivision::{limit_weights, BasisEval, CompiledPatch, ControlMesh, ElementPatch, SurfaceJet};
use crate::surface::element_pieces;
use crate::C64;

const FOUR_PI: f64 = 4.0 * std::f64::consts::PI;

/// Dyadic depth towards irregular corners; the innermost, non-polynomial
/// piece then carries a negligible share.
const PIECE_DEPTH: usize = 20;
/// Depth used for the double layer when the source point sits on an
/// irregular corner. Much deeper pieces lose the normal offset y - x to
/// rounding; the subtracted integrand is mild enough on the remaining piece.
const STATIC_DEPTH: usize = 12;

/// Jump coefficient at smooth points.
pub const JUMP: f64 = 0.5;
/// Closed-surface integral of the static double layer along n_in.
pub const STATIC_IDENTITY: f64 = 0.5;

/// e^{ikr} / (4 pi r)
pub fn helmholtz_kernel(x: Vec3<f64>, y: Vec3<f64>, k: f64) -> Result<C64> {
    let r = dist(x, y);
    if r == 0.0 {
        return Err(Error::CoincidentPoints);
    }
    Ok(C64::from_polar(1.0 / (FOUR_PI * r), k * r))
}

/// Normal derivative of the kernel at the field point y along n_y.
pub fn kernel_dgdn(x: Vec3<f64>, y: Vec3<f64>, n_y: Vec3<f64>, k: f64) -> Result<C64> {
    let d = sub(y, x);
    let r = norm(d);
    if r == 0.0 {
        return Err(Error::CoincidentPoints);
    }
    let drdn = dot(d, n_y) / r;
    Ok(C64::from_polar(1.0 / (FOUR_PI * r * r), k * r) * C64::new(-1.0, k * r) * drdn)
}

/// Fluid data and incident plane wave.
#[derive(Clone, Copy, Debug)]
pub struct WaveContext {
    pub k: f64,
    pub c: f64,
    pub rho_f: f64,
    pub amplitude: f64,
    pub direction: Vec3<f64>,
}

impl WaveContext {
    pub fn new(k: f64, c: f64, rho_f: f64) -> Self {
        Self { k, c, rho_f, amplitude: 1.0, direction: [1.0, 0.0, 0.0] }
    }

    pub fn with_direction(mut self, d: Vec3<f64>) -> Self {
        self.direction = scale(d, 1.0 / norm(d));
        self
    }

    pub fn omega(&self) -> f64 {
        self.k * self.c
    }

    pub fn p_inc(&self, x: Vec3<f64>) -> C64 {
        C64::from_polar(self.amplitude, self.k * dot(self.direction, x))
    }

    /// Derivative of the incident field along `n`.
    pub fn dp_inc(&self, x: Vec3<f64>, n: Vec3<f64>) -> C64 {
        self.p_inc(x) * C64::new(0.0, self.k * dot(self.direction, n))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 0.0) || !((norm(self.direction) - 1.0).abs() < 1e-12) {
            return Err(Error::Scenario(format!("invalid wave: k={} |d|={}", self.k, norm(self.direction))));
        }
        Ok(())
    }
}

/// One collocation point per control vertex, at its limit position.
#[derive(Clone, Debug)]
pub struct CollocationTable {
    pub points: Vec<Vec3<f64>>,
    /// Unit outward (into the fluid) normals.
    pub normals: Vec<Vec3<f64>>,
    pub owner: Vec<usize>,
}

impl CollocationTable {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn build_collocation_table(mesh: &ControlMesh<f64>) -> Result<CollocationTable> {
    let n = mesh.num_vertices();
    let mut normals = Vec::with_capacity(n);
    for v in 0..n {
        normals.push(mesh.vertex_limit_normal(v)?);
    }
    Ok(CollocationTable {
        points: (0..n).map(|v| mesh.vertex_limit_position(v)).collect(),
        normals,
        owner: (0..n).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    Dunavant7,
    /// n x n collapsed Gauss product rule (degree 2n - 1).
    Collapsed(usize),
}

impl Rule {
    pub fn build(self) -> TriangleRule<f64> {
        match self {
            Rule::Dunavant7 => dunavant7(),
            Rule::Collapsed(n) => duffy(n, 0),
        }
    }

    fn doubled(self) -> Self {
        match self {
            Rule::Dunavant7 => Rule::Collapsed(6),
            Rule::Collapsed(n) => Rule::Collapsed(2 * n),
        }
    }
}

/// One rule of the distance-driven ladder. It applies to a (sub)element
/// when q >= `q_min` and k times the element diameter is at most `kd_max`.
#[derive(Clone, Copy, Debug)]
pub struct Tier {
    pub rule: Rule,
    pub q_min: f64,
    pub kd_max: f64,
}

/// Distance-driven rule selection. `q` is the distance from the source
/// point to a (sub)element bound divided by the bound's diameter. Tiers are
/// ordered cheapest first; elements matching none are split adaptively and
/// the last tier's rule is used at the bottom.
#[derive(Clone, Copy, Debug)]
pub struct QuadratureSettings {
    pub tiers: [Tier; 3],
    /// Adaptive split depth for near elements.
    pub near_levels: usize,
    /// Collapsed rule order at the singular corner.
    pub duffy_n: usize,
}

impl Default for QuadratureSettings {
    fn default() -> Self {
        Self {
            tiers: [
                Tier { rule: Rule::Dunavant7, q_min: 12.0, kd_max: 0.25 },
                Tier { rule: Rule::Collapsed(5), q_min: 6.0, kd_max: 0.5 },
                Tier { rule: Rule::Collapsed(6), q_min: 1.0, kd_max: 3.0 },
            ],
            near_levels: 4,
            duffy_n: 10,
        }
    }
}

impl QuadratureSettings {
    /// Every rule at twice its order; thresholds unchanged.
    pub fn doubled(&self) -> Self {
        let mut out = *self;
        for t in &mut out.tiers {
            t.rule = t.rule.doubled();
        }
        out.duffy_n *= 2;
        out
    }

    fn select(&self, q: f64, kd: f64) -> Option<usize> {
        self.tiers.iter().position(|t| q >= t.q_min && kd <= t.kd_max)
    }
}

/// Quadrature samples of one element for a fixed rule, flattened.
#[derive(Clone, Debug, Default)]
struct CachedRule {
    x: Vec<Vec3<f64>>,
    /// Unit n_in times area weight.
    nw: Vec<Vec3<f64>>,
    w: Vec<f64>,
    /// Basis values, point-major.
    vals: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Ball {
    c: Vec3<f64>,
    r: f64,
}

impl Ball {
    fn q(&self, x: Vec3<f64>) -> f64 {
        (dist(x, self.c) - self.r).max(0.0) / (2.0 * self.r)
    }
}

const CORNERS: [[f64; 2]; 3] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];

/// Dyadic pieces of sub-triangle `c` towards its corner `j`, innermost last.
fn corner_pieces(c: [[f64; 2]; 3], j: usize, depth: usize) -> Vec<[[f64; 2]; 3]> {
    let mut out = Vec::with_capacity(3 * depth + 1);
    let mut cur = c;
    for _ in 0..depth {
        let ch = split4(cur);
        out.extend((0..3).filter(|&i| i != j).map(|i| ch[i]));
        out.push(ch[3]);
        cur = ch[j];
    }
    out.push(cur);
    out
}

fn sample_point(patch: &CompiledPatch<f64>, verts: &[Vec3<f64>], xi: [f64; 2], ev: &mut BasisEval<f64>) -> SurfaceJet<f64> {
    patch.eval_into(xi, ev);
    SurfaceJet::from_basis(verts, &patch.patch.vertices, ev)
}

fn piece_ball(patch: &CompiledPatch<f64>, verts: &[Vec3<f64>], c: [[f64; 2]; 3], ev: &mut BasisEval<f64>) -> Ball {
    let mid = [(c[0][0] + c[1][0] + c[2][0]) / 3.0, (c[0][1] + c[1][1] + c[2][1]) / 3.0];
    let centre = sample_point(patch, verts, mid, ev).x;
    let mut r: f64 = 0.0;
    let probes = [
        c[0],
        c[1],
        c[2],
        [0.5 * (c[0][0] + c[1][0]), 0.5 * (c[0][1] + c[1][1])],
        [0.5 * (c[1][0] + c[2][0]), 0.5 * (c[1][1] + c[2][1])],
        [0.5 * (c[2][0] + c[0][0]), 0.5 * (c[2][1] + c[0][1])],
    ];
    for p in probes {
        r = r.max(dist(sample_point(patch, verts, p, ev).x, centre));
    }
    Ball { c: centre, r: 1.1 * r }
}

/// Pieces at least six levels down are small compared with their distance
/// to any point that selects a cached rule and take `small`.
fn cache_rule(
    patch: &CompiledPatch<f64>,
    verts: &[Vec3<f64>],
    pieces: &[[[f64; 2]; 3]],
    rule: &TriangleRule<f64>,
    small: &TriangleRule<f64>,
) -> CachedRule {
    let mut out = CachedRule::default();
    let mut ev = BasisEval::default();
    for &pc in pieces {
        let size = (pc[1][0] - pc[0][0]).abs().max((pc[1][1] - pc[0][1]).abs()).max((pc[2][0] - pc[0][0]).abs());
        let m = if size <= 1.0 / 64.0 { small.mapped(pc) } else { rule.mapped(pc) };
        for (xi, w) in m.points.iter().zip(&m.weights) {
            let j = sample_point(patch, verts, *xi, &mut ev);
            let nr = j.normal_raw();
            let jac = norm(nr);
            out.x.push(j.x);
            out.nw.push(scale(nr, -w));
            out.w.push(w * jac);
            out.vals.extend_from_slice(&ev.values);
        }
    }
    out
}

/// Singular-point data for an element incident to the collocation vertex.
struct Singular<'a> {
    /// Corner of the element at the collocation vertex.
    corner: usize,
    /// N_b(x_A) for every local basis index.
    at_x: &'a [f64],
}

/// Mesh-dependent, wavenumber-independent BEM data.
pub struct BemGeometry {
    vertices: Vec<Vec3<f64>>,
    triangles: Vec<[usize; 3]>,
    patches: Vec<CompiledPatch<f64>>,
    pieces: Vec<Vec<[[f64; 2]; 3]>>,
    balls: Vec<Ball>,
    /// Per tier, per element.
    cached: [Vec<CachedRule>; 3],
    rules: [TriangleRule<f64>; 3],
    duffy_rules: [TriangleRule<f64>; 3],
    pub settings: QuadratureSettings,
    pub table: CollocationTable,
    /// Limit stencil of each vertex: (vertex, N_vertex(x_A)).
    stencils: Vec<Vec<(usize, f64)>>,
    /// Elements whose patch contains each vertex.
    support: Vec<Vec<usize>>,
    row_static: OnceLock<Vec<f64>>,
}

impl BemGeometry {
    pub fn new(mesh: &ControlMesh<f64>, settings: QuadratureSettings) -> Result<Self> {
        let patches: Vec<CompiledPatch<f64>> = mesh.patches()?.iter().map(|p| p.compile(PIECE_DEPTH + 2)).collect();
        let verts = mesh.vertices().to_vec();
        let pieces: Vec<_> = patches.iter().map(|p| element_pieces(&p.patch, PIECE_DEPTH)).collect();
        let rules = settings.tiers.map(|t| t.rule.build());
        let per_element: Vec<(Ball, [CachedRule; 3])> = patches
            .par_iter()
            .zip(&pieces)
            .map(|(p, pc)| {
                let mut ev = BasisEval::default();
                let ball = piece_ball(p, &verts, [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], &mut ev);
                (ball, std::array::from_fn(|i| cache_rule(p, &verts, pc, &rules[i], &rules[0])))
            })
            .collect();
        let balls = per_element.iter().map(|(b, _)| *b).collect();
        let mut cached: [Vec<CachedRule>; 3] = Default::default();
        for (_, c) in per_element {
            for (dst, src) in cached.iter_mut().zip(c) {
                dst.push(src);
            }
        }
        let n = mesh.num_vertices();
        let mut stencils = Vec::with_capacity(n);
        for v in 0..n {
            let (wc, wr) = limit_weights::<f64>(mesh.valence(v));
            let mut s = vec![(v, wc)];
            s.extend(mesh.ring(v).iter().map(|&r| (r, wr)));
            stencils.push(s);
        }
        let mut support = vec![Vec::new(); n];
        for (e, p) in patches.iter().enumerate() {
            for &v in &p.patch.vertices {
                support[v].push(e);
            }
        }
        Ok(Self {
            vertices: verts,
            triangles: mesh.triangles().to_vec(),
            patches,
            pieces,
            balls,
            cached,
            rules,
            duffy_rules: [duffy(settings.duffy_n, 0), duffy(settings.duffy_n, 1), duffy(settings.duffy_n, 2)],
            settings,
            table: build_collocation_table(mesh)?,
            stencils,
            support,
            row_static: OnceLock::new(),
        })
    }

    pub fn num_dofs(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_elements(&self) -> usize {
        self.patches.len()
    }

    pub fn patch(&self, e: usize) -> &ElementPatch {
        &self.patches[e].patch
    }

    /// Elements whose basis support contains vertex `v`.
    pub fn support(&self, v: usize) -> &[usize] {
        &self.support[v]
    }

    /// Limit stencil N_b(x_A) of collocation point `a`.
    pub fn stencil(&self, a: usize) -> &[(usize, f64)] {
        &self.stencils[a]
    }

    /// Bounding ball (centre, radius) of an element's limit surface.
    pub fn element_ball(&self, e: usize) -> (Vec3<f64>, f64) {
        (self.balls[e].c, self.balls[e].r)
    }

    /// Integrals of N_b dG/dn_in and N_b G over element `e` for source point
    /// `x`, added to `h` and `g` (local basis order). Returns the integral of
    /// the static double layer, or zero for singular elements, where the
    /// static part is subtracted in the integrand instead.
    fn element_integrals(&self, x: Vec3<f64>, sing: Option<&Singular<'_>>, e: usize, k: f64, h: &mut [C64], g: &mut [C64]) -> f64 {
        if let Some(s) = sing {
            return self.singular_element(x, s, e, k, h, g);
        }
        let ball = self.balls[e];
        if let Some(t) = self.settings.select(ball.q(x), 2.0 * k * ball.r) {
            return accumulate_cached(&self.cached[t][e], x, k, h, g);
        }
        let mut ev = BasisEval::default();
        let mut s0 = 0.0;
        for &pc in &self.pieces[e] {
            s0 += self.adaptive(x, e, pc, 0, k, None, h, g, &mut ev);
        }
        s0
    }

    #[allow(clippy::too_many_arguments)]
    fn adaptive(
        &self,
        x: Vec3<f64>,
        e: usize,
        c: [[f64; 2]; 3],
        level: usize,
        k: f64,
        sub_at: Option<&[f64]>,
        h: &mut [C64],
        g: &mut [C64],
        ev: &mut BasisEval<f64>,
    ) -> f64 {
        let patch = &self.patches[e];
        let ball = if level == 0 && c == [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]] {
            self.balls[e]
        } else {
            piece_ball(patch, &self.vertices, c, ev)
        };
        let tier = self.settings.select(ball.q(x), 2.0 * k * ball.r);
        if tier.is_none() && level < self.settings.near_levels {
            return split4(c).iter().map(|&ch| self.adaptive(x, e, ch, level + 1, k, sub_at, h, g, ev)).sum();
        }
        let rule = &self.rules[tier.unwrap_or(2)];
        self.apply_rule(x, e, &rule.mapped(c), k, sub_at, h, g, ev)
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_rule(
        &self,
        x: Vec3<f64>,
        e: usize,
        rule: &TriangleRule<f64>,
        k: f64,
        sub_at: Option<&[f64]>,
        h: &mut [C64],
        g: &mut [C64],
        ev: &mut BasisEval<f64>,
    ) -> f64 {
        let patch = &self.patches[e];
        let mut s0 = 0.0;
        for (xi, w) in rule.points.iter().zip(&rule.weights) {
            let j = sample_point(patch, &self.vertices, *xi, ev);
            let nr = j.normal_raw();
            let jac = norm(nr);
            let n_in = scale(nr, -1.0 / jac);
            let (gk, dk, d0) = kernels(x, j.x, n_in, k);
            let wj = w * jac;
            match sub_at {
                None => {
                    s0 += d0 * wj;
                    for (b, &nb) in ev.values.iter().enumerate() {
                        h[b] += dk * (nb * wj);
                        g[b] += gk * (nb * wj);
                    }
                }
                Some(at) => {
                    for (b, &nb) in ev.values.iter().enumerate() {
                        h[b] += (dk * nb - at[b] * d0) * wj;
                        g[b] += gk * (nb * wj);
                    }
                }
            }
        }
        s0
    }

    fn singular_element(&self, x: Vec3<f64>, s: &Singular<'_>, e: usize, k: f64, h: &mut [C64], g: &mut [C64]) -> f64 {
        let target = CORNERS[s.corner];
        let at_irregular = self.patches[e].patch.irregular_corner() == Some(s.corner);
        let mut ev = BasisEval::default();
        let mut scratch = vec![C64::new(0.0, 0.0); h.len()];
        for pc in self.singular_pieces(e, s.corner) {
            match pc.iter().position(|c| *c == target) {
                Some(j) if at_irregular => {
                    self.apply_rule(x, e, &self.duffy_rules[j].mapped(pc), k, Some(s.at_x), h, &mut scratch, &mut ev);
                    for sub in corner_pieces(pc, j, PIECE_DEPTH - STATIC_DEPTH) {
                        match sub.iter().position(|c| *c == target) {
                            Some(i) => self.apply_rule(x, e, &self.duffy_rules[i].mapped(sub), k, Some(s.at_x), &mut scratch, g, &mut ev),
                            None => self.adaptive(x, e, sub, 0, k, Some(s.at_x), &mut scratch, g, &mut ev),
                        };
                    }
                }
                Some(j) => {
                    self.apply_rule(x, e, &self.duffy_rules[j].mapped(pc), k, Some(s.at_x), h, g, &mut ev);
                }
                None => {
                    self.adaptive(x, e, pc, 0, k, Some(s.at_x), h, g, &mut ev);
                }
            }
        }
        0.0
    }

    fn singular_pieces(&self, e: usize, corner: usize) -> Vec<[[f64; 2]; 3]> {
        if self.patches[e].patch.irregular_corner() == Some(corner) {
            element_pieces(&self.patches[e].patch, STATIC_DEPTH)
        } else {
            self.pieces[e].clone()
        }
    }

    fn singular_info(&self, a: usize, e: usize) -> Option<(usize, Vec<f64>)> {
        let corner = self.triangles[e].iter().position(|&v| v == a)?;
        let st = &self.stencils[a];
        let at = self.patches[e]
            .patch
            .vertices
            .iter()
            .map(|v| st.iter().find(|(s, _)| s == v).map(|&(_, w)| w).unwrap_or(0.0))
            .collect();
        Some((corner, at))
    }

    /// Integrates row `a` over the listed elements and hands each element's
    /// local integrals to `sink`. Returns the static double-layer sum over
    /// the non-singular elements among them.
    fn row_elements(&self, a: usize, k: f64, elements: &[usize], mut sink: impl FnMut(usize, &[C64], &[C64])) -> f64 {
        let x = self.table.points[a];
        let mut h = Vec::new();
        let mut g = Vec::new();
        let mut s0 = 0.0;
        for &e in elements {
            let nv = self.patches[e].n_v();
            h.clear();
            h.resize(nv, C64::new(0.0, 0.0));
            g.clear();
            g.resize(nv, C64::new(0.0, 0.0));
            let si = self.singular_info(a, e);
            let sing = si.as_ref().map(|(corner, at)| Singular { corner: *corner, at_x: at });
            s0 += self.element_integrals(x, sing.as_ref(), e, k, &mut h, &mut g);
            sink(e, &h, &g);
        }
        s0
    }

    /// Static double-layer sums over non-singular elements for every row.
    /// Independent of k and computed once.
    pub fn row_static(&self) -> &[f64] {
        self.row_static.get_or_init(|| {
            let all: Vec<usize> = (0..self.num_elements()).collect();
            (0..self.num_dofs())
                .into_par_iter()
                .map(|a| {
                    let x = self.table.points[a];
                    let mut s0 = 0.0;
                    for &e in &all {
                        if self.triangles[e].contains(&a) {
                            continue;
                        }
                        s0 += self.static_element(x, e);
                    }
                    s0
                })
                .collect()
        })
    }

    fn static_element(&self, x: Vec3<f64>, e: usize) -> f64 {
        let c = if let Some(t) = self.settings.select(self.balls[e].q(x), 0.0) {
            &self.cached[t][e]
        } else {
            let mut h = vec![C64::new(0.0, 0.0); self.patches[e].n_v()];
            let mut g = h.clone();
            return self.element_integrals(x, None, e, 0.0, &mut h, &mut g);
        };
        let mut s = 0.0;
        for (y, nw) in c.x.iter().zip(&c.nw) {
            let d = sub(*y, x);
            let r2 = dot(d, d);
            s -= dot(d, *nw) / (FOUR_PI * r2 * r2.sqrt());
        }
        s
    }

    /// Quadrature points carrying the basis functions `cols` as seen from
    /// the collocation points `rows`. Each element gets the rule tier that
    /// direct assembly would give it for the closest row. `None` if some
    /// element would need adaptive splitting or a row touches the support.
    pub fn source_points(&self, rows: &[usize], cols: &[usize], k: f64) -> Option<SourcePoints> {
        let mut pos = std::collections::HashMap::with_capacity(cols.len());
        for (j, &b) in cols.iter().enumerate() {
            pos.insert(b, j);
        }
        let mut elems: Vec<usize> = cols.iter().flat_map(|&b| self.support[b].iter().copied()).collect();
        elems.sort_unstable();
        elems.dedup();
        let mut out = SourcePoints::default();
        for e in elems {
            let ball = self.balls[e];
            let q = rows.iter().map(|&a| ball.q(self.table.points[a])).fold(f64::INFINITY, f64::min);
            let t = self.settings.select(q, 2.0 * k * ball.r)?;
            let c = &self.cached[t][e];
            let verts = &self.patches[e].patch.vertices;
            let nv = verts.len();
            for i in 0..c.x.len() {
                let p = out.y.len();
                out.y.push(c.x[i]);
                out.nw.push(c.nw[i]);
                out.w.push(c.w[i]);
                for (l, v) in verts.iter().enumerate() {
                    if let Some(&j) = pos.get(v) {
                        out.weights.push((p, j, c.vals[i * nv + l]));
                    }
                }
            }
        }
        Some(out)
    }

    /// Coefficient multiplying N_b(x_A) in row `a`.
    fn row_constant(&self, a: usize) -> f64 {
        JUMP + STATIC_IDENTITY - self.row_static()[a]
    }

    /// Full rows of H and G.
    pub fn assemble_row(&self, a: usize, k: f64, h_row: &mut [C64], g_row: &mut [C64]) {
        h_row.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        g_row.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        let all: Vec<usize> = (0..self.num_elements()).collect();
        let cached = self.row_static.get().is_some();
        let s0 = self.row_elements(a, k, &all, |e, h, g| {
            for (i, &b) in self.patches[e].patch.vertices.iter().enumerate() {
                h_row[b] += h[i];
                g_row[b] += g[i];
            }
        });
        let rc = if cached { self.row_constant(a) } else { JUMP + STATIC_IDENTITY - s0 };
        for &(b, w) in &self.stencils[a] {
            h_row[b] += rc * w;
        }
    }

    /// Entries (H_ab, G_ab) for b in `cols`, row `a`.
    pub fn row_block(&self, a: usize, cols: &[usize], k: f64, h_out: &mut [C64], g_out: &mut [C64]) {
        let mut pos = std::collections::HashMap::with_capacity(cols.len());
        for (j, &b) in cols.iter().enumerate() {
            pos.insert(b, j);
        }
        let mut elems: Vec<usize> = cols.iter().flat_map(|&b| self.support[b].iter().copied()).collect();
        elems.sort_unstable();
        elems.dedup();
        h_out.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        g_out.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        self.row_elements(a, k, &elems, |e, h, g| {
            for (i, b) in self.patches[e].patch.vertices.iter().enumerate() {
                if let Some(&j) = pos.get(b) {
                    h_out[j] += h[i];
                    g_out[j] += g[i];
                }
            }
        });
        let rc = self.row_constant(a);
        for &(b, w) in &self.stencils[a] {
            if let Some(&j) = pos.get(&b) {
                h_out[j] += rc * w;
            }
        }
    }

    /// Entries (H_ab, G_ab) for a in `rows`, column `b`.
    pub fn col_block(&self, rows: &[usize], b: usize, k: f64, h_out: &mut [C64], g_out: &mut [C64]) {
        let elems = &self.support[b];
        for (i, &a) in rows.iter().enumerate() {
            let mut hv = C64::new(0.0, 0.0);
            let mut gv = C64::new(0.0, 0.0);
            self.row_elements(a, k, elems, |e, h, g| {
                let l = self.patches[e].patch.vertices.iter().position(|&v| v == b).expect("support");
                hv += h[l];
                gv += g[l];
            });
            if let Some(&(_, w)) = self.stencils[a].iter().find(|(s, _)| *s == b) {
                hv += self.row_constant(a) * w;
            }
            h_out[i] = hv;
            g_out[i] = gv;
        }
    }

    /// Single entry pair (H_ab, G_ab).
    pub fn entry(&self, a: usize, b: usize, k: f64) -> (C64, C64) {
        let mut h = [C64::new(0.0, 0.0)];
        let mut g = [C64::new(0.0, 0.0)];
        self.col_block(&[a], b, k, &mut h, &mut g);
        (h[0], g[0])
    }

    /// Exterior field from surface coefficients p and q = dp/dn_in.
    pub fn exterior_pressure(&self, ctx: &WaveContext, p: &[C64], q: &[C64], points: &[Vec3<f64>]) -> Vec<C64> {
        let h_min = self.balls.iter().map(|b| 2.0 * b.r).fold(f64::INFINITY, f64::min);
        for &x in points {
            if self.balls.iter().any(|b| dist(x, b.c) < b.r + h_min) {
                log::warn!("evaluation point {x:?} is within an element diameter of the surface");
            }
        }
        // surface densities at the cached points of elements far from every
        // evaluation point; the rest are integrated per point
        let far: Vec<Option<(usize, Vec<(C64, C64)>)>> = (0..self.num_elements())
            .into_par_iter()
            .map(|e| {
                let ball = self.balls[e];
                let qd = points.iter().map(|&x| ball.q(x)).fold(f64::INFINITY, f64::min);
                let t = self.settings.select(qd, 2.0 * ctx.k * ball.r)?;
                let c = &self.cached[t][e];
                let verts = &self.patches[e].patch.vertices;
                let nv = verts.len();
                let dens = (0..c.x.len())
                    .map(|i| {
                        let vals = &c.vals[i * nv..(i + 1) * nv];
                        verts.iter().zip(vals).fold((C64::new(0.0, 0.0), C64::new(0.0, 0.0)), |(sp, sq), (&b, &v)| (sp + p[b] * v, sq + q[b] * v))
                    })
                    .collect();
                Some((t, dens))
            })
            .collect();
        points
            .par_iter()
            .map(|&x| {
                let mut acc = ctx.p_inc(x);
                let mut h = Vec::new();
                let mut g = Vec::new();
                for (e, f) in far.iter().enumerate() {
                    if let Some((t, dens)) = f {
                        let c = &self.cached[*t][e];
                        for (i, &(sp, sq)) in dens.iter().enumerate() {
                            let (hk, gk) = point_kernels(x, c.x[i], c.nw[i], c.w[i], ctx.k);
                            acc += gk * sq - hk * sp;
                        }
                        continue;
                    }
                    let patch = &self.patches[e];
                    h.clear();
                    h.resize(patch.n_v(), C64::new(0.0, 0.0));
                    g.clear();
                    g.resize(patch.n_v(), C64::new(0.0, 0.0));
                    self.element_integrals(x, None, e, ctx.k, &mut h, &mut g);
                    for (i, &b) in patch.patch.vertices.iter().enumerate() {
                        acc += g[i] * q[b] - h[i] * p[b];
                    }
                }
                acc
            })
            .collect()
    }

    /// Compares every element contribution of the listed rows against the
    /// same integrals with all rule orders doubled. Returns the largest
    /// relative difference, or an error naming the first element and row
    /// above `tol`.
    pub fn verify_quadrature(&self, rows: &[usize], k: f64, tol: f64) -> Result<f64> {
        let mesh = ControlMesh::new(self.vertices.clone(), self.triangles.clone())?;
        let fine = BemGeometry::new(&mesh, self.settings.doubled())?;
        let all: Vec<usize> = (0..self.num_elements()).collect();
        let mut worst = 0.0f64;
        for &a in rows {
            let mut coarse = Vec::with_capacity(all.len());
            self.row_elements(a, k, &all, |_, h, g| coarse.push((h.to_vec(), g.to_vec())));
            let mut failure = None;
            let mut i = 0;
            fine.row_elements(a, k, &all, |e, h, g| {
                let (hc, gc) = &coarse[i];
                i += 1;
                let mut num: f64 = 0.0;
                let mut den: f64 = 0.0;
                for j in 0..h.len() {
                    num = num.max((h[j] - hc[j]).norm()).max((g[j] - gc[j]).norm());
                    den = den.max(h[j].norm()).max(g[j].norm());
                }
                let d = if den > 0.0 { num / den } else { 0.0 };
                worst = worst.max(d);
                if d > tol && failure.is_none() {
                    failure = Some((e, d));
                }
            });
            if let Some((element, diff)) = failure {
                return Err(Error::Quadrature { element, row: a, diff });
            }
        }
        Ok(worst)
    }

    /// Direct integral of the static double layer over the whole surface at
    /// collocation point `a`, with the singular elements integrated by
    /// collapsed rules and no subtraction.
    pub fn static_identity_bruteforce(&self, a: usize) -> f64 {
        let x = self.table.points[a];
        let mut s = 0.0;
        let mut ev = BasisEval::default();
        for e in 0..self.num_elements() {
            match self.triangles[e].iter().position(|&v| v == a) {
                None => s += self.static_element(x, e),
                Some(corner) => {
                    let target = CORNERS[corner];
                    let mut h = vec![C64::new(0.0, 0.0); self.patches[e].n_v()];
                    let mut g = h.clone();
                    for pc in self.singular_pieces(e, corner) {
                        s += match pc.iter().position(|c| *c == target) {
                            Some(j) => self.apply_rule(x, e, &self.duffy_rules[j].mapped(pc), 0.0, None, &mut h, &mut g, &mut ev),
                            None => self.adaptive(x, e, pc, 0, 0.0, None, &mut h, &mut g, &mut ev),
                        };
                    }
                }
            }
        }
        s
    }

    /// Mean edge length of the limit surface (control edges mapped to the
    /// chords between limit points).
    pub fn mean_edge_length(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                if a < b {
                    sum += dist(self.table.points[a], self.table.points[b]);
                    n += 1;
                }
            }
        }
        sum / n as f64
    }

    pub fn vertices(&self) -> &[Vec3<f64>] {
        &self.vertices
    }
}

/// (G, dG/dn_in, static dG/dn_in)
#[inline]
fn kernels(x: Vec3<f64>, y: Vec3<f64>, n_in: Vec3<f64>, k: f64) -> (C64, C64, f64) {
    let d = sub(y, x);
    let r2 = dot(d, d);
    let r = r2.sqrt();
    let drdn = dot(d, n_in) / r;
    let (s, c) = (k * r).sin_cos();
    let e = C64::new(c, s) / (FOUR_PI * r);
    let dk = e * C64::new(-1.0, k * r) * (drdn / r);
    (e, dk, -drdn / (FOUR_PI * r2))
}

fn accumulate_cached(c: &CachedRule, x: Vec3<f64>, k: f64, h: &mut [C64], g: &mut [C64]) -> f64 {
    let nv = h.len();
    let mut s0 = 0.0;
    for (i, (y, nw)) in c.x.iter().zip(&c.nw).enumerate() {
        let d = sub(*y, x);
        let r2 = dot(d, d);
        let r = r2.sqrt();
        let dn = dot(d, *nw) / r;
        let (s, co) = (k * r).sin_cos();
        let ew = C64::new(co, s) / (FOUR_PI * r);
        let gk = ew * c.w[i];
        let dk = ew * C64::new(-1.0, k * r) * (dn / r);
        s0 -= dn / (FOUR_PI * r2);
        let vals = &c.vals[i * nv..(i + 1) * nv];
        for b in 0..nv {
            h[b] += dk * vals[b];
            g[b] += gk * vals[b];
        }
    }
    s0
}

/// Quadrature points with sparse basis weights; see
/// [`BemGeometry::source_points`].
#[derive(Clone, Debug, Default)]
pub struct SourcePoints {
    pub y: Vec<Vec3<f64>>,
    /// Unit n_in times area weight.
    pub nw: Vec<Vec3<f64>>,
    /// Area weights.
    pub w: Vec<f64>,
    /// (point, column, basis value).
    pub weights: Vec<(usize, usize, f64)>,
}

/// Integrand weights (dG/dn_in, G) of one quadrature point of
/// [`SourcePoints`] for the collocation point `x`.
pub fn point_kernels(x: Vec3<f64>, y: Vec3<f64>, nw: Vec3<f64>, w: f64, k: f64) -> (C64, C64) {
    let d = sub(y, x);
    let r2 = dot(d, d);
    let r = r2.sqrt();
    let dn = dot(d, nw) / r;
    let (s, co) = (k * r).sin_cos();
    let ew = C64::new(co, s) / (FOUR_PI * r);
    (ew * C64::new(-1.0, k * r) * (dn / r), ew * w)
}

/// Dense H and G with their geometry.
pub struct BemOperators {
    pub h: Mat<C64>,
    pub g: Mat<C64>,
    pub ctx: WaveContext,
}

pub fn assemble_dense(geom: &BemGeometry, ctx: &WaveContext) -> BemOperators {
    let n = geom.num_dofs();
    let rows: Vec<(Vec<C64>, Vec<C64>)> = (0..n)
        .into_par_iter()
        .map(|a| {
            let mut h = vec![C64::new(0.0, 0.0); n];
            let mut g = vec![C64::new(0.0, 0.0); n];
            geom.assemble_row(a, ctx.k, &mut h, &mut g);
            (h, g)
        })
        .collect();
    let mut hm = Mat::<C64>::zeros(n, n);
    let mut gm = Mat::<C64>::zeros(n, n);
    for (a, (h, g)) in rows.into_iter().enumerate() {
        for b in 0..n {
            hm[(a, b)] = h[b];
            gm[(a, b)] = g[b];
        }
    }
    BemOperators { h: hm, g: gm, ctx: *ctx }
}

pub fn assemble_g(geom: &BemGeometry, ctx: &WaveContext) -> Mat<C64> {
    assemble_dense(geom, ctx).g
}

pub fn assemble_h(geom: &BemGeometry, ctx: &WaveContext) -> Mat<C64> {
    assemble_dense(geom, ctx).h
}

/// Incident field at the collocation points.
pub fn incident_vector(geom: &BemGeometry, ctx: &WaveContext) -> Vec<C64> {
    geom.table.points.iter().map(|&x| ctx.p_inc(x)).collect()
}

/// Binary matrix dump: magic `LFSIMAT1`, u64 rows, u64 cols (little endian),
/// then row-major (re, im) f64 pairs.
pub fn write_matrix_dump(path: impl AsRef<Path>, m: &Mat<C64>) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + 16 * m.nrows() * m.ncols());
    buf.extend_from_slice(b"LFSIMAT1");
    buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let v = m[(i, j)];
            buf.extend_from_slice(&v.re.to_le_bytes());
            buf.extend_from_slice(&v.im.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix_dump(path: impl AsRef<Path>) -> Result<Mat<C64>> {
    let b = std::fs::read(path.as_ref())?;
    let bad = |msg: &str| Error::Parse { path: path.as_ref().to_path_buf(), line: 0, msg: msg.into() };
    if b.len() < 24 || &b[..8] != b"LFSIMAT1" {
        return Err(bad("not a matrix dump"));
    }
    let rd = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"));
    let (r, c) = (rd(8) as usize, rd(16) as usize);
    if b.len() != 24 + 16 * r * c {
        return Err(bad("truncated matrix dump"));
    }
    let f = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"));
    Ok(Mat::from_fn(r, c, |i, j| {
        let o = 24 + 16 * (i * c + j);
        Complex::new(f(o), f(o + 8))
    }))
}
