//! OFF/OBJ input and output, legacy VTK export, generated sphere control
//! meshes, L2 fitting to a target surface and the relative geometry error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::{dist, norm, scale, sub, Vec3};
use crate::subdivision::{icosahedron, loop_subdivide, ControlMesh};
use crate::surface::SurfaceQuadrature;
use crate::linalg::conjugate_gradient;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshFormat {
    Off,
    Obj,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("off") => Ok(Self::Off),
            Some("obj") => Ok(Self::Obj),
            _ => Err(parse_err(path, 0, "unknown mesh extension (expected .off or .obj)")),
        }
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

/// Reads an OFF or OBJ triangle mesh. Inward-oriented meshes are flipped.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<ControlMesh<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let (v, f) = match MeshFormat::from_path(path)? {
        MeshFormat::Off => parse_off(path, &text)?,
        MeshFormat::Obj => parse_obj(path, &text)?,
    };
    Ok(ControlMesh::new(v, f)?.oriented_outward())
}

pub fn save_mesh(mesh: &ControlMesh<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = match MeshFormat::from_path(path)? {
        MeshFormat::Off => format_off(mesh),
        MeshFormat::Obj => format_obj(mesh),
    };
    fs::write(path, text)?;
    Ok(())
}

/// Shortest round-trip float formatting keeps save/load bit-exact.
pub fn format_off(mesh: &ControlMesh<f64>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "OFF\n{} {} {}", mesh.num_vertices(), mesh.num_triangles(), mesh.num_edges());
    for p in mesh.vertices() {
        let _ = writeln!(s, "{:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    for t in mesh.triangles() {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    s
}

pub fn format_obj(mesh: &ControlMesh<f64>) -> String {
    let mut s = String::new();
    for p in mesh.vertices() {
        let _ = writeln!(s, "v {:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    for t in mesh.triangles() {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    s
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn num<T: std::str::FromStr>(path: &Path, line: usize, tok: Option<&str>, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| parse_err(path, line, format!("missing {what}")))?;
    tok.parse().map_err(|_| parse_err(path, line, format!("bad {what} '{tok}'")))
}

pub fn parse_off(path: &Path, text: &str) -> Result<(Vec<Vec3<f64>>, Vec<[usize; 3]>)> {
    let mut lines = content_lines(text);
    let (l0, head) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let mut rest = head.strip_prefix("OFF").ok_or_else(|| parse_err(path, l0, "missing OFF header"))?.trim().to_string();
    let mut count_line = l0;
    if rest.is_empty() {
        let (l, s) = lines.next().ok_or_else(|| parse_err(path, l0, "missing counts"))?;
        rest = s.to_string();
        count_line = l;
    }
    let mut it = rest.split_whitespace();
    let nv: usize = num(path, count_line, it.next(), "vertex count")?;
    let nf: usize = num(path, count_line, it.next(), "face count")?;
    let mut verts = Vec::with_capacity(nv);
    for i in 0..nv {
        let (l, s) = lines.next().ok_or_else(|| parse_err(path, 0, format!("file ends before vertex {i}")))?;
        let mut t = s.split_whitespace();
        verts.push([num(path, l, t.next(), "x")?, num(path, l, t.next(), "y")?, num(path, l, t.next(), "z")?]);
    }
    let mut faces = Vec::with_capacity(nf);
    for i in 0..nf {
        let (l, s) = lines.next().ok_or_else(|| parse_err(path, 0, format!("file ends before face {i}")))?;
        let mut t = s.split_whitespace();
        let k: usize = num(path, l, t.next(), "face size")?;
        if k != 3 {
            return Err(parse_err(path, l, format!("face {i} has {k} vertices; only triangles are supported")));
        }
        let mut f = [0usize; 3];
        for slot in &mut f {
            *slot = num(path, l, t.next(), "vertex index")?;
            if *slot >= nv {
                return Err(parse_err(path, l, format!("face {i} index {} out of range", *slot)));
            }
        }
        faces.push(f);
    }
    Ok((verts, faces))
}

pub fn parse_obj(path: &Path, text: &str) -> Result<(Vec<Vec3<f64>>, Vec<[usize; 3]>)> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (l, s) in content_lines(text) {
        let mut t = s.split_whitespace();
        match t.next() {
            Some("v") => verts.push([num(path, l, t.next(), "x")?, num(path, l, t.next(), "y")?, num(path, l, t.next(), "z")?]),
            Some("f") => {
                let idx: Vec<&str> = t.collect();
                let i = faces.len();
                if idx.len() != 3 {
                    return Err(parse_err(path, l, format!("face {i} has {} vertices; only triangles are supported", idx.len())));
                }
                let mut f = [0usize; 3];
                for (slot, tok) in f.iter_mut().zip(idx) {
                    let head = tok.split('/').next();
                    let v: i64 = num(path, l, head, "vertex index")?;
                    let n = verts.len() as i64;
                    let r = if v < 0 { n + v } else { v - 1 };
                    if r < 0 || r >= n {
                        return Err(parse_err(path, l, format!("face {i} index {v} out of range")));
                    }
                    *slot = r as usize;
                }
                faces.push(f);
            }
            _ => {}
        }
    }
    Ok((verts, faces))
}

/// Per-vertex data for VTK export. Values are subdivision coefficients; the
/// writer evaluates them at the vertex limit points.
#[derive(Clone, Debug)]
pub enum PointField {
    Scalar(String, Vec<f64>),
    /// Values already at the limit points, written unchanged.
    Nodal(String, Vec<f64>),
    Vector(String, Vec<Vec3<f64>>),
}

/// Legacy ASCII VTK: limit points of the control vertices connected by the
/// control triangles.
pub fn write_vtk(path: impl AsRef<Path>, mesh: &ControlMesh<f64>, fields: &[PointField]) -> Result<()> {
    fs::write(path, format_vtk(mesh, fields)?)?;
    Ok(())
}

pub fn format_vtk(mesh: &ControlMesh<f64>, fields: &[PointField]) -> Result<String> {
    let n = mesh.num_vertices();
    let limit = |vals: &dyn Fn(usize) -> f64, v: usize| {
        let (wc, wr) = crate::subdivision::limit_weights::<f64>(mesh.valence(v));
        wc * vals(v) + mesh.ring(v).iter().map(|&r| wr * vals(r)).sum::<f64>()
    };
    let mut s = String::from("# vtk DataFile Version 3.0\nlimit surface\nASCII\nDATASET POLYDATA\n");
    let _ = writeln!(s, "POINTS {n} double");
    for v in 0..n {
        let p = mesh.vertex_limit_position(v);
        let _ = writeln!(s, "{:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    let nt = mesh.num_triangles();
    let _ = writeln!(s, "POLYGONS {nt} {}", 4 * nt);
    for t in mesh.triangles() {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    if !fields.is_empty() {
        let _ = writeln!(s, "POINT_DATA {n}");
    }
    for f in fields {
        match f {
            PointField::Scalar(name, vals) => {
                if vals.len() != n {
                    return Err(Error::Dimension(format!("field {name}: {} values for {n} vertices", vals.len())));
                }
                let _ = writeln!(s, "SCALARS {} double 1\nLOOKUP_TABLE default", name.replace(' ', "_"));
                for v in 0..n {
                    let _ = writeln!(s, "{:?}", limit(&|i| vals[i], v));
                }
            }
            PointField::Nodal(name, vals) => {
                if vals.len() != n {
                    return Err(Error::Dimension(format!("field {name}: {} values for {n} vertices", vals.len())));
                }
                let _ = writeln!(s, "SCALARS {} double 1\nLOOKUP_TABLE default", name.replace(' ', "_"));
                for v in vals {
                    let _ = writeln!(s, "{v:?}");
                }
            }
            PointField::Vector(name, vals) => {
                if vals.len() != n {
                    return Err(Error::Dimension(format!("field {name}: {} values for {n} vertices", vals.len())));
                }
                let _ = writeln!(s, "VECTORS {} double", name.replace(' ', "_"));
                for v in 0..n {
                    let c: Vec<f64> = (0..3).map(|d| limit(&|i| vals[i][d], v)).collect();
                    let _ = writeln!(s, "{:?} {:?} {:?}", c[0], c[1], c[2]);
                }
            }
        }
    }
    Ok(s)
}

/// Icosahedron refined `levels` times with the control vertices pushed back
/// onto the sphere after every step.
pub fn make_sphere_control_mesh(levels: usize, radius: f64) -> ControlMesh<f64> {
    let mut m = icosahedron(radius);
    for _ in 0..levels {
        let s = loop_subdivide(&m);
        let v = s.vertices().iter().map(|&p| scale(p, radius / norm(p))).collect();
        m = s.with_vertices(v).expect("same connectivity");
    }
    m
}

/// Surface with a closest-point projection.
pub trait Target: Sync {
    fn project(&self, x: Vec3<f64>) -> Vec3<f64>;
}

#[derive(Clone, Copy, Debug)]
pub struct SphereTarget {
    pub center: Vec3<f64>,
    pub radius: f64,
}

impl SphereTarget {
    pub fn new(radius: f64) -> Self {
        Self { center: [0.0; 3], radius }
    }
}

impl Target for SphereTarget {
    fn project(&self, x: Vec3<f64>) -> Vec3<f64> {
        let d = sub(x, self.center);
        let l = norm(d);
        if l == 0.0 {
            return [self.center[0] + self.radius, self.center[1], self.center[2]];
        }
        crate::scalar::add(self.center, scale(d, self.radius / l))
    }
}

/// Every point is its own projection.
#[derive(Clone, Copy, Debug)]
pub struct IdentityTarget;

impl Target for IdentityTarget {
    fn project(&self, x: Vec3<f64>) -> Vec3<f64> {
        x
    }
}

#[derive(Clone, Debug)]
pub struct GeometryErrorReport {
    /// ||x_h - P(x_h)|| / ||P(x_h)|| in L2 over the surface.
    pub eps_g: f64,
    /// Squared error integral of each element.
    pub per_element: Vec<f64>,
}

pub fn geometry_error(mesh: &ControlMesh<f64>, target: &dyn Target) -> Result<GeometryErrorReport> {
    Ok(geometry_error_on(&SurfaceQuadrature::standard(mesh)?, target))
}

pub fn geometry_error_on(sq: &SurfaceQuadrature, target: &dyn Target) -> GeometryErrorReport {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut per_element = Vec::with_capacity(sq.elements.len());
    for el in &sq.elements {
        let mut e2 = 0.0;
        for i in 0..el.len() {
            let w = el.da(i);
            let x = el.jets[i].x;
            let p = target.project(x);
            e2 += w * dist(x, p).powi(2);
            den += w * crate::scalar::dot(p, p);
        }
        num += e2;
        per_element.push(e2);
    }
    GeometryErrorReport { eps_g: (num / den).sqrt(), per_element }
}

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop once a sweep improves eps_g by less than this factor.
    pub min_gain: f64,
    pub cg_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iter: 20, min_gain: 1e-3, cg_tol: 1e-13 }
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub mesh: ControlMesh<f64>,
    /// eps_g of the input followed by every sweep.
    pub history: Vec<f64>,
}

impl FitReport {
    pub fn eps_g(&self) -> f64 {
        self.history.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Least-squares projection of the limit surface onto `target`: repeated
/// Gram solves M P = int N P(x_h) with the projection frozen per sweep. The
/// best iterate is returned, so eps_g never increases.
pub fn l2_fit_to_target(mesh: &ControlMesh<f64>, target: &dyn Target, opts: &FitOptions) -> Result<FitReport> {
    let mut sq = SurfaceQuadrature::standard(mesh)?;
    let n = mesh.num_vertices();
    let mut cur: Vec<Vec3<f64>> = mesh.vertices().to_vec();
    let mut best = (geometry_error_on(&sq, target).eps_g, cur.clone());
    let mut history = vec![best.0];
    for _ in 0..opts.max_iter {
        let gram = sq.gram();
        let mut rhs = vec![[0.0; 3]; n];
        for el in &sq.elements {
            for i in 0..el.len() {
                let w = el.da(i);
                let p = target.project(el.jets[i].x);
                for (a, &v) in el.vertices.iter().enumerate() {
                    let s = w * el.basis[i].values[a];
                    for d in 0..3 {
                        rhs[v][d] += s * p[d];
                    }
                }
            }
        }
        let mut next = cur.clone();
        for d in 0..3 {
            let b: Vec<f64> = rhs.iter().map(|r| r[d]).collect();
            let mut x: Vec<f64> = cur.iter().map(|p| p[d]).collect();
            conjugate_gradient(&gram, &b, &mut x, opts.cg_tol, 20 * n + 100)
                .map_err(|e| Error::SingularFit(format!("Gram solve failed: {e}")))?;
            for (p, xv) in next.iter_mut().zip(x) {
                p[d] = xv;
            }
        }
        sq.update_geometry(&next);
        let eps = geometry_error_on(&sq, target).eps_g;
        history.push(eps);
        cur = next;
        let improved = eps < best.0;
        let gain = (best.0 - eps) / best.0;
        if improved {
            best = (eps, cur.clone());
        }
        if !improved || gain < opts.min_gain {
            break;
        }
    }
    Ok(FitReport { mesh: mesh.with_vertices(best.1)?, history })
}

/// Human readable mesh summary.
pub fn mesh_info(mesh: &ControlMesh<f64>) -> String {
    let vals = mesh.valences();
    let mut hist = std::collections::BTreeMap::new();
    for v in vals {
        *hist.entry(v).or_insert(0usize) += 1;
    }
    let h: Vec<String> = hist.iter().map(|(k, c)| format!("{k}:{c}")).collect();
    format!(
        "vertices {}\ntriangles {}\nedges {}\ngenus {}\nvalences {}\nsigned volume {:.6e}",
        mesh.num_vertices(),
        mesh.num_triangles(),
        mesh.num_edges(),
        mesh.genus(),
        h.join(" "),
        mesh.signed_volume()
    )
}

/// Mesh path helper used by the scenario loader.
pub fn resolve_relative(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
