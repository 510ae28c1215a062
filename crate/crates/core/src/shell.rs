//! Linear Kirchhoff-Love thin shell on the subdivision basis: membrane and
//! bending stiffness, consistent mass, Rayleigh damping and the factorised
//! dynamic operator A(omega) = -omega^2 M + i omega (c1 K + c2 M) + K.
//!
//! Displacement dofs are ordered 3 v + c (vertex v, Cartesian component c).
//! The thickness Jacobian is taken as 1, so the membrane rigidity is
//! E h / (1 - nu^2) and the bending rigidity E h^3 / (12 (1 - nu^2)).

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::CsrMatrix;
use crate::scalar::{cross, dot, norm, scale, Vec3};
use crate::surface::{ElementSamples, SurfaceQuadrature};
use crate::C64;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ShellMaterial {
    /// Young's modulus (Pa).
    pub e: f64,
    pub nu: f64,
    /// Density (kg/m^3).
    pub rho_s: f64,
    /// Thickness (m).
    pub h: f64,
    /// Rayleigh stiffness coefficient (s).
    #[serde(default)]
    pub c1: f64,
    /// Rayleigh mass coefficient (1/s).
    #[serde(default)]
    pub c2: f64,
}

impl ShellMaterial {
    /// Structural steel, undamped.
    pub fn steel(h: f64) -> Self {
        Self { e: 210e9, nu: 0.3, rho_s: 7860.0, h, c1: 0.0, c2: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e > 0.0) || !(self.nu >= 0.0 && self.nu < 0.5) || !(self.h > 0.0) || !(self.rho_s > 0.0) {
            return Err(Error::Unphysical { n: 0, msg: format!("shell material {self:?}") });
        }
        if self.c1 < 0.0 || self.c2 < 0.0 {
            return Err(Error::Unphysical { n: 0, msg: "negative Rayleigh coefficients".into() });
        }
        Ok(())
    }

    /// Thin-shell advisory h / R <= 0.1 for a characteristic radius R.
    pub fn is_thin(&self, radius: f64) -> bool {
        self.h <= 0.1 * radius + 1e-12
    }

    pub fn membrane_rigidity(&self) -> f64 {
        self.e * self.h / (1.0 - self.nu * self.nu)
    }

    pub fn bending_rigidity(&self) -> f64 {
        self.e * self.h.powi(3) / (12.0 * (1.0 - self.nu * self.nu))
    }

    /// Plane-stress tensor for unit rigidity in Voigt form
    /// (11, 22, 12 with engineering shear), from the contravariant metric.
    fn voigt(&self, ac: [[f64; 2]; 2]) -> [[f64; 3]; 3] {
        let nu = self.nu;
        let h = |a: usize, b: usize, c: usize, d: usize| {
            nu * ac[a][b] * ac[c][d] + 0.5 * (1.0 - nu) * (ac[a][c] * ac[b][d] + ac[a][d] * ac[b][c])
        };
        let idx = [(0, 0), (1, 1), (0, 1)];
        let mut out = [[0.0; 3]; 3];
        for (i, &(a, b)) in idx.iter().enumerate() {
            for (j, &(c, d)) in idx.iter().enumerate() {
                out[i][j] = h(a, b, c, d);
            }
        }
        out
    }
}

/// Vertex-level sparsity with dense 3x3 blocks.
struct BlockPattern {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
}

impl BlockPattern {
    fn new(elements: &[ElementSamples], n: usize) -> Self {
        let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); n];
        for el in elements {
            for &a in &el.vertices {
                nbrs[a].extend_from_slice(&el.vertices);
            }
        }
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        for mut r in nbrs {
            r.sort_unstable();
            r.dedup();
            cols.extend(r);
            row_ptr.push(cols.len());
        }
        Self { row_ptr, cols }
    }

    fn slot(&self, a: usize, b: usize) -> usize {
        let r = &self.cols[self.row_ptr[a]..self.row_ptr[a + 1]];
        self.row_ptr[a] + r.binary_search(&b).expect("pattern covers element pairs")
    }

    /// Adds an element matrix (local dof 3 i + c) into block storage.
    fn scatter(&self, blocks: &mut [[f64; 9]], verts: &[usize], local: &[f64]) {
        let nd = 3 * verts.len();
        for (i, &a) in verts.iter().enumerate() {
            for (j, &b) in verts.iter().enumerate() {
                let blk = &mut blocks[self.slot(a, b)];
                for r in 0..3 {
                    for c in 0..3 {
                        blk[3 * r + c] += local[(3 * i + r) * nd + 3 * j + c];
                    }
                }
            }
        }
    }

    fn to_csr(&self, blocks: &[[f64; 9]]) -> CsrMatrix<f64> {
        let n = self.row_ptr.len() - 1;
        let mut row_ptr = vec![0usize];
        let mut col_idx = Vec::with_capacity(9 * self.cols.len());
        let mut values = Vec::with_capacity(9 * self.cols.len());
        for a in 0..n {
            for r in 0..3 {
                for s in self.row_ptr[a]..self.row_ptr[a + 1] {
                    let b = self.cols[s];
                    for c in 0..3 {
                        col_idx.push(3 * b + c);
                        values.push(blocks[s][3 * r + c]);
                    }
                }
                row_ptr.push(col_idx.len());
            }
        }
        CsrMatrix { nrows: 3 * n, ncols: 3 * n, row_ptr, col_idx, values }
    }
}

/// Membrane and bending parts of the stiffness; K = membrane + bending.
pub struct StiffnessParts {
    pub membrane: CsrMatrix<f64>,
    pub bending: CsrMatrix<f64>,
}

/// Strain-displacement rows of one basis function at one point: membrane
/// and curvature changes (11, 22, 2*12), each a 3-vector over the
/// displacement components.
fn strain_rows(jet: &crate::subdivision::SurfaceJet<f64>, n3: Vec3<f64>, jac: f64, d1: [f64; 2], d2: [f64; 3]) -> ([Vec3<f64>; 3], [Vec3<f64>; 3]) {
    let (a1, a2) = (jet.a1, jet.a2);
    let m = [scale(a1, d1[0]), scale(a2, d1[1]), [
        a1[0] * d1[1] + a2[0] * d1[0],
        a1[1] * d1[1] + a2[1] * d1[0],
        a1[2] * d1[1] + a2[2] * d1[0],
    ]];
    let second = [jet.a11, jet.a22, jet.a12];
    let a2x3 = cross(a2, n3);
    let a3x1 = cross(n3, a1);
    let mut b = [[0.0; 3]; 3];
    for (r, (aab, dd)) in second.iter().zip([d2[0], d2[2], d2[1]]).enumerate() {
        let t1 = cross(a2, *aab);
        let t2 = cross(*aab, a1);
        let c = dot(*aab, n3);
        let f = if r == 2 { 2.0 } else { 1.0 };
        for i in 0..3 {
            b[r][i] = f * (dd * n3[i] + (d1[0] * t1[i] + d1[1] * t2[i] - c * (d1[0] * a2x3[i] + d1[1] * a3x1[i])) / jac);
        }
    }
    (m, b)
}

fn element_stiffness(el: &ElementSamples, mat: &ShellMaterial) -> Result<(Vec<f64>, Vec<f64>)> {
    let nv = el.vertices.len();
    let nd = 3 * nv;
    let mut km = vec![0.0; nd * nd];
    let mut kb = vec![0.0; nd * nd];
    let (cm, cb) = (mat.membrane_rigidity(), mat.bending_rigidity());
    let mut rows_m = vec![[[0.0; 3]; 3]; nv];
    let mut rows_b = vec![[[0.0; 3]; 3]; nv];
    for q in 0..el.len() {
        let jet = &el.jets[q];
        let nr = jet.normal_raw();
        let jac = norm(nr);
        let g = [[dot(jet.a1, jet.a1), dot(jet.a1, jet.a2)], [dot(jet.a1, jet.a2), dot(jet.a2, jet.a2)]];
        let det = g[0][0] * g[1][1] - g[0][1] * g[0][1];
        if !(jac > 0.0) || !(det > 1e-14 * (g[0][0] * g[1][1])) {
            return Err(Error::DegenerateTangent { element: el.element });
        }
        let ac = [[g[1][1] / det, -g[0][1] / det], [-g[0][1] / det, g[0][0] / det]];
        let d = mat.voigt(ac);
        let n3 = scale(nr, 1.0 / jac);
        let w = jac * el.weights[q];
        let ev = &el.basis[q];
        for a in 0..nv {
            let (m, b) = strain_rows(jet, n3, jac, ev.d1[a], ev.d2[a]);
            rows_m[a] = m;
            rows_b[a] = b;
        }
        for (rows, out, c) in [(&rows_m, &mut km, cm), (&rows_b, &mut kb, cb)] {
            // D times the rows of each basis function, then contract
            let drows: Vec<[Vec3<f64>; 3]> = rows
                .iter()
                .map(|r| {
                    let mut o = [[0.0; 3]; 3];
                    for s in 0..3 {
                        for t in 0..3 {
                            for i in 0..3 {
                                o[s][i] += d[s][t] * r[t][i];
                            }
                        }
                    }
                    o
                })
                .collect();
            let f = c * w;
            for a in 0..nv {
                for b in 0..nv {
                    for i in 0..3 {
                        for j in 0..3 {
                            let mut v = 0.0;
                            for s in 0..3 {
                                v += rows[a][s][i] * drows[b][s][j];
                            }
                            out[(3 * a + i) * nd + 3 * b + j] += f * v;
                        }
                    }
                }
            }
        }
    }
    Ok((km, kb))
}

pub fn assemble_stiffness_parts(sq: &SurfaceQuadrature, mat: &ShellMaterial) -> Result<StiffnessParts> {
    mat.validate()?;
    let pattern = BlockPattern::new(&sq.elements, sq.num_vertices);
    let locals: Vec<(Vec<f64>, Vec<f64>)> = sq.elements.par_iter().map(|el| element_stiffness(el, mat)).collect::<Result<_>>()?;
    let mut bm = vec![[0.0; 9]; pattern.cols.len()];
    let mut bb = bm.clone();
    for (el, (km, kb)) in sq.elements.iter().zip(&locals) {
        pattern.scatter(&mut bm, &el.vertices, km);
        pattern.scatter(&mut bb, &el.vertices, kb);
    }
    Ok(StiffnessParts { membrane: pattern.to_csr(&bm), bending: pattern.to_csr(&bb) })
}

pub fn assemble_stiffness(sq: &SurfaceQuadrature, mat: &ShellMaterial) -> Result<CsrMatrix<f64>> {
    let p = assemble_stiffness_parts(sq, mat)?;
    Ok(add_same_pattern(&p.membrane, &p.bending, 1.0))
}

/// a + s b for matrices with identical sparsity.
fn add_same_pattern(a: &CsrMatrix<f64>, b: &CsrMatrix<f64>, s: f64) -> CsrMatrix<f64> {
    debug_assert_eq!(a.col_idx, b.col_idx);
    let mut out = a.clone();
    for (v, w) in out.values.iter_mut().zip(&b.values) {
        *v += s * w;
    }
    out
}

/// Consistent mass rho_s h int N_a N_b per displacement component.
pub fn assemble_mass(sq: &SurfaceQuadrature, mat: &ShellMaterial) -> Result<CsrMatrix<f64>> {
    mat.validate()?;
    let pattern = BlockPattern::new(&sq.elements, sq.num_vertices);
    let mut blocks = vec![[0.0; 9]; pattern.cols.len()];
    let rho_h = mat.rho_s * mat.h;
    for el in &sq.elements {
        let nv = el.vertices.len();
        for q in 0..el.len() {
            let w = rho_h * el.da(q);
            let v = &el.basis[q].values;
            for i in 0..nv {
                for j in 0..nv {
                    let blk = &mut blocks[pattern.slot(el.vertices[i], el.vertices[j])];
                    let m = w * v[i] * v[j];
                    blk[0] += m;
                    blk[4] += m;
                    blk[8] += m;
                }
            }
        }
    }
    Ok(pattern.to_csr(&blocks))
}

/// Condition estimate above which A(omega) is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

enum Factor {
    Real(Lu<usize, f64>),
    Complex(Lu<usize, C64>),
}

/// Sparse dynamic operator with its factorisation.
pub struct ShellOperator {
    pub k: CsrMatrix<f64>,
    pub m: CsrMatrix<f64>,
    pub material: ShellMaterial,
    pub omega: f64,
    factor: Factor,
}

impl std::fmt::Debug for ShellOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShellOperator").field("dofs", &self.k.nrows).field("omega", &self.omega).finish()
    }
}

/// Entries of A(omega) on the common pattern of K and M.
fn dynamic_entries(k: &CsrMatrix<f64>, m: &CsrMatrix<f64>, mat: &ShellMaterial, omega: f64) -> Vec<C64> {
    let w2 = omega * omega;
    k.values
        .iter()
        .zip(&m.values)
        .map(|(&kv, &mv)| C64::new(kv - w2 * mv, omega * (mat.c1 * kv + mat.c2 * mv)))
        .collect()
}

pub fn build_dynamic_operator(k: CsrMatrix<f64>, m: CsrMatrix<f64>, mat: &ShellMaterial, omega: f64) -> Result<ShellOperator> {
    mat.validate()?;
    if !(omega >= 0.0) {
        return Err(Error::Unphysical { n: 0, msg: format!("omega = {omega}") });
    }
    if k.col_idx != m.col_idx || k.row_ptr != m.row_ptr {
        return Err(Error::Dimension("K and M must share a sparsity pattern".into()));
    }
    let n = k.nrows;
    let vals = dynamic_entries(&k, &m, mat, omega);
    let damped = vals.iter().any(|v| v.im != 0.0);
    let singular = |_| Error::SingularOperator { omega };
    let factor = if damped {
        let trip: Vec<_> = k.triplets().iter().zip(&vals).map(|(&(i, j, _), &v)| Triplet::new(i, j, v)).collect();
        let a = SparseColMat::<usize, C64>::try_new_from_triplets(n, n, &trip).map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Factor::Complex(a.sp_lu().map_err(singular)?)
    } else {
        let trip: Vec<_> = k.triplets().iter().zip(&vals).map(|(&(i, j, _), &v)| Triplet::new(i, j, v.re)).collect();
        let a = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip).map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Factor::Real(a.sp_lu().map_err(singular)?)
    };
    let op = ShellOperator { k, m, material: *mat, omega, factor };
    op.check_factorization()?;
    Ok(op)
}

impl ShellOperator {
    pub fn num_dofs(&self) -> usize {
        self.k.nrows
    }

    /// y = A x
    pub fn apply(&self, x: &[C64]) -> Vec<C64> {
        let vals = dynamic_entries(&self.k, &self.m, &self.material, self.omega);
        let mut y = vec![C64::new(0.0, 0.0); self.num_dofs()];
        for (i, yi) in y.iter_mut().enumerate() {
            for p in self.k.row_ptr[i]..self.k.row_ptr[i + 1] {
                *yi += vals[p] * x[self.k.col_idx[p]];
            }
        }
        y
    }

    /// Solves A u = f.
    /// Dense copy of A(omega), for small oracle systems.
    pub fn to_dense(&self) -> Mat<C64> {
        let vals = dynamic_entries(&self.k, &self.m, &self.material, self.omega);
        let n = self.num_dofs();
        let mut a = Mat::<C64>::zeros(n, n);
        for i in 0..n {
            for s in self.k.row_ptr[i]..self.k.row_ptr[i + 1] {
                a[(i, self.k.col_idx[s])] = vals[s];
            }
        }
        a
    }

    pub fn solve(&self, f: &[C64]) -> Vec<C64> {
        let n = self.num_dofs();
        match &self.factor {
            Factor::Complex(lu) => {
                let mut b = Mat::from_fn(n, 1, |i, _| f[i]);
                lu.solve_in_place(b.as_mut());
                (0..n).map(|i| b[(i, 0)]).collect()
            }
            Factor::Real(lu) => {
                let mut b = Mat::from_fn(n, 2, |i, j| if j == 0 { f[i].re } else { f[i].im });
                lu.solve_in_place(b.as_mut());
                (0..n).map(|i| C64::new(b[(i, 0)], b[(i, 1)])).collect()
            }
        }
    }

    /// Probe solve with a deterministic right-hand side. Exact singularity
    /// shows up as a non-finite or inaccurate solution, or as a solution
    /// norm implying a condition number beyond `MAX_CONDITION`.
    fn check_factorization(&self) -> Result<()> {
        let n = self.num_dofs();
        let f: Vec<C64> = (0..n).map(|i| C64::new(((i * 7919) % 101) as f64 / 101.0 - 0.5, ((i * 104729) % 97) as f64 / 97.0 - 0.5)).collect();
        let u = self.solve(&f);
        let r = self.apply(&u);
        let res = r.iter().zip(&f).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        let fnorm = f.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let unorm = u.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let anorm = self.norm_inf();
        log::debug!("shell operator at omega {}: probe residual {:e}, condition estimate {:e}", self.omega, res / fnorm, anorm * unorm / fnorm);
        if !(res <= 1e-6 * fnorm) || !(anorm * unorm <= MAX_CONDITION * fnorm) {
            return Err(Error::SingularOperator { omega: self.omega });
        }
        Ok(())
    }

    fn norm_inf(&self) -> f64 {
        let vals = dynamic_entries(&self.k, &self.m, &self.material, self.omega);
        (0..self.num_dofs())
            .map(|i| vals[self.k.row_ptr[i]..self.k.row_ptr[i + 1]].iter().map(|v| v.norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Eigenvalues of K v = lambda M v by dense reduction; for small meshes.
pub fn generalized_eigenvalues(k: &CsrMatrix<f64>, m: &CsrMatrix<f64>) -> Result<Vec<f64>> {
    let kd = k.to_dense();
    let md = m.to_dense();
    let llt = md.llt(Side::Lower).map_err(|e| Error::Factorization(format!("mass matrix: {e:?}")))?;
    let l = llt.L();
    let mut x = kd;
    faer::linalg::triangular_solve::solve_lower_triangular_in_place(l, x.as_mut(), faer::Par::Seq);
    let mut c = x.transpose().to_owned();
    faer::linalg::triangular_solve::solve_lower_triangular_in_place(l, c.as_mut(), faer::Par::Seq);
    let n = c.nrows();
    let sym = Mat::from_fn(n, n, |i, j| 0.5 * (c[(i, j)] + c[(j, i)]));
    let mut ev = sym.self_adjoint_eigenvalues(Side::Lower).map_err(|e| Error::Factorization(format!("{e:?}")))?;
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Eigenvalues of a symmetric sparse matrix by dense decomposition.
pub fn symmetric_eigenvalues(a: &CsrMatrix<f64>) -> Result<Vec<f64>> {
    let d = a.to_dense();
    let mut ev = d.self_adjoint_eigenvalues(Side::Lower).map_err(|e| Error::Factorization(format!("{e:?}")))?;
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// The six rigid-body fields (three translations, three rotations about
/// the origin) lifted to dofs at the control vertices.
pub fn rigid_body_modes(vertices: &[Vec3<f64>]) -> Vec<Vec<f64>> {
    let n = vertices.len();
    let mut out = Vec::with_capacity(6);
    for c in 0..3 {
        let mut t = vec![0.0; 3 * n];
        for v in 0..n {
            t[3 * v + c] = 1.0;
        }
        out.push(t);
    }
    for c in 0..3 {
        let mut axis = [0.0; 3];
        axis[c] = 1.0;
        let mut t = vec![0.0; 3 * n];
        for (v, p) in vertices.iter().enumerate() {
            let w = cross(axis, *p);
            t[3 * v..3 * v + 3].copy_from_slice(&w);
        }
        out.push(t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{natural_frequencies, SphereScatterParams};
    use crate::meshio::{l2_fit_to_target, make_sphere_control_mesh, FitOptions, SphereTarget};
    use crate::subdivision::ControlMesh;

    fn fitted(levels: usize) -> ControlMesh<f64> {
        let m = make_sphere_control_mesh(levels, 0.5);
        l2_fit_to_target(&m, &SphereTarget::new(0.5), &FitOptions::default()).unwrap().mesh
    }

    fn frob(a: &CsrMatrix<f64>) -> f64 {
        a.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn rigid_body_motions_are_strain_free() {
        let mesh = fitted(1);
        let sq = SurfaceQuadrature::standard(&mesh).unwrap();
        let k = assemble_stiffness(&sq, &ShellMaterial::steel(0.05)).unwrap();
        assert!(k.asymmetry() < 1e-10);
        let kn = frob(&k);
        for t in rigid_body_modes(mesh.vertices()) {
            let mut y = vec![0.0; t.len()];
            k.apply(&t, &mut y);
            let tn = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            let yn = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(yn <= 1e-8 * kn * tn, "{yn:e} vs {:e}", kn * tn);
        }
    }

    #[test]
    fn stiffness_has_six_dimensional_null_space() {
        let mesh = fitted(1);
        let sq = SurfaceQuadrature::standard(&mesh).unwrap();
        let k = assemble_stiffness(&sq, &ShellMaterial::steel(0.05)).unwrap();
        let ev = symmetric_eigenvalues(&k).unwrap();
        let max = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let small = ev.iter().filter(|v| v.abs() <= 1e-8 * max).count();
        assert_eq!(small, 6, "{:?}", &ev[..8]);
        assert!(ev[0] > -1e-8 * max);
    }

    #[test]
    fn mass_totals_and_definiteness() {
        let mesh = fitted(2);
        let sq = SurfaceQuadrature::standard(&mesh).unwrap();
        let mat = ShellMaterial::steel(0.05);
        let m = assemble_mass(&sq, &mat).unwrap();
        assert!(m.asymmetry() < 1e-14);
        let n = mesh.num_vertices();
        let area = sq.area();
        assert!((area - std::f64::consts::PI).abs() < 1e-3);
        for c in 0..3 {
            let mut e = vec![0.0; 3 * n];
            for v in 0..n {
                e[3 * v + c] = 1.0;
            }
            let total = m.quadratic_form(&e);
            assert!((total / (mat.rho_s * mat.h * area) - 1.0).abs() < 1e-6);
        }
        let ev = symmetric_eigenvalues(&m).unwrap();
        assert!(ev[0] > 0.0);
    }

    #[test]
    fn thickness_scaling() {
        let mesh = fitted(1);
        let sq = SurfaceQuadrature::standard(&mesh).unwrap();
        let p1 = assemble_stiffness_parts(&sq, &ShellMaterial::steel(0.05)).unwrap();
        let p2 = assemble_stiffness_parts(&sq, &ShellMaterial::steel(0.1)).unwrap();
        let x: Vec<f64> = (0..3 * mesh.num_vertices()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let rm = p2.membrane.quadratic_form(&x) / p1.membrane.quadratic_form(&x);
        let rb = p2.bending.quadratic_form(&x) / p1.bending.quadratic_form(&x);
        assert!((rm - 2.0).abs() < 1e-12 && (rb - 8.0).abs() < 1e-12, "{rm} {rb}");
    }

    #[test]
    fn dynamic_operator_contracts() {
        let mesh = fitted(1);
        let sq = SurfaceQuadrature::standard(&mesh).unwrap();
        let mat = ShellMaterial::steel(0.05);
        let k = assemble_stiffness(&sq, &mat).unwrap();
        let m = assemble_mass(&sq, &mat).unwrap();
        // omega = 0 without damping gives A = K, which is singular
        let a0 = dynamic_entries(&k, &m, &mat, 0.0);
        assert!(a0.iter().zip(&k.values).all(|(a, kv)| a.re == *kv && a.im == 0.0));
        assert!(matches!(build_dynamic_operator(k.clone(), m.clone(), &mat, 0.0), Err(Error::SingularOperator { .. })));
        let ev = generalized_eigenvalues(&k, &m).unwrap();
        let omega = 0.5 * (ev[6].sqrt() + ev[12].sqrt());
        let op = build_dynamic_operator(k.clone(), m.clone(), &mat, omega).unwrap();
        let f: Vec<C64> = (0..op.num_dofs()).map(|i| C64::new((i % 5) as f64, 1.0 - (i % 3) as f64)).collect();
        let u = op.solve(&f);
        let r = op.apply(&u);
        let res = r.iter().zip(&f).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt() / f.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        assert!(res < 1e-10, "{res:e}");
        // damping keeps A regular at undamped eigenfrequencies
        let damped = ShellMaterial { c2: 5.0, ..mat };
        for i in [6, 20, 40] {
            let op = build_dynamic_operator(k.clone(), m.clone(), &damped, ev[i].sqrt()).unwrap();
            let u = op.solve(&f);
            let r = op.apply(&u);
            let res = r.iter().zip(&f).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt() / f.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            assert!(res < 1e-10);
        }
    }

    /// Mean of the eigenvalue cluster of size 2n+1 closest to `target`.
    fn cluster_near(omegas: &[f64], size: usize, target: f64) -> f64 {
        let mut best = f64::NAN;
        for w in omegas.windows(size) {
            let mean = w.iter().sum::<f64>() / size as f64;
            if best.is_nan() || (mean - target).abs() < (best - target).abs() {
                best = mean;
            }
        }
        best
    }

    #[test]
    fn sphere_spectrum_matches_shell_theory() {
        let mat = ShellMaterial::steel(0.05);
        let params = SphereScatterParams::steel_in_water(1.0, mat.h);
        let cp = params.c_p();
        let radius = params.formula_length();
        let mut errors = Vec::new();
        for level in [1, 2] {
            let mesh = fitted(level);
            let sq = SurfaceQuadrature::standard(&mesh).unwrap();
            let k = assemble_stiffness(&sq, &mat).unwrap();
            let m = assemble_mass(&sq, &mat).unwrap();
            let ev = generalized_eigenvalues(&k, &m).unwrap();
            let omegas: Vec<f64> = ev.iter().map(|&l| l.max(0.0).sqrt() * radius / cp).collect();
            let mut errs = Vec::new();
            for n in [2usize, 3] {
                let (w1, _) = natural_frequencies(n, &params).unwrap();
                let fem = cluster_near(&omegas, 2 * n + 1, w1);
                errs.push((fem / w1 - 1.0).abs());
            }
            errors.push(errs);
        }
        for e in &errors[1] {
            assert!(*e < 0.05);
        }
        assert!(errors[1][0] <= errors[0][0] && errors[1][1] <= errors[0][1]);
    }
}
