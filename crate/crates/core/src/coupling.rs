//! Fluid-structure coupling: transfer operators between the pressure and
//! displacement bases, surface admittance, the Schur-complement pressure
//! equation and its monolithic block oracle.
//!
//! Signs. With n_f the unit normal pointing from the shell into the fluid,
//! the fluid loads the shell with the traction -p n_f, and the surface
//! normal derivative q = dp/dn_f obeys q = Y p + omega^2 rho C_fs u. The
//! boundary equation of [`crate::bem`] reads H p + G q = p_inc in these
//! terms, since its G multiplies dp/dn_in = -q.

use faer::Mat;

use crate::bem::BemOperators;
use crate::error::{Error, Result};
use crate::linalg::{dense_apply, gmres, norm2, CsrMatrix, DenseLu, GmresOptions};
use crate::scalar::{dot, Vec3};
use crate::shell::{ShellMaterial, ShellOperator};
use crate::surface::SurfaceQuadrature;
use crate::C64;

/// Largest collocation count accepted by the dense block oracle.
pub const BLOCK_SYSTEM_LIMIT: usize = 2000;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// C_fs = n^T (displacement to normal trace) and C_sf = n Gram (pressure to
/// nodal force along n), with n the per-vertex unit normals n_f.
#[derive(Clone, Debug)]
pub struct TransferOperators {
    pub normals: Vec<Vec3<f64>>,
    /// Basis Gram matrix, integral of N_a N_b over the surface.
    pub gram: CsrMatrix<f64>,
}

pub fn build_transfer(sq: &SurfaceQuadrature, normals: &[Vec3<f64>]) -> Result<TransferOperators> {
    if normals.len() != sq.num_vertices {
        return Err(Error::Dimension(format!("{} normals for {} vertices", normals.len(), sq.num_vertices)));
    }
    Ok(TransferOperators { normals: normals.to_vec(), gram: sq.gram() })
}

impl TransferOperators {
    pub fn num_vertices(&self) -> usize {
        self.normals.len()
    }

    /// f = C_sf p.
    pub fn apply_sf(&self, p: &[C64]) -> Vec<C64> {
        let mut gp = vec![ZERO; p.len()];
        self.gram.apply(p, &mut gp);
        let mut f = vec![ZERO; 3 * p.len()];
        for (a, (n, v)) in self.normals.iter().zip(&gp).enumerate() {
            for c in 0..3 {
                f[3 * a + c] = *v * n[c];
            }
        }
        f
    }

    /// C_fs u.
    pub fn apply_fs(&self, u: &[C64]) -> Vec<C64> {
        self.normals
            .iter()
            .enumerate()
            .map(|(a, n)| u[3 * a] * n[0] + u[3 * a + 1] * n[1] + u[3 * a + 2] * n[2])
            .collect()
    }

    pub fn dense_sf(&self) -> Mat<f64> {
        let n = self.num_vertices();
        let g = self.gram.to_dense();
        Mat::from_fn(3 * n, n, |i, j| self.normals[i / 3][i % 3] * g[(i / 3, j)])
    }

    pub fn dense_fs(&self) -> Mat<f64> {
        let n = self.num_vertices();
        Mat::from_fn(n, 3 * n, |i, j| if j / 3 == i { self.normals[i][j % 3] } else { 0.0 })
    }
}

/// Uniform surface admittance; Y = -i omega rho beta I.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdmittanceModel {
    pub beta: C64,
}

impl AdmittanceModel {
    pub fn y(&self, omega: f64, rho: f64) -> C64 {
        C64::new(0.0, -omega * rho) * self.beta
    }
}

/// Matrix-free H and G.
pub trait BoundaryOperators: Sync {
    fn dim(&self) -> usize;
    fn apply_h(&self, x: &[C64], y: &mut [C64]);
    fn apply_g(&self, x: &[C64], y: &mut [C64]);
}

impl BoundaryOperators for BemOperators {
    fn dim(&self) -> usize {
        self.h.nrows()
    }

    fn apply_h(&self, x: &[C64], y: &mut [C64]) {
        dense_apply(&self.h, x, y);
    }

    fn apply_g(&self, x: &[C64], y: &mut [C64]) {
        dense_apply(&self.g, x, y);
    }
}

/// Approximate inverse used as a right preconditioner.
pub trait Preconditioner: Sync {
    fn apply(&self, x: &[C64], y: &mut [C64]);
}

impl Preconditioner for DenseLu {
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        y.copy_from_slice(x);
        self.solve_in_place(y);
    }
}

/// The elastic structure seen from the fluid.
#[derive(Clone, Copy)]
pub struct Structure<'a> {
    pub shell: &'a ShellOperator,
    pub transfer: &'a TransferOperators,
    /// Fluid density entering the coupling terms.
    pub rho: f64,
    /// External structural load f_s, if any.
    pub load: Option<&'a [C64]>,
}

impl Structure<'_> {
    fn omega(&self) -> f64 {
        self.shell.omega
    }

    /// Y_C v = omega^2 rho C_fs A^-1 C_sf v, never formed.
    pub fn admittance_apply(&self, v: &[C64]) -> Vec<C64> {
        if self.rho == 0.0 {
            return vec![ZERO; v.len()];
        }
        let u = self.shell.solve(&self.transfer.apply_sf(v));
        let s = self.omega() * self.omega() * self.rho;
        self.transfer.apply_fs(&u).into_iter().map(|x| x * s).collect()
    }

    /// q_s = omega^2 rho C_fs A^-1 f_s.
    pub fn sources(&self) -> Vec<C64> {
        let n = self.transfer.num_vertices();
        match self.load {
            Some(f) if self.rho != 0.0 && f.iter().any(|v| *v != ZERO) => {
                let u = self.shell.solve(f);
                let s = self.omega() * self.omega() * self.rho;
                self.transfer.apply_fs(&u).into_iter().map(|x| x * s).collect()
            }
            _ => vec![ZERO; n],
        }
    }

    /// u = A^-1 (f_s - C_sf p).
    pub fn displacement(&self, p: &[C64]) -> Vec<C64> {
        let mut f = self.transfer.apply_sf(p);
        for v in f.iter_mut() {
            *v = -*v;
        }
        if let Some(fs) = self.load {
            for (a, b) in f.iter_mut().zip(fs) {
                *a += b;
            }
        }
        self.shell.solve(&f)
    }

    fn check(&self, n: usize, omega: f64) -> Result<()> {
        if self.transfer.num_vertices() != n || self.shell.num_dofs() != 3 * n {
            return Err(Error::Dimension(format!(
                "{} collocation points, {} transfer vertices, {} shell dofs",
                n,
                self.transfer.num_vertices(),
                self.shell.num_dofs()
            )));
        }
        if let Some(f) = self.load {
            if f.len() != 3 * n {
                return Err(Error::Dimension(format!("structural load has {} entries, expected {}", f.len(), 3 * n)));
            }
        }
        if (self.omega() - omega).abs() > 1e-12 * omega.abs().max(1.0) {
            return Err(Error::Dimension(format!("shell omega {} differs from fluid omega {}", self.omega(), omega)));
        }
        Ok(())
    }
}

/// Solution of a coupled (or rigid) scattering problem.
#[derive(Clone, Debug)]
pub struct CoupledState {
    /// Displacements, 3 per vertex (empty for a rigid scatterer).
    pub u: Vec<C64>,
    pub p: Vec<C64>,
    /// Normal derivative along n_f.
    pub q: Vec<C64>,
    pub k: f64,
    pub omega: f64,
    pub material: Option<ShellMaterial>,
    pub iterations: usize,
    pub residual: f64,
    pub history: Vec<f64>,
}

/// Inputs of the pressure equation [H + G Y - G Y_C] p = p_inc - G q_s.
pub struct CoupledProblem<'a> {
    pub ops: &'a dyn BoundaryOperators,
    pub k: f64,
    pub omega: f64,
    pub rho: f64,
    pub admittance: AdmittanceModel,
    pub structure: Option<Structure<'a>>,
    pub p_inc: &'a [C64],
}

impl CoupledProblem<'_> {
    fn y(&self) -> C64 {
        self.admittance.y(self.omega, self.rho)
    }

    /// Applies the Schur-complement operator.
    pub fn apply(&self, v: &[C64], out: &mut [C64]) {
        let n = v.len();
        self.ops.apply_h(v, out);
        let y = self.y();
        let mut s: Vec<C64> = v.iter().map(|x| x * y).collect();
        if let Some(st) = &self.structure {
            for (a, b) in s.iter_mut().zip(st.admittance_apply(v)) {
                *a -= b;
            }
        }
        if s.iter().any(|x| *x != ZERO) {
            let mut gs = vec![ZERO; n];
            self.ops.apply_g(&s, &mut gs);
            for (o, g) in out.iter_mut().zip(gs) {
                *o += g;
            }
        }
    }

    pub fn rhs(&self) -> Vec<C64> {
        let mut b = self.p_inc.to_vec();
        if let Some(st) = &self.structure {
            let qs = st.sources();
            if qs.iter().any(|x| *x != ZERO) {
                let mut gq = vec![ZERO; b.len()];
                self.ops.apply_g(&qs, &mut gq);
                for (x, g) in b.iter_mut().zip(gq) {
                    *x -= g;
                }
            }
        }
        b
    }

    fn validate(&self) -> Result<()> {
        let n = self.ops.dim();
        if self.p_inc.len() != n {
            return Err(Error::Dimension(format!("incident vector has {} entries for {} collocation points", self.p_inc.len(), n)));
        }
        if let Some(st) = &self.structure {
            st.check(n, self.omega)?;
        }
        Ok(())
    }
}

/// GMRES on the pressure equation, then displacement and flux recovery.
pub fn solve_coupled(problem: &CoupledProblem<'_>, precond: Option<&dyn Preconditioner>, opts: &GmresOptions) -> Result<CoupledState> {
    problem.validate()?;
    let b = problem.rhs();
    let mut op = |x: &[C64], y: &mut [C64]| problem.apply(x, y);
    let mut pc = precond.map(|p| move |x: &[C64], y: &mut [C64]| p.apply(x, y));
    let out = gmres(&b, &mut op, pc.as_mut().map(|f| f as &mut dyn FnMut(&[C64], &mut [C64])), None, opts)?;
    log::info!("GMRES converged in {} iterations, relative residual {:e}", out.iterations, out.residual);
    let p = out.x;
    let y = problem.y();
    let mut q: Vec<C64> = p.iter().map(|v| v * y).collect();
    let mut u = Vec::new();
    if let Some(st) = &problem.structure {
        u = st.displacement(&p);
        let s = problem.omega * problem.omega * st.rho;
        for (qa, w) in q.iter_mut().zip(st.transfer.apply_fs(&u)) {
            *qa += w * s;
        }
    }
    Ok(CoupledState {
        u,
        p,
        q,
        k: problem.k,
        omega: problem.omega,
        material: problem.structure.map(|s| s.shell.material),
        iterations: out.iterations,
        residual: out.residual,
        history: out.history,
    })
}

/// Dense monolithic system
/// [A, C_sf; omega^2 rho G C_fs, H + G Y] [u; p] = [f_s; p_inc].
pub fn assemble_block_system(ops: &BemOperators, structure: &Structure<'_>, admittance: AdmittanceModel) -> Result<Mat<C64>> {
    let n = ops.h.nrows();
    if n > BLOCK_SYSTEM_LIMIT {
        return Err(Error::SizeGuard { n, limit: BLOCK_SYSTEM_LIMIT });
    }
    let omega = ops.ctx.omega();
    structure.check(n, omega)?;
    let a = structure.shell.to_dense();
    let csf = structure.transfer.dense_sf();
    let cfs = structure.transfer.dense_fs();
    let s = omega * omega * structure.rho;
    let y = admittance.y(omega, structure.rho);
    let mut gc = Mat::<C64>::zeros(n, 3 * n);
    for i in 0..n {
        for j in 0..n {
            let gij = ops.g[(i, j)];
            for c in 0..3 {
                gc[(i, 3 * j + c)] += gij * cfs[(j, 3 * j + c)];
            }
        }
    }
    let m = 4 * n;
    Ok(Mat::from_fn(m, m, |i, j| match (i < 3 * n, j < 3 * n) {
        (true, true) => a[(i, j)],
        (true, false) => C64::new(csf[(i, j - 3 * n)], 0.0),
        (false, true) => gc[(i - 3 * n, j)] * s,
        (false, false) => ops.h[(i - 3 * n, j - 3 * n)] + ops.g[(i - 3 * n, j - 3 * n)] * y,
    }))
}

/// Right-hand side [f_s; p_inc] of the block system.
pub fn block_rhs(structure: &Structure<'_>, p_inc: &[C64]) -> Vec<C64> {
    let n = p_inc.len();
    let mut b = vec![ZERO; 4 * n];
    if let Some(f) = structure.load {
        b[..3 * n].copy_from_slice(f);
    }
    b[3 * n..].copy_from_slice(p_inc);
    b
}

/// Direct solve of the block system; returns (u, p).
pub fn solve_block_system(ops: &BemOperators, structure: &Structure<'_>, admittance: AdmittanceModel, p_inc: &[C64]) -> Result<(Vec<C64>, Vec<C64>)> {
    let m = assemble_block_system(ops, structure, admittance)?;
    let x = DenseLu::new(&m)?.solve(&block_rhs(structure, p_inc));
    let n = p_inc.len();
    Ok((x[..3 * n].to_vec(), x[3 * n..].to_vec()))
}

/// ||M x - b|| / ||b|| for the block system.
pub fn block_residual(m: &Mat<C64>, x: &[C64], b: &[C64]) -> f64 {
    let mut r = vec![ZERO; b.len()];
    dense_apply(m, x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri -= bi;
    }
    norm2(&r) / norm2(b)
}

/// Consistency check of the flux relation at a solution.
pub fn flux_relation_residual(state: &CoupledState, structure: &Structure<'_>, admittance: AdmittanceModel) -> f64 {
    let y = admittance.y(state.omega, structure.rho);
    let s = state.omega * state.omega * structure.rho;
    let expect: Vec<C64> =
        state.p.iter().zip(structure.transfer.apply_fs(&state.u)).map(|(p, w)| p * y + w * s).collect();
    let d: Vec<C64> = state.q.iter().zip(&expect).map(|(a, b)| a - b).collect();
    norm2(&d) / norm2(&expect).max(f64::MIN_POSITIVE)
}

/// Normal component of a vector field at each vertex.
pub fn normal_components(normals: &[Vec3<f64>], u: &[Vec3<f64>]) -> Vec<f64> {
    normals.iter().zip(u).map(|(n, v)| dot(*n, *v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bem::{assemble_dense, incident_vector, BemGeometry, QuadratureSettings, WaveContext};
    use crate::linalg::rel_diff;
    use crate::meshio::{l2_fit_to_target, make_sphere_control_mesh, FitOptions, SphereTarget};
    use crate::shell::{assemble_mass, assemble_stiffness, build_dynamic_operator};
    use crate::subdivision::ControlMesh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    struct Setup {
        geom: BemGeometry,
        sq: SurfaceQuadrature,
        k: CsrMatrix<f64>,
        m: CsrMatrix<f64>,
        transfer: TransferOperators,
    }

    fn setup() -> &'static Setup {
        static S: OnceLock<Setup> = OnceLock::new();
        S.get_or_init(|| {
            let mesh: ControlMesh<f64> = {
                let m = make_sphere_control_mesh(1, 0.5);
                l2_fit_to_target(&m, &SphereTarget::new(0.5), &FitOptions::default()).unwrap().mesh
            };
            let geom = BemGeometry::new(&mesh, QuadratureSettings::default()).unwrap();
            let sq = SurfaceQuadrature::standard(&mesh).unwrap();
            let mat = ShellMaterial::steel(0.05);
            let k = assemble_stiffness(&sq, &mat).unwrap();
            let m = assemble_mass(&sq, &mat).unwrap();
            let transfer = build_transfer(&sq, &geom.table.normals).unwrap();
            Setup { geom, sq, k, m, transfer }
        })
    }

    fn shell_at(s: &Setup, mat: &ShellMaterial, omega: f64) -> ShellOperator {
        build_dynamic_operator(s.k.clone(), s.m.clone(), mat, omega).unwrap()
    }

    #[test]
    fn transfer_identities() {
        let s = setup();
        let n = s.transfer.num_vertices();
        // constant pressure on a closed surface exerts no net force
        let f = s.transfer.apply_sf(&vec![C64::new(1.0, 0.0); n]);
        let area = s.sq.area();
        for c in 0..3 {
            let total: C64 = (0..n).map(|a| f[3 * a + c]).sum();
            assert!(total.norm() <= 1e-6 * area, "{total}");
        }
        let u: Vec<C64> = s.transfer.normals.iter().flat_map(|nv| nv.map(|x| C64::new(x, 0.0))).collect();
        assert!(s.transfer.apply_fs(&u).iter().all(|v| (v - 1.0).norm() < 1e-8));
        let bi = s.sq.basis_integrals();
        for (a, &b) in bi.iter().enumerate() {
            let rs: f64 = s.transfer.gram.row(a).map(|(_, v)| v).sum();
            assert!((rs - b).abs() < 1e-12 * b && b > 0.0);
        }
    }

    #[test]
    fn admittance_apply_matches_dense() {
        let s = setup();
        let mat = ShellMaterial::steel(0.05);
        let omega = 1482.0;
        let shell = shell_at(s, &mat, omega);
        let st = Structure { shell: &shell, transfer: &s.transfer, rho: 1000.0, load: None };
        let n = s.transfer.num_vertices();
        let ainv = DenseLu::new(&shell.to_dense()).unwrap();
        let csf = s.transfer.dense_sf();
        let cfs = s.transfer.dense_fs();
        let mut yc = Mat::<C64>::zeros(n, n);
        for j in 0..n {
            let col: Vec<C64> = (0..3 * n).map(|i| C64::new(csf[(i, j)], 0.0)).collect();
            let w = ainv.solve(&col);
            for i in 0..n {
                let v: C64 = (0..3 * n).map(|l| w[l] * cfs[(i, l)]).sum();
                yc[(i, j)] = v * omega * omega * 1000.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<C64> = (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let mut dense = vec![ZERO; n];
        dense_apply(&yc, &v, &mut dense);
        assert!(rel_diff(&st.admittance_apply(&v), &dense) < 1e-10);
        assert!(st.sources().iter().all(|x| *x == ZERO));
        let vacuum = Structure { rho: 0.0, ..st };
        assert!(vacuum.admittance_apply(&v).iter().all(|x| *x == ZERO));
    }

    fn compare_paths(ka: f64, load: Option<Vec<C64>>) -> (f64, f64) {
        let s = setup();
        let ctx = WaveContext::new(ka, 1482.0, 1000.0);
        let ops = assemble_dense(&s.geom, &ctx);
        let shell = shell_at(s, &ShellMaterial::steel(0.05), ctx.omega());
        let st = Structure { shell: &shell, transfer: &s.transfer, rho: ctx.rho_f, load: load.as_deref() };
        let p_inc = incident_vector(&s.geom, &ctx);
        let adm = AdmittanceModel::default();
        let problem = CoupledProblem { ops: &ops, k: ctx.k, omega: ctx.omega(), rho: ctx.rho_f, admittance: adm, structure: Some(st), p_inc: &p_inc };
        let lu = DenseLu::new(&ops.h).unwrap();
        let opts = GmresOptions { tol: 1e-12, ..Default::default() };
        let state = solve_coupled(&problem, Some(&lu), &opts).unwrap();
        assert!(flux_relation_residual(&state, &st, adm) < 1e-12);
        let (u, p) = solve_block_system(&ops, &st, adm, &p_inc).unwrap();
        let m = assemble_block_system(&ops, &st, adm).unwrap();
        let x: Vec<C64> = state.u.iter().chain(&state.p).copied().collect();
        let res = block_residual(&m, &x, &block_rhs(&st, &p_inc));
        (rel_diff(&state.p, &p).max(rel_diff(&state.u, &u)), res)
    }

    #[test]
    fn schur_and_monolithic_agree() {
        let (d, r) = compare_paths(1.0, None);
        assert!(d < 1e-8 && r < 1e-8, "{d:e} {r:e}");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let ka = rng.gen_range(0.5..3.0);
            let (d, r) = compare_paths(ka, None);
            assert!(d < 1e-8 && r < 1e-8, "ka {ka}: {d:e} {r:e}");
        }
        let n = setup().transfer.num_vertices();
        let load: Vec<C64> = (0..3 * n).map(|_| C64::new(rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3))).collect();
        let (d, r) = compare_paths(1.3, Some(load));
        assert!(d < 1e-8 && r < 1e-8, "{d:e} {r:e}");
    }

    #[test]
    fn vacuum_decouples() {
        let s = setup();
        let ctx = WaveContext::new(2.0, 1482.0, 1000.0);
        let ops = assemble_dense(&s.geom, &ctx);
        let p_inc = incident_vector(&s.geom, &ctx);
        let rigid = DenseLu::new(&ops.h).unwrap().solve(&p_inc);
        let shell = shell_at(s, &ShellMaterial::steel(0.05), ctx.omega());
        let st = Structure { shell: &shell, transfer: &s.transfer, rho: 0.0, load: None };
        let problem = CoupledProblem { ops: &ops, k: ctx.k, omega: ctx.omega(), rho: 0.0, admittance: AdmittanceModel::default(), structure: Some(st), p_inc: &p_inc };
        let state = solve_coupled(&problem, None, &GmresOptions { tol: 1e-12, ..Default::default() }).unwrap();
        assert!(rel_diff(&state.p, &rigid) < 1e-10);
        assert!(state.q.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn mismatched_frequency_is_rejected() {
        let s = setup();
        let ctx = WaveContext::new(1.0, 1482.0, 1000.0);
        let ops = assemble_dense(&s.geom, &ctx);
        let shell = shell_at(s, &ShellMaterial::steel(0.05), 2.0 * ctx.omega());
        let st = Structure { shell: &shell, transfer: &s.transfer, rho: 1000.0, load: None };
        let p_inc = incident_vector(&s.geom, &ctx);
        let problem = CoupledProblem { ops: &ops, k: ctx.k, omega: ctx.omega(), rho: 1000.0, admittance: AdmittanceModel::default(), structure: Some(st), p_inc: &p_inc };
        assert!(matches!(solve_coupled(&problem, None, &GmresOptions::default()), Err(Error::Dimension(_))));
    }
}
