//! Scenario files and the study driver: mesh preparation, rigid or coupled
//! solves, far-field sampling, comparison with the sphere series and
//! output files.
//!
//! A scenario is TOML:
//!
//! ```toml
//! name = "steel-ka10"
//! seed = 0
//!
//! [mesh]
//! sphere_levels = 4     # or: path = "hull.obj"
//! radius = 0.5
//! fit = "sphere"        # or "none"
//! subdivide = 0         # extra Loop refinements after fitting
//!
//! [material]            # fluid and shell, SI units
//! rho_f = 1000.0
//! c = 1482.0
//! rho_s = 7860.0
//! e = 210e9
//! nu = 0.3
//! h = 0.05
//!
//! [wave]
//! ka = 10.0             # or k = ...; k = ka / length
//! length = 1.0
//! direction = [1.0, 0.0, 0.0]
//!
//! [study]
//! kind = "coupled"      # rigid | coupled | analytic
//!
//! [sampling]
//! radius = 5.0
//! plane = "xy"
//! count = 360           # default max(360, 12 k r)
//!
//! [solver]
//! operators = "dense"   # or "compressed"
//! epsilon = 1e-6
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analytic::{LengthConvention, SeriesCoefficients, SeriesMode, SphereScatterParams};
use crate::bem::{assemble_dense, incident_vector, BemGeometry, QuadratureSettings, WaveContext};
use crate::coupling::{build_transfer, solve_coupled, AdmittanceModel, BoundaryOperators, CoupledProblem, Preconditioner, Structure};
use crate::error::{Error, Result};
use crate::hmatrix::{compress_bem, NearFieldLu};
use crate::linalg::{DenseLu, GmresOptions};
use crate::meshio::{self, FitOptions, PointField, SphereTarget};
use crate::scalar::{dot, norm, Vec3};
use crate::shell::{assemble_mass, assemble_stiffness, build_dynamic_operator, ShellMaterial};
use crate::subdivision::{loop_subdivide, ControlMesh};
use crate::surface::SurfaceQuadrature;
use crate::C64;

/// Below this many elements per wavelength a warning is issued.
pub const MIN_ELEMENTS_PER_WAVELENGTH: f64 = 6.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub mesh: Option<MeshSpec>,
    #[serde(default)]
    pub material: Materials,
    pub wave: WaveSpec,
    pub study: StudySpec,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub solver: SolverSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSpec {
    /// Control mesh file (OBJ or OFF).
    pub path: Option<PathBuf>,
    /// Icosahedron refined this many times, vertices on the sphere.
    pub sphere_levels: Option<usize>,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default)]
    pub fit: FitTarget,
    #[serde(default)]
    pub subdivide: usize,
}

fn default_radius() -> f64 {
    0.5
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitTarget {
    #[default]
    None,
    Sphere,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Materials {
    pub rho_f: f64,
    pub c: f64,
    pub rho_s: f64,
    pub e: f64,
    pub nu: f64,
    pub h: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for Materials {
    fn default() -> Self {
        let s = ShellMaterial::steel(0.05);
        Self { rho_f: 1000.0, c: 1482.0, rho_s: s.rho_s, e: s.e, nu: s.nu, h: s.h, c1: 0.0, c2: 0.0 }
    }
}

impl Materials {
    pub fn shell(&self) -> ShellMaterial {
        ShellMaterial { e: self.e, nu: self.nu, rho_s: self.rho_s, h: self.h, c1: self.c1, c2: self.c2 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveSpec {
    pub ka: Option<f64>,
    pub k: Option<f64>,
    /// Reference length a in ka.
    #[serde(default = "one")]
    pub length: f64,
    #[serde(default = "x_axis")]
    pub direction: Vec3<f64>,
    #[serde(default = "one")]
    pub amplitude: f64,
}

fn one() -> f64 {
    1.0
}

fn x_axis() -> Vec3<f64> {
    [1.0, 0.0, 0.0]
}

impl WaveSpec {
    pub fn wavenumber(&self) -> Result<f64> {
        let k = match (self.ka, self.k) {
            (Some(ka), None) => ka / self.length,
            (None, Some(k)) => k,
            _ => return Err(Error::Scenario("wave: give exactly one of ka and k".into())),
        };
        if !(k > 0.0) || !(self.length > 0.0) {
            return Err(Error::Scenario(format!("wave: wavenumber must be positive, got {k}")));
        }
        Ok(k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyKind {
    Rigid,
    Coupled,
    Analytic,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    pub kind: StudyKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    #[default]
    Xy,
    Xz,
    Yz,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sampling {
    pub radius: f64,
    pub plane: Plane,
    pub count: Option<usize>,
}

impl Default for Sampling {
    fn default() -> Self {
        Self { radius: 5.0, plane: Plane::Xy, count: None }
    }
}

/// Default sample count: 360, raised to 12 per wavelength of arc.
pub fn default_sample_count(k: f64, radius: f64) -> usize {
    360usize.max((12.0 * k * radius).ceil() as usize)
}

impl Sampling {
    pub fn points(&self, k: f64) -> (Vec<f64>, Vec<Vec3<f64>>) {
        let n = self.count.unwrap_or_else(|| default_sample_count(k, self.radius));
        let angles: Vec<f64> = (0..n).map(|i| 2.0 * std::f64::consts::PI * i as f64 / n as f64).collect();
        let pts = angles
            .iter()
            .map(|&t| {
                let (c, s) = (self.radius * t.cos(), self.radius * t.sin());
                match self.plane {
                    Plane::Xy => [c, s, 0.0],
                    Plane::Xz => [c, 0.0, s],
                    Plane::Yz => [0.0, c, s],
                }
            })
            .collect();
        (angles, pts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operators {
    #[default]
    Dense,
    Compressed,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub operators: Operators,
    pub epsilon: f64,
    pub eta: f64,
    pub n_min: usize,
    pub gmres_tol: f64,
    pub restart: usize,
    pub max_iter: usize,
    /// Fluid density in the coupling terms only; defaults to rho_f.
    pub coupling_density: Option<f64>,
    /// Surface admittance (re, im).
    pub admittance: [f64; 2],
}

impl Default for SolverSpec {
    fn default() -> Self {
        let g = GmresOptions::default();
        Self {
            operators: Operators::Dense,
            epsilon: crate::hmatrix::DEFAULT_EPSILON,
            eta: crate::hmatrix::DEFAULT_ETA,
            n_min: crate::hmatrix::DEFAULT_N_MIN,
            gmres_tol: g.tol,
            restart: g.restart,
            max_iter: g.max_iter,
            coupling_density: None,
            admittance: [0.0, 0.0],
        }
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// Reads a scenario file; a relative mesh path is taken relative to it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut s = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let Some(m) = s.mesh.as_mut() {
            if let Some(p) = m.path.as_mut() {
                *p = meshio::resolve_relative(path.parent().unwrap_or(Path::new(".")), p);
            }
        }
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.wave.wavenumber()?;
        if !((norm(self.wave.direction) - 1.0).abs() < 1e-9) {
            return Err(Error::Scenario("wave: direction must be a unit vector".into()));
        }
        match (&self.mesh, self.study.kind) {
            (None, StudyKind::Analytic) => {}
            (None, _) => return Err(Error::Scenario("mesh: required for rigid and coupled studies".into())),
            (Some(m), _) => {
                if m.path.is_some() == m.sphere_levels.is_some() {
                    return Err(Error::Scenario("mesh: give exactly one of path and sphere_levels".into()));
                }
                if !(m.radius > 0.0) {
                    return Err(Error::Scenario("mesh: radius must be positive".into()));
                }
            }
        }
        if self.study.kind == StudyKind::Analytic && self.sphere_radius().is_none() {
            return Err(Error::Scenario("analytic study needs a sphere".into()));
        }
        if self.study.kind == StudyKind::Coupled {
            self.material.shell().validate().map_err(|e| Error::Scenario(format!("material: {e}")))?;
        }
        if !(self.sampling.radius > 0.0) || self.sampling.count == Some(0) {
            return Err(Error::Scenario("sampling: radius and count must be positive".into()));
        }
        let _ = k;
        Ok(())
    }

    /// Radius of the sphere the geometry represents, if any.
    pub fn sphere_radius(&self) -> Option<f64> {
        match &self.mesh {
            None => Some(default_radius()),
            Some(m) if m.sphere_levels.is_some() || m.fit == FitTarget::Sphere => Some(m.radius),
            Some(_) => None,
        }
    }

    /// Series parameters for the sphere oracle.
    pub fn series_params(&self) -> Result<Option<SphereScatterParams<f64>>> {
        let Some(r) = self.sphere_radius() else { return Ok(None) };
        let m = &self.material;
        Ok(Some(SphereScatterParams {
            a: 2.0 * r,
            h: m.h,
            rho_f: m.rho_f,
            c: m.c,
            rho_s: m.rho_s,
            e: m.e,
            nu: m.nu,
            p0: self.wave.amplitude,
            k: self.wave.wavenumber()?,
            length: LengthConvention::Radius,
            first_mode: 0,
        }))
    }
}

/// The control mesh of a scenario and its geometry error, when a target is
/// known.
pub fn prepare_mesh(spec: &MeshSpec) -> Result<(ControlMesh<f64>, Option<f64>)> {
    let mut mesh = match (&spec.path, spec.sphere_levels) {
        (Some(p), None) => meshio::load_mesh(p)?,
        (None, Some(l)) => meshio::make_sphere_control_mesh(l, spec.radius),
        _ => return Err(Error::Scenario("mesh: give exactly one of path and sphere_levels".into())),
    };
    let target = SphereTarget::new(spec.radius);
    if spec.fit == FitTarget::Sphere {
        mesh = meshio::l2_fit_to_target(&mesh, &target, &FitOptions::default())?.mesh;
    }
    for _ in 0..spec.subdivide {
        mesh = loop_subdivide(&mesh);
    }
    let sphere = spec.sphere_levels.is_some() || spec.fit == FitTarget::Sphere;
    let eps_g = if sphere { Some(meshio::geometry_error(&mesh, &target)?.eps_g) } else { None };
    Ok((mesh, eps_g))
}

/// max over samples of | |p_h| - |p| | / |p|.
pub fn max_pointwise_error(numeric: &[C64], oracle: &[C64]) -> Result<f64> {
    if numeric.len() != oracle.len() {
        return Err(Error::Dimension(format!("{} samples against {} oracle values", numeric.len(), oracle.len())));
    }
    let mut worst = 0.0f64;
    for (i, (a, b)) in numeric.iter().zip(oracle).enumerate() {
        if b.norm() == 0.0 {
            return Err(Error::ZeroOracle { index: i });
        }
        worst = worst.max((a.norm() - b.norm()).abs() / b.norm());
    }
    Ok(worst)
}

/// Surface solution at the vertex limit points.
#[derive(Clone, Debug)]
pub struct SurfaceFields {
    pub mesh: ControlMesh<f64>,
    pub p: Vec<C64>,
    pub u: Option<Vec<[C64; 3]>>,
}

#[derive(Clone, Debug)]
pub struct ResultBundle {
    pub name: String,
    pub kind: StudyKind,
    pub k: f64,
    pub angles: Vec<f64>,
    pub pressure: Vec<C64>,
    pub oracle: Option<Vec<C64>>,
    pub max_error: Option<f64>,
    pub surface: Option<SurfaceFields>,
    pub vertices: usize,
    pub eps_g: Option<f64>,
    pub elements_per_wavelength: Option<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// Storage of compressed H and G relative to dense.
    pub compression: Option<(f64, f64)>,
    pub timings: Vec<(String, f64)>,
    /// Peak resident memory of the process in kB, where the OS reports it.
    pub peak_memory_kb: Option<u64>,
    pub warnings: Vec<String>,
}

struct Clock(Instant, Vec<(String, f64)>);

impl Clock {
    fn lap(&mut self, what: &str) {
        let now = Instant::now();
        self.1.push((what.to_string(), (now - self.0).as_secs_f64()));
        self.0 = now;
    }
}

fn oracle_samples(params: &SphereScatterParams<f64>, mode: SeriesMode, dir: Vec3<f64>, pts: &[Vec3<f64>]) -> Result<Vec<C64>> {
    let co = SeriesCoefficients::new(params, params.default_truncation())?;
    pts.iter()
        .map(|&x| {
            let r = norm(x);
            let c = (dot(dir, x) / r).clamp(-1.0, 1.0);
            co.pressure(r, c.acos(), mode)
        })
        .collect()
}

/// Runs a study. Deterministic for a given scenario.
pub fn run(scenario: &Scenario) -> Result<ResultBundle> {
    scenario.validate()?;
    let k = scenario.wave.wavenumber()?;
    let mut clock = Clock(Instant::now(), Vec::new());
    let mut warnings = Vec::new();
    let (angles, pts) = scenario.sampling.points(k);
    let params = scenario.series_params()?;
    let dir = scenario.wave.direction;
    let mode = match scenario.study.kind {
        StudyKind::Rigid => SeriesMode::Rigid,
        _ => SeriesMode::Total,
    };
    let oracle = match &params {
        Some(p) => Some(oracle_samples(p, mode, dir, &pts)?),
        None => None,
    };
    clock.lap("series");
    let mut bundle = ResultBundle {
        name: scenario.name.clone(),
        kind: scenario.study.kind,
        k,
        angles,
        pressure: Vec::new(),
        oracle,
        max_error: None,
        surface: None,
        vertices: 0,
        eps_g: None,
        elements_per_wavelength: None,
        iterations: 0,
        residual: 0.0,
        compression: None,
        timings: Vec::new(),
        peak_memory_kb: None,
        warnings: Vec::new(),
    };
    if scenario.study.kind == StudyKind::Analytic {
        bundle.pressure = bundle.oracle.clone().expect("analytic studies have a sphere");
        bundle.max_error = Some(0.0);
        bundle.timings = clock.1;
        return Ok(bundle);
    }
    let spec = scenario.mesh.as_ref().expect("validated");
    let (mesh, eps_g) = prepare_mesh(spec)?;
    bundle.vertices = mesh.num_vertices();
    bundle.eps_g = eps_g;
    clock.lap("mesh");
    let m = &scenario.material;
    let ctx = WaveContext { k, c: m.c, rho_f: m.rho_f, amplitude: scenario.wave.amplitude, direction: dir };
    ctx.validate()?;
    let geom = BemGeometry::new(&mesh, QuadratureSettings::default())?;
    let epw = 2.0 * std::f64::consts::PI / k / geom.mean_edge_length();
    bundle.elements_per_wavelength = Some(epw);
    if epw < MIN_ELEMENTS_PER_WAVELENGTH {
        let w = format!("only {epw:.1} elements per wavelength (at least {MIN_ELEMENTS_PER_WAVELENGTH} recommended)");
        log::warn!("{w}");
        warnings.push(w);
    }
    clock.lap("geometry");
    let (ops, precond): (Box<dyn BoundaryOperators>, Box<dyn Preconditioner>) = match scenario.solver.operators {
        Operators::Dense => {
            let ops = assemble_dense(&geom, &ctx);
            clock.lap("assembly");
            let lu = DenseLu::new(&ops.h)?;
            clock.lap("preconditioner");
            (Box::new(ops), Box::new(lu))
        }
        Operators::Compressed => {
            let s = &scenario.solver;
            let ops = compress_bem(&geom, k, s.epsilon, s.eta, s.n_min)?;
            bundle.compression = Some((ops.h.compression_ratio(), ops.g.compression_ratio()));
            clock.lap("assembly");
            let lu = NearFieldLu::new(&ops.h)?;
            clock.lap("preconditioner");
            (Box::new(ops), Box::new(lu))
        }
    };
    let p_inc = incident_vector(&geom, &ctx);
    let opts = GmresOptions { tol: scenario.solver.gmres_tol, restart: scenario.solver.restart, max_iter: scenario.solver.max_iter };
    let rho = scenario.solver.coupling_density.unwrap_or(m.rho_f);
    let admittance = AdmittanceModel { beta: C64::new(scenario.solver.admittance[0], scenario.solver.admittance[1]) };
    let state = if scenario.study.kind == StudyKind::Coupled {
        let sq = SurfaceQuadrature::standard(&mesh)?;
        let mat = m.shell();
        if !mat.is_thin(spec.radius) {
            let w = format!("h = {} exceeds a tenth of the radius; thin-shell theory is stretched", mat.h);
            log::warn!("{w}");
            warnings.push(w);
        }
        let shell = build_dynamic_operator(assemble_stiffness(&sq, &mat)?, assemble_mass(&sq, &mat)?, &mat, ctx.omega())?;
        let transfer = build_transfer(&sq, &geom.table.normals)?;
        clock.lap("shell");
        let structure = Structure { shell: &shell, transfer: &transfer, rho, load: None };
        let problem = CoupledProblem { ops: ops.as_ref(), k, omega: ctx.omega(), rho, admittance, structure: Some(structure), p_inc: &p_inc };
        solve_coupled(&problem, Some(precond.as_ref()), &opts)?
    } else {
        let problem = CoupledProblem { ops: ops.as_ref(), k, omega: ctx.omega(), rho, admittance, structure: None, p_inc: &p_inc };
        solve_coupled(&problem, Some(precond.as_ref()), &opts)?
    };
    clock.lap("solve");
    bundle.iterations = state.iterations;
    bundle.residual = state.residual;
    let q_in: Vec<C64> = state.q.iter().map(|v| -v).collect();
    bundle.pressure = geom.exterior_pressure(&ctx, &state.p, &q_in, &pts);
    clock.lap("sampling");
    if let Some(o) = &bundle.oracle {
        bundle.max_error = Some(max_pointwise_error(&bundle.pressure, o)?);
    }
    let at_limit = |c: &dyn Fn(usize) -> C64| -> Vec<C64> {
        (0..mesh.num_vertices()).map(|a| geom.stencil(a).iter().map(|&(b, w)| c(b) * w).sum()).collect()
    };
    let p_lim = at_limit(&|b| state.p[b]);
    let u_lim = (!state.u.is_empty()).then(|| {
        let comps: Vec<Vec<C64>> = (0..3).map(|d| at_limit(&|b| state.u[3 * b + d])).collect();
        (0..mesh.num_vertices()).map(|a| [comps[0][a], comps[1][a], comps[2][a]]).collect()
    });
    bundle.surface = Some(SurfaceFields { mesh, p: p_lim, u: u_lim });
    bundle.timings = clock.1;
    bundle.peak_memory_kb = peak_memory_kb();
    bundle.warnings = warnings;
    Ok(bundle)
}

impl ResultBundle {
    pub fn profile_csv(&self) -> String {
        csv(&self.angles, &self.pressure)
    }

    /// Writes profile.csv, analytic.csv, surface.vtk and metadata.txt.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("profile.csv"), self.profile_csv())?;
        if let Some(o) = &self.oracle {
            std::fs::write(dir.join("analytic.csv"), csv(&self.angles, o))?;
        }
        if let Some(s) = &self.surface {
            let mut fields = vec![
                PointField::Nodal("re_p".into(), s.p.iter().map(|v| v.re).collect()),
                PointField::Nodal("abs_p".into(), s.p.iter().map(|v| v.norm()).collect()),
            ];
            if let Some(u) = &s.u {
                fields.push(PointField::Nodal("abs_u".into(), u.iter().map(|c| c.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()).collect()));
                for (d, name) in ["re_u_x", "re_u_y", "re_u_z"].iter().enumerate() {
                    fields.push(PointField::Nodal((*name).into(), u.iter().map(|c| c[d].re).collect()));
                }
            }
            meshio::write_vtk(dir.join("surface.vtk"), &s.mesh, &fields)?;
        }
        std::fs::write(dir.join("metadata.txt"), self.metadata())?;
        Ok(())
    }

    pub fn metadata(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "kind = {:?}", self.kind);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "samples = {}", self.angles.len());
        let _ = writeln!(s, "vertices = {}", self.vertices);
        if let Some(e) = self.eps_g {
            let _ = writeln!(s, "eps_g = {e:e}");
        }
        if let Some(e) = self.elements_per_wavelength {
            let _ = writeln!(s, "elements_per_wavelength = {e:.2}");
        }
        if let Some(e) = self.max_error {
            let _ = writeln!(s, "max_pointwise_error = {e:e}");
        }
        if let Some((h, g)) = self.compression {
            let _ = writeln!(s, "compression_h = {h:.4}\ncompression_g = {g:.4}");
        }
        let _ = writeln!(s, "gmres_iterations = {}", self.iterations);
        let _ = writeln!(s, "gmres_residual = {:e}", self.residual);
        for (what, t) in &self.timings {
            let _ = writeln!(s, "time_{what} = {t:.3}");
        }
        if let Some(m) = self.peak_memory_kb {
            let _ = writeln!(s, "peak_memory_kb = {m}");
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning = {w}");
        }
        s
    }
}

/// High-water mark of the resident set (Linux only).
fn peak_memory_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn csv(angles: &[f64], p: &[C64]) -> String {
    let mut s = String::from("theta,re_p,im_p,abs_p\n");
    for (t, v) in angles.iter().zip(p) {
        let _ = writeln!(s, "{t:?},{:?},{:?},{:?}", v.re, v.im, v.norm());
    }
    s
}

/// Compression statistics and sampled matvec accuracy of a scenario's
/// operators; writes the block structure of H and G as CSV into `dir`.
pub fn hmatrix_diagnostics(scenario: &Scenario, dir: impl AsRef<Path>) -> Result<String> {
    use rand::{Rng, SeedableRng};
    let spec = scenario.mesh.as_ref().ok_or_else(|| Error::Scenario("mesh: required".into()))?;
    let k = scenario.wave.wavenumber()?;
    let (mesh, _) = prepare_mesh(spec)?;
    let geom = BemGeometry::new(&mesh, QuadratureSettings::default())?;
    let s = &scenario.solver;
    let t = Instant::now();
    let ops = compress_bem(&geom, k, s.epsilon, s.eta, s.n_min)?;
    let build = t.elapsed().as_secs_f64();
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    ops.h.write_block_csv(dir.join("blocks_h.csv"))?;
    ops.g.write_block_csv(dir.join("blocks_g.csv"))?;
    // exact rows against the compressed product for a random vector
    let n = geom.num_dofs();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(scenario.seed);
    let x: Vec<C64> = (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    let mut yh = vec![C64::new(0.0, 0.0); n];
    let mut yg = vec![C64::new(0.0, 0.0); n];
    ops.h.matvec(&x, &mut yh);
    ops.g.matvec(&x, &mut yg);
    let rows: Vec<usize> = (0..n.min(16)).map(|_| rng.gen_range(0..n)).collect();
    let (mut eh, mut nh, mut eg, mut ng) = (0.0, 0.0, 0.0, 0.0);
    let mut hr = vec![C64::new(0.0, 0.0); n];
    let mut gr = vec![C64::new(0.0, 0.0); n];
    for &a in &rows {
        geom.assemble_row(a, k, &mut hr, &mut gr);
        let h: C64 = hr.iter().zip(&x).map(|(u, v)| u * v).sum();
        let g: C64 = gr.iter().zip(&x).map(|(u, v)| u * v).sum();
        eh += (h - yh[a]).norm_sqr();
        nh += h.norm_sqr();
        eg += (g - yg[a]).norm_sqr();
        ng += g.norm_sqr();
    }
    let mut out = String::new();
    let _ = writeln!(out, "points = {n}");
    let _ = writeln!(out, "epsilon = {:e}", s.epsilon);
    let _ = writeln!(out, "blocks = {}", ops.h.blocks.len());
    let _ = writeln!(out, "tree_depth = {}", ops.h.tree.depth());
    let _ = writeln!(out, "compression_h = {:.4}", ops.h.compression_ratio());
    let _ = writeln!(out, "compression_g = {:.4}", ops.g.compression_ratio());
    let _ = writeln!(out, "max_rank_h = {}", ops.h.max_rank());
    let _ = writeln!(out, "max_rank_g = {}", ops.g.max_rank());
    let _ = writeln!(out, "sampled_matvec_error_h = {:e}", (eh / nh).sqrt());
    let _ = writeln!(out, "sampled_matvec_error_g = {:e}", (eg / ng).sqrt());
    let _ = writeln!(out, "build_seconds = {build:.2}");
    std::fs::write(dir.join("hmatrix.txt"), &out)?;
    Ok(out)
}
