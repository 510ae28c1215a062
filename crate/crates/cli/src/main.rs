#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use loopfsi::analytic::{natural_frequencies, LengthConvention, SeriesCoefficients, SeriesMode, SphereScatterParams};
use loopfsi::meshio::{self, FitOptions, SphereTarget};
use loopfsi::study::{self, Materials, Operators, Sampling, Scenario};
use loopfsi::subdivision::loop_subdivide;

#[derive(Parser)]
#[command(name = "loopfsi", version, about = "Thin-shell acoustic scattering on Loop subdivision surfaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Generate, fit or inspect control meshes.
    #[command(subcommand)]
    Mesh(MeshCommand),
    /// Sample the sphere series without any solve.
    Analytic(AnalyticArgs),
    /// Compression statistics and block maps of a scenario's operators.
    HmatrixDiag {
        scenario: PathBuf,
        #[command(flatten)]
        knobs: Knobs,
    },
}

#[derive(Args)]
struct Knobs {
    /// Use dense operators regardless of the scenario.
    #[arg(long)]
    dense: bool,
    /// ACA tolerance; implies compressed operators unless --dense is given.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value = "out")]
    output_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

impl Knobs {
    fn apply(&self, s: &mut Scenario) {
        if let Some(e) = self.epsilon {
            s.solver.epsilon = e;
            s.solver.operators = Operators::Compressed;
        }
        if self.dense {
            s.solver.operators = Operators::Dense;
        }
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
    }
}

#[derive(Subcommand)]
enum MeshCommand {
    /// Refined icosahedron with vertices on a sphere.
    Gen {
        #[arg(long, default_value_t = 2)]
        levels: usize,
        #[arg(long, default_value_t = 0.5)]
        radius: f64,
        /// Fit the limit surface to the sphere.
        #[arg(long)]
        fit: bool,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Fit a mesh's limit surface to a sphere centred at the origin.
    Fit {
        input: PathBuf,
        #[arg(long)]
        radius: f64,
        /// Loop refinements applied after fitting.
        #[arg(long, default_value_t = 0)]
        subdivide: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Topology, valences and, with --radius, the geometry error.
    Info {
        input: PathBuf,
        #[arg(long)]
        radius: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Field {
    Total,
    Rigid,
}

#[derive(Args)]
struct AnalyticArgs {
    #[arg(long)]
    ka: f64,
    /// Shell thickness (m).
    #[arg(long, default_value_t = 0.05)]
    thickness: f64,
    /// Sphere radius (m); ka uses the diameter.
    #[arg(long, default_value_t = 0.5)]
    radius: f64,
    #[arg(long, value_enum, default_value = "total")]
    field: Field,
    /// Sampling circle radius (m).
    #[arg(long, default_value_t = 5.0)]
    at: f64,
    #[arg(long)]
    count: Option<usize>,
    /// Also print in-vacuo natural frequencies up to this mode.
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long, default_value = "out")]
    output_dir: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { scenario, knobs } => run(&scenario, &knobs),
        Command::Mesh(m) => mesh(m),
        Command::Analytic(a) => analytic(&a),
        Command::HmatrixDiag { scenario, knobs } => {
            let mut s = Scenario::load(&scenario).with_context(|| format!("loading {}", scenario.display()))?;
            knobs.apply(&mut s);
            let report = study::hmatrix_diagnostics(&s, &knobs.output_dir)?;
            print!("{report}");
            Ok(())
        }
    }
}

fn run(path: &Path, knobs: &Knobs) -> Result<()> {
    let mut s = Scenario::load(path).with_context(|| format!("loading {}", path.display()))?;
    knobs.apply(&mut s);
    let bundle = study::run(&s).with_context(|| format!("running {}", path.display()))?;
    bundle.write(&knobs.output_dir).with_context(|| format!("writing {}", knobs.output_dir.display()))?;
    print!("{}", bundle.metadata());
    Ok(())
}

fn mesh(cmd: MeshCommand) -> Result<()> {
    match cmd {
        MeshCommand::Gen { levels, radius, fit, output } => {
            let mut m = meshio::make_sphere_control_mesh(levels, radius);
            if fit {
                let r = meshio::l2_fit_to_target(&m, &SphereTarget::new(radius), &FitOptions::default())?;
                log::info!("eps_g {:.3e} -> {:.3e}", r.history[0], r.eps_g());
                m = r.mesh;
            }
            meshio::save_mesh(&m, &output)?;
            println!("{}", meshio::mesh_info(&m));
        }
        MeshCommand::Fit { input, radius, subdivide, output } => {
            let m = meshio::load_mesh(&input)?;
            let target = SphereTarget::new(radius);
            let r = meshio::l2_fit_to_target(&m, &target, &FitOptions::default())?;
            let mut m = r.mesh;
            for _ in 0..subdivide {
                m = loop_subdivide(&m);
            }
            meshio::save_mesh(&m, &output)?;
            println!("eps_g before {:.6e}", r.history[0]);
            println!("eps_g after {:.6e}", meshio::geometry_error(&m, &target)?.eps_g);
        }
        MeshCommand::Info { input, radius } => {
            let m = meshio::load_mesh(&input)?;
            println!("{}", meshio::mesh_info(&m));
            if let Some(r) = radius {
                println!("eps_g {:.6e}", meshio::geometry_error(&m, &SphereTarget::new(r))?.eps_g);
            }
        }
    }
    Ok(())
}

fn analytic(a: &AnalyticArgs) -> Result<()> {
    if !(a.radius > 0.0) || !(a.ka > 0.0) {
        bail!("--ka and --radius must be positive");
    }
    let m = Materials { h: a.thickness, ..Materials::default() };
    let k = a.ka / (2.0 * a.radius);
    let p = SphereScatterParams {
        a: 2.0 * a.radius,
        h: m.h,
        rho_f: m.rho_f,
        c: m.c,
        rho_s: m.rho_s,
        e: m.e,
        nu: m.nu,
        p0: 1.0,
        k,
        length: LengthConvention::Radius,
        first_mode: 0,
    };
    let mode = match a.field {
        Field::Total => SeriesMode::Total,
        Field::Rigid => SeriesMode::Rigid,
    };
    let co = SeriesCoefficients::new(&p, p.default_truncation())?;
    let sampling = Sampling { radius: a.at, count: a.count, ..Sampling::default() };
    let (angles, _) = sampling.points(k);
    let mut csv = String::from("theta,re_p,im_p,abs_p\n");
    for &t in &angles {
        let v = co.pressure(a.at, t, mode)?;
        csv += &format!("{t:?},{:?},{:?},{:?}\n", v.re, v.im, v.norm());
    }
    std::fs::create_dir_all(&a.output_dir)?;
    std::fs::write(a.output_dir.join("analytic.csv"), csv)?;
    println!("k = {k}");
    println!("samples = {}", angles.len());
    if let Some(n_max) = a.modes {
        // dimensionless frequencies to rad/s
        let scale = p.c_p() / p.formula_length();
        println!("n,omega_1,omega_2");
        for n in 0..=n_max {
            match natural_frequencies(n, &p) {
                Ok((w1, w2)) => println!("{n},{:.6e},{:.6e}", w1 * scale, w2 * scale),
                Err(e) => println!("{n},{e},"),
            }
        }
    }
    Ok(())
}
