//! `dislocore` command-line driver.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use dislocore::analysis::{
    convergence_study, green_decay_report, green_samples, predictor_decay_report, residual_decay_report,
    strain_decay_report, write_convergence_csv, write_decay_csv, write_plt, DecayFit,
};
use dislocore::cbmodel::{dynamical_matrix, greens_supercell, stability_scan, StabilityReport};
use dislocore::energy::Setup;
use dislocore::solver::{hierarchy_relax, relax, Method};
use dislocore::Error;

use config::{hex16, Mode, RunConfig};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: String) -> Self {
        Self { code: 64, message }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self { code: 74, message: format!("{}: {e}", path.display()) }
    }

    pub fn science(message: String) -> Self {
        Self { code: 2, message }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let usage = matches!(
            e,
            Error::NotALatticeVector(_)
                | Error::DegenerateFrame(_)
                | Error::PeriodSearchFailed(_)
                | Error::Cond1Violation(_)
                | Error::DomainTooSmall(_)
                | Error::Invalid(_)
                | Error::MisalignedBurgers
                | Error::EmptyWindow(_)
        );
        Self { code: if usage { 64 } else { 2 }, message: e.to_string() }
    }
}

#[derive(Parser, Debug)]
#[command(name = "dislocore", version = VERSION, about = "Lattice statics of dislocations in multilattices")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Built-in crystal name or crystal file.
    #[arg(long, global = true)]
    crystal: Option<String>,
    #[arg(long, global = true)]
    potential: Option<String>,
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    burgers: Option<Vec<f64>>,
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    line: Option<Vec<f64>>,
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    core_offset: Option<Vec<f64>>,
    #[arg(long, global = true)]
    r_cut: Option<f64>,
    #[arg(long, global = true)]
    r_hat: Option<f64>,
    /// Elastic tensor of the predictor.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    elastic_table: Option<PathBuf>,
    /// Isotropic shear modulus (GPa).
    #[arg(long, global = true)]
    mu: Option<f64>,
    /// Isotropic Poisson ratio.
    #[arg(long, global = true)]
    nu: Option<f64>,
    #[arg(long, global = true, value_enum)]
    method: Option<MethodArg>,
    /// Largest interior force component at termination.
    #[arg(long, global = true, alias = "tol")]
    force_tol: Option<f64>,
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum MethodArg {
    Lbfgs,
    Ncg,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Phonon stability scan of the homogeneous lattice.
    Stability {
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Writes the predictor field on the domain sites.
    Predict {
        #[arg(long)]
        radius: Option<f64>,
        /// Output file (default `<out>/predict.csv`).
        #[arg(long)]
        out_file: Option<PathBuf>,
    },
    /// Relaxes one domain.
    Relax {
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Self-convergence study over a radius hierarchy.
    Converge {
        #[arg(long, value_delimiter = ',')]
        radii: Option<Vec<f64>>,
    },
    /// Decay fits of residual forces, predictor strains and the corrector.
    Decay {
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        window: Option<Vec<f64>>,
    },
    /// Decay of the lattice Green's function blocks.
    Green {
        /// Supercell size (a power of two).
        #[arg(long, alias = "n")]
        supercell: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        window: Option<Vec<f64>>,
    },
}

fn array<const N: usize>(v: Option<Vec<f64>>, name: &str) -> Result<Option<[f64; N]>, Failure> {
    match v {
        None => Ok(None),
        Some(v) => v
            .try_into()
            .map(Some)
            .map_err(|v: Vec<f64>| Failure::usage(format!("--{name} needs {N} values, got {}", v.len()))),
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = &cli.out {
        cfg.output = v.clone();
    }
    if let Some(v) = &cli.crystal {
        cfg.crystal = v.clone();
    }
    if let Some(v) = &cli.potential {
        cfg.potential = v.clone();
    }
    if let Some(v) = array::<3>(cli.burgers.clone(), "burgers")? {
        cfg.burgers = Some(v);
    }
    if let Some(v) = array::<3>(cli.line.clone(), "line")? {
        cfg.line = Some(v);
    }
    if let Some(v) = array::<2>(cli.core_offset.clone(), "core-offset")? {
        cfg.core_offset = Some(v);
    }
    if cli.r_cut.is_some() {
        cfg.r_cut = cli.r_cut;
    }
    if cli.r_hat.is_some() {
        cfg.r_hat = cli.r_hat;
    }
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    if cli.elastic_table.is_some() {
        cfg.elastic_table = cli.elastic_table.clone();
    }
    if cli.mu.is_some() {
        cfg.mu = cli.mu;
    }
    if cli.nu.is_some() {
        cfg.nu = cli.nu;
    }
    if let Some(m) = cli.method {
        cfg.solver.method = match m {
            MethodArg::Lbfgs => Method::Lbfgs,
            MethodArg::Ncg => Method::NonlinearCg,
        };
    }
    if let Some(v) = cli.force_tol {
        cfg.solver.force_tol = v;
    }
    if let Some(v) = cli.max_iter {
        cfg.solver.max_iter = v;
    }
    match &cli.command {
        Command::Stability { grid } => cfg.grid = grid.unwrap_or(cfg.grid),
        Command::Predict { radius, .. } | Command::Relax { radius } => cfg.radius = radius.unwrap_or(cfg.radius),
        Command::Converge { radii } => cfg.radii = radii.clone().unwrap_or(cfg.radii),
        Command::Decay { radius, window } => {
            cfg.radius = radius.unwrap_or(cfg.radius);
            cfg.window = array::<2>(window.clone(), "window")?.unwrap_or(cfg.window);
        }
        Command::Green { supercell, window } => {
            cfg.green_n = supercell.unwrap_or(cfg.green_n);
            cfg.green_window = array::<2>(window.clone(), "window")?.unwrap_or(cfg.green_window);
        }
    }
    cfg.solver.validate()?;
    Ok(cfg)
}

/// Output sink that stamps every CSV with the version and config hash.
struct Outputs {
    dir: PathBuf,
    header: String,
}

impl Outputs {
    fn new(cfg: &RunConfig, command: &str) -> Result<Self, Failure> {
        std::fs::create_dir_all(&cfg.output).map_err(|e| Failure::io(&cfg.output, e))?;
        Ok(Self {
            dir: cfg.output.clone(),
            header: format!("# dislocore {VERSION} config={} command={command}\n", cfg.hash()),
        })
    }

    fn write(&self, path: &Path, bytes: &[u8]) -> Result<(), Failure> {
        std::fs::write(path, bytes).map_err(|e| Failure::io(path, e))?;
        info!("wrote {}", path.display());
        Ok(())
    }

    fn file(&self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        self.write(&self.dir.join(name), bytes)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Certificate {
    key: String,
    grid_n: usize,
    min_normalized: f64,
    argmin: [f64; 2],
}

const CERTIFICATE: &str = "stability.toml";

fn run_stability(cfg: &RunConfig) -> Result<StabilityReport, Failure> {
    let geom = cfg.geometry()?;
    let v = cfg.potential()?.bind(&geom.ml, &geom.stencil);
    let h = dynamical_matrix(v.as_ref(), &geom.stencil);
    Ok(stability_scan(&h, cfg.grid)?)
}

fn write_certificate(cfg: &RunConfig, r: &StabilityReport) -> Result<(), Failure> {
    let cert = Certificate {
        key: hex16(cfg.lattice_key()?.as_bytes()),
        grid_n: r.grid_n,
        min_normalized: r.min_normalized,
        argmin: r.argmin,
    };
    std::fs::create_dir_all(&cfg.output).map_err(|e| Failure::io(&cfg.output, e))?;
    let path = cfg.output.join(CERTIFICATE);
    std::fs::write(&path, toml::to_string(&cert).expect("certificate serializes")).map_err(|e| Failure::io(&path, e))
}

/// Reuses a matching stability certificate or runs the scan.
fn ensure_stable(cfg: &RunConfig) -> Result<(), Failure> {
    let key = hex16(cfg.lattice_key()?.as_bytes());
    let path = cfg.output.join(CERTIFICATE);
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(c) = toml::from_str::<Certificate>(&text) {
            if c.key == key && c.min_normalized > 0.0 {
                info!("stability certificate {} reused", path.display());
                return Ok(());
            }
        }
    }
    let r = run_stability(cfg)?;
    write_certificate(cfg, &r)
}

fn cmd_stability(cfg: &RunConfig) -> Result<(), Failure> {
    let r = run_stability(cfg)?;
    write_certificate(cfg, &r)?;
    println!(
        "stable: min normalized eigenvalue {:.6e} at k = ({:.4}, {:.4}) on a {}x{} grid",
        r.min_normalized, r.argmin[0], r.argmin[1], r.grid_n, r.grid_n
    );
    Ok(())
}

fn setup(cfg: &RunConfig) -> Result<Setup, Failure> {
    ensure_stable(cfg)?;
    Ok(Setup::new(cfg.geometry()?, cfg.potential()?, cfg.tensor_source()?, cfg.r_hat)?)
}

fn cmd_predict(cfg: &RunConfig, out_file: Option<&Path>) -> Result<(), Failure> {
    let s = setup(cfg)?;
    let out = Outputs::new(cfg, "predict")?;
    let domain = s.geom.domain(cfg.radius, s.pred.r_hat)?;
    let n_species = s.geom.ml.n_species();
    let mut text = out.header.clone();
    let core = s.pred.core();
    writeln!(text, "# core={:.15e},{:.15e}", core.x, core.y).unwrap();
    text.push_str("l1,l2,U1,U2,U3");
    for a in 0..n_species {
        write!(text, ",p{a}_1,p{a}_2,p{a}_3").unwrap();
    }
    text.push('\n');
    for x in &domain.positions {
        let u = s.pred.u0(x)?;
        let p = s.pred.p0(x)?;
        write!(text, "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}", x.x, x.y, u.x, u.y, u.z).unwrap();
        for v in p {
            write!(text, ",{:.12e},{:.12e},{:.12e}", v.x, v.y, v.z).unwrap();
        }
        text.push('\n');
    }
    match out_file {
        Some(p) => out.write(p, text.as_bytes()),
        None => out.file("predict.csv", text.as_bytes()),
    }
}

fn cmd_relax(cfg: &RunConfig) -> Result<(), Failure> {
    let s = setup(cfg)?;
    let out = Outputs::new(cfg, "relax")?;
    let model = s.model(cfg.radius)?;
    let r = relax(&model, &cfg.solver, None)?;
    let mut xyz = Vec::new();
    model.write_xyz(&s.geom.ml, &r.field, &mut xyz)?;
    out.file("relax.xyz", &xyz)?;
    let mut forces = out.header.clone().into_bytes();
    model.write_force_csv(&model.forces(&r.field)?, &mut forces)?;
    out.file("forces.csv", &forces)?;
    let mut trace = out.header.clone();
    trace.push_str("iteration,energy\n");
    for (i, e) in r.energy_trace.iter().enumerate() {
        writeln!(trace, "{i},{e:.15e}").unwrap();
    }
    out.file("trace.csv", trace.as_bytes())?;
    println!(
        "R = {}: energy {:.10e} eV after {} iterations, max force {:.3e}",
        cfg.radius, r.energy, r.iterations, r.final_force_inf
    );
    if !r.converged {
        return Err(Failure::science(format!("no convergence within {} iterations", r.iterations)));
    }
    Ok(())
}

fn cmd_converge(cfg: &RunConfig) -> Result<(), Failure> {
    let s = setup(cfg)?;
    let out = Outputs::new(cfg, "converge")?;
    let levels = hierarchy_relax(&s, &cfg.radii, &cfg.solver)?;
    let table = convergence_study(&levels, cfg.seed)?;
    let mut csv = Vec::new();
    write_convergence_csv(&out.header, &table, &mut csv).map_err(|e| Failure::io(&cfg.output, e))?;
    out.file("conv.csv", &csv)?;
    let mut plt = Vec::new();
    write_plt("conv.csv", 1, 2, &[], &mut plt).map_err(|e| Failure::io(&cfg.output, e))?;
    out.file("conv.plt", &plt)?;
    for row in &table.rows {
        println!("R = {:>6}: distance {:.6e}, energy {:.10e}", row.radius, row.distance, row.energy);
    }
    println!("slope {:.3} ± {:.3}", table.slope, table.slope_half_width);
    Ok(())
}

fn print_fit(name: &str, f: &DecayFit) {
    println!(
        "{name:>16}: slope {:7.3} (max-based {:7.3}, r² {:.4}, {} bins)",
        f.slope,
        f.max_slope,
        f.r2,
        f.bins.len()
    );
}

fn write_fits(out: &Outputs, stem: &str, fits: &[(&str, &DecayFit)]) -> Result<(), Failure> {
    let mut csv = Vec::new();
    write_decay_csv(&out.header, fits, &mut csv).map_err(|e| Failure::io(&out.dir, e))?;
    out.file(&format!("{stem}.csv"), &csv)?;
    let names: Vec<&str> = fits.iter().map(|f| f.0).collect();
    let mut plt = Vec::new();
    write_plt(&format!("{stem}.csv"), 2, 3, &names, &mut plt).map_err(|e| Failure::io(&out.dir, e))?;
    out.file(&format!("{stem}.plt"), &plt)?;
    for (n, f) in fits {
        print_fit(n, f);
    }
    Ok(())
}

fn cmd_decay(cfg: &RunConfig) -> Result<(), Failure> {
    let s = setup(cfg)?;
    let out = Outputs::new(cfg, "decay")?;
    let window = (cfg.window[0], cfg.window[1]);
    let model = s.model(cfg.radius)?;
    let residual = residual_decay_report(&model, window)?;
    let pred = predictor_decay_report(&model, window)?;
    let r = relax(&model, &cfg.solver, None)?;
    if !r.converged {
        return Err(Failure::science(format!("no convergence within {} iterations", r.iterations)));
    }
    let strain = strain_decay_report(&model, &r, window)?;
    let mut fits = vec![
        ("net_force", &residual.net),
        ("species_force", &residual.species),
        ("predictor_strain", &pred.strain),
        ("predictor_dstrain", &pred.strain_difference),
        ("corrector_strain", &strain.strain),
        ("corrector_shift", &strain.shift),
    ];
    if let Some(f) = &strain.second_strain {
        fits.push(("corrector_d2", f));
    }
    if let Some(f) = &strain.shift_gradient {
        fits.push(("corrector_dshift", f));
    }
    write_fits(&out, "decay", &fits)?;
    println!("force slope separation {:.3}", residual.separation);
    Ok(())
}

fn cmd_green(cfg: &RunConfig) -> Result<(), Failure> {
    ensure_stable(cfg)?;
    let out = Outputs::new(cfg, "green")?;
    let geom = cfg.geometry()?;
    if geom.ml.n_species() < 2 {
        return Err(Failure::usage("the shift blocks need at least two species".into()));
    }
    let v = cfg.potential()?.bind(&geom.ml, &geom.stencil);
    let h = dynamical_matrix(v.as_ref(), &geom.stencil);
    let g = greens_supercell(&h, cfg.green_n, 1)?;
    let rep = green_decay_report(&g, &geom.ml.lattice2d, (cfg.green_window[0], cfg.green_window[1]))?;
    let mut samples = green_samples(&g, &geom.ml.lattice2d);
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut csv = out.header.clone();
    csv.push_str("r,block,value\n");
    for (name, k) in [("dG00", 0), ("G0p", 1), ("Gpp", 2)] {
        for (r, v) in &samples {
            let _ = writeln!(csv, "{r:.10e},{name},{:.10e}", v[k]);
        }
    }
    out.file("green.csv", csv.as_bytes())?;
    write_fits(&out, "green_bins", &[("dG00", &rep.d_g00), ("G0p", &rep.g0p), ("Gpp", &rep.gpp)])
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve(&cli)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Stability { .. } => cmd_stability(&cfg),
        Command::Predict { out_file, .. } => cmd_predict(&cfg, out_file.as_deref()),
        Command::Relax { .. } => cmd_relax(&cfg),
        Command::Converge { .. } => cmd_converge(&cfg),
        Command::Decay { .. } => cmd_decay(&cfg),
        Command::Green { .. } => cmd_green(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
