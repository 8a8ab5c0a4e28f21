//! Run configuration: TOML file merged with command-line overrides.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dislocore::lattice::{CrystalFile, Geometry, MultilatticeSpec, SILICON_R_CUT, TOY_R_CUT};
use dislocore::potential::{sw_silicon, toy_pair_ml, Potential, ToyParams};
use dislocore::predictor::TensorSource;
use dislocore::solver::SolverConfig;

use crate::Failure;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Cauchy–Born elastic tensor of the potential.
    Cb,
    /// Isotropic elasticity; `mu`/`nu` or the Voigt average of the table.
    Isotropic,
    /// Tabulated anisotropic constants.
    Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in crystal (`silicon`, `fcc`, `toy-square`) or a crystal file.
    pub crystal: String,
    /// `sw-si`, `toy` or `toy-flipped`.
    pub potential: String,
    pub burgers: Option<[f64; 3]>,
    pub line: Option<[f64; 3]>,
    /// Offset of the core from its default position.
    pub core_offset: Option<[f64; 2]>,
    pub r_cut: Option<f64>,
    pub r_hat: Option<f64>,
    pub mode: Mode,
    /// File with 21 Voigt entries (GPa, row-major upper triangle).
    pub elastic_table: Option<PathBuf>,
    pub mu: Option<f64>,
    pub nu: Option<f64>,
    pub solver: SolverConfig,
    pub radius: f64,
    pub radii: Vec<f64>,
    pub window: [f64; 2],
    pub grid: usize,
    pub green_n: usize,
    pub green_window: [f64; 2],
    pub output: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            crystal: "silicon".into(),
            potential: "sw-si".into(),
            burgers: None,
            line: None,
            core_offset: None,
            r_cut: None,
            r_hat: None,
            mode: Mode::Cb,
            elastic_table: None,
            mu: None,
            nu: None,
            solver: SolverConfig::default(),
            radius: 80.0,
            radii: vec![10.0, 14.0, 20.0, 28.0, 40.0, 56.0],
            window: [12.0, 60.0],
            grid: 32,
            green_n: 256,
            green_window: [8.0, 64.0],
            output: PathBuf::from("out"),
            seed: 0,
        }
    }
}

fn read_input(path: &Path, what: &str) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {what} {}: {e}", path.display())))
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = read_input(p, "config file")?;
                toml::from_str(&text).map_err(|e| Failure::usage(format!("bad config {}: {e}", p.display())))
            }
        }
    }

    /// Short SHA-256 of the resolved configuration, output directory excluded.
    pub fn hash(&self) -> String {
        let text = toml::to_string(&Self { output: PathBuf::new(), ..self.clone() }).expect("config serializes");
        hex16(text.as_bytes())
    }

    fn crystal_spec(&self) -> Result<MultilatticeSpec, Failure> {
        match self.crystal.as_str() {
            "silicon" => Ok(MultilatticeSpec::silicon()),
            "fcc" => Ok(MultilatticeSpec::fcc()),
            "toy-square" => Ok(MultilatticeSpec::toy_square()),
            path => {
                let p = Path::new(path);
                let text = read_input(p, "crystal file")?;
                let file: CrystalFile = if p.extension().is_some_and(|e| e == "json") {
                    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("bad crystal file: {e}")))?
                } else {
                    toml::from_str(&text).map_err(|e| Failure::usage(format!("bad crystal file: {e}")))?
                };
                MultilatticeSpec::from_file(&file).map_err(Failure::from)
            }
        }
    }

    /// Text identifying everything the homogeneous lattice depends on.
    pub fn lattice_key(&self) -> Result<String, Failure> {
        let crystal = match self.crystal.as_str() {
            "silicon" | "fcc" | "toy-square" => self.crystal.clone(),
            path => read_input(Path::new(path), "crystal file")?,
        };
        Ok(format!(
            "{crystal}|{}|{:?}|{:?}|{:?}|{}",
            self.potential,
            self.burgers_line()?,
            self.r_cut,
            self.grid,
            env!("CARGO_PKG_VERSION")
        ))
    }

    fn burgers_line(&self) -> Result<([f64; 3], [f64; 3]), Failure> {
        let defaults = match self.crystal.as_str() {
            "silicon" => Some(([-0.5, 0.5, 0.0], [1.0, 1.0, 2.0])),
            "toy-square" => Some(([1.0, 0.0, 0.0], [0.0, 0.0, 1.0])),
            _ => None,
        };
        match (self.burgers, self.line, defaults) {
            (Some(b), Some(l), _) => Ok((b, l)),
            (b, l, Some((db, dl))) => Ok((b.unwrap_or(db), l.unwrap_or(dl))),
            _ => Err(Failure::usage("burgers and line are required for this crystal".into())),
        }
    }

    pub fn geometry(&self) -> Result<Geometry, Failure> {
        let spec = self.crystal_spec()?;
        let (b, l) = self.burgers_line()?;
        let r_cut = match (self.r_cut, self.crystal.as_str()) {
            (Some(r), _) => r,
            (None, "silicon") => SILICON_R_CUT,
            (None, "toy-square") => TOY_R_CUT,
            _ => return Err(Failure::usage("r_cut is required for this crystal".into())),
        };
        let (b, l) = (Vector3::from(b), Vector3::from(l));
        let geom = Geometry::new(&spec, &b, &l, r_cut, None)?;
        match self.core_offset {
            None => Ok(geom),
            Some(o) => Ok(Geometry::new(&spec, &b, &l, r_cut, Some(geom.frame.core + Vector2::from(o)))?),
        }
    }

    pub fn potential(&self) -> Result<Potential, Failure> {
        match self.potential.as_str() {
            "sw-si" => Ok(sw_silicon()),
            "toy" => Ok(toy_pair_ml()),
            "toy-flipped" => Ok(Potential::Toy(ToyParams::sign_flipped())),
            other => Err(Failure::usage(format!("unknown potential {other:?}"))),
        }
    }

    fn table(&self) -> Result<Vec<f64>, Failure> {
        match &self.elastic_table {
            Some(p) => {
                let text = read_input(p, "elastic table")?;
                text.lines()
                    .filter(|l| !l.trim_start().starts_with('#'))
                    .flat_map(|l| {
                        l.split([',', ' ', '\t']).map(str::trim).filter(|t| !t.is_empty()).collect::<Vec<_>>()
                    })
                    .map(|t| {
                        t.parse::<f64>().map_err(|e| Failure::usage(format!("bad elastic table entry {t:?}: {e}")))
                    })
                    .collect()
            }
            None if self.crystal == "silicon" => match TensorSource::silicon_table() {
                TensorSource::Table(v) => Ok(v),
                _ => unreachable!(),
            },
            None => Err(Failure::usage("elastic_table is required for this crystal".into())),
        }
    }

    pub fn tensor_source(&self) -> Result<TensorSource, Failure> {
        match self.mode {
            Mode::Cb => Ok(TensorSource::CauchyBorn),
            Mode::Table => Ok(TensorSource::Table(self.table()?)),
            Mode::Isotropic => match (self.mu, self.nu) {
                (Some(mu), Some(nu)) => Ok(TensorSource::Isotropic { mu, nu }),
                (None, None) => Ok(TensorSource::voigt_isotropic(&self.table()?)?),
                _ => Err(Failure::usage("give both mu and nu, or neither".into())),
            },
        }
    }
}

pub fn hex16(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}
