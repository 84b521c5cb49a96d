//! Sectioned key=value run configuration.
//!
//! ```text
//! [grid]
//! t_max = 10.0
//! p = 401
//! rule = trapezoid-uniform
//!
//! [weight]
//! kind = constant
//!
//! [family]
//! family = nelson_siegel
//! lambda = 0.5
//! ```
//!
//! Unknown sections or keys are rejected, referenced files must exist at
//! parse time, and numeric fields are range-checked when the blocks are
//! turned into model objects.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use curveflow_core::error::{Error, Result};
use curveflow_core::function_space::{Curve, Grid, QuadRule, WeightFunction};
use curveflow_core::hjm::VolatilitySpec;
use curveflow_core::io::read_curve_csv;
use curveflow_core::manifold::ManifoldFamily;
use curveflow_core::projection_dynamics::Scheme;

fn config_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

const SECTIONS: &[&str] = &["grid", "weight", "family", "vol", "sim", "estimation"];

const KEYS: &[(&str, &[&str])] = &[
    ("grid", &["t_max", "p", "rule"]),
    ("weight", &["kind", "gamma"]),
    (
        "family",
        &[
            "family",
            "lambda",
            "rates",
            "basis_files",
            "g0_file",
            "z_init",
            "z_lower",
            "z_upper",
        ],
    ),
    ("vol", &["vol", "sigma0", "decay", "factors"]),
    (
        "sim",
        &["z0", "r0_file", "delta", "steps", "seed", "scheme", "paths"],
    ),
    (
        "estimation",
        &["theta_init", "q", "max_rounds", "scheme"],
    ),
];

/// One parsed `key = value` with its source line for diagnostics.
#[derive(Clone, Debug)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed configuration, grouped by section.
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    path: PathBuf,
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(path, 0, format!("cannot read config: {e}")))?;
        let mut sections: BTreeMap<String, BTreeMap<String, Entry>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(config_err(path, lineno, format!("unknown section `{name}`")));
                }
                current = Some(name.to_string());
                sections.entry(name.to_string()).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(config_err(path, lineno, "expected `key = value`"));
            };
            let Some(section) = current.clone() else {
                return Err(config_err(path, lineno, "key outside any [section]"));
            };
            let key = key.trim().to_string();
            let allowed = KEYS
                .iter()
                .find(|(s, _)| *s == section)
                .map(|(_, keys)| *keys)
                .unwrap_or(&[]);
            let known = allowed.contains(&key.as_str())
                || (section == "vol"
                    && (key.starts_with("sigma0_") || key.starts_with("decay_")));
            if !known {
                return Err(config_err(
                    path,
                    lineno,
                    format!("unknown key `{key}` in [{section}]"),
                ));
            }
            let entry = Entry {
                value: value.trim().to_string(),
                line: lineno,
            };
            if sections
                .entry(section.clone())
                .or_default()
                .insert(key.clone(), entry)
                .is_some()
            {
                return Err(config_err(
                    path,
                    lineno,
                    format!("duplicate key `{key}` in [{section}]"),
                ));
            }
        }
        let cfg = RunConfig {
            path: path.to_path_buf(),
            sections,
        };
        cfg.check_referenced_files()?;
        Ok(cfg)
    }

    fn check_referenced_files(&self) -> Result<()> {
        for (section, key) in [
            ("family", "g0_file"),
            ("sim", "r0_file"),
        ] {
            if let Some(e) = self.get(section, key) {
                let p = self.relative(&e.value);
                if !p.exists() {
                    return Err(config_err(
                        &self.path,
                        e.line,
                        format!("referenced file `{}` does not exist", p.display()),
                    ));
                }
            }
        }
        if let Some(e) = self.get("family", "basis_files") {
            for name in e.value.split(',') {
                let p = self.relative(name.trim());
                if !p.exists() {
                    return Err(config_err(
                        &self.path,
                        e.line,
                        format!("referenced file `{}` does not exist", p.display()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Paths inside the config resolve relative to the config file.
    fn relative(&self, name: &str) -> PathBuf {
        let p = PathBuf::from(name);
        if p.is_absolute() {
            p
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    fn get(&self, section: &str, key: &str) -> Option<&Entry> {
        self.sections.get(section)?.get(key)
    }

    fn require(&self, section: &str, key: &str) -> Result<&Entry> {
        self.get(section, key).ok_or_else(|| {
            config_err(
                &self.path,
                0,
                format!("missing `{key}` in [{section}] (section required by this command)"),
            )
        })
    }

    fn parse_f64(&self, section: &str, key: &str) -> Result<f64> {
        let e = self.require(section, key)?;
        e.value
            .parse::<f64>()
            .map_err(|_| config_err(&self.path, e.line, format!("`{key}` must be a number")))
    }

    fn parse_usize(&self, section: &str, key: &str) -> Result<usize> {
        let e = self.require(section, key)?;
        e.value
            .parse::<usize>()
            .map_err(|_| config_err(&self.path, e.line, format!("`{key}` must be an integer")))
    }

    fn parse_f64_list(&self, section: &str, key: &str) -> Result<Vec<f64>> {
        let e = self.require(section, key)?;
        e.value
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| {
                    config_err(&self.path, e.line, format!("`{key}` must be a comma list of numbers"))
                })
            })
            .collect()
    }

    pub fn build_grid(&self) -> Result<Arc<Grid<f64>>> {
        let t_max = self.parse_f64("grid", "t_max")?;
        let p = self.parse_usize("grid", "p")?;
        let rule = QuadRule::parse(&self.require("grid", "rule")?.value)?;
        Grid::new(t_max, p, rule)
    }

    pub fn build_weight(&self, grid: &Arc<Grid<f64>>) -> Result<WeightFunction<f64>> {
        let kind = &self.require("weight", "kind")?.value;
        match kind.as_str() {
            "constant" => {
                if let Some(e) = self.get("weight", "gamma") {
                    return Err(config_err(
                        &self.path,
                        e.line,
                        "`gamma` is only meaningful for exponential weights",
                    ));
                }
                Ok(WeightFunction::constant(grid))
            }
            "exp_increasing" => WeightFunction::exp_increasing(grid, self.parse_f64("weight", "gamma")?),
            "exp_decreasing" => WeightFunction::exp_decreasing(grid, self.parse_f64("weight", "gamma")?),
            other => Err(config_err(
                &self.path,
                self.require("weight", "kind")?.line,
                format!("unknown weight kind `{other}`"),
            )),
        }
    }

    pub fn build_family(
        &self,
        grid: &Arc<Grid<f64>>,
        resample: bool,
    ) -> Result<ManifoldFamily<f64>> {
        let e = self.require("family", "family")?;
        let mut fam = match e.value.as_str() {
            "affine" => {
                let files = self.require("family", "basis_files")?;
                let basis: Result<Vec<Curve<f64>>> = files
                    .value
                    .split(',')
                    .map(|name| read_curve_csv(&self.relative(name.trim()), grid, resample))
                    .collect();
                let g0 = match self.get("family", "g0_file") {
                    Some(g0) => read_curve_csv(&self.relative(&g0.value), grid, resample)?,
                    None => Curve::zeros(grid),
                };
                ManifoldFamily::affine(g0, basis?)?
            }
            "nelson_siegel" => ManifoldFamily::nelson_siegel(self.parse_f64("family", "lambda")?)?,
            "exp_basis" => ManifoldFamily::exp_basis(self.parse_f64_list("family", "rates")?)?,
            "exp_nonlinear" => exp_nonlinear_family()?,
            other => {
                return Err(config_err(
                    &self.path,
                    e.line,
                    format!("unknown family `{other}`"),
                ))
            }
        };
        if self.get("family", "z_lower").is_some() || self.get("family", "z_upper").is_some() {
            let lower = self.parse_f64_list("family", "z_lower")?;
            let upper = self.parse_f64_list("family", "z_upper")?;
            if lower.len() != fam.n() || upper.len() != fam.n() {
                return Err(config_err(
                    &self.path,
                    0,
                    "z_lower/z_upper must match the family dimension",
                ));
            }
            fam = fam.with_bounds(lower.into_iter().zip(upper).collect())?;
        }
        Ok(fam)
    }

    /// Optional starting coordinates for nonlinear fits; defaults to the
    /// center of the admissible box (or zero where unbounded).
    pub fn z_init(&self, fam: &ManifoldFamily<f64>) -> Result<Vec<f64>> {
        if self.get("family", "z_init").is_some() {
            let z = self.parse_f64_list("family", "z_init")?;
            if z.len() != fam.n() {
                return Err(config_err(
                    &self.path,
                    self.get("family", "z_init").unwrap().line,
                    "z_init must match the family dimension",
                ));
            }
            return Ok(z);
        }
        Ok(fam
            .z_bounds()
            .iter()
            .map(|(l, u)| {
                if l.is_finite() && u.is_finite() {
                    0.5 * (l + u)
                } else if l.is_finite() {
                    l + 1.0
                } else if u.is_finite() {
                    u - 1.0
                } else {
                    0.0
                }
            })
            .collect())
    }

    pub fn build_vol(&self) -> Result<VolatilitySpec<f64>> {
        let e = self.require("vol", "vol")?;
        let m = match self.get("vol", "factors") {
            Some(_) => self.parse_usize("vol", "factors")?,
            None => 1,
        };
        if m == 0 {
            return Err(config_err(&self.path, e.line, "factors must be at least 1"));
        }
        let sigma0 = self.parse_f64("vol", "sigma0")?;
        let sigma_i = |i: usize| -> Result<f64> {
            match self.get("vol", &format!("sigma0_{}", i + 1)) {
                Some(entry) => entry.value.parse::<f64>().map_err(|_| {
                    config_err(&self.path, entry.line, "per-factor sigma0 must be a number")
                }),
                None => Ok(sigma0),
            }
        };
        let decay = |i: usize| -> Result<f64> {
            match self.get("vol", &format!("decay_{}", i + 1)) {
                Some(entry) => entry.value.parse::<f64>().map_err(|_| {
                    config_err(&self.path, entry.line, "per-factor decay must be a number")
                }),
                None => self.parse_f64("vol", "decay"),
            }
        };
        use curveflow_core::hjm::FactorVol;
        let factors: Result<Vec<FactorVol<f64>>> = (0..m)
            .map(|i| {
                Ok(match e.value.as_str() {
                    "constant" => FactorVol::Constant { sigma0: sigma_i(i)? },
                    "exp_decay" => FactorVol::ExpDecay {
                        sigma0: sigma_i(i)?,
                        decay: decay(i)?,
                    },
                    "proportional" => FactorVol::Proportional { sigma0: sigma_i(i)? },
                    "proportional_exp" => FactorVol::ProportionalExp {
                        sigma0: sigma_i(i)?,
                        decay: decay(i)?,
                    },
                    other => {
                        return Err(config_err(
                            &self.path,
                            e.line,
                            format!("unknown volatility `{other}`"),
                        ))
                    }
                })
            })
            .collect();
        let spec = VolatilitySpec::from_factors(factors?)?;
        for v in spec.theta_values() {
            if v < 0.0 || !v.is_finite() {
                return Err(config_err(
                    &self.path,
                    e.line,
                    "volatility parameters must be non-negative",
                ));
            }
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub z0: Option<Vec<f64>>,
    pub r0_file: Option<PathBuf>,
    pub delta: f64,
    pub steps: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub paths: usize,
}

#[derive(Clone, Debug)]
pub struct EstimationConfig {
    pub theta_init: Vec<f64>,
    pub q: Option<usize>,
    pub max_rounds: usize,
    pub ls_only: bool,
}

impl RunConfig {
    pub fn build_sim(&self) -> Result<SimConfig> {
        let delta = self.parse_f64("sim", "delta")?;
        if delta <= 0.0 || !delta.is_finite() {
            return Err(config_err(&self.path, 0, "delta must be positive"));
        }
        let steps = self.parse_usize("sim", "steps")?;
        if steps == 0 {
            return Err(config_err(&self.path, 0, "steps must be at least 1"));
        }
        let seed = self.parse_usize("sim", "seed")? as u64;
        let scheme = Scheme::parse(&self.require("sim", "scheme")?.value)?;
        let paths = match self.get("sim", "paths") {
            Some(_) => self.parse_usize("sim", "paths")?,
            None => 1,
        };
        if paths == 0 {
            return Err(config_err(&self.path, 0, "paths must be at least 1"));
        }
        let z0 = match self.get("sim", "z0") {
            Some(_) => Some(self.parse_f64_list("sim", "z0")?),
            None => None,
        };
        let r0_file = self.get("sim", "r0_file").map(|e| self.relative(&e.value));
        if z0.is_none() && r0_file.is_none() {
            return Err(config_err(
                &self.path,
                0,
                "the [sim] section needs either `z0` or `r0_file`",
            ));
        }
        Ok(SimConfig {
            z0,
            r0_file,
            delta,
            steps,
            seed,
            scheme,
            paths,
        })
    }

    pub fn build_estimation(&self) -> Result<EstimationConfig> {
        let theta_init = self.parse_f64_list("estimation", "theta_init")?;
        let q_entry = self.require("estimation", "q")?;
        let q = match q_entry.value.as_str() {
            "auto" => None,
            v => Some(v.parse::<usize>().map_err(|_| {
                config_err(&self.path, q_entry.line, "`q` must be `auto` or an integer")
            })?),
        };
        let max_rounds = match self.get("estimation", "max_rounds") {
            Some(_) => self.parse_usize("estimation", "max_rounds")?,
            None => 10,
        };
        if max_rounds == 0 {
            return Err(config_err(&self.path, 0, "max_rounds must be at least 1"));
        }
        let scheme = &self.require("estimation", "scheme")?.value;
        let ls_only = match scheme.as_str() {
            "ls" => true,
            "optimal" => false,
            other => {
                return Err(config_err(
                    &self.path,
                    0,
                    format!("unknown estimation scheme `{other}` (expected ls or optimal)"),
                ))
            }
        };
        Ok(EstimationConfig {
            theta_init,
            q,
            max_rounds,
            ls_only,
        })
    }
}

/// Two-coordinate amplitude/rate family `z1 exp(-z2 x)`, the one genuinely
/// nonlinear entry in the catalog (exercises the Gauss–Newton fit path and
/// the nonlinear rejection of project-check).
fn exp_nonlinear_family() -> Result<ManifoldFamily<f64>> {
    ManifoldFamily::custom(
        2,
        Arc::new(|z: &[f64], grid: &Arc<Grid<f64>>| {
            let (a, r) = (z[0], z[1]);
            Curve::from_fn(grid, move |x| a * (-r * x).exp())
        }),
        Some(Arc::new(
            |z: &[f64], k: usize, grid: &Arc<Grid<f64>>| {
                let (a, r) = (z[0], z[1]);
                match k {
                    0 => Curve::from_fn(grid, move |x| (-r * x).exp()),
                    _ => Curve::from_fn(grid, move |x| -a * x * (-r * x).exp()),
                }
            },
        )),
        false,
    )?
    .with_bounds(vec![(-10.0, 10.0), (1e-3, 10.0)])
}
