//! Experiment configuration: a flat, sectioned `key = value` text format.
//!
//! ```text
//! file     := line*
//! line     := blank | comment | section | entry
//! comment  := ('#' | ';') any-text
//! section  := '[' name ']'
//! entry    := key '=' value [comment]
//! value    := number | integer | 'true' | 'false' | word | number (',' number)*
//! ```
//!
//! Keys are only valid inside their section; unknown sections or keys are
//! errors, and omitted keys take the defaults of [`ExperimentConfig::default`].
//! [`ExperimentConfig::to_text`] writes every key in a fixed order with
//! shortest round-trip number formatting, so `parse(to_text(c)) == c`; the
//! SHA-256 of that canonical text is the config hash stamped on outputs.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use symsde::model::DriftSpec;
use symsde::montecarlo::{LadderSpec, McConfig, Payoff, Reference};
use symsde::pdeoracle::PdeGrid;
use symsde::{GridSpec, ModelSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBlock {
    pub drift_kind: String,
    pub a: f64,
    pub beta: f64,
    pub c: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub x0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridBlock {
    pub horizon: f64,
    /// Steps for single-grid commands.
    pub steps: usize,
    /// Coarsest ladder level.
    pub base_steps: usize,
    pub levels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McBlock {
    pub n_paths: u64,
    pub seed: u64,
    pub chunk_size: usize,
    pub antithetic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PayoffBlock {
    pub id: String,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBlock {
    /// analytic | exact_sampler | pde | richardson
    pub kind: String,
    pub tolerance: f64,
    pub factor: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTimeBlock {
    pub substeps: usize,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdeBlock {
    pub nx: usize,
    pub nt: usize,
    pub theta: f64,
    /// 0 selects the default truncation.
    pub x_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBlock {
    pub rate_min: f64,
    pub rate_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelBlock,
    pub grid: GridBlock,
    pub mc: McBlock,
    pub payoff: PayoffBlock,
    pub reference: ReferenceBlock,
    pub localtime: LocalTimeBlock,
    pub pde: PdeBlock,
    pub report: ReportBlock,
    pub simulate_paths: u64,
    /// `-` writes to stdout.
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    /// CIR with `a = 0.5, beta = 1, sigma = 0.5, x0 = 1`, `T = 1`, `f(x) = e^{-x}`.
    fn default() -> Self {
        Self {
            model: ModelBlock {
                drift_kind: "affine".into(),
                a: 0.5,
                beta: 1.0,
                c: 0.0,
                sigma: 0.5,
                alpha: 0.5,
                x0: 1.0,
            },
            grid: GridBlock {
                horizon: 1.0,
                steps: 20,
                base_steps: 10,
                levels: 4,
            },
            mc: McBlock {
                n_paths: 100_000,
                seed: 0,
                chunk_size: 4096,
                antithetic: true,
            },
            payoff: PayoffBlock {
                id: "exp_neg".into(),
                params: vec![1.0],
            },
            reference: ReferenceBlock {
                kind: "analytic".into(),
                tolerance: 1e-5,
                factor: 10,
            },
            localtime: LocalTimeBlock {
                substeps: 100,
                eps: 1e-3,
            },
            pde: PdeBlock {
                nx: 1024,
                nt: 1024,
                theta: 1.0,
                x_max: 0.0,
            },
            report: ReportBlock {
                rate_min: 0.8,
                rate_max: 1.2,
            },
            simulate_paths: 10,
            output_dir: "-".into(),
        }
    }
}

fn num(key: &str, v: &str) -> Result<f64, ConfigError> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => err(format!("`{key}`: expected a finite number, got `{v}`")),
    }
}

fn int<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse::<T>()
        .or_else(|_| err(format!("`{key}`: expected a non-negative integer, got `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => err(format!("`{key}`: expected true or false, got `{v}`")),
    }
}

fn word(key: &str, v: &str) -> Result<String, ConfigError> {
    if !v.is_empty() && v.chars().all(|c| c.is_ascii_alphanumeric() || "_-./".contains(c)) {
        Ok(v.to_string())
    } else {
        err(format!("`{key}`: expected a bare word, got `{v}`"))
    }
}

fn list(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn strip_comment(line: &str) -> &str {
    let cut = line.find(['#', ';']).unwrap_or(line.len());
    line[..cut].trim()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let at = |e: ConfigError| ConfigError(format!("line {}: {}", lineno + 1, e.0));
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return Err(at(ConfigError(format!("malformed section header `{line}`"))));
                };
                section = name.trim().to_string();
                if !SECTIONS.contains(&section.as_str()) {
                    return Err(at(ConfigError(format!("unknown section `[{section}]`"))));
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(at(ConfigError(format!("expected `key = value`, got `{line}`"))));
            };
            cfg.set(&section, key.trim(), value.trim()).map_err(at)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), ConfigError> {
        let full = format!("{section}.{key}");
        let k = full.as_str();
        match k {
            "model.drift.kind" => self.model.drift_kind = word(k, v)?,
            "model.drift.a" => self.model.a = num(k, v)?,
            "model.drift.beta" => self.model.beta = num(k, v)?,
            "model.drift.c" => self.model.c = num(k, v)?,
            "model.sigma" => self.model.sigma = num(k, v)?,
            "model.alpha" => self.model.alpha = num(k, v)?,
            "model.x0" => self.model.x0 = num(k, v)?,
            "grid.T" => self.grid.horizon = num(k, v)?,
            "grid.N" => self.grid.steps = int(k, v)?,
            "grid.N0" => self.grid.base_steps = int(k, v)?,
            "grid.levels" => self.grid.levels = int(k, v)?,
            "mc.n_paths" => self.mc.n_paths = int(k, v)?,
            "mc.seed" => self.mc.seed = int(k, v)?,
            "mc.chunk_size" => self.mc.chunk_size = int(k, v)?,
            "mc.antithetic" => self.mc.antithetic = boolean(k, v)?,
            "payoff.id" => self.payoff.id = word(k, v)?,
            "payoff.params" => self.payoff.params = list(k, v)?,
            "reference.kind" => self.reference.kind = word(k, v)?,
            "reference.tolerance" => self.reference.tolerance = num(k, v)?,
            "reference.factor" => self.reference.factor = int(k, v)?,
            "localtime.substeps" => self.localtime.substeps = int(k, v)?,
            "localtime.eps" => self.localtime.eps = num(k, v)?,
            "pde.nx" => self.pde.nx = int(k, v)?,
            "pde.nt" => self.pde.nt = int(k, v)?,
            "pde.theta" => self.pde.theta = num(k, v)?,
            "pde.x_max" => self.pde.x_max = num(k, v)?,
            "report.rate_min" => self.report.rate_min = num(k, v)?,
            "report.rate_max" => self.report.rate_max = num(k, v)?,
            "simulate.paths" => self.simulate_paths = int(k, v)?,
            "output.dir" => self.output_dir = word(k, v)?,
            _ if section.is_empty() => return err(format!("key `{key}` outside any section")),
            _ => return err(format!("unknown key `{key}` in [{section}]")),
        }
        Ok(())
    }

    /// Canonical text: every key, fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let params: Vec<String> = self.payoff.params.iter().map(|p| p.to_string()).collect();
        let _ = write!(
            s,
            "[model]\ndrift.kind = {}\ndrift.a = {}\ndrift.beta = {}\ndrift.c = {}\nsigma = {}\nalpha = {}\nx0 = {}\n\n",
            self.model.drift_kind, self.model.a, self.model.beta, self.model.c, self.model.sigma,
            self.model.alpha, self.model.x0
        );
        let _ = write!(
            s,
            "[grid]\nT = {}\nN = {}\nN0 = {}\nlevels = {}\n\n",
            self.grid.horizon, self.grid.steps, self.grid.base_steps, self.grid.levels
        );
        let _ = write!(
            s,
            "[mc]\nn_paths = {}\nseed = {}\nchunk_size = {}\nantithetic = {}\n\n",
            self.mc.n_paths, self.mc.seed, self.mc.chunk_size, self.mc.antithetic
        );
        let _ = write!(s, "[payoff]\nid = {}\nparams = {}\n\n", self.payoff.id, params.join(", "));
        let _ = write!(
            s,
            "[reference]\nkind = {}\ntolerance = {}\nfactor = {}\n\n",
            self.reference.kind, self.reference.tolerance, self.reference.factor
        );
        let _ = write!(
            s,
            "[localtime]\nsubsteps = {}\neps = {}\n\n",
            self.localtime.substeps, self.localtime.eps
        );
        let _ = write!(
            s,
            "[pde]\nnx = {}\nnt = {}\ntheta = {}\nx_max = {}\n\n",
            self.pde.nx, self.pde.nt, self.pde.theta, self.pde.x_max
        );
        let _ = write!(
            s,
            "[report]\nrate_min = {}\nrate_max = {}\n\n",
            self.report.rate_min, self.report.rate_max
        );
        let _ = write!(s, "[simulate]\npaths = {}\n\n", self.simulate_paths);
        let _ = write!(s, "[output]\ndir = {}\n", self.output_dir);
        s
    }

    /// First 16 hex digits of SHA-256 over [`Self::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_spec(&self) -> symsde::Result<ModelSpec> {
        let m = &self.model;
        let params: &[f64] = match m.drift_kind.as_str() {
            "affine_plus_cos" => &[m.a, m.beta, m.c],
            _ => &[m.a, m.beta],
        };
        ModelSpec::new(DriftSpec::named(&m.drift_kind, params)?, m.sigma, m.alpha, m.x0)
    }

    pub fn grid_spec(&self) -> symsde::Result<GridSpec> {
        GridSpec::new(self.grid.horizon, self.grid.steps)
    }

    pub fn ladder(&self) -> LadderSpec {
        LadderSpec {
            base_steps: self.grid.base_steps,
            levels: self.grid.levels,
            horizon: self.grid.horizon,
        }
    }

    pub fn mc_config(&self) -> McConfig {
        McConfig {
            n_paths: self.mc.n_paths,
            seed: self.mc.seed,
            chunk_size: self.mc.chunk_size,
            antithetic: self.mc.antithetic,
        }
    }

    pub fn payoff_spec(&self) -> symsde::Result<Payoff> {
        Payoff::named(&self.payoff.id, &self.payoff.params)
    }

    pub fn reference_spec(&self) -> Result<Reference, ConfigError> {
        Ok(match self.reference.kind.as_str() {
            "analytic" => Reference::Analytic,
            "exact_sampler" => Reference::ExactSampler {
                factor: self.reference.factor,
            },
            "pde" => Reference::Pde {
                tolerance: self.reference.tolerance,
            },
            "richardson" => Reference::Richardson,
            other => {
                return err(format!(
                    "unknown reference `{other}` (analytic, exact_sampler, pde, richardson)"
                ))
            }
        })
    }

    pub fn pde_grid(&self, model: &ModelSpec) -> symsde::Result<PdeGrid> {
        let x_max = if self.pde.x_max > 0.0 {
            self.pde.x_max
        } else {
            PdeGrid::default_x_max(model, self.grid.horizon)
        };
        PdeGrid::new(x_max, self.pde.nx, self.pde.nt, self.pde.theta)
    }
}

const SECTIONS: [&str; 10] = [
    "model",
    "grid",
    "mc",
    "payoff",
    "reference",
    "localtime",
    "pde",
    "report",
    "simulate",
    "output",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn edited_config_round_trips_and_changes_hash() {
        let text = "# power model\n[model]\nalpha = 0.9 ; inline\nsigma=0.25\ndrift.a = 0.4\n\n[payoff]\nid = capped_poly\nparams = 2, 1.5\n[mc]\nantithetic = false\nseed = 18446744073709551615\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.model.alpha, 0.9);
        assert_eq!(c.payoff.params, vec![2.0, 1.5]);
        assert_eq!(c.mc.seed, u64::MAX);
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
        assert_eq!(c.hash().len(), 16);
    }

    #[test]
    fn shortest_float_formatting_is_exact() {
        let mut c = ExperimentConfig::default();
        c.model.sigma = 0.1 + 0.2;
        c.localtime.eps = 1e-300;
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back.model.sigma.to_bits(), c.model.sigma.to_bits());
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "sigma = 1",
            "[modle]",
            "[model]\nsigmaa = 1",
            "[model]\nsigma = abc",
            "[model]\nsigma = inf",
            "[mc]\nn_paths = -3",
            "[mc]\nantithetic = yes",
            "[model\n",
            "[model]\njust words",
        ] {
            assert!(ExperimentConfig::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn conversions() {
        let c = ExperimentConfig::default();
        assert!(c.model_spec().unwrap().is_square_root());
        assert_eq!(c.reference_spec().unwrap(), Reference::Analytic);
        let mut bad = c.clone();
        bad.model.drift_kind = "cubic".into();
        assert!(bad.model_spec().is_err());
        bad.reference.kind = "oracle".into();
        assert!(bad.reference_spec().is_err());
    }
}
