//! Run configuration: a small TOML file with `[system]`, `[task]`, and
//! `[output]` sections. DSL strings are quoted TOML strings.
//!
//! ```toml
//! [system]
//! gallery = "G1"          # or an inline system:
//! # n = 1
//! # horizon = 5.0
//! # A = ["-1"]            # n*n row-major entries, functions of t
//! # f = ["0.25*x1"]       # n components, functions of (t, x1..xn)
//! # K = 1.0               # declared constants: all five or none
//! # alpha = 1.0
//! # M = 1.0
//! # gamma = 0.25
//! # mu = 0.0
//!
//! [task]
//! kind = "audit"          # audit | map | verify | jacobian | hessian | bounds | sweep
//! seed = 42
//!
//! [output]
//! dir = "out"
//! formats = ["json", "csv"]
//! ```

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::CliError;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub task: TaskConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub gallery: Option<String>,
    pub n: Option<usize>,
    pub horizon: Option<f64>,
    #[serde(rename = "A")]
    pub a_entries: Option<Vec<String>>,
    pub f: Option<Vec<String>>,
    #[serde(rename = "K")]
    pub k: Option<f64>,
    pub alpha: Option<f64>,
    #[serde(rename = "M")]
    pub m: Option<f64>,
    pub gamma: Option<f64>,
    pub mu: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: String,
    pub seed: Option<u64>,
    pub points: Option<usize>,
    pub radius: Option<f64>,
    pub t_grid: Option<Vec<f64>>,
    pub taus: Option<Vec<f64>>,
    pub eps: Option<f64>,
    pub j_max: Option<usize>,
    pub tol_conj: Option<f64>,
    pub tol_inv: Option<f64>,
    pub tol_picard: Option<f64>,
    /// verify: additionally cross-check the fixed-point route.
    pub picard: Option<bool>,
    /// Explicit state points for map / jacobian / hessian / verify.
    pub eval_points: Option<Vec<Vec<f64>>>,
    /// sweep parameter: "gamma-scale" | "alpha-scale" | "horizon".
    pub parameter: Option<String>,
    pub values: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    pub formats: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Audit,
    Map,
    Verify,
    Jacobian,
    Hessian,
    Bounds,
    Sweep,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "audit" => TaskKind::Audit,
            "map" => TaskKind::Map,
            "verify" => TaskKind::Verify,
            "jacobian" => TaskKind::Jacobian,
            "hessian" => TaskKind::Hessian,
            "bounds" => TaskKind::Bounds,
            "sweep" => TaskKind::Sweep,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown task kind `{other}` (expected audit|map|verify|jacobian|hessian|bounds|sweep)"
                )))
            }
        })
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config `{}`: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config parse error in `{}`: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        TaskKind::parse(&self.task.kind)?;
        let inline = self.system.n.is_some() || self.system.a_entries.is_some() || self.system.f.is_some();
        match (&self.system.gallery, inline) {
            (Some(_), true) => {
                return Err(CliError::Usage("config declares both a gallery id and an inline system".into()))
            }
            (None, false) => {
                return Err(CliError::Usage("config declares no system (gallery id or inline n/A/f)".into()))
            }
            (None, true) => {
                let n = self.system.n.ok_or_else(|| CliError::Usage("inline system needs `n`".into()))?;
                let a = self
                    .system
                    .a_entries
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("inline system needs `A`".into()))?;
                let f = self
                    .system
                    .f
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("inline system needs `f`".into()))?;
                if a.len() != n * n {
                    return Err(CliError::Usage(format!(
                        "`A` must list {} row-major entries for n = {n}, got {}",
                        n * n,
                        a.len()
                    )));
                }
                if f.len() != n {
                    return Err(CliError::Usage(format!(
                        "`f` must list {n} components, got {}",
                        f.len()
                    )));
                }
            }
            (Some(_), false) => {}
        }
        let declared = [
            self.system.k,
            self.system.alpha,
            self.system.m,
            self.system.gamma,
            self.system.mu,
        ];
        let present = declared.iter().filter(|v| v.is_some()).count();
        if present != 0 && present != 5 {
            return Err(CliError::Usage(
                "declared constants must be given all together (K, alpha, M, gamma, mu) or not at all".into(),
            ));
        }
        for v in [self.task.tol_conj, self.task.tol_inv, self.task.tol_picard, self.task.eps]
            .into_iter()
            .flatten()
        {
            if !v.is_finite() || v <= 0.0 {
                return Err(CliError::Usage("tolerances and eps must be strictly positive".into()));
            }
        }
        if let Some(vals) = &self.task.values {
            if vals.is_empty() || vals.iter().any(|v| !v.is_finite()) {
                return Err(CliError::Usage("sweep `values` must be nonempty and finite".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn gallery_config_parses() {
        let cfg = parse(
            r#"
            [system]
            gallery = "G1"
            [task]
            kind = "audit"
            seed = 7
            [output]
            dir = "out"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.system.gallery.as_deref(), Some("G1"));
        assert_eq!(cfg.task.seed, Some(7));
    }

    #[test]
    fn inline_system_requires_consistent_shapes() {
        let bad = parse(
            r#"
            [system]
            n = 2
            A = ["-1"]
            f = ["0", "0"]
            [task]
            kind = "map"
            [output]
            dir = "out"
            "#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn partial_declared_constants_rejected() {
        let bad = parse(
            r#"
            [system]
            gallery = "G1"
            K = 1.0
            [task]
            kind = "audit"
            [output]
            dir = "out"
            "#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn unknown_task_rejected() {
        let bad = parse(
            r#"
            [system]
            gallery = "G1"
            [task]
            kind = "explode"
            [output]
            dir = "out"
            "#,
        );
        assert!(bad.is_err());
    }
}
