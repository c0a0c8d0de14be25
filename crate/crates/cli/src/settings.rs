//! Run settings: one flat record fed by an optional config file and by flags.
//!
//! Every field is optional so the two sources can be merged and a report can
//! embed exactly what was resolved. A key set by both sources to different
//! values is a conflict, never a silent override.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use semms::glmm::ResponseKind;
use semms::lmm::ReFlags;
use semms::Family;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// 1-based column numbers from here on.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ycol: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zcols: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_col: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope_col: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub standardize_slope: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub nn: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mincor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minchange: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_gam_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em_max_iters: Option<usize>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub re: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conv_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_outer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<ResponseKind>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nfolds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_lambda: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_min_ratio: Option<f64>,
}

macro_rules! merge_fields {
    ($file:expr, $flags:expr, $conflicts:expr; $($field:ident),* $(,)?) => {
        Settings {
            $($field: merge_one(stringify!($field), $file.$field, $flags.$field, &mut $conflicts),)*
        }
    };
}

fn merge_one<T: PartialEq + std::fmt::Debug>(
    key: &str,
    file: Option<T>,
    flag: Option<T>,
    conflicts: &mut Vec<String>,
) -> Option<T> {
    match (file, flag) {
        (Some(a), Some(b)) if a != b => {
            conflicts.push(format!(
                "--{} = {b:?} (command line) vs {key} = {a:?} (config file)",
                key.replace('_', "-")
            ));
            Some(b)
        }
        (a, b) => b.or(a),
    }
}

impl Settings {
    /// Combine config-file values with flag values.
    pub fn merge(file: Settings, flags: Settings) -> Result<Settings, CliError> {
        let mut conflicts = Vec::new();
        let merged = merge_fields!(file, flags, conflicts;
            input, ycol, zcols, group_col, slope_col, standardize_slope, family,
            nn, mincor, minchange, max_gam_iters, em_tol, em_max_iters,
            re, conv_tol, max_outer, warm_start, response,
            scenario, scenario_file, seed, reps, base_seed, methods, nfolds, n_lambda, lambda_min_ratio,
        );
        if conflicts.is_empty() {
            Ok(merged)
        } else {
            Err(CliError::Usage(format!(
                "conflicting settings:\n  {}",
                conflicts.join("\n  ")
            )))
        }
    }

    /// Read TOML, or JSON when the extension says so. A JSON run report is
    /// accepted as well; its embedded `config` is used.
    pub fn load(path: &Path) -> Result<Settings, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let bad = |e: String| CliError::Usage(format!("invalid config {}: {e}", path.display()));
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"))
        {
            let mut v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
            if let Some(inner) = v.get_mut("config") {
                v = inner.take();
            }
            serde_json::from_value(v).map_err(|e| bad(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| bad(e.to_string()))
        }
    }

    pub fn require<T: Clone>(value: &Option<T>, flag: &str) -> Result<T, CliError> {
        value
            .clone()
            .ok_or_else(|| CliError::Usage(format!("missing required setting --{flag}")))
    }

    pub fn fit_config(&self) -> semms::FitConfig {
        let d = semms::FitConfig::default();
        semms::FitConfig {
            nn: self.nn.unwrap_or(d.nn),
            mincor: self.mincor.unwrap_or(d.mincor),
            minchange: self.minchange.unwrap_or(d.minchange),
            max_gam_iters: self.max_gam_iters.unwrap_or(d.max_gam_iters),
            em_tol: self.em_tol.unwrap_or(d.em_tol),
            em_max_iters: self.em_max_iters.unwrap_or(d.em_max_iters),
        }
    }

    /// Fill every selection-related default so the report shows what ran.
    pub fn resolve_fit_defaults(&mut self) {
        let c = self.fit_config();
        self.nn = Some(c.nn);
        self.mincor = Some(c.mincor);
        self.minchange = Some(c.minchange);
        self.max_gam_iters = Some(c.max_gam_iters);
        self.em_tol = Some(c.em_tol);
        self.em_max_iters = Some(c.em_max_iters);
    }
}

/// Parse `4-103`, `4,6,9-12` style 1-based column lists into 0-based indices.
pub fn parse_columns(spec: &str) -> Result<Vec<usize>, CliError> {
    let bad = |part: &str| {
        CliError::Usage(format!(
            "invalid column list {spec:?} near {part:?} (columns are 1-based)"
        ))
    };
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let one = |s: &str| -> Result<usize, CliError> {
            match s.trim().parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v - 1),
                _ => Err(bad(part)),
            }
        };
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (one(a)?, one(b)?);
                if a > b {
                    return Err(bad(part));
                }
                out.extend(a..=b);
            }
            None => out.push(one(part)?),
        }
    }
    if out.is_empty() {
        return Err(bad(spec));
    }
    Ok(out)
}

pub fn one_based(col: usize) -> Result<usize, CliError> {
    col.checked_sub(1)
        .ok_or_else(|| CliError::Usage("column numbers are 1-based; 0 is not a column".into()))
}

/// `intercept`, `slope` or `intercept,slope`.
pub fn parse_re(spec: &str) -> Result<ReFlags, CliError> {
    let mut flags = ReFlags {
        intercept: false,
        slope: false,
    };
    for part in spec.split(',').map(str::trim) {
        match part {
            "intercept" => flags.intercept = true,
            "slope" => flags.slope = true,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown random effect {other:?}; use intercept, slope or intercept,slope"
                )))
            }
        }
    }
    Ok(flags)
}
