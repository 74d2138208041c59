//! Seeded sweeps over one hyper-parameter or module switch, summarised as
//! mean ± std tables.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{MaskHead, TrainConfig};
use crate::data::{DatasetManifest, Split};
use crate::error::{PbipError, Result};
use crate::metrics::MeanStd;
use crate::pipeline::run_pipeline;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationParam {
    K,
    NK,
    BetaOverAlpha,
    Theta2OverTheta1,
    /// Values are `+`-joined subsets of `SIM`, `AT`, `FGS`, `BGS`, or `none`.
    Modules,
}

impl FromStr for AblationParam {
    type Err = PbipError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k" => Ok(Self::K),
            "n_k" | "nk" => Ok(Self::NK),
            "beta_over_alpha" => Ok(Self::BetaOverAlpha),
            "theta2_over_theta1" => Ok(Self::Theta2OverTheta1),
            "modules" => Ok(Self::Modules),
            _ => Err(PbipError::Config(format!(
                "unknown ablation parameter `{s}` (expected K, N_K, beta_over_alpha, theta2_over_theta1 or modules)"
            ))),
        }
    }
}

impl fmt::Display for AblationParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::K => "K",
            Self::NK => "N_K",
            Self::BetaOverAlpha => "beta_over_alpha",
            Self::Theta2OverTheta1 => "theta2_over_theta1",
            Self::Modules => "modules",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub param: AblationParam,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
}

const MODULES: [&str; 4] = ["SIM", "AT", "FGS", "BGS"];

fn parse_modules(value: &str) -> Result<[bool; 4]> {
    let mut on = [false; 4];
    if value.eq_ignore_ascii_case("none") {
        return Ok(on);
    }
    for part in value.split('+') {
        let i = MODULES
            .iter()
            .position(|m| m.eq_ignore_ascii_case(part.trim()))
            .ok_or_else(|| PbipError::Config(format!("unknown module `{part}` (expected SIM, AT, FGS, BGS)")))?;
        on[i] = true;
    }
    Ok(on)
}

fn parse_number<T: FromStr>(value: &str, param: AblationParam) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| PbipError::Config(format!("`{value}` is not a valid {param} value")))
}

impl AblationSpec {
    /// The config of one sweep cell.
    pub fn apply(&self, base: &TrainConfig, value: &str, seed: u64) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        cfg.seed = seed;
        match self.param {
            AblationParam::K => cfg.k = parse_number(value, self.param)?,
            AblationParam::NK => cfg.n_k = parse_number(value, self.param)?,
            AblationParam::BetaOverAlpha => cfg.beta = parse_number::<f64>(value, self.param)? * cfg.alpha,
            AblationParam::Theta2OverTheta1 => cfg.theta2 = parse_number::<f64>(value, self.param)? * cfg.theta1,
            AblationParam::Modules => {
                let [sim, at, fgs, bgs] = parse_modules(value)?;
                if !sim {
                    cfg.mask_head = MaskHead::Conv1x1;
                }
                cfg.adaptive_threshold = at;
                if !fgs {
                    cfg.theta1 = 0.0;
                }
                if !bgs {
                    cfg.theta2 = 0.0;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self, base: &TrainConfig) -> Result<()> {
        if self.values.is_empty() {
            return Err(PbipError::Config("ablation needs at least one value".into()));
        }
        if self.seeds.is_empty() {
            return Err(PbipError::Config("ablation needs at least one seed".into()));
        }
        base.validate()?;
        for v in &self.values {
            self.apply(base, v, self.seeds[0])?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub value: String,
    pub seed: u64,
    pub miou: Option<f64>,
    pub fwiou: Option<f64>,
    pub biou: Option<f64>,
    pub dice: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub miou: Option<MeanStd>,
    pub fwiou: Option<MeanStd>,
    pub biou: Option<MeanStd>,
    pub dice: Option<MeanStd>,
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub param: AblationParam,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

fn summarise(values: impl Iterator<Item = Option<f64>>) -> Option<MeanStd> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| MeanStd::of(&v))
}

impl AblationTable {
    fn from_runs(param: AblationParam, values: &[String], runs: Vec<AblationRun>) -> Self {
        let rows = values
            .iter()
            .map(|v| {
                let cell: Vec<&AblationRun> = runs.iter().filter(|r| &r.value == v).collect();
                AblationRow {
                    value: v.clone(),
                    miou: summarise(cell.iter().map(|r| r.miou)),
                    fwiou: summarise(cell.iter().map(|r| r.fwiou)),
                    biou: summarise(cell.iter().map(|r| r.biou)),
                    dice: summarise(cell.iter().map(|r| r.dice)),
                    succeeded: cell.iter().filter(|r| r.error.is_none()).count(),
                    failed: cell.iter().filter(|r| r.error.is_some()).count(),
                }
            })
            .collect();
        Self { param, rows, runs }
    }

    pub fn row(&self, value: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.value == value)
    }

    /// Tab-separated `value mIoU FwIoU bIoU Dice ok failed`, scores as
    /// percentages with `±` spreads.
    pub fn to_tsv(&self) -> String {
        let fmt = |m: Option<MeanStd>| m.map_or("-".to_string(), |m| format!("{:.2}±{:.2}", 100.0 * m.mean, 100.0 * m.std));
        let mut out = format!("{}\tmIoU\tFwIoU\tbIoU\tDice\tok\tfailed\n", self.param);
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.value,
                fmt(r.miou),
                fmt(r.fwiou),
                fmt(r.biou),
                fmt(r.dice),
                r.succeeded,
                r.failed
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn cell_dir(out: &Path, value: &str, seed: u64) -> PathBuf {
    let safe: String = value
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    out.join(format!("{safe}_seed{seed}"))
}

fn run_cell(
    spec: &AblationSpec,
    base: &TrainConfig,
    manifest: &DatasetManifest,
    split: Split,
    out_dir: Option<&Path>,
    value: &str,
    seed: u64,
) -> AblationRun {
    let attempt = || -> Result<_> {
        let cfg = spec.apply(base, value, seed)?;
        let dir = out_dir.map(|d| cell_dir(d, value, seed));
        if let Some(d) = &dir {
            cfg.write_lock(d)?;
        }
        run_pipeline(manifest, &cfg, split, dir.as_deref())
    };
    match attempt() {
        Ok(res) => AblationRun {
            value: value.to_string(),
            seed,
            miou: Some(res.metrics.miou),
            fwiou: Some(res.metrics.fwiou),
            biou: res.metrics.mean_biou,
            dice: Some(res.metrics.mean_dice),
            final_loss: res.final_loss(),
            error: None,
        },
        Err(e) => {
            log::warn!("ablation run {}={value} seed {seed} failed: {e}", spec.param);
            AblationRun {
                value: value.to_string(),
                seed,
                miou: None,
                fwiou: None,
                biou: None,
                dice: None,
                final_loss: None,
                error: Some(e.to_string()),
            }
        }
    }
}

/// Runs the full pipeline for every value × seed and scores `split`.
/// Failed runs are recorded in the table rather than aborting the sweep.
/// `parallel > 1` runs that many cells concurrently, each in its own
/// output directory.
pub fn run_ablation(
    spec: &AblationSpec,
    base: &TrainConfig,
    manifest: &DatasetManifest,
    split: Split,
    out_dir: Option<&Path>,
    parallel: usize,
) -> Result<AblationTable> {
    spec.validate(base)?;
    let cells: Vec<(&String, u64)> = spec.values.iter().flat_map(|v| spec.seeds.iter().map(move |&s| (v, s))).collect();
    let run = |&(v, s): &(&String, u64)| run_cell(spec, base, manifest, split, out_dir, v, s);
    let runs: Vec<AblationRun> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| PbipError::Config(e.to_string()))?;
        pool.install(|| cells.par_iter().map(run).collect())
    } else {
        cells.iter().map(run).collect()
    };
    let table = AblationTable::from_runs(spec.param, &spec.values, runs);
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| PbipError::io(d, e))?;
        let tsv = d.join("ablation.tsv");
        std::fs::write(&tsv, table.to_tsv()).map_err(|e| PbipError::io(&tsv, e))?;
        let json = d.join("ablation.json");
        std::fs::write(&json, table.to_json()?).map_err(|e| PbipError::io(&json, e))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(param: AblationParam, values: &[&str]) -> AblationSpec {
        AblationSpec {
            param,
            values: values.iter().map(|s| s.to_string()).collect(),
            seeds: vec![0, 1],
        }
    }

    #[test]
    fn values_map_onto_config() {
        let base = TrainConfig::default();
        let s = spec(AblationParam::Theta2OverTheta1, &["0.25"]);
        assert_eq!(s.apply(&base, "0.25", 3).unwrap().theta2, 0.25);
        assert_eq!(s.apply(&base, "0.25", 3).unwrap().seed, 3);
        let s = spec(AblationParam::BetaOverAlpha, &["2"]);
        assert_eq!(s.apply(&base, "2", 0).unwrap().beta, 2.0);
        let s = spec(AblationParam::K, &["4"]);
        assert_eq!(s.apply(&base, "4", 0).unwrap().k, 4);
        let m = spec(AblationParam::Modules, &[]);
        let c = m.apply(&base, "AT+FGS", 0).unwrap();
        assert_eq!(c.mask_head, MaskHead::Conv1x1);
        assert!(c.adaptive_threshold);
        assert_eq!((c.theta1, c.theta2), (1.0, 0.0));
        let c = m.apply(&base, "SIM+AT+FGS+BGS", 0).unwrap();
        assert_eq!(c, TrainConfig { seed: 0, ..base.clone() });
        assert!(!m.apply(&base, "none", 0).unwrap().adaptive_threshold);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let base = TrainConfig::default();
        assert!(spec(AblationParam::K, &[]).validate(&base).is_err());
        assert!(spec(AblationParam::K, &["0"]).validate(&base).is_err());
        assert!(spec(AblationParam::K, &["two"]).validate(&base).is_err());
        assert!(spec(AblationParam::Modules, &["SIM+XYZ"]).validate(&base).is_err());
        assert!(spec(AblationParam::BetaOverAlpha, &["-1"]).validate(&base).is_err());
        assert!("nope".parse::<AblationParam>().is_err());
        assert_eq!("N_K".parse::<AblationParam>().unwrap(), AblationParam::NK);
    }

    #[test]
    fn table_groups_runs_and_counts_failures() {
        let run = |v: &str, m: Option<f64>| AblationRun {
            value: v.into(),
            seed: 0,
            miou: m,
            fwiou: m,
            biou: None,
            dice: m,
            final_loss: None,
            error: m.is_none().then(|| "boom".into()),
        };
        let values = vec!["1".to_string(), "2".to_string()];
        let t = AblationTable::from_runs(
            AblationParam::K,
            &values,
            vec![run("1", Some(0.5)), run("1", Some(0.7)), run("2", None)],
        );
        let r1 = t.row("1").unwrap();
        assert!((r1.miou.unwrap().mean - 0.6).abs() < 1e-12);
        assert_eq!((r1.succeeded, r1.failed), (2, 0));
        let r2 = t.row("2").unwrap();
        assert_eq!((r2.miou, r2.failed), (None, 1));
        let tsv = t.to_tsv();
        assert_eq!(tsv.lines().count(), 3);
        assert!(tsv.lines().nth(1).unwrap().starts_with("1\t60.00±14.14"));
    }
}
