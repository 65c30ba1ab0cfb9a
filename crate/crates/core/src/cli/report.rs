//! Aggregation of fine-tuning runs found under a directory tree.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dppo::parse_eval_csv;
use crate::error::{Error, Result};

pub const RUN_FILE: &str = "run.json";

/// Identity of one fine-tuning run, written next to its logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub method: String,
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    /// Run directory relative to the root with `seed_<n>` components removed.
    pub name: String,
    pub method: String,
    pub variant: String,
    pub seeds: Vec<u64>,
    pub final_success_mean: f64,
    pub final_success_std: f64,
    pub final_success: Vec<f64>,
    pub curve: Vec<CurvePoint>,
    pub config_hashes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ExperimentReport {
    pub groups: Vec<GroupReport>,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    if dir.join(RUN_FILE).is_file() {
        out.push(dir.to_path_buf());
    }
    for p in entries {
        if p.is_dir() {
            find_runs(&p, out)?;
        }
    }
    Ok(())
}

fn group_name(root: &Path, run: &Path) -> String {
    let rel = run.strip_prefix(root).unwrap_or(run);
    let parts: Vec<String> = rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .filter(|c| !(c.starts_with("seed_") && c[5..].parse::<u64>().is_ok()))
        .collect();
    parts.join("/")
}

struct Run {
    info: RunInfo,
    evals: Vec<(usize, f64)>,
}

impl ExperimentReport {
    /// Scans `root` for run directories. Directory order is sorted, so the
    /// result depends only on file contents and names.
    pub fn collect(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::MissingFile(root.to_path_buf()));
        }
        let mut dirs = Vec::new();
        find_runs(root, &mut dirs)?;
        let mut groups: BTreeMap<String, Vec<Run>> = BTreeMap::new();
        for d in dirs {
            let info: RunInfo = serde_json::from_str(&fs::read_to_string(d.join(RUN_FILE))?)
                .map_err(|e| Error::Malformed(format!("{}: {e}", d.join(RUN_FILE).display())))?;
            let eval_path = d.join("eval.csv");
            if !eval_path.is_file() {
                return Err(Error::MissingFile(eval_path));
            }
            let evals = parse_eval_csv(&fs::read_to_string(&eval_path)?)?
                .into_iter()
                .map(|e| (e.iteration, e.success_rate))
                .collect();
            groups
                .entry(group_name(root, &d))
                .or_default()
                .push(Run { info, evals });
        }
        let mut report = ExperimentReport::default();
        for (name, mut runs) in groups {
            runs.sort_by_key(|r| r.info.seed);
            let finals: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.evals.last().map(|e| e.1))
                .collect();
            let (m, s) = mean_std(&finals);
            let mut by_iter: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for r in &runs {
                for &(it, v) in &r.evals {
                    by_iter.entry(it).or_default().push(v);
                }
            }
            let curve = by_iter
                .into_iter()
                .map(|(iteration, v)| {
                    let (mean, std) = mean_std(&v);
                    CurvePoint {
                        iteration,
                        mean,
                        std,
                        n: v.len(),
                    }
                })
                .collect();
            report.groups.push(GroupReport {
                name,
                method: runs[0].info.method.clone(),
                variant: runs[0].info.variant.clone(),
                seeds: runs.iter().map(|r| r.info.seed).collect(),
                final_success_mean: m,
                final_success_std: s,
                final_success: finals,
                curve,
                config_hashes: runs.iter().map(|r| r.info.config_hash.clone()).collect(),
            });
        }
        Ok(report)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| run | method | variant | seeds | final success |\n|---|---|---|---|---|\n",
        );
        for g in &self.groups {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.3} ± {:.3} |",
                g.name,
                g.method,
                g.variant,
                g.seeds.len(),
                g.final_success_mean,
                g.final_success_std
            );
        }
        s
    }
}
