use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRAIN_LOG_HEADER: &str = "# dppo-train-log v1";
pub const TRAIN_LOG_COLUMNS: &str =
    "iteration,env_steps,success_rate,mean_return,actor_loss,value_loss,clip_fraction,approx_kl,lr";

/// One row of the training CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub env_steps: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub actor_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LogLine {
    Row(LogRow),
    /// Free-form event, written as a `# event ...` comment line.
    Event(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub iteration: usize,
    pub success_rate: f64,
    pub goal_rate: f64,
    pub mean_length: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub lines: Vec<LogLine>,
    pub evals: Vec<EvalRow>,
}

impl TrainLog {
    pub fn rows(&self) -> impl Iterator<Item = &LogRow> {
        self.lines.iter().filter_map(|l| match l {
            LogLine::Row(r) => Some(r),
            LogLine::Event(_) => None,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAIN_LOG_HEADER}\n{TRAIN_LOG_COLUMNS}\n");
        for l in &self.lines {
            match l {
                LogLine::Row(r) => {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{},{},{}",
                        r.iteration,
                        r.env_steps,
                        r.success_rate,
                        r.mean_return,
                        r.actor_loss,
                        r.value_loss,
                        r.clip_fraction,
                        r.approx_kl,
                        r.lr
                    );
                }
                LogLine::Event(e) => {
                    let _ = writeln!(s, "# event {e}");
                }
            }
        }
        s
    }

    pub fn eval_csv(&self) -> String {
        let mut s =
            String::from("# dppo-eval-log v1\niteration,success_rate,goal_rate,mean_length\n");
        for e in &self.evals {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                e.iteration, e.success_rate, e.goal_rate, e.mean_length
            );
        }
        s
    }
}

/// Parses the rows of a training CSV, skipping comments.
pub fn parse_train_csv(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some(h) if h == TRAIN_LOG_COLUMNS => {}
        _ => {
            return Err(Error::Malformed(
                "training log lacks the expected column header".into(),
            ))
        }
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 9 {
                return Err(Error::Malformed(format!("row {i} has {} fields", f.len())));
            }
            let num = |j: usize| -> Result<f64> {
                f[j].parse::<f64>()
                    .map_err(|_| Error::Malformed(format!("row {i} field {j}: {}", f[j])))
            };
            Ok(LogRow {
                iteration: num(0)? as usize,
                env_steps: num(1)? as usize,
                success_rate: num(2)?,
                mean_return: num(3)?,
                actor_loss: num(4)?,
                value_loss: num(5)?,
                clip_fraction: num(6)?,
                approx_kl: num(7)?,
                lr: num(8)?,
            })
        })
        .collect()
}

/// Parses an evaluation CSV written by [`TrainLog::eval_csv`].
pub fn parse_eval_csv(text: &str) -> Result<Vec<EvalRow>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .skip(1)
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<f64> = l
                .split(',')
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Malformed(format!("eval row {i}")))?;
            if f.len() != 4 {
                return Err(Error::Malformed(format!(
                    "eval row {i} has {} fields",
                    f.len()
                )));
            }
            Ok(EvalRow {
                iteration: f[0] as usize,
                success_rate: f[1],
                goal_rate: f[2],
                mean_length: f[3],
            })
        })
        .collect()
}
