use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::recipe::{open_existing, Run, Stage};
use crate::error::{Error, Result};

/// One value in the report, or the reason it is absent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum Cell {
    Value(f64),
    /// The stage that would produce it has not run.
    Missing,
    /// Not defined for this row.
    NotApplicable,
}

impl Cell {
    fn render(&self, digits: usize) -> String {
        match self {
            Cell::Value(v) => format!("{v:.digits$}"),
            Cell::Missing => "missing".into(),
            Cell::NotApplicable => "n/a".into(),
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Cell::Value(v) => Some(*v),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub name: String,
    pub reward: Cell,
    pub reward_se: Cell,
    pub kl: Cell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_name: String,
    pub config_hash: String,
    pub reward_kind: String,
    pub rows: Vec<Row>,
}

impl Report {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "run {} (config_hash={})", self.config_name, self.config_hash);
        let _ = writeln!(out, "reward: {}", self.reward_kind);
        let _ = writeln!(out, "{:<28} {:>12} {:>12} {:>12}", "model", "reward", "reward_se", "kl");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<28} {:>12} {:>12} {:>12}",
                r.name,
                r.reward.render(5),
                r.reward_se.render(5),
                r.kl.render(6)
            );
        }
        out
    }
}

fn missing_row(name: String) -> Row {
    Row {
        name,
        reward: Cell::Missing,
        reward_se: Cell::Missing,
        kl: Cell::Missing,
    }
}

fn f(v: &serde_json::Value) -> Cell {
    v.as_f64().map_or(Cell::Missing, Cell::Value)
}

/// Collects a run's stage records into a table with rows Base, Bo-K,
/// RAFT iterations and DPO, in that order. Rows appear once their stage
/// has produced anything; cells of stages that have not run are marked
/// missing.
pub fn build_report(run: &Run) -> Result<Report> {
    let eval = run.record(Stage::Eval)?;
    let evaluated = |name: &str| -> Option<Row> {
        let models = eval.as_ref()?.summary["models"].as_array()?;
        let m = models.iter().find(|m| m["name"] == name)?;
        Some(Row {
            name: String::new(),
            reward: f(&m["reward"]["mean"]),
            reward_se: f(&m["reward"]["std_err"]),
            kl: f(&m["kl"]),
        })
    };
    let named = |row: Option<Row>, name: String| -> Row {
        let mut r = row.unwrap_or_else(|| missing_row(String::new()));
        r.name = name;
        r
    };

    let mut rows = Vec::new();
    if run.record(Stage::Pretrain)?.is_some() {
        rows.push(named(evaluated("base"), "Base".into()));
    }
    if let Some(bok) = run.record(Stage::Bok)? {
        for r in bok.summary["results"].as_array().into_iter().flatten() {
            rows.push(Row {
                name: format!("Bo{}", r["k"]),
                reward: f(&r["reward"]["mean"]),
                reward_se: f(&r["reward"]["std_err"]),
                kl: Cell::NotApplicable,
            });
        }
    }
    if let Some(raft) = run.record(Stage::Raft)? {
        let iters = raft.summary["iterations"].as_u64().unwrap_or(0);
        for i in 1..=iters {
            rows.push(named(evaluated(&format!("raft-{i}")), format!("RAFT iter {i}")));
        }
    }
    if let Some(dpo) = run.record(Stage::Dpo)? {
        let name = format!(
            "DPO (beta={}, step={})",
            dpo.summary["beta"], dpo.summary["selected_step"]
        );
        rows.push(named(evaluated("dpo"), name));
    }
    Ok(Report {
        config_name: run.cfg.name.clone(),
        config_hash: run.config_hash().to_string(),
        reward_kind: run.cfg.reward.name().into(),
        rows,
    })
}

/// Writes `table.txt` and `summary.json` into the run directory.
pub fn report(dir: &Path) -> Result<Report> {
    let run = open_existing(dir)?;
    if run.record(Stage::Pretrain)?.is_none() {
        return Err(Error::MissingArtifact {
            path: run.record_path(Stage::Pretrain),
            stage: Stage::Pretrain.name().into(),
        });
    }
    let rep = build_report(&run)?;
    fs::write(dir.join("table.txt"), rep.render_text())?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&rep)? + "\n")?;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_render_and_round_trip() {
        let rep = Report {
            config_name: "x".into(),
            config_hash: "0123456789abcdef".into(),
            reward_kind: "variance".into(),
            rows: vec![
                Row {
                    name: "Base".into(),
                    reward: Cell::Value(0.5),
                    reward_se: Cell::Value(0.01),
                    kl: Cell::Value(0.0),
                },
                Row {
                    name: "Bo16".into(),
                    reward: Cell::Value(0.9),
                    reward_se: Cell::Missing,
                    kl: Cell::NotApplicable,
                },
            ],
        };
        let text = rep.render_text();
        assert!(text.contains("missing") && text.contains("n/a") && text.contains("0.50000"));
        let back: Report = serde_json::from_str(&serde_json::to_string(&rep).unwrap()).unwrap();
        assert_eq!(back, rep);
        assert_eq!(back.render_text(), text);
    }
}
