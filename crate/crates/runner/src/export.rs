//! Plot data: per-method training curves and pass@k tables as CSV.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::{io_err, Result, RunError};

/// One point of a training curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesRow {
    pub step: u64,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PassRow {
    pub step: u64,
    pub k: u64,
    pub pass_at_k: f64,
}

fn parse_lines(path: &Path) -> Result<Vec<(usize, Value)>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|source| RunError::Json {
                    path: path.to_path_buf(),
                    line: i + 1,
                    source,
                })
        })
        .collect()
}

fn field<'a>(path: &Path, line: usize, v: &'a Value, name: &str) -> Result<&'a Value> {
    v.get(name).ok_or_else(|| RunError::Schema {
        path: path.to_path_buf(),
        line,
        field: name.to_string(),
    })
}

fn num(path: &Path, line: usize, v: &Value, name: &str) -> Result<f64> {
    field(path, line, v, name)?.as_f64().ok_or_else(|| RunError::Schema {
        path: path.to_path_buf(),
        line,
        field: format!("{name} (number)"),
    })
}

fn uint(path: &Path, line: usize, v: &Value, name: &str) -> Result<u64> {
    field(path, line, v, name)?.as_u64().ok_or_else(|| RunError::Schema {
        path: path.to_path_buf(),
        line,
        field: format!("{name} (non-negative integer)"),
    })
}

/// Training curve from a per-step metrics log.
pub fn series_from_log(path: &Path) -> Result<Vec<SeriesRow>> {
    parse_lines(path)?
        .into_iter()
        .map(|(line, v)| {
            Ok(SeriesRow {
                step: uint(path, line, &v, "step")?,
                mean_reward: num(path, line, &v, "mean_reward")?,
                reward_std: num(path, line, &v, "reward_std")?,
                entropy: num(path, line, &v, "text_entropy")?,
            })
        })
        .collect()
}

/// Every `(step, k, pass@k)` triple of an evaluation log.
pub fn pass_table_from_log(path: &Path) -> Result<Vec<PassRow>> {
    let mut rows = Vec::new();
    for (line, v) in parse_lines(path)? {
        let step = uint(path, line, &v, "step")?;
        let table = field(path, line, &v, "pass_at_k")?.as_array().ok_or_else(|| RunError::Schema {
            path: path.to_path_buf(),
            line,
            field: "pass_at_k (array)".into(),
        })?;
        for entry in table {
            let pair = entry.as_array().filter(|p| p.len() == 2).ok_or_else(|| RunError::Schema {
                path: path.to_path_buf(),
                line,
                field: "pass_at_k ([k, value] pairs)".into(),
            })?;
            match (pair[0].as_u64(), pair[1].as_f64()) {
                (Some(k), Some(p)) => rows.push(PassRow { step, k, pass_at_k: p }),
                _ => {
                    return Err(RunError::Schema {
                        path: path.to_path_buf(),
                        line,
                        field: "pass_at_k ([k, value] pairs)".into(),
                    })
                }
            }
        }
    }
    Ok(rows)
}

/// Writes `rows` as CSV with a header, even when `rows` is empty.
pub fn write_csv<T: Serialize, W: Write>(rows: &[T], header: &[&str], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| RunError::Csv(e.into()))?;
    Ok(())
}

pub const SERIES_HEADER: [&str; 4] = ["step", "mean_reward", "reward_std", "entropy"];
pub const PASS_HEADER: [&str; 3] = ["step", "k", "pass_at_k"];

fn method_of(stage: &str) -> Option<&'static str> {
    match stage {
        "rl" => Some("ladi"),
        "rl-baseline" => Some("ar"),
        _ => None,
    }
}

/// Writes `<method>_series.csv` and `<method>_passk.csv` for every training
/// stage found in `run_dir`. Returns the files written.
pub fn export_plot_data(run_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    for stage in ["rl", "rl-baseline"] {
        let dir = run_dir.join(stage);
        let method = method_of(stage).expect("training stage");
        let metrics = dir.join("metrics.jsonl");
        if metrics.exists() {
            let rows = series_from_log(&metrics)?;
            let path = out_dir.join(format!("{method}_series.csv"));
            let file = std::fs::File::create(&path).map_err(io_err(&path))?;
            write_csv(&rows, &SERIES_HEADER, file)?;
            written.push(path);
        }
        let evals = dir.join("eval.jsonl");
        if evals.exists() {
            let rows = pass_table_from_log(&evals)?;
            let path = out_dir.join(format!("{method}_passk.csv"));
            let file = std::fs::File::create(&path).map_err(io_err(&path))?;
            write_csv(&rows, &PASS_HEADER, file)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn empty_log_gives_header_only() {
        let tmp = tempfile::tempdir().unwrap();
        let p = write(tmp.path(), "m.jsonl", "");
        let rows = series_from_log(&p).unwrap();
        let mut out = Vec::new();
        write_csv(&rows, &SERIES_HEADER, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "step,mean_reward,reward_std,entropy\n");
    }

    #[test]
    fn missing_field_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        let p = write(
            tmp.path(),
            "m.jsonl",
            "{\"step\":0,\"mean_reward\":0.5,\"reward_std\":0.1,\"text_entropy\":1.0}\n{\"step\":1,\"mean_reward\":0.5,\"text_entropy\":1.0}\n",
        );
        match series_from_log(&p).unwrap_err() {
            RunError::Schema { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "reward_std");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn pass_table_rows() {
        let tmp = tempfile::tempdir().unwrap();
        let p = write(tmp.path(), "e.jsonl", "{\"step\":5,\"pass_at_k\":[[1,0.25],[2,0.5]]}\n");
        let rows = pass_table_from_log(&p).unwrap();
        assert_eq!(
            rows,
            vec![
                PassRow { step: 5, k: 1, pass_at_k: 0.25 },
                PassRow { step: 5, k: 2, pass_at_k: 0.5 },
            ]
        );
        let bad = write(tmp.path(), "b.jsonl", "{\"step\":5}\n");
        assert!(matches!(pass_table_from_log(&bad), Err(RunError::Schema { field, .. }) if field == "pass_at_k"));
    }
}
