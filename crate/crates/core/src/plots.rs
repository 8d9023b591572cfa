//! Figure emission. Each figure family becomes a self-contained Python
//! script (csv + matplotlib only) that reads the metrics CSV sitting next
//! to the plots directory, so the scripts stay valid when results are
//! regenerated.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const FIGURE_FAMILIES: [&str; 6] = [
    "pd_vs_snr_n1",
    "pd_vs_snr_n2",
    "ppv_vs_snr_n1",
    "ppv_vs_snr_n2",
    "pd_vs_n_at_20db",
    "pm_vs_n_at_20db",
];

struct Figure {
    name: &'static str,
    title: &'static str,
    y_col: &'static str,
    y_label: &'static str,
    /// `snr` -> x axis is SNR at fixed n; `n` -> x axis is n at fixed SNR.
    x_axis: &'static str,
    fixed: f64,
}

fn figures() -> Vec<Figure> {
    vec![
        Figure {
            name: "pd_vs_snr_n1",
            title: "Detection probability vs SNR, 1 active device",
            y_col: "p_d",
            y_label: "P_D",
            x_axis: "snr",
            fixed: 1.0,
        },
        Figure {
            name: "pd_vs_snr_n2",
            title: "Detection probability vs SNR, 2 active devices",
            y_col: "p_d",
            y_label: "P_D",
            x_axis: "snr",
            fixed: 2.0,
        },
        Figure {
            name: "ppv_vs_snr_n1",
            title: "Precision vs SNR, 1 active device",
            y_col: "ppv",
            y_label: "PPV",
            x_axis: "snr",
            fixed: 1.0,
        },
        Figure {
            name: "ppv_vs_snr_n2",
            title: "Precision vs SNR, 2 active devices",
            y_col: "ppv",
            y_label: "PPV",
            x_axis: "snr",
            fixed: 2.0,
        },
        Figure {
            name: "pd_vs_n_at_20db",
            title: "Detection probability vs active devices, SNR = 20 dB",
            y_col: "p_d",
            y_label: "P_D",
            x_axis: "n",
            fixed: 20.0,
        },
        Figure {
            name: "pm_vs_n_at_20db",
            title: "Missed-detection probability vs active devices, SNR = 20 dB",
            y_col: "p_m",
            y_label: "P_M",
            x_axis: "n",
            fixed: 20.0,
        },
    ]
}

/// Minimal row view of the metrics CSV, used only to detect empty or
/// incomplete inputs before scripts are written.
struct Row {
    n_active: f64,
    snr_db: f64,
}

fn read_rows(metrics_csv: &Path) -> Result<Vec<Row>> {
    let origin = metrics_csv.display().to_string();
    let text = std::fs::read_to_string(metrics_csv)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format { path: origin.clone(), msg: "empty metrics CSV".into() })?;
    let cols: Vec<&str> = header.split(',').collect();
    let idx = |name: &str| -> Result<usize> {
        cols.iter().position(|c| *c == name).ok_or_else(|| Error::Format {
            path: origin.clone(),
            msg: format!("metrics CSV missing column '{name}'"),
        })
    };
    let (i_n, i_snr) = (idx("n_active")?, idx("snr_db")?);
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| -> Result<f64> {
            f.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format {
                    path: origin.clone(),
                    msg: format!("bad row: {line}"),
                })
        };
        rows.push(Row { n_active: parse(i_n)?, snr_db: parse(i_snr)? });
    }
    if rows.is_empty() {
        return Err(Error::Format { path: origin, msg: "metrics CSV has no data rows".into() });
    }
    Ok(rows)
}

fn script_body(fig: &Figure, metrics_rel: &str) -> String {
    format!(
        r#"#!/usr/bin/env python3
"""{title}.

Self-contained: reads the metrics CSV produced by the evaluation stage and
writes {name}.png next to this script.
"""
import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))
METRICS = os.path.join(HERE, {metrics_rel:?})

X_AXIS = {x_axis:?}  # "snr" or "n"
FIXED = {fixed}
Y_COL = {y_col:?}

series = {{}}
with open(METRICS, newline="") as fh:
    for row in csv.DictReader(fh):
        if row["mode"] != "known_n":
            continue
        if not row[Y_COL]:
            continue
        if X_AXIS == "snr":
            if float(row["n_active"]) != FIXED:
                continue
            x = float(row["snr_db"])
        else:
            if float(row["snr_db"]) != FIXED:
                continue
            x = float(row["n_active"])
        key = "{{}} (OR {{:g}}%)".format(row["detector"], float(row["or_percent"]))
        series.setdefault(key, []).append((x, float(row[Y_COL])))

if not series:
    raise SystemExit("no matching rows in " + METRICS)

plt.figure(figsize=(7, 5))
for key in sorted(series):
    pts = sorted(series[key])
    plt.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=key)
plt.xlabel("SNR (dB)" if X_AXIS == "snr" else "active devices n")
plt.ylabel({y_label:?})
plt.title({title:?})
plt.grid(True, alpha=0.3)
plt.legend(fontsize=8)
plt.tight_layout()
out = os.path.join(HERE, {name:?} + ".png")
plt.savefig(out, dpi=150)
print("wrote", out)
"#,
        title = fig.title,
        name = fig.name,
        metrics_rel = metrics_rel,
        x_axis = fig.x_axis,
        fixed = fig.fixed,
        y_col = fig.y_col,
        y_label = fig.y_label,
    )
}

/// Writes one Python script per figure family into `out_dir`. Errors on an
/// empty/headerless CSV; warns (stderr) about figure families whose cells
/// are absent from the CSV, but still emits their scripts.
pub fn emit_plots(metrics_csv: &Path, out_dir: &Path) -> Result<()> {
    let rows = read_rows(metrics_csv)?;
    std::fs::create_dir_all(out_dir)?;
    let metrics_rel = {
        // scripts live in out_dir; point them at the CSV relative to it
        let parent = out_dir.parent().unwrap_or(Path::new("."));
        if metrics_csv.parent() == Some(parent) {
            format!(
                "../{}",
                metrics_csv.file_name().unwrap_or_default().to_string_lossy()
            )
        } else {
            metrics_csv.display().to_string()
        }
    };
    let mut missing = Vec::new();
    for fig in figures() {
        let covered = rows.iter().any(|r| match fig.x_axis {
            "snr" => r.n_active == fig.fixed,
            _ => r.snr_db == fig.fixed,
        });
        if !covered {
            missing.push(fig.name);
        }
        let path = out_dir.join(format!("{}.py", fig.name));
        let mut f = std::fs::File::create(&path)?;
        f.write_all(script_body(&fig, &metrics_rel).as_bytes())?;
    }
    if !missing.is_empty() {
        eprintln!(
            "warning: metrics CSV has no cells for figure families: {}",
            missing.join(", ")
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str =
        "detector,or_percent,n_active,snr_db,mode,snapshots,tp,fp,fn,tn,p_d,p_m,ppv,f1,auc";

    #[test]
    fn emits_all_figure_scripts() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("metrics.csv");
        let mut text = String::from(HEADER);
        for snr in [0.0, 20.0] {
            for n in [1, 2] {
                text.push_str(&format!(
                    "\ndnn,200,{n},{snr},known_n,100,90,10,10,90,0.9,0.1,0.9,0.9,0.95"
                ));
            }
        }
        std::fs::write(&csv, text).unwrap();
        let out = dir.path().join("plots");
        emit_plots(&csv, &out).unwrap();
        for f in FIGURE_FAMILIES {
            let p = out.join(format!("{f}.py"));
            assert!(p.exists(), "missing {f}.py");
            let body = std::fs::read_to_string(p).unwrap();
            assert!(body.contains("matplotlib"));
            assert!(body.contains("../metrics.csv"));
        }
    }

    #[test]
    fn empty_csv_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("metrics.csv");
        std::fs::write(&csv, format!("{HEADER}\n")).unwrap();
        assert!(emit_plots(&csv, &dir.path().join("plots")).is_err());
    }

    #[test]
    fn missing_cells_still_emit_scripts() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("metrics.csv");
        // only n = 1 at SNR 0: most figure families have no coverage
        let text = format!("{HEADER}\ndnn,200,1,0,known_n,100,90,10,10,90,0.9,0.1,0.9,0.9,0.95");
        std::fs::write(&csv, text).unwrap();
        let out = dir.path().join("plots");
        emit_plots(&csv, &out).unwrap();
        assert_eq!(out.read_dir().unwrap().count(), FIGURE_FAMILIES.len());
    }
}
