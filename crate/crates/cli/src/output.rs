use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use loopsim::exposure::AucReport;
use loopsim::simloop::ExperimentResult;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().with_context(|| format!("writing {}", path.display()))
}

/// `dir/name.csv` → `dir/name_suffix.csv`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}_{suffix}{ext}"))
}

pub fn write_auc_csv(path: &Path, reports: &[(String, AucReport)]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "model,window,repetition,auc,ci95_halfwidth")?;
    for (model, report) in reports {
        for win in &report.windows {
            writeln!(w, "{model},{},{},{},", win.window + 1, win.repetition, win.auc)?;
        }
    }
    for (model, report) in reports {
        writeln!(w, "{model},mean,,{},{}", report.mean, report.ci95)?;
    }
    finish(w, path)
}

pub fn write_trace_csv(path: &Path, result: &ExperimentResult) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "variant,replica,iteration,epc,epd,gini,hit_rate,train_size")?;
    for r in &result.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.variant, r.replica, r.iteration, r.epc, r.epd, r.gini, r.hit_rate, r.train_size
        )?;
    }
    finish(w, path)
}

pub fn write_aggregate_csv(path: &Path, result: &ExperimentResult) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "variant,iteration,metric,mean,ci95_halfwidth")?;
    for a in &result.aggregates {
        writeln!(w, "{},{},{},{},{}", a.variant, a.iteration, a.metric, a.mean, a.ci95)?;
    }
    finish(w, path)
}

pub fn write_ttest_csv(path: &Path, result: &ExperimentResult) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "variant_a,variant_b,iteration,metric,t_statistic")?;
    for t in &result.t_tests {
        writeln!(w, "{},{},{},{},{}", t.variant_a, t.variant_b, t.iteration, t.metric, t.t)?;
    }
    finish(w, path)
}
