//! PNG line plots. The bitmap backend is built without font support, so each
//! image has a JSON sidecar naming its series and carrying the plotted data.

use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Serialize;

use super::{AblationReport, EvalReport};
use crate::container::write_atomic;
use crate::{Error, Result};

#[derive(Debug, Serialize)]
struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

#[derive(Debug, Serialize)]
struct PlotData<'a> {
    title: &'a str,
    x: &'a str,
    y: &'a str,
    series: &'a [Series],
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Numeric(format!("plot: {e}"))
}

fn draw(path: &Path, series: &[Series]) -> Result<()> {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        if !(x.is_finite() && y.is_finite()) {
            return Err(plot_err("non-finite point"));
        }
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return Err(plot_err("no data"));
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    // The backend picks the encoder from the extension, so the temporary keeps `.png`.
    let tmp = path.with_extension("tmp.png");
    {
        let root = BitMapBackend::new(&tmp, (640, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .margin(24)
            .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
            .map_err(plot_err)?;
        let axes = [(x0, y0 - pad), (x0, y1 + pad), (x0, y0 - pad), (x1, y0 - pad)];
        chart.draw_series(LineSeries::new(axes[..2].to_vec(), BLACK)).map_err(plot_err)?;
        chart.draw_series(LineSeries::new(axes[2..].to_vec(), BLACK)).map_err(plot_err)?;
        for (i, s) in series.iter().enumerate() {
            let color = Palette99::pick(i).stroke_width(2);
            chart.draw_series(LineSeries::new(s.points.clone(), color)).map_err(plot_err)?;
            chart
                .draw_series(s.points.iter().map(|&p| Circle::new(p, 3, Palette99::pick(i).filled())))
                .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn emit(dir: &Path, stem: &str, title: &str, x: &str, y: &str, series: &[Series]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let png = dir.join(format!("{stem}.png"));
    let json = dir.join(format!("{stem}.json"));
    write_atomic(&json, &serde_json::to_vec_pretty(&PlotData { title, x, y, series })?)?;
    draw(&png, series)?;
    Ok(vec![png, json])
}

/// Loss-curve plot (one series per defense with tracked adaptive cells) and an accuracy-per-attack plot.
pub fn emit_plots(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let curves: Vec<Series> = report
        .cells
        .iter()
        .filter_map(|c| {
            c.mean_loss_curve().map(|v| Series {
                name: format!("{}/{}", c.defense, c.attack),
                points: v.into_iter().enumerate().map(|(i, l)| (i as f64, l)).collect(),
            })
        })
        .collect();
    if !curves.is_empty() {
        out.extend(emit(dir, "loss_curves", "mean adaptive-attack loss", "iteration", "loss", &curves)?);
    }
    let acc: Vec<Series> = report
        .grid
        .iter()
        .map(|r| Series {
            name: r.defense.clone(),
            points: r.accuracies.iter().enumerate().map(|(i, &a)| (i as f64, a)).collect(),
        })
        .collect();
    if !acc.is_empty() {
        out.extend(emit(dir, "accuracy", "accuracy per attack column", "attack index", "accuracy", &acc)?);
    }
    Ok(out)
}

/// One series per attack column, x = row index of the sweep.
pub fn emit_ablation_plot(report: &AblationReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let stem = serde_json::to_value(report.knob)?.as_str().unwrap_or("ablation").to_string();
    let series: Vec<Series> = report
        .attacks
        .iter()
        .enumerate()
        .map(|(j, a)| Series {
            name: a.clone(),
            points: report.rows.iter().enumerate().map(|(i, r)| (i as f64, r.accuracies[j])).collect(),
        })
        .collect();
    emit(dir, &format!("ablation_{stem}"), &stem, "setting index", "accuracy", &series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_png_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let s = vec![
            Series { name: "a".into(), points: vec![(0.0, 1.0), (1.0, 2.0), (2.0, 2.5)] },
            Series { name: "b".into(), points: vec![(0.0, 1.0), (1.0, 1.1), (2.0, 1.0)] },
        ];
        let files = emit(dir.path(), "t", "t", "x", "y", &s).unwrap();
        let png = std::fs::read(&files[0]).unwrap();
        assert_eq!(&png[1..4], b"PNG");
        let side: serde_json::Value = serde_json::from_slice(&std::fs::read(&files[1]).unwrap()).unwrap();
        assert_eq!(side["series"].as_array().unwrap().len(), 2);
        assert!(!dir.path().join("t.tmp.png").exists());
        let bad = vec![Series { name: "n".into(), points: vec![(0.0, f64::NAN)] }];
        assert!(emit(dir.path(), "bad", "t", "x", "y", &bad).is_err());
    }
}
