//! Figure rendering: loss curves from `metrics.csv`, per-class IoU bars
//! from `eval.json`, and threshold-comparison bars from the pseudo-label
//! analysis. All figures are SVG.

use std::path::Path;

use plotters::coord::Shift;
use plotters::prelude::*;

use dssn_core::analysis::ClassAgg;
use dssn_core::trainer::METRICS_HEADER;
use dssn_core::{Error, Result};

/// One parsed `metrics.csv` line.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss_sup: f64,
    pub loss_cl_ls: f64,
    pub loss_cl_hs: f64,
    pub loss_w2s_l: f64,
    pub loss_w2s_h: f64,
    pub loss_total: f64,
    pub val_miou_teacher: Option<f64>,
    pub val_miou_student: Option<f64>,
    pub selected_px_l: f64,
    pub selected_px_h: f64,
}

fn field_f64(s: &str, line: usize) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::validation(format!("metrics line {line}: bad number {s:?}")))
}

fn field_opt(s: &str, line: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        field_f64(s, line).map(Some)
    }
}

/// Parses `metrics.csv` text, insisting on the exact expected header.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::validation("metrics file is empty"))?;
    if header != METRICS_HEADER {
        return Err(Error::validation(format!(
            "unexpected metrics header {header:?}"
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let n = i + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(Error::validation(format!(
                "metrics line {n}: expected 12 fields, found {}",
                f.len()
            )));
        }
        rows.push(MetricsRow {
            epoch: f[0]
                .parse()
                .map_err(|_| Error::validation(format!("metrics line {n}: bad epoch {:?}", f[0])))?,
            lr: field_f64(f[1], n)?,
            loss_sup: field_f64(f[2], n)?,
            loss_cl_ls: field_f64(f[3], n)?,
            loss_cl_hs: field_f64(f[4], n)?,
            loss_w2s_l: field_f64(f[5], n)?,
            loss_w2s_h: field_f64(f[6], n)?,
            loss_total: field_f64(f[7], n)?,
            val_miou_teacher: field_opt(f[8], n)?,
            val_miou_student: field_opt(f[9], n)?,
            selected_px_l: field_f64(f[10], n)?,
            selected_px_h: field_f64(f[11], n)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::validation("metrics file holds no rows"));
    }
    Ok(rows)
}

fn draw_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path.to_path_buf(), std::io::Error::other(e.to_string()))
}

/// Renders every loss column of `metrics.csv` as one line series.
pub fn loss_curves(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let series: [(&str, RGBColor, fn(&MetricsRow) -> f64); 6] = [
        ("total", BLUE, |r| r.loss_total),
        ("sup", RED, |r| r.loss_sup),
        ("cl low", GREEN, |r| r.loss_cl_ls),
        ("cl high", MAGENTA, |r| r.loss_cl_hs),
        ("w2s low", CYAN, |r| r.loss_w2s_l),
        ("w2s high", BLACK, |r| r.loss_w2s_h),
    ];
    let x_max = rows.last().map_or(1.0, |r| r.epoch as f64 + 1.0);
    let mut y_max = 0.0f64;
    for r in rows {
        for (_, _, f) in &series {
            y_max = y_max.max(f(r));
        }
    }
    let y_max = if y_max > 0.0 { y_max * 1.05 } else { 1.0 };

    let root = SVGBackend::new(path, (960, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training losses", ("sans-serif", 22))
        .margin(14)
        .x_label_area_size(42)
        .y_label_area_size(60)
        .build_cartesian_2d(0f64..x_max, 0f64..y_max)
        .map_err(|e| draw_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("loss")
        .draw()
        .map_err(|e| draw_err(path, e))?;
    for (name, color, f) in series {
        chart
            .draw_series(LineSeries::new(
                rows.iter().map(|r| (r.epoch as f64, f(r))),
                &color,
            ))
            .map_err(|e| draw_err(path, e))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::UpperRight)
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(|e| draw_err(path, e))?;
    root.present().map_err(|e| draw_err(path, e))
}

/// Renders one bar per class; classes without a defined IoU are skipped.
pub fn iou_bars(path: &Path, per_class: &[Option<f64>], miou: f64) -> Result<()> {
    let c = per_class.len().max(1);
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("per-class IoU (mean {miou:.4})"), ("sans-serif", 22))
        .margin(14)
        .x_label_area_size(42)
        .y_label_area_size(60)
        .build_cartesian_2d(0f64..c as f64, 0f64..1f64)
        .map_err(|e| draw_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("class")
        .y_desc("IoU")
        .draw()
        .map_err(|e| draw_err(path, e))?;
    chart
        .draw_series(per_class.iter().enumerate().filter_map(|(j, v)| {
            v.map(|iou| {
                Rectangle::new(
                    [(j as f64 + 0.15, 0.0), (j as f64 + 0.85, iou)],
                    BLUE.mix(0.6).filled(),
                )
            })
        }))
        .map_err(|e| draw_err(path, e))?;
    root.present().map_err(|e| draw_err(path, e))
}

fn rate_panel(
    area: &DrawingArea<SVGBackend, Shift>,
    path: &Path,
    title: &str,
    aggs: &[ClassAgg],
    pick: fn(&ClassAgg) -> (Option<f64>, Option<f64>),
) -> Result<()> {
    let c = aggs.len().max(1);
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(0f64..c as f64, 0f64..1f64)
        .map_err(|e| draw_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("class")
        .draw()
        .map_err(|e| draw_err(path, e))?;
    let mut bars = Vec::new();
    for (j, agg) in aggs.iter().enumerate() {
        let (adaptive, fixed) = pick(agg);
        if let Some(v) = adaptive {
            bars.push(Rectangle::new(
                [(j as f64 + 0.10, 0.0), (j as f64 + 0.48, v)],
                BLUE.mix(0.65).filled(),
            ));
        }
        if let Some(v) = fixed {
            bars.push(Rectangle::new(
                [(j as f64 + 0.52, 0.0), (j as f64 + 0.90, v)],
                RED.mix(0.65).filled(),
            ));
        }
    }
    chart.draw_series(bars).map_err(|e| draw_err(path, e))?;
    Ok(())
}

/// Recall and precision per class, adaptive thresholds next to the fixed
/// 0.96 cutoff.
pub fn threshold_bars(path: &Path, aggs: &[ClassAgg]) -> Result<()> {
    let root = SVGBackend::new(path, (760, 680)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(path, e))?;
    let (upper, lower) = root.split_vertically(340);
    rate_panel(
        &upper,
        path,
        "pseudo-label recall: adaptive (blue) vs fixed 0.96 (red)",
        aggs,
        |a| (a.recall_cplg, a.recall_fixed[1]),
    )?;
    rate_panel(
        &lower,
        path,
        "pseudo-label precision: adaptive (blue) vs fixed 0.96 (red)",
        aggs,
        |a| (a.precision_cplg, a.precision_fixed[1]),
    )?;
    root.present().map_err(|e| draw_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_csv() -> String {
        format!(
            "{METRICS_HEADER}\n0,0.01,1.5,0.2,0.1,0.3,0.4,1.6,,,12,7\n1,0.009,1.2,0.1,0.1,0.2,0.3,1.3,0.25,0.2,15,9\n"
        )
    }

    #[test]
    fn parses_written_metrics() {
        let rows = parse_metrics(&sample_csv()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].epoch, 0);
        assert_eq!(rows[0].val_miou_teacher, None);
        assert_eq!(rows[1].val_miou_teacher, Some(0.25));
        assert_eq!(rows[1].selected_px_h, 9.0);
    }

    #[test]
    fn rejects_malformed_metrics() {
        assert!(parse_metrics("").is_err());
        assert!(parse_metrics("epoch,lr\n").is_err());
        assert!(parse_metrics(&format!("{METRICS_HEADER}\n")).is_err());
        assert!(parse_metrics(&format!("{METRICS_HEADER}\n0,0.1,a,0,0,0,0,0,,,0,0\n")).is_err());
        assert!(parse_metrics(&format!("{METRICS_HEADER}\n0,0.1,0\n")).is_err());
    }

    #[test]
    fn renders_svg_files() {
        let dir = tempfile::tempdir().unwrap();
        let rows = parse_metrics(&sample_csv()).unwrap();
        let loss_path = dir.path().join("loss.svg");
        loss_curves(&loss_path, &rows).unwrap();
        let iou_path = dir.path().join("iou.svg");
        iou_bars(&iou_path, &[Some(0.8), None, Some(0.3)], 0.55).unwrap();
        let agg = ClassAgg {
            class: 0,
            gt_px: 10,
            pl_px: 8,
            sel_cplg: 6,
            sel_cplg_correct: 5,
            sel_fixed: [4, 3],
            sel_fixed_correct: [4, 3],
            recall_cplg: Some(0.5),
            precision_cplg: Some(5.0 / 6.0),
            recall_fixed: [Some(0.4), Some(0.3)],
            precision_fixed: [Some(1.0), Some(1.0)],
        };
        let thr_path = dir.path().join("thr.svg");
        threshold_bars(&thr_path, &[agg]).unwrap();
        for p in [loss_path, iou_path, thr_path] {
            let text = std::fs::read_to_string(&p).unwrap();
            assert!(text.starts_with("<svg"), "{} is not svg", p.display());
            assert!(text.len() > 500);
        }
    }
}
