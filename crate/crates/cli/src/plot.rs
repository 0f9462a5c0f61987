//! Training curves from `train_log.csv`. Only the CSV is read, so plots can be made anywhere.
//!
//! Axis labels need a TrueType font; one is looked up at `$SOILSEG_FONT` or in the usual system
//! locations. Without one the charts are drawn unlabeled.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use serde_json::json;
use soilseg::training::{read_csv_log, CsvRow};

use crate::manifest::RunManifest;
use crate::{CliError, PlotArgs};

pub const LOSS_PNG: &str = "loss.png";
pub const LR_PNG: &str = "lr.png";
pub const MAP_PNG: &str = "map50.png";

const SIZE: (u32, u32) = (800, 500);

const FONT_CANDIDATES: [&str; 6] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/System/Library/Fonts/Supplemental/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Registers a font with plotters once per process; false when none could be loaded.
fn fonts_available() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        let candidates: Vec<PathBuf> = match std::env::var_os("SOILSEG_FONT") {
            Some(p) => vec![PathBuf::from(p)],
            None => FONT_CANDIDATES.iter().map(PathBuf::from).collect(),
        };
        for path in candidates {
            let Ok(bytes) = std::fs::read(&path) else { continue };
            let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
            if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                return true;
            }
        }
        log::warn!("no TrueType font found; plots are drawn without labels (set SOILSEG_FONT)");
        false
    })
}

struct Series<'a> {
    name: &'a str,
    points: Vec<(f64, f64)>,
    color: RGBColor,
}

fn padded(lo: f64, hi: f64, log: bool) -> (f64, f64) {
    if log {
        if lo == hi {
            (lo / 2.0, hi * 2.0)
        } else {
            (lo / 1.2, hi * 1.2)
        }
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        let m = (hi - lo) * 0.05;
        (lo - m, hi + m)
    }
}

fn draw(path: &Path, title: &str, y_desc: &str, series: &[Series], log_y: bool) -> Result<(), CliError> {
    let fail = |e: String| CliError::Env(format!("cannot draw {}: {e}", path.display()));
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&(f64, f64)) -> f64| all.iter().map(pick).fold(init, f);
    let (x0, x1) = padded(fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0), false);
    let (y0, y1) = padded(fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1), log_y);
    let labels = fonts_available();

    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fail(e.to_string()))?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(15);
    if labels {
        builder.caption(title, ("sans-serif", 22)).x_label_area_size(40).y_label_area_size(70);
    }
    macro_rules! render {
        ($chart:expr) => {{
            let mut chart = $chart.map_err(|e| fail(e.to_string()))?;
            let mut mesh = chart.configure_mesh();
            if labels {
                mesh.x_desc("epoch").y_desc(y_desc);
            } else {
                mesh.x_labels(0).y_labels(0);
            }
            mesh.draw().map_err(|e| fail(e.to_string()))?;
            for s in series {
                let color = s.color;
                let line = chart
                    .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
                    .map_err(|e| fail(e.to_string()))?;
                if labels {
                    line.label(s.name)
                        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
                }
                chart
                    .draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))
                    .map_err(|e| fail(e.to_string()))?;
            }
            if labels && series.len() > 1 {
                chart
                    .configure_series_labels()
                    .background_style(WHITE.mix(0.8))
                    .border_style(BLACK)
                    .draw()
                    .map_err(|e| fail(e.to_string()))?;
            }
        }};
    }
    if log_y {
        render!(builder.build_cartesian_2d(x0..x1, (y0..y1).log_scale()));
    } else {
        render!(builder.build_cartesian_2d(x0..x1, y0..y1));
    }
    root.present().map_err(|e| fail(e.to_string()))
}

fn column(rows: &[CsvRow], f: impl Fn(&CsvRow) -> Option<f64>) -> Vec<(f64, f64)> {
    rows.iter().filter_map(|r| f(r).map(|v| (r.epoch as f64, v))).collect()
}

/// Writes the plots into `out_dir` and returns the files written.
pub fn plot_curves(log_csv: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rows = read_csv_log(log_csv).map_err(|e| CliError::Env(format!("malformed training log: {e}")))?;
    if rows.is_empty() {
        return Err(CliError::Env(format!("{} has no data rows", log_csv.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Env(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut written = Vec::new();

    let mut losses = vec![Series {
        name: "total",
        points: column(&rows, |r| Some(r.loss_total)),
        color: BLACK,
    }];
    for (name, color, f) in [
        ("rpn", BLUE, (|r: &CsvRow| r.loss_rpn) as fn(&CsvRow) -> Option<f64>),
        ("box head", RED, |r: &CsvRow| r.loss_frcnn),
        ("mask head", GREEN, |r: &CsvRow| r.loss_mask),
    ] {
        let points = column(&rows, f);
        if !points.is_empty() {
            losses.push(Series { name, points, color });
        }
    }
    let p = out_dir.join(LOSS_PNG);
    draw(&p, "Training loss", "loss", &losses, false)?;
    written.push(p);

    let lr = [Series {
        name: "lr",
        points: column(&rows, |r| Some(r.lr)),
        color: BLUE,
    }];
    let positive = lr[0].points.iter().all(|p| p.1 > 0.0);
    let p = out_dir.join(LR_PNG);
    draw(&p, "Learning rate", "lr", &lr, positive)?;
    written.push(p);

    let map = column(&rows, |r| r.eval_map50);
    if !rows[0].has_eval_column {
        log::warn!("no eval_map50 column in {}; skipping the mAP plot", log_csv.display());
    } else if map.is_empty() {
        log::warn!("eval_map50 is empty in every row; skipping the mAP plot");
    } else {
        let p = out_dir.join(MAP_PNG);
        let s = [Series {
            name: "mAP@0.5",
            points: map,
            color: RED,
        }];
        draw(&p, "Segmentation mAP@0.5", "mAP@0.5", &s, false)?;
        written.push(p);
    }
    Ok(written)
}

pub(crate) fn cmd_plot(a: &PlotArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("plot", json!({}), &a.out).input("log", &a.log);
    manifest.write()?;
    let written = plot_curves(&a.log, &a.out)?;
    for p in &written {
        println!("{}", p.display());
    }
    manifest.finish(json!({ "plots": written }))
}
