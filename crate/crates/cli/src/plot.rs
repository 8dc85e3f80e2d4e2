//! SVG rendering of result rows; never called during computation.

use crate::failure::Failure;
use crate::table::read_columns;
use clap::Args;
use plotters::prelude::*;
use std::path::PathBuf;

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// CSV written by another subcommand.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub x: String,
    #[arg(long)]
    pub y: String,
    /// Column of standard errors drawn as ±1.96 bars.
    #[arg(long)]
    pub err: Option<String>,
    /// Log scale on both axes (non-positive points are skipped).
    #[arg(long)]
    pub log: bool,
    /// Output file; defaults to the input with an .svg extension.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

pub fn plot(a: &PlotArgs) -> Result<PathBuf, Failure> {
    let mut names = vec![a.x.as_str(), a.y.as_str()];
    if let Some(e) = &a.err {
        names.push(e);
    }
    let cols = read_columns(&a.input, &names)?;
    let n = cols[0].len();
    let band = |i: usize| a.err.as_ref().map_or(0.0, |_| 1.96 * cols[2][i]);
    let map = |v: f64| if a.log { v.ln() } else { v };
    let mut pts: Vec<(f64, f64, f64, f64)> = (0..n)
        .filter(|&i| !a.log || (cols[0][i] > 0.0 && cols[1][i] > 0.0))
        .map(|i| {
            let (y, e) = (cols[1][i], band(i));
            let lo = if a.log && y - e <= 0.0 { y } else { y - e };
            (map(cols[0][i]), map(y), map(lo), map(y + e))
        })
        .filter(|p| p.0.is_finite() && p.1.is_finite())
        .collect();
    if pts.is_empty() {
        return Err(Failure::config("nothing to plot"));
    }
    pts.sort_by(|p, q| p.0.total_cmp(&q.0));
    let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (y0, y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.2), b.max(p.3)));
    let pad = |lo: f64, hi: f64| {
        let w = (hi - lo).max(1e-12) * 0.05;
        (lo - w)..(hi + w)
    };

    let out = a.output.clone().unwrap_or_else(|| a.input.with_extension("svg"));
    let prefix = if a.log { "ln " } else { "" };
    {
        let root = SVGBackend::new(&out, (720, 480)).into_drawing_area();
        let draw = |e: DrawingAreaErrorKind<_>| Failure::invariant(format!("plot: {e}"));
        root.fill(&WHITE).map_err(draw)?;
        let mut chart = ChartBuilder::on(&root)
            .margin(16)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(pad(x0, x1), pad(y0, y1))
            .map_err(draw)?;
        chart.configure_mesh().x_desc(format!("{prefix}{}", a.x)).y_desc(format!("{prefix}{}", a.y)).draw().map_err(draw)?;
        chart.draw_series(LineSeries::new(pts.iter().map(|p| (p.0, p.1)), &BLUE)).map_err(draw)?;
        chart.draw_series(pts.iter().map(|p| Circle::new((p.0, p.1), 3, BLUE.filled()))).map_err(draw)?;
        if a.err.is_some() {
            chart.draw_series(pts.iter().map(|p| PathElement::new(vec![(p.0, p.2), (p.0, p.3)], BLACK))).map_err(draw)?;
        }
        root.present().map_err(draw)?;
    }
    Ok(out)
}
