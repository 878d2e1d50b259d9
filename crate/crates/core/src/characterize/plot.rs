use std::path::Path;

use plotters::prelude::*;

use super::PolarizationCurve;
use crate::error::{Error, Result};

/// Measured (solid, filled markers) against predicted (hollow markers)
/// curves, one colour per checkpoint. Pairs are `(measured, predicted)`.
pub fn plot_curves_svg(path: &Path, pairs: &[(PolarizationCurve, PolarizationCurve)], title: &str) -> Result<()> {
    let err = |e: &dyn std::fmt::Display| Error::format(path, e.to_string());
    let all_v = pairs.iter().flat_map(|(m, p)| m.v.iter().chain(&p.v));
    let (lo, hi) = all_v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let j_max = pairs.iter().flat_map(|(m, _)| m.j.last()).fold(0.0f64, |a, &b| a.max(b));
    if pairs.is_empty() || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Data("nothing to plot".into()));
    }
    let pad = 0.05 * (hi - lo).max(1e-3);

    let root = SVGBackend::new(path, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..j_max * 1.05, (lo - pad)..(hi + pad))
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("current density / A cm^-2")
        .y_desc("cell voltage / V")
        .draw()
        .map_err(|e| err(&e))?;

    for (i, (m, p)) in pairs.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts = |c: &PolarizationCurve| c.j.iter().copied().zip(c.v.iter().copied()).collect::<Vec<_>>();
        chart
            .draw_series(LineSeries::new(pts(m), color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(format!("cycle {} measured", m.cycle_index))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts(m).into_iter().map(|q| Circle::new(q, 3, color.filled())))
            .map_err(|e| err(&e))?;
        chart
            .draw_series(LineSeries::new(pts(p), color.stroke_width(1)))
            .map_err(|e| err(&e))?;
        chart
            .draw_series(pts(p).into_iter().map(|q| Circle::new(q, 4, color.stroke_width(1))))
            .map_err(|e| err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperLeft)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))
}
