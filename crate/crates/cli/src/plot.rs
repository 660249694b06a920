//! Static SVG plots of forecast bands over the observed series.

use plotters::prelude::*;

use cgp_core::data::RegionRecord;
use cgp_core::forecast::ForecastResult;
use cgp_core::{Error, Result};

const PALETTE: [RGBColor; 4] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
];

fn plot_error<E: std::fmt::Display>(e: E) -> Error {
    Error::Io(std::io::Error::other(format!("plot: {e}")))
}

fn band(f: &ForecastResult, lo: &[f64], hi: &[f64]) -> Vec<(f64, f64)> {
    let x = |i: usize| f.days[i] as f64;
    let mut pts: Vec<(f64, f64)> = (0..f.len()).map(|i| (x(i), hi[i])).collect();
    pts.extend((0..f.len()).rev().map(|i| (x(i), lo[i])));
    pts
}

/// Observed deaths in black; each series as a mean line with 50% and 90% bands.
pub fn forecast_svg(
    title: &str,
    region: &RegionRecord,
    series: &[(&str, &ForecastResult)],
) -> Result<String> {
    let last_day = series
        .iter()
        .filter_map(|(_, f)| f.days.last())
        .max()
        .copied()
        .unwrap_or(region.num_days());
    let y_max = series
        .iter()
        .flat_map(|(_, f)| f.q95.iter())
        .chain(region.fatalities.iter())
        .fold(1.0f64, |m, v| m.max(*v))
        * 1.05;

    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (900, 540)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_error)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 22))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(70)
            .build_cartesian_2d(1.0..last_day.max(2) as f64, 0.0..y_max)
            .map_err(plot_error)?;
        chart
            .configure_mesh()
            .x_desc("outbreak day")
            .y_desc("cumulative deaths")
            .draw()
            .map_err(plot_error)?;

        for (k, (name, f)) in series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            chart
                .draw_series(std::iter::once(Polygon::new(
                    band(f, &f.q5, &f.q95),
                    color.mix(0.15),
                )))
                .map_err(plot_error)?;
            chart
                .draw_series(std::iter::once(Polygon::new(
                    band(f, &f.q25, &f.q75),
                    color.mix(0.3),
                )))
                .map_err(plot_error)?;
            chart
                .draw_series(LineSeries::new(
                    f.days.iter().zip(&f.mean).map(|(d, m)| (*d as f64, *m)),
                    color.stroke_width(2),
                ))
                .map_err(plot_error)?
                .label(*name)
                .legend(move |(x, y)| {
                    PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2))
                });
        }
        chart
            .draw_series(
                region
                    .fatalities
                    .iter()
                    .enumerate()
                    .map(|(i, v)| Circle::new(((i + 1) as f64, *v), 2, BLACK.filled())),
            )
            .map_err(plot_error)?
            .label("observed")
            .legend(|(x, y)| Circle::new((x + 10, y), 3, BLACK.filled()));
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::UpperLeft)
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_error)?;
        root.present().map_err(plot_error)?;
    }
    Ok(svg)
}
