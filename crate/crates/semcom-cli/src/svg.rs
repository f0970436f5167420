//! Dependency-free SVG line charts: test accuracy versus communication
//! round, one polyline per method (median over seeds at each snapshot).
//! When a record stream mixes several SNR levels or label fractions, each
//! combination gets its own series so curves stay comparable.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use semcom::channel::Snr;
use semcom::error::{Error, Result};
use semcom::pipeline::MetricRecord;

/// Chart geometry and labeling.
#[derive(Debug, Clone)]
pub struct SvgStyle {
    pub width: f64,
    pub height: f64,
    pub title: String,
}

impl Default for SvgStyle {
    fn default() -> SvgStyle {
        SvgStyle {
            width: 860.0,
            height: 520.0,
            title: "Test accuracy vs. communication rounds".to_string(),
        }
    }
}

const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 200.0;
const MARGIN_TOP: f64 = 48.0;
const MARGIN_BOTTOM: f64 = 56.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn snr_label(snr: Snr) -> String {
    match snr {
        Snr::Db(v) => format!("{v}dB"),
        Snr::Noiseless => "noiseless".to_string(),
    }
}

/// Median of a non-empty finite sample; even counts average the middle pair.
fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("accuracy is finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Renders the chart as a standalone SVG document.
pub fn render_svg(records: &[MetricRecord], style: &SvgStyle) -> Result<String> {
    if records.is_empty() {
        return Err(Error::contract("no records to plot".to_string()));
    }
    // Key series by (method, snr text, label-fraction text); fold seeds into
    // per-round value lists.
    let mut snrs: Vec<String> = Vec::new();
    let mut lfs: Vec<String> = Vec::new();
    type SeriesKey = (String, String, String);
    let mut series: BTreeMap<SeriesKey, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in records {
        let snr = snr_label(r.snr_db);
        let lf = format!("{}", r.label_fraction);
        if !snrs.contains(&snr) {
            snrs.push(snr.clone());
        }
        if !lfs.contains(&lf) {
            lfs.push(lf.clone());
        }
        series
            .entry((r.method.as_str().to_string(), snr, lf))
            .or_default()
            .entry(r.round)
            .or_default()
            .push(r.test_accuracy);
    }

    let x_max = records.iter().map(|r| r.round).max().unwrap_or(0).max(1) as f64;
    let plot_w = style.width - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = style.height - MARGIN_TOP - MARGIN_BOTTOM;
    let x_of = |round: f64| MARGIN_LEFT + plot_w * (round / x_max);
    let y_of = |acc: f64| MARGIN_TOP + plot_h * (1.0 - acc.clamp(0.0, 1.0));

    let mut out = String::with_capacity(4096);
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">\n",
        w = style.width,
        h = style.height
    ));
    out.push_str(&format!(
        "  <rect width=\"{}\" height=\"{}\" fill=\"white\"/>\n",
        style.width, style.height
    ));
    out.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"28\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        style.title
    ));

    // Gridlines and y tick labels at 0, 0.2, ..., 1.0.
    for i in 0..=5 {
        let acc = i as f64 / 5.0;
        let y = y_of(acc);
        out.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            MARGIN_LEFT,
            MARGIN_LEFT + plot_w
        ));
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"end\">{acc:.1}</text>\n",
            MARGIN_LEFT - 8.0,
            y + 4.0
        ));
    }
    // X tick labels at five even positions.
    for i in 0..=4 {
        let round = x_max * i as f64 / 4.0;
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            x_of(round),
            MARGIN_TOP + plot_h + 20.0,
            round.round() as u64
        ));
    }
    // Axes.
    out.push_str(&format!(
        "  <line x1=\"{l:.1}\" y1=\"{t:.1}\" x2=\"{l:.1}\" y2=\"{b:.1}\" stroke=\"black\" stroke-width=\"1.5\"/>\n",
        l = MARGIN_LEFT,
        t = MARGIN_TOP,
        b = MARGIN_TOP + plot_h
    ));
    out.push_str(&format!(
        "  <line x1=\"{l:.1}\" y1=\"{b:.1}\" x2=\"{r:.1}\" y2=\"{b:.1}\" stroke=\"black\" stroke-width=\"1.5\"/>\n",
        l = MARGIN_LEFT,
        r = MARGIN_LEFT + plot_w,
        b = MARGIN_TOP + plot_h
    ));
    // Axis titles.
    out.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">communication rounds</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        MARGIN_TOP + plot_h + 42.0
    ));
    out.push_str(&format!(
        "  <text x=\"18\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {:.1})\">test accuracy</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    ));

    // One median polyline per series, plus a legend row.
    let legend_x = MARGIN_LEFT + plot_w + 16.0;
    for (idx, ((method, snr, lf), rounds)) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let points: Vec<String> = rounds
            .iter()
            .map(|(&round, accs)| {
                let mut accs = accs.clone();
                let med = median(&mut accs);
                format!("{:.1},{:.1}", x_of(round as f64), y_of(med))
            })
            .collect();
        out.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        let mut label = method.clone();
        if snrs.len() > 1 {
            label.push_str(&format!(" {snr}"));
        }
        if lfs.len() > 1 {
            label.push_str(&format!(" labels={lf}"));
        }
        let ly = MARGIN_TOP + 14.0 + 22.0 * idx as f64;
        out.push_str(&format!(
            "  <line x1=\"{legend_x:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            legend_x + 24.0
        ));
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{label}</text>\n",
            legend_x + 30.0,
            ly + 4.0
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Writes the chart to disk.
pub fn emit_svg(records: &[MetricRecord], style: &SvgStyle, path: &Path) -> Result<()> {
    let text = render_svg(records, style)?;
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use semcom::pipeline::{Method, Stage};

    fn record(method: Method, seed: u64, round: u64, acc: f64) -> MetricRecord {
        MetricRecord {
            round,
            stage: Stage::Finetune,
            method,
            seed,
            snr_db: Snr::Db(10.0),
            label_fraction: 1.0,
            train_loss: 1.0,
            test_accuracy: acc,
            uplink_scalars: 0,
            downlink_scalars: 0,
        }
    }

    #[test]
    fn single_series_of_two_points_is_one_polyline() {
        let records = vec![
            record(Method::Proposed, 0, 1, 0.4),
            record(Method::Proposed, 0, 2, 0.6),
        ];
        let svg = render_svg(&records, &SvgStyle::default()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        let points = svg
            .split("points=\"")
            .nth(1)
            .unwrap()
            .split('"')
            .next()
            .unwrap();
        assert_eq!(points.split(' ').count(), 2);
    }

    #[test]
    fn four_methods_get_four_legend_entries() {
        let records: Vec<_> = Method::ALL
            .iter()
            .flat_map(|&m| (1..=2).map(move |round| record(m, 0, round, 0.5)))
            .collect();
        let svg = render_svg(&records, &SvgStyle::default()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 4);
        for name in ["proposed", "simclr", "barlow", "supervised"] {
            assert!(
                svg.contains(&format!(">{name}</text>")),
                "missing legend entry for {name}"
            );
        }
    }

    #[test]
    fn accuracy_axis_is_clamped_to_unit_interval() {
        let inside = vec![
            record(Method::Proposed, 0, 1, 0.0),
            record(Method::Proposed, 0, 2, 1.0),
        ];
        let svg = render_svg(&inside, &SvgStyle::default()).unwrap();
        let points = svg
            .split("points=\"")
            .nth(1)
            .unwrap()
            .split('"')
            .next()
            .unwrap();
        let ys: Vec<f64> = points
            .split(' ')
            .map(|p| p.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        // Accuracy 0 sits on the x-axis, accuracy 1 at the top of the plot.
        assert_eq!(ys[0], MARGIN_TOP + (520.0 - MARGIN_TOP - MARGIN_BOTTOM));
        assert_eq!(ys[1], MARGIN_TOP);
    }

    #[test]
    fn median_over_seeds_is_plotted() {
        let records = vec![
            record(Method::Proposed, 0, 1, 0.2),
            record(Method::Proposed, 1, 1, 0.5),
            record(Method::Proposed, 2, 1, 0.9),
            record(Method::Proposed, 0, 2, 0.2),
            record(Method::Proposed, 1, 2, 0.5),
            record(Method::Proposed, 2, 2, 0.9),
        ];
        let style = SvgStyle::default();
        let svg = render_svg(&records, &style).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        let points = svg
            .split("points=\"")
            .nth(1)
            .unwrap()
            .split('"')
            .next()
            .unwrap();
        let y: f64 = points
            .split(' ')
            .next()
            .unwrap()
            .split(',')
            .nth(1)
            .unwrap()
            .parse()
            .unwrap();
        let plot_h = style.height - MARGIN_TOP - MARGIN_BOTTOM;
        let expected = MARGIN_TOP + plot_h * (1.0 - 0.5);
        assert!((y - expected).abs() < 0.11, "median 0.5 should be mid-plot");
    }

    #[test]
    fn empty_records_are_rejected() {
        assert!(render_svg(&[], &SvgStyle::default()).is_err());
    }
}
