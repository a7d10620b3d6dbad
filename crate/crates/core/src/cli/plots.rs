//! Figures of a report. Every figure gets an adjacent CSV holding exactly the
//! plotted numbers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::pipeline::SweepReport;
use super::report::BenchmarkReport;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotOutcome {
    pub files: Vec<PathBuf>,
    /// Figure name and the reason it was not drawn.
    pub skipped: Vec<String>,
}

fn perr(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// One bar per `(group, series)` value; `None` leaves a hole.
pub struct Bars {
    pub title: String,
    pub y_label: String,
    pub groups: Vec<String>,
    pub series: Vec<String>,
    /// `values[g][s]`.
    pub values: Vec<Vec<Option<f64>>>,
    /// Text drawn above a bar, e.g. significance stars.
    pub marks: Vec<Vec<String>>,
}

impl Bars {
    pub fn csv(&self) -> String {
        let mut s = String::from("group,series,value\n");
        for (g, row) in self.groups.iter().zip(&self.values) {
            for (name, v) in self.series.iter().zip(row) {
                if let Some(v) = v {
                    writeln!(s, "{g},{name},{v}").unwrap();
                }
            }
        }
        s
    }

    pub fn render(&self, path: &Path) -> Result<(), String> {
        let all: Vec<f64> = self.values.iter().flatten().flatten().copied().collect();
        let lo = all.iter().copied().fold(0.0, f64::min);
        let hi = all.iter().copied().fold(0.0, f64::max);
        let pad = ((hi - lo) * 0.1).max(0.05);
        let (lo, hi) = (if lo < 0.0 { lo - pad } else { 0.0 }, hi + pad);
        let width = (160 + self.groups.len() * (24 * self.series.len() + 20)).max(480) as u32;
        let root = SVGBackend::new(path, (width, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(perr)?;
        let n = self.groups.len();
        let groups = self.groups.clone();
        let mut chart = ChartBuilder::on(&root)
            .caption(&self.title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(60)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..n as f64, lo..hi)
            .map_err(perr)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n.max(1))
            .x_label_formatter(&|x| {
                let i = (x - 0.5).round();
                if (x - 0.5 - i).abs() < 1e-6 && i >= 0.0 {
                    groups.get(i as usize).cloned().unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .y_desc(&self.y_label)
            .draw()
            .map_err(perr)?;
        let k = self.series.len().max(1) as f64;
        let w = 0.8 / k;
        for (si, name) in self.series.iter().enumerate() {
            let color = Palette99::pick(si).to_rgba();
            let bars: Vec<Rectangle<(f64, f64)>> = self
                .values
                .iter()
                .enumerate()
                .filter_map(|(gi, row)| row[si].map(|v| (gi, v)))
                .map(|(gi, v)| {
                    let x0 = gi as f64 + 0.1 + si as f64 * w;
                    Rectangle::new([(x0, 0.0), (x0 + w * 0.9, v)], color.filled())
                })
                .collect();
            chart
                .draw_series(bars)
                .map_err(perr)?
                .label(name.clone())
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
            let marks: Vec<Text<(f64, f64), String>> = self
                .marks
                .iter()
                .zip(&self.values)
                .enumerate()
                .filter_map(|(gi, (m, row))| match (m.get(si), row[si]) {
                    (Some(t), Some(v)) if !t.is_empty() => Some(Text::new(t.clone(), (gi as f64 + 0.1 + si as f64 * w, v.max(0.0) + pad * 0.3), ("sans-serif", 12).into_font())),
                    _ => None,
                })
                .collect();
            chart.draw_series(marks).map_err(perr)?;
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(perr)?;
        root.present().map_err(perr)
    }
}

pub struct Lines {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<(String, Vec<(f64, f64)>)>,
}

impl Lines {
    pub fn csv(&self) -> String {
        let mut s = String::from("series,x,y\n");
        for (name, pts) in &self.series {
            for (x, y) in pts {
                writeln!(s, "{name},{x},{y}").unwrap();
            }
        }
        s
    }

    pub fn render(&self, path: &Path) -> Result<(), String> {
        let pts: Vec<(f64, f64)> = self.series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
        let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
        let (y0, y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
        let (x0, x1) = if x0.is_finite() && x1 > x0 { (x0, x1) } else { (0.0, 1.0) };
        let pad = ((y1 - y0) * 0.1).max(0.05);
        let (y0, y1) = if y0.is_finite() { (y0.min(0.0) - pad * 0.2, y1 + pad) } else { (0.0, 1.0) };
        let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(perr)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(&self.title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(perr)?;
        chart.configure_mesh().x_desc(&self.x_label).y_desc(&self.y_label).draw().map_err(perr)?;
        for (i, (name, p)) in self.series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(p.iter().copied(), color.stroke_width(2)))
                .map_err(perr)?
                .label(name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 12, y)], color.stroke_width(2)));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(perr)?;
        root.present().map_err(perr)
    }
}

fn save(dir: &Path, name: &str, csv: String, render: impl FnOnce(&Path) -> Result<(), String>, out: &mut PlotOutcome) -> Result<(), String> {
    let svg = dir.join(format!("{name}.svg"));
    render(&svg)?;
    fs::write(dir.join(format!("{name}.csv")), csv).map_err(perr)?;
    out.files.push(svg);
    Ok(())
}

/// Mean test DSC of every model in every cell.
pub fn dsc_bars(r: &BenchmarkReport) -> Bars {
    let groups = r.cells.iter().map(|c| format!("{} {} {}", c.task, c.modality, c.shots)).collect();
    let values = r.cells.iter().map(|c| r.models.iter().map(|m| c.mean_dsc.get(m).copied()).collect()).collect();
    Bars { title: "Mean test DSC".into(), y_label: "DSC".into(), groups, series: r.models.clone(), values, marks: Vec::new() }
}

/// Per-structure DSC of the cells with the smallest shot count.
pub fn structure_bars(r: &BenchmarkReport) -> Bars {
    let shots = r.cells.iter().map(|c| c.shots).min();
    let mut groups = Vec::new();
    let mut values = Vec::new();
    for c in r.cells.iter().filter(|c| Some(c.shots) == shots) {
        let names: Vec<&String> = c.per_structure.values().next().map(|p| p.keys().collect()).unwrap_or_default();
        for s in names {
            groups.push(format!("{} {} {s}", c.task, c.modality));
            values.push(r.models.iter().map(|m| c.per_structure.get(m).and_then(|p| p.get(s)).copied()).collect());
        }
    }
    Bars { title: "Per-structure test DSC".into(), y_label: "DSC".into(), groups, series: r.models.clone(), values, marks: Vec::new() }
}

/// Relative gap to the best model, per cell.
pub fn gap_bars(r: &BenchmarkReport) -> Bars {
    let cells: Vec<_> = r.cells.iter().filter(|c| c.gap.is_some()).collect();
    let groups = cells.iter().map(|c| format!("{} {} {}", c.task, c.modality, c.shots)).collect();
    let values = cells.iter().map(|c| r.models.iter().map(|m| c.gap.as_ref().and_then(|g| g.gaps.get(m)).copied()).collect()).collect();
    Bars { title: "Performance gap to the best model".into(), y_label: "gap (%)".into(), groups, series: r.models.clone(), values, marks: Vec::new() }
}

/// Cross-modality DSC change per model, with significance stars.
pub fn modality_gap_bars(r: &BenchmarkReport) -> Bars {
    let mut series: Vec<String> = Vec::new();
    for g in &r.modality_gaps {
        let name = format!("{} {} {}->{}", g.task, g.shots, g.from, g.to);
        if !series.contains(&name) {
            series.push(name);
        }
    }
    let mut values = vec![vec![None; series.len()]; r.models.len()];
    let mut marks = vec![vec![String::new(); series.len()]; r.models.len()];
    for g in &r.modality_gaps {
        let s = series.iter().position(|n| *n == format!("{} {} {}->{}", g.task, g.shots, g.from, g.to)).unwrap();
        if let Some(m) = r.models.iter().position(|m| *m == g.model) {
            values[m][s] = Some(g.mean_gap);
            marks[m][s] = g.stars.clone();
        }
    }
    Bars { title: "Modality gap (DSC change)".into(), y_label: "DSC difference".into(), groups: r.models.clone(), series, values, marks }
}

/// Validation DSC curves of the first seed in the first cell.
pub fn training_curves(r: &BenchmarkReport) -> Lines {
    let first = r.rows.first();
    let series = r
        .models
        .iter()
        .filter_map(|m| {
            let f = first?;
            let row = r.rows.iter().find(|x| &x.model == m && x.task == f.task && x.modality == f.modality && x.shots == f.shots && x.seed == f.seed)?;
            Some((m.clone(), row.val_dice.iter().map(|(e, d)| (*e as f64, *d)).collect()))
        })
        .collect();
    let title = first.map(|f| format!("Validation DSC ({} {} {} shots, seed {})", f.task, f.modality, f.shots, f.seed)).unwrap_or_default();
    Lines { title, x_label: "epoch".into(), y_label: "DSC".into(), series }
}

/// Seed-mean layerwise CKA of each pretrained encoder with its fine-tuned
/// descendant and with a random initialization.
pub fn cka_profiles(r: &BenchmarkReport) -> Lines {
    let mut methods: Vec<&String> = r.cka.iter().map(|c| &c.method).collect();
    methods.dedup();
    let mut series = Vec::new();
    for m in methods {
        let runs: Vec<_> = r.cka.iter().filter(|c| &c.method == m).collect();
        for (label, pick) in [("fine-tuned", true), ("random", false)] {
            let profiles: Vec<Vec<f64>> = runs.iter().map(|c| if pick { c.finetuned_profile() } else { c.random_profile() }).collect();
            let taps = &runs[0].taps;
            let pts = taps.iter().enumerate().map(|(i, &t)| (t as f64, profiles.iter().map(|p| p[i]).sum::<f64>() / profiles.len() as f64)).collect();
            series.push((format!("{m} vs {label}"), pts));
        }
    }
    Lines { title: "Layerwise CKA against the pretrained encoder".into(), x_label: "tap".into(), y_label: "CKA".into(), series }
}

/// Writes every figure the report supports; the rest are listed as skipped.
pub fn emit_plots(r: &BenchmarkReport, dir: &Path) -> Result<PlotOutcome, String> {
    fs::create_dir_all(dir).map_err(perr)?;
    let mut out = PlotOutcome::default();
    let bars = dsc_bars(r);
    save(dir, "dsc_bars", bars.csv(), |p| bars.render(p), &mut out)?;
    let bars = structure_bars(r);
    save(dir, "structure_dsc", bars.csv(), |p| bars.render(p), &mut out)?;
    if r.analysis.gaps {
        let bars = gap_bars(r);
        save(dir, "fewshot_gap", bars.csv(), |p| bars.render(p), &mut out)?;
    } else {
        out.skipped.push("fewshot_gap: gaps analysis disabled".into());
    }
    if r.modality_gaps.is_empty() {
        out.skipped.push("modality_gap: needs two modalities".into());
    } else {
        let bars = modality_gap_bars(r);
        let mut csv = String::from("model,task,shots,from,to,gap,p,stars\n");
        for g in &r.modality_gaps {
            let p = g.wilcoxon.as_ref().map(|w| w.p.to_string()).unwrap_or_default();
            writeln!(csv, "{},{},{},{},{},{},{p},{}", g.model, g.task, g.shots, g.from, g.to, g.mean_gap, g.stars).unwrap();
        }
        save(dir, "modality_gap", csv, |p| bars.render(p), &mut out)?;
    }
    let lines = training_curves(r);
    save(dir, "training_curves", lines.csv(), |p| lines.render(p), &mut out)?;
    if r.cka.is_empty() {
        out.skipped.push("cka: analysis disabled or no pretrained methods".into());
    } else {
        let lines = cka_profiles(r);
        save(dir, "cka_profile", lines.csv(), |p| lines.render(p), &mut out)?;
        for c in r.cka.iter().filter(|c| c.seed == r.cka[0].seed) {
            let name = format!("cka_heatmap_{}", c.method);
            let title = format!("{} pretrained vs fine-tuned (seed {})", c.method, c.seed);
            save(dir, &name, c.finetuned.to_csv(), |p| c.finetuned.render_heatmap(p, &title).map_err(perr), &mut out)?;
        }
    }
    Ok(out)
}

/// DSC against pretraining-set size, one line per task and modality.
pub fn size_lines(r: &SweepReport) -> Lines {
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for p in &r.points {
        let name = format!("{} {}", p.task, p.modality);
        match series.iter_mut().find(|(n, _)| *n == name) {
            Some((_, pts)) => pts.push((p.size as f64, p.mean)),
            None => series.push((name, vec![(p.size as f64, p.mean)])),
        }
    }
    Lines { title: format!("Test DSC vs pretraining size ({} shots)", r.shots), x_label: "pretraining volumes".into(), y_label: "DSC".into(), series }
}

pub fn size_curve(r: &SweepReport, dir: &Path) -> Result<PlotOutcome, String> {
    fs::create_dir_all(dir).map_err(perr)?;
    let mut out = PlotOutcome::default();
    let lines = size_lines(r);
    let mut csv = String::from("task,modality,size,mean,std,seed_values\n");
    for p in &r.points {
        let seeds: Vec<String> = p.per_seed.iter().map(|(s, d)| format!("{s}:{d}")).collect();
        writeln!(csv, "{},{},{},{},{},{}", p.task, p.modality, p.size, p.mean, p.std, seeds.join(" ")).unwrap();
    }
    save(dir, "size_curve", csv, |p| lines.render(p), &mut out)?;
    Ok(out)
}
