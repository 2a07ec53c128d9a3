//! Validation loss, metrics CSV files, summary tables and loss-curve plots.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::autograd::Tape;
use crate::data::TokenBatch;
use crate::error::{DataError, FormatError, TrainError};
use crate::model::{model_forward, ModelConfig, Parameters, Variant};
use crate::tensor::Scalar;

pub const CSV_HEADER: &str = "step,split,loss,perplexity,lr,seed,variant,n_layers";

/// Windows scored per forward pass in [`evaluate`].
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// One row of training or validation telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub split: Split,
    /// Nats per token.
    pub loss: f64,
    pub perplexity: f64,
    pub lr: f64,
    pub seed: u64,
    pub variant: Variant,
    pub n_layers: usize,
}

impl MetricsRecord {
    /// Perplexity is derived from `loss`.
    pub fn new(step: usize, split: Split, loss: f64, lr: f64, seed: u64, variant: Variant, n_layers: usize) -> Self {
        MetricsRecord {
            step,
            split,
            loss,
            perplexity: loss.exp(),
            lr,
            seed,
            variant,
            n_layers,
        }
    }

    fn to_csv_row(&self) -> String {
        format!(
            "{},{},{:.8e},{:.8e},{:.8e},{},{},{}",
            self.step, self.split, self.loss, self.perplexity, self.lr, self.seed, self.variant, self.n_layers
        )
    }
}

/// Last validation record (highest step) of a log.
pub fn final_validation(records: &[MetricsRecord]) -> Option<&MetricsRecord> {
    records.iter().filter(|r| r.split == Split::Val).max_by_key(|r| r.step)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

/// Mean next-token cross-entropy over every non-overlapping window of
/// `seq_len` tokens in `ids` (a trailing partial window is dropped), token
/// weighted, with no gradients recorded.
pub fn evaluate<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    ids: &[usize],
    seq_len: usize,
) -> Result<Evaluation, TrainError> {
    if ids.is_empty() {
        return Err(DataError::Empty("evaluation split".into()).into());
    }
    if seq_len == 0 || ids.len() <= seq_len {
        return Err(DataError::TooShort {
            len: ids.len(),
            seq_len,
        }
        .into());
    }
    let windows = (ids.len() - 1) / seq_len;
    let mut total = 0.0f64;
    let mut start = 0;
    while start < windows {
        let count = EVAL_CHUNK.min(windows - start);
        let lo = start * seq_len;
        let hi = (start + count) * seq_len;
        let batch = TokenBatch::new(count, seq_len, ids[lo..hi].to_vec());
        let tape = Tape::new();
        let vars = params.register(&tape, false);
        let logits = model_forward(&vars, config, &batch)?;
        let loss = logits.cross_entropy(&ids[lo + 1..hi + 1]).map_err(crate::error::ModelError::from)?;
        total += loss.value().data()[0].as_f64() * (count * seq_len) as f64;
        start += count;
    }
    let tokens = windows * seq_len;
    let loss = total / tokens as f64;
    Ok(Evaluation {
        loss,
        perplexity: loss.exp(),
        tokens,
    })
}

pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>, FormatError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(FormatError::Parse {
                line: 1,
                message: format!("expected header `{CSV_HEADER}`, got `{header}`"),
            })
        }
        None => {
            return Err(FormatError::Parse {
                line: 1,
                message: "missing header".into(),
            })
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_row(line).map_err(|message| FormatError::Parse { line: i + 1, message })?);
    }
    Ok(records)
}

fn parse_row(line: &str) -> Result<MetricsRecord, String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 8 {
        return Err(format!("expected 8 fields, got {}", fields.len()));
    }
    fn num<T: FromStr>(name: &str, s: &str) -> Result<T, String> {
        s.parse().map_err(|_| format!("invalid {name} `{s}`"))
    }
    Ok(MetricsRecord {
        step: num("step", fields[0])?,
        split: fields[1].parse()?,
        loss: num("loss", fields[2])?,
        perplexity: num("perplexity", fields[3])?,
        lr: num("lr", fields[4])?,
        seed: num("seed", fields[5])?,
        variant: fields[6].parse().map_err(|e| format!("{e}"))?,
        n_layers: num("n_layers", fields[7])?,
    })
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<(), FormatError> {
    fs::write(path, metrics_to_csv(records)).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>, FormatError> {
    let text = fs::read_to_string(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_metrics_csv(&text)
}

/// Final validation perplexities of one (variant, depth) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryCell {
    pub variant: Variant,
    pub n_layers: usize,
    /// `(seed, final validation perplexity)`, ascending by seed.
    pub per_seed: Vec<(u64, f64)>,
}

impl SummaryCell {
    pub fn mean(&self) -> Option<f64> {
        if self.per_seed.is_empty() {
            None
        } else {
            Some(self.per_seed.iter().map(|(_, p)| p).sum::<f64>() / self.per_seed.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub variants: Vec<Variant>,
    pub depths: Vec<usize>,
    pub cells: Vec<SummaryCell>,
}

impl Summary {
    pub fn cell(&self, variant: Variant, n_layers: usize) -> Option<&SummaryCell> {
        self.cells.iter().find(|c| c.variant == variant && c.n_layers == n_layers)
    }

    pub fn mean(&self, variant: Variant, n_layers: usize) -> Option<f64> {
        self.cell(variant, n_layers).and_then(SummaryCell::mean)
    }

    /// Table of mean final validation perplexity, one row per variant and
    /// one column per depth, followed by the per-seed values. Empty cells
    /// print as `absent`.
    pub fn render(&self) -> String {
        let label_width = self.variants.iter().map(|v| v.label().len()).max().unwrap_or(5).max(5);
        let headers: Vec<String> = self
            .depths
            .iter()
            .map(|&n| if n == 1 { "1 layer".to_string() } else { format!("{n} layers") })
            .collect();
        let widths: Vec<usize> = headers.iter().map(|h| h.len().max(7)).collect();
        let mut out = String::new();
        let _ = write!(out, "{:<label_width$}", "Model");
        for (h, w) in headers.iter().zip(&widths) {
            let _ = write!(out, " | {h:>w$}");
        }
        out.push('\n');
        out.push_str(&"-".repeat(label_width));
        for w in &widths {
            out.push_str("-+-");
            out.push_str(&"-".repeat(*w));
        }
        out.push('\n');
        for &variant in &self.variants {
            let _ = write!(out, "{:<label_width$}", variant.label());
            for (&n, w) in self.depths.iter().zip(&widths) {
                let cell = match self.mean(variant, n) {
                    Some(m) => format!("{m:.2}"),
                    None => "absent".to_string(),
                };
                let _ = write!(out, " | {cell:>w$}");
            }
            out.push('\n');
        }
        out.push_str("\nper-seed final validation perplexity\n");
        for &variant in &self.variants {
            for &n in &self.depths {
                let _ = write!(out, "{} L{}:", variant.name(), n);
                match self.cell(variant, n) {
                    Some(c) if !c.per_seed.is_empty() => {
                        for (seed, p) in &c.per_seed {
                            let _ = write!(out, " seed {seed} = {p:.4}");
                        }
                    }
                    _ => out.push_str(" absent"),
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Groups records by (variant, depth, seed) and takes each run's final
/// validation perplexity. Cells are laid out over `variants × depths`;
/// a cell with no runs stays empty.
pub fn summarize_table(records: &[MetricsRecord], variants: &[Variant], depths: &[usize]) -> Summary {
    let mut finals: BTreeMap<(Variant, usize, u64), &MetricsRecord> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == Split::Val) {
        let slot = finals.entry((r.variant, r.n_layers, r.seed)).or_insert(r);
        if r.step >= slot.step {
            *slot = r;
        }
    }
    let cells = variants
        .iter()
        .flat_map(|&variant| depths.iter().map(move |&n| (variant, n)))
        .map(|(variant, n_layers)| SummaryCell {
            variant,
            n_layers,
            per_seed: finals
                .iter()
                .filter(|((v, n, _), _)| *v == variant && *n == n_layers)
                .map(|((_, _, seed), r)| (*seed, r.perplexity))
                .collect(),
        })
        .collect();
    Summary {
        variants: variants.to_vec(),
        depths: depths.to_vec(),
        cells,
    }
}

/// Variants and depths present in `records`, in canonical order.
pub fn grid_of(records: &[MetricsRecord]) -> (Vec<Variant>, Vec<usize>) {
    let mut variants: Vec<Variant> = records.iter().map(|r| r.variant).collect();
    variants.sort();
    variants.dedup();
    let mut depths: Vec<usize> = records.iter().map(|r| r.n_layers).collect();
    depths.sort();
    depths.dedup();
    (variants, depths)
}

/// Seed-averaged validation curve `(step, mean loss)` per (variant, depth).
pub fn validation_curves(records: &[MetricsRecord]) -> BTreeMap<(Variant, usize), Vec<(usize, f64)>> {
    let mut sums: BTreeMap<(Variant, usize), BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == Split::Val) {
        let e = sums.entry((r.variant, r.n_layers)).or_default().entry(r.step).or_insert((0.0, 0));
        e.0 += r.loss;
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(k, steps)| (k, steps.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect()))
        .collect()
}

const PLOT_WIDTH: f64 = 720.0;
const PLOT_HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 220.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 55.0;

fn variant_colour(v: Variant) -> &'static str {
    match v {
        Variant::RoFormer => "#1f77b4",
        Variant::JoFormerFixed => "#ff7f0e",
        Variant::JoFormerPerToken => "#2ca02c",
    }
}

fn depth_dash(index: usize) -> &'static str {
    ["", "6,3", "2,3", "8,3,2,3"][index % 4]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Standalone SVG of seed-averaged validation loss against step, one line
/// per (variant, depth). Output bytes depend only on the input records.
pub fn render_loss_plot(records: &[MetricsRecord], title: &str) -> String {
    let curves = validation_curves(records);
    let points = curves.values().flatten();
    let (mut x_max, mut y_min, mut y_max) = (0usize, f64::INFINITY, f64::NEG_INFINITY);
    for &(s, l) in points {
        x_max = x_max.max(s);
        if l.is_finite() {
            y_min = y_min.min(l);
            y_max = y_max.max(l);
        }
    }
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    if y_max - y_min < 1e-9 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = 0.05 * (y_max - y_min);
    let (y_lo, y_hi) = (y_min - pad, y_max + pad);
    let x_hi = x_max.max(1) as f64;
    let plot_w = PLOT_WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = PLOT_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let px = |s: f64| MARGIN_LEFT + plot_w * s / x_hi;
    let py = |l: f64| MARGIN_TOP + plot_h * (1.0 - (l - y_lo) / (y_hi - y_lo));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_WIDTH}" height="{PLOT_HEIGHT}" viewBox="0 0 {PLOT_WIDTH} {PLOT_HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{MARGIN_LEFT:.2}" y="{MARGIN_TOP:.2}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let s = x_hi * i as f64 / 5.0;
        let x = px(s);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{:.0}</text>"#,
            MARGIN_TOP + plot_h,
            MARGIN_TOP + plot_h + 5.0,
            MARGIN_TOP + plot_h + 18.0,
            s
        );
        let l = y_lo + (y_hi - y_lo) * i as f64 / 5.0;
        let y = py(l);
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{MARGIN_LEFT:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{l:.3}</text>"#,
            MARGIN_LEFT - 5.0,
            MARGIN_LEFT - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">step</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        PLOT_HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">validation loss (nats/token)</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    );

    let depths: Vec<usize> = {
        let mut d: Vec<usize> = curves.keys().map(|(_, n)| *n).collect();
        d.sort();
        d.dedup();
        d
    };
    for (i, ((variant, n), curve)) in curves.iter().enumerate() {
        let dash_index = depths.iter().position(|d| d == n).unwrap_or(0);
        let dash = depth_dash(dash_index);
        let dash_attr = if dash.is_empty() {
            String::new()
        } else {
            format!(r#" stroke-dasharray="{dash}""#)
        };
        let pts: Vec<String> = curve
            .iter()
            .filter(|(_, l)| l.is_finite())
            .map(|&(s, l)| format!("{:.2},{:.2}", px(s as f64), py(l)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5"{dash_attr} points="{}"/>"#,
            variant_colour(*variant),
            pts.join(" ")
        );
        let ly = MARGIN_TOP + 10.0 + 18.0 * i as f64;
        let lx = PLOT_WIDTH - MARGIN_RIGHT + 15.0;
        let layers = if *n == 1 { "1 layer".to_string() } else { format!("{n} layers") };
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{}" stroke-width="1.5"{dash_attr}/><text x="{:.2}" y="{:.2}">{}, {}</text>"#,
            lx + 24.0,
            variant_colour(*variant),
            lx + 30.0,
            ly + 4.0,
            escape(variant.label()),
            layers
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn emit_loss_plot(records: &[MetricsRecord], title: &str, path: &Path) -> Result<(), FormatError> {
    fs::write(path, render_loss_plot(records, title)).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}
