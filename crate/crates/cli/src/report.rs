//! Raw per-run CSV, seed aggregates and the markdown results table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use debias_core::ensembles::Method;
use debias_core::synth::BiasKind;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::experiment::RunOutcome;

pub const CSV_COLUMNS: [&str; 14] = [
    "run_id",
    "method",
    "bias",
    "seed",
    "acc_in",
    "acc_ood",
    "bias_agreement",
    "g_mean_ind0",
    "g_std_ind0",
    "g_mean_ind1",
    "g_std_ind1",
    "pearson_g_biasacc",
    "spearman_g_biasacc",
    "wall_time_s",
];

/// One line of the raw CSV. Empty cells are inapplicable fields; a row with
/// empty accuracies is a failed run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub run_id: String,
    pub method: Method,
    pub bias: BiasKind,
    pub seed: u64,
    pub acc_in: Option<f64>,
    pub acc_ood: Option<f64>,
    pub bias_agreement: Option<f64>,
    pub g_mean_ind0: Option<f64>,
    pub g_std_ind0: Option<f64>,
    pub g_mean_ind1: Option<f64>,
    pub g_std_ind1: Option<f64>,
    pub pearson_g_biasacc: Option<f64>,
    pub spearman_g_biasacc: Option<f64>,
    pub wall_time_s: Option<f64>,
}

impl RawRow {
    pub fn from_outcome(o: &RunOutcome) -> Self {
        let m = o.metrics.as_ref();
        Self {
            run_id: o.run_id(),
            method: o.method,
            bias: o.bias_kind,
            seed: o.seed,
            acc_in: m.map(|m| m.acc_in_domain),
            acc_ood: m.map(|m| m.acc_ood),
            bias_agreement: m.map(|m| m.bias_agreement),
            g_mean_ind0: m.and_then(|m| m.g_mean_ind0),
            g_std_ind0: m.and_then(|m| m.g_std_ind0),
            g_mean_ind1: m.and_then(|m| m.g_mean_ind1),
            g_std_ind1: m.and_then(|m| m.g_std_ind1),
            pearson_g_biasacc: m.and_then(|m| m.pearson_g_biasacc),
            spearman_g_biasacc: m.and_then(|m| m.spearman_g_biasacc),
            wall_time_s: o.wall_time_s,
        }
    }

    pub fn failed(&self) -> bool {
        self.acc_in.is_none() || self.acc_ood.is_none()
    }
}

pub fn write_csv<W: Write>(rows: &[RawRow], out: W) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    // Written explicitly so an empty sweep still carries the header.
    w.write_record(CSV_COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| CliError::Other(format!("writing csv: {e}")))?;
    Ok(())
}

pub fn csv_string(rows: &[RawRow]) -> CliResult<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    String::from_utf8(buf).map_err(|e| CliError::Other(e.to_string()))
}

pub fn read_csv<R: Read>(input: R) -> CliResult<Vec<RawRow>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(CliError::Other(format!(
            "unexpected CSV header `{}`; expected `{}`",
            headers.iter().collect::<Vec<_>>().join(","),
            CSV_COLUMNS.join(",")
        )));
    }
    r.deserialize().map(|row| row.map_err(CliError::from)).collect()
}

pub fn load_csv(path: &Path) -> CliResult<Vec<RawRow>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_csv(file)
}

pub fn save_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

/// Seed aggregate for one (bias kind, method) pair. "Acc." is the OOD
/// accuracy, "w/Bias" the in-domain one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub bias: BiasKind,
    pub method: Method,
    pub runs: usize,
    pub failed: usize,
    pub acc_ood: Option<MeanStd>,
    pub acc_in: Option<MeanStd>,
    pub bias_agreement: Option<MeanStd>,
    pub g_mean_ind0: Option<MeanStd>,
    pub g_mean_ind1: Option<MeanStd>,
    pub pearson_g_biasacc: Option<MeanStd>,
    pub spearman_g_biasacc: Option<MeanStd>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    /// Bias kinds in declaration order, methods in results-table order.
    pub rows: Vec<AggregateRow>,
}

impl ResultsTable {
    pub fn get(&self, bias: BiasKind, method: Method) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.bias == bias && r.method == method)
    }
}

/// Groups rows by (bias kind, method) and averages over the successful seeds,
/// summing in row order.
pub fn aggregate(rows: &[RawRow]) -> ResultsTable {
    let mut groups: BTreeMap<(BiasKind, Method), Vec<&RawRow>> = BTreeMap::new();
    for row in rows {
        groups.entry((row.bias, row.method)).or_default().push(row);
    }
    let rows = groups
        .into_iter()
        .map(|((bias, method), group)| {
            let ok: Vec<&RawRow> = group.iter().copied().filter(|r| !r.failed()).collect();
            let col = |f: fn(&RawRow) -> Option<f64>| MeanStd::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            AggregateRow {
                bias,
                method,
                runs: group.len(),
                failed: group.len() - ok.len(),
                acc_ood: col(|r| r.acc_ood),
                acc_in: col(|r| r.acc_in),
                bias_agreement: col(|r| r.bias_agreement),
                g_mean_ind0: col(|r| r.g_mean_ind0),
                g_mean_ind1: col(|r| r.g_mean_ind1),
                pearson_g_biasacc: col(|r| r.pearson_g_biasacc),
                spearman_g_biasacc: col(|r| r.spearman_g_biasacc),
            }
        })
        .collect();
    ResultsTable { rows }
}

fn fmt_cell(v: Option<MeanStd>, scale: f64, digits: usize) -> String {
    match v {
        Some(MeanStd { mean, std }) => format!("{:.*} ± {:.*}", digits, mean * scale, digits, std * scale),
        None => "n/a".into(),
    }
}

/// Results in the layout of the accuracy table: one `Acc. | w/Bias` column
/// pair per bias kind, accuracies in percent as mean ± std over seeds.
pub fn markdown(table: &ResultsTable) -> String {
    let mut biases: Vec<BiasKind> = table.rows.iter().map(|r| r.bias).collect();
    biases.dedup();
    let mut methods: Vec<Method> = table.rows.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();

    let mut out = String::new();
    let _ = write!(out, "| Method |");
    for b in &biases {
        let _ = write!(out, " {} Acc. | {} w/Bias |", b.label(), b.label());
    }
    out.push('\n');
    out.push_str("|---|");
    out.push_str(&"---:|---:|".repeat(biases.len()));
    out.push('\n');
    for m in &methods {
        let _ = write!(out, "| {} |", m.label());
        for &b in &biases {
            match table.get(b, *m) {
                Some(row) => {
                    let _ = write!(out, " {} | {} |", fmt_cell(row.acc_ood, 100.0, 2), fmt_cell(row.acc_in, 100.0, 2));
                }
                None => out.push_str(" | |"),
            }
        }
        out.push('\n');
    }

    let failed: usize = table.rows.iter().map(|r| r.failed).sum();
    if failed > 0 {
        let _ = writeln!(out, "\n{failed} run(s) failed and are excluded from the means.");
    }

    let diag: Vec<&AggregateRow> = table.rows.iter().filter(|r| r.method.uses_gate() || r.bias == BiasKind::Dependent).collect();
    if !diag.is_empty() {
        out.push_str("\n| Bias | Method | Bias agreement | g (ind=0) | g (ind=1) | Pearson(g, bias acc.) | Spearman(g, bias acc.) |\n");
        out.push_str("|---|---|---:|---:|---:|---:|---:|\n");
        for r in diag {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.bias.label(),
                r.method.label(),
                fmt_cell(r.bias_agreement, 100.0, 2),
                fmt_cell(r.g_mean_ind0, 1.0, 3),
                fmt_cell(r.g_mean_ind1, 1.0, 3),
                fmt_cell(r.pearson_g_biasacc, 1.0, 3),
                fmt_cell(r.spearman_g_biasacc, 1.0, 3),
            );
        }
    }
    out
}

#[derive(Serialize)]
struct AggregateCsvRow {
    bias: BiasKind,
    method: Method,
    runs: usize,
    failed: usize,
    acc_ood_mean: Option<f64>,
    acc_ood_std: Option<f64>,
    acc_in_mean: Option<f64>,
    acc_in_std: Option<f64>,
    bias_agreement_mean: Option<f64>,
    g_mean_ind0_mean: Option<f64>,
    g_mean_ind1_mean: Option<f64>,
    pearson_g_biasacc_mean: Option<f64>,
    spearman_g_biasacc_mean: Option<f64>,
}

pub fn aggregate_csv_string(table: &ResultsTable) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &table.rows {
        w.serialize(AggregateCsvRow {
            bias: r.bias,
            method: r.method,
            runs: r.runs,
            failed: r.failed,
            acc_ood_mean: r.acc_ood.map(|v| v.mean),
            acc_ood_std: r.acc_ood.map(|v| v.std),
            acc_in_mean: r.acc_in.map(|v| v.mean),
            acc_in_std: r.acc_in.map(|v| v.std),
            bias_agreement_mean: r.bias_agreement.map(|v| v.mean),
            g_mean_ind0_mean: r.g_mean_ind0.map(|v| v.mean),
            g_mean_ind1_mean: r.g_mean_ind1.map(|v| v.mean),
            pearson_g_biasacc_mean: r.pearson_g_biasacc.map(|v| v.mean),
            spearman_g_biasacc_mean: r.spearman_g_biasacc.map(|v| v.mean),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Other(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Other(e.to_string()))
}
