//! Result files: a JSON envelope `{config, meta, results}` or CSV with one row
//! per trial followed by a `#summary` block.

use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::experiments::{
    ExcursionReport, GumbelFit, HittingTimeReport, LastKReport, LastPointsProcess, LatePointReport, VacancyReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Meta {
    pub seed: u64,
    pub version: String,
    pub wallclock_s: f64,
}

impl Meta {
    pub fn new(seed: u64, wallclock_s: f64) -> Self {
        Meta { seed, version: env!("CARGO_PKG_VERSION").to_string(), wallclock_s }
    }
}

#[derive(Serialize)]
struct Envelope<'a, C: Serialize, R: Serialize> {
    config: &'a C,
    meta: &'a Meta,
    results: &'a R,
}

/// Flat view of a result for CSV output.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub summary: Vec<(String, String)>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|h| h.to_string()).collect(), ..Default::default() }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn stat(&mut self, key: impl Into<String>, value: impl ToString) {
        self.summary.push((key.into(), value.to_string()));
    }
}

pub trait ToTable {
    fn to_table(&self) -> Table;
}

pub fn write_json<W: Write, C: Serialize, R: Serialize>(mut out: W, config: &C, meta: &Meta, results: &R) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, &Envelope { config, meta, results })?;
    writeln!(out)?;
    Ok(())
}

pub fn write_csv<W: Write>(mut out: W, table: &Table, meta: &Meta) -> Result<()> {
    {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(&mut out);
        w.write_record(&table.header)?;
        for r in &table.rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    writeln!(out, "#summary")?;
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(&mut out);
    w.write_record(["key", "value"])?;
    w.write_record(["seed", &meta.seed.to_string()])?;
    w.write_record(["version", &meta.version])?;
    for (k, v) in &table.summary {
        w.write_record([k, v])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report<W: Write, C: Serialize, R: Serialize + ToTable>(
    out: W,
    format: Format,
    config: &C,
    meta: &Meta,
    results: &R,
) -> Result<()> {
    match format {
        Format::Json => write_json(out, config, meta, results),
        Format::Csv => write_csv(out, &results.to_table(), meta),
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl ToTable for GumbelFit {
    fn to_table(&self) -> Table {
        let mut t = Table::new(&["trial", "cover_time", "normalized", "last_covered"]);
        for tr in &self.trials {
            let last = tr.last_k.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
            t.row(vec![tr.trial.to_string(), opt(tr.cover_time), opt(tr.normalized), last]);
        }
        t.stat("g0", self.g0);
        t.stat("target_size", self.target_size);
        t.stat("truncated", self.truncated.len());
        t.stat("mean", self.summary.mean);
        t.stat("mean_std_error", self.summary.std_error);
        t.stat("variance", self.summary.variance);
        t.stat("variance_std_error", self.variance_std_error);
        t.stat("ks_gumbel", self.ks);
        t.stat("ks_independent", self.ks_independent);
        t
    }
}

impl ToTable for VacancyReport {
    fn to_table(&self) -> Table {
        let mut t = Table::new(&["trial", "vacant"]);
        for (i, v) in self.vacant.iter().enumerate() {
            t.row(vec![i.to_string(), u8::from(*v).to_string()]);
        }
        t.stat("u", self.u);
        t.stat("time", self.time);
        t.stat("estimate", self.estimate.estimate);
        t.stat("std_error", self.estimate.std_error);
        t.stat("prediction", self.prediction);
        t
    }
}

impl ToTable for LatePointReport {
    fn to_table(&self) -> Table {
        let mut t = Table::new(&["trial", "size", "min_separation", "good"]);
        for i in 0..self.sizes.len() {
            t.row(vec![
                i.to_string(),
                self.sizes[i].to_string(),
                opt(self.min_separations[i]),
                u8::from(self.good[i]).to_string(),
            ]);
        }
        t.stat("rho", self.rho);
        t.stat("t_rho", self.t_rho);
        t.stat("expected_size", self.expected_size);
        t.stat("mean", self.size_summary.mean);
        t.stat("variance", self.size_summary.variance);
        t.stat("mean_ratio", self.mean_ratio);
        t.stat("good_fraction", self.good_fraction);
        t
    }
}

impl ToTable for LastPointsProcess {
    fn to_table(&self) -> Table {
        let mut header = vec!["trial".to_string()];
        header.extend(self.levels.iter().map(|l| format!("count_z{}", l.z)));
        let mut t = Table { header, ..Default::default() };
        let trials = self.levels.first().map_or(0, |l| l.counts.len());
        for i in 0..trials {
            let mut r = vec![i.to_string()];
            r.extend(self.levels.iter().map(|l| l.counts[i].to_string()));
            t.row(r);
        }
        for l in &self.levels {
            let z = l.z;
            t.stat(format!("z{z}_time"), l.time);
            t.stat(format!("z{z}_mean"), l.summary.mean);
            t.stat(format!("z{z}_variance"), l.summary.variance);
            t.stat(format!("z{z}_p_zero"), l.p_zero.estimate);
            t.stat(format!("z{z}_limit_mean"), l.limit_mean);
            t.stat(format!("z{z}_split_p"), l.split_test.p_value);
            t.stat(format!("z{z}_poisson_p"), l.poisson_test.p_value);
        }
        t
    }
}

impl ToTable for LastKReport {
    fn to_table(&self) -> Table {
        let mut t = Table::new(&["trial", "min_distance_over_n"]);
        for (i, m) in self.min_distances.iter().enumerate() {
            t.row(vec![i.to_string(), m.to_string()]);
        }
        t.stat("k", self.k);
        for ((d, p), o) in self.deltas.iter().zip(&self.tail).zip(&self.oracle) {
            t.stat(format!("tail_{d}"), p);
            t.stat(format!("oracle_{d}"), o);
        }
        t
    }
}

impl ToTable for HittingTimeReport {
    fn to_table(&self) -> Table {
        let mut t = Table::new(&["trial", "hitting_time"]);
        for (i, h) in self.times.iter().enumerate() {
            t.row(vec![i.to_string(), h.to_string()]);
        }
        t.stat("mean", self.summary.mean);
        t.stat("std_error", self.summary.std_error);
        t.stat("capacity_sum", self.capacity_sum);
        t.stat("ratio", self.ratio);
        t.stat("ratio_std_error", self.ratio_std_error);
        t
    }
}

impl ToTable for ExcursionReport {
    fn to_table(&self) -> Table {
        let mut t = Table::new(&["trial", "excursions"]);
        for (i, c) in self.counts.iter().enumerate() {
            t.row(vec![i.to_string(), c.to_string()]);
        }
        t.stat("a_radius", self.a_radius);
        t.stat("c_radius", self.c_radius);
        t.stat("t_star", self.t_star);
        t.stat("capacity", self.capacity);
        t.stat("mean", self.summary.mean);
        t.stat("prediction", self.prediction);
        t.stat("ratio", self.ratio);
        t.stat("ratio_std_error", self.ratio_std_error);
        t
    }
}
