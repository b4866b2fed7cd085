use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// One CSV row: one (seed, method, sweep value[, round]) combination.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub seed: u64,
    pub method: String,
    pub sweep: String,
    /// 1-based round for few-shot runs, 1 otherwise.
    pub round: usize,
    /// Loss of the merged model on the pooled client data.
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Mean local time per client (training plus Fisher); 0 when timing is off.
    pub client_time_s: f64,
    pub server_time_s: f64,
    /// Bits uploaded by one client.
    pub comm_bits: u64,
    pub diverged: bool,
    /// Position of `sweep` in the configured sweep, for ordering.
    pub sweep_index: usize,
}

pub const CSV_HEADER: [&str; 11] = [
    "seed",
    "method",
    "sweep",
    "round",
    "train_loss",
    "test_loss",
    "test_accuracy",
    "client_time_s",
    "server_time_s",
    "comm_bits",
    "diverged",
];

fn float(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(float).unwrap_or_default()
}

impl ResultRow {
    fn record(&self) -> [String; 11] {
        [
            self.seed.to_string(),
            self.method.clone(),
            self.sweep.clone(),
            self.round.to_string(),
            float(self.train_loss),
            opt(self.test_loss),
            opt(self.test_accuracy),
            float(self.client_time_s),
            float(self.server_time_s),
            self.comm_bits.to_string(),
            self.diverged.to_string(),
        ]
    }

    /// Ordering used before emission: seed, method, sweep position, round.
    pub fn sort_key(&self) -> (u64, String, usize, usize) {
        (self.seed, self.method.clone(), self.sweep_index, self.round)
    }
}

/// Writes rows sorted by [`ResultRow::sort_key`].
pub fn write_csv_to<W: Write>(w: W, rows: &[ResultRow]) -> Result<()> {
    let mut sorted: Vec<&ResultRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.sort_key());
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    out.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in sorted {
        out.write_record(r.record()).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_csv_to(std::fs::File::create(path)?, rows)
}
