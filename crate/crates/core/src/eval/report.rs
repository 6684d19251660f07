//! CSV schemas shared by the studies and the plotting scripts.

use std::fs;
use std::path::Path;

use crate::error::{DawogError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsvSchema {
    pub name: &'static str,
    pub header: &'static [&'static str],
}

pub const EVAL: CsvSchema = CsvSchema {
    name: "eval",
    header: &["layout", "variant", "seed", "episodes", "success_rate", "mean_return"],
};

pub const EPISODES: CsvSchema = CsvSchema {
    name: "episodes",
    header: &["seed", "episode", "start", "goal", "steps", "success"],
};

pub const OCCUPANCY: CsvSchema = CsvSchema {
    name: "occupancy",
    header: &["layout", "variant", "seed", "region", "mean_steps", "passages", "censored"],
};

pub const BIAS: CsvSchema = CsvSchema {
    name: "bias",
    header: &[
        "layout",
        "seed",
        "separation",
        "estimator",
        "samples",
        "mean_error",
        "mean_abs_error",
        "std_error",
    ],
};

pub const REGION10: CsvSchema = CsvSchema {
    name: "region10",
    header: &["layout", "variant", "seed", "pairs", "successes", "success_rate"],
};

pub const OFFSETS: CsvSchema = CsvSchema {
    name: "offsets",
    header: &["layout", "seed", "offset", "success_rate", "mean_return"],
};

pub const SWEEP: CsvSchema = CsvSchema {
    name: "sweep",
    header: &["layout", "seed", "regions", "beta", "beta_tilde", "success_rate", "mean_return"],
};

pub const WEIGHTS: CsvSchema = CsvSchema {
    name: "weights",
    header: &["layout", "variant", "seed", "weight"],
};

pub const ORACLE: CsvSchema = CsvSchema {
    name: "oracle",
    header: &[
        "grids",
        "checked_entries",
        "min_gap",
        "violations",
        "dual_min_gap",
        "dual_violations",
    ],
};

pub const ALL: [CsvSchema; 9] = [EVAL, EPISODES, OCCUPANCY, BIAS, REGION10, OFFSETS, SWEEP, WEIGHTS, ORACLE];

/// `{study}_{layout}_{variant}_{seed}.csv`.
pub fn study_file_name(study: &str, layout: &str, variant: &str, seed: u64) -> String {
    format!("{study}_{layout}_{variant}_{seed}.csv")
}

impl CsvSchema {
    /// Checks a row set before anything is written.
    pub fn validate(&self, rows: &[Vec<String>]) -> Result<()> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != self.header.len() {
                return Err(DawogError::Schema(format!(
                    "{} row {i} has {} fields, header has {}",
                    self.name,
                    row.len(),
                    self.header.len()
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path, rows: &[Vec<String>]) -> Result<()> {
        self.validate(rows)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a file written with this schema, rejecting a mismatched header.
    pub fn read(&self, path: &Path) -> Result<Vec<Vec<String>>> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header != self.header {
            return Err(DawogError::Schema(format!(
                "{} header mismatch in {}",
                self.name,
                path.display()
            )));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec?.iter().map(str::to_owned).collect());
        }
        Ok(rows)
    }
}
