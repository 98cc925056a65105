//! Per-iteration metrics as CSV.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use ddalm::solvers::DiagRecord;

pub const HEADER: [&str; 8] = [
    "n",
    "energy",
    "rel_gap",
    "consensus_residual",
    "d_n",
    "e_n",
    "psnr",
    "elapsed_s",
];

/// Shortest round-trip representation, in exponent form outside
/// `[1e-4, 1e15)`; infinities print as `inf` / `-inf`.
pub fn format_value(v: f64) -> String {
    let a = v.abs();
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else if v == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(format_value).unwrap_or_default()
}

pub fn row_fields(r: &DiagRecord) -> [String; 8] {
    [
        r.n.to_string(),
        format_value(r.energy),
        cell(r.rel_gap),
        format_value(r.consensus_residual),
        cell(r.d_n),
        cell(r.e_n),
        cell(r.psnr),
        cell(r.elapsed_s),
    ]
}

/// CSV sink; a no-op when constructed without a path.
pub struct MetricsWriter {
    inner: Option<csv::Writer<Box<dyn Write>>>,
}

impl MetricsWriter {
    pub fn create(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self { inner: None });
        };
        let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
        Self::from_writer(Box::new(file))
    }

    pub fn from_writer(w: Box<dyn Write>) -> Result<Self> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        w.write_record(HEADER)?;
        Ok(Self { inner: Some(w) })
    }

    pub fn push(&mut self, r: &DiagRecord) -> Result<()> {
        if let Some(w) = &mut self.inner {
            w.write_record(row_fields(r))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(w) = &mut self.inner {
            w.flush()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_values_are_empty_cells() {
        let r = DiagRecord {
            n: 3,
            energy: -1.5,
            rel_gap: None,
            consensus_residual: 0.0,
            d_n: Some(2.5e-9),
            e_n: None,
            psnr: Some(f64::INFINITY),
            elapsed_s: None,
        };
        assert_eq!(row_fields(&r).join(","), "3,-1.5,,0,2.5e-9,,inf,");
        assert_eq!(HEADER.join(","), "n,energy,rel_gap,consensus_residual,d_n,e_n,psnr,elapsed_s");
    }
}
