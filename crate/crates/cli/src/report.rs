//! Report envelopes. CSV reports are one header row plus data rows; JSON
//! reports wrap the same rows with the run metadata and a summary object.

use std::io::Write;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

use crate::args::Format;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct Report<'a, C: Serialize, S: Serialize, R: Serialize> {
    pub schema_version: u32,
    pub command: &'a str,
    pub seed: u64,
    pub threads: usize,
    pub pass: bool,
    pub config: C,
    pub summary: S,
    pub rows: Vec<R>,
}

impl<C: Serialize, S: Serialize, R: Serialize> Report<'_, C, S, R> {
    pub fn render(&self, format: Format) -> anyhow::Result<Vec<u8>> {
        match format {
            Format::Json => {
                let mut out = serde_json::to_vec_pretty(self)?;
                out.push(b'\n');
                Ok(out)
            }
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                for row in &self.rows {
                    w.serialize(row)?;
                }
                w.into_inner().context("flushing CSV")
            }
        }
    }

    pub fn write(&self, format: Format, output: Option<&Path>) -> anyhow::Result<()> {
        let bytes = self.render(format)?;
        match output {
            Some(path) => {
                std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
            }
            None => {
                let mut stdout = std::io::stdout().lock();
                stdout.write_all(&bytes)?;
                stdout.flush()?;
                Ok(())
            }
        }
    }
}
