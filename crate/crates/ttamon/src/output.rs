//! Per-repetition CSV files and the run summary JSON.
//!
//! Every CSV starts with a `# config_hash=<hex>` line, then a header with
//! [`CSV_COLUMNS`], then one row per step. Missing values are empty fields.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::runner::{RunError, RunSummary, StepRow};

pub const CSV_COLUMNS: [&str; 16] = [
    "step",
    "severity",
    "empirical_risk",
    "U_hat",
    "L_a",
    "L_b",
    "L_c",
    "quantile_bound",
    "delta_hat",
    "phi_a",
    "phi_b",
    "phi_tau",
    "phi_c",
    "lambda_k",
    "tau",
    "collapsed_fraction",
];

pub const OUT_DIR_ENV: &str = "TTAMON_OUT_DIR";
const HASH_PREFIX: &str = "# config_hash=";

/// Output directory: the `--out` flag, then `TTAMON_OUT_DIR`, then the
/// config, then `./out`.
pub fn resolve_out_dir(config: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    if let Some(dir) = flag {
        return dir.to_path_buf();
    }
    if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(dir);
    }
    config
        .output
        .dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("out"))
}

pub fn csv_path(dir: &Path, name: &str, rep: usize) -> PathBuf {
    dir.join(format!("{name}_rep{rep}.csv"))
}

pub fn summary_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}_summary.json"))
}

/// Streaming CSV writer. Rows already written survive an error because the
/// buffer is flushed on drop.
pub struct CsvSink<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> CsvSink<W> {
    pub fn new(mut out: W, config_hash: &str) -> Result<Self, RunError> {
        writeln!(out, "{HASH_PREFIX}{config_hash}")?;
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        writer.write_record(CSV_COLUMNS)?;
        Ok(Self { writer })
    }

    pub fn write(&mut self, row: &StepRow) -> Result<(), RunError> {
        self.writer.serialize(row)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, RunError> {
        self.writer.flush()?;
        self.writer
            .into_inner()
            .map_err(|e| RunError::Io(std::io::Error::other(e.to_string())))
    }
}

impl CsvSink<BufWriter<File>> {
    pub fn create(path: &Path, config_hash: &str) -> Result<Self, RunError> {
        Self::new(BufWriter::new(File::create(path)?), config_hash)
    }
}

/// Serialize `rows` into an in-memory CSV document.
pub fn rows_to_csv(rows: &[StepRow], config_hash: &str) -> Result<Vec<u8>, RunError> {
    let mut sink = CsvSink::new(Vec::new(), config_hash)?;
    for row in rows {
        sink.write(row)?;
    }
    sink.finish()
}

/// Rows of a CSV file written by [`CsvSink`].
pub fn read_rows(path: &Path) -> Result<Vec<StepRow>, RunError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let mut csv = csv::ReaderBuilder::new().from_reader(reader);
    Ok(csv.deserialize().collect::<Result<_, _>>()?)
}

/// The config hash recorded in the first line of a CSV file.
pub fn read_csv_hash(path: &Path) -> Result<Option<String>, RunError> {
    let mut line = String::new();
    BufReader::new(File::open(path)?).read_line(&mut line)?;
    Ok(line.trim_end().strip_prefix(HASH_PREFIX).map(str::to_owned))
}

pub fn write_summary(path: &Path, summary: &RunSummary) -> Result<(), RunError> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, summary)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Fails unless every CSV of the run carries the summary's config hash.
pub fn verify_hashes(dir: &Path, summary: &RunSummary) -> Result<(), RunError> {
    for rep in &summary.repetitions {
        let path = csv_path(dir, &summary.name, rep.rep);
        let found = read_csv_hash(&path)?.unwrap_or_default();
        for expected in [&summary.config_hash, &rep.config_hash] {
            if &found != expected {
                return Err(RunError::HashMismatch {
                    file: path.display().to_string(),
                    expected: expected.clone(),
                    found,
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize) -> StepRow {
        StepRow {
            step,
            severity: 1.5,
            empirical_risk: 0.25,
            u_hat: 0.125,
            l_a: Some(0.0625),
            l_b: None,
            l_c: Some(0.3),
            quantile_bound: None,
            delta_hat: Some(-0.5),
            phi_a: Some(false),
            phi_b: None,
            phi_tau: Some(true),
            phi_c: Some(true),
            lambda_k: 0.4,
            tau: 0.5,
            collapsed_fraction: 0.75,
            l_b_scaled: None,
            l_b_unscaled: None,
        }
    }

    #[test]
    fn layout_is_hash_header_rows() {
        let bytes = rows_to_csv(&[row(1), row(2)], "abc").unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(!text.contains('\r'));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "# config_hash=abc");
        assert_eq!(lines[1], CSV_COLUMNS.join(","));
        assert_eq!(
            lines[2],
            "1,1.5,0.25,0.125,0.0625,,0.3,,-0.5,false,,true,true,0.4,0.5,0.75"
        );
    }

    #[test]
    fn header_matches_serialized_field_order() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(row(1)).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    }

    #[test]
    fn files_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = csv_path(dir.path(), "x", 3);
        assert!(path.ends_with("x_rep3.csv"));
        std::fs::write(&path, rows_to_csv(&[row(1), row(2)], "feed").unwrap()).unwrap();
        assert_eq!(read_rows(&path).unwrap(), vec![row(1), row(2)]);
        assert_eq!(read_csv_hash(&path).unwrap().as_deref(), Some("feed"));
    }

    #[test]
    fn rows_survive_an_aborted_writer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.csv");
        {
            let mut sink = CsvSink::create(&path, "h").unwrap();
            for k in 1..=5 {
                sink.write(&row(k)).unwrap();
            }
        }
        assert_eq!(read_rows(&path).unwrap().len(), 5);
    }

    #[test]
    fn out_dir_precedence() {
        let mut config = crate::presets::no_shift(ttamon_core::losses::LossKind::ZeroOne);
        let flag = Path::new("from_flag");
        std::env::remove_var(OUT_DIR_ENV);
        assert_eq!(resolve_out_dir(&config, None), PathBuf::from("out"));
        config.output.dir = Some("from_config".into());
        assert_eq!(resolve_out_dir(&config, None), PathBuf::from("from_config"));
        std::env::set_var(OUT_DIR_ENV, "from_env");
        assert_eq!(resolve_out_dir(&config, None), PathBuf::from("from_env"));
        assert_eq!(resolve_out_dir(&config, Some(flag)), flag);
        std::env::remove_var(OUT_DIR_ENV);
    }
}
