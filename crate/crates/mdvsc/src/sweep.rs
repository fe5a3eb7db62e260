//! Grid evaluations over bandwidth ratio, channel SNR and seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mdvsc_core::metrics;
use mdvsc_core::types::{BandwidthBudget, GopDims};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::resolve_output;
use crate::error::{Error, Result};
use crate::frames;
use crate::plot;
use crate::results::{self, BaselinePoint, FailureRow, ResultRow};
use crate::transmit;

pub const RESULTS_FILE: &str = "results.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const BASELINE_DIR: &str = "baselines";

pub const DEFAULT_SNR_GRID: [f64; 5] = [0.0, 5.0, 10.0, 15.0, 20.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    #[serde(default = "default_cbr_grid")]
    pub cbr_grid: Vec<f64>,
    #[serde(default = "default_snr_grid")]
    pub snr_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub baselines: Vec<PathBuf>,
}

fn default_cbr_grid() -> Vec<f64> {
    mdvsc_core::train::DEFAULT_CBR_GRID.to_vec()
}

fn default_snr_grid() -> Vec<f64> {
    DEFAULT_SNR_GRID.to_vec()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn strictly_increasing(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Usage(format!("{name} is empty")));
    }
    if v.iter().any(|x| !x.is_finite()) || v.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Usage(format!("{name} must be finite and strictly increasing, got {v:?}")));
    }
    Ok(())
}

impl ExperimentSpec {
    /// Reads a TOML spec; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Usage(format!("cannot read {}: {e}", path.display())))?;
        let mut spec: Self = toml::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.checkpoint = base.join(&spec.checkpoint);
        spec.manifest = base.join(&spec.manifest);
        spec.baselines = spec.baselines.iter().map(|b| base.join(b)).collect();
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        strictly_increasing("cbr_grid", &self.cbr_grid)?;
        if self.cbr_grid[0] <= 0.0 {
            return Err(Error::Usage("cbr_grid must be positive".into()));
        }
        strictly_increasing("snr_grid", &self.snr_grid)?;
        if self.seeds.is_empty() {
            return Err(Error::Usage("seeds is empty".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::Usage("seeds must be distinct".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub results: PathBuf,
    pub added: usize,
    pub skipped_cells: usize,
    pub failures: Vec<FailureRow>,
    pub plots: Vec<PathBuf>,
}

/// Baselines given explicitly plus every CSV ingested into `dir/baselines`.
pub fn collect_baselines(dir: &Path, extra: &[PathBuf]) -> Result<Vec<BaselinePoint>> {
    let mut paths: Vec<PathBuf> = extra.to_vec();
    if let Ok(entries) = fs::read_dir(dir.join(BASELINE_DIR)) {
        let mut found: Vec<PathBuf> =
            entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|e| e == "csv")).collect();
        found.sort();
        paths.extend(found);
    }
    let mut points = Vec::new();
    for p in paths {
        points.extend(results::read_baseline(&p)?);
    }
    Ok(points)
}

/// Runs every missing `(cbr, snr, seed, clip)` cell, merges with earlier
/// results in `output_dir` and redraws the plots. Failing cells are logged
/// to `failures.csv` and do not stop the sweep.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<SweepOutcome> {
    spec.validate()?;
    let out = resolve_output(&spec.output_dir);
    fs::create_dir_all(&out).map_err(Error::io(&out))?;
    let model = checkpoint::load_model(&spec.checkpoint, None)?;
    let clips = frames::load_manifest(&spec.manifest, 1)?;
    let results_path = out.join(RESULTS_FILE);
    let mut rows = if results_path.exists() { results::read_results(&results_path)? } else { Vec::new() };
    let n = model.config().gop_size;

    let mut failures = Vec::new();
    let (mut added, mut skipped) = (0, 0);
    for &cbr in &spec.cbr_grid {
        for &snr in &spec.snr_grid {
            for &seed in &spec.seeds {
                for clip in &clips {
                    let achieved = BandwidthBudget::from_cbr(cbr, GopDims::new(n, clip.height, clip.width)).map(|b| b.achieved_cbr());
                    let present = achieved
                        .as_ref()
                        .is_ok_and(|&a| rows.iter().any(|r| r.clip_id == clip.id && r.seed == seed && r.snr_db == snr && r.cbr == a));
                    if present {
                        skipped += 1;
                        continue;
                    }
                    match transmit::transmit_clip(&model, clip, cbr, Some(snr), seed) {
                        Ok(res) => {
                            added += res.gops.len();
                            rows.extend(res.gops.into_iter().map(|g| g.row));
                        }
                        Err(e) => {
                            log::warn!("cell cbr={cbr} snr={snr} seed={seed} clip={}: {e}", clip.id);
                            failures.push(FailureRow { cbr, snr_db: snr, seed, clip_id: clip.id.clone(), error: e.to_string() });
                        }
                    }
                }
            }
        }
    }
    results::sort_rows(&mut rows);
    results::write_rows(&results_path, &rows)?;
    let failures_path = out.join(FAILURES_FILE);
    if failures.is_empty() {
        let _ = fs::remove_file(&failures_path);
    } else {
        results::write_rows(&failures_path, &failures)?;
    }
    let baselines = collect_baselines(&out, &spec.baselines)?;
    let plots = plot::plot_results(&out, &rows, &baselines)?;
    Ok(SweepOutcome { results: results_path, added, skipped_cells: skipped, failures, plots })
}

/// Validates a baseline CSV and stores a normalized copy under
/// `output_dir/baselines`.
pub fn ingest_baseline(csv: &Path, output_dir: &Path) -> Result<(Vec<BaselinePoint>, PathBuf)> {
    let points = results::read_baseline(csv)?;
    let name = csv.file_name().ok_or_else(|| Error::Usage(format!("{} is not a file", csv.display())))?;
    let dest = resolve_output(output_dir).join(BASELINE_DIR).join(name);
    results::write_rows(&dest, &points)?;
    Ok((points, dest))
}

/// Mean quality of one `(cbr, snr)` cell across clips, GOPs and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cbr: f64,
    pub snr_db: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
    pub ms_ssim_db: f64,
    pub samples: usize,
}

pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<(u64, u64), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.cbr.to_bits(), r.snr_db.to_bits())).or_default().push(r);
    }
    let mut out: Vec<SummaryRow> = cells
        .into_values()
        .map(|rs| {
            let k = rs.len() as f64;
            let ms_ssim = rs.iter().map(|r| r.ms_ssim).sum::<f64>() / k;
            SummaryRow {
                cbr: rs[0].cbr,
                snr_db: rs[0].snr_db,
                psnr_db: rs.iter().map(|r| r.psnr_db).sum::<f64>() / k,
                ms_ssim,
                ms_ssim_db: metrics::ms_ssim_db(ms_ssim),
                samples: rs.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| a.cbr.total_cmp(&b.cbr).then(a.snr_db.total_cmp(&b.snr_db)));
    out
}

/// Redraws plots and writes `summary.csv` for an existing results file.
pub fn report(results_csv: &Path, output_dir: &Path, baselines: &[PathBuf]) -> Result<(Vec<SummaryRow>, Vec<PathBuf>)> {
    let rows = results::read_results(results_csv)?;
    let out = resolve_output(output_dir);
    let summary = summarize(&rows);
    results::write_rows(&out.join(SUMMARY_FILE), &summary)?;
    let points = collect_baselines(&out, baselines)?;
    let plots = plot::plot_results(&out, &rows, &points)?;
    Ok((summary, plots))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Checkpoint;
    use mdvsc_core::model::{Mdvsc, ModelConfig};

    fn fixture(root: &Path) -> ExperimentSpec {
        let model = Mdvsc::<f32>::new(ModelConfig { channel_dim: 4, gop_size: 2, resblock_depth: 1, snr_train_db: 10.0 }, 2).unwrap();
        let ckpt = root.join("m.safetensors");
        Checkpoint::from_model(&model).save(&ckpt).unwrap();
        let clip = root.join("clip");
        frames::write_clip(&clip, &crate::data::toy_clip(1, 2, 32, 32), 32, 32).unwrap();
        let manifest = root.join("eval.txt");
        frames::write_manifest(&manifest, &[clip]).unwrap();
        ExperimentSpec {
            checkpoint: ckpt,
            manifest,
            cbr_grid: vec![0.005, 0.008],
            snr_grid: vec![0.0, 10.0],
            seeds: vec![3],
            output_dir: root.join("sweep"),
            baselines: vec![],
        }
    }

    #[test]
    fn grid_counting_sorting_and_idempotence() {
        let root = tempfile::tempdir().unwrap();
        let spec = fixture(root.path());
        let first = run_sweep(&spec).unwrap();
        assert_eq!(first.added, 4);
        let rows = results::read_results(&first.results).unwrap();
        assert_eq!(rows.len(), 4);
        let mut sorted = rows.clone();
        results::sort_rows(&mut sorted);
        assert_eq!(rows, sorted);
        let bytes = fs::read(&first.results).unwrap();

        let second = run_sweep(&spec).unwrap();
        assert_eq!((second.added, second.skipped_cells), (0, 4));
        assert_eq!(fs::read(&first.results).unwrap(), bytes);

        let more = ExperimentSpec { seeds: vec![3, 4], ..spec.clone() };
        assert_eq!(run_sweep(&more).unwrap().added, 4);
        let rows = results::read_results(&first.results).unwrap();
        assert_eq!(rows.len(), 8);

        // recomputing from scratch reproduces the stored values
        let fresh = ExperimentSpec { output_dir: root.path().join("fresh"), ..spec };
        run_sweep(&fresh).unwrap();
        assert_eq!(fs::read(root.path().join("fresh").join(RESULTS_FILE)).unwrap(), bytes);
    }

    #[test]
    fn failing_cells_are_recorded() {
        let root = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec { cbr_grid: vec![0.0001, 0.005], snr_grid: vec![10.0], ..fixture(root.path()) };
        let out = run_sweep(&spec).unwrap();
        assert_eq!(out.added, 1);
        assert_eq!(out.failures.len(), 1);
        assert!(out.failures[0].error.contains("minimum feasible CBR"));
        assert!(spec.output_dir.join(FAILURES_FILE).exists());
    }

    #[test]
    fn spec_validation() {
        let root = tempfile::tempdir().unwrap();
        let spec = fixture(root.path());
        assert!(spec.validate().is_ok());
        for bad in [
            ExperimentSpec { cbr_grid: vec![], ..spec.clone() },
            ExperimentSpec { cbr_grid: vec![0.01, 0.01], ..spec.clone() },
            ExperimentSpec { snr_grid: vec![10.0, 5.0], ..spec.clone() },
            ExperimentSpec { seeds: vec![], ..spec.clone() },
        ] {
            assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
        }
    }

    #[test]
    fn ingest_and_report() {
        let root = tempfile::tempdir().unwrap();
        let spec = fixture(root.path());
        let csv = root.path().join("h265.csv");
        fs::write(&csv, "label,cbr,snr_db,psnr_db,ms_ssim\nH.265,0.005,10,20,0.8\nH.265,0.008,10,22,0.85\nH.265,0.008,0,12,0.5\n").unwrap();
        let (points, stored) = ingest_baseline(&csv, &spec.output_dir).unwrap();
        assert_eq!(points.len(), 3);
        assert_eq!(results::read_baseline(&stored).unwrap(), points);
        let out = run_sweep(&spec).unwrap();
        let svg = fs::read_to_string(&out.plots[0]).unwrap();
        assert!(svg.contains("H.265"));
        let (summary, plots) = report(&out.results, &spec.output_dir, &[]).unwrap();
        assert_eq!(summary.len(), 4);
        assert_eq!(plots.len(), 4);
        assert!(summary.iter().all(|s| s.samples == 1));
    }
}
