//! Chromatin-tracing tables: parsing, per-cell partial distance matrices,
//! the row-dropping benchmark and imputation reports.
//!
//! Input rows are `segment, chromosome, n, z, x, y` separated by commas or
//! tabs; missing probes carry the literal `nan` in all three coordinates.

use std::collections::BTreeMap;
use std::io::BufRead;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complete::{ensemble_mean_complete_all, nn_complete, CompletionResult};
pub use crate::diffusion::DiffusionModel;
use crate::diffusion::{diffusion_complete, InpaintMethod, SamplerConfig};
use crate::edm::{rank_fraction, DistanceMatrix, Mask, MaskedMatrix, RankNorm};
use crate::error::{Error, Result};
use crate::metrics::rmse_masked;
use crate::rng;

/// Probes dropped on top of the missing ones in the example cell.
pub const EXAMPLE_DROPPED_PROBES: [usize; 10] = [1, 3, 14, 23, 26, 39, 43, 51, 59, 61];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FishProbe {
    /// 1-based probe number.
    pub n: usize,
    pub position: [f64; 3],
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FishCell {
    pub chromosome_index: i64,
    pub probes: Vec<FishProbe>,
}

impl FishCell {
    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    /// 1-based numbers of the absent probes.
    pub fn absent(&self) -> Vec<usize> {
        self.probes.iter().filter(|p| !p.present).map(|p| p.n).collect()
    }

    pub fn absent_count(&self) -> usize {
        self.probes.iter().filter(|p| !p.present).count()
    }
}

fn parse_line(line: &str, delim: char, lineno: usize) -> Result<(i64, FishProbe)> {
    let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
    if fields.len() != 6 {
        return Err(Error::Parse {
            line: lineno,
            message: format!("expected 6 fields, found {}", fields.len()),
        });
    }
    let bad = |what: &str, v: &str| Error::Parse {
        line: lineno,
        message: format!("invalid {what} {v:?}"),
    };
    fields[0].parse::<i64>().map_err(|_| bad("segment index", fields[0]))?;
    let chrom = fields[1]
        .parse::<i64>()
        .map_err(|_| bad("chromosome index", fields[1]))?;
    let n = fields[2].parse::<usize>().map_err(|_| bad("probe number", fields[2]))?;
    let nan: Vec<bool> = fields[3..].iter().map(|f| f.eq_ignore_ascii_case("nan")).collect();
    let probe = if nan.iter().all(|&b| b) {
        FishProbe {
            n,
            position: [f64::NAN; 3],
            present: false,
        }
    } else if nan.iter().any(|&b| b) {
        return Err(Error::Parse {
            line: lineno,
            message: "coordinates are partly nan".into(),
        });
    } else {
        let mut position = [0.0; 3];
        for (k, f) in fields[3..].iter().enumerate() {
            let v = f.parse::<f64>().map_err(|_| bad("coordinate", f))?;
            if !v.is_finite() {
                return Err(bad("coordinate", f));
            }
            position[k] = v;
        }
        FishProbe {
            n,
            position,
            present: true,
        }
    };
    Ok((chrom, probe))
}

/// Parse a probe table into cells ordered by chromosome index.
pub fn parse_fish_table(input: impl BufRead) -> Result<Vec<FishCell>> {
    let mut delim = None;
    let mut seen_data = false;
    let mut cells: BTreeMap<i64, Vec<FishProbe>> = BTreeMap::new();
    for (k, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let d = *delim.get_or_insert(if text.contains('\t') { '\t' } else { ',' });
        match parse_line(text, d, lineno) {
            Ok((chrom, probe)) => {
                seen_data = true;
                cells.entry(chrom).or_default().push(probe);
            }
            Err(_) if !seen_data && text.split(d).nth(2).is_some_and(|f| f.trim().parse::<usize>().is_err()) => {
                // header row
                seen_data = true;
            }
            Err(e) => return Err(e),
        }
    }
    cells
        .into_iter()
        .map(|(chromosome_index, mut probes)| {
            probes.sort_by_key(|p| p.n);
            for (k, p) in probes.iter().enumerate() {
                if p.n != k + 1 {
                    return Err(Error::Format(format!(
                        "cell {chromosome_index}: probe numbers are not contiguous from 1 (found {} at position {})",
                        p.n,
                        k + 1
                    )));
                }
            }
            Ok(FishCell {
                chromosome_index,
                probes,
            })
        })
        .collect()
}

/// Squared distances in nm² over all probe slots; absent probes are fully
/// masked.
pub fn cell_to_masked_edm(cell: &FishCell) -> Result<MaskedMatrix> {
    let present = cell.probes.iter().filter(|p| p.present).count();
    if present < 2 {
        return Err(Error::invalid(format!(
            "cell {} has {present} present probes, need at least 2",
            cell.chromosome_index
        )));
    }
    let n = cell.len();
    let p = &cell.probes;
    let data = DMatrix::from_fn(n, n, |i, j| {
        if i == j || !p[i].present || !p[j].present {
            0.0
        } else {
            (0..3).map(|c| (p[i].position[c] - p[j].position[c]).powi(2)).sum()
        }
    });
    let mask = Mask::from_fn(n, |i, j| p[i].present && p[j].present);
    MaskedMatrix::new(&DistanceMatrix::new(data, true)?, mask)
}

/// Cells with exactly `missing_rows` absent probes.
pub fn select_cells(cells: &[FishCell], missing_rows: usize) -> Vec<FishCell> {
    cells
        .iter()
        .filter(|c| c.absent_count() == missing_rows)
        .cloned()
        .collect()
}

/// Rows with at least one known entry.
pub fn present_rows(mm: &MaskedMatrix) -> Vec<usize> {
    let n = mm.n();
    (0..n).filter(|&i| (0..n).any(|j| mm.mask().is_known(i, j))).collect()
}

/// Hide every entry in the given rows and columns (0-based). Returns the
/// masked matrix and the mask of newly hidden, previously known entries.
pub fn drop_rows(mm: &MaskedMatrix, rows: &[usize]) -> Result<(MaskedMatrix, Mask)> {
    let n = mm.n();
    if let Some(&r) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::invalid(format!("row {r} out of range for n = {n}")));
    }
    let mut hidden = vec![false; n];
    for &r in rows {
        hidden[r] = true;
    }
    let keep = Mask::from_fn(n, |i, j| !hidden[i] && !hidden[j]);
    let out = mm.restrict(&keep)?;
    let eval = mm.mask().difference(out.mask())?;
    Ok((out, eval))
}

/// Drop `k` present rows chosen uniformly with stream `index` of `seed`.
pub fn drop_additional_indexed(mm: &MaskedMatrix, k: usize, seed: u64, index: u64) -> Result<(MaskedMatrix, Mask)> {
    let present = present_rows(mm);
    if k + 2 > present.len() {
        return Err(Error::invalid(format!(
            "cannot drop {k} of {} present rows and keep two",
            present.len()
        )));
    }
    let mut r = rng::stream(seed, index);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut r, present.len(), k)
        .into_iter()
        .map(|p| present[p])
        .collect();
    picked.sort_unstable();
    drop_rows(mm, &picked)
}

pub fn drop_additional(mm: &MaskedMatrix, k: usize, seed: u64) -> Result<(MaskedMatrix, Mask)> {
    drop_additional_indexed(mm, k, seed, 0)
}

/// One benchmark instance: the cell as measured, the input after dropping
/// rows, and the entries to score.
#[derive(Debug, Clone)]
pub struct FishTask {
    pub cell: i64,
    pub truth: MaskedMatrix,
    pub input: MaskedMatrix,
    pub eval: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropSpec {
    /// `k` uniformly chosen present rows per cell; cell `c` uses stream `c`.
    Random(usize),
    /// Fixed 1-based probe numbers.
    Probes(Vec<usize>),
}

pub fn prepare_tasks(cells: &[FishCell], drop: &DropSpec, seed: u64) -> Result<Vec<FishTask>> {
    cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let truth = cell_to_masked_edm(cell)?;
            let (input, eval) = match drop {
                DropSpec::Random(k) => drop_additional_indexed(&truth, *k, seed, c as u64)?,
                DropSpec::Probes(ps) => {
                    if ps.contains(&0) {
                        return Err(Error::invalid("probe numbers are 1-based"));
                    }
                    let rows: Vec<usize> = ps.iter().map(|p| p - 1).collect();
                    drop_rows(&truth, &rows)?
                }
            };
            Ok(FishTask {
                cell: cell.chromosome_index,
                truth,
                input,
                eval,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FishMethod {
    Nn,
    EnsembleMean,
    Ddpm,
    Repaint,
    Ddrm,
    Ddnm,
}

impl FishMethod {
    pub fn name(self) -> &'static str {
        match self {
            FishMethod::Nn => "nn",
            FishMethod::EnsembleMean => "ensemble-mean",
            FishMethod::Ddpm => "ddpm",
            FishMethod::Repaint => "repaint",
            FishMethod::Ddrm => "ddrm",
            FishMethod::Ddnm => "ddnm",
        }
    }

    pub fn inpaint_method(self) -> Option<InpaintMethod> {
        match self {
            FishMethod::Ddpm => Some(InpaintMethod::Ddpm),
            FishMethod::Repaint => Some(InpaintMethod::Repaint),
            FishMethod::Ddrm => Some(InpaintMethod::Ddrm),
            FishMethod::Ddnm => Some(InpaintMethod::Ddnm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FishConfig {
    pub method: FishMethod,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Posterior draws averaged per cell (diffusion methods).
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_rank() -> usize {
    5
}

fn default_samples() -> usize {
    1
}

impl FishConfig {
    pub fn new(method: FishMethod) -> Self {
        Self {
            method,
            sampler: SamplerConfig::default(),
            seed: 0,
            rank: 5,
            samples: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: i64,
    /// RMSE of raw distances (nm) over the scored entries.
    pub rmse_nm: f64,
    pub rank_fraction: f64,
    /// Entries filled by the nearest-neighbor fallback.
    pub fallback_entries: usize,
    /// `(offset, size)` of the block passed to the model when the cell size
    /// differs from the model's.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FishSummary {
    pub method: FishMethod,
    pub rmse_mean: f64,
    /// Standard error of the mean over cells.
    pub rmse_err: f64,
    pub rank_mean: f64,
    pub rmse_units: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_hurst: Option<f64>,
    pub cells: Vec<CellReport>,
}

#[derive(Debug, Clone)]
pub struct FishOutcome {
    pub summary: FishSummary,
    /// Completed squared-distance matrices (nm²), one per task.
    pub completed: Vec<DistanceMatrix>,
}

/// Completed matrix, fallback entries and diffusion window of one task.
type Imputed = (DistanceMatrix, usize, Option<(usize, usize)>);

/// Complete every task's input and score it against the held-out entries.
pub fn impute_cells(tasks: &[FishTask], cfg: &FishConfig, model: Option<&DiffusionModel>) -> Result<FishOutcome> {
    let results: Vec<Imputed> = match cfg.method {
        FishMethod::Nn => tasks
            .par_iter()
            .map(|t| nn_complete(&t.input).map(|r| (r.completed, 0, None)))
            .collect::<Result<_>>()?,
        FishMethod::EnsembleMean => {
            let inputs: Vec<MaskedMatrix> = tasks.iter().map(|t| t.input.clone()).collect();
            ensemble_mean_complete_all(&inputs)?
                .into_iter()
                .map(|r: CompletionResult| (r.completed, r.fallback_entries, None))
                .collect()
        }
        other => {
            let method = other.inpaint_method().expect("diffusion method");
            let model = model
                .ok_or_else(|| Error::MissingModel(format!("{} needs a trained noise predictor", other.name())))?;
            let chain = cfg.sampler.chain(model.schedule)?;
            tasks
                .par_iter()
                .enumerate()
                .map(|(k, t)| {
                    diffusion_complete(
                        &t.input,
                        method,
                        model,
                        &chain,
                        &cfg.sampler,
                        cfg.samples,
                        cfg.seed,
                        k as u64,
                    )
                    .map(|c| (c.completed, c.fallback_entries, c.window))
                })
                .collect::<Result<_>>()?
        }
    };
    let mut cells = Vec::with_capacity(tasks.len());
    let mut completed = Vec::with_capacity(tasks.len());
    for (t, (a, fallback, window)) in tasks.iter().zip(results) {
        let truth = t.truth.values();
        let rmse = if t.eval.known_count() > 0 {
            rmse_masked(&a, truth, &t.eval.complement())?
        } else {
            0.0
        };
        cells.push(CellReport {
            cell: t.cell,
            rmse_nm: rmse,
            rank_fraction: rank_fraction(&a, cfg.rank.min(a.n()), RankNorm::SpectralL2)?,
            fallback_entries: fallback,
            window,
        });
        completed.push(a);
    }
    let count = cells.len().max(1) as f64;
    let rmse_mean = cells.iter().map(|c| c.rmse_nm).sum::<f64>() / count;
    let rmse_err = if cells.len() > 1 {
        let var = cells.iter().map(|c| (c.rmse_nm - rmse_mean).powi(2)).sum::<f64>() / (count - 1.0);
        (var / count).sqrt()
    } else {
        0.0
    };
    let rank_mean = cells.iter().map(|c| c.rank_fraction).sum::<f64>() / count;
    Ok(FishOutcome {
        summary: FishSummary {
            method: cfg.method,
            rmse_mean,
            rmse_err,
            rank_mean,
            rmse_units: "nm (raw distances)".into(),
            model_hurst: model
                .filter(|_| cfg.method.inpaint_method().is_some())
                .map(|m| m.normalization.hurst),
            cells,
        },
        completed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FishScaling {
    /// `(s, mean raw distance, pairs)` for every separation with known pairs.
    pub curve: Vec<(usize, f64, usize)>,
    pub slope: f64,
    pub intercept: f64,
    pub window: (usize, usize),
    /// Reference exponent drawn alongside the data.
    pub reference_slope: f64,
}

/// Mean raw distance along each diagonal over known entries of all cells,
/// with a log-log slope over `[2, n/4]`.
pub fn fish_scaling(cells: &[MaskedMatrix]) -> Result<FishScaling> {
    let n = cells.first().ok_or_else(|| Error::invalid("no cells"))?.n();
    if cells.iter().any(|c| c.n() != n) {
        return Err(Error::invalid("cells differ in size"));
    }
    let mut curve = Vec::new();
    for s in 1..n {
        let (mut sum, mut count) = (0.0, 0usize);
        for c in cells {
            for i in 0..n - s {
                if let Some(v) = c.known(i, i + s) {
                    sum += if c.is_squared() { v.sqrt() } else { v };
                    count += 1;
                }
            }
        }
        if count > 0 {
            curve.push((s, sum / count as f64, count));
        }
    }
    let window = (2, (n / 4).max(3));
    let pts: Vec<(f64, f64)> = curve
        .iter()
        .filter(|(s, x, _)| (window.0..=window.1).contains(s) && *x > 0.0)
        .map(|&(s, x, _)| ((s as f64).ln(), x.ln()))
        .collect();
    let (slope, intercept) = if pts.len() >= 2 {
        let m = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
        (slope, my - slope * mx)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(FishScaling {
        curve,
        slope,
        intercept,
        window,
        reference_slope: 1.0 / 3.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(i64, usize, Option<[f64; 3]>)]) -> String {
        let mut s = String::from("Segment Index,Chromosome Index,n,Z,X,Y\n");
        for (k, (c, n, p)) in rows.iter().enumerate() {
            match p {
                Some(p) => s += &format!("{k},{c},{n},{},{},{}\n", p[0], p[1], p[2]),
                None => s += &format!("{k},{c},{n},nan,nan,nan\n"),
            }
        }
        s
    }

    #[test]
    fn parse_groups_and_orders() {
        let text = table(&[
            (2, 2, Some([0.0, 0.0, 100.0])),
            (1, 1, Some([0.0, 0.0, 0.0])),
            (2, 1, Some([0.0, 0.0, 0.0])),
            (1, 2, None),
        ]);
        let cells = parse_fish_table(text.as_bytes()).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].chromosome_index, 1);
        assert_eq!(cells[0].absent(), vec![2]);
        let m = cell_to_masked_edm(&cells[1]).unwrap();
        assert_eq!(m.known(0, 1), Some(1e4));
        assert!(cell_to_masked_edm(&cells[0]).is_err());
    }

    #[test]
    fn parse_errors() {
        assert!(parse_fish_table("".as_bytes()).unwrap().is_empty());
        let err = parse_fish_table("1,1,1,0,0,0\n2,1,2,0,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(parse_fish_table("1,1,1,0,0,0\n2,1,3,0,0,1\n".as_bytes()).is_err());
        assert!(parse_fish_table("1,1,1,nan,0,0\n".as_bytes()).is_err());
        // tab separated, no header
        let cells = parse_fish_table("1\t5\t1\t0\t0\t0\n2\t5\t2\t3\t4\t0\n".as_bytes()).unwrap();
        assert_eq!(cell_to_masked_edm(&cells[0]).unwrap().known(0, 1), Some(25.0));
    }

    fn synthetic(count: usize, n: usize, missing: usize) -> Vec<FishCell> {
        (0..count)
            .map(|c| FishCell {
                chromosome_index: c as i64,
                probes: (1..=n)
                    .map(|k| FishProbe {
                        n: k,
                        position: [k as f64 * 10.0, (k * k) as f64, c as f64],
                        present: k > missing,
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn selection_by_missing_rows() {
        let mut cells = synthetic(3, 10, 0);
        cells.extend(synthetic(2, 10, 3));
        assert_eq!(select_cells(&cells, 0).len(), 3);
        assert_eq!(select_cells(&cells, 3).len(), 2);
        assert!(select_cells(&cells, 1).is_empty());
    }

    #[test]
    fn dropping_rows() {
        let cell = &synthetic(1, 12, 2)[0];
        let mm = cell_to_masked_edm(cell).unwrap();
        let (same, eval) = drop_additional(&mm, 0, 1).unwrap();
        assert_eq!(same, mm);
        assert_eq!(eval.known_count(), 0);
        let (out, eval) = drop_additional(&mm, 3, 1).unwrap();
        assert_eq!(present_rows(&out).len(), 7);
        for (i, j) in eval.known_pairs() {
            assert!(mm.mask().is_known(i, j) && !out.mask().is_known(i, j));
        }
        assert_eq!(eval.known_count() + out.mask().known_count(), mm.mask().known_count());
        assert!(drop_additional(&mm, 9, 1).is_err());
    }

    #[test]
    fn ensemble_mean_with_single_cell_falls_back() {
        let cells = synthetic(1, 8, 0);
        let tasks = prepare_tasks(&cells, &DropSpec::Probes(vec![2, 5]), 0).unwrap();
        let out = impute_cells(&tasks, &FishConfig::new(FishMethod::EnsembleMean), None).unwrap();
        assert_eq!(
            out.summary.cells[0].fallback_entries,
            tasks[0].input.mask().unknown_pairs().count()
        );
        assert!(impute_cells(&tasks, &FishConfig::new(FishMethod::Ddrm), None).is_err());
    }

    #[test]
    fn scaling_of_complete_line() {
        let cell = FishCell {
            chromosome_index: 0,
            probes: (1..=20)
                .map(|k| FishProbe {
                    n: k,
                    position: [k as f64, 0.0, 0.0],
                    present: true,
                })
                .collect(),
        };
        let sc = fish_scaling(&[cell_to_masked_edm(&cell).unwrap()]).unwrap();
        assert_eq!(sc.curve.len(), 19);
        assert!((sc.slope - 1.0).abs() < 1e-12);
    }
}
