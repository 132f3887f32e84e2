use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use edmkit::diffusion::{analytic_epsilon, default_schedule, GaussianEnsembleSpec, NormalizationSpec, SamplerConfig};
use edmkit::edm::{edm_from_trajectory, row_col_mask, validate_edm, DistanceMatrix, MaskedMatrix, ValidationOptions};
use edmkit::fbm::{generate_fbm, FbmParams};
use edmkit::fish::*;

fn cell373() -> FishCell {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cell373.csv");
    let mut cells = parse_fish_table(BufReader::new(File::open(path).unwrap())).unwrap();
    assert_eq!(cells.len(), 1);
    cells.remove(0)
}

fn missing_ratio(mm: &MaskedMatrix) -> f64 {
    mm.mask().missing_ratio()
}

#[test]
fn example_cell_parses() {
    let cell = cell373();
    assert_eq!(cell.chromosome_index, 373);
    assert_eq!(cell.len(), 65);
    assert_eq!(
        cell.absent(),
        vec![18, 20, 24, 27, 28, 32, 33, 34, 35, 36, 47, 49, 53, 54, 65]
    );
    assert_eq!(select_cells(std::slice::from_ref(&cell), 15).len(), 1);
}

#[test]
fn example_cell_matrix() {
    let cell = cell373();
    let mm = cell_to_masked_edm(&cell).unwrap();
    // probes 1 and 2: (8482,129943,64040) and (8441,129908,64041)
    assert_eq!(mm.known(0, 1), Some(41.0 * 41.0 + 35.0 * 35.0 + 1.0));
    // probes 19 and 21: (8463,130814,64030) and (8775,130133,63451)
    assert_eq!(
        mm.known(18, 20),
        Some(312.0f64.powi(2) + 681.0f64.powi(2) + 579.0f64.powi(2))
    );
    for p in cell.absent() {
        for j in 0..65 {
            assert!(mm.known(p - 1, j).is_none());
        }
    }
    assert_eq!(present_rows(&mm).len(), 50);
}

#[test]
fn example_drop_reaches_expected_sparsity() {
    let cell = cell373();
    let tasks = prepare_tasks(std::slice::from_ref(&cell), &DropSpec::Probes(EXAMPLE_DROPPED_PROBES.to_vec()), 0).unwrap();
    let mu = missing_ratio(&tasks[0].input);
    assert!((mu - 0.63).abs() < 0.01, "mu = {mu}");
    let random = prepare_tasks(&[cell], &DropSpec::Random(10), 7).unwrap();
    assert!((missing_ratio(&random[0].input) - mu).abs() < 1e-12);
    for (i, j) in random[0].eval.known_pairs() {
        assert!(random[0].truth.mask().is_known(i, j));
    }
}

#[test]
fn imputed_example_is_structurally_valid() {
    let tasks = prepare_tasks(&[cell373()], &DropSpec::Probes(EXAMPLE_DROPPED_PROBES.to_vec()), 0).unwrap();
    for method in [FishMethod::Nn, FishMethod::EnsembleMean] {
        let out = impute_cells(&tasks, &FishConfig::new(method), None).unwrap();
        let v = validate_edm(out.completed[0].matrix(), &ValidationOptions::with_tol(1e-6));
        assert!(v.is_structurally_valid());
        assert!(out.summary.rmse_mean > 0.0);
        let json = serde_json::to_value(&out.summary).unwrap();
        assert_eq!(json["method"], method.name());
    }
}

fn fbm_cells(count: usize, n: usize, seed: u64) -> Vec<DistanceMatrix> {
    let mut p = FbmParams::new(1.0 / 3.0, n).unwrap();
    p.step_scale = 150.0;
    generate_fbm(&p, count, seed)
        .unwrap()
        .iter()
        .map(edm_from_trajectory)
        .collect()
}

#[test]
fn diffusion_beats_nearest_neighbor_on_fbm_cells() {
    // whole rows missing at the sparsity of the chromatin benchmark
    let n = 24;
    let train = fbm_cells(4000, n, 1);
    let norm = NormalizationSpec::fit(&train, 1.0 / 3.0).unwrap();
    let spec = GaussianEnsembleSpec::fit_matrices(&train, &norm).unwrap();
    let schedule = default_schedule();
    let eps = analytic_epsilon(&spec, &schedule);
    let model = DiffusionModel {
        predictor: &eps,
        schedule: &schedule,
        normalization: norm,
    };
    let tasks: Vec<FishTask> = fbm_cells(40, n, 2)
        .into_iter()
        .enumerate()
        .map(|(k, m)| {
            let truth = MaskedMatrix::new(&m, row_col_mask(n, &[]).unwrap()).unwrap();
            let (input, eval) = drop_additional_indexed(&truth, 10, 3, k as u64).unwrap();
            FishTask {
                cell: k as i64,
                truth,
                input,
                eval,
            }
        })
        .collect();
    let nn = impute_cells(&tasks, &FishConfig::new(FishMethod::Nn), None).unwrap();
    let mut cfg = FishConfig::new(FishMethod::Ddrm);
    // the mean of several posterior draws; a single draw carries the full
    // posterior spread
    cfg.samples = 8;
    cfg.sampler = SamplerConfig {
        steps: 50,
        ..SamplerConfig::default()
    };
    let ddrm = impute_cells(&tasks, &cfg, Some(&model)).unwrap();
    println!("nn {:.2} ddrm {:.2}", nn.summary.rmse_mean, ddrm.summary.rmse_mean);
    assert!(ddrm.summary.rmse_mean < nn.summary.rmse_mean);
    for m in &ddrm.completed {
        assert!(validate_edm(m.matrix(), &ValidationOptions::with_tol(1e-6)).is_structurally_valid());
    }
}

#[test]
fn model_size_mismatch_is_cropped_and_reported() {
    let n = 10;
    let train = fbm_cells(500, 8, 3);
    let norm = NormalizationSpec::fit(&train, 1.0 / 3.0).unwrap();
    let spec = GaussianEnsembleSpec::fit_matrices(&train, &norm).unwrap();
    let schedule = default_schedule();
    let eps = analytic_epsilon(&spec, &schedule);
    let model = DiffusionModel {
        predictor: &eps,
        schedule: &schedule,
        normalization: norm,
    };
    let m = fbm_cells(1, n, 4).remove(0);
    let truth = MaskedMatrix::new(&m, row_col_mask(n, &[]).unwrap()).unwrap();
    let input = MaskedMatrix::new(&m, row_col_mask(n, &[0, 4]).unwrap()).unwrap();
    let eval = truth.mask().difference(input.mask()).unwrap();
    let tasks = [FishTask {
        cell: 0,
        truth,
        input,
        eval,
    }];
    let mut cfg = FishConfig::new(FishMethod::Ddnm);
    cfg.sampler.steps = 20;
    let out = impute_cells(&tasks, &cfg, Some(&model)).unwrap();
    let c = &out.summary.cells[0];
    assert_eq!(c.window, Some((1, 8)));
    // rows 0 and 9 lie outside the window: row 0 is fully unknown (9 pairs)
    // and row 9 misses its pair with dropped row 4
    assert_eq!(c.fallback_entries, 10);
    assert_eq!(out.summary.model_hurst, Some(1.0 / 3.0));
}

#[test]
fn scaling_of_synthetic_cells() {
    let cells: Vec<MaskedMatrix> = fbm_cells(300, 64, 5)
        .iter()
        .map(|m| MaskedMatrix::new(m, row_col_mask(64, &[3, 20, 41]).unwrap()).unwrap())
        .collect();
    let sc = fish_scaling(&cells).unwrap();
    assert!((sc.slope - 1.0 / 3.0).abs() < 0.03, "slope {}", sc.slope);
}
