//! Report bundle: transfer heatmap, per-step similarity curves, and
//! activation-state cosine matrices, each as a PNG with a backing CSV.

use image::{Rgb, RgbImage};
use ndarray::{Array2, Axis};
use std::path::{Path, PathBuf};

use crate::backbone::Backbone;
use crate::error::Result;
use crate::evalbench::TransferMatrix;
use crate::pool::PromptPool;
use crate::task_data::TaskDataset;
use crate::trainer::TaskResult;

/// Everything a report bundle can draw from. Absent pieces skip their
/// figures with a warning rather than failing the run.
pub struct ReportInputs<'a> {
    pub transfer: Option<&'a TransferMatrix>,
    pub results: &'a [TaskResult],
    pub activation: Option<(&'a Backbone, &'a PromptPool, &'a [TaskDataset])>,
}

/// Blue (negative) through white (zero) to red (positive).
fn diverging_color(value: f64, max_abs: f64) -> Rgb<u8> {
    if max_abs == 0.0 {
        return Rgb([255, 255, 255]);
    }
    let t = (value / max_abs).clamp(-1.0, 1.0);
    let fade = |c: f64| (255.0 - c * t.abs()).round() as u8;
    if t >= 0.0 {
        Rgb([255, fade(160.0), fade(160.0)])
    } else {
        Rgb([fade(160.0), fade(160.0), 255])
    }
}

const CELL: u32 = 32;

/// Transfer-reduction heatmap: rows are sources, columns targets, color
/// centered at zero so sign is readable directly.
pub fn transfer_heatmap(matrix: &TransferMatrix, path: &Path) -> Result<()> {
    let n = matrix.tasks.len() as u32;
    let mut max_abs: f64 = 0.0;
    for s in 0..matrix.tasks.len() {
        for t in 0..matrix.tasks.len() {
            if let Some(r) = matrix.reduction(s, t) {
                max_abs = max_abs.max(r.abs());
            }
        }
    }
    let mut img = RgbImage::from_pixel(n * CELL, n * CELL, Rgb([200, 200, 200]));
    for s in 0..matrix.tasks.len() {
        for t in 0..matrix.tasks.len() {
            let color = match matrix.reduction(s, t) {
                Some(r) => diverging_color(r, max_abs),
                None => Rgb([200, 200, 200]),
            };
            for dy in 0..CELL {
                for dx in 0..CELL {
                    img.put_pixel(t as u32 * CELL + dx, s as u32 * CELL + dy, color);
                }
            }
        }
    }
    img.save(path).map_err(|e| crate::Error::Config(format!("png write failed: {e}")))?;
    Ok(())
}

const PALETTE: [Rgb<u8>; 6] = [
    Rgb([214, 39, 40]),
    Rgb([31, 119, 180]),
    Rgb([44, 160, 44]),
    Rgb([255, 127, 14]),
    Rgb([148, 103, 189]),
    Rgb([23, 190, 207]),
];

/// Similarity-vs-step line chart for one task, one series per stored
/// prompt, plus a CSV with the raw values.
pub fn alpha_curve(result: &TaskResult, png: &Path, csv_path: &Path) -> Result<()> {
    let profiles = &result.alpha_profiles;
    let k = profiles[0].alpha.len();
    let steps = profiles.len();

    let mut w = csv::Writer::from_path(csv_path)?;
    let mut header = vec!["step".to_string()];
    header.extend(profiles[0].pool_task_ids.iter().cloned());
    w.write_record(&header)?;
    for p in profiles {
        let mut row = vec![format!("{}", p.step)];
        row.extend(p.alpha.iter().map(|a| format!("{a}")));
        w.write_record(&row)?;
    }
    w.flush()?;

    let (width, height, margin) = (480u32, 320u32, 20u32);
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let plot_w = (width - 2 * margin) as f64;
    let plot_h = (height - 2 * margin) as f64;
    let to_px = |step: usize, alpha: f64| -> (u32, u32) {
        let x = margin as f64 + plot_w * step as f64 / (steps.max(2) - 1) as f64;
        let y = margin as f64 + plot_h * (1.0 - alpha.clamp(0.0, 1.0));
        (x.round() as u32, y.round() as u32)
    };
    for series in 0..k {
        let color = PALETTE[series % PALETTE.len()];
        let mut prev: Option<(u32, u32)> = None;
        for (i, p) in profiles.iter().enumerate() {
            let pt = to_px(i, p.alpha[series]);
            if let Some(a) = prev {
                draw_line(&mut img, a, pt, color);
            }
            prev = Some(pt);
        }
    }
    img.save(png).map_err(|e| crate::Error::Config(format!("png write failed: {e}")))?;
    Ok(())
}

fn draw_line(img: &mut RgbImage, a: (u32, u32), b: (u32, u32), color: Rgb<u8>) {
    let (x0, y0) = (a.0 as i64, a.1 as i64);
    let (x1, y1) = (b.0 as i64, b.1 as i64);
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn cosine(a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>) -> f64 {
    let dot = a.dot(b);
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean pairwise cosine of last-layer activation states across the stored
/// task prompts, averaged over every dataset's test samples.
pub fn activation_cosine_matrix(
    backbone: &Backbone,
    pool: &PromptPool,
    datasets: &[TaskDataset],
    samples_per_task: usize,
) -> Result<Array2<f64>> {
    let k = pool.len();
    let mut acc = Array2::<f64>::zeros((k, k));
    let mut count = 0usize;
    for dataset in datasets {
        for inst in dataset.test.instances.iter().take(samples_per_task) {
            let states: Vec<ndarray::Array1<f64>> = pool
                .entries()
                .iter()
                .map(|p| {
                    backbone
                        .forward_with_prompt(p.matrix(), &inst.tokens, crate::task_data::BOS_TOKEN)
                        .map(|probe| probe.s)
                })
                .collect::<Result<_>>()?;
            for i in 0..k {
                for j in 0..k {
                    acc[[i, j]] += cosine(&states[i], &states[j]);
                }
            }
            count += 1;
        }
    }
    if count > 0 {
        acc /= count as f64;
    }
    Ok(acc)
}

/// Mean of the off-diagonal entries of a square matrix.
pub fn mean_off_diagonal(m: &Array2<f64>) -> f64 {
    let k = m.nrows();
    if k < 2 {
        return 0.0;
    }
    let total: f64 = m
        .indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|(_, v)| *v)
        .sum();
    total / (k * (k - 1)) as f64
}

/// Square labeled matrix as CSV: header row of labels, then one row each.
pub fn save_square_csv(m: &Array2<f64>, labels: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["task".to_string()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)?;
    for (i, row) in m.axis_iter(Axis(0)).enumerate() {
        let mut rec = vec![labels[i].clone()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn matrix_heatmap(m: &Array2<f64>, path: &Path) -> Result<()> {
    let k = m.nrows() as u32;
    let max_abs = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut img = RgbImage::new(k * CELL, k * CELL);
    for ((i, j), v) in m.indexed_iter() {
        let color = diverging_color(*v, max_abs);
        for dy in 0..CELL {
            for dx in 0..CELL {
                img.put_pixel(j as u32 * CELL + dx, i as u32 * CELL + dy, color);
            }
        }
    }
    img.save(path).map_err(|e| crate::Error::Config(format!("png write failed: {e}")))?;
    Ok(())
}

/// Writes every figure the inputs allow into `dir` and returns the paths.
/// Figures with no backing data are skipped with a warning.
pub fn emit_reports(inputs: &ReportInputs, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    match inputs.transfer {
        Some(matrix) => {
            let png = dir.join("transfer_heatmap.png");
            let csv_path = dir.join("transfer_matrix.csv");
            transfer_heatmap(matrix, &png)?;
            matrix.save_csv(&csv_path)?;
            written.push(png);
            written.push(csv_path);
        }
        None => log::warn!("no transfer matrix: skipping the transfer heatmap"),
    }

    for result in inputs.results {
        if result.alpha_profiles.is_empty() {
            log::warn!(
                "task {} has no similarity profiles: skipping its step curve",
                result.task_id
            );
            continue;
        }
        let png = dir.join(format!("alpha_steps_{}.png", result.task_id));
        let csv_path = dir.join(format!("alpha_steps_{}.csv", result.task_id));
        alpha_curve(result, &png, &csv_path)?;
        written.push(png);
        written.push(csv_path);
    }

    match &inputs.activation {
        Some((backbone, pool, datasets)) if pool.len() >= 2 => {
            let m = activation_cosine_matrix(backbone, pool, datasets, 8)?;
            let labels: Vec<String> = pool
                .entries()
                .iter()
                .map(|p| p.task_id().to_string())
                .collect();
            let png = dir.join("activation_cosine.png");
            let csv_path = dir.join("activation_cosine.csv");
            matrix_heatmap(&m, &png)?;
            save_square_csv(&m, &labels, &csv_path)?;
            written.push(png);
            written.push(csv_path);
        }
        _ => log::warn!("no activation probes: skipping the activation cosine figure"),
    }

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::SimilarityProfile;

    fn toy_matrix() -> TransferMatrix {
        TransferMatrix {
            tasks: vec!["a".into(), "b".into()],
            baseline: vec![0.5, 0.5],
            cell: vec![vec![None, Some(0.4)], vec![Some(0.7), None]],
            failures: Vec::new(),
        }
    }

    #[test]
    fn heatmap_colors_follow_the_sign() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heat.png");
        let m = toy_matrix();
        transfer_heatmap(&m, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        // cell (0,1): r = -10 points -> blue dominant
        let neg = img.get_pixel(CELL + CELL / 2, CELL / 2);
        assert!(neg[2] > neg[0]);
        // cell (1,0): r = +20 points -> red dominant
        let pos = img.get_pixel(CELL / 2, CELL + CELL / 2);
        assert!(pos[0] > pos[2]);
        // diagonal is neutral gray
        let diag = img.get_pixel(CELL / 2, CELL / 2);
        assert_eq!(diag[0], diag[1]);
        assert_eq!(diag[1], diag[2]);
    }

    fn profile_result(series: usize, steps: usize) -> TaskResult {
        let profiles: Vec<SimilarityProfile> = (0..steps)
            .map(|s| {
                // softmax-like rows that sum to one
                let mut alpha: Vec<f64> = (0..series)
                    .map(|i| ((i + s) % series) as f64 + 1.0)
                    .collect();
                let total: f64 = alpha.iter().sum();
                alpha.iter_mut().for_each(|a| *a /= total);
                SimilarityProfile {
                    task_id: "t".into(),
                    step: s,
                    pool_task_ids: (0..series).map(|i| format!("p{i}")).collect(),
                    alpha,
                }
            })
            .collect();
        TaskResult {
            task_id: "t".into(),
            step_losses: vec![],
            train_losses: vec![],
            val_losses: vec![],
            val_accuracies: vec![],
            best_epoch: 0,
            test_accuracy: 0.5,
            final_alpha: vec![],
            pool_task_ids: vec![],
            alpha_profiles: profiles,
            wall_clock_secs: 0.0,
        }
    }

    #[test]
    fn alpha_curve_csv_preserves_the_simplex() {
        let dir = tempfile::tempdir().unwrap();
        let result = profile_result(4, 12);
        let png = dir.path().join("alpha.png");
        let csv_path = dir.path().join("alpha.csv");
        alpha_curve(&result, &png, &csv_path).unwrap();
        assert!(png.exists());
        let mut r = csv::Reader::from_path(&csv_path).unwrap();
        assert_eq!(r.headers().unwrap().len(), 5);
        for rec in r.records() {
            let rec = rec.unwrap();
            let sum: f64 = (1..5).map(|i| rec[i].parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_inputs_skip_everything() {
        let dir = tempfile::tempdir().unwrap();
        let inputs = ReportInputs {
            transfer: None,
            results: &[],
            activation: None,
        };
        let written = emit_reports(&inputs, dir.path()).unwrap();
        assert!(written.is_empty());
    }

    #[test]
    fn off_diagonal_mean_ignores_the_diagonal() {
        let m = ndarray::array![[1.0, 0.2], [0.4, 1.0]];
        assert!((mean_off_diagonal(&m) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn square_csv_roundtrip_shape() {
        let dir = tempfile::tempdir().unwrap();
        let m = ndarray::array![[1.0, 0.25], [0.25, 1.0]];
        let path = dir.path().join("cos.csv");
        save_square_csv(&m, &["a".into(), "b".into()], &path).unwrap();
        let mut r = csv::Reader::from_path(&path).unwrap();
        let rows: Vec<_> = r.records().collect::<std::result::Result<_, _>>().unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[0][0], "a");
        assert_eq!(rows[0][2].parse::<f64>().unwrap(), 0.25);
    }
}
