//! Alignment export: decode examples, capture attention scores and write
//! heatmap-ready CSVs plus grayscale PGM images.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use memattn_core::attention::{alignment_slice_k, combined_alignment, AttentionKind};
use memattn_core::decode::beam_search;
use memattn_core::seq2seq::{Model, EOS};
use memattn_core::Tensor;

use crate::data::load_dataset;
use crate::train::load_model;

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
    let cols = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(rows.len() * cols);
    for row in rows {
        if row.len() != cols {
            bail!("ragged attention rows");
        }
        data.extend_from_slice(row);
    }
    Tensor::from_vec(vec![rows.len(), cols], data).map_err(|e| anyhow::anyhow!("{e}"))
}

fn transpose(t: &Tensor) -> Tensor {
    let (rows, cols) = (t.rows(), t.cols());
    let mut out = Tensor::zeros(&[cols, rows]);
    for r in 0..rows {
        for c in 0..cols {
            out.set2(c, r, t.at2(r, c));
        }
    }
    out
}

/// CSV with a header row of target tokens and a first column of source
/// tokens; values carry 9 significant digits.
pub fn alignment_csv(matrix: &Tensor, source: &[usize], targets: &[String]) -> String {
    let mut out = String::new();
    for target in targets {
        let _ = write!(out, ",{target}");
    }
    out.push('\n');
    for (s, &tok) in source.iter().enumerate() {
        let _ = write!(out, "{tok}");
        for t in 0..matrix.cols() {
            let _ = write!(out, ",{:.8e}", matrix.at2(s, t));
        }
        out.push('\n');
    }
    out
}

/// 8-bit binary PGM, one pixel per cell, min-max normalized per image.
pub fn alignment_pgm(matrix: &Tensor) -> Vec<u8> {
    let (rows, cols) = (matrix.rows(), matrix.cols());
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    let lo = matrix.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = matrix
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for &v in matrix.data() {
        out.push((255.0 * (v - lo) / span).round() as u8);
    }
    out
}

struct ExampleAlignment {
    combined: Tensor,
    /// Per-context slices, memory attention only.
    slices: Vec<Tensor>,
    targets: Vec<String>,
}

fn decode_alignment(model: &Model, source: &[usize], beam_size: usize) -> Result<ExampleAlignment> {
    let result =
        beam_search(model, source, beam_size, None).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut targets: Vec<String> = result.tokens.iter().map(|t| t.to_string()).collect();
    if result.attention.len() == targets.len() + 1 {
        targets.push(EOS.to_string());
    }
    let betas = matrix_from_rows(&result.attention)?;
    match model.config.attention_kind {
        AttentionKind::Memory => {
            let enc = model
                .encode_source(&[source.to_vec()])
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            let alpha_rows: Vec<Vec<f64>> = enc
                .alphas
                .as_ref()
                .context("memory model produced no encoder scores")?
                .iter()
                .map(|a| a.row_slice(0).to_vec())
                .collect();
            let alpha = matrix_from_rows(&alpha_rows)?;
            let combined =
                combined_alignment(&alpha, &betas).map_err(|e| anyhow::anyhow!("{e}"))?;
            let slices = (0..model.config.k)
                .map(|k| alignment_slice_k(&alpha, &betas, k))
                .collect::<memattn_core::Result<Vec<_>>>()
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            Ok(ExampleAlignment {
                combined,
                slices,
                targets,
            })
        }
        AttentionKind::Bahdanau | AttentionKind::Luong => Ok(ExampleAlignment {
            // Decode steps produce one weight row per target over source
            // positions; transpose to source-by-target.
            combined: transpose(&betas),
            slices: Vec::new(),
            targets,
        }),
        AttentionKind::None => bail!(
            "this checkpoint was trained without attention; there is nothing to visualize"
        ),
    }
}

/// Decodes the requested examples and writes `align-<i>.csv`,
/// `align-<i>-k<k>.csv` (memory only) and `align-<i>.pgm` into `out_dir`.
pub fn run_viz(
    checkpoint_path: &Path,
    data_path: &Path,
    examples: &[usize],
    beam_size: usize,
    out_dir: &Path,
) -> Result<()> {
    let (model, _) = load_model(checkpoint_path)?;
    if model.config.attention_kind == AttentionKind::None {
        bail!("this checkpoint was trained without attention; there is nothing to visualize");
    }
    let sources = load_dataset(data_path)?;
    std::fs::create_dir_all(out_dir)?;
    for &idx in examples {
        let source = sources.get(idx).with_context(|| {
            format!("example {idx} out of range ({} examples)", sources.len())
        })?;
        let alignment = decode_alignment(&model, source, beam_size)?;
        let csv = alignment_csv(&alignment.combined, source, &alignment.targets);
        std::fs::write(out_dir.join(format!("align-{idx}.csv")), csv)?;
        std::fs::write(
            out_dir.join(format!("align-{idx}.pgm")),
            alignment_pgm(&alignment.combined),
        )?;
        for (k, slice) in alignment.slices.iter().enumerate() {
            let csv = alignment_csv(slice, source, &alignment.targets);
            // Context indices are 1-based, matching the position table.
            std::fs::write(out_dir.join(format!("align-{idx}-k{}.csv", k + 1)), csv)?;
        }
    }
    Ok(())
}
