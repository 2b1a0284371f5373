//! Post-processing of captured attention: averaging, border trimming,
//! text-to-image extraction and singular spectra.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::Serialize;

use crate::backbone::{AttentionKind, AttentionRecord, TokenPartition};
use crate::error::{Error, Result};
use crate::numerics::{svd_singular_values, Tensor};

/// Dense row-major matrix of analysis values.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

fn head_mean(r: &AttentionRecord) -> Vec<f64> {
    let per = r.rows() * r.cols();
    let mut acc = vec![0.0; per];
    for head in r.matrix.data().chunks(per) {
        for (a, v) in acc.iter_mut().zip(head) {
            *a += v;
        }
    }
    let h = r.heads() as f64;
    acc.iter_mut().for_each(|a| *a /= h);
    acc
}

/// Mean over heads and over `records`, each weighted by the timesteps it
/// already covers. The result has a single head.
pub fn average_attention(records: &[AttentionRecord]) -> Result<AttentionRecord> {
    let first = records
        .first()
        .ok_or_else(|| Error::Argument("no attention records to average".into()))?;
    let (rows, cols) = (first.rows(), first.cols());
    let mut acc = vec![0.0; rows * cols];
    let mut weight = 0usize;
    for r in records {
        if r.rows() != rows || r.cols() != cols || r.queries != first.queries || r.keys != first.keys {
            return Err(Error::Data(format!(
                "layer {} record of {}x{} does not match {}x{}",
                r.layer_index,
                r.rows(),
                r.cols(),
                rows,
                cols
            )));
        }
        let w = r.timesteps.max(1);
        for (a, v) in acc.iter_mut().zip(head_mean(r)) {
            *a += v * w as f64;
        }
        weight += w;
    }
    acc.iter_mut().for_each(|a| *a /= weight as f64);
    Ok(AttentionRecord {
        layer_index: first.layer_index,
        kind: first.kind,
        matrix: Tensor::new(vec![1, rows, cols], acc)?,
        queries: first.queries.clone(),
        keys: first.keys.clone(),
        timesteps: weight,
    })
}

/// Groups records by `(layer, kind)` and averages each group.
pub fn average_by_layer(records: &[AttentionRecord]) -> Result<Vec<AttentionRecord>> {
    let mut groups: BTreeMap<(usize, u8), Vec<AttentionRecord>> = BTreeMap::new();
    for r in records {
        let kind = match r.kind {
            AttentionKind::SelfAttn => 0,
            AttentionKind::Cross => 1,
        };
        groups.entry((r.layer_index, kind)).or_default().push(r.clone());
    }
    groups.values().map(|g| average_attention(g)).collect()
}

/// Kept positions of one axis after dropping the outer patch ring, and the
/// partition describing them.
fn trim_axis(p: &TokenPartition) -> Result<(Vec<usize>, TokenPartition)> {
    let Some(image) = p.image.clone() else {
        return Ok(((0..p.len()).collect(), p.clone()));
    };
    let g = p.grid_side;
    if g < 3 {
        return Err(Error::Argument(format!(
            "patch grid of side {g} has no interior to keep"
        )));
    }
    let mut keep = Vec::new();
    let remap = |r: &Option<Range<usize>>, keep: &mut Vec<usize>| {
        r.clone().map(|r| {
            let start = keep.len();
            keep.extend(r);
            start..keep.len()
        })
    };
    // rebuild in positional order
    let mut spans: Vec<(usize, u8)> = Vec::new();
    if let Some(r) = &p.time {
        spans.push((r.start, 0));
    }
    if let Some(r) = &p.text {
        spans.push((r.start, 1));
    }
    spans.push((image.start, 2));
    spans.sort();
    let (mut time, mut text, mut img) = (None, None, None);
    for (_, which) in spans {
        match which {
            0 => time = remap(&p.time, &mut keep),
            1 => text = remap(&p.text, &mut keep),
            _ => {
                let start = keep.len();
                for row in 1..g - 1 {
                    for col in 1..g - 1 {
                        keep.push(image.start + row * g + col);
                    }
                }
                img = Some(start..keep.len());
            }
        }
    }
    Ok((
        keep,
        TokenPartition {
            time,
            text,
            image: img,
            grid_side: g - 2,
        },
    ))
}

/// Drops the outermost ring of image patches from the queries and, where
/// keys include image tokens, from the keys; rows are renormalized.
pub fn trim_border(record: &AttentionRecord) -> Result<AttentionRecord> {
    if record.queries.image.is_none() {
        return Err(Error::Argument(format!(
            "layer {} has no image queries to trim",
            record.layer_index
        )));
    }
    let (qkeep, queries) = trim_axis(&record.queries)?;
    let (kkeep, keys) = trim_axis(&record.keys)?;
    let (rows, cols) = (record.rows(), record.cols());
    let mut out = Vec::with_capacity(record.heads() * qkeep.len() * kkeep.len());
    for h in 0..record.heads() {
        for &q in &qkeep {
            let row = &record.matrix.data()[(h * rows + q) * cols..(h * rows + q + 1) * cols];
            let kept: Vec<f64> = kkeep.iter().map(|&k| row[k]).collect();
            let s: f64 = kept.iter().sum();
            out.extend(kept.iter().map(|v| if s > 0.0 { v / s } else { 0.0 }));
        }
    }
    Ok(AttentionRecord {
        layer_index: record.layer_index,
        kind: record.kind,
        matrix: Tensor::new(vec![record.heads(), qkeep.len(), kkeep.len()], out)?,
        queries,
        keys,
        timesteps: record.timesteps,
    })
}

/// Head-averaged sub-matrix with image-token queries and text-token keys.
pub fn text_to_image_block(record: &AttentionRecord) -> Result<Matrix> {
    let text = record.keys.text.clone().ok_or_else(|| {
        Error::Argument(format!("layer {} has no text keys", record.layer_index))
    })?;
    let image = record.queries.image.clone().ok_or_else(|| {
        Error::Argument(format!("layer {} has no image queries", record.layer_index))
    })?;
    let mean = head_mean(record);
    let cols = record.cols();
    let mut data = Vec::with_capacity(image.len() * text.len());
    for q in image.clone() {
        data.extend_from_slice(&mean[q * cols + text.start..q * cols + text.end]);
    }
    Ok(Matrix {
        rows: image.len(),
        cols: text.len(),
        data,
    })
}

pub fn singular_spectrum(m: &Matrix, k: usize) -> Result<Vec<f64>> {
    svd_singular_values(&m.data, m.rows, m.cols, k)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSpectrum {
    pub layer: usize,
    pub kind: AttentionKind,
    pub sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumReport {
    pub trim: usize,
    pub k: usize,
    pub layers: Vec<LayerSpectrum>,
}

/// Averaged, trimmed text-to-image spectra for every site with text keys.
/// `k` is capped by the block's smaller side.
pub fn spectrum_report(records: &[AttentionRecord], k: usize) -> Result<(SpectrumReport, Vec<(usize, Matrix)>)> {
    let mut layers = Vec::new();
    let mut blocks = Vec::new();
    for avg in average_by_layer(records)? {
        if avg.keys.text.is_none() {
            continue;
        }
        let block = text_to_image_block(&trim_border(&avg)?)?;
        let kk = k.min(block.rows).min(block.cols);
        layers.push(LayerSpectrum {
            layer: avg.layer_index,
            kind: avg.kind,
            sigma: singular_spectrum(&block, kk)?,
        });
        blocks.push((avg.layer_index, block));
    }
    Ok((SpectrumReport { trim: 1, k, layers }, blocks))
}
