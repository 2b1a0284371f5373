//! CSV and PGM emission for analysis results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::image::pgm_bytes;
use crate::error::{Error, Result};

use super::attention::{Matrix, SpectrumReport};
use super::flops::FlopsReport;

pub fn flops_csv(report: &FlopsReport) -> String {
    let mut s = String::from("site,block,op_class,flops\n");
    for e in &report.entries {
        let _ = writeln!(s, "{},{},{},{}", e.site, e.block, e.op_class, e.flops);
    }
    s
}

pub fn spectrum_csv(report: &SpectrumReport) -> String {
    let mut s = String::from("layer,order,sigma\n");
    for l in &report.layers {
        for (i, v) in l.sigma.iter().enumerate() {
            let _ = writeln!(s, "{},{},{:.12e}", l.layer, i + 1, v);
        }
    }
    s
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_flops_csv(report: &FlopsReport, path: &Path) -> Result<()> {
    write(path, flops_csv(report).as_bytes())
}

/// Writes `spectrum.csv` and one `attn_layer<N>.pgm` per text-to-image
/// block into `dir`. Returns the written paths.
pub fn emit_spectrum(report: &SpectrumReport, blocks: &[(usize, Matrix)], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let csv = dir.join("spectrum.csv");
    write(&csv, spectrum_csv(report).as_bytes())?;
    written.push(csv);
    for (layer, m) in blocks {
        let path = dir.join(format!("attn_layer{layer:02}.pgm"));
        write(&path, &pgm_bytes(&m.data, m.rows, m.cols)?)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::flops::{FlopEntry, FlopConvention, OpClass};
    use crate::backbone::Branch;

    #[test]
    fn one_row_per_entry() {
        let entry = |site: &str, flops| FlopEntry {
            site: site.into(),
            block: 1,
            op_class: OpClass::Mlp,
            branch: Branch::Image,
            flops,
        };
        let r = FlopsReport {
            convention: FlopConvention::LinearOnly,
            entries: vec![entry("a", 1), entry("b", 2), entry("c", 3)],
        };
        let csv = flops_csv(&r);
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().nth(2), Some("b,1,mlp,2"));
    }

    #[test]
    fn re_emission_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let report = SpectrumReport {
            trim: 1,
            k: 2,
            layers: vec![crate::analysis::attention::LayerSpectrum {
                layer: 4,
                kind: crate::backbone::AttentionKind::Cross,
                sigma: vec![0.9, 0.1],
            }],
        };
        let m = Matrix { rows: 2, cols: 3, data: vec![0.1, 0.2, 0.7, 0.3, 0.3, 0.4] };
        let paths = emit_spectrum(&report, &[(4, m.clone())], dir.path()).unwrap();
        let first: Vec<Vec<u8>> = paths.iter().map(|p| fs::read(p).unwrap()).collect();
        emit_spectrum(&report, &[(4, m)], dir.path()).unwrap();
        let second: Vec<Vec<u8>> = paths.iter().map(|p| fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
        assert!(first[1].starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(first[1].len(), 11 + 6);
    }
}
