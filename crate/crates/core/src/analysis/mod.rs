//! FLOP accounting and attention-spectrum instruments.

pub mod attention;
pub mod flops;
pub mod report;

pub use attention::{
    average_attention, average_by_layer, singular_spectrum, spectrum_report, text_to_image_block,
    trim_border, LayerSpectrum, Matrix, SpectrumReport,
};
pub use flops::{count_flops, FlopConvention, FlopEntry, FlopsReport, OpClass};
pub use report::{emit_spectrum, flops_csv, spectrum_csv, write_flops_csv};
