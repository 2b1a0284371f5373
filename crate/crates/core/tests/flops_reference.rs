use fusion_core::analysis::{count_flops, FlopConvention, OpClass};
use fusion_core::backbone::{Conditioning, Fusion, ModelConfig};

fn gflops(f: Fusion, c: Conditioning, conv: FlopConvention) -> f64 {
    count_flops(&ModelConfig::reference(f, c), conv).gflops()
}

#[test]
fn reference_table_within_five_percent() {
    let rows = [
        (Fusion::Early, Conditioning::Concat, 29.56),
        (Fusion::Intermediate, Conditioning::Concat, 25.84),
        (Fusion::Early, Conditioning::CrossAttn, 23.82),
        (Fusion::Intermediate, Conditioning::CrossAttn, 23.66),
    ];
    for (f, c, want) in rows {
        let got = gflops(f, c, FlopConvention::LinearOnly);
        let full = gflops(f, c, FlopConvention::WithAttentionMatmuls);
        eprintln!("{f}/{c}: linear-only {got:.3}  with-attention {full:.3}  table {want}");
        assert!((got / want - 1.0).abs() < 0.05, "{f}/{c}: {got} vs {want}");
    }
}

#[test]
fn dropping_text_from_end_blocks_reduces_concat_flops() {
    for conv in [FlopConvention::LinearOnly, FlopConvention::WithAttentionMatmuls] {
        let early = gflops(Fusion::Early, Conditioning::Concat, conv);
        let inter = gflops(Fusion::Intermediate, Conditioning::Concat, conv);
        assert!(inter < early);
    }
}

#[test]
fn counting_is_pure() {
    let cfg = ModelConfig::reference(Fusion::Intermediate, Conditioning::Concat);
    let a = count_flops(&cfg, FlopConvention::WithAttentionMatmuls);
    let b = count_flops(&cfg, FlopConvention::WithAttentionMatmuls);
    assert_eq!(a, b);
    assert!(a.entries.iter().any(|e| e.op_class == OpClass::SkipMerge));
    assert_eq!(a.total(), a.entries.iter().map(|e| e.flops).sum::<u64>());
}
