use adrag_core::corpus::{coverage_corpus, mismatch_corpus};
use adrag_core::encoder::EncoderConfig;
use adrag_core::eval::{analyze_context_distribution, context_coverage_ratio};
use adrag_core::par::ExecMode;
use adrag_core::training::build_training_kb;

#[test]
fn planted_mismatch_fraction_is_recovered() {
    for (seed, frac) in [(1, 0.1), (2, 0.35), (3, 0.62)] {
        let c = mismatch_corpus(600, frac, 8, seed);
        let kb = build_training_kb(&c.kb, EncoderConfig::default()).unwrap();
        let d = analyze_context_distribution(&c.queries, &kb.snapshot(), 0.6, ExecMode::default()).unwrap();
        assert_eq!(d.without_context, 0);
        assert!((d.mismatch() - frac).abs() <= 0.02, "planted {frac}, measured {}", d.mismatch());
        let total = d.both_safe + d.both_unsafe + d.mismatch();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn planted_coverage_is_recovered() {
    for (seed, frac) in [(4, 0.2), (5, 0.55), (6, 0.9)] {
        let c = coverage_corpus(600, frac, 1500, 8, seed);
        let kb = build_training_kb(&c.kb, EncoderConfig::default()).unwrap();
        let r = context_coverage_ratio(&c.queries, &kb.snapshot(), 0.6, ExecMode::default());
        assert!((r - frac).abs() <= 0.02, "planted {frac}, measured {r}");
    }
}
