use sieve_core::pipeline::{run_in_memory, PipelineInputs, PipelineParams};
use sieve_core::synth::{
    generate_world, planted_recovery_check, synth_generate_images, RecoveryMetrics, SyntheticWorld,
    SyntheticWorldSpec,
};

fn inputs(w: &SyntheticWorld) -> PipelineInputs<'_> {
    PipelineInputs {
        acts: &w.acts,
        maps: Some(&w.maps),
        patch_embs: &w.patch_embs,
        concept_embs: &w.concept_embs,
        concepts: &w.concepts,
    }
}

fn run(w: &SyntheticWorld, verify: bool, seed: u64) -> RecoveryMetrics {
    let params = PipelineParams {
        verify,
        seed,
        ..PipelineParams::default()
    };
    let report = run_in_memory(inputs(w), &params, |plan| synth_generate_images(plan, w)).unwrap();
    planted_recovery_check(&report, &w.truth)
}

#[test]
fn noiseless_world_is_fully_recovered() {
    let mut spec = SyntheticWorldSpec::new(12, 32, 12, 4, 20, 11);
    spec.noise_sigma = 0.0;
    let w = generate_world(&spec).unwrap();
    let m = run(&w, true, 0);
    assert_eq!(m.recovery, 1.0);
    assert_eq!(m.top1_recovery, 1.0);
    assert_eq!(m.distractor_exclusion, 1.0);
}

#[test]
fn default_world_recovers_planted_concepts() {
    let w = generate_world(&SyntheticWorldSpec::new(40, 64, 64, 16, 20, 1)).unwrap();
    let m = run(&w, true, 1);
    assert!(m.recovery >= 0.95);
    assert!(m.distractor_exclusion >= 0.90);
    assert!(m.correct_mean_ar.unwrap() >= 0.90);
    assert!(m.mismatched_mean_ar.unwrap() <= 0.05);
}

#[test]
fn verification_rejects_decoys() {
    for seed in 0..3 {
        let mut spec = SyntheticWorldSpec::new(20, 64, 16, 4, 20, seed);
        spec.n_decoys = 16;
        spec.text_gap = 0.3;
        let w = generate_world(&spec).unwrap();
        let (on, off) = (run(&w, true, seed), run(&w, false, seed));
        assert!(off.top1_recovery < on.top1_recovery);
        assert!(on.top1_recovery >= 0.9);
    }
}

#[test]
fn recovery_does_not_rise_with_noise() {
    let sigmas = [0.0, 0.1, 0.2, 0.3, 0.45];
    let mut curve = Vec::new();
    for &sigma in &sigmas {
        let mut total = 0.0;
        for seed in 0..3 {
            let mut spec = SyntheticWorldSpec::new(20, 32, 16, 4, 20, 100 + seed);
            spec.noise_sigma = sigma;
            let w = generate_world(&spec).unwrap();
            total += run(&w, true, seed).recovery;
        }
        curve.push(total / 3.0);
    }
    for pair in curve.windows(2) {
        assert!(pair[1] <= pair[0], "{curve:?}");
    }
}
