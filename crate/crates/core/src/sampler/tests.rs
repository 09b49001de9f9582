use super::*;
use crate::model::ModelConfig;

fn frozen(kind: HeadKind, k: usize, seed: u64) -> BarModel {
    let cfg = ModelConfig {
        depth: 1,
        width: 16,
        ffn_width: 32,
        heads: 2,
        bits: k,
        head_kind: kind,
        head_layers: 2,
        head_width: 16,
        class_count: 2,
        context_len: 9,
        class_repeat: 1,
    };
    BarModel::new(cfg, seed).unwrap()
}

fn config(k: usize, steps: Vec<usize>, selection: Selection) -> SampleConfig {
    SampleConfig {
        schedule: make_schedule(k, ScheduleMode::Explicit(steps)).unwrap(),
        temperature: 1.0,
        selection,
        ..SampleConfig::unguided(k).unwrap()
    }
}

fn frequencies(model: &BarModel, z: &[f64], cfg: &SampleConfig, draws: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, &[]);
    let mut counts = vec![0.0; 1 << model.bits()];
    for _ in 0..draws {
        let (t, trace) = sample_token(model, z, None, cfg, &mut rng).unwrap();
        assert!(trace.is_partition(model.bits()));
        counts[bits_to_index(&t).unwrap() as usize] += 1.0;
    }
    counts.iter().map(|c| c / draws as f64).collect()
}

#[test]
fn combine_identities() {
    let c = [0.3, -1.7, 2.0];
    let u = [1.1, 0.4, -0.25];
    assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
    assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
    for s in [0.5, 2.0, 7.25] {
        assert_eq!(cfg_combine(&c, &c, s).unwrap(), c);
    }
    assert!(cfg_combine(&c, &u[..2], 2.0).is_err());
}

#[test]
fn linear_guidance_ramp() {
    assert_eq!(guidance_at(5.0, 9, 10), 5.0);
    assert_eq!(guidance_at(5.0, 0, 1), 5.0);
    let ramp: Vec<f64> = (0..16).map(|i| guidance_at(3.0, i, 16)).collect();
    assert!(ramp.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn single_step_matches_independent_bits() {
    let model = frozen(HeadKind::Mbm, 3, 1);
    let z: Vec<f64> = model.backbone_forward(&[], ClassLabel::Class(0)).unwrap().row(0).to_vec();
    let cfg = config(3, vec![3], Selection::Confidence);
    let logits = model.mbm_logits(&MaskedToken::fully_masked(3).unwrap(), &z).unwrap();
    let product: Vec<f64> = (0..8)
        .map(|i| (0..3).map(|j| {
            let p = sigmoid(logits[j]);
            if i >> j & 1 == 1 { p } else { 1.0 - p }
        }).product())
        .collect();
    let exact = exact_token_distribution(&model, &z, &cfg).unwrap();
    for (a, b) in exact.iter().zip(&product) {
        assert!((a - b).abs() < 1e-12);
    }
    let freq = frequencies(&model, &z, &cfg, 100_000, 2);
    assert!(total_variation(&freq, &product) <= 0.02);
}

#[test]
fn random_order_matches_enumeration() {
    let model = frozen(HeadKind::Mbm, 3, 3);
    let z: Vec<f64> = model.backbone_forward(&[], ClassLabel::Class(1)).unwrap().row(0).to_vec();
    let cfg = config(3, vec![1, 1, 1], Selection::RandomOrder);
    let exact = exact_token_distribution(&model, &z, &cfg).unwrap();
    assert!((exact.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let freq = frequencies(&model, &z, &cfg, 100_000, 4);
    let tv = total_variation(&freq, &exact);
    assert!(tv <= 0.02, "tv {tv}");
}

#[test]
fn confidence_selection_matches_enumeration() {
    let model = frozen(HeadKind::Mbm, 3, 5);
    let z = vec![0.5; 16];
    let cfg = config(3, vec![1, 2], Selection::Confidence);
    let exact = exact_token_distribution(&model, &z, &cfg).unwrap();
    let freq = frequencies(&model, &z, &cfg, 50_000, 6);
    assert!(total_variation(&freq, &exact) <= 0.02);
}

#[test]
fn near_zero_temperature_is_greedy() {
    let model = frozen(HeadKind::Mbm, 6, 7);
    let z = vec![0.2; 16];
    let cfg = SampleConfig { temperature: 1e-6, ..config(6, vec![2, 4], Selection::Confidence) };
    let a = sample_token(&model, &z, None, &cfg, &mut stream(1, &[])).unwrap();
    let b = sample_token(&model, &z, None, &cfg, &mut stream(2, &[])).unwrap();
    assert_eq!(a, b);
    // each committed bit follows the sign of its logit at that step
    let mut t = MaskedToken::fully_masked(6).unwrap();
    for step in &a.1.steps {
        let logits = model.mbm_logits(&t, &z).unwrap();
        for (&p, &bit) in step.revealed.iter().zip(&step.bits) {
            assert_eq!(bit, u8::from(logits[p] > 0.0));
            t.reveal(p, bit);
        }
    }
}

#[test]
fn schedule_width_mismatch_is_rejected() {
    let model = frozen(HeadKind::Mbm, 4, 0);
    let cfg = config(3, vec![3], Selection::Confidence);
    let r = sample_token(&model, &[0.0; 16], None, &cfg, &mut stream(0, &[]));
    assert!(matches!(r, Err(BarError::Schedule(_))));
}

#[test]
fn head_calls_follow_schedule_length() {
    let model = frozen(HeadKind::Mbm, 4, 8);
    for guided in [false, true] {
        let cfg = SampleConfig {
            guidance_scale: if guided { 2.0 } else { 0.0 },
            ..config(4, vec![1, 1, 2], Selection::Confidence)
        };
        let g = generate_sequence(&model, 0, 4, &cfg, DecodeMode::Cached).unwrap();
        assert_eq!(g.stats.head_calls_per_token, 3.0 * (1.0 + f64::from(u8::from(guided))));
        assert!(g.traces.iter().all(|t| t.is_partition(4)));
    }
}

#[test]
fn cached_decoding_matches_recompute() {
    for kind in HeadKind::ALL {
        let model = frozen(kind, 4, 9);
        for scale in [0.0, 3.0] {
            let cfg = SampleConfig { guidance_scale: scale, seed: 5, ..SampleConfig::unguided(4).unwrap() };
            let a = generate_sequence(&model, 1, 9, &cfg, DecodeMode::Cached).unwrap();
            let b = generate_sequence(&model, 1, 9, &cfg, DecodeMode::Recompute).unwrap();
            assert_eq!(a.sequence, b.sequence, "{kind} scale {scale}");
            assert_eq!(a.grid, b.grid);
            assert_eq!(a.grid.height(), 3);
        }
    }
}

#[test]
fn generation_is_seed_deterministic() {
    let model = frozen(HeadKind::Mbm, 4, 10);
    let cfg = SampleConfig { seed: 11, guidance_scale: 1.5, ..SampleConfig::unguided(4).unwrap() };
    let a = generate_sequence(&model, 0, 8, &cfg, DecodeMode::Cached).unwrap();
    let b = generate_sequence(&model, 0, 8, &cfg, DecodeMode::Cached).unwrap();
    assert_eq!(a.grid, b.grid);
    let c = generate_sequence(&model, 0, 8, &SampleConfig { seed: 12, ..cfg }, DecodeMode::Cached).unwrap();
    assert_ne!(a.sequence, c.sequence);
    let many = generate_many(&model, &[0, 1, 0], 4, &SampleConfig::unguided(4).unwrap(), Exec::Sequential).unwrap();
    let par = generate_many(&model, &[0, 1, 0], 4, &SampleConfig::unguided(4).unwrap(), Exec::Parallel).unwrap();
    for (a, b) in many.iter().zip(&par) {
        assert_eq!(a.sequence, b.sequence);
    }
}

#[test]
fn zero_strength_null_pass_equals_unguided() {
    let model = frozen(HeadKind::Mbm, 5, 13);
    let z = vec![0.4; 16];
    let z_null = vec![-0.9; 16];
    let cfg = config(5, vec![2, 3], Selection::Confidence);
    let plain = sample_token(&model, &z, None, &cfg, &mut stream(3, &[])).unwrap();
    let guided = sample_token(&model, &z, Some(Guidance { z_null: &z_null, strength: 0.0 }), &cfg, &mut stream(3, &[]))
        .unwrap();
    assert_eq!(plain.0, guided.0);
    assert_eq!(plain.1.steps, guided.1.steps);
}

#[test]
fn context_overflow_and_patch_unshuffle() {
    let model = frozen(HeadKind::Bit, 4, 14);
    let cfg = SampleConfig::unguided(4).unwrap();
    assert!(matches!(generate_sequence(&model, 0, 10, &cfg, DecodeMode::Cached), Err(BarError::Domain(_))));
    assert!(matches!(generate_sequence(&model, 2, 4, &cfg, DecodeMode::Cached), Err(BarError::Domain(_))));
    let patched = SampleConfig { patch_size: 2, ..cfg };
    let g = generate_sequence(&model, 0, 4, &patched, DecodeMode::Cached).unwrap();
    assert_eq!((g.grid.height(), g.grid.width(), g.grid.bits_per_token()), (4, 4, 1));
    assert_eq!(g.stats.grid_tokens, 16);
}

#[test]
fn confidence_noise_mode_samples_valid_tokens() {
    let model = frozen(HeadKind::Mbm, 6, 15);
    let cfg = SampleConfig {
        temperature_mode: TemperatureMode::ConfidenceNoise,
        ..config(6, vec![1, 2, 3], Selection::Confidence)
    };
    let (_, trace) = sample_token(&model, &[0.1; 16], None, &cfg, &mut stream(0, &[])).unwrap();
    assert!(trace.is_partition(6));
    assert!(exact_token_distribution(&model, &[0.1; 16], &cfg).is_err());
}

#[test]
fn direct_heads_match_their_exact_distributions() {
    for kind in [HeadKind::Bit, HeadKind::Linear] {
        let model = frozen(kind, 3, 16);
        let z = vec![0.7; 16];
        let cfg = SampleConfig { temperature: 1.3, ..SampleConfig::unguided(3).unwrap() };
        let exact = exact_token_distribution(&model, &z, &cfg).unwrap();
        let mut rng = stream(17, &[]);
        let mut freq = vec![0.0; 8];
        let n = 50_000;
        for _ in 0..n {
            let (t, _) = sample_next(&model, &z, None, &cfg, &mut rng).unwrap();
            freq[bits_to_index(&t).unwrap() as usize] += 1.0 / n as f64;
        }
        assert!(total_variation(&freq, &exact) <= 0.02, "{kind}");
    }
}
