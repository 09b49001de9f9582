use rand::Rng;

use super::*;
use crate::bitcodec::index_to_bits;
use crate::masking::apply_bit_mask;
use crate::nn::{max_gradient_error, Graph};

fn tiny(kind: HeadKind, k: usize) -> ModelConfig {
    ModelConfig {
        depth: 2,
        width: 32,
        ffn_width: 64,
        heads: 2,
        bits: k,
        head_kind: kind,
        head_layers: 3,
        head_width: 32,
        class_count: 3,
        context_len: 8,
        class_repeat: 1,
    }
}

fn random_tokens(k: usize, n: usize, seed: u64) -> Vec<BitVector> {
    let mut rng = stream(seed, &[]);
    (0..n)
        .map(|_| BitVector::new((0..k).map(|_| rng.random_range(0..2u8)).collect()).unwrap())
        .collect()
}

#[test]
fn perturbing_a_token_leaves_earlier_conditions_unchanged() {
    let model = BarModel::new(tiny(HeadKind::Mbm, 6), 1).unwrap();
    let tokens = random_tokens(6, 6, 2);
    let base = model.backbone_forward(&tokens, ClassLabel::Class(1)).unwrap();
    for j in 0..tokens.len() {
        let mut other = tokens.clone();
        let mut bits = other[j].bits().to_vec();
        bits[0] ^= 1;
        other[j] = BitVector::new(bits).unwrap();
        let z = model.backbone_forward(&other, ClassLabel::Class(1)).unwrap();
        for i in 0..=j {
            assert_eq!(z.row(i), base.row(i), "row {i} changed after perturbing token {j}");
        }
        assert_ne!(z.row(j + 1), base.row(j + 1));
    }
}

#[test]
fn empty_prefix_yields_one_condition() {
    for repeat in [1, 3] {
        let cfg = ModelConfig { class_repeat: repeat, ..tiny(HeadKind::Bit, 4) };
        let model = BarModel::new(cfg, 0).unwrap();
        assert_eq!(model.backbone_forward(&[], ClassLabel::Null).unwrap().shape(), (1, 32));
    }
}

#[test]
fn condition_shapes_over_random_configs() {
    let mut rng = stream(7, &[]);
    for _ in 0..20 {
        let heads = rng.random_range(1..4);
        let cfg = ModelConfig {
            depth: rng.random_range(1..3),
            width: heads * 2 * rng.random_range(1..5),
            ffn_width: rng.random_range(1..20),
            heads,
            bits: rng.random_range(1..12),
            head_kind: HeadKind::Bit,
            head_layers: 1,
            head_width: 4,
            class_count: rng.random_range(1..5),
            context_len: 10,
            class_repeat: rng.random_range(1..3),
        };
        let len = rng.random_range(0..=10);
        let model = BarModel::new(cfg.clone(), 3).unwrap();
        let tokens = random_tokens(cfg.bits, len, 4);
        let z = model.backbone_forward(&tokens, ClassLabel::Class(0)).unwrap();
        assert_eq!(z.shape(), (len + 1, cfg.width));
    }
}

#[test]
fn unknown_class_and_overlong_inputs_are_rejected() {
    let model = BarModel::new(tiny(HeadKind::Bit, 4), 0).unwrap();
    assert!(matches!(model.backbone_forward(&[], ClassLabel::Class(3)), Err(BarError::Domain(_))));
    let long = random_tokens(4, 9, 0);
    assert!(matches!(model.backbone_forward(&long, ClassLabel::Class(0)), Err(BarError::Domain(_))));
    let wrong = random_tokens(5, 1, 0);
    assert!(matches!(model.backbone_forward(&wrong, ClassLabel::Class(0)), Err(BarError::Shape(_))));
}

#[test]
fn incremental_decoding_matches_full_recompute() {
    for repeat in [1, 2] {
        let cfg = ModelConfig { class_repeat: repeat, ..tiny(HeadKind::Mbm, 5) };
        let model = BarModel::new(cfg, 9).unwrap();
        let tokens = random_tokens(5, 8, 10);
        let full = model.backbone_forward(&tokens, ClassLabel::Class(2)).unwrap();
        let bb = model.backbone();
        let (mut cache, z0) = bb.start(model.params(), ClassLabel::Class(2)).unwrap();
        assert_eq!(z0.row(0), full.row(0));
        for (i, t) in tokens.iter().enumerate() {
            let z = bb.advance(model.params(), &mut cache, t).unwrap();
            assert_eq!(z.row(0), full.row(i + 1));
        }
        assert!(matches!(bb.advance(model.params(), &mut cache, &tokens[0]), Err(BarError::Domain(_))));
    }
}

#[test]
fn masked_embedding_hides_masked_bits_and_is_additive() {
    let k = 6;
    let model = BarModel::new(tiny(HeadKind::Mbm, k), 5).unwrap();
    let a = MaskedToken::new(index_to_bits(0b101101, k).unwrap(), vec![true; k]).unwrap();
    let b = MaskedToken::new(index_to_bits(0b010010, k).unwrap(), vec![true; k]).unwrap();
    assert_eq!(model.embed_masked_token(&a).unwrap(), model.embed_masked_token(&b).unwrap());

    let mask = vec![false, true, false, false, true, false];
    let c = MaskedToken::new(index_to_bits(0b000000, k).unwrap(), mask.clone()).unwrap();
    let d = MaskedToken::new(index_to_bits(0b010010, k).unwrap(), mask.clone()).unwrap();
    assert_eq!(model.embed_masked_token(&c).unwrap(), model.embed_masked_token(&d).unwrap());

    // direct summation of table rows
    let table = model.params().get(model.params().id("head.mask_emb").unwrap());
    let t = MaskedToken::new(index_to_bits(0b110001, k).unwrap(), mask).unwrap();
    let mut expected = vec![0.0; table.cols()];
    for j in 0..k {
        let s = t.visible(j).map_or(2, usize::from);
        for (e, v) in expected.iter_mut().zip(table.row(3 * j + s)) {
            *e += v;
        }
    }
    let got = model.embed_masked_token(&t).unwrap();
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn zeroed_condition_path_makes_head_ignore_z() {
    let mut model = BarModel::new(tiny(HeadKind::Mbm, 4), 6).unwrap();
    let t = MaskedToken::fully_masked(4).unwrap();
    let z1 = vec![0.3; 32];
    let z2: Vec<f64> = (0..32).map(|i| i as f64 - 10.0).collect();
    assert_ne!(model.mbm_logits(&t, &z1).unwrap(), model.mbm_logits(&t, &z2).unwrap());
    for id in model.head_condition_weights().unwrap() {
        model.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    assert_eq!(model.mbm_logits(&t, &z1).unwrap(), model.mbm_logits(&t, &z2).unwrap());
}

#[test]
fn head_output_lengths() {
    for k in [10, 16, 32, 64, 256] {
        let cfg = ModelConfig { width: 8, ffn_width: 8, head_width: 8, head_layers: 1, depth: 1, ..tiny(HeadKind::Mbm, k) };
        let model = BarModel::new(cfg, 0).unwrap();
        let logits = model.mbm_logits(&MaskedToken::fully_masked(k).unwrap(), &[0.1; 8]).unwrap();
        assert_eq!(logits.len(), k);
        assert!(logits.iter().all(|l| l.is_finite()));
        assert!(matches!(
            model.mbm_logits(&MaskedToken::fully_masked(k - 1).unwrap(), &[0.1; 8]),
            Err(BarError::Shape(_))
        ));
    }
    let bit = BarModel::new(tiny(HeadKind::Bit, 7), 0).unwrap();
    assert_eq!(bit.bit_logits(&[0.0; 32]).unwrap().len(), 7);
    let lin = BarModel::new(ModelConfig { width: 2, heads: 1, ..tiny(HeadKind::Linear, 18) }, 0).unwrap();
    assert_eq!(lin.linear_logits(&[0.5, -0.5]).unwrap().len(), 262_144);
    let lin10 = BarModel::new(tiny(HeadKind::Linear, 10), 0).unwrap();
    assert_eq!(lin10.linear_logits(&[0.0; 32]).unwrap().len(), 1024);
}

#[test]
fn parameter_counts_match_closed_forms() {
    for k in [4, 8, 10, 12, 16] {
        for kind in HeadKind::ALL {
            let cfg = tiny(kind, k);
            let model = BarModel::new(cfg.clone(), 0).unwrap();
            assert_eq!(model.head_param_count(), cfg.head_param_count(), "{kind} k={k}");
            assert_eq!(model.backbone_param_count(), cfg.backbone_param_count());
        }
        let w = 32;
        assert_eq!(tiny(HeadKind::Linear, k).head_param_count(), w * (1 << k) + (1 << k));
        assert_eq!(tiny(HeadKind::Bit, k).head_param_count(), w * k + k);
    }
    // the masked-bit head grows by the same amount for every extra bit
    let d: Vec<usize> = (4..8)
        .map(|k| tiny(HeadKind::Mbm, k + 1).head_param_count() - tiny(HeadKind::Mbm, k).head_param_count())
        .collect();
    assert!(d.windows(2).all(|w| w[0] == w[1]));
    assert!(matches!(BarModel::new(tiny(HeadKind::Linear, 32), 0), Err(BarError::Capability(_))));
    assert!(matches!(tiny(HeadKind::Linear, 19).validate(), Err(BarError::Capability(_))));
}

fn bce_oracle(l: f64, t: f64) -> f64 {
    let p = 1.0 / (1.0 + (-l).exp());
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

#[test]
fn bitwise_loss_cases() {
    let target = index_to_bits(0b1011, 4).unwrap();
    let counted = vec![true; 4];
    let sat: Vec<f64> = target.bits().iter().map(|&b| if b == 1 { 30.0 } else { -30.0 }).collect();
    assert!(loss_bitwise(&sat, &target, &counted).unwrap().0 < 1e-9);
    let (l, n) = loss_bitwise(&[0.0; 4], &target, &counted).unwrap();
    assert_eq!(n, 4);
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(loss_bitwise(&[1.0; 4], &target, &[false; 4]).unwrap(), (0.0, 0));
    assert!(matches!(loss_bitwise(&[0.0; 3], &target, &counted), Err(BarError::Shape(_))));

    let mut rng = stream(11, &[]);
    for _ in 0..50 {
        let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-4.0..4.0)).collect();
        let counted: Vec<bool> = (0..4).map(|_| rng.random_bool(0.6)).collect();
        let (got, n) = loss_bitwise(&logits, &target, &counted).unwrap();
        let terms: Vec<f64> = (0..4)
            .filter(|&j| counted[j])
            .map(|j| bce_oracle(logits[j], target.get(j) as f64))
            .collect();
        assert_eq!(n, terms.len());
        let expected = if terms.is_empty() { 0.0 } else { terms.iter().sum::<f64>() / terms.len() as f64 };
        assert!((got - expected).abs() < 1e-6);
    }
}

#[test]
fn linear_loss_cases() {
    let k = 5;
    let mut sat = vec![-30.0; 1 << k];
    sat[7] = 30.0;
    assert!(loss_linear(&sat, 7).unwrap() < 1e-9);
    let uniform = loss_linear(&vec![0.3; 1 << k], 3).unwrap();
    assert!((uniform - k as f64 * std::f64::consts::LN_2).abs() < 1e-12);
    assert!(matches!(loss_linear(&[0.0; 4], 4), Err(BarError::Domain(_))));
    let mut rng = stream(12, &[]);
    for _ in 0..50 {
        let logits: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let i = rng.random_range(0..16);
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let expected = -(logits[i].exp() / z).ln();
        assert!((loss_linear(&logits, i).unwrap() - expected).abs() < 1e-6);
    }
}

fn masked_views(tokens: &[BitVector], seed: u64) -> Vec<MaskedToken> {
    let mut rng = stream(seed, &[]);
    tokens.iter().map(|t| apply_bit_mask(t, 0.5, &mut rng)).collect()
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    for kind in HeadKind::ALL {
        let model = BarModel::new(tiny(kind, 4), 21).unwrap();
        let tokens = random_tokens(4, 4, 22);
        let masked = masked_views(&tokens, 23);
        let loss = |m: &BarModel, o: &mut Graph| {
            m.sequence_loss(o, &tokens, ClassLabel::Class(1), &masked, LossSupport::Masked).unwrap()
        };
        let mut g = Graph::new(model.params());
        let l = loss(&model, &mut g);
        let grads = g.backward(l);
        let ids: Vec<ParamId> = model.params().ids().collect();
        let err = max_gradient_error(model.params(), &ids, &grads, 1e-3, 1e-4, |p| {
            let mut probe = model.clone();
            *probe.params_mut() = p.clone();
            let mut o = Eager::new(probe.params());
            let v = probe
                .sequence_loss(&mut o, &tokens, ClassLabel::Class(1), &masked, LossSupport::Masked)
                .unwrap();
            v.item()
        });
        assert!(err < 1e-2, "{kind}: relative gradient error {err}");
    }
}

fn permute_columns(t: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows() {
        for (j, &p) in perm.iter().enumerate() {
            out.row_mut(r)[p] = t.get(r, j);
        }
    }
    out
}

fn permute_row_groups(t: &Tensor, perm: &[usize], group: usize) -> Tensor {
    let mut out = t.clone();
    for (j, &p) in perm.iter().enumerate() {
        for s in 0..group {
            out.row_mut(group * p + s).copy_from_slice(t.row(group * j + s));
        }
    }
    out
}

#[test]
fn loss_is_covariant_under_bit_permutation() {
    let k = 5;
    let perm = [3, 0, 4, 1, 2];
    for kind in [HeadKind::Mbm, HeadKind::Bit] {
        let model = BarModel::new(tiny(kind, k), 31).unwrap();
        let tokens = random_tokens(k, 5, 32);
        let masked = masked_views(&tokens, 33);
        let permute_bits = |t: &BitVector| {
            let mut b = vec![0; k];
            for (j, &p) in perm.iter().enumerate() {
                b[p] = t.get(j);
            }
            BitVector::new(b).unwrap()
        };
        let p_tokens: Vec<BitVector> = tokens.iter().map(permute_bits).collect();
        let p_masked: Vec<MaskedToken> = masked
            .iter()
            .map(|m| {
                let mut mask = vec![false; k];
                for (j, &p) in perm.iter().enumerate() {
                    mask[p] = m.is_masked(j);
                }
                MaskedToken::new(permute_bits(m.bits()), mask).unwrap()
            })
            .collect();
        let mut permuted = model.clone();
        let store = permuted.params_mut();
        let bit_emb = store.id("backbone.bit_emb").unwrap();
        let t = permute_row_groups(store.get(bit_emb), &perm, 2);
        store.set(bit_emb, t);
        if let Some(id) = store.id("head.mask_emb") {
            let t = permute_row_groups(store.get(id), &perm, 3);
            store.set(id, t);
        }
        for name in ["head.out.w", "head.out.b"] {
            let id = store.id(name).unwrap();
            let t = permute_columns(store.get(id), &perm);
            store.set(id, t);
        }
        let eval = |m: &BarModel, tokens: &[BitVector], masked: &[MaskedToken]| {
            let mut o = Eager::new(m.params());
            m.sequence_loss(&mut o, tokens, ClassLabel::Class(0), masked, LossSupport::Masked).unwrap().item()
        };
        let a = eval(&model, &tokens, &masked);
        let b = eval(&permuted, &p_tokens, &p_masked);
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{kind}: {a} vs {b}");
    }
}

#[test]
fn sequence_loss_at_init_is_near_entropy() {
    let model = BarModel::new(tiny(HeadKind::Mbm, 8), 41).unwrap();
    let tokens = random_tokens(8, 6, 42);
    let masked = masked_views(&tokens, 43);
    let mut o = Eager::new(model.params());
    let l = model.sequence_loss(&mut o, &tokens, ClassLabel::Class(0), &masked, LossSupport::Masked).unwrap();
    assert!((l.item() - std::f64::consts::LN_2).abs() < 0.5, "{}", l.item());
    let unmasked: Vec<MaskedToken> = tokens.iter().map(|t| MaskedToken::new(t.clone(), vec![false; 8]).unwrap()).collect();
    let zero = model.sequence_loss(&mut o, &tokens, ClassLabel::Class(0), &unmasked, LossSupport::Masked).unwrap();
    assert_eq!(zero.item(), 0.0);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    for kind in HeadKind::ALL {
        let mut model = BarModel::new(tiny(kind, 6), 51).unwrap();
        model.round_to_f32();
        let mut bytes = Vec::new();
        model.to_checkpoint().write(&mut bytes).unwrap();
        let back = BarModel::from_checkpoint(&Checkpoint::read(&bytes[..]).unwrap()).unwrap();
        assert_eq!(back.config(), model.config());
        for id in model.params().ids() {
            assert_eq!(back.params().get(id), model.params().get(id));
        }
        let mut again = Vec::new();
        back.to_checkpoint().write(&mut again).unwrap();
        assert_eq!(bytes, again);
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = BarModel::new(tiny(HeadKind::Bit, 4), 0).unwrap();
    let mut bytes = Vec::new();
    model.to_checkpoint().write(&mut bytes).unwrap();
    assert!(matches!(Checkpoint::read(&bytes[..bytes.len() - 3]), Err(BarError::Format(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::read(&bad[..]), Err(BarError::Format(_))));
    let mut ck = model.to_checkpoint();
    ck.tensors.pop();
    assert!(matches!(BarModel::from_checkpoint(&ck), Err(BarError::Format(_))));
}
