//! Property tests over parameter sets, masks, codecs and metrics.

use fam_core::eval::{compute_metrics, Averaging};
use fam_core::model::{Param, ParameterSet, Role};
use fam_core::sparsity::{apply_mask, invert_mask, prune_count, sparsify, PruneMask};
use fam_core::tensor::Tensor;
use fam_core::wire::{
    decode_dense, decode_mask, decode_sparse, encode_dense, encode_mask, encode_sparse, Envelope, WireMessage,
};
use proptest::prelude::*;

/// Values on a coarse grid so zeros and magnitude ties are common.
fn value() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), (-8i32..=8).prop_map(|k| k as f64 * 0.25), -2.0f64..2.0]
}

fn param_set() -> impl Strategy<Value = ParameterSet> {
    prop::collection::vec((1usize..6, 1usize..5, any::<bool>()), 1..5).prop_flat_map(|shapes| {
        let sizes: Vec<usize> = shapes.iter().map(|&(a, b, _)| a * b).collect();
        let total: usize = sizes.iter().sum();
        prop::collection::vec(value(), total).prop_map(move |flat| {
            let mut offset = 0;
            let entries = shapes
                .iter()
                .enumerate()
                .map(|(i, &(a, b, bias))| {
                    let (role, shape) = if bias { (Role::Bias, vec![a * b]) } else { (Role::Weight, vec![a, b]) };
                    let n = a * b;
                    let tensor = Tensor::from_vec(&shape, flat[offset..offset + n].to_vec()).unwrap();
                    offset += n;
                    Param {
                        name: format!("p{i}"),
                        role,
                        tensor,
                    }
                })
                .collect();
            ParameterSet::new(entries).unwrap()
        })
    })
}

fn with_mask() -> impl Strategy<Value = (ParameterSet, PruneMask)> {
    param_set().prop_flat_map(|ps| {
        let n = ps.total_count();
        prop::collection::vec(any::<bool>(), n).prop_map(move |bits| {
            let mask = PruneMask::from_bits(&ps, &bits).unwrap();
            (ps.clone(), mask)
        })
    })
}

fn env() -> Envelope {
    Envelope {
        round: 7,
        flag: 2,
        sender: 3,
    }
}

/// Sort-everything oracle for the pruned set: positions of the first `p`
/// weights by (|w|, tensor, index).
fn brute_force_pruned(ps: &ParameterSet, rate: f64) -> Vec<(usize, usize)> {
    let mut all = Vec::new();
    for (t, p) in ps.iter().enumerate() {
        if p.role == Role::Weight {
            for (i, v) in p.tensor.data().iter().enumerate() {
                all.push((v.abs(), t, i));
            }
        }
    }
    let nonzero = all.iter().filter(|c| c.0 != 0.0).count();
    let p = all.len() - nonzero + (rate * nonzero as f64).floor() as usize;
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out: Vec<(usize, usize)> = all[..p].iter().map(|&(_, t, i)| (t, i)).collect();
    out.sort();
    out
}

fn pruned_positions(mask: &PruneMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (t, e) in mask.entries().iter().enumerate() {
        for (i, &b) in e.bits.iter().enumerate() {
            if !b {
                out.push((t, i));
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn flatten_roundtrip_is_bitwise(ps in param_set()) {
        let back = ps.unflatten(&ps.flatten()).unwrap();
        prop_assert_eq!(back.to_bits(), ps.to_bits());
    }

    #[test]
    fn sparsify_matches_sort_oracle(ps in param_set(), rate in 0.0f64..=1.0) {
        let mask = sparsify(&ps, rate).unwrap();
        prop_assert_eq!(pruned_positions(&mask), brute_force_pruned(&ps, rate));
    }

    #[test]
    fn sparsify_count_and_threshold(ps in param_set(), rate in 0.0f64..=1.0) {
        let mask = sparsify(&ps, rate).unwrap();
        let weights: Vec<f64> = ps.iter().filter(|p| p.role == Role::Weight).flat_map(|p| p.tensor.data().to_vec()).collect();
        let nonzero = weights.iter().filter(|v| **v != 0.0).count();
        let expected = prune_count(weights.len(), nonzero, rate).unwrap();
        prop_assert_eq!(mask.zeros_count(), expected);
        let (mut max_pruned, mut min_kept) = (0.0f64, f64::INFINITY);
        for (p, e) in ps.iter().zip(mask.entries()) {
            for (v, &b) in p.tensor.data().iter().zip(&e.bits) {
                if p.role == Role::Bias {
                    prop_assert!(b);
                } else if b {
                    min_kept = min_kept.min(v.abs());
                } else {
                    max_pruned = max_pruned.max(v.abs());
                }
            }
        }
        prop_assert!(max_pruned <= min_kept);
    }

    #[test]
    fn apply_mask_is_idempotent((ps, mask) in with_mask()) {
        let once = apply_mask(&ps, &mask).unwrap();
        let twice = apply_mask(&once, &mask).unwrap();
        prop_assert_eq!(once.to_bits(), twice.to_bits());
        prop_assert!(mask.covers_zeros_of(&once));
    }

    #[test]
    fn inversion_is_an_involution_and_splits_params((ps, mask) in with_mask()) {
        let inv = invert_mask(&mask);
        prop_assert_eq!(&invert_mask(&inv), &mask);
        prop_assert_eq!(inv.ones_count() + mask.ones_count(), mask.total_count());
        let kept = apply_mask(&ps, &mask).unwrap().flatten();
        let dropped = apply_mask(&ps, &inv).unwrap().flatten();
        for ((k, d), v) in kept.iter().zip(&dropped).zip(ps.flatten()) {
            prop_assert_eq!((k + d).to_bits(), (v + 0.0).to_bits());
        }
    }

    #[test]
    fn dense_codec_roundtrip(ps in param_set()) {
        let msg = encode_dense(&ps, env());
        prop_assert_eq!(msg.len(), 10 + 4 * ps.total_count());
        let back = WireMessage::from_bytes(&msg.to_bytes()).unwrap();
        prop_assert_eq!(&back, &msg);
        let decoded = decode_dense(&back, &ps).unwrap();
        let as_f32: Vec<f64> = ps.flatten().iter().map(|&v| v as f32 as f64).collect();
        prop_assert_eq!(decoded.flatten(), as_f32);
    }

    #[test]
    fn sparse_codec_roundtrip((ps, mask) in with_mask()) {
        let masked = apply_mask(&ps, &mask).unwrap();
        let msg = encode_sparse(&masked, &mask, env()).unwrap();
        prop_assert_eq!(msg.len(), 10 + 4 + 4 * mask.ones_count());
        let back = WireMessage::from_bytes(&msg.to_bytes()).unwrap();
        let decoded = decode_sparse(&back, &mask).unwrap();
        let as_f32: Vec<f64> = masked.flatten().iter().map(|&v| v as f32 as f64).collect();
        prop_assert_eq!(decoded.flatten(), as_f32);
    }

    #[test]
    fn mask_codec_roundtrip((ps, mask) in with_mask()) {
        let msg = encode_mask(&mask, env());
        prop_assert_eq!(msg.len(), 10 + 4 + mask.total_count().div_ceil(8));
        let back = WireMessage::from_bytes(&msg.to_bytes()).unwrap();
        prop_assert_eq!(decode_mask(&back, &ps).unwrap(), mask);
    }

    #[test]
    fn metrics_invariant_under_permutation(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
        rot in 0usize..60,
    ) {
        let (p, l): (Vec<usize>, Vec<usize>) = pairs.iter().cloned().unzip();
        let k = rot % pairs.len();
        let (mut p2, mut l2) = (p.clone(), l.clone());
        p2.rotate_left(k);
        l2.rotate_left(k);
        p2.reverse();
        l2.reverse();
        for avg in [Averaging::Weighted, Averaging::Macro] {
            let a = compute_metrics(&p, &l, 4, avg).unwrap();
            let b = compute_metrics(&p2, &l2, 4, avg).unwrap();
            prop_assert_eq!(&a.confusion, &b.confusion);
            prop_assert!((a.precision - b.precision).abs() < 1e-12);
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_recall_equals_accuracy(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..80)) {
        let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = compute_metrics(&p, &l, 5, Averaging::Weighted).unwrap();
        prop_assert!((m.recall - m.accuracy).abs() < 1e-12);
        for x in [m.accuracy, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&x));
        }
    }
}
