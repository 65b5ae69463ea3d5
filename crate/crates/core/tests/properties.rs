use proptest::collection::vec;
use proptest::prelude::*;

use langmerge_core::dataprep::{cap_manifest, flag_truncation, upsample, vote_score};
use langmerge_core::metrics::{cosine_similarity, edit_distance, pearson, spearman, wer, Vocabulary};
use langmerge_core::{
    combine_task_vectors, compute_task_vector, mock_eval, optimize, Dtype, Manifest, ManifestKind,
    MockObjective, NamePolicy, OptimizerConfig, SampleRecord, Tensor, TensorMap, TrialLog, Votes,
};

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "b", "c", "the", "cat"]).prop_map(String::from)
}

fn sentence() -> impl Strategy<Value = String> {
    vec(word(), 0..6).prop_map(|w| w.join(" "))
}

fn tensor_map() -> impl Strategy<Value = TensorMap> {
    vec((vec(1usize..4, 0..3), any::<bool>()), 1..6).prop_flat_map(|specs| {
        let tensors: Vec<_> = specs
            .into_iter()
            .map(|(shape, half)| {
                let n = shape.iter().product::<usize>();
                vec(-100.0f64..100.0, n).prop_map(move |values| {
                    let dtype = if half { Dtype::F16 } else { Dtype::F32 };
                    Tensor::new(dtype, shape.clone(), values).unwrap()
                })
            })
            .collect();
        tensors.prop_map(|ts| {
            ts.into_iter()
                .enumerate()
                .map(|(i, t)| (format!("t{i}"), t))
                .collect::<TensorMap>()
        })
    })
}

fn manifest() -> impl Strategy<Value = Manifest> {
    vec((0u32..5, 0u32..5, 0.5f64..60.0), 0..30).prop_map(|rows| {
        let records = rows
            .into_iter()
            .enumerate()
            .map(|(i, (up, down, secs))| {
                SampleRecord::new(format!("r{i}"), secs, "words here").with_votes(Votes::Scripted {
                    up_votes: up,
                    down_votes: down,
                })
            })
            .collect();
        Manifest::new("xx", ManifestKind::Scripted, records).unwrap()
    })
}

proptest! {
    #[test]
    fn serialization_is_a_fixed_point(map in tensor_map()) {
        let bytes = map.to_bytes().unwrap();
        let back = TensorMap::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.fingerprint(), map.fingerprint());
    }

    #[test]
    fn edit_distance_is_a_metric(a in vec(0u8..3, 0..7), b in vec(0u8..3, 0..7), c in vec(0u8..3, 0..7)) {
        let d = |x: &[u8], y: &[u8]| edit_distance(x, y);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &b) == 0, a == b);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
        prop_assert!(d(&a, &b) >= a.len().abs_diff(b.len()));
    }

    #[test]
    fn wer_ignores_utterance_order(pairs in vec((sentence(), sentence()), 1..8), rotate in 0usize..8) {
        let refs: Vec<_> = pairs.iter().enumerate().map(|(i, (r, _))| (format!("u{i}"), r.clone())).collect();
        let hyps: Vec<_> = pairs.iter().enumerate().map(|(i, (_, h))| (format!("u{i}"), h.clone())).collect();
        let mut shuffled = hyps.clone();
        shuffled.rotate_left(rotate % hyps.len());
        shuffled.reverse();
        match (wer(&refs, &hyps), wer(&refs, &shuffled)) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.wer, b.wer);
                prop_assert_eq!(a.total_edits, b.total_edits);
            }
            (Err(_), Err(_)) => {} // every reference empty
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
        }
        if let Ok(same) = wer(&refs, &refs) {
            prop_assert_eq!(same.wer, 0.0);
        }
    }

    #[test]
    fn cosine_is_bounded_and_scale_free(a in vec(word(), 1..20), b in vec(word(), 1..20), k in 1u64..50) {
        let vocab = Vocabulary::from_corpora([&a, &b]);
        let (u, v) = (vocab.count(&a).unwrap(), vocab.count(&b).unwrap());
        let c = cosine_similarity(&u, &v).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert_eq!(c, cosine_similarity(&v, &u).unwrap());
        prop_assert!((cosine_similarity(&u.scaled(k), &v).unwrap() - c).abs() <= 1e-12);
        prop_assert_eq!(cosine_similarity(&u, &u).unwrap(), 1.0);
    }

    #[test]
    fn correlations_are_bounded_and_symmetric(pts in vec((-5.0f64..5.0, -5.0f64..5.0), 3..25)) {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        if let (Ok(p), Ok(q)) = (pearson(&xs, &ys), pearson(&ys, &xs)) {
            prop_assert!((-1.0..=1.0).contains(&p.coefficient));
            prop_assert!((0.0..=1.0).contains(&p.p_value));
            prop_assert!((p.coefficient - q.coefficient).abs() <= 1e-15);
        }
        if let Ok(s) = spearman(&xs, &ys) {
            let flipped: Vec<f64> = ys.iter().map(|y| -y).collect();
            let f = spearman(&xs, &flipped).unwrap();
            prop_assert!((s.coefficient + f.coefficient).abs() <= 1e-12);
        }
    }

    #[test]
    fn combining_one_vector_scales_it(base in tensor_map(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let ft: TensorMap = base
            .iter()
            .map(|(n, t)| (n.to_string(), t.with_values(t.values().iter().map(|v| v * 1.5 + 1.0).collect()).unwrap()))
            .collect();
        let tv = compute_task_vector(&ft, &base, NamePolicy::Strict).unwrap();
        let combined = combine_task_vectors(&[(&tv, a), (&tv, b)]).unwrap();
        prop_assert_eq!(combined.base_fingerprint(), tv.base_fingerprint());
        for (name, d) in tv.deltas().iter() {
            for (x, y) in d.values().iter().zip(combined.deltas().get(name).unwrap().values()) {
                prop_assert!((x * (a + b) - y).abs() <= 1e-10 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn upsampled_copies_are_adjacent(m in manifest()) {
        let up = upsample(&m).unwrap();
        let mut i = 0;
        for r in &m.records {
            let copies = vote_score(r).unwrap().max(0) as usize + 1;
            for _ in 0..copies {
                prop_assert_eq!(&up.records[i], r);
                i += 1;
            }
        }
        prop_assert_eq!(i, up.len());
    }

    #[test]
    fn cap_keeps_an_ordered_seeded_subset(m in manifest(), cap in 1usize..40, seed in any::<u64>()) {
        let up = upsample(&m).unwrap();
        let capped = cap_manifest(&up, cap, seed).unwrap();
        prop_assert_eq!(capped.len(), up.len().min(cap));
        prop_assert_eq!(&cap_manifest(&up, cap, seed).unwrap(), &capped);
        // order-preserving subsequence
        let mut it = up.records.iter();
        for r in &capped.records {
            prop_assert!(it.any(|x| x == r));
        }
    }

    #[test]
    fn truncation_flags_only_long_audio(m in manifest()) {
        let flagged = flag_truncation(&m, 30.0);
        prop_assert_eq!(flagged.len(), m.len());
        for (a, b) in m.records.iter().zip(&flagged.records) {
            prop_assert_eq!(b.truncated, a.duration_s > 30.0);
            prop_assert_eq!(&a.transcript, &b.transcript);
            prop_assert_eq!(a.duration_s, b.duration_s);
        }
        prop_assert_eq!(flag_truncation(&flagged, 30.0), flagged);
    }

    #[test]
    fn optimizer_respects_budget_and_bounds(
        optimum in 0.0f64..1.0,
        budget in 1usize..8,
        lo in -1.0f64..0.5,
        width in 0.1f64..2.0,
    ) {
        let obj = MockObjective { optimum, floor: 0.1, curvature: 1.0, seed: 0 };
        let config = OptimizerConfig {
            bounds: [lo, lo + width],
            budget,
            init_points: budget.min(3),
            ..Default::default()
        };
        let log = optimize(|l| Ok(mock_eval(&obj, l)), &config).unwrap();
        prop_assert_eq!(log.len(), budget);
        prop_assert!(log.trials().iter().all(|t| t.lambda >= lo && t.lambda <= lo + width));
        prop_assert_eq!(TrialLog::from_jsonl(&log.to_jsonl()).unwrap(), log);
    }
}
