mod common;

use std::collections::{BTreeMap, BTreeSet};

use agseg_core::attention::{ag_forward, AttentionGateParams};
use agseg_core::data::{augment, resize, synth_corpus, synth_samples, Interpolation};
use agseg_core::edge::{ea_forward, edge_target_from_mask, EdgeHeadParams};
use agseg_core::eval::{confusion, kfold_plan, split_622, DEFAULT_THRESHOLD};
use agseg_core::nn::{adam_step, AdamConfig, AdamState, ParamStore};
use agseg_core::train::{check_early_stop, hyper_search_with, EpochLosses, FoldReport};
use agseg_core::{
    AugmentationSpec, ConfusionMatrix, EarlyStopPolicy, ExperimentConfig, HyperConfig, Manifest, MetricsReport,
    SampleRecord, Tape, Tensor, TrainRunReport,
};
use common::*;
use proptest::prelude::*;

fn manifest(subjects: usize, extra: &[usize]) -> Manifest {
    let mut records = Vec::new();
    for s in 0..subjects {
        for r in 0..1 + extra.get(s).copied().unwrap_or(0) {
            records.push(SampleRecord {
                subject_id: format!("p{s:03}"),
                image_path: format!("i/{s}_{r}.png").into(),
                mask_path: format!("m/{s}_{r}.png").into(),
            });
        }
    }
    Manifest::new(".", records)
}

fn tensor(shape: Vec<usize>, lo: f32, hi: f32) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn conv_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize)> {
    // (cin, cout, k, stride, pad, h, w)
    (1usize..=3, 1usize..=3, 1usize..=3, 1usize..=2)
        .prop_flat_map(|(cin, cout, k, s)| (Just(cin), Just(cout), Just(k), Just(s), 0..k, k..=7usize, k..=7usize))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn conv_pair_is_adjoint_and_restores_shape((cin, cout, k, s, p, h, w) in conv_case(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[1, cin, h, w], -1.0, 1.0);
        let wt = random_tensor(&mut r, &[cout, cin, k, k], -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(wt.clone());
        let y = tape.conv2d(xv, wv, None, s, p).unwrap();
        let ys = tape.shape(y).to_vec();
        let dy = random_tensor(&mut r, &ys, -1.0, 1.0);
        let dyv = tape.constant(dy.clone());
        let back = tape.conv_transpose2d(dyv, wv, None, s, p).unwrap();
        if (h + 2 * p - k) % s == 0 && (w + 2 * p - k) % s == 0 {
            prop_assert_eq!(tape.shape(back), x.shape());
        }
        if tape.shape(back) == x.shape() {
            let lhs = tape.value(y).dot(&dy).unwrap();
            let rhs = x.dot(tape.value(back)).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()).max(1.0), "{} vs {}", lhs, rhs);
        }
    }

    #[test]
    fn forward_ops_are_deterministic(x in tensor(vec![1, 2, 6, 6], -1.0, 1.0), w in tensor(vec![3, 2, 3, 3], -1.0, 1.0)) {
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let c = tape.conv2d(xv, wv, None, 1, 1).unwrap();
            let r = tape.relu(c);
            let m = tape.maxpool2d(r, 2, 2).unwrap();
            let s = tape.sigmoid(m);
            tape.take_value(s)
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn focal_without_focusing_is_bce(p in prop::collection::vec(0.0f32..=1.0, 1..64), bits in prop::collection::vec(any::<bool>(), 64)) {
        let y: Vec<f32> = p.iter().zip(&bits).map(|(_, &b)| b as u8 as f32).collect();
        let pred = Tensor::new(vec![p.len()], p).unwrap();
        let target = Tensor::new(vec![y.len()], y).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(pred);
        let bce = tape.bce(v, &target).unwrap();
        let focal = tape.focal_bce(v, &target, 0.0, 1.0).unwrap();
        let (b, f) = (tape.value(bce).item(), tape.value(focal).item());
        prop_assert!((b - f).abs() <= 1e-7 * b.abs().max(1.0), "{} vs {}", b, f);
        prop_assert!(b >= 0.0 && f >= 0.0);
    }

    #[test]
    fn adam_with_zero_rate_keeps_parameters(w in tensor(vec![2, 3], -2.0, 2.0), g in prop::collection::vec(-5.0f32..5.0, 6)) {
        let mut store = ParamStore::new();
        store.insert("l.weight", w.clone().with_requires_grad(true)).unwrap();
        store.get_mut("l.weight").unwrap().accumulate_grad(&g);
        let mut state = AdamState::new(&store, AdamConfig { learning_rate: 0.0, ..AdamConfig::default() });
        adam_step(&mut store, &mut state).unwrap();
        prop_assert_eq!(store.get("l.weight").unwrap().data(), w.data());
    }

    #[test]
    fn attention_is_bounded_shaped_and_pointwise(seed in any::<u64>(), cx in 1usize..4, cg in 1usize..4, factor in 1usize..3, cols in (0usize..4, 0usize..4)) {
        let mut r = rng(seed);
        let (h, w) = (4 * factor, 4 * factor);
        let params = AttentionGateParams::glorot(cx, cg, 2, seed).unwrap();
        let x = random_tensor(&mut r, &[1, cx, h, w], -3.0, 3.0);
        let g = random_tensor(&mut r, &[1, cg, h / factor, w / factor], -3.0, 3.0);
        let run = |x: &Tensor, g: &Tensor| {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape);
            let (xv, gv) = (tape.constant(x.clone()), tape.constant(g.clone()));
            let out = ag_forward(&mut tape, xv, gv, &p).unwrap();
            (tape.value(out.gated).clone(), tape.value(out.alpha).clone())
        };
        let (gated, alpha) = run(&x, &g);
        prop_assert_eq!(gated.shape(), x.shape());
        prop_assert!(alpha.data().iter().all(|&a| a > 0.0 && a < 1.0));

        // Swap two gate columns and the matching blocks of skip columns.
        let (a, b) = cols;
        let swap_cols = |t: &Tensor, block: usize, ca: usize, cb: usize| {
            let [n, c, hh, ww] = *t.shape() else { unreachable!() };
            let mut d = t.data().to_vec();
            for plane in 0..n * c {
                for y in 0..hh {
                    for off in 0..block {
                        d.swap(plane * hh * ww + y * ww + ca * block + off, plane * hh * ww + y * ww + cb * block + off);
                    }
                }
            }
            Tensor::new(t.shape().to_vec(), d).unwrap()
        };
        let (_, alpha_p) = run(&swap_cols(&x, factor, a, b), &swap_cols(&g, 1, a, b));
        prop_assert_eq!(alpha_p, swap_cols(&alpha, factor, a, b));
    }

    #[test]
    fn edge_maps_stay_binary(mask in prop::collection::vec(any::<bool>(), 36)) {
        let m = Tensor::new(vec![1, 1, 6, 6], mask.iter().map(|&b| b as u8 as f32).collect()).unwrap();
        let once = edge_target_from_mask(&m).unwrap().boundary;
        let twice = edge_target_from_mask(&once).unwrap().boundary;
        prop_assert!(twice.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn zero_edge_head_scales_by_one_and_a_half(feat in tensor(vec![1, 3, 4, 5], -2.0, 2.0)) {
        let mut tape = Tape::new();
        let p = EdgeHeadParams::zeros(3).bind(&mut tape);
        let f = tape.constant(feat.clone());
        let out = ea_forward(&mut tape, f, &p).unwrap();
        prop_assert_eq!(tape.shape(out.conditioned), feat.shape());
        for (c, x) in tape.value(out.conditioned).data().iter().zip(feat.data()) {
            prop_assert_eq!(*c, 1.5 * x);
        }
    }

    #[test]
    fn constant_resize_round_trips(v in 0.0f32..=1.0, from in 2usize..40, to in 2usize..40) {
        let t = Tensor::full(vec![1, from, from], v);
        let back = resize(&resize(&t, to, Interpolation::Bilinear).unwrap(), from, Interpolation::Bilinear).unwrap();
        prop_assert!(back.data().iter().all(|&x| (x - v).abs() <= 1e-6));
    }

    #[test]
    fn augmented_masks_stay_binary(seed in any::<u64>(), draw in any::<u64>()) {
        let s = &synth_samples(1, 16, seed).unwrap()[0];
        let spec = AugmentationSpec { seed, ..AugmentationSpec::default() };
        let (img, mask) = augment(&s.image, &s.mask, &spec, draw).unwrap();
        prop_assert_eq!(img.shape(), s.image.shape());
        prop_assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn folds_partition_balance_and_separate_subjects(subjects in 2usize..40, k in 2usize..12, seed in any::<u64>(), extra in prop::collection::vec(0usize..3, 40)) {
        prop_assume!(k <= subjects);
        let m = manifest(subjects, &extra);
        let plan = kfold_plan(&m, k, seed, true).unwrap();
        let sizes = plan.fold_sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), subjects);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut fold_of: BTreeMap<&str, usize> = BTreeMap::new();
        for (r, &f) in m.records.iter().zip(&plan.record_folds) {
            prop_assert!(f < k);
            prop_assert_eq!(*fold_of.entry(&r.subject_id).or_insert(f), f);
        }
        let mut all: Vec<usize> = (0..k).flat_map(|f| plan.fold_records(f)).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..m.len()).collect::<Vec<_>>());
        prop_assert_eq!(plan.clone(), kfold_plan(&m, k, seed, true).unwrap());
    }

    #[test]
    fn six_two_two_sets_are_subject_disjoint(subjects in 10usize..60, seed in any::<u64>(), extra in prop::collection::vec(0usize..3, 60)) {
        let m = manifest(subjects, &extra);
        let s = split_622(&m, seed).unwrap();
        let ids = |idx: &[usize]| idx.iter().map(|&i| m.records[i].subject_id.clone()).collect::<BTreeSet<_>>();
        let (tr, va, te) = (ids(&s.train), ids(&s.val), ids(&s.test));
        prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), m.len());
    }

    #[test]
    fn confusion_counts_every_pixel(pred in tensor(vec![1, 1, 7, 9], 0.0, 1.0), bits in prop::collection::vec(any::<bool>(), 63)) {
        let mask = Tensor::new(vec![1, 1, 7, 9], bits.iter().map(|&b| b as u8 as f32).collect()).unwrap();
        let cm = confusion(&pred, &mask, DEFAULT_THRESHOLD).unwrap();
        prop_assert_eq!(cm.total(), 63);
        let m = MetricsReport::from_counts(&cm, 0.0);
        prop_assert!(m.iou <= m.f1 + 1e-12 && m.f1 <= 1.0);
    }

    #[test]
    fn early_stop_never_fires_before_epoch_two(first in 0.0f64..10.0, patience in 1usize..4) {
        let policy = EarlyStopPolicy { patience_epochs: patience };
        prop_assert!(!check_early_stop(&[], &policy));
        prop_assert!(!check_early_stop(&[first], &policy));
    }

    #[test]
    fn search_ranking_is_a_permutation(losses in prop::collection::vec(prop::option::of(0.0f64..2.0), 1..8)) {
        let grid: Vec<HyperConfig> = (0..losses.len())
            .map(|i| HyperConfig { learning_rate: 1e-4 * (1 + i % 3) as f32, ..HyperConfig::default() })
            .collect();
        let results = hyper_search_with(&grid, &ExperimentConfig::default(), 2, |i, _| {
            losses[i].map(|l| (l, l)).ok_or_else(|| agseg_core::Error::Config("stub failure".into()))
        });
        let mut seen: Vec<usize> = results.iter().map(|r| r.grid_index).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..grid.len()).collect::<Vec<_>>());
        prop_assert_eq!(results.iter().map(|r| r.rank).collect::<Vec<_>>(), (1..=grid.len()).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn manifest_round_trips(subjects in 1usize..12, extra in prop::collection::vec(0usize..3, 12)) {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(subjects, &extra);
        m.root = dir.path().to_path_buf();
        for r in &m.records {
            for p in [&r.image_path, &r.mask_path] {
                let full = dir.path().join(p);
                std::fs::create_dir_all(full.parent().unwrap()).unwrap();
                std::fs::write(full, b"").unwrap();
            }
        }
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, m.to_csv().unwrap()).unwrap();
        prop_assert_eq!(Manifest::load(&path).unwrap(), m);
    }

    #[test]
    fn report_json_round_trips(
        folds in prop::collection::vec((prop::collection::vec((0.0f64..5.0, 0.0f64..5.0), 1..4), 0u64..500, 0u64..500, 0u64..500, 0u64..500, 0.0f64..3.0), 1..4)
    ) {
        let reports: Vec<FoldReport> = folds
            .into_iter()
            .enumerate()
            .map(|(i, (epochs, tp, fp, fn_, tn, bce))| {
                let cm = ConfusionMatrix { tp, fp, fn_, tn };
                let pixels = cm.total();
                FoldReport {
                    fold: i,
                    train_records: 6,
                    val_records: 2,
                    test_records: 2,
                    epochs: epochs
                        .into_iter()
                        .enumerate()
                        .map(|(e, (t, v))| EpochLosses { epoch: e, train_loss: t, val_loss: v })
                        .collect(),
                    stopped_early: i % 2 == 1,
                    test_loss: bce,
                    confusion: cm,
                    metrics: MetricsReport::from_counts(&cm, bce),
                    bce_sum: bce * pixels as f64,
                    pixels,
                }
            })
            .collect();
        let report = TrainRunReport::new("cv", ExperimentConfig::default(), reports);
        let parsed = TrainRunReport::from_json(&report.to_json().unwrap()).unwrap();
        prop_assert_eq!(parsed, report);
    }
}

#[test]
fn saved_synthetic_samples_reload_within_one_level() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_corpus(dir.path(), 4, 24, 9).unwrap();
    let samples = synth_samples(4, 24, 9).unwrap();
    for (rec, s) in m.records.iter().zip(&samples) {
        let (img, mask) = agseg_core::data::load_sample(&m, rec).unwrap();
        assert_eq!(mask, s.mask);
        assert!(img.max_abs_diff(&s.image) <= 1.0 / 255.0);
    }
}
