use plcurate::augment::{domain_mix, MosaicConfig};
use plcurate::bank::{init_bank, BankStrategy, BankThresholds, MemoryBank};
use plcurate::fusion::{nms, wbf, FusionConfig};
use plcurate::io::{read_label_sets, write_label_sets};
use plcurate::metrics::{map50, precision_recall};
use plcurate::sim::{generate_scene, SceneConfig};
use plcurate::{BBox, Detection, Domain, LabelKind, LabelSet, Seed};
use proptest::prelude::*;

fn det_strategy() -> impl Strategy<Value = Detection> {
    (0.0..0.8f64, 0.0..0.8f64, 0.02..0.2f64, 0.02..0.2f64, 0u32..3, 0.0..=1.0f64)
        .prop_map(|(x, y, w, h, c, s)| Detection::new(BBox::new(x, y, x + w, y + h).unwrap(), c, s).unwrap())
}

fn sets_strategy(kind: LabelKind) -> impl Strategy<Value = Vec<LabelSet>> {
    prop::collection::vec(prop::collection::vec(det_strategy(), 0..6), 1..4).prop_map(move |per_image| {
        per_image.into_iter().enumerate().map(|(i, dets)| LabelSet::new(format!("img{i}"), kind, dets)).collect()
    })
}

proptest! {
    #[test]
    fn jsonl_round_trip(sets in sets_strategy(LabelKind::Prediction)) {
        let mut buf = Vec::new();
        write_label_sets(&mut buf, &sets).unwrap();
        let back = read_label_sets(buf.as_slice(), LabelKind::Prediction).unwrap();
        let non_empty: Vec<LabelSet> = sets.into_iter().filter(|s| !s.is_empty()).collect();
        prop_assert_eq!(back, non_empty);
    }

    #[test]
    fn bank_file_round_trip(init in sets_strategy(LabelKind::Prediction), next in sets_strategy(LabelKind::Prediction),
                            strategy in prop::sample::select(vec![BankStrategy::Wbf, BankStrategy::Direct, BankStrategy::Mevc])) {
        let bank = init_bank(&init, BankThresholds::default(), strategy).unwrap().update(&next).unwrap();
        let back = MemoryBank::read_from(bank.to_bytes().as_slice()).unwrap();
        prop_assert_eq!(back.to_bytes(), bank.to_bytes());
        prop_assert_eq!(back.snapshot(false), bank.snapshot(false));
    }

    #[test]
    fn perfect_detections_score_map_one(gts in sets_strategy(LabelKind::GroundTruth)) {
        prop_assume!(gts.iter().any(|g| !g.is_empty()));
        let dets: Vec<LabelSet> = gts.iter().map(|g| g.clone().with_kind(LabelKind::Prediction)).collect();
        prop_assert_eq!(map50(&dets, &gts, 3).unwrap().map, 1.0);
        let pr = precision_recall(&dets, &gts, 0.5, 0.0);
        prop_assert_eq!(pr.recall, 1.0);
    }

    #[test]
    fn nms_keeps_a_subset_without_same_class_overlap(sets in sets_strategy(LabelKind::Prediction)) {
        for s in &sets {
            let kept = nms(s, 0.5);
            prop_assert!(kept.len() <= s.len());
            for d in kept.detections() {
                prop_assert!(s.detections().contains(d));
            }
        }
    }

    #[test]
    fn wbf_never_increases_box_count(a in sets_strategy(LabelKind::Prediction), b in sets_strategy(LabelKind::Prediction)) {
        let cfg = FusionConfig::default();
        for (x, y) in a.iter().zip(&b) {
            let y = LabelSet::new(x.image_id.clone(), LabelKind::Prediction, y.detections().to_vec());
            let fused = wbf(&[x.clone(), y.clone()], &cfg).unwrap();
            prop_assert!(fused.len() <= x.len() + y.len());
            for d in fused.detections() {
                prop_assert!((0.0..=1.0).contains(&d.score));
            }
        }
    }

    #[test]
    fn mosaic_keeps_labels_inside_their_quadrant(seed in any::<u64>()) {
        let cfg = SceneConfig { render_size: 16, ..SceneConfig::default() };
        let src = generate_scene("s", &mut Seed(seed).stream(1, 0, 0), &SceneConfig { domain: Domain::Source, ..cfg.clone() }).unwrap();
        let tgt = generate_scene("t", &mut Seed(seed).stream(2, 0, 0), &cfg).unwrap();
        let source = [(src.rendered.clone().unwrap(), src.gt.clone())];
        let target = [(tgt.rendered.clone().unwrap(), tgt.gt.clone())];
        let mixed = domain_mix(&source, &target, &mut Seed(seed).rng(), (32, 32), &MosaicConfig::default()).unwrap();
        prop_assert!(mixed.layout.has_both_domains());
        for l in &mixed.labels {
            let [x1, y1, x2, y2] = mixed.layout.quadrant_bounds(l.quadrant);
            let b = l.detection.bbox;
            prop_assert!(b.x1() >= x1 - 1e-12 && b.x2() <= x2 + 1e-12 && b.y1() >= y1 - 1e-12 && b.y2() <= y2 + 1e-12);
        }
    }
}
