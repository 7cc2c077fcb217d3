use panosfuda::metrics::{miou, ConfusionMatrix};
use proptest::prelude::*;

fn pairs(k: u16) -> impl Strategy<Value = Vec<(u16, u16)>> {
    prop::collection::vec((0..k, 0..=k), 1..200)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn total_counts_non_ignored_pixels(v in pairs(5)) {
        let (pred, truth): (Vec<u16>, Vec<u16>) = v.iter().copied().unzip();
        let mut cm = ConfusionMatrix::new(5);
        cm.add(&pred, &truth).unwrap();
        prop_assert_eq!(cm.total() as usize, truth.iter().filter(|&&t| t < 5).count());
    }

    #[test]
    fn miou_invariant_to_class_relabeling(v in pairs(4), shift in 1u16..4) {
        let (pred, truth): (Vec<u16>, Vec<u16>) = v.iter().copied().unzip();
        let perm = |x: u16| if x < 4 { (x + shift) % 4 } else { x };
        let mut a = ConfusionMatrix::new(4);
        a.add(&pred, &truth).unwrap();
        let mut b = ConfusionMatrix::new(4);
        let pp: Vec<u16> = pred.iter().map(|&x| perm(x)).collect();
        let tp: Vec<u16> = truth.iter().map(|&x| perm(x)).collect();
        b.add(&pp, &tp).unwrap();
        match (miou(&a), miou(&b)) {
            (Ok((_, x)), Ok((_, y))) => prop_assert!((x - y).abs() < 1e-12),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "one side failed"),
        }
    }

    #[test]
    fn miou_invariant_to_pixel_order(v in pairs(4)) {
        let (pred, truth): (Vec<u16>, Vec<u16>) = v.iter().copied().unzip();
        let mut a = ConfusionMatrix::new(4);
        a.add(&pred, &truth).unwrap();
        let mut rp = pred.clone();
        let mut rt = truth.clone();
        rp.reverse();
        rt.reverse();
        let mut b = ConfusionMatrix::new(4);
        b.add(&rp, &rt).unwrap();
        prop_assert_eq!(&a, &b);
    }

    #[test]
    fn merge_equals_joint_accumulation(v in pairs(3), w in pairs(3)) {
        let mut a = ConfusionMatrix::new(3);
        let mut b = ConfusionMatrix::new(3);
        let mut joint = ConfusionMatrix::new(3);
        for (cm, s) in [(&mut a, &v), (&mut b, &w)] {
            let (p, t): (Vec<u16>, Vec<u16>) = s.iter().copied().unzip();
            cm.add(&p, &t).unwrap();
            joint.add(&p, &t).unwrap();
        }
        a.merge(&b).unwrap();
        prop_assert_eq!(a, joint);
    }

    #[test]
    fn miou_in_unit_interval(v in pairs(6)) {
        let (pred, truth): (Vec<u16>, Vec<u16>) = v.iter().copied().unzip();
        let mut cm = ConfusionMatrix::new(6);
        cm.add(&pred, &truth).unwrap();
        if let Ok((ious, m)) = miou(&cm) {
            prop_assert!((0.0..=1.0).contains(&m));
            prop_assert!(ious.iter().flatten().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}

#[test]
fn predicted_id_outside_range_is_an_error() {
    let mut cm = ConfusionMatrix::new(2);
    assert!(cm.add(&[2], &[0]).is_err());
    assert!(cm.add(&[0, 1], &[0]).is_err());
    assert!(miou(&ConfusionMatrix::new(1)).is_err());
}
