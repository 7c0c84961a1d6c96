use proptest::prelude::*;
use ssmxtrack::motion::{displacement, BoundingBox, MotionQueue};

fn boxed(x: f64, y: f64) -> BoundingBox {
    BoundingBox::new(8.0, 8.0, x, y).unwrap()
}

proptest! {
    #[test]
    fn queue_keeps_the_newest_entries(
        cap in 0usize..=4,
        pushes in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 0..12),
    ) {
        let mut q = MotionQueue::new(cap);
        for &p in &pushes {
            q.push(p);
        }
        let keep = pushes.len().min(cap);
        let expect: Vec<_> = pushes[pushes.len() - keep..].to_vec();
        prop_assert_eq!(q.entries().collect::<Vec<_>>(), expect.clone());

        let seq = q.as_sequence();
        prop_assert_eq!(seq.shape(), &[cap, 2]);
        let pad = cap - keep;
        prop_assert!(seq.data()[..2 * pad].iter().all(|&v| v == 0.0));
        for (i, (dx, dy)) in expect.iter().enumerate() {
            prop_assert_eq!(seq.at(&[pad + i, 0]), *dx);
            prop_assert_eq!(seq.at(&[pad + i, 1]), *dy);
        }
    }

    #[test]
    fn displacements_telescope(path in prop::collection::vec((0.0f64..200.0, 0.0f64..200.0), 2..6)) {
        let boxes: Vec<_> = path.iter().map(|&(x, y)| boxed(x, y)).collect();
        let (mut sx, mut sy) = (0.0, 0.0);
        for w in boxes.windows(2) {
            let (dx, dy) = displacement(&w[0], &w[1]);
            sx += dx;
            sy += dy;
        }
        let (tx, ty) = displacement(&boxes[0], boxes.last().unwrap());
        prop_assert!((sx - tx).abs() < 1e-9 && (sy - ty).abs() < 1e-9);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(
        a in (1.0f64..30.0, 1.0f64..30.0, -20.0f64..20.0, -20.0f64..20.0),
        b in (1.0f64..30.0, 1.0f64..30.0, -20.0f64..20.0, -20.0f64..20.0),
    ) {
        let a = BoundingBox::new(a.0, a.1, a.2, a.3).unwrap();
        let b = BoundingBox::new(b.0, b.1, b.2, b.3).unwrap();
        let (ab, ba) = (a.iou(&b), b.iou(&a));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!(a.iou(&a) > 1.0 - 1e-12);
    }
}
