use phasedet::eval::{evaluate, peak_profile, sig6, Detection};
use phasedet::targets::BBox;
use phasedet::Tensor;

fn det(b: BBox, score: f64, image_id: usize) -> Detection {
    Detection { bbox: b, score, image_id, phase: 1 }
}

#[test]
fn two_image_curve_by_hand() {
    let a = BBox::new(10.0, 10.0, 30.0, 60.0);
    let b = BBox::new(50.0, 20.0, 70.0, 70.0);
    let far = BBox::new(100.0, 100.0, 120.0, 150.0);
    let dets = vec![
        vec![det(far, 0.9, 0), det(BBox::new(11.0, 10.0, 31.0, 61.0), 0.8, 0)],
        vec![det(far, 0.7, 1), det(BBox::new(0.0, 0.0, 5.0, 5.0), 0.6, 1)],
    ];
    let c = evaluate(&dets, &[vec![a], vec![b]], 0.01, 1.0).unwrap();
    assert_eq!(c.points, vec![(0.5, 1.0), (0.5, 0.5), (1.0, 0.5), (1.5, 0.5)]);
    // Seven of the nine reference points sit below FPPI 0.5 and see miss rate 1.
    let expected = (2.0 * 0.5f64.ln() / 9.0).exp();
    assert!((c.log_avg - expected).abs() < 1e-12);
    assert_eq!(c.to_text().lines().last().unwrap(), format!("log_avg {}", sig6(expected)));
    assert_eq!(sig6(expected), "0.857244");
}

#[test]
fn perfect_detector_has_zero_floor_miss_rate() {
    let a = BBox::new(10.0, 10.0, 30.0, 60.0);
    let c = evaluate(&[vec![det(a, 0.9, 0)]], &[vec![a]], 0.01, 1.0).unwrap();
    assert!((c.log_avg - 1e-10).abs() < 1e-20);
    assert_eq!(c.recall_at(1.0), 1.0);
}

#[test]
fn peak_profile_of_a_tent_map() {
    // Score rises linearly toward the box centre along both axes.
    let (h, w) = (10, 10);
    let gt = BBox::new(40.0, 40.0, 120.0, 120.0);
    let mut m = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let (cx, cy) = ((x as f64 + 0.5) * 16.0, (y as f64 + 0.5) * 16.0);
            let v = (1.0 - ((cx - 80.0).abs() + (cy - 80.0).abs()) / 160.0).max(0.0);
            m.data_mut()[y * w + x] = v;
        }
    }
    let flat = Tensor::full(&[h, w], 0.5);
    let p = peak_profile(&[vec![flat, m]], &[vec![gt]], 16.0).unwrap();
    assert_eq!(p.num_gts, 1);
    assert!(p.peakedness(1).abs() < 1e-12);
    assert!(p.peakedness(2) > 0.1);
}
