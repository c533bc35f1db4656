mod common;

use common::rand_tensor;
use phasedet::autodiff::{Graph, ParamStore, IGNORE};
use phasedet::deencoder::ResampleMode;
use phasedet::rpn::{build_targets, rpn_forward, rpn_loss, LossWeights, ModelConfig, TargetConfig};
use phasedet::second_stage::{build_crop_batch, init_rcnn, rcnn_forward, rcnn_loss, Proposal, RcnnConfig, SuppressionPolicy};
use phasedet::synth::{generate_scene, SceneConfig};
use phasedet::targets::{apply_transform, assign_labels, compute_transform, AnchorConfig, AnchorGrid, BBox, LabelPolicy};
use phasedet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(n: usize) -> ModelConfig {
    let mut m = ModelConfig::desk(n, [4, 6, 8], ResampleMode::Fused);
    m.backbone.widths = vec![3, 4, 5, 6, 7];
    m.pfe_width = 6;
    m
}

#[test]
fn lateral_at_target_level_is_the_decoded_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 2..=4 {
        let m = tiny(n);
        let store = m.init_params(&mut rng).unwrap();
        let mut g = Graph::new(&store, false);
        let x = g.tape.constant(rand_tensor(&[1, 3, 64, 48], &mut rng));
        let out = rpn_forward(&mut g, x, &m).unwrap();
        for (st, pc) in out.de_encoder_states.iter().zip(&m.phases) {
            let t = pc.target_level;
            assert_eq!(st.encoded[&t], st.decoded[&t], "phase {}", pc.phase);
            assert_eq!(out.pyramids[pc.phase - 1].level(t).unwrap(), st.decoded[&t]);
        }
    }
}

#[test]
fn transform_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let mut b = || {
            let (x, y) = (rng.gen_range(-50.0..200.0), rng.gen_range(-50.0..200.0));
            BBox::new(x, y, x + rng.gen_range(2.0..120.0), y + rng.gen_range(2.0..120.0))
        };
        let (a, g) = (b(), b());
        let back = apply_transform(&a, &compute_transform(&a, &g).unwrap());
        for (u, v) in [(back.x1, g.x1), (back.y1, g.y1), (back.x2, g.x2), (back.y2, g.y2)] {
            assert!((u - v).abs() < 1e-9);
        }
    }
}

#[test]
fn stricter_policy_never_adds_foreground() {
    let cfg = SceneConfig::default();
    let anchors = AnchorGrid::for_image(&AnchorConfig::default(), cfg.width, cfg.height);
    for i in 0..100 {
        let s = generate_scene(&cfg, i).unwrap();
        let count = |h| assign_labels(&anchors.boxes, &s.gts, &LabelPolicy::new(h)).unwrap().foreground_count();
        let (c6, c5, c4) = (count(0.6), count(0.5), count(0.4));
        assert!(c6 <= c5 && c5 <= c4, "scene {i}: {c6} {c5} {c4}");
    }
}

#[test]
fn suppressed_proposals_get_exactly_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = RcnnConfig { crop: 16, widths: [3, 4, 5], hidden: 6, ..RcnnConfig::default() };
    let store = init_rcnn(&cfg, &mut rng).unwrap();
    let image = rand_tensor(&[3, 64, 64], &mut rng).map(|v| v.abs());
    let gt = BBox::new(10.0, 10.0, 30.0, 50.0);
    let proposals: Vec<Proposal> = [0.9, 0.001, 0.5, 0.004, 0.2]
        .iter()
        .enumerate()
        .map(|(i, &score)| {
            let o = i as f64 * 3.0;
            Proposal { bbox: BBox::new(8.0 + o, 9.0, 31.0 + o, 52.0), score, image_id: 0 }
        })
        .collect();
    let policy = SuppressionPolicy::default();
    let batch = build_crop_batch(&image, &proposals, &[gt], &cfg, policy);
    let mut g = Graph::new(&store, true);
    let crops = g.tape.leaf(Tensor::stack(&batch.crops).unwrap(), true);
    let out = rcnn_forward(&mut g, crops, &cfg).unwrap();
    let loss = rcnn_loss(&mut g, &out, &batch, 1.0).unwrap();
    g.tape.backward(loss.total).unwrap();
    let grad = g.tape.grad(crops);
    let per = grad.numel() / proposals.len();
    for (j, p) in proposals.iter().enumerate() {
        let chunk = &grad.data()[j * per..(j + 1) * per];
        if p.score < policy.z {
            assert_eq!(batch.labels[j], IGNORE);
            assert!(chunk.iter().all(|&v| v == 0.0), "proposal {j}");
        } else {
            assert!(chunk.iter().any(|&v| v != 0.0), "proposal {j}");
        }
    }

    // A batch of only suppressed proposals leaves every parameter untouched.
    let dead: Vec<Proposal> = proposals.iter().filter(|p| p.score < policy.z).cloned().collect();
    let batch = build_crop_batch(&image, &dead, &[gt], &cfg, policy);
    let mut g = Graph::new(&store, true);
    let crops = g.tape.constant(Tensor::stack(&batch.crops).unwrap());
    let out = rcnn_forward(&mut g, crops, &cfg).unwrap();
    let loss = rcnn_loss(&mut g, &out, &batch, 1.0).unwrap();
    g.tape.backward(loss.total).unwrap();
    assert_eq!(g.tape.value(loss.total).item(), 0.0);
    for (name, t) in g.param_grads().0 {
        assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
    }
}

fn logits_of(store: &ParamStore, m: &ModelConfig, image: &Tensor) -> Vec<Tensor> {
    let mut g = Graph::new(store, false);
    let x = g.tape.constant(image.clone());
    let out = rpn_forward(&mut g, x, m).unwrap();
    out.predictions.iter().map(|p| g.tape.value(p.unwrap().logits).clone()).collect()
}

#[test]
fn earlier_phases_ignore_later_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = tiny(3);
    let store = m.init_params(&mut rng).unwrap();
    let image = rand_tensor(&[1, 3, 48, 64], &mut rng);
    let base = logits_of(&store, &m, &image);
    for k in 2..=3 {
        let mut perturbed = store.clone();
        let names: Vec<String> =
            store.iter().map(|(n, _)| n.to_string()).filter(|n| n.starts_with(&format!("p{k}."))).collect();
        for n in names {
            for v in perturbed.get_mut(&n).unwrap().data_mut() {
                *v += 0.3;
            }
        }
        let after = logits_of(&perturbed, &m, &image);
        for j in 0..k - 1 {
            assert_eq!(after[j], base[j], "phase {} moved after perturbing phase {k}", j + 1);
        }
        assert_ne!(after[k - 1], base[k - 1]);
    }
}

fn ce(z0: f64, z1: f64, label: i8) -> f64 {
    let lse = z0.max(z1) + ((z0 - z0.max(z1)).exp() + (z1 - z0.max(z1)).exp()).ln();
    if label == 1 {
        lse - z1
    } else {
        lse - z0
    }
}

/// Masked mean of weighted pair cross-entropies, straight from the labels.
fn ce_oracle(logits: &Tensor, labels: &[i8], weights: &[f64]) -> f64 {
    let (bs, c2, h, w) = logits.dims4().unwrap();
    let (mut s, mut n) = (0.0, 0);
    for b in 0..bs {
        for a in 0..c2 / 2 {
            for y in 0..h {
                for x in 0..w {
                    let i = ((b * c2 / 2 + a) * h + y) * w + x;
                    if labels[i] != IGNORE {
                        s += weights[i] * ce(logits.at4(b, 2 * a, y, x), logits.at4(b, 2 * a + 1, y, x), labels[i]);
                        n += 1;
                    }
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[test]
fn rpn_loss_matches_term_by_term_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut m = tiny(3);
    m.anchors = AnchorConfig::default();
    let store = m.init_params(&mut rng).unwrap();
    let (w, h) = (64, 48);
    let gts = vec![vec![BBox::new(10.0, 4.0, 26.0, 44.0), BBox::new(36.0, 8.0, 50.0, 40.0)]];
    let anchors = AnchorGrid::for_image(&m.anchors, w, h);
    let mut tc = TargetConfig::new(vec![0.4, 0.5, 0.6]);
    tc.fg_ratio = 0.33;
    let targets = build_targets(&gts, &anchors, &tc, w, h).unwrap();
    let weights = LossWeights { phase: vec![0.1, 0.2, 1.0], bbox: 5.0, seg: 0.7 };
    let mut g = Graph::new(&store, true);
    let x = g.tape.constant(rand_tensor(&[1, 3, h, w], &mut rng));
    let out = rpn_forward(&mut g, x, &m).unwrap();
    let terms = rpn_loss(&mut g, &out, &targets, &weights).unwrap();
    let mut expected = 0.0;
    for (k, p) in out.predictions.iter().enumerate() {
        expected += weights.phase[k] * ce_oracle(g.tape.value(p.unwrap().logits), &targets.cls[k], &targets.cls_weights[k]);
    }
    let pred = g.tape.value(out.bbox);
    let mut l1 = 0.0;
    for (i, (&p, &t)) in pred.data().iter().zip(targets.bbox.data()).enumerate() {
        let d: f64 = (p - t).abs();
        let v = if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
        l1 += targets.bbox_weights[i] * v;
    }
    expected += weights.bbox * l1 / targets.num_bbox_fg.max(1) as f64;
    for (i, &s) in &out.seg {
        let labels = &targets.seg[i];
        expected += weights.seg * ce_oracle(g.tape.value(s), labels, &vec![1.0; labels.len()]);
    }
    let total = g.tape.value(terms.total).item();
    assert!((total - expected).abs() < 1e-10 * expected.abs().max(1.0), "{total} vs {expected}");
    assert!(targets.num_bbox_fg > 0);
}
