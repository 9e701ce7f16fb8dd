use super::*;
use crate::protocol::conformance;

fn scene(objects: &[&str], seed: u64) -> SceneSpec {
    SceneSpec::new("s", objects.iter().copied(), seed)
}

fn mock_with(rate: RateCurve, seed: u64) -> MockLvlm {
    let behavior = MockBehavior {
        hallucination_rate: rate,
        ..MockBehavior::default()
    };
    MockLvlm::new(vec![scene(&["dog", "bench", "car", "tree"], seed)], behavior).unwrap()
}

#[test]
fn greedy_caption_is_deterministic() {
    let a = mock_with(RateCurve::linear(0.1, 0.5), 9);
    let b = mock_with(RateCurve::linear(0.1, 0.5), 9);
    assert_eq!(a.greedy_caption("s").unwrap(), b.greedy_caption("s").unwrap());
}

#[test]
fn caption_follows_templates() {
    let m = mock_with(RateCurve::constant(0.0), 1);
    let c = m.greedy_caption("s").unwrap();
    assert!(c.text.starts_with("This image features a "), "{}", c.text);
    assert!(c.text.contains("In addition to the "), "{}", c.text);
    assert_eq!(*c.tokens.last().unwrap(), EOS);
}

#[test]
fn zero_rate_mentions_only_true_objects() {
    for seed in 0..20 {
        let m = mock_with(RateCurve::constant(0.0), seed);
        let c = m.greedy_caption("s").unwrap();
        assert!(c.truth.mentions.iter().all(|(_, o, injected)| !injected && c.truth.objects.contains(o)));
        assert!(c.truth.labels.iter().all(|l| l.is_accurate()));
    }
}

#[test]
fn step_curve_injects_every_late_slot() {
    let m = mock_with(RateCurve::step(0.5, 0.0, 1.0), 4);
    let n = m.behavior().sentences_per_caption;
    for s in 0..n {
        for first in ["This", "In", "The", "A", "There", "Overall"] {
            let plan = m.sentence_plan("s", s, first).unwrap();
            let late = s as f64 / n as f64 >= 0.5;
            assert!(plan.slots.iter().all(|p| p.injected == late), "s={s} {first}");
        }
    }
}

#[test]
fn grounded_and_hallucinated_hidden_states() {
    let m = mock_with(RateCurve::constant(0.3), 2);
    let dog = m.vocab().id("dog").unwrap();
    let x1 = m.hidden_state_model(dog, 5, true, true);
    let x2 = m.hidden_state_model(dog, 5, true, false);
    let e = m.signal_direction(dog);
    let norm = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let delta: Vec<f32> = x1.iter().zip(&x2).map(|(a, b)| a - b).collect();
    assert!((norm(&delta) - 4.0 * norm(&e)).abs() < 1e-4);
    assert!(norm(&e) > 0.0);
    assert_eq!(m.hidden_state_model(dog, 5, false, true), m.hidden_state_model(dog, 5, false, false));
    assert_eq!(x2, m.base_vector(dog, 5));
}

#[test]
fn hidden_states_follow_labels() {
    let m = mock_with(RateCurve::constant(0.5), 3);
    let c = m.greedy_caption("s").unwrap();
    let ctx = SequenceContext::caption("s", Vec::new());
    let x1 = m.final_hidden_states(&ctx, &c.tokens, true).unwrap();
    let x2 = m.final_hidden_states(&ctx, &c.tokens, false).unwrap();
    assert!(c.truth.labels.iter().any(|l| !l.is_accurate()));
    for i in 0..c.tokens.len() {
        assert_eq!(x1[i] == x2[i], !c.truth.labels[i].is_accurate(), "position {i}");
    }
}

#[test]
fn injection_frequency_tracks_curve() {
    let curve = RateCurve::linear(0.1, 0.7);
    let behavior = MockBehavior {
        hallucination_rate: curve.clone(),
        ..MockBehavior::default()
    };
    let gen = SceneGenerator {
        count: 400,
        seed: 17,
        ..SceneGenerator::default()
    };
    let scenes = generate_scenes(&gen, &behavior.objects).unwrap();
    let m = MockLvlm::new(scenes, behavior).unwrap();
    let n = m.behavior().sentences_per_caption;
    let ids: Vec<String> = m.scene_ids().map(String::from).collect();
    for s in 0..n {
        let (mut injected, mut total) = (0usize, 0usize);
        for id in &ids {
            for first in ["In", "There", "The", "A"] {
                for slot in m.sentence_plan(id, s, first).unwrap().slots {
                    total += 1;
                    injected += usize::from(slot.injected);
                }
            }
        }
        assert!(total >= 1000);
        let rate = injected as f64 / total as f64;
        assert!((rate - m.injection_rate(s)).abs() <= 0.05, "s={s}: {rate} vs {}", m.injection_rate(s));
    }
}

#[test]
fn without_image_is_flatter_only_at_grounded_targets() {
    let m = mock_with(RateCurve::constant(0.5), 5);
    let c = m.greedy_caption("s").unwrap();
    for i in 0..c.tokens.len() {
        let p = m.next_distribution("s", &c.tokens[..i], true).unwrap();
        let q = m.next_distribution("s", &c.tokens[..i], false).unwrap();
        assert_eq!(p[0].0, q[0].0);
        assert_eq!(p[0].0, c.tokens[i]);
        if !c.truth.labels[i].is_accurate() {
            assert_eq!(p, q);
        }
    }
}

#[test]
fn top_k_pads_and_orders() {
    let m = mock_with(RateCurve::constant(0.0), 1);
    let ctx = SequenceContext::caption("s", Vec::new());
    let step = m.top_k_next(&ctx, 5, true).unwrap();
    assert_eq!(step.top_tokens.len(), 5);
    assert_eq!(m.vocab().word(step.top_tokens[0].0), "This");
    assert_eq!(step.top_tokens[3].1, 0.0);
    assert_eq!(step.top_tokens[3].0, EOS);
    assert!(m.top_k_next(&ctx, 0, true).is_err());
}

#[test]
fn unknown_scene_is_input_error() {
    let m = mock_with(RateCurve::constant(0.0), 1);
    let ctx = SequenceContext::caption("nope", Vec::new());
    assert!(matches!(m.top_k_next(&ctx, 1, true), Err(BackendError::Input(_))));
}

#[test]
fn discriminative_answers_from_scene() {
    let m = mock_with(RateCurve::constant(0.0), 1);
    assert!(m.discriminative_query("s", "dog").unwrap());
    assert!(!m.discriminative_query("s", "zebra").unwrap());
}

#[test]
fn config_errors() {
    let bad = MockBehavior {
        hidden_dim: 4,
        ..MockBehavior::default()
    };
    assert!(MockLvlm::new(vec![], bad).is_err());
    assert!(MockLvlm::new(vec![scene(&["unicorn"], 1)], MockBehavior::default()).is_err());
    let objects = vec!["This".to_string()];
    let collide = MockBehavior {
        objects,
        ..MockBehavior::default()
    };
    assert!(MockLvlm::new(vec![], collide).is_err());
}

#[test]
fn passes_conformance() {
    let m = mock_with(RateCurve::linear(0.1, 0.5), 8);
    let report = conformance::run(&m, "s");
    assert!(report.all_passed(), "{:?}", report.failures());
}

#[test]
fn detector_records_separate_at_zero_noise() {
    let m = mock_with(RateCurve::constant(0.0), 1);
    let present = m.detector_record("s", "c", "dog").unwrap();
    let absent = m.detector_record("s", "c", "zebra").unwrap();
    assert!(present.yolo_conf.unwrap() >= 0.6 && present.label == Some(true));
    assert!(absent.yolo_conf.unwrap() <= 0.2 && absent.label == Some(false));
}
