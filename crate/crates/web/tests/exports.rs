use serde_json::Value;
use tor_web::{select_batch, surrogate_curve, top_p_entropy};

fn json(s: Result<String, String>) -> Value {
    serde_json::from_str(&s.unwrap()).unwrap()
}

#[test]
fn entropy_view_matches_hand_values() {
    let v = json(top_p_entropy(vec![5.0, 3.0, 2.0], 0.7));
    assert_eq!(v["nucleus"], serde_json::json!([0, 1]));
    let h = -(0.5f64 * 0.5f64.ln() + 0.3 * 0.3f64.ln());
    assert!((v["topPEntropy"].as_f64().unwrap() - h).abs() < 1e-12);
    assert!((v["nucleusMass"].as_f64().unwrap() - 0.8).abs() < 1e-12);
    assert!(top_p_entropy(vec![0.0, 0.0], 0.9).is_err());
    assert!(top_p_entropy(vec![1.0], 0.0).is_err());
}

#[test]
fn curve_flattens_outside_the_trust_region() {
    let v = json(surrogate_curve(1.0, 0.2, 0.28, 2.0, 21));
    let pts = v.as_array().unwrap();
    assert_eq!(pts.len(), 21);
    let last = &pts[20];
    assert_eq!(last["ratio"], 2.0);
    assert!((last["clipped"].as_f64().unwrap() - 1.28).abs() < 1e-12);
    let v = json(surrogate_curve(-1.0, 0.2, 0.28, 2.0, 21));
    assert!((v[0]["clipped"].as_f64().unwrap() + 0.8).abs() < 1e-12);
    assert!(surrogate_curve(1.0, 0.2, 0.2, 2.0, 1).is_err());
}

#[test]
fn selection_view_is_consistent() {
    let v = json(select_batch(3, 4, 0.3, 0.3, 1.0, 0.5));
    let rollouts = v["rollouts"].as_array().unwrap();
    assert_eq!(rollouts.len(), 4);
    let mut reasoning = 0;
    for tok in rollouts.iter().flat_map(|r| r.as_array().unwrap()) {
        let (r, p, w) = (tok["reasoning"].as_bool().unwrap(), tok["perception"].as_bool().unwrap(), tok["weight"].as_f64().unwrap());
        let expect = if r { 1.0 } else if p { 0.5 } else { 0.0 };
        assert_eq!(w, expect);
        reasoning += usize::from(r);
    }
    assert_eq!(reasoning, v["reasoningCount"].as_u64().unwrap() as usize);
    assert_eq!(v["grid"].as_array().unwrap().len(), 3);
    assert_eq!(select_batch(3, 4, 0.3, 0.3, 1.0, 0.5), select_batch(3, 4, 0.3, 0.3, 1.0, 0.5));
    assert!(select_batch(3, 4, 0.0, 0.3, 1.0, 0.5).is_err());
}
