use ktd_demo::{curve_values, parse_scores, roc_json};

#[test]
fn parses_mixed_separators_and_comments() {
    let (s, l) = parse_scores("# header\n0.9, 1\n0.2\t0\n\n0.5 pos  # trailing\n").unwrap();
    assert_eq!(s, vec![0.9, 0.2, 0.5]);
    assert_eq!(l, vec![1, 0, 1]);
    assert!(parse_scores("0.5 2").unwrap_err().contains("line 1"));
    assert!(parse_scores("0.1 0\nabc 1").unwrap_err().contains("line 2"));
}

#[test]
fn roc_json_reports_ties_as_half() {
    let v: serde_json::Value = serde_json::from_str(&roc_json("0.9 1\n0.8 0\n0.8 1\n0.1 0").unwrap()).unwrap();
    assert_eq!(v["auroc"], 0.875);
    assert_eq!(v["n"], 4);
    assert_eq!(v["points"].as_array().unwrap().last().unwrap(), &serde_json::json!([1.0, 1.0]));
    assert!(roc_json("0.5 1\n0.4 1").is_err());
}

#[test]
fn curves_sweep_the_true_logit() {
    let c = curve_values(&[0.0, 0.0, 1.0], &[5.0, 1.0, 0.0], 0, 0.8, 0.8, 5.0, 5).unwrap();
    assert_eq!(c.len(), 15);
    let xs: Vec<f64> = c.chunks(3).map(|r| r[0]).collect();
    assert_eq!(xs, vec![-8.0, -4.0, 0.0, 4.0, 8.0]);
    // a confident correct student satisfies the margin
    assert_eq!(c[3 * 4 + 1], 0.0);
    // PC loss never increases as the true logit grows
    assert!(c.chunks(3).zip(c.chunks(3).skip(1)).all(|(a, b)| b[1] <= a[1]));
    assert!(curve_values(&[0.0, 0.0], &[1.0, 0.0, 0.0], 0, 0.8, 0.8, 5.0, 5).is_err());
    assert!(curve_values(&[0.0, 0.0], &[1.0, 0.0], 0, 0.8, 1.5, 5.0, 5).is_err());
}
