//! The gradient suite must notice a wrong backward pass whose forward value
//! is still right.

use cohort_mil::verify::{diffcore_cases, gradient_suite, OpCase};

#[test]
fn unmodified_cases_pass() {
    gradient_suite(&diffcore_cases()).unwrap();
}

#[test]
fn flipped_clip_gradient_is_caught() {
    let mut cases = diffcore_cases();
    let idx = cases.iter().position(|c| c.name == "clip").expect("clip case exists");
    // same value as clip(x), negated gradient
    cases[idx] = OpCase::new("clip", 4, 4, |g, x| {
        let c = g.clip(x, -0.5, 0.5)?;
        let frozen = g.stop_grad(c)?;
        let twice = g.scale(frozen, 2.0)?;
        g.sub(twice, c)
    })
    .with_kinks(&[-0.5, 0.5]);
    let err = gradient_suite(&cases).unwrap_err();
    assert!(err.starts_with("clip:"), "{err}");
}
