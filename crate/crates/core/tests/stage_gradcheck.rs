mod common;

#[test]
fn miniature_stage_gradients_match_finite_differences() {
    let errors = common::stage::stage_gradient_errors();
    assert!(errors.len() > 30);
    for (name, e) in errors {
        assert!(e <= 1e-3, "{name}: relative error {e:.3e}");
    }
}
