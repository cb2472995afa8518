import pytest

from gradcases import gradient_errors


@pytest.mark.parametrize("seed", [0, 1])
def test_analytic_gradients_match_finite_differences(seed):
    errors = gradient_errors(seed)
    assert set(errors) >= {"cvae_loss", "real_term", "fake_term", "wrong_label_term", "gp_term"}
    bad = {k: v for k, v in errors.items() if not v < 1e-4}
    assert not bad, bad
