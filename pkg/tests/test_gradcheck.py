import pytest
import torch

from ccgan.gradcheck import (
    CHECK_NAMES,
    GradcheckResult,
    analytic_gradient,
    fault_injection,
    max_relative_error,
    numeric_gradient,
    render_results,
    run_gradchecks,
)


def test_numeric_gradient_of_cubic_is_exact_to_step_squared():
    x = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    num = numeric_gradient(lambda v: (v**3).sum(), x, step=1e-3)
    # Central difference of v^3 carries an h^2 error term of exactly h^2.
    assert torch.allclose(num, 3 * x**2 + 1e-6, atol=1e-12)


def test_analytic_matches_numeric_on_smooth_function():
    x = torch.linspace(-1, 1, 12, dtype=torch.float64).reshape(3, 4)

    def f(v):
        return torch.sin(v).sum() + (v[0] * v[1]).sum()

    assert max_relative_error(analytic_gradient(f, x), numeric_gradient(f, x)) < 1e-6


def test_relative_error_scales_by_largest_numeric_entry():
    a = torch.tensor([1.0, 0.0])
    n = torch.tensor([2.0, 0.5])
    assert max_relative_error(a, n) == 0.5
    assert max_relative_error(torch.zeros(2), torch.zeros(2)) == 0.0


def test_all_checks_pass_on_default_size():
    results = run_gradchecks(seeds=(3,))
    assert [r.name for r in results] == list(CHECK_NAMES)
    assert all(r.passed for r in results), render_results(results)


def test_scaled_gradient_is_caught():
    with fault_injection({"cycle": lambda g: 1.01 * g}):
        (res,) = run_gradchecks(names=("cycle",))
    assert not res.passed and res.max_rel_error == pytest.approx(0.01, rel=1e-3)
    (clean,) = run_gradchecks(names=("cycle",))
    assert clean.passed


def test_fault_injection_rejects_unknown_names():
    with pytest.raises(ValueError, match="bogus"):
        with fault_injection({"bogus": lambda g: g}):
            pass


def test_rendering():
    ok = GradcheckResult("ssim", 2, 3e-6, 1e-4)
    bad = GradcheckResult("pho", 2, 0.5, 1e-4)
    assert ok.line() == "PASS\tssim\tseed=2\tmax_rel_err=3.000e-06"
    assert render_results([ok, bad]).splitlines()[-1] == "FAILED: 1/2 checks passed"
    with pytest.raises(ValueError):
        run_gradchecks(size=3)
