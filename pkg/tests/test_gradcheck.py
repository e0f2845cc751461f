import pytest
import torch
from ensemble_tracking.gradcheck import finite_difference_gradcheck, run_gradcheck_suite

f64 = torch.float64

SUITE = [
    "softmax_normalize",
    "multi_head_attention",
    "bilinear_sample",
    "deformable_cross_attention",
    "focal_loss",
    "prediction_head",
    "tca_forward",
    "encoder_layer",
    "generalized_iou",
]


def test_square():
    report = finite_difference_gradcheck(lambda x: x**2, [torch.tensor([3.0], dtype=f64)])
    assert report.passed
    assert report.max_rel_err < 1e-7
    assert not report.non_differentiable


def test_constant_function():
    report = finite_difference_gradcheck(
        lambda x: torch.zeros((), dtype=f64), [torch.randn(4, dtype=f64)]
    )
    assert report.passed
    assert report.max_rel_err == 0.0


def test_wrong_gradient_fails():
    report = finite_difference_gradcheck(
        lambda x: x * x.detach(), [torch.tensor([3.0, -2.0], dtype=f64)], name="detached"
    )
    assert report.name == "detached"
    assert not report.passed
    assert report.max_rel_err == pytest.approx(0.5, abs=1e-6)


def test_kink_is_reported():
    report = finite_difference_gradcheck(torch.abs, [torch.tensor([0.0, 2.0], dtype=f64)])
    assert report.non_differentiable
    assert report.passed


def test_inputs_are_left_untouched():
    x = torch.randn(3, dtype=torch.float32)
    before = x.clone()
    finite_difference_gradcheck(torch.sin, [x])
    assert torch.equal(x, before)
    assert not x.requires_grad


def test_suite_passes():
    reports = run_gradcheck_suite()
    assert [report.name for report in reports] == SUITE
    for report in reports:
        assert report.passed, f"{report.name}: {report.max_rel_err:.3e}"


def test_suite_is_seeded():
    first = [report.max_rel_err for report in run_gradcheck_suite(seed=3)]
    second = [report.max_rel_err for report in run_gradcheck_suite(seed=3)]
    assert first == second


def test_suite_keeps_global_random_state():
    torch.manual_seed(123)
    expected = torch.rand(1)

    torch.manual_seed(123)
    run_gradcheck_suite()
    assert torch.equal(torch.rand(1), expected)
