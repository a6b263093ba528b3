import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from latentmorph import GuidanceConfig, ValidationError, cfg_combine, convex_cfg_schedule, sigma_boost_plan
from latentmorph.guidance import SigmaBoostPlan

unit = st.floats(0, 1)


def test_unit_weight_returns_conditional_exactly():
    a, b = torch.randn(3, 4), torch.randn(3, 4)
    assert cfg_combine(a, b, 1.0) is a


def test_equal_predictions_are_fixed_points():
    a = torch.randn(5)
    assert torch.allclose(cfg_combine(a, a.clone(), 7.5), a)


def test_scalar_formula():
    assert float(cfg_combine(torch.tensor(2.0), torch.tensor(0.0), 1.5)) == 3.0


def test_shape_mismatch_rejected():
    with pytest.raises(ValidationError):
        cfg_combine(torch.zeros(2), torch.zeros(3), 2.0)


@given(st.floats(-10, 10), st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_combination_is_affine(w, xs, ys):
    a, b = torch.tensor(xs, dtype=torch.float64), torch.tensor(ys, dtype=torch.float64)
    assert torch.allclose(cfg_combine(a, b, w) - b, w * (a - b), atol=1e-9)


@pytest.mark.parametrize("alpha, expected", [(0.0, 1.5), (1.0, 1.5), (0.5, 2.0), (0.25, 1.75)])
def test_convex_schedule_values(alpha, expected):
    assert convex_cfg_schedule(alpha, GuidanceConfig(1.5, 2.0)) == pytest.approx(expected)


@given(unit)
def test_convex_schedule_symmetric_and_bounded(alpha):
    cfg = GuidanceConfig(1.5, 2.0)
    w = convex_cfg_schedule(alpha, cfg)
    assert w == pytest.approx(convex_cfg_schedule(1 - alpha, cfg))
    assert 1.5 - 1e-12 <= w <= 2.0 + 1e-12


@pytest.mark.parametrize("alpha", [-0.1, 1.01])
def test_convex_schedule_rejects_alpha_outside_unit_interval(alpha):
    with pytest.raises(ValidationError):
        convex_cfg_schedule(alpha, GuidanceConfig())


def test_config_validation_reports_every_problem():
    with pytest.raises(ValidationError) as info:
        GuidanceConfig(w_min=0.5, w_max=0.2, schedule_kind="wiggly")
    assert len(info.value.errors) >= 3


def test_constant_kind_requires_equal_bounds():
    with pytest.raises(ValidationError):
        GuidanceConfig(1.5, 2.0, "constant")
    assert GuidanceConfig.constant(3.0).scale_at(0.1) == 3.0


def test_sigma_plan_sixteen_six():
    plan = sigma_boost_plan(16, 6)
    assert list(plan) == [0.0] * 6 + [1.0] * 10
    assert len(plan) == 16 and plan.deterministic_prefix == 6


def test_sigma_plan_edge_cases():
    assert list(sigma_boost_plan(16, 16)) == [0.0] * 16
    assert list(sigma_boost_plan(4, 0)) == [1.0] * 4


@pytest.mark.parametrize("steps, prefix", [(-1, 0), (4, -1), (4, 5)])
def test_sigma_plan_rejects_bad_counts(steps, prefix):
    with pytest.raises(ValidationError):
        sigma_boost_plan(steps, prefix)


def test_sigma_plan_prefix_must_be_deterministic():
    with pytest.raises(ValidationError):
        SigmaBoostPlan((0.0, 0.5, 1.0), 2)
