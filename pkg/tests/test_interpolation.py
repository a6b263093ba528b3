import math
import threading

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latentmorph import (
    EmbeddingVector,
    LatentState,
    MorphSequence,
    MorphSpec,
    SearchError,
    ValidationError,
    generate_frame,
    lerp_embedding,
    perceptual_uniform_alphas,
    slerp_latent,
)
from latentmorph.interpolation import FrameCache, perceptual_uniform_search, uniform_path

unit = st.floats(0, 1)


def scalar_frame(alpha):
    return np.array([alpha])


def lin(a, b):
    return abs(float(a[0] - b[0]))


def grid_oracle(spec, metric, n=10_000):
    """Brute-force search on a fine alpha grid: each hop lands on the grid point closest to delta."""
    grid = np.linspace(spec.alpha_start, spec.alpha_end, n + 1)
    alphas = [spec.alpha_start]
    while metric(alphas[-1], spec.alpha_end) > spec.delta_lpips:
        ahead = grid[grid > alphas[-1]]
        d = np.array([metric(alphas[-1], a) for a in ahead])
        alphas.append(float(ahead[np.argmin(abs(d - spec.delta_lpips))]))
    return alphas + [spec.alpha_end]


# lerp


def test_lerp_scalar_probe():
    e = lerp_embedding(EmbeddingVector(torch.zeros(1)), EmbeddingVector(torch.full((1,), 4.0)), 0.25)
    assert float(e.values) == 1.0 and e.origin == "interpolated"


def test_lerp_endpoints_exact():
    g = torch.Generator().manual_seed(0)
    a, b = EmbeddingVector(torch.randn(3, 5, generator=g)), EmbeddingVector(torch.randn(3, 5, generator=g))
    assert torch.equal(lerp_embedding(a, b, 0.0).values, a.values)
    assert torch.equal(lerp_embedding(a, b, 1.0).values, b.values)


@given(unit)
def test_lerp_of_equal_embeddings_is_constant(alpha):
    a = EmbeddingVector(torch.linspace(-1, 1, 6))
    assert torch.allclose(lerp_embedding(a, a, alpha).values, a.values, atol=1e-6)


def test_lerp_is_affine():
    g = torch.Generator().manual_seed(1)
    a, b = EmbeddingVector(torch.randn(8, generator=g)), EmbeddingVector(torch.randn(8, generator=g))
    mid = lerp_embedding(a, b, 0.5).values
    assert torch.allclose(mid, 0.5 * (lerp_embedding(a, b, 0).values + lerp_embedding(a, b, 1).values))


def test_lerp_shape_mismatch():
    with pytest.raises(ValidationError):
        lerp_embedding(EmbeddingVector(torch.zeros(2)), EmbeddingVector(torch.zeros(3)), 0.5)


# slerp


def test_slerp_orthonormal_midpoint():
    a, b = LatentState(torch.tensor([1.0, 0.0]), 1000), LatentState(torch.tensor([0.0, 1.0]), 1000)
    out = slerp_latent(a, b, 0.5).tensor
    assert torch.allclose(out, torch.tensor([1.0, 1.0]) / math.sqrt(2))
    assert float(out.norm()) == pytest.approx(1.0)


def test_slerp_endpoints():
    g = torch.Generator().manual_seed(2)
    a, b = LatentState(torch.randn(50, generator=g), 1000), LatentState(torch.randn(50, generator=g), 1000)
    assert torch.allclose(slerp_latent(a, b, 0).tensor, a.tensor, atol=1e-6)
    assert torch.allclose(slerp_latent(a, b, 1).tensor, b.tensor, atol=1e-6)


@settings(max_examples=50)
@given(unit, st.integers(0, 2**16))
def test_slerp_preserves_equal_norms(alpha, seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(3, 16, 16, generator=g, dtype=torch.float64), torch.randn(3, 16, 16, generator=g, dtype=torch.float64)
    b = b * (a.norm() / b.norm())
    out = slerp_latent(LatentState(a, 1000), LatentState(b, 1000), alpha).tensor
    assert abs(float(out.norm()) - float(a.norm())) <= 1e-5


@given(unit)
def test_slerp_path_symmetry(alpha):
    g = torch.Generator().manual_seed(3)
    a, b = LatentState(torch.randn(32, generator=g, dtype=torch.float64), 1000), LatentState(torch.randn(32, generator=g, dtype=torch.float64), 1000)
    assert torch.allclose(slerp_latent(a, b, alpha).tensor, slerp_latent(b, a, 1 - alpha).tensor, atol=1e-12)


def test_slerp_small_angle_falls_back_to_lerp():
    a = torch.tensor([1.0, 0.0], dtype=torch.float64)
    b = torch.tensor([1.0, 1e-6], dtype=torch.float64)
    out = slerp_latent(LatentState(a, 1000), LatentState(b, 1000), 0.3).tensor
    assert torch.equal(out, 0.7 * a + 0.3 * b)


def test_slerp_continuous_across_fallback_threshold():
    a = torch.tensor([1.0, 0.0], dtype=torch.float64)
    below = torch.tensor([math.cos(0.99e-4), math.sin(0.99e-4)], dtype=torch.float64)
    above = torch.tensor([math.cos(1.01e-4), math.sin(1.01e-4)], dtype=torch.float64)
    lo = slerp_latent(LatentState(a, 1000), LatentState(below, 1000), 0.5).tensor
    hi = slerp_latent(LatentState(a, 1000), LatentState(above, 1000), 0.5).tensor
    assert float((lo - hi).norm()) < 1e-5


@pytest.mark.parametrize(
    "a, b",
    [
        (LatentState(torch.tensor([1.0, 0.0]), 1000), LatentState(torch.tensor([-1.0, 0.0]), 1000)),
        (LatentState(torch.tensor([0.0, 0.0]), 1000), LatentState(torch.tensor([1.0, 0.0]), 1000)),
        (LatentState(torch.tensor([1.0, 0.0]), 1000), LatentState(torch.tensor([0.0, 1.0]), 999)),
        (LatentState(torch.tensor([1.0, 0.0]), 1000), LatentState(torch.tensor([0.0, 1.0, 0.0]), 1000)),
    ],
    ids=["antipodal", "zero", "timestep", "shape"],
)
def test_slerp_rejects(a, b):
    with pytest.raises(ValidationError):
        slerp_latent(a, b, 0.5)


@pytest.mark.parametrize("alpha", [-1e-9, 1.5, float("nan")])
def test_alpha_range(alpha):
    x = LatentState(torch.ones(2), 1000)
    with pytest.raises(ValidationError):
        slerp_latent(x, x, alpha)


# search


def test_search_linear_metric():
    spec = MorphSpec(delta_lpips=0.2, eps_tol=0.01)
    alphas = perceptual_uniform_alphas(spec, scalar_frame, lin)
    assert np.allclose(alphas, [0, 0.2, 0.4, 0.6, 0.8, 1.0], atol=0.01)


def test_search_close_endpoints_return_pair():
    spec = MorphSpec(alpha_start=0.1, alpha_end=0.25, delta_lpips=0.2, eps_tol=0.01)
    assert perceptual_uniform_alphas(spec, scalar_frame, lin) == [0.1, 0.25]


@pytest.mark.parametrize(
    "metric, delta",
    [
        (lambda a, b: float((b - a) ** 2), 0.3),
        (lambda a, b: abs(float(b * b - a * a)), 0.2),
        (lambda a, b: abs(math.sin(3 * float(b)) - math.sin(3 * float(a))) + 0.1 * abs(float(b - a)), 0.15),
    ],
    ids=["squared", "quadratic-warp", "wavy"],
)
def test_search_matches_grid_oracle(metric, delta):
    spec = MorphSpec(delta_lpips=delta, eps_tol=0.005)
    scalar = lambda a, b: metric(np.asarray(a).item(), np.asarray(b).item())  # noqa: E731
    result = perceptual_uniform_search(spec, scalar_frame, scalar)
    oracle = grid_oracle(spec, lambda a, b: metric(a, b))
    assert len(result.alphas) == len(oracle)
    # a tolerance band of eps on d maps to roughly eps / |d'| on alpha
    assert np.allclose(result.alphas, oracle, atol=0.02)
    for hop in result.hop_distances[:-1]:
        assert abs(hop - delta) <= spec.eps_tol
    assert result.hop_distances[-1] <= delta


def test_search_squared_metric_positions():
    spec = MorphSpec(delta_lpips=0.3, eps_tol=0.01)
    alphas = perceptual_uniform_alphas(spec, scalar_frame, lambda a, b: float((b[0] - a[0]) ** 2))
    assert len(alphas) == 3 and alphas[1] == pytest.approx(math.sqrt(0.3), abs=0.01)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 0.5), st.floats(0.1, 0.5), st.floats(0.5, 4.0))
def test_search_invariants(delta, tol_frac, power):
    spec = MorphSpec(delta_lpips=delta, eps_tol=delta * tol_frac, max_frames=1000)
    metric = lambda a, b: abs(float(b) ** power - float(a) ** power)  # noqa: E731
    res = perceptual_uniform_search(spec, scalar_frame, lambda x, y: metric(x[0], y[0]))
    assert res.alphas[0] == 0.0 and res.alphas[-1] == 1.0
    assert all(b > a for a, b in zip(res.alphas, res.alphas[1:]))
    assert all(abs(h - delta) <= spec.eps_tol for h in res.hop_distances[:-1])
    assert res.hop_distances[-1] <= delta
    n = len(res.alphas)
    assert abs(sum(res.hop_distances) - (n - 1) * delta) <= n * spec.eps_tol + delta


def test_non_monotone_metric_reports_bracket():
    # distance from 0 jumps over the target band: no alpha reaches 0.2 +- 0.01
    metric = lambda a, b: 0.0 if abs(float(b[0] - a[0])) < 0.37 else 1.0  # noqa: E731
    with pytest.raises(SearchError) as info:
        perceptual_uniform_search(MorphSpec(delta_lpips=0.2, eps_tol=0.01), scalar_frame, metric)
    lo, hi = info.value.bracket
    # the frame cache quantizes alpha to 1e-6, so the bracket closes to that resolution
    assert lo - 1e-6 <= 0.37 <= hi + 1e-6 and hi - lo < 1e-6


def test_max_frames_cap():
    with pytest.raises(SearchError, match="max_frames"):
        perceptual_uniform_search(
            MorphSpec(delta_lpips=0.05, eps_tol=0.005, max_frames=5), scalar_frame, lin
        )


def test_spec_enumerates_all_errors():
    with pytest.raises(ValidationError) as info:
        MorphSpec(alpha_start=0.8, alpha_end=0.2, delta_lpips=-1, eps_tol=0, max_frames=1)
    assert len(info.value.errors) == 4


def test_spec_tolerance_below_delta():
    with pytest.raises(ValidationError):
        MorphSpec(delta_lpips=0.1, eps_tol=0.1)


def test_cache_never_recomputes():
    calls = []

    def frame(alpha):
        calls.append(alpha)
        return np.array([alpha])

    cache = FrameCache(frame)
    perceptual_uniform_search(MorphSpec(delta_lpips=0.2, eps_tol=0.01), cache, lin)
    keys = [cache.key(a) for a in calls]
    assert len(keys) == len(set(keys)) == cache.calls


def test_cache_quantizes_alpha():
    cache = FrameCache(scalar_frame)
    assert cache(0.3) is cache(0.3 + 2e-7)
    assert cache.calls == 1


def test_cache_is_thread_safe():
    cache = FrameCache(scalar_frame)
    threads = [threading.Thread(target=lambda: [cache(i / 10) for i in range(11)]) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert cache.calls == 11


# sequences


def test_sequence_invariants():
    frames = [np.zeros(1)] * 3
    with pytest.raises(ValidationError):
        MorphSequence(frames, [0, 0.5, 1], [0.1])
    with pytest.raises(ValidationError):
        MorphSequence(frames, [0, 0.7, 0.5], [0.1, 0.1])


def test_sequence_reversal():
    seq = MorphSequence([np.array([i]) for i in range(3)], [0.0, 0.3, 1.0], [0.3, 0.7])
    rev = seq.reversed()
    assert rev.alphas == pytest.approx([0.0, 0.7, 1.0])
    assert rev.hop_distances == [0.7, 0.3]
    assert int(rev.frames[0][0]) == 2


def test_uniform_path_spacing():
    assert [float(f[0]) for f in uniform_path(scalar_frame, 5)] == [0, 0.25, 0.5, 0.75, 1.0]
    with pytest.raises(ValidationError):
        uniform_path(scalar_frame, 1)


# frames on the toy backend


def test_frame_is_deterministic(fitted_morpher):
    ctx = fitted_morpher.context_
    assert np.array_equal(generate_frame(0.4, ctx), generate_frame(0.4, ctx))


def test_alpha_zero_reconstructs_endpoint(fitted_morpher, toy_backend):
    from dataclasses import replace

    from latentmorph import GuidanceConfig

    ctx = replace(fitted_morpher.context_, guidance=GuidanceConfig.constant(1.0), sigma_plan=[0.0] * 16)
    frame = generate_frame(0.0, ctx)
    assert toy_backend.perceptual_distance(frame, fitted_morpher.images_[0]) < toy_backend.codec_tolerance + 0.05


def test_midpoint_differs_from_both_endpoints(fitted_morpher, toy_backend):
    seq = fitted_morpher.morph()
    mid = fitted_morpher.transform([0.5])[0]
    floor = min(seq.hop_distances)
    for end in (seq.frames[0], seq.frames[-1]):
        assert toy_backend.perceptual_distance(mid, end) >= floor
