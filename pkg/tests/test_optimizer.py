import numpy as np
import pytest

from lambdatune.backends import ClipRef, SyntheticClipParams, SyntheticEncoder
from lambdatune.optimizer import (
    BudgetExceeded,
    Objective,
    OptConfig,
    optimize_k,
    parse_grid,
    sweep_k,
)


def clip_with(k_star=0.7, g=0.12, sigma=0.25, seed=7) -> ClipRef:
    return ClipRef(
        id=f"opt:{k_star}:{seed}",
        source=SyntheticClipParams(
            r0=5000, gamma=6, p0=45, s=0.8, k_star=k_star, g=g, sigma=sigma, seed=seed
        ),
    )


def test_parse_grid_inclusive():
    assert parse_grid("0.5:0.25:1.5") == [0.5, 0.75, 1.0, 1.25, 1.5]
    assert parse_grid("1:0.3:1.9") == [1.0, 1.3, 1.6, 1.9]


def test_parse_grid_drops_nonpositive_start():
    grid = parse_grid("0:0.5:2")
    assert grid[0] == 0.5 and 0.0 not in grid


def test_parse_grid_rejects_garbage():
    for bad in ("", "1:2", "a:b:c", "1:0:2", "2:0.5:1"):
        with pytest.raises(ValueError):
            parse_grid(bad)


def test_opt_config_validation():
    with pytest.raises(ValueError):
        OptConfig(k_min=1.5, k_max=3.0)  # k=1 must stay inside the bracket
    with pytest.raises(ValueError):
        OptConfig(tol=0.0)
    with pytest.raises(ValueError):
        OptConfig(crf_list=(22, 27, 32))


def test_optimize_finds_the_dip(backend):
    clip = clip_with(k_star=0.7)
    res = optimize_k(clip, OptConfig(tol=0.01), backend)
    assert abs(res.k_opt - 0.7) <= 0.01
    assert res.bd_rate_at_k_opt < 0


def test_encode_accounting_is_exact(backend):
    clip = clip_with(k_star=1.4, seed=11)
    before = backend.encodes
    res = optimize_k(clip, OptConfig(tol=0.01), backend)
    assert backend.encodes - before == res.encodes_used
    # anchor curve + one curve per unique trace point
    assert res.encodes_used == (1 + len(res.trace)) * len(OptConfig().crf_list)


def test_objective_memoizes(backend):
    clip = clip_with()
    obj = Objective(clip, backend)
    before = backend.encodes
    a = obj(0.9)
    again = obj(0.9)
    assert a == again
    assert backend.encodes - before == len(OptConfig().crf_list)  # one curve only
    assert len(obj.trace) == 1


def test_anchor_bd_rate_is_zero(backend):
    obj = Objective(clip_with(), backend)
    assert obj(1.0) == 0.0


def test_budget_exceeded_carries_best(backend):
    clip = clip_with(k_star=2.1, seed=3)
    with pytest.raises(BudgetExceeded) as exc_info:
        optimize_k(clip, OptConfig(tol=1e-9, max_iters=5), backend)
    best = exc_info.value.best
    assert best.iterations == 5
    assert best.bd_rate_at_k_opt <= 0.0
    assert best.encodes_used == (1 + len(best.trace)) * 5


def test_tighter_tol_never_worsens(backend):
    clip = clip_with(k_star=1.8, seed=13)
    loose = optimize_k(clip, OptConfig(tol=0.05), backend)
    tight = optimize_k(clip, OptConfig(tol=0.005), backend)
    assert tight.bd_rate_at_k_opt <= loose.bd_rate_at_k_opt
    # the loose evaluation sequence is a prefix of the tight one
    assert tight.trace[: len(loose.trace)] == loose.trace


def test_flat_objective_ties_to_smaller_k(backend):
    clip = clip_with(g=0.0)  # no dip anywhere: bd-rate is 0 for every k
    res = optimize_k(clip, OptConfig(tol=0.01), backend)
    assert res.bd_rate_at_k_opt == 0.0
    assert res.k_opt == min(k for k, _ in res.trace)


def test_sweep_matches_objective(backend):
    clip = clip_with()
    grid = [0.5, 0.7, 1.0, 1.5]
    trace = sweep_k(clip, grid, backend)
    obj = Objective(clip, backend)
    assert trace == [(k, obj(k)) for k in grid]


def test_sweep_rejects_bad_grid(backend):
    with pytest.raises(ValueError):
        sweep_k(clip_with(), [], backend)
    with pytest.raises(ValueError):
        sweep_k(clip_with(), [0.5, -1.0], backend)


def test_optimum_matches_brute_force_sample(backend):
    # spot version of the corpus-scale agreement check
    rng = np.random.default_rng(21)
    grid = parse_grid("0.2:0.001:3.0")
    for seed in range(5):
        k_star = float(rng.uniform(0.3, 2.5))
        clip = clip_with(k_star=k_star, sigma=float(rng.uniform(0.08, 0.3)), seed=seed)
        res = optimize_k(clip, OptConfig(tol=0.01), backend)
        brute = min(sweep_k(clip, grid, backend), key=lambda t: (t[1], t[0]))[0]
        assert abs(res.k_opt - brute) <= 0.02
