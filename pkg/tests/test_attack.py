import math

import numpy as np
import pytest

from onepixel.attack import (
    AttackConfig,
    AttackDirection,
    AttackError,
    Outcome,
    classify_outcome,
    run_attack,
)
from onepixel.evolution import ConfigError, DeConfig
from onepixel.imaging import apply_perturbation
from onepixel.oracle import ConstantOracle, FunctionOracle, PlantedOracle

MIN = AttackDirection.MITOSIS_TO_NORMAL
MAX = AttackDirection.NORMAL_TO_MITOSIS


def small_de(**kw):
    return DeConfig(**{"population_size": 40, "max_iterations": 40, **kw})


@pytest.mark.parametrize(
    "score,expected",
    [(0.04, Outcome.STRONG_SUCCESS), (0.4, Outcome.SUCCESS), (0.6, Outcome.FAILED),
     (0.05, Outcome.SUCCESS), (0.5, Outcome.FAILED)],
)  # fmt: skip
def test_tiers_minimize(score, expected):
    assert classify_outcome(MIN, False, 10, score) is expected


@pytest.mark.parametrize(
    "score,expected",
    [(0.96, Outcome.STRONG_SUCCESS), (0.6, Outcome.SUCCESS), (0.4, Outcome.FAILED),
     (0.95, Outcome.SUCCESS), (0.5, Outcome.FAILED)],
)  # fmt: skip
def test_tiers_maximize(score, expected):
    assert classify_outcome(MAX, False, 10, score) is expected


def test_early_convergence_trumps_score():
    assert classify_outcome(MIN, True, 0, 0.01) is Outcome.EARLY_CONVERGED
    assert classify_outcome(MIN, False, 0, 0.01) is Outcome.STRONG_SUCCESS


def test_custom_thresholds():
    assert classify_outcome(MIN, False, 3, 0.15, 0.3, 0.2) is Outcome.STRONG_SUCCESS
    assert classify_outcome(MAX, False, 3, 0.75, 0.7, 0.8) is Outcome.SUCCESS


def test_outcome_succeeded():
    assert Outcome.SUCCESS.succeeded and Outcome.STRONG_SUCCESS.succeeded
    assert not any(o.succeeded for o in (Outcome.FAILED, Outcome.EARLY_CONVERGED, Outcome.ERROR))


def test_direction_parsing():
    assert AttackDirection.parse("mitosis-to-normal") is MIN
    assert AttackDirection.parse("maximize") is MAX
    assert MIN.minimize and not MAX.minimize
    with pytest.raises(ValueError):
        AttackDirection.parse("sideways")


def test_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig(MIN, success_threshold=1.5)
    with pytest.raises(ConfigError):
        AttackConfig(MIN, strong_threshold=0.6)  # strong must lie beyond success
    assert AttackConfig(MIN).strong_threshold == 0.05
    assert AttackConfig(MAX).strong_threshold == 0.95
    assert AttackConfig(MIN).with_seed(7).de.rng_seed == 7


def test_constant_oracle_converges_early(tile):
    record = run_attack(tile, ConstantOracle(0.95), AttackConfig(MIN, small_de()), "c")
    assert record.outcome is Outcome.EARLY_CONVERGED
    assert record.change == 0.0
    assert record.iterations == 0
    assert record.evaluations == 40 + 2


def test_planted_oracle_strong_success(tile):
    record = run_attack(tile, PlantedOracle(), AttackConfig(MIN, DeConfig(rng_seed=1)), "p")
    assert record.outcome is Outcome.STRONG_SUCCESS
    assert record.original_score == pytest.approx(0.97)
    assert record.final_score < 0.05
    adv = apply_perturbation(tile, record.best_perturbation)
    assert adv.diff_count(tile) == 1
    assert PlantedOracle().score(adv) == record.final_score
    assert record.trace[-1] == record.final_score
    assert all(a >= b for a, b in zip(record.trace, record.trace[1:]))
    assert record.evaluations <= 200 * 101 + 2


def test_maximize_trace_is_raw_and_non_decreasing(tile):
    oracle = PlantedOracle(base=0.03, delta=0.95)
    record = run_attack(tile, oracle, AttackConfig(MAX, small_de(rng_seed=2)), "m")
    assert record.outcome is Outcome.STRONG_SUCCESS
    assert record.final_score > 0.95
    assert all(a <= b for a, b in zip(record.trace, record.trace[1:]))
    assert record.trace[-1] == record.final_score


def test_early_stop_on_strong_saves_queries(tile):
    full = run_attack(tile, PlantedOracle(), AttackConfig(MIN, small_de(rng_seed=3)))
    quick = run_attack(
        tile, PlantedOracle(), AttackConfig(MIN, small_de(rng_seed=3), early_stop_on_strong=True)
    )
    assert quick.outcome is Outcome.STRONG_SUCCESS
    assert quick.evaluations < full.evaluations
    # identical until the stop
    assert quick.trace == full.trace[: len(quick.trace)]


def dyadic(image):
    """Score with few mantissa bits so 1 - s is exact."""
    prox = PlantedOracle().proximity(image)
    return 1.0 - math.floor(32 * prox) / 64


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_direction_symmetry(tile, seed):
    de = small_de(tolerance=0.0, max_iterations=25, rng_seed=seed)
    down = run_attack(tile, FunctionOracle(dyadic), AttackConfig(MIN, de))
    up = run_attack(tile, FunctionOracle(lambda im: 1.0 - dyadic(im)), AttackConfig(MAX, de))
    assert up.best_perturbation == down.best_perturbation
    assert up.final_score == 1.0 - down.final_score
    assert up.trace == [1.0 - s for s in down.trace]


def test_oracle_failure_raises_with_partial_trace(tile):
    calls = {"n": 0}

    def flaky(image):
        calls["n"] += 1
        if calls["n"] > 100:
            raise ConnectionError("gone")
        return PlantedOracle().score(image)

    with pytest.raises(AttackError) as exc:
        run_attack(tile, FunctionOracle(flaky), AttackConfig(MIN, small_de(tolerance=0.0)), "f")
    err = exc.value
    assert err.image_id == "f"
    assert err.iteration == 2
    assert len(err.trace) == 2
    assert all(0.0 <= s <= 1.0 for s in err.trace)


def test_failure_on_original_query(tile):
    def broken(image):
        raise TimeoutError("slow")

    with pytest.raises(AttackError) as exc:
        run_attack(tile, FunctionOracle(broken), AttackConfig(MIN, small_de()))
    assert exc.value.iteration == 0 and exc.value.trace == []


def test_reproducible(tile):
    cfg = AttackConfig(MIN, small_de(rng_seed=11))
    a = run_attack(tile, PlantedOracle(), cfg, "x")
    b = run_attack(tile, PlantedOracle(), cfg, "x")
    assert a == b


def test_evaluation_budget(tile):
    rng = np.random.default_rng(0)
    table = rng.random(64 * 64)
    oracle = FunctionOracle(lambda im: float(table[int(im.pixels.sum()) % 4096]))
    de = DeConfig(population_size=12, max_iterations=9, tolerance=0.0)
    record = run_attack(tile, oracle, AttackConfig(MIN, de))
    assert record.evaluations <= 12 * (9 + 1) + 2
