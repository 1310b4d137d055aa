"""Single one-pixel attack: direction, optimisation and outcome tiers."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

from .evolution import Bounds, ConfigError, DeConfig, ObjectiveError, de_minimize, to_integer_vector
from .imaging import PixelPerturbation, RgbImage, apply_perturbation

log = logging.getLogger(__name__)


class AttackDirection(str, enum.Enum):
    MITOSIS_TO_NORMAL = "mitosis_to_normal"  # minimise the score
    NORMAL_TO_MITOSIS = "normal_to_mitosis"  # maximise the score

    @property
    def minimize(self) -> bool:
        return self is AttackDirection.MITOSIS_TO_NORMAL

    @classmethod
    def parse(cls, text: str) -> "AttackDirection":
        key = text.strip().lower().replace("-", "_")
        aliases = {"minimize": cls.MITOSIS_TO_NORMAL, "maximize": cls.NORMAL_TO_MITOSIS}
        return aliases[key] if key in aliases else cls(key)


class Outcome(str, enum.Enum):
    EARLY_CONVERGED = "early_converged"
    FAILED = "failed"
    SUCCESS = "success"
    STRONG_SUCCESS = "strong_success"
    ERROR = "error"

    @property
    def succeeded(self) -> bool:
        return self in (Outcome.SUCCESS, Outcome.STRONG_SUCCESS)


@dataclass(frozen=True)
class AttackConfig:
    direction: AttackDirection = AttackDirection.MITOSIS_TO_NORMAL
    de: DeConfig = field(default_factory=DeConfig)
    success_threshold: float = 0.5
    strong_threshold: Optional[float] = None  # None -> 0.05 / 0.95 by direction
    early_stop_on_strong: bool = False

    def __post_init__(self):
        if self.strong_threshold is None:
            strong = 0.05 if self.direction.minimize else 0.95
            object.__setattr__(self, "strong_threshold", strong)
        for t in (self.success_threshold, self.strong_threshold):
            if not 0.0 <= t <= 1.0:
                raise ConfigError("thresholds must lie in [0, 1]")
        if self.direction.minimize and self.strong_threshold > self.success_threshold:
            raise ConfigError("strong threshold must not exceed the success threshold when minimising")
        if not self.direction.minimize and self.strong_threshold < self.success_threshold:
            raise ConfigError("strong threshold must not be below the success threshold when maximising")

    def with_seed(self, seed: int) -> "AttackConfig":
        return replace(self, de=replace(self.de, rng_seed=seed))


@dataclass
class AttackRecord:
    image_id: str
    direction: AttackDirection
    original_score: Optional[float]
    final_score: Optional[float]
    best_perturbation: Optional[PixelPerturbation]
    outcome: Outcome
    iterations: Optional[int]
    evaluations: Optional[int]
    trace: list[float]
    de_params: DeConfig
    error: str = field(default="", compare=False)

    @property
    def change(self) -> float:
        return self.final_score - self.original_score


class AttackError(RuntimeError):
    """Oracle failure during an attack; ``trace`` holds raw best scores so far."""

    def __init__(self, image_id: str, iteration: int, trace: list[float], cause: BaseException):
        super().__init__(f"attack on {image_id!r} failed at iteration {iteration}: {cause}")
        self.image_id = image_id
        self.iteration = iteration
        self.trace = trace
        self.cause = cause


def classify_outcome(
    direction: AttackDirection,
    converged_after_initial: bool,
    iterations: int,
    final_score: float,
    success_threshold: float = 0.5,
    strong_threshold: Optional[float] = None,
) -> Outcome:
    if converged_after_initial and iterations == 0:
        return Outcome.EARLY_CONVERGED
    if direction.minimize:
        strong = 0.05 if strong_threshold is None else strong_threshold
        if final_score < strong:
            return Outcome.STRONG_SUCCESS
        if final_score < success_threshold:
            return Outcome.SUCCESS
    else:
        strong = 0.95 if strong_threshold is None else strong_threshold
        if final_score > strong:
            return Outcome.STRONG_SUCCESS
        if final_score > success_threshold:
            return Outcome.SUCCESS
    return Outcome.FAILED


def run_attack(image: RgbImage, oracle, config: AttackConfig, image_id: str = "") -> AttackRecord:
    """Search for the single pixel that pushes ``oracle`` furthest in ``config.direction``.

    The optimiser always minimises; for maximisation it sees the negated score,
    which leaves the relative convergence rule unchanged.  The record's trace
    holds raw scores.
    """
    sign = 1.0 if config.direction.minimize else -1.0
    bounds = Bounds.for_image(image.width, image.height)

    def perturbed(vector) -> RgbImage:
        return apply_perturbation(image, PixelPerturbation.from_vector(vector))

    def objective(vector) -> float:
        return sign * oracle.score(perturbed(vector))

    try:
        original = oracle.score(image)
    except Exception as exc:
        raise AttackError(image_id, 0, [], exc) from exc

    early_stop = None
    if config.early_stop_on_strong:
        strong = config.strong_threshold
        if config.direction.minimize:
            early_stop = lambda best: best < strong  # noqa: E731
        else:
            early_stop = lambda best: -best > strong  # noqa: E731

    try:
        result = de_minimize(objective, bounds, config.de, early_stop=early_stop)
    except ObjectiveError as exc:
        raw = [sign * e for e in exc.trace]
        raise AttackError(image_id, exc.iteration, raw, exc.cause) from exc.cause

    best = PixelPerturbation.from_vector(to_integer_vector(result.best_vector, bounds))
    try:
        final = oracle.score(perturbed(best.as_tuple()))
    except Exception as exc:
        raw = [sign * e for e in result.trace]
        raise AttackError(image_id, result.iterations_completed, raw, exc) from exc
    if final != sign * result.best_energy:
        log.warning("%s: oracle not reproducible (%r vs %r)", image_id, final, sign * result.best_energy)

    outcome = classify_outcome(
        config.direction,
        result.converged_after_initial,
        result.iterations_completed,
        final,
        config.success_threshold,
        config.strong_threshold,
    )
    return AttackRecord(
        image_id=image_id,
        direction=config.direction,
        original_score=float(original),
        final_score=float(final),
        best_perturbation=best,
        outcome=outcome,
        iterations=result.iterations_completed,
        evaluations=result.evaluations + 2,
        trace=[float(sign * e) for e in result.trace],
        de_params=config.de,
    )

