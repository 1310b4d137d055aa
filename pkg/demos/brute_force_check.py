"""
Checking the search against brute force
=======================================

On an 8x8 tile the perturbation space is small enough to enumerate once the
colours are coarsened to four levels per channel.  The exhaustive optimum is a
yardstick for what differential evolution finds over the full colour range.
"""

import itertools
import time

import numpy as np

from onepixel import AttackConfig, DeConfig, PlantedOracle, run_attack
from onepixel.imaging import PixelPerturbation, apply_perturbation
from onepixel.synthetic import tissue_tile

tile = tissue_tile(np.random.default_rng(2024), 8, 8)
oracle = PlantedOracle()
levels = (0, 85, 170, 255)

start = time.perf_counter()
scores = {
    (x, y, *c): oracle.score(apply_perturbation(tile, PixelPerturbation(x, y, *c)))
    for x, y in itertools.product(range(8), repeat=2)
    for c in itertools.product(levels, repeat=3)
}
best = min(scores, key=scores.get)
print(f"{len(scores)} perturbations scored in {time.perf_counter() - start:.2f}s")
print("exhaustive optimum", best, "score", scores[best])

for seed in range(5):
    record = run_attack(tile, oracle, AttackConfig(de=DeConfig(rng_seed=seed)))
    gap = record.final_score - scores[best]
    print(f"seed {seed}: {record.best_perturbation.as_tuple()} score {record.final_score:.4f} "
          f"gap {gap:+.4f} after {record.evaluations} queries")
