"""
Attacking one tile
==================

A synthetic tissue tile is scored by an in-process planted oracle: the score
drops sharply once any pixel comes close to yellow.  Differential evolution
has to discover that colour, and a place to put it, from scores alone.
"""

import sys
from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

from onepixel import AttackConfig, AttackDirection, DeConfig, PlantedOracle, run_attack
from onepixel.imaging import apply_perturbation, write_png
from onepixel.synthetic import tissue_tile

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# a 64x64 tile; nothing in it is yellow, so the oracle is confident
tile = tissue_tile(np.random.default_rng(0))
oracle = PlantedOracle()
print("original score:", oracle.score(tile))

# default search settings: 200 candidates, up to 100 generations
config = AttackConfig(AttackDirection.MITOSIS_TO_NORMAL, DeConfig(rng_seed=1))
record = run_attack(tile, oracle, config, image_id="demo")
p = record.best_perturbation
print(f"pixel ({p.x}, {p.y}) -> colour {p.color}")
print(f"score {record.original_score:.3f} -> {record.final_score:.3f} ({record.outcome.value})")
print(f"{record.iterations} generations, {record.evaluations} oracle queries")

# the best score per generation never gets worse
fig = Figure(figsize=(5, 3.5))
ax = fig.add_subplot()
ax.plot(record.trace, marker="o", markersize=3)
ax.set_xlabel("generation")
ax.set_ylabel("lowest score")
fig.savefig(out / "single_attack_trace.png", dpi=100)

# the adversarial tile differs from the original in exactly one pixel
adv = apply_perturbation(tile, p)
print("pixels changed:", adv.diff_count(tile))
write_png(adv, out / "single_attack_adv.png")
