"""
A small campaign against a model server
=======================================

The mock server exposes the planted oracle over HTTP the same way a deployed
model would.  Tiles are filtered on their original scores, attacked in the
direction their label suggests, and the results land in a CSV that the
statistics and plots are rebuilt from.
"""

import sys
from pathlib import Path

from onepixel import AttackConfig, CachedOracle, DeConfig, HttpOracle
from onepixel.campaign import (
    build_report,
    color_histogram,
    emit_plots,
    filter_dataset,
    load_manifest,
    read_results,
    run_campaign,
    summary_lines,
)
from onepixel.modelserver import ServerConfig, serve
from onepixel.synthetic import write_dataset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "campaign"
out.mkdir(parents=True, exist_ok=True)
tiles = write_dataset(out / "tiles", n_mitosis=12, n_normal=4, seed=5)

# port 0 lets the OS pick a free port
server = serve(ServerConfig(port=0))
print("serving on", server.predict_url)

oracle = CachedOracle(HttpOracle(server.predict_url))
entries = load_manifest(tiles)

# normal tiles score high under this oracle, so the filter keeps only mitosis
kept = filter_dataset(entries, oracle)
print(f"{len(kept)} of {len(entries)} tiles are unambiguous")

# stop each attack as soon as the score is pushed below 0.05
config = AttackConfig(de=DeConfig(), early_stop_on_strong=True)
results = out / "results.csv"
if results.exists():
    results.unlink()
result = run_campaign(kept, oracle, config, parallelism=2, output=results,
                      traces_path=out / "traces.csv", seed=0)
server.stop()

for line in summary_lines(result.report):
    print(line)
print("most used colours:", color_histogram(r.record for r in result.rows).most_common(3))
print("HTTP queries:", oracle.inner_queries, "cache hits:", oracle.stats.cache_hits)

# everything can be recomputed from the CSV alone
assert build_report(read_results(results, out / "traces.csv")) == result.report

first = result.rows[0].image_id
written = emit_plots(result.report, result.rows, out, trace_ids=[first], adversarial_ids=[first],
                     sources={e.image_id: e for e in entries})
print("wrote", ", ".join(p.name for p in written))
