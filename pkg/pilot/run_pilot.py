"""Pilot run over three phantom/model seeds; writes pilot_results.json.

Thresholds used by the acceptance suite were read off this record.
Usage: python3 pilot/run_pilot.py [cache_dir]
"""
import json
import sys
import time
from pathlib import Path

from prism_rm import eval_harness as eh
from prism_rm.phantom import PhantomSpec, cached_phantom

HERE = Path(__file__).parent
DESK = json.loads((HERE.parent / "configs" / "desk.json").read_text())

JOBS = [
    ("MI", "trajectory", "full"), ("MI", "integrated", "full"), ("MI", "sequential", "full"),
    ("EE", "trajectory", "full"), ("EE", "integrated", "full"),
    ("EE", "trajectory", "spatial_only"), ("EE", "trajectory", "temporal_only"),
    ("ME", "sequential", "full"),
]


def main(cache):
    out = HERE / "pilot_results.json"
    results = json.loads(out.read_text()) if out.exists() else {}
    for seed in (0, 1, 2):
        ds = cached_phantom(PhantomSpec(seed=seed), cache)
        for sc, mode, abl in JOBS:
            key = f"seed{seed}/{sc}/{mode}/{abl}"
            if key in results or (mode == "sequential" and sc == "ME" and seed):
                continue
            t = time.time()
            rep = eh.run_experiment(eh.ExperimentSpec(sc, mode=mode, ablation=abl, overrides=DESK, seed=seed), ds)
            results[key] = {"mean": rep.mean, "std": rep.std, "initial": rep.initial_mean,
                            "per_landmark": rep.per_landmark, "best_epoch": rep.best_epoch,
                            "seconds": time.time() - t}
            print(key, f"{rep.mean:.3f} / {rep.initial_mean:.3f}", f"{time.time() - t:.0f}s", flush=True)
            out.write_text(json.dumps(results, indent=1))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "/tmp/prism_cache")
