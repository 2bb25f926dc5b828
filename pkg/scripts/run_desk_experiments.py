"""Run the desk-scale comparison and the client-fraction sweep.

Completed runs (metrics file ending in ``# status: complete``) are skipped, so the
script can be interrupted and restarted. Prints a summary of final returns.
"""
import argparse
import dataclasses
import time
from pathlib import Path

import numpy as np

from fedora.harness import file_status, load_config, read_metrics, run_seed

ROOT = Path(__file__).resolve().parents[1]
COMPARISON = ("fedora", "fed-a", "fed-ac", "fed-ac-prox")
JOBS = [
    ("configs/desk_expert_medium.yaml", COMPARISON),
    ("configs/desk_fraction_0.2.yaml", ("fedora",)),
    ("configs/desk_fraction_1.0.yaml", ("fedora",)),
]


def final_return(path) -> float:
    _, rows = read_metrics(path)
    return float(rows[-1]["eval_mean"])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="*", help="subset of seeds (default: config seeds)")
    ap.add_argument("--summary-only", action="store_true")
    args = ap.parse_args(argv)

    for cfg_path, algos in JOBS:
        cfg = load_config(ROOT / cfg_path)
        out = ROOT / cfg.out_dir
        seeds = args.seeds if args.seeds else cfg.seeds
        for algo in algos:
            finals = []
            for seed in seeds:
                path = out / f"metrics_{algo}_seed{seed}.csv"
                if file_status(path) != "complete":
                    if args.summary_only:
                        continue
                    t0 = time.time()
                    run_seed(dataclasses.replace(cfg, algorithm=algo), seed, out)
                    print(f"  {cfg_path} {algo} seed {seed}: {time.time() - t0:.0f}s", flush=True)
                finals.append(final_return(path))
            if finals:
                print(f"{cfg_path:36s} {algo:12s} final mean {np.mean(finals):9.2f} over {len(finals)} seeds "
                      f"{np.round(finals, 1).tolist()}", flush=True)


if __name__ == "__main__":
    main()
