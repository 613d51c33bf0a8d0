#!/usr/bin/env python3
"""Paired synthetic benchmark over distillation strategies and classifiers.

Runs every distillation strategy with and without prototype refinement on
the default desk-scale stream (10 tasks, 5 classes each, 64-d features),
three paired trials per variant. Trial i shifts the model seed and the data
seed together, so all variants inside a trial see identical task streams.

Prints two blocks of mean/std Last and Avg accuracy, then the headline
margins the acceptance suite checks. Use --json to dump the raw rows.
"""

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from seca.config import RunConfig, build_stream
from seca.trainer import run_stream

DISTILLS = ("seq", "clip_kd", "vanilla", "avg_kd", "sg_akt")
CLASSIFIERS = ("only_text", "se_vpr")


def trial_config(base, distill, classifier, i):
    # paired trials: model seed and data seed move together
    return replace(
        base,
        seed=base.seed + i,
        distill=distill,
        classifier=classifier,
        data=base.data.reseed(base.data.seed + i),
    )


def run_one(cfg):
    stream = build_stream(cfg.data)
    _, metrics = run_stream(cfg, stream)
    return metrics.last, metrics.avg


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=3)
    ap.add_argument("--jobs", type=int, default=4)
    ap.add_argument("--json", metavar="PATH", help="write raw rows as JSON")
    args = ap.parse_args(argv)

    base = RunConfig()
    jobs = []
    for classifier in CLASSIFIERS:
        for distill in DISTILLS:
            for i in range(args.trials):
                jobs.append((distill, classifier, i))

    t0 = time.time()
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        results = list(
            pool.map(lambda j: run_one(trial_config(base, *j)), jobs)
        )
    wall = time.time() - t0

    rows = {}
    for (distill, classifier, i), (last, avg) in zip(jobs, results):
        rows.setdefault((distill, classifier), []).append((last, avg))

    table = []
    for classifier in CLASSIFIERS:
        label = "with refinement" if classifier == "se_vpr" else "text-only classifier"
        print(f"\n{label}")
        print(f"  {'strategy':10s} {'Last':>14s} {'Avg':>14s}")
        for distill in DISTILLS:
            pairs = rows[(distill, classifier)]
            lasts = np.array([p[0] for p in pairs])
            avgs = np.array([p[1] for p in pairs])
            print(
                f"  {distill:10s} {lasts.mean():7.2f} ± {lasts.std():4.2f}"
                f" {avgs.mean():7.2f} ± {avgs.std():4.2f}"
            )
            table.append(
                {
                    "distill": distill,
                    "classifier": classifier,
                    "last_mean": float(lasts.mean()),
                    "avg_mean": float(avgs.mean()),
                    "lasts": lasts.tolist(),
                    "avgs": avgs.tolist(),
                }
            )

    def mean_last(distill, classifier):
        return float(np.mean([p[0] for p in rows[(distill, classifier)]]))

    full = mean_last("sg_akt", "se_vpr")
    seq_base = mean_last("seq", "only_text")
    akt_text = mean_last("sg_akt", "only_text")
    print(f"\nfull ({full:.2f}) vs sequential baseline ({seq_base:.2f}):"
          f" margin {full - seq_base:+.2f}")
    print(f"refinement on ({full:.2f}) vs text-only ({akt_text:.2f}):"
          f" margin {full - akt_text:+.2f}")
    print(f"wall time {wall:.1f}s for {len(jobs)} runs")

    if args.json:
        with open(args.json, "w") as fh:
            json.dump(table, fh, indent=2)
            fh.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
