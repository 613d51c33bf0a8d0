"""Command-line surface: runs, ablations, sweeps, theory checks, reports.

Every command writes a manifest.json next to its outputs with the fully
resolved configuration, the seed, and the on-disk format versions, so any
result directory can be re-run exactly. Ablations run each variant over
the same three (data seed, init seed) pairs; the table rows are means
over those paired trials.

Exit codes: 0 success, 1 internal failure or failed check table, 2 invalid
configuration or protocol misuse, 3 unreadable or malformed input files,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import theory
from .config import BETA_TASK_INDEX, RunConfig, build_stream, config_dict, \
    load_config
from .datastream import BANK_VERSION, flatten_stream, gen_synthetic, \
    write_feature_bank
from .errors import ConfigError, DataFormatError, SecaError
from .sevpr import VARIANTS
from .sgakt import STRATEGIES
from .trainer import CKPT_VERSION, accuracy, load_checkpoint, predict, \
    run_stream, save_checkpoint, write_metrics

MANIFEST_VERSION = 1
FORMAT_VERSIONS = {
    "manifest": MANIFEST_VERSION,
    "checkpoint": CKPT_VERSION,
    "feature_bank": BANK_VERSION,
}
TRIALS = 3

_TAG_THEORY = 8


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_manifest(out_dir, command: str, cfg: RunConfig | None,
                    seed: int | None, **extra) -> None:
    doc = {
        "command": command,
        "config": config_dict(cfg) if cfg is not None else None,
        "seed": seed,
        "versions": FORMAT_VERSIONS,
    }
    doc.update(extra)
    _write_json(Path(out_dir) / "manifest.json", doc)


def _workers(njobs: int) -> int:
    cap = os.environ.get("SECA_THREADS")
    if cap is None:
        limit = os.cpu_count() or 1
    else:
        try:
            limit = int(cap)
        except ValueError:
            raise ConfigError(f"SECA_THREADS: not an integer: {cap!r}") from None
        if limit < 1:
            raise ConfigError("SECA_THREADS: must be at least 1")
    return max(1, min(limit, njobs))


def _load_base_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _run_leaf(cfg: RunConfig, out_dir, save_ckpt: bool = False):
    """One full training run with its metrics, manifest, and checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stream = build_stream(cfg.data)
    state, metrics = run_stream(cfg, stream)
    write_metrics(out_dir, metrics, stream)
    if save_ckpt:
        save_checkpoint(out_dir / "run.ckpt", state)
    _write_manifest(out_dir, "train", cfg, cfg.seed)
    return metrics


def _paired_trials(cfg: RunConfig) -> list[RunConfig]:
    """Three trials stepping the data and init seeds in lockstep."""
    return [
        replace(cfg, seed=cfg.seed + i, data=cfg.data.reseed(cfg.data.seed + i))
        for i in range(TRIALS)
    ]


def _run_matrix(base: RunConfig, variants, out_dir, command: str) -> list[dict]:
    """Train every (variant, trial) pair and aggregate per-variant rows.

    ``variants`` is a list of (name, overrides) where overrides is a dict
    of RunConfig field replacements applied on top of each paired trial.
    """
    out_dir = Path(out_dir)
    trials = _paired_trials(base)
    jobs = []
    for name, overrides in variants:
        for i, trial in enumerate(trials):
            cfg = replace(trial, **overrides)
            jobs.append((name, i, cfg, out_dir / "runs" / name / str(i)))

    with ThreadPoolExecutor(max_workers=_workers(len(jobs))) as pool:
        futs = [pool.submit(_run_leaf, cfg, leaf) for _, _, cfg, leaf in jobs]
        results = [f.result() for f in futs]

    by_variant: dict[str, list] = {name: [] for name, _ in variants}
    for (name, _, cfg, _), metrics in zip(jobs, results):
        by_variant[name].append((cfg.seed, metrics))
    rows = []
    for name, _ in variants:
        seeds = [s for s, _ in by_variant[name]]
        runs = [m for _, m in by_variant[name]]
        per_task = np.mean([m.per_task for m in runs], axis=0)
        rows.append({
            "variant": name,
            "last": float(np.mean([m.last for m in runs])),
            "avg": float(np.mean([m.avg for m in runs])),
            "per_task": [float(a) for a in per_task],
            "seeds": seeds,
        })
    _write_json(out_dir / "rows.json", {"rows": rows})
    _write_manifest(out_dir, command, base, base.seed,
                    variants=[name for name, _ in variants])
    return rows


def cmd_train(args) -> int:
    cfg = _load_base_config(args)
    _run_leaf(cfg, args.out, save_ckpt=True)
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stream = build_stream(state.cfg.data)
    fn = lambda bx: predict(state, bx)
    per_task = [
        100.0 * float(np.mean(fn(t.test_x) == t.test_y))
        for t in stream.tasks[:state.task]
    ]
    doc = {
        "overall": accuracy(stream, state.task, fn),
        "per_task": per_task,
        "tasks": state.task,
    }
    _write_json(out_dir / "eval.json", doc)
    _write_manifest(out_dir, "eval", state.cfg, state.cfg.seed,
                    checkpoint=str(args.ckpt))
    return 0


def cmd_ablate_distill(args) -> int:
    cfg = _load_base_config(args)
    variants = [(s, {"distill": s, "classifier": "only_text"})
                for s in STRATEGIES]
    variants += [(f"{s}+se_vpr", {"distill": s, "classifier": "se_vpr"})
                 for s in STRATEGIES]
    _run_matrix(cfg, variants, args.out, "ablate-distill")
    return 0


def cmd_ablate_classifier(args) -> int:
    cfg = _load_base_config(args)
    variants = [(v, {"classifier": v}) for v in VARIANTS]
    _run_matrix(cfg, variants, args.out, "ablate-classifier")
    return 0


def _sweep_variants(param: str, tokens: list[str]) -> list[tuple[str, dict]]:
    variants = []
    for tok in tokens:
        name = f"{param}={tok}"
        if param == "beta":
            if tok in (BETA_TASK_INDEX, "dynamic"):
                variants.append((name, {"beta": BETA_TASK_INDEX}))
                continue
            try:
                variants.append((name, {"beta": float(tok)}))
            except ValueError:
                raise ConfigError(f"sweep: bad beta value {tok!r}") from None
        elif param == "tau_prime":
            try:
                variants.append((name, {"tau_prime": float(tok)}))
            except ValueError:
                raise ConfigError(f"sweep: bad tau_prime value {tok!r}") from None
        elif param == "pool":
            if tok == "ALL":
                variants.append((name, {"pool_max": None}))
                continue
            try:
                variants.append((name, {"pool_max": int(tok)}))
            except ValueError:
                raise ConfigError(f"sweep: bad pool value {tok!r}") from None
        else:  # width; argparse restricts the choices
            try:
                variants.append((name, {"_width": int(tok)}))
            except ValueError:
                raise ConfigError(f"sweep: bad width value {tok!r}") from None
    return variants


def cmd_sweep(args) -> int:
    cfg = _load_base_config(args)
    variants = _sweep_variants(args.param, args.values)
    if args.param == "width":
        resolved = []
        for name, ov in variants:
            enc = replace(cfg.encoder, adapter_width=ov["_width"])
            resolved.append((name, {"encoder": enc}))
        variants = resolved
    _run_matrix(cfg, variants, args.out, "sweep")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_base_config(args)
    if cfg.data.synthetic is None:
        raise ConfigError("gen-data: config must use a synthetic data source")
    spec = cfg.data.synthetic
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stream = gen_synthetic(spec)
    feats, labels = flatten_stream(stream)
    write_feature_bank(out_dir / "bank.bin", feats, labels, stream.names)
    _write_manifest(out_dir, "gen-data", cfg, spec.seed,
                    samples=int(labels.size), classes=len(stream.names))
    return 0


def cmd_theory_check(args) -> int:
    taus = (0.1, 1.0, 10.0)
    rows = []
    for i in range(args.instances):
        rng = np.random.default_rng(
            np.random.SeedSequence([args.seed, _TAG_THEORY, i]))
        k = int(rng.integers(2, 9))
        tau = taus[i % len(taus)]
        losses = rng.uniform(0.0, 10.0, k)
        closed = theory.closed_form_weights(losses, tau)
        numeric = theory.numeric_minimize(losses, tau)
        max_err = float(np.max(np.abs(closed - numeric)))

        obj = theory.surrogate_objective(closed, losses, tau)
        probes = [np.full(k, 1.0 / k)]
        probes += [np.eye(k)[j] for j in range(k)]
        probes += [rng.dirichlet(np.ones(k)) for _ in range(20)]
        margin = float(max(
            obj - theory.surrogate_objective(p, losses, tau) for p in probes))
        ok = max_err <= 1e-5 and margin <= 1e-9
        rows.append({
            "instance": i, "teachers": k, "tau": tau,
            "max_err": max_err, "objective_margin": margin, "pass": ok,
        })

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    all_pass = all(r["pass"] for r in rows)
    _write_json(out_dir / "theory.json", {
        "instances": args.instances,
        "taus": list(taus),
        "all_pass": all_pass,
        "rows": rows,
    })
    _write_manifest(out_dir, "theory-check", None, args.seed,
                    instances=args.instances)
    return 0 if all_pass else 1


def _report_inputs(dirs) -> list[dict]:
    """Collect rows from run directories, enforcing format compatibility."""
    rows = []
    versions = None
    used = set()
    for d in dirs:
        d = Path(d)
        mpath = d / "manifest.json"
        try:
            manifest = json.loads(mpath.read_text())
        except json.JSONDecodeError as e:
            raise DataFormatError("bad-manifest",
                                  f"{mpath}: invalid JSON: {e}") from None
        got = manifest.get("versions")
        if versions is None:
            versions = got
        elif got != versions:
            raise DataFormatError(
                "bad-manifest",
                f"{mpath}: format versions {got} do not match {versions}")

        if (d / "rows.json").exists():
            new = json.loads((d / "rows.json").read_text())["rows"]
        elif (d / "summary.json").exists():
            summary = json.loads((d / "summary.json").read_text())
            cfg = manifest.get("config") or {}
            name = f"{cfg.get('distill', '?')}+{cfg.get('classifier', '?')}"
            new = [{
                "variant": name,
                "last": summary["last"],
                "avg": summary["avg"],
                "per_task": summary["per_task"],
                "seeds": [manifest.get("seed")],
            }]
        else:
            raise DataFormatError("bad-manifest",
                                  f"{d}: no rows.json or summary.json")
        for row in new:
            name = row["variant"]
            if name in used:
                name = f"{name}@{d.name}"
            n = 2
            while name in used:
                name = f"{row['variant']}@{d.name}#{n}"
                n += 1
            used.add(name)
            rows.append({**row, "variant": name})
    return rows


def _format_report(rows: list[dict], fmt: str) -> str:
    if fmt == "json":
        return json.dumps({"rows": rows}, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        lines = ["variant,last,avg"]
        for r in rows:
            lines.append(f"{r['variant']},{r['last']!r},{r['avg']!r}")
        return "\n".join(lines) + "\n"
    lines = ["| Variant | Last | Avg |", "| --- | --- | --- |"]
    for r in rows:
        lines.append(f"| {r['variant']} | {r['last']:.2f} | {r['avg']:.2f} |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    rows = _report_inputs(args.inputs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = {"csv": "csv", "json": "json", "md": "md"}[args.format]
    (out_dir / f"report.{ext}").write_text(_format_report(rows, args.format))
    curve_lines = ["task,variant,acc"]
    for r in rows:
        for t, acc in enumerate(r["per_task"], start=1):
            curve_lines.append(f"{t},{r['variant']},{acc!r}")
    (out_dir / "curves.csv").write_text("\n".join(curve_lines) + "\n")
    _write_manifest(out_dir, "report", None, None,
                    inputs=[str(p) for p in args.inputs])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seca",
        description="Continual learning over a frozen two-tower encoder.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.set_defaults(fn=fn)
        return p

    p = add("train", cmd_train, help="train a full task stream")
    p.add_argument("--config", help="JSON config path (defaults otherwise)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the init seed")

    p = add("eval", cmd_eval, help="evaluate a checkpoint on its stream")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)

    p = add("ablate-distill", cmd_ablate_distill,
            help="distillation strategies with and without refinement")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = add("ablate-classifier", cmd_ablate_classifier,
            help="the five visual classifier variants")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = add("sweep", cmd_sweep, help="one hyperparameter over a value list")
    p.add_argument("--param", required=True,
                   choices=("beta", "tau_prime", "pool", "width"))
    p.add_argument("--values", required=True, nargs="+",
                   help="values; pool accepts ALL, beta accepts task-index")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = add("theory-check", cmd_theory_check,
            help="closed-form attention weights against the numeric minimizer")
    p.add_argument("--out", required=True)
    p.add_argument("--instances", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)

    p = add("gen-data", cmd_gen_data, help="write a synthetic feature bank")
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, help="merge run outputs into one table")
    p.add_argument("--in", dest="inputs", required=True, nargs="+",
                   help="input run directories")
    p.add_argument("--format", default="csv", choices=("csv", "json", "md"))
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SecaError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
