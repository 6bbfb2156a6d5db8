"""``lrcl`` command line: toy runs, rank sweeps, property suites, architecture demos.

Exit codes: 0 success, 1 usage error, 2 check failure, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .checks import SUITES, gradient_check, run_suite
from .critics import ParamRegistry, build_bro_critic, build_simba_critic, lora_wrap
from .hypersphere import ProjectionError
from .linear import LoRAInit
from .optim import post_update_hook
from .regimes import (
    VARIANTS,
    ConfigError,
    ExperimentConfig,
    MetricTrace,
    ToyRun,
    ablation_config,
    rank_sweep,
    run_label,
    summarize,
)
from .rng import stream
from .world import SolverError

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_KIND = "lrcl-manifest"
TRACE_COLUMNS = ("step", "seed", "eps_q", "eps_b")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(x) -> str:
    # repr of a Python float is locale-independent and round-trips exactly
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: Path, columns, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_trace(path: Path, trace: MetricTrace):
    write_csv(path, TRACE_COLUMNS,
              ((s, trace.seed, q, b) for s, q, b in zip(trace.steps, trace.eps_q, trace.eps_b)))


def parse_override(item: str) -> tuple[str, object]:
    """``key=value`` with the value read as JSON when possible, else as a string."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise UsageError(f"--set expects key=value, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds expects comma separated integers, got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    return seeds


def seed_offset() -> int:
    raw = os.environ.get("LRCL_SEED_OFFSET", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"LRCL_SEED_OFFSET must be an integer, got {raw!r}") from None


def load_settings(args) -> tuple[dict, dict]:
    """Config dict and extra run settings from ``--config``, ``--set`` and ``--seeds``.

    A manifest written by an earlier run is accepted as a config; its seeds
    are used verbatim, without applying the seed offset again.
    """
    data, extra, from_manifest = {}, {}, False
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config must be a JSON object")
        if data.get("kind") == MANIFEST_KIND:
            extra = {k: data[k] for k in ("variant",) if data.get(k) is not None}
            data = dict(data["config"])
            from_manifest = True
    for item in args.set or []:
        key, value = parse_override(item)
        data[key] = value
    if args.seeds:
        data["seeds"] = parse_seeds(args.seeds)
        from_manifest = False
    offset = 0 if from_manifest else seed_offset()
    try:
        cfg = ExperimentConfig.from_dict(data)
    except TypeError as exc:
        raise UsageError(f"invalid config value: {exc}") from None
    cfg = cfg.replace(seeds=[int(s) + offset for s in cfg.seeds])
    extra["seed_offset"] = offset
    return cfg.to_dict(), extra


def _run_one(args) -> tuple[int, MetricTrace, float]:
    cfg_dict, seed = args
    t0 = time.perf_counter()
    trace = ToyRun(ExperimentConfig.from_dict(cfg_dict), seed).run()
    return seed, trace, time.perf_counter() - t0


def _map(fn, tasks, jobs):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def _write_manifest(path: Path, manifest: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_toy_run(args) -> int:
    cfg_dict, extra = load_settings(args)
    variant = args.variant or extra.get("variant")
    cfg = ExperimentConfig.from_dict(cfg_dict)
    if variant:
        cfg = ablation_config(cfg, variant)
    if cfg.head == "categorical":
        print("note: categorical heads on the chain are an extension of the scalar toy setup")
    out = Path(args.out)
    label = variant or run_label(cfg)
    paths = {s: f"{label}_{cfg.regime}_seed{s}.csv" for s in cfg.seeds}
    manifest = {
        "kind": MANIFEST_KIND,
        "command": "toy-run",
        "version": __version__,
        "config": cfg.to_dict(),
        "variant": variant,
        "seeds": list(cfg.seeds),
        "seed_offset": extra["seed_offset"],
        "outputs": {str(s): p for s, p in paths.items()},
        "timings": {},
    }
    _write_manifest(out / "manifest.json", manifest)
    tasks = [(cfg.to_dict(), s) for s in cfg.seeds]
    for seed, trace, secs in _map(_run_one, tasks, args.jobs):
        write_trace(out / paths[seed], trace)
        manifest["timings"][str(seed)] = round(secs, 3)
        print(f"seed {seed}: final eps_q {trace.final_eps_q:.6g}, "
              f"late eps_b {trace.late_eps_b():.6g} ({secs:.1f}s) -> {out / paths[seed]}")
    _write_manifest(out / "manifest.json", manifest)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg_dict, extra = load_settings(args)
    cfg = ExperimentConfig.from_dict(cfg_dict)
    out = Path(args.out)
    manifest = {
        "kind": MANIFEST_KIND,
        "command": "sweep",
        "version": __version__,
        "config": cfg.to_dict(),
        "seeds": list(cfg.seeds),
        "seed_offset": extra["seed_offset"],
        "outputs": {"runs": "sweep_runs.csv", "summary": "sweep_summary.csv", "traces": "traces/"},
        "timings": {},
    }
    _write_manifest(out / "manifest.json", manifest)
    t0 = time.perf_counter()
    traces: dict = {}
    rows = rank_sweep(cfg, jobs=args.jobs, traces=traces)
    manifest["timings"]["total"] = round(time.perf_counter() - t0, 3)
    for (regime, critic, rank, seed), trace in sorted(traces.items()):
        write_trace(out / "traces" / f"{critic}-r{rank}_{regime}_seed{seed}.csv", trace)
    write_csv(out / "sweep_runs.csv", ("regime", "critic", "rank", "seed", "final_eps_q", "late_eps_b"),
              ((r.regime, r.critic, r.rank, r.seed, r.final_eps_q, r.late_eps_b) for r in rows))
    summary = summarize(rows)
    write_csv(out / "sweep_summary.csv",
              ("regime", "critic", "rank", "dense", "n", "mean_eps_q", "std_eps_q",
               "mean_late_eps_b", "std_late_eps_b"),
              ((s.regime, s.critic, s.rank, s.dense, s.n, s.mean_eps_q, s.std_eps_q,
                s.mean_late_eps_b, s.std_late_eps_b) for s in summary))
    _write_manifest(out / "manifest.json", manifest)
    for s in summary:
        name = "dense" if s.dense else f"r={s.rank}"
        print(f"{s.regime:6s} {name:7s} eps_q {s.mean_eps_q:.4g} +- {s.std_eps_q:.3g}   "
              f"late eps_b {s.mean_late_eps_b:.4g}")
    return EXIT_OK


def cmd_check(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    failures = []
    for name in names:
        results, secs = run_suite(name)
        print(f"== {name} ({secs:.2f}s)")
        for r in results:
            print("  " + r.line())
            if not r.passed:
                failures.append(f"{name}: {r.name}")
    if failures:
        print("failed:", file=sys.stderr)
        for f in failures:
            print("  " + f, file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def _count_table(dense, lora) -> list[tuple[str, int, int]]:
    d, l_ = ParamRegistry(dense), ParamRegistry(lora)
    return [
        ("trainable", d.count(trainable=True), l_.count(trainable=True)),
        ("  adapter factors", d.count("lora"), l_.count("lora")),
        ("frozen", d.count("frozen"), l_.count("frozen")),
    ]


def cmd_arch_demo(args) -> int:
    rng = stream(args.seed, "check")
    input_dim, batch, head = 10, 8, args.head
    build = build_simba_critic if args.arch == "simbav2" else build_bro_critic
    dense = build(input_dim, args.d_h, args.blocks, seed=args.seed, head=head)
    if args.arch == "simbav2" and args.projection:
        lora = lora_wrap(dense, args.rank, LoRAInit("normal-both"), kappa=0.5, base="fresh",
                         seed=args.seed)
    else:
        lora = lora_wrap(dense, args.rank, LoRAInit("zero-b"), seed=args.seed)
    critic = dense if args.mode == "dense" else lora
    ok = True

    print(f"{args.arch}: d_h={args.d_h}, blocks={args.blocks}, rank={args.rank}, head={head}")
    print(f"{'parameters':20s} {'dense':>10s} {'lora':>10s}")
    for name, d, l_ in _count_table(dense, lora):
        print(f"{name:20s} {d:10d} {l_:10d}")
    fewer = ParamRegistry(lora).count(trainable=True) < ParamRegistry(dense).count(trainable=True)
    print(f"lora trainable < dense trainable: {fewer}")
    ok &= fewer or args.rank >= 0.8 * args.d_h

    if args.projection:
        if args.arch != "simbav2":
            raise UsageError("--projection applies to simbav2 only")
        post_update_hook(critic, "project_lora" if args.mode == "lora" else "row_normalize")
        worst_row = max(float(np.max(np.abs(np.linalg.norm(m.effective_weight(), axis=1) - 1.0)))
                        for m in critic.normalized_maps())
        print(f"max | ||row|| - 1 | over normalized maps: {worst_row:.3e}")
        ok &= worst_row <= 1e-9

    x = rng.standard_normal((batch, input_dim))
    target = rng.standard_normal(batch) if head == "scalar" else rng.dirichlet(np.ones(51), size=batch)
    critic.forward(x)
    if args.arch == "simbav2":
        worst = max(float(np.max(np.abs(np.linalg.norm(h, axis=1) - 1.0))) for h in critic.hidden_states)
        print(f"hidden states h^0..h^{len(critic.hidden_states) - 1}: max | ||h|| - 1 | = {worst:.3e}")
        ok &= worst <= 1e-10
    else:
        lns = [("ln_in", critic.ln_in)] + [(f"blocks.{i}.{n}", getattr(b, n))
                                           for i, b in enumerate(critic.blocks) for n in ("ln1", "ln2")]
        print(f"{'layer norm':14s} {'max|mean|':>10s} {'mean var':>10s}")
        for name, ln in lns:
            xhat = ln._xhat
            mean_err = float(np.max(np.abs(xhat.mean(axis=1))))
            var = float(np.mean(xhat.var(axis=1)))
            print(f"{name:14s} {mean_err:10.2e} {var:10.6f}")
            ok &= mean_err <= 1e-10
    err = gradient_check(critic, x, target, head, seed=args.seed)
    print(f"gradient check (central differences, h=1e-5): max relative error {err:.3e}")
    ok &= err <= 1e-5
    return EXIT_OK if ok else EXIT_CHECK


def _common(p):
    p.add_argument("--config", metavar="PATH", help="JSON config or a manifest from an earlier run")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--seeds", metavar="LIST", help="comma separated seeds, e.g. 0,1,2,3,4")
    p.add_argument("--out", metavar="DIR", default="results", help="output directory")
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lrcl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lrcl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("toy-run", help="train critics on the chain MDP and write metric CSVs")
    _common(p)
    p.add_argument("--variant", choices=VARIANTS, help="run an ablation variant instead")
    p.set_defaults(func=cmd_toy_run)

    p = sub.add_parser("sweep", help="dense vs. every LoRA rank in both regimes")
    _common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check", help="run a property suite")
    p.add_argument("suite", choices=sorted(SUITES) + ["all"])
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("arch-demo", help="build a small SimbaV2 or BroNet critic and report on it")
    p.add_argument("arch", choices=("simbav2", "bronet"))
    p.add_argument("--mode", choices=("dense", "lora"), default="lora")
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--d-h", dest="d_h", type=int, default=64)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--head", choices=("scalar", "categorical"), default="categorical")
    p.add_argument("--projection", action="store_true", help="apply the unit-row projection first")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_arch_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"lrcl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, ProjectionError, SolverError, np.linalg.LinAlgError) as exc:
        print(f"lrcl: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
