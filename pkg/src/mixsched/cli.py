"""Command-line interface.

Subcommands: run, compare, study-delta, study-disk, flops, pipeline,
serve-trainer, report, presets.  Exit codes: 0 success, 1 usage error,
2 runtime failure.  The MIXSCHED_OUT environment variable overrides the
default output directory.
"""

from __future__ import annotations

import argparse
import configparser
import os
import shlex
import sys
from fractions import Fraction

from . import flops as flops_mod
from . import protocol, reporting
from . import scheduler as sched
from .ckptstore import CheckpointStore, utilization
from .core import ComputeGrid, MixschedError, RunResult, RunTrace, parse_frac
from .presets import (
    BATTERY_PRESETS,
    PRESET_NAMES,
    ExperimentSpec,
    dumps_experiment,
    load_preset,
    loads_experiment,
)
from .scheduler import forgetting_decomposition
from .trainer import SimulatorSession


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _out_dir(args, default: str) -> str:
    if args.out:
        return args.out
    env = os.environ.get("MIXSCHED_OUT")
    if env:
        return os.path.join(env, default)
    return os.path.join("runs", default)


def _load_spec(args) -> ExperimentSpec:
    if args.config:
        with open(args.config) as f:
            return loads_experiment(f.read())
    return load_preset(args.preset)


class _SessionPool:
    """Builds sessions for the selected trainer and shuts them all down."""

    def __init__(self, spec: ExperimentSpec, trainer: str):
        self.spec = spec
        self.trainer = trainer
        self.sessions = []

    def factory(self):
        spec = self.spec
        if self.trainer == "inproc":
            session = SimulatorSession(spec.dynamics, spec.grid.step)
        elif self.trainer.startswith("subprocess:"):
            session = protocol.connect_subprocess(
                shlex.split(self.trainer[len("subprocess:"):])
            )
            session.configure(spec.dynamics, spec.grid.step)
        elif self.trainer.startswith("tcp:"):
            host, port = self.trainer[len("tcp:"):].rsplit(":", 1)
            session = protocol.connect_tcp(host, int(port))
            session.configure(spec.dynamics, spec.grid.step)
        else:
            raise MixschedError(
                f"unknown trainer {self.trainer!r}; use inproc, subprocess:<cmd>, or tcp:<host>:<port>"
            )
        session.init(spec.mixture, spec.seed)
        self.sessions.append(session)
        return session

    def close(self):
        for s in self.sessions:
            if hasattr(s, "shutdown"):
                try:
                    s.shutdown()
                except MixschedError:
                    pass
        self.sessions = []


def run_strategy(spec: ExperimentSpec, strategy: str, pool: _SessionPool) -> RunResult:
    cfg = spec.strategy_config(strategy)
    kwargs = dict(
        seed=spec.seed,
        theta=spec.theta,
        store=CheckpointStore(),
        dynamics=spec.dynamics,
        preset=spec.name,
    )
    if strategy == "sft":
        return sched.run_sft(pool.factory(), spec.mixture, cfg, **kwargs)
    if strategy == "continual":
        return sched.run_continual(pool.factory(), spec.mixture, cfg, **kwargs)
    if strategy == "sro":
        return sched.run_sro(pool.factory, spec.mixture, cfg, **kwargs)
    if strategy == "soft-sro":
        return sched.run_soft_sro(pool.factory, spec.mixture, cfg, **kwargs)
    if strategy == "msft":
        return sched.run_msft(pool.factory(), spec.mixture, cfg, **kwargs)
    raise MixschedError(f"unknown strategy {strategy!r}")


class _Incomplete:
    """Marks an output directory until its artifacts are fully written."""

    def __init__(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        self.path = os.path.join(out_dir, ".incomplete")
        with open(self.path, "w") as f:
            f.write("artifacts are being written; delete this directory if it persists\n")

    def done(self):
        os.unlink(self.path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    spec = _load_spec(args)
    out = _out_dir(args, os.path.join(spec.name, args.strategy))
    marker = _Incomplete(out)
    pool = _SessionPool(spec, args.trainer)
    try:
        result = run_strategy(spec, args.strategy, pool)
    finally:
        pool.close()
    reporting.render_run(result, spec.mixture.ids(), out)
    if result.exclusions:
        decomp = forgetting_decomposition(result)
        reporting.write_decomposition_table(decomp, out)
        reporting.plot_decomposition(decomp, out)
    marker.done()
    print(f"{args.strategy} on {spec.name}: best {100 * result.global_best_metric:.2f}% "
          f"at {float(result.epochs_at_best):.2f} ep -> {out}")
    return 0


def cmd_compare(args) -> int:
    spec = _load_spec(args)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    out = _out_dir(args, os.path.join(spec.name, "compare"))
    marker = _Incomplete(out)
    results: dict[str, RunResult] = {}
    for strategy in strategies:
        pool = _SessionPool(spec, args.trainer)
        try:
            results[strategy] = run_strategy(spec, strategy, pool)
        finally:
            pool.close()
        reporting.render_run(
            results[strategy], spec.mixture.ids(), os.path.join(out, strategy)
        )
    ids = spec.mixture.ids()
    reporting.write_comparison(results, ids, spec.theta, out)
    reporting.plot_comparison_std(results, ids, out)
    marker.done()
    for name in sorted(results):
        r = results[name]
        print(f"{name:10s} acc {100 * r.global_best_metric:6.2f}%  "
              f"ep {float(r.epochs_at_best):5.2f}")
    print(f"-> {out}")
    return 0


def cmd_study_delta(args) -> int:
    spec = _load_spec(args)
    out = _out_dir(args, os.path.join(spec.name, "study-delta"))
    marker = _Incomplete(out)
    grid = ComputeGrid(spec.sro_search_budget, spec.grid.step)

    def factory():
        s = SimulatorSession(spec.dynamics, spec.grid.step)
        s.init(spec.mixture, spec.seed)
        return s

    shifts, mean_abs = sched.delta_cstar_study(factory, spec.mixture, grid)
    lines = ["dataset,shift_epochs,abs_shift_epochs"]
    for ds in sorted(shifts):
        lines.append(f"{ds},{float(shifts[ds])},{abs(float(shifts[ds]))}")
    lines.append(f"mean_abs,,{mean_abs}")
    with open(os.path.join(out, "delta_cstar.csv"), "w") as f:
        f.write("\n".join(lines) + "\n")
    import matplotlib.pyplot as plt

    names = sorted(shifts)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(names, [float(shifts[n]) for n in names])
    ax.axhline(0, color="k", lw=0.8)
    ax.set_ylabel("optimal-compute shift (epochs)")
    ax.tick_params(axis="x", rotation=60, labelsize=7)
    fig.tight_layout()
    fig.savefig(os.path.join(out, "delta_cstar.png"), dpi=120)
    plt.close(fig)
    marker.done()
    print(f"mean |shift| = {mean_abs:.4f} epochs -> {out}")
    return 0


def _disk_run(spec: ExperimentSpec):
    pool = _SessionPool(spec, "inproc")
    try:
        result = run_strategy(spec, "msft", pool)
    finally:
        pool.close()
    return result, utilization(result.trace)


def cmd_study_disk(args) -> int:
    if args.battery:
        out = _out_dir(args, "study-disk-battery")
        marker = _Incomplete(out)
        lines = ["preset,n_datasets,peak_copies,average_copies,nominal_stage_average,bound_ok"]
        averages = []
        for name in BATTERY_PRESETS:
            spec = load_preset(name)
            _res, u = _disk_run(spec)
            bound_ok = int(u.peak_copies <= spec.mixture.n + 1)
            lines.append(
                f"{name},{spec.mixture.n},{u.peak_copies},{u.average_copies:.4f},"
                f"{u.nominal_stage_average:.4f},{bound_ok}"
            )
            averages.append(u.average_copies)
        battery_avg = sum(averages) / len(averages)
        lines.append(f"battery_mean,,,{battery_avg:.4f},,")
        with open(os.path.join(out, "battery.csv"), "w") as f:
            f.write("\n".join(lines) + "\n")
        marker.done()
        print(f"battery mean {battery_avg:.3f} copies -> {out}")
        return 0
    spec = _load_spec(args)
    out = _out_dir(args, os.path.join(spec.name, "study-disk"))
    marker = _Incomplete(out)
    result, u = _disk_run(spec)
    lines = ["eval_step,live_copies"]
    for i, c in enumerate(u.step_counts, start=1):
        lines.append(f"{i},{c}")
    with open(os.path.join(out, "disk.csv"), "w") as f:
        f.write("\n".join(lines) + "\n")
    from .core import StageMark, TrainStep

    stage_steps = []
    count = 0
    for ev in result.trace.events:
        if isinstance(ev, StageMark):
            if count:
                stage_steps.append(count)
            count = 0
        elif isinstance(ev, TrainStep):
            count += 1
    if count:
        stage_steps.append(count)
    reporting.plot_disk(u.step_counts, stage_steps, out)
    with open(os.path.join(out, "summary.json"), "w") as f:
        import json

        json.dump(
            {
                "preset": spec.name,
                "peak_copies": u.peak_copies,
                "average_copies": u.average_copies,
                "nominal_stage_average": u.nominal_stage_average,
                "hard_bound": spec.mixture.n + 1,
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
    marker.done()
    print(
        f"peak {u.peak_copies} copies, step average {u.average_copies:.3f}, "
        f"stage-slot average {u.nominal_stage_average:.3f} -> {out}"
    )
    return 0


def cmd_flops(args) -> int:
    spec = _load_spec(args)
    out = _out_dir(args, os.path.join(spec.name, "flops"))
    marker = _Incomplete(out)
    th = spec.theta
    header = (
        "method,search_train,search_validation,train,validation,"
        "validation_excluded,lookahead,total_pflops,trace_pflops"
    )
    lines = [header]
    sro_grid = ComputeGrid(spec.sro_search_budget, spec.grid.step)
    for strategy in spec.strategies:
        pool = _SessionPool(spec, "inproc")
        try:
            result = run_strategy(spec, strategy, pool)
        finally:
            pool.close()
        if strategy == "sft":
            inputs = flops_mod.derive_inputs(
                "sft", spec.mixture, ComputeGrid(spec.sft_epochs, spec.grid.step), th
            )
        elif strategy == "continual":
            inputs = flops_mod.derive_inputs("continual", spec.mixture, spec.grid, th)
        elif strategy in ("sro", "soft-sro"):
            inputs = flops_mod.derive_inputs(
                strategy, spec.mixture, sro_grid, th,
                search_budget=spec.sro_search_budget, result=result,
            )
        else:
            inputs = flops_mod.derive_inputs(
                "msft", spec.mixture, spec.grid, th, result=result
            )
        rep = flops_mod.ledger_method(strategy, inputs)
        trace_total = float(flops_mod.ledger_from_trace(result.trace, th) / flops_mod.PFLOP)
        comp = {k: float(v / flops_mod.PFLOP) for k, v in rep.components.items()}
        lines.append(
            f"{strategy},{comp.get('search_train', 0):.4f},"
            f"{comp.get('search_validation', 0):.4f},{comp.get('train', 0):.4f},"
            f"{comp.get('validation', 0):.4f},{comp.get('validation_excluded', 0):.4f},"
            f"{comp.get('lookahead', 0):.4f},{rep.total_pflops():.4f},{trace_total:.4f}"
        )
    # reference ledgers for the two methods whose training loops are out of
    # scope here; extras use the documented defaults
    t_avg = round(
        sum(s.train_tokens_per_epoch // s.size for s in spec.mixture.subs)
        / spec.mixture.n
    )
    dyn_inputs = flops_mod.FlopsInputs(
        theta=th,
        t_train=flops_mod.mixture_train_tokens(spec.mixture),
        t_validation=flops_mod.mixture_val_tokens_per_epoch(
            spec.mixture, ComputeGrid(spec.sft_epochs, spec.grid.step)
        ),
        budget=spec.sft_epochs,
        n_tasks=spec.mixture.n,
        lookahead_batch=args.dynamix_batch,
        t_avg=t_avg,
        n_update_steps=args.dynamix_updates,
    )
    rep = flops_mod.ledger_method("dynamix", dyn_inputs)
    comp = {k: float(v / flops_mod.PFLOP) for k, v in rep.components.items()}
    lines.append(
        f"dynamix,0.0000,0.0000,{comp.get('train', 0):.4f},{comp.get('validation', 0):.4f},"
        f"0.0000,{comp.get('lookahead', 0):.4f},{rep.total_pflops():.4f},"
    )
    steps_per_unit = int(1 / spec.grid.step)
    full = Fraction(flops_mod.mixture_train_tokens(spec.mixture), steps_per_unit)
    series = []
    for unit in range(int(spec.sft_epochs)):
        keep = Fraction(1) if unit < 3 else max(
            Fraction(0), 1 - Fraction(args.ies_decline_pct, 100) * (unit - 2)
        )
        series.extend([full * keep] * steps_per_unit)
    ies_inputs = flops_mod.FlopsInputs(
        theta=th,
        t_train=flops_mod.mixture_train_tokens(spec.mixture),
        t_validation=flops_mod.mixture_val_tokens_per_epoch(
            spec.mixture, ComputeGrid(spec.sft_epochs, spec.grid.step)
        ),
        budget=spec.sft_epochs,
        per_step_train=series,
    )
    rep = flops_mod.ledger_method("ies", ies_inputs)
    comp = {k: float(v / flops_mod.PFLOP) for k, v in rep.components.items()}
    lines.append(
        f"ies,0.0000,0.0000,{comp.get('train', 0):.4f},{comp.get('validation', 0):.4f},"
        f"0.0000,0.0000,{rep.total_pflops():.4f},"
    )
    with open(os.path.join(out, "flops.csv"), "w") as f:
        f.write("\n".join(lines) + "\n")
    _budget_sweep(spec, out)
    marker.done()
    print(f"-> {out}/flops.csv")
    return 0


def _budget_sweep(spec: ExperimentSpec, out: str) -> None:
    """Accuracy and compute split of the search across roll-out budgets,
    with the fixed-epochs baseline as the reference row."""
    from dataclasses import replace

    rows = []
    sft_pool = _SessionPool(spec, "inproc")
    try:
        sft = run_strategy(spec, "sft", sft_pool)
    finally:
        sft_pool.close()
    rep = flops_mod.ledger_from_trace(sft.trace, spec.theta)
    rows.append(("sft", spec.sft_epochs, sft.global_best_metric,
                 float(rep / flops_mod.PFLOP), 0.0))
    for budget in (Fraction(1), Fraction(2), Fraction(3)):
        swept = replace(spec, grid=ComputeGrid(budget, spec.grid.step))
        pool = _SessionPool(swept, "inproc")
        try:
            result = run_strategy(swept, "msft", pool)
        finally:
            pool.close()
        inputs = flops_mod.derive_inputs(
            "msft", swept.mixture, swept.grid, swept.theta, result=result
        )
        ledger = flops_mod.ledger_method("msft", inputs)
        train = float(ledger.components["train"] / flops_mod.PFLOP)
        val = float(
            (ledger.components["validation"] + ledger.components["validation_excluded"])
            / flops_mod.PFLOP
        )
        rows.append(("msft", budget, result.global_best_metric, train, val))
    reporting.write_budget_sweep(rows, out)
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    labels = [f"{r[0]}@{r[1]}" for r in rows]
    ax1.bar(labels, [100 * r[2] for r in rows])
    ax1.set_ylabel("best mixture accuracy (%)")
    ax1.tick_params(axis="x", rotation=30, labelsize=8)
    ax2.bar(labels, [r[3] for r in rows], label="train")
    ax2.bar(labels, [r[4] for r in rows], bottom=[r[3] for r in rows],
            label="validation")
    ax2.set_ylabel("PFLOPs")
    ax2.tick_params(axis="x", rotation=30, labelsize=8)
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(os.path.join(out, "budget_sweep.png"), dpi=120)
    plt.close(fig)


def cmd_pipeline(args) -> int:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    with open(args.config) as f:
        cp.read_string(f.read())
    if "pipeline" not in cp:
        raise MixschedError("pipeline config needs a [pipeline] section")
    theta = int(float(cp["pipeline"]["theta"]))
    stage_values: dict[str, float] = {}
    for section in cp.sections():
        if not section.startswith("stage:"):
            continue
        stage = section[len("stage:"):]
        sec = cp[section]
        if "flops" in sec:
            stage_values[stage] = float(sec["flops"])
            continue
        spec = flops_mod.PipelineStageSpec(
            stage=stage,
            theta=theta,
            tokens=int(float(sec["tokens"])) if "tokens" in sec else None,
            n_samples=int(sec["n_samples"]) if "n_samples" in sec else None,
            avg_len=float(sec["avg_len"]) if "avg_len" in sec else None,
            epochs=int(sec.get("epochs", "2")),
            n_pairs=int(sec["n_pairs"]) if "n_pairs" in sec else None,
            episodes=int(float(sec["episodes"])) if "episodes" in sec else None,
            n_grad=int(sec["n_grad"]) if "n_grad" in sec else None,
            algo=sec.get("algo"),
        )
        stage_values[stage] = flops_mod.pipeline_stage_flops(spec)
    report = flops_mod.proportion_report(stage_values)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    lines = ["stage,flops"]
    for stage in flops_mod.PIPELINE_STAGES:
        if stage in stage_values:
            lines.append(f"{stage},{stage_values[stage]:.6e}")
    lines.append(f"post_total,{report['post_total']:.6e}")
    lines.append(f"post_over_total_pct,{100 * report['post_over_total']:.4f}")
    lines.append(f"sft_over_post_pct,{100 * report['sft_over_post']:.4f}")
    path = os.path.join(out, "pipeline.csv")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    print(f"post/total = {100 * report['post_over_total']:.3f}%  "
          f"sft/post = {100 * report['sft_over_post']:.3f}% -> {path}")
    return 0


def cmd_serve_trainer(args) -> int:
    if args.tcp:
        host, port = args.tcp.rsplit(":", 1)
        import socketserver

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                protocol.serve(protocol._simulator_factory, self.rfile, self.wfile)

        with socketserver.ThreadingTCPServer((host, int(port)), Handler) as server:
            server.daemon_threads = True
            print(f"serving trainer protocol on {host}:{port}", file=sys.stderr)
            server.serve_forever()
        return 0
    protocol.serve_stdio()
    return 0


def _load_run(run_dir: str) -> RunResult:
    with open(os.path.join(run_dir, "trace.jsonl")) as f:
        trace = RunTrace.from_jsonl(f.read())
    summary = reporting.load_summary(os.path.join(run_dir, "summary.json"))
    curve = reporting.curve_from_trace(trace)
    return RunResult(
        strategy=summary["strategy"],
        final_checkpoint_id=summary["final_checkpoint"],
        global_best_checkpoint_id=summary["global_best_checkpoint"],
        global_best_metric=float(summary["global_best_metric"]),
        epochs_at_best=parse_frac(summary["epochs_at_best"]),
        per_task_best={
            ds: (parse_frac(v["c_star"]), float(v["metric"]))
            for ds, v in summary["per_task_best"].items()
        },
        metrics_at_best={
            ds: float(v) for ds, v in summary["metrics_at_best"].items()
        },
        curve=curve,
        trace=trace,
        exclusions=[(e["ds"], parse_frac(e["at"])) for e in summary["exclusions"]],
    )


def cmd_report(args) -> int:
    run_dirs = sorted(
        d for d in os.listdir(args.runs)
        if os.path.isfile(os.path.join(args.runs, d, "trace.jsonl"))
    )
    if not run_dirs:
        raise MixschedError(f"no run directories under {args.runs!r}")
    out = args.out or os.path.join(args.runs, "report")
    marker = _Incomplete(out)
    results = {}
    ids: list[str] | None = None
    theta = None
    for d in run_dirs:
        r = _load_run(os.path.join(args.runs, d))
        results[r.strategy] = r
        run_ids = sorted(r.metrics_at_best)
        if ids is None:
            ids = run_ids
        theta = r.trace.theta
        reporting.render_run(r, run_ids, os.path.join(out, r.strategy))
    if len(results) > 1:
        reporting.write_comparison(results, ids, theta, out)
        reporting.plot_comparison_std(results, ids, out)
    marker.done()
    print(f"-> {out}")
    return 0


def cmd_presets(args) -> int:
    if args.action == "list":
        for name in PRESET_NAMES:
            spec = load_preset(name)
            print(f"{name:20s} N={spec.mixture.n:3d} C={spec.grid.budget} "
                  f"step={spec.grid.step}")
        return 0
    os.makedirs(args.out or "presets", exist_ok=True)
    out = args.out or "presets"
    for name in PRESET_NAMES:
        spec = load_preset(name)
        with open(os.path.join(out, f"{name}.ini"), "w") as f:
            f.write(dumps_experiment(spec))
    print(f"-> {out}/")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="mixsched", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, strategies=False):
        p.add_argument("--preset", default="zero-coupling", help="named preset")
        p.add_argument("--config", help="experiment config file (overrides --preset)")
        p.add_argument("--out", help="output directory")
        if strategies:
            p.add_argument(
                "--trainer",
                default="inproc",
                help="inproc | subprocess:<command> | tcp:<host>:<port>",
            )

    p = sub.add_parser("run", help="run one strategy and write its artifacts")
    add_common(p, strategies=True)
    p.add_argument("--strategy", required=True, choices=sched.STRATEGIES)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several strategies on one preset")
    add_common(p, strategies=True)
    p.add_argument("--strategies", default="sft,continual,sro,soft-sro,msft")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("study-delta", help="optimal-compute shift study")
    add_common(p)
    p.set_defaults(func=cmd_study_delta)

    p = sub.add_parser("study-disk", help="checkpoint disk-utilization audit")
    add_common(p)
    p.add_argument("--battery", action="store_true", help="audit every battery preset")
    p.set_defaults(func=cmd_study_disk)

    p = sub.add_parser("flops", help="closed-form and trace compute ledgers")
    add_common(p)
    p.add_argument("--dynamix-batch", type=int, default=8)
    p.add_argument("--dynamix-updates", type=int, default=100)
    p.add_argument("--ies-decline-pct", type=int, default=10)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("pipeline", help="whole-pipeline stage FLOPs calculator")
    p.add_argument("--config", required=True, help="pipeline stage config file")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("serve-trainer", help="host the trainer wire protocol")
    p.add_argument("--tcp", help="host:port (default: stdio)")
    p.set_defaults(func=cmd_serve_trainer)

    p = sub.add_parser("report", help="re-render tables and figures from saved runs")
    p.add_argument("--runs", required=True, help="directory of run directories")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("presets", help="list or export the shipped presets")
    p.add_argument("action", choices=("list", "export"))
    p.add_argument("--out", help="output directory for export")
    p.set_defaults(func=cmd_presets)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MixschedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
