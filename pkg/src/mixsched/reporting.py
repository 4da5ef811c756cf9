"""Report rendering: delimited tables plus matplotlib figures.

Every number in a report is recomputable from the referenced run artifacts
(trace + summary); tables use pinned decimal formatting so identical runs
produce byte-identical files.  Figures are rendered next to each table.
Metrics are stored in [0, 1] internally and formatted as percentages here.
"""

from __future__ import annotations

import json
import os
from fractions import Fraction
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .core import (
    CurveTable,
    Eval,
    EvalRecord,
    Exclude,
    MixschedError,
    Rollback,
    RunResult,
    RunTrace,
        TrainStep,
    canonical_float,
)
from .flops import PFLOP, ledger_from_trace
from .scheduler import peak_of, step_average_series


class ReportError(MixschedError):
    """Inconsistent or incomplete report inputs."""


def moving_average(series: Sequence[float], window: int = 10) -> list[float]:
    """Trailing moving average; early entries average what exists so far,
    so a constant series smooths to itself."""
    out = []
    for i in range(len(series)):
        lo = max(0, i - window + 1)
        chunk = series[lo : i + 1]
        out.append(sum(chunk) / len(chunk))
    return out


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def _ep(x: Fraction | float) -> str:
    return f"{float(x):.2f}"


def _write(path: str, lines: list[str]) -> None:
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def curve_from_trace(trace: RunTrace) -> CurveTable:
    curve = CurveTable()
    for ev in trace.events:
        if isinstance(ev, Eval):
            curve.add(
                EvalRecord(
                    dataset_id=ev.dataset_id,
                    compute_c=ev.cum,
                    metric=ev.metric,
                    position=ev.position,
                )
            )
    return curve


# ---------------------------------------------------------------------------
# per-run tables
# ---------------------------------------------------------------------------


def write_curve_table(result: RunResult, out_dir: str) -> str:
    """Per-task measured curves with peak annotations."""
    path = os.path.join(out_dir, "curves.csv")
    lines = ["dataset,cum_epochs,position_epochs,metric,is_peak"]
    for ds in result.curve.datasets():
        peak_pos, peak_val = peak_of(result.curve, ds)
        for r in result.curve.records_for(ds):
            is_peak = int(r.position == peak_pos and r.metric == peak_val)
            lines.append(
                f"{ds},{canonical_float(float(r.compute_c))},"
                f"{canonical_float(float(r.position))},"
                f"{canonical_float(r.metric)},{is_peak}"
            )
    _write(path, lines)
    return path


def write_peak_delta_table(result: RunResult, ids: Sequence[str], out_dir: str) -> str:
    """Absolute gap between each task's peak position and the position of
    the best mixture-average point."""
    path = os.path.join(out_dir, "peak_deltas.csv")
    series = step_average_series(result.trace, list(ids))
    if not series:
        raise ReportError("trace has no step averages")
    best_cum, _ = max(series, key=lambda t: (t[1], -t[0]))
    pos_by_cum = {}
    for ev in result.trace.events:
        if isinstance(ev, TrainStep):
            pos_by_cum[ev.cum] = ev.position
    best_pos = pos_by_cum.get(best_cum, best_cum)
    lines = ["dataset,task_peak_epochs,mixture_best_epochs,abs_delta"]
    for ds in result.curve.datasets():
        task_peak, _ = peak_of(result.curve, ds)
        delta = abs(float(task_peak - best_pos))
        lines.append(
            f"{ds},{canonical_float(float(task_peak))},"
            f"{canonical_float(float(best_pos))},{canonical_float(delta)}"
        )
    _write(path, lines)
    return path


def write_loss_table(result: RunResult, out_dir: str, window: int = 10) -> str:
    """Train-loss trajectory, smoothed, with exclusion markers and the
    remaining-dataset count per segment."""
    path = os.path.join(out_dir, "loss.csv")
    rows = []
    for ev in result.trace.events:
        if isinstance(ev, TrainStep) and ev.loss is not None:
            rows.append((ev.cum, ev.position, ev.loss, len(ev.active)))
    smoothed = moving_average([r[2] for r in rows], window)
    lines = ["cum_epochs,position_epochs,loss,smoothed,n_active,exclusion"]
    marks = _exclusion_cums(result.trace)
    for (cum, pos, loss, n_active), sm in zip(rows, smoothed):
        lines.append(
            f"{canonical_float(float(cum))},{canonical_float(float(pos))},"
            f"{canonical_float(loss)},{canonical_float(sm)},{n_active},"
            f"{int(cum in marks)}"
        )
    _write(path, lines)
    return path


def _exclusion_cums(trace: RunTrace) -> set[Fraction]:
    return {ev.cum for ev in trace.events if isinstance(ev, (Exclude, Rollback))}


def write_decomposition_table(
    decomposition: dict[str, float], out_dir: str
) -> str:
    path = os.path.join(out_dir, "decomposition.csv")
    lines = ["dataset,forgetting_or_transfer_pct"]
    for ds in sorted(decomposition):
        lines.append(f"{ds},{_pct(decomposition[ds])}")
    _write(path, lines)
    return path


# ---------------------------------------------------------------------------
# comparison report
# ---------------------------------------------------------------------------


def pstdev(values: Sequence[float]) -> float:
    m = sum(values) / len(values)
    return (sum((v - m) ** 2 for v in values) / len(values)) ** 0.5


def write_comparison(
    results: dict[str, RunResult],
    ids: Sequence[str],
    theta: int,
    out_dir: str,
) -> list[str]:
    """Strategy comparison: headline row per strategy plus the per-task
    score matrix at each strategy's returned best model, with per-task-best
    rows labeled separately."""
    steps = {r.trace.grid.step for r in results.values()}
    if len(steps) > 1:
        raise ReportError("runs use different evaluation grids")
    paths = []

    lines = [
        "strategy,acc_pct,ep_at_best,total_pflops,delta_vs_sft_pct,std_pct,first_places"
    ]
    sft_acc = results["sft"].global_best_metric if "sft" in results else None
    firsts = first_place_tally(results, ids)
    for name in sorted(results):
        r = results[name]
        flops = float(ledger_from_trace(r.trace, theta) / PFLOP)
        vals = [r.metrics_at_best[ds] for ds in ids]
        delta = "" if sft_acc is None else f"{100.0 * (r.global_best_metric - sft_acc):.2f}"
        ep = r.epochs_at_best
        if name == "continual" and r.per_task_best:
            # sequential fine-tuning reports the mean per-task stopping epoch
            ep = sum(float(c) for c, _ in r.per_task_best.values()) / len(
                r.per_task_best
            )
        lines.append(
            f"{name},{_pct(r.global_best_metric)},{_ep(ep)},{flops:.4f},"
            f"{delta},{_pct(pstdev(vals))},{firsts.get(name, 0)}"
        )
    path = os.path.join(out_dir, "comparison.csv")
    _write(path, lines)
    paths.append(path)

    lines = ["strategy,row_kind," + ",".join(ids)]
    for name in sorted(results):
        r = results[name]
        at_best = ",".join(_pct(r.metrics_at_best[ds]) for ds in ids)
        lines.append(f"{name},at_global_best,{at_best}")
        per_best = ",".join(
            _pct(r.per_task_best[ds][1]) if ds in r.per_task_best else ""
            for ds in ids
        )
        lines.append(f"{name},per_task_best,{per_best}")
    path = os.path.join(out_dir, "per_task.csv")
    _write(path, lines)
    paths.append(path)
    return paths


def first_place_tally(
    results: dict[str, RunResult], ids: Sequence[str]
) -> dict[str, int]:
    tally = {name: 0 for name in results}
    for ds in ids:
        best = max(r.metrics_at_best[ds] for r in results.values())
        for name, r in results.items():
            if r.metrics_at_best[ds] == best:
                tally[name] += 1
    return tally


def write_budget_sweep(
    rows: list[tuple[str, Fraction, float, float, float]], out_dir: str
) -> str:
    """Accuracy and compute against the roll-out budget.

    Each row: (strategy, budget, acc, train_pflops, validation_pflops).
    """
    path = os.path.join(out_dir, "budget_sweep.csv")
    lines = ["strategy,budget_epochs,acc_pct,train_pflops,validation_pflops"]
    for strategy, budget, acc, tr, va in rows:
        lines.append(
            f"{strategy},{canonical_float(float(budget))},{_pct(acc)},{tr:.4f},{va:.4f}"
        )
    _write(path, lines)
    return path


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------


def plot_curves(result: RunResult, out_dir: str) -> str:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for ds in result.curve.datasets():
        recs = result.curve.records_for(ds)
        ax.plot(
            [float(r.compute_c) for r in recs],
            [100 * r.metric for r in recs],
            lw=1.0,
            label=ds,
        )
        pk_pos, pk_val = peak_of(result.curve, ds)
        pk_cum = next(
            float(r.compute_c)
            for r in recs
            if r.position == pk_pos and r.metric == pk_val
        )
        ax.plot([pk_cum], [100 * pk_val], "k*", ms=6)
    ax.set_xlabel("cumulative epochs")
    ax.set_ylabel("accuracy (%)")
    ax.set_title(f"{result.strategy}: per-task curves (stars at peaks)")
    ax.legend(fontsize=6, ncol=2)
    path = os.path.join(out_dir, "curves.png")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_peak_deltas(result: RunResult, ids: Sequence[str], out_dir: str) -> str:
    series = step_average_series(result.trace, list(ids))
    best_cum, _ = max(series, key=lambda t: (t[1], -t[0]))
    pos_by_cum = {
        ev.cum: ev.position for ev in result.trace.events if isinstance(ev, TrainStep)
    }
    best_pos = pos_by_cum.get(best_cum, best_cum)
    names, deltas = [], []
    for ds in result.curve.datasets():
        pk, _ = peak_of(result.curve, ds)
        names.append(ds)
        deltas.append(abs(float(pk - best_pos)))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(names, deltas)
    ax.set_ylabel("|task peak - mixture best| (epochs)")
    ax.tick_params(axis="x", rotation=60, labelsize=7)
    path = os.path.join(out_dir, "peak_deltas.png")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss(result: RunResult, out_dir: str, window: int = 10) -> str:
    rows = [
        (float(ev.cum), ev.loss, len(ev.active))
        for ev in result.trace.events
        if isinstance(ev, TrainStep) and ev.loss is not None
    ]
    if not rows:
        raise ReportError("trace carries no loss channel")
    xs = [r[0] for r in rows]
    sm = moving_average([r[1] for r in rows], window)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(xs, sm, lw=1.2)
    for cum in sorted(_exclusion_cums(result.trace)):
        ax.axvline(float(cum), ls="--", lw=0.7, color="tab:red")
    ax.set_xlabel("cumulative epochs")
    ax.set_ylabel(f"train loss (window {window})")
    path = os.path.join(out_dir, "loss.png")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_decomposition(decomposition: dict[str, float], out_dir: str) -> str:
    names = sorted(decomposition)
    vals = [100 * decomposition[n] for n in names]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    colors = ["tab:red" if v < 0 else "tab:green" for v in vals]
    ax.bar(names, vals, color=colors)
    ax.axhline(0, color="k", lw=0.8)
    ax.set_ylabel("forgetting (−) / transfer (+) pp")
    ax.tick_params(axis="x", rotation=60, labelsize=7)
    path = os.path.join(out_dir, "decomposition.png")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_comparison_std(results: dict[str, RunResult], ids: Sequence[str], out_dir: str) -> str:
    names = sorted(results)
    stds = [100 * pstdev([results[n].metrics_at_best[d] for d in ids]) for n in names]
    firsts = first_place_tally(results, ids)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.bar(names, stds)
    ax1.set_ylabel("std across tasks (pp)")
    ax1.tick_params(axis="x", rotation=30, labelsize=8)
    ax2.bar(names, [firsts[n] for n in names])
    ax2.set_ylabel("first places")
    ax2.tick_params(axis="x", rotation=30, labelsize=8)
    path = os.path.join(out_dir, "comparison.png")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_disk(step_counts: Sequence[int], stage_steps: Sequence[int], out_dir: str) -> str:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(range(1, len(step_counts) + 1), step_counts, ".-", ms=3, lw=0.8)
    if step_counts:
        avg = sum(step_counts) / len(step_counts)
        ax.axhline(avg, color="tab:orange", lw=1.0, label=f"average {avg:.2f}")
        ax.legend(fontsize=8)
    pos = 0
    for n in stage_steps[:-1]:
        pos += n
        ax.axvline(pos + 0.5, ls="--", lw=0.6, color="gray")
    ax.set_xlabel("evaluation step")
    ax.set_ylabel("checkpoints on disk (model copies)")
    path = os.path.join(out_dir, "disk.png")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# whole-run rendering
# ---------------------------------------------------------------------------


def render_run(result: RunResult, ids: Sequence[str], out_dir: str) -> list[str]:
    """All per-run artifacts: trace, summary, tables, figures."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    trace_path = os.path.join(out_dir, "trace.jsonl")
    with open(trace_path, "w") as f:
        f.write(result.trace.to_jsonl())
    paths.append(trace_path)
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w") as f:
        f.write(result.summary_json())
    paths.append(summary_path)
    paths.append(write_curve_table(result, out_dir))
    paths.append(write_peak_delta_table(result, ids, out_dir))
    paths.append(plot_curves(result, out_dir))
    paths.append(plot_peak_deltas(result, ids, out_dir))
    has_loss = any(
        isinstance(ev, TrainStep) and ev.loss is not None for ev in result.trace.events
    )
    if has_loss:
        paths.append(write_loss_table(result, out_dir))
        paths.append(plot_loss(result, out_dir))
    return paths


def load_summary(path: str) -> dict:
    with open(path) as f:
        return json.load(f)
