"""Acceptance suite: one test per release criterion, each printing a
PASS line with the measured numbers at its stated tolerance."""

import json
import os
import time
from fractions import Fraction

import pytest

from mixsched.ckptstore import utilization
from mixsched.cli import main
from mixsched.core import ComputeGrid, MixtureSpec, SubDatasetSpec
from mixsched.dynamics import DynamicsConfig, TaskCurveParams, metric_at
from mixsched.flops import (
    FlopsInputs,
    derive_inputs,
    ledger_from_trace,
    ledger_method,
    proportion_report,
)
from mixsched.presets import BATTERY_PRESETS, PRESET_NAMES, load_preset
from mixsched.scheduler import (
    StrategyConfig,
    build_soft_mixture,
    delta_cstar_study,
    earliest_peak,
    peak_of,
    run_continual,
    run_msft,
    run_sft,
    run_soft_sro,
    run_sro,
)
from mixsched.trainer import SimulatorSession

from conftest import make_factory

# pinned after the first correct run of the calibrated drift-enabled preset
PINNED_FORGETTING = {
    "sft": 0.5429232365566892,
    "sro": 0.5841472166076708,
    "soft-sro": 0.565474311928794,
    "msft": 0.6974356964267111,
}


def run_all(spec, strategies=("sft", "sro", "soft-sro", "msft")):
    factory = make_factory(spec)
    out = {}
    for s in strategies:
        cfg = spec.strategy_config(s)
        if s == "sft":
            out[s] = run_sft(factory(), spec.mixture, cfg, dynamics=spec.dynamics)
        elif s == "continual":
            out[s] = run_continual(factory(), spec.mixture, cfg, dynamics=spec.dynamics)
        elif s == "sro":
            out[s] = run_sro(factory, spec.mixture, cfg, dynamics=spec.dynamics)
        elif s == "soft-sro":
            out[s] = run_soft_sro(factory, spec.mixture, cfg, dynamics=spec.dynamics)
        else:
            out[s] = run_msft(factory(), spec.mixture, cfg, dynamics=spec.dynamics)
    return out


def test_oracle_optimality_zero_coupling(zero_coupling):
    """Per-task best metrics equal exhaustive grid maxima, exactly, fast."""
    spec = zero_coupling
    start = time.monotonic()
    result = run_msft(
        make_factory(spec)(), spec.mixture, spec.strategy_config("msft"),
        dynamics=spec.dynamics,
    )
    elapsed = time.monotonic() - start
    step = spec.grid.step
    for ds in spec.mixture.ids():
        best_c, best_v = None, None
        c = step
        while c <= 12:
            v = metric_at(spec.dynamics, ds, c)
            if best_v is None or v > best_v:
                best_c, best_v = c, v
            c += step
        assert result.per_task_best[ds] == (best_c, best_v), ds
    assert elapsed < 5.0
    print(f"\nPASS oracle-optimality: 10/10 tasks exact, {elapsed:.2f}s < 5s")


def test_delta_cstar_calibration(fig4, zero_coupling):
    """Mean absolute optimal-compute shift hits 0.91 +/- 0.10 epochs on the
    calibrated preset and exactly zero without coupling."""
    grid = ComputeGrid(fig4.sro_search_budget, fig4.grid.step)
    _, mean_cal = delta_cstar_study(make_factory(fig4), fig4.mixture, grid)
    assert abs(mean_cal - 0.91) <= 0.10
    grid0 = ComputeGrid(zero_coupling.sro_search_budget, zero_coupling.grid.step)
    shifts, mean_zero = delta_cstar_study(
        make_factory(zero_coupling), zero_coupling.mixture, grid0
    )
    assert mean_zero == 0.0 and all(v == 0 for v in shifts.values())
    print(f"\nPASS delta-cstar: calibrated {mean_cal:.4f} in 0.91±0.10, zero-coupling 0.0")


def test_directional_superiority(forgetting):
    """Mixture-average best orders msft > sro >= soft-sro and msft > sft on
    the calibrated preset with drift enabled; values regression-pinned."""
    res = run_all(forgetting)
    acc = {k: v.global_best_metric for k, v in res.items()}
    assert acc["msft"] > acc["sro"] >= acc["soft-sro"]
    assert acc["msft"] > acc["sft"]
    for k, pinned in PINNED_FORGETTING.items():
        assert acc[k] == pytest.approx(pinned, abs=1e-12), k
    print(
        "\nPASS directional: msft {msft:.4f} > sro {sro:.4f} >= soft {soft:.4f}; "
        "msft > sft {sft:.4f}".format(
            msft=acc["msft"], sro=acc["sro"], soft=acc["soft-sro"], sft=acc["sft"]
        )
    )


def test_disk_bounds(disk_preset):
    """Distinct-peak preset reproduces the predicted peak of 11 copies and
    stage-slot average of 7.5 exactly; every shipped preset respects the
    N+1 bound; the battery's empirical average stays under 5.0 copies."""
    r = run_msft(
        make_factory(disk_preset)(), disk_preset.mixture,
        disk_preset.strategy_config("msft"), dynamics=disk_preset.dynamics,
    )
    u = utilization(r.trace)
    assert u.peak_copies == 11
    assert u.nominal_stage_average == 7.5
    battery = []
    for name in PRESET_NAMES:
        spec = load_preset(name)
        rr = run_msft(
            make_factory(spec)(), spec.mixture, spec.strategy_config("msft"),
            dynamics=spec.dynamics,
        )
        uu = utilization(rr.trace)
        assert uu.peak_copies <= spec.mixture.n + 1, name
        if name in BATTERY_PRESETS:
            battery.append(uu.average_copies)
    battery_mean = sum(battery) / len(battery)
    assert battery_mean <= 5.0
    print(
        f"\nPASS disk-bounds: peak 11, stage-slot average 7.5, "
        f"battery mean {battery_mean:.3f} <= 5.0"
    )


def test_flops_oracle_equivalence():
    """Closed-form ledgers equal trace totals exactly for all five runnable
    strategies on every shipped preset; hand-arithmetic cases match."""
    checked = 0
    for name in PRESET_NAMES:
        spec = load_preset(name)
        res = run_all(spec, strategies=("sft", "continual", "sro", "soft-sro", "msft"))
        grid_sro = ComputeGrid(spec.sro_search_budget, spec.grid.step)
        for method, result in res.items():
            if method == "sft":
                inputs = derive_inputs(
                    "sft", spec.mixture, ComputeGrid(spec.sft_epochs, spec.grid.step),
                    spec.theta,
                )
            elif method == "continual":
                inputs = derive_inputs("continual", spec.mixture, spec.grid, spec.theta)
            elif method in ("sro", "soft-sro"):
                inputs = derive_inputs(
                    method, spec.mixture, grid_sro, spec.theta,
                    search_budget=spec.sro_search_budget, result=result,
                )
            else:
                inputs = derive_inputs(
                    "msft", spec.mixture, spec.grid, spec.theta, result=result
                )
            assert ledger_method(method, inputs).total == ledger_from_trace(
                result.trace, spec.theta
            ), (name, method)
            checked += 1
    sft_hand = ledger_method(
        "sft",
        FlopsInputs(theta=10**9, t_train=10**6, t_validation=10**5, budget=Fraction(2)),
    )
    assert float(sft_hand.total) == 1.24e16
    dyn_hand = ledger_method(
        "dynamix",
        FlopsInputs(
            theta=10**9, t_train=0, t_validation=0, budget=Fraction(1),
            n_tasks=10, lookahead_batch=8, t_avg=100, n_update_steps=1,
        ),
    )
    assert float(dyn_hand.components["lookahead"]) == 6.4e13
    print(f"\nPASS flops-oracle: {checked} ledger/trace pairs exact; hand cases match")


def test_pipeline_proportions():
    """Published 7B stage values reproduce the printed share of training
    compute within tolerance."""
    table = {
        "pretrain": 1.64e23,
        "mid": 6.30e21,
        "sft": 2.85e19,
        "dpo": 1.94e19,
        "rlvr-grad": 7.12e19,
        "rlvr-roll": 7.60e20,
    }
    rep = proportion_report(table)
    post_pct = 100 * rep["post_over_total"]
    sft_pct = 100 * rep["sft_over_post"]
    assert abs(post_pct - 0.517) <= 0.01
    assert abs(sft_pct - 3.24) <= 0.05
    print(f"\nPASS pipeline: post/total {post_pct:.4f}% (0.517±0.01), "
          f"sft/post {sft_pct:.4f}% (3.24±0.05)")


def test_c1_compute_saving_regime(c1_preset):
    """At a one-epoch budget the search saves compute outright while holding
    or improving the mixture-average best."""
    spec = c1_preset
    factory = make_factory(spec)
    msft = run_msft(factory(), spec.mixture, spec.strategy_config("msft"),
                    dynamics=spec.dynamics)
    sft = run_sft(factory(), spec.mixture, spec.strategy_config("sft"),
                  dynamics=spec.dynamics)
    f_msft = ledger_from_trace(msft.trace, spec.theta)
    f_sft = ledger_from_trace(sft.trace, spec.theta)
    assert f_msft < f_sft
    assert msft.global_best_metric >= sft.global_best_metric
    print(
        f"\nPASS c1-regime: {float(f_msft) / 1e15:.1f} < {float(f_sft) / 1e15:.1f} "
        f"PFLOPs with acc {100 * msft.global_best_metric:.2f}% >= "
        f"{100 * sft.global_best_metric:.2f}%"
    )


def test_degenerate_cases():
    """Single-task search equals early stopping; uniform peaks keep the
    resampled mixture proportional; documented tie rules hold."""
    mixture = MixtureSpec(
        subs=(SubDatasetSpec(id="only", name="only", size=100,
                             train_tokens_per_epoch=10000, eval_tokens=1000),)
    )
    dynamics = DynamicsConfig(
        tasks={"only": TaskCurveParams(0.2, 0.8, 0.75, 2.0, 1.0)}
    )
    s = SimulatorSession(dynamics)
    s.init(mixture, 20)
    cfg = StrategyConfig(strategy="msft", grid=ComputeGrid(3, Fraction(1, 4)))
    r = run_msft(s, mixture, cfg, dynamics=dynamics)
    assert r.exclusions == [("only", Fraction(3, 4))]
    assert r.per_task_best["only"] == (Fraction(3, 4), 0.8)
    assert r.final_checkpoint_id == r.global_best_checkpoint_id

    big = load_preset("zero-coupling").mixture
    uniform = {ds: Fraction(2) for ds in big.ids()}
    resampled, weights = build_soft_mixture(big, uniform)
    assert all(resampled.by_id(x.id).size == x.size for x in big.subs)
    assert all(w == 1 for w in weights.values())

    from mixsched.core import CurveTable, EvalRecord

    flat = CurveTable(
        [EvalRecord("a", Fraction(k, 4), 0.4, Fraction(k, 4)) for k in range(1, 5)]
    )
    assert peak_of(flat, "a") == (Fraction(1, 4), 0.4)
    two = CurveTable(
        [EvalRecord(ds, Fraction(2), 0.5, Fraction(2)) for ds in ("a", "b")]
    )
    assert earliest_peak(two, ["a", "b"]) == (Fraction(2), "a")
    print("\nPASS degenerate: N=1 early stopping, uniform-peak identity, tie rules")


def test_compare_determinism(tmp_path):
    """Two full comparisons with the default seed produce byte-identical
    report tables."""
    outs = []
    for tag in ("one", "two"):
        out = str(tmp_path / tag)
        assert main([
            "compare", "--preset", "forgetting-on",
            "--strategies", "sft,continual,sro,soft-sro,msft", "--out", out,
        ]) == 0
        outs.append(out)
    tables = ["comparison.csv", "per_task.csv"]
    for strategy in ("sft", "continual", "sro", "soft-sro", "msft"):
        tables += [f"{strategy}/curves.csv", f"{strategy}/peak_deltas.csv",
                   f"{strategy}/trace.jsonl", f"{strategy}/summary.json",
                   f"{strategy}/loss.csv"]
    for rel in tables:
        with open(os.path.join(outs[0], rel), "rb") as f:
            a = f.read()
        with open(os.path.join(outs[1], rel), "rb") as f:
            b = f.read()
        assert a == b, rel
    print(f"\nPASS determinism: {len(tables)} report files byte-identical across runs")


def test_secondary_protocol_conformance(tmp_path):
    """[SECONDARY] The external adapter passes the golden-transcript and
    contract checks and a compare run through it matches in-process tables.
    Skips when the adapter is not built; every other criterion above runs
    without it."""
    import shutil
    import subprocess

    repo = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    adapter = os.path.join(repo, "trainer-adapter", "dist", "main.js")
    if not (os.path.exists(adapter) and shutil.which("node")):
        pytest.skip("trainer adapter not built")
    with open(os.path.join(repo, "tests", "data", "golden_transcript.txt"), "rb") as f:
        lines = f.read().strip().split(b"\n")
    requests = b"".join(lines[i] + b"\n" for i in range(0, len(lines), 2))
    want = [lines[i] for i in range(1, len(lines), 2)]
    proc = subprocess.run(["node", adapter], input=requests,
                          stdout=subprocess.PIPE, timeout=60)
    got = proc.stdout.strip().split(b"\n")
    assert got == want

    out_local = str(tmp_path / "inproc")
    out_remote = str(tmp_path / "adapter")
    args = ["compare", "--preset", "forgetting-on", "--strategies", "sft,msft"]
    assert main(args + ["--out", out_local]) == 0
    assert main(args + ["--out", out_remote,
                        "--trainer", f"subprocess:node {adapter}"]) == 0
    with open(os.path.join(out_local, "msft", "summary.json")) as f:
        la = json.load(f)
    with open(os.path.join(out_remote, "msft", "summary.json")) as f:
        lb = json.load(f)
    worst = 0.0
    for ds, entry in la["metrics_at_best"].items():
        x, y = float(entry), float(lb["metrics_at_best"][ds])
        assert abs(x - y) <= 1e-9 * max(1.0, abs(x))
        worst = max(worst, abs(x - y))
    with open(os.path.join(out_local, "comparison.csv")) as f:
        table_a = f.read()
    with open(os.path.join(out_remote, "comparison.csv")) as f:
        table_b = f.read()
    assert table_a == table_b
    print(f"\nPASS secondary-conformance: transcript byte-exact; "
          f"compare tables identical (worst metric delta {worst:.1e})")
