"""Conformance of the external trainer adapter (the TypeScript package in
trainer-adapter/) against the in-process simulator.

These tests need the adapter built (`npm run build` in trainer-adapter/);
without it they skip, and the rest of the suite runs standalone.
"""

import os
import shutil
import subprocess
from fractions import Fraction

import pytest

from mixsched.cli import main
from mixsched.protocol import connect_subprocess
from mixsched.scheduler import run_msft
from mixsched.trainer import SimulatorSession

from conftest import make_factory

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
ADAPTER = os.path.join(REPO, "trainer-adapter", "dist", "main.js")
DATA = os.path.join(REPO, "tests", "data")

pytestmark = pytest.mark.skipif(
    not (os.path.exists(ADAPTER) and shutil.which("node")),
    reason="trainer adapter not built (run: cd trainer-adapter && npm install && npm run build)",
)


def adapter_cmd():
    return ["node", ADAPTER]


class TestGoldenTranscript:
    def test_adapter_matches_recorded_bytes(self):
        with open(os.path.join(DATA, "golden_transcript.txt"), "rb") as f:
            lines = f.read().strip().split(b"\n")
        requests = b"".join(lines[i] + b"\n" for i in range(0, len(lines), 2))
        want = [lines[i] for i in range(1, len(lines), 2)]
        proc = subprocess.run(
            adapter_cmd(), input=requests, stdout=subprocess.PIPE, timeout=60
        )
        assert proc.returncode == 0
        got = proc.stdout.strip().split(b"\n")
        assert len(got) == len(want)
        for w, g in zip(want, got):
            assert g == w

    def test_shutdown_exits_cleanly(self):
        proc = subprocess.run(
            adapter_cmd(),
            input=b'{"id":1,"cmd":"shutdown","args":{}}\n',
            stdout=subprocess.PIPE,
            timeout=60,
        )
        assert proc.returncode == 0


class TestSessionContract:
    def test_adapter_session_matches_inprocess_bit_for_bit(self, forgetting):
        spec = forgetting
        local = SimulatorSession(spec.dynamics, spec.grid.step)
        local.init(spec.mixture, spec.seed)
        remote = connect_subprocess(adapter_cmd())
        remote.configure(spec.dynamics, spec.grid.step)
        remote.init(spec.mixture, spec.seed)
        ids = spec.mixture.ids()
        try:
            for session in (local, remote):
                session.train_delta(ids, None, Fraction(3, 4))
            for ds in ids:
                assert local.evaluate(ds) == remote.evaluate(ds)
            assert local.save_state() == remote.save_state()
            for session in (local, remote):
                session.mark_excluded(ids[0])
                session.train_delta(
                    ids[1:], {ids[1]: Fraction(7, 4)}, Fraction(1, 2)
                )
            for ds in ids:
                assert local.evaluate(ds) == remote.evaluate(ds)
        finally:
            remote.shutdown()

    def test_msft_through_adapter_identical_trace(self, zero_coupling):
        spec = zero_coupling
        local_result = run_msft(
            make_factory(spec)(), spec.mixture, spec.strategy_config("msft"),
            dynamics=spec.dynamics,
        )
        remote = connect_subprocess(adapter_cmd())
        remote.configure(spec.dynamics, spec.grid.step)
        remote.init(spec.mixture, spec.seed)
        try:
            remote_result = run_msft(
                remote, spec.mixture, spec.strategy_config("msft"),
                dynamics=spec.dynamics,
            )
        finally:
            remote.shutdown()
        assert remote_result.trace.to_jsonl() == local_result.trace.to_jsonl()
        assert remote_result.per_task_best == local_result.per_task_best


class TestCompareThroughAdapter:
    def test_report_tables_match_inprocess_within_tolerance(self, tmp_path):
        out_local = str(tmp_path / "inproc")
        out_remote = str(tmp_path / "adapter")
        args = ["compare", "--preset", "forgetting-on", "--strategies", "sft,msft"]
        assert main(args + ["--out", out_local]) == 0
        assert main(
            args + ["--out", out_remote, "--trainer",
                    f"subprocess:node {ADAPTER}"]
        ) == 0
        for rel in ("comparison.csv", "per_task.csv", "msft/trace.jsonl",
                    "msft/summary.json", "sft/curves.csv"):
            with open(os.path.join(out_local, rel)) as f:
                a = f.read()
            with open(os.path.join(out_remote, rel)) as f:
                b = f.read()
            assert a == b, rel  # identical bytes: well inside 1e-9 relative

        # explicit numeric check at the stated tolerance
        import json

        with open(os.path.join(out_local, "msft", "summary.json")) as f:
            la = json.load(f)
        with open(os.path.join(out_remote, "msft", "summary.json")) as f:
            lb = json.load(f)
        for ds, entry in la["metrics_at_best"].items():
            x, y = float(entry), float(lb["metrics_at_best"][ds])
            assert abs(x - y) <= 1e-9 * max(1.0, abs(x))
