"""Domain types shared by every module: mixtures, the evaluation grid,
measured curves, and the event-sourced run trace.

Compute positions are kept as exact `fractions.Fraction` values so grid
arithmetic never drifts; conversion to float happens only at the simulator
boundary and in reports.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Mapping, Sequence


class MixschedError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(MixschedError):
    """Invalid configuration or domain-type construction."""


class TraceError(MixschedError):
    """Malformed or inconsistent run trace."""


# ---------------------------------------------------------------------------
# exact number formatting
# ---------------------------------------------------------------------------

_EXP_RE = re.compile(r"e([+-])0*(\d)")


def canonical_float(x: float) -> str:
    """Shortest round-trip decimal for a double, stable across platforms.

    Integer-valued doubles render with a trailing ``.0`` and exponents are
    stripped of zero padding, which matches what a JavaScript ``String(x)``
    produces for the magnitudes this package emits (|x| < 1e15).
    """
    x = float(x)
    if x != x or x in (float("inf"), float("-inf")):
        raise ValueError("non-finite value has no canonical form")
    if abs(x) >= 1e15:
        raise ValueError("canonical_float only covers |x| < 1e15")
    if x == int(x) and "e" not in repr(x):
        return f"{int(x)}.0" if repr(x) != "-0.0" else "-0.0"
    s = repr(x)
    return _EXP_RE.sub(lambda m: "e" + m.group(1).replace("+", "") + m.group(2), s)


def frac_str(x: Fraction) -> str:
    """Serialize a Fraction as ``p`` or ``p/q`` in lowest terms."""
    return str(x)


def parse_frac(s: str | int | float | Fraction) -> Fraction:
    """Parse a fraction from ``p/q``, decimal, or numeric input, exactly."""
    if isinstance(s, Fraction):
        return s
    if isinstance(s, int):
        return Fraction(s)
    if isinstance(s, float):
        # floats only reach here from user config; treat them as the decimal
        # they print as, not the binary value they store
        return Fraction(repr(s))
    return Fraction(s.strip())


# ---------------------------------------------------------------------------
# mixture
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubDatasetSpec:
    """One task's corpus inside the multi-task mixture."""

    id: str
    name: str
    size: int
    weight: float = 1.0
    train_tokens_per_epoch: int = 0
    eval_tokens: int = 0

    def __post_init__(self):
        if self.size <= 0:
            raise ConfigError(f"sub-dataset {self.id!r}: size must be > 0")
        if self.weight <= 0:
            raise ConfigError(f"sub-dataset {self.id!r}: weight must be > 0")
        if self.train_tokens_per_epoch < 0 or self.eval_tokens < 0:
            raise ConfigError(f"sub-dataset {self.id!r}: token counts must be >= 0")


@dataclass(frozen=True)
class MixtureSpec:
    """Ordered collection of sub-datasets; order defines tie-breaking."""

    subs: tuple[SubDatasetSpec, ...]

    def __post_init__(self):
        if not self.subs:
            raise ConfigError("mixture needs at least one sub-dataset")
        ids = [s.id for s in self.subs]
        if len(set(ids)) != len(ids):
            raise ConfigError("sub-dataset ids must be distinct")
        object.__setattr__(self, "subs", tuple(self.subs))

    @property
    def n(self) -> int:
        return len(self.subs)

    def ids(self) -> list[str]:
        return [s.id for s in self.subs]

    def by_id(self, ds_id: str) -> SubDatasetSpec:
        for s in self.subs:
            if s.id == ds_id:
                return s
        raise KeyError(f"unknown sub-dataset {ds_id!r}")

    def index_of(self, ds_id: str) -> int:
        for i, s in enumerate(self.subs):
            if s.id == ds_id:
                return i
        raise KeyError(f"unknown sub-dataset {ds_id!r}")

    def total_size(self) -> int:
        return sum(s.size for s in self.subs)


# ---------------------------------------------------------------------------
# compute grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComputeGrid:
    """Evaluation grid: points Δ, 2Δ, …, C in fractional epochs."""

    budget: Fraction
    step: Fraction = Fraction(1, 4)

    def __init__(self, budget, step=Fraction(1, 4)):
        budget = parse_frac(budget)
        step = parse_frac(step)
        if budget <= 0 or step <= 0:
            raise ConfigError("budget and eval interval must be > 0")
        if budget % step != 0:
            raise ConfigError(
                f"budget {budget} is not an integer multiple of interval {step}"
            )
        object.__setattr__(self, "budget", budget)
        object.__setattr__(self, "step", step)

    @property
    def n_steps(self) -> int:
        return int(self.budget / self.step)

    def points(self) -> list[Fraction]:
        return [self.step * k for k in range(1, self.n_steps + 1)]

    def contains(self, c: Fraction) -> bool:
        return 0 < c <= self.budget and c % self.step == 0

    def on_grid(self, c: Fraction) -> bool:
        """True when c is a non-negative multiple of the interval."""
        return c >= 0 and c % self.step == 0


def grid_points(grid: ComputeGrid) -> list[Fraction]:
    """All evaluation points of the grid, in order."""
    return grid.points()


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalRecord:
    """A single measured point: task metric at a compute position.

    ``compute_c`` is cumulative trained epochs (never rewinds, so it keys the
    run's full history); ``position`` is the model's epoch coordinate, which
    rollbacks rewind.
    """

    dataset_id: str
    compute_c: Fraction
    metric: float
    position: Fraction

    def __post_init__(self):
        if not (self.metric == self.metric and abs(self.metric) != float("inf")):
            raise ConfigError("metric must be finite")


class CurveTable:
    """Measured metric surface, keyed (dataset, cumulative compute)."""

    def __init__(self, records: Iterable[EvalRecord] = ()):
        self._by_ds: dict[str, list[EvalRecord]] = {}
        for r in records:
            self.add(r)

    def add(self, rec: EvalRecord) -> None:
        # equal compute is allowed: a dataset excluded at a window's end is
        # re-validated at the rollback checkpoint before any further training,
        # which shares the cumulative coordinate; the later record wins lookups
        rows = self._by_ds.setdefault(rec.dataset_id, [])
        if rows and rec.compute_c < rows[-1].compute_c:
            raise TraceError(
                f"curve for {rec.dataset_id!r}: compute must not decrease "
                f"({rec.compute_c} after {rows[-1].compute_c})"
            )
        rows.append(rec)

    def datasets(self) -> list[str]:
        return sorted(self._by_ds)

    def records_for(self, ds_id: str) -> list[EvalRecord]:
        return list(self._by_ds.get(ds_id, ()))

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_ds.values())

    def __iter__(self) -> Iterator[EvalRecord]:
        for ds in sorted(self._by_ds):
            yield from self._by_ds[ds]

    def value_at(self, ds_id: str, cum: Fraction) -> float | None:
        """Last recorded value at or before ``cum`` (carry-forward)."""
        best = None
        for r in self._by_ds.get(ds_id, ()):
            if r.compute_c <= cum:
                best = r.metric
            else:
                break
        return best

    def mixture_average(self, ids: Sequence[str], cum: Fraction) -> float | None:
        """Carry-forward average over the given datasets at a cumulative point.

        Returns None until every dataset has at least one record.
        """
        vals = []
        for ds in ids:
            v = self.value_at(ds, cum)
            if v is None:
                return None
            vals.append(v)
        return sum(vals) / len(vals)


# ---------------------------------------------------------------------------
# trace events
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainStep:
    cum: Fraction
    position: Fraction
    active: tuple[str, ...]
    tokens: Fraction
    weights: tuple[tuple[str, Fraction], ...] = ()
    loss: float | None = None


@dataclass(frozen=True)
class Eval:
    dataset_id: str
    cum: Fraction
    position: Fraction
    metric: float
    tokens: int


@dataclass(frozen=True)
class Exclude:
    dataset_id: str
    at_c: Fraction
    cum: Fraction


@dataclass(frozen=True)
class Rollback:
    to_c: Fraction
    ckpt_id: str
    cum: Fraction


@dataclass(frozen=True)
class CkptSave:
    ckpt_id: str
    nbytes: int
    position: Fraction
    stage: int
    tags: tuple[str, ...]
    size_units: float = 1.0


@dataclass(frozen=True)
class CkptDelete:
    ckpt_id: str


@dataclass(frozen=True)
class CkptRetag:
    ckpt_id: str
    tags: tuple[str, ...]


@dataclass(frozen=True)
class StageMark:
    index: int
    active: tuple[str, ...]
    label: str = ""


TraceEvent = (
    TrainStep | Eval | Exclude | Rollback | CkptSave | CkptDelete | CkptRetag | StageMark
)

_EVENT_TAGS = {
    TrainStep: "train",
    Eval: "eval",
    Exclude: "exclude",
    Rollback: "rollback",
    CkptSave: "ckpt_save",
    CkptDelete: "ckpt_delete",
    CkptRetag: "ckpt_retag",
    StageMark: "stage",
}


@dataclass
class RunTrace:
    """Ordered event log of one strategy run plus its metadata."""

    strategy: str
    seed: int
    grid: ComputeGrid
    theta: int
    preset: str = ""
    events: list[TraceEvent] = field(default_factory=list)
    complete: bool = True

    def append(self, ev: TraceEvent) -> None:
        self.events.append(ev)

    # -- serialization ------------------------------------------------------

    def to_jsonl(self) -> str:
        lines = [
            _dump_obj(
                {
                    "ev": "run",
                    "strategy": self.strategy,
                    "seed": self.seed,
                    "budget": frac_str(self.grid.budget),
                    "grid_step": frac_str(self.grid.step),
                    "theta": self.theta,
                    "preset": self.preset,
                    "complete": self.complete,
                }
            )
        ]
        lines.extend(_dump_obj(_event_to_obj(ev)) for ev in self.events)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "RunTrace":
        lines = [ln for ln in text.split("\n") if ln.strip()]
        if not lines:
            raise TraceError("empty trace")
        head = json.loads(lines[0])
        if head.get("ev") != "run":
            raise TraceError("trace must start with a run header line")
        trace = cls(
            strategy=head["strategy"],
            seed=int(head["seed"]),
            grid=ComputeGrid(head["budget"], head["grid_step"]),
            theta=int(head["theta"]),
            preset=head.get("preset", ""),
            complete=bool(head.get("complete", True)),
        )
        for ln in lines[1:]:
            trace.events.append(_event_from_obj(json.loads(ln)))
        return trace

    # -- replay -------------------------------------------------------------

    def replay(self) -> "ReplayState":
        """Fold over events, rebuilding active set, exclusions, and the
        checkpoint inventory as they stood after each event."""
        state = ReplayState()
        for ev in self.events:
            state.apply(ev)
        return state


class ReplayState:
    """Accumulator for RunTrace.replay; also usable incrementally."""

    def __init__(self):
        self.active: list[str] = []
        self.excluded: list[tuple[str, Fraction]] = []
        self.live_ckpts: dict[str, tuple[str, ...]] = {}
        self.stage: int = 0
        self.position: Fraction = Fraction(0)
        self.cum: Fraction = Fraction(0)
        self.saved_ever: set[str] = set()

    def apply(self, ev: TraceEvent) -> None:
        if isinstance(ev, StageMark):
            self.stage = ev.index
            self.active = list(ev.active)
        elif isinstance(ev, TrainStep):
            self.cum = ev.cum
            self.position = ev.position
        elif isinstance(ev, Eval):
            pass
        elif isinstance(ev, Exclude):
            if ev.dataset_id not in self.active:
                raise TraceError(
                    f"exclude of {ev.dataset_id!r} which is not active"
                )
            self.active.remove(ev.dataset_id)
            self.excluded.append((ev.dataset_id, ev.at_c))
        elif isinstance(ev, Rollback):
            if ev.ckpt_id not in self.live_ckpts:
                raise TraceError(
                    f"rollback targets {ev.ckpt_id!r} which is not live"
                )
            self.position = ev.to_c
        elif isinstance(ev, CkptSave):
            self.live_ckpts[ev.ckpt_id] = ev.tags
            self.saved_ever.add(ev.ckpt_id)
        elif isinstance(ev, CkptDelete):
            if ev.ckpt_id not in self.live_ckpts:
                raise TraceError(f"delete of unknown checkpoint {ev.ckpt_id!r}")
            del self.live_ckpts[ev.ckpt_id]
        elif isinstance(ev, CkptRetag):
            if ev.ckpt_id not in self.live_ckpts:
                raise TraceError(f"retag of unknown checkpoint {ev.ckpt_id!r}")
            self.live_ckpts[ev.ckpt_id] = ev.tags
        else:  # pragma: no cover
            raise TraceError(f"unknown event {ev!r}")


def _dump_obj(obj: Mapping) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _event_to_obj(ev: TraceEvent) -> dict:
    tag = _EVENT_TAGS[type(ev)]
    if isinstance(ev, TrainStep):
        obj = {
            "ev": tag,
            "cum": frac_str(ev.cum),
            "pos": frac_str(ev.position),
            "active": list(ev.active),
            "tokens": frac_str(ev.tokens),
        }
        if ev.weights:
            obj["weights"] = {k: frac_str(v) for k, v in ev.weights}
        if ev.loss is not None:
            obj["loss"] = canonical_float(ev.loss)
        return obj
    if isinstance(ev, Eval):
        return {
            "ev": tag,
            "ds": ev.dataset_id,
            "cum": frac_str(ev.cum),
            "pos": frac_str(ev.position),
            "metric": canonical_float(ev.metric),
            "tokens": ev.tokens,
        }
    if isinstance(ev, Exclude):
        return {
            "ev": tag,
            "ds": ev.dataset_id,
            "at": frac_str(ev.at_c),
            "cum": frac_str(ev.cum),
        }
    if isinstance(ev, Rollback):
        return {
            "ev": tag,
            "to": frac_str(ev.to_c),
            "ckpt": ev.ckpt_id,
            "cum": frac_str(ev.cum),
        }
    if isinstance(ev, CkptSave):
        return {
            "ev": tag,
            "id": ev.ckpt_id,
            "bytes": ev.nbytes,
            "pos": frac_str(ev.position),
            "stage": ev.stage,
            "tags": list(ev.tags),
            "size_units": canonical_float(ev.size_units),
        }
    if isinstance(ev, CkptDelete):
        return {"ev": tag, "id": ev.ckpt_id}
    if isinstance(ev, CkptRetag):
        return {"ev": tag, "id": ev.ckpt_id, "tags": list(ev.tags)}
    if isinstance(ev, StageMark):
        obj = {"ev": tag, "index": ev.index, "active": list(ev.active)}
        if ev.label:
            obj["label"] = ev.label
        return obj
    raise TraceError(f"cannot serialize {ev!r}")  # pragma: no cover


def _event_from_obj(obj: Mapping) -> TraceEvent:
    tag = obj.get("ev")
    if tag == "train":
        return TrainStep(
            cum=parse_frac(obj["cum"]),
            position=parse_frac(obj["pos"]),
            active=tuple(obj["active"]),
            tokens=parse_frac(obj["tokens"]),
            weights=tuple(
                (k, parse_frac(v)) for k, v in obj.get("weights", {}).items()
            ),
            loss=float(obj["loss"]) if "loss" in obj else None,
        )
    if tag == "eval":
        return Eval(
            dataset_id=obj["ds"],
            cum=parse_frac(obj["cum"]),
            position=parse_frac(obj["pos"]),
            metric=float(obj["metric"]),
            tokens=int(obj["tokens"]),
        )
    if tag == "exclude":
        return Exclude(
            dataset_id=obj["ds"], at_c=parse_frac(obj["at"]), cum=parse_frac(obj["cum"])
        )
    if tag == "rollback":
        return Rollback(
            to_c=parse_frac(obj["to"]), ckpt_id=obj["ckpt"], cum=parse_frac(obj["cum"])
        )
    if tag == "ckpt_save":
        return CkptSave(
            ckpt_id=obj["id"],
            nbytes=int(obj["bytes"]),
            position=parse_frac(obj["pos"]),
            stage=int(obj["stage"]),
            tags=tuple(obj["tags"]),
            size_units=float(obj["size_units"]),
        )
    if tag == "ckpt_delete":
        return CkptDelete(ckpt_id=obj["id"])
    if tag == "ckpt_retag":
        return CkptRetag(ckpt_id=obj["id"], tags=tuple(obj["tags"]))
    if tag == "stage":
        return StageMark(
            index=int(obj["index"]),
            active=tuple(obj["active"]),
            label=obj.get("label", ""),
        )
    raise TraceError(f"unknown event tag {tag!r}")


# ---------------------------------------------------------------------------
# run result
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    """Outcome of one strategy run."""

    strategy: str
    final_checkpoint_id: str
    global_best_checkpoint_id: str
    global_best_metric: float
    epochs_at_best: Fraction
    per_task_best: dict[str, tuple[Fraction, float]]
    metrics_at_best: dict[str, float]
    curve: CurveTable
    trace: RunTrace
    exclusions: list[tuple[str, Fraction]] = field(default_factory=list)
    exclusion_metrics: dict[str, float] = field(default_factory=dict)
    searched_peaks: dict[str, Fraction] = field(default_factory=dict)
    resampled_mixture: "MixtureSpec | None" = None
    soft_weights: dict[str, Fraction] = field(default_factory=dict)

    def summary_obj(self) -> dict:
        return {
            "strategy": self.strategy,
            "final_checkpoint": self.final_checkpoint_id,
            "global_best_checkpoint": self.global_best_checkpoint_id,
            "global_best_metric": canonical_float(self.global_best_metric),
            "epochs_at_best": frac_str(self.epochs_at_best),
            "per_task_best": {
                ds: {"c_star": frac_str(c), "metric": canonical_float(m)}
                for ds, (c, m) in sorted(self.per_task_best.items())
            },
            "metrics_at_best": {
                ds: canonical_float(m) for ds, m in sorted(self.metrics_at_best.items())
            },
            "exclusions": [
                {"ds": ds, "at": frac_str(c)} for ds, c in self.exclusions
            ],
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary_obj(), sort_keys=True, indent=2) + "\n"
