"""Trainer-session abstraction and its in-process simulator implementation.

A session owns opaque model state; strategies drive it through init /
train_delta / evaluate / save_state / load_state.  The simulator session
keeps, per task: effective compute (epochs the task was actually trained),
the accumulated peak shift from exclusions that happened while it was
active, and the position it was last trained at (staleness drives the
forgetting drift).  Snapshots serialize this state to canonical JSON bytes;
persistence and pruning of the blobs belong to the checkpoint store.
"""

from __future__ import annotations

import base64
import json
from fractions import Fraction

from .core import MixschedError, MixtureSpec, frac_str, parse_frac
from .dynamics import DynamicsConfig, curve_value


class TrainerError(MixschedError):
    """Contract violation or failure inside a trainer session."""


class SimulatorSession:
    """In-process TrainerSession backed by the synthetic dynamics model."""

    def __init__(self, dynamics: DynamicsConfig, grid_step=Fraction(1, 4)):
        self._dyn = dynamics
        self._step = parse_frac(grid_step)
        self._mixture: MixtureSpec | None = None
        self._seed = 0
        self._position = Fraction(0)
        self._effective: dict[str, Fraction] = {}
        self._trained: dict[str, Fraction] = {}
        self._strain: dict[str, Fraction] = {}
        self._shift: dict[str, Fraction] = {}
        self._last_active: dict[str, Fraction] = {}
        self._exclusions: list[tuple[str, Fraction]] = []

    # -- lifecycle ----------------------------------------------------------

    @property
    def initialized(self) -> bool:
        return self._mixture is not None

    def init(self, mixture: MixtureSpec, seed: int) -> None:
        if self._mixture is not None:
            raise TrainerError("already initialized")
        for ds in mixture.ids():
            self._dyn.params_for(ds)  # fail fast on mixture/config mismatch
        self._mixture = mixture
        self._seed = seed
        self._position = Fraction(0)
        self._effective = {ds: Fraction(0) for ds in mixture.ids()}
        self._trained = {ds: Fraction(0) for ds in mixture.ids()}
        self._strain = {ds: Fraction(0) for ds in mixture.ids()}
        self._shift = {ds: Fraction(0) for ds in mixture.ids()}
        self._last_active = {ds: Fraction(0) for ds in mixture.ids()}
        self._exclusions = []

    def _require_init(self) -> MixtureSpec:
        if self._mixture is None:
            raise TrainerError("session not initialized")
        return self._mixture

    @property
    def position(self) -> Fraction:
        return self._position

    def effective_compute(self, ds_id: str) -> Fraction:
        self._require_init()
        if ds_id not in self._effective:
            raise TrainerError(f"unknown dataset {ds_id!r}")
        return self._effective[ds_id]

    @property
    def exclusions(self) -> list[tuple[str, Fraction]]:
        return list(self._exclusions)

    # -- operations ---------------------------------------------------------

    def train_delta(
        self,
        active: list[str],
        weights: dict[str, Fraction] | None,
        delta_c: Fraction,
    ) -> None:
        mixture = self._require_init()
        delta_c = parse_frac(delta_c)
        if not active:
            raise TrainerError("active set must not be empty")
        known = set(mixture.ids())
        for ds in active:
            if ds not in known:
                raise TrainerError(f"unknown dataset {ds!r}")
        if delta_c <= 0 or delta_c % self._step != 0:
            raise TrainerError(
                f"delta_c {delta_c} is not a positive multiple of the grid step {self._step}"
            )
        weights = weights or {}
        alpha = Fraction(repr(self._dyn.upweight_efficiency))
        self._position += delta_c
        for ds in active:
            w = parse_frac(weights.get(ds, 1))
            if w <= 0:
                raise TrainerError(f"weight for {ds!r} must be > 0")
            # upweighting past 1x yields diminishing returns (sample repetition)
            gain = w if w <= 1 else 1 + alpha * (w - 1)
            self._effective[ds] += gain * delta_c
            self._trained[ds] += delta_c
            self._strain[ds] += abs(w - 1) * delta_c
            self._last_active[ds] = self._position

    def mark_excluded(self, ds_id: str) -> None:
        """Record an exclusion: freeze the dataset and shift remaining peaks."""
        mixture = self._require_init()
        if ds_id not in self._effective:
            raise TrainerError(f"unknown dataset {ds_id!r}")
        if any(d == ds_id for d, _ in self._exclusions):
            raise TrainerError(f"{ds_id!r} already excluded")
        self._exclusions.append((ds_id, self._position))
        for other in mixture.ids():
            if other == ds_id or any(d == other for d, _ in self._exclusions):
                continue
            self._shift[other] += self._dyn.coupling.get(ds_id, other)

    def evaluate(self, ds_id: str) -> float:
        self._require_init()
        if ds_id not in self._effective:
            raise TrainerError(f"unknown dataset {ds_id!r}")
        e = self._effective[ds_id]
        p = self._dyn.params_for(ds_id)
        penalty = 0.0
        if self._dyn.weight_strain_penalty != 0.0 and self._trained[ds_id] > 0:
            dev = float(self._strain[ds_id] / self._trained[ds_id])
            penalty = self._dyn.weight_strain_penalty * dev
        v = curve_value(p, float(e), float(self._shift[ds_id]), penalty)
        stale = self._position - self._last_active[ds_id]
        if self._dyn.drift_slope != 0.0 and stale > 0 and e > 0:
            v = v + self._dyn.drift_slope * float(stale)
        if v < 0.0:
            return 0.0
        if v > 1.0:
            return 1.0
        return v

    def train_loss(self) -> float:
        """Mixture train loss at the current position (simulator channel)."""
        self._require_init()
        lp = self._dyn.loss
        c = float(self._position)
        v = lp.floor + (lp.initial - lp.floor) / (1.0 + lp.rate * c)
        drop = 0.0
        for _ds, at in self._exclusions:
            if at <= self._position:
                drop += lp.exclusion_drop
        return v - drop

    # -- snapshots ----------------------------------------------------------

    def save_state(self) -> bytes:
        """Serialize the full session state to canonical JSON bytes."""
        mixture = self._require_init()
        obj = {
            "v": 1,
            "seed": self._seed,
            "position": frac_str(self._position),
            "tasks": {
                ds: {
                    "effective": frac_str(self._effective[ds]),
                    "trained": frac_str(self._trained[ds]),
                    "strain": frac_str(self._strain[ds]),
                    "shift": frac_str(self._shift[ds]),
                    "last_active": frac_str(self._last_active[ds]),
                }
                for ds in mixture.ids()
            },
            "exclusions": [[ds, frac_str(at)] for ds, at in self._exclusions],
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()

    def load_state(self, blob: bytes) -> None:
        mixture = self._require_init()
        try:
            obj = json.loads(blob.decode())
        except (ValueError, UnicodeDecodeError) as exc:
            raise TrainerError(f"corrupt session snapshot: {exc}") from exc
        if obj.get("v") != 1 or set(obj.get("tasks", {})) != set(mixture.ids()):
            raise TrainerError("snapshot does not match this session's mixture")
        self._position = parse_frac(obj["position"])
        for ds, st in obj["tasks"].items():
            self._effective[ds] = parse_frac(st["effective"])
            self._trained[ds] = parse_frac(st["trained"])
            self._strain[ds] = parse_frac(st["strain"])
            self._shift[ds] = parse_frac(st["shift"])
            self._last_active[ds] = parse_frac(st["last_active"])
        self._exclusions = [(ds, parse_frac(at)) for ds, at in obj["exclusions"]]

    def shutdown(self) -> None:
        pass


def blob_b64(blob: bytes) -> str:
    return base64.b64encode(blob).decode("ascii")


def blob_from_b64(s: str) -> bytes:
    return base64.b64decode(s.encode("ascii"))
