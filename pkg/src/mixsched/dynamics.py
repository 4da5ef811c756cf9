"""Deterministic synthetic learning dynamics.

Each task follows a unimodal accuracy curve over its own effective compute,
with a rational bump shape::

    rise  (e <  p):  g(e) = (raw(e) - raw(0)) / (1 - raw(0)),  raw(e) = 1 / (1 + (e-p)^2 * rise)
    decay (e >= p):  g(e) = 1 / (1 + (e-p)^2 * decay)
    metric(e) = base + (peak - base) * g(e)

The rising flank is offset-normalized so metric(0) == base exactly.  The
form uses only +,-,*,/ so every IEEE-754 implementation produces bitwise
identical values — required for byte-exact transcripts from the external
trainer adapter and for byte-identical reports across platforms.

Excluding a dataset shifts the remaining tasks' peak locations additively
(the coupling rule); a frozen task's metric optionally drifts linearly per
epoch trained after it went inactive (forgetting < 0, transfer > 0).
"""

from __future__ import annotations

import configparser
import io
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from .core import ConfigError, MixtureSpec, canonical_float, frac_str, parse_frac


@dataclass(frozen=True)
class TaskCurveParams:
    base_metric: float
    peak_metric: float
    peak_location: float
    rise_rate: float
    decay_rate: float

    def __post_init__(self):
        if not 0 <= self.base_metric < 1:
            raise ConfigError("base_metric must be in [0, 1)")
        if not self.base_metric < self.peak_metric <= 1:
            raise ConfigError("peak_metric must be in (base, 1]")
        if self.peak_location <= 0:
            raise ConfigError("peak_location must be > 0")
        if self.rise_rate <= 0:
            raise ConfigError("rise_rate must be > 0")
        if self.decay_rate < 0:
            raise ConfigError("decay_rate must be >= 0")


@dataclass(frozen=True)
class CouplingRule:
    """Additive peak shifts applied when a dataset leaves the active set.

    ``shift[(excluded, remaining)]`` moves the remaining task's peak by that
    many epochs; absent pairs shift by zero.  Shifts are exact fractions
    (grid multiples in the shipped presets).
    """

    shift: Mapping[tuple[str, str], Fraction] = field(default_factory=dict)

    def get(self, excluded: str, remaining: str) -> Fraction:
        return self.shift.get((excluded, remaining), Fraction(0))


@dataclass(frozen=True)
class LossParams:
    initial: float = 2.4
    floor: float = 0.8
    rate: float = 0.6
    exclusion_drop: float = 0.0

    def __post_init__(self):
        if self.initial < self.floor:
            raise ConfigError("initial loss must be >= floor")
        if self.rate < 0 or self.exclusion_drop < 0:
            raise ConfigError("loss rate and exclusion_drop must be >= 0")


@dataclass(frozen=True)
class DynamicsConfig:
    tasks: Mapping[str, TaskCurveParams]
    coupling: CouplingRule = field(default_factory=CouplingRule)
    seed: int = 20
    drift_slope: float = 0.0
    upweight_efficiency: float = 0.5
    weight_strain_penalty: float = 0.0
    loss: LossParams = field(default_factory=LossParams)

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("dynamics config needs at least one task")
        if not 0 <= self.upweight_efficiency <= 1:
            raise ConfigError("upweight_efficiency must be in [0, 1]")
        if not 0 <= self.weight_strain_penalty <= 1:
            raise ConfigError("weight_strain_penalty must be in [0, 1]")

    def params_for(self, task: str) -> TaskCurveParams:
        try:
            return self.tasks[task]
        except KeyError:
            raise ConfigError(
                f"task {task!r} has no curve parameters: mixture/config mismatch"
            ) from None


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def curve_value(
    p: TaskCurveParams,
    effective: float,
    peak_shift: float = 0.0,
    strain_penalty: float = 0.0,
) -> float:
    """Metric of one task at the given effective compute.

    ``peak_shift`` moves the peak location; ``strain_penalty`` (in [0, 1))
    scales down the learned increment, modelling quality lost to sustained
    non-unit sampling weights.
    """
    if effective < 0:
        raise ConfigError("effective compute must be >= 0")
    pk = p.peak_location + peak_shift
    d = effective - pk
    if effective < pk:
        raw = 1.0 / (1.0 + d * d * p.rise_rate)
        raw0 = 1.0 / (1.0 + pk * pk * p.rise_rate)
        g = (raw - raw0) / (1.0 - raw0)
    else:
        g = 1.0 / (1.0 + d * d * p.decay_rate)
    # interpolation form keeps both endpoints exact: g=0 gives base, g=1
    # with no strain gives peak, bit for bit
    scale = (1.0 - strain_penalty) * g
    return p.base_metric * (1.0 - scale) + p.peak_metric * scale


def metric_at(
    config: DynamicsConfig,
    task: str,
    effective_compute: Fraction | float,
    exclusion_history: Sequence[tuple[str, Fraction]] = (),
    *,
    stale_epochs: Fraction | float = 0,
    weight_deviation: float = 0.0,
) -> float:
    """Metric of ``task`` given its effective compute and the exclusions that
    happened while it was active.

    ``stale_epochs`` is how many epochs of training other tasks received
    after this one went inactive (drives the drift channel; zero for active
    tasks).  ``weight_deviation`` is the task's average |w - 1| over its
    training so far; scaled by the configured strain penalty it reduces the
    achievable learned increment.
    """
    p = config.params_for(task)
    shift = Fraction(0)
    for excluded, _at in exclusion_history:
        if excluded != task:
            shift += config.coupling.get(excluded, task)
    e = float(effective_compute)
    v = curve_value(
        p, e, float(shift), config.weight_strain_penalty * weight_deviation
    )
    stale = float(stale_epochs)
    if config.drift_slope != 0.0 and stale > 0 and e > 0:
        v = v + config.drift_slope * stale
    if v < 0.0:
        return 0.0
    if v > 1.0:
        return 1.0
    return v


def loss_at(
    config: DynamicsConfig,
    active_set: Sequence[str],
    effective_compute: Fraction | float,
    exclusion_history: Sequence[tuple[str, Fraction]] = (),
) -> float:
    """Mixture train loss at a compute position.

    Monotone non-increasing for a fixed active set; each exclusion that
    happened at or before the position subtracts the configured step drop.
    The active set size only matters through the exclusion history in this
    model; the argument is kept for interface stability.
    """
    del active_set
    c = float(effective_compute)
    if c < 0:
        raise ConfigError("effective compute must be >= 0")
    lp = config.loss
    v = lp.floor + (lp.initial - lp.floor) / (1.0 + lp.rate * c)
    drop = 0.0
    for _ds, at in exclusion_history:
        if float(at) <= c:
            drop += lp.exclusion_drop
    return v - drop


# ---------------------------------------------------------------------------
# seeded generation
# ---------------------------------------------------------------------------


def _snap(x: float, step: Fraction) -> Fraction:
    return step * round(Fraction(repr(x)) / step)


def calibrated_shift_row(
    target: Fraction, others: Sequence[str], step: Fraction
) -> list[Fraction]:
    """Shift magnitudes for one excluder row whose sample mean-abs equals the
    grid-rounded target as closely as the grid allows.

    Start each magnitude at the largest grid multiple <= target, then add one
    grid step to as many entries as needed to bring the row total to the
    grid-rounded value of target * len(others).
    """
    m = len(others)
    if m == 0:
        return []
    total = step * round(target * m / step)
    base = step * (target // step)
    mags = [base] * m
    remainder = int((total - base * m) / step)
    for i in range(remainder):
        mags[i % m] += step
    return mags


_ROW_PROFILE = [2.6, 0.5, 2.2, 0.45, 0.6, 1.9, 0.4, 0.55, 0.65, 0.5, 2.0, 0.45]


def heterogeneous_shift_row(
    target: Fraction, others: Sequence[str], step: Fraction
) -> list[Fraction]:
    """Like calibrated_shift_row but with widely varying magnitudes: a few
    tasks shift far, most barely, with the sample mean-abs pinned to the
    grid-rounded target (matching the skewed per-task pattern the
    bifurcation experiment exhibits)."""
    m = len(others)
    if m == 0:
        return []
    profile = [_ROW_PROFILE[i % len(_ROW_PROFILE)] for i in range(m)]
    scale = target * m / parse_frac(repr(sum(profile)))
    mags = [step * (parse_frac(repr(p)) * scale // step) for p in profile]
    total = step * round(target * m / step)
    leftover = int((total - sum(mags)) / step)
    order = sorted(range(m), key=lambda i: profile[i], reverse=True)
    for i in range(leftover):
        mags[order[i % m]] += step
    return mags


def sample_dynamics(
    seed: int,
    mixture: MixtureSpec,
    spread: tuple[Fraction | float | str, Fraction | float | str],
    *,
    grid_step: Fraction | float | str = Fraction(1, 4),
    coupling_target: Fraction | float | str = 0,
    max_compute: Fraction | float | str = 10,
    drift_slope: float = 0.0,
    upweight_efficiency: float = 0.5,
    weight_strain_penalty: float = 0.0,
    loss: LossParams | None = None,
) -> DynamicsConfig:
    """Draw a full dynamics config deterministically from ``seed``.

    Peak locations are distinct grid points inside ``spread``.  With a
    nonzero ``coupling_target`` every excluder row gets shift magnitudes
    whose sample mean-abs matches the target (grid-snapped), signs guarded
    so a shifted peak stays measurable between the excluder's peak and
    ``max_compute``.
    """
    step = parse_frac(grid_step)
    lo, hi = parse_frac(spread[0]), parse_frac(spread[1])
    cap = parse_frac(max_compute)
    if lo < step:
        raise ConfigError("spread minimum must be at least one grid step")
    if hi <= 0 or hi > cap or lo > hi:
        raise ConfigError(f"spread must lie inside (0, {cap}]")
    target = parse_frac(coupling_target)

    rng = random.Random(seed)
    candidates = []
    c = step * (-(-lo // step))  # ceil to grid
    while c <= hi:
        candidates.append(c)
        c += step
    if len(candidates) < mixture.n:
        raise ConfigError(
            f"spread [{lo}, {hi}] holds only {len(candidates)} grid points "
            f"for {mixture.n} distinct peaks"
        )
    peaks = sorted(rng.sample(candidates, mixture.n))
    order = list(range(mixture.n))
    rng.shuffle(order)

    tasks = {}
    ids = mixture.ids()
    for idx, ds in enumerate(ids):
        base = round(rng.uniform(0.20, 0.40), 4)
        peak = round(rng.uniform(0.62, 0.92), 4)
        rise = round(rng.uniform(0.6, 2.4), 4)
        decay = round(rng.uniform(0.4, 1.6), 4)
        tasks[ds] = TaskCurveParams(
            base_metric=base,
            peak_metric=peak,
            peak_location=float(peaks[order[idx]]),
            rise_rate=rise,
            decay_rate=decay,
        )

    shift: dict[tuple[str, str], Fraction] = {}
    if target != 0:
        peak_of = {ds: peaks[order[i]] for i, ds in enumerate(ids)}
        for k in ids:
            others = [j for j in ids if j != k]
            mags = calibrated_shift_row(target, others, step)
            pairs = list(zip(others, mags))
            rng.shuffle(pairs)
            for j, mag in pairs:
                if mag == 0:
                    continue
                p_j, p_k = peak_of[j], peak_of[k]
                can_neg = p_j - mag >= p_k + 2 * step
                can_pos = p_j + mag <= cap - step
                if can_neg and (not can_pos or rng.random() < 0.34):
                    shift[(k, j)] = -mag
                elif can_pos:
                    shift[(k, j)] = mag
                elif can_neg:
                    shift[(k, j)] = -mag
                # neither direction is measurable: leave the pair unshifted

    return DynamicsConfig(
        tasks=tasks,
        coupling=CouplingRule(shift),
        seed=seed,
        drift_slope=drift_slope,
        upweight_efficiency=upweight_efficiency,
        weight_strain_penalty=weight_strain_penalty,
        loss=loss or LossParams(),
    )


# ---------------------------------------------------------------------------
# plain-text config I/O
# ---------------------------------------------------------------------------


def dumps_config(config: DynamicsConfig) -> str:
    """Write a dynamics config in the documented INI format."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["dynamics"] = {
        "seed": str(config.seed),
        "drift_slope": canonical_float(config.drift_slope),
        "upweight_efficiency": canonical_float(config.upweight_efficiency),
        "weight_strain_penalty": canonical_float(config.weight_strain_penalty),
    }
    cp["loss"] = {
        "initial": canonical_float(config.loss.initial),
        "floor": canonical_float(config.loss.floor),
        "rate": canonical_float(config.loss.rate),
        "exclusion_drop": canonical_float(config.loss.exclusion_drop),
    }
    for ds in sorted(config.tasks):
        p = config.tasks[ds]
        cp[f"task:{ds}"] = {
            "base": canonical_float(p.base_metric),
            "peak": canonical_float(p.peak_metric),
            "peak_location": canonical_float(p.peak_location),
            "rise_rate": canonical_float(p.rise_rate),
            "decay_rate": canonical_float(p.decay_rate),
        }
    if config.coupling.shift:
        cp["coupling"] = {
            f"{k}->{j}": frac_str(v)
            for (k, j), v in sorted(config.coupling.shift.items())
        }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def loads_config(text: str) -> DynamicsConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string(text)
    if "dynamics" not in cp:
        raise ConfigError("dynamics config needs a [dynamics] section")
    dyn = cp["dynamics"]
    tasks = {}
    for section in cp.sections():
        if not section.startswith("task:"):
            continue
        ds = section[len("task:"):]
        s = cp[section]
        tasks[ds] = TaskCurveParams(
            base_metric=float(s["base"]),
            peak_metric=float(s["peak"]),
            peak_location=float(s["peak_location"]),
            rise_rate=float(s["rise_rate"]),
            decay_rate=float(s["decay_rate"]),
        )
    shift: dict[tuple[str, str], Fraction] = {}
    if "coupling" in cp:
        for key, val in cp["coupling"].items():
            if "->" not in key:
                raise ConfigError(f"bad coupling key {key!r}, expected 'k->j'")
            k, j = key.split("->", 1)
            shift[(k.strip(), j.strip())] = parse_frac(val)
    loss = LossParams()
    if "loss" in cp:
        s = cp["loss"]
        loss = LossParams(
            initial=float(s.get("initial", "2.4")),
            floor=float(s.get("floor", "0.8")),
            rate=float(s.get("rate", "0.6")),
            exclusion_drop=float(s.get("exclusion_drop", "0.0")),
        )
    return DynamicsConfig(
        tasks=tasks,
        coupling=CouplingRule(shift),
        seed=int(dyn.get("seed", "20")),
        drift_slope=float(dyn.get("drift_slope", "0.0")),
        upweight_efficiency=float(dyn.get("upweight_efficiency", "0.5")),
        weight_strain_penalty=float(dyn.get("weight_strain_penalty", "0.0")),
        loss=loss,
    )
