"""Compute-cost ledgers.

Training costs 6·|θ| FLOPs per token, inference 2·|θ|.  Seven methods get
closed-form ledgers; an independent oracle derives the same totals by
folding a run trace.  Token tallies are exact integers or rationals all
the way through, so ledger-vs-trace comparisons are exact equality;
floating conversion happens only at report time (PFLOPs).

A separate calculator covers whole-pipeline stages (pre-training through
preference tuning and verifier-reward RL) and their proportions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from .core import (
    ComputeGrid,
    Eval,
    MixschedError,
    MixtureSpec,
    RunTrace,
    TrainStep,
    parse_frac,
)

PFLOP = 10**15

TRAIN_COEF = 6
INFER_COEF = 2
LOOKAHEAD_COEF = 8  # 2 forward pre-loss + 4 backward + 2 forward post-loss


class FlopsError(MixschedError):
    """Missing or inconsistent ledger inputs."""


def flops_train(theta: int, tokens: int | Fraction) -> Fraction:
    if theta <= 0:
        raise FlopsError("theta must be > 0")
    tokens = parse_frac(tokens)
    if tokens < 0:
        raise FlopsError("token count must be >= 0")
    return TRAIN_COEF * theta * tokens


def flops_infer(theta: int, tokens: int | Fraction) -> Fraction:
    if theta <= 0:
        raise FlopsError("theta must be > 0")
    tokens = parse_frac(tokens)
    if tokens < 0:
        raise FlopsError("token count must be >= 0")
    return INFER_COEF * theta * tokens


# ---------------------------------------------------------------------------
# method ledgers
# ---------------------------------------------------------------------------

METHODS = ("sft", "continual", "dynamix", "ies", "sro", "soft-sro", "msft")


@dataclass
class FlopsInputs:
    """Inputs for the closed-form ledgers.

    ``t_train`` and ``t_validation`` are tokens per one epoch over the full
    mixture; validation counts every grid evaluation inside the epoch.
    Method-specific extras stay None until needed; ``ledger_method`` names
    the missing field when a method requires one.
    """

    theta: int
    t_train: int | Fraction = 0
    t_validation: int | Fraction = 0
    budget: Fraction = Fraction(0)
    # continual
    per_task_train: Mapping[str, int] | None = None
    # dynamix
    n_tasks: int | None = None
    lookahead_batch: int | None = None
    t_avg: int | None = None
    n_update_steps: int | None = None
    # ies / sro step 2: training tokens consumed per grid step
    per_step_train: Sequence[Fraction] | None = None
    # sro family
    search_budget: Fraction | None = None
    # soft sro: resampled per-epoch training tokens
    t_train_resampled: int | Fraction | None = None
    # msft: per stage (active train tokens/epoch, active val tokens/epoch,
    # excluded val tokens evaluated once)
    stages: Sequence[tuple[int | Fraction, int | Fraction, int | Fraction]] | None = None

    def __post_init__(self):
        self.budget = parse_frac(self.budget)


@dataclass
class FlopsReport:
    method: str
    theta: int
    components: dict[str, Fraction] = field(default_factory=dict)

    @property
    def total(self) -> Fraction:
        return sum(self.components.values(), Fraction(0))

    def total_pflops(self) -> float:
        return float(self.total / PFLOP)

    def as_obj(self) -> dict:
        return {
            "method": self.method,
            "theta": self.theta,
            "components_pflops": {
                k: float(v / PFLOP) for k, v in sorted(self.components.items())
            },
            "total_pflops": self.total_pflops(),
        }


def _need(inputs: FlopsInputs, name: str):
    v = getattr(inputs, name)
    if v is None:
        raise FlopsError(f"method requires input field {name!r}")
    return v


def ledger_method(method: str, inputs: FlopsInputs) -> FlopsReport:
    """Closed-form compute ledger for one method."""
    theta = inputs.theta
    if theta <= 0:
        raise FlopsError("theta must be > 0")
    rep = FlopsReport(method=method, theta=theta)
    c = inputs.budget

    if method == "sft":
        rep.components["train"] = flops_train(theta, c * parse_frac(inputs.t_train))
        rep.components["validation"] = flops_infer(
            theta, c * parse_frac(inputs.t_validation)
        )
    elif method == "continual":
        per_task = _need(inputs, "per_task_train")
        rep.components["train"] = sum(
            (flops_train(theta, c * parse_frac(t)) for t in per_task.values()),
            Fraction(0),
        )
        rep.components["validation"] = flops_infer(
            theta, c * len(per_task) * parse_frac(inputs.t_validation)
        )
    elif method == "dynamix":
        n = _need(inputs, "n_tasks")
        b = _need(inputs, "lookahead_batch")
        t_avg = _need(inputs, "t_avg")
        updates = _need(inputs, "n_update_steps")
        rep.components["train"] = flops_train(theta, c * parse_frac(inputs.t_train))
        rep.components["lookahead"] = (
            Fraction(updates) * n * LOOKAHEAD_COEF * theta * b * t_avg
        )
        rep.components["validation"] = flops_infer(
            theta, c * parse_frac(inputs.t_validation)
        )
    elif method == "ies":
        steps = _need(inputs, "per_step_train")
        rep.components["train"] = sum(
            (flops_train(theta, t) for t in steps), Fraction(0)
        )
        rep.components["validation"] = flops_infer(
            theta, c * parse_frac(inputs.t_validation)
        )
    elif method == "sro":
        search = parse_frac(_need(inputs, "search_budget"))
        steps = _need(inputs, "per_step_train")
        rep.components["search_train"] = flops_train(
            theta, search * parse_frac(inputs.t_train)
        )
        rep.components["search_validation"] = flops_infer(
            theta, search * parse_frac(inputs.t_validation)
        )
        rep.components["train"] = sum(
            (flops_train(theta, t) for t in steps), Fraction(0)
        )
        rep.components["validation"] = flops_infer(
            theta, c * parse_frac(inputs.t_validation)
        )
    elif method == "soft-sro":
        search = parse_frac(_need(inputs, "search_budget"))
        resampled = _need(inputs, "t_train_resampled")
        rep.components["search_train"] = flops_train(
            theta, search * parse_frac(inputs.t_train)
        )
        rep.components["search_validation"] = flops_infer(
            theta, search * parse_frac(inputs.t_validation)
        )
        rep.components["train"] = flops_train(theta, c * parse_frac(resampled))
        rep.components["validation"] = flops_infer(
            theta, c * parse_frac(inputs.t_validation)
        )
    elif method == "msft":
        stages = _need(inputs, "stages")
        train = Fraction(0)
        val_active = Fraction(0)
        val_excluded = Fraction(0)
        for t_tr, t_ev, t_excl in stages:
            train += flops_train(theta, c * parse_frac(t_tr))
            val_active += flops_infer(theta, c * parse_frac(t_ev))
            # excluded sets are validated once per stage, no budget factor
            val_excluded += flops_infer(theta, parse_frac(t_excl))
        rep.components["train"] = train
        rep.components["validation"] = val_active
        rep.components["validation_excluded"] = val_excluded
    else:
        raise FlopsError(f"unknown method {method!r}")
    return rep


# ---------------------------------------------------------------------------
# trace oracle and input derivation
# ---------------------------------------------------------------------------


def ledger_from_trace(trace: RunTrace, theta: int) -> Fraction:
    """Total FLOPs by folding the trace: 6·θ·tokens per training step plus
    2·θ·tokens per evaluation.  Independent of the closed forms."""
    if not trace.complete:
        raise FlopsError("trace is marked incomplete")
    total = Fraction(0)
    for ev in trace.events:
        if isinstance(ev, TrainStep):
            total += TRAIN_COEF * theta * ev.tokens
        elif isinstance(ev, Eval):
            total += INFER_COEF * theta * ev.tokens
    return total


def evals_per_epoch(grid: ComputeGrid) -> Fraction:
    return 1 / grid.step


def mixture_train_tokens(mixture: MixtureSpec) -> int:
    return sum(s.train_tokens_per_epoch for s in mixture.subs)


def mixture_val_tokens_per_epoch(mixture: MixtureSpec, grid: ComputeGrid) -> Fraction:
    return evals_per_epoch(grid) * sum(s.eval_tokens for s in mixture.subs)


def derive_inputs(
    method: str,
    mixture: MixtureSpec,
    grid: ComputeGrid,
    theta: int,
    *,
    search_budget: Fraction | None = None,
    result=None,
) -> FlopsInputs:
    """Build ledger inputs from the mixture, the grid, and (for methods with
    data-dependent schedules) a finished run's recorded schedule."""
    t_train = mixture_train_tokens(mixture)
    t_val = mixture_val_tokens_per_epoch(mixture, grid)
    inputs = FlopsInputs(
        theta=theta, t_train=t_train, t_validation=t_val, budget=grid.budget
    )
    if method == "continual":
        inputs.per_task_train = {
            s.id: s.train_tokens_per_epoch for s in mixture.subs
        }
    elif method == "sro":
        if result is None or not result.searched_peaks:
            raise FlopsError("sro inputs need a finished run with searched peaks")
        inputs.search_budget = parse_frac(search_budget)
        peaks = result.searched_peaks
        per_step = []
        horizon = max(peaks.values())
        c = Fraction(0)
        while c < horizon:
            active_tokens = sum(
                s.train_tokens_per_epoch for s in mixture.subs if peaks[s.id] > c
            )
            per_step.append(grid.step * active_tokens)
            c += grid.step
        inputs.per_step_train = per_step
        # validation in the train phase runs until the last exclusion
        inputs.budget = horizon
    elif method == "soft-sro":
        if result is None or result.resampled_mixture is None:
            raise FlopsError("soft-sro inputs need a finished run with a resampled mixture")
        inputs.search_budget = parse_frac(search_budget)
        inputs.t_train_resampled = sum(
            s.train_tokens_per_epoch * result.soft_weights[s.id] for s in mixture.subs
        )
    elif method == "msft":
        if result is None:
            raise FlopsError("msft inputs need a finished run's stage schedule")
        inputs.stages = msft_stage_inputs(mixture, grid, result)
    elif method not in ("sft", "dynamix", "ies"):
        raise FlopsError(f"unknown method {method!r}")
    return inputs


def msft_stage_inputs(
    mixture: MixtureSpec, grid: ComputeGrid, result
) -> list[tuple[Fraction, Fraction, int]]:
    """Per-stage (active train tokens/epoch, active val tokens/epoch,
    excluded val tokens) from a finished run's stage marks."""
    from .core import StageMark  # local to avoid import cycle noise

    stages = []
    all_ids = set(mixture.ids())
    for ev in result.trace.events:
        if isinstance(ev, StageMark):
            active = set(ev.active)
            excluded = all_ids - active
            t_tr = sum(
                s.train_tokens_per_epoch for s in mixture.subs if s.id in active
            )
            t_ev = evals_per_epoch(grid) * sum(
                s.eval_tokens for s in mixture.subs if s.id in active
            )
            t_excl = sum(s.eval_tokens for s in mixture.subs if s.id in excluded)
            stages.append((Fraction(t_tr), t_ev, t_excl))
    return stages


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

PIPELINE_STAGES = ("pretrain", "mid", "sft", "dpo", "rlvr-grad", "rlvr-roll")
RLVR_SEQ_TOKENS = 4096  # prompt and response each capped at 2048


@dataclass
class PipelineStageSpec:
    stage: str
    theta: int
    tokens: int | None = None  # pretrain / mid
    n_samples: int | None = None  # sft
    avg_len: float | None = None  # sft / dpo
    epochs: int = 2
    n_pairs: int | None = None  # dpo
    episodes: int | None = None  # rlvr-roll
    n_grad: int | None = None  # rlvr-grad
    algo: str | None = None  # "ppo" | "grpo"

    def __post_init__(self):
        if self.stage not in PIPELINE_STAGES:
            raise FlopsError(f"unknown pipeline stage {self.stage!r}")
        if self.theta <= 0:
            raise FlopsError("theta must be > 0")


def pipeline_stage_flops(spec: PipelineStageSpec) -> float:
    """FLOPs for one pipeline stage from its published recipe."""
    th = spec.theta
    if spec.stage in ("pretrain", "mid"):
        if spec.tokens is None:
            raise FlopsError(f"{spec.stage} needs a token count")
        return 6.0 * th * spec.tokens
    if spec.stage == "sft":
        if spec.n_samples is None or spec.avg_len is None:
            raise FlopsError("sft needs n_samples and avg_len")
        return 6.0 * th * spec.n_samples * spec.avg_len * spec.epochs
    if spec.stage == "dpo":
        if spec.n_pairs is None or spec.avg_len is None:
            raise FlopsError("dpo needs n_pairs and avg_len")
        # each pair runs as two separate forward-backward passes
        return 6.0 * th * spec.n_pairs * 2 * spec.avg_len
    if spec.stage == "rlvr-roll":
        if spec.episodes is None:
            raise FlopsError("rlvr-roll needs an episode count")
        # policy rollout and frozen reference model: one forward pass each
        return 2.0 * th * spec.episodes * RLVR_SEQ_TOKENS * 2
    if spec.stage == "rlvr-grad":
        if spec.n_grad is None:
            raise FlopsError("rlvr-grad needs a gradient-step count")
        if spec.algo not in ("ppo", "grpo"):
            raise FlopsError("rlvr-grad needs algo='ppo' or 'grpo'")
        mult = 2 if spec.algo == "ppo" else 1  # ppo also trains a value model
        return 6.0 * th * spec.n_grad * RLVR_SEQ_TOKENS * mult
    raise FlopsError(f"unknown pipeline stage {spec.stage!r}")  # pragma: no cover


POST_STAGES = ("sft", "dpo", "rlvr-grad", "rlvr-roll")


def proportion_report(stage_flops: Mapping[str, float]) -> dict[str, float]:
    """Post-training share of the pipeline from per-stage FLOPs values.

    Returns post_total (FLOPs), post_over_total and sft_over_post (ratios).
    """
    for st in ("pretrain", "sft"):
        if st not in stage_flops:
            raise FlopsError(f"proportion report needs a {st!r} stage")
    post = sum(stage_flops.get(st, 0.0) for st in POST_STAGES)
    total = post + stage_flops.get("pretrain", 0.0) + stage_flops.get("mid", 0.0)
    return {
        "post_total": post,
        "post_over_total": post / total,
        "sft_over_post": stage_flops["sft"] / post,
    }
