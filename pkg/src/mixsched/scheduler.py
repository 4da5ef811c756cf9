"""Training strategies and analyses, all driving a trainer session.

Five runnable strategies share one bookkeeping core (RunContext): plain
fine-tuning, sequential per-task fine-tuning, single-roll-out search with
hard exclusions, its soft-reweighting variant, and the iterative
roll-out / roll-back search.  Compute positions are exact fractions; the
cumulative-epochs odometer never rewinds, so it keys every curve record
unambiguously even across rollbacks.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

from .ckptstore import (
    TAG_BEST,
    TAG_BEST_PENDING,
    TAG_ROLLBACK,
    CheckpointStore,
    peak_tag,
)
from .core import (
    CkptDelete,
    CkptRetag,
    CkptSave,
    ComputeGrid,
    CurveTable,
    Eval,
    EvalRecord,
    Exclude,
    MixschedError,
    MixtureSpec,
    Rollback,
    RunResult,
    RunTrace,
    StageMark,
    SubDatasetSpec,
    TrainStep,
    parse_frac,
)
from .dynamics import DynamicsConfig, loss_at


class SchedulerError(MixschedError):
    """Strategy-level contract violation."""


STRATEGIES = ("sft", "continual", "sro", "soft-sro", "msft")


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str
    grid: ComputeGrid
    sft_epochs: Fraction = Fraction(10)
    sro_search_budget: Fraction = Fraction(10)
    max_no_overfit_windows: int = 4

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise SchedulerError(f"unknown strategy {self.strategy!r}")
        object.__setattr__(self, "sft_epochs", parse_frac(self.sft_epochs))
        object.__setattr__(
            self, "sro_search_budget", parse_frac(self.sro_search_budget)
        )
        for name in ("sft_epochs", "sro_search_budget"):
            v = getattr(self, name)
            if v <= 0 or v % self.grid.step != 0:
                raise SchedulerError(f"{name} must be a positive grid multiple")
        if self.max_no_overfit_windows < 0:
            raise SchedulerError("max_no_overfit_windows must be >= 0")


class ExclusionSet:
    """Ordered exclusions (dataset, position); no duplicates, grid-aligned."""

    def __init__(self, step: Fraction):
        self._step = step
        self.entries: list[tuple[str, Fraction]] = []

    def add(self, ds_id: str, at_c: Fraction) -> None:
        if any(d == ds_id for d, _ in self.entries):
            raise SchedulerError(f"{ds_id!r} excluded twice")
        if at_c % self._step != 0:
            raise SchedulerError(f"exclusion point {at_c} is off-grid")
        self.entries.append((ds_id, at_c))

    def ids(self) -> list[str]:
        return [d for d, _ in self.entries]

    def __contains__(self, ds_id: str) -> bool:
        return any(d == ds_id for d, _ in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


# ---------------------------------------------------------------------------
# peak selection
# ---------------------------------------------------------------------------


def peak_of(curve: CurveTable, dataset_id: str) -> tuple[Fraction, float]:
    """Grid point with the maximum recorded metric; earliest wins ties.

    Returns (position, metric) of that record.
    """
    records = curve.records_for(dataset_id)
    if not records:
        raise SchedulerError(f"no records for {dataset_id!r}")
    best = records[0]
    for r in records[1:]:
        if r.metric > best.metric:
            best = r
    return best.position, best.metric


def earliest_peak(curve: CurveTable, active: Sequence[str]) -> tuple[Fraction, str]:
    """Active dataset with the minimal optimal compute.

    Ties resolve to the dataset listed first in ``active`` (mixture order).
    """
    if not active:
        raise SchedulerError("active set must not be empty")
    c_min = None
    ds_min = None
    for ds in active:
        c_star, _ = peak_of(curve, ds)
        if c_min is None or c_star < c_min:
            c_min, ds_min = c_star, ds
    return c_min, ds_min


# ---------------------------------------------------------------------------
# run bookkeeping
# ---------------------------------------------------------------------------


class RunContext:
    """Per-run state: trace, curve, carry-forward averages, bests, and the
    champion-checkpoint retention policy."""

    def __init__(
        self,
        mixture: MixtureSpec,
        step: Fraction,
        session,
        store: CheckpointStore,
        trace: RunTrace,
        dynamics: DynamicsConfig | None = None,
        start_cum: Fraction = Fraction(0),
    ):
        self.mixture = mixture
        self.step = step
        self.session = session
        self.store = store
        self.trace = trace
        self.dynamics = dynamics
        self.curve = CurveTable()
        self.cum = start_cum
        self.position = Fraction(0)
        self.stage = 0
        self.carry: dict[str, float] = {}
        self.exclusions = ExclusionSet(step)
        self.per_task_best: dict[str, tuple[Fraction, float]] = {}
        self.a_star = 0.0
        self.best_ckpt: str | None = None
        self.pending_best: str | None = None
        self.best_cum = Fraction(0)
        self.rollback_ckpt: str | None = None
        self._champ: dict[str, tuple[str, float]] = {}

    # -- basic moves --------------------------------------------------------

    def mark_stage(self, index: int, active: Sequence[str], label: str = "") -> None:
        self.stage = index
        self.trace.append(StageMark(index=index, active=tuple(active), label=label))

    def train_step(
        self, active: Sequence[str], weights: dict[str, Fraction] | None = None
    ) -> None:
        self.session.train_delta(list(active), weights, self.step)
        self.position += self.step
        self.cum += self.step
        tokens = Fraction(0)
        for ds in active:
            w = (weights or {}).get(ds, Fraction(1))
            tokens += w * self.mixture.by_id(ds).train_tokens_per_epoch * self.step
        loss = None
        if self.dynamics is not None:
            loss = loss_at(
                self.dynamics, list(active), self.position, self.exclusions.entries
            )
        self.trace.append(
            TrainStep(
                cum=self.cum,
                position=self.position,
                active=tuple(active),
                tokens=tokens,
                weights=tuple(sorted((weights or {}).items())),
                loss=loss,
            )
        )

    def eval_task(self, ds_id: str, *, active: bool) -> float:
        metric = self.session.evaluate(ds_id)
        spec = self.mixture.by_id(ds_id)
        self.trace.append(
            Eval(
                dataset_id=ds_id,
                cum=self.cum,
                position=self.position,
                metric=metric,
                tokens=spec.eval_tokens,
            )
        )
        self.curve.add(
            EvalRecord(
                dataset_id=ds_id,
                compute_c=self.cum,
                metric=metric,
                position=self.position,
            )
        )
        self.carry[ds_id] = metric
        if active:
            prev = self.per_task_best.get(ds_id)
            if prev is None or metric > prev[1]:
                self.per_task_best[ds_id] = (self.position, metric)
        return metric

    def step_and_eval(
        self,
        active: Sequence[str],
        eval_ids: Sequence[str],
        weights: dict[str, Fraction] | None = None,
    ) -> dict[str, float]:
        """One grid step: train the active set, evaluate ``eval_ids``."""
        self.train_step(active, weights)
        active_set = set(active)
        return {ds: self.eval_task(ds, active=ds in active_set) for ds in eval_ids}

    def mixture_avg(self) -> float | None:
        ids = self.mixture.ids()
        if any(ds not in self.carry for ds in ids):
            return None
        return sum(self.carry[ds] for ds in ids) / len(ids)

    def track_best(self) -> bool:
        """True when the running mixture average just set a strict record."""
        avg = self.mixture_avg()
        if avg is not None and avg > self.a_star:
            self.a_star = avg
            return True
        return False

    # -- checkpoint policy --------------------------------------------------

    def save_current(self, tags: set[str]) -> str:
        blob = self.session.save_state()
        ckpt_id, created = self.store.put(
            blob, compute_c=self.position, stage_index=self.stage, tags=tags
        )
        if created:
            self.trace.append(
                CkptSave(
                    ckpt_id=ckpt_id,
                    nbytes=len(blob),
                    position=self.position,
                    stage=self.stage,
                    tags=tuple(sorted(self.store.meta(ckpt_id).tags)),
                )
            )
        return ckpt_id

    def _move_tag(self, tag: str, new_id: str, old_id: str | None) -> None:
        if old_id == new_id:
            return
        self.store.add_tag(new_id, tag)
        if old_id is not None and old_id in self.store.live_ids():
            if self.store.drop_tag(old_id, tag):
                self.trace.append(CkptDelete(ckpt_id=old_id))

    def update_champions(self, improved: dict[str, float], promote_best: bool) -> None:
        """After a step's evaluations: re-point champion tags of datasets
        that improved; when the running mixture average set a record, move
        the provisional global-best marker to the current state.

        The confirmed global-best blob keeps its tag until the stage ends
        (confirm_best), mirroring the end-of-stage best update of the
        pruning algorithm while the provisional marker guarantees the
        record-holding blob is still on disk by then.
        """
        if not improved and not promote_best:
            return
        tags = {peak_tag(ds) for ds in improved}
        if promote_best:
            tags.add(TAG_BEST_PENDING)
        ckpt_id = self.save_current(tags)
        for ds in improved:
            old = self._champ.get(ds)
            self._move_tag(peak_tag(ds), ckpt_id, old[0] if old else None)
            self._champ[ds] = (ckpt_id, improved[ds])
        if promote_best:
            self._move_tag(TAG_BEST_PENDING, ckpt_id, self.pending_best)
            self.pending_best = ckpt_id
            self.best_cum = self.cum

    def confirm_best(self) -> None:
        """Stage end: the provisional record holder becomes the global best."""
        if self.pending_best is None:
            return
        self._move_tag(TAG_BEST, self.pending_best, self.best_ckpt)
        self.best_ckpt = self.pending_best
        self.pending_best = None

    def champion_of(self, ds_id: str) -> tuple[str, float]:
        if ds_id not in self._champ:
            raise SchedulerError(f"no champion checkpoint for {ds_id!r}")
        return self._champ[ds_id]

    def adopt_rollback(self, ckpt_id: str) -> None:
        self._move_tag(TAG_ROLLBACK, ckpt_id, self.rollback_ckpt)
        self.rollback_ckpt = ckpt_id

    def rollback_to(self, ckpt_id: str) -> None:
        blob = self.store.get(ckpt_id)
        meta = self.store.meta(ckpt_id)
        self.session.load_state(blob)
        self.position = meta.compute_c
        self.trace.append(Rollback(to_c=meta.compute_c, ckpt_id=ckpt_id, cum=self.cum))

    def prune_stage(self) -> None:
        if self.rollback_ckpt is None:
            raise SchedulerError("cannot prune without a rollback checkpoint")
        self.confirm_best()
        best = self.best_ckpt or self.rollback_ckpt
        for ckpt_id in self.store.prune_end_of_stage(self.rollback_ckpt, best):
            self.trace.append(CkptDelete(ckpt_id=ckpt_id))
        for kid in sorted({self.rollback_ckpt, best}):
            self.trace.append(
                CkptRetag(ckpt_id=kid, tags=tuple(sorted(self.store.meta(kid).tags)))
            )
        self._champ = {}

    # -- result assembly ----------------------------------------------------

    def finish(self, strategy: str, final_ckpt: str) -> RunResult:
        self.confirm_best()
        best_id = self.best_ckpt or final_ckpt
        metrics_at_best = self._readout_at(best_id)
        exclusion_metrics = {}
        for ds, at in self.exclusions.entries:
            recs = [r for r in self.curve.records_for(ds) if r.position == at]
            if recs:
                exclusion_metrics[ds] = recs[-1].metric
        return RunResult(
            strategy=strategy,
            final_checkpoint_id=final_ckpt,
            global_best_checkpoint_id=best_id,
            global_best_metric=self.a_star,
            epochs_at_best=self.best_cum,
            per_task_best=dict(self.per_task_best),
            metrics_at_best=metrics_at_best,
            curve=self.curve,
            trace=self.trace,
            exclusions=list(self.exclusions.entries),
            exclusion_metrics=exclusion_metrics,
        )

    def _readout_at(self, ckpt_id: str) -> dict[str, float]:
        """Evaluate every dataset at a stored checkpoint.

        This is the report readout of the returned model, not part of the
        training loop: nothing is logged to the trace and the session state
        is restored afterwards.
        """
        current = self.session.save_state()
        try:
            self.session.load_state(self.store.get(ckpt_id))
            return {ds: self.session.evaluate(ds) for ds in self.mixture.ids()}
        finally:
            self.session.load_state(current)


def _make_ctx(
    session,
    mixture: MixtureSpec,
    config: StrategyConfig,
    *,
    strategy: str,
    seed: int,
    theta: int,
    store: CheckpointStore | None,
    dynamics: DynamicsConfig | None,
    preset: str,
    budget: Fraction,
    trace: RunTrace | None = None,
    start_cum: Fraction = Fraction(0),
) -> RunContext:
    if trace is None:
        trace = RunTrace(
            strategy=strategy,
            seed=seed,
            grid=ComputeGrid(budget, config.grid.step),
            theta=theta,
            preset=preset,
        )
    return RunContext(
        mixture=mixture,
        step=config.grid.step,
        session=session,
        store=store if store is not None else CheckpointStore(),
        trace=trace,
        dynamics=dynamics,
        start_cum=start_cum,
    )


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------


def run_sft(
    session,
    mixture: MixtureSpec,
    config: StrategyConfig,
    *,
    seed: int = 20,
    theta: int = 10**9,
    store: CheckpointStore | None = None,
    dynamics: DynamicsConfig | None = None,
    preset: str = "",
) -> RunResult:
    """Fine-tune on the full mixture for the configured epochs, evaluating
    every grid interval; the best checkpoint by mixture average is kept."""
    ctx = _make_ctx(
        session, mixture, config,
        strategy="sft", seed=seed, theta=theta, store=store, dynamics=dynamics,
        preset=preset, budget=config.sft_epochs,
    )
    ids = mixture.ids()
    ctx.mark_stage(1, ids)
    for _ in range(int(config.sft_epochs / ctx.step)):
        ctx.step_and_eval(ids, ids)
        ctx.update_champions({}, ctx.track_best())
    final_id = ctx.save_current({TAG_ROLLBACK})
    ctx.adopt_rollback(final_id)
    return ctx.finish("sft", final_id)


def run_continual(
    session,
    mixture: MixtureSpec,
    config: StrategyConfig,
    *,
    seed: int = 20,
    theta: int = 10**9,
    store: CheckpointStore | None = None,
    dynamics: DynamicsConfig | None = None,
    preset: str = "",
) -> RunResult:
    """Train each sub-dataset sequentially for the budget, then rewind to
    that dataset's peak checkpoint before starting the next one."""
    ctx = _make_ctx(
        session, mixture, config,
        strategy="continual", seed=seed, theta=theta, store=store, dynamics=dynamics,
        preset=preset, budget=config.grid.budget,
    )
    ids = mixture.ids()
    n = config.grid.n_steps
    final_id = ""
    for i, ds in enumerate(ids, start=1):
        ctx.mark_stage(i, [ds])
        seg_best: float | None = None
        for _ in range(n):
            vals = ctx.step_and_eval([ds], ids)
            improved = {}
            if seg_best is None or vals[ds] > seg_best:
                seg_best = vals[ds]
                improved[ds] = vals[ds]
            ctx.update_champions(improved, ctx.track_best())
        champ_id, _ = ctx.champion_of(ds)
        ctx.adopt_rollback(champ_id)
        ctx.rollback_to(champ_id)
        ctx.prune_stage()
        final_id = champ_id
    return ctx.finish("continual", final_id)


def run_msft(
    session,
    mixture: MixtureSpec,
    config: StrategyConfig,
    *,
    seed: int = 20,
    theta: int = 10**9,
    store: CheckpointStore | None = None,
    dynamics: DynamicsConfig | None = None,
    preset: str = "",
) -> RunResult:
    """Iterative overfitting-aware search: roll the active mixture out for
    the budget, exclude the earliest-peaking dataset, revert to its peak
    checkpoint, and repeat until nothing is left (or nothing overfits).

    The loop terminates after at most N + max_no_overfit_windows windows:
    every window either removes one dataset or consumes the no-overfit
    allowance.
    """
    ctx = _make_ctx(
        session, mixture, config,
        strategy="msft", seed=seed, theta=theta, store=store, dynamics=dynamics,
        preset=preset, budget=config.grid.budget,
    )
    n = config.grid.n_steps
    active = list(mixture.ids())
    stage = 1
    no_overfit_used = 0
    ctx.mark_stage(stage, active)
    while active:
        if ctx.exclusions.entries:
            # excluded sets are validated once, at the stage-start checkpoint
            for ds, _at in ctx.exclusions.entries:
                ctx.eval_task(ds, active=False)
        window_best: dict[str, tuple[int, float]] = {}
        for w in range(1, n + 1):
            vals = ctx.step_and_eval(active, active)
            improved = {}
            for ds in active:
                prev = window_best.get(ds)
                if prev is None or vals[ds] > prev[1]:
                    window_best[ds] = (w, vals[ds])
                    improved[ds] = vals[ds]
            ctx.update_champions(improved, ctx.track_best())
        w_min = min(window_best[ds][0] for ds in active)
        if w_min == n:
            # earliest peak sits at the window end: nothing overfit, adopt
            # the end state and continue from it (the window-end blob always
            # exists already: every active dataset's champion is there)
            no_overfit_used += 1
            if no_overfit_used > config.max_no_overfit_windows:
                break
            end_id = ctx.save_current({TAG_ROLLBACK})
            ctx.adopt_rollback(end_id)
            stage += 1
            ctx.mark_stage(stage, active)
            ctx.prune_stage()
            continue
        excl_ds = next(ds for ds in active if window_best[ds][0] == w_min)
        champ_id, _ = ctx.champion_of(excl_ds)
        at_pos = ctx.store.meta(champ_id).compute_c
        ctx.trace.append(Exclude(dataset_id=excl_ds, at_c=at_pos, cum=ctx.cum))
        ctx.adopt_rollback(champ_id)
        ctx.rollback_to(champ_id)
        ctx.session.mark_excluded(excl_ds)
        ctx.exclusions.add(excl_ds, at_pos)
        active.remove(excl_ds)
        if active:
            stage += 1
            ctx.mark_stage(stage, active)
        ctx.prune_stage()
    final_id = ctx.rollback_ckpt
    if final_id is None:
        final_id = ctx.save_current({TAG_ROLLBACK})
        ctx.adopt_rollback(final_id)
    return ctx.finish("msft", final_id)


@dataclass
class _SearchPhase:
    trace: RunTrace
    end_cum: Fraction
    stages: int


def _sro_search(
    session_factory, mixture, config, *, seed, theta, dynamics, preset, strategy
) -> tuple[_SearchPhase, dict[str, Fraction]]:
    """Phase 1 shared by both single-roll-out variants: one plain run over
    the search budget, recorded into the trace the train phase continues."""
    ctx = _make_ctx(
        session_factory(), mixture, config,
        strategy=strategy, seed=seed, theta=theta, store=None, dynamics=dynamics,
        preset=preset, budget=config.sro_search_budget,
    )
    ids = mixture.ids()
    ctx.mark_stage(1, ids, label="search")
    for _ in range(int(config.sro_search_budget / ctx.step)):
        ctx.step_and_eval(ids, ids)
    peaks = {ds: peak_of(ctx.curve, ds)[0] for ds in ids}
    return _SearchPhase(trace=ctx.trace, end_cum=ctx.cum, stages=1), peaks


def run_sro(
    session_factory: Callable[[], object],
    mixture: MixtureSpec,
    config: StrategyConfig,
    *,
    seed: int = 20,
    theta: int = 10**9,
    store: CheckpointStore | None = None,
    dynamics: DynamicsConfig | None = None,
    preset: str = "",
) -> RunResult:
    """Single-roll-out search, then a fresh run that hard-excludes each
    dataset at the stopping point the search found for it."""
    search, peaks = _sro_search(
        session_factory, mixture, config,
        seed=seed, theta=theta, dynamics=dynamics, preset=preset, strategy="sro",
    )
    ctx = _make_ctx(
        session_factory(), mixture, config,
        strategy="sro", seed=seed, theta=theta, store=store, dynamics=dynamics,
        preset=preset, budget=config.sro_search_budget,
        trace=search.trace, start_cum=search.end_cum,
    )
    ids = mixture.ids()
    active = list(ids)
    c_current = Fraction(0)
    stage = search.stages
    while active:
        stage += 1
        ctx.mark_stage(stage, active, label="train")
        c_next = min(peaks[ds] for ds in active)
        for _ in range(int((c_next - c_current) / ctx.step)):
            ctx.step_and_eval(active, ids)
            ctx.update_champions({}, ctx.track_best())
        c_current = c_next
        for ds in [d for d in active if peaks[d] <= c_current]:
            ctx.trace.append(Exclude(dataset_id=ds, at_c=c_current, cum=ctx.cum))
            ctx.session.mark_excluded(ds)
            ctx.exclusions.add(ds, c_current)
            active.remove(ds)
    final_id = ctx.save_current({TAG_ROLLBACK})
    ctx.adopt_rollback(final_id)
    result = ctx.finish("sro", final_id)
    result.searched_peaks = dict(peaks)
    return result


def run_soft_sro(
    session_factory: Callable[[], object],
    mixture: MixtureSpec,
    config: StrategyConfig,
    *,
    seed: int = 20,
    theta: int = 10**9,
    store: CheckpointStore | None = None,
    dynamics: DynamicsConfig | None = None,
    preset: str = "",
) -> RunResult:
    """Single-roll-out search, then a fresh run on a mixture resampled so
    each dataset's exposure is proportional to its searched stopping point."""
    search, peaks = _sro_search(
        session_factory, mixture, config,
        seed=seed, theta=theta, dynamics=dynamics, preset=preset, strategy="soft-sro",
    )
    resampled, weights = build_soft_mixture(mixture, peaks, seed=seed)
    ctx = _make_ctx(
        session_factory(), mixture, config,
        strategy="soft-sro", seed=seed, theta=theta, store=store, dynamics=dynamics,
        preset=preset, budget=config.sro_search_budget,
        trace=search.trace, start_cum=search.end_cum,
    )
    ids = mixture.ids()
    ctx.mark_stage(search.stages + 1, ids, label="train")
    for _ in range(int(config.sro_search_budget / ctx.step)):
        ctx.step_and_eval(ids, ids, weights=weights)
        ctx.update_champions({}, ctx.track_best())
    final_id = ctx.save_current({TAG_ROLLBACK})
    ctx.adopt_rollback(final_id)
    result = ctx.finish("soft-sro", final_id)
    result.searched_peaks = dict(peaks)
    result.resampled_mixture = resampled
    result.soft_weights = dict(weights)
    return result


def build_soft_mixture(
    mixture: MixtureSpec,
    peaks: dict[str, Fraction],
    *,
    base_total: int | None = None,
    seed: int = 20,
) -> tuple[MixtureSpec, dict[str, Fraction]]:
    """Resample the mixture so dataset exposure tracks the searched peaks.

    Target count r_i = total * (c*_i * |D_i|) / Z with Z = sum c*_j * |D_j|.
    Whole copies are taken first; the fractional remainder is realized as
    floor(remainder) items sampled without replacement.  Sub-dataset specs
    carry aggregate sizes, so the sample is realized at the aggregate level:
    the resulting size is floor(r_i) and token counts scale proportionally
    (deterministic for any seed).

    Returns the resampled mixture and each dataset's exact exposure weight
    (new size / old size).
    """
    del seed  # aggregate-level resampling has nothing left to randomize
    for ds, c in peaks.items():
        if parse_frac(c) <= 0:
            raise SchedulerError(f"peak for {ds!r} must be > 0")
    total = base_total if base_total is not None else mixture.total_size()
    z = sum(parse_frac(peaks[s.id]) * s.size for s in mixture.subs)
    if z <= 0:
        raise SchedulerError("normalization factor must be positive")
    subs = []
    weights: dict[str, Fraction] = {}
    for s in mixture.subs:
        r = Fraction(total) * parse_frac(peaks[s.id]) * s.size / z
        copies = int(r // s.size)
        remainder = r - copies * s.size
        new_size = copies * s.size + int(remainder)
        if new_size <= 0:
            raise SchedulerError(f"resampled size for {s.id!r} is zero; peaks too skewed")
        w = Fraction(new_size, s.size)
        weights[s.id] = w
        subs.append(
            SubDatasetSpec(
                id=s.id,
                name=s.name,
                size=new_size,
                weight=s.weight,
                train_tokens_per_epoch=int(s.train_tokens_per_epoch * w),
                eval_tokens=s.eval_tokens,
            )
        )
    return MixtureSpec(subs=tuple(subs)), weights


# ---------------------------------------------------------------------------
# analyses
# ---------------------------------------------------------------------------


def delta_cstar_study(
    session_factory: Callable[[], object],
    mixture: MixtureSpec,
    grid: ComputeGrid,
) -> tuple[dict[str, Fraction], float]:
    """Bifurcation study: train the full mixture, find the first task to
    overfit, then branch — one run keeps the full mixture, the other drops
    that task — and report each remaining task's optimal-compute shift.

    Returns (per-task shift map, mean absolute shift in epochs).
    """
    if mixture.n < 2:
        raise SchedulerError("study needs at least two datasets")
    ids = mixture.ids()
    step = grid.step

    def record_all(session, curve, pos, subset):
        for ds in subset:
            curve.add(
                EvalRecord(
                    dataset_id=ds,
                    compute_c=pos,
                    metric=session.evaluate(ds),
                    position=pos,
                )
            )

    # branch A: the full mixture for the whole budget
    sa = session_factory()
    curve_a = CurveTable()
    pos = Fraction(0)
    for _ in range(grid.n_steps):
        sa.train_delta(ids, None, step)
        pos += step
        record_all(sa, curve_a, pos, ids)
    c_bif, k = earliest_peak(curve_a, ids)
    if c_bif == grid.budget:
        raise SchedulerError("no bifurcation point: nothing overfits within the budget")

    # branch B: identical prefix, then continue without the overfit task
    sb = session_factory()
    remaining = [ds for ds in ids if ds != k]
    curve_b = CurveTable()
    pos = Fraction(0)
    for _ in range(int(c_bif / step)):
        sb.train_delta(ids, None, step)
        pos += step
        record_all(sb, curve_b, pos, remaining)
    sb.mark_excluded(k)
    while pos < grid.budget:
        sb.train_delta(remaining, None, step)
        pos += step
        record_all(sb, curve_b, pos, remaining)

    shifts: dict[str, Fraction] = {}
    for ds in remaining:
        shifts[ds] = peak_of(curve_b, ds)[0] - peak_of(curve_a, ds)[0]
    mean_abs = float(sum(abs(v) for v in shifts.values()) / len(shifts))
    return shifts, mean_abs


def forgetting_decomposition(result: RunResult) -> dict[str, float]:
    """Per excluded task: metric at the run's global-best checkpoint minus
    the metric at its own exclusion checkpoint.  Negative values mean the
    continued training eroded the task (forgetting); positive values mean
    it kept improving (transfer)."""
    out = {}
    for ds, _at in result.exclusions:
        if ds in result.metrics_at_best and ds in result.exclusion_metrics:
            out[ds] = result.metrics_at_best[ds] - result.exclusion_metrics[ds]
    return out


# ---------------------------------------------------------------------------
# trace-derived series
# ---------------------------------------------------------------------------


def step_average_series(
    trace: RunTrace, ids: Sequence[str]
) -> list[tuple[Fraction, float]]:
    """(cumulative, mixture-average) after every training step, using the
    same carry-forward discipline the live runs track."""
    carry: dict[str, float] = {}
    series: list[tuple[Fraction, float]] = []
    pending_cum: Fraction | None = None

    def flush():
        nonlocal pending_cum
        if pending_cum is not None and all(ds in carry for ds in ids):
            series.append((pending_cum, sum(carry[ds] for ds in ids) / len(ids)))
        pending_cum = None

    for ev in trace.events:
        if isinstance(ev, TrainStep):
            flush()
            pending_cum = ev.cum
        elif isinstance(ev, Eval):
            carry[ev.dataset_id] = ev.metric
        elif isinstance(ev, (StageMark, Exclude, Rollback)):
            flush()
    flush()
    return series
