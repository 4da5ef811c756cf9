from fractions import Fraction

import pytest

from mixsched.core import (
    ComputeGrid,
    CurveTable,
    Eval,
    EvalRecord,
    Exclude,
    MixtureSpec,
        StageMark,
    SubDatasetSpec,
    TrainStep,
    grid_points,
)
from mixsched.dynamics import CouplingRule, DynamicsConfig, TaskCurveParams, metric_at
from mixsched.presets import load_preset, make_mixture
from mixsched.scheduler import (
    ExclusionSet,
    SchedulerError,
    StrategyConfig,
    build_soft_mixture,
    delta_cstar_study,
    earliest_peak,
    forgetting_decomposition,
    peak_of,
    run_continual,
    run_msft,
    run_sft,
    run_soft_sro,
    run_sro,
    step_average_series,
)
from mixsched.trainer import SimulatorSession

from conftest import make_factory


def rec(ds, c, v):
    return EvalRecord(dataset_id=ds, compute_c=Fraction(c), metric=v, position=Fraction(c))


def brute_force_peak(dynamics, task, horizon=Fraction(12), step=Fraction(1, 4)):
    """Independent oracle: exhaustive search over grid stopping points."""
    best_c, best_v = None, None
    c = step
    while c <= horizon:
        v = metric_at(dynamics, task, c)
        if best_v is None or v > best_v:
            best_c, best_v = c, v
        c += step
    return best_c, best_v


class TestPeakSelection:
    def test_simple_argmax(self):
        t = CurveTable([rec("a", "1/4", 0.1), rec("a", "1/2", 0.3), rec("a", "3/4", 0.2)])
        assert peak_of(t, "a") == (Fraction(1, 2), 0.3)

    def test_constant_curve_earliest_tie(self):
        t = CurveTable([rec("a", Fraction(k, 4), 0.4) for k in range(1, 5)])
        assert peak_of(t, "a") == (Fraction(1, 4), 0.4)

    def test_no_records_is_error(self):
        with pytest.raises(SchedulerError):
            peak_of(CurveTable(), "a")

    def test_matches_simulator_brute_force(self, zero_coupling):
        spec = zero_coupling
        s = SimulatorSession(spec.dynamics)
        s.init(spec.mixture, 20)
        curve = CurveTable()
        pos = Fraction(0)
        for c in grid_points(ComputeGrid(8, Fraction(1, 4))):
            s.train_delta(spec.mixture.ids(), None, Fraction(1, 4))
            pos = c
            for ds in spec.mixture.ids():
                curve.add(rec(ds, c, s.evaluate(ds)))
        for ds in spec.mixture.ids():
            want = brute_force_peak(spec.dynamics, ds, horizon=Fraction(8))
            assert peak_of(curve, ds) == want

    def test_earliest_peak_picks_min(self):
        t = CurveTable(
            [rec("a", "1", 0.2), rec("a", "5/4", 0.5), rec("a", "3/2", 0.3),
             rec("b", "1", 0.2), rec("b", "5/4", 0.4), rec("b", "11/4", 0.6),
             rec("b", "3", 0.5)]
        )
        # b's records end at 3 but its max sits at 11/4; a peaks at 5/4
        assert earliest_peak(t, ["a", "b"]) == (Fraction(5, 4), "a")

    def test_earliest_peak_tie_breaks_by_order(self):
        t = CurveTable(
            [rec("a", "2", 0.5), rec("b", "2", 0.9), rec("b", "9/4", 0.1),
             rec("a", "9/4", 0.1)]
        )
        assert earliest_peak(t, ["a", "b"]) == (Fraction(2), "a")
        assert earliest_peak(t, ["b", "a"]) == (Fraction(2), "b")

    def test_single_dataset(self):
        t = CurveTable([rec("a", "1", 0.4)])
        assert earliest_peak(t, ["a"]) == (Fraction(1), "a")


class TestExclusionSet:
    def test_no_duplicates(self):
        es = ExclusionSet(Fraction(1, 4))
        es.add("a", Fraction(1, 2))
        with pytest.raises(SchedulerError):
            es.add("a", Fraction(3, 4))

    def test_grid_aligned(self):
        es = ExclusionSet(Fraction(1, 4))
        with pytest.raises(SchedulerError):
            es.add("a", Fraction(1, 3))


class TestRunSft:
    def test_zero_coupling_finds_all_peaks(self, zero_coupling, factory_of):
        spec = zero_coupling
        r = run_sft(factory_of(spec)(), spec.mixture, spec.strategy_config("sft"),
                    dynamics=spec.dynamics)
        for ds, params in spec.dynamics.tasks.items():
            assert r.per_task_best[ds][1] == params.peak_metric
            assert float(r.per_task_best[ds][0]) == params.peak_location

    def test_single_step_budget(self, zero_coupling, factory_of):
        spec = zero_coupling
        cfg = StrategyConfig(strategy="sft", grid=spec.grid, sft_epochs=Fraction(1, 4))
        r = run_sft(factory_of(spec)(), spec.mixture, cfg, dynamics=spec.dynamics)
        assert r.epochs_at_best == Fraction(1, 4)
        assert len(r.curve.records_for("task00")) == 1

    def test_global_best_is_series_max(self, zero_coupling, factory_of):
        spec = zero_coupling
        r = run_sft(factory_of(spec)(), spec.mixture, spec.strategy_config("sft"),
                    dynamics=spec.dynamics)
        series = step_average_series(r.trace, spec.mixture.ids())
        assert r.global_best_metric == max(v for _, v in series)
        best_cum = min(c for c, v in series if v == r.global_best_metric)
        assert r.epochs_at_best == best_cum


class TestRunContinual:
    def test_n1_equals_sft_on_that_dataset(self, zero_coupling, factory_of):
        spec = zero_coupling
        solo = MixtureSpec(subs=(spec.mixture.subs[0],))
        cfg = StrategyConfig(strategy="continual", grid=spec.grid)

        def solo_factory():
            s = SimulatorSession(spec.dynamics, spec.grid.step)
            s.init(solo, spec.seed)
            return s

        r_cont = run_continual(solo_factory(), solo, cfg, dynamics=spec.dynamics)
        cfg_sft = StrategyConfig(strategy="sft", grid=spec.grid, sft_epochs=spec.grid.budget)
        r_sft = run_sft(solo_factory(), solo, cfg_sft, dynamics=spec.dynamics)
        assert r_cont.per_task_best == r_sft.per_task_best
        assert r_cont.global_best_metric == r_sft.global_best_metric

    def test_without_drift_final_metrics_equal_peaks(self, zero_coupling, factory_of):
        spec = zero_coupling  # peaks beyond the budget stay unreached
        r = run_continual(factory_of(spec)(), spec.mixture,
                          spec.strategy_config("continual"), dynamics=spec.dynamics)
        for ds in spec.mixture.ids():
            c_star, best = r.per_task_best[ds]
            assert r.metrics_at_best[ds] <= best
        # tasks whose peak fits the per-dataset budget reach it exactly
        for ds, params in spec.dynamics.tasks.items():
            if params.peak_location <= float(spec.grid.budget):
                assert r.per_task_best[ds][1] == params.peak_metric

    def test_drift_erodes_earlier_tasks(self, forgetting, factory_of):
        spec = forgetting
        r = run_continual(factory_of(spec)(), spec.mixture,
                          spec.strategy_config("continual"), dynamics=spec.dynamics)
        first = spec.mixture.ids()[0]
        c_star, best = r.per_task_best[first]
        assert r.metrics_at_best[first] < best


class TestRunMsft:
    def test_n1_is_early_stopping(self):
        mixture = MixtureSpec(
            subs=(SubDatasetSpec(id="a", name="a", size=10,
                                 train_tokens_per_epoch=1000, eval_tokens=100),)
        )
        dynamics = DynamicsConfig(
            tasks={"a": TaskCurveParams(0.2, 0.8, 0.5, 2.0, 1.0)}
        )
        s = SimulatorSession(dynamics)
        s.init(mixture, 20)
        cfg = StrategyConfig(strategy="msft", grid=ComputeGrid(3, Fraction(1, 4)))
        r = run_msft(s, mixture, cfg, dynamics=dynamics)
        assert r.exclusions == [("a", Fraction(1, 2))]
        assert r.per_task_best["a"] == (Fraction(1, 2), 0.8)
        assert r.final_checkpoint_id == r.global_best_checkpoint_id
        stages = [e for e in r.trace.events if isinstance(e, StageMark)]
        assert len(stages) == 1

    def test_oracle_optimality_zero_coupling(self, zero_coupling, factory_of):
        spec = zero_coupling
        r = run_msft(factory_of(spec)(), spec.mixture, spec.strategy_config("msft"),
                     dynamics=spec.dynamics)
        for ds in spec.mixture.ids():
            oracle_c, oracle_v = brute_force_peak(spec.dynamics, ds)
            assert r.per_task_best[ds][1] == oracle_v
            assert r.per_task_best[ds][0] == oracle_c

    def test_exclusion_order_ascends_peaks(self, zero_coupling, factory_of):
        spec = zero_coupling
        r = run_msft(factory_of(spec)(), spec.mixture, spec.strategy_config("msft"),
                     dynamics=spec.dynamics)
        order = [ds for ds, _ in r.exclusions]
        peaks = {ds: p.peak_location for ds, p in spec.dynamics.tasks.items()}
        assert order == sorted(order, key=lambda d: peaks[d])
        assert len(order) == spec.mixture.n

    def test_rollback_restores_recorded_metric_exactly(self, forgetting, factory_of):
        spec = forgetting
        r = run_msft(factory_of(spec)(), spec.mixture, spec.strategy_config("msft"),
                     dynamics=spec.dynamics)
        # after each rollback the excluded dataset's stage-start validation
        # must reproduce the value recorded at its exclusion checkpoint
        # (the last two records at that position: the roll-out measurement
        # in its final window and the post-rollback re-validation); the run's
        # final exclusion has no following stage, hence no re-validation
        for ds, at in r.exclusions[:-1]:
            window = [
                ev.metric for ev in r.trace.events
                if isinstance(ev, Eval) and ev.dataset_id == ds and ev.position == at
            ]
            assert len(window) >= 2
            assert window[-1] == window[-2] == r.exclusion_metrics[ds]
        last_ds, last_at = r.exclusions[-1]
        last = [
            ev.metric for ev in r.trace.events
            if isinstance(ev, Eval) and ev.dataset_id == last_ds
            and ev.position == last_at
        ]
        assert last[-1] == r.exclusion_metrics[last_ds]

    def test_no_overfit_windows_continue_and_terminate(self):
        # one task peaking beyond two windows: two no-overfit adoptions first
        mixture = MixtureSpec(
            subs=(
                SubDatasetSpec(id="a", name="a", size=10,
                               train_tokens_per_epoch=1000, eval_tokens=100),
                SubDatasetSpec(id="b", name="b", size=10,
                               train_tokens_per_epoch=1000, eval_tokens=100),
            )
        )
        dynamics = DynamicsConfig(
            tasks={
                "a": TaskCurveParams(0.2, 0.8, 2.5, 2.0, 1.0),
                "b": TaskCurveParams(0.3, 0.9, 2.75, 2.0, 1.0),
            }
        )
        s = SimulatorSession(dynamics)
        s.init(mixture, 20)
        cfg = StrategyConfig(strategy="msft", grid=ComputeGrid(1, Fraction(1, 4)))
        r = run_msft(s, mixture, cfg, dynamics=dynamics)
        stages = [e for e in r.trace.events if isinstance(e, StageMark)]
        # windows: (0,1], (1,2] no overfit; (2,3] excludes a; (2.5,3.5] excludes b
        assert len(stages) == 4
        assert r.exclusions == [("a", Fraction(5, 2)), ("b", Fraction(11, 4))]
        assert r.per_task_best["a"][1] == 0.8
        assert r.per_task_best["b"][1] == 0.9

    def test_termination_bound(self, zero_coupling, factory_of):
        spec = zero_coupling
        r = run_msft(factory_of(spec)(), spec.mixture, spec.strategy_config("msft"),
                     dynamics=spec.dynamics)
        stages = [e for e in r.trace.events if isinstance(e, StageMark)]
        assert len(stages) <= spec.mixture.n + spec.max_no_overfit_windows

    def test_never_peaking_task_hits_window_cap(self):
        mixture = MixtureSpec(
            subs=(SubDatasetSpec(id="a", name="a", size=10,
                                 train_tokens_per_epoch=1000, eval_tokens=100),)
        )
        dynamics = DynamicsConfig(
            tasks={"a": TaskCurveParams(0.2, 0.8, 50.0, 0.5, 0.5)}
        )
        s = SimulatorSession(dynamics)
        s.init(mixture, 20)
        cfg = StrategyConfig(
            strategy="msft", grid=ComputeGrid(1, Fraction(1, 4)),
            max_no_overfit_windows=3,
        )
        r = run_msft(s, mixture, cfg, dynamics=dynamics)
        stages = [e for e in r.trace.events if isinstance(e, StageMark)]
        assert len(stages) == 1 + 3  # initial window plus the allowance
        assert r.exclusions == []

    def test_monotone_exclusion_no_tokens_after_exclusion(self, forgetting, factory_of):
        spec = forgetting
        r = run_msft(factory_of(spec)(), spec.mixture, spec.strategy_config("msft"),
                     dynamics=spec.dynamics)
        excluded_at: dict[str, int] = {}
        for i, ev in enumerate(r.trace.events):
            if isinstance(ev, Exclude):
                excluded_at[ev.dataset_id] = i
            if isinstance(ev, TrainStep):
                for ds, idx in excluded_at.items():
                    assert ds not in ev.active
        assert len(excluded_at) == spec.mixture.n

    def test_global_best_matches_series(self, forgetting, factory_of):
        spec = forgetting
        r = run_msft(factory_of(spec)(), spec.mixture, spec.strategy_config("msft"),
                     dynamics=spec.dynamics)
        series = step_average_series(r.trace, spec.mixture.ids())
        assert r.global_best_metric == max(v for _, v in series)


class TestRunSro:
    def test_stage2_exclusions_follow_searched_schedule(self, zero_coupling, factory_of):
        spec = zero_coupling
        r = run_sro(make_factory(spec), spec.mixture, spec.strategy_config("sro"),
                    dynamics=spec.dynamics)
        peaks = {ds: p.peak_location for ds, p in spec.dynamics.tasks.items()}
        assert {ds: float(c) for ds, c in r.searched_peaks.items()} == peaks
        assert [(ds, float(at)) for ds, at in r.exclusions] == sorted(
            ((ds, p) for ds, p in peaks.items()), key=lambda t: (t[1], t[0])
        )

    def test_uniform_peaks_collapse_to_one_stage(self):
        mixture = make_mixture(3)
        dynamics = DynamicsConfig(
            tasks={ds: TaskCurveParams(0.2, 0.8, 2.0, 2.0, 1.0)
                   for ds in mixture.ids()}
        )
        cfg = StrategyConfig(
            strategy="sro", grid=ComputeGrid(3, Fraction(1, 4)),
            sro_search_budget=Fraction(4),
        )

        def factory():
            s = SimulatorSession(dynamics)
            s.init(mixture, 20)
            return s

        r = run_sro(factory, mixture, cfg, dynamics=dynamics)
        assert all(at == Fraction(2) for _, at in r.exclusions)
        marks = [e for e in r.trace.events if isinstance(e, StageMark)]
        assert [m.label for m in marks] == ["search", "train"]

    def test_coupling_moves_realized_argmax_off_schedule(self, fig4, factory_of):
        spec = fig4
        r = run_sro(make_factory(spec), spec.mixture, spec.strategy_config("sro"),
                    dynamics=spec.dynamics)
        # realized per-task best positions in stage 2 differ from the
        # searched schedule for at least one task
        moved = sum(
            1 for ds in spec.mixture.ids()
            if r.per_task_best[ds][0] != r.searched_peaks[ds]
        )
        assert moved >= 1


class TestSoftMixture:
    def test_hand_computed_two_task_case(self):
        mixture = MixtureSpec(
            subs=(
                SubDatasetSpec(id="a", name="a", size=100, train_tokens_per_epoch=10000,
                               eval_tokens=100),
                SubDatasetSpec(id="b", name="b", size=100, train_tokens_per_epoch=10000,
                               eval_tokens=100),
            )
        )
        peaks = {"a": Fraction(1), "b": Fraction(3)}
        resampled, weights = build_soft_mixture(mixture, peaks)
        # Z = 400, targets r_a = 200*100/400 = 50, r_b = 200*300/400 = 150
        assert resampled.by_id("a").size == 50
        assert resampled.by_id("b").size == 150
        assert weights["a"] == Fraction(1, 2)
        assert weights["b"] == Fraction(3, 2)

    def test_whole_copies_plus_sample(self):
        mixture = MixtureSpec(
            subs=(
                SubDatasetSpec(id="a", name="a", size=100, train_tokens_per_epoch=10000,
                               eval_tokens=100),
                SubDatasetSpec(id="b", name="b", size=100, train_tokens_per_epoch=10000,
                               eval_tokens=100),
            )
        )
        peaks = {"a": Fraction(5), "b": Fraction(3)}
        resampled, _ = build_soft_mixture(mixture, peaks)
        # r_a = 200*500/800 = 125 -> one full copy plus 25 sampled
        assert resampled.by_id("a").size == 125
        assert resampled.by_id("b").size == 75

    def test_uniform_peaks_preserve_mixture(self, zero_coupling):
        mixture = zero_coupling.mixture
        peaks = {ds: Fraction(2) for ds in mixture.ids()}
        resampled, weights = build_soft_mixture(mixture, peaks)
        for s in mixture.subs:
            assert resampled.by_id(s.id).size == s.size
            assert weights[s.id] == 1

    def test_nonpositive_peak_rejected(self, zero_coupling):
        peaks = {ds: Fraction(1) for ds in zero_coupling.mixture.ids()}
        peaks["task00"] = Fraction(0)
        with pytest.raises(SchedulerError):
            build_soft_mixture(zero_coupling.mixture, peaks)

    def test_deterministic_for_fixed_seed(self, fig4):
        peaks = {ds: Fraction(int(4 * p.peak_location), 4)
                 for ds, p in fig4.dynamics.tasks.items()}
        a = build_soft_mixture(fig4.mixture, peaks, seed=20)
        b = build_soft_mixture(fig4.mixture, peaks, seed=20)
        assert a == b


class TestRunSoftSro:
    def test_runs_without_exclusions(self, forgetting):
        spec = forgetting
        r = run_soft_sro(make_factory(spec), spec.mixture,
                         spec.strategy_config("soft-sro"), dynamics=spec.dynamics)
        assert r.exclusions == []
        assert r.resampled_mixture is not None
        assert sum(s.size for s in r.resampled_mixture.subs) <= spec.mixture.total_size()

    def test_uniform_peaks_match_plain_sft(self):
        mixture = make_mixture(3)
        dynamics = DynamicsConfig(
            tasks={ds: TaskCurveParams(0.2, 0.8, 2.0, 2.0, 1.0)
                   for ds in mixture.ids()}
        )
        cfg = StrategyConfig(
            strategy="soft-sro", grid=ComputeGrid(3, Fraction(1, 4)),
            sro_search_budget=Fraction(4),
        )

        def factory():
            s = SimulatorSession(dynamics)
            s.init(mixture, 20)
            return s

        r = run_soft_sro(factory, mixture, cfg, dynamics=dynamics)
        assert all(w == 1 for w in r.soft_weights.values())
        cfg_sft = StrategyConfig(strategy="sft", grid=cfg.grid, sft_epochs=Fraction(4))
        r_sft = run_sft(factory(), mixture, cfg_sft, dynamics=dynamics)
        assert r.global_best_metric == r_sft.global_best_metric


class TestDeltaStudy:
    def test_zero_coupling_all_shifts_zero(self, zero_coupling):
        spec = zero_coupling
        grid = ComputeGrid(spec.sro_search_budget, spec.grid.step)
        shifts, mean_abs = delta_cstar_study(make_factory(spec), spec.mixture, grid)
        assert mean_abs == 0.0
        assert all(v == 0 for v in shifts.values())

    def test_uniform_coupling_shift(self):
        mixture = make_mixture(3)
        ids = mixture.ids()
        tasks = {
            ids[0]: TaskCurveParams(0.2, 0.8, 1.0, 2.0, 1.0),
            ids[1]: TaskCurveParams(0.3, 0.9, 2.5, 2.0, 1.0),
            ids[2]: TaskCurveParams(0.25, 0.7, 3.0, 2.0, 1.0),
        }
        coupling = CouplingRule({
            (ids[0], ids[1]): Fraction(1, 2),
            (ids[0], ids[2]): Fraction(1, 2),
        })
        dynamics = DynamicsConfig(tasks=tasks, coupling=coupling)

        def factory():
            s = SimulatorSession(dynamics)
            s.init(mixture, 20)
            return s

        shifts, mean_abs = delta_cstar_study(factory, mixture, ComputeGrid(6, Fraction(1, 4)))
        assert shifts == {ids[1]: Fraction(1, 2), ids[2]: Fraction(1, 2)}
        assert mean_abs == 0.5

    def test_calibrated_preset_hits_target(self, fig4):
        spec = fig4
        grid = ComputeGrid(spec.sro_search_budget, spec.grid.step)
        _, mean_abs = delta_cstar_study(make_factory(spec), spec.mixture, grid)
        assert abs(mean_abs - 0.91) <= 0.1

    def test_no_bifurcation_is_error(self):
        mixture = make_mixture(2)
        dynamics = DynamicsConfig(
            tasks={ds: TaskCurveParams(0.2, 0.8, 20.0, 1.0, 1.0)
                   for ds in mixture.ids()}
        )

        def factory():
            s = SimulatorSession(dynamics)
            s.init(mixture, 20)
            return s

        with pytest.raises(SchedulerError, match="no bifurcation"):
            delta_cstar_study(factory, mixture, ComputeGrid(2, Fraction(1, 4)))


class TestForgettingDecomposition:
    def test_zero_drift_gives_all_zero(self, zero_coupling, factory_of):
        spec = zero_coupling
        r = run_msft(factory_of(spec)(), spec.mixture, spec.strategy_config("msft"),
                     dynamics=spec.dynamics)
        decomp = forgetting_decomposition(r)
        assert set(decomp) == set(spec.mixture.ids())
        assert all(v == 0.0 for v in decomp.values())

    def test_direct_subtraction(self, forgetting, factory_of):
        spec = forgetting
        r = run_msft(factory_of(spec)(), spec.mixture, spec.strategy_config("msft"),
                     dynamics=spec.dynamics)
        decomp = forgetting_decomposition(r)
        for ds, v in decomp.items():
            assert v == r.metrics_at_best[ds] - r.exclusion_metrics[ds]
        # negative drift means tasks excluded before the best point forget
        assert min(decomp.values()) < 0

    def test_positive_transfer_preset(self, factory_of):
        spec = load_preset("positive-transfer")
        r = run_msft(factory_of(spec)(), spec.mixture, spec.strategy_config("msft"),
                     dynamics=spec.dynamics)
        decomp = forgetting_decomposition(r)
        first = r.exclusions[0][0]
        assert decomp[first] > 0

    def test_never_excluded_task_omitted(self, zero_coupling, factory_of):
        spec = zero_coupling
        r = run_sft(factory_of(spec)(), spec.mixture, spec.strategy_config("sft"),
                    dynamics=spec.dynamics)
        assert forgetting_decomposition(r) == {}


class TestSroDivergence:
    def test_msft_beats_sro_with_coupling_and_drift(self, forgetting):
        spec = forgetting
        msft = run_msft(make_factory(spec)(), spec.mixture,
                        spec.strategy_config("msft"), dynamics=spec.dynamics)
        sro = run_sro(make_factory(spec), spec.mixture,
                      spec.strategy_config("sro"), dynamics=spec.dynamics)
        assert msft.global_best_metric > sro.global_best_metric
