"""Adaptive trial allocation driven by coefficient-of-variation stopping.

Each (sample, level) configuration is evaluated by probing `m_min` trials
and then drawing further trials one at a time until the combined CV of
accuracy and tokens drops below `tau`, capping at exactly `m_max` trials.
Alternatively a fixed total budget can be split across configurations in
proportion to their probe CVs, or every configuration can simply run a
uniform number of trials.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Protocol, Sequence

from .metrics import LevelOutcome, SampleTrajectory

__all__ = [
    "EPSILON",
    "TrialOutcome",
    "LevelStatistics",
    "ConvergenceConfig",
    "BudgetPlan",
    "EvaluationBackend",
    "ConfigurationResult",
    "EvaluationRun",
    "AdaptiveMode",
    "FixedBudgetMode",
    "NaiveMode",
    "RunMode",
    "SamplingStateError",
    "InfeasibleBudgetError",
    "ConfigurationError",
    "update_statistics",
    "combined_cv",
    "should_continue",
    "run_configuration",
    "allocate_budget",
    "run_evaluation",
    "parse_mode",
]

EPSILON = 1e-8  # CV denominator guard; keeps zero-mean statistics finite

# A proportional budget share that is integral in exact arithmetic can land
# one ulp below the integer in floats; nudge by this before flooring.
_FLOOR_GUARD = 1e-9


class SamplingStateError(RuntimeError):
    """An operation was invoked before the state it needs exists."""


class InfeasibleBudgetError(ValueError):
    """The total budget cannot cover the mandatory probe trials."""


class ConfigurationError(RuntimeError):
    """One configuration aborted after exhausting its trial retries."""

    def __init__(self, sample_id: str, level_index: int, stats: "LevelStatistics", cause: BaseException):
        super().__init__(
            f"configuration ({sample_id!r}, level {level_index}) failed after retries: {cause}"
        )
        self.sample_id = sample_id
        self.level_index = level_index
        self.stats = stats  # statistics over the trials completed before the abort


@dataclass(frozen=True)
class TrialOutcome:
    """One judged evaluation attempt."""

    correct: float  # in [0, 1]; typically 0/1 from a single judged attempt
    tokens: float  # completion tokens for the attempt, > 0


class EvaluationBackend(Protocol):
    """Anything that can produce one trial outcome per (sample, level, trial).

    Successive calls for the same (sample, level) must be independent draws;
    tokens must be strictly positive. Implementations must tolerate
    concurrent calls; per-configuration ordering is the sampler's job.
    """

    def evaluate(self, sample_id: str, level_index: int, trial_index: int) -> TrialOutcome: ...


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs)


def _pstd(xs: Sequence[float]) -> float:
    mu = _mean(xs)
    return math.sqrt(sum((x - mu) ** 2 for x in xs) / len(xs))


@dataclass(frozen=True)
class LevelStatistics:
    """Statistics over the retained trials of one configuration.

    Every derived value is recomputed from the retained trial tuple on
    access, so an instance built trial-by-trial is bit-identical to one
    built from the full list at once. Standard deviations are population
    (divisor k) estimates; CVs divide by mean + epsilon.
    """

    trials: tuple[TrialOutcome, ...] = ()
    epsilon: float = EPSILON

    def _require_trials(self) -> None:
        if not self.trials:
            raise SamplingStateError("statistics undefined with zero trials")

    @property
    def count(self) -> int:
        return len(self.trials)

    @property
    def mean_acc(self) -> float:
        self._require_trials()
        return _mean([t.correct for t in self.trials])

    @property
    def std_acc(self) -> float:
        self._require_trials()
        return _pstd([t.correct for t in self.trials])

    @property
    def mean_tok(self) -> float:
        self._require_trials()
        return _mean([t.tokens for t in self.trials])

    @property
    def std_tok(self) -> float:
        self._require_trials()
        return _pstd([t.tokens for t in self.trials])

    @property
    def cv_acc(self) -> float:
        return self.std_acc / (self.mean_acc + self.epsilon)

    @property
    def cv_tok(self) -> float:
        return self.std_tok / (self.mean_tok + self.epsilon)

    @property
    def cv_combined(self) -> float:
        return self.cv_acc + self.cv_tok

    @property
    def final(self) -> LevelOutcome:
        """Finalized outcome: the means over all retained trials."""
        return LevelOutcome(self.mean_acc, self.mean_tok)


def update_statistics(stats: LevelStatistics, trial: TrialOutcome) -> LevelStatistics:
    """Fold one more trial into the statistics (returns a new instance)."""
    return LevelStatistics(stats.trials + (trial,), stats.epsilon)


def combined_cv(stats: LevelStatistics) -> float:
    """Sum of the accuracy CV and the token CV."""
    if stats.count == 0:
        raise SamplingStateError("combined CV undefined with zero trials")
    return stats.cv_combined


@dataclass(frozen=True)
class ConvergenceConfig:
    """Stopping-rule parameters for adaptive sampling."""

    m_min: int = 3
    m_max: int = 10
    tau: float = 0.5
    epsilon: float = EPSILON  # fixed in practice; exposed for completeness

    def __post_init__(self) -> None:
        if self.m_min < 1:
            raise ValueError(f"m_min must be >= 1, got {self.m_min}")
        if self.m_max < self.m_min:
            raise ValueError(f"m_max ({self.m_max}) must be >= m_min ({self.m_min})")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")


def should_continue(stats: LevelStatistics, cfg: ConvergenceConfig) -> bool:
    """True while the configuration needs more trials.

    Continues while the combined CV is still at or above tau and fewer than
    m_max trials have run; total trials therefore never exceed m_max.
    """
    if stats.count < cfg.m_min:
        raise SamplingStateError(
            f"probing incomplete: {stats.count} of {cfg.m_min} trials collected"
        )
    return stats.cv_combined >= cfg.tau and stats.count < cfg.m_max


@dataclass(frozen=True)
class ConfigurationResult:
    """Everything learned about one (sample, level) configuration."""

    sample_id: str
    level_index: int
    k_star: int  # total retained trials
    final: LevelOutcome
    stats: LevelStatistics
    converged: bool  # final combined CV fell below tau
    zero_variance_probe: bool  # all probe trials were identical; CV gave no signal


# Called after each fresh trial with (sample_id, level_index, trial_index, outcome);
# replayed trials never re-fire it.
TrialCallback = Callable[[str, int, int, TrialOutcome], None]


def _draw_trial(
    backend: EvaluationBackend,
    sample_id: str,
    level_index: int,
    trial_index: int,
    retries: int,
    trials_so_far: Sequence[TrialOutcome],
    epsilon: float,
) -> TrialOutcome:
    # Failed attempts are re-tried with the same trial index and never count
    # toward the retained trial total.
    attempt = 0
    while True:
        try:
            return backend.evaluate(sample_id, level_index, trial_index)
        except Exception as exc:
            attempt += 1
            if attempt > retries:
                partial = LevelStatistics(tuple(trials_so_far), epsilon)
                raise ConfigurationError(sample_id, level_index, partial, exc) from exc


def _probe_is_flat(trials: Sequence[TrialOutcome], cfg: ConvergenceConfig) -> bool:
    probe = LevelStatistics(tuple(trials[: min(cfg.m_min, len(trials))]), cfg.epsilon)
    return probe.cv_combined == 0.0


def _finalize(
    sample_id: str,
    level_index: int,
    trials: Sequence[TrialOutcome],
    cfg: ConvergenceConfig,
) -> ConfigurationResult:
    stats = LevelStatistics(tuple(trials), cfg.epsilon)
    return ConfigurationResult(
        sample_id=sample_id,
        level_index=level_index,
        k_star=stats.count,
        final=stats.final,
        stats=stats,
        converged=stats.cv_combined < cfg.tau,
        zero_variance_probe=_probe_is_flat(trials, cfg),
    )


def run_configuration(
    backend: EvaluationBackend,
    sample_id: str,
    level_index: int,
    cfg: ConvergenceConfig,
    *,
    preloaded: Sequence[TrialOutcome] = (),
    trial_retries: int = 3,
    on_trial: TrialCallback | None = None,
) -> ConfigurationResult:
    """Adaptively sample one configuration to convergence.

    Probes `cfg.m_min` trials, then keeps drawing while `should_continue`
    says so. `preloaded` outcomes (e.g. replayed from a trace store) count
    as the earliest trials and are not re-drawn, which makes an interrupted
    run resumable without perturbing its decisions. `on_trial` fires once
    per fresh outcome.
    """
    trials: list[TrialOutcome] = list(preloaded)

    def draw() -> None:
        idx = len(trials)
        outcome = _draw_trial(backend, sample_id, level_index, idx, trial_retries, trials, cfg.epsilon)
        trials.append(outcome)
        if on_trial is not None:
            on_trial(sample_id, level_index, idx, outcome)

    while len(trials) < cfg.m_min:
        draw()
    while should_continue(LevelStatistics(tuple(trials), cfg.epsilon), cfg):
        draw()
    return _finalize(sample_id, level_index, trials, cfg)


@dataclass(frozen=True)
class BudgetPlan:
    """A fixed total budget split across configurations."""

    total_budget: int
    allocations: Mapping[tuple[str, int], int]  # (sample_id, level_index) -> trial count


def allocate_budget(
    probe_cvs: Mapping[tuple[str, int], float],
    n: int,
    J: int,
    cfg: ConvergenceConfig,
    B: int,
) -> BudgetPlan:
    """Split a total trial budget across n*J configurations by probe CV.

    Every configuration keeps its `m_min` probe trials; the residual budget
    is divided proportionally to each configuration's share of the summed
    CVs and floored. Whatever flooring left over goes out one extra trial
    at a time in descending CV order (ties broken by sample then level
    index) until exhausted. If every CV is zero the residual is spread
    uniformly instead.
    """
    minimum = n * J * cfg.m_min
    if B < minimum:
        raise InfeasibleBudgetError(
            f"budget {B} is below the minimum feasible {minimum} (n*J*m_min = {n}*{J}*{cfg.m_min})"
        )
    if len(probe_cvs) != n * J:
        raise ValueError(f"expected probe CVs for {n * J} configurations, got {len(probe_cvs)}")
    residual = B - minimum
    total_cv = sum(probe_cvs[key] for key in sorted(probe_cvs))
    allocations: dict[tuple[str, int], int] = {}
    for key in sorted(probe_cvs):
        if total_cv > 0:
            share = residual * (probe_cvs[key] / total_cv)
        else:
            share = residual / (n * J)
        allocations[key] = cfg.m_min + math.floor(share + _FLOOR_GUARD)
    leftover = B - sum(allocations.values())
    order = sorted(probe_cvs, key=lambda key: (-probe_cvs[key], key))
    i = 0
    while leftover > 0:
        allocations[order[i % len(order)]] += 1
        leftover -= 1
        i += 1
    return BudgetPlan(B, allocations)


@dataclass(frozen=True)
class AdaptiveMode:
    """Per-configuration CV-based stopping with the m_max cap."""

    def describe(self) -> str:
        return "adaptive"


@dataclass(frozen=True)
class FixedBudgetMode:
    """Probe everywhere, then allocate a fixed total budget by probe CV.

    Allocations may exceed m_max: the budget replaces the per-configuration
    cap in this mode.
    """

    budget: int | None = None  # None resolves to 5 * n * J at run time

    def describe(self) -> str:
        return "budget:default" if self.budget is None else f"budget:{self.budget}"


@dataclass(frozen=True)
class NaiveMode:
    """Exactly k trials per configuration; k=1 is the single-sampling baseline."""

    trials: int = 1

    def describe(self) -> str:
        return f"naive:{self.trials}"


RunMode = AdaptiveMode | FixedBudgetMode | NaiveMode


def parse_mode(text: str) -> RunMode:
    """Parse a mode string: 'adaptive', 'naive:K', or 'budget:B'."""
    name, _, arg = text.partition(":")
    name = name.strip().lower()
    if name == "adaptive":
        if arg:
            raise ValueError(f"mode 'adaptive' takes no argument, got {text!r}")
        return AdaptiveMode()
    if name == "naive":
        if not arg:
            raise ValueError("mode 'naive' needs a trial count, e.g. naive:1")
        return NaiveMode(int(arg))
    if name in ("budget", "fixed_budget"):
        return FixedBudgetMode(int(arg)) if arg else FixedBudgetMode()
    raise ValueError(f"unknown mode {text!r}; expected adaptive, naive:K, or budget:B")


@dataclass(frozen=True)
class EvaluationRun:
    """The outcome of one full evaluation across all configurations."""

    samples: tuple[str, ...]
    levels: tuple[str, ...]
    configurations: Mapping[tuple[str, int], ConfigurationResult]
    trajectories: tuple[SampleTrajectory, ...]

    @property
    def total_trials(self) -> int:
        return sum(r.k_star for r in self.configurations.values())

    @property
    def unconverged_count(self) -> int:
        return sum(1 for r in self.configurations.values() if not r.converged)


def _run_fixed(
    backend: EvaluationBackend,
    sample_id: str,
    level_index: int,
    target: int,
    cfg: ConvergenceConfig,
    preloaded: Sequence[TrialOutcome],
    trial_retries: int,
    on_trial: TrialCallback | None,
) -> ConfigurationResult:
    trials: list[TrialOutcome] = list(preloaded)
    while len(trials) < target:
        idx = len(trials)
        outcome = _draw_trial(backend, sample_id, level_index, idx, trial_retries, trials, cfg.epsilon)
        trials.append(outcome)
        if on_trial is not None:
            on_trial(sample_id, level_index, idx, outcome)
    return _finalize(sample_id, level_index, trials, cfg)


def run_evaluation(
    backend: EvaluationBackend,
    samples: Sequence[str],
    levels: Sequence[str],
    cfg: ConvergenceConfig,
    mode: RunMode,
    *,
    preloaded: Mapping[tuple[str, int], Sequence[TrialOutcome]] | None = None,
    trial_retries: int = 3,
    on_trial: TrialCallback | None = None,
    max_workers: int = 1,
) -> EvaluationRun:
    """Evaluate every (sample, level) configuration under the given mode.

    Modes: AdaptiveMode stops each configuration by CV; FixedBudgetMode
    probes m_min everywhere, then splits the budget (default 5*n*J) by
    probe CV; NaiveMode runs a uniform trial count. `preloaded` maps
    configurations to already-collected outcomes so a restarted run skips
    completed work. With max_workers > 1 distinct configurations execute
    concurrently; trials within a configuration stay strictly sequential.
    Output trajectories feed the metric functions unchanged.
    """
    samples = list(samples)
    levels = list(levels)
    if len(samples) < 1:
        raise ValueError("need at least one sample")
    if len(levels) < 2:
        raise ValueError(f"need at least 2 levels, got {len(levels)}")
    if len(set(samples)) != len(samples):
        raise ValueError("sample ids must be unique")
    pre = dict(preloaded) if preloaded else {}
    keys = [(sid, j) for sid in samples for j in range(len(levels))]

    def run_all(fn: Callable[[tuple[str, int]], ConfigurationResult]) -> dict[tuple[str, int], ConfigurationResult]:
        if max_workers > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                found = dict(zip(keys, pool.map(fn, keys)))
        else:
            found = {key: fn(key) for key in keys}
        return found

    if isinstance(mode, AdaptiveMode):
        results = run_all(
            lambda key: run_configuration(
                backend, key[0], key[1], cfg,
                preloaded=pre.get(key, ()), trial_retries=trial_retries, on_trial=on_trial,
            )
        )
    elif isinstance(mode, NaiveMode):
        if mode.trials < 1:
            raise ValueError(f"naive mode needs at least 1 trial, got {mode.trials}")
        results = run_all(
            lambda key: _run_fixed(
                backend, key[0], key[1], mode.trials, cfg,
                pre.get(key, ()), trial_retries, on_trial,
            )
        )
    elif isinstance(mode, FixedBudgetMode):
        n, J = len(samples), len(levels)
        budget = mode.budget if mode.budget is not None else 5 * n * J
        if budget < n * J * cfg.m_min:
            raise InfeasibleBudgetError(
                f"budget {budget} is below the minimum feasible {n * J * cfg.m_min} "
                f"(n*J*m_min = {n}*{J}*{cfg.m_min})"
            )
        probed = run_all(
            lambda key: _run_fixed(
                backend, key[0], key[1], cfg.m_min, cfg,
                pre.get(key, ()), trial_retries, on_trial,
            )
        )
        probe_cvs = {
            key: LevelStatistics(r.stats.trials[: cfg.m_min], cfg.epsilon).cv_combined
            for key, r in probed.items()
        }
        plan = allocate_budget(probe_cvs, n, J, cfg, budget)
        results = run_all(
            lambda key: _run_fixed(
                backend, key[0], key[1], plan.allocations[key], cfg,
                probed[key].stats.trials, trial_retries, on_trial,
            )
        )
    else:
        raise ValueError(f"unknown run mode: {mode!r}")

    trajectories = tuple(
        SampleTrajectory(sid, tuple(results[(sid, j)].final for j in range(len(levels))))
        for sid in samples
    )
    return EvaluationRun(tuple(samples), tuple(levels), results, trajectories)
