"""Command-line surface: run evaluations, recompute bundles, replicate studies, export report files.

Exit codes: 0 on success, 2 when a run is incomplete or aborted (resumable),
1 on validation errors. Output files are written to a temp sibling and
renamed on success, so a failed invocation leaves no partial artifacts.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import functools
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import click
import yaml

from .backend import BackendConfig, HttpBackend, dry_run, parse_tasks
from .sampling import (
    AdaptiveMode,
    ConfigurationError,
    ConvergenceConfig,
    FixedBudgetMode,
    NaiveMode,
    RunMode,
    parse_mode,
    run_evaluation,
)
from .simulator import SimulatorBackend, SyntheticModelSpec, replicate_study
from .store import (
    IncompleteRunError,
    ResultBundle,
    RunManifest,
    TraceStore,
    TrialRecordLine,
    write_atomic,
    write_curve_csv,
    write_results_csv,
    write_transitions_csv,
)

TABLE_COLUMNS = (
    "model",
    "benchmark",
    "arise",
    "scaling_metric",
    "n_samples",
    "n_levels",
    "unconverged_count",
)


@dataclass
class Options:
    seed: int | None
    fmt: str
    sm_x1000: bool


@dataclass(frozen=True)
class ReportTable:
    """Bundle summaries rendered as csv, markdown, or json."""

    rows: tuple[tuple[str, str, float, float, int, int, int], ...]

    @classmethod
    def from_bundles(cls, bundles: Sequence[ResultBundle], sm_scale: float = 1.0) -> "ReportTable":
        return cls(
            tuple(
                (
                    b.manifest.model or "unknown",
                    b.manifest.benchmark or "unknown",
                    b.aggregate_arise,
                    b.scaling_metric * sm_scale,
                    b.n_samples,
                    b.n_levels,
                    b.unconverged_count,
                )
                for b in bundles
            )
        )

    def render(self, fmt: str) -> str:
        # metric columns always carry 6 decimal places
        formatted = [
            (model, bench, f"{arise:.6f}", f"{sm:.6f}", str(ns), str(nl), str(uc))
            for model, bench, arise, sm, ns, nl, uc in self.rows
        ]
        if fmt == "csv":
            lines = [",".join(TABLE_COLUMNS)]
            lines += [",".join(row) for row in formatted]
            return "\n".join(lines)
        if fmt == "json":
            return json.dumps(
                [
                    {col: _json_cell(col, cell) for col, cell in zip(TABLE_COLUMNS, row)}
                    for row in formatted
                ],
                indent=2,
            )
        widths = [
            max(len(col), *(len(row[i]) for row in formatted)) if formatted else len(col)
            for i, col in enumerate(TABLE_COLUMNS)
        ]
        header = "| " + " | ".join(col.ljust(w) for col, w in zip(TABLE_COLUMNS, widths)) + " |"
        rule = "| " + " | ".join("-" * w for w in widths) + " |"
        body = [
            "| " + " | ".join(cell.ljust(w) for cell, w in zip(row, widths)) + " |"
            for row in formatted
        ]
        return "\n".join([header, rule, *body])


def _json_cell(column: str, cell: str) -> object:
    if column in ("arise", "scaling_metric"):
        return float(cell)
    if column in ("n_samples", "n_levels", "unconverged_count"):
        return int(cell)
    return cell


def _now_rfc3339() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def guarded(fn: Callable) -> Callable:
    """Map domain errors onto the exit-code contract."""

    @functools.wraps(fn)
    def wrapper(*args: object, **kwargs: object) -> None:
        try:
            fn(*args, **kwargs)
        except (IncompleteRunError, ConfigurationError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except (ValueError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


@click.group()
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None,
              help="Base seed; overrides the seed in simulator specs.")
@click.option("--format", "fmt", type=click.Choice(["csv", "markdown", "json"]),
              default="markdown", show_default=True, help="Table output format.")
@click.option("--sm-x1000", is_flag=True,
              help="Display the scaling metric multiplied by 1000.")
@click.pass_context
def main(ctx: click.Context, seed: int | None, fmt: str, sm_x1000: bool) -> None:
    """Quantify test-time scaling from per-sample evaluation trajectories."""
    ctx.obj = Options(seed=seed, fmt=fmt, sm_x1000=sm_x1000)


def _locate_run(traces: Path, run_id: str | None) -> tuple[Path, str]:
    if traces.is_file():
        return traces.parent, traces.name.removesuffix(".jsonl")
    store = TraceStore(traces)
    runs = store.run_ids()
    if run_id is not None:
        if run_id not in runs:
            raise IncompleteRunError(run_id, f"not found under {traces}")
        return traces, run_id
    if not runs:
        raise IncompleteRunError("?", f"no runs found under {traces}")
    if len(runs) > 1:
        raise ValueError(f"multiple runs under {traces}: {runs}; pick one with --run-id")
    return traces, runs[0]


@main.command()
@click.argument("traces", type=click.Path(exists=True, path_type=Path))
@click.option("--run-id", default=None, help="Run to recompute when the store holds several.")
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Bundle destination (default: <store>/<run_id>.bundle.json).")
@click.pass_obj
@guarded
def compute(opts: Options, traces: Path, run_id: str | None, out: Path | None) -> None:
    """Recompute a result bundle from stored trial records."""
    root, rid = _locate_run(traces, run_id)
    store = TraceStore(root)
    bundle = store.recompute(rid)
    destination = out if out is not None else store.bundle_path(rid)
    write_atomic(destination, bundle.to_json())
    scale = 1000.0 if opts.sm_x1000 else 1.0
    click.echo(ReportTable.from_bundles([bundle], scale).render(opts.fmt))
    click.echo(f"bundle written to {destination}", err=True)


def _load_run_config(path: Path) -> dict:
    data = yaml.safe_load(path.read_text())
    if not isinstance(data, dict):
        raise ValueError(f"run config {path} is not a mapping")
    return data


def _pick_mode(adaptive: bool, budget: int | None, naive: int | None) -> RunMode:
    chosen = [name for name, on in (("--adaptive", adaptive), ("--budget", budget is not None),
                                    ("--naive", naive is not None)) if on]
    if len(chosen) > 1:
        raise ValueError(f"pick one evaluation mode, got {' and '.join(chosen)}")
    if budget is not None:
        return FixedBudgetMode(budget)
    if naive is not None:
        return NaiveMode(naive)
    return AdaptiveMode()


def _mode_fields(mode: RunMode) -> tuple[str, int | None, int | None]:
    if isinstance(mode, FixedBudgetMode):
        return "fixed_budget", mode.budget, None
    if isinstance(mode, NaiveMode):
        return "naive", None, mode.trials
    return "adaptive", None, None


def _manifest_mode(manifest: RunManifest) -> RunMode:
    if manifest.mode == "fixed_budget":
        return FixedBudgetMode(manifest.budget)
    if manifest.mode == "naive":
        return NaiveMode(manifest.trials if manifest.trials is not None else 1)
    return AdaptiveMode()


@main.command()
@click.argument("config", type=click.Path(exists=True, path_type=Path))
@click.option("--adaptive", is_flag=True, help="CV-based stopping per configuration (default).")
@click.option("--budget", type=int, default=None, help="Fixed total trial budget.")
@click.option("--naive", type=int, default=None, help="Uniform trial count per configuration.")
@click.option("--out", type=click.Path(path_type=Path), default=Path("runs"),
              show_default=True, help="Trace store root.")
@click.option("--run-id", default=None, help="Run identifier (default: timestamp-derived).")
@click.option("--resume", is_flag=True, help="Skip configurations already stored for --run-id.")
@click.option("--model", default=None, help="Model name recorded in the manifest.")
@click.option("--benchmark", default=None, help="Benchmark name recorded in the manifest.")
@click.option("--m-min", type=int, default=3, show_default=True)
@click.option("--m-max", type=int, default=10, show_default=True)
@click.option("--tau", type=float, default=0.5, show_default=True)
@click.option("--dry-run", "dry", is_flag=True, help="Render backend requests without running.")
@click.option("--probe", is_flag=True, help="With --dry-run: send one probe request.")
@click.pass_obj
@guarded
def run(opts: Options, config: Path, adaptive: bool, budget: int | None, naive: int | None,
        out: Path, run_id: str | None, resume: bool, model: str | None, benchmark: str | None,
        m_min: int, m_max: int, tau: float, dry: bool, probe: bool) -> None:
    """Run an evaluation against a simulator spec or an HTTP backend config."""
    data = _load_run_config(config)
    is_simulator = "samples" in data and "base_url" not in data

    if dry:
        if is_simulator:
            raise ValueError("--dry-run applies to HTTP backend configs only")
        report = dry_run(BackendConfig.from_dict(data["backend"] if "backend" in data else data),
                         probe=probe)
        for level_request in report.requests:
            click.echo(json.dumps(level_request, indent=2))
        if report.unresolved:
            click.echo(f"unresolved placeholders: {list(report.unresolved)}", err=True)
        if report.probe_error:
            click.echo(f"probe failed: {report.probe_error}", err=True)
        elif report.probe_tokens is not None:
            click.echo(f"probe resolved {report.usage_path} -> {report.probe_tokens}", err=True)
        sys.exit(0 if report.ok else 1)

    store = TraceStore(out)
    cfg = ConvergenceConfig(m_min=m_min, m_max=m_max, tau=tau)
    mode = _pick_mode(adaptive, budget, naive)

    if is_simulator:
        spec = SyntheticModelSpec.from_dict(data)
        if opts.seed is not None:
            spec = dataclasses.replace(spec, seed=opts.seed)
        backend = SimulatorBackend(spec)
        samples = list(spec.sample_ids)
        labels = [f"level{j}" for j in range(spec.n_levels)]
        seed = spec.seed
        model = model or "simulator"
    else:
        backend_cfg = BackendConfig.from_dict(data["backend"] if "backend" in data else data)
        tasks = parse_tasks(data.get("tasks", []))
        if not tasks:
            raise ValueError("backend run config has no tasks")
        backend = HttpBackend(backend_cfg, tasks)
        samples = [t.sample_id for t in tasks]
        labels = list(backend_cfg.level_labels)
        seed = opts.seed
        model = model or backend_cfg.model
    benchmark = benchmark or config.stem

    preloaded = None
    if resume:
        if run_id is None:
            raise ValueError("--resume needs --run-id")
        if adaptive or budget is not None or naive is not None:
            raise ValueError("--resume takes the mode from the stored manifest; drop the mode flags")
        manifest = store.read_manifest(run_id)
        cfg = manifest.cfg
        mode = _manifest_mode(manifest)
        preloaded = store.completed_trials(run_id)
        manifest = dataclasses.replace(manifest, status="running")
    else:
        if run_id is None:
            run_id = "run-" + dt.datetime.now(dt.timezone.utc).strftime("%Y%m%d-%H%M%S-%f")
        mode_name, mode_budget, mode_trials = _mode_fields(mode)
        manifest = RunManifest(
            run_id=run_id,
            mode=mode_name,
            cfg=cfg,
            levels=tuple(labels),
            n_samples=len(samples),
            started_at=_now_rfc3339(),
            status="running",
            budget=mode_budget,
            trials=mode_trials,
            seed=seed,
            model=model,
            benchmark=benchmark,
        )
    run_id = manifest.run_id

    # fail fast on infeasible budgets, before any state is written
    if isinstance(mode, FixedBudgetMode) and mode.budget is not None:
        minimum = len(samples) * len(labels) * cfg.m_min
        if mode.budget < minimum:
            raise ValueError(
                f"budget {mode.budget} is below the minimum feasible {minimum} "
                f"(n*J*m_min = {len(samples)}*{len(labels)}*{cfg.m_min})"
            )

    store.write_manifest(manifest)

    def on_trial(sample_id: str, level_index: int, trial_index: int, outcome) -> None:
        store.append_trial(
            TrialRecordLine(
                run_id=run_id,
                model=manifest.model or "unknown",
                sample_id=sample_id,
                level_index=level_index,
                level_label=labels[level_index],
                trial_index=trial_index,
                correct=outcome.correct,
                completion_tokens=int(round(outcome.tokens)),
                timestamp=_now_rfc3339(),
                meta={},
            )
        )

    try:
        run_evaluation(backend, samples, labels, cfg, mode,
                       preloaded=preloaded, on_trial=on_trial)
    except ConfigurationError:
        store.write_manifest(dataclasses.replace(manifest, status="failed"))
        store.close()
        raise
    store.close()
    store.write_manifest(dataclasses.replace(manifest, status="complete"))
    bundle = store.recompute(run_id)
    write_atomic(store.bundle_path(run_id), bundle.to_json())
    scale = 1000.0 if opts.sm_x1000 else 1.0
    click.echo(ReportTable.from_bundles([bundle], scale).render(opts.fmt))
    click.echo(f"run {run_id} complete; bundle at {store.bundle_path(run_id)}", err=True)


@main.command()
@click.argument("spec", type=click.Path(exists=True, path_type=Path))
@click.option("--runs", "-r", type=int, default=5, show_default=True,
              help="Replications per mode.")
@click.option("--modes", "-m", multiple=True, default=("adaptive",), show_default=True,
              help="Repeatable: adaptive, naive:K, or budget:B.")
@click.option("--m-min", type=int, default=3, show_default=True)
@click.option("--m-max", type=int, default=10, show_default=True)
@click.option("--tau", type=float, default=0.5, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Per-run CSV (mode, run, arise, scaling_metric, trials, unconverged).")
@click.pass_obj
@guarded
def simulate(opts: Options, spec: Path, runs: int, modes: tuple[str, ...],
             m_min: int, m_max: int, tau: float, out: Path | None) -> None:
    """Replicate a study on the synthetic backend and summarize stability."""
    model_spec = SyntheticModelSpec.from_file(spec)
    cfg = ConvergenceConfig(m_min=m_min, m_max=m_max, tau=tau)
    parsed = [parse_mode(m) for m in modes]
    report = replicate_study(model_spec, cfg, parsed, runs, base_seed=opts.seed)

    sm_scale = 1000.0 if opts.sm_x1000 else 1.0
    headers = ("mode", "arise_mean", "arise_std", "arise_cv",
               "sm_mean", "sm_std", "sm_cv", "total_trials", "unconverged")
    rows = [
        (
            study.mode,
            f"{study.arise_mean:.6f}",
            f"{study.arise_std:.6f}",
            f"{study.arise_cv:.6f}",
            f"{study.scaling_mean * sm_scale:.6f}",
            f"{study.scaling_std * sm_scale:.6f}",
            f"{study.scaling_cv:.6f}",
            str(study.total_trials),
            str(sum(study.unconverged)),
        )
        for study in report.modes
    ]
    click.echo(_render_rows(headers, rows, opts.fmt))

    if out is not None:
        lines = ["mode,run,arise,scaling_metric,trials,unconverged"]
        for study in report.modes:
            for r in range(report.replications):
                lines.append(
                    f"{study.mode},{r},{study.arise[r]!r},{study.scaling[r]!r},"
                    f"{study.trials[r]},{study.unconverged[r]}"
                )
        write_atomic(out, "\n".join(lines) + "\n")
        click.echo(f"per-run rows written to {out}", err=True)


def _render_rows(headers: Sequence[str], rows: Sequence[Sequence[str]], fmt: str) -> str:
    if fmt == "csv":
        return "\n".join([",".join(headers), *(",".join(r) for r in rows)])
    if fmt == "json":
        return json.dumps([dict(zip(headers, r)) for r in rows], indent=2)
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    out = ["| " + " | ".join(h.ljust(w) for h, w in zip(headers, widths)) + " |",
           "| " + " | ".join("-" * w for w in widths) + " |"]
    out += ["| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |" for r in rows]
    return "\n".join(out)


@main.command()
@click.argument("bundles", nargs=-1, required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--curves", is_flag=True, help="Write a scaling-curve CSV per bundle.")
@click.option("--transitions", is_flag=True, help="Write a transition-count CSV per bundle.")
@click.option("--results-csv", type=click.Path(path_type=Path), default=None,
              help="Write the summary table as CSV to this path.")
@click.option("--out-dir", type=click.Path(path_type=Path), default=Path("."),
              show_default=True, help="Destination for exported CSVs.")
@click.pass_obj
@guarded
def report(opts: Options, bundles: tuple[Path, ...], curves: bool, transitions: bool,
           results_csv: Path | None, out_dir: Path) -> None:
    """Render bundle summaries and export curve/transition CSVs."""
    loaded = [ResultBundle.from_json(p.read_text()) for p in bundles]
    scale = 1000.0 if opts.sm_x1000 else 1.0
    click.echo(ReportTable.from_bundles(loaded, scale).render(opts.fmt))
    out_dir.mkdir(parents=True, exist_ok=True)
    if results_csv is not None:
        write_results_csv(results_csv, loaded, sm_scale=scale)
        click.echo(f"results table written to {results_csv}", err=True)
    for bundle in loaded:
        rid = bundle.manifest.run_id
        if curves:
            path = out_dir / f"{rid}.curve.csv"
            write_curve_csv(path, bundle)
            click.echo(f"curve written to {path}", err=True)
        if transitions:
            path = out_dir / f"{rid}.transitions.csv"
            write_transitions_csv(path, bundle)
            click.echo(f"transitions written to {path}", err=True)


if __name__ == "__main__":
    main()
