"""End-to-end workflow: pretrain a base model, curate, align, evaluate.

Every stage writes its artifacts under one output directory. All CSV files
use fixed-precision numbers, so two runs with the same config and seed
produce byte-identical CSVs.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass

from . import plots
from .config import ExperimentConfig, to_text
from .dataworld import CurationResult, curate
from .errors import DataError
from .flowcore import load_checkpoint, save_checkpoint
from .trainlab import (METRIC_COLUMNS, compare_objectives, evaluate, make_eval_sets,
                       pretrain_base, run_alignment, sweep_beta, sweep_lambda)

PIPELINE_FILES = (
    "config.txt", "base.npz", "policy.npz", "preference_sets.json", "curation_scores.csv",
    "curation_audit.json", "run.csv", "run_header.json", "metrics.csv", "metrics.txt",
    "loss.svg", "delta.svg", "grad_norm.svg",
)

PILOT_NOTE = ("# objective.beta, train.lr and curate.n_candidates are desk-scale defaults "
              "picked by a pilot sweep; they are not transferred from large-model settings.\n")


def _write(out, name, text):
    path = os.path.join(out, name)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def _write_json(out, name, obj):
    return _write(out, name, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def metrics_csv(reports):
    """``{label: MetricReport}`` as CSV."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model",) + METRIC_COLUMNS)
    for label, rep in reports.items():
        w.writerow([label] + rep.row())
    return buf.getvalue()


def metrics_text(reports):
    lines = [f"{'model':<10}" + "".join(f"{c:>14}" for c in METRIC_COLUMNS)]
    for label, rep in reports.items():
        lines.append(f"{label:<10}" + "".join(f"{getattr(rep, c):>14.6f}" for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def build_reference(cfg):
    spec = cfg.scene_spec()
    return spec, pretrain_base(spec, cfg.pretrain_config())


def curate_stage(cfg, spec, reference):
    c = cfg.curate
    return curate(reference, spec, n_candidates=c.n_candidates, k_per_condition=c.k_per_condition,
                  threshold=c.threshold, seed=cfg.seed, bad_threshold=c.bad_threshold,
                  n_steps=c.n_steps, raise_on_empty=True)


def eval_sets_for(cfg, spec, curation):
    e = cfg.eval
    return make_eval_sets(spec, curation.good, n_heldout=e.n_heldout, n_noise=e.n_noise,
                          n_t=e.n_t, seed=cfg.seed, n_ode_steps=e.n_ode_steps)


def _prepare(cfg, out):
    os.makedirs(out, exist_ok=True)
    _write(out, "config.txt", PILOT_NOTE + to_text(cfg))
    spec, reference = build_reference(cfg)
    save_checkpoint(reference, os.path.join(out, "base.npz"))
    curation = curate_stage(cfg, spec, reference)
    curation.save(os.path.join(out, "preference_sets.json"), spec)
    _write(out, "curation_scores.csv", curation.scores_csv())
    _write_json(out, "curation_audit.json", curation.audit)
    return spec, reference, curation


@dataclass
class PipelineResult:
    out: str
    audit: dict
    base: object
    aligned: object
    run: object


def run_pipeline(cfg: ExperimentConfig, out=None):
    """pretrain → curate → align → evaluate, writing :data:`PIPELINE_FILES`."""
    out = out or cfg.out
    spec, reference, curation = _prepare(cfg, out)
    eval_sets = eval_sets_for(cfg, spec, curation)
    result = run_alignment(reference, curation, eval_sets, spec, cfg.train_config())
    policy = reference.with_adapter(cfg.train.adapter_rank, seed=cfg.seed)
    policy.set_params(result.record.final_params)
    save_checkpoint(policy, os.path.join(out, "policy.npz"))

    run_csv = result.record.to_csv()
    _write(out, "run.csv", run_csv)
    if result.record.eval_rows:
        _write(out, "run_eval.csv", result.record.eval_csv())
    _write_json(out, "run_header.json", result.record.header)
    base = evaluate(reference, reference, eval_sets, spec)
    reports = {"base": base, "aligned": result.report}
    _write(out, "metrics.csv", metrics_csv(reports))
    _write(out, "metrics.txt", metrics_text(reports))
    for name, svg in plots.run_plots(run_csv, cfg.objective.kind).items():
        _write(out, name, svg)
    return PipelineResult(out, curation.audit, base, result.report, result.record)


def run_curate(cfg, out=None):
    """pretrain → curate only."""
    out = out or cfg.out
    _, _, curation = _prepare(cfg, out)
    return curation


SWEEP_KINDS = ("beta", "lambda", "objectives")


def sweep_csv(results, param, values):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("label", param, "status", "final_param_dev") + METRIC_COLUMNS)
    for r, v in zip(results, values):
        w.writerow([r.label, f"{v:.6e}", r.status, f"{r.final_dev:.10e}"] + r.report.row())
    return buf.getvalue()


def run_sweep(cfg, kind, out=None, jobs=1):
    """Shared base model and curated set, one aligned run per sweep member."""
    if kind not in SWEEP_KINDS:
        raise ValueError(f"unknown sweep kind {kind!r}; expected one of {SWEEP_KINDS}")
    out = out or cfg.out
    spec, reference, curation = _prepare(cfg, out)
    eval_sets = eval_sets_for(cfg, spec, curation)
    tcfg = cfg.train_config()
    if kind == "objectives":
        cmp = compare_objectives(reference, curation, eval_sets, spec, tcfg,
                                 kinds=cfg.sweep.objectives,
                                 overrides={"ipa_halo": {"lam": cfg.sweep.halo_lambda}}, jobs=jobs)
        table = cmp.to_csv()
        _write(out, "sweep_objectives.csv", table)
        _write(out, "sweep_objectives.txt", cmp.to_text() + "\n")
        runs = [r for r in cmp.rows if r.record is not None]
    else:
        if kind == "beta":
            grid = cfg.sweep.beta_grid
            runs = sweep_beta(reference, curation, eval_sets, spec, tcfg, grid, jobs=jobs)
        else:
            grid = cfg.sweep.lambda_grid
            runs = sweep_lambda(reference, curation, eval_sets, spec, tcfg, grid, jobs=jobs)
        table = sweep_csv(runs, kind, grid)
        _write(out, f"sweep_{kind}.csv", table)
        _write(out, f"sweep_{kind}.svg", plots.sweep_plot(table, kind))
    member_csvs = {}
    for r in runs:
        member = os.path.join(out, "members", r.label.replace("=", "_"))
        os.makedirs(member, exist_ok=True)
        member_csvs[r.label] = r.record.to_csv()
        _write(member, "run.csv", member_csvs[r.label])
        _write_json(member, "run_header.json", r.record.header)
    for name, svg in plots.overlay_plots(member_csvs).items():
        _write(out, name, svg)
    return table


def run_evaluate(cfg, policy_path, reference_path, preference_path, out=None):
    """Recompute the metric report of a saved policy against a saved reference."""
    for p in (policy_path, reference_path, preference_path):
        if not os.path.exists(p):
            raise DataError(f"missing input file {p}")
    policy = load_checkpoint(policy_path)
    reference = load_checkpoint(reference_path)
    if reference.role != "reference":
        reference = reference.frozen()
    curation, spec = CurationResult.load(preference_path)
    if len(curation.good) == 0:
        raise DataError("preference file holds no curated samples")
    eval_sets = eval_sets_for(cfg, spec, curation)
    reports = {"base": evaluate(reference, reference, eval_sets, spec),
               "policy": evaluate(policy, reference, eval_sets, spec)}
    text = metrics_csv(reports)
    if out:
        os.makedirs(out, exist_ok=True)
        _write(out, "evaluation.csv", text)
    return reports
