"""Training loops, telemetry, metrics and ablation sweeps.

A run aligns a policy (reference + zero-initialised adapter) on a curated
preference set with one of the objectives in :mod:`ipalab.objectives`.
Each step logs the training loss, a KL-gap estimate on a fixed evaluation
batch, the gradient norm and the distance of the trainable parameters from
their initial values.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import objectives as obj
from .dataworld import corrupt_hands, generate_dataset, hand_mask, quality_score
from .errors import DivergenceError, NonFiniteError
from .flowcore import FlowBatch, VelocityField, fm_loss, sample_ode

RUN_COLUMNS = ("step", "loss", "delta", "delta_se", "grad_norm", "param_dev")
METRIC_COLUMNS = ("alignment", "retention", "hand_err", "body_err", "delta_final",
                  "delta_se", "hand_quality")


class Adam:
    """Adam with bias correction; state is plain arrays so runs are reproducible."""

    def __init__(self, n, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.k = 0

    def step(self, params, grad):
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.k)
        vhat = self.v / (1 - self.b2 ** self.k)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, n, lr):
        self.lr = lr

    def step(self, params, grad):
        return params - self.lr * grad


def make_optimizer(kind, n, lr):
    if kind == "adam":
        return Adam(n, lr)
    if kind == "sgd":
        return SGD(n, lr)
    raise ValueError(f"unknown optimizer {kind!r}")


# base model


@dataclass(frozen=True)
class PretrainConfig:
    n_data: int = 20000
    steps: int = 8000
    batch_size: int = 256
    lr: float = 2e-3
    corruption_prob: float = 0.5
    hidden: tuple = (64, 64, 64)
    seed: int = 0


def corrupted_training_data(spec, n, corruption_prob, seed):
    """Clean data with a random fraction of hands corrupted at uniform severity."""
    z, c = generate_dataset(spec, n, seed=seed)
    rng = np.random.default_rng([seed, 0xBAD])
    hit = rng.uniform(size=n) < corruption_prob
    severity = np.where(hit, rng.uniform(size=n), 0.0)
    return corrupt_hands(z, spec, severity, seed=rng, c=c), c


def pretrain_base(spec, config=PretrainConfig()):
    """Fit a velocity field with plain flow matching on partly corrupted data.

    Returns the model in the reference role.
    """
    z1_all, c_all = corrupted_training_data(spec, config.n_data, config.corruption_prob,
                                            config.seed)
    model = VelocityField.init(spec.dim, spec.cond_total, hidden=config.hidden, seed=config.seed)
    rng = np.random.default_rng([config.seed, 0xF10])
    opt = Adam(model.n_params, config.lr)
    params = model.get_params()
    for step in range(config.steps):
        idx = rng.integers(0, config.n_data, config.batch_size)
        z0 = rng.standard_normal((config.batch_size, spec.dim))
        t = rng.uniform(size=config.batch_size)
        batch = FlowBatch.from_endpoints(z0, z1_all[idx], t, c_all[idx])
        _, grad = fm_loss(model, batch)
        # cosine decay keeps the final base model stable
        lr_scale = 0.5 * (1 + math.cos(math.pi * step / config.steps))
        opt.lr = config.lr * lr_scale
        params = opt.step(params, grad)
        model.set_params(params)
    model.meta.update({"pretrain": {k: list(v) if isinstance(v, tuple) else v
                                    for k, v in asdict(config).items()},
                       "spec": spec.to_dict()})
    return model.frozen()


# evaluation


@dataclass
class EvalSets:
    """Fixed evaluation data: curated samples, held-out clean samples, fixed noise and t-grid."""

    pref_z1: np.ndarray
    pref_c: np.ndarray
    heldout_z1: np.ndarray
    heldout_c: np.ndarray
    t_grid: np.ndarray
    pref_noise: np.ndarray
    heldout_noise: np.ndarray
    sample_noise: np.ndarray
    mask: np.ndarray
    n_ode_steps: int = 32


def make_eval_sets(spec, preference, n_heldout=256, n_noise=4, n_t=16, seed=0, n_ode_steps=32):
    if len(preference) == 0:
        raise ValueError("empty preference set")
    rng = np.random.default_rng([seed, 0xE7A1])
    hz, hc = generate_dataset(spec, n_heldout, seed=int(rng.integers(2 ** 31)))
    return EvalSets(
        pref_z1=preference.z1.copy(), pref_c=preference.c.copy(),
        heldout_z1=hz, heldout_c=hc,
        t_grid=(np.arange(n_t) + 0.5) / n_t,
        pref_noise=rng.standard_normal((n_noise, len(preference), spec.dim)),
        heldout_noise=rng.standard_normal((n_noise, n_heldout, spec.dim)),
        sample_noise=rng.standard_normal((n_heldout, spec.dim)),
        mask=hand_mask(spec),
    )


def _grid_batch(z1, c, noise, t_grid):
    """All (noise draw, sample, t) combinations as one FlowBatch."""
    k, n, d = noise.shape
    m = t_grid.size
    z1r = np.broadcast_to(z1, (k, n, d)).reshape(-1, d)
    z0 = noise.reshape(-1, d)
    cr = np.broadcast_to(c, (k, n, c.shape[1])).reshape(-1, c.shape[1])
    t = np.repeat(t_grid, k * n)
    return FlowBatch.from_endpoints(np.tile(z0, (m, 1)), np.tile(z1r, (m, 1)), t,
                                    np.tile(cr, (m, 1)))


@dataclass
class MetricReport:
    alignment: float
    retention: float
    hand_err: float
    body_err: float
    delta_final: float
    delta_se: float
    hand_quality: float

    def row(self):
        return [f"{getattr(self, k):.10e}" for k in METRIC_COLUMNS]


def delta_on_batch(policy, reference, batch):
    d = obj.delta_integrand(policy, reference, batch)
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(d.size))


def evaluate(policy, reference, eval_sets, spec):
    """Metric suite on fixed held-out data (midpoint t-grid quadrature)."""
    if eval_sets.pref_z1.shape[0] == 0 or eval_sets.heldout_z1.shape[0] == 0:
        raise ValueError("empty evaluation set")
    pref = _grid_batch(eval_sets.pref_z1, eval_sets.pref_c, eval_sets.pref_noise, eval_sets.t_grid)
    held = _grid_batch(eval_sets.heldout_z1, eval_sets.heldout_c, eval_sets.heldout_noise,
                       eval_sets.t_grid)
    align = float(np.mean(np.sum((policy.predict(pref.zt, pref.t, pref.c) - pref.v) ** 2, axis=1)))
    sq = (policy.predict(held.zt, held.t, held.c) - held.v) ** 2
    hand = float(np.mean(sq @ eval_sets.mask))
    body = float(np.mean(sq @ (1.0 - eval_sets.mask)))
    delta, se = delta_on_batch(policy, reference, pref)
    samples = sample_ode(policy, eval_sets.sample_noise, eval_sets.heldout_c, eval_sets.n_ode_steps)
    quality = float(quality_score(samples, eval_sets.heldout_c, spec).value.mean())
    report = MetricReport(align, hand + body, hand, body, delta, se, quality)
    if not all(np.isfinite(getattr(report, k)) for k in METRIC_COLUMNS):
        raise NonFiniteError("non-finite metric")
    return report


# training


@dataclass(frozen=True)
class TrainConfig:
    objective: obj.ObjectiveConfig = field(default_factory=obj.ObjectiveConfig)
    steps: int = 1000
    batch_size: int = 64
    lr: float = 3e-3
    optimizer: str = "adam"
    seed: int = 0
    adapter_rank: int = 8
    eval_every: int = 0
    delta_batch: int = 256

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class RunRecord:
    header: dict
    rows: list = field(default_factory=list)
    eval_rows: list = field(default_factory=list)
    status: str = "ok"
    final_params: np.ndarray | None = None

    def column(self, name):
        return np.array([r[RUN_COLUMNS.index(name)] for r in self.rows], dtype=np.float64)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for r in self.rows:
            w.writerow([r[0]] + [f"{x:.10e}" for x in r[1:]])
        return buf.getvalue()

    def eval_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("step",) + METRIC_COLUMNS)
        for step, rep in self.eval_rows:
            w.writerow([step] + rep.row())
        return buf.getvalue()


def _weight_for(config, mask):
    kind, lam = config.kind, config.lam
    if kind == "ipa":
        return None
    if kind == "ipa_halo" or lam > 0:
        return obj.make_spatial_weight(mask, lam)
    return None


def _draw(pset, idx, z0, t):
    return FlowBatch.from_endpoints(z0, pset.z1[idx], t, pset.c[idx], pset.mask[idx])


def train(policy, reference, data, config, bad=None, winners=None, losers=None,
          eval_sets=None, spec=None):
    """Optimise ``policy`` in place on ``data`` and return the telemetry.

    ``bad`` (KTO) and ``winners``/``losers`` (paired DPO) are only needed by
    those objectives. The reference is never written to.
    """
    if reference.role != "reference":
        raise ValueError("reference must be frozen (reference role)")
    ocfg = config.objective
    kind = ocfg.kind
    if len(data) == 0 and kind != "paired_dpo":
        raise ValueError("empty preference set")
    if kind == "kto" and (bad is None or len(bad) == 0):
        raise ValueError("kto needs a non-empty bad set")
    if kind == "paired_dpo" and (winners is None or len(winners) == 0):
        raise ValueError("paired_dpo needs at least one strict pair")

    rng = np.random.default_rng([config.seed, 0x7A1])
    dim = policy.dim
    mask = data.mask[0] if len(data) else winners.mask[0]
    weight = _weight_for(ocfg, mask)

    pool = winners if kind == "paired_dpo" else data
    n_fixed = config.delta_batch
    fixed = _draw(pool, rng.integers(0, len(pool), n_fixed), rng.standard_normal((n_fixed, dim)),
                  (np.arange(n_fixed) + 0.5) / n_fixed)

    params0 = policy.get_params()
    params = params0.copy()
    opt = make_optimizer(config.optimizer, params.size, config.lr)
    header = {
        "objective": asdict(ocfg),
        "steps": config.steps, "batch_size": config.batch_size, "lr": config.lr,
        "optimizer": config.optimizer, "seed": config.seed, "adapter_rank": config.adapter_rank,
        "n_good": len(data), "n_bad": 0 if bad is None else len(bad),
        "n_pairs": 0 if winners is None else len(winners),
    }
    record = RunRecord(header=header)
    bs = config.batch_size

    for step in range(config.steps):
        z0 = rng.standard_normal((bs, dim))
        t = rng.uniform(size=bs)
        try:
            if kind == "paired_dpo":
                idx = rng.integers(0, len(winners), bs)
                loss, grad = obj.paired_dpo_loss(policy, reference, _draw(winners, idx, z0, t),
                                                 _draw(losers, idx, z0, t), ocfg, weight)
            else:
                batch = _draw(data, rng.integers(0, len(data), bs), z0, t)
                if kind in ("ipa", "ipa_halo"):
                    loss, grad = obj.ipa_loss(policy, reference, batch, ocfg, weight)
                elif kind == "pos_dpo":
                    loss, grad = obj.pos_dpo_loss(policy, reference, batch, ocfg, weight)
                elif kind == "sft":
                    loss, grad = obj.sft_loss(policy, batch, weight)
                elif kind == "sft_l2":
                    loss, grad = obj.sft_l2_anchor_loss(policy, reference, batch,
                                                        ocfg.anchor_coeff, weight)
                else:
                    bad_batch = _draw(bad, rng.integers(0, len(bad), bs),
                                      rng.standard_normal((bs, dim)), rng.uniform(size=bs))
                    nr = ocfg.kto_ref_size
                    ref_batch = _draw(data, rng.integers(0, len(data), nr),
                                      rng.standard_normal((nr, dim)), rng.uniform(size=nr))
                    loss, grad = obj.kto_loss(policy, reference, batch, bad_batch, ocfg,
                                              weight, ref_batch=ref_batch)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise NonFiniteError(f"non-finite loss at step {step}", step=step)
        except NonFiniteError as exc:
            policy.set_params(params)
            record.rows.append((step, float("nan"), float("nan"), float("nan"),
                                float("nan"), float(np.linalg.norm(params - params0))))
            record.status = "diverged"
            record.final_params = params.copy()
            raise DivergenceError(str(exc), record=record) from exc

        delta, delta_se = delta_on_batch(policy, reference, fixed)
        record.rows.append((step, loss, delta, delta_se, float(np.linalg.norm(grad)),
                            float(np.linalg.norm(params - params0))))
        if config.eval_every and eval_sets is not None and step % config.eval_every == 0:
            record.eval_rows.append((step, evaluate(policy, reference, eval_sets, spec)))
        params = opt.step(params, grad)
        policy.set_params(params)

    record.final_params = params.copy()
    if config.eval_every and eval_sets is not None:
        record.eval_rows.append((config.steps, evaluate(policy, reference, eval_sets, spec)))
    return record


@dataclass
class RunResult:
    label: str
    config: TrainConfig
    record: RunRecord
    report: MetricReport
    final_dev: float
    status: str = "ok"


def run_alignment(reference, curation, eval_sets, spec, config, label=""):
    """Fresh adapter on ``reference``, train, evaluate."""
    policy = reference.with_adapter(config.adapter_rank, seed=config.seed)
    p0 = policy.get_params()
    record = train(policy, reference, curation.good, config, bad=curation.unpaired_bad,
                   winners=curation.winners, losers=curation.losers,
                   eval_sets=eval_sets, spec=spec)
    final_dev = float(np.linalg.norm(policy.get_params() - p0))
    record.header["final_param_dev"] = final_dev
    report = evaluate(policy, reference, eval_sets, spec)
    return RunResult(label or config.objective.kind, config, record, report, final_dev)


def _run_job(args):
    return run_alignment(*args)


def _map_runs(jobs, arg_list):
    if jobs <= 1 or len(arg_list) <= 1:
        return [_run_job(a) for a in arg_list]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_job, arg_list))


def sweep_beta(reference, curation, eval_sets, spec, config, beta_grid, jobs=1):
    """One run per beta with shared seed and data."""
    args = []
    for beta in beta_grid:
        cfg = replace(config, objective=replace(config.objective, beta=float(beta)))
        args.append((reference, curation, eval_sets, spec, cfg, f"beta={beta:g}"))
    return _map_runs(jobs, args)


def sweep_lambda(reference, curation, eval_sets, spec, config, lambda_grid, jobs=1):
    """One HALO-weighted IPA run per lambda with shared seed and data."""
    args = []
    for lam in lambda_grid:
        ocfg = replace(config.objective, kind="ipa_halo", lam=float(lam))
        args.append((reference, curation, eval_sets, spec, replace(config, objective=ocfg),
                     f"lambda={lam:g}"))
    return _map_runs(jobs, args)


COMPARE_KINDS = ("ipa", "ipa_halo", "sft", "sft_l2", "pos_dpo", "kto", "paired_dpo")


@dataclass
class Comparison:
    rows: list
    base: MetricReport
    pair_yield: int

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("objective", "status", "pair_yield", "bad_used", "final_param_dev")
                   + METRIC_COLUMNS)
        w.writerow(["base", "ok", self.pair_yield, 0, f"{0.0:.10e}"] + self.base.row())
        for r in self.rows:
            if r.report is None:
                w.writerow([r.label, r.status, self.pair_yield, 0, ""] + [""] * len(METRIC_COLUMNS))
                continue
            bad_used = r.config.steps * r.config.batch_size if r.label in ("kto", "paired_dpo") else 0
            w.writerow([r.label, r.status, self.pair_yield, bad_used, f"{r.final_dev:.10e}"]
                       + r.report.row())
        return buf.getvalue()

    def to_text(self):
        head = f"{'objective':<12}{'status':<9}" + "".join(f"{c:>14}" for c in METRIC_COLUMNS)
        lines = [head, f"{'base':<12}{'ok':<9}" + "".join(f"{getattr(self.base, c):>14.5f}"
                                                          for c in METRIC_COLUMNS)]
        for r in self.rows:
            vals = "".join(f"{getattr(r.report, c):>14.5f}" for c in METRIC_COLUMNS) if r.report else ""
            lines.append(f"{r.label:<12}{r.status:<9}{vals}")
        lines.append(f"strict pairs available: {self.pair_yield}")
        return "\n".join(lines)


def compare_objectives(reference, curation, eval_sets, spec, config, kinds=COMPARE_KINDS,
                       overrides=None, jobs=1):
    """Matched-budget comparison: same steps, batch size, seed and good data.

    ``overrides`` maps a kind to ObjectiveConfig field overrides (for example a
    different beta). Paired DPO is skipped with a status row when no strict
    pairs exist; KTO likewise without bad samples.
    """
    overrides = overrides or {}
    base = evaluate(reference, reference, eval_sets, spec)
    args, skipped = [], []
    for kind in kinds:
        ocfg = replace(config.objective, kind=kind, **overrides.get(kind, {}))
        if kind == "paired_dpo" and len(curation.winners) == 0:
            skipped.append(kind)
            continue
        if kind == "kto" and len(curation.unpaired_bad) == 0:
            skipped.append(kind)
            continue
        args.append((reference, curation, eval_sets, spec, replace(config, objective=ocfg), kind))
    results = {r.label: r for r in _map_runs(jobs, args)}
    rows = []
    for kind in kinds:
        if kind in skipped:
            rows.append(RunResult(kind, None, None, None, float("nan"), status="skipped"))
        else:
            rows.append(results[kind])
    return Comparison(rows, base, len(curation.winners))
