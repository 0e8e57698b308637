"""The self-check suite behind ``ipalab verify``.

Each check returns a :class:`Check` with the measured value, the tolerance
and a PASS/FAIL status. Checks look objectives up on the
:mod:`ipalab.objectives` module at call time, so a test can patch one of
them and watch the matching check fail.

One check is informational (``gating=False``): the time derivative of the
marginal KL between two Gaussian flows compared against the
``0.5 (1-t)^2 E|v - v_ref|^2`` rate. That relation does not hold between
straight-line Gaussian marginals (see the README), so its verdict is shown
but does not change the exit status. The gating identity is the unbiasedness
of the per-sample gap integrand, which the estimator actually relies on.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import objectives as obj
from .flowcore import FlowBatch, VelocityField, fm_loss
from .oracles import (AnalyticFlow, GaussianSpec, grad_check, verify_gap_integrand,
                      verify_kl_rate_identity)

LN2 = math.log(2.0)
ANCHOR_TOL = 1e-9
GRAD_TOL = 1e-5
STRUCT_TOL = 1e-12
T_GRID = (0.2, 0.5, 0.8)


@dataclass
class Check:
    name: str
    status: str
    value: float
    tolerance: float
    gating: bool = True
    detail: str = ""

    def line(self):
        tag = "" if self.gating else " (informational)"
        return (f"{self.status:<5} {self.name:<28} value={self.value:.3e} "
                f"tol={self.tolerance:.1e}{tag} {self.detail}").rstrip()


def _verdict(ok):
    return "PASS" if ok else "FAIL"


def _toy(seed=0, dim=5, cond_dim=3, n=24):
    """Small float64 model pair plus batches for the numeric checks."""
    rng = np.random.default_rng(seed)
    ref = VelocityField.init(dim, cond_dim, hidden=(16, 16), seed=seed).frozen()

    def batch():
        t = rng.uniform(0.05, 0.95, n)
        mask = np.zeros((n, dim))
        mask[:, -2:] = 1.0
        return FlowBatch.from_endpoints(rng.standard_normal((n, dim)),
                                        rng.standard_normal((n, dim)), t,
                                        rng.standard_normal((n, cond_dim)), mask)

    return ref, batch, rng


def _moved_policy(ref, rng, rank=4):
    """Adapter policy pushed away from the reference so gradients are generic."""
    pol = ref.with_adapter(rank, seed=1)
    pol.set_params(pol.get_params() + 0.05 * rng.standard_normal(pol.n_params))
    return pol


def anchor_checks(seed=0):
    ref, batch, rng = _toy(seed)
    pol = ref.with_adapter(4, seed=1)
    cfg = obj.ObjectiveConfig(beta=7.0)
    b, b2 = batch(), batch()
    b2 = FlowBatch.from_endpoints(b2.z0, b2.z1, b.t, b2.c, b2.mask)
    w = obj.make_spatial_weight(b.mask[0], 10.0)
    values = {
        "ipa": obj.ipa_loss(pol, ref, b, cfg)[0],
        "ipa_halo": obj.ipa_loss(pol, ref, b, cfg, weight=w)[0],
        "pos_dpo": obj.pos_dpo_loss(pol, ref, b, cfg)[0],
        "paired_dpo": obj.paired_dpo_loss(pol, ref, b, b2, cfg)[0],
        "kto": obj.kto_loss(pol, ref, b, b2, cfg)[0],
    }
    out = []
    for kind, v in values.items():
        err = abs(v - LN2)
        out.append(Check(f"anchor_ln2[{kind}]", _verdict(err <= ANCHOR_TOL), err, ANCHOR_TOL))
    return out


def gradient_checks(seed=0, n_coords=100):
    ref, batch, rng = _toy(seed)
    cfg = obj.ObjectiveConfig(beta=3.0)
    b, win, lose, bad = batch(), batch(), batch(), batch()
    lose = FlowBatch.from_endpoints(lose.z0, lose.z1, win.t, lose.c, lose.mask)
    w = obj.make_spatial_weight(b.mask[0], 10.0)

    full = VelocityField.init(ref.dim, ref.cond_dim, hidden=(16, 16), seed=seed + 3)
    pol = _moved_policy(ref, rng)
    # the KTO reference point is a stop-gradient constant: freeze it at p0
    # (kept away from the clip at zero so the shifted branch is exercised)
    z_ref = max(obj.kto_reference_point(pol, ref, b), 0.01)

    def objective(model, fn):
        def f(p):
            model.set_params(p)
            return fn()
        return model, f

    cases = {
        "fm": objective(full, lambda: fm_loss(full, b)),
        "ipa": objective(pol, lambda: obj.ipa_loss(pol, ref, b, cfg)),
        "ipa_halo": objective(pol, lambda: obj.ipa_loss(pol, ref, b, cfg, weight=w)),
        "pos_dpo": objective(pol, lambda: obj.pos_dpo_loss(pol, ref, b, cfg)),
        "paired_dpo": objective(pol, lambda: obj.paired_dpo_loss(pol, ref, win, lose, cfg)),
        "sft": objective(pol, lambda: obj.sft_loss(pol, b)),
        "sft_l2": objective(pol, lambda: obj.sft_l2_anchor_loss(pol, ref, b, 0.5)),
        "kto": objective(pol, lambda: obj.kto_loss(pol, ref, b, bad, cfg, z_ref=z_ref)),
    }
    out = []
    for kind, (model, f) in cases.items():
        p0 = model.get_params()
        rep = grad_check(f, p0, n_coords=n_coords, seed=seed)
        model.set_params(p0)
        out.append(Check(f"grad[{kind}]", _verdict(rep.passed(GRAD_TOL)), rep.max_rel_error, GRAD_TOL,
                         detail=f"coords={rep.coords.size}"))
    return out


def gaussian_pairs():
    """Three distinct (reference, target) flow pairs from a shared standard source."""
    src = GaussianSpec(np.zeros(3), np.ones(3))
    targets = [
        (GaussianSpec([1.0, 0.0, -1.0], [0.5, 1.0, 2.0]), GaussianSpec([0.5, 0.2, -0.5], [1.0, 1.0, 1.0])),
        (GaussianSpec([2.0, 2.0, 0.0], [0.3, 0.3, 0.3]), GaussianSpec([0.0, 0.0, 0.0], [1.0, 2.0, 0.5])),
        (GaussianSpec([-1.0, 1.0, 0.5], [2.0, 0.2, 1.0]), GaussianSpec([-0.5, 0.5, 0.0], [1.0, 0.5, 1.0])),
    ]
    return [(AnalyticFlow(src, r), AnalyticFlow(src, q)) for r, q in targets]


def identity_checks(seed=0, n_mc=400_000):
    out = []
    for i, (flow_ref, flow_q) in enumerate(gaussian_pairs()):
        rep = verify_gap_integrand(flow_ref, flow_q, T_GRID, n_mc=n_mc, seed=seed + i)
        out.append(Check(f"gap_integrand[pair{i}]", _verdict(rep.passed), rep.max_rel_error(), 0.02))
    for i, (flow_ref, flow_q) in enumerate(gaussian_pairs()):
        rep = verify_kl_rate_identity(flow_ref, flow_q, T_GRID, n_mc=100_000, seed=seed + i)
        out.append(Check(f"marginal_kl_rate[pair{i}]", _verdict(rep.passed), rep.max_rel_error(),
                         0.02, gating=False))
    return out


def structure_checks(seed=0, n_batches=50):
    ref, batch, rng = _toy(seed)
    pol = _moved_policy(ref, rng)
    cfg = obj.ObjectiveConfig(beta=2.0)
    worst = 0.0
    halo_same = True
    for _ in range(n_batches):
        b = batch()
        a, ga = obj.ipa_loss(pol, ref, b, cfg, time_factor=1.0)
        p, gp = obj.pos_dpo_loss(pol, ref, b, cfg)
        worst = max(worst, abs(a - p) / max(abs(p), 1e-300),
                    float(np.max(np.abs(ga - gp)) / max(np.max(np.abs(gp)), 1e-300)))
        w0 = obj.make_spatial_weight(b.mask[0], 0.0)
        l0, g0 = obj.ipa_loss(pol, ref, b, cfg, weight=w0)
        l1, g1 = obj.ipa_loss(pol, ref, b, cfg)
        halo_same &= (l0 == l1) and np.array_equal(g0, g1)
    return [Check("pos_dpo_equivalence", _verdict(worst <= STRUCT_TOL), worst, STRUCT_TOL),
            Check("halo_lambda0_bitwise", _verdict(bool(halo_same)), 0.0 if halo_same else 1.0, 0.0)]


def run_all(seed=0):
    checks = []
    checks += anchor_checks(seed)
    checks += gradient_checks(seed)
    checks += structure_checks(seed)
    checks += identity_checks(seed)
    return checks


def summarize(checks):
    gating_fail = [c for c in checks if c.gating and c.status == "FAIL"]
    return {
        "passed": not gating_fail,
        "first_failure": gating_fail[0].name if gating_fail else None,
        "checks": [asdict(c) for c in checks],
    }
