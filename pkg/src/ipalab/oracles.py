"""Closed-form Gaussian flows and numerical verifiers.

Everything here is independent of the training code paths it is used to
check: Gaussian KL and conditional velocities are computed in closed form,
gradients by central differences, and expectations by plain Monte Carlo.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .flowcore import FlowBatch

REPORT_COLUMNS = ("identity", "t", "lhs", "rhs", "rel_error", "status")


@dataclass(frozen=True)
class GaussianSpec:
    """Diagonal Gaussian; ``var`` holds per-coordinate variances."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        var = np.atleast_1d(np.asarray(self.var, dtype=np.float64))
        if mean.shape != var.shape:
            raise ShapeError("mean and variance dimensions differ")
        if not np.all(var > 0):
            raise ValueError("variances must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self):
        return self.mean.shape[0]

    def sample(self, rng, n):
        return self.mean + np.sqrt(self.var) * rng.standard_normal((n, self.dim))


def gaussian_kl(p, q):
    """``KL(p || q)`` for diagonal Gaussians."""
    if p.dim != q.dim:
        raise ShapeError("Gaussians of different dimension")
    ratio = p.var / q.var
    return float(0.5 * np.sum(ratio + (p.mean - q.mean) ** 2 / q.var - 1.0 - np.log(ratio)))


@dataclass(frozen=True)
class AnalyticFlow:
    """Straight-line flow between independent Gaussian endpoints."""

    source: GaussianSpec
    target: GaussianSpec

    def __post_init__(self):
        if self.source.dim != self.target.dim:
            raise ShapeError("source and target dimensions differ")

    @property
    def dim(self):
        return self.source.dim

    def marginal(self, t):
        mean = t * self.target.mean + (1.0 - t) * self.source.mean
        var = t ** 2 * self.target.var + (1.0 - t) ** 2 * self.source.var
        return GaussianSpec(mean, var)

    def coefficients(self, t):
        """``(slope, offset)`` with ``E[Z1 - Z0 | Z_t = z] = slope * (z - m_t) + offset``."""
        s0, s1 = self.source.var, self.target.var
        var_t = t ** 2 * s1 + (1.0 - t) ** 2 * s0
        slope = (t * s1 - (1.0 - t) * s0) / var_t
        return slope, self.target.mean - self.source.mean

    def predict(self, z, t, c=None):
        """Conditional-mean velocity; ``c`` is ignored."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        if z.shape[1] != self.dim:
            raise ShapeError(f"z has dimension {z.shape[1]}, flow has {self.dim}")
        if np.any(t >= 1.0) and np.any(self.target.var <= 0):
            raise ValueError("velocity undefined at t = 1 for a degenerate target")
        m_t = t * self.target.mean + (1.0 - t) * self.source.mean
        var_t = t ** 2 * self.target.var + (1.0 - t) ** 2 * self.source.var
        slope = (t * self.target.var - (1.0 - t) * self.source.var) / var_t
        return slope * (z - m_t) + (self.target.mean - self.source.mean)

    def sample_coupling(self, rng, n, t):
        """Draw ``(z0, z1)`` and return ``(zt, v)`` at time ``t``."""
        z0 = self.source.sample(rng, n)
        z1 = self.target.sample(rng, n)
        return t * z1 + (1.0 - t) * z0, z1 - z0

    def batch(self, rng, n, t=None):
        """FlowBatch with independent draws; ``t`` uniform unless given."""
        z0 = self.source.sample(rng, n)
        z1 = self.target.sample(rng, n)
        if t is None:
            t = rng.uniform(0.0, 1.0, n)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        return FlowBatch.from_endpoints(z0, z1, t, np.zeros((n, 1)))


def analytic_velocity(flow, z, t):
    if not 0.0 <= t < 1.0:
        raise ValueError("analytic velocity needs t in [0, 1)")
    return flow.predict(z, t)


def mc_conditional_velocity(flow, z_query, t, rng, n=400_000, bandwidth=0.02):
    """Monte Carlo ``E[Z1 - Z0 | Z_t ~= z]`` in 1-D by windowing.

    Returns ``(mean, stderr)`` arrays, one entry per query point.
    """
    zt, v = flow.sample_coupling(rng, n, t)
    zt, v = zt[:, 0], v[:, 0]
    means, errs = [], []
    for zq in np.atleast_1d(z_query):
        sel = np.abs(zt - zq) < bandwidth
        vals = v[sel]
        means.append(vals.mean())
        errs.append(vals.std(ddof=1) / math.sqrt(vals.size))
    return np.array(means), np.array(errs)


@dataclass
class IdentityRow:
    identity: str
    t: float
    lhs: float
    rhs: float
    rel_error: float
    status: str


@dataclass
class VerificationReport:
    rows: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.status != "FAIL" for r in self.rows)

    def max_rel_error(self):
        return max((r.rel_error for r in self.rows), default=0.0)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.rows:
            writer.writerow([r.identity, f"{r.t:.6f}", f"{r.lhs:.10e}", f"{r.rhs:.10e}",
                             f"{r.rel_error:.6e}", r.status])
        return buf.getvalue()

    def to_text(self):
        lines = [f"{'identity':<28}{'t':>8}{'lhs':>16}{'rhs':>16}{'rel_err':>12}  status"]
        for r in self.rows:
            lines.append(f"{r.identity:<28}{r.t:>8.3f}{r.lhs:>16.8e}{r.rhs:>16.8e}"
                         f"{r.rel_error:>12.3e}  {r.status}")
        return "\n".join(lines)


def kl_marginal_rate(flow_q, flow_ref, t, h=1e-5):
    """Central difference in ``t`` of ``KL(q_t || ref_t)`` between Gaussian marginals."""
    up = gaussian_kl(flow_q.marginal(t + h), flow_ref.marginal(t + h))
    down = gaussian_kl(flow_q.marginal(t - h), flow_ref.marginal(t - h))
    return (up - down) / (2.0 * h)


def mc_velocity_gap_rate(flow_q, flow_ref, t, n_mc, rng):
    """MC mean and stderr of ``0.5 (1-t)^2 |v - v_ref(Z_t)|^2`` under ``flow_q``."""
    zt, v = flow_q.sample_coupling(rng, n_mc, t)
    vals = 0.5 * (1.0 - t) ** 2 * np.sum((v - flow_ref.predict(zt, t)) ** 2, axis=1)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_mc))


def verify_kl_rate_identity(flow_ref, flow_q, t_grid, n_mc=200_000, seed=0, rtol=0.02,
                            name="kl_rate"):
    """Compare the time derivative of the marginal KL with the velocity-gap estimator.

    Per grid point: ``lhs`` is the finite-difference rate of the closed-form
    KL, ``rhs`` the Monte Carlo estimate. A row is ``PASS`` when the relative
    discrepancy is within ``rtol``, ``INCONCLUSIVE`` when three standard errors
    of the estimator already exceed the tolerance band, else ``FAIL``.
    """
    if n_mc < 100_000:
        raise ValueError("n_mc must be at least 1e5")
    rng = np.random.default_rng(seed)
    report = VerificationReport()
    for t in t_grid:
        if not 0.0 < t < 1.0:
            raise ValueError("grid points must lie strictly inside (0, 1)")
        lhs = kl_marginal_rate(flow_q, flow_ref, t)
        rhs, se = mc_velocity_gap_rate(flow_q, flow_ref, t, n_mc, rng)
        scale = max(abs(lhs), abs(rhs))
        if scale < 1e-12 or scale < 3 * se:
            # both sides zero within noise
            rel = 0.0 if abs(lhs) <= 3 * se + 1e-12 else float("inf")
            status = "PASS" if rel == 0.0 else "FAIL"
        else:
            rel = abs(lhs - rhs) / scale
            if rel <= rtol:
                status = "PASS"
            elif 3 * se / scale > rtol:
                status = "INCONCLUSIVE"
            else:
                status = "FAIL"
        report.rows.append(IdentityRow(name, float(t), lhs, rhs, rel, status))
    return report


def closed_form_gap_rate(flow_q, flow_ref, t):
    """``0.5 (1-t)^2 E_q |v_q(Z_t) - v_ref(Z_t)|^2`` in closed form.

    Both velocity fields are affine in ``z``, so the expectation over the
    Gaussian marginal ``q_t`` is a squared mean plus a variance term.
    """
    m = flow_q.marginal(t)
    slope_q, _ = flow_q.coefficients(t)
    slope_r, _ = flow_ref.coefficients(t)
    mean_gap = flow_q.predict(m.mean, t)[0] - flow_ref.predict(m.mean, t)[0]
    second = mean_gap ** 2 + (slope_q - slope_r) ** 2 * m.var
    return float(0.5 * (1.0 - t) ** 2 * np.sum(second))


def verify_gap_integrand(flow_ref, flow_q, t_grid, n_mc=200_000, seed=0, rtol=0.02,
                         name="gap_integrand"):
    """Check that the per-sample gap integrand is unbiased for the velocity gap.

    ``lhs`` is :func:`closed_form_gap_rate`; ``rhs`` the Monte Carlo mean of
    ``0.5 (1-t)^2 (|v - v_ref|^2 - |v - v_q|^2)`` over straight-line samples
    of ``flow_q``. The two agree because ``v_q`` is the conditional mean of
    ``v`` given ``Z_t``.
    """
    if n_mc < 100_000:
        raise ValueError("n_mc must be at least 1e5")
    rng = np.random.default_rng(seed)
    report = VerificationReport()
    for t in t_grid:
        lhs = closed_form_gap_rate(flow_q, flow_ref, t)
        zt, v = flow_q.sample_coupling(rng, n_mc, t)
        vals = 0.5 * (1.0 - t) ** 2 * (np.sum((v - flow_ref.predict(zt, t)) ** 2, axis=1)
                                       - np.sum((v - flow_q.predict(zt, t)) ** 2, axis=1))
        rhs = float(vals.mean())
        se = float(vals.std(ddof=1) / math.sqrt(n_mc))
        scale = max(abs(lhs), abs(rhs), 1e-12)
        rel = abs(lhs - rhs) / scale
        if rel <= rtol:
            status = "PASS"
        elif 3 * se / scale > rtol:
            status = "INCONCLUSIVE"
        else:
            status = "FAIL"
        report.rows.append(IdentityRow(name, float(t), lhs, rhs, rel, status))
    return report


def estimate_delta(policy, reference, preference_sampler, n_samples, seed=0, weight=None):
    """Monte Carlo KL-gap estimate: ``(mean, stderr)`` of the gap integrand.

    ``preference_sampler(rng, n)`` returns a :class:`FlowBatch` with ``t``
    drawn uniformly on ``[0, 1]``.
    """
    from .objectives import delta_integrand

    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    batch = preference_sampler(rng, int(n_samples))
    d = delta_integrand(policy, reference, batch, weight)
    se = float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else float("nan")
    return float(d.mean()), se


def rank_agreement(delta_estimates, beta):
    """True when ranking by the gap and by ``-log sigmoid(beta * gap)`` coincide."""
    from scipy.special import log_expit

    d = np.asarray(delta_estimates, dtype=np.float64)
    loss = -log_expit(beta * d)
    n = d.size
    for i in range(n):
        for j in range(i + 1, n):
            if np.sign(d[i] - d[j]) != -np.sign(loss[i] - loss[j]):
                return False
    return True


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    coords: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray

    def passed(self, tol=1e-5):
        return self.max_rel_error <= tol


def grad_check(objective, params, perturbation=1e-6, n_coords=100, seed=0, floor=1e-8):
    """Central-difference check of ``objective(params) -> (value, grad)``.

    The relative error on a coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps exactly-zero gradients from dividing by zero.
    """
    if not perturbation > 0:
        raise ValueError("perturbation must be positive")
    params = np.array(params, dtype=np.float64)
    _, grad = objective(params.copy())
    rng = np.random.default_rng(seed)
    k = min(n_coords, params.size)
    coords = np.sort(rng.choice(params.size, size=k, replace=False))
    numeric = np.empty(k)
    for i, j in enumerate(coords):
        p = params.copy()
        p[j] += perturbation
        up = objective(p)[0]
        p[j] -= 2 * perturbation
        down = objective(p)[0]
        numeric[i] = (up - down) / (2 * perturbation)
    analytic = grad[coords]
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return GradCheckReport(float(rel.max()), float(rel.mean()), coords, analytic, numeric)


def dip_statistic(x):
    """Hartigan's dip of the empirical distribution of ``x``.

    Distance (sup norm) from the empirical CDF to the nearest unimodal CDF.
    0.25 for two equal point masses; close to 0 for large unimodal samples.
    """
    x = np.sort(np.asarray(x, dtype=np.float64))
    n = x.size
    if n < 2 or x[0] == x[-1]:
        return 0.0
    mn = np.zeros(n, dtype=int)
    mj = np.zeros(n, dtype=int)
    # greatest convex minorant / least concave majorant index chains
    for j in range(1, n):
        mn[j] = j - 1
        while True:
            a = mn[j]
            b = mn[a]
            if a == 0 or (x[j] - x[a]) * (a - b) < (x[a] - x[b]) * (j - a):
                break
            mn[j] = b
    mj[n - 1] = n - 1
    for k in range(n - 2, -1, -1):
        mj[k] = k + 1
        while True:
            a = mj[k]
            b = mj[a]
            if a == n - 1 or (x[k] - x[a]) * (a - b) < (x[a] - x[b]) * (k - a):
                break
            mj[k] = b

    low, high = 0, n - 1
    dip = 1.0
    while True:
        gcm = [high]
        while gcm[-1] > low:
            gcm.append(mn[gcm[-1]])
        lcm = [low]
        while lcm[-1] < high:
            lcm.append(mj[lcm[-1]])
        l_gcm, l_lcm = len(gcm) - 1, len(lcm) - 1
        ig, ih = l_gcm, l_lcm
        ix, iv = l_gcm - 1, 1
        d = 0.0
        if l_gcm != 1 or l_lcm != 1:
            while True:
                gx, lv = gcm[ix], lcm[iv]
                if gx > lv:
                    g1 = gcm[ix + 1]
                    dx = (lv - g1 + 1) - (x[lv] - x[g1]) * (gx - g1) / (x[gx] - x[g1])
                    iv += 1
                    if dx >= d:
                        d, ig, ih = dx, ix + 1, iv - 1
                else:
                    l1 = lcm[iv - 1]
                    dx = (x[gx] - x[l1]) * (lv - l1) / (x[lv] - x[l1]) - (gx - l1 - 1)
                    ix -= 1
                    if dx >= d:
                        d, ig, ih = dx, ix + 1, iv
                ix = max(ix, 0)
                iv = min(iv, l_lcm)
                if gcm[ix] == lcm[iv]:
                    break
        else:
            d = 1.0
        if d < dip:
            break
        dip_l = 0.0
        for j in range(ig, l_gcm):
            jb, je = gcm[j + 1], gcm[j]
            best = 1.0
            if je - jb > 1 and x[je] != x[jb]:
                slope = (je - jb) / (x[je] - x[jb])
                jj = np.arange(jb, je + 1)
                best = max(best, float(np.max((jj - jb + 1) - (x[jj] - x[jb]) * slope)))
            dip_l = max(dip_l, best)
        dip_u = 0.0
        for j in range(ih, l_lcm):
            jb, je = lcm[j], lcm[j + 1]
            best = 1.0
            if je - jb > 1 and x[je] != x[jb]:
                slope = (je - jb) / (x[je] - x[jb])
                jj = np.arange(jb, je + 1)
                best = max(best, float(np.max((x[jj] - x[jb]) * slope - (jj - jb - 1))))
            dip_u = max(dip_u, best)
        dip = max(dip, dip_l, dip_u)
        if low == gcm[ig] and high == lcm[ih]:
            break
        low, high = gcm[ig], lcm[ih]
    return dip / (2.0 * n)


def dip_threshold(n, alpha=0.01, n_sim=200, seed=0):
    """Upper ``alpha`` quantile of the dip under the uniform null (least favourable unimodal)."""
    rng = np.random.default_rng(seed)
    sims = [dip_statistic(rng.uniform(size=n)) for _ in range(n_sim)]
    return float(np.quantile(sims, 1.0 - alpha))
