"""Training objectives for aligning a policy velocity field against a frozen reference.

Every loss returns ``(value, grad)`` where ``grad`` is the flat gradient with
respect to the policy's trainable parameters. The reference is only ever
evaluated, never differentiated.

The preference losses share one ingredient, the per-sample KL-gap integrand::

    d = 0.5 * (1 - t)**2 * (|v - v_ref|_W**2 - |v - v_pol|_W**2)

where ``|x|_W**2 = sum(W * x**2)`` and ``W = 1 + lam * mask``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .errors import AdapterError, NonFiniteError, ShapeError

KINDS = ("ipa", "ipa_halo", "pos_dpo", "paired_dpo", "sft", "sft_l2", "kto")
PREFERENCE_KINDS = ("ipa", "ipa_halo", "pos_dpo", "paired_dpo", "kto")


@dataclass(frozen=True)
class SpatialWeight:
    lam: float
    mask: np.ndarray
    weights: np.ndarray


def make_spatial_weight(mask, lam):
    """``W = 1 + lam * mask``; emphasises the masked coordinates."""
    lam = float(lam)
    if not lam >= 0.0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("mask must be binary")
    return SpatialWeight(lam=lam, mask=mask, weights=1.0 + lam * mask)


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = "ipa"
    beta: float = 300.0
    lam: float = 0.0
    anchor_coeff: float = 1.0
    kto_desirable_weight: float = 1.0
    kto_undesirable_weight: float = 1.0
    kto_ref_size: int = 64

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.kind in PREFERENCE_KINDS and not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.kto_ref_size < 1:
            raise ValueError("kto_ref_size must be >= 1")


def _weights(weight):
    if weight is None:
        return None
    if isinstance(weight, SpatialWeight):
        return weight.weights
    return np.asarray(weight, dtype=np.float64)


def _sq_err(pred, v, w):
    d = v - pred
    if w is None:
        return np.sum(d * d, axis=1)
    return np.sum(w * d * d, axis=1)


def _forward(model, batch, what):
    out, cache = model.forward(batch.zt, batch.t, batch.c)
    bad = ~np.all(np.isfinite(out), axis=1)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise NonFiniteError(f"non-finite {what} output at sample {idx}", index=idx)
    return out, cache


def _check_policy(policy):
    if policy.role != "policy":
        raise AdapterError("the model being optimised must have the policy role")


def _check_batch(batch):
    if len(batch) == 0:
        raise ValueError("empty batch")


def flow_time_factor(t):
    return 0.5 * (1.0 - t) ** 2


def _gap_terms(policy, reference, batch, w, time_factor):
    p, cache = _forward(policy, batch, "policy")
    r = reference.predict(batch.zt, batch.t, batch.c)
    if not np.all(np.isfinite(r)):
        idx = int(np.flatnonzero(~np.all(np.isfinite(r), axis=1))[0])
        raise NonFiniteError(f"non-finite reference output at sample {idx}", index=idx)
    tf = flow_time_factor(batch.t) if time_factor is None else np.broadcast_to(
        np.asarray(time_factor, dtype=np.float64), batch.t.shape)
    d = tf * (_sq_err(r, batch.v, w) - _sq_err(p, batch.v, w))
    # d(d)/d(pred) = 2 * tf * W * (v - pred)
    dd_dp = 2.0 * tf[:, None] * (batch.v - p)
    if w is not None:
        dd_dp = w * dd_dp
    return d, dd_dp, cache


def delta_integrand(policy, reference, batch, weight=None):
    """Per-sample KL-gap integrand, shape ``(len(batch),)``."""
    _check_batch(batch)
    d, _, _ = _gap_terms(policy, reference, batch, _weights(weight), None)
    return d


def _neg_log_sigmoid(x):
    return -log_expit(x)


def _finite_loss(per_sample):
    bad = ~np.isfinite(per_sample)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise NonFiniteError(f"non-finite loss at sample {idx}", index=idx)


def ipa_loss(policy, reference, batch, config, weight=None, time_factor=None):
    """Mean of ``-log sigmoid(beta * d)`` over the batch.

    ``time_factor`` overrides ``0.5 * (1 - t)**2`` (scalar or per-sample),
    which is how the structural comparison with :func:`pos_dpo_loss` is run.
    """
    _check_batch(batch)
    _check_policy(policy)
    beta = float(config.beta)
    if not beta > 0:
        raise ValueError("beta must be positive")
    d, dd_dp, cache = _gap_terms(policy, reference, batch, _weights(weight), time_factor)
    x = beta * d
    per_sample = _neg_log_sigmoid(x)
    _finite_loss(per_sample)
    n = len(batch)
    coef = -beta * expit(-x) / n
    grad = policy.backward(cache, coef[:, None] * dd_dp)
    return float(np.mean(per_sample)), grad


def pos_dpo_loss(policy, reference, batch, config, weight=None):
    """Flow-DPO with the loser term removed: no time weighting on the gap."""
    _check_batch(batch)
    _check_policy(policy)
    beta = float(config.beta)
    if not beta > 0:
        raise ValueError("beta must be positive")
    w = _weights(weight)
    p, cache = _forward(policy, batch, "policy")
    r = reference.predict(batch.zt, batch.t, batch.c)
    x = beta * (_sq_err(r, batch.v, w) - _sq_err(p, batch.v, w))
    per_sample = _neg_log_sigmoid(x)
    _finite_loss(per_sample)
    resid = batch.v - p
    if w is not None:
        resid = w * resid
    coef = -beta * expit(-x) / len(batch)
    grad = policy.backward(cache, (2.0 * coef)[:, None] * resid)
    return float(np.mean(per_sample)), grad


def paired_dpo_loss(policy, reference, win_batch, lose_batch, config, weight=None):
    """Flow-DPO on winner/loser pairs, both gaps carrying the ``0.5 (1-t)^2`` factor."""
    _check_batch(win_batch)
    _check_policy(policy)
    if len(win_batch) != len(lose_batch):
        raise ShapeError("winner and loser batches differ in length")
    if not np.array_equal(win_batch.t, lose_batch.t):
        raise ValueError("winner and loser of a pair must share t")
    beta = float(config.beta)
    if not beta > 0:
        raise ValueError("beta must be positive")
    w = _weights(weight)
    d_w, dp_w, cache_w = _gap_terms(policy, reference, win_batch, w, None)
    d_l, dp_l, cache_l = _gap_terms(policy, reference, lose_batch, w, None)
    x = beta * (d_w - d_l)
    per_sample = _neg_log_sigmoid(x)
    _finite_loss(per_sample)
    coef = -beta * expit(-x) / len(win_batch)
    grad = policy.backward(cache_w, coef[:, None] * dp_w)
    grad = grad - policy.backward(cache_l, coef[:, None] * dp_l)
    return float(np.mean(per_sample)), grad


def sft_loss(policy, batch, weight=None):
    """Flow matching on curated data, optionally HALO-weighted."""
    _check_batch(batch)
    _check_policy(policy)
    w = _weights(weight)
    out, cache = _forward(policy, batch, "policy")
    resid = out - batch.v
    n = len(batch)
    if w is None:
        loss = float(np.sum(resid ** 2) / n)
        grad = policy.backward(cache, 2.0 * resid / n)
    else:
        loss = float(np.sum(w * resid ** 2) / n)
        grad = policy.backward(cache, 2.0 * w * resid / n)
    return loss, grad


def sft_l2_anchor_loss(policy, reference, batch, anchor_coeff, weight=None):
    """``sft_loss + anchor_coeff * mean |v_pol - v_ref|^2``."""
    loss, grad = sft_loss(policy, batch, weight)
    if anchor_coeff == 0:
        return loss, grad
    out, cache = _forward(policy, batch, "policy")
    diff = out - reference.predict(batch.zt, batch.t, batch.c)
    n = len(batch)
    anchor = float(np.sum(diff ** 2) / n)
    grad = grad + policy.backward(cache, (2.0 * anchor_coeff / n) * diff)
    return loss + anchor_coeff * anchor, grad


def kto_reference_point(policy, reference, ref_batch, weight=None):
    """Batch-mean gap integrand clipped at zero; treated as a constant."""
    return max(0.0, float(np.mean(delta_integrand(policy, reference, ref_batch, weight))))


def kto_loss(policy, reference, good_batch, bad_batch, config, weight=None, ref_batch=None,
             z_ref=None):
    """KTO-style loss on unpaired good and bad samples.

    The desirable and undesirable terms are averaged with weights
    ``kto_desirable_weight`` and ``kto_undesirable_weight`` normalised to sum
    to one, so the loss is ``ln 2`` when the policy equals the reference.
    ``ref_batch`` (default: the first ``kto_ref_size`` rows of the good batch)
    sets the reference point; no gradient flows through it. Passing ``z_ref``
    directly skips that estimate (used to hold it fixed in gradient checks).
    """
    _check_batch(good_batch)
    _check_batch(bad_batch)
    _check_policy(policy)
    beta = float(config.beta)
    if not beta > 0:
        raise ValueError("beta must be positive")
    w = _weights(weight)
    if z_ref is None:
        if ref_batch is None:
            ref_batch = good_batch.subset(slice(0, config.kto_ref_size))
        z_ref = kto_reference_point(policy, reference, ref_batch, w)
    wd = float(config.kto_desirable_weight)
    wu = float(config.kto_undesirable_weight)
    norm = wd + wu

    d_g, dp_g, cache_g = _gap_terms(policy, reference, good_batch, w, None)
    d_b, dp_b, cache_b = _gap_terms(policy, reference, bad_batch, w, None)
    x_g = beta * (d_g - z_ref)
    x_b = beta * (z_ref - d_b)
    l_g = _neg_log_sigmoid(x_g)
    l_b = _neg_log_sigmoid(x_b)
    _finite_loss(l_g)
    _finite_loss(l_b)
    loss = (wd * float(np.mean(l_g)) + wu * float(np.mean(l_b))) / norm

    coef_g = -beta * expit(-x_g) * (wd / norm) / len(good_batch)
    coef_b = beta * expit(-x_b) * (wu / norm) / len(bad_batch)
    grad = policy.backward(cache_g, coef_g[:, None] * dp_g)
    grad = grad + policy.backward(cache_b, coef_b[:, None] * dp_b)
    return loss, grad
