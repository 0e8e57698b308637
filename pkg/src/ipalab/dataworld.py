"""Synthetic "body + hand" conditioned generation domain.

A sample is a point in ``D = n_body + n_hand`` dimensions, generated from a
condition ``c = [reference configuration, pose one-hot]``. Body coordinates
are a smooth Gaussian around a linear function of the configuration. Each
configuration owns ``n_modes`` sharp hand modes; the pose part of the
condition picks which one the clean generator lands on exactly.

Quality scores are a proxy annotator: one minus the distance of the hand
coordinates to the mode the condition asks for, divided by ``score_scale``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .errors import EmptyCurationError
from .flowcore import sample_ode

PREFERENCE_FORMAT = "ipalab.preference_sets"
PREFERENCE_VERSION = 1
QUALITY_PROXY_LABEL = "synthetic hand-distance proxy (not human annotation)"


@dataclass(frozen=True)
class SceneSpec:
    n_body_dims: int = 6
    n_hand_dims: int = 2
    cond_dim: int = 4
    n_modes: int = 4
    body_noise: float = 0.05
    hand_radius: float = 1.0
    hand_center_scale: float = 0.25
    phase_scale: float = 0.5
    score_scale: float = 1.0
    corruption_pull: float = 1.0
    corruption_noise: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.n_body_dims < 1:
            raise ValueError("n_body_dims must be >= 1")
        if self.n_hand_dims < 2:
            raise ValueError("n_hand_dims must be >= 2")
        if self.n_modes < 2:
            raise ValueError("need at least two hand modes")

    @property
    def dim(self):
        return self.n_body_dims + self.n_hand_dims

    @property
    def cond_total(self):
        """Width of the condition vector: configuration plus pose one-hot."""
        return self.cond_dim + self.n_modes

    @property
    def hand_slice(self):
        return slice(self.n_body_dims, self.dim)

    @property
    def mode_spacing(self):
        return 2.0 * self.hand_radius * np.sin(np.pi / self.n_modes)

    @cached_property
    def _params(self):
        rng = np.random.default_rng([self.seed, 0x5CE7E])
        body = rng.normal(0.0, 0.5, (self.n_body_dims, self.cond_dim))
        center = rng.normal(0.0, self.hand_center_scale, (self.n_hand_dims, self.cond_dim))
        phase = rng.normal(0.0, 1.0, self.cond_dim)
        phase /= np.linalg.norm(phase)
        angles = 2.0 * np.pi * np.arange(self.n_modes) / self.n_modes
        offsets = np.zeros((self.n_modes, self.n_hand_dims))
        offsets[:, 0] = np.cos(angles)
        offsets[:, 1] = np.sin(angles)
        if self.n_hand_dims > 2:
            offsets[:, 2:] = rng.normal(0.0, 0.3, (self.n_modes, self.n_hand_dims - 2))
        return body, center, phase, self.hand_radius * offsets

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def hand_mask(spec):
    """1 on hand coordinates, 0 on body coordinates."""
    mask = np.zeros(spec.dim)
    mask[spec.hand_slice] = 1.0
    return mask


def hand_modes(spec, c):
    """Clean hand modes for each condition, shape ``(N, n_modes, n_hand)``."""
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))[:, :spec.cond_dim]
    _, center, phase, offsets = spec._params
    phi = spec.phase_scale * (c @ phase)
    cos, sin = np.cos(phi)[:, None], np.sin(phi)[:, None]
    ox, oy = offsets[None, :, 0], offsets[None, :, 1]
    rotated = np.repeat(offsets[None], c.shape[0], axis=0)
    rotated[:, :, 0] = cos * ox - sin * oy
    rotated[:, :, 1] = sin * ox + cos * oy
    return (c @ center.T)[:, None, :] + rotated


def pose_index(spec, c):
    """Hand mode requested by each condition row."""
    return np.argmax(np.atleast_2d(c)[:, spec.cond_dim:], axis=1)


def sample_conditions(spec, n, rng):
    config = rng.standard_normal((n, spec.cond_dim))
    pose = np.eye(spec.n_modes)[rng.integers(0, spec.n_modes, n)]
    return np.concatenate([config, pose], axis=1)


def target_hands(spec, c):
    modes = hand_modes(spec, c)
    return modes[np.arange(modes.shape[0]), pose_index(spec, c)]


def clean_samples(spec, c, rng):
    """Draw one clean sample per condition row."""
    c = np.atleast_2d(c)
    body_w = spec._params[0]
    n = c.shape[0]
    body = c[:, :spec.cond_dim] @ body_w.T + spec.body_noise * rng.standard_normal(
        (n, spec.n_body_dims))
    return np.concatenate([body, target_hands(spec, c)], axis=1)


def generate_dataset(spec, n, seed=0):
    """``n`` clean ``(z, c)`` pairs as arrays ``(n, D)`` and ``(n, cond_total)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    c = sample_conditions(spec, n, rng)
    return clean_samples(spec, c, rng), c


def corrupt_hands(z, spec, severity, seed=0, c=None):
    """Push hand coordinates toward a wrong mode; body coordinates are untouched.

    With ``c`` given, each row is pulled ``severity * pull`` of the way toward
    a randomly chosen other mode of its configuration. Without ``c`` the pull
    has the same length (one mode spacing) in a random direction. Gaussian
    jitter scaled by ``severity`` is added in both cases. ``severity`` may be a
    scalar or one value per row.
    """
    z = np.array(np.atleast_2d(z), dtype=np.float64)
    sev = np.asarray(severity, dtype=np.float64)
    if np.any(sev < 0) or np.any(sev > 1):
        raise ValueError("severity must lie in [0, 1]")
    sev = np.broadcast_to(sev.reshape(-1, 1) if sev.ndim else sev, (z.shape[0], 1))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n, k = z.shape[0], spec.n_hand_dims
    hands = z[:, spec.hand_slice]
    if c is None:
        direction = rng.standard_normal((n, k))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        pull = spec.mode_spacing * direction
    else:
        modes = hand_modes(spec, c)
        other = (pose_index(spec, c) + rng.integers(1, spec.n_modes, n)) % spec.n_modes
        pull = modes[np.arange(n), other] - hands
    jitter = rng.standard_normal((n, k))
    z[:, spec.hand_slice] = hands + sev * (spec.corruption_pull * pull
                                           + spec.corruption_noise * jitter)
    return z


@dataclass
class QualityScore:
    value: np.ndarray
    components: np.ndarray  # per hand coordinate |error| to the nearest mode

    def component_scores(self, spec):
        return np.clip(1.0 - self.components / spec.score_scale, 0.0, 1.0)


def quality_score(z, c, spec):
    """Score in ``[0, 1]``; 1 exactly when the hands sit on the requested mode."""
    z = np.atleast_2d(z)
    err = z[:, spec.hand_slice] - target_hands(spec, c)
    value = np.clip(1.0 - np.linalg.norm(err, axis=1) / spec.score_scale, 0.0, 1.0)
    return QualityScore(value=value, components=np.abs(err))


@dataclass
class PreferenceSet:
    """Samples used for alignment, with provenance tag per entry."""

    z1: np.ndarray
    c: np.ndarray
    mask: np.ndarray
    provenance: list
    scores: np.ndarray
    threshold: float = float("nan")

    def __len__(self):
        return self.z1.shape[0]

    @classmethod
    def empty(cls, spec, tag_threshold=float("nan")):
        return cls(np.zeros((0, spec.dim)), np.zeros((0, spec.cond_total)),
                   np.zeros((0, spec.dim)), [], np.zeros(0), tag_threshold)

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "z1": self.z1.tolist(),
            "c": self.c.tolist(),
            "mask": self.mask.astype(int).tolist(),
            "provenance": list(self.provenance),
            "scores": self.scores.tolist(),
        }

    @classmethod
    def from_dict(cls, d, spec):
        n = len(d["provenance"])
        shape = lambda key, width: np.asarray(d[key], dtype=np.float64).reshape(n, width)
        return cls(shape("z1", spec.dim), shape("c", spec.cond_total), shape("mask", spec.dim),
                   list(d["provenance"]), np.asarray(d["scores"], dtype=np.float64).reshape(n),
                   float(d["threshold"]))


CASES = ("case1_both_good", "case2_both_bad", "case3_mixed", "case4_strict_pair")


def classify_pair(status_a, status_b):
    """Map two sample statuses (``good``/``bad``/``mixed``) to a preference case."""
    pair = {status_a, status_b}
    if pair == {"good"}:
        return CASES[0]
    if pair == {"bad"}:
        return CASES[1]
    if pair == {"good", "bad"}:
        return CASES[3]
    return CASES[2]


@dataclass
class CurationResult:
    good: PreferenceSet
    winners: PreferenceSet
    losers: PreferenceSet
    unpaired_bad: PreferenceSet
    audit: dict
    candidates: dict = field(repr=False, default_factory=dict)

    @property
    def status(self):
        return self.audit["status"]

    def scores_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["condition", "candidate", "score", "status"])
        for row in zip(self.candidates["condition"], self.candidates["candidate"],
                       self.candidates["score"], self.candidates["status"]):
            w.writerow([row[0], row[1], f"{row[2]:.8f}", row[3]])
        return buf.getvalue()

    def to_dict(self, spec):
        return {
            "format": PREFERENCE_FORMAT,
            "version": PREFERENCE_VERSION,
            "quality_proxy": QUALITY_PROXY_LABEL,
            "spec": spec.to_dict(),
            "audit": self.audit,
            "sets": {
                "good": self.good.to_dict(),
                "winners": self.winners.to_dict(),
                "losers": self.losers.to_dict(),
                "unpaired_bad": self.unpaired_bad.to_dict(),
            },
        }

    def save(self, path, spec):
        with open(path, "w") as fh:
            json.dump(self.to_dict(spec), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        if d.get("format") != PREFERENCE_FORMAT:
            raise ValueError(f"{path} is not a preference-set file")
        spec = SceneSpec.from_dict(d["spec"])
        sets = {k: PreferenceSet.from_dict(v, spec) for k, v in d["sets"].items()}
        return cls(sets["good"], sets["winners"], sets["losers"], sets["unpaired_bad"],
                   d["audit"]), spec


def _take(z, c, scores, idx, spec, tag, threshold):
    idx = np.asarray(idx, dtype=int)
    mask = np.tile(hand_mask(spec), (idx.size, 1))
    return PreferenceSet(z[idx], c[idx], mask, [tag] * idx.size, scores[idx], threshold)


def curate(model, spec, n_candidates=96, k_per_condition=4, threshold=0.9, seed=0,
           bad_threshold=0.5, n_steps=32, raise_on_empty=False):
    """Self-generate candidates, score them, and split into preference sets.

    Per condition, ``k_per_condition`` endpoints are sampled with
    :func:`sample_ode`. A candidate is *good* when its score reaches
    ``threshold``, *bad* when every hand component scores below
    ``bad_threshold``, otherwise *mixed*. Good candidates form the curated
    set; good/bad pairs within a condition form strict pairs; candidates with
    overall score below ``bad_threshold`` form the unpaired bad pool.
    """
    if k_per_condition < 2:
        raise ValueError("k_per_condition must be >= 2")
    n_cond = n_candidates // k_per_condition
    if n_cond < 1:
        raise ValueError("n_candidates must be at least k_per_condition")
    rng = np.random.default_rng([seed, 0xC0A7E])
    conds = sample_conditions(spec, n_cond, rng)
    c_all = np.repeat(conds, k_per_condition, axis=0)
    z0 = rng.standard_normal((c_all.shape[0], spec.dim))
    z = sample_ode(model, z0, c_all, n_steps)
    q = quality_score(z, c_all, spec)
    comp = q.component_scores(spec)
    status = np.where(q.value >= threshold, "good",
                      np.where(np.all(comp < bad_threshold, axis=1), "bad", "mixed"))

    cases = dict.fromkeys(CASES, 0)
    good_idx, win_idx, lose_idx = [], [], []
    for ci in range(n_cond):
        rows = list(range(ci * k_per_condition, (ci + 1) * k_per_condition))
        for i, a in enumerate(rows):
            for b in rows[i + 1:]:
                cases[classify_pair(status[a], status[b])] += 1
        g = [r for r in rows if status[r] == "good"]
        b = [r for r in rows if status[r] == "bad"]
        good_idx.extend(g)
        n_pairs = min(len(g), len(b))
        win_idx.extend(g[:n_pairs])
        lose_idx.extend(b[:n_pairs])
    bad_idx = np.flatnonzero(q.value < bad_threshold)

    audit = {
        "status": "ok" if good_idx else "empty",
        "quality_proxy": QUALITY_PROXY_LABEL,
        "n_conditions": n_cond,
        "n_candidates": int(c_all.shape[0]),
        "k_per_condition": k_per_condition,
        "threshold": threshold,
        "bad_threshold": bad_threshold,
        "n_steps": n_steps,
        "seed": seed,
        "good_yield": len(good_idx),
        "pair_yield": len(win_idx),
        "consistently_bad": int(np.sum(status == "bad")),
        "mixed": int(np.sum(status == "mixed")),
        "unpaired_bad": int(bad_idx.size),
        "mean_score": float(q.value.mean()),
        "cases": cases,
    }
    result = CurationResult(
        good=_take(z, c_all, q.value, good_idx, spec, "self_generated_curated", threshold),
        winners=_take(z, c_all, q.value, win_idx, spec, "paired_winner", threshold),
        losers=_take(z, c_all, q.value, lose_idx, spec, "paired_loser", threshold),
        unpaired_bad=_take(z, c_all, q.value, bad_idx, spec, "unpaired_bad", threshold),
        audit=audit,
        candidates={
            "condition": np.repeat(np.arange(n_cond), k_per_condition).tolist(),
            "candidate": np.tile(np.arange(k_per_condition), n_cond).tolist(),
            "score": q.value.tolist(),
            "status": status.tolist(),
        },
    )
    if not good_idx and raise_on_empty:
        raise EmptyCurationError(
            f"no candidate reached threshold {threshold}; lower the threshold", audit=audit)
    return result
