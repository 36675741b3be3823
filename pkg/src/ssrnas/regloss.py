"""Probability normalization, sparsifying regularizers and L0 diagnostics.

Functions that take a probability vector accept a :class:`ProbVector`, a
plain array, or an ``adcore.Tensor``; tensors keep the computation on the
active tape so the regularizers can be differentiated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import adcore as ad

EPS_FLOOR = 1e-12
DEFAULT_RHO = {"depth": 0.15, "dilation-spatial": 0.3, "channel": 0.3}
AUX_KINDS = ("L1", "L2", "IE")


@dataclass(frozen=True)
class ProbVector:
    """Probabilities over the active candidates of one group."""
    p: np.ndarray
    candidates: np.ndarray = field(default=None)
    eps_floor: float = EPS_FLOOR

    def __len__(self):
        return len(self.p)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.p, dtype=dtype)


def _vec(p):
    if isinstance(p, ProbVector):
        return p.p
    if isinstance(p, ad.Tensor):
        return p
    return np.asarray(p, dtype=np.float64)


def relaxed_probs(group, logits=None):
    """Full-length probability vector of a group (zeros at inactive candidates).

    ``sigmoid(theta_i) / sum_{j active} sigmoid(theta_j)``.
    """
    if group.n_active == 0:
        raise ValueError(f"group {group.owner} has no active candidate")
    theta = group.logits if logits is None else logits
    act = group.active.astype(np.float64)
    return ad.normalize(ad.mul(ad.sigmoid(theta), act))


def normalize_probs(group) -> ProbVector:
    idx = group.active_idx
    if idx.size == 0:
        raise ValueError(f"group {group.owner} has no active candidate")
    s = ad.sigmoid(ad.value_of(group.logits)[idx])
    return ProbVector(s / s.sum(), idx)


def ssr_loss(p):
    """Sum of log-probabilities; 0 for a single candidate."""
    v = _vec(p)
    n = v.shape[0]
    if n <= 1:
        return 0.0
    floor = p.eps_floor if isinstance(p, ProbVector) else EPS_FLOOR
    out = ad.sum_all(ad.log(ad.maximum(v, floor)))
    return out if isinstance(out, ad.Tensor) else float(out)


def entropy(p):
    """Shannon entropy with natural log; terms at p=0 contribute 0."""
    v = _vec(p)
    if v.shape[0] <= 1:
        return 0.0
    out = ad.scale(ad.sum_all(ad.mul(v, ad.log(ad.maximum(v, EPS_FLOOR)))), -1.0)
    return out if isinstance(out, ad.Tensor) else float(out)


def aux_loss(p, kind: str, ie_sign: float = 1.0):
    """Competitor regularizers: L1 / L2 push toward 0 or 1, IE minimizes entropy.

    L1 = -sum |p - 0.5|, L2 = -sum (p - 0.5)^2, IE = ie_sign * H(p).
    """
    v = _vec(p)
    if kind == "L1":
        out = ad.scale(ad.sum_all(ad.absolute(ad.add(v, -0.5))), -1.0)
    elif kind == "L2":
        d = ad.add(v, -0.5)
        out = ad.scale(ad.sum_all(ad.mul(d, d)), -1.0)
    elif kind == "IE":
        h = entropy(p)
        out = ad.scale(h, ie_sign) if isinstance(h, ad.Tensor) else ie_sign * h
    else:
        raise ValueError(f"unknown auxiliary loss kind {kind!r}")
    return out if isinstance(out, ad.Tensor) else float(out)


def regularizer(p, kind: str, ie_sign: float = 1.0):
    """Dispatch on the search's regularizer name (SSR, L1, L2, IE, none)."""
    if kind == "SSR":
        return ssr_loss(p)
    if kind in AUX_KINDS:
        return aux_loss(p, kind, ie_sign)
    if kind == "none":
        return 0.0
    raise ValueError(f"unknown regularizer {kind!r}")


def _accumulate(total, term):
    if isinstance(total, ad.Tensor) or isinstance(term, ad.Tensor):
        return ad.add(total, term)
    return total + float(term)


def total_arch_loss(task_loss, groups_by_level: dict, rho: dict | None = None, flops_loss=0.0,
                    kind: str = "SSR", ie_sign: float = 1.0):
    """``task + sum_l rho_l * sum_{g in l} reg(p_g) + flops``.

    ``groups_by_level`` maps a level name to probability vectors over the
    active candidates of each live group of that level.
    """
    rho = DEFAULT_RHO if rho is None else rho
    total = task_loss
    for level, vectors in groups_by_level.items():
        weight = rho.get(level, 0.0)
        if weight < 0:
            raise ValueError(f"rho[{level}] must be non-negative")
        if weight == 0 or kind == "none":
            continue
        level_sum = 0.0
        for p in vectors:
            level_sum = _accumulate(level_sum, regularizer(p, kind, ie_sign))
        term = ad.scale(level_sum, weight) if isinstance(level_sum, ad.Tensor) else weight * level_sum
        total = _accumulate(total, term)
    return _accumulate(total, flops_loss)


def total_entropy(groups) -> float:
    """Summed entropy of all live (non-frozen) groups."""
    return float(sum(entropy(normalize_probs(g)) for g in groups if not g.frozen))


def level_entropy(groups) -> dict:
    out = {}
    for g in groups:
        if g.frozen:
            continue
        out[g.level] = out.get(g.level, 0.0) + entropy(normalize_probs(g))
    return out


def pnorm_energy(p, m: float) -> float:
    """``sum_i p_i^m``; at ``m = 0`` the count of entries above the floor."""
    if m < 0:
        raise ValueError("m must be non-negative")
    v = np.asarray(_vec(p), dtype=np.float64)
    if m == 0:
        return float(np.count_nonzero(v > EPS_FLOOR))
    return float(np.sum(np.exp(m * np.log(v))))


@dataclass
class EquivalenceReport:
    m_values: list
    taylor_residuals: list
    taylor_bounds: list
    limit_errors: list
    limit_rel_errors: list
    gradient_factorization_error: float

    @property
    def within_bounds(self) -> bool:
        return all(r <= b for r, b in zip(self.taylor_residuals, self.taylor_bounds))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("m_values", "taylor_residuals", "taylor_bounds", "limit_errors", "limit_rel_errors",
                 "gradient_factorization_error")}


def taylor_residual(p, m: float) -> float:
    """``|E^m(p) - n - m * L_ssr(p)|``, evaluated without cancellation."""
    x = np.log(np.asarray(_vec(p), dtype=np.float64))
    return float(abs(np.sum(np.expm1(m * x) - m * x)))


def power_mean_limit(p, m: float) -> float:
    """``(E^m(p) / n) ** (1/m)`` evaluated through expm1/log1p."""
    x = np.log(np.asarray(_vec(p), dtype=np.float64))
    return math.exp(math.log1p(np.mean(np.expm1(m * x))) / m)


def ssr_gradient(p) -> np.ndarray:
    """Gradient of the SSR loss w.r.t. p, taken through the tape."""
    leaf = ad.Tensor(np.asarray(_vec(p), dtype=np.float64))
    tape = ad.Tape()
    with tape:
        out = ad.sum_all(ad.log(leaf))
    ad.backward(tape, out)
    return leaf.grad


def check_l0_equivalence(p, m_values) -> EquivalenceReport:
    """Numerical checks that the SSR loss behaves like the m -> 0 power energy."""
    v = np.asarray(_vec(p), dtype=np.float64)
    if any(m <= 0 for m in m_values):
        raise ValueError("every m must be positive")
    n = v.size
    l_ssr = float(np.sum(np.log(v)))
    geo = math.exp(l_ssr / n)
    residuals, bounds, lim_abs, lim_rel = [], [], [], []
    for m in m_values:
        residuals.append(taylor_residual(v, m))
        bounds.append(0.5 * m * m * float(np.sum(np.log(v) ** 2)))
        lim = power_mean_limit(v, m)
        lim_abs.append(abs(lim - geo))
        lim_rel.append(abs(lim - geo) / geo)
    closed_form = (1.0 / v ** 2) * v
    grad_err = float(np.max(np.abs(ssr_gradient(v) - closed_form)))
    return EquivalenceReport(list(m_values), residuals, bounds, lim_abs, lim_rel, grad_err)
