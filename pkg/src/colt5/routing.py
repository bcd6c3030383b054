"""Learned token routing: score, normalize to a soft top-k, select.

A router is a single learned vector ``u``.  Token scores are ``X @ u``; the
scores are pushed through an entropy-regularized top-k projection

    a_i = sigmoid((s_i - lam) / eps),   with lam chosen so that sum(a) = k,

and the hard selection keeps the highest-scoring tokens.  Only selected
tokens keep their soft weight; everything else is zeroed.

The dual ``lam`` is found by bisection on plain arrays and enters the graph
as a constant, so ``d a_i / d s_j = delta_ij * a_i (1 - a_i) / eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor


@dataclass(frozen=True)
class SoftTopKConfig:
    epsilon: float = 1.0
    iterations: int = 50
    train_expansion: Fraction = Fraction(9, 8)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")
        if self.iterations < 1:
            raise ContractError(f"iterations must be >= 1, got {self.iterations}")
        if Fraction(self.train_expansion) < 1:
            raise ContractError(f"train_expansion must be >= 1, got {self.train_expansion}")


@dataclass
class Router:
    u: Tensor

    @property
    def dim(self) -> int:
        return self.u.shape[0]


@dataclass
class RoutingDecision:
    selected: np.ndarray
    weights: Tensor
    raw_scores: Tensor
    k_target: int
    # weights over all n tokens before masking; kept for diagnostics
    soft: np.ndarray | None = field(default=None, repr=False)
    dual: float | None = None

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def selected_weights(self) -> Tensor:
        return T.gather_rows(T.reshape(self.weights, (self.n, 1)), self.selected).reshape(-1)


def route_scores(x: Tensor, router: Router) -> Tensor:
    if x.ndim != 2 or x.shape[1] != router.dim:
        raise DimensionError(f"route_scores: states {x.shape} vs router dim {router.dim}")
    with T.mac_scope("router"):
        return T.matmul(x, T.reshape(router.u, (router.dim, 1))).reshape(-1)


def _logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def solve_dual(s: np.ndarray, k: float, cfg: SoftTopKConfig) -> float:
    """Bisection for ``lam`` with ``sum(sigmoid((s - lam)/eps)) = k``.

    The bracket ``[min(s), max(s)] - eps*logit(k/n)`` always contains the
    root: at its ends every weight is respectively >= and <= ``k/n``.
    """
    s = np.asarray(s, dtype=np.float64)
    n = s.shape[0]
    eps = cfg.epsilon
    shift = eps * _logit(k / n)
    lo, hi = float(s.min()) - shift, float(s.max()) - shift
    if lo == hi:
        return lo
    for _ in range(cfg.iterations):
        mid = 0.5 * (lo + hi)
        total = T._sigmoid_np((s - mid) / eps).sum()
        if total > k:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def soft_topk_normalize(
    s: Tensor, k: int, cfg: SoftTopKConfig = SoftTopKConfig(), valid: np.ndarray | None = None
) -> Tensor:
    """Soft weights in (0, 1) summing to ``k``; monotone in ``s``.

    ``valid`` (optional boolean mask) excludes positions, e.g. padding; they
    get weight exactly 0 and the constraint is solved over the rest.
    """
    n = s.shape[0]
    if s.ndim != 1:
        raise DimensionError(f"soft_topk_normalize expects a vector, got {s.shape}")
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.all():
            valid = None
    n_valid = n if valid is None else int(valid.sum())
    if not 1 <= k <= n_valid:
        raise ContractError(f"soft top-k needs 1 <= k <= n, got k={k}, n={n_valid}")
    if not np.all(np.isfinite(s.data if valid is None else s.data[valid])):
        raise T.NumericInputError("routing scores must be finite")
    if valid is None:
        if k == n:
            return T.add(T.mul(s, 0.0), 1.0)
        lam = solve_dual(s.data, k, cfg)
        return T.sigmoid(T.mul(T.sub(s, lam), 1.0 / cfg.epsilon))
    if k == n_valid:
        a = T.add(T.mul(s, 0.0), 1.0)
    else:
        lam = solve_dual(s.data[valid], k, cfg)
        a = T.sigmoid(T.mul(T.sub(T.masked_fill(s, ~valid, 0.0), lam), 1.0 / cfg.epsilon))
    return T.masked_fill(a, ~valid, 0.0)


def expanded_count(k: int, n: int, cfg: SoftTopKConfig) -> int:
    """``min(n, round_half_up(k * train_expansion))``."""
    x = Fraction(k) * Fraction(cfg.train_expansion)
    return min(n, math.floor(x + Fraction(1, 2)))


def select_topk(
    s, k: int, training: bool = False, cfg: SoftTopKConfig = SoftTopKConfig(), valid=None
) -> np.ndarray:
    """Indices of the highest scores, ties to the lower index, sorted ascending."""
    scores = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"select_topk needs 1 <= k <= n, got k={k}, n={n}")
    k_sel = expanded_count(k, n, cfg) if training else k
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        scores = np.where(valid, scores, -np.inf)
        k_sel = min(k_sel, int(valid.sum()))
    # stable sort on -score keeps lower indices first among ties
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k_sel])


def _masked_weights(a: Tensor, selected: np.ndarray) -> Tensor:
    keep = np.ones(a.shape[0], dtype=bool)
    keep[selected] = False
    return T.masked_fill(a, keep, 0.0)


def route(
    x: Tensor,
    router: Router,
    k: int,
    training: bool = False,
    cfg: SoftTopKConfig = SoftTopKConfig(),
    valid: np.ndarray | None = None,
) -> RoutingDecision:
    """Score, normalize and select; weights are zero off the selected set."""
    s = route_scores(x, router)
    if valid is not None:
        k = min(k, int(np.asarray(valid).sum()))
    a = soft_topk_normalize(s, k, cfg, valid)
    selected = select_topk(s, k, training, cfg, valid)
    return RoutingDecision(
        selected=selected,
        weights=_masked_weights(a, selected),
        raw_scores=s,
        k_target=k,
        soft=a.data,
    )


class LearnedRouting:
    """Default strategy: the learned router decides."""

    name = "learned"

    def __init__(self, cfg: SoftTopKConfig = SoftTopKConfig()):
        self.cfg = cfg

    def __call__(self, x, router, k, training, key=None, valid=None) -> RoutingDecision:
        return route(x, router, k, training, self.cfg, valid)


class StaticRouting:
    """Ablation baseline: split the input into ``k`` equal-length blocks and
    route the first token of each block with unit weight.

    The router embedding is ignored, so it receives no gradient.
    """

    name = "static"

    def __call__(self, x, router, k, training, key=None, valid=None) -> RoutingDecision:
        n = x.shape[0]
        if not 1 <= k <= n:
            raise ContractError(f"static routing needs 1 <= k <= n, got k={k}, n={n}")
        selected = np.unique((np.arange(k) * n) // k)
        w = np.zeros(n, dtype=x.dtype)
        w[selected] = 1.0
        return RoutingDecision(
            selected=selected,
            weights=Tensor(w),
            raw_scores=Tensor(np.zeros(n, dtype=x.dtype)),
            k_target=k,
            soft=w,
        )


class AllTokensRouting:
    """Routes every position with unit weight (used for ``v=all``)."""

    name = "all"

    def __call__(self, x, router, k, training, key=None, valid=None) -> RoutingDecision:
        n = x.shape[0]
        w = np.ones(n, dtype=x.dtype)
        return RoutingDecision(
            selected=np.arange(n),
            weights=Tensor(w),
            raw_scores=Tensor(np.zeros(n, dtype=x.dtype)),
            k_target=n,
            soft=w,
        )


class RecordingRouting:
    """Wraps a strategy and remembers each call's selection and dual.

    ``freeze()`` returns a strategy that replays the recorded selections and
    duals, keeping soft weights differentiable in the scores.  That is what
    finite-difference checks need: the hard set and ``lam`` held fixed while
    the inputs move.
    """

    def __init__(self, inner=None):
        self.inner = inner or LearnedRouting()
        self.records: dict = {}

    def __call__(self, x, router, k, training, key=None, valid=None):
        d = self.inner(x, router, k, training, key, valid)
        if isinstance(self.inner, LearnedRouting) and d.k_target < x.shape[0]:
            cfg = self.inner.cfg
            valid_s = d.raw_scores.data if valid is None else d.raw_scores.data[np.asarray(valid)]
            d.dual = solve_dual(valid_s, d.k_target, cfg)
        self.records[key] = (d.selected.copy(), d.dual, d.k_target)
        return d

    def freeze(self) -> "FrozenRouting":
        cfg = self.inner.cfg if isinstance(self.inner, LearnedRouting) else SoftTopKConfig()
        return FrozenRouting(dict(self.records), cfg)


class FrozenRouting:
    def __init__(self, records: dict, cfg: SoftTopKConfig):
        self.records = records
        self.cfg = cfg

    def __call__(self, x, router, k, training, key=None, valid=None):
        selected, lam, k_target = self.records[key]
        s = route_scores(x, router)
        if lam is None:
            a = T.add(T.mul(s, 0.0), 1.0)
        else:
            a = T.sigmoid(T.mul(T.sub(s, lam), 1.0 / self.cfg.epsilon))
        return RoutingDecision(
            selected=selected,
            weights=_masked_weights(a, selected),
            raw_scores=s,
            k_target=k_target,
            soft=a.data,
            dual=lam,
        )
