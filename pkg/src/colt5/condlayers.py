"""Conditional feedforward and attention layers, plus multi-query attention.

Shapes follow the convention ``[n, d]`` for a sequence of token states.
Multi-head tensors are laid out ``[heads, n, head_dim]``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator

import numpy as np

from . import tensor as T
from .routing import RoutingDecision
from .tensor import ContractError, Tensor

NEG_INF = -1e30


@dataclass
class LayerConfig:
    d: int = 64
    ffn_base_hidden: int = 256
    ffn_light_ratio: Fraction = Fraction(1, 2)
    ffn_heavy_ratio: Fraction = Fraction(4)
    # explicit hidden sizes override base * ratio (the published tables use
    # sizes that are not exact multiples)
    ffn_light_hidden: int | None = None
    ffn_heavy_hidden: int | None = None
    heads_total: int = 4
    heads_light: int = 1
    heads_heavy: int = 3
    head_dim: int = 16
    window_radius: int = 127
    q_per_m: Fraction = Fraction(1)
    v_per_m: Fraction = Fraction(2)
    gated_ffn: bool = True
    kv_scaling: str = "inputs"
    rel_buckets: int = 32
    rel_max_distance: int = 128

    def __post_init__(self):
        self.ffn_light_ratio = Fraction(self.ffn_light_ratio)
        self.ffn_heavy_ratio = Fraction(self.ffn_heavy_ratio)
        self.q_per_m = Fraction(self.q_per_m)
        self.v_per_m = Fraction(self.v_per_m)
        if self.heads_light + self.heads_heavy != self.heads_total:
            raise ContractError(
                f"heads_light ({self.heads_light}) + heads_heavy ({self.heads_heavy}) "
                f"!= heads_total ({self.heads_total})"
            )
        if self.window_radius < 0:
            raise ContractError("window_radius must be >= 0")
        if self.kv_scaling not in ("inputs", "values"):
            raise ContractError(f"kv_scaling must be 'inputs' or 'values', got {self.kv_scaling!r}")

    @property
    def window(self) -> int:
        return 2 * self.window_radius + 1

    @property
    def light_hidden(self) -> int:
        if self.ffn_light_hidden is not None:
            return self.ffn_light_hidden
        return int(self.ffn_base_hidden * self.ffn_light_ratio)

    @property
    def heavy_hidden(self) -> int:
        if self.ffn_heavy_hidden is not None:
            return self.ffn_heavy_hidden
        return int(self.ffn_base_hidden * self.ffn_heavy_ratio)

    def routed_counts(self, m: int, n: int) -> tuple[int, int]:
        """(q, v) for ``m`` routed FFN tokens, clamped to ``[1, n]``."""
        q = max(1, min(n, round(m * self.q_per_m)))
        v = max(1, min(n, round(m * self.v_per_m)))
        return q, v


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses/lists and yield ``(dotted_name, tensor)`` pairs."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            yield from named_parameters(val, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, val in enumerate(obj):
            yield from named_parameters(val, f"{prefix}.{i}" if prefix else str(i))


@dataclass
class FFNBranch:
    wi: Tensor
    wo: Tensor
    wi_gate: Tensor | None = None

    @property
    def hidden(self) -> int:
        return self.wo.shape[0]


@dataclass
class ConditionalFFNParams:
    light: FFNBranch
    heavy: FFNBranch


@dataclass
class AttnProj:
    q: Tensor
    k: Tensor
    v: Tensor
    o: Tensor
    head_dim: int

    @property
    def heads(self) -> int:
        return self.q.shape[1] // self.head_dim


@dataclass
class ConditionalAttnParams:
    light: AttnProj
    heavy: AttnProj
    rel_bias: Tensor  # [buckets, heads_light]


@dataclass
class CrossAttnParams:
    """Cross-attention projections.

    Multi-query when ``k``/``v`` are ``[d, head_dim]`` (one shared head),
    multi-head when they are ``[d, heads * head_dim]``.
    """

    q: Tensor
    k: Tensor
    v: Tensor
    o: Tensor
    heads: int

    @property
    def head_dim(self) -> int:
        return self.q.shape[1] // self.heads

    @property
    def kv_heads(self) -> int:
        return self.k.shape[1] // self.head_dim


def _normal(rng, shape, std, dtype):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def _dense(rng, fan_in, fan_out, dtype):
    return _normal(rng, (fan_in, fan_out), 1.0 / math.sqrt(fan_in), dtype)


def init_ffn_branch(rng, d, hidden, gated, dtype) -> FFNBranch:
    wi = _dense(rng, d, hidden, dtype)
    gate = _dense(rng, d, hidden, dtype) if gated else None
    wo = _dense(rng, hidden, d, dtype)
    return FFNBranch(wi=wi, wo=wo, wi_gate=gate)


def init_attn_proj(rng, d, heads, head_dim, dtype) -> AttnProj:
    inner = heads * head_dim
    return AttnProj(
        _dense(rng, d, inner, dtype),
        _dense(rng, d, inner, dtype),
        _dense(rng, d, inner, dtype),
        _dense(rng, inner, d, dtype),
        head_dim,
    )


def init_conditional_attn(rng, cfg: LayerConfig, dtype) -> ConditionalAttnParams:
    return ConditionalAttnParams(
        light=init_attn_proj(rng, cfg.d, cfg.heads_light, cfg.head_dim, dtype),
        heavy=init_attn_proj(rng, cfg.d, cfg.heads_heavy, cfg.head_dim, dtype),
        rel_bias=_normal(rng, (cfg.rel_buckets, cfg.heads_light), 0.1, dtype),
    )


def init_conditional_ffn(rng, cfg: LayerConfig, dtype) -> ConditionalFFNParams:
    return ConditionalFFNParams(
        light=init_ffn_branch(rng, cfg.d, cfg.light_hidden, cfg.gated_ffn, dtype),
        heavy=init_ffn_branch(rng, cfg.d, cfg.heavy_hidden, cfg.gated_ffn, dtype),
    )


def init_cross_attn(rng, d, heads, head_dim, multi_query, dtype) -> CrossAttnParams:
    kv = head_dim if multi_query else heads * head_dim
    return CrossAttnParams(
        q=_dense(rng, d, heads * head_dim, dtype),
        k=_dense(rng, d, kv, dtype),
        v=_dense(rng, d, kv, dtype),
        o=_dense(rng, heads * head_dim, d, dtype),
        heads=heads,
    )


# ---------------------------------------------------------------------------
# relative position bias
# ---------------------------------------------------------------------------


def relative_position_bucket(rel, bidirectional=True, num_buckets=32, max_distance=128):
    """T5 bucketing of ``rel = key_pos - query_pos``."""
    rel = np.asarray(rel, dtype=np.int64)
    ret = np.zeros_like(rel)
    n = -rel
    if bidirectional:
        num_buckets //= 2
        ret += (n < 0).astype(np.int64) * num_buckets
        n = np.abs(n)
    else:
        n = np.maximum(n, 0)
    max_exact = num_buckets // 2
    is_small = n < max_exact
    with np.errstate(divide="ignore"):
        large = max_exact + (
            np.log(np.maximum(n, 1) / max_exact)
            / math.log(max_distance / max_exact)
            * (num_buckets - max_exact)
        ).astype(np.int64)
    large = np.minimum(large, num_buckets - 1)
    return ret + np.where(is_small, n, large)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, inner = x.shape
    return T.transpose(T.reshape(x, (n, heads, inner // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, n, hd = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, h * hd))


def ffn_branch(h: Tensor, p: FFNBranch) -> Tensor:
    """T5.1.1 feedforward: ``gelu(h Wi) * (h Wg)`` (gated) or ``gelu(h Wi)``."""
    act = T.gelu(T.matmul(h, p.wi))
    if p.wi_gate is not None:
        act = T.mul(act, T.matmul(h, p.wi_gate))
    return T.matmul(act, p.wo)


def _zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros(x.shape, dtype=x.dtype))


def _check_decision(decision: RoutingDecision, n: int, what: str):
    if decision.n != n:
        raise ContractError(f"{what}: routing decision covers {decision.n} tokens, input has {n}")


# ---------------------------------------------------------------------------
# conditional feedforward
# ---------------------------------------------------------------------------


def heavy_ffn(h: Tensor, p: ConditionalFFNParams, decision: RoutingDecision) -> Tensor:
    """Heavy branch on selected rows only, scaled by their soft weights and
    scattered back; all other rows are exactly zero."""
    n = h.shape[0]
    _check_decision(decision, n, "conditional_ffn")
    if len(decision.selected) == 0:
        return _zeros_like(h)
    with T.mac_scope("ffn.heavy"):
        y = ffn_branch(T.gather_rows(h, decision.selected), p.heavy)
    y = T.scale_rows(y, decision.selected_weights)
    return T.scatter_add_rows(_zeros_like(h), decision.selected, y)


def conditional_ffn(
    x: Tensor, p: ConditionalFFNParams, decision: RoutingDecision | None, h: Tensor | None = None
) -> Tensor:
    """``x + light(h) + w * heavy(h)`` with ``h`` the branch input (defaults to ``x``)."""
    h = x if h is None else h
    with T.mac_scope("ffn.light"):
        out = T.add(x, ffn_branch(h, p.light))
    if decision is None:
        return out
    return T.add(out, heavy_ffn(h, p, decision))


# ---------------------------------------------------------------------------
# conditional attention
# ---------------------------------------------------------------------------


def _light_bias(p: ConditionalAttnParams, cfg: LayerConfig, radius: int) -> Tensor:
    offsets = np.arange(-radius, radius + 1)
    buckets = relative_position_bucket(offsets, True, cfg.rel_buckets, cfg.rel_max_distance)
    table = T.gather_rows(p.rel_bias, buckets)  # [w, heads]
    return T.transpose(table, (1, 0))  # [heads, w]


def light_attention(h: Tensor, p: ConditionalAttnParams, cfg: LayerConfig, return_weights=False):
    """Local multi-head attention over ``[i - r, i + r]`` with relative bias.

    Computed on a band ``[heads, n, 2r+1]`` rather than a dense ``n x n``
    matrix.  The window radius is capped at ``n - 1``, which changes nothing
    numerically since positions past the ends are masked anyway.
    """
    n = h.shape[0]
    proj = p.light
    heads, hd = proj.heads, proj.head_dim
    radius = min(cfg.window_radius, n - 1)
    w = 2 * radius + 1
    with T.mac_scope("attn.light.proj"):
        q = _split_heads(T.matmul(h, proj.q), heads)
        k = _split_heads(T.matmul(h, proj.k), heads)
        v = _split_heads(T.matmul(h, proj.v), heads)
    kw, valid = T.sliding_windows(k, radius)  # [heads, n, w, hd]
    vw, _ = T.sliding_windows(v, radius)
    with T.suspend_mac_count():
        logits = T.matmul(T.reshape(q, (heads, n, 1, hd)), T.transpose(kw, (0, 1, 3, 2)))
    T.record_macs(int(valid.sum()) * hd * heads * 2, "attn.light.attn")
    logits = T.mul(T.reshape(logits, (heads, n, w)), 1.0 / math.sqrt(hd))
    bias = T.broadcast_to(T.reshape(_light_bias(p, cfg, radius), (heads, 1, w)), (heads, n, w))
    logits = T.masked_fill(T.add(logits, bias), np.broadcast_to(~valid, (heads, n, w)), NEG_INF)
    probs = T.softmax(logits, axis=-1)
    with T.suspend_mac_count():
        ctx = T.matmul(T.reshape(probs, (heads, n, 1, w)), vw)
    ctx = T.reshape(ctx, (heads, n, hd))
    with T.mac_scope("attn.light.proj"):
        out = T.matmul(_merge_heads(ctx), proj.o)
    if not return_weights:
        return out
    dense = np.zeros((heads, n, n), dtype=probs.dtype)
    rows, cols = np.nonzero(valid)
    dense[:, rows, rows + cols - radius] = probs.data[:, rows, cols]
    return out, dense


def heavy_attention(
    h: Tensor,
    p: ConditionalAttnParams,
    q_decision: RoutingDecision,
    kv_decision: RoutingDecision,
    cfg: LayerConfig | None = None,
) -> Tensor:
    """Routed queries attend to routed key-value tokens.

    Key-value rows are scaled by their soft weights before the K/V
    projections (or only on V with ``kv_scaling='values'``).  Outputs are
    scaled by the query weights and scattered back to query positions.
    No positional bias and no mask.
    """
    n = h.shape[0]
    _check_decision(q_decision, n, "heavy_attention")
    _check_decision(kv_decision, n, "heavy_attention")
    if len(q_decision.selected) == 0 or len(kv_decision.selected) == 0:
        raise ContractError("heavy_attention needs at least one query and one key-value token")
    kv_scaling = cfg.kv_scaling if cfg is not None else "inputs"
    proj = p.heavy
    heads, hd = proj.heads, proj.head_dim
    with T.mac_scope("attn.heavy.proj"):
        hq = T.gather_rows(h, q_decision.selected)
        hkv = T.gather_rows(h, kv_decision.selected)
        kv_w = kv_decision.selected_weights
        if kv_scaling == "inputs":
            hkv = T.scale_rows(hkv, kv_w)
        q = _split_heads(T.matmul(hq, proj.q), heads)
        k = _split_heads(T.matmul(hkv, proj.k), heads)
        vals = T.matmul(hkv, proj.v)
        if kv_scaling == "values":
            vals = T.scale_rows(vals, kv_w)
        v = _split_heads(vals, heads)
    with T.mac_scope("attn.heavy.attn"):
        logits = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(hd))
        ctx = T.matmul(T.softmax(logits, axis=-1), v)
    with T.mac_scope("attn.heavy.proj"):
        out = T.matmul(_merge_heads(ctx), proj.o)
    out = T.scale_rows(out, q_decision.selected_weights)
    return T.scatter_add_rows(_zeros_like(h), q_decision.selected, out)


def conditional_attention(
    x: Tensor,
    p: ConditionalAttnParams,
    q_decision: RoutingDecision | None,
    kv_decision: RoutingDecision | None,
    cfg: LayerConfig,
    h: Tensor | None = None,
) -> Tensor:
    h = x if h is None else h
    out = T.add(x, light_attention(h, p, cfg))
    if q_decision is None or kv_decision is None:
        return out
    return T.add(out, heavy_attention(h, p, q_decision, kv_decision, cfg))


# ---------------------------------------------------------------------------
# decoder attention
# ---------------------------------------------------------------------------


@dataclass
class KVCache:
    k: Tensor  # [kv_heads, n, hd] or [n, hd] for a single shared head
    v: Tensor


def cross_kv(encoder_state: Tensor, p: CrossAttnParams) -> KVCache:
    """Project encoder states to keys/values once; reused every decode step.

    Multi-head keys are projected head by head as a batched product, so each
    head runs the same ``[n, d] @ [d, hd]`` product as the shared head does
    and tied heads reproduce the multi-query result bit for bit.
    """
    if p.kv_heads == 1:
        return KVCache(T.matmul(encoder_state, p.k), T.matmul(encoder_state, p.v))
    n, d = encoder_state.shape
    heads, hd = p.kv_heads, p.head_dim
    src = T.broadcast_to(T.reshape(encoder_state, (1, n, d)), (heads, n, d))

    def per_head(w):
        return T.transpose(T.reshape(w, (d, heads, hd)), (1, 0, 2))  # [H, d, hd]

    return KVCache(T.matmul(src, per_head(p.k)), T.matmul(src, per_head(p.v)))


def mqa_cross_attention(
    decoder_state: Tensor,
    encoder_state: Tensor | None,
    p: CrossAttnParams,
    cache: KVCache | None = None,
) -> Tensor:
    """Cross-attention where all query heads share one key and one value head.

    Works unchanged for multi-head params (``kv_heads == heads``).  Pass a
    precomputed ``cache`` to skip re-projecting the encoder states.
    """
    if cache is None:
        cache = cross_kv(encoder_state, p)
    q = _split_heads(T.matmul(decoder_state, p.q), p.heads)  # [H, t, hd]
    scale = 1.0 / math.sqrt(p.head_dim)
    if p.kv_heads == 1:
        logits = T.matmul(q, T.transpose(cache.k, (1, 0)))  # shared [hd, n]
        probs = T.softmax(T.mul(logits, scale), axis=-1)
        ctx = T.matmul(probs, cache.v)
    else:
        logits = T.matmul(q, T.transpose(cache.k, (0, 2, 1)))
        probs = T.softmax(T.mul(logits, scale), axis=-1)
        ctx = T.matmul(probs, cache.v)
    return T.matmul(_merge_heads(ctx), p.o)


def causal_self_attention(
    x: Tensor,
    p: AttnProj,
    rel_bias: Tensor,
    cfg: LayerConfig,
    cache: KVCache | None = None,
) -> tuple[Tensor, KVCache]:
    """Multi-head causal self-attention for the decoder.

    ``cache`` holds keys/values of earlier positions; the new rows of ``x``
    sit at positions ``len(cache) ...``.  Returns the output and the
    extended cache.
    """
    t = x.shape[0]
    heads, hd = p.heads, p.head_dim
    q = _split_heads(T.matmul(x, p.q), heads)
    k = _split_heads(T.matmul(x, p.k), heads)
    v = _split_heads(T.matmul(x, p.v), heads)
    offset = 0
    if cache is not None:
        offset = cache.k.shape[1]
        k = T.concat([cache.k, k], axis=1)
        v = T.concat([cache.v, v], axis=1)
    total = offset + t
    qpos = offset + np.arange(t)
    kpos = np.arange(total)
    rel = kpos[None, :] - qpos[:, None]
    buckets = relative_position_bucket(rel, False, cfg.rel_buckets, cfg.rel_max_distance)
    bias = T.gather_rows(rel_bias, buckets.reshape(-1))  # [t*total, H]
    bias = T.transpose(T.reshape(bias, (t, total, heads)), (2, 0, 1))
    logits = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(hd))
    logits = T.add(logits, bias)
    mask = np.broadcast_to(rel > 0, (heads, t, total))
    probs = T.softmax(T.masked_fill(logits, mask, NEG_INF), axis=-1)
    out = T.matmul(_merge_heads(T.matmul(probs, v)), p.o)
    return out, KVCache(k, v)
