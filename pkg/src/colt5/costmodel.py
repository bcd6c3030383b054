"""Analytic encoder-layer FLOPs and parameter counts for T5, LongT5 and CoLT5.

One multiply-add counts as one FLOP.  Everything is computed with
``Fraction`` so that identities such as "the conditional feedforward costs
exactly 3/4 of the dense one" can be checked without rounding; values are
converted to ``int`` only when they are whole numbers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

from .tensor import ContractError

MODEL_KINDS = ("T5", "LongT5", "CoLT5")
COMPONENTS = ("vanilla_attn", "qkv_o_proj", "ffn", "longt5_local", "longt5_global")


def _exact(x: Fraction):
    x = Fraction(x)
    return int(x) if x.denominator == 1 else x


@dataclass
class CostQuery:
    model_kind: str = "CoLT5"
    n: int = 16384
    d: int = 768
    w: int = 255
    m: Fraction | None = None
    q: Fraction | None = None
    v: Fraction | None = None
    r_light_ffn: Fraction = Fraction(1, 2)
    r_heavy_ffn: Fraction = Fraction(4)
    r_light_attn: Fraction = Fraction(1, 4)
    r_heavy_attn: Fraction = Fraction(3, 4)
    # sum true per-token window sizes (windows clipped at the sequence ends)
    # instead of n * w
    exact_windows: bool = False

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ContractError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        for name in ("n", "d", "w"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")
        for name in ("r_light_ffn", "r_heavy_ffn", "r_light_attn", "r_heavy_attn"):
            setattr(self, name, Fraction(getattr(self, name)))

    @property
    def routed_m(self) -> Fraction:
        return Fraction(self.n, 16) if self.m is None else Fraction(self.m)

    @property
    def routed_q(self) -> Fraction:
        return self.routed_m if self.q is None else Fraction(self.q)

    @property
    def routed_v(self) -> Fraction:
        return 2 * self.routed_m if self.v is None else Fraction(self.v)

    def window_positions(self) -> Fraction:
        """Total attended positions over all tokens in the local window."""
        if not self.exact_windows:
            return Fraction(self.n * self.w)
        r = (self.w - 1) // 2
        n = self.n
        return Fraction(sum(min(i + r, n - 1) - max(i - r, 0) + 1 for i in range(n)))


@dataclass
class CostReport:
    model_kind: str
    n: int
    d: int
    components: dict[str, object]
    total: object
    params: object
    rounded_total: object = None
    rounded_form: str = ""
    rounded_rel_gap: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def enc(x):
            if isinstance(x, Fraction):
                return {"fraction": str(x), "value": float(x)}
            return x

        return {
            "model_kind": self.model_kind,
            "n": self.n,
            "d": self.d,
            "components": {k: enc(v) for k, v in self.components.items()},
            "total": enc(self.total),
            "params": enc(self.params),
            "rounded_form": self.rounded_form,
            "rounded_total": enc(self.rounded_total),
            "rounded_rel_gap": self.rounded_rel_gap,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_table(self) -> str:
        rows = [(k, _show(v)) for k, v in self.components.items()]
        rows.append(("total", _show(self.total)))
        if self.rounded_form:
            rows.append((f"rounded ({self.rounded_form})", _show(self.rounded_total)))
            rows.append(("rounded relative gap", f"{self.rounded_rel_gap:.6f}"))
        rows.append(("params per layer", _show(self.params)))
        width = max(len(k) for k, _ in rows)
        vwidth = max(len(v) for _, v in rows)
        head = f"{self.model_kind} encoder layer, n={self.n}, d={self.d}"
        lines = [head, "-" * max(len(head), width + vwidth + 2)]
        lines += [f"{k:<{width}}  {v:>{vwidth}}" for k, v in rows]
        return "\n".join(lines) + "\n"


def _show(x) -> str:
    if isinstance(x, Fraction):
        return f"{float(x):,.3f} ({x})"
    return f"{x:,}"


def flops_component(component: str, query: CostQuery):
    """Dense cost of one encoder-layer component."""
    n, d, w = Fraction(query.n), Fraction(query.d), Fraction(query.w)
    if component == "vanilla_attn":
        val = 2 * n * n * d
    elif component == "qkv_o_proj":
        val = 4 * n * d * d
    elif component == "ffn":
        val = 8 * n * d * d
    elif component == "longt5_local":
        val = 2 * query.window_positions() * d if query.exact_windows else 2 * n * w * d
    elif component == "longt5_global":
        val = n * n * d / 8
    else:
        raise ContractError(f"unknown component {component!r}; expected one of {COMPONENTS}")
    return _exact(val)


def flops_ffn_colt5(query: CostQuery):
    """(light, heavy, total) for the conditional feedforward."""
    n, d = Fraction(query.n), Fraction(query.d)
    light = 8 * n * query.r_light_ffn * d * d
    heavy = 8 * query.routed_m * query.r_heavy_ffn * d * d
    return _exact(light), _exact(heavy), _exact(light + heavy)


def flops_attn_colt5(query: CostQuery):
    """(local_proj, local_attn, global_proj, global_attn, total)."""
    n, d = Fraction(query.n), Fraction(query.d)
    rl, rh = query.r_light_attn, query.r_heavy_attn
    q, v = query.routed_q, query.routed_v
    local_proj = 4 * n * rl * d * d
    local_attn = 2 * query.window_positions() * rl * d
    global_proj = 2 * q * rh * d * d + 2 * v * rh * d * d
    global_attn = 2 * q * v * rh * d
    total = local_proj + local_attn + global_proj + global_attn
    return tuple(_exact(x) for x in (local_proj, local_attn, global_proj, global_attn, total))


def layer_params(query: CostQuery):
    """Encoder-layer weights under the FLOPs convention (plain two-matrix
    FFN of hidden 4d, d x d attention projections split by head ratio)."""
    d = Fraction(query.d)
    if query.model_kind in ("T5", "LongT5"):
        return _exact(4 * d * d + 8 * d * d)
    attn = 4 * (query.r_light_attn + query.r_heavy_attn) * d * d
    ffn = 8 * (query.r_light_ffn + query.r_heavy_ffn) * d * d
    return _exact(attn + ffn + 3 * d)


def flops_layer(query: CostQuery) -> CostReport:
    n, d = Fraction(query.n), Fraction(query.d)
    kind = query.model_kind
    if kind == "T5":
        comps = {c: flops_component(c, query) for c in ("qkv_o_proj", "ffn", "vanilla_attn")}
    elif kind == "LongT5":
        comps = {c: flops_component(c, query) for c in ("qkv_o_proj", "ffn", "longt5_global")}
    else:
        light, heavy, _ = flops_ffn_colt5(query)
        lp, la, gp, ga, _ = flops_attn_colt5(query)
        comps = {
            "ffn_light": light,
            "ffn_heavy": heavy,
            "attn_local_proj": lp,
            "attn_local": la,
            "attn_global_proj": gp,
            "attn_global": ga,
        }
    total = _exact(sum(Fraction(v) for v in comps.values()))
    report = CostReport(kind, query.n, query.d, comps, total, layer_params(query))
    if kind == "CoLT5":
        rounded = Fraction(29, 4) * n * d * d + n * n * d / 84
        report.rounded_form = "7.25*n*d^2 + n^2*d/84"
        report.rounded_total = _exact(rounded)
        report.rounded_rel_gap = float(abs(Fraction(total) - rounded) / Fraction(total)) if total else 0.0
    return report
