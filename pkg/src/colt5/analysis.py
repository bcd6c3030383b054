"""Routing statistics over recorded traces.

Proportions count hard selection ("routed through the heavy path").
Correlations use the soft routing weights over all tokens.
"""

from __future__ import annotations

import csv
import html
import io
import json
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import ROUTERS, RoutingTrace
from .tasks import CATEGORIES
from .tensor import ContractError

PAIRS = (("ffn", "kv"), ("ffn", "query"), ("kv", "query"))
PAIR_NAMES = ("MLP-KV", "MLP-Q", "KV-Q")


@dataclass
class ProportionReport:
    # overall[router][category]
    overall: dict[str, dict[str, float]]
    # per_layer[layer][router][category], present when requested
    per_layer: list[dict[str, dict[str, float]]] | None = None

    def to_json(self) -> str:
        return json.dumps({"overall": self.overall, "per_layer": self.per_layer}, sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "router", "category", "proportion"])
        for r in ROUTERS:
            for c in CATEGORIES:
                w.writerow(["all", r, c, _fmt(self.overall[r][c])])
        for li, layer in enumerate(self.per_layer or []):
            for r in ROUTERS:
                for c in CATEGORIES:
                    w.writerow([li, r, c, _fmt(layer[r][c])])
        return buf.getvalue()


@dataclass
class CorrelationReport:
    # per_layer[layer]["MLP-KV" | "MLP-Q" | "KV-Q"]
    per_layer: list[dict[str, float]]
    degenerate: list[dict[str, int]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"per_layer": self.per_layer, "degenerate": self.degenerate}, sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", *PAIR_NAMES, *(f"{p}_degenerate" for p in PAIR_NAMES)])
        for li, row in enumerate(self.per_layer):
            deg = self.degenerate[li] if li < len(self.degenerate) else {}
            w.writerow([li, *(_fmt(row[p]) for p in PAIR_NAMES), *(deg.get(p, 0) for p in PAIR_NAMES)])
        return buf.getvalue()


def _fmt(x: float) -> str:
    return "nan" if x != x else repr(float(x))


def _nanmean(values: list[float]) -> float:
    vals = [v for v in values if v == v]
    return float(np.mean(vals)) if vals else float("nan")


def routed_proportion(
    traces: Sequence[RoutingTrace], labels: Sequence[Sequence[int]], per_layer: bool = False
) -> ProportionReport:
    """Fraction of each category's tokens that were hard-selected.

    Per example and layer: ``#selected with label c / #tokens with label c``.
    These are averaged over examples first (examples without any token of a
    category are skipped for it), then over layers.
    """
    if len(traces) != len(labels):
        raise ContractError(f"{len(traces)} traces but {len(labels)} label sequences")
    if not traces:
        raise ContractError("no traces")
    num_layers = len(traces[0].layers)
    # acc[layer][router][category] -> list over examples
    acc = [{r: {c: [] for c in CATEGORIES} for r in ROUTERS} for _ in range(num_layers)]
    for trace, lab in zip(traces, labels):
        lab = np.asarray(lab)
        if trace.num_tokens != lab.shape[0]:
            raise ContractError(f"trace covers {trace.num_tokens} tokens but labels have {lab.shape[0]}")
        if len(trace.layers) != num_layers:
            raise ContractError("traces disagree on the number of layers")
        counts = [int((lab == ci).sum()) for ci in range(len(CATEGORIES))]
        for li, layer in enumerate(trace.layers):
            for r in ROUTERS:
                chosen = lab[layer[r].selected]
                for ci, c in enumerate(CATEGORIES):
                    if counts[ci]:
                        acc[li][r][c].append(int((chosen == ci).sum()) / counts[ci])
    layer_means = [{r: {c: _nanmean(acc[li][r][c]) for c in CATEGORIES} for r in ROUTERS} for li in range(num_layers)]
    overall = {r: {c: _nanmean([lm[r][c] for lm in layer_means]) for c in CATEGORIES} for r in ROUTERS}
    return ProportionReport(overall, layer_means if per_layer else None)


def pearson(x, y) -> tuple[float, bool]:
    """Pearson r; ``(0.0, True)`` when either vector has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        return 0.0, True
    r = float(xc @ yc) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0)), False


def router_correlation(traces: Sequence[RoutingTrace]) -> CorrelationReport:
    """Per-layer Pearson r between router weight vectors, mean over examples."""
    if not traces:
        raise ContractError("no traces")
    num_layers = len(traces[0].layers)
    sums = [{p: [] for p in PAIR_NAMES} for _ in range(num_layers)]
    degen = [{p: 0 for p in PAIR_NAMES} for _ in range(num_layers)]
    for trace in traces:
        if trace.num_tokens < 2:
            raise ContractError("correlation needs at least 2 tokens")
        for li, layer in enumerate(trace.layers):
            for (a, b), name in zip(PAIRS, PAIR_NAMES):
                r, flag = pearson(layer[a].weights, layer[b].weights)
                sums[li][name].append(r)
                degen[li][name] += int(flag)
    per_layer = [{p: float(np.mean(sums[li][p])) for p in PAIR_NAMES} for li in range(num_layers)]
    return CorrelationReport(per_layer, degen)


# ---------------------------------------------------------------------------
# token heat report
# ---------------------------------------------------------------------------

_CHANNELS = ("cyan", "magenta", "yellow")


def _cmy_background(ws: Sequence[float]) -> str | None:
    c = [0.0, 0.0, 0.0]
    for i, w in enumerate(ws):
        c[i] = float(np.clip(w, 0.0, 1.0))
    if not any(c):
        return None
    r, g, b = (round(255 * (1 - v)) for v in c)
    return f"#{r:02x}{g:02x}{b:02x}"


def render_token_heat(
    trace: RoutingTrace,
    tokens: Sequence,
    layers: Sequence[int],
    router: str = "kv",
    fmt: str = "html",
) -> str:
    """Per-token routing weights for up to three layers.

    Layers map to cyan, magenta and yellow in that order; the background of
    each token mixes those channels.  Every token carries its weights in a
    ``data-w`` attribute (html) or a ``[w1|w2|w3]`` suffix (text), two
    decimals each.
    """
    if router not in ROUTERS:
        raise ContractError(f"unknown router {router!r}")
    if len(layers) > 3:
        raise ContractError("at most three layers fit the cyan/magenta/yellow channels")
    for li in layers:
        if not 0 <= li < len(trace.layers):
            raise ContractError(f"layer {li} out of range for {len(trace.layers)} layers")
    if len(tokens) != trace.num_tokens:
        raise ContractError(f"{len(tokens)} tokens but trace covers {trace.num_tokens}")
    weights = np.stack([trace.layers[li][router].weights for li in layers], axis=1) if layers else np.zeros((len(tokens), 0))
    if fmt == "text":
        parts = []
        for tok, ws in zip(tokens, weights):
            if not np.any(ws):
                parts.append(str(tok))
            else:
                parts.append(f"{tok}[{'|'.join(f'{w:.2f}' for w in ws)}]")
        return " ".join(parts)
    if fmt != "html":
        raise ContractError(f"unknown format {fmt!r}")
    legend = ", ".join(f"{_CHANNELS[i]}=layer {li}" for i, li in enumerate(layers))
    spans = []
    for tok, ws in zip(tokens, weights):
        attr = ",".join(f"{w:.2f}" for w in ws)
        bg = _cmy_background(ws)
        style = f' style="background-color:{bg}"' if bg else ""
        spans.append(f'<span class="tok" data-w="{attr}"{style}>{html.escape(str(tok))}</span>')
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>routing weights</title></head>\n"
        f"<body style=\"font-family:monospace\">\n<p>{router} routing weights: {html.escape(legend)}</p>\n"
        f"<p>{' '.join(spans)}</p>\n</body></html>\n"
    )


_SPAN_RE = re.compile(r'<span class="tok" data-w="([^"]*)"(?: style="[^"]*")?>(.*?)</span>')


def parse_token_heat(report: str) -> list[tuple[str, list[float]]]:
    """Recover ``(token, weights)`` pairs from an html heat report."""
    out = []
    for attr, tok in _SPAN_RE.findall(report):
        ws = [float(x) for x in attr.split(",")] if attr else []
        out.append((html.unescape(tok), ws))
    return out
