"""Encoder-decoder assembly: conditional encoder, dense decoder with
multi-query cross-attention, training, greedy decoding and checkpoints."""

from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .condlayers import (
    AttnProj,
    ConditionalAttnParams,
    ConditionalFFNParams,
    CrossAttnParams,
    FFNBranch,
    KVCache,
    LayerConfig,
    causal_self_attention,
    conditional_attention,
    conditional_ffn,
    cross_kv,
    ffn_branch,
    init_attn_proj,
    init_conditional_attn,
    init_conditional_ffn,
    init_cross_attn,
    init_ffn_branch,
    mqa_cross_attention,
    named_parameters,
)
from .rng import named_rng
from .routing import (
    AllTokensRouting,
    LearnedRouting,
    RoutingDecision,
    Router,
    SoftTopKConfig,
    StaticRouting,
)
from .tensor import ContractError, DimensionError, Tensor

PAD_ID = 0
EOS_ID = 1
ROUTERS = ("ffn", "query", "kv")


class VocabError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _frac_to_json(x):
    return str(Fraction(x)) if isinstance(x, Fraction) else x


@dataclass
class ModelConfig:
    num_layers: int = 2
    vocab_size: int = 512
    layer: LayerConfig = field(default_factory=LayerConfig)
    m_fraction: Fraction = Fraction(1, 16)
    m: int | None = None
    decoder_ffn_hidden: int | None = None
    cross_attention: str = "mqa"
    routing: str = "learned"
    attention_mode: str = "default"
    epsilon: float = 1.0
    iterations: int = 50
    train_expansion: Fraction = Fraction(9, 8)
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.layer, dict):
            self.layer = LayerConfig(**_layer_fields(self.layer))
        self.m_fraction = Fraction(self.m_fraction)
        self.train_expansion = Fraction(self.train_expansion)
        if self.cross_attention not in ("mqa", "mha"):
            raise ContractError(f"cross_attention must be 'mqa' or 'mha', got {self.cross_attention!r}")
        if self.routing not in ("learned", "static"):
            raise ContractError(f"routing must be 'learned' or 'static', got {self.routing!r}")
        if self.attention_mode not in ("default", "v=q", "v=all"):
            raise ContractError(f"unknown attention_mode {self.attention_mode!r}")
        if self.dtype not in ("float64", "float32"):
            raise ContractError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def d(self) -> int:
        return self.layer.d

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def decoder_hidden(self) -> int:
        return self.decoder_ffn_hidden or self.layer.ffn_base_hidden

    @property
    def softtopk(self) -> SoftTopKConfig:
        return SoftTopKConfig(self.epsilon, self.iterations, self.train_expansion)

    def routed_m(self, n: int) -> int:
        if self.m is not None:
            return max(1, min(n, self.m))
        return max(1, min(n, round(n * self.m_fraction)))

    def routed_counts(self, n: int) -> tuple[int, int, int]:
        m = self.routed_m(n)
        q, v = self.layer.routed_counts(m, n)
        if self.attention_mode == "v=q":
            v = q
        elif self.attention_mode == "v=all":
            v = n
        return m, q, v

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if f.name == "layer":
                val = {k: _frac_to_json(v) for k, v in dataclasses.asdict(val).items()}
            out[f.name] = _frac_to_json(val)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ContractError(f"unknown model config keys: {unknown}")
        data = dict(data)
        for key in ("m_fraction", "train_expansion"):
            if key in data:
                data[key] = Fraction(data[key])
        return cls(**data)


def _layer_fields(data: dict) -> dict:
    known = {f.name for f in dataclasses.fields(LayerConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ContractError(f"unknown layer config keys: {unknown}")
    return dict(data)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class EncoderLayer:
    attn_norm: Tensor
    attn: ConditionalAttnParams
    router_query: Router
    router_kv: Router
    ffn_norm: Tensor
    ffn: ConditionalFFNParams
    router_ffn: Router


@dataclass
class DecoderLayer:
    self_norm: Tensor
    self_attn: AttnProj
    self_bias: Tensor
    cross_norm: Tensor
    cross: CrossAttnParams
    ffn_norm: Tensor
    ffn: FFNBranch


@dataclass
class Params:
    embedding: Tensor
    encoder: list[EncoderLayer]
    encoder_norm: Tensor
    decoder: list[DecoderLayer]
    decoder_norm: Tensor
    head: Tensor


def _ones(d, dtype):
    return Tensor(np.ones(d, dtype=dtype), requires_grad=True)


def _router(rng, d, dtype):
    return Router(Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=d).astype(dtype), requires_grad=True))


def init_params(config: ModelConfig) -> Params:
    rng = named_rng(config.seed, "init")
    dt = config.np_dtype
    lc = config.layer
    d = lc.d
    embedding = Tensor(rng.normal(0.0, 1.0, size=(config.vocab_size, d)).astype(dt), requires_grad=True)
    encoder = []
    for _ in range(config.num_layers):
        encoder.append(
            EncoderLayer(
                attn_norm=_ones(d, dt),
                attn=init_conditional_attn(rng, lc, dt),
                router_query=_router(rng, d, dt),
                router_kv=_router(rng, d, dt),
                ffn_norm=_ones(d, dt),
                ffn=init_conditional_ffn(rng, lc, dt),
                router_ffn=_router(rng, d, dt),
            )
        )
    decoder = []
    for _ in range(config.num_layers):
        decoder.append(
            DecoderLayer(
                self_norm=_ones(d, dt),
                self_attn=init_attn_proj(rng, d, lc.heads_total, lc.head_dim, dt),
                self_bias=Tensor(
                    rng.normal(0.0, 0.1, size=(lc.rel_buckets, lc.heads_total)).astype(dt),
                    requires_grad=True,
                ),
                cross_norm=_ones(d, dt),
                cross=init_cross_attn(
                    rng, d, lc.heads_total, lc.head_dim, config.cross_attention == "mqa", dt
                ),
                ffn_norm=_ones(d, dt),
                ffn=init_ffn_branch(rng, d, config.decoder_hidden, lc.gated_ffn, dt),
            )
        )
    head = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, config.vocab_size)).astype(dt), requires_grad=True)
    return Params(embedding, encoder, _ones(d, dt), decoder, _ones(d, dt), head)


# ---------------------------------------------------------------------------
# routing trace
# ---------------------------------------------------------------------------


@dataclass
class RouterRecord:
    weights: np.ndarray  # normalized soft weights over all n tokens
    selected: np.ndarray

    def to_json(self) -> dict:
        return {"weights": [float(w) for w in self.weights], "selected": [int(i) for i in self.selected]}


@dataclass
class RoutingTrace:
    """One example's routing: ``layers[l][router]`` for router in ffn/query/kv."""

    layers: list[dict[str, RouterRecord]] = field(default_factory=list)

    @property
    def num_tokens(self) -> int:
        return len(self.layers[0]["ffn"].weights) if self.layers else 0

    def to_json(self) -> dict:
        return {"layers": [{r: rec[r].to_json() for r in ROUTERS} for rec in self.layers]}

    @classmethod
    def from_json(cls, data: dict) -> "RoutingTrace":
        layers = []
        for rec in data["layers"]:
            layers.append(
                {
                    r: RouterRecord(
                        np.asarray(rec[r]["weights"], dtype=np.float64),
                        np.asarray(rec[r]["selected"], dtype=np.int64),
                    )
                    for r in ROUTERS
                }
            )
        return cls(layers)


def _record(decision: RoutingDecision) -> RouterRecord:
    soft = decision.soft if decision.soft is not None else decision.weights.data
    return RouterRecord(np.array(soft, dtype=np.float64), np.array(decision.selected, dtype=np.int64))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class CoLT5:
    def __init__(self, config: ModelConfig, params: Params | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(named_parameters(self.params))

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def default_strategy(self):
        if self.config.routing == "static":
            return StaticRouting()
        return LearnedRouting(self.config.softtopk)


def encode(
    tokens: Sequence[int],
    model: CoLT5,
    training: bool = False,
    strategy=None,
    key=None,
) -> tuple[Tensor, RoutingTrace]:
    """Embed and run the conditional encoder; returns final states and the
    routing trace (three routers per layer)."""
    cfg = model.config
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ContractError("encode expects a non-empty 1-D token sequence")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise VocabError(f"token id out of range for vocab_size={cfg.vocab_size}")
    strategy = strategy or model.default_strategy()
    n = ids.size
    valid = ids != PAD_ID
    if valid.all():
        valid = None
    elif not valid.any():
        raise ContractError("encode received only padding")
    m, q, v = cfg.routed_counts(n)
    kv_strategy = AllTokensRouting() if cfg.attention_mode == "v=all" else strategy
    p = model.params
    x = T.gather_rows(p.embedding, ids)
    trace = RoutingTrace()
    for li, layer in enumerate(p.encoder):
        h = T.rms_norm(x, layer.attn_norm)
        qd = strategy(h, layer.router_query, q, training, (key, li, "query"), valid)
        kvd = kv_strategy(h, layer.router_kv, v, training, (key, li, "kv"), valid)
        x = conditional_attention(x, layer.attn, qd, kvd, cfg.layer, h=h)
        h = T.rms_norm(x, layer.ffn_norm)
        fd = strategy(h, layer.router_ffn, m, training, (key, li, "ffn"), valid)
        x = conditional_ffn(x, layer.ffn, fd, h=h)
        trace.layers.append({"ffn": _record(fd), "query": _record(qd), "kv": _record(kvd)})
    return T.rms_norm(x, p.encoder_norm), trace


@dataclass
class DecoderState:
    cross: list[KVCache]
    self_caches: list[KVCache | None]


def init_decoder_state(model: CoLT5, encoder_states: Tensor) -> DecoderState:
    caches = [cross_kv(encoder_states, layer.cross) for layer in model.params.decoder]
    return DecoderState(caches, [None] * len(caches))


def decoder_logits(model: CoLT5, ids: Sequence[int], state: DecoderState) -> Tensor:
    """Logits for decoder input ``ids`` positioned after whatever ``state``
    already holds.  Updates ``state.self_caches`` in place."""
    p = model.params
    lc = model.config.layer
    x = T.gather_rows(p.embedding, np.asarray(ids, dtype=np.int64))
    for li, layer in enumerate(p.decoder):
        h = T.rms_norm(x, layer.self_norm)
        out, state.self_caches[li] = causal_self_attention(
            h, layer.self_attn, layer.self_bias, lc, state.self_caches[li]
        )
        x = T.add(x, out)
        h = T.rms_norm(x, layer.cross_norm)
        x = T.add(x, mqa_cross_attention(h, None, layer.cross, state.cross[li]))
        h = T.rms_norm(x, layer.ffn_norm)
        x = T.add(x, ffn_branch(h, layer.ffn))
    return T.matmul(T.rms_norm(x, p.decoder_norm), p.head)


def teacher_forced_logits(model: CoLT5, encoder_states: Tensor, targets: Sequence[int]) -> Tensor:
    """Logits ``[len(targets), V]`` with the decoder fed ``[PAD] + targets[:-1]``."""
    dec_in = [PAD_ID] + list(targets[:-1])
    return decoder_logits(model, dec_in, init_decoder_state(model, encoder_states))


def decode_greedy(model: CoLT5, encoder_states: Tensor, max_len: int, return_logits=False):
    """Incremental greedy decoding with cached keys/values; stops at EOS."""
    out: list[int] = []
    logits_rows = []
    if max_len <= 0:
        return (out, logits_rows) if return_logits else out
    with T.no_grad():
        state = init_decoder_state(model, encoder_states)
        prev = PAD_ID
        for _ in range(max_len):
            row = decoder_logits(model, [prev], state).data[0]
            logits_rows.append(row)
            tok = int(np.argmax(row))
            if tok == EOS_ID:
                break
            out.append(tok)
            prev = tok
    return (out, logits_rows) if return_logits else out


def example_loss(model, inputs, targets, training=True, strategy=None, key=None) -> tuple[Tensor, int]:
    """Summed cross-entropy over ``targets + [EOS]`` and the token count."""
    enc, _ = encode(inputs, model, training, strategy, key)
    tgt = list(targets) + [EOS_ID]
    logits = teacher_forced_logits(model, enc, tgt)
    return T.cross_entropy(logits, tgt, reduction="sum"), len(tgt)


def batch_loss(model, batch, training=True, strategy=None) -> Tensor:
    if not batch:
        raise ContractError("empty batch")
    total, count = None, 0
    for i, (inputs, targets) in enumerate(batch):
        loss, c = example_loss(model, inputs, targets, training, strategy, key=i)
        total = loss if total is None else T.add(total, loss)
        count += c
    return T.mul(total, 1.0 / count)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay and global-norm gradient clipping."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, clip_norm=1.0):
        self.named = list(named_params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None

    def step(self):
        grads = {name: p.grad for name, p in self.named if p.grad is not None}
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        clip = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            clip = self.clip_norm / (norm + 1e-12)
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.named:
            g = grads.get(name)
            if g is None:
                continue
            g = g * clip
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            new = p.data - self.lr * (update + self.weight_decay * p.data)
            p.data = new.astype(p.data.dtype)
        return norm


def train_step(model: CoLT5, batch, optimizer: AdamW, strategy=None) -> float:
    """One update on ``batch`` of ``(input_ids, target_ids)``; training-mode
    routing (expanded selection)."""
    optimizer.zero_grad()
    loss = batch_loss(model, batch, training=True, strategy=strategy)
    T.backward(loss)
    optimizer.step()
    return float(loss.data)


# ---------------------------------------------------------------------------
# analytic parameter count
# ---------------------------------------------------------------------------


def count_params(config: ModelConfig, kind: str = "colt5") -> dict[str, int]:
    """Parameter counts by component.

    ``kind='colt5'`` mirrors exactly what ``init_params`` allocates.
    ``kind='longt5'``/``'t5'`` replace each encoder layer with a dense T5.1.1
    layer (all heads, one FFN of ``ffn_base_hidden``) and use multi-head
    cross-attention.
    """
    lc = config.layer
    d, hd, H = lc.d, lc.head_dim, lc.heads_total
    V = config.vocab_size
    L = config.num_layers
    mats = 3 if lc.gated_ffn else 2
    out = {"embedding": V * d, "head": d * V, "final_norms": 2 * d}
    if kind == "colt5":
        enc = (
            4 * d * lc.heads_light * hd
            + 4 * d * lc.heads_heavy * hd
            + lc.rel_buckets * lc.heads_light
            + mats * d * lc.light_hidden
            + mats * d * lc.heavy_hidden
            + 3 * d  # routers
            + 2 * d  # norms
        )
        kv_heads = 1 if config.cross_attention == "mqa" else H
    elif kind in ("longt5", "t5"):
        enc = 4 * d * H * hd + lc.rel_buckets * H + mats * d * lc.ffn_base_hidden + 2 * d
        kv_heads = H
    else:
        raise ContractError(f"unknown model kind {kind!r}")
    dec = (
        4 * d * H * hd
        + lc.rel_buckets * H
        + d * H * hd  # cross q
        + 2 * d * kv_heads * hd  # cross k, v
        + H * hd * d  # cross o
        + mats * d * config.decoder_hidden
        + 3 * d
    )
    out["encoder"] = L * enc
    out["decoder"] = L * dec
    out["total"] = sum(out.values())
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"C5CK"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def _write_record(buf: io.BytesIO, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BI", _DTYPE_TAGS[arr.dtype], arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())


def checkpoint_bytes(model: CoLT5, optimizer: AdamW | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg = model.config.to_json().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for name, p in model.named_parameters():
        _write_record(buf, name, p.data)
    if optimizer is not None:
        _write_record(buf, "opt.step", np.asarray(optimizer.step_count, dtype="<f8"))
        for name, _ in optimizer.named:
            _write_record(buf, f"opt.m.{name}", optimizer.m[name])
            _write_record(buf, f"opt.v.{name}", optimizer.v[name])
    return buf.getvalue()


def save_checkpoint(model: CoLT5, path, optimizer: AdamW | None = None):
    Path(path).write_bytes(checkpoint_bytes(model, optimizer))


def _read_exact(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointFormatError("truncated checkpoint")
    return data


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    buf = io.BytesIO(Path(path).read_bytes())
    if buf.read(4) != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    (clen,) = struct.unpack("<I", _read_exact(buf, 4))
    try:
        config = ModelConfig.from_dict(json.loads(_read_exact(buf, clen).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointFormatError(f"bad config block: {exc}") from exc
    records = {}
    while True:
        head = buf.read(4)
        if not head:
            break
        if len(head) != 4:
            raise CheckpointFormatError("truncated checkpoint")
        (nlen,) = struct.unpack("<I", head)
        name = _read_exact(buf, nlen).decode("utf-8")
        tag, rank = struct.unpack("<BI", _read_exact(buf, 5))
        if tag not in _TAG_DTYPES:
            raise CheckpointFormatError(f"unknown dtype tag {tag} for {name}")
        dims = struct.unpack(f"<{rank}Q", _read_exact(buf, 8 * rank))
        dt = _TAG_DTYPES[tag]
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(_read_exact(buf, count * dt.itemsize), dtype=dt).reshape(dims)
        records[name] = arr.astype(dt.newbyteorder("="))
    return config, records


def load_checkpoint(path, model: CoLT5 | None = None, optimizer: AdamW | None = None) -> CoLT5:
    """Load parameters from ``path``.

    With ``model`` given, its parameters are replaced in place and any shape
    difference raises :class:`DimensionError`.
    """
    config, records = read_checkpoint(path)
    if model is None:
        model = CoLT5(config)
    for name, p in model.named_parameters():
        if name not in records:
            raise CheckpointFormatError(f"checkpoint is missing parameter {name}")
        arr = records[name]
        if arr.shape != p.shape:
            raise DimensionError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data = arr.astype(p.dtype)
    if optimizer is not None and "opt.step" in records:
        optimizer.step_count = int(records["opt.step"].reshape(()))
        for name, _ in optimizer.named:
            optimizer.m[name] = records[f"opt.m.{name}"].copy()
            optimizer.v[name] = records[f"opt.v.{name}"].copy()
    return model
