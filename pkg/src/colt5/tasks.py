"""Seeded synthetic long-input tasks with question/answer/other token labels.

kv_retrieval
    ``[Q, key*] + filler with pairs [P, key*, value*] scattered through it``;
    the target is the value of the queried key.
copy_span
    filler with one span ``[S, span*, S]`` somewhere in it; the target is
    the span.

Token ids 0-4 are reserved (pad, eos and three markers); content tokens
come from ``[5, vocab_size)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .rng import named_rng
from .tensor import ContractError

PAD, EOS, QUERY, PAIR, SPAN = 0, 1, 2, 3, 4
FIRST_CONTENT = 5

QUESTION, ANSWER, OTHER = 0, 1, 2
CATEGORIES = ("question", "answer", "other")


@dataclass
class TaskSpec:
    task: str = "kv_retrieval"
    n: int = 512
    vocab_size: int = 512
    num_pairs: int = 8
    span_len: int = 2
    key_width: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("kv_retrieval", "copy_span"):
            raise ContractError(f"unknown task {self.task!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "TaskSpec":
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ContractError(f"unknown task spec keys: {unknown}")
        return cls(**data)


@dataclass
class SynthExample:
    input: list[int]
    target: list[int]
    labels: list[int]

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "SynthExample":
        d = json.loads(line)
        return cls(list(d["input"]), list(d["target"]), list(d["labels"]))


def _distinct_tokens(rng, count: int, vocab_size: int, exclude=()) -> np.ndarray:
    pool = np.setdiff1d(np.arange(FIRST_CONTENT, vocab_size), np.asarray(list(exclude), dtype=np.int64))
    if count > pool.size:
        raise ContractError(f"vocab of {vocab_size} cannot supply {count} distinct tokens")
    return rng.choice(pool, size=count, replace=False)


def _filler(rng, count: int, vocab_size: int, exclude) -> np.ndarray:
    pool = np.setdiff1d(np.arange(FIRST_CONTENT, vocab_size), np.asarray(list(exclude), dtype=np.int64))
    if pool.size == 0 and count:
        raise ContractError("no tokens left for filler")
    return rng.choice(pool, size=count, replace=True)


def _place_blocks(rng, body_len: int, block_lens: list[int]) -> list[int]:
    """Random non-overlapping start offsets for blocks in a body, in order."""
    free = body_len - sum(block_lens)
    # distribute free slots into len+1 gaps uniformly
    cuts = np.sort(rng.integers(0, free + 1, size=len(block_lens)))
    starts, pos, prev = [], 0, 0
    for cut, length in zip(cuts, block_lens):
        pos += cut - prev
        prev = cut
        starts.append(pos)
        pos += length
    return starts


def kv_capacity(spec: TaskSpec) -> int:
    return 1 + spec.key_width + spec.num_pairs * (1 + spec.key_width + spec.span_len)


def make_kv_example(spec: TaskSpec, rng: np.random.Generator) -> SynthExample:
    kw, sl, P = spec.key_width, spec.span_len, spec.num_pairs
    if P < 1 or kv_capacity(spec) > spec.n:
        raise ContractError(
            f"kv_retrieval needs n >= {kv_capacity(spec)} for {P} pairs, got n={spec.n}"
        )
    tokens = _distinct_tokens(rng, P * (kw + sl), spec.vocab_size)
    keys = tokens[: P * kw].reshape(P, kw)
    values = tokens[P * kw :].reshape(P, sl)
    which = int(rng.integers(P))
    head = [QUERY] + keys[which].tolist()
    body_len = spec.n - len(head)
    body = _filler(rng, body_len, spec.vocab_size, tokens).tolist()
    labels = [QUESTION] * len(head) + [OTHER] * body_len
    order = rng.permutation(P)
    blocks = [[PAIR] + keys[j].tolist() + values[j].tolist() for j in order]
    starts = _place_blocks(rng, body_len, [len(b) for b in blocks])
    for j, start, block in zip(order, starts, blocks):
        body[start : start + len(block)] = block
        if j == which:
            a0 = len(head) + start + 1 + kw
            labels[a0 : a0 + sl] = [ANSWER] * sl
    return SynthExample(head + body, values[which].tolist(), labels)


def make_copy_example(spec: TaskSpec, rng: np.random.Generator) -> SynthExample:
    sl = spec.span_len
    if sl < 1 or spec.n < sl + 2:
        raise ContractError(f"copy_span needs n >= span_len + 2, got n={spec.n}, span_len={sl}")
    span = rng.integers(FIRST_CONTENT, spec.vocab_size, size=sl)
    body = _filler(rng, spec.n - sl - 2, spec.vocab_size, ()).tolist()
    start = int(rng.integers(0, len(body) + 1))
    seq = body[:start] + [SPAN] + span.tolist() + [SPAN] + body[start:]
    labels = [OTHER] * spec.n
    labels[start] = labels[start + sl + 1] = QUESTION
    labels[start + 1 : start + 1 + sl] = [ANSWER] * sl
    return SynthExample(seq, span.tolist(), labels)


def gen_kv_retrieval(spec: TaskSpec, count: int | None = None, shard: int = 0) -> Iterator[SynthExample]:
    if kv_capacity(spec) > spec.n:
        raise ContractError(f"kv_retrieval needs n >= {kv_capacity(spec)}, got n={spec.n}")
    rng = named_rng(spec.seed, "data", shard)
    i = 0
    while count is None or i < count:
        yield make_kv_example(spec, rng)
        i += 1


def gen_copy_span(spec: TaskSpec, count: int | None = None, shard: int = 0) -> Iterator[SynthExample]:
    if spec.n < spec.span_len + 2:
        raise ContractError(f"copy_span needs n >= span_len + 2, got n={spec.n}")
    rng = named_rng(spec.seed, "data", shard)
    i = 0
    while count is None or i < count:
        yield make_copy_example(spec, rng)
        i += 1


def generate(spec: TaskSpec, count: int | None = None, shard: int = 0) -> Iterator[SynthExample]:
    if spec.task == "kv_retrieval":
        return gen_kv_retrieval(spec, count, shard)
    return gen_copy_span(spec, count, shard)


def lookup_kv(example: SynthExample, key_width: int = 1, span_len: int = 2) -> list[int]:
    """Brute-force answer from the input alone: read the queried key, scan
    for the pair marker followed by that key, return what comes after."""
    seq = example.input
    if seq[0] != QUERY:
        raise ContractError("not a kv_retrieval example")
    key = seq[1 : 1 + key_width]
    for i, tok in enumerate(seq):
        if tok == PAIR and seq[i + 1 : i + 1 + key_width] == key:
            start = i + 1 + key_width
            return seq[start : start + span_len]
    raise ContractError("queried key not found")


def write_dataset(path, examples) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")
            count += 1
    return count


def read_dataset(path) -> list[SynthExample]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [SynthExample.from_json(line) for line in lines if line.strip()]
