"""Command-line entry point: gen-data, train, eval, flops, analyze.

Every command is a pure function of its config file, seed and input files.
Run configs are canonical JSON with four optional sections::

    {"model": {...}, "task": {...}, "train": {...}, "eval": {...}}

Unknown keys anywhere are rejected.  Errors exit nonzero and print a single
JSON object ``{"error": <code>, "message": ..., ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .analysis import render_token_heat, router_correlation, routed_proportion
from .costmodel import CostQuery, flops_layer
from .model import (
    AdamW,
    CheckpointFormatError,
    CoLT5,
    ModelConfig,
    RoutingTrace,
    VocabError,
    batch_loss,
    decode_greedy,
    encode,
    load_checkpoint,
    save_checkpoint,
    train_step,
)
from .rng import named_rng
from .tasks import SynthExample, TaskSpec, generate, read_dataset, write_dataset
from .tensor import ContractError, DimensionError

CHECKPOINT = "checkpoint.c5ck"
METRICS = "metrics.jsonl"
RUN_CONFIG = "config.json"
EVAL_REPORT = "eval.json"
TRACES = "traces.jsonl"
PREDICTIONS = "predictions.jsonl"

# exit codes by error class
EXIT_CODES = {
    "config_parse": 2,
    "config_field": 2,
    "usage": 2,
    "path_missing": 3,
    "contract": 4,
    "dimension": 4,
    "vocab": 4,
    "checkpoint_format": 5,
}


class CliError(Exception):
    def __init__(self, code: str, message: str, **details):
        super().__init__(message)
        self.code = code
        self.details = details

    def payload(self) -> dict:
        return {"error": self.code, "message": str(self), **self.details}


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainSettings:
    steps: int = 300
    batch_size: int = 8
    log_every: int = 1
    # "logical" stamps each record with the number of examples consumed so far,
    # which keeps logs byte-identical across runs; "wall" uses time.time()
    clock: str = "logical"


@dataclass
class EvalSettings:
    count: int = 64
    # decode budget; None means target length + 1
    max_len: int | None = None
    # the eval set is a separate data shard of the same seed
    shard: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def __post_init__(self):
        self.set_seed(self.seed)

    def set_seed(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise CliError("config_field", f"seed must fit in 64 unsigned bits, got {seed}", field="seed")
        self.seed = seed
        self.model.seed = seed
        self.task.seed = seed

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        model.pop("seed")
        task = dataclasses.asdict(self.task)
        task.pop("seed")
        return {
            "seed": self.seed,
            "model": model,
            "task": task,
            "train": dataclasses.asdict(self.train),
            "eval": dataclasses.asdict(self.eval),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _check_keys(data, allowed, where: str):
    if not isinstance(data, dict):
        raise CliError("config_field", f"{where or 'config'} must be a JSON object", field=where or "<root>")
    for key in data:
        if key not in allowed:
            name = f"{where}.{key}" if where else key
            raise CliError("config_field", f"unknown config key {name!r}", field=name)


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _build(cls, data: dict, where: str):
    _check_keys(data, _fields(cls) - {"seed"}, where)
    try:
        return cls(**data)
    except (TypeError, ValueError, ContractError) as exc:
        raise CliError("config_field", f"{where}: {exc}", field=where) from None


def run_config_from_dict(data: dict) -> RunConfig:
    _check_keys(data, {"seed", "model", "task", "train", "eval"}, "")
    model_data = dict(data.get("model", {}))
    _check_keys(model_data, _fields(ModelConfig) - {"seed"}, "model")
    if "layer" in model_data:
        from .condlayers import LayerConfig

        _check_keys(model_data["layer"], _fields(LayerConfig), "model.layer")
    try:
        model = ModelConfig.from_dict(model_data)
    except (TypeError, ValueError, ContractError) as exc:
        raise CliError("config_field", f"model: {exc}", field="model") from None
    return RunConfig(
        seed=data.get("seed", 0),
        model=model,
        task=_build(TaskSpec, dict(data.get("task", {})), "task"),
        train=_build(TrainSettings, dict(data.get("train", {})), "train"),
        eval=_build(EvalSettings, dict(data.get("eval", {})), "eval"),
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise CliError("path_missing", f"config file not found: {path}", path=str(path))
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError("config_parse", f"{path}: {exc.msg}", line=exc.lineno, column=exc.colno) from None
    return run_config_from_dict(data)


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    """Fold command-line flags into ``cfg`` (in place) and return it."""
    if getattr(args, "seed", None) is not None:
        cfg.set_seed(args.seed)
    if getattr(args, "routing", None):
        cfg.model.routing = args.routing
    if getattr(args, "attention", None):
        cfg.model.attention_mode = args.attention
    if getattr(args, "cross_attention", None):
        cfg.model.cross_attention = args.cross_attention
    if getattr(args, "steps", None) is not None:
        cfg.train.steps = args.steps
    if getattr(args, "batch_size", None) is not None:
        cfg.train.batch_size = args.batch_size
    if getattr(args, "count", None) is not None:
        cfg.eval.count = args.count
    return cfg


def num_threads() -> int:
    raw = os.environ.get("COLT_NUM_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise CliError("config_field", f"COLT_NUM_THREADS must be an integer, got {raw!r}", field="COLT_NUM_THREADS") from None
    if value < 1:
        raise CliError("config_field", "COLT_NUM_THREADS must be >= 1", field="COLT_NUM_THREADS")
    return value


# ---------------------------------------------------------------------------
# commands as library functions
# ---------------------------------------------------------------------------


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise CliError("path_missing", f"no such file: {path}", path=str(path))
    return path


def gen_data(cfg: RunConfig, out_dir, count: int, shard: int = 0, name: str = "data.jsonl") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    write_dataset(path, generate(cfg.task, count, shard))
    return path


def _batches(cfg: RunConfig, data: list[SynthExample] | None):
    """Endless stream of training batches.

    Without a dataset file examples come straight from the seeded generator;
    with one, each epoch is a fresh permutation from the "shuffle" stream.
    """
    bs = cfg.train.batch_size
    if data is None:
        stream = generate(cfg.task, None, 0)
        while True:
            yield [next(stream) for _ in range(bs)]
    if not data:
        raise CliError("contract", "training dataset is empty")
    epoch = 0
    buf: list[SynthExample] = []
    while True:
        order = named_rng(cfg.seed, "shuffle", epoch).permutation(len(data))
        buf.extend(data[i] for i in order)
        epoch += 1
        while len(buf) >= bs:
            yield buf[:bs]
            buf = buf[bs:]


def train(cfg: RunConfig, out_dir, data: list[SynthExample] | None = None, progress=None) -> CoLT5:
    """Train from scratch; writes config, append-only metrics and checkpoint."""
    if cfg.train.steps < 0 or cfg.train.batch_size < 1:
        raise CliError("config_field", "train.steps must be >= 0 and train.batch_size >= 1", field="train")
    if cfg.train.clock not in ("logical", "wall"):
        raise CliError("config_field", f"train.clock must be 'logical' or 'wall', got {cfg.train.clock!r}", field="train.clock")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / RUN_CONFIG).write_text(cfg.to_json(), encoding="utf-8")
    model = CoLT5(cfg.model)
    opt = AdamW(model.named_parameters())
    metrics = out / METRICS
    metrics.write_text("", encoding="utf-8")
    batches = _batches(cfg, data)
    with metrics.open("a", encoding="utf-8") as log:
        for step in range(1, cfg.train.steps + 1):
            batch = [(ex.input, ex.target) for ex in next(batches)]
            loss = train_step(model, batch, opt)
            if step % cfg.train.log_every == 0 or step == cfg.train.steps:
                stamp = step * cfg.train.batch_size if cfg.train.clock == "logical" else time.time()
                log.write(json.dumps({"step": step, "loss": loss, "timestamp": stamp}, sort_keys=True) + "\n")
                log.flush()
            if progress is not None:
                progress(step, loss)
    save_checkpoint(model, out / CHECKPOINT, opt)
    return model


def _eval_one(model: CoLT5, ex: SynthExample, max_len: int | None):
    with T.no_grad():
        enc, trace = encode(ex.input, model, training=False)
        budget = max_len if max_len is not None else len(ex.target) + 1
        pred = decode_greedy(model, enc, budget)
    return pred, trace


def evaluate(model: CoLT5, examples: list[SynthExample], max_len: int | None = None, threads: int = 1):
    """Greedy-decode every example; returns (report, predictions, traces)."""
    if not examples:
        raise CliError("contract", "evaluation set is empty")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda ex: _eval_one(model, ex, max_len), examples))
    else:
        results = [_eval_one(model, ex, max_len) for ex in examples]
    preds = [r[0] for r in results]
    traces = [r[1] for r in results]
    exact = sum(p == ex.target for p, ex in zip(preds, examples))
    tok_hits = sum(
        sum(a == b for a, b in zip(p, ex.target)) for p, ex in zip(preds, examples)
    )
    tok_total = sum(len(ex.target) for ex in examples)
    with T.no_grad():
        loss = float(batch_loss(model, [(ex.input, ex.target) for ex in examples], training=False).data)
    report = {
        "examples": len(examples),
        "exact_match": exact / len(examples),
        "token_accuracy": tok_hits / tok_total if tok_total else 0.0,
        "loss": loss,
        "routing": model.config.routing,
        "attention_mode": model.config.attention_mode,
        "cross_attention": model.config.cross_attention,
    }
    return report, preds, traces


def eval_run(
    checkpoint,
    out_dir,
    examples: list[SynthExample],
    routing: str | None = None,
    attention: str | None = None,
    max_len: int | None = None,
) -> dict:
    """Load a checkpoint, evaluate and write report, predictions and traces."""
    model = load_checkpoint(_require(checkpoint))
    if routing:
        model.config.routing = routing
    if attention:
        model.config.attention_mode = attention
    report, preds, traces = evaluate(model, examples, max_len, num_threads())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / EVAL_REPORT).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    with (out / PREDICTIONS).open("w", encoding="utf-8") as fh:
        for p, ex in zip(preds, examples):
            fh.write(json.dumps({"prediction": p, "target": ex.target}) + "\n")
    write_traces(out / TRACES, traces)
    return report


def write_traces(path, traces: list[RoutingTrace]):
    with open(path, "w", encoding="utf-8") as fh:
        for tr in traces:
            fh.write(json.dumps(tr.to_json(), sort_keys=True, separators=(",", ":")) + "\n")


def read_traces(path) -> list[RoutingTrace]:
    lines = _require(path).read_text(encoding="utf-8").splitlines()
    return [RoutingTrace.from_json(json.loads(line)) for line in lines if line.strip()]


def analyze(traces_path, data_path, out_dir, layers=None, router: str = "kv", example: int = 0) -> dict:
    """Proportion and correlation reports plus one token heat page."""
    traces = read_traces(traces_path)
    examples = read_dataset(_require(data_path))
    if len(examples) != len(traces):
        raise CliError("contract", f"{len(traces)} traces but {len(examples)} examples")
    props = routed_proportion(traces, [ex.labels for ex in examples], per_layer=True)
    corr = router_correlation(traces)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "proportions.json").write_text(props.to_json() + "\n", encoding="utf-8")
    (out / "proportions.csv").write_text(props.to_csv(), encoding="utf-8")
    (out / "correlations.json").write_text(corr.to_json() + "\n", encoding="utf-8")
    (out / "correlations.csv").write_text(corr.to_csv(), encoding="utf-8")
    if not 0 <= example < len(traces):
        raise CliError("contract", f"example {example} out of range for {len(traces)} traces")
    if layers is None:
        layers = list(range(min(3, len(traces[example].layers))))
    heat = render_token_heat(traces[example], examples[example].input, layers, router)
    (out / "heat.html").write_text(heat, encoding="utf-8")
    return {"proportions": props, "correlations": corr}


def flops(query: CostQuery, fmt: str = "json") -> str:
    report = flops_layer(query)
    return report.to_json() + "\n" if fmt == "json" else report.to_table()


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def _layers(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="colt5", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--seed", type=_u64)
        p.add_argument("--out", required=out_required, help="output directory")

    def overrides(p):
        p.add_argument("--routing", choices=("learned", "static"))
        p.add_argument("--attention", choices=("default", "v=q", "v=all"))
        p.add_argument("--cross-attention", choices=("mqa", "mha"))

    p = sub.add_parser("gen-data", help="write a seeded dataset as JSON lines")
    common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--shard", type=int, default=0)
    p.add_argument("--name", default="data.jsonl")

    p = sub.add_parser("train", help="train a model and write checkpoint + metrics")
    common(p)
    overrides(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--data", help="train from a dataset file instead of the generator")

    p = sub.add_parser("eval", help="greedy-decode a dataset and record routing traces")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset file (default: generate the eval shard)")
    p.add_argument("--count", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--routing", choices=("learned", "static"))
    p.add_argument("--attention", choices=("default", "v=q", "v=all"))

    p = sub.add_parser("flops", help="analytic per-layer FLOPs and parameters")
    p.add_argument("--model-kind", choices=("T5", "LongT5", "CoLT5"), default="CoLT5")
    p.add_argument("--n", type=int, default=16384)
    p.add_argument("--d", type=int, default=768)
    p.add_argument("--w", type=int, default=255)
    p.add_argument("--exact-windows", action="store_true")
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.add_argument("--out", help="write the report here instead of stdout")

    p = sub.add_parser("analyze", help="routing proportions, correlations and heat report")
    p.add_argument("--traces", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layers", type=_layers)
    p.add_argument("--router", choices=("ffn", "query", "kv"), default="kv")
    p.add_argument("--example", type=int, default=0)
    return parser


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    return apply_overrides(cfg, args)


def _dispatch(args) -> int:
    if args.command == "gen-data":
        cfg = _config(args)
        path = gen_data(cfg, args.out, args.count, args.shard, args.name)
        print(json.dumps({"written": str(path), "count": args.count}))
    elif args.command == "train":
        cfg = _config(args)
        data = read_dataset(_require(args.data)) if args.data else None
        train(cfg, args.out, data)
        print(json.dumps({"checkpoint": str(Path(args.out) / CHECKPOINT), "steps": cfg.train.steps}))
    elif args.command == "eval":
        cfg = _config(args)
        if args.data:
            examples = read_dataset(_require(args.data))
        else:
            examples = list(generate(cfg.task, cfg.eval.count, cfg.eval.shard))
            gen_data(cfg, args.out, cfg.eval.count, cfg.eval.shard, "eval_data.jsonl")
        max_len = args.max_len if args.max_len is not None else cfg.eval.max_len
        report = eval_run(args.checkpoint, args.out, examples, args.routing, args.attention, max_len)
        print(json.dumps(report, sort_keys=True))
    elif args.command == "flops":
        query = CostQuery(args.model_kind, args.n, args.d, args.w, exact_windows=args.exact_windows)
        text = flops(query, args.format)
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
    elif args.command == "analyze":
        analyze(args.traces, args.data, args.out, args.layers, args.router, args.example)
        print(json.dumps({"written": str(args.out)}))
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return _dispatch(args)
    except CliError as exc:
        err = exc
    except CheckpointFormatError as exc:
        err = CliError("checkpoint_format", str(exc))
    except VocabError as exc:
        err = CliError("vocab", str(exc))
    except DimensionError as exc:
        err = CliError("dimension", str(exc))
    except ContractError as exc:
        err = CliError("contract", str(exc))
    except FileNotFoundError as exc:
        err = CliError("path_missing", str(exc), path=str(exc.filename))
    sys.stderr.write(json.dumps(err.payload(), sort_keys=True) + "\n")
    return EXIT_CODES[err.code]


if __name__ == "__main__":
    sys.exit(main())
