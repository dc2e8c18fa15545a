"""Command-line interface: train, eval, bench, transfer, gen-data, gradcheck.

Options resolve as: command-line flag > config file > built-in default.
Config files are UTF-8 ``key = value`` lines with ``#`` comments; keys use
the long option names with dashes or underscores.  Unknown keys are usage
errors.  Exit codes: 0 success, 1 usage error, 2 runtime failure.

Report-producing commands write CSV plus companion PNG figures next to it;
``--no-plots`` suppresses the figures and ``--no-timing`` zeroes wall-time
columns so two identically seeded runs emit byte-identical CSV.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tasks
from .attention import AttentionKind
from .bench import attention_std_diagnostic, bench_scaling, emit_csv
from .gradcheck import run_model_gradcheck
from .model import ModelConfig, Variant, count_trainable, init_parameters
from .optim import OptimizerState, ScheduleConfig, evaluate, train
from .rng import Rng
from .transfer import (Strictness, convert_attention_kind, freeze,
                       load_checkpoint, resolve_freeze_patterns, save_checkpoint)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2
        raise UsageError(message)


# every option a subcommand accepts: name -> (type, default, help)
_MODEL_OPTS = {
    "variant": (str, "simple_res", "model variant: vanilla|simple|simple_res|simple_resl"),
    "blocks": (int, 2, "number of encoder blocks"),
    "heads": (int, 4, "attention heads"),
    "d_embed": (int, 64, "embedding width"),
    "d_hidden": (int, None, "q/k/v width (default: d_embed)"),
    "d_mlp": (int, 128, "MLP interior width"),
    "dropout": (float, 0.1, "dropout probability"),
    "activation": (str, "gelu", "gelu|relu"),
}

_TASK_OPTS = {
    "task": (str, "majority", "majority|listops|matching"),
    "length": (int, 64, "token length for majority/matching sequences"),
    "task_vocab": (int, 8, "content vocabulary size for majority/matching"),
    "task_classes": (int, 4, "class count for the majority task"),
    "listops_depth": (int, 3, "max ListOps nesting depth"),
    "listops_args": (int, 4, "max ListOps operator arity"),
    "listops_length": (int, 128, "max ListOps token length"),
    "corruption_rate": (float, 0.25, "matching-task positive-pair noise"),
    "train_n": (int, 2048, "generated training examples"),
    "test_n": (int, 256, "generated test examples"),
    "train_file": (str, None, "load training set from file instead of generating"),
    "test_file": (str, None, "load test set from file instead of generating"),
}

_TRAIN_OPTS = {
    **_MODEL_OPTS, **_TASK_OPTS,
    "steps": (int, 500, "optimizer steps"),
    "batch_size": (int, 8, "micro-batch size"),
    "accum": (int, 1, "gradient accumulation factor"),
    "base_lr": (float, 0.05, "schedule base learning rate"),
    "warmup": (int, 400, "warmup steps"),
    "weight_decay": (float, 0.1, "AdamW decoupled weight decay"),
    "clip_norm": (float, None, "optional global gradient-norm clip"),
    "eval_every": (int, 100, "evaluate on the test set every N steps"),
    "out": (str, "metrics.csv", "metrics CSV path"),
    "save": (str, None, "write a checkpoint here when done"),
    "init_from": (str, None, "initialize parameters from a checkpoint"),
    "init_strictness": (str, "strict", "checkpoint import mode: strict|subset"),
    "attention_kind": (str, None, "run under this kind instead of the variant default"),
    "freeze": (str, None, "comma-separated freeze patterns or preset 'qkv'"),
    "std_out": (str, None, "write the per-block attention-std diagnostic CSV here"),
}

_EVAL_OPTS = {**_MODEL_OPTS, **_TASK_OPTS,
              "checkpoint": (str, None, "model checkpoint to evaluate (required)"),
              "attention_kind": (str, None, "run under this kind instead of the variant default"),
              "seed": (int, 0, "seed for generated evaluation data")}

_BENCH_OPTS = {
    "kinds": (str, "simple,softmax", "comma-separated attention kinds"),
    "lengths": (str, "256,512,1024", "comma-separated ascending sequence lengths"),
    "d": (int, 64, "head width"),
    "heads": (int, 1, "attention heads"),
    "repeats": (int, 3, "timed repeats per point (median reported)"),
    "out": (str, "bench.csv", "benchmark CSV path"),
}

_TRANSFER_OPTS = {
    "in": (str, None, "source checkpoint (required)"),
    "model_config": (str, None, "config file describing the model shape (required)"),
    "to_kind": (str, None, "target attention kind: simple|softmax (required)"),
    "freeze": (str, None, "freeze patterns to validate against the model"),
    "out": (str, None, "destination checkpoint (required)"),
}

_GENDATA_OPTS = {**_TASK_OPTS, "n": (int, 1024, "examples to generate"),
                 "out": (str, None, "output dataset file (required)"),
                 "seed": (int, 0, "generation seed")}

_GRADCHECK_OPTS = {
    "variant": (str, "simple", "model variant to check"),
    "blocks": (int, 2, "blocks"),
    "heads": (int, 2, "heads"),
    "d_embed": (int, 8, "embedding width"),
    "d_mlp": (int, 16, "MLP width"),
    "length": (int, 6, "probe sequence length"),
    "classes": (int, 3, "class count"),
    "tolerance": (float, 1e-4, "max allowed relative error"),
    "seed": (int, 0, "parameter seed"),
}

_SUBCOMMAND_OPTS = {
    "train": _TRAIN_OPTS, "eval": _EVAL_OPTS, "bench": _BENCH_OPTS,
    "transfer": _TRANSFER_OPTS, "gen-data": _GENDATA_OPTS, "gradcheck": _GRADCHECK_OPTS,
}
_SEED_REQUIRED = {"train", "bench"}
_FLAG_OPTS = ("no_plots", "no_timing")


def _build_parser() -> _Parser:
    parser = _Parser(prog="linattn", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command")
    for name, opts in _SUBCOMMAND_OPTS.items():
        sp = subs.add_parser(name, description=name)
        sp.add_argument("--config", type=str, default=None, help="config file (key = value lines)")
        for flag in _FLAG_OPTS:
            sp.add_argument(f"--{flag.replace('_', '-')}", action="store_const", const=True,
                            default=None, help=f"set {flag}")
        if name in _SEED_REQUIRED:
            sp.add_argument("--seed", type=int, default=None,
                            help="RNG seed (required for reproducibility)")
        for opt, (typ, _default, help_text) in opts.items():
            if opt == "seed" and name in _SEED_REQUIRED:
                continue
            sp.add_argument(f"--{opt.replace('_', '-')}", type=typ, default=None,
                            dest=opt, help=help_text)
    return parser


def parse_config_file(path: str) -> Dict[str, str]:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    values: Dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise UsageError(f"{path}:{line_no}: expected 'key = value', got {text!r}")
            key, value = text.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _coerce(raw: str, typ):
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw


def _merge_options(args: argparse.Namespace, command: str) -> Dict:
    opts = _SUBCOMMAND_OPTS[command]
    merged: Dict = {}
    config_values: Dict[str, str] = {}
    if args.config:
        config_values = parse_config_file(args.config)
    known = set(opts) | set(_FLAG_OPTS) | ({"seed"} if command in _SEED_REQUIRED else set())
    for key in config_values:
        if key not in known:
            raise UsageError(f"unknown config key {key!r} for command {command!r}")
    for opt, (typ, default, _help) in opts.items():
        if opt == "seed" and command in _SEED_REQUIRED:
            continue
        flag_value = getattr(args, opt)
        if flag_value is not None:
            merged[opt] = flag_value
        elif opt in config_values:
            merged[opt] = _coerce(config_values[opt], typ)
        else:
            merged[opt] = default
    for flag in _FLAG_OPTS:
        flag_value = getattr(args, flag)
        if flag_value is not None:
            merged[flag] = True
        elif flag in config_values:
            merged[flag] = config_values[flag].lower() in ("1", "true", "yes")
        else:
            merged[flag] = False
    if command in _SEED_REQUIRED:
        if args.seed is not None:
            merged["seed"] = args.seed
        elif "seed" in config_values:
            merged["seed"] = int(config_values["seed"])
        else:
            raise UsageError(f"--seed is required for {command!r}")
    return merged


# ---------------------------------------------------------------------------
# task/model construction from merged options
# ---------------------------------------------------------------------------

def _task_shape(o: Dict) -> Dict:
    task = o["task"]
    if task == "majority":
        return {"vocab_size": tasks.FIRST_CONTENT_ID + o["task_vocab"],
                "n_classes": o["task_classes"], "max_len": o["length"] + 1, "pair": False}
    if task == "listops":
        return {"vocab_size": tasks.LISTOPS_VOCAB_SIZE, "n_classes": 10,
                "max_len": o["listops_length"] + 1, "pair": False}
    if task == "matching":
        return {"vocab_size": tasks.FIRST_CONTENT_ID + o["task_vocab"],
                "n_classes": 2, "max_len": o["length"] + 1, "pair": True}
    raise UsageError(f"unknown task {task!r}")


def _parse_kind(raw: str) -> AttentionKind:
    try:
        return AttentionKind(raw)
    except ValueError:
        raise UsageError(f"unknown attention kind {raw!r}") from None


def _model_config(o: Dict) -> ModelConfig:
    shape = _task_shape(o)
    d_embed = o["d_embed"]
    try:
        return ModelConfig(
            variant=Variant(o["variant"]), n_blocks=o["blocks"], n_heads=o["heads"],
            d_embed=d_embed, d_hidden=o["d_hidden"] if o["d_hidden"] else d_embed,
            d_mlp=o["d_mlp"], vocab_size=shape["vocab_size"], max_len=shape["max_len"],
            n_classes=shape["n_classes"], dropout_p=o["dropout"],
            activation=o["activation"], pair_head=shape["pair"])
    except ValueError as exc:  # bad variant name or inconsistent dimensions
        raise UsageError(str(exc)) from None


def generate_task_data(o: Dict, n: int, rng: Rng) -> List[tasks.Example]:
    task = o["task"]
    if task == "majority":
        return tasks.gen_majority_classification(o["task_vocab"], o["length"],
                                                 o["task_classes"], n, rng)
    if task == "listops":
        spec = tasks.ListOpsSpec(max_depth=o["listops_depth"], max_args=o["listops_args"],
                                 max_length=o["listops_length"])
        return tasks.gen_listops(spec, n, rng)
    if task == "matching":
        gen = tasks.uniform_sequence_generator(o["task_vocab"], o["length"])
        return tasks.gen_matching_pairs(gen, o["corruption_rate"], n, rng,
                                        vocab_size=o["task_vocab"])
    raise UsageError(f"unknown task {task!r}")


def _load_or_generate(o: Dict, seed: int):
    rng = Rng(seed)
    train_set = (tasks.load_dataset(o["train_file"]) if o.get("train_file")
                 else generate_task_data(o, o["train_n"], rng.split(10)))
    test_set = (tasks.load_dataset(o["test_file"]) if o.get("test_file")
                else generate_task_data(o, o["test_n"], rng.split(11)))
    return train_set, test_set


def _probe_ids(test_set: Sequence[tasks.Example], max_len: int, k: int = 8) -> List[np.ndarray]:
    ids, mask, _ = tasks.batch(list(test_set[:k]), max_len)
    return [row[:m.sum()] for row, m in zip(ids, mask)]


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def _cmd_train(o: Dict) -> int:
    seed = o["seed"]
    train_set, test_set = _load_or_generate(o, seed)
    cfg = _model_config(o)
    model = init_parameters(cfg, Rng(seed).split(0))
    if o["init_from"]:
        report = load_checkpoint(o["init_from"], model, Strictness(o["init_strictness"]))
        print(f"loaded {len(report.loaded)} tensors from {o['init_from']}"
              + (f", {len(report.missing)} left at init" if report.missing else ""))
    if o["attention_kind"]:
        convert_attention_kind(model, _parse_kind(o["attention_kind"]))
    if o["freeze"]:
        matched = freeze(model, resolve_freeze_patterns(o["freeze"]))
        print(f"froze {len(matched)} tensors; {count_trainable(model)} trainable entries remain")
    sc = ScheduleConfig(base_lr=o["base_lr"], warmup_steps=min(o["warmup"], o["steps"]),
                        total_steps=o["steps"], accumulation_factor=o["accum"],
                        batch_size=o["batch_size"])
    history = train(model, train_set, sc, Rng(seed).split(1),
                    opt_state=OptimizerState(weight_decay=o["weight_decay"]),
                    eval_data=test_set, eval_every=o["eval_every"],
                    clip_norm=o["clip_norm"], record_timing=not o["no_timing"])
    emit_csv(history, o["out"], columns=["step", "split", "loss", "accuracy", "lr", "wall_ms"])
    print(f"wrote {o['out']} ({len(history)} rows)")
    if not o["no_plots"]:
        from .plots import render_metrics_figure
        fig = render_metrics_figure(history, os.path.splitext(o["out"])[0] + ".png")
        print(f"wrote {fig}")
    acc, loss = evaluate(model, test_set)
    print(f"final test accuracy {acc:.4f}, loss {loss:.4f}")
    if o["std_out"]:
        stds = attention_std_diagnostic(model, _probe_ids(test_set, cfg.max_len))
        emit_csv([{"block": i + 1, "std": s} for i, s in enumerate(stds)], o["std_out"],
                 columns=["block", "std"])
        print(f"wrote {o['std_out']}")
        if not o["no_plots"]:
            from .plots import render_block_std_figure
            fig = render_block_std_figure({o["variant"]: stds},
                                          os.path.splitext(o["std_out"])[0] + ".png")
            print(f"wrote {fig}")
    if o["save"]:
        save_checkpoint(o["save"], model)
        print(f"wrote {o['save']}")
    return 0


def _cmd_eval(o: Dict) -> int:
    if not o["checkpoint"]:
        raise UsageError("eval requires --checkpoint")
    _, test_set = _load_or_generate(o, o["seed"])
    cfg = _model_config(o)
    model = init_parameters(cfg, Rng(0))
    load_checkpoint(o["checkpoint"], model, Strictness.STRICT)
    if o["attention_kind"]:
        convert_attention_kind(model, _parse_kind(o["attention_kind"]))
    acc, loss = evaluate(model, test_set)
    print(f"accuracy {acc:.4f}, mean loss {loss:.4f} over {len(test_set)} examples")
    return 0


def _cmd_bench(o: Dict) -> int:
    kinds = [_parse_kind(k.strip()) for k in o["kinds"].split(",") if k.strip()]
    lengths = [int(x) for x in o["lengths"].split(",") if x.strip()]
    records, slopes = bench_scaling(kinds, lengths, d=o["d"], n_heads=o["heads"],
                                    repeats=o["repeats"], rng=Rng(o["seed"]),
                                    record_timing=not o["no_timing"])
    emit_csv(records, o["out"])
    print(f"wrote {o['out']} ({len(records)} rows)")
    for kind, slope in slopes.items():
        print(f"log-log slope [{kind}]: {slope:.3f}")
    if not o["no_plots"]:
        from .plots import render_bench_figures
        for fig in render_bench_figures(records, slopes, os.path.splitext(o["out"])[0]):
            print(f"wrote {fig}")
    return 0


def _cmd_transfer(o: Dict) -> int:
    for required in ("in", "model_config", "to_kind", "out"):
        if not o[required]:
            raise UsageError(f"transfer requires --{required.replace('_', '-')}")
    file_opts = parse_config_file(o["model_config"])
    merged = dict(o)
    known = set(_TRAIN_OPTS)
    for key, raw in file_opts.items():
        if key not in known:
            raise UsageError(f"unknown config key {key!r} in {o['model_config']}")
        merged[key] = _coerce(raw, _TRAIN_OPTS[key][0])
    for key, (typ, default, _h) in _TRAIN_OPTS.items():
        merged.setdefault(key, default)
    cfg = _model_config(merged)
    model = init_parameters(cfg, Rng(0))
    load_checkpoint(o["in"], model, Strictness.STRICT)
    convert_attention_kind(model, _parse_kind(o["to_kind"]))
    if o["freeze"]:
        matched = freeze(model, resolve_freeze_patterns(o["freeze"]))
        print(f"freeze set matches {len(matched)} tensors "
              f"({count_trainable(model)} trainable entries remain)")
    save_checkpoint(o["out"], model)
    print(f"wrote {o['out']} (kind {model.attention_kind.value})")
    return 0


def _cmd_gen_data(o: Dict) -> int:
    if not o["out"]:
        raise UsageError("gen-data requires --out")
    examples = generate_task_data(o, o["n"], Rng(o["seed"]))
    tasks.save_dataset(o["out"], examples)
    print(f"wrote {o['out']} ({len(examples)} examples, task {o['task']})")
    return 0


def _cmd_gradcheck(o: Dict) -> int:
    d = o["d_embed"]
    cfg = ModelConfig(variant=Variant(o["variant"]), n_blocks=o["blocks"],
                      n_heads=o["heads"], d_embed=d, d_hidden=d, d_mlp=o["d_mlp"],
                      vocab_size=12, max_len=o["length"] + 1, n_classes=o["classes"],
                      dropout_p=0.0)
    ok = run_model_gradcheck(cfg, tolerance=o["tolerance"], seed=o["seed"], length=o["length"])
    return 0 if ok else 2


_HANDLERS = {"train": _cmd_train, "eval": _cmd_eval, "bench": _cmd_bench,
             "transfer": _cmd_transfer, "gen-data": _cmd_gen_data,
             "gradcheck": _cmd_gradcheck}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        if not argv:
            raise UsageError("a subcommand is required")
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        merged = _merge_options(args, args.command)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return _HANDLERS[args.command](merged)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure contract
        traceback.print_exc(limit=1, file=sys.stderr)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())
