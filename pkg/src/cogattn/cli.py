"""Command-line entry point: ``cogattn {train,probe,diagnose,bench,export-attn}``.

Exit codes: 0 success, 2 usage or configuration problem, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from cogattn.model import ModelConfig, init_params
from cogattn.probes import (
    ProbeError,
    attn_diagnostics,
    collapse_probe,
    export_attention_maps,
    timing_bench,
)
from cogattn.training import (
    CheckpointError,
    ConfigError,
    NumericalError,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("cogattn")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

DEFAULT_RUN = {
    "model": ModelConfig().to_dict(),
    "train": TrainConfig().to_dict(),
    "paths": {"corpus": None, "out_dir": "runs/default", "checkpoint": None},
}


class UsageError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(tree: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` assignments; values are parsed as JSON when possible."""
    tree = copy.deepcopy(tree)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not of the form key=value")
        parts = key.split(".")
        node = tree
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise UsageError(f"override {key!r}: {part!r} is not a config section")
            node = node[part]
        if parts[-1] not in node:
            raise UsageError(f"override {key!r}: unknown field {parts[-1]!r}")
        node[parts[-1]] = _parse_value(raw)
    return tree


def load_run_config(path, overrides=()) -> dict:
    tree = copy.deepcopy(DEFAULT_RUN)
    if path is not None:
        path = Path(path)
        try:
            user = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"cannot parse config {path}: {exc}") from None
        unknown = set(user) - set(tree)
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        for section, values in user.items():
            if not isinstance(values, dict):
                raise UsageError(f"config section {section!r} must be an object")
            tree[section].update(values)
    tree = apply_overrides(tree, overrides)
    # validate eagerly so bad values exit with a config error
    ModelConfig.from_dict(tree["model"])
    TrainConfig.from_dict(tree["train"])
    return tree


def _echo_config(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(
        json.dumps({"command": command, **resolved}, indent=2, sort_keys=True) + "\n"
    )


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _out_dir(args, tree: dict | None = None) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    if tree and tree["paths"].get("out_dir"):
        return Path(tree["paths"]["out_dir"])
    return Path("runs") / args.command


def _checkpoint_path(args, tree: dict | None) -> Path:
    path = args.checkpoint or (tree["paths"].get("checkpoint") if tree else None)
    if not path:
        raise UsageError("no checkpoint given (use --checkpoint or paths.checkpoint)")
    return Path(path)


def cmd_train(args) -> int:
    tree = load_run_config(args.config, args.set)
    corpus = tree["paths"].get("corpus")
    if not corpus or not Path(corpus).is_file():
        raise UsageError(f"corpus not found: {corpus}")
    out = _out_dir(args, tree)
    tree["paths"]["out_dir"] = str(out)
    _echo_config(out, "train", tree)
    tc = TrainConfig.from_dict(tree["train"])
    start, state = 0, None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model, state, start = ckpt.model, ckpt.state, ckpt.step
    else:
        model = init_params(ModelConfig.from_dict(tree["model"]))
    result = train(model, corpus, tc, out_dir=out, state=state, start_step=start)
    save_checkpoint(result.model, result.state, tc.total_steps, out / "ckpt_final.bin", tc)
    last = result.trace.records[-1] if result.trace.records else None
    if last is not None:
        print(f"trained to step {last.step}: loss {last.loss:.4f}")
    return EXIT_OK


def _load_model(args, tree):
    return load_checkpoint(_checkpoint_path(args, tree)).model


def _maybe_tree(args):
    return load_run_config(args.config, args.set) if args.config or args.set else None


def cmd_probe(args) -> int:
    tree = _maybe_tree(args)
    model = _load_model(args, tree)
    ref = args.ref if args.ref is not None else args.n[0]
    task = args.task.replace("-", "_")
    report = collapse_probe(model, task, args.n, ref, model_tag=model.config.activation_policy.value, prenorm=args.prenorm)
    out = _out_dir(args, tree)
    _echo_config(out, "probe", {"checkpoint": str(_checkpoint_path(args, tree)), "task": task, "n": args.n, "ref": ref,
                                "prenorm": args.prenorm, "model": model.config.to_dict()})
    (out / f"probe_{task}.json").write_text(report.to_json() + "\n")
    print(f"{'n':>6} {'linf':>12} {'normalized':>11}")
    for e in report.entries:
        print(f"{e.n:>6} {e.linf_norm:>12.6g} {e.normalized:>11.4f}")
    return EXIT_OK


def _read_text(args) -> str:
    if args.text is not None:
        return args.text
    if args.text_file is not None:
        try:
            return Path(args.text_file).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise UsageError(f"text file not found: {args.text_file}") from None
    raise UsageError("provide --text or --text-file")


def cmd_diagnose(args) -> int:
    tree = _maybe_tree(args)
    model = _load_model(args, tree)
    text = _read_text(args)
    report = attn_diagnostics(model, text)
    out = _out_dir(args, tree)
    _echo_config(out, "diagnose", {"checkpoint": str(_checkpoint_path(args, tree)), "n_tokens": report.n_tokens,
                                   "model": model.config.to_dict()})
    (out / "diagnostics.json").write_text(report.to_json() + "\n")
    for h in report.heads:
        print(f"L{h.layer}H{h.head} {h.activation:>7} sink={h.sink_score:.3f} neg={h.neg_fraction:.3f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    tree = _maybe_tree(args)
    if args.checkpoint:
        config = load_checkpoint(args.checkpoint).model.config
    elif tree is not None:
        config = ModelConfig.from_dict(tree["model"])
    else:
        config = ModelConfig(context_len=max(args.lengths))
    report = timing_bench(config, args.lengths, args.reps, batch_size=args.batch_size)
    out = _out_dir(args, tree)
    _echo_config(out, "bench", {"lengths": args.lengths, "reps": args.reps, "batch_size": args.batch_size,
                                "model": config.to_dict()})
    (out / "bench.json").write_text(report.to_json() + "\n")
    for e in report.entries:
        print(f"len {e.len:>5}: softmax {e.softmax_ms_per_step:8.2f} ms  cog {e.cog_ms_per_step:8.2f} ms  ratio {e.ratio:.3f}")
    return EXIT_OK


def cmd_export_attn(args) -> int:
    tree = _maybe_tree(args)
    model = _load_model(args, tree)
    text = _read_text(args)
    out = _out_dir(args, tree)
    _echo_config(out, "export-attn", {"checkpoint": str(_checkpoint_path(args, tree)), "text": text,
                                      "model": model.config.to_dict()})
    paths = export_attention_maps(model, text, out)
    print(f"wrote {len(paths)} attention maps to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cogattn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True):
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-path override")
        p.add_argument("--out-dir")
        if checkpoint:
            p.add_argument("--checkpoint")

    p = sub.add_parser("train", help="train a model on a UTF-8 corpus")
    common(p, checkpoint=False)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="representational-collapse probe")
    common(p)
    p.add_argument("--task", choices=["finding-zero", "counting-ones"], required=True)
    p.add_argument("--n", type=_int_list, required=True)
    p.add_argument("--ref", type=int)
    p.add_argument("--prenorm", action="store_true", help="use the residual stream before the final norm")
    p.set_defaults(func=cmd_probe)

    for name, func, help_ in (
        ("diagnose", cmd_diagnose, "per-head attention statistics"),
        ("export-attn", cmd_export_attn, "write per-head attention maps as PPM"),
    ):
        p = sub.add_parser(name, help=help_)
        common(p)
        p.add_argument("--text")
        p.add_argument("--text-file")
        p.set_defaults(func=func)

    p = sub.add_parser("bench", help="time training steps for softmax vs cog models")
    common(p)
    p.add_argument("--lengths", type=_int_list, required=True)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=1)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, CheckpointError, ProbeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
