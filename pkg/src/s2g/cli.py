"""``s2g`` command line: conversion, execution, data checks, training, evaluation, reports.

Exit codes: 0 ok, 2 parse error, 3 execution error, 4 I/O error.  Results go to
stdout and diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import datahub, geokg
from .config import RunConfig
from .optree import (ExecutionError, FormulaRegistry, OpTreeError, ParseError, default_registry,
                     evaluate, expand_formulas, from_prefix, parse_infix, render_tree, to_infix,
                     to_prefix)

EXIT_OK, EXIT_PARSE, EXIT_EXEC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("s2g")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _registry(args) -> FormulaRegistry:
    path = getattr(args, "registry", None)
    if not path:
        return default_registry()
    try:
        return FormulaRegistry.from_json(path)
    except OSError as exc:
        raise CliError(f"cannot read registry: {exc}", EXIT_IO) from None
    except (OpTreeError, ValueError, KeyError) as exc:
        raise CliError(f"bad registry {path}: {exc}", EXIT_PARSE) from None


def _load_data(path, reg) -> datahub.Dataset:
    try:
        return datahub.load_jsonl(path, reg)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None
    except datahub.MalformedLine as exc:
        raise CliError(f"{path}: {exc}", EXIT_PARSE) from None


def _format_value(value: float) -> str:
    return format(value, ".10g")


def _parse_any(text: str, reg):
    """Infix first; fall back to whitespace-separated prefix tokens."""
    if not text.strip():
        raise ParseError("empty equation")
    try:
        return parse_infix(text, reg)
    except ParseError as infix_err:
        try:
            return from_prefix(text.split(), reg)
        except ParseError:
            raise infix_err from None


def _parse_env(pairs) -> dict[int, float]:
    env = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        key = key.strip().strip("<>")
        if not sep or not key.startswith("N") or not key[1:].isdigit():
            raise CliError(f"bad --env entry {pair!r}; expected N<k>=<value>", EXIT_PARSE)
        try:
            env[int(key[1:])] = float(value)
        except ValueError:
            raise CliError(f"bad number in --env entry {pair!r}", EXIT_PARSE) from None
    return env


# ---------------------------------------------------------------- commands

def cmd_convert(args) -> int:
    reg = _registry(args)
    tree = _parse_any(args.equation, reg)
    print(" ".join(to_prefix(tree)) if args.to == "prefix" else to_infix(tree))
    return EXIT_OK


def cmd_exec(args) -> int:
    reg = _registry(args)
    tree = _parse_any(args.equation, reg)
    print(_format_value(evaluate(tree, _parse_env(args.env), reg)))
    return EXIT_OK


def cmd_validate_data(args) -> int:
    reg = _registry(args)
    data = _load_data(args.path, reg)
    total = len(data) + len(data.rejects)
    print(f"records\t{total}")
    print(f"accepted\t{len(data)}")
    print(f"rejected\t{len(data.rejects)}")
    for cls, n in data.class_counts.items():
        print(f"class:{cls}\t{n}")
    for rej in data.rejects:
        print(f"reject\t{rej['id']}\t{rej['reason']}")
    if args.rejects:
        datahub.write_rejects(data.rejects, args.rejects)
    return EXIT_OK if not data.rejects else 1


def cmd_synth(args) -> int:
    records = datahub.synth_records(args.n, seed=args.seed)
    out = Path(args.out) if args.out else None
    lines = [json.dumps(r, ensure_ascii=False) for r in records]
    if out is None:
        sys.stdout.write("\n".join(lines) + "\n")
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"wrote {len(records)} problems to {out}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    try:
        cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
        paths = {k: v for k, v in (("data", args.data), ("registry", args.registry),
                                   ("kg", args.kg), ("checkpoint", args.checkpoint)) if v}
        return cfg.replace(seed=args.seed, epochs=args.epochs, batch=args.batch, lr=args.lr,
                           emb_dim=args.emb_dim, hidden_dim=args.hidden_dim, dropout=args.dropout,
                           lr_halve_every=args.lr_halve_every, eval_every=args.eval_every,
                           beam=args.beam, paths={**cfg.paths, **paths})
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}", EXIT_IO) from None
    except (ValueError, TypeError) as exc:
        raise CliError(f"bad config: {exc}", EXIT_PARSE) from None


def cmd_train(args) -> int:
    from . import plots
    from .training import build_model, train

    cfg = _run_config(args)
    if not cfg.paths.get("data"):
        raise CliError("no training data (--data or paths.data)", EXIT_IO)
    reg = default_registry() if not cfg.paths.get("registry") else _registry(
        argparse.Namespace(registry=cfg.paths["registry"]))
    kg = binding = None
    if cfg.paths.get("kg"):
        try:
            kg, binding = geokg.load_kg(cfg.paths["kg"], reg)
        except OSError as exc:
            raise CliError(f"cannot read kg: {exc}", EXIT_IO) from None
    data = _load_data(cfg.paths["data"], reg)
    if data.rejects:
        print(f"skipping {len(data.rejects)} rejected records", file=sys.stderr)
    evals = {}
    if args.dev:
        train_set = data.instances
        evals["dev"] = _load_data(args.dev, reg).instances
    elif args.holdout:
        tr, te = datahub.holdout_split(data, args.holdout, seed=cfg.seed)
        train_set, evals["dev"] = tr.instances, te.instances
    else:
        train_set = data.instances
    if args.eval_train:
        evals = {"train": train_set, **evals}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(cfg.paths.get("checkpoint") or out / "model.ckpt")
    metrics = Path(cfg.paths.get("metrics") or out / "metrics.jsonl")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1), encoding="utf-8")

    model = build_model(train_set, reg, cfg, kg, binding)
    train(model, train_set, cfg, eval_sets=evals, metrics_path=metrics,
          on_epoch=lambda ep, recs: print(json.dumps(recs[-1]), flush=True) and False)
    model.save(ckpt, extra={"run_config": cfg.to_dict()})
    plots.render_report(metrics, out)
    print(f"checkpoint {ckpt}", file=sys.stderr)
    return EXIT_OK


def _load_model(path):
    from .model import S2GModel
    from .ndgrad import CheckpointError

    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}", EXIT_IO)
    try:
        return S2GModel.load(path)
    except (OSError, CheckpointError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}", EXIT_IO) from None


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    data = _load_data(args.data, model.reg)
    m = datahub.evaluate_model(model, data.instances, beam=args.beam, max_nodes=args.max_nodes)
    result = {"beam": args.beam, **m.as_dict()}
    print(json.dumps(result, indent=1))
    if args.out:
        from . import plots

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(result, indent=1), encoding="utf-8")
        plots.write_class_csv(m.per_class, out / "per_class.csv")
        plots.plot_class_accuracy(m.per_class, out / "per_class.png")
    return EXIT_OK


def cmd_solve(args) -> int:
    from .lexvocab import LexError
    from .model import DecodeError

    model = _load_model(args.checkpoint)
    try:
        inst = datahub.problem_from_text(args.text, max_slots=model.max_slots)
    except LexError as exc:
        raise CliError(f"cannot read problem: {exc}", EXIT_PARSE) from None
    try:
        tokens, _ = model.decode(model.example(inst), beam=args.beam, max_nodes=args.max_nodes)
    except DecodeError as exc:
        raise CliError(f"decoding failed: {exc}", EXIT_EXEC) from None
    tree = from_prefix(model.tgt.decode(tokens), model.reg)
    binary = expand_formulas(tree, model.reg)
    env = inst.slots.env()
    print(render_tree(tree))
    print(f"numbers: {', '.join(f'<N{i}>={_format_value(v)}' for i, v in env.items())}")
    print(f"expanded: {to_infix(binary)}")
    print(f"answer: {_format_value(evaluate(tree, env, model.reg))}")
    if args.figure:
        from . import plots

        plots.plot_trees([tree, binary], ["operation tree", "binary expression tree"], args.figure)
    return EXIT_OK


def cmd_report(args) -> int:
    from . import plots

    try:
        paths = plots.render_report(args.metrics, args.out)
    except OSError as exc:
        raise CliError(f"cannot read metrics: {exc}", EXIT_IO) from None
    except (json.JSONDecodeError, KeyError) as exc:
        raise CliError(f"bad metrics file: {exc}", EXIT_PARSE) from None
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_dump_kg(args) -> int:
    kg, binding = geokg.build_default_kg(_registry(args))
    geokg.dump_kg(kg, binding, args.out)
    print(f"{len(kg.nodes)} nodes, {len(kg.edges)} edges -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="s2g", description="Geometry word problem solver with formula-aware trees.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_registry(sp):
        sp.add_argument("--registry", help="formula registry JSON (default: built-in 11 formulas)")
        return sp

    sp = with_registry(sub.add_parser("convert", help="convert an equation between infix and prefix"))
    sp.add_argument("equation")
    sp.add_argument("--to", choices=("prefix", "infix"), default="prefix")
    sp.set_defaults(func=cmd_convert)

    sp = with_registry(sub.add_parser("exec", help="evaluate an infix or prefix equation"))
    sp.add_argument("equation")
    sp.add_argument("--env", nargs="*", metavar="Nk=VALUE", help="slot bindings such as N0=300")
    sp.set_defaults(func=cmd_exec)

    sp = with_registry(sub.add_parser("validate-data", help="load a JSONL dataset and list rejects"))
    sp.add_argument("path")
    sp.add_argument("--rejects", help="also write the rejects as JSON lines here")
    sp.set_defaults(func=cmd_validate_data)

    sp = sub.add_parser("synth", help="generate a synthetic problem corpus")
    sp.add_argument("n", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_synth)

    sp = with_registry(sub.add_parser("train", help="train a model; writes checkpoint, metrics and report"))
    sp.add_argument("--config", help="RunConfig JSON; flags override it")
    sp.add_argument("--data")
    sp.add_argument("--dev", help="separate evaluation set")
    sp.add_argument("--holdout", type=float, help="evaluate on this fraction of --data instead")
    sp.add_argument("--eval-train", action="store_true", help="also score the training set")
    sp.add_argument("--kg")
    sp.add_argument("--out", default="runs/latest")
    sp.add_argument("--checkpoint")
    for flag, typ in (("--seed", int), ("--epochs", int), ("--batch", int), ("--lr", float),
                      ("--emb-dim", int), ("--hidden-dim", int), ("--dropout", float),
                      ("--lr-halve-every", int), ("--eval-every", int), ("--beam", int)):
        sp.add_argument(flag, type=typ)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint on a dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--beam", type=int, default=5)
    sp.add_argument("--max-nodes", type=int, default=50)
    sp.add_argument("--out", help="write eval.json, per_class.csv and per_class.png here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("solve", help="solve one problem text")
    sp.add_argument("text")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--beam", type=int, default=5)
    sp.add_argument("--max-nodes", type=int, default=50)
    sp.add_argument("--figure", help="draw the operation tree and its expansion to this image")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("report", help="metrics JSONL -> metrics.csv + curves.png")
    sp.add_argument("metrics")
    sp.add_argument("--out", default=".")
    sp.set_defaults(func=cmd_report)

    sp = with_registry(sub.add_parser("dump-kg", help="write the default knowledge graph as JSON"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_dump_kg)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"s2g: {exc}", file=sys.stderr)
        return exc.code
    except ParseError as exc:
        print(f"s2g: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ExecutionError as exc:
        print(f"s2g: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_EXEC
    except OSError as exc:
        print(f"s2g: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
