"""Command line entry point: ``spanbandit run|replay|eval|synth|keys``.

Exit status is 0 on success, 2 for invalid configs or arguments, 1 for any
other failure (missing files, corrupt logs, ...).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from . import harness
from .dataset import DatasetError, SynthSpec, load_mrqa, synth_task, write_mrqa
from .feedback import FeedbackLogError, read_log
from .harness import ConfigError
from .learner import replay
from .metrics import evaluate
from .policy import LinearSpanPolicy, PolicyConfig

logger = logging.getLogger("spanbandit")


def _parse_sets(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = harness.parse_value(raw.strip())
    return out


def _synth_overrides(path: str) -> dict:
    """A TOML file of synthetic-task fields, mapped onto ``data.synth.*``."""
    try:
        with open(path, "rb") as fh:
            fields = harness.tomllib.load(fh)
    except harness.tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: not valid TOML: {err}") from err
    return {f"data.synth.{k}": v for k, v in fields.items()}


def cmd_run(args) -> int:
    overrides = _parse_sets(args.set)
    if args.seed:
        overrides["seeds"] = args.seed
    if args.dataset:
        overrides["data.target"] = args.dataset
    if args.synth:
        overrides.update(_synth_overrides(args.synth))
    if args.few_shot is not None:
        overrides["init.few_shot"] = args.few_shot
    cfg = harness.load_config(args.config, overrides=overrides)
    out = args.out or cfg.output_dir
    report = harness.run_experiment(cfg, out)
    for row in report.summary_rows:
        print(",".join(row))
    print(f"wrote {report.output_dir / 'manifest.json'}")
    return 0


def cmd_replay(args) -> int:
    cfg = harness.load_config(args.config, overrides=_parse_sets(args.set))
    data = harness.prepare_data(cfg)
    log = read_log(args.log)
    policy = LinearSpanPolicy.load(args.checkpoint)
    lcfg = dataclasses.replace(cfg.learner, mode="offline") if cfg.learner.mode != "offline" else cfg.learner
    if args.lr is not None:
        lcfg = dataclasses.replace(lcfg, lr=args.lr)
    # the log may reference stream and few-shot examples alike
    trained = replay(log, policy, lcfg, data.target, cfg.policy)
    f1, em = evaluate(trained, data.eval, cfg.policy)
    if args.out:
        trained.save(args.out)
    print(json.dumps({"records": len(log), "f1": f1, "em": em, "checkpoint": args.out}))
    return 0


def cmd_eval(args) -> int:
    policy = LinearSpanPolicy.load(args.checkpoint)
    ds = load_mrqa(args.dataset, max_context_tokens=args.max_context_tokens)
    f1, em = evaluate(policy, ds, PolicyConfig(max_span_len=args.max_span_len))
    print(json.dumps({"examples": len(ds), "f1": f1, "em": em}))
    return 0


def cmd_synth(args) -> int:
    params = _parse_sets(args.set)
    known = {f.name for f in dataclasses.fields(SynthSpec)}
    for key in params:
        if key not in known:
            raise ConfigError(f"unknown synth field {key!r}")
    if "answer_len" in params:
        params["answer_len"] = tuple(params["answer_len"])
    try:
        spec = SynthSpec(**params)
    except (ValueError, TypeError) as err:
        raise ConfigError(str(err)) from err
    write_mrqa(synth_task(spec), args.out)
    print(f"wrote {spec.n_examples} examples to {args.out}")
    return 0


def cmd_keys(args) -> int:
    for key, spec in harness.KEYS.items():
        default = "-" if spec.default is None else json.dumps(spec.default)
        print(f"{key}\t{spec.kind}\t{default}\t{harness.env_var(key)}\t{spec.doc}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spanbandit", description="Bandit feedback learning for extractive QA.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a TOML config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="output directory (overrides output_dir)")
    r.add_argument("--seed", type=int, nargs="+", help="run seeds (overrides seeds)")
    r.add_argument("--dataset", help="target JSONL (overrides data.target)")
    r.add_argument("--synth", metavar="SPEC", help="TOML file of synthetic-task fields (replaces the target)")
    r.add_argument("--few-shot", type=int, help="overrides init.few_shot")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("replay", help="offline clipped-IPS updates from a feedback log")
    rp.add_argument("--log", required=True)
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--config", required=True)
    rp.add_argument("--out", help="where to save the updated checkpoint")
    rp.add_argument("--lr", type=float)
    rp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    rp.set_defaults(func=cmd_replay)

    e = sub.add_parser("eval", help="F1/EM of a checkpoint on a JSONL dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--max-span-len", type=int, default=30)
    e.add_argument("--max-context-tokens", type=int, default=800)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic task as JSONL")
    s.add_argument("--out", required=True)
    s.add_argument("--set", action="append", default=[], metavar="FIELD=VALUE")
    s.set_defaults(func=cmd_synth)

    k = sub.add_parser("keys", help="list config keys, defaults and env variables")
    k.set_defaults(func=cmd_keys)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (OSError, DatasetError, FeedbackLogError, KeyError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
