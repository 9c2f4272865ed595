"""Experiment orchestration: config parsing, scenario wiring, artifact emission.

A config is a TOML file.  Every setting has a dotted key (``learner.lr``,
``data.synth.n_keys``) and can be overridden through the environment as
``SPANBANDIT_`` + the key upper-cased with dots replaced by ``__``, e.g.
``SPANBANDIT_LEARNER__LR=5``.  Run ``spanbandit keys`` for the full listing.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import sys
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, _kernels, learner
from .dataset import Dataset, SynthSpec, few_shot_subset, load_mrqa, synth_task
from .feedback import RewardConfig, write_log
from .learner import LearnerConfig
from .metrics import LearningCurvePoint, mean_std, summary_row, write_curve, write_summary
from .policy import LinearSpanPolicy, PolicyConfig, SupInitConfig, supervised_init

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ENV_PREFIX = "SPANBANDIT_"
SCENARIOS = ("in_domain", "adaptation", "sensitivity")
SYNTH_TABLES = ("data.synth", "data.eval_synth", "data.source_synth")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class Key:
    kind: str  # int, float, str, bool, int_list, int_pair
    default: Any
    doc: str


_BASE_KEYS: dict[str, Key] = {
    "schema_version": Key("int", SCHEMA_VERSION, "config format version; must be 1"),
    "scenario": Key("str", None, "in_domain | adaptation | sensitivity (required)"),
    "seeds": Key("int_list", [0], "run seeds; sensitivity needs at least two"),
    "output_dir": Key("str", "runs", "directory for curves, logs, checkpoints and the manifest"),
    "data.target": Key("str", None, "MRQA-style JSONL with the feedback stream (or use [data.synth])"),
    "data.eval": Key("str", None, "held-out JSONL for evaluation"),
    "data.holdout": Key("int", 0, "if no eval file: hold out this many target examples"),
    "data.split_seed": Key("int", 0, "seed for the holdout split"),
    "data.source": Key("str", None, "adaptation: fully annotated source JSONL (or use [data.source_synth])"),
    "data.max_context_tokens": Key("int", 800, "contexts are truncated to this many tokens"),
    "init.few_shot": Key("int", 64, "in_domain/sensitivity: annotated examples for the initial model"),
    "init.epochs": Key("int", None, "supervised epochs (default 10 few-shot, 4 full-source)"),
    "init.batch_size": Key("int", None, "supervised batch size (default 10 few-shot, 40 full-source)"),
    "init.lr": Key("float", SupInitConfig.lr, "supervised base learning rate"),
    "init.schedule": Key("str", "linear", "supervised lr schedule: linear | constant"),
    "policy.max_span_len": Key("int", 30, "longest span the policy may output"),
    "policy.mode": Key("str", "argmax", "decoding during feedback collection: argmax | sample"),
    "policy.hash_bits": Key("int", 18, "feature hash size per block is 2**hash_bits"),
    "reward.mode": Key("str", "exact", "exact (index match) | f1"),
    "reward.positive": Key("float", 1.0, "reward for a correct span"),
    "reward.negative": Key("float", -0.1, "reward for a wrong span (and for F1 = 0)"),
    "reward.noise_ratio": Key("float", 0.0, "probability of flipping the binary reward"),
    "learner.mode": Key("str", "online", "online | offline"),
    "learner.batch_size": Key("int", 40, "examples per parameter update"),
    "learner.lr": Key("float", None, "learning rate (default 15 online, 10 offline)"),
    "learner.horizon": Key("int", None, "truncate the stream to this many steps"),
    "learner.offline_epochs": Key("int", 3, "offline passes over the feedback log"),
    "learner.clip_low": Key("float", 0.0, "lower clip for importance ratios"),
    "learner.clip_high": Key("float", 1.0, "upper clip for importance ratios"),
    "learner.checkpoints": Key("int", 9, "evaluation points along the curve, step 0 included"),
}

_SYNTH_DOCS = {
    "vocab_size": "token types (keys plus filler words)",
    "n_examples": "examples to generate",
    "context_length": "tokens per context",
    "seed": "generation seed",
    "n_keys": "key tokens; half of them are active",
    "n_decoys": "inactive key units per context",
    "question_overlap": "filler words copied into the question",
    "answer_len": "[min, max] answer length",
    "domain": "filler-word prefix (distractor vocabulary)",
    "grammar_seed": "seed drawing the active key set",
}


def _synth_keys() -> dict[str, Key]:
    keys = {}
    defaults = SynthSpec()
    for table in SYNTH_TABLES:
        for f in dataclasses.fields(SynthSpec):
            value = getattr(defaults, f.name)
            kind = "int_pair" if f.name == "answer_len" else "str" if f.name == "domain" else "int"
            default = list(value) if kind == "int_pair" else value
            if table == "data.eval_synth":
                # eval spec inherits the target spec; only size/seed get own defaults
                default = {"n_examples": 500}.get(f.name)
            keys[f"{table}.{f.name}"] = Key(kind, default, _SYNTH_DOCS[f.name])
    return keys


KEYS: dict[str, Key] = {**_BASE_KEYS, **_synth_keys()}


def env_var(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "__")


def _flatten(table: Mapping, prefix: str = "") -> tuple[dict[str, Any], set[str]]:
    flat, tables = {}, set()
    for name, value in table.items():
        path = f"{prefix}{name}"
        if isinstance(value, dict):
            tables.add(path)
            sub, subtables = _flatten(value, path + ".")
            flat.update(sub)
            tables |= subtables
        else:
            flat[path] = value
    return flat, tables


def _coerce(path: str, kind: str, value: Any) -> Any:
    def bad(expected):
        return ConfigError(f"{path}: expected {expected}, got {type(value).__name__} {value!r}")

    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("number")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise bad("string")
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise bad("boolean")
        return value
    if kind in ("int_list", "int_pair"):
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
            raise bad("list of integers")
        if kind == "int_pair" and len(value) != 2:
            raise bad("list of two integers")
        return list(value)
    raise AssertionError(kind)


def parse_value(raw: str) -> Any:
    """TOML literal if it parses, else the raw string (so `x=abc` needs no quotes)."""
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


@dataclass(frozen=True)
class DataSource:
    """Either a JSONL path or a synthetic spec."""

    path: str | None = None
    synth: SynthSpec | None = None

    def describe(self) -> str:
        return self.path if self.path is not None else f"synth({self.synth})"


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    seeds: tuple[int, ...]
    output_dir: str
    target: DataSource
    eval: DataSource | None
    holdout: int
    split_seed: int
    source: DataSource | None
    max_context_tokens: int
    few_shot: int
    sup_init: SupInitConfig
    policy: PolicyConfig
    hash_bits: int
    reward: RewardConfig
    learner: LearnerConfig
    values: tuple[tuple[str, Any], ...]  # fully resolved flat settings, sorted

    def config_hash(self) -> str:
        blob = json.dumps(dict(self.values), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _build(path: str, factory, **kwargs):
    try:
        return factory(**kwargs)
    except (ValueError, TypeError) as err:
        raise ConfigError(f"{path}: {err}") from err


def validate_config(
    text: str,
    env: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> ExperimentConfig:
    """Parse TOML text, apply env overrides then explicit overrides, and check everything.

    ``env`` defaults to ``os.environ``; pass ``{}`` to ignore the environment.
    """
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"config is not valid TOML: {err}") from err
    flat, tables = _flatten(raw)
    overrides = dict(overrides or {})
    # an explicit target (path or synth fields) replaces whichever kind the file had
    if "data.target" in overrides:
        flat = {k: v for k, v in flat.items() if not k.startswith("data.synth.")}
        tables.discard("data.synth")
    if any(k.startswith("data.synth.") for k in overrides):
        flat.pop("data.target", None)
    for path in sorted(tables):
        if path not in ("data", "init", "policy", "reward", "learner") + SYNTH_TABLES:
            raise ConfigError(f"unknown config table {path!r}")
    for path in sorted(flat):
        if path not in KEYS:
            raise ConfigError(f"unknown config key {path!r}")

    env = os.environ if env is None else env
    for path in KEYS:
        name = env_var(path)
        if name in env:
            flat[path] = parse_value(env[name])
            tables.add(path.rsplit(".", 1)[0])
    for path, value in overrides.items():
        if path not in KEYS:
            raise ConfigError(f"unknown config key {path!r}")
        flat[path] = value
        tables.add(path.rsplit(".", 1)[0])

    vals = {path: _coerce(path, KEYS[path].kind, v) for path, v in flat.items()}

    def get(path):
        return vals.get(path, KEYS[path].default)

    if get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported version {get('schema_version')} (expected {SCHEMA_VERSION})")
    scenario = get("scenario")
    if scenario is None:
        raise ConfigError("scenario: required key is missing")
    if scenario not in SCENARIOS:
        raise ConfigError(f"scenario: must be one of {', '.join(SCENARIOS)}, got {scenario!r}")
    seeds = tuple(get("seeds"))
    if not seeds:
        raise ConfigError("seeds: at least one seed is required")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: duplicate seeds")
    if scenario == "sensitivity" and len(seeds) < 2:
        raise ConfigError("seeds: the sensitivity scenario needs at least two seeds")

    def synth_spec(table, base=None):
        present = {f.name: vals[f"{table}.{f.name}"] for f in dataclasses.fields(SynthSpec) if f"{table}.{f.name}" in vals}
        params = dataclasses.asdict(base) if base is not None else {}
        if base is not None:
            params.update({k: KEYS[f"{table}.{k}"].default for k in ("n_examples",)})
            params["seed"] = base.seed + 1
        params.update(present)
        if "answer_len" in params:
            params["answer_len"] = tuple(params["answer_len"])
        return _build(table, SynthSpec, **params)

    def source_for(path_key, table):
        path, has_table = get(path_key), table in tables
        if path is not None and has_table:
            raise ConfigError(f"{path_key}: give either a path or [{table}], not both")
        if path is not None:
            return DataSource(path=path)
        if has_table:
            return DataSource(synth=synth_spec(table))
        return None

    target = source_for("data.target", "data.synth")
    if target is None:
        raise ConfigError("data.target: a target dataset path or a [data.synth] table is required")
    holdout = get("data.holdout")
    if holdout < 0:
        raise ConfigError("data.holdout: must be >= 0")
    if get("data.eval") is not None and "data.eval_synth" in tables:
        raise ConfigError("data.eval: give either a path or [data.eval_synth], not both")
    if get("data.eval") is not None:
        eval_src = DataSource(path=get("data.eval"))
    elif target.synth is not None and holdout == 0:
        eval_src = DataSource(synth=synth_spec("data.eval_synth", base=target.synth))
        if eval_src.synth.seed == target.synth.seed:
            raise ConfigError("data.eval_synth.seed: eval data must use a seed disjoint from the target's")
    elif "data.eval_synth" in tables:
        raise ConfigError("data.eval_synth: only valid with a synthetic target")
    elif holdout > 0:
        eval_src = None
    else:
        raise ConfigError("data.eval: an eval dataset or data.holdout > 0 is required")
    if eval_src is not None and holdout > 0:
        raise ConfigError("data.holdout: cannot combine a holdout split with a separate eval set")

    source = source_for("data.source", "data.source_synth")
    if scenario == "adaptation":
        if source is None:
            raise ConfigError("data.source: the adaptation scenario needs a source dataset")
        if source == target or (
            source.path is not None
            and target.path is not None
            and Path(source.path).resolve() == Path(target.path).resolve()
        ):
            raise ConfigError("data.source: source and target datasets must differ")
    elif source is not None:
        raise ConfigError("data.source: only used by the adaptation scenario")

    few_shot = get("init.few_shot")
    if few_shot < 1:
        raise ConfigError("init.few_shot: must be >= 1")
    full_source = scenario == "adaptation"
    epochs = get("init.epochs")
    batch_size = get("init.batch_size")
    sup = _build(
        "init",
        SupInitConfig,
        epochs=(4 if full_source else 10) if epochs is None else epochs,
        batch_size=(40 if full_source else 10) if batch_size is None else batch_size,
        lr=get("init.lr"),
        schedule=get("init.schedule"),
    )
    policy_cfg = _build("policy", PolicyConfig, max_span_len=get("policy.max_span_len"), mode=get("policy.mode"))
    hash_bits = get("policy.hash_bits")
    if not 1 <= hash_bits <= 30:
        raise ConfigError("policy.hash_bits: must be in [1, 30]")
    reward = _build(
        "reward",
        RewardConfig,
        mode=get("reward.mode"),
        positive=get("reward.positive"),
        negative=get("reward.negative"),
        noise_ratio=get("reward.noise_ratio"),
    )
    learner_cfg = _build(
        "learner",
        LearnerConfig,
        mode=get("learner.mode"),
        batch_size=get("learner.batch_size"),
        lr=get("learner.lr"),
        horizon=get("learner.horizon"),
        offline_epochs=get("learner.offline_epochs"),
        clip_low=get("learner.clip_low"),
        clip_high=get("learner.clip_high"),
        checkpoints=get("learner.checkpoints"),
    )
    if get("data.max_context_tokens") < 1:
        raise ConfigError("data.max_context_tokens: must be >= 1")

    resolved = {p: k.default for p, k in _BASE_KEYS.items()}
    resolved.update(vals)
    resolved.update(
        {
            "init.epochs": sup.epochs,
            "init.batch_size": sup.batch_size,
            "learner.lr": learner_cfg.lr,
        }
    )
    for name, src in (("target", target), ("eval", eval_src), ("source", source)):
        if src is not None and src.synth is not None:
            resolved[f"resolved.{name}_synth"] = dataclasses.asdict(src.synth)
    resolved.pop("output_dir")  # where results go does not change what they are
    return ExperimentConfig(
        scenario=scenario,
        seeds=seeds,
        output_dir=get("output_dir"),
        target=target,
        eval=eval_src,
        holdout=holdout,
        split_seed=get("data.split_seed"),
        source=source,
        max_context_tokens=get("data.max_context_tokens"),
        few_shot=few_shot,
        sup_init=sup,
        policy=policy_cfg,
        hash_bits=hash_bits,
        reward=reward,
        learner=learner_cfg,
        values=tuple(sorted((k, _freeze(v)) for k, v in resolved.items())),
    )


def _freeze(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, dict):
        return {k: _freeze(x) for k, x in v.items()}
    return v


def load_config(path: str | Path, **kwargs) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return validate_config(path.read_text(encoding="utf-8"), **kwargs)


# -- data -------------------------------------------------------------------


@dataclass(frozen=True)
class PreparedData:
    target: Dataset
    eval: Dataset
    source: Dataset | None = None


def _load(src: DataSource, max_tokens: int) -> Dataset:
    if src.synth is not None:
        return synth_task(src.synth)
    if not Path(src.path).is_file():
        raise FileNotFoundError(f"dataset not found: {src.path}")
    return load_mrqa(src.path, max_context_tokens=max_tokens)


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    """Load (or generate) every dataset the config references and check sizes."""
    for src in (cfg.target, cfg.eval, cfg.source):
        if src is not None and src.path is not None and not Path(src.path).is_file():
            raise FileNotFoundError(f"dataset not found: {src.path}")
    target = _load(cfg.target, cfg.max_context_tokens)
    if cfg.eval is not None:
        eval_set = _load(cfg.eval, cfg.max_context_tokens)
    else:
        if cfg.holdout >= len(target):
            raise ConfigError(f"data.holdout: {cfg.holdout} leaves no stream from {len(target)} examples")
        perm = np.random.default_rng(cfg.split_seed).permutation(len(target))
        held = set(perm[: cfg.holdout].tolist())
        eval_set = target.subset(sorted(held), name=f"{target.name}-holdout")
        target = target.subset([i for i in range(len(target)) if i not in held], name=target.name)
    if len(eval_set) == 0:
        raise ConfigError("data.eval: the eval dataset is empty")
    source = _load(cfg.source, cfg.max_context_tokens) if cfg.source is not None else None
    if source is not None and len(source) == 0:
        raise ConfigError("data.source: the source dataset is empty")
    if cfg.scenario != "adaptation" and cfg.few_shot > len(target):
        raise ConfigError(f"init.few_shot: {cfg.few_shot} exceeds the {len(target)} target examples")
    return PreparedData(target, eval_set, source)


# -- runs -------------------------------------------------------------------


def derive_seed(seed: int, purpose: str) -> int:
    """Independent 32-bit seed for one use of a run seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(purpose.encode())]).generate_state(1)[0])


@dataclass
class RunResult:
    name: str
    seed: int
    initial_policy: LinearSpanPolicy
    policy: LinearSpanPolicy
    curve: list[LearningCurvePoint]
    records: list
    stream_ids: tuple[str, ...]

    @property
    def initial_f1(self) -> float:
        return self.curve[0].eval_f1

    @property
    def final_f1(self) -> float:
        return self.curve[-1].eval_f1


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    runs: list[RunResult]
    summary_rows: list[list[str]]
    final_f1_mean: float
    final_f1_std: float
    output_dir: Path | None
    files: dict[str, str]


def _shuffled(ds: Dataset, seed: int) -> Dataset:
    order = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(order.tolist(), name=ds.name)


def run_seed(cfg: ExperimentConfig, data: PreparedData, seed: int) -> RunResult:
    base = LinearSpanPolicy(hash_bits=cfg.hash_bits)
    sup = dataclasses.replace(cfg.sup_init, seed=derive_seed(seed, "init"))
    if cfg.scenario == "adaptation":
        # annotated source only; the target contributes questions and contexts
        init_policy = supervised_init(base, data.source, sup)
        pool = data.target
    else:
        init_set = few_shot_subset(data.target, cfg.few_shot, seed=derive_seed(seed, "few_shot"))
        taken = set(init_set.ids)
        pool = data.target.subset([i for i, ex in enumerate(data.target) if ex.id not in taken])
        init_policy = supervised_init(base, init_set, sup)
    stream = _shuffled(pool, derive_seed(seed, "stream"))
    reward = dataclasses.replace(cfg.reward, seed=derive_seed(seed, "reward"))
    lcfg = dataclasses.replace(cfg.learner, seed=derive_seed(seed, "decode"))
    run = learner.run_online if lcfg.mode == "online" else learner.run_offline
    final, curve, records = run(init_policy, stream, reward, lcfg, data.eval, cfg.policy)
    logger.info(
        "seed %d: F1 %.4f -> %.4f, EM %.4f -> %.4f",
        seed,
        curve[0].eval_f1,
        curve[-1].eval_f1,
        curve[0].eval_em,
        curve[-1].eval_em,
    )
    return RunResult(f"seed{seed}", seed, init_policy, final, curve, records, stream.ids)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _stat_rows(runs: list[RunResult]) -> list[list[str]]:
    rows = [summary_row(r.name, r.curve) for r in runs]
    if len(runs) < 2:
        return rows
    cols = np.array([[float(x) for x in row[1:]] for row in rows])
    stats = [mean_std(cols[:, c]) for c in range(cols.shape[1])]
    rows.append(["mean"] + [format(m, ".17g") for m, _ in stats])
    rows.append(["std"] + [format(s, ".17g") for _, s in stats])
    return rows


def run_prepared(cfg: ExperimentConfig, data: PreparedData, out_dir: str | Path | None = None) -> ExperimentReport:
    """Run every seed on already prepared data; write artifacts if ``out_dir`` is given."""
    runs = [run_seed(cfg, data, s) for s in cfg.seeds]
    rows = _stat_rows(runs)
    f1_mean, f1_std = mean_std([r.final_f1 for r in runs])
    files: dict[str, str] = {}
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for r in runs:
            d = out / r.name
            d.mkdir(exist_ok=True)
            write_curve(r.curve, d / "curve.csv")
            write_log(r.records, d / "feedback.tsv")
            r.initial_policy.save(d / "init.npz")
            r.policy.save(d / "final.npz")
            written += [d / "curve.csv", d / "feedback.tsv", d / "init.npz", d / "final.npz"]
        write_summary(rows, out / "summary.csv")
        written.append(out / "summary.csv")
        files = {p.relative_to(out).as_posix(): _sha256(p) for p in written}
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "package_version": __version__,
            "kernels": "numba" if _kernels.USING_NUMBA else "numpy",
            "config_sha256": cfg.config_hash(),
            "config": dict(cfg.values),
            "scenario": cfg.scenario,
            "seeds": list(cfg.seeds),
            "datasets": {
                "target": cfg.target.describe(),
                "eval": cfg.eval.describe() if cfg.eval is not None else f"holdout({cfg.holdout})",
                "source": cfg.source.describe() if cfg.source is not None else None,
            },
            "final_f1": {"mean": f1_mean, "std": f1_std, "per_seed": {r.name: r.final_f1 for r in runs}},
            "files": files,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return ExperimentReport(cfg, runs, rows, f1_mean, f1_std, out, files)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> ExperimentReport:
    """Validate data, then train and write everything under ``out_dir`` (default: the config's)."""
    data = prepare_data(cfg)
    return run_prepared(cfg, data, cfg.output_dir if out_dir is None else out_dir)
