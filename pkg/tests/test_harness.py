import json

import numpy as np
import pytest

from audit_double import AnnotationAudit
from spanbandit import harness
from spanbandit.dataset import SynthSpec, synth_task, write_mrqa
from spanbandit.harness import ConfigError, validate_config

SMALL = """
scenario = "in_domain"
seeds = [0]
[data.synth]
n_examples = 300
seed = 5
[init]
few_shot = 20
epochs = 2
[learner]
checkpoints = 3
[policy]
hash_bits = 12
"""


def cfg_of(text, **overrides):
    return validate_config(text, env={}, overrides=overrides)


def test_minimal_config_defaults():
    cfg = cfg_of('scenario = "in_domain"\n[data.synth]\n')
    assert cfg.learner.batch_size == 40
    assert cfg.learner.offline_epochs == 3
    assert (cfg.reward.positive, cfg.reward.negative, cfg.reward.noise_ratio) == (1.0, -0.1, 0.0)
    assert cfg.policy.max_span_len == 30
    assert cfg.few_shot == 64
    assert (cfg.sup_init.epochs, cfg.sup_init.batch_size) == (10, 10)
    assert cfg.seeds == (0,)
    assert cfg.eval.synth.seed == cfg.target.synth.seed + 1
    assert cfg.eval.synth.n_examples == 500


def test_minimal_config_with_dataset_path():
    cfg = cfg_of('scenario = "in_domain"\n[data]\ntarget = "t.jsonl"\nholdout = 10\n')
    assert cfg.target.path == "t.jsonl" and cfg.holdout == 10


def test_adaptation_init_defaults():
    text = 'scenario = "adaptation"\n[data.synth]\ndomain = "b"\n[data.source_synth]\ndomain = "a"\n'
    cfg = cfg_of(text)
    assert (cfg.sup_init.epochs, cfg.sup_init.batch_size) == (4, 40)


def test_noise_ratio_parses_exactly():
    assert cfg_of(SMALL, **{"reward.noise_ratio": 0.08}).reward.noise_ratio == 0.08
    assert cfg_of(SMALL + "[reward]\nnoise_ratio = 0.2\n").reward.noise_ratio == 0.2


def test_noise_ratio_range():
    with pytest.raises(ConfigError, match="reward.*noise_ratio"):
        cfg_of(SMALL + "[reward]\nnoise_ratio = 1.5\n")


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="learner.momentum"):
        cfg_of(SMALL.replace("checkpoints = 3", "checkpoints = 3\nmomentum = 0.9"))
    with pytest.raises(ConfigError, match="optimizer"):
        cfg_of(SMALL + "[optimizer]\nx = 1\n")
    with pytest.raises(ConfigError, match="data.synth.vocab"):
        cfg_of(SMALL.replace("seed = 5", "seed = 5\nvocab = 3"))


def test_type_mismatch_names_path():
    with pytest.raises(ConfigError, match=r"learner\.batch_size: expected integer"):
        cfg_of(SMALL.replace("checkpoints = 3", 'checkpoints = 3\nbatch_size = "forty"'))
    with pytest.raises(ConfigError, match=r"seeds: expected list"):
        cfg_of(SMALL.replace("seeds = [0]", "seeds = 3"))
    with pytest.raises(ConfigError, match=r"init\.few_shot"):
        cfg_of(SMALL.replace("few_shot = 20", "few_shot = true"))


def test_bad_toml_and_schema_version():
    with pytest.raises(ConfigError, match="TOML"):
        cfg_of("scenario = ")
    with pytest.raises(ConfigError, match="schema_version"):
        cfg_of("schema_version = 2\n" + SMALL)
    with pytest.raises(ConfigError, match="scenario"):
        cfg_of("[data.synth]\n")


def test_invariants():
    with pytest.raises(ConfigError, match="differ"):
        cfg_of('scenario = "adaptation"\n[data]\ntarget = "x.jsonl"\nsource = "./x.jsonl"\nholdout = 3\n')
    with pytest.raises(ConfigError, match="differ"):
        cfg_of('scenario = "adaptation"\n[data.synth]\n[data.source_synth]\n')
    with pytest.raises(ConfigError, match="source"):
        cfg_of('scenario = "adaptation"\n[data.synth]\n')
    with pytest.raises(ConfigError, match="two seeds"):
        cfg_of(SMALL.replace("in_domain", "sensitivity"))
    with pytest.raises(ConfigError, match="eval"):
        cfg_of('scenario = "in_domain"\n[data]\ntarget = "x.jsonl"\n')
    with pytest.raises(ConfigError, match="disjoint"):
        cfg_of(SMALL + "[data.eval_synth]\nseed = 5\n")


def test_env_override():
    env = {"SPANBANDIT_LEARNER__LR": "5", "SPANBANDIT_DATA__SYNTH__N_KEYS": "30", "SPANBANDIT_DISABLE_NUMBA": "1"}
    cfg = validate_config(SMALL, env=env)
    assert cfg.learner.lr == 5.0
    assert cfg.target.synth.n_keys == 30
    with pytest.raises(ConfigError, match="learner.lr"):
        validate_config(SMALL, env={"SPANBANDIT_LEARNER__LR": "fast"})


def test_every_key_has_env_var():
    names = {harness.env_var(k) for k in harness.KEYS}
    assert len(names) == len(harness.KEYS)
    assert harness.env_var("reward.noise_ratio") == "SPANBANDIT_REWARD__NOISE_RATIO"


def test_config_hash_tracks_content():
    a, b = cfg_of(SMALL), cfg_of(SMALL, **{"learner.lr": 1.0})
    assert a.config_hash() == cfg_of(SMALL).config_hash() != b.config_hash()
    assert cfg_of(SMALL, output_dir="elsewhere").config_hash() == a.config_hash()


def test_missing_files(tmp_path):
    cfg = cfg_of(f'scenario = "in_domain"\n[data]\ntarget = "{tmp_path}/nope.jsonl"\nholdout = 5\n')
    with pytest.raises(FileNotFoundError, match="nope.jsonl"):
        harness.run_experiment(cfg, tmp_path / "out")
    assert not (tmp_path / "out").exists()
    with pytest.raises(FileNotFoundError, match="cfg.toml"):
        harness.load_config(tmp_path / "cfg.toml")


def test_few_shot_too_large(tmp_path):
    with pytest.raises(ConfigError, match="few_shot"):
        harness.run_experiment(cfg_of(SMALL, **{"init.few_shot": 400}), tmp_path)


def test_lr_zero_gives_zero_delta(tmp_path):
    rep = harness.run_experiment(cfg_of(SMALL, **{"learner.lr": 0.0}), tmp_path)
    row = rep.summary_rows[0]
    assert float(row[3]) == 0.0 and float(row[6]) == 0.0


def test_outputs_manifest_and_determinism(tmp_path):
    cfg = cfg_of(SMALL)
    one = harness.run_experiment(cfg, tmp_path / "a")
    harness.run_experiment(cfg, tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config_sha256"] == cfg.config_hash()
    assert set(manifest["files"]) == {
        "seed0/curve.csv",
        "seed0/feedback.tsv",
        "seed0/init.npz",
        "seed0/final.npz",
        "summary.csv",
    }
    for rel, digest in manifest["files"].items():
        assert harness._sha256(tmp_path / "a" / rel) == digest
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    # the stream order is the feedback log order
    log = (tmp_path / "a" / "seed0" / "feedback.tsv").read_text().splitlines()[1:]
    assert [line.split("\t")[1] for line in log] == list(one.runs[0].stream_ids)


def test_stream_shuffled_by_seed_and_disjoint_from_init():
    cfg = cfg_of(SMALL, seeds=[0, 1])
    data = harness.prepare_data(cfg)
    rep = harness.run_prepared(cfg, data)
    a, b = rep.runs
    assert a.stream_ids != b.stream_ids
    assert sorted(a.stream_ids) != sorted(data.target.ids)  # few-shot examples removed
    assert len(a.stream_ids) == len(data.target) - cfg.few_shot


def test_sensitivity_report(tmp_path):
    cfg = cfg_of(SMALL.replace("in_domain", "sensitivity"), seeds=[0, 1, 2, 3, 4])
    rep = harness.run_experiment(cfg, tmp_path)
    names = [r[0] for r in rep.summary_rows]
    assert names == ["seed0", "seed1", "seed2", "seed3", "seed4", "mean", "std"]
    finals = [r.final_f1 for r in rep.runs]
    assert rep.final_f1_mean == pytest.approx(np.mean(finals))
    assert rep.final_f1_std == pytest.approx(np.std(finals, ddof=1))
    assert float(rep.summary_rows[5][2]) == pytest.approx(np.mean(finals))


def test_offline_and_sample_modes_run():
    rep = harness.run_prepared(c := cfg_of(SMALL, **{"learner.mode": "offline"}), harness.prepare_data(c))
    assert len(rep.runs[0].curve) == 4
    rep = harness.run_prepared(c := cfg_of(SMALL, **{"policy.mode": "sample"}), harness.prepare_data(c))
    assert len(rep.runs[0].curve) == 3


def test_file_datasets_with_holdout(tmp_path):
    write_mrqa(synth_task(SynthSpec(n_examples=120, seed=1)), tmp_path / "t.jsonl")
    text = f'scenario = "in_domain"\n[data]\ntarget = "{tmp_path}/t.jsonl"\nholdout = 30\n[init]\nfew_shot = 10\nepochs = 1\n[policy]\nhash_bits = 10\n'
    data = harness.prepare_data(cfg := cfg_of(text))
    assert len(data.eval) == 30 and len(data.target) == 90
    assert not set(data.eval.ids) & set(data.target.ids)
    rep = harness.run_prepared(cfg, data)
    assert len(rep.runs[0].stream_ids) == 80


ADAPT = """
scenario = "adaptation"
[data.source_synth]
n_examples = 200
domain = "a"
[data.synth]
n_examples = 200
seed = 3
domain = "b"
grammar_seed = 1
[data.eval_synth]
n_examples = 50
[policy]
hash_bits = 12
[learner]
checkpoints = 3
"""


def test_adaptation_reads_no_target_annotations(monkeypatch):
    cfg = cfg_of(ADAPT)
    data = harness.prepare_data(cfg)
    audit = AnnotationAudit()
    audited = harness.PreparedData(audit.wrap(data.target), audit.wrap(data.eval), data.source)
    with audit.watching(monkeypatch):
        harness.run_prepared(cfg, audited)
    assert audit.leaks == []
    assert audit.permitted_reads > 0


def test_audit_double_catches_leaks(monkeypatch):
    cfg = cfg_of(ADAPT)
    data = harness.prepare_data(cfg)
    audit = AnnotationAudit()
    # training the initial model on the target would be a leak
    leaky = harness.PreparedData(audit.wrap(data.target), data.eval, audit.wrap(data.target))
    with audit.watching(monkeypatch):
        harness.run_prepared(cfg, leaky)
    assert audit.leaks
