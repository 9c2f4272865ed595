"""Small hand-checked cases across modules."""
import json
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_example
from spanbandit import harness
from spanbandit.cli import main
from spanbandit.dataset import Dataset, Example, Span, SynthSpec, load_mrqa, normalize_tokens, synth_task
from spanbandit.feedback import RewardConfig, flip, simulate_reward
from spanbandit.metrics import evaluate
from spanbandit.policy import LinearSpanPolicy, PolicyConfig, SpanPolicy, SupInitConfig, supervised_init


class FixedPolicy(SpanPolicy):
    """Scores fixed per position, ignoring the example."""

    def __init__(self, start_probs, end_probs):
        self.params = np.zeros(1)
        self.start = np.log(np.asarray(start_probs, dtype=float))
        self.end = np.log(np.asarray(end_probs, dtype=float))
        self.seen = []

    def score(self, ex):
        return self.start.copy(), self.end.copy()

    def backprop(self, ex, d_start, d_end, out, scale=1.0):
        self.seen.append((d_start.copy(), d_end.copy()))

    def copy(self):
        return FixedPolicy(np.exp(self.start), np.exp(self.end))


EX3 = Example("e", ("q",), ("a", "b", "c"), Span(0, 0))


def test_decode_worked_example():
    pol = FixedPolicy([0.1, 0.7, 0.2], [0.2, 0.1, 0.7])
    pred = pol.decode(EX3, PolicyConfig(max_span_len=3))
    assert pred.span == Span(1, 2)
    assert pred.propensity == pytest.approx(0.49)


def test_max_span_len_one_gives_single_token(rng):
    pol = LinearSpanPolicy(hash_bits=8)
    pol.params = rng.normal(size=pol.params.shape)
    for k in range(30):
        pred = pol.decode(random_example(rng, ex_id=str(k)), PolicyConfig(max_span_len=1))
        assert pred.span.start == pred.span.end


def test_single_token_context():
    ex = Example("s", ("w",), ("w",), Span(0, 0))
    pol = LinearSpanPolicy(hash_bits=8)
    pol.params = np.random.default_rng(0).normal(size=pol.params.shape)
    start, end = pol.score(ex)
    assert start.shape == end.shape == (1,)
    assert pol.decode(ex).propensity == pytest.approx(1.0)
    # the only span already has probability one, so the gradient vanishes
    assert np.linalg.norm(pol.log_prob_grad(ex, Span(0, 0))) < 1e-6


def test_unique_feature_moves_one_logit():
    ex = Example("u", ("q",), ("x", "y", "z", "uniq", "x"), Span(0, 0))
    pol = LinearSpanPolicy(hash_bits=16)
    f = pol.featurize(ex)
    counts = {}
    for r, c in zip(f.rows, f.indices):
        counts.setdefault(int(c), set()).add(int(r))
    col = next(c for c, rows in counts.items() if rows == {3})
    before = pol.score(ex)
    pol.params[col] += 2.0
    after = pol.score(ex)
    for b, a in zip(before, after):
        changed = np.flatnonzero(~np.isclose(a, b))
        assert set(changed) <= {3}
    assert not np.allclose(before[0], after[0]) or not np.allclose(before[1], after[1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 12), st.sampled_from(["argmax", "sample"]))
def test_softmax_gradients_sum_to_zero(seed, n, max_len, mode):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(n))
    q = rng.dirichlet(np.ones(n))
    pol = FixedPolicy(p, q)
    ex = Example("g", ("q",), tuple(f"t{k}" for k in range(n)), Span(0, 0))
    i = int(rng.integers(0, n))
    j = int(rng.integers(i, min(n, i + max_len)))
    pol.accumulate_log_prob_grad(ex, Span(i, j), np.zeros(1), cfg=PolicyConfig(max_span_len=max_len, mode=mode))
    d_start, d_end = pol.seen[-1]
    assert abs(d_start.sum()) < 1e-12 and abs(d_end.sum()) < 1e-12


def test_zero_epochs_leaves_params():
    train = synth_task(SynthSpec(n_examples=20, seed=1))
    base = LinearSpanPolicy(hash_bits=10)
    base.params[:] = 0.25
    fitted = supervised_init(base, train, SupInitConfig(epochs=0))
    assert np.array_equal(fitted.params, base.params)


def test_fixed_order_small_lr_loss_never_rises():
    train = synth_task(SynthSpec(n_examples=40, seed=4))
    losses = []
    supervised_init(
        LinearSpanPolicy(hash_bits=12), train, SupInitConfig(epochs=5, lr=0.05, shuffle=False), loss_log=losses
    )
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_supervised_fits_256_examples():
    train = synth_task(SynthSpec(n_examples=256, seed=7))
    fitted = supervised_init(LinearSpanPolicy(), train, SupInitConfig(epochs=10))
    _, em = evaluate(fitted, train)
    assert em >= 0.95


def test_flip_twice_is_identity():
    cfg = RewardConfig()
    for r in (cfg.positive, cfg.negative):
        assert flip(flip(r, cfg), cfg) == r


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_f1_reward_range(seed):
    rng = np.random.default_rng(seed)
    ex = random_example(rng)
    n = len(ex.context)
    i = int(rng.integers(0, n))
    r = simulate_reward(ex, Span(i, int(rng.integers(i, n))), RewardConfig(mode="f1"), rng)
    assert r == -0.1 or 0 < r <= 1


def test_rewards_repeat_under_same_rng_state():
    ex = Example("r", ("q",), ("a", "b"), Span(0, 1))
    cfg = RewardConfig(noise_ratio=0.3)
    draw = lambda: [simulate_reward(ex, Span(0, k % 2), cfg, np.random.default_rng(5)) for k in range(10)]  # noqa: E731
    assert draw() == draw()


def test_normalize_named_entity():
    assert normalize_tokens(["The", "Eiffel", "Tower!"]) == ["eiffel", "tower"]


def test_empty_mrqa_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    ds = load_mrqa(tmp_path / "e.jsonl")
    assert isinstance(ds, Dataset) and len(ds) == 0


def test_load_mrqa_five_token_record(tmp_path):
    context = "one two three four five"
    rec = {"id": "r", "question": "q ?", "context": context, "answers": [{"token_start": 2, "token_end": 3}]}
    (tmp_path / "f.jsonl").write_text(json.dumps(rec) + "\n")
    ex = load_mrqa(tmp_path / "f.jsonl")[0]
    assert ex.gold_span == Span(2, 3)


def test_synth_two_token_context():
    ds = synth_task(SynthSpec(n_examples=50, context_length=2, n_decoys=0, answer_len=(1, 1)))
    for ex in ds:
        assert len(ex.context) >= 2 and ex.gold_span.fits(len(ex.context))


def test_synth_seed_changes_examples():
    a = synth_task(SynthSpec(n_examples=30, seed=1))
    b = synth_task(SynthSpec(n_examples=30, seed=2))
    assert [ex.context for ex in a] != [ex.context for ex in b]


SMALL = """
scenario = "in_domain"
[data.synth]
n_examples = 120
seed = 5
[init]
few_shot = 10
epochs = 1
[policy]
hash_bits = 10
"""


def test_dataset_override_replaces_synth_target():
    cfg = harness.validate_config(SMALL, env={}, overrides={"data.target": "t.jsonl", "data.holdout": 5})
    assert cfg.target.path == "t.jsonl" and cfg.target.synth is None
    text = 'scenario = "in_domain"\n[data]\ntarget = "t.jsonl"\n[data.eval_synth]\nseed = 4\n'
    cfg = harness.validate_config(text, env={}, overrides={"data.synth.seed": 3})
    assert cfg.target.path is None and cfg.target.synth.seed == 3


def test_cli_synth_spec_file(tmp_path, capsys):
    conf = tmp_path / "c.toml"
    conf.write_text(SMALL)
    spec = tmp_path / "task.toml"
    spec.write_text("n_examples = 80\nseed = 9\n")
    out = tmp_path / "out"
    assert main(["run", "--config", str(conf), "--synth", str(spec), "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["data.synth.n_examples"] == 80
    spec.write_text("n_examples = ")
    assert main(["run", "--config", str(conf), "--synth", str(spec)]) == 2
