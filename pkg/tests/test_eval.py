import logging
from dataclasses import replace

import numpy as np
import pytest
import torch

from unitlm import synthgen
from unitlm.eval import (EvalError, ModelScorer, PreferencePair, ProbeTask, bootstrap_ci,
                         check_ablation_configs, config_diff, linear_probe, make_preference_pairs,
                         model_digest, preference_accuracy, probe_over_stages, run_ablation,
                         split_80_20)
from unitlm.model import LossWeights, SpeechLM
from unitlm.pipeline import TrainConfig, init_state
from unitlm.scoring import ScoreError

from conftest import TINY_LATENT


@pytest.fixture(scope="module")
def pairs(tiny_world):
    raw = synthgen.make_pairs(TINY_LATENT, tiny_world.codebook, 60, 123, "speaker", length=40)
    return make_preference_pairs(raw, tiny_world.vocab, "speaker")


def test_constant_scorer_exactly_half(pairs):
    r = preference_accuracy(lambda s: 3.0, pairs, n_boot=200)
    assert r.accuracy == 0.5 and np.all(r.outcomes == 0.5)


def test_oracle_scorer_is_one(pairs):
    natural = {id(p.natural) for p in pairs}
    r = preference_accuracy(lambda s: 0.0 if id(s) in natural else -1.0, pairs, n_boot=200)
    assert r.accuracy == 1.0
    assert r.ci == (1.0, 1.0)


def test_random_scorer_near_half(tiny_world):
    raw = synthgen.make_pairs(TINY_LATENT, tiny_world.codebook, 1000, 5, "background", length=20)
    pr = make_preference_pairs(raw, tiny_world.vocab, "background")
    rng = np.random.default_rng(0)
    r = preference_accuracy(lambda s: float(rng.random()), pr, n_boot=500)
    # |a - 0.5| > 0.05 has binomial probability about 1.6e-3 at n=1000
    assert 0.45 <= r.accuracy <= 0.55


def test_antisymmetry(pairs, tiny_world):
    torch.manual_seed(0)
    sc = ModelScorer(init_state(tiny_world, TrainConfig(init="random")).model, tiny_world.vocab.pad_id)
    a = preference_accuracy(sc, pairs, n_boot=100).accuracy
    swapped = [PreferencePair(p.perturbed, p.natural, p.factor) for p in pairs]
    b = preference_accuracy(sc, swapped, n_boot=100).accuracy
    assert a + b == pytest.approx(1.0, abs=1e-12)


def test_evaluation_is_pure(pairs, tiny_world):
    st = init_state(tiny_world, TrainConfig())
    before = st.param_digest()
    preference_accuracy(ModelScorer(st.model, tiny_world.vocab.pad_id), pairs, n_boot=100)
    assert st.param_digest() == before


def test_bootstrap_deterministic():
    out = np.random.default_rng(1).integers(0, 2, 300).astype(float)
    assert bootstrap_ci(out, seed=4) == bootstrap_ci(out, seed=4)
    lo, hi = bootstrap_ci(out, seed=4)
    assert lo < out.mean() < hi


def test_unscorable_pairs_excluded_and_logged(pairs, caplog):
    bad = {id(pairs[0].natural), id(pairs[3].perturbed)}

    def scorer(s):
        if id(s) in bad:
            raise ScoreError("nope")
        return 0.0

    with caplog.at_level(logging.WARNING):
        r = preference_accuracy(scorer, pairs, n_boot=50)
    assert r.n_excluded == 2 and r.n_pairs == len(pairs) - 2
    assert "excluded 2" in caplog.text


def test_empty_pairs_rejected():
    with pytest.raises(EvalError):
        preference_accuracy(lambda s: 0.0, [])


def test_ablation_config_guard():
    plus = TrainConfig(weights=LossWeights(coarse=0.5, next=0.5))
    minus = replace(plus, weights=replace(plus.weights, coarse=0.0, next=0.0))
    check_ablation_configs({"plus": plus, "minus": minus})
    assert config_diff(plus.to_dict(), minus.to_dict()) == {("weights", "coarse"), ("weights", "next")}
    drift = replace(minus, steps=plus.steps + 1)
    with pytest.raises(EvalError, match="steps"):
        check_ablation_configs({"plus": plus, "minus": drift})
    with pytest.raises(EvalError, match="ssl"):
        check_ablation_configs({"plus": plus, "m": replace(minus, weights=replace(minus.weights, ssl=0.3))})


def test_identical_configs_give_identical_accuracies(tiny_world, pairs):
    tc = TrainConfig(steps=5, batch_size=4, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=64)
    rep = run_ablation({"a": tc, "b": tc}, tiny_world, {"speaker": pairs[:20]}, seeds=[0])
    assert rep.accuracy["a"] == rep.accuracy["b"]
    assert rep.param_digests["a"] == rep.param_digests["b"]
    assert rep.paired_diff("a", "b", "speaker") == [0.0]


# --- probes ----------------------------------------------------------------

def test_probe_one_hot_features_perfect():
    labels = np.repeat(np.arange(4), 25)
    task = ProbeTask(np.eye(4)[labels], labels)
    assert linear_probe(task, split_seed=0) == 1.0


def test_probe_pure_noise_near_chance():
    accs = []
    for s in range(20):
        rng = np.random.default_rng(s)
        labels = np.repeat([0, 1], 100)
        accs.append(linear_probe(ProbeTask(rng.standard_normal((200, 8)), labels), split_seed=s))
    # mean of 20 held-out accuracies over 40 points each: sd about 0.079/sqrt(20)
    assert abs(np.mean(accs) - 0.5) < 0.06


def test_probe_deterministic_and_split_stratified():
    labels = np.repeat(np.arange(3), 10)
    tr, te = split_80_20(labels, 3)
    assert len(np.intersect1d(tr, te)) == 0 and len(tr) + len(te) == 30
    assert np.bincount(labels[te]).tolist() == [2, 2, 2]
    x = np.random.default_rng(0).standard_normal((30, 5)) + labels[:, None]
    t = ProbeTask(x, labels)
    assert linear_probe(t, 1) == linear_probe(t, 1)


def test_probe_needs_two_classes():
    with pytest.raises(EvalError):
        ProbeTask(np.zeros((5, 2)), np.zeros(5))


def test_missing_stage_named(tiny_world):
    m = init_state(tiny_world, TrainConfig(d_model=16, n_heads=2)).model
    with pytest.raises(EvalError, match="40%"):
        probe_over_stages({0.1: m, 1.0: m}, [], [], tiny_world.vocab.pad_id)


def test_probe_over_stages_runs_and_is_pure(tiny_world):
    tc = TrainConfig(d_model=16, n_heads=2, n_layers=1, d_ff=32)
    m = init_state(tiny_world, tc).model
    d = model_digest(m)
    from unitlm.interleave import speech_only
    streams = tiny_world.corpus[:40]
    seqs = [speech_only(s, tiny_world.vocab) for s in streams]
    labels = [s.latents["content"] for s in streams]
    res = probe_over_stages({0.1: m, 0.4: m, 1.0: m}, seqs, labels, tiny_world.vocab.pad_id)
    assert set(res) == {0.1, 0.4, 1.0} and len(set(res.values())) == 1
    assert model_digest(m) == d
