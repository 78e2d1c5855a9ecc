import numpy as np
import pytest

from unitlm import synthgen
from unitlm.synthgen import (Codebook, FrameStream, LatentSpec, SynthError, latent_tables,
                             make_codebook, synth_pair, synth_utterance)

SPEC = LatentSpec(n_speakers=4, n_contents=3, n_backgrounds=2, feature_dim=8, noise_scale=0.2)


@pytest.fixture(scope="module")
def codebook():
    return make_codebook(1, 64, SPEC.feature_dim)


def test_codebook_deterministic():
    a = make_codebook(5, 32, 4)
    b = make_codebook(5, 32, 4)
    assert np.array_equal(a.vectors, b.vectors)


def test_codebook_seed_sensitivity():
    assert not np.array_equal(make_codebook(5, 32, 4).vectors, make_codebook(6, 32, 4).vectors)


def test_tiny_codebook():
    cb = make_codebook(0, 2, 2)
    assert cb.vectors.shape == (2, 2)
    assert not np.array_equal(cb.vectors[0], cb.vectors[1])


def test_codebook_too_small():
    with pytest.raises(SynthError):
        make_codebook(0, 1, 4)


def test_codebook_is_read_only():
    cb = make_codebook(0, 8, 4)
    with pytest.raises(ValueError):
        cb.vectors[0, 0] = 1.0


def test_latent_vectors_unit_norm():
    lat = latent_tables(SPEC)
    for v in (lat.speaker_vecs, lat.background_vecs, lat.phone_vecs):
        assert np.allclose(np.linalg.norm(v, axis=1), 1.0)


def test_utterance_deterministic(codebook):
    spec = LatentSpec(**{**SPEC.__dict__, "noise_scale": 0.0})
    a = synth_utterance(spec, codebook, 3, speaker=1, content=2, length=50)
    b = synth_utterance(spec, codebook, 3, speaker=1, content=2, length=50)
    assert np.array_equal(a.codes, b.codes)
    assert np.array_equal(a.features, b.features)


def test_planted_codebook_recovers_index():
    spec = LatentSpec(n_speakers=3, n_contents=2, n_backgrounds=1, feature_dim=6, noise_scale=0.0,
                      n_phones=4, n_words=4, words_per_content=2)
    lat = latent_tables(spec)
    # every noiseless composite (phone, speaker) vector as its own codebook row
    rows, key = [], []
    for p in range(spec.n_phones):
        for s in range(spec.n_speakers):
            rows.append(spec.content_scale * lat.phone_vecs[p] + spec.speaker_scale * lat.speaker_vecs[s]
                        + spec.background_scale * lat.background_vecs[0])
            key.append((p, s))
    cb = Codebook(np.asarray(rows))
    for speaker in range(3):
        u = synth_utterance(spec, cb, 9, speaker=speaker, content=1, length=40)
        # verify argmin independently: nearest row by explicit distance loop
        for t in range(len(u)):
            d = [float(((u.features[t].astype(np.float64) - r) ** 2).sum()) for r in cb.vectors]
            assert u.codes[t] == int(np.argmin(d))
            assert key[u.codes[t]][1] == speaker


def test_single_frame(codebook):
    u = synth_utterance(SPEC, codebook, 0, 0, 0, length=1)
    u.validate(codebook.n_codes)
    assert len(u) == 1 and len(u.words) == 1


def test_stream_invariants(codebook):
    u = synth_utterance(SPEC, codebook, 4, 2, 1, length=77, background=1)
    u.validate(codebook.n_codes)
    assert np.all(np.diff(u.times[:, 0]) > 0)
    assert np.allclose(u.times[:, 1] - u.times[:, 0], synthgen.FRAME_SEC)
    # words tile the utterance
    assert u.words[0][1] == 0.0
    assert u.words[-1][2] == pytest.approx(77 * synthgen.FRAME_SEC)
    for (_, _, e), (_, s, _) in zip(u.words, u.words[1:]):
        assert e == pytest.approx(s)


@pytest.mark.parametrize("kw", [{"speaker": 4}, {"content": -1}, {"background": 2}, {"length": 0}])
def test_out_of_range(codebook, kw):
    args = dict(speaker=0, content=0, length=10, background=0)
    args.update(kw)
    with pytest.raises(SynthError):
        synth_utterance(SPEC, codebook, 0, **args)


@pytest.mark.parametrize("factor", ["speaker", "background", "content"])
def test_pair_shares_prefix(codebook, factor):
    for seed in range(20):
        nat, pert = synth_pair(SPEC, codebook, seed, factor, length=60)
        at = pert.latents["switch_frame"]
        assert 15 <= at <= 45
        assert np.array_equal(nat.codes[:at], pert.codes[:at])
        assert np.array_equal(nat.features[:at], pert.features[:at])
        assert pert.latents["switch_to"] != pert.latents[factor]


def test_speaker_pair_differs_after_switch_noiseless():
    spec = LatentSpec(n_speakers=3, n_contents=2, n_backgrounds=1, feature_dim=6, noise_scale=0.0,
                      n_phones=4, n_words=4, words_per_content=2)
    lat = latent_tables(spec)
    rows = [spec.content_scale * lat.phone_vecs[p] + spec.speaker_scale * lat.speaker_vecs[s]
            + spec.background_scale * lat.background_vecs[0]
            for p in range(4) for s in range(3)]
    cb = Codebook(np.asarray(rows))
    for seed in range(10):
        nat, pert = synth_pair(spec, cb, seed, "speaker", length=40)
        at = pert.latents["switch_frame"]
        assert np.any(nat.codes[at:] != pert.codes[at:])
        assert np.all(nat.codes[at:] != pert.codes[at:])  # planted rows: every frame moves


def test_pair_requires_two_values(codebook):
    spec = LatentSpec(**{**SPEC.__dict__, "n_speakers": 1})
    with pytest.raises(SynthError):
        synth_pair(spec, codebook, 0, "speaker")


def test_corpus_regeneration_bit_exact(codebook, tmp_path):
    a = synthgen.make_corpus(SPEC, codebook, 5, seed=3)
    b = synthgen.make_corpus(SPEC, codebook, 5, seed=3)
    for x, y in zip(a, b):
        assert np.array_equal(x.codes, y.codes) and np.array_equal(x.features, y.features)
    p = tmp_path / "c.jsonl"
    synthgen.write_corpus(p, a)
    back = synthgen.read_corpus(p)
    for x, y in zip(a, back):
        assert np.array_equal(x.codes, y.codes)
        assert np.array_equal(x.features, y.features)
        assert np.allclose(x.times, y.times)
        assert x.words == [(w, pytest.approx(s), pytest.approx(e)) for w, s, e in y.words]


def test_record_without_features(codebook):
    u = synth_utterance(SPEC, codebook, 0, 0, 0, 10)
    back = FrameStream.from_record(u.to_record(with_features=False))
    assert np.array_equal(back.codes, u.codes)
    assert back.features.shape == (10, 0)


def test_fit_codebook_distinct_and_frozen():
    cb = synthgen.fit_codebook(SPEC, 0, 16, n_utterances=5, length=40)
    assert len(np.unique(cb.vectors, axis=0)) == 16
    assert cb.digest() == synthgen.fit_codebook(SPEC, 0, 16, n_utterances=5, length=40).digest()
