"""Synthetic speech-like corpora with planted content, speaker and background factors.

An utterance is a sequence of 25 ms frames. Each frame's feature vector is the
sum of a phone vector (from the word being spoken), a per-utterance speaker
vector, a per-utterance background vector and Gaussian noise. The frozen
"SSL encoder" is the identity on this feature; the frozen "codec" maps each
frame to the index of the nearest codebook row, discarding detail.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .kmeans import kmeans, sq_dists
from .seeding import derive_seed

FRAME_SEC = 0.025
FACTORS = ("speaker", "background", "content")

_CONSONANTS = "ptkbdgmnsl"
_VOWELS = "aeiou"


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class LatentSpec:
    n_speakers: int = 8
    n_contents: int = 8
    n_backgrounds: int = 4
    feature_dim: int = 16
    noise_scale: float = 0.3
    seed: int = 0
    n_words: int = 24
    words_per_content: int = 6
    n_phones: int = 12
    phones_per_word: int = 3
    min_phone_frames: int = 2
    max_phone_frames: int = 4
    content_scale: float = 1.0
    speaker_scale: float = 0.8
    background_scale: float = 0.5

    def __post_init__(self):
        for name in ("n_speakers", "n_contents", "n_backgrounds", "feature_dim", "n_words",
                     "words_per_content", "n_phones", "phones_per_word", "min_phone_frames"):
            if getattr(self, name) < 1:
                raise SynthError(f"{name} must be >= 1")
        if self.noise_scale < 0:
            raise SynthError("noise_scale must be nonnegative")
        if self.max_phone_frames < self.min_phone_frames:
            raise SynthError("max_phone_frames < min_phone_frames")

    def n_values(self, factor: str) -> int:
        return {"speaker": self.n_speakers, "background": self.n_backgrounds,
                "content": self.n_contents}[factor]


@dataclass(frozen=True)
class Latents:
    speaker_vecs: np.ndarray
    background_vecs: np.ndarray
    phone_vecs: np.ndarray
    lexicon: np.ndarray        # n_words x phones_per_word phone ids
    content_words: np.ndarray  # n_contents x words_per_content word ids
    word_symbols: tuple[str, ...]


def _unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def word_symbol(i: int) -> str:
    def syl(j):
        return _CONSONANTS[(j // 5) % 10] + _VOWELS[j % 5]

    return syl(i % 50) + syl(i // 50)


@lru_cache(maxsize=32)
def latent_tables(spec: LatentSpec) -> Latents:
    """Factor vectors and lexicon for ``spec``; a pure function of ``spec.seed``."""
    rng = np.random.default_rng(derive_seed(spec.seed, 0xC0FFEE))
    d = spec.feature_dim
    speakers = _unit_rows(rng, spec.n_speakers, d)
    backgrounds = _unit_rows(rng, spec.n_backgrounds, d)
    phones = _unit_rows(rng, spec.n_phones, d)
    lexicon = rng.integers(0, spec.n_phones, size=(spec.n_words, spec.phones_per_word))
    content_words = np.stack(
        [rng.permutation(spec.n_words)[: spec.words_per_content] if spec.words_per_content <= spec.n_words
         else rng.integers(0, spec.n_words, spec.words_per_content)
         for _ in range(spec.n_contents)]
    )
    for arr in (speakers, backgrounds, phones, lexicon, content_words):
        arr.flags.writeable = False
    symbols = tuple(word_symbol(i) for i in range(spec.n_words))
    return Latents(speakers, backgrounds, phones, lexicon, content_words, symbols)


@dataclass(frozen=True)
class Codebook:
    vectors: np.ndarray

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64, copy=True)
        v.flags.writeable = False
        object.__setattr__(self, "vectors", v)

    @property
    def n_codes(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def quantize(self, features: np.ndarray) -> np.ndarray:
        return sq_dists(np.asarray(features, dtype=np.float64), self.vectors).argmin(axis=1)

    def digest(self) -> str:
        return hashlib.sha256(self.vectors.tobytes()).hexdigest()

    def save(self, path: str | Path) -> None:
        np.save(path, self.vectors)

    @classmethod
    def load(cls, path: str | Path) -> "Codebook":
        return cls(np.load(path))


def _check_distinct(v: np.ndarray) -> None:
    if len(np.unique(v, axis=0)) != len(v):
        raise SynthError("codebook rows are not pairwise distinct")


def make_codebook(seed: int, n_codes: int, d_ssl: int) -> Codebook:
    if n_codes < 2:
        raise SynthError(f"n_codes must be >= 2, got {n_codes}")
    rng = np.random.default_rng(derive_seed(seed, 0xC0DE))
    v = rng.standard_normal((n_codes, d_ssl)) / np.sqrt(d_ssl)
    _check_distinct(v)
    return Codebook(v)


def fit_codebook(spec: LatentSpec, seed: int, n_codes: int, n_utterances: int = 80,
                 length: int = 120, max_iters: int = 50) -> Codebook:
    """Codec stand-in trained once by k-means on generated features, then frozen."""
    if n_codes < 2:
        raise SynthError(f"n_codes must be >= 2, got {n_codes}")
    rng = np.random.default_rng(derive_seed(seed, 0xF17))
    feats = []
    for i in range(n_utterances):
        s = derive_seed(seed, 0xF17, i)
        feats.append(_render(spec, s, int(rng.integers(spec.n_speakers)),
                             int(rng.integers(spec.n_contents)),
                             int(rng.integers(spec.n_backgrounds)), length)[0])
    x = np.concatenate(feats).astype(np.float64)
    if len(x) < n_codes:
        raise SynthError("not enough frames to fit the requested codebook size")
    res = kmeans(x, n_codes, seed=derive_seed(seed, 0xF18), max_iters=max_iters, tol=1e-6)
    _check_distinct(res.centers)
    return Codebook(res.centers)


@dataclass
class FrameStream:
    codes: np.ndarray
    features: np.ndarray
    times: np.ndarray                  # (T, 2) start/end seconds
    words: list = field(default_factory=list)   # [(symbol, start, end)]
    latents: dict = field(default_factory=dict)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.codes)

    def validate(self, n_codes: int | None = None) -> None:
        t = len(self.codes)
        if len(self.features) != t or len(self.times) != t:
            raise SynthError("codes/features/times length mismatch")
        if t and (np.any(self.times[:, 1] <= self.times[:, 0])
                  or np.any(self.times[1:, 0] < self.times[:-1, 1])):
            raise SynthError("frame times overlap or are not increasing")
        if n_codes is not None and t and (self.codes.min() < 0 or self.codes.max() >= n_codes):
            raise SynthError("code outside codebook range")

    def to_record(self, with_features: bool = True) -> dict:
        rec = {
            "codes": self.codes.astype(int).tolist(),
            "times": np.round(self.times, 6).tolist(),
            "words": [[w, round(a, 6), round(b, 6)] for w, a, b in self.words],
            "latents": self.latents,
            "seed": int(self.seed),
        }
        if with_features:
            f = np.ascontiguousarray(self.features, dtype="<f4")
            rec["features"] = base64.b64encode(f.tobytes()).decode("ascii")
            rec["feature_shape"] = list(f.shape)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "FrameStream":
        codes = np.asarray(rec["codes"], dtype=np.int64)
        if "features" in rec:
            feats = np.frombuffer(base64.b64decode(rec["features"]), dtype="<f4")
            feats = feats.reshape(rec["feature_shape"]).astype(np.float32)
        else:
            feats = np.zeros((len(codes), 0), dtype=np.float32)
        times = np.asarray(rec["times"], dtype=np.float64).reshape(len(codes), 2)
        words = [(w, float(a), float(b)) for w, a, b in rec.get("words", [])]
        return cls(codes, feats, times, words, rec.get("latents", {}), rec.get("seed", 0))


def _schedule(spec: LatentSpec, rng: np.random.Generator, length: int):
    """Per-frame slot index (which phone of the word cycle is being spoken)."""
    slots = []
    j = 0
    while len(slots) < length:
        dur = int(rng.integers(spec.min_phone_frames, spec.max_phone_frames + 1))
        slots.extend([j] * dur)
        j += 1
    return np.asarray(slots[:length])


def _render(spec, seed, speaker, content, background, length, switch=None):
    """Features and words for one utterance.

    ``switch`` is ``(frame, factor, new_value)``: from that frame on the named
    factor takes ``new_value``. Randomness (durations, word offset, noise) is
    drawn from ``seed`` in a fixed order, so a switched and unswitched render
    with the same seed share every draw.
    """
    lat = latent_tables(spec)
    rng = np.random.default_rng(seed)
    slots = _schedule(spec, rng, length)
    offset = int(rng.integers(spec.words_per_content))
    noise = rng.standard_normal((length, spec.feature_dim))

    spk = np.full(length, speaker)
    bg = np.full(length, background)
    cnt = np.full(length, content)
    if switch is not None:
        at, factor, value = switch
        {"speaker": spk, "background": bg, "content": cnt}[factor][at:] = value

    word_pos = slots // spec.phones_per_word + offset
    phone_in_word = slots % spec.phones_per_word
    word_ids = lat.content_words[cnt, word_pos % spec.words_per_content]
    phone_ids = lat.lexicon[word_ids, phone_in_word]
    feats = (spec.content_scale * lat.phone_vecs[phone_ids]
             + spec.speaker_scale * lat.speaker_vecs[spk]
             + spec.background_scale * lat.background_vecs[bg]
             + spec.noise_scale * noise)
    feats = feats.astype(np.float32)

    # a word is a maximal run of frames sharing (word_pos, word id)
    words = []
    start = 0
    for t in range(1, length + 1):
        if t == length or word_pos[t] != word_pos[start] or word_ids[t] != word_ids[start]:
            words.append((lat.word_symbols[word_ids[start]], start * FRAME_SEC, t * FRAME_SEC))
            start = t
    return feats, words


def _frame_times(length: int) -> np.ndarray:
    # both edges from integer frame indices so end[t] == start[t+1] exactly
    edges = np.arange(length + 1) * FRAME_SEC
    return np.stack([edges[:-1], edges[1:]], axis=1)


def _check_index(spec, factor, value):
    n = spec.n_values(factor)
    if not 0 <= value < n:
        raise SynthError(f"{factor} index {value} outside [0, {n})")


def synth_utterance(spec: LatentSpec, codebook: Codebook, seed: int, speaker: int, content: int,
                    length: int, background: int = 0) -> FrameStream:
    for factor, value in (("speaker", speaker), ("content", content), ("background", background)):
        _check_index(spec, factor, value)
    if length < 1:
        raise SynthError("length must be >= 1")
    if codebook.dim != spec.feature_dim:
        raise SynthError("codebook dimension does not match feature_dim")
    feats, words = _render(spec, seed, speaker, content, background, length)
    latents = {"speaker": speaker, "content": content, "background": background}
    return FrameStream(codebook.quantize(feats), feats, _frame_times(length), words, latents, seed)


def synth_pair(spec: LatentSpec, codebook: Codebook, seed: int, factor: str, length: int = 120,
               speaker: int | None = None, content: int | None = None,
               background: int | None = None) -> tuple[FrameStream, FrameStream]:
    """A natural utterance and a copy where ``factor`` changes mid-utterance.

    Unspecified factor values are drawn from ``seed``. The switch frame is
    uniform over [0.25 T, 0.75 T]; the replacement value differs from the
    original. Both renders share all other randomness.
    """
    if factor not in FACTORS:
        raise SynthError(f"unknown factor {factor!r}")
    if spec.n_values(factor) < 2:
        raise SynthError(f"factor {factor!r} needs at least 2 values, spec has {spec.n_values(factor)}")
    if length < 2:
        raise SynthError("pair length must be >= 2")
    rng = np.random.default_rng(derive_seed(seed, 0xBA1))
    vals = {
        "speaker": int(rng.integers(spec.n_speakers)) if speaker is None else speaker,
        "content": int(rng.integers(spec.n_contents)) if content is None else content,
        "background": int(rng.integers(spec.n_backgrounds)) if background is None else background,
    }
    for f, v in vals.items():
        _check_index(spec, f, v)
    lo, hi = int(np.ceil(0.25 * length)), int(np.floor(0.75 * length))
    at = int(rng.integers(max(lo, 1), max(hi, 1) + 1))
    other = int(rng.integers(spec.n_values(factor) - 1))
    other += other >= vals[factor]

    utt_seed = derive_seed(seed, 0xBA2)
    nat = synth_utterance(spec, codebook, utt_seed, vals["speaker"], vals["content"], length,
                          vals["background"])
    feats, words = _render(spec, utt_seed, vals["speaker"], vals["content"], vals["background"],
                           length, switch=(at, factor, other))
    latents = dict(vals, switch_factor=factor, switch_frame=at, switch_to=other)
    pert = FrameStream(codebook.quantize(feats), feats, _frame_times(length), words, latents, utt_seed)
    nat.latents = dict(vals, switch_factor=factor, switch_frame=at, switch_to=None)
    return nat, pert


def make_corpus(spec: LatentSpec, codebook: Codebook, n_utterances: int, seed: int,
                min_len: int = 80, max_len: int = 120) -> list[FrameStream]:
    out = []
    for i in range(n_utterances):
        s = derive_seed(seed, i)
        r = np.random.default_rng(derive_seed(s, 0xA11))
        out.append(synth_utterance(
            spec, codebook, s,
            speaker=int(r.integers(spec.n_speakers)),
            content=int(r.integers(spec.n_contents)),
            length=int(r.integers(min_len, max_len + 1)),
            background=int(r.integers(spec.n_backgrounds)),
        ))
    return out


def make_pairs(spec: LatentSpec, codebook: Codebook, n_pairs: int, seed: int, factor: str,
               length: int = 100) -> list[tuple[FrameStream, FrameStream]]:
    return [synth_pair(spec, codebook, derive_seed(seed, 0x9A1, i), factor, length)
            for i in range(n_pairs)]


def write_corpus(path: str | Path, streams, with_features: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in streams:
            fh.write(json.dumps(s.to_record(with_features), separators=(",", ":")) + "\n")


def read_corpus(path: str | Path) -> list[FrameStream]:
    with open(path, encoding="utf-8") as fh:
        return [FrameStream.from_record(json.loads(line)) for line in fh if line.strip()]


def spec_to_dict(spec: LatentSpec) -> dict:
    return asdict(spec)
