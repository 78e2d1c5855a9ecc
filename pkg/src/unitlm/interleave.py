"""Mixed text/audio training sequences.

Word-aligned windows of an utterance are replaced by the words' text tokens;
everything else stays as codec tokens. Every modality change is marked by a
``[Text]`` or ``[Speech]`` delimiter and the sequence ends with ``</s>``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .augment import ThinSpec, sample_augmentation, thin
from .seeding import derive_seed
from .vocab import UnifiedVocab, speech_id

TEXT, AUDIO, DELIM, SPECIAL = 0, 1, 2, 3
SCHEMA_VERSION = 1
DEFAULT_BUDGET = (0.35, 0.55)


class InterleaveError(ValueError):
    pass


@dataclass
class MixedSequence:
    ids: np.ndarray
    modality: np.ndarray
    loss_mask: np.ndarray     # True where ids[t] is a scored target given ids[:t]
    frame_index: np.ndarray   # source frame for audio positions, -1 elsewhere
    times: np.ndarray         # start time of the material at each position
    coarse_labels: np.ndarray | None = None
    code_labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    features: np.ndarray | None = None   # per-position frame features, zero off audio

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def audio_mask(self) -> np.ndarray:
        return self.modality == AUDIO

    def spans(self) -> list[tuple[int, int, int]]:
        """(modality, start, end) of each delimited span, delimiters included."""
        out = []
        starts = np.flatnonzero(self.modality == DELIM)
        for k, s in enumerate(starts):
            e = starts[k + 1] if k + 1 < len(starts) else len(self)
            while e > s + 1 and self.modality[e - 1] == SPECIAL:
                e -= 1
            out.append((int(self.modality[s + 1]) if s + 1 < e else -1, int(s), int(e)))
        return out

    def to_record(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "ids": self.ids.tolist(),
            "modality": _rle(self.modality),
            "loss_mask": _rle(self.loss_mask.astype(int)),
            "frame_index": self.frame_index.tolist(),
            "times": np.round(self.times, 6).tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "MixedSequence":
        if rec.get("schema_version") != SCHEMA_VERSION:
            raise InterleaveError(f"unsupported MixedSequence schema {rec.get('schema_version')}")
        return cls(
            np.asarray(rec["ids"], dtype=np.int64),
            _unrle(rec["modality"]).astype(np.int8),
            _unrle(rec["loss_mask"]).astype(bool),
            np.asarray(rec["frame_index"], dtype=np.int64),
            np.asarray(rec["times"], dtype=np.float64),
            meta=rec.get("meta", {}),
        )


def _rle(a) -> list[list[int]]:
    out: list[list[int]] = []
    for v in np.asarray(a).tolist():
        if out and out[-1][0] == v:
            out[-1][1] += 1
        else:
            out.append([v, 1])
    return out


def _unrle(runs) -> np.ndarray:
    return np.asarray([v for v, n in runs for _ in range(n)], dtype=np.int64)


class _Builder:
    def __init__(self):
        self.ids, self.mod, self.frame, self.time = [], [], [], []

    def add(self, tok, mod, frame, t):
        self.ids.append(tok)
        self.mod.append(mod)
        self.frame.append(frame)
        self.time.append(t)

    def build(self, meta) -> MixedSequence:
        ids = np.asarray(self.ids, dtype=np.int64)
        mask = np.ones(len(ids), dtype=bool)
        mask[0] = False
        return MixedSequence(ids, np.asarray(self.mod, dtype=np.int8), mask,
                             np.asarray(self.frame, dtype=np.int64),
                             np.asarray(self.time, dtype=np.float64), meta=meta)


def speech_only(stream, vocab: UnifiedVocab) -> MixedSequence:
    b = _Builder()
    t0 = float(stream.times[0, 0]) if len(stream) else 0.0
    b.add(vocab.speech_delim_id, DELIM, -1, t0)
    for i, c in enumerate(stream.codes):
        b.add(speech_id(vocab, int(c)), AUDIO, i, float(stream.times[i, 0]))
    end = float(stream.times[-1, 1]) if len(stream) else 0.0
    b.add(vocab.eos_id, SPECIAL, -1, end)
    return b.build({"text_fraction": 0.0, "windows": [], "budget_ok": True})


def _word_frames(stream):
    """Frame range [a, b) covered by each word."""
    starts = stream.times[:, 0]
    eps = 1e-9
    out = []
    for _, ws, we in stream.words:
        a = int(np.searchsorted(starts, ws - eps))
        b = int(np.searchsorted(starts, we - eps))
        if b <= a:
            raise InterleaveError(f"word ({ws}, {we}) covers no frame")
        out.append((a, b))
    return out


def _choose_windows(durs, total, lo, hi, n_win, rng, attempts=64):
    """Word-index windows [i, j] (inclusive) with covered fraction in [lo, hi].

    Windows are separated by at least one word left as audio. Returns
    (windows, fraction, ok); when no attempt lands inside the budget the
    attempt closest to it is returned with ok=False.
    """
    n = len(durs)
    best, best_gap = None, np.inf
    for _ in range(attempts):
        target = rng.uniform(lo, hi) * total
        k = int(min(n_win, (n + 1) // 2))
        seeds = np.sort(rng.choice(n, size=k, replace=False))
        if k > 1 and np.any(np.diff(seeds) < 2):
            continue
        wins = [[int(s), int(s)] for s in seeds]
        covered = float(sum(durs[s] for s in seeds))
        while covered < target:
            cands = []
            for j, (a, b) in enumerate(wins):
                left_lim = wins[j - 1][1] + 2 if j > 0 else 0
                right_lim = wins[j + 1][0] - 2 if j + 1 < len(wins) else n - 1
                if a - 1 >= left_lim:
                    cands.append((j, 0, a - 1))
                if b + 1 <= right_lim:
                    cands.append((j, 1, b + 1))
            fitting = [c for c in cands if covered + durs[c[2]] <= hi * total + 1e-12]
            if not fitting:
                break
            j, side, w = fitting[rng.integers(len(fitting))]
            wins[j][side] = w
            covered += durs[w]
        frac = covered / total
        gap = max(lo - frac, frac - hi, 0.0)
        if gap == 0.0:
            return wins, frac, True
        if gap < best_gap:
            best, best_gap = (wins, frac), gap
    if best is None:
        return [], 0.0, False
    return best[0], best[1], False


def interleave(stream, vocab: UnifiedVocab, budget=DEFAULT_BUDGET, seed: int = 0,
               n_windows: int | None = None) -> MixedSequence:
    """Replace 1-3 word-aligned windows (text fraction within ``budget``) by text.

    ``n_windows=0`` gives the speech-only sequence. When the budget cannot be
    met, the closest attempt is used and ``meta["budget_ok"]`` is False.
    """
    lo, hi = budget
    if not 0 < lo <= hi < 1:
        raise InterleaveError(f"budget {budget} must satisfy 0 < lo <= hi < 1")
    if n_windows == 0:
        return speech_only(stream, vocab)
    if not stream.words:
        raise InterleaveError("stream has no word alignment")
    rng = np.random.default_rng(seed)
    if n_windows is None:
        n_windows = int(rng.integers(1, 4))
    frames = _word_frames(stream)
    durs = np.asarray([stream.times[b - 1, 1] - stream.times[a, 0] for a, b in frames])
    total = float(stream.times[-1, 1] - stream.times[0, 0])
    wins, frac, ok = _choose_windows(durs, total, lo, hi, n_windows, rng)

    text_at = {}  # first frame of a window -> (word indices, end frame)
    for a, b in wins:
        text_at[frames[a][0]] = (range(a, b + 1), frames[b][1])

    bld = _Builder()
    mode = None
    t = 0
    while t < len(stream):
        if t in text_at:
            word_idx, end = text_at[t]
            bld.add(vocab.text_delim_id, DELIM, -1, float(stream.times[t, 0]))
            for w in word_idx:
                sym, ws, _ = stream.words[w]
                bld.add(vocab.text_id(sym), TEXT, -1, float(ws))
            mode = TEXT
            t = end
            continue
        if mode != AUDIO:
            bld.add(vocab.speech_delim_id, DELIM, -1, float(stream.times[t, 0]))
            mode = AUDIO
        bld.add(speech_id(vocab, int(stream.codes[t])), AUDIO, t, float(stream.times[t, 0]))
        t += 1
    bld.add(vocab.eos_id, SPECIAL, -1, float(stream.times[-1, 1]))
    meta = {"text_fraction": frac, "windows": [list(w) for w in wins], "budget_ok": ok}
    return bld.build(meta)


def audio_runs(seq: MixedSequence) -> list[tuple[int, int]]:
    runs = []
    a = seq.audio_mask
    t = 0
    while t < len(a):
        if a[t]:
            s = t
            while t < len(a) and a[t]:
                t += 1
            runs.append((s, t))
        else:
            t += 1
    return runs


def apply_audio_augment(seq: MixedSequence, spec: ThinSpec, seed: int) -> MixedSequence:
    """Thin and erase each audio run independently; other positions pass through.

    Run ``j`` uses ``sample_augmentation(spec, len, derive_seed(seed, j))``.
    If erasure would empty a run, only its thinning is applied. Applied
    (rate, spans) per run are recorded in ``meta["augment"]``.
    """
    keep = np.ones(len(seq), dtype=bool)
    applied = []
    for j, (s, e) in enumerate(audio_runs(seq)):
        r, spans = sample_augmentation(spec, e - s, derive_seed(seed, j))
        th = thin(seq.ids[s:e], r, spans)
        if len(th.kept_positions) == 0:
            spans = []
            th = thin(seq.ids[s:e], r)
        keep[s:e] = False
        keep[s + th.kept_positions] = True
        applied.append([r, [list(sp) for sp in spans]])
    idx = np.flatnonzero(keep)

    def take(a):
        return None if a is None else a[idx].copy()

    return MixedSequence(
        take(seq.ids), take(seq.modality), take(seq.loss_mask), take(seq.frame_index),
        take(seq.times), take(seq.coarse_labels), take(seq.code_labels),
        meta=dict(seq.meta, augment=applied), features=take(seq.features),
    )


def attach_aux_labels(seq: MixedSequence, vocab: UnifiedVocab, bucket_of: np.ndarray | None,
                      delta: int = 1) -> MixedSequence:
    """Code and coarse-bucket targets ``delta`` positions ahead, at audio positions only.

    A position gets labels when both it and the position ``delta`` later are audio.
    """
    if delta < 1:
        raise InterleaveError("delta must be a positive offset")
    n = len(seq)
    code = np.full(n, -1, dtype=np.int64)
    audio = seq.audio_mask
    if n > delta:
        ok = audio[:-delta] & audio[delta:]
        code[:-delta][ok] = seq.ids[delta:][ok] - vocab.speech_start
    coarse = None
    if bucket_of is not None:
        coarse = np.where(code >= 0, np.asarray(bucket_of)[np.maximum(code, 0)], -1)
    return replace(seq, code_labels=code, coarse_labels=coarse)


def pad_to(seq: MixedSequence, length: int, vocab: UnifiedVocab) -> MixedSequence:
    extra = length - len(seq)
    if extra < 0:
        raise InterleaveError("sequence longer than pad target")

    def ext(a, v):
        return None if a is None else np.concatenate([a, np.full(extra, v, dtype=a.dtype)])

    feats = None
    if seq.features is not None:
        feats = np.concatenate([seq.features, np.zeros((extra, seq.features.shape[1]),
                                                       dtype=seq.features.dtype)])
    return MixedSequence(
        ext(seq.ids, vocab.pad_id), ext(seq.modality, SPECIAL), ext(seq.loss_mask, False),
        ext(seq.frame_index, -1), ext(seq.times, seq.times[-1] if len(seq) else 0.0),
        ext(seq.coarse_labels, -1), ext(seq.code_labels, -1), dict(seq.meta), feats,
    )


def attach_features(seq: MixedSequence, stream) -> MixedSequence:
    """Copy each audio position's source-frame feature into ``seq.features``."""
    feats = np.zeros((len(seq), stream.features.shape[1]), dtype=np.float32)
    a = seq.frame_index >= 0
    feats[a] = stream.features[seq.frame_index[a]]
    return replace(seq, features=feats)
