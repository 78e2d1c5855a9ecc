"""Length-normalised likelihood scoring and speech-only constrained generation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .interleave import SPECIAL, MixedSequence
from .model import SpeechLM
from .vocab import UnifiedVocab


class ScoreError(ValueError):
    pass


@dataclass
class ScoreResult:
    nll_mean: float
    score: float
    token_count: int
    per_token: list[float] | None = None

    def to_dict(self) -> dict:
        return {"nll_mean": self.nll_mean, "score": self.score, "token_count": self.token_count}


def _trim(seq: MixedSequence) -> int:
    """Length after dropping trailing positions that are unscored padding."""
    n = len(seq)
    while n > 1 and not seq.loss_mask[n - 1] and seq.modality[n - 1] == SPECIAL:
        n -= 1
    return n


def _result(nll: np.ndarray, mask: np.ndarray, keep_per_token: bool) -> ScoreResult:
    count = int(mask.sum())
    if count == 0:
        raise ScoreError("no scored positions (all-masked sequence)")
    mean = float(nll[mask].sum() / count)
    per = nll.tolist() if keep_per_token else None
    return ScoreResult(mean, -mean, count, per)


@torch.no_grad()
def score(model: SpeechLM, seq: MixedSequence, per_token: bool = False) -> ScoreResult:
    """Mean negative log-likelihood (natural log) of the masked targets; score is its negation.

    Target ``t`` is ``ids[t]`` predicted from ``ids[:t]``. Trailing unscored
    pads are not run through the model: they cannot influence earlier
    positions, and skipping them keeps the result bit-identical to the unpadded
    sequence.
    """
    n = _trim(seq)
    mask = np.asarray(seq.loss_mask[1:n], dtype=bool)
    if not mask.any():
        raise ScoreError("no scored positions (all-masked sequence)")
    model.eval()
    ids = torch.from_numpy(np.asarray(seq.ids[:n], dtype=np.int64))
    logits, _ = model(ids)
    logp = torch.log_softmax(logits[0, :-1].double(), dim=-1)
    nll = -logp.gather(1, ids[1:, None]).squeeze(1).numpy()
    return _result(nll, mask, per_token)


@torch.no_grad()
def score_many(model: SpeechLM, seqs: list[MixedSequence], pad_id: int,
               batch_size: int = 64) -> list[ScoreResult]:
    """Batched :func:`score`. Values match the single-sequence path to float rounding."""
    model.eval()
    out: list[ScoreResult] = []
    for i in range(0, len(seqs), batch_size):
        chunk = seqs[i : i + batch_size]
        lens = [_trim(s) for s in chunk]
        T = max(lens)
        ids = torch.full((len(chunk), T), pad_id, dtype=torch.long)
        for j, (s, n) in enumerate(zip(chunk, lens)):
            ids[j, :n] = torch.from_numpy(np.asarray(s.ids[:n], dtype=np.int64))
        logits, _ = model(ids)
        logp = torch.log_softmax(logits[:, :-1].double(), dim=-1)
        nll = -logp.gather(2, ids[:, 1:, None]).squeeze(2).numpy()
        for j, (s, n) in enumerate(zip(chunk, lens)):
            out.append(_result(nll[j, : n - 1], np.asarray(s.loss_mask[1:n], dtype=bool), False))
    return out


def speech_only_mask(vocab: UnifiedVocab) -> torch.Tensor:
    allowed = torch.zeros(vocab.total_size, dtype=torch.bool)
    allowed[vocab.speech_start : vocab.speech_end] = True
    allowed[vocab.eos_id] = True
    return allowed


def masked_distribution(logits: torch.Tensor, allowed: torch.Tensor,
                        temperature: float = 1.0) -> torch.Tensor:
    z = logits.double() / temperature
    z = z.masked_fill(~allowed, float("-inf"))
    return torch.softmax(z, dim=-1)


@torch.no_grad()
def generate(model: SpeechLM, vocab: UnifiedVocab, prompt: MixedSequence, max_new: int,
             mode: str = "speech_only", temperature: float | None = None, seed: int = 0,
             num_samples: int = 1) -> list[list[int]]:
    """Continue ``prompt`` with speech tokens.

    Logits outside the speech block and ``</s>`` are set to -inf at every step.
    ``temperature=None`` is greedy decoding; otherwise tokens are sampled from
    the masked softmax with a generator seeded by ``seed``. Each returned list
    holds the new token ids, ending at ``</s>`` if it was produced.
    """
    if mode != "speech_only":
        raise ValueError(f"unsupported generation mode {mode!r}")
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    model.eval()
    allowed = speech_only_mask(vocab)
    gen = torch.Generator().manual_seed(seed)
    n = _trim(prompt)
    ids = torch.from_numpy(np.asarray(prompt.ids[:n], dtype=np.int64))[None].repeat(num_samples, 1)
    done = torch.zeros(num_samples, dtype=torch.bool)
    outs: list[list[int]] = [[] for _ in range(num_samples)]
    for _ in range(max_new):
        ctx = ids[:, -model.cfg.max_seq_len:]
        logits, _ = model(ctx)
        last = logits[:, -1]
        if temperature is None:
            nxt = last.double().masked_fill(~allowed, float("-inf")).argmax(dim=-1)
        else:
            probs = masked_distribution(last, allowed, temperature)
            nxt = torch.multinomial(probs, 1, generator=gen).squeeze(1)
        for i in range(num_samples):
            if not done[i]:
                outs[i].append(int(nxt[i]))
        done |= nxt == vocab.eos_id
        if bool(done.all()):
            break
        ids = torch.cat([ids, nxt[:, None]], dim=1)
    return outs


def codes_of(vocab: UnifiedVocab, tokens: list[int]) -> list[int]:
    """Codec indices of a generated run, dropping the terminating ``</s>``."""
    return [t - vocab.speech_start for t in tokens if vocab.is_speech(t)]


def uniform_nll(vocab_size: int) -> float:
    return math.log(vocab_size)
