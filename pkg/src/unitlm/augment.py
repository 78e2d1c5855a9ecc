"""Multi-rate thinning and span erasure of audio token runs.

Thinning keeps original indices ``t`` with ``t % r == 0``; erasure then
deletes spans given in *thinned* coordinates. Labels point at the next
surviving token, so the thinned run is an ordinary next-token sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class ThinSpec:
    rates: tuple[int, ...] = (1, 2, 3, 4)
    p_erase: float = 0.1
    span_mean: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(int(r) for r in self.rates))
        if not self.rates or min(self.rates) < 1:
            raise AugmentError("rates must be non-empty and all >= 1")
        if not 0.0 <= self.p_erase <= 1.0:
            raise AugmentError("p_erase must lie in [0, 1]")
        if self.span_mean < 1:
            raise AugmentError("span_mean must be >= 1")


@dataclass
class ThinnedSequence:
    kept_positions: np.ndarray
    tokens: np.ndarray
    labels: np.ndarray
    label_mask: np.ndarray


def _check_spans(spans, n: int):
    spans = sorted((int(s), int(ln)) for s, ln in spans)
    end = 0
    for s, ln in spans:
        if ln < 1 or s < 0 or s + ln > n:
            raise AugmentError(f"span ({s}, {ln}) out of bounds for {n} thinned positions")
        if s < end:
            raise AugmentError(f"span ({s}, {ln}) overlaps a previous span")
        end = s + ln
    return spans


def thin(tokens, r: int, erase_spans=()) -> ThinnedSequence:
    tokens = np.asarray(tokens)
    if r < 1:
        raise AugmentError(f"rate must be >= 1, got {r}")
    kept = np.arange(0, len(tokens), r)
    spans = _check_spans(erase_spans, len(kept))
    keep = np.ones(len(kept), dtype=bool)
    for s, ln in spans:
        keep[s : s + ln] = False
    kept = kept[keep]
    out = tokens[kept]
    labels = np.empty_like(out)
    mask = np.zeros(len(out), dtype=bool)
    if len(out):
        labels[:-1] = out[1:]
        labels[-1] = out[-1]
        mask[:-1] = True
    return ThinnedSequence(kept, out, labels, mask)


def sample_augmentation(spec: ThinSpec, T: int, seed: int) -> tuple[int, list[tuple[int, int]]]:
    """Draw a rate and erase spans for a run of ``T`` tokens.

    The rate is uniform over ``spec.rates``. Over the ``n = ceil(T / r)``
    thinned slots, a span starts at each free slot with probability
    ``p_erase``; its length is geometric with mean ``span_mean``, clipped at
    the end of the run. The scan resumes after the span, so spans never overlap.
    """
    if T < 1:
        raise AugmentError("T must be >= 1")
    rng = np.random.default_rng(seed)
    r = int(spec.rates[rng.integers(len(spec.rates))])
    n = -(-T // r)
    spans = []
    if spec.p_erase > 0:
        q = 1.0 / spec.span_mean
        i = 0
        starts = rng.random(n)
        lengths = rng.geometric(q, size=n)
        while i < n:
            if starts[i] < spec.p_erase:
                ln = int(min(lengths[i], n - i))
                spans.append((i, ln))
                i += ln
            else:
                i += 1
    return r, spans


def expected_erased_fraction(p: float, span_mean: float, n: int) -> float:
    """Exact expected fraction of ``n`` slots erased by the start/length process.

    Dynamic programme over the scan position: ``E[i]`` is the expected number
    of erased slots from slot ``i`` to the end.
    """
    if n == 0:
        return 0.0
    q = 1.0 / span_mean
    e = np.zeros(n + 1)
    for i in range(n - 1, -1, -1):
        rem = n - i
        ls = np.arange(1, rem + 1)
        pmf = q * (1 - q) ** (ls - 1)
        pmf[-1] = (1 - q) ** (rem - 1)  # clipped tail mass
        erased = (pmf * (ls + e[i + ls])).sum()
        e[i] = p * erased + (1 - p) * e[i + 1]
    return e[0] / n
