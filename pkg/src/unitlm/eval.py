"""Pairwise preference, auxiliary-loss ablation and linear-probe evaluation."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .interleave import MixedSequence, speech_only
from .scoring import ScoreError, score, score_many

log = logging.getLogger(__name__)

STAGES = (0.1, 0.4, 1.0)


class EvalError(ValueError):
    pass


@dataclass
class PreferencePair:
    natural: MixedSequence
    perturbed: MixedSequence
    factor: str
    latents: dict = field(default_factory=dict)


def make_preference_pairs(stream_pairs, vocab, factor: str) -> list[PreferencePair]:
    return [PreferencePair(speech_only(n, vocab), speech_only(p, vocab), factor, dict(p.latents))
            for n, p in stream_pairs]


class ModelScorer:
    """Scores sequences with a model; ``many`` batches them."""

    def __init__(self, model, pad_id: int, batch_size: int = 64):
        self.model, self.pad_id, self.batch_size = model, pad_id, batch_size

    def __call__(self, seq: MixedSequence) -> float:
        return score(self.model, seq).score

    def many(self, seqs) -> list[float]:
        return [r.score for r in score_many(self.model, seqs, self.pad_id, self.batch_size)]


@dataclass
class PreferenceResult:
    accuracy: float
    ci: tuple[float, float]
    n_pairs: int
    n_excluded: int
    outcomes: np.ndarray                  # 1 win, 0.5 tie, 0 loss per scored pair
    scores: list[tuple[float, float]]     # (natural, perturbed) per scored pair

    def to_dict(self, with_pairs: bool = False) -> dict:
        d = {"accuracy": self.accuracy, "ci95": list(self.ci), "n_pairs": self.n_pairs,
             "n_excluded": self.n_excluded}
        if with_pairs:
            d["pairs"] = [{"natural": a, "perturbed": b} for a, b in self.scores]
        return d


def bootstrap_ci(outcomes: np.ndarray, n_boot: int = 10_000, seed: int = 0,
                 level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean of ``outcomes``."""
    outcomes = np.asarray(outcomes, dtype=np.float64)
    if len(outcomes) == 0:
        raise EvalError("no outcomes to bootstrap")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(outcomes), size=(n_boot, len(outcomes)))
    means = outcomes[idx].mean(axis=1)
    a = (1 - level) / 2
    return float(np.quantile(means, a)), float(np.quantile(means, 1 - a))


def _score_all(scorer, seqs) -> list[float]:
    many = getattr(scorer, "many", None)
    if many is not None:
        try:
            return list(many(seqs))
        except ScoreError:
            pass  # fall back to one-by-one so a single bad sequence is isolated
    out = []
    for s in seqs:
        try:
            out.append(float(scorer(s)))
        except ScoreError:
            out.append(float("nan"))
    return out


def preference_accuracy(scorer, pairs: list[PreferencePair], n_boot: int = 10_000,
                        seed: int = 0) -> PreferenceResult:
    """Fraction of pairs where the natural sequence scores higher; ties count 0.5.

    ``scorer`` maps a sequence to a score (higher = more likely). Pairs that
    cannot be scored (error or non-finite score) are excluded and counted.
    """
    if not pairs:
        raise EvalError("no preference pairs")
    nat = _score_all(scorer, [p.natural for p in pairs])
    per = _score_all(scorer, [p.perturbed for p in pairs])
    outcomes, kept = [], []
    excluded = 0
    for a, b in zip(nat, per):
        if not (math.isfinite(a) and math.isfinite(b)):
            excluded += 1
            continue
        outcomes.append(1.0 if a > b else 0.5 if a == b else 0.0)
        kept.append((a, b))
    if excluded:
        log.warning("excluded %d unscorable pair(s) of %d", excluded, len(pairs))
    if not outcomes:
        raise EvalError("every pair was unscorable")
    out = np.asarray(outcomes)
    return PreferenceResult(float(out.mean()), bootstrap_ci(out, n_boot, seed), len(out),
                            excluded, out, kept)


# --- ablation -------------------------------------------------------------

ABLATION_FREE_KEYS = {("weights", "coarse"), ("weights", "next")}


def _flatten(d, prefix=()):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, prefix + (k,)))
        else:
            out[prefix + (k,)] = v
    return out


def config_diff(a: dict, b: dict) -> set:
    fa, fb = _flatten(a), _flatten(b)
    return {k for k in fa.keys() | fb.keys() if fa.get(k) != fb.get(k)}


def check_ablation_configs(configs: dict) -> None:
    """Reject config pairs that differ in anything but the auxiliary weights."""
    names = list(configs)
    base = configs[names[0]].to_dict()
    for name in names[1:]:
        drift = config_diff(base, configs[name].to_dict()) - ABLATION_FREE_KEYS
        if drift:
            keys = ", ".join(".".join(k) for k in sorted(drift))
            raise EvalError(f"config {name!r} drifts from {names[0]!r} beyond aux weights: {keys}")


@dataclass
class AblationReport:
    accuracy: dict          # config -> factor -> list per seed
    seeds: list
    param_digests: dict = field(default_factory=dict)

    def mean(self, config: str, factor: str) -> float:
        return float(np.mean(self.accuracy[config][factor]))

    def paired_diff(self, a: str, b: str, factor: str) -> list[float]:
        return [x - y for x, y in zip(self.accuracy[a][factor], self.accuracy[b][factor])]

    def to_dict(self) -> dict:
        names = list(self.accuracy)
        out = {"seeds": self.seeds, "per_seed": self.accuracy,
               "mean": {c: {f: self.mean(c, f) for f in self.accuracy[c]} for c in names}}
        if len(names) == 2:
            a, b = names
            out["paired_diff"] = {f: self.paired_diff(a, b, f) for f in self.accuracy[a]}
        return out


def run_ablation(configs: dict, world, eval_pairs: dict, seeds, progress=None) -> AblationReport:
    """Train every config for every seed from a shared per-seed initial state.

    ``configs`` maps names to :class:`~unitlm.pipeline.TrainConfig` objects
    that may differ only in the auxiliary loss weights; ``eval_pairs`` maps a
    factor name to its preference pairs.
    """
    from dataclasses import replace

    from .pipeline import Trainer, clone_state, init_state

    check_ablation_configs(configs)
    acc = {c: {f: [] for f in eval_pairs} for c in configs}
    digests: dict = {c: [] for c in configs}
    for seed in seeds:
        base = init_state(world, replace(next(iter(configs.values())), seed=seed))
        for name, tc in configs.items():
            tc = replace(tc, seed=seed)
            state = clone_state(base)
            Trainer(state, world, tc).run(tc.steps)
            scorer = ModelScorer(state.model, world.vocab.pad_id)
            for factor, pairs in eval_pairs.items():
                acc[name][factor].append(preference_accuracy(scorer, pairs).accuracy)
            digests[name].append(state.param_digest())
            if progress:
                progress(name, seed, {f: acc[name][f][-1] for f in eval_pairs})
    return AblationReport(acc, list(seeds), digests)


# --- linear probes ----------------------------------------------------------

@dataclass
class ProbeTask:
    features: np.ndarray
    labels: np.ndarray
    task_kind: str = "content"
    snapshot: str = ""

    def __post_init__(self):
        if len(np.unique(self.labels)) < 2:
            raise EvalError("a probe task needs at least two classes")
        if len(self.features) != len(self.labels):
            raise EvalError("features and labels differ in length")


@torch.no_grad()
def pooled_hidden(model, seqs, pad_id: int, batch_size: int = 64) -> np.ndarray:
    """Mean over real positions of the final-layer hidden states."""
    model.eval()
    out = []
    for i in range(0, len(seqs), batch_size):
        chunk = seqs[i : i + batch_size]
        T = max(len(s) for s in chunk)
        ids = torch.full((len(chunk), T), pad_id, dtype=torch.long)
        m = torch.zeros((len(chunk), T, 1), dtype=torch.float64)
        for j, s in enumerate(chunk):
            ids[j, : len(s)] = torch.from_numpy(s.ids)
            m[j, : len(s)] = 1.0
        _, hidden = model(ids)
        out.append(((hidden.double() * m).sum(1) / m.sum(1)).numpy())
    return np.concatenate(out)


def model_digest(model) -> str:
    h = hashlib.sha256()
    for k, t in model.state_dict().items():
        h.update(k.encode())
        h.update(t.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


def probe_task(model, seqs, labels, pad_id: int, task_kind: str = "content") -> ProbeTask:
    return ProbeTask(pooled_hidden(model, seqs, pad_id), np.asarray(labels), task_kind,
                     model_digest(model))


def split_80_20(labels: np.ndarray, split_seed: int):
    """Stratified split: 20% of each class (at least one) held out."""
    rng = np.random.default_rng(split_seed)
    test = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        test.extend(idx[: max(1, int(round(0.2 * len(idx))))])
    test = np.sort(np.asarray(test))
    train = np.setdiff1d(np.arange(len(labels)), test)
    return train, test


def linear_probe(task: ProbeTask, split_seed: int = 0, max_iter: int = 2000,
                 tol: float = 1e-6, C: float = 1.0) -> float:
    """Held-out accuracy of a multinomial logistic regression on standardised features."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    train, test = split_80_20(task.labels, split_seed)
    scaler = StandardScaler().fit(task.features[train])
    clf = LogisticRegression(C=C, max_iter=max_iter, tol=tol)
    clf.fit(scaler.transform(task.features[train]), task.labels[train])
    pred = clf.predict(scaler.transform(task.features[test]))
    return float((pred == task.labels[test]).mean())


def probe_over_stages(stage_models: dict, seqs, labels, pad_id: int, split_seed: int = 0,
                      task_kind: str = "content", stages=STAGES) -> dict:
    """Probe accuracy for each training-stage snapshot in ``stages``."""
    missing = [s for s in stages if s not in stage_models]
    if missing:
        raise EvalError(f"missing checkpoint for stage(s) {', '.join(f'{int(s * 100)}%' for s in missing)}")
    return {s: linear_probe(probe_task(stage_models[s], seqs, labels, pad_id, task_kind), split_seed)
            for s in stages}
