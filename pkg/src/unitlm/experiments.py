"""Desk-scale trend experiments: auxiliary-loss ablation, init comparison,
interleaving trade-off. Shared by the acceptance suite and by users who want
to rerun the comparisons outside pytest."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import synthgen
from .eval import ModelScorer, linear_probe, make_preference_pairs, preference_accuracy, probe_task
from .interleave import speech_only
from .model import LossWeights
from .pipeline import TrainConfig, Trainer, World, WorldConfig, build_world, clone_state, init_state

# speaker cue weaker than content, noisier frames: the regime where the
# distilled head start survives to the end of a short run
DESK_LATENT = synthgen.LatentSpec(speaker_scale=0.5, noise_scale=0.5)


def desk_world_config() -> WorldConfig:
    return WorldConfig(latent=DESK_LATENT)


@dataclass
class EvalSets:
    speaker_pairs: list
    probe_seqs: list
    probe_labels: dict = field(default_factory=dict)


def eval_sets(world: World, n_pairs: int = 200, pair_length: int = 100, pair_seed: int = 999,
              probe_n: int = 600, probe_seed: int = 555) -> EvalSets:
    spec, cb = world.cfg.latent, world.codebook
    pairs = make_preference_pairs(synthgen.make_pairs(spec, cb, n_pairs, pair_seed, "speaker",
                                                      pair_length), world.vocab, "speaker")
    streams = synthgen.make_corpus(spec, cb, probe_n, probe_seed, world.cfg.min_len,
                                   world.cfg.max_len)
    seqs = [speech_only(s, world.vocab) for s in streams]
    labels = {k: np.array([s.latents[k] for s in streams]) for k in ("content", "speaker")}
    return EvalSets(pairs, seqs, labels)


def speaker_accuracy(state, world: World, sets: EvalSets, n_boot: int = 10_000) -> float:
    scorer = ModelScorer(state.model, world.vocab.pad_id)
    return preference_accuracy(scorer, sets.speaker_pairs, n_boot=n_boot).accuracy


def content_probe(model, world: World, sets: EvalSets, split_seed: int = 0) -> float:
    task = probe_task(model, sets.probe_seqs, sets.probe_labels["content"], world.vocab.pad_id)
    return linear_probe(task, split_seed)


def train_with_stages(world: World, tc: TrainConfig, fractions=(0.1, 1.0)):
    """Train ``tc.steps`` steps; return (final state, {fraction: model snapshot})."""
    state = init_state(world, tc)
    at = {max(1, int(round(f * tc.steps))): f for f in fractions}
    snaps = {}

    def keep(step, st):
        snaps[at[step]] = clone_state(st).model

    Trainer(state, world, tc).run(tc.steps, snapshots=at, on_snapshot=keep)
    return state, snaps


def aux_ablation_configs(base: TrainConfig | None = None) -> dict:
    """+aux uses the training weights; -aux zeroes both auxiliary heads."""
    base = base or TrainConfig()
    w = base.weights
    return {"+aux": base, "-aux": replace(base, weights=replace(w, coarse=0.0, next=0.0))}


def default_train(seed: int = 0, **kw) -> TrainConfig:
    return TrainConfig(seed=seed, weights=LossWeights(), **kw)
