"""Training pipeline: synthetic world, model initialisation and the step loop."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import synthgen
from .augment import ThinSpec
from .checkpoint import load_checkpoint, save_checkpoint
from .distill import (Centroids, CoarseMap, default_sigma, fit_centroids, fit_coarse,
                      fit_projection, init_embeddings)
from .interleave import (DEFAULT_BUDGET, apply_audio_augment, attach_aux_labels, attach_features,
                         interleave, speech_only)
from .model import (Journal, LossWeights, ModelConfig, ModelState, OptimConfig, collate,
                    train_step)
from .seeding import derive_seed
from .vocab import UnifiedVocab, build_vocab

log = logging.getLogger(__name__)

EMBED_INIT_STD = 0.02


@dataclass
class WorldConfig:
    latent: synthgen.LatentSpec = field(default_factory=synthgen.LatentSpec)
    n_codes: int = 128
    codebook: str = "kmeans"     # or "random"
    codebook_seed: int = 7
    n_train: int = 200
    min_len: int = 80
    max_len: int = 120
    corpus_seed: int = 11
    n_buckets: int = 16
    coarse_seed: int = 3


@dataclass
class World:
    cfg: WorldConfig
    codebook: synthgen.Codebook
    vocab: UnifiedVocab
    corpus: list
    centroids: Centroids
    coarse: CoarseMap


def build_codebook(cfg: WorldConfig) -> synthgen.Codebook:
    if cfg.codebook == "random":
        return synthgen.make_codebook(cfg.codebook_seed, cfg.n_codes, cfg.latent.feature_dim)
    if cfg.codebook == "kmeans":
        return synthgen.fit_codebook(cfg.latent, cfg.codebook_seed, cfg.n_codes)
    raise ValueError(f"unknown codebook method {cfg.codebook!r}")


def build_vocab_for(spec: synthgen.LatentSpec, n_codes: int) -> UnifiedVocab:
    return build_vocab(synthgen.latent_tables(spec).word_symbols, n_codes)


def build_world(cfg: WorldConfig, codebook: synthgen.Codebook | None = None) -> World:
    codebook = codebook or build_codebook(cfg)
    corpus = synthgen.make_corpus(cfg.latent, codebook, cfg.n_train, cfg.corpus_seed,
                                  cfg.min_len, cfg.max_len)
    centroids = fit_centroids(corpus, codebook.n_codes)
    K = min(cfg.n_buckets, int(centroids.populated.sum()))
    coarse = fit_coarse(centroids, K, seed=cfg.coarse_seed)
    return World(cfg, codebook, build_vocab_for(cfg.latent, codebook.n_codes), corpus,
                 centroids, coarse)


@dataclass
class TrainConfig:
    steps: int = 400
    batch_size: int = 16
    seed: int = 0
    init: str = "distilled"          # or "random"
    sigma: float | None = None       # None: 0.01 x RMS of projected centroids
    interleave_prob: float = 0.0
    budget: tuple[float, float] = DEFAULT_BUDGET
    augment: bool = True
    thin: ThinSpec = field(default_factory=ThinSpec)
    weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 160
    ckpt_every: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def model_config(world: World, tc: TrainConfig, dtype: str = "float32") -> ModelConfig:
    return ModelConfig(
        vocab_size=world.vocab.total_size, n_codes=world.vocab.speech_token_count,
        speech_start=world.vocab.speech_start, d_model=tc.d_model, n_layers=tc.n_layers,
        n_heads=tc.n_heads, d_ff=tc.d_ff, max_seq_len=tc.max_seq_len,
        n_buckets=world.coarse.K, d_ssl=world.cfg.latent.feature_dim, dtype=dtype,
    )


def init_state(world: World, tc: TrainConfig, dtype: str = "float32") -> ModelState:
    """Fresh model; with ``init="distilled"`` the speech rows come from projected centroids."""
    cfg = model_config(world, tc, dtype)
    state = ModelState.create(
        cfg, replace(tc.optim), seed=tc.seed,
        extras={"bucket_of": world.coarse.bucket_of, "centroid_mu": world.centroids.mu,
                "centroid_counts": world.centroids.counts},
        meta={"text_tokens": list(world.vocab.text_tokens), "n_codes": world.vocab.speech_token_count,
              "init": tc.init},
    )
    if tc.init == "distilled":
        proj = state.model.ssl_proj
        fit_projection(proj, world.centroids, EMBED_INIT_STD, seed=derive_seed(tc.seed, 0x9E0))
        sigma = default_sigma(world.centroids, proj) if tc.sigma is None else tc.sigma
        rows = init_embeddings(world.centroids, proj, sigma, seed=derive_seed(tc.seed, 0xE4B))
        state.model.set_speech_embeddings(rows)
        state.meta["sigma"] = sigma
    elif tc.init != "random":
        raise ValueError(f"unknown init {tc.init!r}")
    return state


def make_sequence(stream, world: World, tc: TrainConfig, seed: int, rng: np.random.Generator):
    if rng.random() < tc.interleave_prob:
        seq = interleave(stream, world.vocab, tc.budget, seed=derive_seed(seed, 1))
    else:
        seq = speech_only(stream, world.vocab)
    if tc.weights.ssl > 0:
        seq = attach_features(seq, stream)
    if tc.augment:
        seq = apply_audio_augment(seq, tc.thin, derive_seed(seed, 2))
    return attach_aux_labels(seq, world.vocab, world.coarse.bucket_of, tc.weights.delta)


class Trainer:
    """Draws batches from ``state.rng`` and applies :func:`train_step`.

    All data-order and augmentation randomness comes from the state's
    generator, which is checkpointed, so a resumed run continues exactly.
    """

    def __init__(self, state: ModelState, world: World, tc: TrainConfig,
                 journal: Journal | None = None):
        self.state, self.world, self.tc = state, world, tc
        self.journal = journal or Journal(None)

    def next_batch(self):
        step_seed = int(self.state.rng.integers(2**63))
        r = np.random.default_rng(step_seed)
        n = len(self.world.corpus)
        idx = r.choice(n, size=min(self.tc.batch_size, n), replace=False)
        seqs = [make_sequence(self.world.corpus[i], self.world, self.tc,
                              derive_seed(step_seed, k), r) for k, i in enumerate(idx)]
        dtype = self.state.model.dtype
        return collate(seqs, self.world.vocab.pad_id, dtype), [int(i) for i in idx]

    def step(self) -> dict:
        batch, idx = self.next_batch()
        return train_step(self.state, batch, self.tc.weights, batch_id=idx, journal=self.journal)

    def run(self, n_steps: int, ckpt_dir: str | Path | None = None, snapshots=(),
            on_snapshot=None) -> list[dict]:
        """Train ``n_steps``; at each step in ``snapshots`` call ``on_snapshot(step, state)``."""
        records = []
        snapshots = set(snapshots)
        for _ in range(n_steps):
            records.append(self.step())
            s = self.state.step
            if ckpt_dir is not None and self.tc.ckpt_every and s % self.tc.ckpt_every == 0:
                save_checkpoint(self.state, Path(ckpt_dir) / f"step{s:07d}.ckpt")
            if s in snapshots and on_snapshot is not None:
                on_snapshot(s, self.state)
        return records


def clone_state(state: ModelState) -> ModelState:
    return copy.deepcopy(state)


def resume(path, world: World, tc: TrainConfig, journal: Journal | None = None) -> Trainer:
    return Trainer(load_checkpoint(path), world, tc, journal)
