"""Decoder-only transformer over the unified vocabulary, its losses and training state."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .distill import Projection, alignment_loss
from .interleave import AUDIO, MixedSequence

TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ModelError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, batch_id, parts: dict):
        super().__init__(f"non-finite loss at step {step} (batch {batch_id}): {parts}")
        self.step = step
        self.batch_id = batch_id
        self.parts = parts


@dataclass
class ModelConfig:
    vocab_size: int
    n_codes: int
    speech_start: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 512
    n_buckets: int = 64
    d_ssl: int = 16
    dropout: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.vocab_size % 8:
            raise ModelError(f"vocab_size={self.vocab_size} is not a multiple of 8")
        if self.dtype not in TORCH_DTYPES:
            raise ModelError(f"unknown dtype {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossWeights:
    main: float = 1.0
    ssl: float = 0.1
    coarse: float = 0.5
    next: float = 0.5
    delta: int = 1
    aux_warmup: int = 0   # steps before the auxiliary terms switch on

    def __post_init__(self):
        for k in ("main", "ssl", "coarse", "next"):
            if getattr(self, k) < 0:
                raise ModelError(f"loss weight {k} must be >= 0")
        if self.delta < 1:
            raise ModelError("aux delay must be a positive integer")


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x):
        B, T, D = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).split(D, dim=-1)
        q, k, v = (z.view(B, T, h, D // h).transpose(1, 2) for z in (q, k, v))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // h)
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
        att = att.masked_fill(causal, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg.d_model, cfg.n_heads)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp = nn.Sequential(nn.Linear(cfg.d_model, cfg.d_ff), nn.GELU(),
                                 nn.Linear(cfg.d_ff, cfg.d_model))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x):
        x = x + self.drop(self.attn(self.ln1(x)))
        return x + self.drop(self.mlp(self.ln2(x)))


class SpeechLM(nn.Module):
    """Pre-LN causal transformer with a main LM head and two auxiliary heads.

    ``hidden`` is the final residual stream (before the last layer norm); it
    feeds the alignment loss, the auxiliary heads (through the final norm) and
    linear probes.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, cfg.d_model)
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.n_layers)])
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.coarse_head = nn.Linear(cfg.d_model, cfg.n_buckets)
        self.code_head = nn.Linear(cfg.d_model, cfg.n_codes)
        self.ssl_proj = Projection(cfg.d_ssl, cfg.d_model)
        self.apply(self._init)
        self.to(TORCH_DTYPES[cfg.dtype])

    @staticmethod
    def _init(m):
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, 0.0, 0.02)
        if isinstance(m, nn.Linear) and m.bias is not None:
            nn.init.zeros_(m.bias)

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.weight.dtype

    @property
    def speech_rows(self) -> slice:
        return slice(self.cfg.speech_start, self.cfg.speech_start + self.cfg.n_codes)

    @torch.no_grad()
    def set_speech_embeddings(self, rows: np.ndarray) -> None:
        if rows.shape != (self.cfg.n_codes, self.cfg.d_model):
            raise ModelError(f"speech embedding rows have shape {rows.shape}")
        self.tok_emb.weight[self.speech_rows] = torch.as_tensor(rows, dtype=self.dtype)

    def forward(self, ids: torch.Tensor):
        if ids.dim() == 1:
            ids = ids[None]
        T = ids.shape[1]
        if T > self.cfg.max_seq_len:
            raise ModelError(f"sequence length {T} exceeds max_seq_len {self.cfg.max_seq_len}")
        if ids.numel() and (int(ids.max()) >= self.cfg.vocab_size or int(ids.min()) < 0):
            raise ModelError("token id outside vocabulary")
        pos = torch.arange(T, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(pos)[None]
        for blk in self.blocks:
            x = blk(x)
        logits = self.lm_head(self.ln_f(x))
        return logits, x

    def aux_logits(self, hidden):
        z = self.ln_f(hidden)
        return self.coarse_head(z), self.code_head(z)


@dataclass
class Batch:
    ids: torch.Tensor
    loss_mask: torch.Tensor
    audio_mask: torch.Tensor
    features: torch.Tensor | None
    coarse_labels: torch.Tensor | None
    code_labels: torch.Tensor | None
    meta: list = field(default_factory=list)


def collate(seqs: list[MixedSequence], pad_id: int, dtype=torch.float32) -> Batch:
    """Right-pad sequences; padded positions carry no loss and no audio."""
    T = max(len(s) for s in seqs)
    B = len(seqs)
    ids = torch.full((B, T), pad_id, dtype=torch.long)
    lm = torch.zeros((B, T), dtype=torch.bool)
    am = torch.zeros((B, T), dtype=torch.bool)
    have_feat = all(s.features is not None for s in seqs)
    have_coarse = all(s.coarse_labels is not None for s in seqs)
    have_code = all(s.code_labels is not None for s in seqs)
    feats = torch.zeros((B, T, seqs[0].features.shape[1]), dtype=dtype) if have_feat else None
    coarse = torch.full((B, T), -1, dtype=torch.long) if have_coarse else None
    code = torch.full((B, T), -1, dtype=torch.long) if have_code else None
    for i, s in enumerate(seqs):
        n = len(s)
        ids[i, :n] = torch.from_numpy(s.ids)
        lm[i, :n] = torch.from_numpy(s.loss_mask)
        am[i, :n] = torch.from_numpy(s.modality == AUDIO)
        if have_feat:
            feats[i, :n] = torch.from_numpy(np.asarray(s.features)).to(dtype)
        if have_coarse:
            coarse[i, :n] = torch.from_numpy(s.coarse_labels)
        if have_code:
            code[i, :n] = torch.from_numpy(s.code_labels)
    return Batch(ids, lm, am, feats, coarse, code, [s.meta for s in seqs])


def _masked_ce(logits, targets, mask):
    n = mask.sum()
    if n.item() == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits[mask], targets[mask], reduction="sum") / n


def loss_terms(model: SpeechLM, batch: Batch, need_ssl=True, need_coarse=True, need_next=True):
    """Unweighted loss terms for ``batch``.

    main:   next-token cross-entropy over the full vocabulary, targets masked by loss_mask
    ssl:    alignment of hidden states to projected frame features at audio positions
    coarse: bucket of the code ``delta`` steps ahead, from the coarse head
    next:   code ``delta`` steps ahead over the speech block, from the code head
    """
    logits, hidden = model(batch.ids)
    V = logits.shape[-1]
    tgt_mask = batch.loss_mask[:, 1:]
    main = _masked_ce(logits[:, :-1].reshape(-1, V), batch.ids[:, 1:].reshape(-1),
                      tgt_mask.reshape(-1))
    terms = {"main": main}
    zero = logits.sum() * 0.0
    if need_ssl:
        if batch.features is None:
            raise ModelError("alignment loss needs per-position features")
        terms["ssl"] = alignment_loss(hidden, batch.features, model.ssl_proj, batch.audio_mask)
    else:
        terms["ssl"] = zero
    if need_coarse or need_next:
        c_logits, n_logits = model.aux_logits(hidden)
    if need_coarse:
        if batch.coarse_labels is None:
            raise ModelError("coarse loss requested but no coarse labels (missing coarse map)")
        m = batch.coarse_labels >= 0
        terms["coarse"] = _masked_ce(c_logits.reshape(-1, c_logits.shape[-1]),
                                     batch.coarse_labels.clamp(min=0).reshape(-1), m.reshape(-1))
    else:
        terms["coarse"] = zero
    if need_next:
        if batch.code_labels is None:
            raise ModelError("next-code loss requested but no code labels")
        m = batch.code_labels >= 0
        terms["next"] = _masked_ce(n_logits.reshape(-1, n_logits.shape[-1]),
                                   batch.code_labels.clamp(min=0).reshape(-1), m.reshape(-1))
    else:
        terms["next"] = zero
    return terms


def total_loss(model: SpeechLM, batch: Batch, weights: LossWeights, step: int | None = None):
    """Weighted sum of the loss terms; returns (loss, terms)."""
    aux_on = step is None or step >= weights.aux_warmup
    wc = weights.coarse if aux_on else 0.0
    wn = weights.next if aux_on else 0.0
    terms = loss_terms(model, batch, need_ssl=weights.ssl > 0, need_coarse=wc > 0,
                       need_next=wn > 0)
    loss = (weights.main * terms["main"] + weights.ssl * terms["ssl"]
            + wc * terms["coarse"] + wn * terms["next"])
    return loss, terms


@dataclass
class OptimConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.01
    eps: float = 1e-8
    schedule: str = "constant"   # or "cosine"
    total_steps: int = 0         # cosine horizon
    min_lr_ratio: float = 0.1
    grad_clip: float = 1.0

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant" or self.total_steps <= 0:
            return self.lr
        if self.schedule != "cosine":
            raise ModelError(f"unknown lr schedule {self.schedule!r}")
        p = min(step / self.total_steps, 1.0)
        return self.lr * (self.min_lr_ratio + (1 - self.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * p)))


def make_optimizer(model: SpeechLM, oc: OptimConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.dim() >= 2 and "emb" not in name:
            decay.append(p)
        else:
            no_decay.append(p)
    groups = [{"params": decay, "weight_decay": oc.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=oc.lr, betas=tuple(oc.betas), eps=oc.eps, foreach=False)


@dataclass
class ModelState:
    """Everything needed to resume a run bit-exactly."""

    cfg: ModelConfig
    model: SpeechLM
    optimizer: torch.optim.Optimizer
    optim_cfg: OptimConfig
    rng: np.random.Generator
    step: int = 0
    extras: dict = field(default_factory=dict)   # named numpy arrays (coarse map, centroids)
    meta: dict = field(default_factory=dict)     # JSON-able (vocab symbols, run config echo)

    @classmethod
    def create(cls, cfg: ModelConfig, optim_cfg: OptimConfig | None = None, seed: int = 0,
               extras=None, meta=None) -> "ModelState":
        optim_cfg = optim_cfg or OptimConfig()
        torch.manual_seed(seed)
        model = SpeechLM(cfg)
        return cls(cfg, model, make_optimizer(model, optim_cfg), optim_cfg,
                   np.random.default_rng(seed), 0, dict(extras or {}), dict(meta or {}))

    def param_digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in self.model.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def train_step(state: ModelState, batch: Batch, weights: LossWeights, batch_id=None,
               journal: "Journal | None" = None) -> dict:
    """One optimizer update. Returns (and optionally journals) the loss record."""
    model, opt = state.model, state.optimizer
    model.train()
    lr = state.optim_cfg.lr_at(state.step)
    for g in opt.param_groups:
        g["lr"] = lr
    opt.zero_grad(set_to_none=True)
    loss, terms = total_loss(model, batch, weights, step=state.step)
    parts = {k: float(v.detach()) for k, v in terms.items()}
    parts["loss"] = float(loss.detach())
    if not all(math.isfinite(v) for v in parts.values()):
        raise NonFiniteLossError(state.step, batch_id, parts)
    loss.backward()
    if state.optim_cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), state.optim_cfg.grad_clip, foreach=False)
    if lr > 0:
        opt.step()
    state.step += 1
    record = {"step": state.step, **parts, "lr": lr}
    if journal is not None:
        journal.write(dict(record, batch=batch_id,
                           augment=[m.get("augment") for m in batch.meta]))
    return record


class Journal:
    """Append-only JSON-lines training log."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []

    def write(self, record: dict) -> None:
        rec = dict(record, time=time.time())
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")

    @staticmethod
    def read(path) -> list[dict]:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(x) for x in fh if x.strip()]

    @staticmethod
    def comparable(records) -> list[dict]:
        """Records without wall-clock fields, for run-to-run comparison."""
        return [{k: v for k, v in r.items() if k != "time"} for r in records]
