"""Shared builders for the test suite: a miniature vocabulary, random batches
and a finite-difference gradient oracle that only uses forward passes."""

import numpy as np
import torch

from unitlm.interleave import AUDIO, DELIM, SPECIAL, TEXT, MixedSequence, attach_aux_labels
from unitlm.model import ModelConfig, collate
from unitlm.vocab import build_vocab


def mini_vocab(n_text=12, n_codes=48):
    return build_vocab([f"t{i}" for i in range(n_text)], n_codes)   # 12 + 48 + 4 = 64


def mini_config(vocab, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=24, n_buckets=5,
                d_ssl=3, dtype="float64"):
    return ModelConfig(vocab_size=vocab.total_size, n_codes=vocab.speech_token_count,
                       speech_start=vocab.speech_start, d_model=d_model, n_layers=n_layers,
                       n_heads=n_heads, d_ff=d_ff, max_seq_len=max_seq_len, n_buckets=n_buckets,
                       d_ssl=d_ssl, dtype=dtype)


def random_mixed(vocab, rng, length, d_ssl=3, bucket_of=None, delta=1, text_prob=0.5):
    """[Speech] audio ... ([Text] words [Speech] audio ...) </s> with random content."""
    ids, mod = [vocab.speech_delim_id], [DELIM]
    n_audio = 0
    mode = AUDIO
    while len(ids) < length - 1:
        if mode == AUDIO and n_audio > 2 and rng.random() < 0.15 * text_prob:
            ids.append(vocab.text_delim_id)
            mod.append(DELIM)
            mode = TEXT
        elif mode == TEXT and rng.random() < 0.4:
            ids.append(vocab.speech_delim_id)
            mod.append(DELIM)
            mode = AUDIO
        elif mode == AUDIO:
            ids.append(vocab.speech_start + int(rng.integers(vocab.speech_token_count)))
            mod.append(AUDIO)
            n_audio += 1
        else:
            ids.append(int(rng.integers(vocab.n_text)))
            mod.append(TEXT)
    ids.append(vocab.eos_id)
    mod.append(SPECIAL)
    n = len(ids)
    mod = np.asarray(mod, dtype=np.int8)
    mask = np.ones(n, dtype=bool)
    mask[0] = False
    feats = np.zeros((n, d_ssl))
    feats[mod == AUDIO] = rng.standard_normal((int((mod == AUDIO).sum()), d_ssl))
    frame = np.where(mod == AUDIO, np.cumsum(mod == AUDIO) - 1, -1)
    seq = MixedSequence(np.asarray(ids, dtype=np.int64), mod, mask, frame,
                        np.arange(n) * 0.025, features=feats)
    if bucket_of is None:
        bucket_of = np.arange(vocab.speech_token_count) % 5
    return attach_aux_labels(seq, vocab, bucket_of, delta)


def random_batch(vocab, seed, B=3, lengths=(14, 20), **kw):
    rng = np.random.default_rng(seed)
    seqs = [random_mixed(vocab, rng, int(rng.integers(*lengths)), **kw) for _ in range(B)]
    return collate(seqs, vocab.pad_id, torch.float64)


def fd_check(model, loss_fn, h=1e-5, params=None, max_entries=None, seed=0):
    """Max relative error between autograd and central differences.

    Returns ``{param_name: max_rel_err}``. With ``max_entries`` only a random
    subset of each tensor's entries is checked.
    """
    named = dict(model.named_parameters())
    names = params or list(named)
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    grads = {n: named[n].grad.detach().clone() if named[n].grad is not None
             else torch.zeros_like(named[n]) for n in names}
    rng = np.random.default_rng(seed)
    out = {}
    with torch.no_grad():
        for n in names:
            p = named[n]
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and len(idx) > max_entries:
                idx = rng.choice(idx, max_entries, replace=False)
            worst = 0.0
            for i in idx:
                old = flat[i].item()
                flat[i] = old + h
                fp = loss_fn().item()
                flat[i] = old - h
                fm = loss_fn().item()
                flat[i] = old
                fd = (fp - fm) / (2 * h)
                an = grads[n].view(-1)[i].item()
                err = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
                worst = max(worst, err)
            out[n] = worst
    return out
