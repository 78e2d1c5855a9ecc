"""Unified text + speech vocabulary.

Id layout (dense, no gaps)::

    [0, n_text)                    text symbols, in the order given
    [n_text, n_text + n_codes)     speech tokens [Sp1] .. [SpN]
    next four ids                  [Text], [Speech], </s>, <pad>
    remainder                      reserved filler up to a multiple of 8

Filler ids are never emitted and never carry loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

TEXT_DELIM = "[Text]"
SPEECH_DELIM = "[Speech]"
EOS = "</s>"
PAD = "<pad>"
SPECIALS = (TEXT_DELIM, SPEECH_DELIM, EOS, PAD)
PAD_MULTIPLE = 8

_HEADER_TAG = "#unitlm-vocab"
_FORMAT_VERSION = 1


class VocabError(ValueError):
    pass


def speech_token_name(code: int) -> str:
    return f"[Sp{code + 1}]"


def round_up(n: int, multiple: int = PAD_MULTIPLE) -> int:
    return int(math.ceil(n / multiple) * multiple)


@dataclass(frozen=True)
class UnifiedVocab:
    text_tokens: tuple[str, ...]
    speech_token_count: int
    total_size: int
    symbols: tuple[str, ...] = field(repr=False)

    @property
    def n_text(self) -> int:
        return len(self.text_tokens)

    @property
    def speech_start(self) -> int:
        return self.n_text

    @property
    def speech_end(self) -> int:
        return self.n_text + self.speech_token_count

    @property
    def text_delim_id(self) -> int:
        return self.speech_end

    @property
    def speech_delim_id(self) -> int:
        return self.speech_end + 1

    @property
    def delimiter_ids(self) -> tuple[int, int]:
        return (self.text_delim_id, self.speech_delim_id)

    @property
    def eos_id(self) -> int:
        return self.speech_end + 2

    @property
    def pad_id(self) -> int:
        return self.speech_end + 3

    @property
    def n_used(self) -> int:
        """Ids that can actually appear in data (excludes filler)."""
        return self.speech_end + len(SPECIALS)

    def is_speech(self, token_id: int) -> bool:
        return self.speech_start <= token_id < self.speech_end

    def is_text(self, token_id: int) -> bool:
        return 0 <= token_id < self.n_text

    def text_id(self, symbol: str) -> int:
        try:
            return self._text_index[symbol]
        except KeyError:
            raise VocabError(f"unknown text symbol {symbol!r}") from None

    def id_to_symbol(self, token_id: int) -> str:
        return self.symbols[token_id]

    @cached_property
    def _text_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.text_tokens)}

    def save(self, path: str | Path) -> None:
        header = (
            f"{_HEADER_TAG} v{_FORMAT_VERSION} n_codes={self.speech_token_count} "
            f"n_text={self.n_text} text_delim={self.text_delim_id} "
            f"speech_delim={self.speech_delim_id} eos={self.eos_id} "
            f"pad={self.pad_id} total={self.total_size}"
        )
        Path(path).write_text("\n".join((header, *self.symbols)) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "UnifiedVocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines or not lines[0].startswith(_HEADER_TAG):
            raise VocabError(f"{path}: missing vocab header")
        parts = lines[0].split()
        if parts[1] != f"v{_FORMAT_VERSION}":
            raise VocabError(f"{path}: unsupported vocab version {parts[1]}")
        meta = dict(p.split("=", 1) for p in parts[2:])
        n_text, n_codes = int(meta["n_text"]), int(meta["n_codes"])
        vocab = build_vocab(lines[1 : 1 + n_text], n_codes)
        if tuple(lines[1:]) != vocab.symbols:
            raise VocabError(f"{path}: symbol table does not match header")
        for key, value in (
            ("text_delim", vocab.text_delim_id),
            ("speech_delim", vocab.speech_delim_id),
            ("eos", vocab.eos_id),
            ("pad", vocab.pad_id),
            ("total", vocab.total_size),
        ):
            if int(meta[key]) != value:
                raise VocabError(f"{path}: header {key}={meta[key]} but layout gives {value}")
        return vocab


def build_vocab(text_symbols, n_codes: int) -> UnifiedVocab:
    text_symbols = tuple(text_symbols)
    if n_codes < 1:
        raise VocabError(f"n_codes must be >= 1, got {n_codes}")
    if not text_symbols:
        raise VocabError("text_symbols must be non-empty")
    seen = set()
    reserved = set(SPECIALS)
    for s in text_symbols:
        if not s or any(c.isspace() for c in s):
            raise VocabError(f"text symbol {s!r} is empty or contains whitespace")
        if s in seen:
            raise VocabError(f"duplicate text symbol {s!r}")
        if s in reserved or (s.startswith("[Sp") and s.endswith("]")) or s.startswith("<reserved"):
            raise VocabError(f"text symbol {s!r} collides with a reserved token name")
        seen.add(s)

    used = len(text_symbols) + n_codes + len(SPECIALS)
    total = round_up(used)
    symbols = (
        *text_symbols,
        *(speech_token_name(c) for c in range(n_codes)),
        *SPECIALS,
        *(f"<reserved{i}>" for i in range(total - used)),
    )
    return UnifiedVocab(text_symbols, n_codes, total, symbols)


def speech_id(vocab: UnifiedVocab, code: int) -> int:
    if not 0 <= code < vocab.speech_token_count:
        raise VocabError(f"codec index {code} outside [0, {vocab.speech_token_count})")
    return vocab.speech_start + int(code)


def code_of(vocab: UnifiedVocab, token_id: int) -> int:
    if not vocab.is_speech(token_id):
        raise VocabError(f"token id {token_id} is not in the speech block")
    return int(token_id) - vocab.speech_start
