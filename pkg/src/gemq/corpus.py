"""Character tokenizer, the bundled text corpus and data splits."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

HELDOUT_FRACTION = 0.1


@dataclass(frozen=True)
class Alphabet:
    """Maps the byte values present in a corpus to contiguous token ids."""

    symbols: tuple[int, ...]

    @classmethod
    def from_text(cls, text: str) -> "Alphabet":
        data = text.encode("latin-1", errors="replace")
        return cls(tuple(sorted(set(data))))

    @property
    def size(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> np.ndarray:
        lookup = np.full(256, -1, dtype=np.int64)
        lookup[list(self.symbols)] = np.arange(self.size)
        raw = np.frombuffer(text.encode("latin-1", errors="replace"), dtype=np.uint8)
        ids = lookup[raw]
        if (ids < 0).any():
            bad = sorted({chr(b) for b in raw[ids < 0]})
            raise ValueError(f"characters outside the alphabet: {bad!r}")
        return ids

    def decode(self, ids) -> str:
        return bytes(self.symbols[i] for i in ids).decode("latin-1")


def builtin_corpus(n_chars: int = 110_000) -> str:
    """English reference prose shipped with CPython (``pydoc_data``).

    Whitespace runs are collapsed and non-ASCII characters dropped so the
    alphabet stays below 128 symbols.
    """
    from pydoc_data.topics import topics

    text = "\n".join(topics[key] for key in sorted(topics))
    text = "".join(ch for ch in text if 32 <= ord(ch) < 127 or ch == "\n")
    text = re.sub(r"[ \t]+", " ", text)
    text = re.sub(r"\n\s*\n+", "\n", text)
    text = re.sub(r"\n ", "\n", text)
    return text[:n_chars]


def split_corpus(text: str, heldout_fraction: float = HELDOUT_FRACTION) -> tuple[str, str]:
    """Return ``(train, heldout)``; the held-out part is the tail of the text."""
    cut = int(round(len(text) * (1.0 - heldout_fraction)))
    return text[:cut], text[cut:]


def sample_windows(ids: np.ndarray, n: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` random windows of ``seq_len + 1`` tokens (inputs plus shifted targets)."""
    if len(ids) < seq_len + 1:
        raise ValueError(f"need at least {seq_len + 1} tokens, have {len(ids)}")
    starts = rng.integers(0, len(ids) - seq_len, size=n)
    return np.stack([ids[s : s + seq_len + 1] for s in starts])


def calibration_windows(ids: np.ndarray, n: int, seq_len: int, seed: int) -> np.ndarray:
    """Fixed calibration set: ``n`` random windows drawn from training ids."""
    rng = np.random.default_rng([seed, 0xCA11B])
    return sample_windows(ids, n, seq_len, rng)


def tiled_windows(ids: np.ndarray, seq_len: int) -> np.ndarray:
    """Non-overlapping evaluation windows covering ``ids`` (remainder dropped)."""
    n = (len(ids) - 1) // seq_len
    if n == 0:
        raise ValueError(f"text too short for a window of {seq_len + 1} tokens")
    return np.stack([ids[i * seq_len : i * seq_len + seq_len + 1] for i in range(n)])
