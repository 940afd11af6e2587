"""Vocabulary, token sequences, seeded random streams and the absorbing-mask
forward process shared by every other module."""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Lower bound of the time grid. t is never drawn at 0 because of the 1/t weight.
T_EPS = 1e-4

VOCAB_TABLE_VERSION = 1

_RESERVED = ("pad", "mask", "eos", "bos")
# 60 printable symbols: 26 lowercase letters (the copy/sort content alphabet),
# digits, arithmetic and punctuation, plus a few capitals for delimiters.
_GLYPHS = (
    "abcdefghijklmnopqrstuvwxyz"
    "0123456789"
    "+-*=:,.;_|#()?! /"
    "ANSQRTU"
)


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class InvalidInputError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    glyphs: tuple[str, ...]
    pad_id: int = 0
    mask_id: int = 1
    eos_id: int = 2
    bos_id: int = 3

    def __post_init__(self):
        reserved = (self.pad_id, self.mask_id, self.eos_id, self.bos_id)
        if len(set(reserved)) != 4:
            raise ValueError("reserved token ids must be distinct")
        if self.size < 6:
            raise ValueError("vocabulary needs at least 2 content tokens")
        if any(r >= self.size or r < 0 for r in reserved):
            raise ValueError("reserved ids must be < vocabulary size")
        if len(set(self.glyphs)) != len(self.glyphs):
            raise ValueError("glyphs must be unique")

    @property
    def size(self) -> int:
        return len(self.glyphs)

    @property
    def reserved(self) -> tuple[int, int, int, int]:
        return (self.pad_id, self.mask_id, self.eos_id, self.bos_id)

    def role(self, token: int) -> str:
        for name, rid in zip(_RESERVED, (self.pad_id, self.mask_id, self.eos_id, self.bos_id)):
            if token == rid:
                return name
        return "content"

    def id_of(self, glyph: str) -> int:
        return self._index[glyph]

    @property
    def _index(self) -> dict[str, int]:
        # frozen dataclass: cache through object.__setattr__
        try:
            return self.__dict__["_glyph_index"]
        except KeyError:
            idx = {g: i for i, g in enumerate(self.glyphs)}
            object.__setattr__(self, "_glyph_index", idx)
            return idx

    def encode(self, text: str) -> np.ndarray:
        """Character-level encoding; raises KeyError on unknown characters."""
        return np.array([self._index[c] for c in text], dtype=np.int64)

    def decode(self, ids, stop_at_eos: bool = True) -> str:
        out = []
        for i in np.asarray(ids).tolist():
            if stop_at_eos and i == self.eos_id:
                break
            if i in self.reserved:
                continue
            out.append(self.glyphs[i])
        return "".join(out)

    def dumps(self) -> str:
        buf = io.StringIO()
        buf.write(f"# vocab v{VOCAB_TABLE_VERSION}\n")
        for i, g in enumerate(self.glyphs):
            buf.write(f"{i}\t{g.encode('unicode_escape').decode('ascii')}\t{self.role(i)}\n")
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str) -> "Vocab":
        lines = text.splitlines()
        if not lines or lines[0].strip() != f"# vocab v{VOCAB_TABLE_VERSION}":
            raise ValueError("unsupported vocabulary table header")
        glyphs: list[str] = []
        roles: dict[str, int] = {}
        for line in lines[1:]:
            if not line:
                continue
            idx, glyph, role = line.split("\t")
            if int(idx) != len(glyphs):
                raise ValueError("vocabulary table ids must be contiguous")
            glyphs.append(glyph.encode("ascii").decode("unicode_escape"))
            if role != "content":
                roles[f"{role}_id"] = int(idx)
        return cls(tuple(glyphs), **roles)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.loads(Path(path).read_text())


def default_vocab() -> Vocab:
    """The shared 64-symbol character vocabulary used by all tasks."""
    glyphs = ("<pad>", "<mask>", "<eos>", "<bos>") + tuple(_GLYPHS)
    assert len(glyphs) == 64
    return Vocab(glyphs)


def _label_words(labels: tuple) -> list[int]:
    digest = hashlib.sha256(repr(labels).encode()).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


class RngStream:
    """A named random stream: identical (seed, labels) give identical draws.

    Streams are derived by hashing the label tuple into the seed sequence, so
    streams with different labels are statistically independent.
    """

    def __init__(self, seed: int, *labels):
        self.seed = int(seed)
        self.labels = tuple(labels)
        ss = np.random.SeedSequence(entropy=self.seed & (2**64 - 1),
                                    spawn_key=_label_words(self.labels))
        self._gen = np.random.Generator(np.random.PCG64(ss))
        self.counter = 0

    def __repr__(self):
        return f"RngStream(seed={self.seed}, labels={self.labels}, counter={self.counter})"

    @property
    def key(self) -> tuple:
        return (self.seed,) + self.labels

    def child(self, *labels) -> "RngStream":
        return RngStream(self.seed, *self.labels, *labels)

    def fresh(self) -> "RngStream":
        """A new stream with the same key, rewound to the first draw."""
        return RngStream(self.seed, *self.labels)

    def uniform(self, n: int | None = None):
        self.counter += 1 if n is None else n
        return self._gen.random(n)

    def permutation(self, n: int) -> np.ndarray:
        # ranking n uniforms keeps "one draw per item" accounting explicit
        u = self.uniform(n)
        return np.argsort(u, kind="stable")

    def integers(self, low: int, high: int, n: int | None = None):
        self.counter += 1 if n is None else n
        return self._gen.integers(low, high, size=n)


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "linear"

    def __post_init__(self):
        if self.kind not in ("linear",):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def alpha(self, t: float) -> float:
        return schedule_alpha(self, t)


LINEAR = NoiseSchedule("linear")


def schedule_alpha(sched: NoiseSchedule, t: float) -> float:
    if not (0.0 < t <= 1.0):
        raise DomainError(f"t must lie in (0, 1], got {t}")
    if sched.kind == "linear":
        return 1.0 - t
    raise ValueError(sched.kind)


def sample_time(rng: RngStream, low: float = T_EPS, high: float = 1.0) -> float:
    """t ~ U(low, high] from one uniform draw."""
    u = rng.uniform()
    return high - (high - low) * u


def corrupt(x0, t: float, rng: RngStream, vocab: Vocab,
            sched: NoiseSchedule = LINEAR) -> np.ndarray:
    """Mask each position of ``x0`` independently with probability 1 - alpha_t.

    Consumes exactly one uniform per position, in ascending position order.
    """
    x0 = np.asarray(x0, dtype=np.int64)
    if np.any(x0 == vocab.mask_id):
        raise InvalidInputError("clean sequence already contains the mask token")
    p_mask = 1.0 - schedule_alpha(sched, t)
    u = rng.uniform(len(x0))
    return np.where(u < p_mask, vocab.mask_id, x0)


def corrupt_block(x0, block_index: int, block_len: int, t: float, rng: RngStream,
                  vocab: Vocab, sched: NoiseSchedule = LINEAR) -> np.ndarray:
    """Corrupt only block ``block_index`` (1-based) of ``x0``; all other
    positions are returned untouched."""
    x0 = np.asarray(x0, dtype=np.int64)
    if block_len < 1 or len(x0) % block_len:
        raise DomainError("sequence length must be a multiple of the block length")
    n_blocks = len(x0) // block_len
    if not 1 <= block_index <= n_blocks:
        raise DomainError(f"block index {block_index} outside 1..{n_blocks}")
    lo = (block_index - 1) * block_len
    out = x0.copy()
    out[lo:lo + block_len] = corrupt(x0[lo:lo + block_len], t, rng, vocab, sched)
    return out


def masked_positions(state, vocab: Vocab) -> list[int]:
    return np.flatnonzero(np.asarray(state) == vocab.mask_id).tolist()


def scored_length(response, vocab: Vocab) -> int:
    """Number of leading response positions that count in losses: everything
    up to and including the first eos (the whole response if there is none)."""
    response = np.asarray(response)
    hits = np.flatnonzero(response == vocab.eos_id)
    return int(hits[0]) + 1 if len(hits) else len(response)


def normalize_response(response, vocab: Vocab) -> np.ndarray:
    """Replace everything after the first eos by pad."""
    response = np.array(response, dtype=np.int64)
    n = scored_length(response, vocab)
    response[n:] = vocab.pad_id
    return response
