"""Tokenization, wordmaps, feature files and the synthetic caption generator."""

from __future__ import annotations

import json
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
RESERVED = (PAD, START, END, UNK)
PAD_ID, START_ID, END_ID, UNK_ID = 0, 1, 2, 3

ABFT_MAGIC = b"ABFT"
_HEADER = struct.Struct("<4sII")

_EDGE_PUNCT = ".,!?;:\"'()"


class CorpusError(Exception):
    pass


class LengthExceeded(CorpusError):
    pass


class FeatureFormatError(CorpusError):
    """Malformed .abft stream; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class BadMagic(FeatureFormatError):
    pass


class TruncatedPayload(FeatureFormatError):
    pass


class NonFiniteValue(FeatureFormatError):
    pass


def tokenize(text: str) -> list[str]:
    tokens = []
    for raw in text.lower().split():
        tok = raw.strip(_EDGE_PUNCT)
        if tok:
            tokens.append(tok)
    return tokens


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


@dataclass
class WordMap:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:4]) != RESERVED:
            raise ValueError("reserved tokens must occupy ids 0-3")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in wordmap")
        for tok in self.id_to_token:
            if not tok or any(ch.isspace() for ch in tok):
                raise ValueError(f"invalid token {tok!r}")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens: Sequence[str], max_len: int) -> list[int]:
        """``<start> tokens <end>`` as ids, right-padded with ``<pad>`` to ``max_len``."""
        if len(tokens) + 2 > max_len:
            raise LengthExceeded(f"{len(tokens)} tokens plus <start>/<end> exceed max_len={max_len}")
        ids = [START_ID] + [self.token_to_id.get(t, UNK_ID) for t in tokens] + [END_ID]
        return ids + [PAD_ID] * (max_len - len(ids))

    def ids(self, tokens: Sequence[str]) -> list[int]:
        """Bare ids for ``tokens``, no start/end/padding."""
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def decode_ids(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids if i > UNK_ID]

    def to_json(self) -> str:
        return json.dumps(self.token_to_id, ensure_ascii=False, indent=None)

    @classmethod
    def from_json(cls, text: str) -> "WordMap":
        mapping = json.loads(text)
        return cls.from_mapping(mapping)

    @classmethod
    def from_mapping(cls, mapping: dict[str, int]) -> "WordMap":
        by_id = sorted(mapping.items(), key=lambda kv: kv[1])
        if [i for _, i in by_id] != list(range(len(by_id))):
            raise ValueError("wordmap ids must be contiguous from 0")
        return cls([tok for tok, _ in by_id])


def build_wordmap(corpus: Iterable[Sequence[str]], min_count: int = 1) -> WordMap:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(tok for sent in corpus for tok in sent if tok not in RESERVED)
    kept = [tok for tok, c in counts.items() if c >= min_count]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return WordMap(list(RESERVED) + kept)


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """P x D encoded-image features. Held as float64; written to disk as float32."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"feature grid must be a non-empty 2-d array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature grid contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def pixels(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureGrid):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(np.all(self.values == other.values))


def save_features(grid: FeatureGrid) -> bytes:
    payload = np.ascontiguousarray(grid.values, dtype="<f4").tobytes()
    return _HEADER.pack(ABFT_MAGIC, grid.pixels, grid.dim) + payload


def load_features(data: bytes) -> FeatureGrid:
    if len(data) < 4 or data[:4] != ABFT_MAGIC:
        raise BadMagic(f"expected magic {ABFT_MAGIC!r}, found {bytes(data[:4])!r}", 0)
    if len(data) < _HEADER.size:
        raise TruncatedPayload("header ends early", len(data))
    _, p, d = _HEADER.unpack_from(data, 0)
    if p < 1 or d < 1:
        raise TruncatedPayload(f"empty grid P={p} D={d}", 4)
    need = _HEADER.size + 4 * p * d
    if len(data) < need:
        # offset of the first missing float
        have = (len(data) - _HEADER.size) // 4
        raise TruncatedPayload(f"expected {p * d} floats, found {have}", _HEADER.size + 4 * have)
    if len(data) > need:
        raise TruncatedPayload(f"{len(data) - need} trailing bytes after payload", need)
    values = np.frombuffer(data, dtype="<f4", count=p * d, offset=_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NonFiniteValue("non-finite float", _HEADER.size + 4 * int(bad[0]))
    return FeatureGrid(values.reshape(p, d))


def read_feature_file(path: str) -> FeatureGrid:
    with open(path, "rb") as fh:
        return load_features(fh.read())


def write_feature_file(path: str, grid: FeatureGrid) -> None:
    with open(path, "wb") as fh:
        fh.write(save_features(grid))


@dataclass
class CaptionRecord:
    id: str
    features: FeatureGrid | str
    refs: list[list[str]]

    def __post_init__(self):
        if not self.refs:
            raise ValueError(f"record {self.id!r} has no references")
        for ref in self.refs:
            if not ref:
                raise ValueError(f"record {self.id!r} has an empty reference")
            if any(tok in RESERVED for tok in ref):
                raise ValueError(f"record {self.id!r} reference contains a reserved token")

    def grid(self, base_dir: str = ".") -> FeatureGrid:
        if isinstance(self.features, FeatureGrid):
            return self.features
        return read_feature_file(os.path.join(base_dir, self.features))


def read_dataset(path: str, load_features_now: bool = True) -> list[CaptionRecord]:
    """Read a JSON-lines caption dataset; feature paths resolve against the file's directory."""
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            rec = CaptionRecord(obj["id"], obj["features"], [tokenize(r) for r in obj["refs"]])
            if load_features_now:
                rec.features = rec.grid(base)
            records.append(rec)
    return records


def write_dataset(records: Sequence[CaptionRecord], out_dir: str, name: str = "dataset.jsonl") -> str:
    """Write ``records`` as JSONL plus one ``<id>.abft`` per record. Returns the JSONL path."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for rec in records:
        fname = f"{rec.id}.abft"
        write_feature_file(os.path.join(out_dir, fname), rec.grid())
        obj = {"id": rec.id, "features": fname, "refs": [detokenize(r) for r in rec.refs]}
        lines.append(json.dumps(obj, ensure_ascii=False))
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


# --- synthetic data -------------------------------------------------------

def synthetic_vocab(vocab_size: int) -> list[str]:
    width = len(str(vocab_size - 1))
    return [f"w{i:0{width}d}" for i in range(vocab_size)]


def synthetic_codebook(vocab_size: int, dim: int, world_seed: int = 0) -> np.ndarray:
    """Row ``i`` encodes content word ``i``; the last row marks an empty pixel."""
    rng = np.random.default_rng([world_seed, vocab_size, dim])
    return rng.normal(size=(vocab_size + 1, dim))


def _noise_scale(book: np.ndarray) -> float:
    gaps = np.linalg.norm(book[:, None] - book[None], axis=-1)
    np.fill_diagonal(gaps, np.inf)
    # noise norm ~ gap/16, so a nearest-code flip needs an 8-sigma draw
    return min(0.05, float(gaps.min()) / (16 * np.sqrt(book.shape[1])))


def caption_from_features(grid: FeatureGrid, vocab_size: int, world_seed: int = 0) -> list[str]:
    """Invert the synthetic encoding: nearest code per pixel, read until the first empty pixel."""
    book = synthetic_codebook(vocab_size, grid.dim, world_seed)
    words = synthetic_vocab(vocab_size)
    dist = np.linalg.norm(grid.values[:, None, :] - book[None], axis=-1)
    out = []
    for code in dist.argmin(axis=1):
        if code == vocab_size:
            break
        out.append(words[code])
    return out


def gen_synthetic(seed: int, n_items: int, vocab_size: int, P: int, D: int, max_len: int,
                  world_seed: int = 0) -> list[CaptionRecord]:
    """Desk-scale captioning data where each caption is readable from its features.

    Pixel ``p`` carries the (noisy) code of the caption's ``p``-th word; pixels past
    the caption end carry the empty code. ``world_seed`` fixes the codebook, so two
    seeds share one feature space and can serve as train/held-out splits.
    """
    if min(n_items, vocab_size, P, D, max_len) < 1:
        raise ValueError("all sizes must be positive")
    if vocab_size < 5:
        raise ValueError("vocab_size must be >= 5")
    book = synthetic_codebook(vocab_size, D, world_seed)
    noise = _noise_scale(book)
    words = synthetic_vocab(vocab_size)
    rng = np.random.default_rng(seed)
    longest = min(P, max_len)
    shortest = min(2, longest)
    width = len(str(n_items - 1))
    records = []
    for i in range(n_items):
        length = int(rng.integers(shortest, longest + 1))
        ids = rng.integers(0, vocab_size, size=length)
        codes = np.full(P, vocab_size)
        codes[:length] = ids
        values = book[codes] + rng.normal(scale=noise, size=(P, D))
        grid = FeatureGrid(values.astype(np.float32))
        records.append(CaptionRecord(f"item{i:0{width}d}", grid, [[words[j] for j in ids]]))
    return records
