"""Synthetic speech/transcription/translation triplets, manifests, vocabulary and batching.

The synthetic task: a transcription ``x`` is a uniform random word sequence;
its translation ``y`` maps every word through a fixed bijection and then swaps
each adjacent pair (an odd final word stays put).  The "speech" for ``x``
renders every word as a few noisy copies of a per-word prototype vector.
"""

from __future__ import annotations

import csv
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import BOS, EOS, PAD, UNK

SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
FEATURE_MAGIC = 0x43524653  # "CRFS"
FEATURE_VERSION = 1


@dataclass
class SynthTaskConfig:
    vocab_size: int = 50
    min_len: int = 5
    max_len: int = 30
    min_frames: int = 2
    max_frames: int = 5
    noise: float = 0.1
    d_feat: int = 32
    bijection_seed: int = 1234

    def validate(self) -> None:
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError("need 1 <= min_frames <= max_frames")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    def words(self) -> list[str]:
        width = len(str(self.vocab_size - 1))
        return [f"w{i:0{width}d}" for i in range(self.vocab_size)]


@dataclass
class Triplet:
    speech: np.ndarray          # (T_s, d_feat)
    source: list[str]           # transcription x
    target: list[str]           # translation y
    alignment: list[int] | None = field(default=None, compare=False)   # frames per source word

    def __eq__(self, other) -> bool:
        if not isinstance(other, Triplet):
            return NotImplemented
        return (self.source == other.source and self.target == other.target
                and self.speech.shape == other.speech.shape and np.array_equal(self.speech, other.speech))


class TaskRenderer:
    """Fixed word bijection and word prototypes of one synthetic task."""

    def __init__(self, cfg: SynthTaskConfig):
        cfg.validate()
        self.cfg = cfg
        self.words = cfg.words()
        rng = np.random.default_rng(cfg.bijection_seed)
        perm = rng.permutation(cfg.vocab_size)
        self.mapping = {w: self.words[j] for w, j in zip(self.words, perm)}
        protos = rng.normal(size=(cfg.vocab_size, cfg.d_feat))
        self.prototypes = protos / np.linalg.norm(protos, axis=1, keepdims=True)
        self.word_index = {w: i for i, w in enumerate(self.words)}

    def translate(self, source: Sequence[str]) -> list[str]:
        mapped = [self.mapping[w] for w in source]
        out = list(mapped)
        for i in range(0, len(mapped) - 1, 2):
            out[i], out[i + 1] = mapped[i + 1], mapped[i]
        return out

    def render_speech(self, source: Sequence[str], rng: np.random.Generator) -> tuple[np.ndarray, list[int]]:
        cfg = self.cfg
        if not source:
            raise ValueError("cannot render speech for an empty transcription")
        durations = rng.integers(cfg.min_frames, cfg.max_frames + 1, size=len(source))
        rows = []
        for word, k in zip(source, durations):
            if word not in self.word_index:
                raise ValueError(f"word {word!r} is not in the task vocabulary")
            proto = self.prototypes[self.word_index[word]]
            rows.append(proto + cfg.noise * rng.normal(size=(int(k), cfg.d_feat)))
        return np.concatenate(rows, axis=0), [int(k) for k in durations]


def render_speech(source: Sequence[str], cfg: SynthTaskConfig, seed: int) -> np.ndarray:
    frames, _ = TaskRenderer(cfg).render_speech(source, np.random.default_rng(seed))
    return frames


def generate_synthetic_corpus(cfg: SynthTaskConfig, n: int, seed: int) -> list[Triplet]:
    if n < 1:
        raise ValueError("corpus size must be at least 1")
    task = TaskRenderer(cfg)
    rng = np.random.default_rng(seed)
    corpus = []
    for _ in range(n):
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        source = [task.words[i] for i in rng.integers(0, cfg.vocab_size, size=length)]
        speech, durations = task.render_speech(source, rng)
        corpus.append(Triplet(speech, source, task.translate(source), durations))
    return corpus


# ---------------------------------------------------------------------------
# feature files and manifests


def write_features(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    t, d = frames.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4i", FEATURE_MAGIC, FEATURE_VERSION, t, d))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"feature file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated feature header")
    magic, version, t, d = struct.unpack("<4i", raw[:16])
    if magic != FEATURE_MAGIC or version != FEATURE_VERSION:
        raise ValueError(f"{path}: not a version-{FEATURE_VERSION} feature file")
    if len(raw) != 16 + 4 * t * d:
        raise ValueError(f"{path}: expected {t}x{d} frames")
    return np.frombuffer(raw[16:], dtype="<f4").astype(np.float64).reshape(t, d)


def write_manifest(path, corpus: Sequence[Triplet], feature_dir=None) -> Path:
    """Write ``corpus`` as a TSV manifest plus one feature file per example.

    Features are stored as float32, so a reloaded corpus carries
    float32-rounded speech.
    """
    path = Path(path)
    feature_dir = Path(feature_dir) if feature_dir is not None else path.with_suffix("")
    feature_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for i, ex in enumerate(corpus):
            feat = feature_dir / f"{i:06d}.feat"
            write_features(feat, ex.speech)
            rel = feat.relative_to(path.parent) if feat.is_relative_to(path.parent) else feat
            fh.write(f"{rel}\t{' '.join(ex.source)}\t{' '.join(ex.target)}\n")
    return path


class ManifestError(ValueError):
    pass


def load_manifest(path) -> list[Triplet]:
    path = Path(path)
    corpus = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row_no, row in enumerate(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE), start=1):
            if len(row) != 3:
                raise ManifestError(f"{path}: row {row_no}: expected 3 tab-separated columns, got {len(row)}")
            feat, source, target = row
            source, target = source.split(), target.split()
            if not source or not target:
                raise ManifestError(f"{path}: row {row_no}: empty transcription or translation")
            feat_path = Path(feat)
            if not feat_path.is_absolute():
                feat_path = path.parent / feat_path
            corpus.append(Triplet(read_features(feat_path), source, target))
    return corpus


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    def __init__(self, tokens: Iterable[str]):
        self.itos = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    pad, bos, eos, unk = PAD, BOS, EOS, UNK

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos[len(SPECIALS):]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(line for line in Path(path).read_text(encoding="utf-8").split("\n") if line)


def build_vocab(corpus: Sequence[Triplet]) -> Vocabulary:
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for ex in corpus:
        counts.update(ex.source)
        counts.update(ex.target)
    return Vocabulary(sorted(counts, key=lambda t: (-counts[t], t)))


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class Batch:
    ids: np.ndarray             # (B,) corpus indices
    source: np.ndarray          # (B, Lx) word ids + EOS, padded
    source_lengths: np.ndarray  # (B,)
    prev_target: np.ndarray     # (B, Ly) BOS + y, padded
    target: np.ndarray          # (B, Ly) y + EOS, padded
    target_mask: np.ndarray     # (B, Ly) true on real positions
    frames: np.ndarray          # (B, T, d_feat), zero padded
    frame_lengths: np.ndarray   # (B,)

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def num_tokens(self) -> int:
        return int(self.target_mask.sum())

    @property
    def source_mask(self) -> np.ndarray:
        return np.arange(self.source.shape[1])[None, :] < self.source_lengths[:, None]

    @property
    def frame_mask(self) -> np.ndarray:
        return np.arange(self.frames.shape[1])[None, :] < self.frame_lengths[:, None]


def collate(corpus: Sequence[Triplet], vocab: Vocabulary, ids: Sequence[int]) -> Batch:
    ids = np.asarray(ids, dtype=np.int64)
    exs = [corpus[i] for i in ids]
    src = [vocab.encode(e.source) + [EOS] for e in exs]
    tgt = [vocab.encode(e.target) for e in exs]
    lx = max(len(s) for s in src)
    ly = max(len(t) for t in tgt) + 1
    tf = max(e.speech.shape[0] for e in exs)
    d = exs[0].speech.shape[1]
    b = len(exs)
    source = np.full((b, lx), PAD, dtype=np.int64)
    prev = np.full((b, ly), PAD, dtype=np.int64)
    target = np.full((b, ly), PAD, dtype=np.int64)
    frames = np.zeros((b, tf, d))
    for j, (s, t, e) in enumerate(zip(src, tgt, exs)):
        source[j, :len(s)] = s
        prev[j, :len(t) + 1] = [BOS] + t
        target[j, :len(t) + 1] = t + [EOS]
        frames[j, :e.speech.shape[0]] = e.speech
    return Batch(
        ids=ids,
        source=source,
        source_lengths=np.array([len(s) for s in src]),
        prev_target=prev,
        target=target,
        target_mask=target != PAD,
        frames=frames,
        frame_lengths=np.array([e.speech.shape[0] for e in exs]),
    )


def make_batches(corpus: Sequence[Triplet], vocab: Vocabulary, max_tokens: float = math.inf,
                 max_frames: float = math.inf, seed: int | None = 0, bucket_width: int = 5) -> list[Batch]:
    """Length-bucketed batches under padded token and frame budgets.

    Examples are grouped by target length in buckets of ``bucket_width``
    words, ordered by frame count inside each bucket and packed greedily so
    that ``rows × longest target`` stays within ``max_tokens`` and ``rows ×
    longest speech`` within ``max_frames``.  Batch order is shuffled with
    ``seed`` (``None`` keeps bucket order).
    """
    tokens = [len(ex.target) + 1 for ex in corpus]
    frames = [ex.speech.shape[0] for ex in corpus]
    for i, (nt, nf) in enumerate(zip(tokens, frames)):
        if nt > max_tokens or nf > max_frames:
            raise ValueError(f"example {i} ({nt} tokens, {nf} frames) exceeds the batch limits")
    buckets: dict[int, list[int]] = {}
    for i, nt in enumerate(tokens):
        buckets.setdefault((nt - 1) // bucket_width, []).append(i)
    groups = []
    for key in sorted(buckets):
        members = sorted(buckets[key], key=lambda i: (frames[i], tokens[i], i))
        current: list[int] = []
        top_t = top_f = 0
        for i in members:
            nt, nf = max(top_t, tokens[i]), max(top_f, frames[i])
            if current and ((len(current) + 1) * nt > max_tokens or (len(current) + 1) * nf > max_frames):
                groups.append(current)
                current, nt, nf = [], tokens[i], frames[i]
            current.append(i)
            top_t, top_f = nt, nf
        if current:
            groups.append(current)
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(groups))
        groups = [groups[i] for i in order]
    return [collate(corpus, vocab, g) for g in groups]
