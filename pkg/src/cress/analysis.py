"""BLEU, paired bootstrap resampling and modality-gap diagnostics.

The modality gap at a decoding step is one minus the cosine similarity of
the last-decoder-layer representations produced from the speech input and
from the transcription, each under its own target prefix.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .data import Triplet, Vocabulary, make_batches
from .decoding import BeamConfig, beam_decode, greedy_decode_batch
from .autodiff import Tensor, no_grad
from .model import EncoderOutput, TranslationModel

NGRAM_ORDER = 4
STRATEGIES = ("teacher_forcing", "greedy", "beam")


# ---------------------------------------------------------------------------
# BLEU


@dataclass
class BleuReport:
    score: float                 # 0..100
    precisions: list[float]      # modified n-gram precisions, 0..100, after smoothing
    brevity_penalty: float
    sys_len: int
    ref_len: int
    correct: list[int]
    total: list[int]

    def __str__(self) -> str:
        prec = "/".join(f"{p:.1f}" for p in self.precisions)
        return (f"BLEU = {self.score:.2f} {prec} (BP = {self.brevity_penalty:.3f} "
                f"hyp_len = {self.sys_len} ref_len = {self.ref_len})")


def _tokens(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def sentence_stats(hyp, ref) -> np.ndarray:
    """[correct_1..4, total_1..4, hyp_len, ref_len] for one segment."""
    hyp, ref = _tokens(hyp), _tokens(ref)
    row = np.zeros(2 * NGRAM_ORDER + 2, dtype=np.int64)
    for n in range(1, NGRAM_ORDER + 1):
        h = Counter(tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1))
        r = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
        row[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        row[NGRAM_ORDER + n - 1] = max(len(hyp) - n + 1, 0)
    row[-2], row[-1] = len(hyp), len(ref)
    return row


def bleu_from_stats(stats_row: np.ndarray, smoothing: str = "exp") -> BleuReport:
    correct = [int(c) for c in stats_row[:NGRAM_ORDER]]
    total = [int(t) for t in stats_row[NGRAM_ORDER:2 * NGRAM_ORDER]]
    sys_len, ref_len = int(stats_row[-2]), int(stats_row[-1])
    fractions = [0.0] * NGRAM_ORDER
    smooth = 1.0
    for n in range(NGRAM_ORDER):
        if total[n] == 0:
            break
        if correct[n] == 0:
            if smoothing == "exp":
                smooth *= 2.0
                fractions[n] = 1.0 / (smooth * total[n])
        else:
            fractions[n] = correct[n] / total[n]
    if sys_len < ref_len:
        bp = math.exp(1.0 - ref_len / sys_len) if sys_len > 0 else 0.0
    else:
        bp = 1.0
    if min(fractions) <= 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in fractions) / NGRAM_ORDER)
    return BleuReport(score, [100.0 * p for p in fractions], bp, sys_len, ref_len, correct, total)


def corpus_bleu(hyps: Sequence, refs: Sequence, smoothing: str = "exp") -> BleuReport:
    """Corpus BLEU over pre-tokenised segments (strings are split on whitespace).

    ``smoothing`` is ``"exp"`` (halve the pseudo-count for each successive
    zero precision) or ``"none"``.
    """
    if len(hyps) == 0:
        raise ValueError("corpus_bleu needs at least one hypothesis")
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if smoothing not in ("exp", "none"):
        raise ValueError(f"unknown smoothing {smoothing!r}")
    total = sum(sentence_stats(h, r) for h, r in zip(hyps, refs))
    return bleu_from_stats(total, smoothing)


def _bleu_vector(stat_sums: np.ndarray) -> np.ndarray:
    return np.array([bleu_from_stats(row).score for row in stat_sums])


def paired_bootstrap(hyps_a: Sequence, hyps_b: Sequence, refs: Sequence,
                     n_resamples: int = 1000, seed: int = 12345) -> float:
    """Fraction of bootstrap resamples on which BLEU(A) <= BLEU(B).

    Small values mean system A is significantly better than system B.
    """
    if not (len(hyps_a) == len(hyps_b) == len(refs)):
        raise ValueError("systems and references must be aligned")
    if n_resamples < 100:
        raise ValueError("use at least 100 resamples")
    if len(refs) == 0:
        raise ValueError("empty test set")
    sa = np.array([sentence_stats(h, r) for h, r in zip(hyps_a, refs)])
    sb = np.array([sentence_stats(h, r) for h, r in zip(hyps_b, refs)])
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(refs), size=(n_resamples, len(refs)))
    bleu_a = _bleu_vector(sa[idx].sum(axis=1))
    bleu_b = _bleu_vector(sb[idx].sum(axis=1))
    return float(np.mean(bleu_a <= bleu_b))


@dataclass
class LengthBucket:
    lo: float
    hi: float
    n: int
    report: BleuReport | None    # None when the bucket is empty


def bleu_by_length(hyps: Sequence, refs: Sequence, bucket_edges: Sequence[float]) -> list[LengthBucket]:
    """Corpus BLEU per reference-length bucket ``[edge_i, edge_{i+1})``."""
    edges = list(bucket_edges)
    if len(edges) < 2 or any(a >= b for a, b in zip(edges, edges[1:])):
        raise ValueError(f"bucket edges must be strictly increasing: {edges}")
    members: list[list[int]] = [[] for _ in edges[:-1]]
    for i, ref in enumerate(refs):
        n = len(_tokens(ref))
        slot = int(np.searchsorted(edges, n, side="right")) - 1
        if slot < 0 or slot >= len(members):
            raise ValueError(f"reference length {n} is not covered by bucket edges {edges}")
        members[slot].append(i)
    out = []
    for (lo, hi), idx in zip(zip(edges, edges[1:]), members):
        report = corpus_bleu([hyps[i] for i in idx], [refs[i] for i in idx]) if idx else None
        out.append(LengthBucket(lo, hi, len(idx), report))
    return out


# ---------------------------------------------------------------------------
# modality gap


def modality_gap(rep_s, rep_x) -> np.ndarray | float:
    """1 − cos(rep_s, rep_x) along the last axis, clipped to [0, 2]."""
    a, b = np.asarray(rep_s, dtype=np.float64), np.asarray(rep_x, dtype=np.float64)
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("modality gap is undefined for a zero representation")
    cos = np.clip((a * b).sum(axis=-1) / (na * nb), -1.0, 1.0)
    gap = 1.0 - cos
    return float(gap) if np.ndim(gap) == 0 else gap


@dataclass(frozen=True)
class GapRecord:
    example: int
    step: int          # 1-based decoding step
    strategy: str
    gap: float


def _encode_pair(model, batch):
    with no_grad():
        enc_s = model.encode_speech(batch.frames, batch.frame_lengths)
        enc_x = model.encode_text(batch.source, batch.source_lengths)
    return enc_s, enc_x


def gap_records(model: TranslationModel, corpus: Sequence[Triplet], vocab: Vocabulary, strategy: str,
                beam_size: int = 8, max_tokens: int = 4096) -> list[GapRecord]:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    records: list[GapRecord] = []
    batches = make_batches(corpus, vocab, max_tokens=max_tokens, seed=None)
    for batch in batches:
        enc_s, enc_x = _encode_pair(model, batch)
        if strategy == "teacher_forcing":
            with no_grad():
                reps_s = model.decode(enc_s, batch.prev_target).reps.data
                reps_x = model.decode(enc_x, batch.prev_target).reps.data
            gaps = modality_gap(reps_s, reps_x)
            for row, ex in enumerate(batch.ids):
                for i in range(int(batch.target_mask[row].sum())):
                    records.append(GapRecord(int(ex), i + 1, strategy, float(gaps[row, i])))
        elif strategy == "greedy":
            hyps_s = greedy_decode_batch(model, enc_s)
            hyps_x = greedy_decode_batch(model, enc_x)
            for ex, hs, hx in zip(batch.ids, hyps_s, hyps_x):
                n = min(len(hs.tokens), len(hx.tokens))
                gaps = modality_gap(hs.reps[:n], hx.reps[:n]) if n else []
                records.extend(GapRecord(int(ex), i + 1, strategy, float(g)) for i, g in enumerate(gaps))
        else:
            cfg = BeamConfig(beam=beam_size, alpha=1.0)
            for row, ex in enumerate(batch.ids):
                single_s = _row(enc_s, row)
                single_x = _row(enc_x, row)
                _, steps_s = beam_decode(model, single_s, cfg, return_step_reps=True)
                _, steps_x = beam_decode(model, single_x, cfg, return_step_reps=True)
                for i, (rs, rx) in enumerate(zip(steps_s, steps_x)):
                    g = modality_gap(rs.mean(axis=0), rx.mean(axis=0))
                    records.append(GapRecord(int(ex), i + 1, strategy, float(g)))
    records.sort(key=lambda r: (r.example, r.step))
    return records


def _row(enc, row):
    length = int(enc.mask[row].sum())
    return EncoderOutput(Tensor(enc.states.data[row:row + 1, :length]), enc.mask[row:row + 1, :length])


@dataclass
class GapCurve:
    strategy: str
    steps: np.ndarray
    mean_gap: np.ndarray
    counts: np.ndarray

    def spearman(self) -> float:
        return float(stats.spearmanr(self.steps, self.mean_gap).statistic)


def curve_from_records(records: Sequence[GapRecord], strategy: str, max_step: int) -> GapCurve:
    sums = np.zeros(max_step)
    counts = np.zeros(max_step, dtype=np.int64)
    for r in records:
        if r.strategy == strategy and r.step <= max_step:
            sums[r.step - 1] += r.gap
            counts[r.step - 1] += 1
    keep = counts > 0
    steps = np.arange(1, max_step + 1)[keep]
    return GapCurve(strategy, steps, sums[keep] / counts[keep], counts[keep])


def gap_curve(model, corpus, vocab, strategy: str, max_step: int = 20, beam_size: int = 8) -> GapCurve:
    """Mean modality gap per decoding step, over the examples that reach the step."""
    return curve_from_records(gap_records(model, corpus, vocab, strategy, beam_size), strategy, max_step)


def kde(samples, grid) -> np.ndarray:
    """Gaussian KDE with Silverman's bandwidth; degenerate samples fall back to a grid-width kernel."""
    samples = np.asarray(samples, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if samples.size > 1 and np.std(samples) > 0:
        return stats.gaussian_kde(samples, bw_method="silverman")(grid)
    width = (grid[-1] - grid[0]) / max(len(grid) - 1, 1)
    z = (grid[:, None] - samples[None, :]) / width
    return np.exp(-0.5 * z * z).sum(axis=1) / (samples.size * width * math.sqrt(2 * math.pi))


@dataclass
class GapDistribution:
    samples: np.ndarray
    grid: np.ndarray
    density: np.ndarray


def gap_distribution(model, corpus, vocab, points: int = 256) -> GapDistribution:
    """Pooled teacher-forced per-position gaps and their KDE on [0, 2]."""
    samples = np.array([r.gap for r in gap_records(model, corpus, vocab, "teacher_forcing")])
    grid = np.linspace(0.0, 2.0, points)
    return GapDistribution(samples, grid, kde(samples, grid))


# ---------------------------------------------------------------------------
# CSV / SVG output


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_gap_records(path, records: Sequence[GapRecord]) -> Path:
    return write_csv(path, ["example", "step", "strategy", "gap"],
                     ((r.example, r.step, r.strategy, r.gap) for r in records))


def write_curve(path, curve: GapCurve) -> Path:
    return write_csv(path, ["step", "mean_gap", "n"], zip(curve.steps, curve.mean_gap, curve.counts))


def write_kde(path, dist: GapDistribution) -> Path:
    return write_csv(path, ["grid", "density"], zip(dist.grid, dist.density))


def write_length_buckets(path, buckets: Sequence[LengthBucket]) -> Path:
    rows = ((b.lo, b.hi, "" if b.report is None else b.report.score, b.n) for b in buckets)
    return write_csv(path, ["lo", "hi", "bleu", "n"], rows)


def plot_svg(path, series: dict[str, tuple[Sequence[float], Sequence[float]]], xlabel: str, ylabel: str,
             title: str = "") -> Path:
    """Line plot of named (x, y) series written as a standalone SVG file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "cress"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (x, y) in series.items():
        ax.plot(x, y, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)
