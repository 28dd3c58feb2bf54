"""Teacher-forced scoring plus greedy and beam-search decoding.

All decoders recompute the full prefix at every step (no incremental state),
which keeps the numerics of a given prefix identical across decoders.
Every generated token comes with the last-decoder-layer representation that
produced it, so the decoders double as probes for modality-gap analysis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .data import Vocabulary, collate
from .model import BOS, EOS, PAD, EncoderOutput, TranslationModel


@dataclass
class DecoderTrace:
    tokens: np.ndarray       # (L,) the prefix fed to the decoder, BOS first
    reps: np.ndarray         # (L, d)
    log_probs: np.ndarray    # (L, V)


@dataclass
class Hypothesis:
    tokens: list[int]                 # generated ids, EOS included when produced
    score: float                      # sum of chosen log-probabilities
    step_log_probs: list[float] = field(default_factory=list)
    reps: np.ndarray | None = None    # (len(tokens), d)
    alpha: float = 0.0

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS

    @property
    def penalized(self) -> float:
        return length_penalized(self.score, len(self.tokens), self.alpha)


@dataclass
class BeamConfig:
    beam: int = 8
    alpha: float = 1.0
    max_len: int | None = None      # default 2·(input length) + 10

    def validate(self) -> None:
        if self.beam < 1:
            raise ValueError("beam size must be at least 1")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError("max_len must be at least 1")


def length_penalized(score: float, length: int, alpha: float) -> float:
    return score / max(length, 1) ** alpha if alpha else score


def encode(model: TranslationModel, source) -> EncoderOutput:
    """Encode one input: a float (T, d_feat) frame matrix or a 1-D array of token ids."""
    if isinstance(source, EncoderOutput):
        return source
    arr = np.asarray(source)
    with no_grad():
        if arr.ndim == 2 and np.issubdtype(arr.dtype, np.floating):
            return model.encode_speech(arr)
        return model.encode_text(arr.astype(np.int64))


def default_max_len(enc: EncoderOutput) -> int:
    return 2 * int(enc.mask.sum(axis=1).max()) + 10


def row_max_lens(enc: EncoderOutput) -> np.ndarray:
    """Per-example output limit ``2·(input length) + 10``."""
    return 2 * enc.mask.sum(axis=1).astype(np.int64) + 10


def _step_log_probs(model, enc, prefix) -> tuple[np.ndarray, np.ndarray]:
    with no_grad():
        out = model.decode(enc, prefix)
    lp = out.log_probs.data[:, -1, :].copy()
    lp[:, PAD] = -np.inf
    lp[:, BOS] = -np.inf
    return lp, out.reps.data[:, -1, :]


def teacher_forced_trace(model: TranslationModel, source, gold) -> DecoderTrace:
    """Trace of the decoder under the gold prefix; ``gold`` holds output ids ending in EOS."""
    gold = np.asarray(gold, dtype=np.int64)
    if gold.size == 0:
        raise ValueError("gold sequence is empty")
    enc = encode(model, source)
    prefix = np.concatenate([[BOS], gold[:-1]])
    with no_grad():
        out = model.decode(enc, prefix[None])
    return DecoderTrace(prefix, out.reps.data[0], out.log_probs.data[0])


def teacher_forced_traces(model: TranslationModel, enc: EncoderOutput, prev_target: np.ndarray):
    """Batched teacher-forced pass; returns (reps, log_probs) as arrays."""
    with no_grad():
        out = model.decode(enc, prev_target)
    return out.reps.data, out.log_probs.data


def _select_rows(enc: EncoderOutput, rows) -> EncoderOutput:
    return EncoderOutput(Tensor(enc.states.data[rows]), enc.mask[rows])


def greedy_decode_batch(model: TranslationModel, enc: EncoderOutput, max_len: int | None = None) -> list[Hypothesis]:
    """Argmax decoding of a batch; ties go to the lowest token id.

    Without ``max_len`` every row stops at its own default limit, so a
    sentence decodes the same way alone or inside a batch.
    """
    b = enc.states.shape[0]
    limits = row_max_lens(enc) if max_len is None else np.full(b, max_len)
    max_len = int(limits.max())
    prefix = np.full((b, 1), BOS, dtype=np.int64)
    alive = np.ones(b, dtype=bool)
    tokens = [[] for _ in range(b)]
    scores = [[] for _ in range(b)]
    reps = [[] for _ in range(b)]
    for _ in range(max_len):
        rows = np.flatnonzero(alive)
        if rows.size == 0:
            break
        sub = enc if rows.size == b else _select_rows(enc, rows)
        lp, rep = _step_log_probs(model, sub, prefix[rows])
        choice = lp.argmax(axis=1)
        step = np.full(b, PAD, dtype=np.int64)
        for j, r in enumerate(rows):
            tok = int(choice[j])
            tokens[r].append(tok)
            scores[r].append(float(lp[j, tok]))
            reps[r].append(rep[j])
            step[r] = tok
            if tok == EOS or len(tokens[r]) >= limits[r]:
                alive[r] = False
        prefix = np.concatenate([prefix, step[:, None]], axis=1)
    return [Hypothesis(t, float(np.sum(s)) if s else 0.0, s, np.array(r)) for t, s, r in zip(tokens, scores, reps)]


def greedy_decode(model: TranslationModel, source, max_len: int | None = None) -> Hypothesis:
    return greedy_decode_batch(model, encode(model, source), max_len)[0]


@dataclass
class _Beam:
    tokens: list[int]
    lps: list[float]
    reps: list[np.ndarray]
    score: float


def beam_decode(model: TranslationModel, source, cfg: BeamConfig | None = None,
                return_step_reps: bool = False):
    """Beam search ranked by ``score / len**alpha``.

    Finished hypotheses leave the beam.  Search ends once ``beam`` finished
    hypotheses exist and no live prefix can still beat the worst of them, or
    when ``max_len`` tokens have been generated (live prefixes are then
    returned unfinished).  With ``return_step_reps`` a list with the
    representations of every live candidate at each step is returned as well.
    """
    cfg = cfg or BeamConfig()
    cfg.validate()
    enc = encode(model, source)
    max_len = cfg.max_len or default_max_len(enc)
    k = cfg.beam
    alive = [_Beam([], [], [], 0.0)]
    finished: list[Hypothesis] = []
    step_reps: list[np.ndarray] = []

    def bound(beam: _Beam) -> float:
        n = len(beam.tokens)
        if cfg.alpha == 0 or beam.score == 0:
            return beam.score
        return max(length_penalized(beam.score, n + 1, cfg.alpha),
                   length_penalized(beam.score, max_len, cfg.alpha))

    for step in range(max_len):
        prefix = np.array([[BOS] + b.tokens for b in alive], dtype=np.int64)
        states = np.broadcast_to(enc.states.data, (len(alive),) + enc.states.shape[1:])
        sub = EncoderOutput(Tensor(states), np.broadcast_to(enc.mask, (len(alive), enc.mask.shape[1])))
        lp, rep = _step_log_probs(model, sub, prefix)
        step_reps.append(rep.copy())
        cand = np.array([b.score for b in alive])[:, None] + lp
        flat = cand.reshape(-1)
        order = np.argsort(-flat, kind="stable")
        vocab = lp.shape[1]
        next_alive: list[_Beam] = []
        for rank, idx in enumerate(order):
            if not np.isfinite(flat[idx]):
                break
            parent, tok = divmod(int(idx), vocab)
            src = alive[parent]
            child = _Beam(src.tokens + [tok], src.lps + [float(lp[parent, tok])],
                          src.reps + [rep[parent]], float(flat[idx]))
            if tok == EOS:
                if rank < k:
                    finished.append(Hypothesis(child.tokens, child.score, child.lps,
                                               np.array(child.reps), cfg.alpha))
            elif len(next_alive) < k:
                next_alive.append(child)
            if len(next_alive) >= k and rank >= k - 1:
                break
        alive = next_alive
        if not alive:
            break
        if len(finished) >= k:
            ranked = sorted((h.penalized for h in finished), reverse=True)
            if max(bound(b) for b in alive) <= ranked[k - 1]:
                break
    else:
        for b in alive:
            finished.append(Hypothesis(b.tokens, b.score, b.lps, np.array(b.reps), cfg.alpha))
    if not finished:
        finished = [Hypothesis(b.tokens, b.score, b.lps, np.array(b.reps), cfg.alpha) for b in alive]
    # stable sort keeps earlier-finished hypotheses ahead on ties
    ranked = sorted(finished, key=lambda h: -h.penalized)
    return (ranked, step_reps) if return_step_reps else ranked


def rescore(model: TranslationModel, source, tokens) -> float:
    """Teacher-forced log-probability of a generated token sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    enc = encode(model, source)
    prefix = np.concatenate([[BOS], tokens[:-1]])
    with no_grad():
        out = model.decode(enc, prefix[None])
    return float(out.log_probs.data[0, np.arange(len(tokens)), tokens].sum())


def encode_batch(model: TranslationModel, batch, modality: str) -> EncoderOutput:
    with no_grad():
        if modality == "speech":
            return model.encode_speech(batch.frames, batch.frame_lengths)
        if modality == "text":
            return model.encode_text(batch.source, batch.source_lengths)
    raise ValueError(f"modality must be 'speech' or 'text', got {modality!r}")


def translate_corpus(model: TranslationModel, corpus, vocab: Vocabulary, modality: str = "speech",
                     strategy: str = "greedy", beam: BeamConfig | None = None,
                     batch_size: int = 32) -> list[list[str]]:
    """Translate every example of ``corpus`` and return word lists in corpus order."""
    if strategy not in ("greedy", "beam"):
        raise ValueError(f"strategy must be 'greedy' or 'beam', got {strategy!r}")
    out: list[list[str]] = []
    for start in range(0, len(corpus), batch_size):
        ids = list(range(start, min(start + batch_size, len(corpus))))
        batch = collate(corpus, vocab, ids)
        enc = encode_batch(model, batch, modality)
        if strategy == "greedy":
            hyps = greedy_decode_batch(model, enc)
        else:
            hyps = [beam_decode(model, EncoderOutput(Tensor(enc.states.data[j:j + 1, :n]), enc.mask[j:j + 1, :n]),
                                beam)[0]
                    for j, n in enumerate(enc.mask.sum(axis=1))]
        out.extend(vocab.decode(h.tokens) for h in hyps)
    return out
