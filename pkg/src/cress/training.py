"""Multi-task (ST + MT) training and the CRESS objective.

CRESS augments the multi-task loss in three ways:

* scheduled sampling: each target-prefix position keeps the gold word with
  probability ``p*`` (decaying with the epoch index) and otherwise takes a
  word drawn with the Gumbel-Max trick from a teacher-forced first pass;
* cross-modal regularisation: a bidirectional KL term between the speech
  and text output distributions at every step, computed on the mixed
  prefixes;
* token-level adaptive training: every token's loss terms are scaled by
  ``B + S·gap`` where ``gap`` is the on-the-fly modality gap at that step.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .analysis import corpus_bleu, modality_gap
from .autodiff import Tape, Tensor, no_grad
from .data import Batch, Triplet, Vocabulary, make_batches
from .decoding import translate_corpus
from .model import BOS, PAD, DropoutStream, TranslationModel, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

UNIFORM_CLAMP = 1e-12


@dataclass
class TrainConfig:
    mode: str = "cress"                 # "cress" or "mtl"
    mu: float = 15.0
    lam: float = 1.0
    base: float = 0.7
    scale: float = 0.05
    adaptive_start_epoch: int = 5
    max_lr: float = 5e-3
    warmup_steps: int = 500
    eps_ls: float = 0.1
    dropout: float = 0.1
    patience: int = 10
    checkpoint_average_k: int = 10
    max_epochs: int = 30
    max_tokens: int = 256
    max_frames: int = 8192
    seed: int = 1
    scheduled_sampling: bool = True
    regularization: bool = True
    adaptive: bool = True
    shared_gumbel: bool = False
    pretrain_mt_epochs: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.mode not in ("cress", "mtl"):
            raise ValueError(f"mode must be 'cress' or 'mtl', got {self.mode!r}")
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.base <= 0:
            raise ValueError("base must be positive")
        if self.scale < 0:
            raise ValueError("scale must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.checkpoint_average_k < 1:
            raise ValueError("checkpoint_average_k must be at least 1")
        if self.warmup_steps < 1 or self.max_lr < 0:
            raise ValueError("warmup_steps must be >= 1 and max_lr >= 0")

    @property
    def uses_sampling(self) -> bool:
        return self.mode == "cress" and self.scheduled_sampling

    @property
    def uses_regularization(self) -> bool:
        return self.mode == "cress" and self.regularization

    @property
    def uses_adaptive(self) -> bool:
        return self.mode == "cress" and self.adaptive

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


# ---------------------------------------------------------------------------
# scheduled sampling


def decay_probability(epoch: float, mu: float) -> float:
    """Probability of keeping the gold word at ``epoch``: μ / (μ + exp(e/μ))."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    return mu / (mu + math.exp(epoch / mu))


@dataclass
class ScheduleState:
    epoch: int = 1
    mu: float = 15.0

    @property
    def p_star(self) -> float:
        return decay_probability(self.epoch, self.mu)


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = np.clip(rng.random(shape), UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -np.log(-np.log(u))


def gumbel_select(logits, rng: np.random.Generator | int | None = None, noise: bool = True):
    """argmax(logits + Gumbel noise) over the last axis; a sample from softmax(logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not noise:
        return logits.argmax(axis=-1)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return (logits + gumbel_noise(logits.shape, rng)).argmax(axis=-1)


@dataclass
class MixedPrefix:
    tokens: np.ndarray        # (B, L) decoder input, BOS first
    mix_draws: np.ndarray     # (B, L) uniform p per position (position 0 unused)
    gold_chosen: np.ndarray   # (B, L) true where the gold word was kept
    predicted: np.ndarray     # (B, L) Gumbel-Max candidates for each position


def build_mixed_prefix(log_probs, gold_prefix, p_star: float, rng: np.random.Generator,
                       mask: np.ndarray | None = None, noise: np.ndarray | None = None) -> MixedPrefix:
    """Mix gold and sampled words into a decoder input prefix.

    ``log_probs[b, j]`` is the teacher-forced distribution for the word at
    prefix position ``j + 1``.  Position 0 (BOS) and padding are never
    replaced.  ``noise`` overrides the Gumbel draws (used to share them
    between modalities).
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    gold = np.asarray(gold_prefix, dtype=np.int64)
    squeeze = gold.ndim == 1
    if squeeze:
        log_probs, gold = log_probs[None], gold[None]
    b, length = gold.shape
    mask = np.ones_like(gold, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(b, length)
    logits = log_probs[:, : length - 1].copy()
    logits[..., PAD] = -np.inf
    logits[..., BOS] = -np.inf
    if noise is None:
        noise = gumbel_noise(logits.shape, rng)
    sampled = (logits + noise[:, : length - 1]).argmax(axis=-1)
    predicted = np.concatenate([np.full((b, 1), BOS), sampled], axis=1)
    draws = rng.random((b, length))
    keep = draws <= p_star
    keep[:, 0] = True
    keep |= ~mask
    tokens = np.where(keep, gold, predicted)
    if squeeze:
        return MixedPrefix(tokens[0], draws[0], keep[0], predicted[0])
    return MixedPrefix(tokens, draws, keep, predicted)


def token_weights(gaps, base: float, scale: float) -> np.ndarray:
    gaps = np.asarray(gaps, dtype=np.float64)
    if gaps.size and (gaps.min() < 0.0 or gaps.max() > 2.0):
        raise ValueError("modality gaps must lie in [0, 2]")
    return base + scale * gaps


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossBreakdown:
    st: float
    mt: float
    reg: float
    total: float
    weights: np.ndarray = field(repr=False)     # per real target token
    gaps: np.ndarray = field(repr=False)        # per real target token (NaN when not computed)
    objective: Tensor | None = field(default=None, repr=False)
    ntokens: int = 0


def _weighted_ce(log_probs: Tensor, batch: Batch, eps_ls: float, weights: np.ndarray | None) -> Tensor:
    per_token = ad.cross_entropy_label_smoothed(log_probs, batch.target, eps_ls, batch.target_mask)
    if weights is not None:
        per_token = per_token * weights
    return per_token.sum()


def _finish(st_sum, mt_sum, reg_sum, lam, batch, weights, gaps) -> LossBreakdown:
    ntok = batch.num_tokens
    st = st_sum * (1.0 / ntok)
    mt = mt_sum * (1.0 / ntok)
    objective = st + mt
    reg_value = 0.0
    if reg_sum is not None:
        reg = reg_sum * (1.0 / ntok)
        reg_value = reg.item()
        if lam:
            objective = objective + reg * lam
    mask = batch.target_mask
    w = np.ones(ntok) if weights is None else weights[mask]
    g = np.full(ntok, np.nan) if gaps is None else gaps[mask]
    return LossBreakdown(st.item(), mt.item(), reg_value, objective.item(), w, g, objective, ntok)


def mtl_loss(model: TranslationModel, batch: Batch, cfg: TrainConfig,
             dropout: DropoutStream | None = None) -> LossBreakdown:
    """Teacher-forced ST + MT cross-entropy, normalised by target tokens."""
    enc_s = model.encode_speech(batch.frames, batch.frame_lengths, dropout)
    enc_x = model.encode_text(batch.source, batch.source_lengths, dropout)
    out_s = model.decode(enc_s, batch.prev_target, dropout)
    out_x = model.decode(enc_x, batch.prev_target, dropout)
    st = _weighted_ce(out_s.log_probs, batch, cfg.eps_ls, None)
    mt = _weighted_ce(out_x.log_probs, batch, cfg.eps_ls, None)
    return _finish(st, mt, None, 0.0, batch, None, None)


def mt_loss(model: TranslationModel, batch: Batch, cfg: TrainConfig,
            dropout: DropoutStream | None = None) -> Tensor:
    """Text-only loss used for optional MT pre-training."""
    enc_x = model.encode_text(batch.source, batch.source_lengths, dropout)
    out_x = model.decode(enc_x, batch.prev_target, dropout)
    return _weighted_ce(out_x.log_probs, batch, cfg.eps_ls, None) * (1.0 / batch.num_tokens)


def cress_loss(model: TranslationModel, batch: Batch, schedule: ScheduleState, cfg: TrainConfig,
               rng: np.random.Generator, dropout: DropoutStream | None = None,
               adaptive_active: bool | None = None) -> LossBreakdown:
    """The full CRESS objective for one batch.

    With sampling, regularisation and adaptive weighting all disabled this is
    the multi-task loss, consuming dropout seeds in the same order.
    """
    sampling = cfg.uses_sampling
    regularize = cfg.uses_regularization
    adaptive = cfg.uses_adaptive if adaptive_active is None else (adaptive_active and cfg.uses_adaptive)

    enc_s = model.encode_speech(batch.frames, batch.frame_lengths, dropout)
    enc_x = model.encode_text(batch.source, batch.source_lengths, dropout)
    prefix_s = prefix_x = batch.prev_target
    if sampling:
        # first pass: gradient-free, parallel over positions, decoder dropout off
        with no_grad():
            lp_s = model.decode(type(enc_s)(Tensor(enc_s.states.data), enc_s.mask), batch.prev_target).log_probs.data
            lp_x = model.decode(type(enc_x)(Tensor(enc_x.states.data), enc_x.mask), batch.prev_target).log_probs.data
        p_star = schedule.p_star
        noise_s = gumbel_noise(lp_s[:, :-1].shape, rng)
        noise_x = noise_s if cfg.shared_gumbel else gumbel_noise(lp_x[:, :-1].shape, rng)
        prefix_s = build_mixed_prefix(lp_s, batch.prev_target, p_star, rng, batch.target_mask, noise_s).tokens
        prefix_x = build_mixed_prefix(lp_x, batch.prev_target, p_star, rng, batch.target_mask, noise_x).tokens

    out_s = model.decode(enc_s, prefix_s, dropout)
    out_x = model.decode(enc_x, prefix_x, dropout)

    # gaps are always measured (and logged); they only weight the loss once adaptive training is on
    mask = batch.target_mask
    gaps = np.zeros(batch.target.shape)
    gaps[mask] = modality_gap(out_s.reps.data[mask], out_x.reps.data[mask])
    weights = token_weights(gaps, cfg.base, cfg.scale) * mask if adaptive else None
    st = _weighted_ce(out_s.log_probs, batch, cfg.eps_ls, weights)
    mt = _weighted_ce(out_x.log_probs, batch, cfg.eps_ls, weights)
    reg = None
    if regularize:
        kl = ad.kl_bidirectional(out_s.log_probs, out_x.log_probs)
        token_w = batch.target_mask.astype(np.float64) if weights is None else weights
        reg = (kl * token_w).sum()
    return _finish(st, mt, reg, cfg.lam if regularize else 0.0, batch, weights, gaps)


# ---------------------------------------------------------------------------
# optimisation


def lr_schedule(step: int, warmup: int, max_lr: float) -> float:
    """Linear warm-up to ``max_lr`` then inverse square-root decay."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    return max_lr * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class OptimizerState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], beta1=0.9, beta2=0.98, eps=1e-8) -> "OptimizerState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params],
                   beta1, beta2, eps)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimizerState,
              lr: float) -> OptimizerState:
    """One in-place Adam update with bias correction."""
    if len(params) != len(state.m):
        raise ValueError("optimizer state does not match the parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# training loop


class TrainingError(RuntimeError):
    pass


def sub_seed(*keys) -> int:
    """Deterministic 63-bit seed from integer keys and short strings."""
    ints = [k if isinstance(k, int) else int.from_bytes(str(k).encode(), "little") for k in keys]
    return int(np.random.SeedSequence(ints).generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> 1)


@dataclass
class TrainResult:
    model: TranslationModel             # checkpoint average of the last k epochs
    log: list[dict]
    checkpoints: list[Path]
    last_model: TranslationModel
    stats: dict = field(default_factory=dict)


def evaluate_bleu(model: TranslationModel, corpus: Sequence[Triplet], vocab: Vocabulary,
                  modality: str = "speech") -> float:
    hyps = translate_corpus(model, corpus, vocab, modality)
    return corpus_bleu(hyps, [ex.target for ex in corpus]).score


def _snapshot(model: TranslationModel) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.params.items()}


def train(model: TranslationModel, train_corpus: Sequence[Triplet], dev_corpus: Sequence[Triplet],
          vocab: Vocabulary, cfg: TrainConfig, out_dir=None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train in place, evaluate dev BLEU every epoch, stop early, average the last checkpoints.

    With ``out_dir`` every epoch writes ``checkpoints/epoch{e:03d}.ckpt``
    (older than the last ``checkpoint_average_k`` are pruned) and a
    ``metrics.jsonl`` row.
    """
    cfg.validate()
    if model.config.dropout != cfg.dropout:
        model.config = replace(model.config, dropout=cfg.dropout)
    params = model.parameters()
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.write_text("")

    if cfg.pretrain_mt_epochs:
        _pretrain_mt(model, train_corpus, vocab, cfg)

    state = OptimizerState.for_params(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rows: list[dict] = []
    snapshots: list[dict[str, np.ndarray]] = []
    paths: list[Path] = []
    best = -math.inf
    since_best = 0
    weight_min, weight_max = math.inf, -math.inf
    for epoch in range(1, cfg.max_epochs + 1):
        schedule = ScheduleState(epoch, cfg.mu)
        adaptive_active = cfg.uses_adaptive and epoch > cfg.adaptive_start_epoch
        batches = make_batches(train_corpus, vocab, cfg.max_tokens, cfg.max_frames,
                               seed=sub_seed(cfg.seed, "batches", epoch))
        sums = dict(st=0.0, mt=0.0, reg=0.0, total=0.0, w=0.0, g=0.0, gn=0, tok=0)
        lr = 0.0
        for bi, batch in enumerate(batches):
            lr = lr_schedule(state.step + 1, cfg.warmup_steps, cfg.max_lr)
            drop = DropoutStream(cfg.dropout, sub_seed(cfg.seed, "dropout", epoch, bi)) if cfg.dropout > 0 else None
            rng = np.random.default_rng(sub_seed(cfg.seed, "sampling", epoch, bi))
            with Tape() as tape:
                if cfg.mode == "mtl":
                    loss = mtl_loss(model, batch, cfg, drop)
                else:
                    loss = cress_loss(model, batch, schedule, cfg, rng, drop, adaptive_active)
            if not math.isfinite(loss.total):
                raise TrainingError(f"non-finite loss {loss.total} at epoch {epoch}, batch {bi}")
            ad.zero_grads(params)
            tape.backward(loss.objective)
            adam_step(params, [p.grad for p in params], state, lr)
            n = loss.ntokens
            sums["st"] += loss.st * n
            sums["mt"] += loss.mt * n
            sums["reg"] += loss.reg * n
            sums["total"] += loss.total * n
            sums["w"] += float(loss.weights.sum())
            sums["tok"] += n
            if not np.isnan(loss.gaps).all():
                sums["g"] += float(loss.gaps.sum())
                sums["gn"] += n
            if adaptive_active:
                weight_min = min(weight_min, float(loss.weights.min()))
                weight_max = max(weight_max, float(loss.weights.max()))
        ad.zero_grads(params)

        dev_bleu = evaluate_bleu(model, dev_corpus, vocab, "speech")
        tok = max(sums["tok"], 1)
        row = {
            "epoch": epoch,
            "step": state.step,
            "p_star": schedule.p_star if cfg.uses_sampling else 1.0,
            "L_ST": sums["st"] / tok,
            "L_MT": sums["mt"] / tok,
            "L_Reg": sums["reg"] / tok,
            "total": sums["total"] / tok,
            "mean_w": sums["w"] / tok,
            "mean_G": sums["g"] / sums["gn"] if sums["gn"] else None,
            "dev_bleu": dev_bleu,
            "lr": lr,
        }
        rows.append(row)
        log.info("epoch %d: %s", epoch, json.dumps(row))
        if out_dir is not None:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")
            path = ckpt_dir / f"epoch{epoch:03d}.ckpt"
            save_checkpoint(path, model, _optimizer_arrays(state), {"epoch": epoch, "dev_bleu": dev_bleu})
            paths.append(path)
            while len(paths) > cfg.checkpoint_average_k:
                paths.pop(0).unlink()
        else:
            snapshots.append(_snapshot(model))
            if len(snapshots) > cfg.checkpoint_average_k:
                snapshots.pop(0)
        if on_epoch is not None:
            on_epoch(row)

        if dev_bleu > best:
            best, since_best = dev_bleu, 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    last = model.copy()
    if paths:
        averaged = average_checkpoints(paths, cfg.checkpoint_average_k)
    else:
        averaged = _average_arrays(model, snapshots)
    stats = {"weight_min": weight_min, "weight_max": weight_max, "epochs": len(rows)}
    return TrainResult(averaged, rows, paths, last, stats)


def _pretrain_mt(model, corpus, vocab, cfg: TrainConfig) -> None:
    params = model.parameters()
    state = OptimizerState.for_params(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    for epoch in range(1, cfg.pretrain_mt_epochs + 1):
        batches = make_batches(corpus, vocab, cfg.max_tokens, cfg.max_frames,
                               seed=sub_seed(cfg.seed, "mt-batches", epoch))
        for bi, batch in enumerate(batches):
            lr = lr_schedule(state.step + 1, cfg.warmup_steps, cfg.max_lr)
            drop = DropoutStream(cfg.dropout, sub_seed(cfg.seed, "mt-dropout", epoch, bi)) if cfg.dropout > 0 else None
            with Tape() as tape:
                loss = mt_loss(model, batch, cfg, drop)
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite MT pre-training loss at epoch {epoch}, batch {bi}")
            ad.zero_grads(params)
            tape.backward(loss)
            adam_step(params, [p.grad for p in params], state, lr)
    ad.zero_grads(params)


def _optimizer_arrays(state: OptimizerState) -> dict[str, np.ndarray]:
    arrays = {"adam.step": np.array([state.step], dtype=np.float64)}
    for i, (m, v) in enumerate(zip(state.m, state.v)):
        arrays[f"adam.m.{i}"] = m
        arrays[f"adam.v.{i}"] = v
    return arrays


def _average_arrays(model: TranslationModel, snapshots: Sequence[dict[str, np.ndarray]]) -> TranslationModel:
    averaged = model.copy()
    for name, p in averaged.params.items():
        # sorting across checkpoints makes the sum independent of their order
        stacked = np.sort(np.stack([s[name] for s in snapshots]), axis=0)
        p.data = stacked.sum(axis=0) / len(snapshots)
    return averaged


def average_checkpoints(paths: Sequence, k: int | None = None) -> TranslationModel:
    """Elementwise mean of the parameters in the last ``k`` checkpoints."""
    paths = list(paths)
    if not paths:
        raise ValueError("need at least one checkpoint")
    chosen = paths[-k:] if k else paths
    models = [load_checkpoint(p)[0] for p in chosen]
    base = models[0]
    for p, m in zip(chosen[1:], models[1:]):
        if asdict(m.config) != asdict(base.config):
            raise ValueError(f"checkpoint {p} has a different model configuration")
    return _average_arrays(base, [{k2: t.data for k2, t in m.params.items()} for m in models])
