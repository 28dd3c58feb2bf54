"""Command-line experiments: data generation, training, decoding, evaluation and gap analysis.

Every setting lives in one flat namespace of dotted keys (``train.mu``,
``model.d_model``, ...).  Values come from the defaults, then an optional
TOML file (``--config``), then ``--section.key value`` flags.  The resolved
configuration is written next to the outputs of every command.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path


from . import analysis
from .data import (SynthTaskConfig, Vocabulary, build_vocab, generate_synthetic_corpus, load_manifest,
                   write_manifest)
from .decoding import BeamConfig, translate_corpus
from .model import ModelConfig, init_parameters, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainingError, sub_seed, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("cress")

OUTPUT_ROOT_ENV = "CRESS_OUTPUT_ROOT"
SPLITS = ("train", "dev", "test")


@dataclass
class CorpusConfig:
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 1
    output_root: str = ""        # empty: $CRESS_OUTPUT_ROOT, else ./runs
    data_dir: str = ""           # empty: <output_root>/data
    log_level: str = "INFO"


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    task: SynthTaskConfig = field(default_factory=SynthTaskConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    beam: BeamConfig = field(default_factory=BeamConfig)

    # training seeds are derived from run.seed
    HIDDEN = {("train", "seed"), ("model", "vocab_size"), ("model", "dropout"), ("model", "d_feat")}

    def sections(self):
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def flat(self) -> dict[str, object]:
        out = {}
        for section, obj in self.sections():
            for f in fields(obj):
                if (section, f.name) not in self.HIDDEN:
                    out[f"{section}.{f.name}"] = getattr(obj, f.name)
        return out

    def field_types(self) -> dict[str, type]:
        types = {}
        for section, obj in self.sections():
            for f in fields(obj):
                if (section, f.name) not in self.HIDDEN:
                    types[f"{section}.{f.name}"] = type(getattr(obj, f.name))
        return types

    def set(self, key: str, value) -> None:
        types = self.field_types()
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        section, name = key.split(".", 1)
        setattr(getattr(self, section), name, coerce(key, value, types[key]))

    def validate(self) -> None:
        for section, obj in self.sections():
            if hasattr(obj, "validate"):
                try:
                    obj.validate()
                except ValueError as exc:
                    raise ConfigError(f"{section}: {exc}") from None
        for key in ("corpus.n_train", "corpus.n_dev", "corpus.n_test"):
            if self.flat()[key] < 1:
                raise ConfigError(f"{key} must be at least 1")

    # -- derived paths and seeds ------------------------------------------------

    @property
    def output_root(self) -> Path:
        return Path(self.run.output_root or os.environ.get(OUTPUT_ROOT_ENV) or "runs")

    @property
    def data_dir(self) -> Path:
        return Path(self.run.data_dir) if self.run.data_dir else self.output_root / "data"

    @property
    def run_dir(self) -> Path:
        return self.output_root / self.run.name

    def seed_for(self, *names) -> int:
        return sub_seed(self.run.seed, *names)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return replace(self.model, vocab_size=vocab_size, dropout=self.train.dropout, d_feat=self.task.d_feat)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed_for("train"))


class ConfigError(ValueError):
    pass


def coerce(key: str, value, kind: type):
    if kind is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("true", "1", "yes", "on"):
            return True
        if text in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if kind is str:
        return str(value)
    if kind is type(None):
        # optional integers such as beam.max_len
        if value is None or value == "":
            return None
        kind = int
    try:
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from None


def _flatten(table: dict, prefix: str = "") -> dict[str, object]:
    out = {}
    for k, v in table.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config_file(path) -> dict[str, object]:
    try:
        with open(path, "rb") as fh:
            return _flatten(tomllib.load(fh))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return json.dumps("" if v is None else str(v))


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in cfg.flat().items() if v is not None)


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML file with flat dotted keys")
    for key in ExperimentConfig().flat():
        parser.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cress", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus and manifests")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train an MTL or CRESS model")
    _add_config_flags(p)
    p.add_argument("--mode", choices=("mtl", "cress"))
    p.add_argument("--no-scheduled-sampling", action="store_true")
    p.add_argument("--no-regularization", action="store_true")
    p.add_argument("--no-adaptive", action="store_true")

    p = sub.add_parser("translate", help="decode a split with a trained model")
    _add_config_flags(p)
    p.add_argument("--checkpoint", help="defaults to <run_dir>/model.ckpt")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--modality", choices=("speech", "text"), default="speech")
    p.add_argument("--strategy", choices=("greedy", "beam"), default="beam")
    p.add_argument("--output", help="hypothesis file (default inside the run directory)")

    p = sub.add_parser("evaluate", help="BLEU, BLEU by length and paired bootstrap")
    _add_config_flags(p)
    p.add_argument("--hyps", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--baseline", help="hypothesis file of a system to test against")
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--length-edges", default="0,10,20,31",
                   help="comma-separated reference-length bucket edges")

    p = sub.add_parser("gap-analyze", help="modality-gap distribution and per-step curves")
    _add_config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=SPLITS, default="dev")
    p.add_argument("--max-step", type=int, default=20)
    p.add_argument("--strategies", default="teacher_forcing,greedy,beam")

    p = sub.add_parser("ablate", help="train and score every on/off combination of the three CRESS parts")
    _add_config_flags(p)
    p.add_argument("--strategy", choices=("greedy", "beam"), default="greedy")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config:
        for key, value in load_config_file(args.config).items():
            cfg.set(key, value)
    for name, value in vars(args).items():
        if name.startswith("cfg:") and value is not None:
            cfg.set(name[4:], value)
    if getattr(args, "mode", None):
        cfg.train.mode = args.mode
    if getattr(args, "no_scheduled_sampling", False):
        cfg.train.scheduled_sampling = False
    if getattr(args, "no_regularization", False):
        cfg.train.regularization = False
    if getattr(args, "no_adaptive", False):
        cfg.train.adaptive = False
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# commands


def _write_resolved(cfg: ExperimentConfig, directory: Path, command: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"config.{command}.toml").write_text(dump_config(cfg), encoding="utf-8")


def _load_split(cfg: ExperimentConfig, split: str):
    path = cfg.data_dir / f"{split}.tsv"
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path} (run gen-data first)")
    return load_manifest(path)


def _load_vocab(cfg: ExperimentConfig) -> Vocabulary:
    path = cfg.data_dir / "vocab.txt"
    if not path.is_file():
        raise FileNotFoundError(f"vocabulary not found: {path} (run gen-data first)")
    return Vocabulary.load(path)


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    out = cfg.data_dir
    _write_resolved(cfg, out, "gen-data")
    sizes = {"train": cfg.corpus.n_train, "dev": cfg.corpus.n_dev, "test": cfg.corpus.n_test}
    corpora = {}
    for split, n in sizes.items():
        corpora[split] = generate_synthetic_corpus(cfg.task, n, cfg.seed_for("data", split))
        write_manifest(out / f"{split}.tsv", corpora[split], out / f"{split}_features")
    build_vocab(corpora["train"]).save(out / "vocab.txt")
    print(f"wrote {sum(sizes.values())} examples to {out}")
    return 0


def run_training(cfg: ExperimentConfig, run_dir: Path, corpora=None, vocab=None):
    train_set = corpora["train"] if corpora else _load_split(cfg, "train")
    dev_set = corpora["dev"] if corpora else _load_split(cfg, "dev")
    vocab = vocab or _load_vocab(cfg)
    model = init_parameters(cfg.model_config(len(vocab)), cfg.seed_for("init"))
    _write_resolved(cfg, run_dir, "train")
    result = train(model, train_set, dev_set, vocab, cfg.train_config(), run_dir)
    save_checkpoint(run_dir / "model.ckpt", result.model, meta={"epochs": len(result.log)})
    return result


def cmd_train(cfg: ExperimentConfig, args) -> int:
    result = run_training(cfg, cfg.run_dir)
    last = result.log[-1]
    print(f"trained {len(result.log)} epochs; last dev BLEU {last['dev_bleu']:.2f}; "
          f"model written to {cfg.run_dir / 'model.ckpt'}")
    return 0


def write_hyps(path: Path, hyps) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(" ".join(h) + "\n" for h in hyps), encoding="utf-8")
    return path


def read_hyps(path) -> list[list[str]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"hypothesis file not found: {path}")
    return [line.split() for line in path.read_text(encoding="utf-8").split("\n")[:-1]]


def cmd_translate(cfg: ExperimentConfig, args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint or cfg.run_dir / "model.ckpt")
    corpus = _load_split(cfg, args.split)
    vocab = _load_vocab(cfg)
    hyps = translate_corpus(model, corpus, vocab, args.modality, args.strategy, cfg.beam)
    out = Path(args.output) if args.output else cfg.run_dir / f"hyps.{args.split}.{args.modality}.{args.strategy}.txt"
    _write_resolved(cfg, out.parent, "translate")
    write_hyps(out, hyps)
    print(f"wrote {len(hyps)} hypotheses to {out}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    refs = [ex.target for ex in _load_split(cfg, args.split)]
    hyps = read_hyps(args.hyps)
    if len(hyps) != len(refs):
        raise ValueError(f"{args.hyps} has {len(hyps)} lines but the {args.split} split has {len(refs)} examples")
    edges = [float(x) for x in args.length_edges.split(",")]
    report = analysis.corpus_bleu(hyps, refs)
    result = {"hyps": str(args.hyps), "split": args.split, "bleu": report.score,
              "precisions": report.precisions, "brevity_penalty": report.brevity_penalty,
              "sys_len": report.sys_len, "ref_len": report.ref_len}
    if args.baseline:
        base = read_hyps(args.baseline)
        result["baseline"] = str(args.baseline)
        result["baseline_bleu"] = analysis.corpus_bleu(base, refs).score
        result["p_value"] = analysis.paired_bootstrap(hyps, base, refs, args.resamples, cfg.seed_for("bootstrap"))
    out_dir = Path(args.hyps).parent
    stem = Path(args.hyps).stem
    _write_resolved(cfg, out_dir, "evaluate")
    analysis.write_length_buckets(out_dir / f"{stem}.length_buckets.csv", analysis.bleu_by_length(hyps, refs, edges))
    (out_dir / f"{stem}.bleu.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(report)
    if "p_value" in result:
        print(f"baseline BLEU = {result['baseline_bleu']:.2f}; paired bootstrap p = {result['p_value']:.4f}")
    return 0


def cmd_gap_analyze(cfg: ExperimentConfig, args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint or cfg.run_dir / "model.ckpt")
    corpus = _load_split(cfg, args.split)
    vocab = _load_vocab(cfg)
    strategies = [s for s in args.strategies.split(",") if s]
    for s in strategies:
        if s not in analysis.STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}")
    out = cfg.run_dir / "gap"
    _write_resolved(cfg, out, "gap-analyze")
    series = {}
    for strategy in strategies:
        records = analysis.gap_records(model, corpus, vocab, strategy, cfg.beam.beam)
        analysis.write_gap_records(out / f"records.{strategy}.csv", records)
        curve = analysis.curve_from_records(records, strategy, args.max_step)
        analysis.write_curve(out / f"curve.{strategy}.csv", curve)
        series[strategy] = (curve.steps, curve.mean_gap)
        print(f"{strategy}: spearman(step, gap) = {curve.spearman():.3f}")
    dist = analysis.gap_distribution(model, corpus, vocab)
    analysis.write_kde(out / "kde.csv", dist)
    analysis.plot_svg(out / "curves.svg", series, "decoding step", "mean modality gap")
    analysis.plot_svg(out / "kde.svg", {"teacher forcing": (dist.grid, dist.density)}, "modality gap", "density")
    print(f"mean teacher-forced gap {dist.samples.mean():.4f}; outputs in {out}")
    return 0


ABLATION_FLAGS = ("scheduled_sampling", "regularization", "adaptive")


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    vocab = _load_vocab(cfg)
    corpora = {s: _load_split(cfg, s) for s in SPLITS}
    root = cfg.run_dir / "ablation"
    _write_resolved(cfg, root, "ablate")
    rows = []
    for combo in itertools.product((True, False), repeat=3):
        cell = replace(cfg, train=replace(cfg.train, mode="cress", **dict(zip(ABLATION_FLAGS, combo))))
        name = "-".join(f"{flag}={int(on)}" for flag, on in zip(ABLATION_FLAGS, combo))
        result = run_training(cell, root / name, corpora, vocab)
        hyps = translate_corpus(result.model, corpora["test"], vocab, "speech", args.strategy, cfg.beam)
        write_hyps(root / name / f"hyps.test.speech.{args.strategy}.txt", hyps)
        bleu = analysis.corpus_bleu(hyps, [ex.target for ex in corpora["test"]]).score
        rows.append(combo + (bleu, len(result.log)))
        print(f"{name}: test BLEU {bleu:.2f}")
    analysis.write_csv(root / "ablation.csv", list(ABLATION_FLAGS) + ["test_bleu", "epochs"],
                       [tuple(int(c) for c in r[:3]) + r[3:] for r in rows])
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "gap-analyze": cmd_gap_analyze,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        parser.error(str(exc))
    logging.basicConfig(level=getattr(logging, cfg.run.log_level.upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    try:
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, ValueError, TrainingError) as exc:
        print(f"cress {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
