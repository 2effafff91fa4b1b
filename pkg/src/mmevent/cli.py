"""Command-line entry point: ``mmevent <subcommand> [flags]``.

Every run writes a manifest (resolved config, seed, sha256 of inputs and
outputs, loss traces for training runs) next to its primary output as
``<out>.manifest.json``. Settings come from built-in defaults, then an
optional ``--config`` file of ``key=value`` lines, then flags.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field, fields
from json import JSONDecodeError
from pathlib import Path

from . import __version__
from ._io import atomic_write_text, dumps_canonical, sha256_file
from .checkpoint import CheckpointError
from .corpus import CorefLink, CorpusLoadError, DocumentPredictions, load_corpus, load_predictions, save_corpus, save_predictions
from .ontology import OntologyFormatError, OntologyValidationError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("synth", "train-coref", "predict-coref", "tune-threshold", "train-jmmt", "predict-jmmt", "score", "report", "pipeline")
SCORE_SETTINGS = ("text", "video", "multimedia", "coref")


class ConfigError(ValueError):
    pass


def _opt(default, help: str, choices=None):
    return field(default=default, metadata={"help": help, "choices": choices})


@dataclass
class RunConfig:
    command: str = ""
    # paths
    corpus: str | None = _opt(None, "input corpus (JSONL)")
    gold: str | None = _opt(None, "gold corpus for scoring")
    pred: str | None = _opt(None, "prediction file for scoring")
    links: str | None = _opt(None, "prediction file whose coref links select the pairs (default: gold links)")
    checkpoint: str | None = _opt(None, "model checkpoint to read")
    coref_checkpoint: str | None = _opt(None, "coreference checkpoint (pipeline)")
    jmmt_checkpoint: str | None = _opt(None, "extraction checkpoint (pipeline)")
    out: str | None = _opt(None, "primary output path")
    # synthesis
    seed: int = _opt(0, "random seed")
    n_docs: int = _opt(20, "documents to synthesize")
    sentences_per_doc: int = _opt(6, "sentences per document")
    segments_per_doc: int = _opt(4, "video segments per document")
    d_x: int = _opt(32, "sentence feature dimension")
    d_y: int = _opt(32, "clip feature dimension")
    d_z: int = _opt(32, "region feature dimension")
    sigma: float = _opt(0.1, "feature noise standard deviation")
    distractors: int = _opt(4, "distractor regions per keyframe")
    multi_instance: bool = _opt(False, "make clip features uninformative")
    sidecar: bool = _opt(False, "store features in a binary sidecar file")
    # models
    objective: str = _opt("mmcoref", "coreference training objective", ("nce", "milo", "mmcoref"))
    common_dim: int = _opt(64, "coreference embedding dimension")
    epochs: int | None = _opt(None, "training epochs (default 50 for coref, 150 for jmmt)")
    batch_size: int | None = _opt(None, "batch size (default 32 for coref, 6 for jmmt)")
    lr: float = _opt(1e-4, "Adam learning rate")
    max_steps: int | None = _opt(None, "stop coreference training after this many steps")
    d_model: int = _opt(64, "transformer width")
    layers: int = _opt(2, "encoder and decoder layers")
    heads: int = _opt(4, "attention heads")
    beam_width: int = _opt(5, "beam width for the video head")
    threshold: float = _opt(0.13, "coreference similarity threshold")
    frames_t: int = _opt(3, "keyframes sampled per segment")
    per_frame_k: int = _opt(5, "regions kept per keyframe")
    bins: int = _opt(1000, "coordinate quantization bins")
    # scoring
    setting: str = _opt("multimedia", "scoring setting", SCORE_SETTINGS)

    def validate(self) -> None:
        checks = [
            (self.seed >= 0, "seed must be >= 0"),
            (self.n_docs >= 1, "n_docs must be >= 1"),
            (min(self.d_x, self.d_y, self.d_z, self.common_dim, self.d_model) >= 1, "dimensions must be >= 1"),
            (self.sigma >= 0, "sigma must be >= 0"),
            (self.lr > 0, "lr must be > 0"),
            (self.epochs is None or self.epochs >= 0, "epochs must be >= 0"),
            (self.batch_size is None or self.batch_size >= 1, "batch_size must be >= 1"),
            (self.beam_width >= 1, "beam_width must be >= 1"),
            (-1.0 <= self.threshold <= 1.0, "threshold must lie in [-1, 1]"),
            (self.frames_t >= 1 and self.per_frame_k >= 1, "frames_t and per_frame_k must be >= 1"),
            (self.bins >= 2, "bins must be >= 2"),
            (self.layers >= 1 and self.heads >= 1 and self.d_model % self.heads == 0, "d_model must be a multiple of heads"),
        ]
        for f in fields(self):
            choices = f.metadata.get("choices")
            if choices and getattr(self, f.name) not in choices:
                raise ConfigError(f"{f.name} must be one of {choices}")
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ConfigError(f"{self.command}: missing required " + ", ".join("--" + n.replace("_", "-") for n in missing))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "command"}


def _field_kind(f) -> type:
    t = str(f.type)
    for name, kind in (("bool", bool), ("int", int), ("float", float)):
        if t.startswith(name):
            return kind
    return str


def _convert(name: str, raw: str):
    kind = _field_kind(_FIELDS[name])
    if raw.lower() in ("none", "") and _FIELDS[name].default is None:
        return None
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def read_config_file(path) -> dict:
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


# -- argument parsing ------------------------------------------------------------


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


_COMMAND_FLAGS = {
    "synth": ["out", "seed", "n_docs", "sentences_per_doc", "segments_per_doc", "d_x", "d_y", "d_z", "sigma",
              "distractors", "multi_instance", "sidecar", "frames_t"],
    "train-coref": ["corpus", "out", "seed", "objective", "common_dim", "epochs", "batch_size", "lr", "max_steps",
                    "frames_t", "per_frame_k"],
    "predict-coref": ["corpus", "checkpoint", "out", "threshold"],
    "tune-threshold": ["corpus", "checkpoint", "out"],
    "train-jmmt": ["corpus", "out", "seed", "epochs", "batch_size", "lr", "d_model", "layers", "heads", "frames_t",
                   "per_frame_k", "bins"],
    "predict-jmmt": ["corpus", "checkpoint", "links", "out", "beam_width"],
    "score": ["gold", "pred", "setting", "out"],
    "report": ["gold", "pred", "out"],
    "pipeline": ["corpus", "coref_checkpoint", "jmmt_checkpoint", "threshold", "beam_width", "out"],
}

_HELP = {
    "synth": "generate a synthetic corpus with planted events and links",
    "train-coref": "train the self-supervised coreference model",
    "predict-coref": "predict sentence-segment coreference links",
    "tune-threshold": "pick the link threshold maximizing F1 on a corpus",
    "train-jmmt": "train the joint extraction transformer on gold pairs",
    "predict-jmmt": "extract text and video events for sentence-segment pairs",
    "score": "score predictions in one setting",
    "report": "score predictions in every setting",
    "pipeline": "coreference then extraction; scores gold and predicted pairs",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmevent", description="Multimedia event coreference and extraction.")
    parser.add_argument("--version", action="version", version=f"mmevent {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    for cmd in COMMANDS:
        p = sub.add_parser(cmd, help=_HELP[cmd], description=_HELP[cmd])
        p.add_argument("--config", help="key=value file; flags take precedence", default=None)
        p.add_argument("--manifest", help="manifest path (default <out>.manifest.json)", default=None)
        for name in _COMMAND_FLAGS[cmd]:
            f = _FIELDS[name]
            flag = "--" + name.replace("_", "-")
            kind = _field_kind(f)
            kw = {"dest": name, "default": argparse.SUPPRESS, "help": f.metadata["help"]}
            if kind is bool:
                p.add_argument(flag, action="store_true", **kw)
            else:
                choices = f.metadata.get("choices")
                if name == "setting" and cmd == "score":
                    choices = SCORE_SETTINGS
                p.add_argument(flag, type=lambda s, n=name: _convert(n, s), choices=choices, **kw)
    return parser


def resolve_config(argv) -> tuple[RunConfig, argparse.Namespace]:
    args = build_parser().parse_args(argv)
    if args.command is None:
        raise ConfigError("no subcommand given; see --help")
    ns = vars(args)
    values = read_config_file(ns["config"]) if ns.get("config") else {}
    values.update({k: v for k, v in ns.items() if k in _FIELDS})
    cfg = RunConfig(command=args.command, **values)
    cfg.validate()
    return cfg, args


# -- manifest --------------------------------------------------------------------


def _hashes(paths) -> dict:
    out = {}
    for p in paths:
        if p is None:
            continue
        for q in [Path(p)] + sorted(Path(p).parent.glob(Path(p).stem + ".features.*")):
            if q.exists():
                out[str(q)] = sha256_file(q)
    return out


def write_manifest(cfg: RunConfig, args, inputs, outputs, extra: dict | None = None) -> str | None:
    manifest = {
        "version": __version__,
        "command": cfg.command,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": _hashes(inputs),
        "outputs": _hashes(outputs),
    }
    manifest.update(extra or {})
    path = args.manifest or (cfg.out + ".manifest.json" if cfg.out else None)
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stderr.write("manifest: " + dumps_canonical(manifest) + "\n")
    else:
        atomic_write_text(path, text)
    return path


# -- commands --------------------------------------------------------------------


def _links_from(path) -> dict[str, list[CorefLink]]:
    return {p.doc_id: list(p.coref_links) for p in load_predictions(path)}


def cmd_synth(cfg: RunConfig, args) -> int:
    from .synthgen import SynthConfig, generate_corpus

    cfg.require("out")
    scfg = SynthConfig(n_docs=cfg.n_docs, sentences_per_doc=cfg.sentences_per_doc, segments_per_doc=cfg.segments_per_doc,
                       d_x=cfg.d_x, d_y=cfg.d_y, d_z=cfg.d_z, noise_sigma=cfg.sigma,
                       distractor_regions_per_frame=cfg.distractors, multi_instance_mode=cfg.multi_instance,
                       seed=cfg.seed, keyframes_per_segment=cfg.frames_t)
    docs, _ = generate_corpus(scfg)
    save_corpus(docs, cfg.out, sidecar=cfg.sidecar)
    write_manifest(cfg, args, [], [cfg.out], {"synth_config": scfg.to_dict()})
    return EXIT_OK


def cmd_train_coref(cfg: RunConfig, args) -> int:
    from .coref import CorefTrainConfig, save_coref_model, train_coref

    cfg.require("corpus", "out")
    docs = load_corpus(cfg.corpus)
    tcfg = CorefTrainConfig(epochs=50 if cfg.epochs is None else cfg.epochs,
                            batch_size=32 if cfg.batch_size is None else cfg.batch_size,
                            lr=cfg.lr, objective=cfg.objective, common_dim=cfg.common_dim, seed=cfg.seed,
                            max_steps=cfg.max_steps, frames_t=cfg.frames_t, per_frame_k=cfg.per_frame_k)
    model, trace = train_coref(docs, tcfg)
    save_coref_model(model, cfg.out, tcfg.to_dict(), cfg.seed)
    write_manifest(cfg, args, [cfg.corpus], [cfg.out], {"loss_trace": trace})
    return EXIT_OK


def cmd_predict_coref(cfg: RunConfig, args) -> int:
    from .coref import load_coref_model, predict_doc_links

    cfg.require("corpus", "checkpoint", "out")
    docs = load_corpus(cfg.corpus)
    model = load_coref_model(cfg.checkpoint)
    preds = [DocumentPredictions(d.doc_id, [], [], predict_doc_links(model, d, cfg.threshold)) for d in docs]
    save_predictions(preds, cfg.out)
    write_manifest(cfg, args, [cfg.corpus, cfg.checkpoint], [cfg.out])
    return EXIT_OK


def cmd_tune_threshold(cfg: RunConfig, args) -> int:
    from .coref import load_coref_model, tune_threshold

    cfg.require("corpus", "checkpoint")
    docs = load_corpus(cfg.corpus)
    thr = tune_threshold(load_coref_model(cfg.checkpoint), docs)
    print(f"threshold {thr:.2f}")
    if cfg.out:
        atomic_write_text(cfg.out, json.dumps({"threshold": thr}) + "\n")
    write_manifest(cfg, args, [cfg.corpus, cfg.checkpoint], [cfg.out], {"threshold": thr})
    return EXIT_OK


def _jmmt_train_config(cfg: RunConfig):
    from .jmmt import JmmtConfig, JmmtTrainConfig

    mcfg = JmmtConfig(d_model=cfg.d_model, n_heads=cfg.heads, enc_layers=cfg.layers, dec_layers=cfg.layers,
                      frames_t=cfg.frames_t, per_frame_k=cfg.per_frame_k)
    return JmmtTrainConfig(model=mcfg, epochs=150 if cfg.epochs is None else cfg.epochs,
                           batch_size=6 if cfg.batch_size is None else cfg.batch_size,
                           lr=cfg.lr, seed=cfg.seed, bins=cfg.bins)


def cmd_train_jmmt(cfg: RunConfig, args) -> int:
    from .jmmt import save_jmmt_model, train_jmmt

    cfg.require("corpus", "out")
    docs = load_corpus(cfg.corpus)
    tcfg = _jmmt_train_config(cfg)
    model, trace = train_jmmt(docs, tcfg)
    save_jmmt_model(model, cfg.out, tcfg.to_dict(), cfg.seed)
    write_manifest(cfg, args, [cfg.corpus], [cfg.out], {"loss_trace": trace})
    return EXIT_OK


def cmd_predict_jmmt(cfg: RunConfig, args) -> int:
    from .jmmt import load_jmmt_model, predict_documents

    cfg.require("corpus", "checkpoint", "out")
    docs = load_corpus(cfg.corpus)
    model = load_jmmt_model(cfg.checkpoint)
    pairs = _links_from(cfg.links) if cfg.links else None
    preds = predict_documents(model, docs, pairs, cfg.beam_width)
    save_predictions(preds, cfg.out)
    write_manifest(cfg, args, [cfg.corpus, cfg.checkpoint, cfg.links], [cfg.out])
    return EXIT_OK


def _score_one(gold, preds, setting):
    from .metrics import score_coref_docs, score_extraction

    return score_coref_docs(gold, preds) if setting == "coref" else score_extraction(gold, preds, setting)


def cmd_score(cfg: RunConfig, args, settings=None) -> int:
    from .metrics import format_table, reports_to_json

    cfg.require("gold", "pred")
    gold = load_corpus(cfg.gold)
    preds = load_predictions(cfg.pred)
    settings = settings or [cfg.setting]
    reports = {s: _score_one(gold, preds, s) for s in settings}
    sys.stdout.write(format_table(reports))
    if cfg.out:
        atomic_write_text(cfg.out, reports_to_json(reports))
    write_manifest(cfg, args, [cfg.gold, cfg.pred], [cfg.out])
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    return cmd_score(cfg, args, list(SCORE_SETTINGS))


def run_pipeline(docs, coref_model, jmmt_model, threshold: float, beam_width: int = 5) -> dict:
    """Stage 1 predicts links; stage 2 extracts on gold and on predicted pairs.

    Returns ``{"gold_pairs": reports, "predicted_pairs": reports,
    "predictions": {...}}``; predicted-pair reports are marked indicative.
    """
    from .coref import predict_doc_links
    from .jmmt import predict_documents

    links = {d.doc_id: predict_doc_links(coref_model, d, threshold) for d in docs}
    gold_preds = predict_documents(jmmt_model, docs, None, beam_width)
    sys_preds = predict_documents(jmmt_model, docs, links, beam_width)
    gold_reports = {s: _score_one(docs, gold_preds, s) for s in ("text", "video", "multimedia")}
    sys_reports = {s: dataclasses.replace(_score_one(docs, sys_preds, s), indicative=True) for s in SCORE_SETTINGS}
    return {"gold_pairs": gold_reports, "predicted_pairs": sys_reports,
            "predictions": {"gold_pairs": gold_preds, "predicted_pairs": sys_preds}}


def cmd_pipeline(cfg: RunConfig, args) -> int:
    from .coref import load_coref_model
    from .jmmt import load_jmmt_model
    from .metrics import format_table

    cfg.require("corpus", "coref_checkpoint", "jmmt_checkpoint")
    docs = load_corpus(cfg.corpus)
    result = run_pipeline(docs, load_coref_model(cfg.coref_checkpoint), load_jmmt_model(cfg.jmmt_checkpoint),
                          cfg.threshold, cfg.beam_width)
    sys.stdout.write("Gold coreferential pairs\n" + format_table(result["gold_pairs"]))
    sys.stdout.write("Predicted pairs\n" + format_table(result["predicted_pairs"]))
    if cfg.out:
        payload = {mode: {k: v.to_dict() for k, v in result[mode].items()} for mode in ("gold_pairs", "predicted_pairs")}
        payload["predicted_pairs_indicative"] = True
        atomic_write_text(cfg.out, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_manifest(cfg, args, [cfg.corpus, cfg.coref_checkpoint, cfg.jmmt_checkpoint], [cfg.out])
    return EXIT_OK


_DISPATCH = {
    "synth": cmd_synth,
    "train-coref": cmd_train_coref,
    "predict-coref": cmd_predict_coref,
    "tune-threshold": cmd_tune_threshold,
    "train-jmmt": cmd_train_jmmt,
    "predict-jmmt": cmd_predict_jmmt,
    "score": cmd_score,
    "report": cmd_report,
    "pipeline": cmd_pipeline,
}


def run(argv=None) -> int:
    from .coref import CorefConfigError, CorefDivergenceError, CorefPreconditionError, NumericInputError
    from .jmmt.train import JmmtDivergenceError

    try:
        cfg, args = resolve_config(argv)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as e:
        print(f"mmevent: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    try:
        return _DISPATCH[cfg.command](cfg, args)
    except (ConfigError, CorefConfigError) as e:
        print(f"mmevent {cfg.command}: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorefDivergenceError, JmmtDivergenceError, NumericInputError) as e:
        print(f"mmevent {cfg.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusLoadError, CheckpointError, FileNotFoundError, JSONDecodeError, OntologyFormatError,
            OntologyValidationError, CorefPreconditionError, ValueError, KeyError, OSError) as e:
        print(f"mmevent {cfg.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
