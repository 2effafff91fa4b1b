"""Training, prediction and checkpointing for the joint multimodal transformer."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from ..checkpoint import load_checkpoint, save_checkpoint
from ..corpus import DocumentPredictions, MultimediaDocument, Sentence, TextEventAnn, VideoEventAnn, VideoSegment
from .decode import beam_search
from .model import JmmtConfig, JmmtExample, JmmtModel, build_input, jmmt_loss, predict_text, role_pairs, trigger_tags
from .vocab import (
    Vocabulary,
    build_text_vocab,
    build_vocab,
    deserialize_target,
    prediction_to_annotation,
    serialize_target,
)

log = logging.getLogger(__name__)
CHECKPOINT_KIND = "jmmt"
TRAIN_FRACTION = 645 / 860  # train/test pair ratio of the annotated corpus


class JmmtDivergenceError(RuntimeError):
    def __init__(self, epoch: int, step: int, total: float, text: float, video: float):
        super().__init__(f"non-finite loss at epoch {epoch} step {step}: total={total} text={text} video={video}")
        self.epoch, self.step, self.total, self.text, self.video = epoch, step, total, text, video


@dataclass
class JmmtTrainConfig:
    model: JmmtConfig = field(default_factory=JmmtConfig)
    epochs: int = 150
    batch_size: int = 6
    lr: float = 1e-4
    seed: int = 0
    bins: int = 1000
    grad_clip: float | None = 1.0
    max_pairs: int | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0 or self.bins < 2:
            raise ValueError(f"invalid JMMT training config: {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def make_examples(corpus: Iterable[MultimediaDocument], model_or_vocab, cfg: JmmtConfig | None = None,
                  pairs: Mapping[str, Sequence] | None = None) -> list[JmmtExample]:
    """One example per (coreferential pair, video event of the segment).

    ``pairs`` maps doc_id to the links to use (default: gold links). A
    segment without video events yields a single example whose target is
    the empty event ``[BOS] [EOS]``.
    """
    if isinstance(model_or_vocab, JmmtModel):
        vocab, cfg = model_or_vocab.vocab, model_or_vocab.cfg
    else:
        vocab, cfg = model_or_vocab, cfg or JmmtConfig()
    ont = vocab.ontology
    out = []
    for doc in corpus:
        links = pairs.get(doc.doc_id, []) if pairs is not None else doc.coref_links
        for link in links:
            s, v = doc.sentence(link.sentence_id), doc.segment(link.segment_id)
            x = build_input(s, v, vocab, cfg)
            tevs = [e for e in doc.text_events if e.sentence_id == s.sentence_id]
            tags = trigger_tags(len(x.word_pieces), tevs, ont.type_names)
            rp = role_pairs(tevs, s.entity_candidates, ont.type_names, ont.all_roles)
            vevs = [e for e in doc.video_events if e.segment_id == v.segment_id]
            targets = [vocab.encode(serialize_target(e, vocab, cfg.frames_t, x.frame_ids)) for e in vevs]
            for tgt in targets or [[vocab.bos_id, vocab.eos_id]]:
                out.append(JmmtExample(x, tags, rp, tgt, doc.doc_id, s.sentence_id, v.segment_id))
    return out


def split_documents(docs: Sequence[MultimediaDocument], train_fraction: float = TRAIN_FRACTION, seed: int = 0):
    """Seeded document-level split whose gold-pair counts approach ``train_fraction``.

    Documents are shuffled, then taken into the training side until it holds
    the target share of coreferential pairs.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(docs))
    total = sum(len(d.coref_links) for d in docs)
    train, test, used = [], [], 0
    for k in order:
        d = docs[k]
        if used + len(d.coref_links) / 2 <= train_fraction * total:
            train.append(d)
            used += len(d.coref_links)
        else:
            test.append(d)
    return train, test


def _seed_all(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def init_model(corpus: Sequence[MultimediaDocument], cfg: JmmtTrainConfig, vocab: Vocabulary | None = None) -> JmmtModel:
    if vocab is None:
        vocab = build_vocab(None, build_text_vocab(corpus), cfg.bins)
    doc = next(d for d in corpus if d.segments)
    seg = doc.segments[0]
    regions = [r for kf in seg.keyframes for r in kf.regions]
    d_y = seg.clip_feature.shape[0]
    d_z = regions[0].feature.shape[0] if regions else 1
    _seed_all(cfg.seed)
    return JmmtModel(vocab, cfg.model, d_y, d_z)


def train_jmmt(corpus: Sequence[MultimediaDocument], cfg: JmmtTrainConfig | None = None,
               vocab: Vocabulary | None = None, examples: Sequence[JmmtExample] | None = None):
    """Train on gold coreferential pairs; returns ``(model, trace)``.

    ``trace`` holds the total batch loss per optimizer step. The run is
    deterministic given ``cfg.seed``.
    """
    cfg = cfg or JmmtTrainConfig()
    model = init_model(corpus, cfg, vocab)
    if examples is None:
        examples = make_examples(corpus, model)
    if cfg.max_pairs is not None:
        examples = list(examples)[: cfg.max_pairs]
    if not examples:
        raise ValueError("no coreferential pairs to train on")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    trace: list[float] = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(examples), cfg.batch_size):
            batch = [examples[k] for k in order[start : start + cfg.batch_size]]
            loss = jmmt_loss(model, batch)
            total = float(loss.total.detach())
            if not math.isfinite(total):
                raise JmmtDivergenceError(epoch, step, total, float(loss.text.detach()), float(loss.video.detach()))
            opt.zero_grad()
            loss.total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            trace.append(total)
            step += 1
        log.debug("epoch %d loss %.4f", epoch, trace[-1])
    model.eval()
    return model, trace


# -- inference ---------------------------------------------------------------


@torch.no_grad()
def predict(model: JmmtModel, sentence: Sentence, segment: VideoSegment, beam_width: int = 5):
    """Returns ``(text events, video prediction, sampled frame ids)``."""
    model.eval()
    x = build_input(sentence, segment, model.vocab, model.cfg)
    batch = model.collate([x])
    enc = model.encode(batch)
    text = predict_text(model, enc[0], x, sentence)
    hyp = beam_search(model, enc, batch.pad_mask, beam_width)
    video = deserialize_target(list(hyp.tokens), model.vocab, model.cfg.frames_t)
    return text, video, x.frame_ids


def predict_documents(model: JmmtModel, docs: Sequence[MultimediaDocument],
                      pairs: Mapping[str, Sequence] | None = None, beam_width: int = 5) -> list[DocumentPredictions]:
    """Run both heads on each pair (gold links unless ``pairs`` is given).

    A sentence or segment appearing in several pairs contributes each
    distinct prediction once: text events are keyed by (sentence, span,
    type), video events by (segment, type), first occurrence kept.
    """
    out = []
    for doc in docs:
        links = list(pairs.get(doc.doc_id, [])) if pairs is not None else list(doc.coref_links)
        text: dict[tuple, TextEventAnn] = {}
        video: dict[tuple, VideoEventAnn] = {}
        for link in links:
            s, v = doc.sentence(link.sentence_id), doc.segment(link.segment_id)
            t_pred, v_pred, frame_ids = predict(model, s, v, beam_width)
            for ev in t_pred:
                text.setdefault((ev.sentence_id, tuple(ev.trigger_span), ev.event_type), ev)
            ann = prediction_to_annotation(v_pred, v.segment_id, frame_ids)
            if ann is not None:
                video.setdefault((ann.segment_id, ann.event_type), ann)
        out.append(DocumentPredictions(doc.doc_id, list(text.values()), list(video.values()), links))
    return out


@dataclass
class OverfitReport:
    text_type_accuracy: float
    video_type_accuracy: float
    exact_match: float
    n: int


@torch.no_grad()
def training_accuracy(model: JmmtModel, examples: Sequence[JmmtExample], docs: Sequence[MultimediaDocument],
                      beam_width: int = 5) -> OverfitReport:
    """Event-type accuracy of each head and exact-match rate of decoded targets."""
    by_id = {d.doc_id: d for d in docs}
    t_ok = v_ok = exact = n_text = 0
    for ex in examples:
        doc = by_id[ex.doc_id]
        s, v = doc.sentence(ex.sentence_id), doc.segment(ex.segment_id)
        t_pred, _, _ = predict(model, s, v, 1)
        gold_t = {(tuple(e.trigger_span), e.event_type) for e in doc.text_events if e.sentence_id == s.sentence_id}
        pred_t = {(tuple(e.trigger_span), e.event_type) for e in t_pred}
        if gold_t:
            n_text += 1
            t_ok += gold_t == pred_t
        batch = model.collate([ex.input])
        enc = model.encode(batch)
        hyp = beam_search(model, enc, batch.pad_mask, beam_width)
        exact += list(hyp.tokens) == list(ex.target)
        gold_v = deserialize_target(ex.target, model.vocab, model.cfg.frames_t)
        pred_v = deserialize_target(list(hyp.tokens), model.vocab, model.cfg.frames_t)
        v_ok += gold_v.event_type == pred_v.event_type
    n = len(examples)
    return OverfitReport(t_ok / max(n_text, 1), v_ok / max(n, 1), exact / max(n, 1), n)


# -- checkpoints -------------------------------------------------------------


def save_jmmt_model(model: JmmtModel, path, config: dict | None = None, seed: int | None = None) -> None:
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "config": config or {},
        "seed": seed,
        "model": model.cfg.to_dict(),
        "dims": {"d_y": model.d_y, "d_z": model.d_z},
        "vocab": model.vocab.to_dict(),
        "dtype": str(model.tok_emb.weight.dtype).replace("torch.", ""),
    }
    save_checkpoint(path, CHECKPOINT_KIND, arrays, meta)


def load_jmmt_model(path) -> JmmtModel:
    arrays, meta = load_checkpoint(path, CHECKPOINT_KIND)
    vocab = Vocabulary.from_dict(meta["vocab"])
    model = JmmtModel(vocab, JmmtConfig(**meta["model"]), meta["dims"]["d_y"], meta["dims"]["d_z"])
    if meta.get("dtype") == "float64":
        model = model.double()
    state = {k[len("param/"):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(state)
    model.eval()
    return model
