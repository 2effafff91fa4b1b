"""Token vocabulary and the video-head target sequence format.

A target sequence is::

    [BOS] EVT:<type> ( ROLE:<r> <group> x t )* [EOS]

where each ``<group>`` is four coordinate tokens ``COORD_<bin>`` (x1 y1 x2 y2)
or four ``[NULL]`` tokens when the role has no box on that keyframe. Roles
appear in ontology schema order.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from ..corpus import BoundingBox, VideoArg, VideoEventAnn
from ..ontology import Ontology, default_ontology

PAD, UNK, BOS, EOS, SEP, NULL, CLIP, REGION = (
    "[PAD]", "[UNK]", "[BOS]", "[EOS]", "[SEP]", "[NULL]", "[CLIP]", "[REGION]",
)
SPECIALS = (PAD, UNK, BOS, EOS, SEP, NULL, CLIP, REGION)
CONT = "##"


class QuantizationWarning(UserWarning):
    pass


class SerializationError(ValueError):
    pass


def event_token(event_type: str) -> str:
    return f"EVT:{event_type}"


def role_token(role: str) -> str:
    return f"ROLE:{role}"


def coord_token(b: int) -> str:
    return f"COORD_{b}"


class Vocabulary:
    """Dense, stable token ids: specials, event types, roles, coordinate bins, text."""

    def __init__(self, ontology: Ontology, text_tokens: Iterable[str], bins: int = 1000):
        if bins < 2:
            raise ValueError("bins must be >= 2")
        self.ontology = ontology
        self.bins = bins
        tokens = list(SPECIALS)
        tokens += [event_token(t) for t in ontology.type_names]
        tokens += [role_token(r) for r in ontology.all_roles]
        tokens += [coord_token(b) for b in range(bins)]
        reserved = set(tokens)
        tokens += sorted(set(text_tokens) - reserved)
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        self.pad_id, self.unk_id, self.bos_id, self.eos_id = (self.index[t] for t in (PAD, UNK, BOS, EOS))
        self.sep_id, self.null_id, self.clip_id, self.region_id = (self.index[t] for t in (SEP, NULL, CLIP, REGION))
        n_spec = len(SPECIALS)
        self.event_offset = n_spec
        self.role_offset = n_spec + len(ontology.type_names)
        self.coord_offset = self.role_offset + len(ontology.all_roles)
        self.text_offset = self.coord_offset + bins
        self.text_vocab = frozenset(tokens[self.text_offset :])

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] if 0 <= i < len(self.tokens) else UNK for i in ids]

    def coord_id(self, b: int) -> int:
        return self.coord_offset + b

    def n_event_tokens(self) -> int:
        return self.role_offset - self.event_offset

    def n_coord_tokens(self) -> int:
        return self.text_offset - self.coord_offset

    def to_dict(self) -> dict:
        return {"ontology": self.ontology.to_dict(), "bins": self.bins, "text": self.tokens[self.text_offset :]}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(Ontology.from_dict(d["ontology"]), d["text"], d["bins"])


def build_vocab(ontology: Ontology | None, text_vocab: Iterable[str], bins_B: int = 1000) -> Vocabulary:
    return Vocabulary(ontology or default_ontology(), text_vocab, bins_B)


def build_text_vocab(corpus, min_count: int = 1) -> list[str]:
    """Whole words (and detector labels) seen at least ``min_count`` times,
    plus single-character pieces so any word can be split."""
    counts: Counter = Counter()
    for doc in corpus:
        for s in doc.sentences:
            counts.update(s.tokens)
        for v in doc.segments:
            for kf in v.keyframes:
                counts.update(r.label for r in kf.regions)
    words = {w for w, c in counts.items() if c >= min_count}
    chars = {ch for w in counts for ch in w}
    return sorted(words | chars | {CONT + ch for ch in chars})


def wordpiece(word: str, vocab: Vocabulary) -> list[str]:
    """Greedy longest-match-first split; ``[UNK]`` when no split exists."""
    if word in vocab.text_vocab:
        return [word]
    pieces, start = [], 0
    while start < len(word):
        end = len(word)
        piece = None
        while end > start:
            cand = word[start:end] if start == 0 else CONT + word[start:end]
            if cand in vocab.text_vocab:
                piece = cand
                break
            end -= 1
        if piece is None:
            return [UNK]
        pieces.append(piece)
        start = end
    return pieces


# -- coordinates ---------------------------------------------------------------


def quantize_coord(c: float, B: int = 1000) -> int:
    if not 0.0 <= c <= 1.0:
        warnings.warn(f"coordinate {c} outside [0, 1]; clamped", QuantizationWarning, stacklevel=2)
        c = min(max(c, 0.0), 1.0)
    return min(int(math.floor(c * B)), B - 1)


def dequantize(b: int, B: int = 1000) -> float:
    return (b + 0.5) / B


# -- target sequences ----------------------------------------------------------


@dataclass
class VideoEventPrediction:
    event_type: str | None  # None: the decoder produced no event
    args: list[tuple[str, list[BoundingBox | None]]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return self.event_type is None


def serialize_target(ann: VideoEventAnn, vocab: Vocabulary, t: int = 3, frame_ids: Sequence[int] | None = None) -> list[str]:
    """Token strings for one video event over ``t`` sampled keyframes.

    ``frame_ids`` names the sampled keyframes in order (default ``0..t-1``);
    boxes on other keyframes are not part of the target. When a role has
    several boxes on one keyframe, the first is kept.
    """
    ont = vocab.ontology
    if ann.event_type not in ont:
        raise SerializationError(f"unknown event type {ann.event_type!r}")
    schema = ont.roles_for(ann.event_type)
    frame_ids = list(range(t)) if frame_ids is None else list(frame_ids)
    if len(frame_ids) > t:
        raise SerializationError(f"{len(frame_ids)} frame ids for t={t}")
    boxes: dict[str, dict[int, BoundingBox]] = {}
    for a in ann.args:
        if a.role not in schema:
            raise SerializationError(f"role {a.role!r} not licensed by {ann.event_type!r}")
        boxes.setdefault(a.role, {}).setdefault(a.keyframe_id, a.box)
    B = vocab.bins
    out = [BOS, event_token(ann.event_type)]
    for role in schema:
        if role not in boxes:
            continue
        out.append(role_token(role))
        for k in range(t):
            fid = frame_ids[k] if k < len(frame_ids) else None
            box = boxes[role].get(fid) if fid is not None else None
            if box is None:
                out += [NULL] * 4
            else:
                out += [coord_token(quantize_coord(c, B)) for c in box.as_list()]
    out.append(EOS)
    return out


def _as_strings(tokens, vocab: Vocabulary) -> list[str]:
    return [vocab.tokens[x] if isinstance(x, int) and 0 <= x < len(vocab) else (x if isinstance(x, str) else UNK)
            for x in tokens]


def deserialize_target(tokens, vocab: Vocabulary, t: int = 3) -> VideoEventPrediction:
    """Parse decoder output; total on any input.

    Malformed pieces (bad or truncated coordinate groups, unlicensed or
    repeated roles, stray tokens) are dropped, each with a warning.
    """
    toks = _as_strings(tokens, vocab)
    if toks and toks[0] == BOS:
        toks = toks[1:]
    if EOS in toks:
        toks = toks[: toks.index(EOS)]
    pred = VideoEventPrediction(None)
    if not toks:
        return pred
    if not toks[0].startswith("EVT:") or toks[0][4:] not in vocab.ontology:
        pred.warnings.append(f"sequence does not start with an event token: {toks[0]!r}")
        return pred
    etype = toks[0][4:]
    pred.event_type = etype
    licensed = set(vocab.ontology.roles_for(etype))
    B = vocab.bins
    seen = set()
    i = 1
    while i < len(toks):
        tok = toks[i]
        if not tok.startswith("ROLE:"):
            pred.warnings.append(f"unexpected token {tok!r} at position {i + 1}; skipped")
            i += 1
            continue
        role = tok[5:]
        body = toks[i + 1 : i + 1 + 4 * t]
        # a role's coordinate block ends early at the next role token
        cut = next((k for k, x in enumerate(body) if x.startswith("ROLE:")), None)
        if cut is not None:
            body = body[:cut]
        i += 1 + len(body)
        if len(body) < 4 * t:
            pred.warnings.append(f"role {role!r} has a truncated coordinate block; dropped")
            continue
        boxes: list[BoundingBox | None] = []
        ok = True
        for k in range(t):
            grp = body[4 * k : 4 * k + 4]
            if all(x == NULL for x in grp):
                boxes.append(None)
            elif all(x.startswith("COORD_") for x in grp):
                x1, y1, x2, y2 = (dequantize(int(x[6:]), B) for x in grp)
                if x1 < x2 and y1 < y2:
                    boxes.append(BoundingBox(x1, y1, x2, y2))
                else:
                    pred.warnings.append(f"role {role!r} keyframe {k}: degenerate box treated as absent")
                    boxes.append(None)
            else:
                ok = False
                break
        if not ok:
            pred.warnings.append(f"role {role!r} has a malformed coordinate group; dropped")
        elif role not in licensed:
            pred.warnings.append(f"role {role!r} not licensed by {etype!r}; dropped")
        elif role in seen:
            pred.warnings.append(f"role {role!r} repeated; later occurrence dropped")
        else:
            seen.add(role)
            pred.args.append((role, boxes))
    return pred


def prediction_to_annotation(pred: VideoEventPrediction, segment_id: str, frame_ids: Sequence[int]) -> VideoEventAnn | None:
    """Map per-keyframe boxes back onto real keyframe ids."""
    if pred.event_type is None:
        return None
    args = []
    for role, boxes in pred.args:
        for k, box in enumerate(boxes):
            if box is not None and k < len(frame_ids):
                args.append(VideoArg(role, frame_ids[k], box))
    return VideoEventAnn(segment_id, pred.event_type, tuple(args))
