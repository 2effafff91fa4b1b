"""Data model and line-delimited JSON I/O for multimedia documents.

A corpus file holds one document per line. Feature vectors are stored inline
as decimal arrays; :func:`save_corpus` can instead move them to a binary
sidecar (``<name>.features.bin``, little-endian float32) described by
``<name>.features.json``, in which case each feature field becomes
``{"sidecar": "<key>"}``.

Prediction files use the same record layout with ``pred_`` prefixed keys:
``{"doc_id", "pred_text_events", "pred_video_events", "pred_coref_links"}``.
"""

from __future__ import annotations

import json
from importlib import resources
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text, dumps_canonical
from .ontology import Ontology, default_ontology, validate_annotation

__all__ = [
    "BoundingBox",
    "Region",
    "Keyframe",
    "VideoSegment",
    "Sentence",
    "TextArg",
    "TextEventAnn",
    "VideoArg",
    "VideoEventAnn",
    "CorefLink",
    "MultimediaDocument",
    "DocumentPredictions",
    "CorpusLoadError",
    "load_corpus",
    "save_corpus",
    "dump_corpus",
    "load_predictions",
    "save_predictions",
    "document_from_dict",
    "candidate_pairs",
    "sample_keyframes",
    "top_regions",
    "select_regions",
    "restrict_to_coreferential",
    "write_feature_sidecar",
    "read_feature_sidecar",
]

Span = tuple[int, int]


class CorpusLoadError(ValueError):
    def __init__(self, message: str, doc_id=None, field_path: str | None = None, line: int | None = None):
        self.doc_id = doc_id
        self.field_path = field_path
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if doc_id is not None:
            where.append(f"doc {doc_id!r}")
        if field_path:
            where.append(field_path)
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class _ArrayEq:
    """Field-wise equality that understands numpy arrays."""

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if not np.array_equal(np.asarray(a), np.asarray(b)):
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValueError(f"invalid box {self.as_list()}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_list(cls, xs: Sequence[float]) -> "BoundingBox":
        if len(xs) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(xs)}")
        return cls(*(float(x) for x in xs))


@dataclass(eq=False)
class Region(_ArrayEq):
    box: BoundingBox
    label: str
    confidence: float
    feature: np.ndarray


@dataclass(eq=False)
class Keyframe(_ArrayEq):
    frame_id: int
    regions: list[Region] = field(default_factory=list)


@dataclass(eq=False)
class VideoSegment(_ArrayEq):
    segment_id: str
    start_s: float
    end_s: float
    clip_feature: np.ndarray
    keyframes: list[Keyframe] = field(default_factory=list)

    def keyframe(self, frame_id: int) -> Keyframe:
        for kf in self.keyframes:
            if kf.frame_id == frame_id:
                return kf
        raise KeyError(frame_id)


@dataclass(eq=False)
class Sentence(_ArrayEq):
    sentence_id: str
    tokens: list[str]
    sentence_feature: np.ndarray
    entity_candidates: list[Span] = field(default_factory=list)


@dataclass(frozen=True)
class TextArg:
    span: Span
    role: str


@dataclass(frozen=True)
class TextEventAnn:
    sentence_id: str
    trigger_span: Span
    event_type: str
    args: tuple[TextArg, ...] = ()


@dataclass(frozen=True)
class VideoArg:
    role: str
    keyframe_id: int
    box: BoundingBox


@dataclass(frozen=True)
class VideoEventAnn:
    segment_id: str
    event_type: str
    args: tuple[VideoArg, ...] = ()


@dataclass(frozen=True, order=True)
class CorefLink:
    sentence_id: str
    segment_id: str


@dataclass(eq=False)
class MultimediaDocument(_ArrayEq):
    doc_id: str
    sentences: list[Sentence] = field(default_factory=list)
    segments: list[VideoSegment] = field(default_factory=list)
    text_events: list[TextEventAnn] = field(default_factory=list)
    video_events: list[VideoEventAnn] = field(default_factory=list)
    coref_links: list[CorefLink] = field(default_factory=list)

    def sentence(self, sentence_id: str) -> Sentence:
        for s in self.sentences:
            if s.sentence_id == sentence_id:
                return s
        raise KeyError(sentence_id)

    def segment(self, segment_id: str) -> VideoSegment:
        for v in self.segments:
            if v.segment_id == segment_id:
                return v
        raise KeyError(segment_id)

    def to_dict(self) -> dict:
        return _doc_to_dict(self)


@dataclass
class DocumentPredictions:
    doc_id: str
    text_events: list[TextEventAnn] = field(default_factory=list)
    video_events: list[VideoEventAnn] = field(default_factory=list)
    coref_links: list[CorefLink] = field(default_factory=list)


# -- serialization -----------------------------------------------------------


def _vec(a: np.ndarray) -> list[float]:
    return [float(x) for x in np.asarray(a, dtype=np.float64).ravel()]


def _text_event_to_dict(e: TextEventAnn) -> dict:
    return {
        "sentence_id": e.sentence_id,
        "trigger": list(e.trigger_span),
        "event_type": e.event_type,
        "args": [{"span": list(a.span), "role": a.role} for a in e.args],
    }


def _video_event_to_dict(e: VideoEventAnn) -> dict:
    return {
        "segment_id": e.segment_id,
        "event_type": e.event_type,
        "args": [{"role": a.role, "keyframe_id": a.keyframe_id, "box": a.box.as_list()} for a in e.args],
    }


def _link_to_dict(l: CorefLink) -> dict:
    return {"sentence_id": l.sentence_id, "segment_id": l.segment_id}


def _doc_to_dict(doc: MultimediaDocument, feature_hook=None) -> dict:
    vec = feature_hook or (lambda key, a: _vec(a))
    return {
        "doc_id": doc.doc_id,
        "sentences": [
            {
                "sentence_id": s.sentence_id,
                "tokens": list(s.tokens),
                "feature": vec(f"{doc.doc_id}/{s.sentence_id}", s.sentence_feature),
                "entity_candidates": [list(c) for c in s.entity_candidates],
            }
            for s in doc.sentences
        ],
        "segments": [
            {
                "segment_id": v.segment_id,
                "start_s": v.start_s,
                "end_s": v.end_s,
                "clip_feature": vec(f"{doc.doc_id}/{v.segment_id}", v.clip_feature),
                "keyframes": [
                    {
                        "frame_id": kf.frame_id,
                        "regions": [
                            {
                                "box": r.box.as_list(),
                                "label": r.label,
                                "confidence": r.confidence,
                                "feature": vec(f"{doc.doc_id}/{v.segment_id}/{kf.frame_id}/{ri}", r.feature),
                            }
                            for ri, r in enumerate(kf.regions)
                        ],
                    }
                    for kf in v.keyframes
                ],
            }
            for v in doc.segments
        ],
        "text_events": [_text_event_to_dict(e) for e in doc.text_events],
        "video_events": [_video_event_to_dict(e) for e in doc.video_events],
        "coref_links": [_link_to_dict(l) for l in doc.coref_links],
    }


class _Parser:
    """Walks one JSON record, raising CorpusLoadError with a field path."""

    def __init__(self, doc_id, line, sidecar=None):
        self.doc_id = doc_id
        self.line = line
        self.sidecar = sidecar

    def fail(self, path: str, msg: str):
        raise CorpusLoadError(msg, self.doc_id, path, self.line)

    def get(self, obj, key, path, kind=None):
        if not isinstance(obj, dict) or key not in obj:
            self.fail(f"{path}.{key}" if path else key, "missing field")
        val = obj[key]
        if kind is not None and not isinstance(val, kind):
            self.fail(f"{path}.{key}" if path else key, f"expected {kind}, got {type(val).__name__}")
        return val

    def feature(self, raw, path) -> np.ndarray:
        if isinstance(raw, dict) and "sidecar" in raw:
            if self.sidecar is None:
                self.fail(path, "sidecar reference but no sidecar file")
            key = raw["sidecar"]
            if key not in self.sidecar:
                self.fail(path, f"sidecar key {key!r} not found")
            arr = np.asarray(self.sidecar[key], dtype=np.float64)
        else:
            if not isinstance(raw, list):
                self.fail(path, "feature must be a list of numbers")
            try:
                arr = np.asarray(raw, dtype=np.float64)
            except (TypeError, ValueError):
                self.fail(path, "feature must be a list of numbers")
        if arr.ndim != 1 or arr.size == 0:
            self.fail(path, "feature must be a non-empty 1-D vector")
        if not np.all(np.isfinite(arr)):
            self.fail(path, "feature contains non-finite values")
        return arr

    def span(self, raw, path, n_tokens) -> Span:
        if not (isinstance(raw, list) and len(raw) == 2 and all(isinstance(x, int) for x in raw)):
            self.fail(path, "span must be [start, end]")
        s, e = raw
        if not (0 <= s < e <= n_tokens):
            self.fail(path, f"span {raw} outside token range [0, {n_tokens}]")
        return (s, e)

    def box(self, raw, path) -> BoundingBox:
        try:
            return BoundingBox.from_list(raw)
        except (TypeError, ValueError) as e:
            self.fail(path, str(e))


def document_from_dict(
    rec: dict,
    ontology: Ontology | None = None,
    line: int | None = None,
    sidecar: dict | None = None,
) -> MultimediaDocument:
    """Build and validate one document; every cross-reference must resolve."""
    doc_id = rec.get("doc_id") if isinstance(rec, dict) else None
    p = _Parser(doc_id, line, sidecar)
    if not isinstance(rec, dict):
        p.fail("", "record is not an object")
    doc_id = p.get(rec, "doc_id", "", str)

    sentences = []
    seen = set()
    for i, s in enumerate(p.get(rec, "sentences", "", list)):
        path = f"sentences[{i}]"
        sid = p.get(s, "sentence_id", path, str)
        if sid in seen:
            p.fail(f"{path}.sentence_id", f"duplicate sentence_id {sid!r}")
        seen.add(sid)
        tokens = p.get(s, "tokens", path, list)
        if not all(isinstance(t, str) for t in tokens):
            p.fail(f"{path}.tokens", "tokens must be strings")
        feat = p.feature(p.get(s, "feature", path), f"{path}.feature")
        cands = [
            p.span(c, f"{path}.entity_candidates[{j}]", len(tokens))
            for j, c in enumerate(s.get("entity_candidates", []))
        ]
        sentences.append(Sentence(sid, list(tokens), feat, cands))

    segments = []
    seen = set()
    for i, v in enumerate(p.get(rec, "segments", "", list)):
        path = f"segments[{i}]"
        vid = p.get(v, "segment_id", path, str)
        if vid in seen:
            p.fail(f"{path}.segment_id", f"duplicate segment_id {vid!r}")
        seen.add(vid)
        start = float(p.get(v, "start_s", path, (int, float)))
        end = float(p.get(v, "end_s", path, (int, float)))
        if not start < end:
            p.fail(f"{path}.end_s", f"start_s {start} must be < end_s {end}")
        clip = p.feature(p.get(v, "clip_feature", path), f"{path}.clip_feature")
        keyframes = []
        frame_ids = set()
        for k, kf in enumerate(v.get("keyframes", [])):
            kpath = f"{path}.keyframes[{k}]"
            fid = p.get(kf, "frame_id", kpath, int)
            if fid in frame_ids:
                p.fail(f"{kpath}.frame_id", f"duplicate frame_id {fid}")
            frame_ids.add(fid)
            regions = []
            for r, reg in enumerate(kf.get("regions", [])):
                rpath = f"{kpath}.regions[{r}]"
                box = p.box(p.get(reg, "box", rpath), f"{rpath}.box")
                label = p.get(reg, "label", rpath, str)
                conf = float(p.get(reg, "confidence", rpath, (int, float)))
                if not 0.0 <= conf <= 1.0:
                    p.fail(f"{rpath}.confidence", f"confidence {conf} outside [0, 1]")
                feat = p.feature(p.get(reg, "feature", rpath), f"{rpath}.feature")
                regions.append(Region(box, label, conf, feat))
            keyframes.append(Keyframe(fid, regions))
        segments.append(VideoSegment(vid, start, end, clip, keyframes))

    sent_by_id = {s.sentence_id: s for s in sentences}
    seg_by_id = {v.segment_id: v for v in segments}

    text_events = []
    for i, e in enumerate(rec.get("text_events", [])):
        path = f"text_events[{i}]"
        sid = p.get(e, "sentence_id", path, str)
        if sid not in sent_by_id:
            p.fail(f"{path}.sentence_id", f"unknown sentence_id {sid!r}")
        n = len(sent_by_id[sid].tokens)
        trig = p.span(p.get(e, "trigger", path), f"{path}.trigger", n)
        args = tuple(
            TextArg(p.span(p.get(a, "span", f"{path}.args[{j}]"), f"{path}.args[{j}].span", n),
                    p.get(a, "role", f"{path}.args[{j}]", str))
            for j, a in enumerate(e.get("args", []))
        )
        text_events.append(TextEventAnn(sid, trig, p.get(e, "event_type", path, str), args))

    video_events = []
    for i, e in enumerate(rec.get("video_events", [])):
        path = f"video_events[{i}]"
        vid = p.get(e, "segment_id", path, str)
        if vid not in seg_by_id:
            p.fail(f"{path}.segment_id", f"unknown segment_id {vid!r}")
        fids = {kf.frame_id for kf in seg_by_id[vid].keyframes}
        args = []
        for j, a in enumerate(e.get("args", [])):
            apath = f"{path}.args[{j}]"
            fid = p.get(a, "keyframe_id", apath, int)
            if fid not in fids:
                p.fail(f"{apath}.keyframe_id", f"keyframe {fid} not in segment {vid!r}")
            args.append(VideoArg(p.get(a, "role", apath, str), fid, p.box(p.get(a, "box", apath), f"{apath}.box")))
        video_events.append(VideoEventAnn(vid, p.get(e, "event_type", path, str), tuple(args)))

    links = []
    seen_links = set()
    for i, l in enumerate(rec.get("coref_links", [])):
        path = f"coref_links[{i}]"
        sid = p.get(l, "sentence_id", path, str)
        vid = p.get(l, "segment_id", path, str)
        if sid not in sent_by_id:
            p.fail(f"{path}.sentence_id", f"link to missing sentence {sid!r}")
        if vid not in seg_by_id:
            p.fail(f"{path}.segment_id", f"link to missing segment {vid!r}")
        link = CorefLink(sid, vid)
        if link in seen_links:
            p.fail(path, f"duplicate link ({sid!r}, {vid!r})")
        seen_links.add(link)
        links.append(link)

    if ontology is not None:
        for name, events in (("text_events", text_events), ("video_events", video_events)):
            for i, e in enumerate(events):
                bad = validate_annotation(e, ontology)
                if bad:
                    p.fail(f"{name}[{i}]", "; ".join(map(str, bad)))

    return MultimediaDocument(doc_id, sentences, segments, text_events, video_events, links)


def _check_dims(docs: Sequence[MultimediaDocument]) -> None:
    dims: dict[str, int] = {}

    def check(kind, arr, doc_id, path):
        d = arr.shape[0]
        if dims.setdefault(kind, d) != d:
            raise CorpusLoadError(f"{kind} dimension {d} differs from corpus dimension {dims[kind]}", doc_id, path)

    for doc in docs:
        for i, s in enumerate(doc.sentences):
            check("sentence feature", s.sentence_feature, doc.doc_id, f"sentences[{i}].feature")
        for i, v in enumerate(doc.segments):
            check("clip feature", v.clip_feature, doc.doc_id, f"segments[{i}].clip_feature")
            for k, kf in enumerate(v.keyframes):
                for r, reg in enumerate(kf.regions):
                    check("region feature", reg.feature, doc.doc_id, f"segments[{i}].keyframes[{k}].regions[{r}].feature")


def _sidecar_paths(path: Path) -> tuple[Path, Path]:
    stem = path.name[: -len(path.suffix)] if path.suffix else path.name
    return path.with_name(stem + ".features.bin"), path.with_name(stem + ".features.json")


def load_corpus(path, ontology: Ontology | None = ...) -> list[MultimediaDocument]:
    """Read a corpus file, validating every document.

    By default annotations are checked against the bundled ontology; pass
    ``ontology=None`` to skip schema checks.
    """
    if ontology is ...:
        ontology = default_ontology()
    path = Path(path)
    bin_path, desc_path = _sidecar_paths(path)
    sidecar = read_feature_sidecar(bin_path) if desc_path.exists() else None
    docs = []
    ids = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusLoadError(f"invalid JSON: {e.msg}", line=lineno) from None
            doc = document_from_dict(rec, ontology, lineno, sidecar)
            if doc.doc_id in ids:
                raise CorpusLoadError("duplicate doc_id", doc.doc_id, "doc_id", lineno)
            ids.add(doc.doc_id)
            docs.append(doc)
    _check_dims(docs)
    return docs


def load_fixture_corpus() -> list[MultimediaDocument]:
    """The bundled 3-document fixture (8-dim features)."""
    with resources.as_file(resources.files("mmevent").joinpath("data/fixture_corpus.jsonl")) as p:
        return load_corpus(p)


def dump_corpus(docs: Iterable[MultimediaDocument]) -> str:
    return "".join(dumps_canonical(_doc_to_dict(d)) + "\n" for d in docs)


def save_corpus(docs: Sequence[MultimediaDocument], path, sidecar: bool = False) -> None:
    path = Path(path)
    if not sidecar:
        atomic_write_text(path, dump_corpus(docs))
        return
    arrays: dict[str, np.ndarray] = {}

    def hook(key, a):
        arrays[key] = np.asarray(a)
        return {"sidecar": key}

    text = "".join(dumps_canonical(_doc_to_dict(d, hook)) + "\n" for d in docs)
    bin_path, _ = _sidecar_paths(path)
    write_feature_sidecar(bin_path, arrays)
    atomic_write_text(path, text)


def write_feature_sidecar(bin_path, arrays: dict[str, np.ndarray]) -> None:
    """Write arrays as concatenated little-endian float32 plus a JSON descriptor."""
    bin_path = Path(bin_path)
    desc_path = bin_path.with_suffix(".json")
    entries = {}
    chunks = []
    offset = 0
    for key, a in arrays.items():
        a32 = np.ascontiguousarray(a, dtype="<f4")
        entries[key] = {"offset": offset, "shape": list(a32.shape)}
        chunks.append(a32.tobytes())
        offset += a32.size
    atomic_write_bytes(bin_path, b"".join(chunks))
    atomic_write_text(desc_path, json.dumps({"dtype": "<f4", "arrays": entries}, sort_keys=True, indent=1) + "\n")


def read_feature_sidecar(bin_path) -> dict[str, np.ndarray]:
    bin_path = Path(bin_path)
    desc = json.loads(bin_path.with_suffix(".json").read_text(encoding="utf-8"))
    if desc.get("dtype") != "<f4":
        raise CorpusLoadError(f"unsupported sidecar dtype {desc.get('dtype')!r}")
    flat = np.fromfile(bin_path, dtype="<f4")
    out = {}
    for key, ent in desc["arrays"].items():
        n = int(np.prod(ent["shape"])) if ent["shape"] else 1
        out[key] = flat[ent["offset"] : ent["offset"] + n].reshape(ent["shape"]).astype(np.float64)
    return out


# -- predictions -------------------------------------------------------------


def predictions_to_dict(pred: DocumentPredictions) -> dict:
    return {
        "doc_id": pred.doc_id,
        "pred_text_events": [_text_event_to_dict(e) for e in pred.text_events],
        "pred_video_events": [_video_event_to_dict(e) for e in pred.video_events],
        "pred_coref_links": [_link_to_dict(l) for l in pred.coref_links],
    }


def save_predictions(preds: Sequence[DocumentPredictions], path) -> None:
    atomic_write_text(path, "".join(dumps_canonical(predictions_to_dict(p)) + "\n" for p in preds))


def load_predictions(path) -> list[DocumentPredictions]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusLoadError(f"invalid JSON: {e.msg}", line=lineno) from None
            p = _Parser(rec.get("doc_id"), lineno)
            doc_id = p.get(rec, "doc_id", "", str)
            text = []
            for i, e in enumerate(rec.get("pred_text_events", [])):
                path = f"pred_text_events[{i}]"
                trig = e.get("trigger")
                if not (isinstance(trig, list) and len(trig) == 2):
                    p.fail(f"{path}.trigger", "span must be [start, end]")
                args = tuple(TextArg(tuple(a["span"]), a["role"]) for a in e.get("args", []))
                text.append(TextEventAnn(p.get(e, "sentence_id", path, str), tuple(trig),
                                         p.get(e, "event_type", path, str), args))
            video = []
            for i, e in enumerate(rec.get("pred_video_events", [])):
                path = f"pred_video_events[{i}]"
                args = tuple(
                    VideoArg(a["role"], int(a["keyframe_id"]), p.box(a["box"], f"{path}.args[{j}].box"))
                    for j, a in enumerate(e.get("args", []))
                )
                video.append(VideoEventAnn(p.get(e, "segment_id", path, str), p.get(e, "event_type", path, str), args))
            links = [CorefLink(l["sentence_id"], l["segment_id"]) for l in rec.get("pred_coref_links", [])]
            out.append(DocumentPredictions(doc_id, text, video, links))
    return out


# -- selection ---------------------------------------------------------------


def candidate_pairs(doc: MultimediaDocument) -> list[tuple[str, str]]:
    """All (sentence_id, segment_id) pairs, sentence-major."""
    return [(s.sentence_id, v.segment_id) for s in doc.sentences for v in doc.segments]


def sample_keyframes(segment: VideoSegment, frames_t: int) -> list[Keyframe]:
    """Pick ``min(frames_t, n)`` keyframes at indices ``floor(i * n / t)``.

    The first keyframe is always included; the last one only when the
    spacing lands on it.
    """
    if frames_t < 1:
        raise ValueError("frames_t must be >= 1")
    n = len(segment.keyframes)
    t = min(frames_t, n)
    return [segment.keyframes[(i * n) // t] for i in range(t)]


def top_regions(keyframe: Keyframe, per_frame_k: int) -> list[Region]:
    # confidence desc, then smaller box, then insertion order
    order = sorted(
        range(len(keyframe.regions)),
        key=lambda i: (-keyframe.regions[i].confidence, keyframe.regions[i].box.area, i),
    )
    return [keyframe.regions[i] for i in order[:per_frame_k]]


def select_regions(segment: VideoSegment, frames_t: int = 3, per_frame_k: int = 5) -> list[Region]:
    if per_frame_k < 1:
        raise ValueError("per_frame_k must be >= 1")
    out = []
    for kf in sample_keyframes(segment, frames_t):
        out.extend(top_regions(kf, per_frame_k))
    return out


def restrict_to_coreferential(doc: MultimediaDocument) -> MultimediaDocument:
    """Copy of ``doc`` keeping only events on sentences/segments with a gold link."""
    sids = {l.sentence_id for l in doc.coref_links}
    vids = {l.segment_id for l in doc.coref_links}
    return MultimediaDocument(
        doc.doc_id,
        doc.sentences,
        doc.segments,
        [e for e in doc.text_events if e.sentence_id in sids],
        [e for e in doc.video_events if e.segment_id in vids],
        list(doc.coref_links),
    )
