"""Synthetic multimedia corpora with planted event structure.

Every sentence and segment gets a latent event type. Features are the
type's unit prototype plus isotropic Gaussian noise, renormalized, so the
ground truth (types, links, argument boxes) is known exactly. A sentence and
a segment are coreferential iff their latent types agree.

In ``multi_instance_mode`` the clip feature is pure noise and the type is
signalled only by one high-confidence "event region" in the segment's first
keyframe.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import (
    BoundingBox,
    CorefLink,
    Keyframe,
    MultimediaDocument,
    Region,
    Sentence,
    TextArg,
    TextEventAnn,
    VideoArg,
    VideoEventAnn,
    VideoSegment,
)
from .ontology import Ontology, default_ontology

DISTRACTOR_LABELS = ("person", "car", "building", "tree", "sign", "crowd", "road", "sky")
EVENT_REGION_LABEL = "obj_scene"
ARITY_CLASSES = ("1-to-1", "1-to-n", "n-to-1", "n-to-n")


def trigger_token(event_type: str) -> str:
    return f"trig_{event_type}"


def entity_token(role: str) -> str:
    return f"ent_{role.lower()}"


def region_label(role: str) -> str:
    return f"obj_{role.lower()}"


@dataclass(frozen=True)
class SynthConfig:
    n_docs: int = 20
    sentences_per_doc: int = 6
    segments_per_doc: int = 4
    d_x: int = 32
    d_y: int = 32
    d_z: int = 32
    noise_sigma: float = 0.1
    distractor_regions_per_frame: int = 4
    multi_instance_mode: bool = False
    seed: int = 0
    keyframes_per_segment: int = 3
    link_prob: float = 0.6
    filler_tokens: int = 5
    max_args: int = 3

    def __post_init__(self):
        for name in ("d_x", "d_y", "d_z"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for name in ("n_docs", "sentences_per_doc", "segments_per_doc", "distractor_regions_per_frame", "filler_tokens"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.keyframes_per_segment < 1 or self.max_args < 1:
            raise ValueError("keyframes_per_segment and max_args must be >= 1")
        if not 0.0 <= self.link_prob <= 1.0:
            raise ValueError("link_prob must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DocGold:
    doc_id: str
    sentence_types: dict[str, str]
    segment_types: dict[str, str]
    coref_links: list[CorefLink]
    text_events: list[TextEventAnn]
    video_events: list[VideoEventAnn]


@dataclass
class SynthGold:
    docs: list[DocGold]
    type_names: list[str]
    role_names: list[str]
    # "x"/"y"/"z": (n_types, d) type prototypes per modality; "role_z": (n_roles, d_z)
    prototypes: dict[str, np.ndarray] = field(default_factory=dict)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _noisy(rng, proto: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return proto.copy()
    return _unit(proto + sigma * rng.standard_normal(proto.shape))


def _random_box(rng, lo=0.15, hi=0.4) -> tuple[float, float, float, float]:
    w, h = rng.uniform(lo, hi, size=2)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    return (x1, y1, x1 + w, y1 + h)


def _box(coords) -> BoundingBox:
    x1, y1, x2, y2 = (round(float(c), 4) for c in coords)
    x1, y1 = max(0.0, x1), max(0.0, y1)
    x2, y2 = min(1.0, x2), min(1.0, y2)
    return BoundingBox(x1, y1, x2, y2)


def _jitter(rng, coords, amount=0.02):
    x1, y1, x2, y2 = coords
    dx, dy = rng.uniform(-amount, amount, size=2)
    dx = float(np.clip(dx, -x1, 1.0 - x2))
    dy = float(np.clip(dy, -y1, 1.0 - y2))
    return (x1 + dx, y1 + dy, x2 + dx, y2 + dy)


def generate_corpus(cfg: SynthConfig, ontology: Ontology | None = None) -> tuple[list[MultimediaDocument], SynthGold]:
    """Generate ``cfg.n_docs`` documents; a pure function of ``cfg``."""
    ontology = ontology or default_ontology()
    rng = np.random.default_rng(cfg.seed)
    types = ontology.type_names
    roles = ontology.all_roles
    role_idx = {r: i for i, r in enumerate(roles)}
    n_types = len(types)

    protos = {
        "x": _unit(rng.standard_normal((n_types, cfg.d_x))),
        "y": _unit(rng.standard_normal((n_types, cfg.d_y))),
        "z": _unit(rng.standard_normal((n_types, cfg.d_z))),
        "role_z": _unit(rng.standard_normal((len(roles), cfg.d_z))),
    }
    sigma = cfg.noise_sigma

    docs, golds = [], []
    for d in range(cfg.n_docs):
        doc_id = f"doc{d:04d}"
        n_seg, n_sent = cfg.segments_per_doc, cfg.sentences_per_doc

        pool = [int(t) for t in rng.choice(n_types, size=min(n_types, n_seg), replace=False)]
        seg_t = []
        for j in range(n_seg):
            # occasional repeats give n-to-* link arities
            if seg_t and (j >= len(pool) or rng.random() < 0.25):
                seg_t.append(int(rng.choice(seg_t)))
            else:
                seg_t.append(pool[j])
        present = sorted(set(seg_t))
        absent = [t for t in range(n_types) if t not in present]
        sent_t = []
        for _ in range(n_sent):
            if present and (rng.random() < cfg.link_prob or not absent):
                sent_t.append(int(rng.choice(present)))
            else:
                sent_t.append(int(rng.choice(absent)))

        sentences, text_events = [], []
        for i, t in enumerate(sent_t):
            etype = types[t]
            schema = ontology.roles_for(etype)
            n_args = int(rng.integers(1, min(cfg.max_args, len(schema)) + 1))
            picked = sorted(rng.choice(len(schema), size=n_args, replace=False))
            arg_roles = [schema[j] for j in picked]
            items = [("trig", etype)] + [("ent", r) for r in arg_roles] + [("misc", None)]
            items += [("fill", f"w{int(rng.integers(20))}") for _ in range(cfg.filler_tokens)]
            order = rng.permutation(len(items))
            tokens, cands, args, trig = [], [], [], None
            for pos, k in enumerate(order):
                kind, val = items[k]
                if kind == "trig":
                    tokens.append(trigger_token(val))
                    trig = (pos, pos + 1)
                elif kind == "ent":
                    tokens.append(entity_token(val))
                    cands.append((pos, pos + 1))
                    args.append(TextArg((pos, pos + 1), val))
                elif kind == "misc":
                    tokens.append("ent_misc")
                    cands.append((pos, pos + 1))
                else:
                    tokens.append(val)
            sid = f"s{i}"
            args.sort(key=lambda a: schema.index(a.role))
            sentences.append(Sentence(sid, tokens, _noisy(rng, protos["x"][t], sigma), cands))
            text_events.append(TextEventAnn(sid, trig, etype, tuple(args)))

        segments, video_events = [], []
        for j, t in enumerate(seg_t):
            etype = types[t]
            vid = f"v{j}"
            if cfg.multi_instance_mode:
                clip = _unit(rng.standard_normal(cfg.d_y))
            else:
                clip = _noisy(rng, protos["y"][t], sigma)
            schema = ontology.roles_for(etype)
            n_args = int(rng.integers(1, min(cfg.max_args, len(schema)) + 1))
            picked = sorted(rng.choice(len(schema), size=n_args, replace=False))
            arg_roles = [schema[k] for k in picked]
            base_boxes = {r: _random_box(rng) for r in arg_roles}
            n_kf = cfg.keyframes_per_segment
            presence = {r: rng.random(n_kf) < 0.8 for r in arg_roles}
            for r in arg_roles:
                if not presence[r].any():
                    presence[r][int(rng.integers(n_kf))] = True
            keyframes, vargs = [], []
            for k in range(n_kf):
                fid = k * 8
                regions = []
                for r in arg_roles:
                    if not presence[r][k]:
                        continue
                    box = _box(_jitter(rng, base_boxes[r]))
                    feat = _noisy(rng, protos["role_z"][role_idx[r]], sigma)
                    regions.append(Region(box, region_label(r), round(float(rng.uniform(0.8, 0.98)), 4), feat))
                    vargs.append(VideoArg(r, fid, box))
                if k == 0:
                    regions.append(Region(_box(_random_box(rng, 0.3, 0.6)), EVENT_REGION_LABEL, 0.99,
                                          _noisy(rng, protos["z"][t], sigma)))
                for _ in range(cfg.distractor_regions_per_frame):
                    label = DISTRACTOR_LABELS[int(rng.integers(len(DISTRACTOR_LABELS)))]
                    regions.append(Region(_box(_random_box(rng, 0.05, 0.3)), label,
                                          round(float(rng.uniform(0.05, 0.6)), 4),
                                          _unit(rng.standard_normal(cfg.d_z))))
                regions = [regions[q] for q in rng.permutation(len(regions))]
                keyframes.append(Keyframe(fid, regions))
            vargs.sort(key=lambda a: (schema.index(a.role), a.keyframe_id))
            segments.append(VideoSegment(vid, 10.0 * j, 10.0 * j + 8.0, clip, keyframes))
            video_events.append(VideoEventAnn(vid, etype, tuple(vargs)))

        links = [
            CorefLink(s.sentence_id, v.segment_id)
            for s, ts in zip(sentences, sent_t)
            for v, tv in zip(segments, seg_t)
            if ts == tv
        ]
        doc = MultimediaDocument(doc_id, sentences, segments, text_events, video_events, links)
        docs.append(doc)
        golds.append(DocGold(
            doc_id,
            {s.sentence_id: types[t] for s, t in zip(sentences, sent_t)},
            {v.segment_id: types[t] for v, t in zip(segments, seg_t)},
            list(links), list(text_events), list(video_events),
        ))
    return docs, SynthGold(golds, list(types), list(roles), protos)


def link_arity(links) -> dict[str, int]:
    """Classify each link by the degrees of its endpoints.

    ``1-to-n`` means the sentence links to several segments while the segment
    links only to that sentence; ``n-to-1`` is the mirror case.
    """
    links = list(links)
    sent_deg = Counter(l.sentence_id for l in links)
    seg_deg = Counter(l.segment_id for l in links)
    hist = dict.fromkeys(ARITY_CLASSES, 0)
    for l in links:
        many_v = sent_deg[l.sentence_id] > 1
        many_s = seg_deg[l.segment_id] > 1
        key = f"{'n' if many_s else '1'}-to-{'n' if many_v else '1'}"
        hist[key] += 1
    return hist


@dataclass
class PlantReport:
    arity: dict[str, int]
    text_types: dict[str, int]
    video_types: dict[str, int]
    n_docs: int
    n_links: int

    def to_dict(self) -> dict:
        return asdict(self)


def plant_report(corpus, gold: SynthGold | None = None) -> PlantReport:
    """Type and link-arity histograms, computed per document then summed.

    When ``gold`` is given its links and events are counted; otherwise the
    annotations carried by the documents themselves.
    """
    arity = dict.fromkeys(ARITY_CLASSES, 0)
    text_types: Counter = Counter()
    video_types: Counter = Counter()
    units = gold.docs if gold is not None else corpus
    n_links = 0
    for doc in units:
        for k, v in link_arity(doc.coref_links).items():
            arity[k] += v
        n_links += len(doc.coref_links)
        text_types.update(e.event_type for e in doc.text_events)
        video_types.update(e.event_type for e in doc.video_events)
    return PlantReport(arity, dict(sorted(text_types.items())), dict(sorted(video_types.items())), len(units), n_links)
