"""Evaluation: coreference link metrics and event/argument P/R/F1.

All scores are micro-averaged from integer counts summed over documents.
Predictions are matched one-to-one to gold items, greedily in document
order; a brute-force matcher over the same compatibility rules serves as
an oracle in tests.

Conventions: precision (recall) is 1 when its denominator is 0, and F1 is
0 when P + R = 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Hashable, Iterable, Sequence

from .corpus import BoundingBox, DocumentPredictions, MultimediaDocument

SETTINGS = ("text", "video", "multimedia")
IOU_THRESHOLD = 0.3


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def box_matches(pred: BoundingBox, gold: BoundingBox, threshold: float = IOU_THRESHOLD) -> bool:
    return iou(pred, gold) > threshold


@dataclass(frozen=True)
class Counts:
    tp: int
    fp: int
    fn: int
    tn: int | None = None

    def __add__(self, other: "Counts") -> "Counts":
        tn = None if self.tn is None and other.tn is None else (self.tn or 0) + (other.tn or 0)
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, tn)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def accuracy(self) -> float | None:
        if self.tn is None:
            return None
        total = self.tp + self.fp + self.fn + self.tn
        return (self.tp + self.tn) / total if total else 1.0

    def to_dict(self) -> dict:
        d = {"tp": self.tp, "fp": self.fp, "fn": self.fn}
        if self.tn is not None:
            d["tn"] = self.tn
        d.update(precision=self.precision, recall=self.recall, f1=self.f1)
        if self.tn is not None:
            d["accuracy"] = self.accuracy
        return d


ZERO = Counts(0, 0, 0)


@dataclass(frozen=True)
class ScoreReport:
    setting: str  # text | video | multimedia | coref
    mention: Counts
    argument: Counts | None = None
    indicative: bool = False

    @property
    def accuracy(self) -> float | None:
        return self.mention.accuracy

    def to_dict(self) -> dict:
        d = {"setting": self.setting, "mention": self.mention.to_dict()}
        if self.argument is not None:
            d["argument"] = self.argument.to_dict()
        if self.indicative:
            d["indicative"] = True
        return d


# -- coreference ---------------------------------------------------------------


def score_coref(gold: Iterable[Hashable], pred: Iterable[Hashable], all_pairs: int) -> ScoreReport:
    gold, pred = set(gold), set(pred)
    if all_pairs < len(gold | pred):
        raise ValueError(f"all_pairs={all_pairs} is smaller than |gold ∪ pred|={len(gold | pred)}")
    tp = len(gold & pred)
    fp = len(pred - gold)
    fn = len(gold - pred)
    return ScoreReport("coref", Counts(tp, fp, fn, all_pairs - tp - fp - fn))


def score_coref_docs(gold_docs: Sequence[MultimediaDocument], pred_docs: Sequence[DocumentPredictions]) -> ScoreReport:
    by_id = _index_preds(gold_docs, pred_docs)
    total = Counts(0, 0, 0, 0)
    for doc in gold_docs:
        pred = by_id.get(doc.doc_id)
        links = pred.coref_links if pred else []
        total = total + score_coref(doc.coref_links, links, len(doc.sentences) * len(doc.segments)).mention
    return ScoreReport("coref", total)


# -- matching ------------------------------------------------------------------

Compatible = Callable[[object, object], bool]


@dataclass
class MatchProblem:
    """Gold and predicted items for one document and one scoring level."""

    gold: list
    pred: list
    compatible: Compatible
    affinity: Callable[[object, object], float] = lambda g, p: 1.0


def greedy_tp(prob: MatchProblem) -> int:
    """Walk predictions in order; each takes the best still-free compatible gold."""
    used = [False] * len(prob.gold)
    tp = 0
    for p in prob.pred:
        best, best_aff = None, None
        for gi, g in enumerate(prob.gold):
            if used[gi] or not prob.compatible(g, p):
                continue
            aff = prob.affinity(g, p)
            if best is None or aff > best_aff:
                best, best_aff = gi, aff
        if best is not None:
            used[best] = True
            tp += 1
    return tp


def exhaustive_tp(prob: MatchProblem) -> int:
    """Largest one-to-one matching, by enumerating every assignment."""
    edges = [[gi for gi, g in enumerate(prob.gold) if prob.compatible(g, p)] for p in prob.pred]

    def best(k: int, used: frozenset) -> int:
        if k == len(edges):
            return 0
        top = best(k + 1, used)
        for gi in edges[k]:
            if gi not in used:
                top = max(top, 1 + best(k + 1, used | {gi}))
        return top

    return best(0, frozenset())


def _counts(prob: MatchProblem, tp: int) -> Counts:
    return Counts(tp, len(prob.pred) - tp, len(prob.gold) - tp)


# -- item construction -----------------------------------------------------------


def _text_mentions(events):
    return [(e.sentence_id, tuple(e.trigger_span), e.event_type) for e in events]


def _text_args(events):
    return [(e.sentence_id, e.event_type, tuple(a.span), a.role) for e in events for a in e.args]


def _video_mentions(events):
    return [(e.segment_id, e.event_type) for e in events]


def _video_args(events):
    return [(e.segment_id, e.event_type, a.role, a.keyframe_id, a.box) for e in events for a in e.args]


def _video_arg_ok(g, p) -> bool:
    return g[:4] == p[:4] and box_matches(p[4], g[4])


def _video_arg_iou(g, p) -> float:
    return iou(p[4], g[4])


@dataclass(frozen=True)
class MultimediaEvent:
    """Text and video mentions of one event, merged through coreference links."""

    event_type: str
    triggers: frozenset  # {(sentence_id, span)}
    segments: frozenset  # {segment_id}
    text_args: tuple  # ((role, sentence_id, span), ...)
    video_args: tuple  # ((role, segment_id, keyframe_id, box), ...)


def multimedia_events(text_events, video_events, links) -> list[MultimediaEvent]:
    """Cluster events: a text and a video event merge when their sentence and
    segment are linked and their types agree. Unlinked events stay singleton.
    Clusters are ordered by their first member (text events first)."""
    n_t = len(text_events)
    parent = list(range(n_t + len(video_events)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    linked = {(l.sentence_id, l.segment_id) for l in links}
    for i, te in enumerate(text_events):
        for j, ve in enumerate(video_events):
            if te.event_type == ve.event_type and (te.sentence_id, ve.segment_id) in linked:
                ra, rb = find(i), find(n_t + j)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for k in range(len(parent)):
        groups.setdefault(find(k), []).append(k)
    out = []
    for root in sorted(groups):
        members = groups[root]
        tes = [text_events[k] for k in members if k < n_t]
        ves = [video_events[k - n_t] for k in members if k >= n_t]
        etype = (tes or ves)[0].event_type
        out.append(MultimediaEvent(
            etype,
            frozenset((e.sentence_id, tuple(e.trigger_span)) for e in tes),
            frozenset(e.segment_id for e in ves),
            tuple((a.role, e.sentence_id, tuple(a.span)) for e in tes for a in e.args),
            tuple((a.role, e.segment_id, a.keyframe_id, a.box) for e in ves for a in e.args),
        ))
    return out


def _mm_mention_ok(g: MultimediaEvent, p: MultimediaEvent) -> bool:
    return g.event_type == p.event_type and bool(g.triggers & p.triggers or g.segments & p.segments)


@dataclass(frozen=True)
class MultimediaArgument:
    event_type: str
    role: str
    spans: frozenset  # {(sentence_id, span)}
    boxes: tuple  # ((segment_id, keyframe_id, box), ...)


def _mm_args(events: Sequence[MultimediaEvent]) -> list[MultimediaArgument]:
    out = []
    for ev in events:
        roles: dict[str, tuple[set, list]] = {}
        for role, sid, span in ev.text_args:
            roles.setdefault(role, (set(), []))[0].add((sid, span))
        for role, vid, kf, box in ev.video_args:
            roles.setdefault(role, (set(), []))[1].append((vid, kf, box))
        for role, (spans, boxes) in roles.items():
            out.append(MultimediaArgument(ev.event_type, role, frozenset(spans), tuple(boxes)))
    return out


def _mm_arg_ok(g: MultimediaArgument, p: MultimediaArgument) -> bool:
    if g.event_type != p.event_type or g.role != p.role:
        return False
    if g.spans & p.spans:
        return True
    return any(gv == pv and gk == pk and box_matches(pb, gb) for gv, gk, gb in g.boxes for pv, pk, pb in p.boxes)


def _eq(g, p) -> bool:
    return g == p


def match_problems(gold: MultimediaDocument, pred: DocumentPredictions | None, setting: str) -> tuple[MatchProblem, MatchProblem]:
    """(mention, argument) matching problems for one document."""
    pt = pred.text_events if pred else []
    pv = pred.video_events if pred else []
    if setting == "text":
        return (MatchProblem(_text_mentions(gold.text_events), _text_mentions(pt), _eq),
                MatchProblem(_text_args(gold.text_events), _text_args(pt), _eq))
    if setting == "video":
        return (MatchProblem(_video_mentions(gold.video_events), _video_mentions(pv), _eq),
                MatchProblem(_video_args(gold.video_events), _video_args(pv), _video_arg_ok, _video_arg_iou))
    if setting == "multimedia":
        g_ev = multimedia_events(gold.text_events, gold.video_events, gold.coref_links)
        p_ev = multimedia_events(pt, pv, pred.coref_links if pred else [])
        return (MatchProblem(g_ev, p_ev, _mm_mention_ok),
                MatchProblem(_mm_args(g_ev), _mm_args(p_ev), _mm_arg_ok))
    raise ValueError(f"unknown setting {setting!r}; expected one of {SETTINGS}")


def _index_preds(gold_docs, pred_docs) -> dict[str, DocumentPredictions]:
    known = {d.doc_id for d in gold_docs}
    by_id = {}
    for p in pred_docs:
        if p.doc_id not in known:
            raise ValueError(f"prediction for unknown document {p.doc_id!r}")
        if p.doc_id in by_id:
            raise ValueError(f"duplicate predictions for document {p.doc_id!r}")
        by_id[p.doc_id] = p
    return by_id


def _score(gold_docs, pred_docs, setting, matcher) -> ScoreReport:
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}; expected one of {SETTINGS}")
    by_id = _index_preds(gold_docs, pred_docs)
    mention, argument = ZERO, ZERO
    for doc in gold_docs:
        mp, ap = match_problems(doc, by_id.get(doc.doc_id), setting)
        mention = mention + _counts(mp, matcher(mp))
        argument = argument + _counts(ap, matcher(ap))
    return ScoreReport(setting, mention, argument)


def score_extraction(gold_docs: Sequence[MultimediaDocument], pred_docs: Sequence[DocumentPredictions], setting: str) -> ScoreReport:
    return _score(gold_docs, pred_docs, setting, greedy_tp)


class InstanceTooLargeError(ValueError):
    pass


def brute_force_score(gold_docs, pred_docs, setting: str, max_items: int = 5) -> ScoreReport:
    """Same rules as :func:`score_extraction`, optimal matching by enumeration."""

    def matcher(prob: MatchProblem) -> int:
        if len(prob.gold) > max_items or len(prob.pred) > max_items:
            raise InstanceTooLargeError(
                f"{len(prob.gold)} gold / {len(prob.pred)} predicted items exceeds {max_items}"
            )
        return exhaustive_tp(prob)

    return _score(gold_docs, pred_docs, setting, matcher)


# -- reporting -----------------------------------------------------------------


def _pct(x: float) -> str:
    return f"{100 * x:5.1f}"


def format_table(reports: dict[str, ScoreReport]) -> str:
    """Text table: one column block per setting, Event Mention / Argument Role x P R F1."""
    settings = [s for s in SETTINGS if s in reports]
    head1 = "".join(f"| {s.capitalize() + ' Evaluation':^37} " for s in settings) + "|"
    head2 = "".join(f"| {'Event Mention':^17} | {'Argument Role':^17} " for _ in settings) + "|"
    head3 = "".join("|   P     R     F1  |   P     R     F1  " for _ in settings) + "|"
    row = ""
    for s in settings:
        r = reports[s]
        arg = r.argument or ZERO
        row += f"| {_pct(r.mention.precision)} {_pct(r.mention.recall)} {_pct(r.mention.f1)} "
        row += f"| {_pct(arg.precision)} {_pct(arg.recall)} {_pct(arg.f1)} "
    row += "|"
    lines = [head1, head2, head3, row]
    if "coref" in reports:
        c = reports["coref"].mention
        lines.append(f"Coreference: P {_pct(c.precision)}  R {_pct(c.recall)}  F1 {_pct(c.f1)}  Acc {_pct(c.accuracy)}")
    if any(r.indicative for r in reports.values()):
        lines.append("(indicative: scored on predicted pairs)")
    return "\n".join(lines) + "\n"


def reports_to_json(reports: dict[str, ScoreReport], **extra) -> str:
    payload = {k: v.to_dict() for k, v in reports.items()}
    payload.update(extra)
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
