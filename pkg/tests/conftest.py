import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mmevent.corpus import (
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

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_region(box, conf=0.5, label="obj", d=4, seed=0):
    rng = np.random.default_rng(seed)
    return Region(BoundingBox(*box), label, conf, rng.normal(size=d))


def tiny_doc(n_sent=2, n_seg=2, d=4, with_events=True, doc_id="d0"):
    rng = np.random.default_rng(0)
    sents = [Sentence(f"s{i}", ["trig_Conflict.Attack", "ent_attacker", "w1"], rng.normal(size=d), [(1, 2), (2, 3)])
             for i in range(n_sent)]
    segs = []
    for j in range(n_seg):
        kfs = [Keyframe(f, [make_region((0.1, 0.1, 0.4, 0.4), 0.9, "obj_attacker", d, j * 10 + f),
                            make_region((0.5, 0.5, 0.9, 0.9), 0.3, "car", d, j * 10 + f + 1)]) for f in (0, 8, 16)]
        segs.append(VideoSegment(f"v{j}", 2.0 * j, 2.0 * j + 2, rng.normal(size=d), kfs))
    doc = MultimediaDocument(doc_id, sents, segs)
    if with_events and n_sent and n_seg:
        doc.text_events = [TextEventAnn("s0", (0, 1), "Conflict.Attack", (TextArg((1, 2), "Attacker"),))]
        doc.video_events = [VideoEventAnn("v0", "Conflict.Attack", (VideoArg("Attacker", 0, BoundingBox(0.1, 0.1, 0.4, 0.4)),))]
        doc.coref_links = [CorefLink("s0", "v0")]
    return doc


@pytest.fixture
def doc():
    return tiny_doc()


_TYPES = ["Conflict.Attack", "Justice.ArrestJail"]
_ROLES = {"Conflict.Attack": ["Attacker", "Target"], "Justice.ArrestJail": ["Jailer", "Detainee"]}


def _rand_box(rng):
    x1, y1 = rng.choice([0.0, 0.1, 0.2]), rng.choice([0.0, 0.1, 0.2])
    return BoundingBox(float(x1), float(y1), float(x1 + rng.choice([0.2, 0.3, 0.5])), float(y1 + rng.choice([0.2, 0.4])))


def _rand_text_event(rng, sid):
    t = str(rng.choice(_TYPES))
    s = int(rng.integers(0, 3))
    args = tuple(TextArg((a, a + 1), str(rng.choice(_ROLES[t]))) for a in sorted(set(rng.integers(3, 6, size=rng.integers(0, 2)).tolist())))
    return TextEventAnn(sid, (s, s + 1), t, args)


def _rand_video_event(rng, vid):
    t = str(rng.choice(_TYPES))
    args = tuple(VideoArg(str(rng.choice(_ROLES[t])), int(rng.choice([0, 8])), _rand_box(rng)) for _ in range(rng.integers(0, 2)))
    return VideoEventAnn(vid, t, args)


ORACLE_MAX_ITEMS = 6  # 3 text + 3 video arguments can merge into 6 multimedia arguments


def random_instance(rng, max_items=3, n_docs=2):
    """Tiny gold/pred document pairs over a small value space, so collisions are common.

    Each document has at most ``max_items`` gold and predicted events per
    modality, each with at most one argument.
    """
    from mmevent.corpus import DocumentPredictions

    golds, preds = [], []
    for d in range(n_docs):
        doc = tiny_doc(2, 2, with_events=False, doc_id=f"d{d}")
        sids, vids = ["s0", "s1"], ["v0", "v1"]
        doc.text_events = [_rand_text_event(rng, str(rng.choice(sids))) for _ in range(rng.integers(0, max_items + 1))]
        doc.video_events = [_rand_video_event(rng, str(rng.choice(vids))) for _ in range(rng.integers(0, max_items + 1))]
        doc.coref_links = sorted({CorefLink(str(rng.choice(sids)), str(rng.choice(vids))) for _ in range(rng.integers(0, 3))})
        golds.append(doc)
        preds.append(DocumentPredictions(
            doc.doc_id,
            [_rand_text_event(rng, str(rng.choice(sids))) for _ in range(rng.integers(0, max_items + 1))],
            [_rand_video_event(rng, str(rng.choice(vids))) for _ in range(rng.integers(0, max_items + 1))],
            sorted({CorefLink(str(rng.choice(sids)), str(rng.choice(vids))) for _ in range(rng.integers(0, 3))}),
        ))
    return golds, preds


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
