"""Self-supervised multimodal event coreference.

Three gated projection heads map sentence (``f``), clip (``g``) and region
(``h``) features into a shared unit-norm space. Training pulls co-occurring
sentence/clip pairs together with an in-batch noise-contrastive loss and,
per sentence, a multi-instance loss over all regions of its clip. Forward
and backward passes are written out by hand in numpy so that the gradients
can be checked against finite differences.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import CorefLink, MultimediaDocument, select_regions

log = logging.getLogger(__name__)

NORM_EPS = 1e-12
HEADS = ("f", "g", "h")
PARAMS = ("W1", "b1", "W2", "b2")


class NumericInputError(ValueError):
    pass


class CorefPreconditionError(ValueError):
    pass


class CorefConfigError(ValueError):
    pass


class CorefDivergenceError(RuntimeError):
    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch, self.step, self.loss = epoch, step, loss
        super().__init__(f"loss became {loss} at epoch {epoch}, step {step}")


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@dataclass
class GatedHead:
    """Affine map, multiplicative sigmoid gate, then L2 normalization."""

    W1: np.ndarray  # (d_out, d_in)
    b1: np.ndarray
    W2: np.ndarray  # (d_out, d_out)
    b2: np.ndarray

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "GatedHead":
        return cls(
            rng.standard_normal((d_out, d_in)) / math.sqrt(d_in),
            np.zeros(d_out),
            rng.standard_normal((d_out, d_out)) / math.sqrt(d_out),
            np.zeros(d_out),
        )

    @property
    def d_in(self) -> int:
        return self.W1.shape[1]

    @property
    def d_out(self) -> int:
        return self.W1.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def forward(self, X: np.ndarray):
        U = X @ self.W1.T + self.b1
        gate = _sigmoid(U @ self.W2.T + self.b2)
        V = U * gate
        norm = np.linalg.norm(V, axis=1, keepdims=True)
        out = V / (norm + NORM_EPS)
        return out, (X, U, gate, V, norm)

    def backward(self, d_out: np.ndarray, cache) -> dict[str, np.ndarray]:
        X, U, gate, V, norm = cache
        denom = norm + NORM_EPS
        safe = np.where(norm > 0, norm, 1.0)
        dV = d_out / denom - V * (np.sum(d_out * V, axis=1, keepdims=True) / (denom**2 * safe))
        dA = dV * U * gate * (1.0 - gate)
        dU = dV * gate + dA @ self.W2
        return {"W1": dU.T @ X, "b1": dU.sum(axis=0), "W2": dA.T @ U, "b2": dA.sum(axis=0)}


def project(head: GatedHead, v: np.ndarray) -> np.ndarray:
    """Project one vector (or a stack of row vectors) into the common space."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != head.d_in:
        raise CorefConfigError(f"input dimension {v.shape[-1]} != head input dimension {head.d_in}")
    out, _ = head.forward(np.atleast_2d(v))
    return out[0] if v.ndim == 1 else out


@dataclass
class CorefModel:
    f_head: GatedHead
    g_head: GatedHead
    h_head: GatedHead
    # "clip": S = f(x).g(y); "clip+region" averages in the best region match
    scoring: str = "clip"
    frames_t: int = 3
    per_frame_k: int = 5

    @classmethod
    def init(cls, d_x: int, d_y: int, d_z: int, d: int = 64, seed: int = 0, **kw) -> "CorefModel":
        rng = np.random.default_rng(seed)
        return cls(GatedHead.init(d_x, d, rng), GatedHead.init(d_y, d, rng), GatedHead.init(d_z, d, rng), **kw)

    @property
    def common_dim(self) -> int:
        return self.f_head.d_out

    def head(self, name: str) -> GatedHead:
        return {"f": self.f_head, "g": self.g_head, "h": self.h_head}[name]

    def copy(self) -> "CorefModel":
        heads = [GatedHead(*(p.copy() for p in self.head(n).params().values())) for n in HEADS]
        return CorefModel(*heads, scoring=self.scoring, frames_t=self.frames_t, per_frame_k=self.per_frame_k)


@dataclass
class CorefBatch:
    sentences: np.ndarray  # (n, d_x)
    clips: np.ndarray  # (n, d_y)
    positive_regions: list[np.ndarray] = field(default_factory=list)  # each (m_i, d_z)
    # None means every region of every other item is a negative
    negative_regions: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return self.sentences.shape[0]


def _check_finite(name, a):
    if not np.all(np.isfinite(a)):
        raise NumericInputError(f"non-finite values in {name}")


def contrastive_term(pos: np.ndarray, neg: np.ndarray):
    """``-log(sum e^pos / (sum e^pos + sum e^neg))`` and its gradients.

    Returns ``(loss, d_pos, d_neg)``. Computed with log-sum-exp; with no
    negatives the loss is exactly zero.
    """
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if neg.size == 0:
        return 0.0, np.zeros_like(pos), np.zeros_like(neg)
    allv = np.concatenate([pos, neg])
    m = allv.max()
    e_all = np.exp(allv - m)
    z_all = e_all.sum()
    e_pos = e_all[: pos.size]
    z_pos = e_pos.sum()
    loss = float(np.log(z_all) - np.log(z_pos))
    p_all = e_all / z_all
    d_pos = p_all[: pos.size] - e_pos / z_pos
    d_neg = p_all[pos.size :]
    return loss, d_pos, d_neg


def _empty_grads(model: CorefModel, names) -> dict:
    return {n: {k: np.zeros_like(v) for k, v in model.head(n).params().items()} for n in names}


def nce_loss(model: CorefModel, batch: CorefBatch):
    """In-batch NCE, averaged over items.

    The negatives of item ``i`` are every mismatched pairing that involves
    it: ``(x_i, y_j)`` and ``(x_j, y_i)`` for ``j != i``.
    """
    X, Y = np.asarray(batch.sentences, float), np.asarray(batch.clips, float)
    _check_finite("sentence features", X)
    _check_finite("clip features", Y)
    n = X.shape[0]
    if n < 1:
        raise CorefPreconditionError("empty batch")
    F, cf = model.f_head.forward(X)
    G, cg = model.g_head.forward(Y)
    S = F @ G.T
    dS = np.zeros_like(S)
    total = 0.0
    for i in range(n):
        others = np.r_[0:i, i + 1 : n]
        neg = np.concatenate([S[i, others], S[others, i]])
        li, dp, dn = contrastive_term(S[i, i : i + 1], neg)
        total += li
        dS[i, i] += dp[0]
        dS[i, others] += dn[: n - 1]
        dS[others, i] += dn[n - 1 :]
    dS /= n
    grads = {"f": model.f_head.backward(dS @ G, cf), "g": model.g_head.backward(dS.T @ F, cg)}
    return total / n, grads


def milo_loss(model: CorefModel, batch: CorefBatch):
    """Multi-instance loss between each sentence and all regions of its clip."""
    X = np.asarray(batch.sentences, float)
    _check_finite("sentence features", X)
    n = X.shape[0]
    if len(batch.positive_regions) != n:
        raise CorefPreconditionError("positive_regions must have one entry per item")
    pos_blocks = [np.atleast_2d(np.asarray(p, float)) for p in batch.positive_regions]
    for i, p in enumerate(pos_blocks):
        if p.size == 0:
            raise CorefPreconditionError(f"item {i} has no positive regions")
        _check_finite(f"regions of item {i}", p)
    if batch.negative_regions is None:
        neg_blocks = [
            np.concatenate([pos_blocks[j] for j in range(n) if j != i]) if n > 1 else pos_blocks[0][:0]
            for i in range(n)
        ]
    else:
        neg_blocks = [np.asarray(q, float).reshape(-1, pos_blocks[0].shape[1]) for q in batch.negative_regions]
    for i, q in enumerate(neg_blocks):
        _check_finite(f"negative regions of item {i}", q)

    F, cf = model.f_head.forward(X)
    Z = np.concatenate(pos_blocks + neg_blocks)
    H, ch = model.h_head.forward(Z)
    offsets = np.cumsum([0] + [b.shape[0] for b in pos_blocks + neg_blocks])
    dF = np.zeros_like(F)
    dH = np.zeros_like(H)
    total = 0.0
    for i in range(n):
        ps = slice(offsets[i], offsets[i + 1])
        ns = slice(offsets[n + i], offsets[n + i + 1])
        li, dp, dn = contrastive_term(H[ps] @ F[i], H[ns] @ F[i])
        total += li
        dF[i] += dp @ H[ps] + dn @ H[ns]
        dH[ps] += np.outer(dp, F[i])
        dH[ns] += np.outer(dn, F[i])
    grads = {"f": model.f_head.backward(dF / n, cf), "h": model.h_head.backward(dH / n, ch)}
    return total / n, grads


def add_grads(*gs: dict) -> dict:
    out: dict = {}
    for g in gs:
        for head, params in g.items():
            acc = out.setdefault(head, {})
            for k, v in params.items():
                acc[k] = acc[k] + v if k in acc else v.copy()
    return out


def mmcoref_loss(model: CorefModel, batch: CorefBatch):
    l1, g1 = nce_loss(model, batch)
    l2, g2 = milo_loss(model, batch)
    return l1 + l2, add_grads(g1, g2)


# -- training ----------------------------------------------------------------


@dataclass
class CorefTrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    objective: str = "mmcoref"  # "nce" | "milo" | "mmcoref"
    common_dim: int = 64
    seed: int = 0
    max_steps: int | None = None
    frames_t: int = 3
    per_frame_k: int = 5
    max_region_negatives: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.objective not in ("nce", "milo", "mmcoref"):
            raise CorefConfigError(f"unknown objective {self.objective!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0 or self.common_dim < 1:
            raise CorefConfigError("batch_size >= 1, epochs >= 0, lr > 0 and common_dim >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CorefItem:
    sentence: np.ndarray
    clip: np.ndarray
    regions: np.ndarray  # (m, d_z), m may be 0


def training_items(corpus: Sequence[MultimediaDocument], frames_t: int = 3, per_frame_k: int = 5) -> list[CorefItem]:
    """One item per co-occurring (sentence, segment) pair of each document."""
    items = []
    for doc in corpus:
        for link in doc.coref_links:
            seg = doc.segment(link.segment_id)
            regs = select_regions(seg, frames_t, per_frame_k)
            d_z = regs[0].feature.shape[0] if regs else 0
            R = np.stack([r.feature for r in regs]) if regs else np.zeros((0, d_z))
            items.append(CorefItem(doc.sentence(link.sentence_id).sentence_feature, seg.clip_feature, R))
    return items


def sample_region_negatives(positive_regions: Sequence[np.ndarray], rng: np.random.Generator, max_per_item: int = 16):
    """Up to ``max_per_item`` regions per item, drawn without replacement from other items."""
    n = len(positive_regions)
    out = []
    for i in range(n):
        pool = [r for j in range(n) if j != i for r in positive_regions[j]]
        d = positive_regions[i].shape[1] if positive_regions[i].ndim == 2 else 0
        if not pool:
            out.append(np.zeros((0, d)))
            continue
        take = min(max_per_item, len(pool))
        idx = rng.choice(len(pool), size=take, replace=False)
        out.append(np.stack([pool[k] for k in sorted(idx)]))
    return out


class _Adam:
    def __init__(self, model: CorefModel, lr, beta1, beta2, eps):
        self.model, self.lr, self.b1, self.b2, self.eps = model, lr, beta1, beta2, eps
        self.t = 0
        self.m = _empty_grads(model, HEADS)
        self.v = _empty_grads(model, HEADS)

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for head, pg in grads.items():
            params = self.model.head(head).params()
            for k, g in pg.items():
                m = self.m[head][k]
                v = self.v[head][k]
                m *= self.b1
                m += (1 - self.b1) * g
                v *= self.b2
                v += (1 - self.b2) * g * g
                params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _batch_loss(model, items, cfg, rng):
    X = np.stack([it.sentence for it in items])
    Y = np.stack([it.clip for it in items])
    loss, grads = 0.0, {}
    if cfg.objective in ("nce", "mmcoref"):
        l, g = nce_loss(model, CorefBatch(X, Y))
        loss, grads = loss + l, add_grads(grads, g)
    if cfg.objective in ("milo", "mmcoref"):
        keep = [i for i, it in enumerate(items) if it.regions.shape[0] > 0]
        if keep:
            pos = [items[i].regions for i in keep]
            neg = sample_region_negatives(pos, rng, cfg.max_region_negatives)
            l, g = milo_loss(model, CorefBatch(X[keep], Y[keep], pos, neg))
            loss, grads = loss + l, add_grads(grads, g)
    return loss, grads


def train_coref(corpus: Sequence[MultimediaDocument], cfg: CorefTrainConfig | None = None):
    """Train a CorefModel with Adam; returns ``(model, loss_trace)``.

    The trace holds one mean batch loss per optimizer step. Training stops
    after ``cfg.epochs`` epochs or ``cfg.max_steps`` steps, whichever is first.
    """
    cfg = cfg or CorefTrainConfig()
    items = training_items(corpus, cfg.frames_t, cfg.per_frame_k)
    if not items:
        raise CorefPreconditionError("corpus yields no co-occurring training pairs")
    with_regions = [it for it in items if it.regions.shape[0]]
    d_x, d_y = items[0].sentence.shape[0], items[0].clip.shape[0]
    d_z = with_regions[0].regions.shape[1] if with_regions else 2
    scoring = "clip" if cfg.objective == "nce" else "clip+region"
    model = CorefModel.init(d_x, d_y, d_z, cfg.common_dim, cfg.seed,
                            scoring=scoring, frames_t=cfg.frames_t, per_frame_k=cfg.per_frame_k)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = _Adam(model, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    trace: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        for start in range(0, len(items), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                return model, trace
            batch = [items[k] for k in order[start : start + cfg.batch_size]]
            loss, grads = _batch_loss(model, batch, cfg, rng)
            if not math.isfinite(loss):
                raise CorefDivergenceError(epoch, step, loss)
            opt.step(grads)
            trace.append(loss)
            step += 1
        log.debug("epoch %d loss %.4f", epoch, trace[-1] if trace else float("nan"))
    return model, trace


# -- inference ---------------------------------------------------------------


def score_pairs(model: CorefModel, doc: MultimediaDocument, mode: str | None = None) -> np.ndarray:
    """(M, N) similarity matrix between the document's sentences and segments.

    ``mode="clip"`` gives ``f(x_i) . g(y_j)``. ``mode="clip+region"`` averages
    that with the best ``f(x_i) . h(z)`` over the segment's selected regions
    (falling back to the clip term for segments with no regions). Both stay
    in [-1, 1].
    """
    mode = mode or model.scoring
    if mode not in ("clip", "clip+region"):
        raise CorefConfigError(f"unknown scoring mode {mode!r}")
    M, N = len(doc.sentences), len(doc.segments)
    if M == 0 or N == 0:
        return np.zeros((M, N))
    X = np.stack([s.sentence_feature for s in doc.sentences])
    Y = np.stack([v.clip_feature for v in doc.segments])
    for name, arr, head in (("sentence", X, model.f_head), ("clip", Y, model.g_head)):
        if arr.shape[1] != head.d_in:
            raise CorefConfigError(f"{name} feature dimension {arr.shape[1]} != model input {head.d_in}")
    F = project(model.f_head, X)
    S = F @ project(model.g_head, Y).T
    if mode == "clip":
        return S
    R = S.copy()
    for j, seg in enumerate(doc.segments):
        regs = select_regions(seg, model.frames_t, model.per_frame_k)
        if not regs:
            continue
        Z = np.stack([r.feature for r in regs])
        if Z.shape[1] != model.h_head.d_in:
            raise CorefConfigError(f"region feature dimension {Z.shape[1]} != model input {model.h_head.d_in}")
        R[:, j] = (F @ project(model.h_head, Z).T).max(axis=1)
    return 0.5 * (S + R)


def predict_links(S: np.ndarray, threshold: float, sentence_ids=None, segment_ids=None) -> set:
    """Pairs whose similarity is strictly above ``threshold``.

    Returns index pairs ``(i, j)``, or CorefLinks when ids are supplied.
    """
    S = np.asarray(S, dtype=np.float64)
    idx = {(int(i), int(j)) for i, j in zip(*np.nonzero(S > threshold))}
    if sentence_ids is None:
        return idx
    return {CorefLink(sentence_ids[i], segment_ids[j]) for i, j in idx}


def predict_doc_links(model: CorefModel, doc: MultimediaDocument, threshold: float) -> list[CorefLink]:
    S = score_pairs(model, doc)
    links = predict_links(S, threshold, [s.sentence_id for s in doc.sentences], [v.segment_id for v in doc.segments])
    order = {(s.sentence_id, v.segment_id): k for k, (s, v) in enumerate((s, v) for s in doc.sentences for v in doc.segments)}
    return sorted(links, key=lambda l: order[(l.sentence_id, l.segment_id)])


THRESHOLD_GRID = tuple(k / 100 for k in range(-100, 101))


def _f1(tp, fp, fn) -> float:
    p = tp / (tp + fp) if tp + fp else 1.0
    r = tp / (tp + fn) if tp + fn else 1.0
    return 2 * p * r / (p + r) if p + r else 0.0


def tune_threshold_from_scores(scores: Sequence[np.ndarray], gold_masks: Sequence[np.ndarray], grid=THRESHOLD_GRID) -> float:
    """Grid threshold with the best micro link F1.

    Among tied thresholds, one that does not coincide with an observed score
    is preferred (it is not sitting on a decision boundary); remaining ties go
    to the smallest.
    """
    s = np.concatenate([np.asarray(a, float).ravel() for a in scores]) if scores else np.zeros(0)
    g = np.concatenate([np.asarray(m, bool).ravel() for m in gold_masks]) if gold_masks else np.zeros(0, bool)
    if not g.any():
        raise CorefPreconditionError("validation set has no gold links")
    best, best_key = None, None
    for th in grid:
        pred = s > th
        tp = int(np.sum(pred & g))
        f1 = _f1(tp, int(np.sum(pred)) - tp, int(np.sum(g)) - tp)
        on_boundary = bool(np.any(np.abs(s - th) <= 1e-12))
        key = (f1, not on_boundary)
        if best_key is None or key > best_key:
            best, best_key = th, key
    return float(best)


def gold_mask(doc: MultimediaDocument) -> np.ndarray:
    si = {s.sentence_id: i for i, s in enumerate(doc.sentences)}
    vi = {v.segment_id: j for j, v in enumerate(doc.segments)}
    m = np.zeros((len(si), len(vi)), dtype=bool)
    for l in doc.coref_links:
        m[si[l.sentence_id], vi[l.segment_id]] = True
    return m


def tune_threshold(model: CorefModel, validation_docs: Sequence[MultimediaDocument]) -> float:
    return tune_threshold_from_scores([score_pairs(model, d) for d in validation_docs],
                                      [gold_mask(d) for d in validation_docs])


# -- persistence ---------------------------------------------------------------


def save_coref_model(model: CorefModel, path, config: dict | None = None, seed: int | None = None) -> None:
    arrays = {f"{n}.{k}": v for n in HEADS for k, v in model.head(n).params().items()}
    meta = {
        "dims": {"d_x": model.f_head.d_in, "d_y": model.g_head.d_in, "d_z": model.h_head.d_in, "d": model.common_dim},
        "seed": seed,
        "config": config or {},
        "scoring": model.scoring,
        "frames_t": model.frames_t,
        "per_frame_k": model.per_frame_k,
    }
    save_checkpoint(path, "coref", arrays, meta)


def load_coref_model(path) -> CorefModel:
    arrays, meta = load_checkpoint(path, "coref")
    heads = [GatedHead(*(np.asarray(arrays[f"{n}.{k}"], dtype=np.float64) for k in PARAMS)) for n in HEADS]
    return CorefModel(*heads, scoring=meta.get("scoring", "clip"),
                      frames_t=meta.get("frames_t", 3), per_frame_k=meta.get("per_frame_k", 5))
