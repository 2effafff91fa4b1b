"""Joint multimodal transformer: shared encoder, text head, video head.

Input layout for one (sentence, segment) pair::

    text word pieces  [SEP]  [CLIP]  ( label-pieces [REGION] x1 y1 x2 y2 )*k [SEP]  ... per keyframe

``[CLIP]`` and ``[REGION]`` positions add a linear projection of the clip
and region features to their token embedding. Coordinate tokens share the
embedding table with the video head's output vocabulary.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..corpus import Sentence, TextArg, TextEventAnn, VideoSegment, sample_keyframes, top_regions
from .vocab import Vocabulary, quantize_coord, wordpiece

KIND_TEXT, KIND_SEP, KIND_CLIP, KIND_LABEL, KIND_REGION, KIND_COORD = range(6)
NEG_INF = -1e9


class InputTruncationWarning(UserWarning):
    pass


@dataclass
class JmmtConfig:
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ff_mult: int = 4
    max_len: int = 512
    max_target_len: int = 128
    frames_t: int = 3
    per_frame_k: int = 5
    dropout: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MultimodalInput:
    token_ids: list[int]
    kinds: list[int]
    frames: list[int]  # 0 outside the visual block, k+1 for the k-th sampled keyframe
    clip_feature: np.ndarray
    region_features: list[np.ndarray]  # aligned with the [REGION] positions, in order
    word_pieces: list[tuple[int, int]]  # piece positions [start, end) for each word
    frame_ids: list[int]  # the sampled keyframe ids
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.token_ids)


def build_input(sentence: Sentence, segment: VideoSegment, vocab: Vocabulary, cfg: JmmtConfig) -> MultimodalInput:
    ids: list[int] = []
    kinds: list[int] = []
    frames: list[int] = []
    word_pieces = []
    for w in sentence.tokens:
        pieces = vocab.encode(wordpiece(w, vocab))
        word_pieces.append((len(ids), len(ids) + len(pieces)))
        ids += pieces
        kinds += [KIND_TEXT] * len(pieces)
        frames += [0] * len(pieces)
    ids.append(vocab.sep_id), kinds.append(KIND_SEP), frames.append(0)
    ids.append(vocab.clip_id), kinds.append(KIND_CLIP), frames.append(0)

    keyframes = sample_keyframes(segment, cfg.frames_t) if segment.keyframes else []
    groups = []  # (ids, kinds, frames, region feature or None)
    B = vocab.bins
    for k, kf in enumerate(keyframes):
        for r in top_regions(kf, cfg.per_frame_k):
            lab = vocab.encode(wordpiece(r.label, vocab))
            coords = [vocab.coord_id(quantize_coord(c, B)) for c in r.box.as_list()]
            g_ids = lab + [vocab.region_id] + coords
            g_kinds = [KIND_LABEL] * len(lab) + [KIND_REGION] + [KIND_COORD] * 4
            groups.append((g_ids, g_kinds, [k + 1] * len(g_ids), r.feature))
        groups.append(([vocab.sep_id], [KIND_SEP], [k + 1], None))

    notes = []
    budget = cfg.max_len - len(ids)
    if budget < 0:
        n_words = len(word_pieces)
        while word_pieces and word_pieces[-1][1] > cfg.max_len - 2:
            word_pieces.pop()
        cut = word_pieces[-1][1] if word_pieces else 0
        ids = ids[:cut] + [vocab.sep_id, vocab.clip_id]
        kinds = kinds[:cut] + [KIND_SEP, KIND_CLIP]
        frames = frames[:cut] + [0, 0]
        notes.append(f"text truncated from {n_words} to {len(word_pieces)} words")
        budget = cfg.max_len - len(ids)
    used, kept = 0, []
    for g in groups:
        if used + len(g[0]) > budget:
            break
        kept.append(g)
        used += len(g[0])
    if len(kept) < len(groups):
        notes.append(f"input over {cfg.max_len} positions; dropped {len(groups) - len(kept)} trailing visual groups")
    feats = []
    for g_ids, g_kinds, g_frames, feat in kept:
        ids += g_ids
        kinds += g_kinds
        frames += g_frames
        if feat is not None:
            feats.append(np.asarray(feat, dtype=np.float64))
    for n in notes:
        warnings.warn(n, InputTruncationWarning, stacklevel=2)
    return MultimodalInput(ids, kinds, frames, np.asarray(segment.clip_feature, dtype=np.float64), feats,
                           word_pieces, [kf.frame_id for kf in keyframes], notes)


@dataclass
class EncoderBatch:
    ids: torch.Tensor  # (B, L)
    kinds: torch.Tensor
    frames: torch.Tensor
    clip: torch.Tensor  # (B, L, d_y), non-zero only at [CLIP]
    regions: torch.Tensor  # (B, L, d_z), non-zero only at [REGION]
    pad_mask: torch.Tensor  # (B, L) True at padding
    inputs: list[MultimodalInput]


def collate_inputs(inputs: Sequence[MultimodalInput], vocab: Vocabulary, d_y: int, d_z: int,
                   dtype=torch.float32) -> EncoderBatch:
    Bn = len(inputs)
    L = max(len(x) for x in inputs)
    ids = torch.full((Bn, L), vocab.pad_id, dtype=torch.long)
    kinds = torch.zeros((Bn, L), dtype=torch.long)
    frames = torch.zeros((Bn, L), dtype=torch.long)
    clip = torch.zeros((Bn, L, d_y), dtype=dtype)
    regions = torch.zeros((Bn, L, d_z), dtype=dtype)
    pad = torch.ones((Bn, L), dtype=torch.bool)
    for b, x in enumerate(inputs):
        n = len(x)
        ids[b, :n] = torch.tensor(x.token_ids)
        kinds[b, :n] = torch.tensor(x.kinds)
        frames[b, :n] = torch.tensor(x.frames)
        pad[b, :n] = False
        kind_arr = np.asarray(x.kinds)
        clip_pos = np.nonzero(kind_arr == KIND_CLIP)[0]
        clip[b, clip_pos] = torch.as_tensor(x.clip_feature, dtype=dtype)
        reg_pos = np.nonzero(kind_arr == KIND_REGION)[0]
        if len(reg_pos):
            regions[b, reg_pos] = torch.as_tensor(np.stack(x.region_features), dtype=dtype)
    return EncoderBatch(ids, kinds, frames, clip, regions, pad, list(inputs))


class JmmtModel(nn.Module):
    def __init__(self, vocab: Vocabulary, cfg: JmmtConfig, d_y: int, d_z: int):
        super().__init__()
        self.vocab, self.cfg, self.d_y, self.d_z = vocab, cfg, d_y, d_z
        ont = vocab.ontology
        self.event_types = ont.type_names
        self.roles = ont.all_roles
        D = cfg.d_model
        self.tok_emb = nn.Embedding(len(vocab), D)
        self.pos_emb = nn.Embedding(cfg.max_len, D)
        self.kind_emb = nn.Embedding(6, D)
        self.frame_emb = nn.Embedding(cfg.frames_t + 1, D)
        self.clip_proj = nn.Linear(d_y, D)
        self.region_proj = nn.Linear(d_z, D)
        enc_layer = nn.TransformerEncoderLayer(D, cfg.n_heads, cfg.ff_mult * D, cfg.dropout, batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(enc_layer, cfg.enc_layers, norm=nn.LayerNorm(D), enable_nested_tensor=False)

        n_e, n_r = len(self.event_types), len(self.roles)
        self.trigger_cls = nn.Linear(D, 1 + 2 * n_e)  # O, then (B-e, I-e) per type
        self.role_cls = nn.Sequential(nn.Linear(2 * D, D), nn.GELU(), nn.Linear(D, 1 + n_r))
        mask = torch.zeros((n_e, 1 + n_r), dtype=torch.bool)
        mask[:, 0] = True
        role_ix = {r: i for i, r in enumerate(self.roles)}
        for e, name in enumerate(self.event_types):
            for r in ont.roles_for(name):
                mask[e, 1 + role_ix[r]] = True
        self.register_buffer("role_mask", mask, persistent=False)

        self.dec_pos_emb = nn.Embedding(cfg.max_target_len, D)
        dec_layer = nn.TransformerDecoderLayer(D, cfg.n_heads, cfg.ff_mult * D, cfg.dropout, batch_first=True, norm_first=True)
        self.decoder = nn.TransformerDecoder(dec_layer, cfg.dec_layers, norm=nn.LayerNorm(D))
        self.out_bias = nn.Parameter(torch.zeros(len(vocab)))

    # -- encoder ---------------------------------------------------------------

    def collate(self, inputs: Sequence[MultimodalInput]) -> EncoderBatch:
        return collate_inputs(inputs, self.vocab, self.d_y, self.d_z, self.tok_emb.weight.dtype)

    def encode(self, batch: EncoderBatch) -> torch.Tensor:
        L = batch.ids.shape[1]
        pos = torch.arange(L)
        x = self.tok_emb(batch.ids) + self.kind_emb(batch.kinds) + self.frame_emb(batch.frames) + self.pos_emb(pos)[None]
        is_clip = (batch.kinds == KIND_CLIP).unsqueeze(-1).to(x.dtype)
        is_region = (batch.kinds == KIND_REGION).unsqueeze(-1).to(x.dtype)
        x = x + self.clip_proj(batch.clip) * is_clip + self.region_proj(batch.regions) * is_region
        return self.encoder(x, src_key_padding_mask=batch.pad_mask)

    # -- text head -------------------------------------------------------------

    def word_reps(self, enc_b: torch.Tensor, x: MultimodalInput) -> torch.Tensor:
        """Mean of each word's piece embeddings: (n_words, D)."""
        if not x.word_pieces:
            return enc_b.new_zeros((0, enc_b.shape[-1]))
        avg = enc_b.new_zeros((len(x.word_pieces), enc_b.shape[0]))
        for w, (s, e) in enumerate(x.word_pieces):
            avg[w, s:e] = 1.0 / (e - s)
        return avg @ enc_b

    def trigger_logits(self, words: torch.Tensor) -> torch.Tensor:
        return self.trigger_cls(words)

    def role_logits(self, words: torch.Tensor, trigger: tuple[int, int], cand: tuple[int, int], event_idx: int) -> torch.Tensor:
        rep = torch.cat([words[trigger[0] : trigger[1]].mean(0), words[cand[0] : cand[1]].mean(0)])
        logits = self.role_cls(rep)
        return logits.masked_fill(~self.role_mask[event_idx], NEG_INF)

    # -- video head ------------------------------------------------------------

    def decode_logits(self, memory: torch.Tensor, mem_pad: torch.Tensor, prefix: torch.Tensor) -> torch.Tensor:
        """Next-token logits at every prefix position: (B, T, V)."""
        T = prefix.shape[1]
        y = self.tok_emb(prefix) + self.dec_pos_emb(torch.arange(T))[None]
        causal = torch.triu(torch.full((T, T), float("-inf"), dtype=y.dtype), diagonal=1)
        h = self.decoder(y, memory, tgt_mask=causal, memory_key_padding_mask=mem_pad)
        return h @ self.tok_emb.weight.T + self.out_bias


# -- supervision -----------------------------------------------------------------


def trigger_tags(n_words: int, events: Sequence[TextEventAnn], event_types: Sequence[str]) -> list[int]:
    """BIO tag ids per word: 0 = O, 1 + 2e = B-e, 2 + 2e = I-e."""
    idx = {t: i for i, t in enumerate(event_types)}
    tags = [0] * n_words
    for ev in events:
        e = idx[ev.event_type]
        s, t = ev.trigger_span
        tags[s] = 1 + 2 * e
        for w in range(s + 1, t):
            tags[w] = 2 + 2 * e
    return tags


def decode_tags(tags: Sequence[int], event_types: Sequence[str]) -> list[tuple[tuple[int, int], str]]:
    """Spans from BIO tags; a stray I- tag opens a new span."""
    spans = []
    cur = None
    for w, tag in enumerate(list(tags) + [0]):
        if tag == 0:
            kind, e = None, None
        else:
            kind, e = ("B" if tag % 2 == 1 else "I"), (tag - 1) // 2
        if cur is not None and not (kind == "I" and e == cur[1]):
            spans.append(((cur[0], w), event_types[cur[1]]))
            cur = None
        if kind is not None and cur is None:
            cur = (w, e)
    return spans


def _overlaps(a, b) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def role_pairs(events: Sequence[TextEventAnn], candidates: Sequence[tuple[int, int]],
               event_types: Sequence[str], roles: Sequence[str]):
    """(trigger span, candidate span, event index, label) with label 0 = NONE."""
    e_idx = {t: i for i, t in enumerate(event_types)}
    r_idx = {r: i for i, r in enumerate(roles)}
    out = []
    for ev in events:
        gold = {tuple(a.span): a.role for a in ev.args}
        cands = list(dict.fromkeys([tuple(c) for c in candidates] + list(gold)))
        for c in cands:
            if _overlaps(c, ev.trigger_span):
                continue
            label = 1 + r_idx[gold[c]] if c in gold else 0
            out.append((tuple(ev.trigger_span), c, e_idx[ev.event_type], label))
    return out


@dataclass
class JmmtExample:
    input: MultimodalInput
    tags: list[int]
    pairs: list
    target: list[int]  # empty: no video supervision
    doc_id: str = ""
    sentence_id: str = ""
    segment_id: str = ""


def text_loss(model: JmmtModel, enc: torch.Tensor, examples: Sequence[JmmtExample]) -> torch.Tensor:
    """Trigger-tag cross-entropy plus role cross-entropy (0 when no pairs)."""
    tag_logits, tag_gold, role_logits, role_gold = [], [], [], []
    for b, ex in enumerate(examples):
        words = model.word_reps(enc[b], ex.input)
        if words.shape[0]:
            tag_logits.append(model.trigger_logits(words))
            tag_gold += ex.tags
        for trig, cand, e, label in ex.pairs:
            role_logits.append(model.role_logits(words, trig, cand, e))
            role_gold.append(label)
    loss = enc.new_zeros(())
    if tag_logits:
        loss = loss + F.cross_entropy(torch.cat(tag_logits), torch.tensor(tag_gold))
    if role_logits:
        loss = loss + F.cross_entropy(torch.stack(role_logits), torch.tensor(role_gold))
    return loss


def sequence_ce(logits: torch.Tensor, labels: torch.Tensor, pad_id: int) -> torch.Tensor:
    """Token cross-entropy averaged over non-pad label positions."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=pad_id)


def pad_targets(targets: Sequence[Sequence[int]], pad_id: int) -> torch.Tensor:
    T = max(len(t) for t in targets)
    out = torch.full((len(targets), T), pad_id, dtype=torch.long)
    for b, t in enumerate(targets):
        out[b, : len(t)] = torch.tensor(list(t), dtype=torch.long)
    return out


def video_head_loss(model: JmmtModel, enc: torch.Tensor, pad_mask: torch.Tensor, targets: Sequence[Sequence[int]]) -> torch.Tensor:
    """Teacher-forced cross-entropy; rows with an empty target are skipped."""
    keep = [b for b, t in enumerate(targets) if len(t) >= 2]
    if not keep:
        raise ValueError("video_head_loss needs at least one target of length >= 2")
    tgt = pad_targets([targets[b] for b in keep], model.vocab.pad_id)
    logits = model.decode_logits(enc[keep], pad_mask[keep], tgt[:, :-1])
    return sequence_ce(logits, tgt[:, 1:], model.vocab.pad_id)


@dataclass
class JmmtLoss:
    total: torch.Tensor
    text: torch.Tensor
    video: torch.Tensor


def jmmt_loss(model: JmmtModel, examples: Sequence[JmmtExample], use_text: bool = True, use_video: bool = True) -> JmmtLoss:
    """Joint objective ``L_text + L_video`` over one batch.

    ``use_video=False`` (or a batch with no video targets) leaves only the
    text term; gradients of both terms reach the shared encoder.
    """
    batch = model.collate([ex.input for ex in examples])
    enc = model.encode(batch)
    zero = enc.new_zeros(())
    lt = text_loss(model, enc, examples) if use_text else zero
    targets = [ex.target for ex in examples]
    has_video = use_video and any(len(t) >= 2 for t in targets)
    lv = video_head_loss(model, enc, batch.pad_mask, targets) if has_video else zero
    return JmmtLoss(lt + lv, lt, lv)


# -- text inference --------------------------------------------------------------


@torch.no_grad()
def predict_text(model: JmmtModel, enc_b: torch.Tensor, x: MultimodalInput, sentence: Sentence) -> list[TextEventAnn]:
    words = model.word_reps(enc_b, x)
    if words.shape[0] == 0:
        return []
    tags = model.trigger_logits(words).argmax(-1).tolist()
    e_idx = {t: i for i, t in enumerate(model.event_types)}
    out = []
    for span, etype in decode_tags(tags, model.event_types):
        args = []
        for cand in sentence.entity_candidates:
            cand = tuple(cand)
            if cand[1] > words.shape[0] or _overlaps(cand, span):
                continue
            label = int(model.role_logits(words, span, cand, e_idx[etype]).argmax())
            if label:
                args.append(TextArg(cand, model.roles[label - 1]))
        out.append(TextEventAnn(sentence.sentence_id, span, etype, tuple(args)))
    return out
