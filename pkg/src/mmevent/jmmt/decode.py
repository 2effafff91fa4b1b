"""Greedy and beam decoding for the video head.

Scores are summed token log-probabilities divided by ``len ** alpha``
where ``len`` counts generated tokens (the leading ``[BOS]`` excluded).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .model import JmmtModel


def default_max_len(n_roles: int, t: int) -> int:
    """Longest well-formed target plus slack: ``4 + n_roles * (1 + 4t) + 2``."""
    return 4 + n_roles * (1 + 4 * t) + 2


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]  # starts with [BOS]
    logprob: float
    finished: bool

    def score(self, alpha: float = 1.0) -> float:
        n = max(len(self.tokens) - 1, 1)
        return self.logprob / n**alpha


def _max_len(model: JmmtModel, max_len: int | None) -> int:
    if max_len is None:
        max_len = default_max_len(max(len(model.vocab.ontology.roles_for(t)) for t in model.event_types), model.cfg.frames_t)
    return min(max_len, model.cfg.max_target_len - 1)


@torch.no_grad()
def _step_logprobs(model: JmmtModel, memory: torch.Tensor, mem_pad: torch.Tensor, prefixes: list[tuple[int, ...]]) -> torch.Tensor:
    n = len(prefixes)
    prefix = torch.tensor(prefixes, dtype=torch.long)
    logits = model.decode_logits(memory.expand(n, -1, -1), mem_pad.expand(n, -1), prefix)[:, -1]
    return torch.log_softmax(logits.double(), dim=-1)


@torch.no_grad()
def greedy_decode(model: JmmtModel, memory: torch.Tensor, mem_pad: torch.Tensor, max_len: int | None = None) -> Hypothesis:
    """Argmax at each step; the lowest token id wins exact ties."""
    max_len = _max_len(model, max_len)
    eos = model.vocab.eos_id
    seq, lp = (model.vocab.bos_id,), 0.0
    while len(seq) - 1 < max_len:
        logp = _step_logprobs(model, memory, mem_pad, [seq])[0]
        tok = int(torch.argmax(logp))
        seq, lp = seq + (tok,), lp + float(logp[tok])
        if tok == eos:
            return Hypothesis(seq, lp, True)
    return Hypothesis(seq, lp, False)


def _rank_key(h: Hypothesis, alpha: float):
    return (-h.score(alpha), h.tokens)


@torch.no_grad()
def beam_search(model: JmmtModel, memory: torch.Tensor, mem_pad: torch.Tensor, width: int = 5,
                max_len: int | None = None, alpha: float = 1.0, keep_greedy: bool = True) -> Hypothesis:
    """Length-normalized beam search.

    Ties in normalized score go to the lexicographically smaller id sequence.
    With ``width == 1`` this is exactly :func:`greedy_decode`. With
    ``keep_greedy`` the greedy hypothesis joins the final comparison, so the
    result never scores below greedy.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    max_len = _max_len(model, max_len)
    eos = model.vocab.eos_id
    beams = [Hypothesis((model.vocab.bos_id,), 0.0, False)]
    while any(not b.finished for b in beams):
        live = [b for b in beams if not b.finished]
        if len(live[0].tokens) - 1 >= max_len:
            break
        logp = _step_logprobs(model, memory, mem_pad, [b.tokens for b in live])
        pool = [b for b in beams if b.finished]
        for b, row in zip(live, logp):
            order = torch.argsort(-row, stable=True)[:width].tolist()
            for tok in order:
                pool.append(Hypothesis(b.tokens + (tok,), b.logprob + float(row[tok]), tok == eos))
        pool.sort(key=lambda h: _rank_key(h, alpha))
        beams = pool[:width]
    best = min(beams, key=lambda h: _rank_key(h, alpha))
    if keep_greedy and width > 1:
        g = greedy_decode(model, memory, mem_pad, max_len)
        best = min([best, g], key=lambda h: _rank_key(h, alpha))
    return best


@torch.no_grad()
def sequence_logprob(model: JmmtModel, memory: torch.Tensor, mem_pad: torch.Tensor, tokens: tuple[int, ...]) -> float:
    """Total log-probability of ``tokens[1:]`` given ``tokens[0]`` under teacher forcing."""
    prefix = torch.tensor([tokens[:-1]], dtype=torch.long)
    logp = torch.log_softmax(model.decode_logits(memory, mem_pad, prefix)[0].double(), dim=-1)
    return float(sum(logp[i, tok] for i, tok in enumerate(tokens[1:])))
