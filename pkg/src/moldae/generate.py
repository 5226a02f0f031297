"""Decoding strategies and generation metrics.

Beam search is length-normalized and rng-free; sampling draws ancestral
samples at a temperature and reranks unique surfaces by per-token
perplexity.  Top-k accuracy compares dot-separated components as multisets
of canonical SMILES, so reactant order never matters.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .molgraph import SmilesError, canonical_smiles, parse_smiles
from .tokenizer import BOS_ID, EOS_ID, MASK_ID, PAD_ID, Vocab, decode
from .model import collate


class GoldUnparseable(UserWarning):
    """A reference SMILES failed to parse; the row is excluded and counted."""


@dataclass
class Hypothesis:
    ids: list[int]  # generated tokens, eos included when finished
    logprob_sum: float
    length: int
    finished: bool
    forced: bool = False
    text: str = ""

    def normalized_score(self, alpha=1.0):
        return self.logprob_sum / (self.length ** alpha)

    @property
    def perplexity(self):
        return float(torch.exp(torch.tensor(-self.logprob_sum / self.length)))


@dataclass
class GenReport:
    hypotheses: list[Hypothesis]
    scoring: str
    raw: list[Hypothesis] = field(default_factory=list)


_FORBIDDEN = (PAD_ID, BOS_ID, MASK_ID)


def _next_logprobs(model, src, prefixes):
    """Log-probabilities of the next token for each prefix (same lengths)."""
    bsz = len(prefixes)
    src_batch = collate([src] * bsz)
    tgt_in = collate([[BOS_ID] + list(p) for p in prefixes])
    with torch.no_grad():
        logits, _, _ = model(src_batch, tgt_in)
    out = F.log_softmax(logits[:, -1, :], dim=-1)
    out[:, list(_FORBIDDEN)] = float("-inf")
    return out


def beam_search(model, src, vocab: Vocab, beam=10, max_len=128,
                alpha=1.0) -> GenReport:
    """Length-normalized beam search; beam=1 is greedy decoding.

    Finished hypotheses retire to a pool; anything still live at ``max_len``
    is force-terminated and flagged.  Scores are logprob / length**alpha.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    model.eval()
    live = [((), 0.0)]
    pool: list[Hypothesis] = []
    for _ in range(max_len):
        if not live:
            break
        logprobs = _next_logprobs(model, src, [p for p, _ in live])
        candidates = []
        for row, (prefix, lp) in enumerate(live):
            scores = logprobs[row]
            for token in range(scores.shape[0]):
                s = float(scores[token])
                if s == float("-inf"):
                    continue
                candidates.append((lp + s, prefix, token))
        candidates.sort(key=lambda c: -c[0])
        new_live = []
        for lp, prefix, token in candidates:
            if token == EOS_ID:
                seq = list(prefix) + [EOS_ID]
                pool.append(Hypothesis(ids=seq, logprob_sum=lp, length=len(seq),
                                       finished=True,
                                       text=decode(vocab, seq)))
            elif len(new_live) < beam:
                new_live.append((prefix + (token,), lp))
            if len(new_live) >= beam and token != EOS_ID:
                # the candidate list is sorted; once the beam is full only
                # eos candidates can still retire into the pool
                continue
        live = new_live
    for prefix, lp in live:
        pool.append(Hypothesis(ids=list(prefix), logprob_sum=lp,
                               length=max(len(prefix), 1), finished=False,
                               forced=True, text=decode(vocab, prefix)))
    order = sorted(range(len(pool)),
                   key=lambda i: (-pool[i].normalized_score(alpha), i))
    return GenReport(hypotheses=[pool[i] for i in order[:beam]],
                     scoring="beam_lognorm")


def sample_rerank(model, src, vocab: Vocab, n=128, temperature=1.0,
                  rng: torch.Generator | None = None, max_len=128,
                  greedy=False) -> GenReport:
    """``n`` ancestral samples, deduplicated by surface, reranked by
    per-token perplexity of the whole predicted string (ascending).

    Scoring always uses the untempered model distribution; ``greedy=True``
    is the temperature -> 0 limit.
    """
    if n < 1 or temperature <= 0:
        raise ValueError("need n >= 1 and temperature > 0")
    model.eval()
    if rng is None:
        rng = torch.Generator().manual_seed(0)
    rows = [[] for _ in range(n)]
    lps = [0.0] * n
    done = [False] * n
    for _ in range(max_len):
        if all(done):
            break
        src_batch = collate([src] * n)
        tgt_in = collate([[BOS_ID] + row for row in rows])
        with torch.no_grad():
            logits, _, _ = model(src_batch, tgt_in)
        step = torch.full((n,), 0, dtype=torch.long)
        last = torch.tensor([len(r) for r in rows])
        final_logits = logits[torch.arange(n), last]
        final_logits[:, list(_FORBIDDEN)] = float("-inf")
        natural = F.log_softmax(final_logits, dim=-1)
        if greedy:
            step = final_logits.argmax(dim=-1)
        else:
            probs = torch.softmax(final_logits / temperature, dim=-1)
            step = torch.multinomial(probs, 1, generator=rng)[:, 0]
        for i in range(n):
            if done[i]:
                continue
            token = int(step[i])
            lps[i] += float(natural[i, token])
            rows[i].append(token)
            if token == EOS_ID:
                done[i] = True
    samples = []
    for i in range(n):
        finished = bool(rows[i]) and rows[i][-1] == EOS_ID
        samples.append(Hypothesis(
            ids=list(rows[i]), logprob_sum=lps[i],
            length=max(len(rows[i]), 1), finished=finished,
            forced=not finished, text=decode(vocab, rows[i])))
    best_by_text: dict[str, Hypothesis] = {}
    for hyp in samples:
        prev = best_by_text.get(hyp.text)
        if prev is None or hyp.perplexity < prev.perplexity:
            best_by_text[hyp.text] = prev if prev is not None and \
                prev.perplexity <= hyp.perplexity else hyp
    unique = list(best_by_text.values())
    unique.sort(key=lambda h: h.perplexity)
    return GenReport(hypotheses=unique, scoring="perplexity", raw=samples)


@dataclass
class TopkResult:
    fractions: dict[int, float]
    excluded_gold: int = 0

    def __getitem__(self, k):
        return self.fractions[k]

    def items(self):
        return self.fractions.items()


def _canonical_components(smiles):
    """Multiset of canonical SMILES per dot-separated component."""
    return Counter(canonical_smiles(parse_smiles(part))
                   for part in smiles.split(".") if part)


def topk_accuracy(reports, gold, ks=(1, 5, 10)) -> TopkResult:
    """Fraction of examples whose reference appears in the top-k hypotheses.

    A hit is a canonical-structure match (component multisets compared);
    unparseable hypotheses never match, unparseable references are excluded
    with a warning and counted.
    """
    if len(reports) != len(gold):
        raise ValueError(f"{len(reports)} reports vs {len(gold)} references")
    hits = {k: 0 for k in ks}
    excluded = 0
    included = 0
    for row, (report, reference) in enumerate(zip(reports, gold)):
        try:
            want = _canonical_components(reference)
            if not want:
                raise SmilesError("empty reference")
        except SmilesError as exc:
            warnings.warn(f"row {row}: unparseable reference "
                          f"{reference!r}: {exc}", GoldUnparseable,
                          stacklevel=2)
            excluded += 1
            continue
        included += 1
        match_rank = None
        for rank, hyp in enumerate(report.hypotheses):
            try:
                if _canonical_components(hyp.text) == want:
                    match_rank = rank
                    break
            except SmilesError:
                continue
        for k in ks:
            if match_rank is not None and match_rank < k:
                hits[k] += 1
    fractions = {k: (hits[k] / included if included else 0.0) for k in ks}
    return TopkResult(fractions=fractions, excluded_gold=excluded)
