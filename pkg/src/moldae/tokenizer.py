"""Chemical rule tokenizer and a trainable unigram subword tokenizer.

The rule tokenizer splits a SMILES string into its logical symbols (bracket
atoms, two-letter elements, ``%nn`` ring closures, single characters).  The
unigram tokenizer is trained by EM over the segmentation lattice and decoded
by Viterbi; SMILES is case-sensitive, so no normalization of any kind is
applied.
"""

from __future__ import annotations

import math
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field

BOS, PAD, EOS, UNK, MASK = "<s>", "<pad>", "</s>", "<unk>", "<mask>"
SPECIAL_TOKENS = (BOS, PAD, EOS, UNK, MASK)
BOS_ID, PAD_ID, EOS_ID, UNK_ID, MASK_ID = range(5)
NUM_SPECIALS = len(SPECIAL_TOKENS)

# Score given to an <unk> lattice step: bad enough that any real cover wins,
# finite so the DP never produces NaNs.
_UNK_LOGPROB = -1e30


class TokenizerError(ValueError):
    pass


class UnclosedBracket(TokenizerError):
    pass


class IllegalCharacter(TokenizerError):
    pass


class CorpusEmpty(TokenizerError):
    pass


class TargetTooSmall(TokenizerError):
    pass


class UncoverableText(TokenizerError):
    pass


class UnknownId(TokenizerError):
    pass


_TWO_CHAR_ELEMENTS = ("Cl", "Br")
_SINGLE_CHARS = set("0123456789#-=/\\().:*$~@+") | \
    set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ")


def rule_tokenize(text: str) -> list[str]:
    """Split a SMILES string into symbols by the fixed longest-match table.

    Bracket atoms, two-letter elements (Cl, Br) and ``%nn`` ring closures
    are single symbols; every other legal character is its own symbol.  The
    concatenation of the result always equals the input.
    """
    symbols = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "[":
            end = text.find("]", i + 1)
            if end == -1:
                raise UnclosedBracket(f"'[' at position {i} never closed")
            symbols.append(text[i:end + 1])
            i = end + 1
        elif text[i:i + 2] in _TWO_CHAR_ELEMENTS:
            symbols.append(text[i:i + 2])
            i += 2
        elif ch == "%":
            if not text[i + 1:i + 3].isdigit() or len(text[i + 1:i + 3]) < 2:
                raise IllegalCharacter(f"'%' at position {i} not followed by two digits")
            symbols.append(text[i:i + 3])
            i += 3
        elif ch in _SINGLE_CHARS:
            symbols.append(ch)
            i += 1
        else:
            raise IllegalCharacter(f"illegal character {ch!r} at position {i}")
    return symbols


@dataclass
class TokenSeq:
    """Encoded ids plus per-token (start, end) character spans.

    Spans of special tokens are zero-width; all other spans are contiguous
    and cover the source exactly.
    """

    ids: list[int]
    offsets: list[tuple[int, int]]

    def __len__(self):
        return len(self.ids)


class DecodedString(str):
    """Decode output: a plain string carrying an ``had_unk`` flag."""

    had_unk = False

    def __new__(cls, value, had_unk=False):
        obj = super().__new__(cls, value)
        obj.had_unk = had_unk
        return obj


@dataclass
class Vocab:
    """Unigram vocabulary: specials at ids 0-4, then pieces with log-probs."""

    pieces: list[str]
    logprobs: list[float]
    _index: dict[str, int] = field(repr=False, default=None)
    _max_len: int = field(repr=False, default=0)

    def __post_init__(self):
        if len(self.pieces) != len(self.logprobs):
            raise TokenizerError("pieces and logprobs length mismatch")
        if len(set(self.pieces)) != len(self.pieces):
            raise TokenizerError("duplicate piece strings")
        self._index = {p: NUM_SPECIALS + i for i, p in enumerate(self.pieces)}
        self._max_len = max((len(p) for p in self.pieces), default=0)

    def __len__(self):
        return NUM_SPECIALS + len(self.pieces)

    @property
    def size(self):
        return len(self)

    def id_of(self, piece):
        return self._index.get(piece)

    def token_of(self, idx):
        if 0 <= idx < NUM_SPECIALS:
            return SPECIAL_TOKENS[idx]
        if NUM_SPECIALS <= idx < len(self):
            return self.pieces[idx - NUM_SPECIALS]
        raise UnknownId(f"id {idx} out of range for vocab of {len(self)}")

    def logprob_of(self, idx):
        return self.logprobs[idx - NUM_SPECIALS]

    @staticmethod
    def is_special(idx):
        return 0 <= idx < NUM_SPECIALS

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"unigram-vocab v1 size={len(self)}\n")
            for tok in SPECIAL_TOKENS:
                fh.write(f"{tok}\t0\n")
            for piece, lp in zip(self.pieces, self.logprobs):
                fh.write(f"{piece}\t{lp!r}\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if not header.startswith("unigram-vocab v1 "):
                raise TokenizerError(f"bad vocab header: {header!r}")
            declared = int(header.split("size=")[1])
            pieces, logprobs = [], []
            for lineno, line in enumerate(fh):
                token, _, lp = line.rstrip("\n").partition("\t")
                if lineno < NUM_SPECIALS:
                    if token != SPECIAL_TOKENS[lineno]:
                        raise TokenizerError(
                            f"special token {lineno} is {token!r}, "
                            f"expected {SPECIAL_TOKENS[lineno]!r}")
                    continue
                pieces.append(token)
                logprobs.append(float(lp))
        vocab = cls(pieces, logprobs)
        if len(vocab) != declared:
            raise TokenizerError(f"vocab size {len(vocab)} != declared {declared}")
        return vocab


# ---------------------------------------------------------------------------
# Lattice computations
# ---------------------------------------------------------------------------

def _logsumexp(values):
    top = max(values)
    if top == -math.inf:
        return -math.inf
    return top + math.log(sum(math.exp(v - top) for v in values))


def _lattice_edges(vocab, text):
    """Per end-position list of (start, piece_id, logprob) lattice edges."""
    edges = [[] for _ in range(len(text) + 1)]
    maxlen = vocab._max_len
    for start in range(len(text)):
        for length in range(1, min(maxlen, len(text) - start) + 1):
            piece = text[start:start + length]
            idx = vocab.id_of(piece)
            if idx is not None:
                edges[start + length].append((start, idx, vocab.logprob_of(idx)))
    return edges


def expected_counts(vocab, text):
    """Marginal expected piece counts over all segmentations of ``text``.

    Forward-backward over the segmentation lattice in log space.  The count
    of piece t is the posterior expected number of times t appears in a
    segmentation drawn from the unigram model.
    """
    n = len(text)
    edges = _lattice_edges(vocab, text)
    fwd = [-math.inf] * (n + 1)
    fwd[0] = 0.0
    for pos in range(1, n + 1):
        terms = [fwd[start] + lp for start, _, lp in edges[pos]]
        if terms:
            fwd[pos] = _logsumexp(terms)
    total = fwd[n]
    if total == -math.inf:
        raise UncoverableText(f"text not coverable by vocabulary: {text!r}")
    bwd = [-math.inf] * (n + 1)
    bwd[n] = 0.0
    for pos in range(n - 1, -1, -1):
        terms = []
        for end in range(pos + 1, min(pos + vocab._max_len, n) + 1):
            for start, idx, lp in edges[end]:
                if start == pos:
                    terms.append(lp + bwd[end])
        if terms:
            bwd[pos] = _logsumexp(terms)
    counts: dict[str, float] = defaultdict(float)
    for end in range(1, n + 1):
        for start, idx, lp in edges[end]:
            posterior = fwd[start] + lp + bwd[end] - total
            counts[vocab.token_of(idx)] += math.exp(posterior)
    return dict(counts)


def loglik(vocab, text):
    """Log-probability of ``text`` summed over all segmentations."""
    n = len(text)
    edges = _lattice_edges(vocab, text)
    fwd = [-math.inf] * (n + 1)
    fwd[0] = 0.0
    for pos in range(1, n + 1):
        terms = [fwd[start] + lp for start, _, lp in edges[pos]]
        if terms:
            fwd[pos] = _logsumexp(terms)
    if fwd[n] == -math.inf:
        raise UncoverableText(f"text not coverable by vocabulary: {text!r}")
    return fwd[n]


def _viterbi(vocab, text):
    """Best-scoring segmentation as a list of (start, end, id).

    Ties break toward fewer tokens, then leftmost-longest (the suffix DP
    prefers the longest piece at the earliest position among equal-score,
    equal-count segmentations).
    """
    n = len(text)
    maxlen = vocab._max_len
    INF = math.inf
    # best[i]: (score, ntokens, piece_end, piece_id) for text[i:]
    best: list[tuple | None] = [None] * (n + 1)
    best[n] = (0.0, 0, n, -1)
    for pos in range(n - 1, -1, -1):
        choice = None
        for length in range(1, min(maxlen, n - pos) + 1):
            idx = vocab.id_of(text[pos:pos + length])
            if idx is None:
                continue
            nxt = best[pos + length]
            if nxt is None:
                continue
            cand = (nxt[0] + vocab.logprob_of(idx), nxt[1] + 1,
                    pos + length, idx)
            if choice is None or (cand[0], -cand[1], cand[2]) > \
                    (choice[0], -choice[1], choice[2]):
                choice = cand
        # Character-granular unk fallback keeps offsets atom-mappable.
        if choice is None:
            nxt = best[pos + 1]
            if nxt is not None:
                choice = (nxt[0] + _UNK_LOGPROB, nxt[1] + 1, pos + 1, UNK_ID)
        best[pos] = choice
    if best[0] is None:
        raise UncoverableText(f"no segmentation for {text!r}")
    pieces = []
    pos = 0
    while pos < n:
        _, _, end, idx = best[pos]
        pieces.append((pos, end, idx))
        pos = end
    return pieces, best[0][0]


def encode(vocab, text, add_bos=False, add_eos=False) -> TokenSeq:
    """Viterbi-encode ``text``; uncovered characters become 1-char <unk>."""
    if text == "":
        raise TokenizerError("cannot encode empty text")
    pieces, _ = _viterbi(vocab, text)
    ids = [idx for _, _, idx in pieces]
    offsets = [(start, end) for start, end, _ in pieces]
    if add_bos:
        ids.insert(0, BOS_ID)
        offsets.insert(0, (0, 0))
    if add_eos:
        ids.append(EOS_ID)
        offsets.append((len(text), len(text)))
    return TokenSeq(ids=ids, offsets=offsets)


def viterbi_score(vocab, text):
    """Score of the best segmentation (exposed for optimality checks)."""
    _, score = _viterbi(vocab, text)
    return score


def decode(vocab, seq) -> DecodedString:
    """Concatenate piece surfaces, dropping specials; <unk> surfaces as-is."""
    ids = seq.ids if isinstance(seq, TokenSeq) else list(seq)
    parts = []
    had_unk = False
    for idx in ids:
        if idx == UNK_ID:
            parts.append(UNK)
            had_unk = True
        elif Vocab.is_special(idx):
            continue
        else:
            parts.append(vocab.token_of(idx))
    return DecodedString("".join(parts), had_unk=had_unk)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_unigram(corpus, target_size=1021, seed_size=None, shrink_factor=0.75,
                  em_iters=2, rng_seed=0, max_piece_len=8,
                  sample_size=None) -> Vocab:
    """Train a unigram vocabulary of exactly ``target_size`` pieces.

    Seeding takes every substring up to ``max_piece_len`` characters,
    keeps the top ``seed_size`` (default 4x target) by frequency x length
    plus all single characters, then alternates ``em_iters`` EM rounds with
    utility pruning (keeping ``shrink_factor`` of the pieces, single
    characters exempt) until the target size is reached.
    """
    corpus = list(corpus)
    if not corpus:
        raise CorpusEmpty("training corpus is empty")
    if sample_size is not None and sample_size < len(corpus):
        corpus = random.Random(rng_seed).sample(corpus, sample_size)

    alphabet = sorted({ch for text in corpus for ch in text})
    if target_size < len(alphabet):
        raise TargetTooSmall(
            f"target_size {target_size} < alphabet size {len(alphabet)}")
    if seed_size is None:
        seed_size = 4 * target_size

    # Seed candidates scored by frequency x length; initial probabilities
    # lean on frequency x length^2 so longer pieces start ahead and EM must
    # actively justify splitting them.
    substr_freq: Counter[str] = Counter()
    for text in corpus:
        n = len(text)
        for i in range(n):
            for j in range(i + 1, min(i + max_piece_len, n) + 1):
                substr_freq[text[i:j]] += 1
    multi = [(piece, freq) for piece, freq in substr_freq.items() if len(piece) > 1]
    multi.sort(key=lambda kv: (-kv[1] * len(kv[0]), kv[0]))
    chosen = [piece for piece, _ in multi[:max(0, seed_size)]]
    pieces = alphabet + chosen
    weights = {p: substr_freq[p] * len(p) ** 2 for p in pieces}
    total = sum(weights.values())
    logprobs = [math.log(weights[p] / total) for p in pieces]
    vocab = Vocab(pieces, logprobs)

    while True:
        for _ in range(em_iters):
            vocab, counts = _em_round(vocab, corpus)
        if len(vocab.pieces) <= target_size:
            break
        vocab = _prune(vocab, counts, target_size, shrink_factor, len(alphabet))

    # Final truncation to exactly target_size, then more EM so the stored
    # log-probs correspond to the final piece set.
    if len(vocab.pieces) > target_size:
        vocab = _truncate(vocab, counts, target_size, len(alphabet))
    for _ in range(em_iters):
        vocab, _ = _em_round(vocab, corpus)
    return vocab


def _em_round(vocab, corpus):
    """One E/M step: expected counts over the corpus, renormalized log-probs."""
    counts: dict[str, float] = defaultdict(float)
    for text in corpus:
        for piece, c in expected_counts(vocab, text).items():
            counts[piece] += c
    total = sum(counts.values())
    floor = 1e-12 * total
    logprobs = [math.log(max(counts.get(p, 0.0), floor) / total)
                for p in vocab.pieces]
    return Vocab(list(vocab.pieces), logprobs), counts


def _utilities(vocab, counts):
    """Likelihood loss if each multi-char piece were removed.

    Approximated as count(t) * (logp(t) - best alternative segmentation of
    t's surface without t); single characters are never candidates.
    """
    utils = {}
    for i, piece in enumerate(vocab.pieces):
        if len(piece) == 1:
            continue
        own_lp = vocab.logprobs[i]
        pruned = _viterbi_excluding(vocab, piece)
        utils[piece] = counts.get(piece, 0.0) * (own_lp - pruned)
    return utils


def _viterbi_excluding(vocab, piece):
    """Best segmentation score of ``piece`` using every piece but itself."""
    n = len(piece)
    best = [None] * (n + 1)
    best[n] = 0.0
    for pos in range(n - 1, -1, -1):
        score = None
        for length in range(1, min(vocab._max_len, n - pos) + 1):
            sub = piece[pos:pos + length]
            if sub == piece:
                continue
            idx = vocab.id_of(sub)
            if idx is None or best[pos + length] is None:
                continue
            cand = vocab.logprob_of(idx) + best[pos + length]
            if score is None or cand > score:
                score = cand
        best[pos] = score
    return best[0] if best[0] is not None else -math.inf


def _prune(vocab, counts, target_size, shrink_factor, n_single):
    utils = _utilities(vocab, counts)
    n_multi = len(vocab.pieces) - n_single
    keep_multi = max(target_size - n_single,
                     math.ceil(shrink_factor * len(vocab.pieces)) - n_single)
    # Always drop at least one piece so the loop terminates.
    keep_multi = max(0, min(keep_multi, n_multi - 1))
    ranked = sorted(utils.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = {piece for piece, _ in ranked[:keep_multi]}
    pieces, logprobs = [], []
    for piece, lp in zip(vocab.pieces, vocab.logprobs):
        if len(piece) == 1 or piece in kept:
            pieces.append(piece)
            logprobs.append(lp)
    return Vocab(pieces, logprobs)


def _truncate(vocab, counts, target_size, n_single):
    utils = _utilities(vocab, counts)
    keep_multi = target_size - n_single
    ranked = sorted(utils.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = {piece for piece, _ in ranked[:keep_multi]}
    pieces, logprobs = [], []
    for piece, lp in zip(vocab.pieces, vocab.logprobs):
        if len(piece) == 1 or piece in kept:
            pieces.append(piece)
            logprobs.append(lp)
    return Vocab(pieces, logprobs)


def corpus_loglik(vocab, corpus):
    return sum(loglik(vocab, text) for text in corpus)
