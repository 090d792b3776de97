"""BLEU-n, ROUGE-n, ROUGE-L, CIDEr and METEOR over tokenized captions.

All scores are in [0, 1]. Conventions worth knowing:

* BLEU-n is clipped n-gram precision with no brevity penalty; the composite is
  the plain geometric mean of BLEU-1..4 and is 0 if any component is 0.
* ROUGE-n pools matches and reference n-grams over all references jointly.
* CIDEr uses raw-count TF, IDF ``ln((1 + N) / (1 + df))``, and no x10 scaling.
* METEOR matches exact surface tokens only.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

Tokens = Sequence[str]

ROUGE_L_BETA = 1.2
MAX_N = 4


class MetricsError(Exception):
    pass


class EmptyCorpus(MetricsError):
    pass


class MissingCorpusStats(MetricsError):
    pass


@dataclass
class ScoringInstance:
    candidate: list[str]
    references: list[list[str]]

    def __post_init__(self):
        self.candidate = list(self.candidate)
        self.references = [list(r) for r in self.references]
        if not self.references:
            raise ValueError("a scoring instance needs at least one reference")


def ngram_counts(x: Tokens, n: int) -> Counter:
    if n < 1:
        raise ValueError("n must be >= 1")
    return Counter(tuple(x[i:i + n]) for i in range(len(x) - n + 1))


# --- BLEU ---------------------------------------------------------------------

def bleu_counts(inst: ScoringInstance, n: int) -> tuple[int, int]:
    """(clipped matches, candidate n-gram total) for one instance."""
    cand = ngram_counts(inst.candidate, n)
    max_ref: Counter = Counter()
    for ref in inst.references:
        max_ref |= ngram_counts(ref, n)
    clipped = sum(min(c, max_ref[g]) for g, c in cand.items())
    return clipped, sum(cand.values())


def bleu_n(inst: ScoringInstance, n: int) -> float:
    clipped, total = bleu_counts(inst, n)
    return clipped / total if total else 0.0


def geometric_mean(values: Sequence[float]) -> float:
    if any(v <= 0 for v in values):
        return 0.0
    return math.exp(sum(math.log(v) for v in values) / len(values))


def bleu_composite(inst: ScoringInstance) -> float:
    return geometric_mean([bleu_n(inst, n) for n in range(1, MAX_N + 1)])


# --- ROUGE --------------------------------------------------------------------

def rouge_n(inst: ScoringInstance, n: int) -> float:
    cand = ngram_counts(inst.candidate, n)
    hits = total = 0
    for ref in inst.references:
        ref_counts = ngram_counts(ref, n)
        hits += sum(min(c, cand[g]) for g, c in ref_counts.items())
        total += sum(ref_counts.values())
    return hits / total if total else 0.0


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(inst: ScoringInstance, beta: float = ROUGE_L_BETA) -> float:
    best = 0.0
    for ref in inst.references:
        lcs = lcs_length(inst.candidate, ref)
        if lcs == 0:
            continue
        prec = lcs / len(inst.candidate)
        rec = lcs / len(ref)
        f = (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec)
        best = max(best, f)
    return best


# --- CIDEr --------------------------------------------------------------------

@dataclass
class CorpusStats:
    """Document frequencies per order; a document is one instance's reference set."""

    n_docs: int
    doc_freq: dict[int, Counter]

    def idf(self, n: int, gram: tuple) -> float:
        return math.log((1.0 + self.n_docs) / (1.0 + self.doc_freq[n][gram]))


def corpus_stats(instances: Sequence[ScoringInstance], max_n: int = MAX_N) -> CorpusStats:
    df = {n: Counter() for n in range(1, max_n + 1)}
    for inst in instances:
        for n in df:
            grams = set()
            for ref in inst.references:
                grams.update(ngram_counts(ref, n))
            df[n].update(grams)
    return CorpusStats(len(instances), df)


def tfidf_vector(x: Tokens, n: int, stats: CorpusStats) -> dict[tuple, float]:
    return {g: c * stats.idf(n, g) for g, c in ngram_counts(x, n).items()}


def _cosine(u: dict, v: dict) -> float:
    nu = math.sqrt(sum(w * w for w in u.values()))
    nv = math.sqrt(sum(w * w for w in v.values()))
    if nu == 0 or nv == 0:
        return 0.0
    dot = sum(w * v[g] for g, w in u.items() if g in v)
    # guard rounding just above 1 for identical vectors
    return min(1.0, dot / (nu * nv))


def cider(inst: ScoringInstance, stats: CorpusStats | None) -> tuple[list[float], float]:
    """Per-order scores for n = 1..4 and their unweighted mean."""
    if stats is None:
        raise MissingCorpusStats("CIDEr needs document frequencies from the evaluation set")
    per_n = []
    for n in range(1, MAX_N + 1):
        if n not in stats.doc_freq:
            raise MissingCorpusStats(f"corpus stats lack order {n}")
        g_a = tfidf_vector(inst.candidate, n, stats)
        total = sum(_cosine(g_a, tfidf_vector(ref, n, stats)) for ref in inst.references)
        per_n.append(total / len(inst.references))
    return per_n, sum(per_n) / len(per_n)


# --- METEOR -------------------------------------------------------------------

@dataclass
class MeteorAlignment:
    matches: int
    chunks: int
    precision: float
    recall: float


def align(candidate: Tokens, reference: Tokens) -> MeteorAlignment:
    """Exact-match alignment with the most matches, then the fewest chunks.

    A chunk is a maximal run of consecutive candidate tokens aligned to
    consecutive reference positions.
    """
    cand = tuple(candidate)
    ref = tuple(reference)
    positions = {}
    for j, tok in enumerate(ref):
        positions.setdefault(tok, []).append(j)
    cand_counts = Counter(cand)
    ref_counts = Counter(ref)
    quota = {tok: min(c, ref_counts[tok]) for tok, c in cand_counts.items()}
    matches = sum(quota.values())
    if matches == 0:
        return MeteorAlignment(0, 0, 0.0, 0.0)

    remaining_after = []
    seen: Counter = Counter()
    for tok in reversed(cand):
        remaining_after.append(dict(seen))
        seen[tok] += 1
    remaining_after.reverse()

    @lru_cache(maxsize=None)
    def best(i: int, used: frozenset, prev_j: int) -> int:
        if i == len(cand):
            return 0
        tok = cand[i]
        slots = positions.get(tok, ())
        need = quota.get(tok, 0) - sum(1 for j in slots if j in used)
        options = []
        if need > 0:
            for j in slots:
                if j not in used:
                    new_chunk = 0 if j == prev_j + 1 and prev_j >= 0 else 1
                    options.append(new_chunk + best(i + 1, used | {j}, j))
        # skipping is allowed only if later copies of the token can still fill the quota
        if need <= remaining_after[i].get(tok, 0):
            options.append(best(i + 1, used, -1))
        return min(options)

    chunks = best(0, frozenset(), -1)
    best.cache_clear()
    return MeteorAlignment(matches, int(chunks), matches / len(cand), matches / len(ref))


def meteor_from_alignment(al: MeteorAlignment) -> float:
    if al.matches == 0:
        return 0.0
    p, r = al.precision, al.recall
    fmean = 10 * p * r / (r + 9 * p)
    return fmean * (1 - 0.5 * (al.chunks / al.matches) ** 3)


def meteor(inst: ScoringInstance) -> float:
    return max(meteor_from_alignment(align(inst.candidate, ref)) for ref in inst.references)


# --- corpus level ------------------------------------------------------------

REPORT_KEYS = (
    "bleu1", "bleu2", "bleu3", "bleu4", "bleu",
    "rouge1", "rouge2", "rouge3", "rouge4", "rougeL",
    "cider", "cider1", "cider2", "cider3", "cider4",
    "meteor",
)


def corpus_score(instances: Sequence[ScoringInstance]) -> dict[str, float]:
    """Corpus report in [0, 1].

    BLEU pools clipped and total n-gram counts over instances before dividing;
    every other metric is the mean of per-instance scores. CIDEr document
    frequencies come from this same instance list.
    """
    if not instances:
        raise EmptyCorpus("no instances to score")
    report = {}
    bleus = []
    for n in range(1, MAX_N + 1):
        clipped = total = 0
        for inst in instances:
            c, t = bleu_counts(inst, n)
            clipped += c
            total += t
        bleus.append(clipped / total if total else 0.0)
        report[f"bleu{n}"] = bleus[-1]
    report["bleu"] = geometric_mean(bleus)

    m = len(instances)
    for n in range(1, MAX_N + 1):
        report[f"rouge{n}"] = sum(rouge_n(inst, n) for inst in instances) / m
    report["rougeL"] = sum(rouge_l(inst) for inst in instances) / m

    stats = corpus_stats(instances)
    per_n_sum = [0.0] * MAX_N
    mean_sum = 0.0
    for inst in instances:
        per_n, mean = cider(inst, stats)
        per_n_sum = [a + b for a, b in zip(per_n_sum, per_n)]
        mean_sum += mean
    report["cider"] = mean_sum / m
    for n in range(1, MAX_N + 1):
        report[f"cider{n}"] = per_n_sum[n - 1] / m

    report["meteor"] = sum(meteor(inst) for inst in instances) / m
    return {key: report[key] for key in REPORT_KEYS}
