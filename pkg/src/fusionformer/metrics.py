"""Corpus-level BLEU, NIST, Distinct-n, Entropy-n and average reply length.

Sentences may be given as strings (lowercased and split on whitespace) or as
token lists.  Each hypothesis has exactly one reference.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

Sentence = Union[str, Sequence[str]]

BLEU_EPSILON = 1e-9
NIST_BETA = math.log(0.5) / math.log(1.5) ** 2

METADATA = {
    "bleu": f"corpus BLEU-4, uniform weights, brevity penalty; zero match counts smoothed to {BLEU_EPSILON:g}/total",
    "nist": "NIST-4, information weights log2 from reference counts, brevity penalty beta=ln(0.5)/ln(1.5)^2",
    "entropy": "Shannon entropy of the n-gram distribution, natural log",
    "distinct": "corpus-level unique n-grams / total n-grams, percentage",
    "tokenization": "lowercase, whitespace split",
}


class EmptyCorpusError(ValueError):
    pass


def tokens_of(sentence: Sentence) -> List[str]:
    if isinstance(sentence, str):
        return sentence.lower().split()
    return [str(t) for t in sentence]


def ngrams(tokens: Sequence[str], n: int) -> List[Tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def _pairs(references, hypotheses) -> Tuple[List[List[str]], List[List[str]]]:
    if len(references) != len(hypotheses):
        raise ValueError(f"{len(references)} references but {len(hypotheses)} hypotheses")
    if not references:
        raise EmptyCorpusError("corpus is empty")
    return [tokens_of(r) for r in references], [tokens_of(h) for h in hypotheses]


def bleu(references: Sequence[Sentence], hypotheses: Sequence[Sentence], max_n: int = 4) -> float:
    """Corpus BLEU as a percentage."""
    refs, hyps = _pairs(references, hypotheses)
    matches = [0] * max_n
    totals = [0] * max_n
    for ref, hyp in zip(refs, hyps):
        for n in range(1, max_n + 1):
            h = Counter(ngrams(hyp, n))
            r = Counter(ngrams(ref, n))
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if matches[0] == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        p = m / t if m > 0 else BLEU_EPSILON / max(t, 1)
        log_p += math.log(p) / max_n
    c = sum(len(h) for h in hyps)
    r = sum(len(x) for x in refs)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p)


def nist(references: Sequence[Sentence], hypotheses: Sequence[Sentence], max_n: int = 4) -> float:
    refs, hyps = _pairs(references, hypotheses)
    ref_counts: Counter = Counter()
    for ref in refs:
        for n in range(1, max_n + 1):
            ref_counts.update(ngrams(ref, n))
    n_ref_words = sum(len(r) for r in refs)

    def info(g: Tuple[str, ...]) -> float:
        prefix = n_ref_words if len(g) == 1 else ref_counts[g[:-1]]
        return math.log2(prefix / ref_counts[g])

    score = 0.0
    for n in range(1, max_n + 1):
        gained, total = 0.0, 0
        for ref, hyp in zip(refs, hyps):
            h = Counter(ngrams(hyp, n))
            r = Counter(ngrams(ref, n))
            total += sum(h.values())
            gained += sum(info(g) * min(c, r[g]) for g, c in h.items() if g in r)
        if total:
            score += gained / total
    sys_len = sum(len(h) for h in hyps)
    ref_len = n_ref_words
    ratio = min(1.0, sys_len / ref_len) if ref_len else 1.0
    bp = 0.0 if ratio == 0 else math.exp(NIST_BETA * math.log(ratio) ** 2)
    return score * bp


def nist4(references: Sequence[Sentence], hypotheses: Sequence[Sentence]) -> float:
    return nist(references, hypotheses, max_n=4)


def _corpus_ngrams(corpus: Sequence[Sentence], n: int) -> Counter:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    counts: Counter = Counter()
    for sent in corpus:
        counts.update(ngrams(tokens_of(sent), n))
    if not counts:
        raise EmptyCorpusError(f"no sentence has at least {n} tokens")
    return counts


def distinct_n(corpus: Sequence[Sentence], n: int = 2) -> float:
    counts = _corpus_ngrams(corpus, n)
    return 100.0 * len(counts) / sum(counts.values())


def entropy_n(corpus: Sequence[Sentence], n: int = 4) -> float:
    counts = _corpus_ngrams(corpus, n)
    total = sum(counts.values())
    return -sum((c / total) * math.log(c / total) for c in counts.values())


def avg_len(hypotheses: Sequence[Sentence]) -> float:
    if not hypotheses:
        raise EmptyCorpusError("no hypotheses")
    return sum(len(tokens_of(h)) for h in hypotheses) / len(hypotheses)


@dataclass
class EvalReport:
    bleu_pct: float
    nist4: float
    entropy4: float
    distinct2_pct: float
    avg_len: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps({"report": self.to_dict(), "metadata": METADATA}, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(self.to_dict()), lineterminator="\n")
        writer.writeheader()
        writer.writerow({k: f"{v:.3f}" for k, v in self.to_dict().items()})
        return buf.getvalue()

    def write(self, json_path, csv_path=None) -> None:
        json_path = Path(json_path)
        csv_path = Path(csv_path) if csv_path else json_path.with_suffix(".csv")
        for path, text in ((json_path, self.to_json()), (csv_path, self.to_csv())):
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_text(text, encoding="utf-8")
            os.replace(tmp, path)


def evaluate(references: Sequence[Sentence], hypotheses: Sequence[Sentence]) -> EvalReport:
    """Every automatic metric at once.

    Entropy-4 and Distinct-2 are computed on the hypotheses only; a corpus
    with no 4-gram (or bigram) scores 0 for that metric rather than failing.
    """
    _pairs(references, hypotheses)
    try:
        ent = entropy_n(hypotheses, 4)
    except EmptyCorpusError:
        ent = 0.0
    try:
        dist = distinct_n(hypotheses, 2)
    except EmptyCorpusError:
        dist = 0.0
    return EvalReport(
        bleu_pct=bleu(references, hypotheses),
        nist4=nist4(references, hypotheses),
        entropy4=ent,
        distinct2_pct=dist,
        avg_len=avg_len(hypotheses),
    )
