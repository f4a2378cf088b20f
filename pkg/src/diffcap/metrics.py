"""Caption metrics: BLEU-4, ROUGE-L, CIDEr-D and a simplified METEOR.

Scores are kept in [0, 1] internally; the CLI reports them x100. CIDEr-D is
divided by its conventional factor of 10 so that it shares that range.
SPICE is not computed (it needs an external scene-graph parser).
"""

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from .data.tokenizer import is_punct, split_words

METRICS = ("bleu4", "rougeL", "ciderD", "meteorS")
VERSIONS = {
    "bleu4": "bleu4/corpus-closest-ref/1",
    "rougeL": "rougeL/lcs-f-beta1.2/1",
    "ciderD": "ciderD/sigma6-clip-corpus-idf/1",
    "meteorS": "meteorS/exact+stem/1",
}
FLAGS = {
    "tokenizer": "lowercase word/punctuation split; punctuation tokens dropped",
    "ciderD": "idf from the evaluated references; score divided by 10",
    "meteorS": "simplified: exact and suffix-stem matches only, no synonyms or paraphrases; "
               "not comparable to METEOR 1.5",
    "spice": "n/a: requires a dependency parser and scene graphs",
}
ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0


class MetricError(ValueError):
    pass


def tokenize(text: str) -> List[str]:
    return [t for t in split_words(text) if not is_punct(t)]


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ----------------------------------------------------------------------------
# BLEU


def bleu4(corpus: Sequence[Tuple[Sequence[str], Sequence[Sequence[str]]]]) -> float:
    """Corpus BLEU-4 over (candidate tokens, [reference tokens]) pairs.

    Any n-gram order with zero matches makes the geometric mean, and the
    score, exactly 0 (no smoothing).
    """
    matches = [0] * 4
    totals = [0] * 4
    cand_len = ref_len = 0
    for cand, refs in corpus:
        c = len(cand)
        cand_len += c
        ref_len += min((abs(len(r) - c), len(r)) for r in refs)[1]
        for n in range(1, 5):
            counts = ngrams(cand, n)
            max_ref = Counter()
            for r in refs:
                for g, k in ngrams(r, n).items():
                    max_ref[g] = max(max_ref[g], k)
            matches[n - 1] += sum(min(k, max_ref[g]) for g, k in counts.items())
            totals[n - 1] += max(c - n + 1, 0)
    if cand_len == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return bp * math.exp(log_p)


# ----------------------------------------------------------------------------
# ROUGE-L


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(cand: Sequence[str], refs: Sequence[Sequence[str]], beta: float = ROUGE_BETA) -> float:
    best = 0.0
    for r in refs:
        lcs = lcs_length(cand, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(cand), lcs / len(r)
        best = max(best, (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p))
    return best


# ----------------------------------------------------------------------------
# CIDEr-D


class CiderD:
    """tf-idf n-gram cosine with count clipping and a Gaussian length penalty.

    The idf table is built once from the references passed to the constructor.
    """

    def __init__(self, refs_per_instance: Sequence[Sequence[Sequence[str]]], n: int = 4,
                 sigma: float = CIDER_SIGMA):
        self.n = n
        self.sigma = sigma
        self.df: Counter = Counter()
        for refs in refs_per_instance:
            seen = set()
            for r in refs:
                for k in range(1, n + 1):
                    seen.update(ngrams(r, k))
            self.df.update(seen)
        self.log_n = math.log(float(len(refs_per_instance))) if refs_per_instance else 0.0

    def _vec(self, tokens):
        vecs, norms = [], []
        for k in range(1, self.n + 1):
            v = {g: tf * (self.log_n - math.log(max(1.0, self.df[g])))
                 for g, tf in ngrams(tokens, k).items()}
            vecs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vecs, norms, len(tokens)

    def score(self, cand: Sequence[str], refs: Sequence[Sequence[str]]) -> float:
        """Per-instance CIDEr-D on the conventional 0-10 scale."""
        vh, nh, lh = self._vec(cand)
        total = 0.0
        for r in refs:
            vr, nr, lr = self._vec(r)
            penalty = math.exp(-((lh - lr) ** 2) / (2 * self.sigma ** 2))
            for k in range(self.n):
                val = sum(min(x, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, x in vh[k].items())
                if nh[k] != 0 and nr[k] != 0:
                    val /= nh[k] * nr[k]
                total += val * penalty
        return 10.0 * total / (self.n * len(refs))


def cider_d(corpus) -> Tuple[float, List[float]]:
    """Corpus mean and per-instance CIDEr-D, both divided by 10."""
    scorer = CiderD([refs for _, refs in corpus])
    per = [scorer.score(c, refs) / 10.0 for c, refs in corpus]
    return (sum(per) / len(per) if per else 0.0), per


# ----------------------------------------------------------------------------
# METEOR (simplified)

_SUFFIXES = ("ing", "ed", "es", "ly", "s")


def stem(word: str) -> str:
    """Strip one common suffix if at least three characters remain ('ss' is kept)."""
    for suf in _SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            if suf == "s" and word.endswith("ss"):
                continue
            return word[: -len(suf)]
    return word


def align(cand: Sequence[str], ref: Sequence[str]) -> Tuple[int, int]:
    """(matches, chunks) of the best unigram alignment.

    Tokens match when equal or when their stems are equal. The alignment
    maximises the number of matches and, among those, minimises the number of
    chunks (runs contiguous in both sequences). Solved exactly by memoised
    search over (candidate position, used reference positions, previous link).
    """
    cs = [stem(t) for t in cand]
    rs = [stem(t) for t in ref]
    classes = sorted(set(cs) | set(rs))
    cid = {s: i for i, s in enumerate(classes)}
    c_cls = [cid[s] for s in cs]
    r_cls = [cid[s] for s in rs]
    n_cls = len(classes)
    c_count = Counter(c_cls)
    r_count = Counter(r_cls)
    matches = sum(min(c_count[k], r_count[k]) for k in c_count)
    if matches == 0:
        return 0, 0
    may_skip = {k: c_count[k] - min(c_count[k], r_count[k]) for k in c_count}
    ref_mask = [0] * n_cls
    ref_pos: List[List[int]] = [[] for _ in range(n_cls)]
    for j, k in enumerate(r_cls):
        ref_mask[k] |= 1 << j
        ref_pos[k].append(j)
    seen_before = []
    running = Counter()
    for k in c_cls:
        seen_before.append(running[k])
        running[k] += 1

    @lru_cache(maxsize=None)
    def best_links(i: int, used: int, prev: int) -> int:
        if i == len(c_cls):
            return 0
        k = c_cls[i]
        options = []
        skipped = seen_before[i] - bin(used & ref_mask[k]).count("1")
        if skipped < may_skip[k]:
            options.append(best_links(i + 1, used, -1))
        for j in ref_pos[k]:
            if not used >> j & 1:
                link = 1 if prev >= 0 and j == prev + 1 else 0
                options.append(link + best_links(i + 1, used | (1 << j), j))
        return max(options) if options else -10 ** 9

    links = best_links(0, 0, -1)
    return matches, matches - links


def meteor_components(cand, ref) -> Tuple[float, int, int]:
    m, chunks = align(cand, ref)
    if m == 0:
        return 0.0, 0, 0
    p, r = m / len(cand), m / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (chunks / m) ** 3
    return f_mean * (1 - penalty), m, chunks


def meteor_simple(cand: Sequence[str], refs: Sequence[Sequence[str]]) -> float:
    return max((meteor_components(cand, r)[0] for r in refs), default=0.0)


# ----------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    scores: Dict[str, object]
    per_instance: Dict[str, Dict[str, float]]
    n_instances: int
    versions: Dict[str, str] = field(default_factory=lambda: dict(VERSIONS))
    flags: Dict[str, str] = field(default_factory=lambda: dict(FLAGS))
    warnings: List[str] = field(default_factory=list)

    def to_dict(self, scale: float = 1.0) -> dict:
        d = asdict(self)
        d["scale"] = scale
        d["scores"] = {k: (v * scale if isinstance(v, float) else v) for k, v in self.scores.items()}
        return d

    def to_json(self, scale: float = 1.0) -> str:
        return json.dumps(self.to_dict(scale), sort_keys=True, indent=2) + "\n"


def evaluate_corpus(instances: Sequence[Tuple[str, str, Sequence[str]]],
                    metrics: Sequence[str] = METRICS) -> MetricReport:
    """Score (id, candidate, references) triples."""
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise MetricError(f"unknown metrics: {sorted(unknown)}")
    if not instances:
        raise MetricError("nothing to evaluate")
    warnings = []
    ids = [i for i, _, _ in instances]
    tok = []
    for iid, cand, refs in instances:
        c = tokenize(cand)
        rs = [tokenize(r) for r in refs]
        rs = [r for r in rs if r]
        if not rs:
            raise MetricError(f"instance {iid!r} has no non-empty reference")
        if not c:
            warnings.append(f"empty candidate for {iid!r} scores 0")
        tok.append((c, rs))
    scores: Dict[str, object] = {}
    per: Dict[str, Dict[str, float]] = {}
    if "bleu4" in metrics:
        scores["bleu4"] = bleu4(tok)
    if "rougeL" in metrics:
        vals = [rouge_l(c, rs) if c else 0.0 for c, rs in tok]
        per["rougeL"] = dict(zip(ids, vals))
        scores["rougeL"] = sum(vals) / len(vals)
    if "ciderD" in metrics:
        if len(tok) < 2:
            warnings.append("single-instance corpus: CIDEr-D idf is degenerate")
        mean, vals = cider_d(tok)
        per["ciderD"] = dict(zip(ids, vals))
        scores["ciderD"] = mean
    if "meteorS" in metrics:
        vals = [meteor_simple(c, rs) if c else 0.0 for c, rs in tok]
        per["meteorS"] = dict(zip(ids, vals))
        scores["meteorS"] = sum(vals) / len(vals)
    scores["spice"] = "n/a"
    return MetricReport(scores, per, len(tok), warnings=warnings)


def _load_json_array(path, kind):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise MetricError(f"cannot read {kind} file {path}: {exc}") from exc
    if not isinstance(data, list):
        raise MetricError(f"{kind} file must hold a JSON array")
    return data


def evaluate_file(results_path, references_path, metrics: Sequence[str] = METRICS) -> MetricReport:
    """Results: ``[{"id", "caption"}]``; references: ``[{"id", "captions": [...]}]``."""
    results, refs = {}, {}
    for item in _load_json_array(results_path, "results"):
        if not isinstance(item, dict) or not isinstance(item.get("id"), str) \
                or not isinstance(item.get("caption"), str):
            raise MetricError(f"malformed results entry: {item!r}")
        if item["id"] in results:
            raise MetricError(f"duplicate result id {item['id']!r}")
        results[item["id"]] = item["caption"]
    for item in _load_json_array(references_path, "references"):
        caps = item.get("captions") if isinstance(item, dict) else None
        if not isinstance(item, dict) or not isinstance(item.get("id"), str) \
                or not isinstance(caps, list) or not caps or not all(isinstance(c, str) for c in caps):
            raise MetricError(f"malformed references entry: {item!r}")
        if item["id"] in refs:
            raise MetricError(f"duplicate reference id {item['id']!r}")
        refs[item["id"]] = caps
    only_res = sorted(results.keys() - refs.keys())
    only_ref = sorted(refs.keys() - results.keys())
    if only_res or only_ref:
        raise MetricError(
            f"id mismatch: missing references for {only_res}; missing results for {only_ref}"
        )
    if not results:
        raise MetricError("no ids to evaluate")
    ids = sorted(results)
    return evaluate_corpus([(i, results[i], refs[i]) for i in ids], metrics)
