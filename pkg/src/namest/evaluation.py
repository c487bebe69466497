"""WER, BLEU, person-name accuracy, error categories and annotator agreement.

Text normalisation for WER and name matching: Unicode punctuation is
removed, text is case-folded and split on whitespace. BLEU follows the
sacreBLEU 1.x defaults (13a tokenisation, exponential smoothing, no
lowercasing).
"""

from __future__ import annotations

import json
import math
import os
import re
import unicodedata
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import ContractError, DataError

VERDICTS = ("correct", "misspelling", "diff-name", "other-words", "omission")
MISSPELLING_THRESHOLD = 0.4
FREQUENCY_SPLIT = 3


def _strip_punct(text: str) -> str:
    return "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))


def normalize_tokens(text: str) -> list[str]:
    return _strip_punct(unicodedata.normalize("NFC", text)).casefold().split()


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _tokens(x) -> list[str]:
    return normalize_tokens(x) if isinstance(x, str) else list(x)


def wer(reference, hypothesis) -> float:
    """Word edit distance over reference length; strings are normalised first."""
    ref, hyp = _tokens(reference), _tokens(hypothesis)
    if not ref:
        raise DataError("WER is undefined for an empty reference")
    return edit_distance(ref, hyp) / len(ref)


def corpus_wer(references: Sequence, hypotheses: Sequence) -> float:
    """Total edits over total reference words."""
    if len(references) != len(hypotheses):
        raise ContractError("references and hypotheses differ in number")
    edits = words = 0
    for r, h in zip(references, hypotheses):
        ref, hyp = _tokens(r), _tokens(h)
        edits += edit_distance(ref, hyp)
        words += len(ref)
    if words == 0:
        raise DataError("WER is undefined for an empty reference corpus")
    return edits / words


# -- BLEU ------------------------------------------------------------------------

_13A_RULES = [
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
]


def tokenize_13a(line: str) -> str:
    line = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = line.replace("&quot;", '"').replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">")
    line = f" {line} "
    for pattern, repl in _13A_RULES:
        line = pattern.sub(repl, line)
    return " ".join(line.split())


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _my_log(x: float) -> float:
    return -9999999999.0 if x == 0 else math.log(x)


@dataclass
class BleuStats:
    correct: list[int]
    total: list[int]
    sys_len: int
    ref_len: int
    precisions: list[float]
    bp: float
    score: float


def bleu_stats(references: Sequence[str], hypotheses: Sequence[str], order: int = 4) -> BleuStats:
    if len(references) != len(hypotheses):
        raise ContractError("references and hypotheses differ in number")
    if not references:
        raise DataError("BLEU needs a non-empty corpus")
    correct, total = [0] * order, [0] * order
    sys_len = ref_len = 0
    for ref, hyp in zip(references, hypotheses):
        r, h = tokenize_13a(ref).split(), tokenize_13a(hyp).split()
        sys_len += len(h)
        ref_len += len(r)
        for n in range(1, order + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(0, len(h) - n + 1)
    precisions = [0.0] * order
    smooth = 1.0
    for n in range(order):
        if total[n] == 0:
            break
        if correct[n] == 0:
            smooth *= 2
            precisions[n] = 100.0 / (smooth * total[n])
        else:
            precisions[n] = 100.0 * correct[n] / total[n]
    if sys_len < ref_len:
        bp = math.exp(1 - ref_len / sys_len) if sys_len > 0 else 0.0
    else:
        bp = 1.0
    score = bp * math.exp(sum(_my_log(p) for p in precisions) / order)
    return BleuStats(correct, total, sys_len, ref_len, precisions, bp, score)


def bleu(references: Sequence[str], hypotheses: Sequence[str]) -> float:
    """Corpus BLEU on a 0-100 scale, single reference."""
    return bleu_stats(references, hypotheses).score


# -- name accuracy ------------------------------------------------------------------

@dataclass
class NameJudgment:
    utterance_id: str
    reference: str
    verdict: str
    hypothesis: str | None = None
    referent_nat: str = ""
    speaker_nat: str = ""
    frequency: int | None = None


@dataclass
class GroupScore:
    correct: int = 0
    total: int = 0

    @property
    def accuracy(self) -> float | None:
        return None if self.total == 0 else self.correct / self.total


@dataclass
class EvalReport:
    task: str
    n_utterances: int
    wer: float | None = None
    bleu: float | None = None
    names: GroupScore = field(default_factory=GroupScore)
    groups: dict[str, dict[str, GroupScore]] = field(default_factory=dict)
    judgments: list[NameJudgment] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def name_accuracy(self) -> float | None:
        return self.names.accuracy

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "n_utterances": self.n_utterances,
            "wer": self.wer,
            "bleu": self.bleu,
            "names": {"correct": self.names.correct, "total": self.names.total,
                      "accuracy": self.names.accuracy},
            "groups": {g: {k: {"correct": s.correct, "total": s.total, "accuracy": s.accuracy}
                           for k, s in sorted(keys.items())}
                       for g, keys in sorted(self.groups.items())},
            "judgments": [asdict(j) for j in self.judgments],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        groups = {g: {k: GroupScore(v["correct"], v["total"]) for k, v in keys.items()}
                  for g, keys in data.get("groups", {}).items()}
        return cls(data["task"], data["n_utterances"], data.get("wer"), data.get("bleu"),
                   GroupScore(data["names"]["correct"], data["names"]["total"]), groups,
                   [NameJudgment(**j) for j in data.get("judgments", [])], data.get("meta", {}))

    def save(self, path: str | os.PathLike) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def match_names(reference_names: Sequence[str], hypothesis: str) -> list[bool]:
    """Containment matching: each hypothesis token satisfies at most one reference name."""
    pool = Counter(normalize_tokens(hypothesis))
    hits = []
    for name in reference_names:
        key = " ".join(normalize_tokens(name))
        ok = pool[key] > 0
        if ok:
            pool[key] -= 1
        hits.append(ok)
    return hits


def name_groups(ann, primary_language: str, train_languages: Iterable[str], src_lang: str) -> dict[str, str]:
    """Group labels of one annotated name occurrence."""
    train_languages = set(train_languages)
    out = {
        "referent": ann.referent_nat,
        "speaker": ann.speaker_nat,
        "referent_origin": "native" if ann.referent_nat == primary_language else "foreign",
        "speaker_origin": "native" if ann.speaker_nat == src_lang else "foreign",
        "referent_training": "in-train" if ann.referent_nat in train_languages else "out-of-train",
    }
    if ann.frequency is not None:
        out["frequency"] = f">={FREQUENCY_SPLIT}" if ann.frequency >= FREQUENCY_SPLIT else f"<{FREQUENCY_SPLIT}"
    return out


def name_accuracy(utterances, hypotheses: Sequence[str], primary_language: str = "L0",
                  train_languages: Iterable[str] = ("L0",)) -> EvalReport:
    """Overall and grouped token-level name accuracy (no WER/BLEU)."""
    if len(utterances) != len(hypotheses):
        raise ContractError("one hypothesis per utterance is required")
    train_languages = tuple(train_languages)
    report = EvalReport(task="names", n_utterances=len(utterances))
    for u, hyp in zip(utterances, hypotheses):
        hits = match_names([n.token for n in u.names], hyp)
        for ann, ok in zip(u.names, hits):
            report.names.total += 1
            report.names.correct += ok
            for group, key in name_groups(ann, primary_language, train_languages, u.src_lang).items():
                score = report.groups.setdefault(group, {}).setdefault(key, GroupScore())
                score.total += 1
                score.correct += ok
    return report


# -- error categories ------------------------------------------------------------

def align(ref: Sequence[str], hyp: Sequence[str]) -> list[tuple[int | None, int | None]]:
    """Levenshtein alignment as (ref index, hyp index) pairs; ``None`` marks a gap.

    The backtrace prefers the diagonal, then deletions, then insertions.
    """
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i][j] = min(d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1][j] + 1, d[i][j - 1] + 1)
    pairs = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            pairs.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            pairs.append((i - 1, None))
            i -= 1
        else:
            pairs.append((None, j - 1))
            j -= 1
    return pairs[::-1]


def char_distance(a: str, b: str) -> float:
    """Character edit distance normalised by the longer string."""
    if not a and not b:
        return 0.0
    return edit_distance(a, b) / max(len(a), len(b))


def classify_failure(reference: str, aligned: str | None, gazetteer: set[str]) -> str:
    if aligned is None:
        return "omission"
    if char_distance(reference.casefold(), aligned.casefold()) <= MISSPELLING_THRESHOLD:
        return "misspelling"
    if aligned.casefold() in gazetteer:
        return "diff-name"
    return "other-words"


def _name_index(ref_tokens: list[str], name: str, position: int | None, used: set[int]) -> int | None:
    key = name.casefold()
    if position is not None and position < len(ref_tokens) and ref_tokens[position] == key and position not in used:
        return position
    for i, tok in enumerate(ref_tokens):
        if tok == key and i not in used:
            return i
    return None


def categorize_errors(utterances, hypotheses: Sequence[str], gazetteer: Iterable[str],
                      references: Sequence[str] | None = None) -> list[NameJudgment]:
    """One judgment per annotated name, using the same matching rule as name accuracy.

    ``references`` defaults to the transcripts; pass the translations to
    judge ST output.
    """
    if len(utterances) != len(hypotheses):
        raise ContractError("one hypothesis per utterance is required")
    gaz = {g.casefold() for g in gazetteer}
    judgments = []
    for k, (u, hyp) in enumerate(zip(utterances, hypotheses)):
        ref_text = references[k] if references is not None else u.transcript
        ref_tokens, hyp_tokens = normalize_tokens(ref_text), normalize_tokens(hyp)
        pairs = align(ref_tokens, hyp_tokens)
        aligned_to = {r: h for r, h in pairs if r is not None}
        hits = match_names([n.token for n in u.names], hyp)
        used: set[int] = set()
        for ann, ok in zip(u.names, hits):
            base = dict(utterance_id=u.id, reference=ann.token, referent_nat=ann.referent_nat,
                        speaker_nat=ann.speaker_nat, frequency=ann.frequency)
            idx = _name_index(ref_tokens, ann.token, ann.position, used)
            if idx is not None:
                used.add(idx)
            h = aligned_to.get(idx) if idx is not None else None
            aligned = hyp_tokens[h] if h is not None else None
            if ok:
                judgments.append(NameJudgment(verdict="correct", hypothesis=ann.token.casefold(), **base))
            else:
                judgments.append(NameJudgment(verdict=classify_failure(ann.token, aligned, gaz),
                                              hypothesis=aligned, **base))
    return judgments


def verdict_counts(judgments: Iterable[NameJudgment]) -> dict[str, int]:
    counts = Counter(j.verdict for j in judgments)
    return {v: counts.get(v, 0) for v in VERDICTS}


# -- agreement -------------------------------------------------------------------

def scotts_pi(annotations_a: Mapping[str, str], annotations_b: Mapping[str, str]) -> float:
    """Scott's pi with expected agreement from the pooled label distribution."""
    if set(annotations_a) != set(annotations_b):
        raise ContractError("annotation sets cover different items")
    n = len(annotations_a)
    if n == 0:
        raise DataError("no annotated items")
    observed = sum(annotations_a[i] == annotations_b[i] for i in annotations_a) / n
    pooled = Counter(annotations_a.values()) + Counter(annotations_b.values())
    expected = sum((c / (2 * n)) ** 2 for c in pooled.values())
    if expected == 1.0:
        if observed == 1.0:
            return 1.0
        raise DataError("Scott's pi undefined: expected agreement is 1")
    return (observed - expected) / (1 - expected)


def read_annotations(path: str | os.PathLike) -> dict[str, str]:
    """JSON-lines ``{"item_id": ..., "label": ...}``; duplicate items are rejected."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            item = str(rec["item_id"])
            if item in out:
                raise DataError(f"{path}:{lineno}: duplicate item {item}")
            out[item] = str(rec["label"])
    return out


def evaluate(task: str, utterances, hypotheses: Sequence[str], gazetteer: Iterable[str] = (),
             primary_language: str = "L0", train_languages: Iterable[str] = ("L0",),
             target_lang: str = "T0") -> EvalReport:
    """Full report for one task: WER for ASR, BLEU for ST, grouped name accuracy, judgments."""
    if task not in ("asr", "st"):
        raise ContractError(f"evaluate expects task asr or st, got {task!r}")
    refs = [u.transcript if task == "asr" else u.translations[target_lang] for u in utterances]
    report = name_accuracy(utterances, hypotheses, primary_language, train_languages)
    report.task = task
    if task == "asr":
        report.wer = corpus_wer(refs, hypotheses)
    else:
        report.bleu = bleu(refs, hypotheses)
    report.judgments = categorize_errors(utterances, hypotheses, gazetteer, refs)
    return report
