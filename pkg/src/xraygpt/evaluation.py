"""ROUGE-1/2/L scoring and the pairwise judge harness.

ROUGE tokenization: lowercase whitespace words with leading/trailing
punctuation stripped; no stemming, no stopword removal. Per-pair F1 is
averaged over the corpus (sentence-level ROUGE).
"""

from __future__ import annotations

import enum
import json
import re
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyInputError, MalformedLineError
from .service import TextServiceClient

_STRIP_CHARS = string.punctuation


def rouge_tokens(text: str) -> list[str]:
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_STRIP_CHARS)
        if tok:
            out.append(tok)
    return out


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, match: int, n_cand: int, n_ref: int) -> "RougeScore":
        if n_cand == 0 or n_ref == 0:
            return cls(0.0, 0.0, 0.0)
        p = match / n_cand
        r = match / n_ref
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f1)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: str, reference: str, n: int) -> RougeScore:
    """Clipped n-gram overlap: precision, recall, F1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand = _ngrams(rouge_tokens(candidate), n)
    ref = _ngrams(rouge_tokens(reference), n)
    match = sum((cand & ref).values())
    return RougeScore.from_counts(match, sum(cand.values()), sum(ref.values()))


def lcs_length(a: list[str], b: list[str]) -> int:
    """Longest common subsequence length by dynamic programming."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            if x == y:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> RougeScore:
    cand = rouge_tokens(candidate)
    ref = rouge_tokens(reference)
    return RougeScore.from_counts(lcs_length(cand, ref), len(cand), len(ref))


def score_pair(candidate: str, reference: str) -> dict[str, RougeScore]:
    return {
        "R-1": rouge_n(candidate, reference, 1),
        "R-2": rouge_n(candidate, reference, 2),
        "R-L": rouge_l(candidate, reference),
    }


def corpus_rouge(pairs: list[tuple[str, str]]) -> dict[str, float]:
    """Unweighted mean of per-pair F1 for R-1, R-2, R-L."""
    if not pairs:
        raise EmptyInputError("corpus_rouge needs at least one pair")
    sums = {"R-1": 0.0, "R-2": 0.0, "R-L": 0.0}
    for cand, ref in pairs:
        for key, score in score_pair(cand, ref).items():
            sums[key] += score.f1
    return {k: v / len(pairs) for k, v in sums.items()}


def format_rouge_row(label: str, agg: dict[str, float]) -> str:
    return f"{label:<16} {agg['R-1']:.4f} {agg['R-2']:.4f} {agg['R-L']:.4f}"


def format_rouge_table(rows: list[tuple[str, dict[str, float]]]) -> str:
    lines = [f"{'Method':<16} {'R-1':>6} {'R-2':>6} {'R-L':>6}"]
    lines.extend(format_rouge_row(label, agg) for label, agg in rows)
    return "\n".join(lines)


# -- pairwise judge ---------------------------------------------------------


class Winner(str, enum.Enum):
    A = "A"
    B = "B"
    TIE = "tie"


@dataclass(frozen=True)
class Verdict:
    winner: Winner
    raw_response: str


JUDGE_SYSTEM_TEXT = (
    "You compare two model responses against a reference radiology summary."
)
JUDGE_USER_TEMPLATE = (
    "Reference:\n{reference}\n\n"
    "Response A:\n{a}\n\n"
    "Response B:\n{b}\n\n"
    "Which response is closer to the reference? Answer with exactly one of: A, B, tie."
)

_VERDICT_RE = re.compile(r"(?<![A-Za-z])(A|B|tie)(?![A-Za-z])", re.IGNORECASE)


def parse_verdict(raw: str) -> Winner | None:
    """First standalone A / B / tie token, case-insensitive."""
    m = _VERDICT_RE.search(raw)
    if m is None:
        return None
    tok = m.group(1)
    if tok.lower() == "tie":
        return Winner.TIE
    return Winner(tok.upper())


def judge_pair(
    reference: str,
    response_a: str,
    response_b: str,
    client: TextServiceClient,
    rng: np.random.Generator | None = None,
) -> Verdict:
    """Single pairwise comparison with optional A/B order randomization.

    When an rng is supplied, the presented order is a seeded coin flip
    and the parsed answer is mapped back, so position bias averages out.
    An unparseable reply degrades to a tie with the raw text retained.
    """
    swapped = bool(rng.integers(2)) if rng is not None else False
    first, second = (response_b, response_a) if swapped else (response_a, response_b)
    raw = client.complete(
        JUDGE_SYSTEM_TEXT,
        JUDGE_USER_TEMPLATE.format(reference=reference, a=first, b=second),
    )
    parsed = parse_verdict(raw)
    if parsed is None:
        return Verdict(winner=Winner.TIE, raw_response=raw)
    if swapped and parsed is Winner.A:
        parsed = Winner.B
    elif swapped and parsed is Winner.B:
        parsed = Winner.A
    return Verdict(winner=parsed, raw_response=raw)


def aggregate_verdicts(verdicts: list[Verdict]) -> dict[str, float]:
    """Win/tie rates; counts over total, summing to 1."""
    if not verdicts:
        raise EmptyInputError("aggregate_verdicts needs at least one verdict")
    counts = Counter(v.winner for v in verdicts)
    total = len(verdicts)
    return {
        "win_a": counts[Winner.A] / total,
        "win_b": counts[Winner.B] / total,
        "tie": counts[Winner.TIE] / total,
    }


# -- eval file I/O ----------------------------------------------------------


def load_eval_pairs(path: str | Path) -> list[tuple[str, str, str]]:
    """Line-delimited {id, candidate, reference} records."""
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLineError(line_no, str(exc)) from exc
            if "_meta" in obj:
                continue
            try:
                out.append((obj["id"], obj["candidate"], obj["reference"]))
            except KeyError as exc:
                raise MalformedLineError(line_no, f"missing key {exc}") from exc
    return out


def write_scores(path: str | Path, rows: list[tuple[str, dict[str, RougeScore]]], fingerprint: str = "") -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        if fingerprint:
            fh.write(json.dumps({"_meta": {"fingerprint": fingerprint}}) + "\n")
        for pair_id, scores in rows:
            obj = {"id": pair_id}
            for key, s in scores.items():
                obj[key] = {"p": s.precision, "r": s.recall, "f1": s.f1}
            fh.write(json.dumps(obj) + "\n")
