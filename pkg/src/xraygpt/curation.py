"""Filtering and cleaning of raw reports into interactive summaries.

The default path is fully rule-based and deterministic. An external
rewriting service can optionally produce the summary instead; its output
is validated against the same invariants and falls back to the
rule-based result when validation fails.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Corpus, RadiologyReport, word_count
from .errors import EmptyAfterCleaningError, MalformedLineError, ServiceUnavailableError
from .service import TextServiceClient

DEFAULT_VIEW_PHRASES = (
    r"\b(?:pa and lateral|ap and lateral|frontal and lateral)\s+views?\s+of\s+the\s+chest"
    r"(?:\s+(?:were|was|are|is)\s+(?:provided|obtained|submitted|reviewed))?",
    r"\b(?:frontal|lateral|ap|pa)\s+views?\s+of\s+the\s+chest"
    r"(?:\s+(?:were|was|are|is)\s+(?:provided|obtained|submitted|reviewed))?",
    r"\bpa and lateral views?\b",
    r"\bfrontal view\b",
    r"\blateral view\b",
    r"\bap view\b",
)

DEFAULT_PRIOR_CUES = (
    r"\bprior\b",
    r"\bprevious\b",
    r"\bcompared to\b",
    r"\binterval change\b",
    r"\bagain seen\b",
)

DEFAULT_PLACEHOLDER = r"_{2,}"

# Function words absorbed backwards when excising a prior-history clause,
# so "appears new from the prior ... of ___" loses the whole "from ..." tail.
_CLAUSE_CONNECTORS = frozenset(
    {"from", "of", "to", "with", "than", "the", "a", "an", "in", "on", "at", "as", "since"}
)


class RejectReason(str, enum.Enum):
    MISSING_SECTION = "MissingSection"
    FINDINGS_TOO_SHORT = "FindingsTooShort"
    IMPRESSION_TOO_SHORT = "ImpressionTooShort"
    NO_IMAGES = "NoImages"
    EMPTY_AFTER_CLEANING = "EmptyAfterCleaning"


@dataclass
class CurationConfig:
    min_findings_words: int = 10
    min_impression_words: int = 2
    view_phrase_lexicon: tuple[str, ...] = DEFAULT_VIEW_PHRASES
    prior_history_cue_lexicon: tuple[str, ...] = DEFAULT_PRIOR_CUES
    placeholder_pattern: str = DEFAULT_PLACEHOLDER
    use_rewrite_service: bool = False
    rewrite_system_text: str = (
        "You rewrite radiology report text into a clean interactive summary."
    )
    rewrite_user_template: str = "Findings: {findings}\nImpression: {impression}"

    def __post_init__(self):
        if self.min_findings_words < 0 or self.min_impression_words < 0:
            raise ValueError("word-count thresholds must be >= 0")
        if not self.view_phrase_lexicon or not self.prior_history_cue_lexicon:
            raise ValueError("lexicons must be non-empty")


@dataclass(frozen=True)
class CuratedRecord:
    id: str
    summary: str
    image_refs: tuple[str, ...]


@dataclass
class CurationStats:
    total_in: int = 0
    accepted: int = 0
    rejected_by_reason: dict[str, int] = field(default_factory=dict)
    rewrite_fallbacks: int = 0

    def reject(self, reason: RejectReason) -> None:
        self.rejected_by_reason[reason.value] = self.rejected_by_reason.get(reason.value, 0) + 1

    @property
    def balanced(self) -> bool:
        return self.accepted + sum(self.rejected_by_reason.values()) == self.total_in


def filter_report(report: RadiologyReport, config: CurationConfig) -> RejectReason | None:
    """First failing check wins; None means accept.

    Order: missing section, findings length, impression length, no images.
    Thresholds are strict less-than, so findings of exactly
    ``min_findings_words`` words pass.
    """
    if report.findings is None or report.impression is None:
        return RejectReason.MISSING_SECTION
    if word_count(report.findings) < config.min_findings_words:
        return RejectReason.FINDINGS_TOO_SHORT
    if word_count(report.impression) < config.min_impression_words:
        return RejectReason.IMPRESSION_TOO_SHORT
    if not report.image_refs:
        return RejectReason.NO_IMAGES
    return None


def _split_sentences(text: str) -> list[str]:
    # Boundary: a period followed by whitespace (or end). Periods stay
    # attached to their sentence.
    parts = re.split(r"(?<=\.)\s+", text.strip())
    return [p for p in parts if p]


def _excise_prior_clauses(sentence: str, cue_res: list[re.Pattern], ph_re: re.Pattern) -> str:
    """Remove cue-to-placeholder clauses; cue-only sentences are kept."""
    changed = True
    while changed:
        changed = False
        for cue_re in cue_res:
            cue_m = cue_re.search(sentence)
            if cue_m is None:
                continue
            ph_m = ph_re.search(sentence, cue_m.end())
            if ph_m is None:
                continue
            start = cue_m.start()
            # Pull the cut backwards over connector words so the clause
            # reads cleanly ("... new from the prior radiograph of ___").
            while True:
                prefix = sentence[:start].rstrip()
                if not prefix:
                    break
                last = prefix.split()[-1]
                if last.lower() in _CLAUSE_CONNECTORS:
                    start = len(prefix) - len(last)
                else:
                    break
            sentence = sentence[:start] + " " + sentence[ph_m.end():]
            changed = True
            break
    return sentence


def _normalize_ws(text: str) -> str:
    text = re.sub(r"\s+", " ", text).strip()
    text = re.sub(r"\s+([.,;:?!])", r"\1", text)
    text = re.sub(r"([.,;:])\1+", r"\1", text)
    return text


def clean_text(text: str, config: CurationConfig) -> str:
    """Apply the deterministic cleaning rules to one section.

    Per sentence: excise prior-history clauses (cue AND placeholder
    required), delete remaining placeholder runs, delete view-lexicon
    phrases, normalize whitespace, and drop sentences emptied by the
    deletions. Idempotent.
    """
    cue_res = [re.compile(p, re.IGNORECASE) for p in config.prior_history_cue_lexicon]
    ph_re = re.compile(config.placeholder_pattern)
    view_res = [re.compile(p, re.IGNORECASE) for p in config.view_phrase_lexicon]

    kept: list[str] = []
    for sentence in _split_sentences(text):
        sentence = _excise_prior_clauses(sentence, cue_res, ph_re)
        sentence = ph_re.sub(" ", sentence)
        changed = True
        while changed:
            changed = False
            for view_re in view_res:
                new = view_re.sub(" ", sentence)
                if new != sentence:
                    sentence = new
                    changed = True
        sentence = _normalize_ws(sentence)
        if re.search(r"\w", sentence):
            kept.append(sentence)
    return " ".join(kept)


def compose_summary(clean_findings: str, clean_impression: str) -> str:
    """Join the cleaned sections with a single space."""
    if not clean_findings or not clean_impression:
        raise EmptyAfterCleaningError("a section became empty after cleaning")
    return clean_findings + " " + clean_impression


def summary_violations(summary: str, config: CurationConfig) -> list[str]:
    """Invariant checks every CuratedRecord summary must pass."""
    problems = []
    if not summary:
        problems.append("empty summary")
    if re.search(config.placeholder_pattern, summary):
        problems.append("placeholder run present")
    for pattern in config.view_phrase_lexicon:
        if re.search(pattern, summary, re.IGNORECASE):
            problems.append(f"view phrase matches {pattern!r}")
            break
    return problems


def _rule_based_summary(report: RadiologyReport, config: CurationConfig) -> str:
    return compose_summary(
        clean_text(report.findings or "", config),
        clean_text(report.impression or "", config),
    )


def rewrite_with_service(
    report: RadiologyReport, client: TextServiceClient, config: CurationConfig
) -> tuple[str, bool]:
    """Summary from the rewriting service, validated; falls back to rules.

    Returns (summary, fell_back). Service transport failures also fall
    back; the rule-based path is always available for accepted reports.
    """
    user_text = config.rewrite_user_template.format(
        findings=report.findings or "", impression=report.impression or ""
    )
    try:
        text = client.complete(config.rewrite_system_text, user_text).strip()
    except ServiceUnavailableError:
        return _rule_based_summary(report, config), True
    if summary_violations(text, config):
        return _rule_based_summary(report, config), True
    return text, False


def curate_corpus(
    corpus: Corpus,
    config: CurationConfig,
    client: TextServiceClient | None = None,
) -> tuple[list[CuratedRecord], CurationStats]:
    """Filter, clean, and compose every report, preserving input order."""
    stats = CurationStats(total_in=len(corpus.reports))
    records: list[CuratedRecord] = []
    for report in corpus.reports:
        reason = filter_report(report, config)
        if reason is not None:
            stats.reject(reason)
            continue
        if config.use_rewrite_service and client is not None:
            try:
                summary, fell_back = rewrite_with_service(report, client, config)
            except EmptyAfterCleaningError:
                stats.reject(RejectReason.EMPTY_AFTER_CLEANING)
                continue
            if fell_back:
                stats.rewrite_fallbacks += 1
        else:
            try:
                summary = _rule_based_summary(report, config)
            except EmptyAfterCleaningError:
                stats.reject(RejectReason.EMPTY_AFTER_CLEANING)
                continue
        records.append(CuratedRecord(id=report.id, summary=summary, image_refs=report.image_refs))
        stats.accepted += 1
    return records, stats


def save_curated(records: list[CuratedRecord], path: str | Path, fingerprint: str = "") -> None:
    """One record per line {id, summary, image_refs}; optional meta header."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        if fingerprint:
            fh.write(json.dumps({"_meta": {"fingerprint": fingerprint}}) + "\n")
        for rec in records:
            fh.write(
                json.dumps(
                    {"id": rec.id, "summary": rec.summary, "image_refs": list(rec.image_refs)}
                )
                + "\n"
            )


def load_curated(path: str | Path) -> list[CuratedRecord]:
    path = Path(path)
    records: list[CuratedRecord] = []
    with path.open("r", encoding="utf-8") as fh:
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
                records.append(
                    CuratedRecord(
                        id=obj["id"],
                        summary=obj["summary"],
                        image_refs=tuple(obj["image_refs"]),
                    )
                )
            except KeyError as exc:
                raise MalformedLineError(line_no, f"missing key {exc}") from exc
    return records
