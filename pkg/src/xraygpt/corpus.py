"""Typed loading and saving of raw radiology-report corpora.

A corpus file is line-delimited JSON, one report per line, with keys
{id, findings, impression, image_refs, split}. Absent sections stay
absent (None), which is distinct from an empty string; both fail the
downstream presence filter, but only one means "the key was missing".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DuplicateIdError, MalformedLineError

VALID_SPLITS = ("train", "test")


@dataclass(frozen=True)
class RadiologyReport:
    """One raw report: verbatim sections plus linked image identifiers."""

    id: str
    findings: str | None
    impression: str | None
    image_refs: tuple[str, ...]
    split: str = "train"


@dataclass
class Corpus:
    reports: list[RadiologyReport] = field(default_factory=list)
    source_label: str = ""

    def __len__(self) -> int:
        return len(self.reports)

    def __iter__(self):
        return iter(self.reports)


def word_count(text: str) -> int:
    """Number of maximal whitespace-delimited tokens in ``text``.

    Punctuation attached to a token counts with that token; leading,
    trailing, and repeated whitespace contribute nothing.
    """
    return len(text.split())


def _report_from_obj(obj: dict, line_no: int) -> RadiologyReport:
    if not isinstance(obj, dict):
        raise MalformedLineError(line_no, "record is not an object")
    report_id = obj.get("id")
    if not isinstance(report_id, str) or not report_id:
        raise MalformedLineError(line_no, "missing or empty 'id'")
    findings = obj.get("findings")
    impression = obj.get("impression")
    if findings is not None and not isinstance(findings, str):
        raise MalformedLineError(line_no, "'findings' must be a string when present")
    if impression is not None and not isinstance(impression, str):
        raise MalformedLineError(line_no, "'impression' must be a string when present")
    refs = obj.get("image_refs", [])
    if not isinstance(refs, list) or not all(isinstance(r, str) for r in refs):
        raise MalformedLineError(line_no, "'image_refs' must be a list of strings")
    split = obj.get("split", "train")
    if split not in VALID_SPLITS:
        raise MalformedLineError(line_no, f"unknown split {split!r}")
    return RadiologyReport(
        id=report_id,
        findings=findings,
        impression=impression,
        image_refs=tuple(refs),
        split=split,
    )


def load_corpus(path: str | Path, source_label: str = "") -> Corpus:
    """Load a line-delimited report file, preserving line order.

    Raises MalformedLineError for unparseable lines and DuplicateIdError
    when two records share an id. Unknown keys are ignored.
    """
    path = Path(path)
    reports: list[RadiologyReport] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLineError(line_no, str(exc)) from exc
            report = _report_from_obj(obj, line_no)
            if report.id in seen:
                raise DuplicateIdError(report.id)
            seen.add(report.id)
            reports.append(report)
    return Corpus(reports=reports, source_label=source_label or path.stem)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write a corpus back to disk in the same line-delimited format."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for r in corpus.reports:
            obj = {"id": r.id, "image_refs": list(r.image_refs), "split": r.split}
            if r.findings is not None:
                obj["findings"] = r.findings
            if r.impression is not None:
                obj["impression"] = r.impression
            fh.write(json.dumps(obj) + "\n")
