"""Deterministic stand-in for the cloud analysis service.

Scans decrypted report content in memory for MITRE ATT&CK technique
references and returns an untainted, structured result. The input is
never stored or referenced by the output; evidence snippets are capped
so the result is strictly weaker than the source document.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field
from typing import Optional, Protocol

from .crypto_envelope import PlaintextBuffer

TECHNIQUE_PATTERN = re.compile(rb"T[0-9]{4}(?:\.[0-9]{3})?")
SNIPPET_MAX_CHARS = 80
SNIPPET_LEAD = 24  # bytes of context kept before a match


@dataclass(frozen=True)
class Finding:
    technique_id: str
    evidence_offset: int
    evidence_snippet: str

    def to_dict(self) -> dict:
        return {
            "technique_id": self.technique_id,
            "evidence_offset": self.evidence_offset,
            "evidence_snippet": self.evidence_snippet,
        }


@dataclass(frozen=True)
class AnalysisResult:
    document_id: str
    findings: tuple[Finding, ...]
    stats: dict
    produced_at: float

    def to_dict(self) -> dict:
        return {
            "document_id": self.document_id,
            "findings": [f.to_dict() for f in self.findings],
            "stats": dict(self.stats),
            "produced_at": self.produced_at,
        }


class Analyzer(Protocol):
    def analyze(
        self, input: PlaintextBuffer, document_id: str, now: Optional[float] = None
    ) -> AnalysisResult: ...


def _snippet(data: bytes, start: int) -> str:
    window_start = max(0, start - SNIPPET_LEAD)
    snippet = data[window_start : window_start + SNIPPET_MAX_CHARS].decode(
        "utf-8", errors="replace"
    )[:SNIPPET_MAX_CHARS]
    # Keep the encoded form within the leak bound as well.
    while len(snippet.encode("utf-8")) > SNIPPET_MAX_CHARS:
        snippet = snippet[:-1]
    return snippet


class TechniqueExtractor:
    """Regex-based technique reference extraction; pure and reusable."""

    def analyze(
        self, input: PlaintextBuffer, document_id: str, now: Optional[float] = None
    ) -> AnalysisResult:
        data = input.data()  # raises BufferWiped if already scrubbed
        findings = []
        for m in TECHNIQUE_PATTERN.finditer(data):
            findings.append(
                Finding(
                    technique_id=m.group(0).decode("ascii"),
                    evidence_offset=m.start(),
                    evidence_snippet=_snippet(data, m.start()),
                )
            )
        stats = {
            "byte_count": len(data),
            "line_count": len(data.splitlines()),
            "distinct_techniques": len({f.technique_id for f in findings}),
        }
        return AnalysisResult(
            document_id=document_id,
            findings=tuple(findings),
            stats=stats,
            produced_at=time.time() if now is None else now,
        )
