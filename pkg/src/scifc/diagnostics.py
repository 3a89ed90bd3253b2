from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .ast import Pos


@dataclass(frozen=True)
class Diagnostic:
    rule: str
    message: str
    pos: Optional[Pos] = None
    severity: str = "error"
    labels: tuple = field(default=())
    file: Optional[str] = None

    def to_record(self) -> dict:
        rec = {
            "severity": self.severity,
            "rule": self.rule,
            "line": self.pos.line if self.pos else None,
            "col": self.pos.col if self.pos else None,
            "message": self.message,
        }
        if self.file:
            rec["file"] = self.file
        if self.labels:
            rec["labels"] = list(self.labels)
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    def __str__(self) -> str:
        where = f"{self.file + ':' if self.file else ''}{self.pos or '?'}"
        return f"{where}: {self.severity} [{self.rule}] {self.message}"


class ScifError(Exception):
    """Raised for malformed input that cannot be reported as a diagnostic list."""


class ParseError(ScifError):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(str(d) for d in diagnostics))
