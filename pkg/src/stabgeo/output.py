"""Deterministic writers for CSV tables, JSONL records and the run manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

MANIFEST = "manifest.json"


def _cell(v):
    if isinstance(v, float):
        if math.isnan(v) or math.isinf(v):
            return str(v)
        return repr(v)
    return v


def _json_default(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if hasattr(o, "item"):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class OutputDir:
    """Single writer for one run: every file written through it is listed in the manifest."""

    root: Path
    fmt: str = "both"
    config_hash: str = ""
    files: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)
        stale = self.root / MANIFEST
        if stale.exists():
            stale.unlink()

    @property
    def want_csv(self) -> bool:
        return self.fmt in ("csv", "both")

    @property
    def want_jsonl(self) -> bool:
        return self.fmt in ("jsonl", "both")

    def write_csv(self, name: str, header: list[str], rows) -> None:
        if not self.want_csv:
            return
        path = self.root / name
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])
        self.files.append(name)

    def write_jsonl(self, name: str, records: list[dict]) -> None:
        if not self.want_jsonl:
            return
        path = self.root / name
        with path.open("w") as fh:
            for rec in records:
                rec = {**rec, "config_hash": self.config_hash}
                fh.write(json.dumps(rec, sort_keys=True, default=_json_default) + "\n")
        self.files.append(name)

    def write_bytes(self, name: str, blob: bytes) -> None:
        (self.root / name).write_bytes(blob)
        self.files.append(name)

    def write_manifest(self, version: str, started: str, finished: str) -> dict:
        manifest = {
            "config_hash": self.config_hash,
            "tool_version": version,
            "started": started,
            "finished": finished,
            "files": [{"name": f, "sha256": file_digest(self.root / f)} for f in self.files],
        }
        (self.root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest
