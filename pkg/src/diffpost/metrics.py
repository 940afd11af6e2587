"""Metrics log, run report and the output-directory lock.

``metrics.jsonl`` holds one JSON object per line, keys sorted, compact
separators. Every record carries ``schema`` (the format version),
``config_digest`` and ``step``; steps are strictly increasing. Wallclock
goes to ``timing.jsonl`` so the metrics file is reproducible byte for byte.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path

METRICS_SCHEMA = 1
REPORT_SCHEMA = 1


class RunDirError(RuntimeError):
    pass


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


class MetricsLog:
    """Append-only step log. Opening with ``resume_from=step`` drops records
    at or beyond that step (they will be regenerated)."""

    def __init__(self, path: str | Path, digest: str, resume_from: int | None = None):
        self.path = Path(path)
        self.digest = digest
        self.last_step = -1
        if resume_from is not None and self.path.exists():
            kept = [r for r in read_records(self.path) if r["step"] < resume_from]
            for r in kept:
                if r["config_digest"] != digest:
                    raise RunDirError(f"{self.path} belongs to a run with a different config")
            self.path.write_text("".join(dumps_record(r) + "\n" for r in kept))
            self.last_step = kept[-1]["step"] if kept else -1
        elif self.path.exists():
            self.path.unlink()
        self._fh = open(self.path, "a")

    def write(self, rec: dict) -> None:
        step = rec["step"]
        if step <= self.last_step:
            raise ValueError(f"metrics out of order: step {step} after {self.last_step}")
        out = {k: _clean(v) for k, v in rec.items()}
        out.update(schema=METRICS_SCHEMA, config_digest=self.digest)
        self._fh.write(dumps_record(out) + "\n")
        self._fh.flush()
        self.last_step = step

    def close(self) -> None:
        self._fh.close()


class TimingLog:
    def __init__(self, path: str | Path, resume: bool = False):
        self._fh = open(path, "a" if resume else "w")

    def write(self, step: int, seconds: float) -> None:
        self._fh.write(dumps_record({"step": step, "seconds": round(seconds, 6)}) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_records(path: str | Path) -> list[dict]:
    recs = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                recs.append(json.loads(line))
    return recs


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return sum(xs) / len(xs) if xs else None


def build_report(records: list[dict], command: str, extra: dict | None = None) -> dict:
    """Summary statistics that depend only on the metrics records (plus
    whatever final evaluation the caller passes in ``extra``)."""
    steps = [r["step"] for r in records]
    if steps != sorted(set(steps)):
        raise ValueError("metrics records are not strictly ordered by step")
    digests = {r["config_digest"] for r in records}
    if len(digests) > 1:
        raise RunDirError("metrics log mixes runs with different configs")
    report = {"schema": REPORT_SCHEMA, "command": command, "n_records": len(records),
              "config_digest": digests.pop() if digests else None}
    numeric = sorted({k for r in records for k, v in r.items()
                      if isinstance(v, (int, float)) and not isinstance(v, bool)
                      and k not in ("step", "schema")})
    summary = {}
    tail = records[-10:]
    for k in numeric:
        col = [r.get(k) for r in records]
        summary[k] = {"first": col[0], "last": col[-1], "mean_last10": _mean([r.get(k) for r in tail]),
                      "max": max((x for x in col if x is not None), default=None)}
    report["summary"] = summary
    if "skipped" in (records[0] if records else {}):
        report["skipped_steps"] = sum(bool(r["skipped"]) for r in records)
    if extra:
        report.update(extra)
    return report


def write_curves(records: list[dict], path: str | Path, columns: list[str]) -> None:
    """CSV with one row per step, for plotting training curves."""
    with open(path, "w") as fh:
        fh.write(",".join(["step"] + columns) + "\n")
        for r in records:
            vals = ["" if r.get(c) is None else repr(r[c]) for c in columns]
            fh.write(",".join([str(r["step"])] + vals) + "\n")


def write_json(path: str | Path, obj: dict) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")
    os.replace(tmp, path)


class RunLock:
    """Exclusive ownership of an output directory for the lifetime of a run."""

    def __init__(self, directory: str | Path):
        self.path = Path(directory) / ".lock"

    def _stale(self) -> bool:
        try:
            pid = int(self.path.read_text().strip())
        except (OSError, ValueError):
            return False
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return True
        except PermissionError:
            return False
        return False

    def __enter__(self):
        if self.path.exists() and self._stale():
            self.path.unlink(missing_ok=True)   # owner died without cleaning up
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunDirError(f"{self.path.parent} is in use by another run (remove {self.path} if stale)")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False
