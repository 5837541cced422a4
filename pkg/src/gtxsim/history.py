"""Checkable history records and their JSON-lines form.

Every event carries the same field set; unused fields are null. Beyond the
core fields, ``lower``/``upper``/``clock_at`` give the clock interval behind a
timestamp and the true instant it was read, ``epoch`` the master epoch, and
``reason`` the abort cause.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Optional

KINDS = ("begin", "read", "write_commit", "abort", "commit")

INIT_TXN = 0


@dataclass
class HistoryEvent:
    kind: str
    txn: int
    node: int = -1
    mode: str = ""
    true_start: Optional[int] = None
    true_end: Optional[int] = None
    rts: Optional[int] = None
    wts: Optional[int] = None
    reads: list = field(default_factory=list)
    writes: list = field(default_factory=list)
    lower: Optional[int] = None
    upper: Optional[int] = None
    clock_at: Optional[int] = None
    epoch: Optional[int] = None
    reason: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.true_start is not None and self.true_end is not None and self.true_start > self.true_end:
            raise ValueError("event ends before it starts")


def normalize(value: Any) -> Any:
    """Canonical JSON form, so in-memory and reloaded histories compare equal."""
    return json.loads(json.dumps(value))


class HistoryRecorder:
    def __init__(self):
        self.events: list = []
        self._committed: set = set()

    def mark_committed(self, txn: int) -> bool:
        """True the first time ``txn`` is seen; recovery may re-record a decision."""
        if txn in self._committed:
            return False
        self._committed.add(txn)
        return True

    def add(self, **kw) -> HistoryEvent:
        ev = HistoryEvent(**kw)
        self.events.append(ev)
        return ev

    def initial_state(self, values: dict):
        """Model the loaded database as a transaction committed at time zero."""
        writes = [[str(k), normalize(v)] for k, v in sorted(values.items(), key=lambda kv: str(kv[0]))]
        self.add(kind="write_commit", txn=INIT_TXN, mode="init", true_start=0, true_end=0, wts=0, writes=writes)
        self.add(kind="commit", txn=INIT_TXN, mode="init", true_start=0, true_end=0)


def dump_jsonl(events: Iterable[HistoryEvent], path: str):
    with open(path, "w") as f:
        for ev in events:
            f.write(json.dumps(asdict(ev), sort_keys=True, separators=(",", ":")))
            f.write("\n")


def dumps_jsonl(events: Iterable[HistoryEvent]) -> str:
    return "".join(json.dumps(asdict(ev), sort_keys=True, separators=(",", ":")) + "\n" for ev in events)


def load_jsonl(path: str) -> list:
    with open(path) as f:
        return [HistoryEvent(**json.loads(line)) for line in f if line.strip()]
