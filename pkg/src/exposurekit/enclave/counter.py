"""Durable monotonic counters, standing in for an external counter network."""

from __future__ import annotations

import json
import os
import threading
from pathlib import Path


class CounterUnavailable(Exception):
    pass


class CounterService:
    """Per-enclave strictly increasing counters.

    With a ``path`` the values live in a JSON file replaced atomically on every
    increment, so they outlive any runtime that uses them. ``available`` can be
    cleared to simulate an outage.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self.available = True
        self._lock = threading.Lock()
        self._values: dict[str, int] = {}
        if self.path is not None and self.path.exists():
            self._values = {k: int(v) for k, v in json.loads(self.path.read_text()).items()}

    def _check(self) -> None:
        if not self.available:
            raise CounterUnavailable("monotonic counter service unreachable")

    def peek(self, enclave_id: str) -> int:
        with self._lock:
            self._check()
            return self._values.get(enclave_id, 0)

    def increment_and_get(self, enclave_id: str) -> int:
        with self._lock:
            self._check()
            value = self._values.get(enclave_id, 0) + 1
            self._values[enclave_id] = value
            if self.path is not None:
                tmp = self.path.with_suffix(".tmp")
                tmp.write_text(json.dumps(self._values, sort_keys=True))
                os.replace(tmp, self.path)
            return value
