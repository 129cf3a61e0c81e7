"""Thread-local multiply-accumulate counter fed by the convolution primitives."""

from __future__ import annotations

import contextlib
import threading
from collections import defaultdict

_state = threading.local()


class FlopCounter:
    """Accumulates MACs per (scope, category).

    With ``dry_run`` the convolution primitives skip their arithmetic and return
    zero tensors of the right shape, so large inputs can be traced cheaply.
    """

    def __init__(self, dry_run: bool = False):
        self.dry_run = dry_run
        self.macs: dict[tuple[str, str], int] = defaultdict(int)
        self._scopes: list[str] = []

    @property
    def scope(self) -> str:
        return self._scopes[0] if self._scopes else "other"

    def add(self, category: str, macs: int) -> None:
        self.macs[(self.scope, category)] += int(macs)

    def total(self) -> int:
        return sum(self.macs.values())

    def by_scope(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for (scope, _), v in self.macs.items():
            out[scope] += v
        return dict(out)

    def by_category(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for (_, cat), v in self.macs.items():
            out[cat] += v
        return dict(out)


def active() -> FlopCounter | None:
    return getattr(_state, "counter", None)


@contextlib.contextmanager
def counting(dry_run: bool = False):
    old = active()
    counter = FlopCounter(dry_run)
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = old


@contextlib.contextmanager
def scope(name: str):
    counter = active()
    if counter is None:
        yield
        return
    counter._scopes.append(name)
    try:
        yield
    finally:
        counter._scopes.pop()


def dry_run() -> bool:
    counter = active()
    return counter is not None and counter.dry_run
