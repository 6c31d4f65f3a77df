# services/mac_counter.py

"""
Runtime multiply-accumulate instrumentation.

Weighted operations (matmul, conv2d, depthwise conv1d, the selective scan,
the SDS similarity pass) call `record_macs` with the exact number of
multiply-accumulates they performed. Counts land in the innermost active
scope of the innermost active `MacCounter` on the current thread; with no
active counter the call is a no-op.
"""

import threading
from collections import defaultdict
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional

_state = threading.local()


def _stack() -> List["MacCounter"]:
    if not hasattr(_state, "counters"):
        _state.counters = []
    return _state.counters


class MacCounter:
    def __init__(self):
        self.macs: Dict[str, int] = defaultdict(int)
        self.tokens: Dict[str, int] = defaultdict(int)
        self._scopes: List[str] = []

    @property
    def current_scope(self) -> str:
        return self._scopes[-1] if self._scopes else "unscoped"

    @contextmanager
    def scope(self, name: str) -> Iterator["MacCounter"]:
        self._scopes.append(name)
        try:
            yield self
        finally:
            self._scopes.pop()

    def total(self) -> int:
        return int(sum(self.macs.values()))

    def reset(self) -> None:
        self.macs.clear()
        self.tokens.clear()

    def __enter__(self) -> "MacCounter":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()


def active_counter() -> Optional[MacCounter]:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def counting_scope(name: str) -> Iterator[Optional[MacCounter]]:
    """Enter `name` on the active counter, if any."""
    counter = active_counter()
    if counter is None:
        yield None
        return
    with counter.scope(name):
        yield counter


def record_macs(count: int) -> None:
    counter = active_counter()
    if counter is not None:
        counter.macs[counter.current_scope] += int(count)


def record_tokens(count: int) -> None:
    counter = active_counter()
    if counter is not None:
        counter.tokens[counter.current_scope] += int(count)
