"""Allocation hook used by tests to verify the in-place update discipline.

Device-side operations that allocate temporary arrays report the element
count here.  When no tracker is active the report is a no-op, so the hook
costs one attribute check on the hot path.  Tests activate a tracker, run a
device round, and assert that no temporary on the order of the model size
was ever created (the whole point of regenerating perturbation directions
from seeds instead of storing them).
"""

from contextlib import contextmanager

_active = None


class AllocTracker:
    def __init__(self):
        self.events = []

    def record(self, tag, nelems):
        self.events.append((tag, int(nelems)))

    def peak(self, prefix=""):
        sizes = [n for tag, n in self.events if tag.startswith(prefix)]
        return max(sizes) if sizes else 0

    def total(self, prefix=""):
        return sum(n for tag, n in self.events if tag.startswith(prefix))


def record(tag, nelems):
    if _active is not None:
        _active.record(tag, nelems)


@contextmanager
def track():
    """Activate a tracker for the duration of the block and yield it."""
    global _active
    prev = _active
    tracker = AllocTracker()
    _active = tracker
    try:
        yield tracker
    finally:
        _active = prev
