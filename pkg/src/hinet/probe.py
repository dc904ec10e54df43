"""Live-float accounting for decoder, pipeline and training buffers.

Memory is counted as tracked array elements, not OS memory, so the numbers are
deterministic.  Code that owns a large buffer allocates it through
:func:`empty`/:func:`zeros` (or registers it with :func:`track`) and hands it
back with :func:`release` once the buffer is dead.  With no probe active all
of this is free.
"""

import contextlib
import contextvars
import threading
from dataclasses import dataclass, field

import numpy as np

#: buffers at or below this many elements are not worth tracking
TRACK_THRESHOLD = 1024
MODEL_TAG = "model"


@dataclass
class MemProbe:
    current_live_floats: int = 0
    peak_live_floats: int = 0
    model_floats: int = 0
    peak_transient_floats: int = 0
    allocations: int = 0
    registry: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _live: dict = field(default_factory=dict, repr=False)

    def add(self, arr, tag):
        n = int(arr.size)
        if n <= TRACK_THRESHOLD:
            return
        with self._lock:
            key = id(arr)
            if key in self._live:
                return
            self._live[key] = (n, arr, tag == MODEL_TAG)
            self.current_live_floats += n
            if tag == MODEL_TAG:
                self.model_floats += n
            self.allocations += 1
            self.peak_live_floats = max(self.peak_live_floats, self.current_live_floats)
            self.peak_transient_floats = max(self.peak_transient_floats, self.transient_floats)
            self.registry[tag] = self.registry.get(tag, 0) + n

    def remove(self, arr):
        with self._lock:
            entry = self._live.pop(id(arr), None)
            if entry is not None:
                self.current_live_floats -= entry[0]
                if entry[2]:
                    self.model_floats -= entry[0]

    @property
    def transient_floats(self):
        """Live floats excluding model-sized constants (materialised weights)."""
        return self.current_live_floats - self.model_floats

    def release_all(self):
        with self._lock:
            self._live.clear()
            self.current_live_floats = 0
            self.model_floats = 0


_active = contextvars.ContextVar("hinet_probe", default=None)


@contextlib.contextmanager
def probing(probe=None):
    """Route tracked allocations in this context to ``probe`` (a fresh one by default)."""
    probe = MemProbe() if probe is None else probe
    token = _active.set(probe)
    try:
        yield probe
    finally:
        _active.reset(token)


def active():
    return _active.get()


def track(arr, tag="buffer"):
    probe = _active.get()
    if probe is not None:
        probe.add(arr, tag)
    return arr


def release(*arrays):
    probe = _active.get()
    if probe is None:
        return
    for arr in arrays:
        if arr is not None:
            probe.remove(arr)


def empty(shape, tag="buffer", dtype=np.float64):
    return track(np.empty(shape, dtype=dtype), tag)


def zeros(shape, tag="buffer", dtype=np.float64):
    return track(np.zeros(shape, dtype=dtype), tag)
