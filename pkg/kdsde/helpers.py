import time
from typing import List, Tuple

__all__ = ('Stopwatch',)


class Stopwatch:
    """
    Wall-clock laps. Only ever written to timing files, never to the
    reproducible outputs.
    """

    def __init__(self):
        self._start = time.perf_counter()
        self._last = self._start
        self.laps: List[Tuple[str, float]] = []

    def lap(self, name: str) -> float:
        now = time.perf_counter()
        elapsed = now - self._last
        self._last = now
        self.laps.append((name, elapsed))
        return elapsed

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self._start

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.lap('total')
        return False
