"""Time and entropy sources shared by every service.

Socket mode uses the wall clock and the OS random source; the simulator swaps
in a virtual clock and a seeded generator so runs replay byte for byte.
"""

import random
import secrets
import threading
from datetime import datetime, timedelta, timezone

SIM_EPOCH = datetime(2004, 6, 1, tzinfo=timezone.utc)


class SystemClock:
    def now(self) -> datetime:
        return datetime.now(timezone.utc)

    def timestamp(self) -> int:
        return int(self.now().timestamp())


class VirtualClock:
    """Tick counter mapped onto UTC time, one second per tick."""

    def __init__(self, epoch: datetime = SIM_EPOCH):
        self.epoch = epoch
        self.tick = 0
        self._lock = threading.Lock()

    def now(self) -> datetime:
        return self.epoch + timedelta(seconds=self.tick)

    def timestamp(self) -> int:
        return int(self.now().timestamp())

    def advance(self, ticks: int = 1):
        if ticks < 0:
            raise ValueError("virtual time cannot run backwards")
        with self._lock:
            self.tick += ticks

    def advance_to(self, tick: int):
        with self._lock:
            if tick > self.tick:
                self.tick = tick


class SystemEntropy:
    def token_bytes(self, size: int) -> bytes:
        return secrets.token_bytes(size)

    def shuffle(self, items: list):
        secrets.SystemRandom().shuffle(items)

    def randbelow(self, bound: int) -> int:
        return secrets.randbelow(bound)


class SeededEntropy:
    def __init__(self, seed: int):
        self._random = random.Random(seed)
        self._lock = threading.Lock()

    def token_bytes(self, size: int) -> bytes:
        with self._lock:
            return bytes(self._random.getrandbits(8) for _ in range(size))

    def shuffle(self, items: list):
        with self._lock:
            self._random.shuffle(items)

    def randbelow(self, bound: int) -> int:
        with self._lock:
            return self._random.randrange(bound)
