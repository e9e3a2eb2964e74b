"""Bounded queue of staged steps shared by a stream writer's service threads."""

from __future__ import annotations

import logging
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .errors import StepStateError

if TYPE_CHECKING:
    from collections.abc import Callable

    import numpy as np

    from .model import StepAnnouncement
    from .types import QueuePolicy

logger = logging.getLogger(__name__)


@dataclass
class StagedStep:
    """A published step held until every subscriber it was announced to released it."""

    announcement: StepAnnouncement
    payloads: dict[int, np.ndarray]  # chunk-table index -> array over the chunk's region
    announced_to: set[int] = field(default_factory=set)
    pending: set[int] = field(default_factory=set)

    @property
    def index(self) -> int:
        return self.announcement.step_index


class StepQueue:
    """At most ``depth`` staged steps plus a per-step release set.

    A step leaves the queue once it has been announced to at least one
    subscriber and all of them released it (or went away). Steps staged while
    nobody is subscribed wait for the next subscriber. When the queue is full,
    ``discard`` rejects the new step and ``block`` waits for a free slot.
    ``on_free`` is called with the indices of freed steps, outside the lock.
    """

    def __init__(
        self,
        depth: int,
        policy: QueuePolicy,
        on_free: Callable[[list[int]], None] | None = None,
    ) -> None:
        if depth < 1:
            msg = f"queue depth must be >= 1, got {depth}"
            raise ValueError(msg)
        self.depth = depth
        self.policy = policy
        self._on_free = on_free
        self._cond = threading.Condition()
        self._steps: OrderedDict[int, StagedStep] = OrderedDict()
        self._subscribers: set[int] = set()
        self._closed = False
        self.high_water = 0
        self.discarded: list[int] = []

    def __len__(self) -> int:
        with self._cond:
            return len(self._steps)

    def stage(self, step: StagedStep) -> bool:
        """Add ``step``; returns False if it was discarded because the queue is full."""
        with self._cond:
            if self._closed:
                msg = "step queue is closed"
                raise StepStateError(msg)
            if len(self._steps) >= self.depth:
                if self.policy == "discard":
                    self.discarded.append(step.index)
                    logger.info("queue full (%d), discarding step %d", self.depth, step.index)
                    return False
                logger.debug("queue full, waiting to stage step %d", step.index)
                while len(self._steps) >= self.depth and not self._closed:
                    self._cond.wait()
                if self._closed:
                    msg = "step queue closed while waiting for a slot"
                    raise StepStateError(msg)
            self._steps[step.index] = step
            self.high_water = max(self.high_water, len(self._steps))
            return True

    def announce_targets(self, index: int) -> set[int]:
        """Subscribers the step still has to be announced to; marks them as announced."""
        with self._cond:
            step = self._steps.get(index)
            if step is None:
                return set()
            targets = self._subscribers - step.announced_to
            step.announced_to |= targets
            step.pending |= targets
            return targets

    def add_subscriber(self, sub: int) -> list[StagedStep]:
        """Register ``sub`` and hand it every step nobody has been told about yet."""
        with self._cond:
            self._subscribers.add(sub)
            backlog = [s for s in self._steps.values() if not s.announced_to]
            for s in backlog:
                s.announced_to.add(sub)
                s.pending.add(sub)
            return backlog

    def remove_subscriber(self, sub: int) -> None:
        with self._cond:
            self._subscribers.discard(sub)
            for s in self._steps.values():
                s.pending.discard(sub)
            freed = self._reap()
        self._notify(freed)

    def release(self, index: int, sub: int) -> None:
        with self._cond:
            step = self._steps.get(index)
            if step is None:
                logger.debug("release of unknown step %d by %d", index, sub)
                return
            step.pending.discard(sub)
            freed = self._reap()
        self._notify(freed)

    def lookup(self, index: int) -> StagedStep | None:
        with self._cond:
            return self._steps.get(index)

    def wait_drained(self, timeout: float) -> bool:
        """Wait until no announced step is still pending; False on timeout."""
        deadline = time.monotonic() + timeout
        with self._cond:
            while any(s.pending for s in self._steps.values()):
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._cond.wait(remaining)
            return True

    def close(self) -> list[int]:
        """Close the queue, dropping whatever is left; returns the dropped step indices."""
        with self._cond:
            self._closed = True
            dropped = list(self._steps)
            self._steps.clear()
            self._cond.notify_all()
            return dropped

    def _reap(self) -> list[int]:
        freed = [i for i, s in self._steps.items() if s.announced_to and not s.pending]
        for i in freed:
            del self._steps[i]
            logger.debug("step %d freed", i)
        if freed:
            self._cond.notify_all()
        return freed

    def _notify(self, freed: list[int]) -> None:
        if freed and self._on_free is not None:
            self._on_free(freed)
