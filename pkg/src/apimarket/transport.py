"""In-process off-chain message passing between marketplace actors."""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Any, Callable

# payload kinds
FRAGMENT = "fragment"
INVOKE = "invoke"
STEP_INPUT = "step_input"
STEP_OUTPUT = "step_output"
FINAL_OUTPUT = "final_output"


@dataclass(frozen=True)
class TransportMessage:
    sender: str
    recipient: str
    kind: str
    body: dict[str, Any] = field(default_factory=dict, hash=False)
    tick: int = 0


class Transport:
    """Reliable FIFO delivery per (sender, recipient) pair.

    Messages sent during tick ``t`` become deliverable at tick ``t + 1``.
    Every message is kept in :attr:`log`, and ``tap`` (if given) sees each one
    as it is sent, which is how tests instrument the wire.
    """

    def __init__(self, tap: Callable[[TransportMessage], None] | None = None):
        self.tick = 0
        self.log: list[TransportMessage] = []
        self._queues: dict[str, deque[TransportMessage]] = defaultdict(deque)
        self._tap = tap

    def send(self, sender: str, recipient: str, kind: str, **body: Any) -> TransportMessage:
        msg = TransportMessage(sender, recipient, kind, body, self.tick)
        self.log.append(msg)
        self._queues[recipient].append(msg)
        if self._tap is not None:
            self._tap(msg)
        return msg

    def receive(self, endpoint: str) -> list[TransportMessage]:
        queue = self._queues.get(endpoint)
        out = []
        while queue and queue[0].tick < self.tick:
            out.append(queue.popleft())
        return out

    def pending(self) -> bool:
        return any(self._queues.values())

    def advance(self) -> None:
        self.tick += 1
