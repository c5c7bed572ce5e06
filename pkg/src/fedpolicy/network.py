"""In-process message network with an injectable fault layer, plus the audit log."""

from __future__ import annotations

import heapq
import json
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable


@dataclass(frozen=True)
class Message:
    src: str
    dst: str
    kind: str
    payload: bytes
    tag: str = ""


def encode_message(msg: Message) -> bytes:
    """Length-prefixed codec shared by every transport."""
    out = []
    for part in (msg.src.encode(), msg.dst.encode(), msg.kind.encode(), msg.tag.encode(), msg.payload):
        out.append(struct.pack("<I", len(part)) + part)
    return b"".join(out)


def decode_message(data: bytes) -> Message:
    parts, pos = [], 0
    for _ in range(5):
        if pos + 4 > len(data):
            raise ValueError("truncated message")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise ValueError("message field runs past end")
        parts.append(bytes(data[pos:pos + n]))
        pos += n
    if pos != len(data):
        raise ValueError("trailing bytes after message")
    src, dst, kind, tag = (p.decode() for p in parts[:4])
    return Message(src, dst, kind, parts[4], tag)


@dataclass
class Fault:
    """One fault rule. ``None`` match fields are wildcards.

    action: ``drop`` | ``delay`` (by ``ticks``) | ``bitflip`` (payload bit ``bit``)
    | ``mutate`` (``mutate(payload) -> payload``). ``remaining`` limits how many
    messages the rule hits (``None`` = unlimited).
    """

    action: str
    src: str | None = None
    dst: str | None = None
    kind: str | None = None
    tag: str | None = None
    bit: int = 0
    ticks: int = 1
    mutate: Callable[[bytes], bytes] | None = None
    remaining: int | None = None
    hits: int = 0

    def matches(self, msg: Message) -> bool:
        if self.remaining is not None and self.remaining <= 0:
            return False
        return all(want is None or want == got for want, got in
                   ((self.src, msg.src), (self.dst, msg.dst), (self.kind, msg.kind), (self.tag, msg.tag)))


def flip_bit(data: bytes, bit: int) -> bytes:
    buf = bytearray(data)
    buf[(bit // 8) % len(buf)] ^= 1 << (bit % 8)
    return bytes(buf)


class SimNetwork:
    """Deterministic delivery: messages leave inboxes in (delivery tick, send order)."""

    def __init__(self):
        self.faults: list[Fault] = []
        self.clock = 0
        self._seq = 0
        self._inboxes: dict[str, list] = {}
        self._lock = threading.Lock()
        self.dropped: list[Message] = []

    def inject(self, fault: Fault) -> Fault:
        self.faults.append(fault)
        return fault

    def send(self, msg: Message) -> None:
        # round trip through the codec so the wire format is exercised on every hop
        msg = decode_message(encode_message(msg))
        with self._lock:
            self.clock += 1
            delay = 0
            for fault in self.faults:
                if not fault.matches(msg):
                    continue
                fault.hits += 1
                if fault.remaining is not None:
                    fault.remaining -= 1
                if fault.action == "drop":
                    self.dropped.append(msg)
                    return
                if fault.action == "delay":
                    delay += fault.ticks
                elif fault.action == "bitflip":
                    msg = Message(msg.src, msg.dst, msg.kind, flip_bit(msg.payload, fault.bit), msg.tag)
                elif fault.action == "mutate":
                    msg = Message(msg.src, msg.dst, msg.kind, fault.mutate(msg.payload), msg.tag)
                else:
                    raise ValueError(f"unknown fault action {fault.action!r}")
            self._seq += 1
            heapq.heappush(self._inboxes.setdefault(msg.dst, []), (self.clock + delay, self._seq, msg))

    def receive(self, dst: str, kind: str | None = None) -> list[Message]:
        """Drain every message for ``dst`` (optionally of one kind), delayed ones included."""
        with self._lock:
            box = self._inboxes.get(dst, [])
            keep, out = [], []
            while box:
                item = heapq.heappop(box)
                (out if kind is None or item[2].kind == kind else keep).append(item)
            for item in keep:
                heapq.heappush(box, item)
            return [m for _, _, m in out]


@dataclass
class AuditLog:
    """JSON-lines audit trail with a logical clock."""

    events: list[dict] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def log(self, round_: int, phase: str, actor: str, verdict: str, digest: str | None = None, **detail) -> dict:
        with self._lock:
            event = {"t": len(self.events), "round": round_, "phase": phase, "actor": actor,
                     "verdict": verdict, "digest": digest}
            if detail:
                event["detail"] = detail
            self.events.append(event)
            return event

    def for_round(self, round_: int) -> list[dict]:
        return [e for e in self.events if e["round"] == round_]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @staticmethod
    def read(path) -> list[dict]:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]
