"""Wire messages, framing, transports and the raw-data audit.

Every frame is one canonical JSON object (sorted keys, compact separators)
followed by ``\\n``. Python's float repr is the shortest round-trip decimal,
so encoding is byte-stable across runs.
"""

from __future__ import annotations

import json
import queue
import socket
import threading
import time
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field, fields
from typing import Any, ClassVar, Iterable, Optional

import numpy as np

DEFAULT_PORT = 7461


class ProtocolError(ValueError):
    pass


def _floats(x):
    if x is None:
        return None
    return np.asarray(x, dtype=float).tolist()


def _ints(x):
    return [int(v) for v in np.asarray(x, dtype=np.int64).reshape(-1)]


@dataclass
class Message:
    TAG: ClassVar[str] = ""
    session_id: str
    sender: str
    receiver: str
    seq: int

    def to_obj(self) -> dict:
        obj = {k: v for k, v in asdict(self).items() if v is not None}
        obj["type"] = self.TAG
        return obj


@dataclass
class SharedMeasureInit(Message):
    TAG: ClassVar[str] = "shared_measure_init"
    seed: int = 0
    k: int = 0
    d: int = 0
    mean: float = 0.0
    std: float = 1.0
    points: list = field(default_factory=list)

    def __post_init__(self):
        self.points = _floats(self.points)


@dataclass
class InterpMeasure(Message):
    TAG: ClassVar[str] = "interp_measure"
    party_id: str = ""
    t: float = 0.5
    points: list = field(default_factory=list)
    labels: Optional[list] = None

    def __post_init__(self):
        self.t = float(self.t)
        self.points = _floats(self.points)
        if self.labels is not None:
            self.labels = _ints(self.labels)


@dataclass
class TrialRequest(Message):
    TAG: ClassVar[str] = "trial_request"
    run_id: str = ""
    p: list = field(default_factory=list)
    n: int = 0
    phase: str = "trial"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.p = _floats(self.p)
        self.n = int(self.n)


@dataclass
class SampleIndices(Message):
    TAG: ClassVar[str] = "sample_indices"
    run_id: str = ""
    party_id: str = ""
    indices: list = field(default_factory=list)

    def __post_init__(self):
        self.indices = _ints(self.indices)


@dataclass
class LocalUpdate(Message):
    TAG: ClassVar[str] = "local_update"
    run_id: str = ""
    round: int = 0
    party_id: str = ""
    weights: list = field(default_factory=list)
    n_samples: int = 0
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = _floats(self.weights)
        self.aux = {k: (_floats(v) if isinstance(v, (np.ndarray, list)) else v) for k, v in self.aux.items()}


@dataclass
class GlobalModel(Message):
    TAG: ClassVar[str] = "global_model"
    run_id: str = ""
    round: int = 0
    weights: list = field(default_factory=list)
    control: Optional[list] = None
    arch: Optional[list] = None

    def __post_init__(self):
        self.weights = _floats(self.weights)
        self.control = _floats(self.control)
        if self.arch is not None:
            self.arch = [int(a) for a in self.arch]


@dataclass
class EvalRequest(Message):
    TAG: ClassVar[str] = "eval_request"
    run_id: str = ""


@dataclass
class EvalResultMsg(Message):
    TAG: ClassVar[str] = "eval_result"
    run_id: str = ""
    accuracy: float = 0.0
    loss: float = 0.0


@dataclass
class TrialRecordMsg(Message):
    TAG: ClassVar[str] = "trial_record"
    run_id: str = ""
    p: list = field(default_factory=list)
    n: int = 0
    w: float = 0.0
    v: float = 0.0

    def __post_init__(self):
        self.p = _floats(self.p)


@dataclass
class ErrorMsg(Message):
    TAG: ClassVar[str] = "error"
    run_id: str = ""
    reason: str = ""


MESSAGE_TYPES = {
    cls.TAG: cls
    for cls in (
        SharedMeasureInit,
        InterpMeasure,
        TrialRequest,
        SampleIndices,
        LocalUpdate,
        GlobalModel,
        EvalRequest,
        EvalResultMsg,
        TrialRecordMsg,
        ErrorMsg,
    )
}

# fields that must be present on the wire; the rest have defaults
_OPTIONAL = {"labels", "control", "arch", "aux", "phase", "config"}


def encode(msg: Message) -> bytes:
    text = json.dumps(msg.to_obj(), sort_keys=True, separators=(",", ":"), allow_nan=False)
    return text.encode("utf-8") + b"\n"


def decode(frame: bytes) -> Message:
    if isinstance(frame, str):
        frame = frame.encode("utf-8")
    body = frame[:-1] if frame.endswith(b"\n") else frame
    if b"\n" in body:
        raise ProtocolError("trailing data after the frame terminator")
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed frame: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolError("frame is not a JSON object")
    tag = obj.pop("type", None)
    if tag is None:
        raise ProtocolError("missing field 'type'")
    cls = MESSAGE_TYPES.get(tag)
    if cls is None:
        raise ProtocolError(f"unknown message type {tag!r}")
    names = {f.name for f in fields(cls)}
    for name in sorted(names - _OPTIONAL):
        if name not in obj:
            raise ProtocolError(f"{tag}: missing field {name!r}")
    extra = set(obj) - names
    if extra:
        raise ProtocolError(f"{tag}: unexpected fields {sorted(extra)}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"{tag}: {exc}") from None


class SequenceChecker:
    """Rejects frames whose per-sender sequence number does not increase."""

    def __init__(self):
        self._last: dict = {}

    def check(self, msg: Message) -> None:
        key = (msg.session_id, msg.sender)
        last = self._last.get(key, -1)
        if msg.seq <= last:
            raise ProtocolError(f"out-of-order seq {msg.seq} from {msg.sender} (last {last})")
        self._last[key] = msg.seq


@dataclass(frozen=True)
class AuditEntry:
    index: int
    sender: str
    receiver: str
    frame: bytes
    timestamp: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "index": self.index,
                "sender": self.sender,
                "receiver": self.receiver,
                "timestamp": self.timestamp,
                "frame": self.frame.decode("utf-8").rstrip("\n"),
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "AuditEntry":
        obj = json.loads(line)
        return cls(obj["index"], obj["sender"], obj["receiver"], (obj["frame"] + "\n").encode(), obj["timestamp"])


class AuditLog:
    """Append-only record of every frame that crossed a party boundary."""

    def __init__(self):
        self._entries: list[AuditEntry] = []
        self._lock = threading.Lock()

    def append(self, sender: str, receiver: str, frame: bytes) -> None:
        with self._lock:
            i = len(self._entries)
            self._entries.append(AuditEntry(i, sender, receiver, frame, i))

    def __iter__(self):
        return iter(list(self._entries))

    def __len__(self):
        return len(self._entries)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for e in self._entries:
                fh.write(e.to_json() + "\n")

    @classmethod
    def read(cls, path) -> "AuditLog":
        log = cls()
        with open(path) as fh:
            log._entries = [AuditEntry.from_json(line) for line in fh if line.strip()]
        return log

    @classmethod
    def from_entries(cls, entries: Iterable[AuditEntry]) -> "AuditLog":
        log = cls()
        log._entries = list(entries)
        return log


class InProcTransport:
    """Deterministic loopback: per-party FIFO queues and a logical clock."""

    def __init__(self):
        self.log = AuditLog()
        self._queues: dict = defaultdict(deque)
        self._checkers: dict = defaultdict(SequenceChecker)

    def register(self, party_id: str) -> None:
        self._queues[party_id]

    def send(self, msg: Message) -> None:
        if msg.receiver not in self._queues:
            raise ProtocolError(f"unknown receiver {msg.receiver!r}")
        frame = encode(msg)
        self.log.append(msg.sender, msg.receiver, frame)
        self._queues[msg.receiver].append(frame)

    def recv(self, party_id: str, timeout: Optional[float] = None) -> Optional[Message]:
        q = self._queues[party_id]
        if not q:
            return None
        msg = decode(q.popleft())
        self._checkers[party_id].check(msg)
        return msg

    def close(self) -> None:
        pass


def _read_lines(sock: socket.socket):
    buf = b""
    while True:
        try:
            chunk = sock.recv(65536)
        except OSError:
            return
        if not chunk:
            return
        buf += chunk
        while b"\n" in buf:
            line, buf = buf.split(b"\n", 1)
            yield line + b"\n"


class TcpHub:
    """Routing relay: each client announces its party id in a first
    ``{"hello": id}`` line; later frames are forwarded by ``receiver`` and
    logged in arrival order."""

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT):
        self.log = AuditLog()
        self._server = socket.create_server((host, port), reuse_port=False)
        self.address = self._server.getsockname()
        self._clients: dict = {}
        self._lock = threading.Lock()
        self._ready = threading.Condition(self._lock)
        self._closed = False
        threading.Thread(target=self._accept, daemon=True).start()

    def _accept(self):
        while not self._closed:
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn):
        party = None
        for line in _read_lines(conn):
            if party is None:
                party = json.loads(line)["hello"]
                with self._ready:
                    self._clients[party] = conn
                    self._ready.notify_all()
                continue
            try:
                receiver = json.loads(line)["receiver"]
            except (ValueError, KeyError):
                continue
            with self._ready:
                while receiver not in self._clients and not self._closed:
                    self._ready.wait(timeout=1.0)
                self.log.append(party, receiver, line)
                target = self._clients.get(receiver)
            if target is not None:
                target.sendall(line)

    def close(self):
        self._closed = True
        self._server.close()
        with self._lock:
            for c in self._clients.values():
                c.close()


class TcpTransport:
    """Socket transport: one connection per local party to a :class:`TcpHub`.

    With ``listen=True`` the transport starts its own hub, whose log is the
    session's audit log.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT, listen: bool = False,
                 connect_timeout: float = 30.0):
        self.hub = TcpHub(host, port) if listen else None
        self.connect_timeout = connect_timeout
        if self.hub is not None:
            host, port = self.hub.address
        self.address = (host, port)
        self._socks: dict = {}
        self._queues: dict = {}
        self._checkers: dict = defaultdict(SequenceChecker)

    @property
    def log(self) -> AuditLog:
        if self.hub is None:
            raise ProtocolError("only the listening side holds the audit log")
        return self.hub.log

    def _connect(self) -> socket.socket:
        # the relay may not be listening yet when a party process starts
        deadline = time.monotonic() + self.connect_timeout
        while True:
            try:
                return socket.create_connection(self.address)
            except ConnectionRefusedError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.1)

    def register(self, party_id: str) -> None:
        sock = self._connect()
        sock.sendall(json.dumps({"hello": party_id}).encode() + b"\n")
        q: queue.Queue = queue.Queue()

        def pump():
            for line in _read_lines(sock):
                q.put(line)
            q.put(None)

        threading.Thread(target=pump, daemon=True).start()
        self._socks[party_id] = sock
        self._queues[party_id] = q

    def send(self, msg: Message) -> None:
        sock = self._socks.get(msg.sender)
        if sock is None:
            raise ProtocolError(f"{msg.sender!r} is not registered on this transport")
        sock.sendall(encode(msg))

    def recv(self, party_id: str, timeout: Optional[float] = None) -> Optional[Message]:
        try:
            frame = self._queues[party_id].get(timeout=timeout) if timeout else self._queues[party_id].get_nowait()
        except queue.Empty:
            return None
        if frame is None:
            self._queues[party_id].put(None)
            raise ConnectionError(f"relay connection of {party_id!r} closed")
        msg = decode(frame)
        self._checkers[party_id].check(msg)
        return msg

    def close(self) -> None:
        for s in self._socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
        if self.hub is not None:
            self.hub.close()


# ---------------------------------------------------------------- audit


@dataclass
class AuditReport:
    passed: bool
    violations: list = field(default_factory=list)

    def summary(self) -> str:
        head = "PASS" if self.passed else "FAIL"
        lines = [head] + [f"  message {i}: [{rule}] {detail}" for i, rule, detail in self.violations]
        return "\n".join(lines)


def _numeric_lists(obj: Any, out: list) -> None:
    if isinstance(obj, dict):
        for v in obj.values():
            _numeric_lists(v, out)
    elif isinstance(obj, list):
        if obj and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj):
            out.append(obj)
        else:
            for v in obj:
                _numeric_lists(v, out)


def _row_index(raw: dict) -> tuple[dict, set]:
    rows: dict = {}
    dims = set()
    for party, data in raw.items():
        pts = np.asarray(data.points if hasattr(data, "points") else data, dtype=float)
        dims.add(pts.shape[1])
        for row in pts:
            rows.setdefault(tuple(row.tolist()), party)
    return rows, dims


def audit_no_raw_leak(log: AuditLog, raw: dict, t_min: float) -> AuditReport:
    """Scan every frame for raw rows, sub-floor interpolation and gaps.

    ``raw`` maps party id to that party's raw datasets (a measure or an array
    of rows; several datasets may be stacked). Any raw row appearing verbatim
    in any frame is a violation, including inside the owner's own messages.
    """
    rows, dims = _row_index(raw)
    violations = []
    seqs: dict = defaultdict(list)
    for entry in log:
        try:
            msg = decode(entry.frame)
        except ProtocolError as exc:
            violations.append((entry.index, "malformed", str(exc)))
            continue
        seqs[msg.sender].append(msg.seq)
        if isinstance(msg, InterpMeasure) and msg.t < t_min:
            violations.append((entry.index, "t_floor", f"{msg.party_id} sent t={msg.t} < {t_min}"))
        found = set()
        lists: list = []
        _numeric_lists(msg.to_obj(), lists)
        for values in lists:
            for d in dims:
                for start in range(0, len(values) - d + 1):
                    owner = rows.get(tuple(float(v) for v in values[start:start + d]))
                    if owner is not None:
                        found.add(owner)
        for owner in sorted(found):
            violations.append((entry.index, "raw_row", f"{msg.TAG} from {msg.sender} carries raw rows of {owner}"))
    for sender, s in sorted(seqs.items()):
        if sorted(s) != list(range(len(s))):
            violations.append((-1, "incomplete", f"sequence numbers from {sender} have gaps"))
    violations.sort(key=lambda v: (v[0], v[1], v[2]))
    return AuditReport(not violations, violations)
