"""Classifier oracles: in-process stubs and a line-protocol subprocess client.

Wire format, one JSON object per line, UTF-8, ``\\n`` terminated::

    request   {"id":N,"image":"<path>"}
    response  {"id":N,"label":"<text>","confidence":F}

``confidence`` may be omitted or null. Responses may arrive in any order
and are matched to requests by ``id``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import queue
import subprocess
import sys
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, Mapping, Optional, Sequence

from .datastore import ANNOTATIONS_NAME, parse_image_name


class OracleError(RuntimeError):
    """Base class for oracle failures; ``request_id`` names the request involved."""

    def __init__(self, message: str, request_id: Optional[int] = None):
        super().__init__(message)
        self.request_id = request_id


class OracleProtocolError(OracleError):
    pass


class OracleTimeout(OracleError):
    pass


class OracleTransportError(OracleError):
    pass


@dataclass(frozen=True)
class OracleRequest:
    id: int
    image_path: str

    def to_line(self) -> str:
        return json.dumps({"id": self.id, "image": self.image_path}, separators=(",", ":"))


@dataclass(frozen=True)
class OracleResponse:
    id: int
    label: str
    confidence: Optional[float] = None

    def to_line(self) -> str:
        d = {"id": self.id, "label": self.label, "confidence": self.confidence}
        return json.dumps(d, separators=(",", ":"))


def parse_request(line: str) -> OracleRequest:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise OracleProtocolError(f"malformed request line: {exc.msg}") from None
    if not isinstance(d, dict) or not _is_int(d.get("id")) or not isinstance(d.get("image"), str):
        raise OracleProtocolError(f"request needs integer id and string image: {line.strip()[:80]!r}")
    return OracleRequest(d["id"], d["image"])


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def parse_response(line: str) -> OracleResponse:
    """Decode one response line; any deviation raises :class:`OracleProtocolError`."""
    try:
        d = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise OracleProtocolError(f"malformed response line: {line.strip()[:80]!r}") from exc
    if not isinstance(d, dict):
        raise OracleProtocolError(f"response is not an object: {line.strip()[:80]!r}")
    rid = d.get("id")
    if not _is_int(rid):
        raise OracleProtocolError(f"response id must be an integer: {line.strip()[:80]!r}")
    label = d.get("label")
    if not isinstance(label, str):
        raise OracleProtocolError("response label must be a string", rid)
    conf = d.get("confidence")
    if conf is not None:
        if isinstance(conf, bool) or not isinstance(conf, (int, float)) or not math.isfinite(conf) \
                or not 0.0 <= conf <= 1.0:
            raise OracleProtocolError(f"confidence {conf!r} outside [0, 1]", rid)
        conf = float(conf)
    return OracleResponse(rid, label, conf)


# --------------------------------------------------------------------------
# stubs


class StubMode(str, Enum):
    PERFECT = "perfect"
    POSE_BIASED = "pose-biased"
    SHAKE_SENSITIVE = "shake-sensitive"


@dataclass(frozen=True)
class StubOracleSpec:
    """Synthetic classifier with a known accuracy law.

    ``pose-biased``: p = base_accuracy - decay * (delta / 45), where delta is
    the image view's distance from the class front view (``frontal``,
    default 0). ``shake-sensitive``: p = base_accuracy - decay * (d /
    shake_scale_px), d being the bbox-centre offset from the mean over that
    object's view. Probabilities are clamped to [0, 1].
    """

    mode: StubMode = StubMode.PERFECT
    base_accuracy: float = 1.0
    decay: float = 0.0
    seed: int = 0
    shake_scale_px: float = 4.0
    frontal: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "mode", StubMode(self.mode))
        if not 0.0 <= self.base_accuracy <= 1.0:
            raise ValueError("base_accuracy must lie in [0, 1]")
        if self.decay < 0 or self.shake_scale_px <= 0:
            raise ValueError("decay must be >= 0 and shake_scale_px > 0")


@dataclass(frozen=True)
class ImageTruth:
    class_name: str
    instance_id: str
    view_degrees: int
    frame_index: int


def truth_from_path(path: str) -> ImageTruth:
    p = Path(path)
    parsed = parse_image_name(p.name)
    if parsed is None or len(p.parts) < 3:
        raise ValueError(f"not a dataset image path: {path}")
    return ImageTruth(p.parent.parent.name, p.parent.name, parsed[0], parsed[1])


def _uniform(seed: int, key: str) -> float:
    h = hashlib.sha256(f"{seed}\x1f{key}".encode()).digest()
    return int.from_bytes(h[:8], "big") / 2.0**64


def _clamp01(p: float) -> float:
    return min(1.0, max(0.0, p))


class StubOracle:
    """In-process oracle; each image's correctness is a fixed seeded coin flip."""

    def __init__(self, spec: StubOracleSpec = StubOracleSpec()):
        self.spec = spec
        self._centres: dict[str, dict[str, tuple[float, float]]] = {}
        self._lock = threading.Lock()

    def _bbox_offset(self, path: Path) -> float:
        d = str(path.parent)
        with self._lock:
            table = self._centres.get(d)
        if table is None:
            rows = list(csv.DictReader(open(path.parent / ANNOTATIONS_NAME, newline="")))
            sums: dict[int, list[float]] = {}
            centres = {}
            for r in rows:
                cx = (int(r["x1"]) + int(r["x2"])) / 2.0
                cy = (int(r["y1"]) + int(r["y2"])) / 2.0
                centres[r["image_file"]] = (int(r["pose_degrees"]), cx, cy)
                s = sums.setdefault(int(r["pose_degrees"]), [0.0, 0.0, 0])
                s[0] += cx
                s[1] += cy
                s[2] += 1
            table = {}
            for name, (view, cx, cy) in centres.items():
                sx, sy, n = sums[view]
                table[name] = (cx - sx / n, cy - sy / n)
            with self._lock:
                self._centres[d] = table
        dx, dy = table[path.name]
        return math.hypot(dx, dy)

    def probability(self, path: str) -> float:
        s = self.spec
        if s.mode == StubMode.PERFECT:
            return 1.0
        truth = truth_from_path(path)
        if s.mode == StubMode.POSE_BIASED:
            from .protocols import angular_distance

            delta = angular_distance(truth.view_degrees, s.frontal.get(truth.class_name, 0))
            return _clamp01(s.base_accuracy - s.decay * delta / 45.0)
        return _clamp01(s.base_accuracy - s.decay * self._bbox_offset(Path(path)) / s.shake_scale_px)

    def classify(self, req: OracleRequest) -> OracleResponse:
        truth = truth_from_path(req.image_path)
        p = self.probability(req.image_path)
        key = f"{truth.class_name}/{truth.instance_id}/{Path(req.image_path).name}"
        correct = _uniform(self.spec.seed, key) < p
        label = truth.class_name if correct else f"not-{truth.class_name}"
        return OracleResponse(req.id, label, round(p if correct else 1.0 - p, 6))

    def classify_batch(self, requests: Sequence[OracleRequest]) -> list[OracleResponse]:
        return [self.classify(r) for r in requests]

    def close(self) -> None:
        pass


def serve(oracle: StubOracle, stdin: IO[str], stdout: IO[str]) -> int:
    """Answer line-protocol requests until EOF; used by the stub subprocess command."""
    for line in stdin:
        if not line.strip():
            continue
        try:
            req = parse_request(line)
            resp = oracle.classify(req)
        except (OracleError, ValueError, OSError) as exc:
            print(f"oracle-stub: {exc}", file=sys.stderr)
            return 2
        stdout.write(resp.to_line() + "\n")
        stdout.flush()
    return 0


# --------------------------------------------------------------------------
# subprocess client

_EOF = object()


class SubprocessOracle:
    """Client for an external classifier speaking the line protocol on stdio.

    Up to ``window`` requests are in flight at once. Each response must
    arrive within ``timeout`` seconds of the previous one (or of the first
    send), otherwise :class:`OracleTimeout` names the oldest pending id.
    """

    def __init__(self, command: Sequence[str], *, window: int = 16, timeout: float = 30.0,
                 cwd: Optional[str] = None):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self.timeout = timeout
        self.command = list(command)
        self._proc = subprocess.Popen(
            self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
            text=True, encoding="utf-8", errors="replace", bufsize=1, cwd=cwd,
        )
        self._lines: queue.Queue = queue.Queue()
        self._stderr_tail: list[str] = []
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()
        threading.Thread(target=self._drain_stderr, daemon=True).start()

    def _drain_stderr(self) -> None:
        try:
            for line in self._proc.stderr:
                self._stderr_tail = (self._stderr_tail + [line.rstrip()])[-10:]
        except (OSError, ValueError):
            pass

    def _pump(self) -> None:
        try:
            for line in self._proc.stdout:
                self._lines.put(line)
        except (OSError, ValueError):
            pass
        self._lines.put(_EOF)

    def _send(self, req: OracleRequest) -> None:
        try:
            self._proc.stdin.write(req.to_line() + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError) as exc:
            raise OracleTransportError(f"oracle closed its input before request {req.id}: {exc}",
                                       req.id) from None

    def classify_batch(self, requests: Sequence[OracleRequest]) -> list[OracleResponse]:
        ids = [r.id for r in requests]
        order = {rid: i for i, rid in enumerate(ids)}
        if len(order) != len(ids):
            raise ValueError("request ids must be unique within a batch")
        pending: dict[int, OracleRequest] = {}
        answers: dict[int, OracleResponse] = {}
        todo = list(requests)
        nxt = 0
        while len(answers) < len(requests):
            while nxt < len(todo) and len(pending) < self.window:
                self._send(todo[nxt])
                pending[todo[nxt].id] = todo[nxt]
                nxt += 1
            oldest = min(pending, key=order.__getitem__) if pending else None
            try:
                line = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                raise OracleTimeout(f"no response within {self.timeout}s; request {oldest} pending",
                                    oldest) from None
            if line is _EOF:
                try:
                    code = self._proc.wait(timeout=1.0)
                except subprocess.TimeoutExpired:
                    code = None
                tail = "; ".join(self._stderr_tail[-3:])
                raise OracleTransportError(
                    f"oracle exited (code {code}) with request {oldest} pending"
                    + (f": {tail}" if tail else ""), oldest)
            if not line.strip():
                continue
            resp = parse_response(line)
            if resp.id not in pending:
                why = "duplicate" if resp.id in answers else "unknown"
                raise OracleProtocolError(f"response for {why} id {resp.id}", resp.id)
            del pending[resp.id]
            answers[resp.id] = resp
        return [answers[i] for i in ids]

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        for s in (self._proc.stdout, self._proc.stderr):
            try:
                s.close()
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def classify_batch(requests: Iterable[OracleRequest], endpoint) -> list[OracleResponse]:
    """Answer every request via ``endpoint`` (a stub or a subprocess client), in request order."""
    return endpoint.classify_batch(list(requests))
