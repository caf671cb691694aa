"""CMP1/CMH1 framing for out-of-process predictors.

Parent to child, one request per tile::

    "CMP1" | width u32 | height u32 | bands u32 | f32 payload (pixel-major, LE)

Child to parent::

    "CMH1" | width u32 | height u32 | classes u32 | u8 payload

The child exits 0 when its stdin reaches EOF.
"""

from __future__ import annotations

import os
import queue
import selectors
import struct
import subprocess
import sys
import threading
import time
from typing import BinaryIO, List, Optional, Sequence

import numpy as np

from .errors import PredictorError
from .raster import HeatMap, RasterF32

REQUEST_MAGIC = b"CMP1"
RESPONSE_MAGIC = b"CMH1"
_FRAME = struct.Struct("<4sIII")
DEFAULT_TIMEOUT = 300.0


def encode_request(tile: RasterF32) -> bytes:
    return _FRAME.pack(REQUEST_MAGIC, tile.width, tile.height, tile.bands) + tile.data.astype("<f4").tobytes()


def encode_response(h: HeatMap) -> bytes:
    return _FRAME.pack(RESPONSE_MAGIC, h.width, h.height, h.classes) + h.data.tobytes()


def _parse_header(head: bytes, magic: bytes):
    tag, w, h, n = _FRAME.unpack(head)
    if tag != magic:
        raise PredictorError(f"expected {magic!r} frame, got {tag!r}")
    if w == 0 or h == 0 or n == 0:
        raise PredictorError(f"empty frame dimensions {w}x{h}x{n}")
    return w, h, n


def _read_exact(stream: BinaryIO, n: int) -> Optional[bytes]:
    chunks, got = [], 0
    while got < n:
        part = stream.read(n - got)
        if not part:
            return None if got == 0 else b"".join(chunks)
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


def read_request(stream: BinaryIO) -> Optional[RasterF32]:
    """Next request frame, or None on clean EOF."""
    head = _read_exact(stream, _FRAME.size)
    if head is None:
        return None
    if len(head) < _FRAME.size:
        raise PredictorError("truncated CMP1 header")
    w, h, b = _parse_header(head, REQUEST_MAGIC)
    body = _read_exact(stream, w * h * b * 4)
    if body is None or len(body) != w * h * b * 4:
        raise PredictorError("truncated CMP1 payload")
    return RasterF32(np.frombuffer(body, "<f4").reshape(h, w, b).astype(np.float32))


def read_response(stream: BinaryIO) -> HeatMap:
    head = _read_exact(stream, _FRAME.size)
    if head is None or len(head) < _FRAME.size:
        raise PredictorError("predictor closed its output")
    w, h, c = _parse_header(head, RESPONSE_MAGIC)
    body = _read_exact(stream, w * h * c)
    if body is None or len(body) != w * h * c:
        raise PredictorError("truncated CMH1 payload")
    return HeatMap(np.frombuffer(body, np.uint8).reshape(h, w, c))


def serve(predictor, stdin: Optional[BinaryIO] = None, stdout: Optional[BinaryIO] = None) -> int:
    """Child-side loop: answer CMP1 requests until EOF."""
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    while True:
        tile = read_request(stdin)
        if tile is None:
            return 0
        stdout.write(encode_response(predictor(tile)))
        stdout.flush()


class _Child:
    def __init__(self, cmd: Sequence[str], env=None):
        self.proc = subprocess.Popen(
            list(cmd), stdin=subprocess.PIPE, stdout=subprocess.PIPE, env=env
        )
        self.buf = bytearray()

    def _read(self, n: int, deadline: float) -> bytes:
        fd = self.proc.stdout.fileno()
        with selectors.DefaultSelector() as sel:
            sel.register(fd, selectors.EVENT_READ)
            while len(self.buf) < n:
                left = deadline - time.monotonic()
                if left <= 0 or not sel.select(left):
                    raise TimeoutError
                chunk = os.read(fd, max(n - len(self.buf), 1 << 16))
                if not chunk:
                    raise PredictorError(f"predictor exited with code {self.proc.poll()}")
                self.buf.extend(chunk)
        out = bytes(self.buf[:n])
        del self.buf[:n]
        return out

    def request(self, tile: RasterF32, timeout: float) -> HeatMap:
        deadline = time.monotonic() + timeout
        try:
            self.proc.stdin.write(encode_request(tile))
            self.proc.stdin.flush()
        except BrokenPipeError as exc:
            raise PredictorError(f"predictor exited with code {self.proc.poll()}") from exc
        w, h, c = _parse_header(self._read(_FRAME.size, deadline), RESPONSE_MAGIC)
        body = self._read(w * h * c, deadline)
        return HeatMap(np.frombuffer(body, np.uint8).reshape(h, w, c))

    def close(self, timeout: float) -> int:
        try:
            self.proc.stdin.close()
        except BrokenPipeError:
            pass
        try:
            return self.proc.wait(timeout)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            return self.proc.wait()


class SubprocessPredictor:
    """Predictor backed by a pool of child processes speaking CMP1.

    Children are started lazily, one per concurrent caller up to ``workers``.
    A child that times out is killed and replaced.
    """

    def __init__(self, cmd: Sequence[str], timeout: float = DEFAULT_TIMEOUT,
                 workers: int = 1, env=None):
        self.cmd = list(cmd)
        self.timeout = timeout
        self.workers = max(1, workers)
        self.env = env
        self._idle: "queue.Queue[_Child]" = queue.Queue()
        self._children: List[_Child] = []
        self._lock = threading.Lock()

    def _acquire(self) -> _Child:
        try:
            return self._idle.get_nowait()
        except queue.Empty:
            pass
        with self._lock:
            if len(self._children) < self.workers:
                child = _Child(self.cmd, self.env)
                self._children.append(child)
                return child
        return self._idle.get()

    def __call__(self, tile: RasterF32) -> HeatMap:
        child = self._acquire()
        try:
            out = child.request(tile, self.timeout)
        except TimeoutError:
            child.proc.kill()
            child.proc.wait()
            with self._lock:
                self._children.remove(child)
            raise PredictorError(f"predictor timed out after {self.timeout} s") from None
        except PredictorError:
            if child.proc.poll() is None:
                child.proc.kill()
                child.proc.wait()
            with self._lock:
                self._children.remove(child)
            raise
        self._idle.put(child)
        return out

    def close(self) -> List[int]:
        with self._lock:
            codes = [c.close(self.timeout) for c in self._children]
            self._children.clear()
        while not self._idle.empty():
            self._idle.get_nowait()
        return codes

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
