"""Runs candidates behind the newline-delimited wire protocol and records their traces.

One session owns one child process, one stdout reader thread and one stderr
reader thread. Candidates declare their side effects as ``effect`` frames;
the harness attributes each to the invocation named by its ``seq`` and marks
effects that arrive after that invocation's outcome as ``post_response``.
"""
from __future__ import annotations

import json
import logging
import subprocess
import threading
import time
from collections import deque
from pathlib import Path
from queue import Empty, Queue

from pdd.config import SYNTHETIC_EPOCH, HarnessPolicy
from pdd.domain.errors import (
    CandidateUnresponsive,
    FramingError,
    HandshakeTimeout,
    LaunchFailure,
)
from pdd.domain.models import (
    CandidateRef,
    Document,
    EffectEvent,
    EffectTrace,
    ErrorOutcome,
    InvocationRecord,
    Outcome,
)
from pdd.domain.ports import Clock, SessionFactory
from pdd.infrastructure.clock import FixedClock, SystemClock
from pdd.infrastructure.guarantee_compiler import TIMEOUT_ERROR_KIND
from pdd.infrastructure.wire_models import (
    EffectFrame,
    ErrorFrame,
    HelloFrame,
    MetricsFrame,
    ResponseFrame,
    hello_frame,
    parse_frame,
    request_frame,
)

logger = logging.getLogger(__name__)

_EOF = None


def _peak_memory_mb(pid: int) -> float | None:
    """High-water resident set size from procfs; None where unavailable."""
    try:
        for line in Path(f"/proc/{pid}/status").read_text().splitlines():
            if line.startswith("VmHWM:"):
                return round(int(line.split()[1]) / 1024, 3)
    except (OSError, ValueError, IndexError):
        return None
    return None


class _PendingInvocation:
    def __init__(self, seq: int, request: Document, at) -> None:
        self.seq = seq
        self.request = request
        self.at = at
        self.effects: list[EffectEvent] = []
        self.declared_duration_ms: float | None = None
        self.declared_memory_mb: float | None = None


class SubprocessSession:
    """A live candidate process; implements the ``CandidateSession`` port."""

    def __init__(self, candidate: CandidateRef, policy: HarnessPolicy, clock: Clock) -> None:
        self._candidate = candidate
        self._policy = policy
        self._clock = clock
        self._records: list[InvocationRecord] = []
        self._late: dict[int, list[EffectEvent]] = {}
        self._abandoned: set[int] = set()
        self._seq = 0
        self._stderr: deque[str] = deque(maxlen=50)
        self._frames: Queue[str | None] = Queue()
        try:
            self._proc = subprocess.Popen(
                list(candidate.launch_command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise LaunchFailure(f"Cannot launch {candidate.artifact_id}: {exc}") from exc
        self.started_at = clock.now()
        threading.Thread(target=self._read_stdout, daemon=True).start()
        threading.Thread(target=self._read_stderr, daemon=True).start()
        self._handshake()

    # ── Reader threads ───────────────────────────────────────────────

    def _read_stdout(self) -> None:
        try:
            for line in self._proc.stdout:
                if line.strip():
                    self._frames.put(line.rstrip("\n"))
        finally:
            self._frames.put(_EOF)

    def _read_stderr(self) -> None:
        for line in self._proc.stderr:
            self._stderr.append(line.rstrip())

    def _stderr_summary(self) -> str:
        return " | ".join(self._stderr) or "<no stderr>"

    # ── Wire ─────────────────────────────────────────────────────────

    def _send(self, frame: Document) -> None:
        try:
            self._proc.stdin.write(json.dumps(frame, separators=(",", ":")) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError) as exc:
            raise CandidateUnresponsive(
                f"{self._candidate.artifact_id} closed its input ({self._stderr_summary()})"
            ) from exc

    def _next_frame(self, timeout: float):
        line = self._frames.get(timeout=timeout)
        if line is _EOF:
            return _EOF
        try:
            return parse_frame(line)
        except FramingError:
            logger.debug("Rejected frame from %s: %r", self._candidate.artifact_id, line)
            self.close()
            raise

    def _handshake(self) -> None:
        try:
            self._send(hello_frame())
            frame = self._next_frame(self._policy.handshake_timeout_s)
        except Empty:
            self._kill()
            raise HandshakeTimeout(
                f"{self._candidate.artifact_id} sent no hello within {self._policy.handshake_timeout_s}s"
            ) from None
        except CandidateUnresponsive:
            frame = _EOF
        if frame is _EOF:
            status = self._proc.wait(timeout=5)
            raise LaunchFailure(
                f"{self._candidate.artifact_id} exited with status {status} before the handshake "
                f"({self._stderr_summary()})",
                exit_status=status,
            )
        if not isinstance(frame, HelloFrame):
            self.close()
            raise FramingError(f"Expected hello, got '{frame.type}' frame")
        logger.debug("Handshake complete with %s", self._candidate.artifact_id)

    # ── Invocation ───────────────────────────────────────────────────

    def _route_stray(self, frame, current: int) -> None:
        """Handle a frame that names an earlier invocation."""
        if frame.seq < 1 or frame.seq > current:
            self.close()
            raise FramingError(f"Frame names unknown invocation {frame.seq}")
        if isinstance(frame, EffectFrame):
            self._late.setdefault(frame.seq, []).append(
                EffectEvent(frame.kind, frame.target, post_response=True, mutating=frame.mutating)
            )
        elif frame.seq not in self._abandoned:
            self.close()
            raise FramingError(f"Duplicate outcome for invocation {frame.seq}")

    def invoke(self, request: Document, deadline_ms: int | None = None) -> InvocationRecord:
        deadline_ms = deadline_ms or self._policy.deadline_ms
        self._seq += 1
        pending = _PendingInvocation(self._seq, request, self._clock.now())
        self._send(request_frame(pending.seq, request))
        started = time.monotonic()
        outcome: Outcome | None = None

        while outcome is None:
            remaining = deadline_ms / 1000 - (time.monotonic() - started)
            try:
                if remaining <= 0:
                    raise Empty
                frame = self._next_frame(remaining)
            except Empty:
                logger.warning(
                    "Invocation %d of %s exceeded %d ms", pending.seq, self._candidate.artifact_id, deadline_ms
                )
                self._abandoned.add(pending.seq)
                return self._finish(
                    pending,
                    Outcome(error=ErrorOutcome(TIMEOUT_ERROR_KIND, f"no outcome within {deadline_ms} ms")),
                    measured_ms=deadline_ms,
                    timed_out=True,
                )
            if frame is _EOF:
                raise CandidateUnresponsive(
                    f"{self._candidate.artifact_id} exited during invocation {pending.seq} ({self._stderr_summary()})"
                )
            if isinstance(frame, HelloFrame):
                self.close()
                raise FramingError("Unexpected hello after handshake")
            if frame.seq != pending.seq:
                self._route_stray(frame, pending.seq)
                continue
            if isinstance(frame, EffectFrame):
                pending.effects.append(EffectEvent(frame.kind, frame.target, mutating=frame.mutating))
            elif isinstance(frame, MetricsFrame):
                if frame.declared_duration_ms is not None:
                    pending.declared_duration_ms = frame.declared_duration_ms
                if frame.peak_memory_mb is not None:
                    pending.declared_memory_mb = frame.peak_memory_mb
            elif isinstance(frame, ResponseFrame):
                outcome = Outcome(response=frame.body)
            elif isinstance(frame, ErrorFrame):
                outcome = Outcome(error=ErrorOutcome(frame.kind, frame.message))

        return self._finish(pending, outcome, measured_ms=(time.monotonic() - started) * 1000)

    def _finish(
        self, pending: _PendingInvocation, outcome: Outcome, measured_ms: float, timed_out: bool = False
    ) -> InvocationRecord:
        declared = pending.declared_duration_ms
        declared_memory = pending.declared_memory_mb or 0
        if timed_out:
            latency = measured_ms
        elif self._policy.synthetic:
            latency = declared if declared is not None else 0
        else:
            latency = max(round(measured_ms, 3), declared or 0)
        if self._policy.synthetic:
            memory = declared_memory
        else:
            memory = max(declared_memory, _peak_memory_mb(self._proc.pid) or 0)
        record = InvocationRecord(
            seq=pending.seq,
            request=pending.request,
            outcome=outcome,
            effects=tuple(pending.effects),
            latency_ms=latency,
            peak_memory_mb=memory,
            at=pending.at,
            timed_out=timed_out,
        )
        self._records.append(record)
        if isinstance(self._clock, FixedClock):
            self._clock.advance(latency / 1000)
        return record

    # ── Trace ────────────────────────────────────────────────────────

    def _drain_grace_window(self) -> None:
        until = time.monotonic() + self._policy.grace_ms / 1000
        while (remaining := until - time.monotonic()) > 0:
            try:
                frame = self._next_frame(remaining)
            except Empty:
                return
            if frame is _EOF:
                return
            if isinstance(frame, HelloFrame):
                raise FramingError("Unexpected hello after handshake")
            self._route_stray(frame, self._seq)

    def collect_trace(self) -> EffectTrace:
        if self._records and self._proc.poll() is None:
            self._drain_grace_window()
        invocations = tuple(
            InvocationRecord(
                seq=r.seq,
                request=r.request,
                outcome=r.outcome,
                effects=r.effects + tuple(self._late.get(r.seq, ())),
                latency_ms=r.latency_ms,
                peak_memory_mb=r.peak_memory_mb,
                at=r.at,
                timed_out=r.timed_out,
            )
            for r in self._records
        )
        return EffectTrace(invocations=invocations, started_at=self.started_at, ended_at=self._clock.now())

    def _kill(self) -> None:
        if self._proc.poll() is None:
            self._proc.kill()
            self._proc.wait()

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=1)
            except subprocess.TimeoutExpired:
                self._proc.terminate()
                try:
                    self._proc.wait(timeout=3)
                except subprocess.TimeoutExpired:
                    self._proc.kill()
                    self._proc.wait()

    def __enter__(self) -> SubprocessSession:
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def spawn(candidate: CandidateRef, policy: HarnessPolicy, clock: Clock | None = None) -> SubprocessSession:
    """Start *candidate* and complete the hello exchange.

    Under the synthetic clock each session gets its own virtual timeline so
    traces do not depend on wall time or on how sessions are scheduled.
    """
    if clock is None:
        clock = FixedClock(SYNTHETIC_EPOCH) if policy.synthetic else SystemClock()
    return SubprocessSession(candidate, policy, clock)


def session_factory(candidate: CandidateRef, policy: HarnessPolicy) -> SessionFactory:
    return lambda: spawn(candidate, policy)
