"""Pydantic models for candidate wire frames and candidate manifests."""
from __future__ import annotations

from typing import Annotated, Any, Literal

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError

from pdd.domain.errors import FramingError

WIRE_VERSION = 1

EffectKind = Literal["network_call", "fs_read", "fs_write", "dependency_use", "secret_access", "background_task"]


class _Frame(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class HelloFrame(_Frame):
    model_config = ConfigDict(extra="allow", frozen=True)

    type: Literal["hello"]
    wire_version: int = WIRE_VERSION


class ResponseFrame(_Frame):
    type: Literal["response"]
    seq: int
    body: dict[str, Any]


class ErrorFrame(_Frame):
    type: Literal["error"]
    seq: int
    kind: str = Field(min_length=1)
    message: str = ""


class EffectFrame(_Frame):
    type: Literal["effect"]
    seq: int
    kind: EffectKind
    target: str = Field(min_length=1)
    mutating: bool = False


class MetricsFrame(_Frame):
    type: Literal["metrics"]
    seq: int
    declared_duration_ms: float | None = Field(default=None, ge=0)
    peak_memory_mb: float | None = Field(default=None, ge=0)


CandidateFrame = Annotated[
    HelloFrame | ResponseFrame | ErrorFrame | EffectFrame | MetricsFrame,
    Field(discriminator="type"),
]

_FRAME_ADAPTER: TypeAdapter[CandidateFrame] = TypeAdapter(CandidateFrame)


def parse_frame(line: str) -> HelloFrame | ResponseFrame | ErrorFrame | EffectFrame | MetricsFrame:
    try:
        return _FRAME_ADAPTER.validate_json(line)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "frame"
        raise FramingError(f"Malformed wire frame ({where}: {first['msg']})", line=line) from exc


def hello_frame() -> dict[str, Any]:
    return {"type": "hello", "wire_version": WIRE_VERSION}


def request_frame(seq: int, body: dict[str, Any]) -> dict[str, Any]:
    return {"type": "request", "seq": seq, "body": body}


class DeclaredPackageModel(BaseModel):
    name: str = Field(min_length=1)
    version: str = ""
    path: str | None = None


class CandidateManifest(BaseModel):
    """The ``candidate.json`` file describing one implementation to admit."""

    model_config = ConfigDict(extra="forbid")

    artifact_id: str = Field(min_length=1)
    launch_command: list[str] = Field(min_length=1)
    language: str = ""
    runtime: str = ""
    artifact: str | None = None
    files: list[str] = []
    dependencies: list[DeclaredPackageModel] = []
