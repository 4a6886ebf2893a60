"""Domain types shared by every simulator module.

Plain value types only: requests, images, instances, groups, batches and the
SLO configuration, plus trace validation and JSON-lines trace I/O. All types
are safe to copy between threads; nothing here mutates shared state.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator


class Modality(Enum):
    TEXT_ONLY = "text"
    MULTIMODAL = "multimodal"


class StageRole(Enum):
    ENCODE = "encode"
    PREFILL = "prefill"
    DECODE = "decode"
    IDLE = "idle"


class MmsimError(Exception):
    """Base class for simulator errors."""


class TraceParseError(MmsimError):
    """Malformed trace file; carries the 1-based offending line number."""

    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class InvalidTraceError(MmsimError):
    """A trace violated its invariants; carries the TraceIssue list."""

    def __init__(self, issues):
        super().__init__("; ".join(f"[{i.code}] req={i.request_id}: {i.detail}"
                                   for i in issues[:5]))
        self.issues = issues


@dataclass(frozen=True)
class ImageInput:
    """One image attached to a request.

    content_hash is a 128-bit digest (32 hex chars) of the image identity;
    the cache only needs identity semantics, so traces hash a synthetic
    identity string rather than pixel data.
    """

    content_hash: str
    token_count: int
    pixels: tuple[int, int]  # (width, height)


@dataclass
class Request:
    """One inference job as it appears in a trace.

    output_len is known at admission: the simulator replays traces, so the
    ground-truth generation length stands in for an online length estimate.
    first_token_time / completion_time are filled in by the engine.
    """

    id: int
    arrival_time: float
    modality: Modality
    text_input_len: int
    images: tuple[ImageInput, ...]
    output_len: int
    priority_hint: bool = False
    # Requests sharing (prefix_id, leading prefix_len text tokens) hit the
    # same prefix-cache path; None means no shared prefix.
    prefix_id: int | None = None
    prefix_len: int = 0
    first_token_time: float | None = None
    completion_time: float | None = None

    @property
    def image_token_count(self) -> int:
        return sum(img.token_count for img in self.images)

    @property
    def total_input_len(self) -> int:
        return self.text_input_len + self.image_token_count

    @property
    def is_multimodal(self) -> bool:
        return self.modality is Modality.MULTIMODAL


@dataclass
class ElasticInstance:
    """A simulated GPU that can be reassigned between groups and stages."""

    id: int
    group: int
    stage_role: StageRole = StageRole.IDLE
    kv_capacity: int = 100_000
    kv_used: int = 0
    busy_until: float = 0.0
    resident_requests: set[int] = field(default_factory=set)

    @property
    def kv_free(self) -> int:
        return self.kv_capacity - self.kv_used


@dataclass
class ModalityGroup:
    """A set of instances dedicated to one request class."""

    id: int
    modality: Modality
    instances: set[int] = field(default_factory=set)
    pending_queue: list[int] = field(default_factory=list)
    avg_required: int = 1
    peak_required: int = 1


@dataclass
class StageBatch:
    """Requests executing together on a set of same-stage instances."""

    stage: StageRole
    requests: list[int]
    instances: list[int]


@dataclass(frozen=True)
class SloConfig:
    """Latency targets derived from light-load calibration.

    The per-token targets are 10x the light-load normalized latencies,
    stretched by `scale` (1 = strict, 5 = relaxed).
    """

    light_load_latency_input: float
    light_load_latency_output: float
    scale: float = 1.0

    def __post_init__(self):
        if self.light_load_latency_input <= 0 or self.light_load_latency_output <= 0:
            raise ValueError("light-load latencies must be positive")
        if self.scale < 1.0:
            raise ValueError("slo scale must be >= 1")

    @property
    def slo_input(self) -> float:
        return 10.0 * self.light_load_latency_input * self.scale

    @property
    def slo_output(self) -> float:
        return 10.0 * self.light_load_latency_output * self.scale


@dataclass(frozen=True)
class TraceIssue:
    """One invariant violation found by validate_trace."""

    request_id: int | None
    code: str
    detail: str


def validate_trace(trace: list[Request]) -> list[TraceIssue]:
    """Check every trace invariant; an empty result means the trace is valid.

    Reported codes: EmptyTrace, DuplicateId, NonMonotoneArrivals,
    ModalityMismatch, BadTokenCounts, BadImage, ImageHashConflict,
    BadTimestamps.
    """
    issues: list[TraceIssue] = []
    if not trace:
        return [TraceIssue(None, "EmptyTrace", "trace contains no requests")]

    seen_ids: set[int] = set()
    hash_identity: dict[str, tuple[int, tuple[int, int]]] = {}
    prev_arrival = -math.inf
    for req in trace:
        if req.id in seen_ids:
            issues.append(TraceIssue(req.id, "DuplicateId", "request id reused"))
        seen_ids.add(req.id)

        if req.arrival_time < prev_arrival:
            issues.append(TraceIssue(
                req.id, "NonMonotoneArrivals",
                f"arrival {req.arrival_time} before previous {prev_arrival}"))
        prev_arrival = max(prev_arrival, req.arrival_time)

        if (req.modality is Modality.MULTIMODAL) != bool(req.images):
            issues.append(TraceIssue(
                req.id, "ModalityMismatch",
                "multimodal requests must carry images; text-only must not"))

        if req.text_input_len < 0 or req.output_len < 1 or req.total_input_len < 1:
            issues.append(TraceIssue(
                req.id, "BadTokenCounts",
                f"text={req.text_input_len} output={req.output_len}"))
        if req.prefix_len < 0 or req.prefix_len > req.text_input_len:
            issues.append(TraceIssue(
                req.id, "BadTokenCounts",
                f"prefix_len {req.prefix_len} outside [0, text_input_len]"))

        for img in req.images:
            if img.token_count <= 0:
                issues.append(TraceIssue(req.id, "BadImage", f"token_count {img.token_count}"))
            known = hash_identity.get(img.content_hash)
            if known is None:
                hash_identity[img.content_hash] = (img.token_count, img.pixels)
            elif known != (img.token_count, img.pixels):
                issues.append(TraceIssue(
                    req.id, "ImageHashConflict",
                    f"hash {img.content_hash[:8]} seen with differing token_count/pixels"))

        if req.first_token_time is not None and req.first_token_time < req.arrival_time:
            issues.append(TraceIssue(req.id, "BadTimestamps", "first token before arrival"))
        if (req.completion_time is not None and req.first_token_time is not None
                and req.completion_time < req.first_token_time):
            issues.append(TraceIssue(req.id, "BadTimestamps", "completion before first token"))

    return issues


# --- trace serialization (JSON lines, one request per line) ---

def request_to_dict(req: Request) -> dict:
    doc: dict = {
        "id": req.id,
        "arrival_time": req.arrival_time,
        "modality": req.modality.value,
        "text_input_len": req.text_input_len,
        "images": [
            {"hash": img.content_hash, "token_count": img.token_count,
             "pixels": [img.pixels[0], img.pixels[1]]}
            for img in req.images
        ],
        "output_len": req.output_len,
        "priority_hint": req.priority_hint,
    }
    if req.prefix_id is not None:
        doc["prefix_id"] = req.prefix_id
        doc["prefix_len"] = req.prefix_len
    return doc


def request_from_dict(doc: dict) -> Request:
    images = tuple(
        ImageInput(
            content_hash=str(img["hash"]),
            token_count=int(img["token_count"]),
            pixels=(int(img["pixels"][0]), int(img["pixels"][1])),
        )
        for img in doc.get("images", [])
    )
    return Request(
        id=int(doc["id"]),
        arrival_time=float(doc["arrival_time"]),
        modality=Modality(doc["modality"]),
        text_input_len=int(doc["text_input_len"]),
        images=images,
        output_len=int(doc["output_len"]),
        priority_hint=bool(doc.get("priority_hint", False)),
        prefix_id=(int(doc["prefix_id"]) if doc.get("prefix_id") is not None else None),
        prefix_len=int(doc.get("prefix_len", 0)),
    )


def write_trace(path: str, trace: Iterable[Request]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for req in trace:
            fh.write(json.dumps(request_to_dict(req), sort_keys=True))
            fh.write("\n")


def iter_trace_lines(path: str) -> Iterator[Request]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(lineno, f"invalid JSON ({exc.msg})") from exc
            try:
                yield request_from_dict(doc)
            except (KeyError, ValueError, TypeError, IndexError) as exc:
                raise TraceParseError(lineno, f"bad request record ({exc})") from exc


def read_trace(path: str) -> list[Request]:
    return list(iter_trace_lines(path))
