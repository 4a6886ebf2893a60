"""Trace generation and ingestion.

Poisson arrivals over a dataset statistic profile, with optional burst
windows that multiply the arrival rate of one modality. Everything is
deterministic per seed; the same (profile, qps, seed) always yields the
same trace.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, fields

import numpy as np

from .core import (ImageInput, InvalidTraceError, Modality, Request,
                   read_trace, validate_trace)


@dataclass(frozen=True)
class BurstSpec:
    """A traffic spike: rate x multiplier for one modality inside a window."""

    start_time: float
    duration: float
    rate_multiplier: float
    modality_target: str = "multimodal"  # "multimodal" | "text"

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("burst duration must be positive")
        if self.rate_multiplier < 1.0:
            raise ValueError("burst multiplier must be >= 1")
        if self.modality_target not in ("multimodal", "text"):
            raise ValueError(f"unknown burst target {self.modality_target!r}")

    @classmethod
    def parse(cls, text: str) -> "BurstSpec":
        """Parse 'start:duration:multiplier:modality'."""
        parts = text.split(":")
        if len(parts) != 4:
            raise ValueError(f"burst spec {text!r} is not start:dur:mult:modality")
        return cls(float(parts[0]), float(parts[1]), float(parts[2]), parts[3])


@dataclass
class DatasetProfile:
    """Statistic profile a synthetic trace is sampled from.

    Text and output lengths are log-normal; image token sizes and per-request
    image counts are weighted choices. duplicate_image_rate is the chance an
    image reuses an already-seen one (hash identity); duplicate_prefix_rate
    is the chance a request starts with one of the shared system prompts.
    """

    name: str
    text_len_mu: float
    text_len_sigma: float
    output_len_mu: float
    output_len_sigma: float
    multimodal_fraction: float
    images_per_request: dict[int, float]
    image_token_choices: dict[int, float]
    image_pixels: dict[int, tuple[int, int]]
    duplicate_image_rate: float
    duplicate_prefix_rate: float
    prefix_len_tokens: int = 64
    prefix_pool_size: int = 4
    text_redirect_rate: float = 0.0
    max_text_len: int = 4096
    max_output_len: int = 2048
    # duplicates resample from this many most-recent images (conversation
    # turns tend to resend what was just uploaded)
    duplicate_window: int = 16

    def __post_init__(self):
        for name in ("multimodal_fraction", "duplicate_image_rate",
                     "duplicate_prefix_rate", "text_redirect_rate"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {val}")
        if self.text_len_sigma <= 0 or self.output_len_sigma <= 0:
            raise ValueError("length sigmas must be positive")

    @classmethod
    def from_file(cls, path: str) -> "DatasetProfile":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetProfile":
        known = {f.name for f in fields(cls)}
        unknown = doc.keys() - known
        if unknown:
            raise ValueError(f"dataset profile has unknown fields: {sorted(unknown)}")
        doc = dict(doc)
        doc["images_per_request"] = {int(k): float(v)
                                     for k, v in doc["images_per_request"].items()}
        doc["image_token_choices"] = {int(k): float(v)
                                      for k, v in doc["image_token_choices"].items()}
        doc["image_pixels"] = {int(k): (int(v[0]), int(v[1]))
                               for k, v in doc["image_pixels"].items()}
        return cls(**doc)


def _weighted_choice(rng: np.random.Generator, table: dict[int, float]) -> int:
    keys = sorted(table)
    weights = np.array([table[k] for k in keys], dtype=float)
    weights /= weights.sum()
    return int(rng.choice(keys, p=weights))


def _lognormal_len(rng: np.random.Generator, mu: float, sigma: float,
                   cap: int) -> int:
    return int(min(cap, max(1, round(float(rng.lognormal(mu, sigma))))))


def _arrival_times(rng: np.random.Generator, base_rate: float, horizon: float,
                   bursts: list[BurstSpec]) -> list[float]:
    """Piecewise-constant-rate Poisson arrivals on [0, horizon)."""
    if base_rate <= 0:
        return []
    boundaries = sorted({0.0, horizon}
                        | {b.start_time for b in bursts}
                        | {b.start_time + b.duration for b in bursts})
    boundaries = [b for b in boundaries if 0.0 <= b <= horizon]

    def rate_at(t: float) -> float:
        rate = base_rate
        for b in bursts:
            if b.start_time <= t < b.start_time + b.duration:
                rate *= b.rate_multiplier
        return rate

    times: list[float] = []
    t = 0.0
    seg = 0
    while t < horizon:
        while seg + 1 < len(boundaries) and boundaries[seg + 1] <= t:
            seg += 1
        seg_end = boundaries[seg + 1] if seg + 1 < len(boundaries) else horizon
        rate = rate_at(t)
        gap = float(rng.exponential(1.0 / rate))
        if t + gap >= seg_end:
            t = seg_end  # memoryless restart at the boundary
            if t >= horizon:
                break
            continue
        t += gap
        times.append(t)
    return times


def generate(profile: DatasetProfile, qps: float, horizon_seconds: float,
             seed: int, bursts: list[BurstSpec] | None = None) -> list[Request]:
    """Sample a trace: Poisson arrivals, fields drawn from the profile."""
    if qps <= 0:
        raise ValueError("qps must be positive")
    bursts = list(bursts or [])
    rng = np.random.default_rng(seed)

    mm_rate = qps * profile.multimodal_fraction
    text_rate = qps * (1.0 - profile.multimodal_fraction)
    mm_bursts = [b for b in bursts if b.modality_target == "multimodal"]
    text_bursts = [b for b in bursts if b.modality_target == "text"]
    mm_times = _arrival_times(rng, mm_rate, horizon_seconds, mm_bursts)
    text_times = _arrival_times(rng, text_rate, horizon_seconds, text_bursts)

    tagged = sorted([(t, Modality.MULTIMODAL) for t in mm_times]
                    + [(t, Modality.TEXT_ONLY) for t in text_times])

    seen_images: list[ImageInput] = []
    image_counter = 0
    trace: list[Request] = []
    for rid, (arrival, modality) in enumerate(tagged):
        text_len = _lognormal_len(rng, profile.text_len_mu, profile.text_len_sigma,
                                  profile.max_text_len)
        output_len = _lognormal_len(rng, profile.output_len_mu,
                                    profile.output_len_sigma, profile.max_output_len)
        images: list[ImageInput] = []
        if modality is Modality.MULTIMODAL:
            n_images = _weighted_choice(rng, profile.images_per_request)
            for _ in range(max(1, n_images)):
                if seen_images and rng.random() < profile.duplicate_image_rate:
                    window = seen_images[-profile.duplicate_window:]
                    images.append(window[int(rng.integers(len(window)))])
                else:
                    tokens = _weighted_choice(rng, profile.image_token_choices)
                    digest = hashlib.md5(
                        f"{profile.name}-img-{image_counter}".encode()).hexdigest()
                    image_counter += 1
                    pixels = profile.image_pixels.get(
                        tokens, (int(math.sqrt(tokens)) * 14,) * 2)
                    img = ImageInput(digest, tokens, pixels)
                    seen_images.append(img)
                    images.append(img)
        prefix_id = None
        prefix_len = 0
        if rng.random() < profile.duplicate_prefix_rate:
            prefix_id = int(rng.integers(profile.prefix_pool_size))
            prefix_len = min(text_len, profile.prefix_len_tokens)
        priority = (modality is Modality.TEXT_ONLY
                    and rng.random() < profile.text_redirect_rate)
        trace.append(Request(
            id=rid, arrival_time=arrival, modality=modality,
            text_input_len=text_len, images=tuple(images), output_len=output_len,
            priority_hint=priority, prefix_id=prefix_id, prefix_len=prefix_len))
    return trace


def load_trace(path: str) -> list[Request]:
    """Read a JSON-lines trace and validate it; raises on any violation."""
    trace = read_trace(path)
    issues = validate_trace(trace)
    if issues:
        raise InvalidTraceError(issues)
    return trace
