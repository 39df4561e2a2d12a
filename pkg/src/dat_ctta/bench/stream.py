"""Multi-round domain-shift streams.

A stream visits its domains in order, ``frames_per_domain`` frames each, and
repeats the whole sequence ``rounds`` times. Every frame gets a fresh scene
seed, so no sample is ever seen twice, and the corruption draw is keyed by
(master seed, stream id, frame) so re-iterating a manifest reproduces it
byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from ..errors import ConfigError
from ..seeding import STREAM_HELDOUT, STREAM_PRETRAIN, STREAM_TARGET, derive_rng
from .corrupt import DomainSpec, corrupt
from .scenes import SceneConfig, gen_scene

DEFAULT_DOMAINS = ("fog", "night", "rain", "snow")
DEFAULT_SEVERITIES = (0.7, 0.7, 0.5, 0.5)


def scene_seed(master: int, stream: int, frame: int) -> int:
    """Unique per (master, stream, frame) for frame < 2**32 and stream < 256."""
    return (int(master) << 40) + (int(stream) << 32) + int(frame)


@dataclass(frozen=True)
class StreamConfig:
    domains: tuple[str, ...] = DEFAULT_DOMAINS
    severities: tuple[float, ...] = DEFAULT_SEVERITIES
    frames_per_domain: int = 120
    rounds: int = 3
    # Frames over which severity ramps up from 0 after each boundary (0 = hard switch).
    ramp_frames: int = 0

    def validate(self) -> "StreamConfig":
        if not self.domains:
            raise ConfigError("stream.domains must not be empty")
        if len(self.domains) != len(self.severities):
            raise ConfigError(f"stream.severities needs one value per domain ({len(self.domains)}), "
                              f"got {len(self.severities)}")
        for kind, sev in zip(self.domains, self.severities):
            DomainSpec(kind, sev).validate()
        if self.frames_per_domain < 1 or self.rounds < 1:
            raise ConfigError("stream.frames_per_domain and stream.rounds must be >= 1")
        if self.ramp_frames < 0:
            raise ConfigError("stream.ramp_frames must be >= 0")
        return self


@dataclass(frozen=True)
class FrameRecord:
    frame: int
    round: int
    domain_index: int
    domain: str
    severity: float
    boundary: bool
    scene_seed: int


@dataclass
class Sample:
    image: np.ndarray
    label: np.ndarray | None
    domain: str
    round: int
    frame: int
    boundary: bool
    severity: float = 0.0


@dataclass
class StreamManifest:
    records: list[FrameRecord]
    scene: SceneConfig
    seed: int
    stream_id: int = STREAM_TARGET
    domains: tuple[str, ...] = field(default_factory=tuple)
    rounds: int = 1

    def __len__(self) -> int:
        return len(self.records)

    def digest(self) -> str:
        payload = {
            "scene": asdict(self.scene),
            "seed": self.seed,
            "stream_id": self.stream_id,
            "records": [asdict(r) for r in self.records],
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def sample(self, rec: FrameRecord) -> Sample:
        image, label = gen_scene(rec.scene_seed, self.scene)
        rng = derive_rng(self.seed, self.stream_id, rec.frame, "corrupt")
        image = corrupt(image, DomainSpec(rec.domain, rec.severity), rng)
        return Sample(image, label, rec.domain, rec.round, rec.frame, rec.boundary, rec.severity)

    def __iter__(self) -> Iterator[Sample]:
        for rec in self.records:
            yield self.sample(rec)


def make_stream(cfg: StreamConfig, scene: SceneConfig, seed: int = 0) -> StreamManifest:
    cfg.validate()
    scene.validate()
    records = []
    frame = 0
    for r in range(cfg.rounds):
        for d, (kind, sev) in enumerate(zip(cfg.domains, cfg.severities)):
            for f in range(cfg.frames_per_domain):
                s = sev
                if cfg.ramp_frames:
                    s = sev * min(1.0, (f + 1) / cfg.ramp_frames)
                records.append(FrameRecord(frame, r, d, kind, float(s), f == 0,
                                           scene_seed(seed, STREAM_TARGET, frame)))
                frame += 1
    return StreamManifest(records, scene, seed, STREAM_TARGET, tuple(cfg.domains), cfg.rounds)


def clean_stream(scene: SceneConfig, count: int, seed: int = 0, heldout: bool = False) -> StreamManifest:
    """Uncorrupted labelled scenes, for source pretraining or held-out evaluation."""
    scene.validate()
    stream_id = STREAM_HELDOUT if heldout else STREAM_PRETRAIN
    records = [FrameRecord(i, 0, 0, "clear", 0.0, i == 0, scene_seed(seed, stream_id, i)) for i in range(count)]
    return StreamManifest(records, scene, seed, stream_id, ("clear",), 1)


