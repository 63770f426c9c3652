"""Run configuration: one JSON file drives every command.

A run is reproducible from (config, seed) alone; commands write their
artifacts under ``out_dir``.  Unknown keys are rejected so typos fail fast.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .detector import DetectorConfig
from .synth import SynthSpec
from .training import LossWeights

__all__ = ["PipelineConfig", "TrainConfig", "EvalConfig", "RunConfig"]


def _from_known(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class PipelineConfig:
    pad: int = 30
    max_gap: int = 30
    min_len: int = 100
    max_len: int = 1000
    overlap: int = 30
    block: int = 120
    val_fraction: float = 0.2
    subsample_n: int = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.003
    momentum: float = 0.9
    epochs: int = 1
    chunk_len: int = 8
    init_checkpoint: str | None = None
    freeze_ported: bool = False
    loss: LossWeights = field(default_factory=LossWeights)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = _from_known(LossWeights, d["loss"])
        return _from_known(cls, d)


@dataclass(frozen=True)
class EvalConfig:
    # no default confidence threshold on purpose: it must be an explicit,
    # recorded choice of the run
    conf_threshold: float
    nms_iou: float = 0.45
    match_iou: float = 0.5
    top_k: tuple[int, ...] = (5, 24)
    playback_stub: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        d = dict(d)
        if "conf_threshold" not in d:
            raise ValueError("eval.conf_threshold is required (no default)")
        if "top_k" in d:
            d["top_k"] = tuple(d["top_k"])
        return _from_known(cls, d)


@dataclass(frozen=True)
class RunConfig:
    annotations: str
    frames_dir: str
    out_dir: str
    detector: DetectorConfig
    eval: EvalConfig
    seed: int = 0
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    video_lengths: dict[str, int] | None = None  # fallback when frames are absent

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        for key in ("annotations", "frames_dir", "out_dir", "detector", "eval"):
            if key not in d:
                raise ValueError(f"config missing required key {key!r}")
        d["detector"] = DetectorConfig.from_dict(d["detector"])
        d["eval"] = EvalConfig.from_dict(d["eval"])
        if "pipeline" in d:
            d["pipeline"] = _from_known(PipelineConfig, d["pipeline"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if "synth" in d:
            synth = dict(d["synth"])
            if "class_weights" in synth:
                synth["class_weights"] = tuple(synth["class_weights"])
            d["synth"] = _from_known(SynthSpec, synth)
        return _from_known(cls, d)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detector"] = self.detector.to_dict()
        return d

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def out_path(self, name: str) -> Path:
        out = Path(self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return out / name
