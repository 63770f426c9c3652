"""On-disk formats: annotations, clip manifests, anchor files, frame archives.

Annotation file, one record per line, whitespace separated:

    video_id frame_index class_id cx cy w h

Coordinates are normalized decimals; frames without labels are simply absent.
Clip manifests are JSON lists of {video_id, start_frame, end_frame} records;
labels always come from the annotation file.  Anchor files are nine "w h"
lines sorted by area.  Frames are stored per video as ``<video_id>.npy``
arrays of shape (T, H, W), float32 on disk and float64 in memory.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .anchors import BoxShape
from .boxes import BoxLabel
from .clips import ClipRecord, FrameAnnotation

__all__ = [
    "FormatError",
    "read_annotations",
    "write_annotations",
    "annotations_to_frames",
    "write_manifest",
    "read_manifest",
    "write_anchor_file",
    "read_anchor_file",
    "save_video_frames",
    "load_video_frames",
    "write_json",
]


class FormatError(ValueError):
    """A malformed input file; the message carries the offending line."""


def read_annotations(path) -> dict[str, list[tuple[int, BoxLabel]]]:
    """Parse the annotation file into per-video (frame_index, label) lists."""
    videos: dict[str, list[tuple[int, BoxLabel]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 7:
                raise FormatError(
                    f"{path}:{lineno}: expected 7 fields "
                    f"(video frame class cx cy w h), got {len(parts)}"
                )
            try:
                video = parts[0]
                frame = int(parts[1])
                cls = int(parts[2])
                cx, cy, w, h = map(float, parts[3:7])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if frame < 0:
                raise FormatError(f"{path}:{lineno}: negative frame index {frame}")
            videos.setdefault(video, []).append((frame, BoxLabel(cls, cx, cy, w, h)))
    for recs in videos.values():
        recs.sort(key=lambda r: r[0])
    return videos


def write_annotations(path, videos: dict[str, list[tuple[int, BoxLabel]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for video in sorted(videos):
            for frame, b in sorted(videos[video], key=lambda r: r[0]):
                fh.write(f"{video} {frame} {b.class_id} "
                         f"{b.cx!r} {b.cy!r} {b.w!r} {b.h!r}\n")


def annotations_to_frames(records: list[tuple[int, BoxLabel]]) -> list[FrameAnnotation]:
    """Group one video's (frame, label) records into FrameAnnotations."""
    by_frame: dict[int, list[BoxLabel]] = {}
    for frame, label in records:
        by_frame.setdefault(frame, []).append(label)
    return [FrameAnnotation(f, tuple(by_frame[f])) for f in sorted(by_frame)]


def write_manifest(path, clips: list[ClipRecord]) -> None:
    data = [
        {"video_id": c.video_id, "start_frame": c.start_frame,
         "end_frame": c.end_frame, "stride": c.stride}
        for c in clips
    ]
    write_json(path, data)


def read_manifest(path, annotations: dict[str, list[tuple[int, BoxLabel]]]
                  ) -> list[ClipRecord]:
    """Rehydrate manifest records, re-attaching labels from the annotations."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    clips = []
    for rec in data:
        video = rec["video_id"]
        start, end, stride = rec["start_frame"], rec["end_frame"], rec.get("stride", 1)
        frames = set(range(start, end + 1, stride))
        labels: dict[int, list[BoxLabel]] = {}
        for frame, label in annotations.get(video, ()):
            if frame in frames:
                labels.setdefault(frame, []).append(label)
        clips.append(ClipRecord(video, start, end,
                                {f: tuple(v) for f, v in labels.items()}, stride))
    return clips


def write_anchor_file(path, shapes: list[BoxShape]) -> None:
    if len(shapes) != 9:
        raise ValueError(f"anchor file requires 9 priors, got {len(shapes)}")
    with open(path, "w", encoding="utf-8") as fh:
        for s in sorted(shapes, key=lambda s: s.area):
            fh.write(f"{s.w!r} {s.h!r}\n")


def read_anchor_file(path) -> list[BoxShape]:
    shapes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'w h', got {line!r}")
            try:
                shapes.append(BoxShape(float(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if len(shapes) != 9:
        raise FormatError(f"{path}: expected 9 anchors, found {len(shapes)}")
    return shapes


def save_video_frames(frames_dir, video_id: str, frames: np.ndarray) -> Path:
    frames_dir = Path(frames_dir)
    frames_dir.mkdir(parents=True, exist_ok=True)
    out = frames_dir / f"{video_id}.npy"
    np.save(out, np.asarray(frames, dtype=np.float32))
    return out


def load_video_frames(frames_dir, video_id: str) -> np.ndarray:
    path = Path(frames_dir) / f"{video_id}.npy"
    if not path.exists():
        raise FileNotFoundError(f"missing frame archive {path}")
    return np.load(path).astype(np.float64)


def write_json(path, data) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
