"""Clip segmentation and the hybrid-shuffling data pipeline.

A clip is a contiguous padded run of labeled frames, 100 to 1000 frames
long.  Clips are the atomic unit of shuffling (their internal frame order is
never touched) and of recurrent-state lifetime: state is reset at a clip's
first chunk and discarded after its last.

Segmentation rules, in order:

1. Maximal runs of labeled frames; gaps of at most ``max_gap`` unlabeled
   frames inside a run are bridged.
2. Each run is padded by ``pad`` frames on both sides, clamped to the video.
3. Runs shorter than ``min_len`` are extended symmetrically into unlabeled
   frames (spilling to the open side when one side hits a video bound).
4. Runs longer than ``max_len`` are split into ``max_len`` windows that
   overlap by ``overlap`` frames; a short tail window is extended per rule 3.

Clips may overlap (rule 2 padding and rule 4 windows both permit it), so a
frame can belong to more than one clip.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .boxes import BoxLabel

__all__ = [
    "FrameAnnotation",
    "ClipRecord",
    "Chunk",
    "segment_clips",
    "hybrid_shuffle",
    "chunk_clip",
    "split_frames_blocked",
    "split_clips",
    "sparse_subsample",
    "class_histogram",
    "top_k_classes",
    "coverage_stats",
]

log = logging.getLogger(__name__)

MIN_CLIP_LEN = 100
MAX_CLIP_LEN = 1000


@dataclass(frozen=True)
class FrameAnnotation:
    """Labels for one frame of one video; an empty label list marks an
    explicitly unlabeled frame."""

    frame_index: int
    labels: tuple[BoxLabel, ...] = ()

    def __post_init__(self):
        for b in self.labels:
            for v in (b.cx, b.cy, b.w, b.h):
                if not 0.0 <= v <= 1.0:
                    raise ValueError(
                        f"frame {self.frame_index}: label coords must be in [0, 1], got {b}"
                    )


@dataclass(frozen=True)
class ClipRecord:
    """A strided range of frames of one video with their labels.

    ``stride`` is 1 for segmentation output; sparse subsampling produces
    stride > 1.  ``labels`` maps kept frame indices to their boxes.
    """

    video_id: str
    start_frame: int
    end_frame: int
    labels: dict[int, tuple[BoxLabel, ...]] = field(default_factory=dict)
    stride: int = 1

    def __post_init__(self):
        if self.end_frame < self.start_frame:
            raise ValueError(f"clip range [{self.start_frame}, {self.end_frame}] is empty")
        if self.stride < 1:
            raise ValueError(f"clip stride must be >= 1, got {self.stride}")
        for f in self.labels:
            if not (self.start_frame <= f <= self.end_frame
                    and (f - self.start_frame) % self.stride == 0):
                raise ValueError(f"label frame {f} outside clip frames")

    @property
    def clip_id(self) -> str:
        sfx = f"@{self.stride}" if self.stride != 1 else ""
        return f"{self.video_id}:{self.start_frame}-{self.end_frame}{sfx}"

    @property
    def frames(self) -> list[int]:
        return list(range(self.start_frame, self.end_frame + 1, self.stride))

    def __len__(self) -> int:
        return (self.end_frame - self.start_frame) // self.stride + 1

    def labels_for(self, frame: int) -> tuple[BoxLabel, ...]:
        return self.labels.get(frame, ())

    def classes(self) -> set[int]:
        return {b.class_id for boxes in self.labels.values() for b in boxes}


@dataclass(frozen=True)
class Chunk:
    """A consecutive slice of one clip's frames.

    ``is_first`` means recurrent state must be reset before this chunk;
    ``is_last`` means the state is discarded afterwards.  Concatenating a
    clip's chunks in emission order reproduces the clip exactly.
    """

    clip_id: str
    frames: tuple[int, ...]
    is_first: bool
    is_last: bool


def _extend_to_min(start: int, end: int, min_len: int, lo: int, hi: int) -> tuple[int, int]:
    """Grow [start, end] symmetrically to min_len within [lo, hi]; when one
    side hits a bound the remainder spills to the other."""
    if hi - lo + 1 < min_len:
        raise ValueError(
            f"video span [{lo}, {hi}] too short to host a {min_len}-frame clip"
        )
    need = min_len - (end - start + 1)
    if need > 0:
        left = min(start - lo, (need + 1) // 2)
        right = min(hi - end, need - left)
        left = min(start - lo, need - right)
        start -= left
        end += right
    return start, end


def segment_clips(annotations: Sequence[FrameAnnotation], video_id: str, num_frames: int,
                  pad: int = 30, max_gap: int = 30, min_len: int = MIN_CLIP_LEN,
                  max_len: int = MAX_CLIP_LEN, overlap: int = 30) -> list[ClipRecord]:
    """Cut one video's annotations into clips per the module rules."""
    if max_len < min_len:
        raise ValueError(f"max_len {max_len} < min_len {min_len}")
    if overlap >= max_len:
        raise ValueError(f"overlap {overlap} must be smaller than max_len {max_len}")
    indices = [a.frame_index for a in annotations]
    if any(b <= a for a, b in zip(indices, indices[1:])):
        raise ValueError("annotations must be sorted by strictly increasing frame_index")

    labeled = [a.frame_index for a in annotations if a.labels]
    by_frame = {a.frame_index: tuple(a.labels) for a in annotations if a.labels}
    if not labeled:
        return []
    last = num_frames - 1
    if labeled[-1] > last:
        raise ValueError(f"label at frame {labeled[-1]} beyond video length {num_frames}")

    # rule 1: runs with gaps <= max_gap bridged
    runs: list[tuple[int, int]] = []
    run_start = prev = labeled[0]
    for f in labeled[1:]:
        if f - prev - 1 > max_gap:
            runs.append((run_start, prev))
            run_start = f
        prev = f
    runs.append((run_start, prev))

    clips: list[ClipRecord] = []
    for rs, re in runs:
        # rule 2: pad and clamp
        s, e = max(0, rs - pad), min(last, re + pad)
        # rule 3: minimum length
        if e - s + 1 < min_len:
            s, e = _extend_to_min(s, e, min_len, 0, last)
        # rule 4: maximum length with overlapping windows
        if e - s + 1 <= max_len:
            windows = [(s, e)]
        else:
            windows = []
            stride = max_len - overlap
            ws = s
            while True:
                we = ws + max_len - 1
                if we >= e:
                    we = e
                    if we - ws + 1 < min_len:
                        ws, we = _extend_to_min(ws, we, min_len, 0, last)
                    windows.append((ws, we))
                    break
                windows.append((ws, we))
                ws += stride
        for ws, we in windows:
            labels = {f: by_frame[f] for f in range(ws, we + 1) if f in by_frame}
            clips.append(ClipRecord(video_id, ws, we, labels))

    for c in clips:
        if not min_len <= len(c) <= max_len:
            raise AssertionError(f"internal: clip {c.clip_id} length {len(c)} out of bounds")
    return clips


def hybrid_shuffle(clips: Sequence[ClipRecord], seed: int) -> list[ClipRecord]:
    """Seeded permutation of the clip list; frames inside each clip keep
    their order (clips are atomic)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(clips))
    return [clips[i] for i in order]


def chunk_clip(clip: ClipRecord, chunk_len: int) -> list[Chunk]:
    """Slice a clip into consecutive chunks of chunk_len frames (last may be
    shorter), flagging the state-reset and state-discard boundaries."""
    if chunk_len < 1:
        raise ValueError(f"chunk_len must be >= 1, got {chunk_len}")
    frames = clip.frames
    chunks = []
    for i in range(0, len(frames), chunk_len):
        part = tuple(frames[i:i + chunk_len])
        chunks.append(Chunk(
            clip_id=clip.clip_id,
            frames=part,
            is_first=i == 0,
            is_last=i + chunk_len >= len(frames),
        ))
    return chunks


def split_frames_blocked(frames: Sequence[FrameAnnotation], block: int = 120,
                         val_fraction: float = 0.2, seed: int = 0
                         ) -> tuple[list[FrameAnnotation], list[FrameAnnotation]]:
    """Frame-granularity split that never separates frames of the same
    consecutive `block`-frame stretch of footage.

    Each block lands in the validation set independently with probability
    val_fraction.
    """
    if block < 1:
        raise ValueError(f"block must be >= 1, got {block}")
    if not 0.0 <= val_fraction <= 1.0:
        raise ValueError(f"val_fraction must be in [0, 1], got {val_fraction}")
    block_ids = sorted({a.frame_index // block for a in frames})
    rng = np.random.default_rng(seed)
    to_val = {b for b in block_ids if rng.random() < val_fraction}
    train = [a for a in frames if a.frame_index // block not in to_val]
    val = [a for a in frames if a.frame_index // block in to_val]
    return train, val


def split_clips(clips: Sequence[ClipRecord], val_fraction: float = 0.2, seed: int = 0
                ) -> tuple[list[ClipRecord], list[ClipRecord]]:
    """Clip-granularity split: round(n * fraction) validation clips, at least
    one whenever the fraction is positive and any clips exist."""
    if not 0.0 <= val_fraction <= 1.0:
        raise ValueError(f"val_fraction must be in [0, 1], got {val_fraction}")
    n = len(clips)
    if n == 0 or val_fraction == 0.0:
        return list(clips), []
    n_val = min(n, max(1, int(np.floor(n * val_fraction + 0.5))))
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(n, size=n_val, replace=False).tolist())
    train = [c for i, c in enumerate(clips) if i not in chosen]
    val = [c for i, c in enumerate(clips) if i in chosen]
    return train, val


def sparse_subsample(clip: ClipRecord, n: int) -> ClipRecord:
    """Keep every n-th frame of the clip starting at its first frame."""
    if n < 1:
        raise ValueError(f"subsample factor must be >= 1, got {n}")
    if n == 1:
        return clip
    kept = list(range(clip.start_frame, clip.end_frame + 1, clip.stride * n))
    if len(kept) < 2:
        raise ValueError(
            f"subsampling by {n} leaves {len(kept)} frame(s) of clip {clip.clip_id}"
        )
    labels = {f: clip.labels[f] for f in kept if f in clip.labels}
    return ClipRecord(clip.video_id, kept[0], kept[-1], labels, stride=clip.stride * n)


def class_histogram(clips: Iterable[ClipRecord]) -> dict[int, int]:
    """Number of clips containing each class (a class counts once per clip)."""
    counts: dict[int, int] = {}
    for clip in clips:
        for c in clip.classes():
            counts[c] = counts.get(c, 0) + 1
    return counts


def top_k_classes(histogram: dict[int, int], k: int) -> list[int]:
    """The k most frequent classes; ties broken by ascending class id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ranked = sorted(histogram.items(), key=lambda kv: (-kv[1], kv[0]))
    return [c for c, _ in ranked[:k]]


def coverage_stats(clips: Sequence[ClipRecord], total_frames: dict[str, int]) -> dict:
    """Dataset-size reduction from discarding frames outside all clips.

    Overlapping clips count a frame once.  Data-dependent: reported, never
    asserted.
    """
    covered: dict[str, set[int]] = {}
    for c in clips:
        covered.setdefault(c.video_id, set()).update(c.frames)
    total = sum(total_frames.values())
    kept = sum(len(v) for v in covered.values())
    return {
        "total_frames": total,
        "frames_in_clips": kept,
        "reduction": 1.0 - kept / total if total else 0.0,
    }
