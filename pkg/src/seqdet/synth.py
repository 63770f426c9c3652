"""Synthetic moving-square videos for end-to-end verification.

Each video holds one object drifting over a noisy background.  Classes 0 and
1 are squares of identical appearance that differ only in horizontal motion
direction (left vs right), so no single frame can separate them; classes 2
and 3 differ in appearance (dark fill vs bright outline) and are detectable
frame by frame.  Objects wrap around horizontally so their direction never
flips, and boxes always stay fully inside the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import BoxLabel

__all__ = ["SynthSpec", "MOTION_CLASSES", "APPEARANCE_CLASSES", "generate_video", "generate_dataset"]

MOTION_CLASSES = (0, 1)       # left-mover, right-mover: same look
APPEARANCE_CLASSES = (2, 3)   # dark fill, bright outline: any direction


@dataclass(frozen=True)
class SynthSpec:
    n_videos: int = 20
    video_frames: int = 160
    image_size: int = 52
    class_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    label_margin: int = 30      # unlabeled frames at each end of a video
    min_box: int = 9            # object extents in pixels, inclusive range
    max_box: int = 15
    noise: float = 0.06
    speed: float = 1.0          # horizontal pixels per frame

    def __post_init__(self):
        if len(self.class_weights) != 4:
            raise ValueError("class_weights must cover the 4 built-in classes")
        if self.video_frames <= 2 * self.label_margin:
            raise ValueError("video too short for the label margins")
        if self.max_box >= self.image_size // 2:
            raise ValueError("boxes too large for the image")


def _draw(frame: np.ndarray, cx: float, cy: float, bw: int, bh: int,
          fill: float, hollow: bool) -> None:
    size = frame.shape[0]
    x1 = int(round(cx - bw / 2))
    y1 = int(round(cy - bh / 2))
    x2, y2 = x1 + bw, y1 + bh
    x1, y1 = max(0, x1), max(0, y1)
    x2, y2 = min(size, x2), min(size, y2)
    if hollow:
        t = 2
        frame[y1:y2, x1:min(size, x1 + t)] = fill
        frame[y1:y2, max(0, x2 - t):x2] = fill
        frame[y1:min(size, y1 + t), x1:x2] = fill
        frame[max(0, y2 - t):y2, x1:x2] = fill
    else:
        frame[y1:y2, x1:x2] = fill


def generate_video(rng: np.random.Generator, spec: SynthSpec, class_id: int
                   ) -> tuple[np.ndarray, list[tuple[int, BoxLabel]]]:
    """One video: (T, H, W) float frames plus labeled-frame records."""
    size = spec.image_size
    t_total = spec.video_frames
    bw = int(rng.integers(spec.min_box, spec.max_box + 1))
    bh = int(rng.integers(spec.min_box, spec.max_box + 1))

    if class_id == 0:
        dx, fill, hollow = -spec.speed, 0.95, False
    elif class_id == 1:
        dx, fill, hollow = spec.speed, 0.95, False
    elif class_id == 2:
        dx = spec.speed * (1 if rng.random() < 0.5 else -1)
        fill, hollow = 0.05, False
    elif class_id == 3:
        dx = spec.speed * (1 if rng.random() < 0.5 else -1)
        fill, hollow = 0.95, True
    else:
        raise ValueError(f"unknown synthetic class {class_id}")

    # keep the box fully inside; wrap x within the legal band so the motion
    # direction stays constant for the whole video
    lo_x, hi_x = bw / 2, size - bw / 2
    band = hi_x - lo_x
    x0 = lo_x + rng.random() * band
    cy = bh / 2 + rng.random() * (size - bh)

    frames = np.clip(
        0.5 + spec.noise * rng.standard_normal((t_total, size, size)), 0.0, 1.0)
    records: list[tuple[int, BoxLabel]] = []
    labeled = range(spec.label_margin, t_total - spec.label_margin)
    for t in range(t_total):
        cx = lo_x + (x0 - lo_x + dx * t) % band
        _draw(frames[t], cx, cy, bw, bh, fill, hollow)
        if t in labeled:
            records.append((t, BoxLabel(
                class_id=class_id,
                cx=cx / size, cy=cy / size,
                w=bw / size, h=bh / size,
            )))
    return frames, records


def generate_dataset(spec: SynthSpec, seed: int
                     ) -> tuple[dict[str, np.ndarray], dict[str, list[tuple[int, BoxLabel]]]]:
    """All videos and annotations for one seed; class draw follows the
    configured weights so imbalanced datasets are one config away."""
    rng = np.random.default_rng(seed)
    weights = np.asarray(spec.class_weights, dtype=np.float64)
    probs = weights / weights.sum()
    frames_by_video: dict[str, np.ndarray] = {}
    ann_by_video: dict[str, list[tuple[int, BoxLabel]]] = {}
    for v in range(spec.n_videos):
        class_id = int(rng.choice(4, p=probs))
        video_id = f"vid{v:03d}"
        frames, records = generate_video(rng, spec, class_id)
        frames_by_video[video_id] = frames
        ann_by_video[video_id] = records
    return frames_by_video, ann_by_video
