"""Multi-scale detector: a small strided backbone with three detection heads,
each optionally fed through a convolutional LSTM before its final 1x1
prediction convolution.

Scale index 0 is the finest grid (largest S); the grid triple is strictly
decreasing.  Each head predicts 3 anchors per cell with per-anchor class
scores, so the raw output at a scale has 3*(5+C) channels laid out
anchor-major: (tx, ty, tw, th, to, c1..cC) per anchor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import Detection
from .convlstm import ConvLSTMStack, ConvLSTMState
from .tensor import ConvKernel, Tensor4, avg_pool2, conv2d, leaky_relu

__all__ = [
    "ANCHORS_PER_SCALE",
    "AnchorSet",
    "GridPrediction",
    "DetectorConfig",
    "Detector",
    "decode",
    "filter_confidence",
]

ANCHORS_PER_SCALE = 3


@dataclass(frozen=True)
class AnchorSet:
    """Nine (w, h) priors in normalized units, three per detection scale.

    scales[0] belongs to the finest grid and should hold the smallest priors;
    scales[2] to the coarsest grid with the largest.
    """

    scales: tuple[tuple[tuple[float, float], ...], ...]

    def __post_init__(self):
        if len(self.scales) != 3 or any(len(s) != ANCHORS_PER_SCALE for s in self.scales):
            raise ValueError("AnchorSet requires 3 scales x 3 priors")
        for s in self.scales:
            for w, h in s:
                if w <= 0 or h <= 0:
                    raise ValueError(f"anchor priors must be positive, got ({w}, {h})")

    def for_scale(self, scale: int) -> tuple[tuple[float, float], ...]:
        return self.scales[scale]

    def flat(self) -> list[tuple[float, float]]:
        return [wh for s in self.scales for wh in s]


@dataclass(frozen=True)
class GridPrediction:
    """Raw head output at one scale: (1, 3*(5+C), S, S)."""

    scale: int
    grid_size: int
    num_classes: int
    raw: Tensor4

    def __post_init__(self):
        expect = (1, ANCHORS_PER_SCALE * (5 + self.num_classes), self.grid_size, self.grid_size)
        if self.raw.shape != expect:
            raise ValueError(f"GridPrediction raw shape {self.raw.shape}, expected {expect}")


def _stage_sizes(input_size: int, num_stages: int) -> list[int]:
    sizes = []
    s = input_size
    for _ in range(num_stages):
        s = (s + 1) // 2
        sizes.append(s)
    return sizes


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int
    num_classes: int
    in_channels: int = 1
    stage_widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    grid_sizes: tuple[int, int, int] = (13, 7, 4)
    backbone_kernel: int = 3
    recurrent: bool = False
    lstm_layers: int = 1
    lstm_kernel: int = 3
    dropout: float = 0.0
    # objectness logits start strongly negative so an untrained model is
    # quiet; without this the no-object BCE shock destabilizes early steps
    obj_bias_init: float = -4.0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if len(self.stage_widths) < 3:
            raise ValueError("backbone needs at least 3 stages for 3 detection scales")
        if not (self.grid_sizes[0] > self.grid_sizes[1] > self.grid_sizes[2]):
            raise ValueError(f"grid sizes must strictly decrease, got {self.grid_sizes}")
        sizes = _stage_sizes(self.input_size, len(self.stage_widths))
        if tuple(sizes[-3:]) != tuple(self.grid_sizes):
            raise ValueError(
                f"grid sizes {self.grid_sizes} unreachable: stages of input "
                f"{self.input_size} produce {sizes} (last three must match)"
            )
        if self.lstm_layers < 1:
            raise ValueError("lstm_layers must be >= 1")

    @property
    def scale_widths(self) -> tuple[int, int, int]:
        return tuple(self.stage_widths[-3:])

    @property
    def head_out_channels(self) -> int:
        return ANCHORS_PER_SCALE * (5 + self.num_classes)

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "stage_widths": list(self.stage_widths),
            "grid_sizes": list(self.grid_sizes),
            "backbone_kernel": self.backbone_kernel,
            "recurrent": self.recurrent,
            "lstm_layers": self.lstm_layers,
            "lstm_kernel": self.lstm_kernel,
            "dropout": self.dropout,
            "obj_bias_init": self.obj_bias_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        known = {
            "input_size", "num_classes", "in_channels", "stage_widths", "grid_sizes",
            "backbone_kernel", "recurrent", "lstm_layers", "lstm_kernel", "dropout",
            "obj_bias_init",
        }
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown detector config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("stage_widths", "grid_sizes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class Detector:
    """Weights plus forward pass.  Immutable shape; parameters update in place."""

    def __init__(self, config: DetectorConfig, backbone: list[ConvKernel],
                 heads: list[tuple[ConvLSTMStack | None, ConvKernel]]):
        self.config = config
        self.backbone = backbone
        self.heads = heads

    @classmethod
    def build(cls, config: DetectorConfig, seed: int = 0) -> "Detector":
        rng = np.random.default_rng(seed)
        backbone = []
        cin = config.in_channels
        for width in config.stage_widths:
            backbone.append(ConvKernel.random(width, cin, config.backbone_kernel, rng))
            cin = width
        heads = []
        for width in config.scale_widths:
            stack = None
            if config.recurrent:
                # hidden width equals the incoming feature width so the final
                # convolution's geometry is independent of the recurrent flag
                stack = ConvLSTMStack.random(
                    width, width, config.lstm_kernel, config.lstm_layers, rng,
                    dropout_rate=config.dropout,
                )
            final = ConvKernel.random(config.head_out_channels, width, 1, rng)
            per_anchor = 5 + config.num_classes
            final.bias[4::per_anchor] = config.obj_bias_init
            heads.append((stack, final))
        return cls(config, backbone, heads)

    def fresh_states(self) -> list[ConvLSTMState]:
        if not self.config.recurrent:
            raise ValueError("fresh_states on a non-recurrent detector")
        states = []
        for scale, (stack, _) in enumerate(self.heads):
            s = self.config.grid_sizes[scale]
            states.append(stack.fresh_state(s, s))
        return states

    def forward(self, frame, states: list[ConvLSTMState] | None = None,
                training: bool = False, rng: np.random.Generator | None = None
                ) -> tuple[list[GridPrediction], list[ConvLSTMState] | None]:
        """One frame through backbone and heads; recurrent states advance once.

        Non-recurrent detectors are pure functions of the frame (states must
        be None); recurrent ones require a state list, or None for fresh
        zero states.
        """
        cfg = self.config
        if isinstance(frame, Tensor4):
            x = frame
        else:
            arr = np.asarray(frame)
            if arr.ndim == 3:
                arr = arr[None]
            x = Tensor4(arr)
        if x.shape[0] != 1:
            raise ValueError("detector processes one frame at a time (n=1)")
        if x.shape[1] != cfg.in_channels or x.shape[2] != cfg.input_size \
                or x.shape[3] != cfg.input_size:
            raise ValueError(
                f"frame dims {x.shape} incompatible with configured input "
                f"({cfg.in_channels}, {cfg.input_size}, {cfg.input_size})"
            )
        if not cfg.recurrent and states is not None:
            raise ValueError("states passed to a non-recurrent detector")
        if cfg.recurrent and states is None:
            states = self.fresh_states()

        pad = (cfg.backbone_kernel - 1) // 2
        features = []
        for kn in self.backbone:
            x = avg_pool2(leaky_relu(conv2d(x, kn, pad)))
            features.append(x)
        features = features[-3:]

        preds = []
        new_states: list[ConvLSTMState] | None = [] if cfg.recurrent else None
        for scale, ((stack, final), feat) in enumerate(zip(self.heads, features)):
            if stack is not None:
                feat, st = stack.step(feat, states[scale], training=training, rng=rng)
                new_states.append(st)
            raw = conv2d(feat, final, 0)
            preds.append(GridPrediction(scale, cfg.grid_sizes[scale], cfg.num_classes, raw))
        return preds, new_states

    def named_kernels(self) -> dict[str, ConvKernel]:
        out: dict[str, ConvKernel] = {}
        for i, kn in enumerate(self.backbone):
            out[f"backbone.{i}"] = kn
        for s, (stack, final) in enumerate(self.heads):
            if stack is not None:
                for li, cell in enumerate(stack.layers):
                    for gate, kn in cell.kernels.items():
                        out[f"head.{s}.lstm.{li}.{gate}"] = kn
            out[f"head.{s}.final"] = final
        return out

    def parameter_count(self) -> int:
        return sum(kn.size for kn in self.named_kernels().values())

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        for name, kn in self.named_kernels().items():
            arrays[f"{name}.weight"] = kn.weight
            if kn.bias is not None:
                arrays[f"{name}.bias"] = kn.bias
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Install serialized parameters; geometry must match exactly."""
        expected = self.to_arrays()
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ValueError(f"checkpoint geometry mismatch: missing={missing} extra={extra}")
        for name, kn in self.named_kernels().items():
            w = arrays[f"{name}.weight"]
            if w.shape != kn.weight.shape:
                raise ValueError(
                    f"checkpoint geometry mismatch: {name}.weight {w.shape} "
                    f"!= {kn.weight.shape}"
                )
            kn.weight[...] = w
            if kn.bias is not None:
                b = arrays[f"{name}.bias"]
                if b.shape != kn.bias.shape:
                    raise ValueError(f"checkpoint geometry mismatch: {name}.bias")
                kn.bias[...] = b


def _sig(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def decode(pred: GridPrediction, scale_anchors) -> list[Detection]:
    """Turn one grid of raw offsets into detections.

    For cell (col, row) and anchor (pw, ph):
        bx = (sigmoid(tx) + col) / S        by = (sigmoid(ty) + row) / S
        bw = pw * exp(tw)                   bh = ph * exp(th)
        confidence = sigmoid(to) * max_c sigmoid(tc), class = argmax_c
    """
    if len(scale_anchors) != ANCHORS_PER_SCALE:
        raise ValueError(f"decode expects {ANCHORS_PER_SCALE} anchors, got {len(scale_anchors)}")
    s = pred.grid_size
    c = pred.num_classes
    raw = pred.raw.data.reshape(ANCHORS_PER_SCALE, 5 + c, s, s)

    cols = np.arange(s)[None, None, :]  # broadcast over (anchor, row, col)
    rows = np.arange(s)[None, :, None]
    bx = (_sig(raw[:, 0]) + cols) / s
    by = (_sig(raw[:, 1]) + rows) / s
    # exp argument clamped: decode is a total function even for wild logits
    tw = np.clip(raw[:, 2], -60.0, 60.0)
    th = np.clip(raw[:, 3], -60.0, 60.0)
    obj = _sig(raw[:, 4])
    cls_scores = _sig(raw[:, 5:])  # (anchor, C, row, col)
    best_cls = cls_scores.max(axis=1)
    best_id = cls_scores.argmax(axis=1)
    conf = obj * best_cls

    out = []
    for a, (pw, ph) in enumerate(scale_anchors):
        bw = pw * np.exp(tw[a])
        bh = ph * np.exp(th[a])
        for row in range(s):
            for col in range(s):
                out.append(Detection(
                    cx=float(bx[a, row, col]),
                    cy=float(by[a, row, col]),
                    w=float(bw[row, col]),
                    h=float(bh[row, col]),
                    class_id=int(best_id[a, row, col]),
                    confidence=float(conf[a, row, col]),
                ))
    return out


def filter_confidence(dets: list[Detection], threshold: float) -> list[Detection]:
    """Keep detections with confidence >= threshold, preserving order."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    return [d for d in dets if d.confidence >= threshold]
