"""Command-line entry point.

    seqdet synth   --config run.json            generate a synthetic dataset
    seqdet prepare --config run.json            segment clips, split, histogram
    seqdet anchors --config run.json            estimate anchor priors
    seqdet train   --config run.json            train (recurrent or not)
    seqdet eval    --config run.json --checkpoint ckpt.bin
    seqdet synth|prepare|... --seed N --out DIR override config values

Every command is a pure function of (config, seed, input files); artifacts
carry no timestamps, so re-runs are byte-identical.  Errors exit nonzero
with a single ``ErrorClass: message`` line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import clips as clips_mod
from . import dataio
from .anchors import BoxShape, assign_to_scales, kmeans_anchors, prior_utilization
from .boxes import Detection
from .config import RunConfig
from .detector import Detector, decode, filter_confidence
from .metrics import average_precision, match_detections, mean_ap, nms, precision_recall
from .synth import generate_dataset
from .tensor import no_grad
from .training import FrameBatch, SgdMomentum, train_step
from .weights import load_weights, save_weights

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- loading


def _load_videos(cfg: RunConfig) -> dict[str, list]:
    return dataio.read_annotations(cfg.annotations)


def _video_length(cfg: RunConfig, video_id: str) -> int:
    frame_file = Path(cfg.frames_dir) / f"{video_id}.npy"
    if frame_file.exists():
        return int(np.load(frame_file, mmap_mode="r").shape[0])
    if cfg.video_lengths and video_id in cfg.video_lengths:
        return cfg.video_lengths[video_id]
    raise ValueError(
        f"unknown length for video {video_id}: no frame archive and no "
        f"video_lengths entry"
    )


def _load_split(cfg: RunConfig, name: str) -> list[clips_mod.ClipRecord]:
    path = cfg.out_path(f"clips_{name}.json")
    if not path.exists():
        raise FileNotFoundError(f"missing split file {path}; run 'prepare' first")
    return dataio.read_manifest(path, _load_videos(cfg))


class _FrameCache:
    def __init__(self, frames_dir):
        self.frames_dir = frames_dir
        self._cache: dict[str, np.ndarray] = {}

    def frame(self, video_id: str, index: int) -> np.ndarray:
        if video_id not in self._cache:
            self._cache[video_id] = dataio.load_video_frames(self.frames_dir, video_id)
        return self._cache[video_id][index][None]  # (1, H, W)


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> dict:
    frames, annotations = generate_dataset(cfg.synth, cfg.seed)
    for video_id, arr in frames.items():
        dataio.save_video_frames(cfg.frames_dir, video_id, arr)
    Path(cfg.annotations).parent.mkdir(parents=True, exist_ok=True)
    dataio.write_annotations(cfg.annotations, annotations)
    return {"videos": len(frames), "annotations": cfg.annotations}


def cmd_prepare(cfg: RunConfig) -> dict:
    videos = _load_videos(cfg)
    pl = cfg.pipeline
    all_clips: list[clips_mod.ClipRecord] = []
    lengths: dict[str, int] = {}
    for video_id in sorted(videos):
        n = _video_length(cfg, video_id)
        lengths[video_id] = n
        frames = dataio.annotations_to_frames(videos[video_id])
        all_clips.extend(clips_mod.segment_clips(
            frames, video_id, n, pad=pl.pad, max_gap=pl.max_gap,
            min_len=pl.min_len, max_len=pl.max_len, overlap=pl.overlap,
        ))
    train, val = clips_mod.split_clips(all_clips, pl.val_fraction, cfg.seed)

    dataio.write_manifest(cfg.out_path("clips.json"), all_clips)
    dataio.write_manifest(cfg.out_path("clips_train.json"), train)
    dataio.write_manifest(cfg.out_path("clips_val.json"), val)

    hist = clips_mod.class_histogram(all_clips)
    coverage = clips_mod.coverage_stats(all_clips, lengths)
    report = {
        "clips": len(all_clips),
        "train_clips": len(train),
        "val_clips": len(val),
        "histogram": {str(k): v for k, v in sorted(hist.items())},
        "top_k": {
            str(k): clips_mod.top_k_classes(hist, k) for k in cfg.eval.top_k
        } if hist else {},
        "coverage": coverage,
    }
    dataio.write_json(cfg.out_path("report.json"), report)
    return report


def cmd_anchors(cfg: RunConfig) -> dict:
    train = _load_split(cfg, "train")
    shapes = [
        BoxShape(b.w, b.h)
        for clip in train
        for boxes in clip.labels.values()
        for b in boxes
    ]
    distinct = len({(s.w, s.h) for s in shapes})
    if distinct < 9:
        raise ValueError(
            f"anchor estimation needs >= 9 distinct box shapes, found {distinct}"
        )
    centroids = kmeans_anchors(shapes, k=9, seed=cfg.seed)
    dataio.write_anchor_file(cfg.out_path("anchors.txt"), centroids)
    anchor_set = assign_to_scales(centroids)
    utilization = prior_utilization(shapes, anchor_set)
    report = {
        "anchors": [[s.w, s.h] for s in sorted(centroids, key=lambda s: s.area)],
        "utilization": utilization,
        "boxes": len(shapes),
    }
    dataio.write_json(cfg.out_path("anchors_report.json"), report)
    return report


def _load_anchor_set(cfg: RunConfig):
    path = cfg.out_path("anchors.txt")
    if not path.exists():
        raise FileNotFoundError(f"missing anchor file {path}; run 'anchors' first")
    return assign_to_scales(dataio.read_anchor_file(path))


def _save_checkpoint(cfg: RunConfig, model: Detector, name: str, meta_extra: dict) -> Path:
    path = cfg.out_path(name)
    meta = {"detector": model.config.to_dict(), **meta_extra}
    save_weights(path, model.to_arrays(), meta)
    return path


def port_arrays(model: Detector, arrays: dict[str, np.ndarray]) -> list[str]:
    """Copy checkpoint entries whose names and shapes match the model."""
    ported = []
    for name, kn in model.named_kernels().items():
        w = arrays.get(f"{name}.weight")
        if w is None or w.shape != kn.weight.shape:
            continue
        kn.weight[...] = w
        b = arrays.get(f"{name}.bias")
        if kn.bias is not None and b is not None and b.shape == kn.bias.shape:
            kn.bias[...] = b
        ported.append(name)
    return sorted(ported)


def cmd_train(cfg: RunConfig) -> dict:
    train_clips = _load_split(cfg, "train")
    if not train_clips:
        raise ValueError("training split is empty")
    anchor_set = _load_anchor_set(cfg)
    tc = cfg.train
    model = Detector.build(cfg.detector, seed=cfg.seed)

    if tc.init_checkpoint:
        arrays, _ = load_weights(tc.init_checkpoint)
        ported = port_arrays(model, arrays)
        if not ported:
            raise ValueError(
                f"checkpoint {tc.init_checkpoint} shares no parameter geometry "
                f"with the configured model"
            )
        if tc.freeze_ported:
            kernels = model.named_kernels()
            for name in ported:
                kernels[name].frozen = True
        log.info("ported %d parameter groups from %s", len(ported), tc.init_checkpoint)

    if cfg.pipeline.subsample_n > 1:
        train_clips = [clips_mod.sparse_subsample(c, cfg.pipeline.subsample_n)
                       for c in train_clips]

    optimizer = SgdMomentum(model.named_kernels(), lr=tc.lr, momentum=tc.momentum)
    cache = _FrameCache(cfg.frames_dir)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    metrics_path = cfg.out_path("train_metrics.jsonl")
    _save_checkpoint(cfg, model, "checkpoint.bin", {"epoch": 0, "step": 0})

    with open(metrics_path, "w", encoding="utf-8") as metrics_fh:
        for epoch in range(tc.epochs):
            if cfg.detector.recurrent:
                batches = _clip_batches(train_clips, cache, tc.chunk_len,
                                        seed=cfg.seed + epoch)
            else:
                batches = _flat_batches(train_clips, cache, tc.chunk_len,
                                        seed=cfg.seed + epoch)
            states = None
            for batch, reset, discard in batches:
                if reset:
                    states = None
                states, bd = train_step(model, batch, states, optimizer,
                                        anchor_set, tc.loss, rng=rng)
                if discard:
                    states = None
                step += 1
                metrics_fh.write(json.dumps({
                    "step": step, "epoch": epoch,
                    "localization": bd.localization, "confidence": bd.confidence,
                    "classification": bd.classification, "total": bd.total,
                }) + "\n")
            _save_checkpoint(cfg, model, f"checkpoint_epoch{epoch + 1}.bin",
                             {"epoch": epoch + 1, "step": step})
            _save_checkpoint(cfg, model, "checkpoint.bin",
                             {"epoch": epoch + 1, "step": step})
    return {"steps": step, "checkpoint": str(cfg.out_path("checkpoint.bin"))}


def _clip_batches(train_clips, cache: _FrameCache, chunk_len: int, seed: int):
    """Hybrid shuffling: clip order is shuffled, frames inside are not; all
    chunks of one clip are emitted consecutively, in order."""
    for clip in clips_mod.hybrid_shuffle(train_clips, seed):
        for chunk in clips_mod.chunk_clip(clip, chunk_len):
            batch = FrameBatch(
                frames=tuple(cache.frame(clip.video_id, f) for f in chunk.frames),
                labels=tuple(clip.labels_for(f) for f in chunk.frames),
                clip_ids=(chunk.clip_id,) * len(chunk.frames),
            )
            yield batch, chunk.is_first, chunk.is_last


def _flat_batches(train_clips, cache: _FrameCache, chunk_len: int, seed: int):
    """Non-recurrent mode ignores clip ordering: frames shuffle freely."""
    items = [
        (clip.video_id, f, clip.labels_for(f))
        for clip in train_clips
        for f in clip.frames
    ]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(items))
    for i in range(0, len(items), chunk_len):
        part = [items[j] for j in order[i:i + chunk_len]]
        batch = FrameBatch(
            frames=tuple(cache.frame(v, f) for v, f, _ in part),
            labels=tuple(labels for _, _, labels in part),
            clip_ids=(None,) * len(part),
        )
        yield batch, True, True


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None) -> dict:
    val = _load_split(cfg, "val")
    if not val:
        raise ValueError("validation split is empty")
    ev = cfg.eval

    truths = []
    for clip in val:
        for f in clip.frames:
            for b in clip.labels_for(f):
                truths.append(((clip.clip_id, f), b))

    detections: list[tuple[tuple, Detection]] = []
    if ev.playback_stub:
        # oracle injection: detections are the truths themselves at full
        # confidence, still pushed through filter/NMS/matching
        for key, b in truths:
            detections.append((key, Detection(b.cx, b.cy, b.w, b.h, b.class_id, 1.0)))
        detections = _postprocess(detections, ev)
    else:
        anchor_set = _load_anchor_set(cfg)
        path = checkpoint or str(cfg.out_path("checkpoint.bin"))
        arrays, meta = load_weights(path)
        model = Detector.build(cfg.detector, seed=cfg.seed)
        model.load_arrays(arrays)
        cache = _FrameCache(cfg.frames_dir)
        with no_grad():
            for clip in val:
                states = None  # fresh state per clip
                for f in clip.frames:
                    preds, states = model.forward(cache.frame(clip.video_id, f), states)
                    dets: list[Detection] = []
                    for pred in preds:
                        dets.extend(decode(pred, anchor_set.for_scale(pred.scale)))
                    for d in _frame_postprocess(dets, ev):
                        detections.append(((clip.clip_id, f), d))

    match = match_detections(detections, truths, iou_threshold=ev.match_iou)
    precision, recall = precision_recall(match)
    aps = {
        c: average_precision(match, c)
        for c in sorted(match.gt_counts)
        if match.gt_counts[c] > 0
    }
    hist = clips_mod.class_histogram(dataio.read_manifest(
        cfg.out_path("clips.json"), _load_videos(cfg)))
    maps = {}
    for k in ev.top_k:
        classes = clips_mod.top_k_classes(hist, k)
        evaluated = [c for c in classes if c in aps]
        maps[str(k)] = {
            "map": mean_ap(aps, classes) if evaluated else None,
            "classes": classes,
            "excluded": [c for c in classes if c not in aps],
        }
    per_class = {}
    for c, ap in sorted(aps.items()):
        p, r = precision_recall(match, c)
        per_class[str(c)] = {"ap": ap, "precision": p, "recall": r,
                             "ground_truths": match.gt_counts[c]}
    report = {
        "precision": precision,
        "recall": recall,
        "per_class": per_class,
        "map": maps,
        "detections": len(detections),
        "ground_truths": len(truths),
        "conf_threshold": ev.conf_threshold,
        "match_iou": ev.match_iou,
    }
    dataio.write_json(cfg.out_path("metrics.json"), report)
    return report


def _frame_postprocess(dets: list[Detection], ev) -> list[Detection]:
    return nms(filter_confidence(dets, ev.conf_threshold), ev.nms_iou)


def _postprocess(keyed: list[tuple[tuple, Detection]], ev) -> list[tuple[tuple, Detection]]:
    by_key: dict[tuple, list[Detection]] = {}
    for key, d in keyed:
        by_key.setdefault(key, []).append(d)
    out = []
    for key in by_key:
        for d in _frame_postprocess(by_key[key], ev):
            out.append((key, d))
    return out


# ---------------------------------------------------------------- wiring


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqdet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "prepare", "anchors", "train", "eval"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        if name == "eval":
            p.add_argument("--checkpoint", default=None, help="checkpoint to evaluate")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.from_file(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = dataclasses.replace(cfg, out_dir=args.out)
        if args.command == "synth":
            result = cmd_synth(cfg)
        elif args.command == "prepare":
            result = cmd_prepare(cfg)
        elif args.command == "anchors":
            result = cmd_anchors(cfg)
        elif args.command == "train":
            result = cmd_train(cfg)
        else:
            result = cmd_eval(cfg, checkpoint=args.checkpoint)
    except Exception as exc:  # noqa: BLE001 - boundary: map to exit code
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "ok": True,
                      "summary": _summarize(result)}, sort_keys=True))
    return 0


def _summarize(result: dict) -> dict:
    plain = {}
    for k, v in result.items():
        if isinstance(v, (int, float, str, bool)) or v is None:
            plain[k] = v
    return plain


if __name__ == "__main__":
    sys.exit(main())
