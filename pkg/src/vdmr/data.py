"""Annotation parsing, seeded synthetic dataset generation, and the
on-disk dataset/prediction formats."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError
from .text import QuerySentence

DEFAULT_TEMPLATES = (
    ("door", "open"),
    ("dog", "run"),
    ("ball", "bounce"),
    ("light", "turn"),
)

PAYLOAD_SHAPE = (8, 8)
NOUN_BLOCK = 4          # top-left block side holding the entity pattern
SPOT_VALUE = 200
SECONDS_PER_FRAME = 1.0


@dataclass
class TimedAnnotation:
    video_id: str
    query: QuerySentence
    start_s: float
    end_s: float
    duration_s: float

    def __post_init__(self):
        if not 0.0 <= self.start_s < self.end_s <= self.duration_s:
            raise ValueError(
                f"bad boundary [{self.start_s}, {self.end_s}] "
                f"for duration {self.duration_s}")


@dataclass
class Sample:
    query_id: str
    annotation: TimedAnnotation


@dataclass
class MomentDataset:
    samples: list[Sample]
    payloads: dict[str, np.ndarray]  # video_id -> (L, H, W) frame payloads
    frames_per_video: int

    def frames(self, video_id: str) -> list[np.ndarray]:
        return list(self.payloads[video_id])

    def subset(self, indices) -> "MomentDataset":
        samples = [self.samples[i] for i in indices]
        vids = {s.annotation.video_id for s in samples}
        return MomentDataset(
            samples=samples,
            payloads={v: self.payloads[v] for v in vids},
            frames_per_video=self.frames_per_video)


# ---------------------------------------------------------------------------
# Charades-STA style annotation files: `video_id start end##sentence`

def load_annotations(path, format: str = "charades_sta",
                     durations: dict[str, float] | None = None
                     ) -> list[TimedAnnotation]:
    if format != "charades_sta":
        raise ValueError(f"unknown annotation format {format!r}")
    annotations = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            head, sep, sentence = line.partition("##")
            if not sep:
                raise ParseError("missing '##' separator", lineno)
            parts = head.split()
            if len(parts) < 3:
                raise ParseError("expected 'video_id start end'", lineno)
            video_id = " ".join(parts[:-2])
            try:
                start, end = float(parts[-2]), float(parts[-1])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if not sentence.strip():
                raise ParseError("empty query sentence", lineno)
            if end <= start:
                raise ParseError(f"start {start} >= end {end}", lineno)
            duration = end if durations is None else durations.get(video_id, end)
            try:
                annotations.append(TimedAnnotation(
                    video_id=video_id,
                    query=QuerySentence.from_raw(sentence),
                    start_s=start, end_s=end, duration_s=duration))
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
    return annotations


def save_annotations(path, annotations) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ann in annotations:
            f.write(f"{ann.video_id} {ann.start_s:.6f} {ann.end_s:.6f}"
                    f"##{ann.query.raw}\n")


# ---------------------------------------------------------------------------
# Synthetic moment-retrieval data

@dataclass
class SyntheticSpec:
    num_videos: int = 50
    frames_per_video: int = 16
    templates: tuple[tuple[str, str], ...] = DEFAULT_TEMPLATES
    seed: int = 0
    min_moment_frames: int = 4
    max_moment_frames: int = 10

    def __post_init__(self):
        if self.num_videos < 1 or self.frames_per_video < 1:
            raise ValueError("counts must be positive")
        if not self.templates:
            raise ValueError("need at least one template")
        if not 1 <= self.min_moment_frames <= self.max_moment_frames \
                <= self.frames_per_video:
            raise ValueError("bad moment length range")


def _noun_pattern(noun: str) -> np.ndarray:
    digest = hashlib.blake2b(noun.encode(), digest_size=NOUN_BLOCK * NOUN_BLOCK
                             ).digest()
    return np.frombuffer(digest, dtype=np.uint8).reshape(NOUN_BLOCK, NOUN_BLOCK) \
        .astype(np.int16)


def _verb_path(verb: str) -> list[tuple[int, int]]:
    """Deterministic cyclic trajectory over cells outside the noun block."""
    h, w = PAYLOAD_SHAPE
    region = [(r, c) for r in range(h) for c in range(w)
              if not (r < NOUN_BLOCK and c < NOUN_BLOCK)]
    digest = hashlib.blake2b(verb.encode(), digest_size=8).digest()
    step = (int.from_bytes(digest[:4], "little") % len(region)) | 1
    phase = int.from_bytes(digest[4:], "little") % len(region)
    return [region[(phase + k * step) % len(region)] for k in range(len(region))]


def template_frame(noun: str, verb: str, step: int) -> np.ndarray:
    """One frame of an event: static entity pattern plus a moving spot."""
    frame = np.zeros(PAYLOAD_SHAPE, dtype=np.int16)
    frame[:NOUN_BLOCK, :NOUN_BLOCK] = _noun_pattern(noun)
    path = _verb_path(verb)
    r, c = path[step % len(path)]
    frame[r, c] = SPOT_VALUE
    return frame


def template_query(noun: str, verb: str) -> str:
    return f"the {noun} {verb}s"


def generate_synthetic(spec: SyntheticSpec) -> MomentDataset:
    """Seeded dataset: each video plants one templated event in a
    contiguous frame range; frames outside it show single distractor
    frames drawn from the other templates at random phases."""
    rng = np.random.default_rng(spec.seed)
    lv = spec.frames_per_video
    samples: list[Sample] = []
    payloads: dict[str, np.ndarray] = {}
    for v in range(spec.num_videos):
        video_id = f"syn{spec.seed}_{v:04d}"
        t_idx = int(rng.integers(len(spec.templates)))
        noun, verb = spec.templates[t_idx]
        length = int(rng.integers(spec.min_moment_frames,
                                  spec.max_moment_frames + 1))
        start = int(rng.integers(0, lv - length + 1))
        frames = np.zeros((lv, *PAYLOAD_SHAPE), dtype=np.int16)
        for i in range(lv):
            if start <= i < start + length:
                frames[i] = template_frame(noun, verb, i - start)
            else:
                if len(spec.templates) > 1:
                    d_idx = int(rng.integers(len(spec.templates) - 1))
                    if d_idx >= t_idx:
                        d_idx += 1
                else:
                    d_idx = t_idx
                d_noun, d_verb = spec.templates[d_idx]
                frames[i] = template_frame(d_noun, d_verb,
                                           int(rng.integers(lv)))
        payloads[video_id] = frames
        annotation = TimedAnnotation(
            video_id=video_id,
            query=QuerySentence.from_raw(template_query(noun, verb)),
            start_s=start * SECONDS_PER_FRAME,
            end_s=(start + length) * SECONDS_PER_FRAME,
            duration_s=lv * SECONDS_PER_FRAME)
        samples.append(Sample(query_id=f"{video_id}#0", annotation=annotation))
    return MomentDataset(samples=samples, payloads=payloads,
                         frames_per_video=lv)


# ---------------------------------------------------------------------------
# On-disk dataset directory (written by `vdmr gen-data`)

def save_dataset(out_dir, dataset: MomentDataset, meta: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    video_ids = sorted(dataset.payloads)
    stack = np.stack([dataset.payloads[v] for v in video_ids])
    np.save(out / "payloads.npy", stack)
    save_annotations(out / "annotations.txt",
                     [s.annotation for s in dataset.samples])
    info = {
        "video_ids": video_ids,
        "frames_per_video": dataset.frames_per_video,
        "durations": {s.annotation.video_id: s.annotation.duration_s
                      for s in dataset.samples},
    }
    if meta:
        info.update(meta)
    with open(out / "meta.json", "w", encoding="utf-8") as f:
        json.dump(info, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(data_dir) -> MomentDataset:
    root = Path(data_dir)
    with open(root / "meta.json", encoding="utf-8") as f:
        meta = json.load(f)
    stack = np.load(root / "payloads.npy")
    payloads = {v: stack[i] for i, v in enumerate(meta["video_ids"])}
    durations = {k: float(v) for k, v in meta["durations"].items()}
    annotations = load_annotations(root / "annotations.txt",
                                   durations=durations)
    counts: dict[str, int] = {}
    samples = []
    for ann in annotations:
        n = counts.get(ann.video_id, 0)
        counts[ann.video_id] = n + 1
        samples.append(Sample(query_id=f"{ann.video_id}#{n}", annotation=ann))
    return MomentDataset(samples=samples, payloads=payloads,
                         frames_per_video=int(meta["frames_per_video"]))


# ---------------------------------------------------------------------------
# Prediction files: one JSON object per line

def save_predictions(path, preds: dict[str, dict]) -> None:
    """preds: query_id -> {"video_id": ..., "segments": [[s, e, score], ...]}"""
    with open(path, "w", encoding="utf-8") as f:
        for qid in sorted(preds):
            record = {"video_id": preds[qid]["video_id"], "query_id": qid,
                      "segments": [list(seg) for seg in preds[qid]["segments"]]}
            f.write(json.dumps(record, sort_keys=True) + "\n")


def load_predictions(path) -> dict[str, list[tuple[float, float, float]]]:
    out: dict[str, list[tuple[float, float, float]]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                out[record["query_id"]] = [tuple(seg)
                                           for seg in record["segments"]]
            except (json.JSONDecodeError, KeyError) as exc:
                raise ParseError(str(exc), lineno) from None
    return out
