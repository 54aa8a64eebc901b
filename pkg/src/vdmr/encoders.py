"""Feature extraction behind a uniform interface.

Ships deterministic stub encoders for desk-scale work.  The stub visual
encoder is parameter-free (frozen by construction): per-frame patch
vectors are seeded hashes of payload sub-blocks and the global vector is
their mean, so identical payloads always map to identical features.  The
stub text encoder is a bag of seeded per-token vectors mean-pooled
through one trainable linear layer, which is the part of the model the
injection losses adapt.

Real pretrained image-text encoders plug in through the same surface:
anything with ``encode_frames`` / ``encode_text`` and a ``dim``
attribute (text backends additionally being ``nn.Module`` so their
parameters can be optimized).
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import DimensionMismatch

SOURCE_KINDS = ("full", "static", "dynamic")

CACHE_MAGIC = b"VDIF"
CACHE_VERSION = 1


@dataclass
class FrameFeatures:
    """Per-video visual features: global vectors and spatial patch grids."""

    global_: torch.Tensor  # (D, L)
    patches: torch.Tensor  # (L, D, H, W)

    def __post_init__(self):
        if self.global_.shape[0] != self.patches.shape[1]:
            raise DimensionMismatch("global/patch feature dims differ")
        if self.global_.shape[1] != self.patches.shape[0]:
            raise DimensionMismatch("global/patch frame counts differ")

    @property
    def num_frames(self) -> int:
        return self.global_.shape[1]

    @property
    def dim(self) -> int:
        return self.global_.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return (self.patches.shape[2], self.patches.shape[3])


@dataclass
class TextEmbedding:
    vector: torch.Tensor  # (D,)
    source_kind: str

    def __post_init__(self):
        if self.source_kind not in SOURCE_KINDS:
            raise ValueError(f"bad source_kind {self.source_kind!r}")


def _hash_floats(seed: int, payload: bytes, dim: int) -> np.ndarray:
    """Expand blake2b(seed, payload) into `dim` floats in [-1, 1)."""
    need = dim * 4
    chunks = []
    counter = 0
    while sum(len(c) for c in chunks) < need:
        h = hashlib.blake2b(payload, digest_size=64,
                            key=seed.to_bytes(8, "little", signed=False),
                            salt=counter.to_bytes(8, "little"))
        chunks.append(h.digest())
        counter += 1
    raw = b"".join(chunks)[:need]
    ints = np.frombuffer(raw, dtype="<u4").astype(np.float64)
    return ints / 2147483648.0 - 1.0


def uniform_sample_indices(num_frames: int, target: int) -> list[int]:
    """Indices of `target` uniformly spaced frames (with repeats if short)."""
    if num_frames < 1 or target < 1:
        raise ValueError("need at least one frame")
    return [min(num_frames - 1, int((i + 0.5) * num_frames / target))
            for i in range(target)]


class StubVisualEncoder:
    """Deterministic hash-based frame encoder; frozen, no parameters.

    Frame payloads are 2D numpy arrays.  The payload is tiled into an
    H x W grid of sub-blocks; each block hashes to one patch vector and
    the global vector is the mean of the patch vectors.
    """

    def __init__(self, dim: int = 64, grid: tuple[int, int] = (2, 2),
                 seed: int = 0, dtype: torch.dtype = torch.float64):
        self.dim = dim
        self.grid = grid
        self.seed = seed
        self.dtype = dtype

    @property
    def encoder_id(self) -> str:
        h, w = self.grid
        return f"stub-s{self.seed}-d{self.dim}-g{h}x{w}"

    def signature(self) -> str:
        """Digest of everything that determines the encoder's outputs."""
        return hashlib.sha256(self.encoder_id.encode()).hexdigest()

    def _frame_features(self, payload: np.ndarray):
        gh, gw = self.grid
        rows = np.array_split(np.arange(payload.shape[0]), gh)
        cols = np.array_split(np.arange(payload.shape[1]), gw)
        patch = np.empty((self.dim, gh, gw), dtype=np.float64)
        for bi, r in enumerate(rows):
            for bj, c in enumerate(cols):
                block = np.ascontiguousarray(payload[np.ix_(r, c)])
                patch[:, bi, bj] = _hash_floats(self.seed, block.tobytes(), self.dim)
        global_vec = patch.reshape(self.dim, -1).mean(axis=1)
        return global_vec, patch

    def encode_frames(self, frames: Sequence[np.ndarray]) -> FrameFeatures:
        if len(frames) == 0:
            raise ValueError("empty frame list")
        shape = frames[0].shape
        for f in frames:
            if f.shape != shape:
                raise DimensionMismatch("frames have differing spatial sizes")
        globals_ = np.empty((self.dim, len(frames)), dtype=np.float64)
        patches = np.empty((len(frames), self.dim, *self.grid), dtype=np.float64)
        for i, frame in enumerate(frames):
            g, p = self._frame_features(np.asarray(frame))
            globals_[:, i] = g
            patches[i] = p
        return FrameFeatures(
            global_=torch.as_tensor(globals_, dtype=self.dtype),
            patches=torch.as_tensor(patches, dtype=self.dtype),
        )


class StubTextEncoder(nn.Module):
    """Bag of seeded per-token vectors, mean-pooled through one trainable
    linear layer.  Open vocabulary: any token hashes to a fixed vector."""

    def __init__(self, dim: int = 64, seed: int = 0,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.dim = dim
        self.seed = seed
        self.proj = nn.Linear(dim, dim).to(dtype)
        self._token_cache: dict[str, torch.Tensor] = {}
        self._dtype = dtype

    def token_vector(self, token: str) -> torch.Tensor:
        vec = self._token_cache.get(token)
        if vec is None:
            vec = torch.as_tensor(
                _hash_floats(self.seed, token.encode("utf-8"), self.dim),
                dtype=self._dtype)
            self._token_cache[token] = vec
        return vec

    def forward(self, tokens: Sequence[str]) -> torch.Tensor:
        if len(tokens) == 0:
            raise ValueError("empty token list")
        bag = torch.stack([self.token_vector(t) for t in tokens]).mean(dim=0)
        return self.proj(bag)

    def encode_text(self, tokens: Sequence[str], kind: str = "full") -> TextEmbedding:
        return TextEmbedding(vector=self(tokens), source_kind=kind)


def visual_signature(encoder) -> str:
    """Hash of a visual encoder's effective parameters/config.

    Used to assert the visual path stays frozen across training.
    """
    if hasattr(encoder, "signature"):
        return encoder.signature()
    if isinstance(encoder, nn.Module):
        h = hashlib.sha256()
        for name, tensor in sorted(encoder.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()
    raise TypeError(f"cannot fingerprint {type(encoder)!r}")


# ---------------------------------------------------------------------------
# Feature cache

def save_features(path, feats: FrameFeatures) -> None:
    """Write the binary cache record: VDIF header then f32 blocks."""
    d, lv = feats.dim, feats.num_frames
    h, w = feats.grid
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<5I", CACHE_VERSION, d, lv, h, w))
        f.write(feats.global_.detach().cpu().numpy()
                .astype("<f4").tobytes())
        f.write(feats.patches.detach().cpu().numpy()
                .astype("<f4").tobytes())


def load_features(path, dtype: torch.dtype = torch.float64) -> FrameFeatures:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CACHE_MAGIC:
            raise ValueError(f"{path}: not a feature cache file")
        version, d, lv, h, w = struct.unpack("<5I", f.read(20))
        if version != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        global_ = np.frombuffer(f.read(4 * d * lv), dtype="<f4")
        patches = np.frombuffer(f.read(4 * lv * d * h * w), dtype="<f4")
    return FrameFeatures(
        global_=torch.as_tensor(global_.reshape(d, lv).copy(), dtype=dtype),
        patches=torch.as_tensor(patches.reshape(lv, d, h, w).copy(), dtype=dtype),
    )


class FeatureCache:
    """Disk cache of encoded FrameFeatures keyed by (video, encoder, L)."""

    def __init__(self, root: str | os.PathLike | None = None):
        if root is None:
            root = os.environ.get("VDI_CACHE_DIR", ".vdi_cache")
        self.root = Path(root)

    def path_for(self, video_id: str, encoder_id: str, num_frames: int) -> Path:
        key = f"{video_id}|{encoder_id}|{num_frames}"
        digest = hashlib.sha256(key.encode()).hexdigest()[:32]
        return self.root / f"{digest}.vdif"

    def get_or_encode(self, video_id: str, encoder, frames,
                      dtype: torch.dtype = torch.float64) -> FrameFeatures:
        path = self.path_for(video_id, encoder.encoder_id, len(frames))
        if path.exists():
            return load_features(path, dtype=dtype)
        feats = encoder.encode_frames(frames)
        self.root.mkdir(parents=True, exist_ok=True)
        save_features(path, feats)
        # Reload so cached and uncached calls agree bit-for-bit (the file
        # stores f32).
        return load_features(path, dtype=dtype)
