"""2D temporal-proposal retrieval head.

Enumerates all start-end frame pairs as an upper-triangular feature map,
scores every candidate segment against the query in two projected spaces
(an IoU-supervised one and a contrastive one), and decodes the fused
score map to a temporal boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from .encoders import FrameFeatures
from .errors import DimensionMismatch, InvalidBoundary, ZeroVector

DEFAULT_SIGMA = 0.1  # cosine -> probability squashing temperature
DEFAULT_TAU = 0.1    # contrastive softmax temperature


@dataclass
class SegmentGrid:
    """Maps a proposal cell (i, j) to the interval [i*dt, (j+1)*dt)."""

    duration: float
    num_frames: int

    @property
    def dt(self) -> float:
        return self.duration / self.num_frames

    def interval(self, i: int, j: int) -> tuple[float, float]:
        return (i * self.dt, (j + 1) * self.dt)


@dataclass
class SegmentFeatureMap:
    features: torch.Tensor   # (D, L, L)
    valid_mask: torch.Tensor  # (L, L) bool, True iff j >= i

    @property
    def num_frames(self) -> int:
        return self.features.shape[1]


@dataclass
class ProposalScoreMap:
    scores: torch.Tensor  # (L, L)
    kind: str             # iou | cl | fused


@dataclass
class MomentPrediction:
    """Ranked candidate segments for one query.

    `segments` holds (start_s, end_s, score) sorted by descending score;
    `top_cell` is the decoded (start_idx, end_idx) grid cell.
    """

    top_cell: tuple[int, int]
    segments: list[tuple[float, float, float]] = field(default_factory=list)

    @property
    def top(self) -> tuple[float, float, float]:
        return self.segments[0]


def valid_mask(lv: int, device=None) -> torch.Tensor:
    idx = torch.arange(lv, device=device)
    return idx.unsqueeze(1) <= idx.unsqueeze(0)


def mean_pool_segments(frame_globals: torch.Tensor) -> torch.Tensor:
    """Mean of frame vectors over [i..j] for every valid cell.

    frame_globals: (D, L) -> (D, L, L); invalid cells are zero.
    """
    d, lv = frame_globals.shape
    csum = torch.cumsum(frame_globals, dim=1)
    csum = torch.cat([frame_globals.new_zeros(d, 1), csum], dim=1)  # (D, L+1)
    out = frame_globals.new_zeros(d, lv, lv)
    for i in range(lv):
        for j in range(i, lv):
            out[:, i, j] = (csum[:, j + 1] - csum[:, i]) / (j - i + 1)
    return out


def temporal_iou_interval(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_label_map(gt_start: float, gt_end: float, grid: SegmentGrid,
                  dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Per-cell temporal IoU against the ground-truth interval."""
    if gt_end <= gt_start:
        raise InvalidBoundary(f"ground truth [{gt_start}, {gt_end}] is empty")
    lv = grid.num_frames
    labels = torch.zeros(lv, lv, dtype=dtype)
    for i in range(lv):
        for j in range(i, lv):
            labels[i, j] = temporal_iou_interval((gt_start, gt_end),
                                                 grid.interval(i, j))
    return labels


def cosine_map(query_vec: torch.Tensor, cell_features: torch.Tensor,
               mask: torch.Tensor) -> torch.Tensor:
    """Cosine of the query against each valid cell feature.

    query_vec: (D,), cell_features: (D, L, L) -> (L, L) with zeros at
    invalid cells.
    """
    qn = torch.linalg.vector_norm(query_vec)
    if qn.item() == 0.0:
        raise ZeroVector("query projection has zero norm")
    cn = torch.linalg.vector_norm(cell_features, dim=0)
    if (cn[mask] == 0).any().item():
        raise ZeroVector("a valid cell feature has zero norm")
    scores = torch.einsum("d,dij->ij", query_vec, cell_features)
    denom = torch.where(cn > 0, cn * qn, torch.ones_like(cn))
    return torch.where(mask, scores / denom, torch.zeros_like(scores))


def scores_to_probabilities(scores: ProposalScoreMap,
                            sigma: float = DEFAULT_SIGMA) -> ProposalScoreMap:
    """Squash cosine scores into (0, 1) with a temperatured sigmoid."""
    return ProposalScoreMap(scores=torch.sigmoid(scores.scores / sigma),
                            kind=scores.kind)


def iou_loss(labels: torch.Tensor, preds: ProposalScoreMap,
             mask: torch.Tensor, sigma: float = DEFAULT_SIGMA) -> torch.Tensor:
    """Mean BCE over valid cells against soft IoU targets.

    `preds` carries raw cosine scores; they are sigmoid-squashed here.
    """
    if labels.shape != preds.scores.shape:
        raise DimensionMismatch("label/prediction shapes differ")
    logits = preds.scores[mask] / sigma
    y = labels[mask]
    return F.binary_cross_entropy_with_logits(logits, y)


@dataclass
class NegativeSets:
    moment_negatives: torch.Tensor  # (Nm, D), possibly empty
    query_negatives: torch.Tensor   # (Nq, D), possibly empty
    temperature: float = DEFAULT_TAU

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def _cosine_rows(rows: torch.Tensor, vec: torch.Tensor) -> torch.Tensor:
    norms = torch.linalg.vector_norm(rows, dim=1) * torch.linalg.vector_norm(vec)
    return (rows @ vec) / norms


def contrastive_loss(pos_moment: torch.Tensor, pos_query: torch.Tensor,
                     negs: NegativeSets) -> torch.Tensor:
    """Two-way InfoNCE: the moment against moment negatives and the
    query against query negatives, sharing the positive-pair logit."""
    tau = negs.temperature
    pos_logit = (F.cosine_similarity(pos_moment, pos_query, dim=0) / tau)

    def nce(neg_rows: torch.Tensor, anchor: torch.Tensor) -> torch.Tensor:
        if neg_rows.numel() == 0:
            return pos_logit.new_zeros(())
        logits = torch.cat([pos_logit.unsqueeze(0),
                            _cosine_rows(neg_rows, anchor) / tau])
        return torch.logsumexp(logits, dim=0) - pos_logit

    return (nce(negs.moment_negatives, pos_query)
            + nce(negs.query_negatives, pos_moment))


def fuse_probability_maps(iou_probs: ProposalScoreMap,
                          cl_probs: ProposalScoreMap,
                          mask: torch.Tensor) -> torch.Tensor:
    if iou_probs.scores.shape != cl_probs.scores.shape:
        raise DimensionMismatch("score map shapes differ")
    fused = iou_probs.scores * cl_probs.scores
    return torch.where(mask, fused, torch.full_like(fused, float("-inf")))


def fuse_and_decode(iou_probs: ProposalScoreMap, cl_probs: ProposalScoreMap,
                    grid: SegmentGrid | None = None) -> MomentPrediction:
    """Hadamard-fuse the two probability maps and decode the boundary.

    Start index: the row whose row-maximum (over j >= i) is largest;
    end index: the argmax within that row.  Equivalent to the global
    argmax over valid cells.  Also returns every valid cell ranked by
    fused score for top-n recall.
    """
    lv = iou_probs.scores.shape[0]
    mask = valid_mask(lv, device=iou_probs.scores.device)
    fused = fuse_probability_maps(iou_probs, cl_probs, mask)
    row_max, row_argmax = fused.max(dim=1)
    start = int(row_max.argmax().item())
    end = int(row_argmax[start].item())

    if grid is None:
        grid = SegmentGrid(duration=float(lv), num_frames=lv)
    cells = [(i, j, float(fused[i, j].item()))
             for i in range(lv) for j in range(i, lv)]
    cells.sort(key=lambda c: -c[2])
    segments = [(*grid.interval(i, j), score) for i, j, score in cells]
    return MomentPrediction(top_cell=(start, end), segments=segments)


class MomentRetrievalHead(nn.Module):
    """Segment-map construction and the two scoring spaces."""

    def __init__(self, dim: int, conv_layers: int = 2, kernel: int = 3,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.dim = dim
        convs: list[nn.Module] = []
        for layer in range(conv_layers):
            if layer > 0:
                convs.append(nn.GELU())
            convs.append(nn.Conv2d(dim, dim, kernel, padding=kernel // 2).to(dtype))
        self.conv = nn.Sequential(*convs)
        self.iou_query_proj = nn.Linear(dim, dim).to(dtype)
        self.iou_cell_proj = nn.Conv2d(dim, dim, 1).to(dtype)
        self.cl_query_proj = nn.Linear(dim, dim).to(dtype)
        self.cl_cell_proj = nn.Conv2d(dim, dim, 1).to(dtype)

    def build_segment_map(self, frames: FrameFeatures) -> SegmentFeatureMap:
        base = mean_pool_segments(frames.global_.detach())
        mask = valid_mask(base.shape[1], device=base.device)
        if len(self.conv):
            x = torch.where(mask, base, torch.zeros_like(base))
            x = self.conv(x.unsqueeze(0)).squeeze(0)
            x = torch.where(mask, x, torch.zeros_like(x))
        else:
            x = base
        return SegmentFeatureMap(features=x, valid_mask=mask)

    def _cell_space(self, seg_map: SegmentFeatureMap,
                    proj: nn.Conv2d) -> torch.Tensor:
        return proj(seg_map.features.unsqueeze(0)).squeeze(0)

    def iou_scores(self, query_vec: torch.Tensor,
                   seg_map: SegmentFeatureMap) -> ProposalScoreMap:
        cells = self._cell_space(seg_map, self.iou_cell_proj)
        scores = cosine_map(self.iou_query_proj(query_vec), cells,
                            seg_map.valid_mask)
        return ProposalScoreMap(scores=scores, kind="iou")

    def cl_scores(self, query_vec: torch.Tensor,
                  seg_map: SegmentFeatureMap) -> ProposalScoreMap:
        cells = self._cell_space(seg_map, self.cl_cell_proj)
        scores = cosine_map(self.cl_query_proj(query_vec), cells,
                            seg_map.valid_mask)
        return ProposalScoreMap(scores=scores, kind="cl")

    def cl_cell_features(self, seg_map: SegmentFeatureMap) -> torch.Tensor:
        """Contrastive-space features for every cell: (D, L, L)."""
        return self._cell_space(seg_map, self.cl_cell_proj)

    def cl_query_vector(self, query_vec: torch.Tensor) -> torch.Tensor:
        return self.cl_query_proj(query_vec)
