"""Joint training: the four-term weighted loss, AdamW with a reduced
text-encoder learning rate, early stopping on validation recall, and
checkpointing."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .context import VisualContextInjection
from .data import MomentDataset, Sample
from .dynamics import SpatialDynamicInjection
from .encoders import (FeatureCache, FrameFeatures, StubTextEncoder,
                       StubVisualEncoder, TextEmbedding)
from .errors import ConfigError, EmptyContent
from .metrics import EvalReport, evaluate
from .moments import (MomentPrediction, MomentRetrievalHead, NegativeSets,
                      SegmentGrid, contrastive_loss, fuse_and_decode,
                      iou_label_map, iou_loss, scores_to_probabilities)
from .text import Chunker, parse_query


@dataclass
class TrainConfig:
    lambda_iou: float = 1.0
    lambda_cl: float = 1.0
    lambda_vc: float = 0.5
    lambda_sd: float = 0.01
    base_lr: float = 1e-4
    text_lr_ratio: float = 0.1
    weight_decay: float = 1e-2
    batch_size: int = 8
    seed: int = 0
    max_epochs: int = 100
    patience: int = 5
    dim: int = 64
    lv: int = 16
    grid: tuple[int, int] = (2, 2)
    conv_layers: int = 2
    sigma: float = 0.1
    tau: float = 0.1

    def validate(self) -> None:
        for name in ("lambda_iou", "lambda_cl", "lambda_vc", "lambda_sd"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 < self.text_lr_ratio <= 1:
            raise ConfigError("text_lr_ratio must be in (0, 1]")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.lambda_sd > 0 and self.batch_size < 2:
            raise ConfigError("pairwise loss needs batch_size >= 2")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be positive")
        if self.patience < 0:
            raise ConfigError("patience must be non-negative")
        if self.sigma <= 0 or self.tau <= 0:
            raise ConfigError("sigma and tau must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "grid" in kwargs:
            kwargs["grid"] = tuple(kwargs["grid"])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as f:
            try:
                return cls.from_dict(json.load(f))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None


@dataclass
class TrainState:
    epoch: int = 0
    best_metric: float = float("-inf")
    best_epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    breakdown_history: list[dict] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)
    rng_state: torch.Tensor | None = None


class VDIModel(nn.Module):
    """Full pipeline: encoders, the two injection modules (training
    only), and the 2D proposal head used at inference."""

    def __init__(self, config: TrainConfig, visual_encoder=None,
                 text_encoder: nn.Module | None = None,
                 chunker: Chunker | None = None,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.config = config
        self.dtype = dtype
        self.chunker = chunker
        self.visual_encoder = visual_encoder if visual_encoder is not None \
            else StubVisualEncoder(dim=config.dim, grid=config.grid,
                                   seed=config.seed, dtype=dtype)
        self.text_encoder = text_encoder if text_encoder is not None \
            else StubTextEncoder(dim=config.dim, seed=config.seed, dtype=dtype)
        self.vci = VisualContextInjection(config.dim, max_frames=config.lv,
                                          dtype=dtype)
        self.sdi = SpatialDynamicInjection(config.dim, grid=config.grid,
                                           max_frames=config.lv, dtype=dtype)
        self.head = MomentRetrievalHead(config.dim,
                                        conv_layers=config.conv_layers,
                                        dtype=dtype)
        self._dataset: MomentDataset | None = None
        self._feature_memo: dict[str, FrameFeatures] = {}
        self._disk_cache: FeatureCache | None = None

    # -- data plumbing ----------------------------------------------------

    def attach_dataset(self, dataset: MomentDataset,
                       disk_cache: FeatureCache | None = None) -> None:
        self._dataset = dataset
        self._feature_memo = {}
        self._disk_cache = disk_cache

    def features(self, video_id: str) -> FrameFeatures:
        feats = self._feature_memo.get(video_id)
        if feats is None:
            if self._dataset is None:
                raise RuntimeError("no dataset attached")
            frames = self._dataset.frames(video_id)
            if self._disk_cache is not None:
                feats = self._disk_cache.get_or_encode(
                    video_id, self.visual_encoder, frames, dtype=self.dtype)
            else:
                feats = self.visual_encoder.encode_frames(frames)
            self._feature_memo[video_id] = feats
        return feats

    def grid_for(self, annotation) -> SegmentGrid:
        return SegmentGrid(duration=annotation.duration_s,
                           num_frames=self.config.lv)

    # -- trainable parameter groups ---------------------------------------

    def text_parameters(self):
        return list(self.text_encoder.parameters())

    def other_parameters(self):
        return (list(self.vci.parameters()) + list(self.sdi.parameters())
                + list(self.head.parameters()))

    # -- inference ---------------------------------------------------------

    def predict(self, tokens, sample: Sample, kind: str = "full"
                ) -> MomentPrediction:
        with torch.no_grad():
            query = self.text_encoder(list(tokens))
            feats = self.features(sample.annotation.video_id)
            seg_map = self.head.build_segment_map(feats)
            iou_p = scores_to_probabilities(
                self.head.iou_scores(query, seg_map), self.config.sigma)
            cl_p = scores_to_probabilities(
                self.head.cl_scores(query, seg_map), self.config.sigma)
            return fuse_and_decode(iou_p, cl_p,
                                   grid=self.grid_for(sample.annotation))

    def masked_pair(self, annotation):
        return parse_query(annotation.query.raw, self.chunker)


def gt_cell(annotation, grid: SegmentGrid) -> tuple[int, int]:
    """Grid cell best matching the ground-truth interval."""
    lv = grid.num_frames
    s = min(lv - 1, max(0, int(round(annotation.start_s / grid.dt))))
    e = min(lv - 1, max(s, int(round(annotation.end_s / grid.dt)) - 1))
    return s, e


def total_loss(model: VDIModel, batch: list[Sample], config: TrainConfig
               ) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted four-term batch loss with a per-term breakdown.

    Samples whose query cannot be split into static/dynamic views keep
    their retrieval terms but are excluded from both injection terms.
    """
    n = len(batch)
    if n < 1:
        raise ConfigError("empty batch")
    need_injection = config.lambda_vc > 0 or config.lambda_sd > 0

    per_sample = []
    for sample in batch:
        ann = sample.annotation
        feats = model.features(ann.video_id)
        seg_map = model.head.build_segment_map(feats)
        query = model.text_encoder(list(ann.query.tokens))
        entry = {"sample": sample, "feats": feats, "seg_map": seg_map,
                 "query": query, "pair": None}
        if need_injection:
            try:
                entry["pair"] = model.masked_pair(ann)
            except EmptyContent:
                pass
        per_sample.append(entry)

    zero = per_sample[0]["query"].new_zeros(())
    iou_sum = zero.clone()
    cl_sum = zero.clone()
    vc_sum = zero.clone()

    # contrastive positives in the shared space, one per sample
    cl_queries = [model.head.cl_query_vector(e["query"]) for e in per_sample]
    cl_pos_cells = []
    for e in per_sample:
        grid = model.grid_for(e["sample"].annotation)
        s, t = gt_cell(e["sample"].annotation, grid)
        cells = model.head.cl_cell_features(e["seg_map"])
        e["gt_cell"] = (s, t)
        e["cl_cells"] = cells
        cl_pos_cells.append(cells[:, s, t])

    for idx, e in enumerate(per_sample):
        ann = e["sample"].annotation
        grid = model.grid_for(ann)
        labels = iou_label_map(ann.start_s, ann.end_s, grid, dtype=model.dtype)
        preds = model.head.iou_scores(e["query"], e["seg_map"])
        iou_sum = iou_sum + iou_loss(labels, preds, e["seg_map"].valid_mask,
                                     sigma=config.sigma)

        # moment negatives: every other valid cell of this video plus the
        # positive cells of the other batch videos
        s, t = e["gt_cell"]
        mask = e["seg_map"].valid_mask.clone()
        mask[s, t] = False
        own_negs = e["cl_cells"].permute(1, 2, 0)[mask]
        other_pos = [cl_pos_cells[j] for j in range(n) if j != idx]
        moment_negs = torch.cat([own_negs] + ([torch.stack(other_pos)]
                                              if other_pos else []), dim=0)
        query_negs = torch.stack([cl_queries[j] for j in range(n) if j != idx]) \
            if n > 1 else moment_negs.new_zeros((0, model.config.dim))
        cl_sum = cl_sum + contrastive_loss(
            cl_pos_cells[idx], cl_queries[idx],
            NegativeSets(moment_negatives=moment_negs,
                         query_negatives=query_negs,
                         temperature=config.tau))

    injectable = [e for e in per_sample if e["pair"] is not None]
    dynamic_embeddings = []
    dynamic_features = []
    if need_injection:
        for e in injectable:
            pair = e["pair"]
            x_qs = TextEmbedding(model.text_encoder(pair.static_query),
                                 source_kind="static")
            x_qd = TextEmbedding(model.text_encoder(pair.dynamic_query),
                                 source_kind="dynamic")
            ctx = model.vci.context_feature(x_qs, e["feats"])
            vc_sum = vc_sum + model.vci.loss(x_qd, ctx)
            dynamic_embeddings.append(x_qd)
            dynamic_features.append(model.sdi.video_dynamic(e["feats"]))

    iou_term = iou_sum / n
    cl_term = cl_sum / n
    vc_term = vc_sum / n
    if need_injection and len(injectable) >= 1:
        sd_term = model.sdi.batch_loss(dynamic_features, dynamic_embeddings)
    else:
        sd_term = zero

    total = (config.lambda_iou * iou_term + config.lambda_cl * cl_term
             + config.lambda_vc * vc_term + config.lambda_sd * sd_term)
    breakdown = {"iou": float(iou_term.detach()), "cl": float(cl_term.detach()),
                 "vc": float(vc_term.detach()), "sd": float(sd_term.detach()),
                 "total": float(total.detach())}
    return total, breakdown


def build_model(config: TrainConfig, chunker: Chunker | None = None,
                dtype: torch.dtype = torch.float64) -> VDIModel:
    """Seeded construction so identical configs give identical weights."""
    torch.manual_seed(config.seed)
    return VDIModel(config, chunker=chunker, dtype=dtype)


def evaluate_model(model: VDIModel, samples: list[Sample],
                   ns=(1, 5), mus=(0.5, 0.7)) -> EvalReport:
    preds = {}
    gts = {}
    for sample in samples:
        pred = model.predict(sample.annotation.query.tokens, sample)
        preds[sample.query_id] = pred.segments
        gts[sample.query_id] = (sample.annotation.start_s,
                                sample.annotation.end_s)
    return evaluate(preds, gts, ns=ns, mus=mus)


def fit(model: VDIModel, train_set: MomentDataset, val_set: MomentDataset,
        config: TrainConfig) -> TrainState:
    """Minimize the weighted loss with AdamW; the text encoder runs at a
    fraction of the base learning rate and the visual encoder is never
    optimized.  Stops when validation R@1,IoU=0.5 fails to improve."""
    config.validate()
    if not train_set.samples or not val_set.samples:
        raise ConfigError("empty train or validation split")

    optimizer = torch.optim.AdamW(
        [{"params": model.other_parameters(), "lr": config.base_lr},
         {"params": model.text_parameters(),
          "lr": config.base_lr * config.text_lr_ratio}],
        weight_decay=config.weight_decay)

    sampler = torch.Generator().manual_seed(config.seed)
    state = TrainState()
    best_snapshot = None
    evals_without_improvement = 0

    merged = MomentDataset(samples=train_set.samples,
                           payloads={**train_set.payloads, **val_set.payloads},
                           frames_per_video=train_set.frames_per_video)
    model.attach_dataset(merged)

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = torch.randperm(len(train_set.samples),
                               generator=sampler).tolist()
        epoch_losses = []
        epoch_breakdowns = []
        for lo in range(0, len(order), config.batch_size):
            batch = [train_set.samples[i]
                     for i in order[lo:lo + config.batch_size]]
            loss, breakdown = total_loss(model, batch, config)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
            epoch_breakdowns.append(breakdown)
        state.epoch = epoch
        state.loss_history.append(sum(epoch_losses) / len(epoch_losses))
        state.breakdown_history.append({
            k: sum(b[k] for b in epoch_breakdowns) / len(epoch_breakdowns)
            for k in epoch_breakdowns[0]})

        model.eval()
        report = evaluate_model(model, val_set.samples, ns=(1,), mus=(0.5,))
        metric = report.recall[(1, 0.5)]
        state.val_history.append(metric)
        if metric > state.best_metric:
            state.best_metric = metric
            state.best_epoch = epoch
            best_snapshot = copy.deepcopy(model.state_dict())
            evals_without_improvement = 0
        else:
            evals_without_improvement += 1
        if evals_without_improvement >= config.patience:
            break

    if best_snapshot is not None:
        model.load_state_dict(best_snapshot)
    state.rng_state = torch.get_rng_state()
    return state


# ---------------------------------------------------------------------------
# Checkpoints: inference blocks and training-only injection blocks are
# stored under separate keys so inference artifacts can drop the latter.

def save_checkpoint(path, model: VDIModel, config: TrainConfig,
                    state: TrainState | None = None,
                    include_injection: bool = True) -> None:
    payload = {
        "config": config.to_dict(),
        "text_encoder": model.text_encoder.state_dict(),
        "head": model.head.state_dict(),
        "visual_signature": model.visual_encoder.signature()
        if hasattr(model.visual_encoder, "signature") else None,
        "rng_state": torch.get_rng_state(),
    }
    if include_injection:
        payload["injection"] = {"vci": model.vci.state_dict(),
                                "sdi": model.sdi.state_dict()}
    if state is not None:
        payload["train_state"] = {
            "epoch": state.epoch, "best_metric": state.best_metric,
            "best_epoch": state.best_epoch,
            "loss_history": state.loss_history,
            "val_history": state.val_history,
        }
    torch.save(payload, path)


def load_checkpoint(path, chunker: Chunker | None = None,
                    dtype: torch.dtype = torch.float64
                    ) -> tuple[VDIModel, TrainConfig, dict]:
    payload = torch.load(path, weights_only=False)
    config = TrainConfig.from_dict(payload["config"])
    model = build_model(config, chunker=chunker, dtype=dtype)
    model.text_encoder.load_state_dict(payload["text_encoder"])
    model.head.load_state_dict(payload["head"])
    if "injection" in payload:
        model.vci.load_state_dict(payload["injection"]["vci"])
        model.sdi.load_state_dict(payload["injection"]["sdi"])
    return model, config, payload.get("train_state", {})
