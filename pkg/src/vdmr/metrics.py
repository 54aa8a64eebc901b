"""Evaluation: temporal IoU, R@n at IoU thresholds, mean IoU, and the
three-way query probe (full vs static vs dynamic retrieval)."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import EmptyContent, MissingPrediction
from .text import parse_query

DEFAULT_NS = (1, 5)
DEFAULT_MUS = (0.5, 0.7)


def temporal_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Interval intersection-over-union; 0 when the union is degenerate."""
    for iv in (a, b):
        if iv[1] < iv[0]:
            raise ValueError(f"interval {iv} has end < start")
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    if union <= 0.0:
        return 0.0
    return inter / union


@dataclass
class EvalReport:
    recall: dict[tuple[int, float], float]  # (n, mu) -> percentage
    miou: float
    num_queries: int
    excluded: int = 0

    def to_dict(self) -> dict:
        return {
            "recall": {f"R@{n},IoU={mu}": v
                       for (n, mu), v in sorted(self.recall.items())},
            "mIoU": self.miou,
            "num_queries": self.num_queries,
            "excluded": self.excluded,
        }


def evaluate(preds: dict[str, list[tuple[float, float, float]]],
             gts: dict[str, tuple[float, float]],
             ns: tuple[int, ...] = DEFAULT_NS,
             mus: tuple[float, ...] = DEFAULT_MUS) -> EvalReport:
    """Recall and mean IoU over ranked per-query predictions.

    A query counts toward R@n,mu when one of its top-n predictions has
    IoU strictly greater than mu.  mIoU uses the top-1 prediction only.
    """
    if not gts:
        raise MissingPrediction("no queries to evaluate")
    hits = {(n, mu): 0 for n in ns for mu in mus}
    iou_sum = 0.0
    for qid, gt in gts.items():
        ranked = preds.get(qid)
        if not ranked:
            raise MissingPrediction(f"query {qid!r} has no predictions")
        ious = [temporal_iou((s, e), gt) for s, e, _ in ranked]
        iou_sum += ious[0]
        for n in ns:
            best = max(ious[:n])
            for mu in mus:
                if best > mu:
                    hits[(n, mu)] += 1
    total = len(gts)
    recall = {key: 100.0 * count / total for key, count in hits.items()}
    return EvalReport(recall=recall, miou=100.0 * iou_sum / total,
                      num_queries=total)


def dynamics_probe(model, samples, ns=DEFAULT_NS, mus=DEFAULT_MUS,
                   chunker=None) -> dict[str, EvalReport]:
    """Evaluate retrieval with the full, static and dynamic queries.

    `model` must expose predict(tokens, video_id, kind) returning ranked
    (start, end, score) segments.  Queries whose masked view would be
    all-mask are excluded from that masked run; the exclusion count is
    reported on the corresponding EvalReport.
    """
    gts = {s.query_id: (s.annotation.start_s, s.annotation.end_s)
           for s in samples}
    reports: dict[str, EvalReport] = {}
    for kind in ("full", "static", "dynamic"):
        preds: dict[str, list] = {}
        excluded = 0
        kind_gts = {}
        for sample in samples:
            tokens = list(sample.annotation.query.tokens)
            if kind != "full":
                try:
                    pair = parse_query(sample.annotation.query.raw, chunker)
                except EmptyContent:
                    excluded += 1
                    continue
                tokens = (pair.static_query if kind == "static"
                          else pair.dynamic_query)
            pred = model.predict(tokens, sample, kind=kind)
            preds[sample.query_id] = pred.segments
            kind_gts[sample.query_id] = gts[sample.query_id]
        report = evaluate(preds, kind_gts, ns=ns, mus=mus)
        report.excluded = excluded
        reports[kind] = report
    return reports
