"""Exact Euclidean ranking and the retrieval metrics (Recall@K, AP),
reported per environmental condition with a mean row over the ten seen
conditions; the fog+rain+snow mixture is reported separately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import weather as W
from .dataset import SyntheticDataset, Task, load_eval_set
from .errors import InputError, UsageError
from .model import MuSeNet, extract_embedding
from .tensor import Tensor

RECALL_KS = (1, 5, 10)
SEEN_CONDITIONS = tuple(W.StyleKind)
EMBED_BATCH = 16


@dataclass
class RetrievalMetrics:
    recall_at: dict[int, float]
    ap: float
    num_queries: int


@dataclass
class ConditionReport:
    # one row per (task, condition token); means carry task -> metrics over
    # exactly the ten seen conditions, present only when all ten were run
    rows: list[tuple[str, str, RetrievalMetrics]]
    means: dict[str, RetrievalMetrics]


def rank(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Gallery indices by ascending L2 distance; ties break to lower index."""
    query = np.asarray(query, dtype=np.float32).reshape(-1)
    gallery = np.asarray(gallery, dtype=np.float32)
    if gallery.ndim != 2 or gallery.shape[1] != query.shape[0]:
        raise InputError(
            f"gallery {gallery.shape} does not match query dimension {query.shape[0]}")
    diff = gallery - query
    d2 = np.sum(diff * diff, axis=1, dtype=np.float64)  # f32 products, f64 accumulation
    return np.argsort(d2, kind="stable")


def recall_at_k(ranking: np.ndarray, relevant: set, k: int) -> float:
    """1.0 iff any relevant index appears in the first k positions."""
    if k < 1:
        raise UsageError(f"recall needs k >= 1, got {k}")
    if not relevant:
        raise UsageError("recall needs a non-empty relevant set")
    return 1.0 if any(int(i) in relevant for i in ranking[:k]) else 0.0


def average_precision(ranking: np.ndarray, relevant: set) -> float:
    """Interpolation-free PR area: mean of precision at each hit rank."""
    if not relevant:
        raise UsageError("average precision needs a non-empty relevant set")
    precisions = []
    hits = 0
    for position, idx in enumerate(ranking, start=1):
        if int(idx) in relevant:
            hits += 1
            precisions.append(hits / position)
    return float(np.sum(precisions) / len(relevant)) if precisions else 0.0


def _aggregate(rankings, relevant_sets) -> RetrievalMetrics:
    recalls = {k: 0.0 for k in RECALL_KS}
    ap_total = 0.0
    for ranking, relevant in zip(rankings, relevant_sets):
        for k in RECALL_KS:
            recalls[k] += recall_at_k(ranking, relevant, k)
        ap_total += average_precision(ranking, relevant)
    n = len(rankings)
    return RetrievalMetrics(
        recall_at={k: v / n for k, v in recalls.items()},
        ap=ap_total / n,
        num_queries=n,
    )


def embed_images(model: MuSeNet, images: np.ndarray, l2_normalize: bool = False) -> np.ndarray:
    """Eval-mode retrieval embeddings for a uint8 N x S x S x 3 stack."""
    from .model import normalize_images

    chunks = []
    for start in range(0, len(images), EMBED_BATCH):
        batch = normalize_images(images[start:start + EMBED_BATCH])
        chunks.append(extract_embedding(model, Tensor(batch)).data)
    out = np.concatenate(chunks, axis=0)
    if l2_normalize:
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        out = out / np.maximum(norms, 1e-12)
    return out


def _condition_token(condition) -> str:
    if condition == W.UNSEEN_COMPOSITE:
        return W.UNSEEN_COMPOSITE
    return W.TOKEN_OF_STYLE[condition]


def _metrics_for(model, dataset, condition, task, cached_galleries, cached_queries,
                 l2_normalize) -> RetrievalMetrics:
    eval_set = load_eval_set(dataset, condition, task)
    if task is Task.DRONE_TO_SAT:
        # the satellite gallery never changes with the condition
        if task not in cached_galleries:
            cached_galleries[task] = embed_images(model, eval_set.gallery_images, l2_normalize)
        gallery = cached_galleries[task]
        queries = embed_images(model, eval_set.query_images, l2_normalize)
    else:
        if task not in cached_queries:
            cached_queries[task] = embed_images(model, eval_set.query_images, l2_normalize)
        queries = cached_queries[task]
        gallery = embed_images(model, eval_set.gallery_images, l2_normalize)

    rankings, relevant_sets = [], []
    for qi in range(len(queries)):
        qid = eval_set.query_ids[qi]
        relevant = {int(i) for i in np.flatnonzero(eval_set.gallery_ids == qid)}
        rankings.append(rank(queries[qi], gallery))
        relevant_sets.append(relevant)
    return _aggregate(rankings, relevant_sets)


def evaluate(model: MuSeNet, dataset: SyntheticDataset, conditions, tasks,
             l2_normalize: bool = False) -> ConditionReport:
    """Metrics per (condition, task); adds a per-task mean row over the ten
    seen conditions whenever all of them were evaluated."""
    from .tensor import blas_single_thread

    conditions = list(conditions)
    for condition in conditions:
        if condition != W.UNSEEN_COMPOSITE and not isinstance(condition, W.StyleKind):
            raise UsageError(f"unknown condition {condition!r}")
    rows = []
    means = {}
    for task in tasks:
        cached_galleries, cached_queries = {}, {}
        seen_metrics = []
        for condition in conditions:
            with blas_single_thread():
                metrics = _metrics_for(model, dataset, condition, task,
                                       cached_galleries, cached_queries, l2_normalize)
            rows.append((task.value, _condition_token(condition), metrics))
            if condition != W.UNSEEN_COMPOSITE:
                seen_metrics.append(metrics)
        if len(seen_metrics) == len(SEEN_CONDITIONS):
            means[task.value] = RetrievalMetrics(
                recall_at={k: float(np.mean([m.recall_at[k] for m in seen_metrics]))
                           for k in RECALL_KS},
                ap=float(np.mean([m.ap for m in seen_metrics])),
                num_queries=seen_metrics[0].num_queries,
            )
    return ConditionReport(rows=rows, means=means)


def report_to_csv(report: ConditionReport, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("condition,task,r1,r5,r10,ap,num_queries\n")
        for task, token, m in report.rows:
            fh.write(f"{token},{task},{m.recall_at[1]:.4f},{m.recall_at[5]:.4f},"
                     f"{m.recall_at[10]:.4f},{m.ap:.4f},{m.num_queries}\n")
        for task, m in report.means.items():
            fh.write(f"mean,{task},{m.recall_at[1]:.4f},{m.recall_at[5]:.4f},"
                     f"{m.recall_at[10]:.4f},{m.ap:.4f},{m.num_queries}\n")


def style_accuracy(model: MuSeNet, dataset: SyntheticDataset) -> float:
    """Style-classifier accuracy on held-out identities across all 11 labels:
    test satellites (label 0) plus each test drone image under every
    condition (frozen evaluation styling, labels 1..10)."""
    from .model import Mode, forward, normalize_images

    images, labels = [], []
    for gid in dataset.test_ids:
        images.append(dataset.satellite_image("test", gid))
        labels.append(0)
    for style in W.StyleKind:
        eval_set = load_eval_set(dataset, style, Task.DRONE_TO_SAT)
        for img in eval_set.query_images:
            images.append(img)
            labels.append(W.style_label(W.Platform.DRONE, style))
    labels = np.asarray(labels)

    correct = 0
    rng = np.random.default_rng(0)
    from .tensor import no_grad
    with no_grad():
        for start in range(0, len(images), EMBED_BATCH):
            chunk = np.stack(images[start:start + EMBED_BATCH])
            out = forward(model, Tensor(normalize_images(chunk)), Mode.EVAL, rng)
            predictions = out.style_logits.data.argmax(axis=1)
            correct += int((predictions == labels[start:start + len(chunk)]).sum())
    return correct / len(images)
