import csv
import logging
import os
import time
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.exception import MissingIdentityError, NoRelevantItemError, ShapeMismatchError
from app.net import EmbeddingBatch, TwoStreamNet
from app.schemas import (PROTOCOLS, DatasetManifest, EvalConfig, EvalProtocol, EvalReport, ForwardMode, Modality,
                         RankedList, SimilarityMetric)
from app.synth_data import ImageStore
from app.tensor import Tensor, no_grad
from app.utils import gen_props

logger = logging.getLogger(__name__)

REPORTED_RANKS = (1, 5, 10, 20)


def build_protocol(manifest: DatasetManifest, name: str) -> EvalProtocol:
    """Single-shot protocol: every test image of one modality queries every test image of the other."""
    if name not in PROTOCOLS:
        raise KeyError(f"unknown protocol {name!r}; expected one of {sorted(PROTOCOLS)}")
    query_modality, gallery_modality = PROTOCOLS[name]
    query_indices = [i for i, s in enumerate(manifest.test_specs) if Modality(s.modality) is query_modality]
    gallery_indices = [i for i, s in enumerate(manifest.test_specs) if Modality(s.modality) is gallery_modality]
    return EvalProtocol(
        name=name, query_modality=query_modality, gallery_modality=gallery_modality,
        query_specs=[manifest.test_specs[i] for i in query_indices],
        gallery_specs=[manifest.test_specs[i] for i in gallery_indices],
        query_indices=query_indices, gallery_indices=gallery_indices,
    )


def extract_embeddings(net: TwoStreamNet, store: ImageStore, indices: Sequence[int], split: str = "test",
                       batch_size: int = 64) -> EmbeddingBatch:
    """Eval-mode embeddings for the given specs, returned in the order of ``indices``."""
    specs = store.specs(split)
    vectors = np.zeros((len(indices), net.embedding_dim))
    by_modality: Dict[Modality, List[int]] = {Modality.RGB: [], Modality.IR: []}
    for row, index in enumerate(indices):
        by_modality[Modality(specs[index].modality)].append(row)

    with no_grad():
        for modality, rows in by_modality.items():
            for start in range(0, len(rows), batch_size):
                chunk = rows[start:start + batch_size]
                images = store.stack(split, [indices[r] for r in chunk])
                output = net.forward_embed({modality: images}, mode=ForwardMode.EVAL, compute_logits=False)
                vectors[chunk] = output.embeddings.vectors.data
    return EmbeddingBatch(Tensor(vectors), [specs[i].identity for i in indices],
                          [Modality(specs[i].modality) for i in indices])


def similarity(query: np.ndarray, gallery: np.ndarray,
               metric: SimilarityMetric = SimilarityMetric.COSINE) -> np.ndarray:
    query, gallery = np.asarray(query, dtype=np.float64), np.asarray(gallery, dtype=np.float64)
    if query.ndim != 2 or gallery.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise ShapeMismatchError("similarity", "embedding dimension", query.shape, gallery.shape)
    if SimilarityMetric(metric) is SimilarityMetric.EUCLIDEAN:
        diff = query[:, None, :] - gallery[None, :, :]
        return -np.sqrt((diff * diff).sum(axis=2))
    # zero vectors get similarity 0
    qn = np.linalg.norm(query, axis=1, keepdims=True)
    gn = np.linalg.norm(gallery, axis=1, keepdims=True)
    q = np.divide(query, qn, out=np.zeros_like(query), where=qn > 0)
    g = np.divide(gallery, gn, out=np.zeros_like(gallery), where=gn > 0)
    return q @ g.T


def rank(query: np.ndarray, gallery: np.ndarray, metric: SimilarityMetric = SimilarityMetric.COSINE):
    """Gallery indices per query by descending similarity; equal scores keep gallery order."""
    scores = similarity(query, gallery, metric)
    order = np.argsort(-scores, axis=1, kind="stable")
    return order, np.take_along_axis(scores, order, axis=1)


def _matches(rankings: np.ndarray, query_ids: Sequence[int], gallery_ids: Sequence[int]) -> np.ndarray:
    gallery_ids = np.asarray(gallery_ids)
    return gallery_ids[np.asarray(rankings)] == np.asarray(query_ids)[:, None]


def cmc_curve(rankings: np.ndarray, query_ids: Sequence[int], gallery_ids: Sequence[int],
              max_rank: int = 20) -> np.ndarray:
    matches = _matches(rankings, query_ids, gallery_ids)
    missing = ~matches.any(axis=1)
    if missing.any():
        q = int(np.flatnonzero(missing)[0])
        raise MissingIdentityError(f"query {q} (identity {query_ids[q]}) has no match in the gallery")
    max_rank = min(max_rank, matches.shape[1])
    first_hit = matches.argmax(axis=1)
    cmc = (first_hit[:, None] <= np.arange(max_rank)[None, :]).mean(axis=0)
    return cmc.astype(np.float64)


def average_precision(relevance: Sequence[int]) -> float:
    relevance = np.asarray(relevance, dtype=np.float64)
    num_rel = relevance.sum()
    if num_rel == 0:
        raise NoRelevantItemError("ranked list contains no relevant item")
    precision_at_k = relevance.cumsum() / np.arange(1, len(relevance) + 1)
    return float((precision_at_k * relevance).sum() / num_rel)


def mean_ap(rankings: np.ndarray, query_ids: Sequence[int], gallery_ids: Sequence[int]) -> float:
    matches = _matches(rankings, query_ids, gallery_ids)
    aps = []
    for q, relevance in enumerate(matches):
        if not relevance.any():
            raise NoRelevantItemError(f"query {q} (identity {query_ids[q]}) has no relevant gallery item")
        aps.append(average_precision(relevance))
    return float(np.mean(aps))


def evaluate(net: TwoStreamNet, manifest: DatasetManifest, store: ImageStore, protocol_name: str,
             config: Optional[EvalConfig] = None, seed: int = 0, keep_ranked: bool = False,
             context: Optional[Dict] = None) -> EvalReport:
    config = config or EvalConfig()
    start_time = time.perf_counter()
    protocol = build_protocol(manifest, protocol_name)
    query = extract_embeddings(net, store, protocol.query_indices, batch_size=config.batch_size)
    gallery = extract_embeddings(net, store, protocol.gallery_indices, batch_size=config.batch_size)

    order, scores = rank(query.vectors.data, gallery.vectors.data, config.metric)
    cmc = cmc_curve(order, query.identities, gallery.identities, config.max_rank)
    m_ap = mean_ap(order, query.identities, gallery.identities)

    ranked = []
    if keep_ranked:
        depth = min(config.max_rank, order.shape[1])
        gallery_ids = np.asarray(gallery.identities)
        for q in range(order.shape[0]):
            ranked.append(RankedList(query=protocol.query_indices[q], query_id=query.identities[q],
                                     gallery=[protocol.gallery_indices[g] for g in order[q, :depth]],
                                     gallery_ids=gallery_ids[order[q, :depth]].tolist(),
                                     scores=scores[q, :depth].tolist()))

    report = EvalReport(protocol=protocol_name, query_modality=protocol.query_modality,
                        gallery_modality=protocol.gallery_modality, seed=seed, metric=config.metric,
                        cmc=cmc.tolist(), map=m_ap, ranked=ranked)
    logger.info(f"Evaluated {protocol_name}: rank1={report.rank(1):.4f} mAP={m_ap:.4f}",
                extra=gen_props(context, operation="evaluate", protocol=protocol_name, rank1=report.rank(1),
                                map=m_ap, execution_time=time.perf_counter() - start_time))
    return report


def format_report(reports: Sequence[EvalReport]) -> str:
    header = "| protocol | " + " | ".join(f"rank{r}" for r in REPORTED_RANKS) + " | mAP |"
    lines = [header, "|" + "---|" * (len(REPORTED_RANKS) + 2)]
    for report in reports:
        cells = " | ".join(f"{100 * report.rank(r):.2f}" for r in REPORTED_RANKS)
        lines.append(f"| {report.protocol} | {cells} | {100 * report.map:.2f} |")
    return "\n".join(lines)


def dump_ranks_csv(report: EvalReport, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query", "query_id", "rank", "gallery", "gallery_id", "score"])
        for ranked in report.ranked:
            for position, (g, gid, score) in enumerate(zip(ranked.gallery, ranked.gallery_ids, ranked.scores), 1):
                writer.writerow([ranked.query, ranked.query_id, position, g, gid, repr(score)])
    return path
