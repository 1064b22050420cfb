from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.exception import DegenerateBatchError, ModalityError, NonScalarLossError, ShapeMismatchError
from app.functional import cross_entropy, paired_distances, pairwise_distances, take
from app.net import EmbeddingBatch, ForwardOutput
from app.schemas import ContrastiveConfig, Modality
from app.tensor import Tensor, as_tensor, relu, softplus

Scalar = Union[Tensor, float]


@dataclass
class CrossModalPairSet:
    """One random perfect matching of the RGB rows onto the IR rows of a batch."""
    rgb_index: np.ndarray
    ir_index: np.ndarray
    labels: np.ndarray

    @property
    def pairs(self) -> List[Tuple[int, int, int]]:
        return [(int(r), int(i), int(l)) for r, i, l in zip(self.rgb_index, self.ir_index, self.labels)]

    def __len__(self):
        return len(self.labels)


@dataclass
class LossTerms:
    l_id: Tensor
    l_tri: Tensor
    l_c: Tensor
    total: Tensor

    def as_floats(self) -> dict:
        return {"l_id": self.l_id.item(), "l_tri": self.l_tri.item(),
                "l_c": self.l_c.item(), "total": self.total.item()}


def id_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    return cross_entropy(logits, labels)


def wrt_triplet(embeddings: EmbeddingBatch) -> Tensor:
    """Weighted-regularisation triplet loss.

    For anchor i: softplus(sum_p w_p d_ip - sum_n w_n d_in) with w_p a softmax over
    positive distances (anchor excluded) and w_n a softmax over negated negative
    distances; the result is the mean over anchors.
    """
    ids = np.asarray(embeddings.identities)
    same = ids[:, None] == ids[None, :]
    pos_mask = same & ~np.eye(len(ids), dtype=bool)
    neg_mask = ~same
    if not pos_mask.any(axis=1).all() or not neg_mask.any(axis=1).all():
        lonely = int(np.flatnonzero(~pos_mask.any(axis=1) | ~neg_mask.any(axis=1))[0])
        raise DegenerateBatchError(f"anchor {lonely} (identity {ids[lonely]}) has no positive or no negative")

    dist = pairwise_distances(embeddings.vectors)
    pos = pos_mask.astype(np.float64)
    neg = neg_mask.astype(np.float64)

    # masked entries are zeroed before exp so they never overflow
    shift_p = np.where(pos_mask, dist.data, -np.inf).max(axis=1, keepdims=True)
    exp_p = ((dist - shift_p) * pos).exp() * pos
    weights_p = exp_p / exp_p.sum(axis=1, keepdims=True)
    furthest_positive = (dist * weights_p).sum(axis=1)

    shift_n = np.where(neg_mask, -dist.data, -np.inf).max(axis=1, keepdims=True)
    exp_n = ((-dist - shift_n) * neg).exp() * neg
    weights_n = exp_n / exp_n.sum(axis=1, keepdims=True)
    closest_negative = (dist * weights_n).sum(axis=1)

    return softplus(furthest_positive - closest_negative).mean()


def pair_up(embeddings: EmbeddingBatch, rng: np.random.Generator) -> CrossModalPairSet:
    modalities = [Modality(m) for m in embeddings.modalities]
    rgb_rows = np.array([i for i, m in enumerate(modalities) if m is Modality.RGB], dtype=np.int64)
    ir_rows = np.array([i for i, m in enumerate(modalities) if m is Modality.IR], dtype=np.int64)
    if len(rgb_rows) != len(ir_rows) or len(rgb_rows) == 0:
        raise ModalityError(f"pairing needs equal, non-zero rgb/ir counts, got {len(rgb_rows)} rgb "
                            f"and {len(ir_rows)} ir rows")
    ir_matched = ir_rows[rng.permutation(len(ir_rows))]
    ids = np.asarray(embeddings.identities)
    labels = (ids[rgb_rows] == ids[ir_matched]).astype(np.int64)
    return CrossModalPairSet(rgb_rows, ir_matched, labels)


def contrastive_loss(pairs: CrossModalPairSet, embeddings: EmbeddingBatch,
                     config: Optional[ContrastiveConfig] = None) -> Tensor:
    """Mean over pairs of label * D^2 + (1 - label) * max(0, T - D)^2."""
    config = config or ContrastiveConfig()
    rows = embeddings.vectors.shape[0]
    for name, index in (("rgb index", pairs.rgb_index), ("ir index", pairs.ir_index)):
        if len(index) and (index.min() < 0 or index.max() >= rows):
            raise ShapeMismatchError("contrastive_loss", name, f"[0, {rows})", (int(index.min()), int(index.max())))
    if len(pairs) == 0:
        raise ShapeMismatchError("contrastive_loss", "pairs", ">= 1", 0)

    d = paired_distances(take(embeddings.vectors, pairs.rgb_index), take(embeddings.vectors, pairs.ir_index))
    label = pairs.labels.astype(np.float64)
    positive_term = d ** 2 * label
    negative_term = relu(config.margin_T - d) ** 2 * (1.0 - label)
    return (positive_term + negative_term).mean()


def total_loss(l_id: Scalar, l_tri: Scalar, l_c: Scalar, config: Optional[ContrastiveConfig] = None) -> Tensor:
    config = config or ContrastiveConfig()
    terms = [as_tensor(t) for t in (l_id, l_tri, l_c)]
    for name, term in zip(("l_id", "l_tri", "l_c"), terms):
        if term.size != 1:
            raise NonScalarLossError(f"{name} must be scalar, got shape {term.shape}")
    return terms[0] + terms[1] + terms[2] * config.lambda_weight


def compute_losses(output: ForwardOutput, config: ContrastiveConfig, rng: np.random.Generator) -> LossTerms:
    embeddings = output.embeddings
    if output.logits is None:
        raise ShapeMismatchError("compute_losses", "logits", "present", None)
    l_id = id_loss(output.logits, embeddings.identities)
    l_tri = wrt_triplet(embeddings)
    l_c = contrastive_loss(pair_up(embeddings, rng), embeddings, config)
    return LossTerms(l_id, l_tri, l_c, total_loss(l_id, l_tri, l_c, config))
