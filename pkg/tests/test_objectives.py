import numpy as np
import pytest

from app.exception import DegenerateBatchError, ModalityError, NonScalarLossError, ShapeMismatchError
from app.net import EmbeddingBatch, ForwardOutput
from app.objectives import (CrossModalPairSet, compute_losses, contrastive_loss, id_loss, pair_up, total_loss,
                            wrt_triplet)
from app.schemas import ContrastiveConfig, Modality
from app.tensor import Tensor, backward
from tests.conftest import gradient_error

RGB, IR = Modality.RGB, Modality.IR


def batch(vectors, identities, modalities=None, requires_grad=False):
    vectors = np.asarray(vectors, dtype=np.float64)
    if modalities is None:
        half = len(identities) // 2
        modalities = [RGB] * half + [IR] * (len(identities) - half)
    return EmbeddingBatch(Tensor(vectors, requires_grad=requires_grad), list(identities), list(modalities))


def softmax(values):
    e = np.exp(values - values.max())
    return e / e.sum()


def wrt_oracle(x, ids):
    losses = []
    for i in range(len(ids)):
        pos = [np.linalg.norm(x[i] - x[j]) for j in range(len(ids)) if j != i and ids[j] == ids[i]]
        neg = [np.linalg.norm(x[i] - x[j]) for j in range(len(ids)) if ids[j] != ids[i]]
        pos, neg = np.array(pos), np.array(neg)
        gap = (softmax(pos) * pos).sum() - (softmax(-neg) * neg).sum()
        losses.append(np.logaddexp(0.0, gap))
    return float(np.mean(losses))


def test_wrt_symmetric_distances_give_ln2():
    tetrahedron = [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]
    assert wrt_triplet(batch(tetrahedron, [0, 0, 1, 1])).item() == pytest.approx(np.log(2), abs=1e-12)


def test_wrt_saturates_with_far_negatives():
    points = [[0.0, 0.0], [0.0, 0.0], [100.0, 0.0], [100.0, 0.0]]
    assert wrt_triplet(batch(points, [0, 0, 1, 1])).item() < 1e-9


def test_wrt_matches_brute_force_oracle():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        ids = rng.permutation([0, 0, 1, 1, 2, 2, 2, 3, 3])
        x = rng.normal(scale=rng.uniform(0.1, 5.0), size=(len(ids), 4))
        assert wrt_triplet(batch(x, ids)).item() == pytest.approx(wrt_oracle(x, ids), abs=1e-10)


def test_wrt_is_invariant_to_row_order(rng):
    ids = np.array([0, 0, 1, 1, 2, 2])
    x = rng.normal(size=(6, 3))
    order = rng.permutation(6)
    assert wrt_triplet(batch(x[order], ids[order])).item() == pytest.approx(wrt_triplet(batch(x, ids)).item(),
                                                                            abs=1e-12)


@pytest.mark.parametrize("ids", [[0, 1, 1, 1], [2, 2, 2, 2]])
def test_wrt_rejects_anchor_without_positive_or_negative(rng, ids):
    with pytest.raises(DegenerateBatchError):
        wrt_triplet(batch(rng.normal(size=(4, 2)), ids))


def test_wrt_gradient(rng):
    embeddings = batch(rng.normal(size=(6, 3)), [0, 0, 1, 1, 2, 2], requires_grad=True)
    assert gradient_error(lambda: wrt_triplet(embeddings), embeddings.vectors) < 1e-5


def test_id_loss_is_cross_entropy():
    assert id_loss(Tensor(np.zeros((2, 4))), [1, 3]).item() == pytest.approx(np.log(4), abs=1e-12)


def test_pair_up_matches_every_rgb_row_once(rng):
    embeddings = batch(rng.normal(size=(6, 2)), [0, 1, 2, 0, 1, 2])
    pairs = pair_up(embeddings, rng)
    assert sorted(pairs.rgb_index.tolist()) == [0, 1, 2]
    assert sorted(pairs.ir_index.tolist()) == [3, 4, 5]
    for r, i, label in pairs.pairs:
        assert label == int(embeddings.identities[r] == embeddings.identities[i])
    assert len(pairs) == 3


@pytest.mark.parametrize("modalities", [[RGB, RGB, IR], [IR, IR, IR]])
def test_pair_up_needs_balanced_modalities(rng, modalities):
    with pytest.raises(ModalityError):
        pair_up(batch(rng.normal(size=(3, 2)), [0, 1, 2], modalities), rng)


def test_pair_up_is_uniform_over_matchings():
    embeddings = batch(np.zeros((16, 2)), list(range(8)) * 2)
    rng = np.random.default_rng(123)
    counts = np.zeros((8, 8))
    trials = 20000
    for _ in range(trials):
        pairs = pair_up(embeddings, rng)
        counts[pairs.rgb_index, pairs.ir_index - 8] += 1
    assert np.all(np.abs(counts / trials - 1 / 8) < 0.01)


def two_point_pair(distance, label):
    embeddings = batch([[0.0, 0.0], [distance, 0.0]], [0, 0 if label else 1], requires_grad=True)
    return CrossModalPairSet(np.array([0]), np.array([1]), np.array([label])), embeddings


@pytest.mark.parametrize("distance,label,expected", [(0.0, 1, 0.0), (20.0, 0, 0.0), (10.0, 0, 25.0), (3.0, 1, 9.0)])
def test_contrastive_closed_form_cases(distance, label, expected):
    pairs, embeddings = two_point_pair(distance, label)
    assert contrastive_loss(pairs, embeddings, ContrastiveConfig(margin_T=15.0)).item() == pytest.approx(
        expected, abs=1e-12)


def test_contrastive_is_mean_over_pairs():
    embeddings = batch([[0.0], [1.0], [10.0], [3.0]], [0, 1, 1, 0])
    pairs = CrossModalPairSet(np.array([0, 1]), np.array([3, 2]), np.array([1, 0]))
    assert contrastive_loss(pairs, embeddings).item() == pytest.approx((9.0 + 36.0) / 2, abs=1e-12)


@pytest.mark.parametrize("distance", [15.0 - 1e-3, 15.0 + 1e-3, 4.0])
def test_contrastive_gradient_around_the_hinge(distance):
    for label in (0, 1):
        pairs, embeddings = two_point_pair(distance, label)
        embeddings.vectors.data[:, 1] = [0.3, 0.3]
        assert gradient_error(lambda: contrastive_loss(pairs, embeddings), embeddings.vectors) < 1e-5


def test_contrastive_hinge_subgradient_is_zero_at_margin():
    pairs, embeddings = two_point_pair(15.0, 0)
    backward(contrastive_loss(pairs, embeddings))
    assert np.all(embeddings.vectors.grad == 0.0)


def test_contrastive_rejects_out_of_range_indices():
    _, embeddings = two_point_pair(1.0, 1)
    with pytest.raises(ShapeMismatchError):
        contrastive_loss(CrossModalPairSet(np.array([0]), np.array([2]), np.array([1])), embeddings)


def test_total_loss_weighting():
    assert total_loss(1.0, 2.0, 100.0, ContrastiveConfig(lambda_weight=0.04)).item() == pytest.approx(7.0)
    l_id, l_tri = Tensor(np.array(0.7)), Tensor(np.array(1.3))
    assert total_loss(l_id, l_tri, 55.0, ContrastiveConfig(lambda_weight=0.0)).item() == (l_id + l_tri).item()


def test_total_loss_needs_scalars():
    with pytest.raises(NonScalarLossError):
        total_loss(Tensor(np.ones(2)), 1.0, 1.0)


def test_compute_losses_combines_terms(rng):
    embeddings = batch(rng.normal(size=(4, 3)), [0, 1, 0, 1], requires_grad=True)
    logits = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    config = ContrastiveConfig(lambda_weight=0.5)
    terms = compute_losses(ForwardOutput(embeddings, logits), config, rng)
    values = terms.as_floats()
    assert values["total"] == pytest.approx(values["l_id"] + values["l_tri"] + 0.5 * values["l_c"], abs=1e-12)
    backward(terms.total)
    assert np.any(logits.grad != 0) and np.any(embeddings.vectors.grad != 0)


def test_compute_losses_needs_logits(rng):
    with pytest.raises(ShapeMismatchError):
        compute_losses(ForwardOutput(batch(rng.normal(size=(2, 2)), [0, 1])), ContrastiveConfig(), rng)
