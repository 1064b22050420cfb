"""Alternating weight/gate optimisation, gate derivation and retraining.

Weights W descend L_train on the search-train split; gate parameters P descend
L_val on the search-validation split, either at the current W (first order) or
at the one-step lookahead W - xi * grad_W L_train (second order). The implicit
term of the lookahead, a finite-difference Hessian-vector product, is added only
when ``implicit_gradient`` is switched on. Validation passes never update the
batch-norm running statistics.
"""
import csv
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from app.exception import InsufficientDataError, LossExplosionError, MissingForwardStateError
from app.net import TwoStreamNet, init_weights
from app.objectives import LossTerms, compute_losses
from app.optim import SGD, lr_schedule
from app.schemas import (BilevelConfig, ContrastiveConfig, DatasetManifest, ExperimentConfig, ForwardMode,
                         GateTrick, LossRecord, Modality, SearchOrder, SplitSpec)
from app.synth_data import IdentityBatch, ImageStore, group_by_identity, sample_batch
from app.tensor import Tensor, backward
from app.utils import gen_props

logger = logging.getLogger(__name__)

_SEED_BOUND = 2 ** 62


def split_search_sets(manifest: DatasetManifest, seed: int, val_fraction: float = 0.2) -> SplitSpec:
    """Per identity and modality, hold out round(val_fraction * n) images for validation,
    clamped so both sides keep at least one."""
    rng = np.random.default_rng(seed)
    groups = group_by_identity(manifest.train_specs)
    search_train, search_val = [], []
    for identity in sorted(groups):
        for modality in (Modality.RGB, Modality.IR):
            pool = groups[identity][modality]
            if len(pool) < 2:
                raise InsufficientDataError(f"identity {identity} has {len(pool)} {modality.value} images; "
                                            f"the search split needs at least 2")
            n_val = min(len(pool) - 1, max(1, int(np.floor(val_fraction * len(pool) + 0.5))))
            order = rng.permutation(pool)
            search_val.extend(int(i) for i in order[:n_val])
            search_train.extend(int(i) for i in order[n_val:])
    return SplitSpec(search_train=sorted(search_train), search_val=sorted(search_val), seed=seed)


class SearchProblem:
    """What the bilevel step needs to know about a model: two parameter groups and a loss."""

    def weight_params(self) -> Dict[str, Tensor]:
        raise NotImplementedError

    def gate_params(self) -> Dict[str, Tensor]:
        raise NotImplementedError

    def loss(self, batch: Any, rng: np.random.Generator, pair_seed: int, resample: bool = True,
             update_stats: bool = True) -> Tensor:
        raise NotImplementedError

    def snapshot_gates(self) -> Any:
        return None

    def restore_gates(self, snapshot: Any) -> None:
        pass


class NetworkProblem(SearchProblem):
    def __init__(self, net: TwoStreamNet, contrastive: ContrastiveConfig,
                 trick: GateTrick = GateTrick.CONTINUOUS_BERNOULLI, mode: ForwardMode = ForwardMode.SEARCH):
        self.net = net
        self.contrastive = contrastive
        self.trick = GateTrick(trick)
        self.mode = ForwardMode(mode)
        self.last_terms: Optional[LossTerms] = None

    def weight_params(self) -> Dict[str, Tensor]:
        return self.net.weight_parameters()

    def gate_params(self) -> Dict[str, Tensor]:
        return self.net.gate_parameters()

    def loss(self, batch: IdentityBatch, rng: np.random.Generator, pair_seed: int, resample: bool = True,
             update_stats: bool = True) -> Tensor:
        output = self.net.forward_embed(batch.images, batch.identities, mode=self.mode, rng=rng,
                                        trick=self.trick, resample=resample, update_stats=update_stats)
        self.last_terms = compute_losses(output, self.contrastive, np.random.default_rng(pair_seed))
        return self.last_terms.total

    def snapshot_gates(self):
        return [(cell, cell.G, cell._forward_p_tilde) for cells in self.net.search_cells.values() for cell in cells]

    def restore_gates(self, snapshot) -> None:
        for cell, gates, p_tilde in snapshot:
            cell.G, cell._forward_p_tilde = gates, p_tilde


@dataclass
class StepResult:
    l_train: float
    l_val: float
    train_terms: Optional[Dict[str, float]] = None
    val_terms: Optional[Dict[str, float]] = None


def _zero(*groups: Dict[str, Tensor]) -> None:
    for group in groups:
        for p in group.values():
            p.zero_grad()


def _ensure_finite(name: str, value: float, diagnostics: Dict[str, Any]) -> None:
    if not np.isfinite(value):
        raise LossExplosionError(f"{name} became {value}", {**diagnostics, name: repr(value)})


def hessian_vector_product(problem: SearchProblem, vector: Dict[str, np.ndarray], r: float, batch: Any,
                           rng: np.random.Generator, pair_seed: int) -> Dict[str, np.ndarray]:
    """(grad_P L(W + r v) - grad_P L(W - r v)) / 2r, with W restored afterwards."""
    weights, gates = problem.weight_params(), problem.gate_params()
    original = {name: p.data.copy() for name, p in weights.items()}
    grads = []
    for sign in (1.0, -1.0):
        for name, p in weights.items():
            p.data[...] = original[name] + sign * r * vector[name]
        _zero(weights, gates)
        backward(problem.loss(batch, rng, pair_seed, resample=False, update_stats=False))
        grads.append({name: p.grad.copy() for name, p in gates.items()})
    for name, p in weights.items():
        p.data[...] = original[name]
    _zero(weights, gates)
    return {name: (grads[0][name] - grads[1][name]) / (2.0 * r) for name in gates}


def _unrolled_gate_grads(problem: SearchProblem, batch_train: Any, batch_val: Any, rng: np.random.Generator,
                         train_seed: int, val_seed: int, xi: float, hvp_epsilon: float, diagnostics: Dict,
                         implicit_gradient: bool = False):
    """grad_P L_val at the lookahead W - xi grad_W L_train, optionally minus xi times the mixed HVP."""
    weights, gates = problem.weight_params(), problem.gate_params()
    original = {name: p.data.copy() for name, p in weights.items()}
    train_gates = problem.snapshot_gates()

    _zero(weights, gates)
    backward(problem.loss(batch_train, rng, train_seed, resample=False, update_stats=False))
    for p in weights.values():
        p.data -= xi * p.grad

    _zero(weights, gates)
    l_val = problem.loss(batch_val, rng, val_seed, update_stats=False)
    _ensure_finite("l_val", l_val.item(), diagnostics)
    backward(l_val)
    gate_grads = {name: p.grad.copy() for name, p in gates.items()}
    vector = {name: p.grad.copy() for name, p in weights.items()}
    for name, p in weights.items():
        p.data[...] = original[name]

    norm = np.sqrt(sum(float((v * v).sum()) for v in vector.values()))
    if implicit_gradient and norm > 0 and xi > 0:
        val_gates = problem.snapshot_gates()
        problem.restore_gates(train_gates)
        implicit = hessian_vector_product(problem, vector, hvp_epsilon / norm, batch_train, rng, train_seed)
        problem.restore_gates(val_gates)
        for name in gate_grads:
            gate_grads[name] -= xi * implicit[name]
    return l_val, gate_grads


def search_step(problem: SearchProblem, batch_train: Any, batch_val: Any, config: BilevelConfig,
                rng: np.random.Generator, weight_opt: SGD, gate_opt: SGD, weight_lr: float,
                gate_lr: Optional[float] = None, epoch: int = 0, step: int = 0) -> StepResult:
    """One weight step on L_train followed by one gate step on L_val."""
    weights, gates = problem.weight_params(), problem.gate_params()
    gate_lr = config.gate_lr if gate_lr is None else gate_lr
    train_seed, val_seed = (int(s) for s in rng.integers(0, _SEED_BOUND, size=2))
    diagnostics = {"epoch": epoch, "step": step, "weight_lr": weight_lr, "gate_lr": gate_lr}

    _zero(weights, gates)
    l_train = problem.loss(batch_train, rng, train_seed)
    _ensure_finite("l_train", l_train.item(), diagnostics)
    train_terms = _terms_of(problem)
    backward(l_train)
    weight_opt.step(weight_lr)
    _zero(weights, gates)

    if SearchOrder(config.order) is SearchOrder.SECOND:
        xi = weight_lr if config.xi is None else config.xi
        l_val, gate_grads = _unrolled_gate_grads(problem, batch_train, batch_val, rng, train_seed, val_seed,
                                                 xi, config.hvp_epsilon, diagnostics, config.implicit_gradient)
    else:
        l_val = problem.loss(batch_val, rng, val_seed, update_stats=False)
        _ensure_finite("l_val", l_val.item(), diagnostics)
        backward(l_val)
        gate_grads = {name: p.grad.copy() for name, p in gates.items()}
    val_terms = _terms_of(problem)

    _zero(weights, gates)
    for name, p in gates.items():
        p.grad[...] = gate_grads[name]
    gate_opt.step(gate_lr)
    _zero(weights, gates)
    for name, p in gates.items():
        if not np.all(np.isfinite(p.data)):
            raise LossExplosionError(f"gate parameters {name} became non-finite", diagnostics)
    return StepResult(l_train.item(), l_val.item(), train_terms, val_terms)


def _terms_of(problem: SearchProblem) -> Optional[Dict[str, float]]:
    terms = getattr(problem, "last_terms", None)
    return terms.as_floats() if terms is not None else None


def gate_fractions(net: TwoStreamNet) -> Dict[str, float]:
    fractions = {}
    for stage in sorted(net.search_cells):
        fractions.update(net.search_cells[stage].activation_fractions())
    return fractions


def _iters_per_epoch(config: BilevelConfig, n_images: int, batch_rows: int) -> int:
    return config.iters_per_epoch or max(1, n_images // batch_rows)


@dataclass
class SearchResult:
    gates: Dict[str, np.ndarray]
    split: SplitSpec
    log: List[Dict[str, Any]] = field(default_factory=list)


def run_search(net: TwoStreamNet, manifest: DatasetManifest, config: ExperimentConfig, rng: np.random.Generator,
               store: Optional[ImageStore] = None, context: Optional[Dict] = None) -> SearchResult:
    bl, data = config.bilevel, config.data
    split = split_search_sets(manifest, config.seed, data.val_fraction)
    store = store or ImageStore(manifest, data)
    problem = NetworkProblem(net, config.effective_contrastive(), config.gate.trick)
    weight_opt = SGD(net.weight_parameters(), bl.base_lr, bl.momentum, bl.weight_decay)
    gate_opt = SGD(net.gate_parameters(), bl.gate_lr)

    P, K = data.identities_per_batch, data.images_per_identity
    val_groups = group_by_identity(manifest.train_specs, split.search_val)
    k_val = min([K] + [len(pool) for g in val_groups.values() for pool in g.values()])
    iters = _iters_per_epoch(bl, len(split.search_train), 2 * P * K)

    logger.info(f"Starting search over stages {sorted(net.search_cells)} for {bl.search_epochs} epochs "
                f"x {iters} steps ({bl.order.value} order)",
                extra=gen_props(context, operation="run_search", order=bl.order.value, iters_per_epoch=iters))
    search_log = []
    for epoch in range(bl.search_epochs):
        start_time = time.perf_counter()
        lr = lr_schedule(epoch, bl.base_lr, bl.warmup_epochs, bl.decay_epochs)
        l_train, l_val = [], []
        for step in range(iters):
            batch_train = sample_batch(manifest, P, K, rng, split.search_train, store)
            batch_val = sample_batch(manifest, P, k_val, rng, split.search_val, store)
            result = search_step(problem, batch_train, batch_val, bl, rng, weight_opt, gate_opt, lr,
                                 epoch=epoch, step=step)
            l_train.append(result.l_train)
            l_val.append(result.l_val)
        entry = {"epoch": epoch, "lr": lr, "l_train": float(np.mean(l_train)), "l_val": float(np.mean(l_val)),
                 "gate_fractions": gate_fractions(net)}
        search_log.append(entry)
        logger.info(f"Search epoch {epoch}: l_train={entry['l_train']:.4f} l_val={entry['l_val']:.4f}",
                    extra=gen_props(context, operation="search_epoch", epoch=epoch, lr=lr,
                                    gate_fractions=entry["gate_fractions"],
                                    execution_time=time.perf_counter() - start_time))

    for stage in sorted(net.search_cells):
        net.search_cells[stage].derive()
    gates = {cell.name: cell.G.copy() for stage in sorted(net.search_cells) for cell in net.search_cells[stage]}
    logger.info(f"Derived gates: {gate_fractions(net)}",
                extra=gen_props(context, operation="derive_gates", gate_fractions=gate_fractions(net)))
    return SearchResult(gates, split, search_log)


def retrain(net: TwoStreamNet, manifest: DatasetManifest, config: ExperimentConfig, rng: np.random.Generator,
            store: Optional[ImageStore] = None, context: Optional[Dict] = None) -> List[LossRecord]:
    """Re-initialise W from the run seed and train it on the full training set with the gates frozen."""
    unfrozen = [stage for stage, cells in net.search_cells.items() if not cells.frozen]
    if unfrozen:
        raise MissingForwardStateError(f"stages {unfrozen} must have derived gates before retraining")
    bl, data = config.bilevel, config.data
    init_weights(net, np.random.default_rng(config.seed))
    store = store or ImageStore(manifest, data)
    problem = NetworkProblem(net, config.effective_contrastive(), config.gate.trick, mode=ForwardMode.TRAIN)
    weight_opt = SGD(net.weight_parameters(), bl.base_lr, bl.momentum, bl.weight_decay)

    P, K = data.identities_per_batch, data.images_per_identity
    iters = _iters_per_epoch(bl, len(manifest.train_specs), 2 * P * K)
    records: List[LossRecord] = []
    for epoch in range(bl.retrain_epochs):
        start_time = time.perf_counter()
        lr = lr_schedule(epoch, bl.base_lr, bl.warmup_epochs, bl.decay_epochs)
        for step in range(iters):
            batch = sample_batch(manifest, P, K, rng, None, store)
            weight_opt.zero_grad()
            total = problem.loss(batch, rng, int(rng.integers(0, _SEED_BOUND)))
            terms = problem.last_terms.as_floats()
            _ensure_finite("total", terms["total"], {"epoch": epoch, "step": step, "lr": lr, **terms})
            backward(total)
            weight_opt.step(lr)
            records.append(LossRecord(epoch=epoch, step=step, lr=lr, **terms))
        epoch_loss = float(np.mean([r.total for r in records if r.epoch == epoch]))
        logger.info(f"Retrain epoch {epoch}: loss={epoch_loss:.4f} lr={lr:.5f}",
                    extra=gen_props(context, operation="retrain_epoch", epoch=epoch, lr=lr, loss=epoch_loss,
                                    execution_time=time.perf_counter() - start_time))
    return records


def write_loss_csv(records: Sequence[LossRecord], path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    columns = list(LossRecord.model_fields)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for record in records:
            writer.writerow(record.model_dump())
    return path
