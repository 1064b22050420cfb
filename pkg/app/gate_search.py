"""Modality-aware search gates.

A search cell owns raw parameters ``P`` whose sigmoid ``P~`` is the probability
that a channel (channel level) or a single activation (pixel level) passes.
During search binary gates are drawn from ``P~``; the backward pass treats the
binarisation as identity (straight-through) and then applies sigmoid'(P).
"""
import json
import logging
import os
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from app.exception import DomainError, MissingForwardStateError, ModalityError, ShapeMismatchError
from app.functional import concat, take
from app.schemas import GateLevel, GateTrick, Modality
from app.tensor import Tensor, as_tensor, make_result, sigmoid_np

logger = logging.getLogger(__name__)

TAYLOR_THRESHOLD = 1e-6
GATE_THRESHOLD = 0.5
# sigmoid rounds to exactly 0 or 1 once |P| passes ~37
SATURATION_EPS = 1e-12

Real = Union[float, np.ndarray]


def _as_lambda(lam: Real) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(~((lam > 0) & (lam < 1))):
        raise DomainError(f"continuous Bernoulli parameter must lie in (0, 1), got {lam}")
    return lam


def _scalar_or_array(out: np.ndarray) -> Real:
    return float(out) if out.ndim == 0 else out


def cb_normalizer(lam: Real) -> Real:
    """C(lam) = 2 atanh(1 - 2 lam) / (1 - 2 lam), with C(0.5) = 2."""
    lam = _as_lambda(lam)
    t = 1.0 - 2.0 * lam
    small = np.abs(t) < TAYLOR_THRESHOLD
    safe_t = np.where(small, 0.5, t)
    closed = 2.0 * np.arctanh(safe_t) / safe_t
    t2 = t * t
    series = 2.0 * (1.0 + t2 / 3.0 + t2 * t2 / 5.0)
    return _scalar_or_array(np.where(small, series, closed))


def cb_log_density(x: Real, lam: Real) -> Real:
    x = np.asarray(x, dtype=np.float64)
    if np.any(~((x >= 0) & (x <= 1))):
        raise DomainError(f"continuous Bernoulli support is [0, 1], got {x}")
    lam = _as_lambda(lam)
    out = np.log(cb_normalizer(lam)) + x * np.log(lam) + (1.0 - x) * np.log1p(-lam)
    return _scalar_or_array(np.asarray(out))


def cb_cdf(x: Real, lam: Real) -> Real:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    lam = _as_lambda(lam)
    near_half = np.abs(1.0 - 2.0 * lam) < TAYLOR_THRESHOLD
    safe = np.where(near_half, 0.25, lam)
    closed = (safe ** x * (1.0 - safe) ** (1.0 - x) + safe - 1.0) / (2.0 * safe - 1.0)
    return _scalar_or_array(np.where(near_half, x, closed))


def cb_icdf(u: Real, lam: Real) -> Real:
    """Inverse CDF; uniform on [0, 1] when lam = 0.5."""
    u = np.asarray(u, dtype=np.float64)
    lam = _as_lambda(lam)
    near_half = np.abs(1.0 - 2.0 * lam) < TAYLOR_THRESHOLD
    safe = np.where(near_half, 0.25, lam)
    closed = np.log1p(u * (2.0 * safe - 1.0) / (1.0 - safe)) / (np.log(safe) - np.log1p(-safe))
    return _scalar_or_array(np.clip(np.where(near_half, u, closed), 0.0, 1.0))


def cb_mean(lam: Real) -> Real:
    lam = _as_lambda(lam)
    t = 1.0 - 2.0 * lam
    near_half = np.abs(t) < TAYLOR_THRESHOLD
    safe = np.where(near_half, 0.25, lam)
    closed = safe / (2.0 * safe - 1.0) + 1.0 / (2.0 * np.arctanh(1.0 - 2.0 * safe))
    return _scalar_or_array(np.where(near_half, 0.5, closed))


def cb_sample(lam: Real, rng: np.random.Generator) -> Real:
    """Inverse-CDF draw(s), one per entry of ``lam``."""
    lam = _as_lambda(lam)
    return cb_icdf(rng.random(lam.shape), lam)


class SearchCell:
    """Gate parameters for one (stage, level, modality)."""

    def __init__(self, level: GateLevel, modality: Modality, shape: Sequence[int], stage_index: int,
                 rng: Optional[np.random.Generator] = None, init_range: float = 0.01):
        self.level = GateLevel(level)
        self.modality = Modality(modality)
        self.stage_index = stage_index
        init = rng.uniform(-init_range, init_range, tuple(shape)) if rng is not None else np.zeros(tuple(shape))
        self.P = Tensor(init, requires_grad=True, name=self.name)
        self.G: Optional[np.ndarray] = None
        self.frozen = False
        self._forward_p_tilde: Optional[np.ndarray] = None

    @property
    def name(self) -> str:
        return f"stage{self.stage_index}.{self.level.value}.{self.modality.value}"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.P.shape

    @property
    def p_tilde(self) -> np.ndarray:
        return sigmoid_np(self.P.data)

    def freeze(self, gates: np.ndarray) -> None:
        self.G = np.asarray(gates, dtype=np.float64).copy()
        self.frozen = True
        self.P.requires_grad = False
        self.P.zero_grad()

    def activation_fraction(self) -> float:
        gates = self.G if self.G is not None else (self.p_tilde >= GATE_THRESHOLD)
        return float(np.mean(gates))


def sample_gates(cell: SearchCell, rng: np.random.Generator,
                 trick: GateTrick = GateTrick.CONTINUOUS_BERNOULLI) -> np.ndarray:
    """Draw fresh gates for one forward pass and record them on the cell."""
    if cell.frozen:
        return cell.G
    p_tilde = cell.p_tilde
    trick = GateTrick(trick)
    if trick is GateTrick.CONTINUOUS_BERNOULLI:
        lam = np.clip(p_tilde, SATURATION_EPS, 1.0 - SATURATION_EPS)
        gates = (np.asarray(cb_sample(lam, rng)) >= GATE_THRESHOLD).astype(np.float64)
    elif trick is GateTrick.BERNOULLI:
        gates = (rng.random(p_tilde.shape) < p_tilde).astype(np.float64)
    elif trick is GateTrick.HARD:
        gates = (p_tilde >= GATE_THRESHOLD).astype(np.float64)
    else:
        gates = p_tilde.copy()
    cell.G = gates
    cell._forward_p_tilde = p_tilde
    return gates


def straight_through(upstream: np.ndarray, p_tilde: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    grad_p_tilde = np.array(upstream, dtype=np.float64)
    return grad_p_tilde, grad_p_tilde * p_tilde * (1.0 - p_tilde)


def ste_backward(cell: SearchCell, upstream: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient wrt (P~, P) given the gradient wrt the gates of the last forward pass."""
    if cell._forward_p_tilde is None or cell.G is None:
        raise MissingForwardStateError(f"cell {cell.name} has no recorded forward pass")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cell.G.shape:
        raise ShapeMismatchError("ste_backward", "upstream", cell.G.shape, upstream.shape)
    return straight_through(upstream, cell._forward_p_tilde)


def gate_tensor(cell: SearchCell) -> Tensor:
    """The cell's current gates as a tensor whose gradient flows to ``P`` straight-through."""
    if cell.G is None:
        raise MissingForwardStateError(f"cell {cell.name} has no gates; sample or derive first")
    if cell.frozen:
        return as_tensor(cell.G)
    p_tilde = cell._forward_p_tilde if cell._forward_p_tilde is not None else cell.p_tilde

    def _backward(g):
        return (straight_through(g, p_tilde)[1],)

    return make_result(cell.G.copy(), (cell.P,), "ste_gate", _backward)


def derive_gates(cell: SearchCell) -> np.ndarray:
    """Deterministic gates g = 1 iff P~ >= 0.5; freezes the cell."""
    gates = (cell.p_tilde >= GATE_THRESHOLD).astype(np.float64)
    cell.freeze(gates)
    return gates.copy()


def _modality_rows(modalities: Iterable[Union[Modality, str]]) -> List[Modality]:
    rows = []
    for m in modalities:
        try:
            rows.append(Modality(m))
        except ValueError:
            raise ModalityError(f"unknown modality tag {m!r}")
    return rows


def apply_gates(features: Tensor,
                channel_gates: Optional[Mapping[Modality, Union[Tensor, np.ndarray]]],
                pixel_gates: Optional[Mapping[Modality, Union[Tensor, np.ndarray]]],
                modalities: Sequence[Union[Modality, str]]) -> Tensor:
    """Mask [B, C, H, W] features row by row with the gates of each row's modality.

    Channel gates ([C]) are applied first, then pixel gates ([C, H, W]).
    """
    if features.ndim != 4:
        raise ShapeMismatchError("apply_gates", "features rank", 4, features.ndim)
    B, C, H, W = features.shape
    rows = _modality_rows(modalities)
    if len(rows) != B:
        raise ShapeMismatchError("apply_gates", "modality tags", B, len(rows))
    order = [Modality.RGB, Modality.IR]
    index = [order.index(m) for m in rows]

    out = features
    for gates, level_shape in ((channel_gates, (C,)), (pixel_gates, (C, H, W))):
        if not gates:
            continue
        stacked = []
        for modality in order:
            if modality not in gates:
                if modality in rows:
                    raise ModalityError(f"no gates for modality {modality.value}")
                stacked.append(as_tensor(np.ones((1,) + level_shape)))
                continue
            gate = as_tensor(gates[modality])
            if gate.shape != level_shape:
                raise ShapeMismatchError("apply_gates", f"{modality.value} gate", level_shape, gate.shape)
            stacked.append(gate.reshape((1,) + level_shape))
        per_row = take(concat(stacked, axis=0), index, axis=0)
        if len(level_shape) == 1:
            per_row = per_row.reshape(B, C, 1, 1)
        out = out * per_row
    return out


class StageSearchCells:
    """The four cells of a searched stage: {pixel, channel} x {rgb, ir}."""

    def __init__(self, stage_index: int, channels: int, height: int, width: int,
                 rng: Optional[np.random.Generator] = None, init_range: float = 0.01):
        self.stage_index = stage_index
        self.cells: Dict[Tuple[GateLevel, Modality], SearchCell] = {}
        for level in (GateLevel.CHANNEL, GateLevel.PIXEL):
            shape = (channels,) if level is GateLevel.CHANNEL else (channels, height, width)
            for modality in (Modality.RGB, Modality.IR):
                self.cells[(level, modality)] = SearchCell(level, modality, shape, stage_index, rng, init_range)

    def __iter__(self):
        return iter(self.cells.values())

    def cell(self, level: GateLevel, modality: Modality) -> SearchCell:
        return self.cells[(GateLevel(level), Modality(modality))]

    def parameters(self) -> Dict[str, Tensor]:
        return {f"{c.name}.P": c.P for c in self}

    @property
    def frozen(self) -> bool:
        return all(c.frozen for c in self)

    def sample(self, rng: np.random.Generator, trick: GateTrick) -> None:
        # fixed order: channel cells before pixel cells, rgb before ir
        for cell in self:
            sample_gates(cell, rng, trick)

    def derive(self) -> None:
        for cell in self:
            derive_gates(cell)

    def apply(self, features: Tensor, modalities: Sequence[Modality]) -> Tensor:
        channel = {m: gate_tensor(self.cell(GateLevel.CHANNEL, m)) for m in (Modality.RGB, Modality.IR)}
        pixel = {m: gate_tensor(self.cell(GateLevel.PIXEL, m)) for m in (Modality.RGB, Modality.IR)}
        return apply_gates(features, channel, pixel, modalities)

    def activation_fractions(self) -> Dict[str, float]:
        return {c.name: c.activation_fraction() for c in self}


def write_pgm(path: str, image: np.ndarray) -> None:
    image = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)
    height, width = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    # header lines are newline-terminated; the raster may contain any byte
    magic, size, maxval, raster = blob.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    width, height = (int(v) for v in size.split())
    maxval = int(maxval)
    data = np.frombuffer(raster, dtype=np.uint8, count=width * height)
    return data.reshape(height, width).astype(np.float64) * (255.0 / maxval)


def export_cell(cell: SearchCell, directory: str) -> List[str]:
    """Write P~ and, when derived, the binary gates of one cell."""
    os.makedirs(directory, exist_ok=True)
    written = []
    if cell.level is GateLevel.PIXEL:
        channels, height, width = cell.shape
        path = os.path.join(directory, f"{cell.name}.prob.pgm")
        write_pgm(path, cell.p_tilde.reshape(channels * height, width) * 255.0)
        written.append(path)
        if cell.frozen:
            path = os.path.join(directory, f"{cell.name}.gate.pgm")
            write_pgm(path, cell.G.reshape(channels * height, width) * 255.0)
            written.append(path)
    else:
        path = os.path.join(directory, f"{cell.name}.prob.csv")
        with open(path, "w") as fh:
            fh.write(",".join(repr(float(v)) for v in cell.p_tilde) + "\n")
        written.append(path)
        if cell.frozen:
            path = os.path.join(directory, f"{cell.name}.gate.csv")
            with open(path, "w") as fh:
                fh.write(",".join(str(int(v)) for v in cell.G) + "\n")
            written.append(path)
    return written


def export_gates(stages: Mapping[int, StageSearchCells], directory: str) -> List[str]:
    written = []
    summary = {}
    for stage_index in sorted(stages):
        for cell in stages[stage_index]:
            written.extend(export_cell(cell, directory))
            summary[cell.name] = cell.activation_fraction()
    path = os.path.join(directory, "activation_summary.json")
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    written.append(path)
    logger.info(f"Exported gates for stages {sorted(stages)} to {directory}")
    return written
