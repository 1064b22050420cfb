import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from app.exception import ConfigValidationError, MissingForwardStateError, ModalityError, ShapeMismatchError
from app.functional import concat, global_avg_pool
from app.gate_search import StageSearchCells
from app.layers import Affine, BatchNorm, ConvBlock
from app.schemas import ForwardMode, GateTrick, Modality, ModelConfig
from app.tensor import Tensor, as_tensor, relu

logger = logging.getLogger(__name__)

ImageInput = Union[Tensor, np.ndarray]


@dataclass
class EmbeddingBatch:
    vectors: Tensor
    identities: List[int]
    modalities: List[Modality]

    def __post_init__(self):
        if len(self.identities) != self.vectors.shape[0] or len(self.modalities) != self.vectors.shape[0]:
            raise ShapeMismatchError("EmbeddingBatch", "rows", self.vectors.shape[0],
                                     (len(self.identities), len(self.modalities)))


@dataclass
class ForwardOutput:
    embeddings: EmbeddingBatch
    logits: Optional[Tensor] = None


class TwoStreamNet:
    """Modality-specific stems, shared conv stages with optional search cells, BN neck, classifier."""

    def __init__(self, config: ModelConfig):
        self.config = config
        k = config.kernel
        self.stems = {
            Modality.RGB: (ConvBlock(3, config.stem_channels, k), BatchNorm(config.stem_channels)),
            Modality.IR: (ConvBlock(1, config.stem_channels, k), BatchNorm(config.stem_channels)),
        }
        n = len(config.stage_widths)
        self.stages: List[ConvBlock] = []
        self.stage_bns: List[BatchNorm] = []
        self.stage_sizes = []
        c_in, h, w = config.stem_channels, config.input_height, config.input_width
        for i, width in enumerate(config.stage_widths):
            stride = 1 if i == n - 1 else 2
            block = ConvBlock(c_in, width, k, stride=stride)
            h, w = block.output_size(h, w)
            if h < 1 or w < 1:
                raise ShapeMismatchError("TwoStreamNet", f"stage {i + 1} spatial size", ">= 1", (h, w))
            self.stages.append(block)
            self.stage_bns.append(BatchNorm(width))
            self.stage_sizes.append((width, h, w))
            c_in = width
        self.embedding_dim = c_in
        self.search_cells: Dict[int, StageSearchCells] = {}
        self.bn_neck = BatchNorm(self.embedding_dim)
        self.classifier = Affine(self.embedding_dim, config.num_identities)

    @property
    def rgb_stem(self) -> ConvBlock:
        return self.stems[Modality.RGB][0]

    @property
    def ir_stem(self) -> ConvBlock:
        return self.stems[Modality.IR][0]

    @property
    def searched_stage_mask(self) -> List[bool]:
        return [(i + 1) in self.search_cells for i in range(len(self.stages))]

    def attach_search_cells(self, stages: Sequence[int], rng: Optional[np.random.Generator] = None,
                            init_range: float = 0.01) -> None:
        for stage in sorted(stages):
            width, h, w = self.stage_sizes[stage - 1]
            self.search_cells[stage] = StageSearchCells(stage, width, h, w, rng, init_range)

    # parameter views

    def weight_parameters(self) -> Dict[str, Tensor]:
        params = {}
        for modality, (conv, bn) in self.stems.items():
            params.update(conv.parameters(f"{modality.value}_stem.conv"))
            params.update(bn.parameters(f"{modality.value}_stem.bn"))
        for i, (conv, bn) in enumerate(zip(self.stages, self.stage_bns), start=1):
            params.update(conv.parameters(f"stage{i}.conv"))
            params.update(bn.parameters(f"stage{i}.bn"))
        params.update(self.bn_neck.parameters("bn_neck"))
        params.update(self.classifier.parameters("classifier"))
        return params

    def gate_parameters(self) -> Dict[str, Tensor]:
        params = {}
        for stage in sorted(self.search_cells):
            cells = self.search_cells[stage]
            params.update({name: p for name, p in cells.parameters().items() if p.requires_grad})
        return params

    def batch_norms(self) -> Dict[str, BatchNorm]:
        bns = {f"{m.value}_stem.bn": bn for m, (_, bn) in self.stems.items()}
        bns.update({f"stage{i}.bn": bn for i, bn in enumerate(self.stage_bns, start=1)})
        bns["bn_neck"] = self.bn_neck
        return bns

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.weight_parameters().items()}
        for prefix, bn in self.batch_norms().items():
            state.update({name: buf.copy() for name, buf in bn.buffers(prefix).items()})
        for stage in sorted(self.search_cells):
            for cell in self.search_cells[stage]:
                state[f"{cell.name}.P"] = cell.P.data.copy()
                if cell.frozen:
                    state[f"{cell.name}.G"] = cell.G.copy()
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for name, p in self.weight_parameters().items():
            p.data[...] = _fetch(state, name, p.shape)
        for prefix, bn in self.batch_norms().items():
            for name, buf in bn.buffers(prefix).items():
                buf[...] = _fetch(state, name, buf.shape)
        for stage in sorted(self.search_cells):
            for cell in self.search_cells[stage]:
                cell.P.data[...] = _fetch(state, f"{cell.name}.P", cell.shape)
                if f"{cell.name}.G" in state:
                    cell.freeze(_fetch(state, f"{cell.name}.G", cell.shape))

    def zero_grad(self) -> None:
        for p in self.weight_parameters().values():
            p.zero_grad()
        for stage in self.search_cells.values():
            for cell in stage:
                cell.P.zero_grad()

    # forward

    def _stem_forward(self, images: Mapping[Modality, ImageInput], training: bool, update_stats: bool):
        outputs, modalities = [], []
        for modality in (Modality.RGB, Modality.IR):
            if modality not in images or images[modality] is None:
                continue
            x = as_tensor(images[modality])
            if x.ndim != 4:
                raise ShapeMismatchError("forward_embed", f"{modality.value} image rank", 4, x.ndim)
            if x.shape[1] != modality.channels:
                raise ModalityError(f"{modality.value} stem expects {modality.channels} channels, "
                                    f"got {x.shape[1]}")
            if x.shape[2:] != (self.config.input_height, self.config.input_width):
                raise ShapeMismatchError("forward_embed", "spatial size",
                                         (self.config.input_height, self.config.input_width), x.shape[2:])
            conv, bn = self.stems[modality]
            outputs.append(relu(bn(conv(x), training, update_stats)))
            modalities.extend([modality] * x.shape[0])
        if not outputs:
            raise ModalityError("forward_embed received no images")
        return (outputs[0] if len(outputs) == 1 else concat(outputs, axis=0)), modalities

    def forward_embed(self, images: Mapping[Modality, ImageInput], identities: Optional[Sequence[int]] = None,
                      mode: ForwardMode = ForwardMode.TRAIN, rng: Optional[np.random.Generator] = None,
                      trick: GateTrick = GateTrick.CONTINUOUS_BERNOULLI, resample: bool = True,
                      update_stats: bool = True, compute_logits: bool = True) -> ForwardOutput:
        """Embed a batch whose rows are all RGB images followed by all IR images.

        In search mode fresh gates are drawn per call (unless ``resample`` is off);
        train and eval modes use the derived gates. Eval mode uses running
        batch-norm statistics and never computes logits.
        """
        mode = ForwardMode(mode)
        training = mode is not ForwardMode.EVAL
        if mode is ForwardMode.SEARCH and resample:
            if rng is None:
                raise ValueError("search mode needs an rng to sample gates")
            for stage in sorted(self.search_cells):
                self.search_cells[stage].sample(rng, trick)
        elif mode is not ForwardMode.SEARCH:
            unfrozen = [s for s, cells in self.search_cells.items() if not cells.frozen]
            if unfrozen:
                raise MissingForwardStateError(f"stages {unfrozen} have no derived gates; derive before {mode.value}")

        x, modalities = self._stem_forward(images, training, update_stats)
        for i, (conv, bn) in enumerate(zip(self.stages, self.stage_bns), start=1):
            x = relu(bn(conv(x), training, update_stats))
            if i in self.search_cells:
                x = self.search_cells[i].apply(x, modalities)
        vectors = self.bn_neck(global_avg_pool(x), training, update_stats)

        identities = list(identities) if identities is not None else [-1] * len(modalities)
        logits = self.classifier(vectors) if compute_logits and training else None
        return ForwardOutput(EmbeddingBatch(vectors, identities, modalities), logits)


def _fetch(state: Mapping[str, np.ndarray], name: str, shape) -> np.ndarray:
    if name not in state:
        raise ShapeMismatchError("load_state_dict", name, "present", "missing")
    value = np.asarray(state[name], dtype=np.float64)
    if value.shape != tuple(shape):
        raise ShapeMismatchError("load_state_dict", name, tuple(shape), value.shape)
    return value


def init_weights(net: TwoStreamNet, rng: np.random.Generator) -> None:
    """Kaiming fan-in normal weights, zero biases, unit/zero batch-norm affine, fresh running stats."""
    for name, p in net.weight_parameters().items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(p.shape[1:])) if p.ndim == 4 else p.shape[0]
            p.data[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), p.shape)
        elif name.endswith(".gamma"):
            p.data[...] = 1.0
        else:
            p.data[...] = 0.0
        p.zero_grad()
    for bn in net.batch_norms().values():
        bn.running_mean[...] = 0.0
        bn.running_var[...] = 1.0


def init_params(config: Union[ModelConfig, dict], rng: np.random.Generator,
                init_range: float = 0.01) -> TwoStreamNet:
    if not isinstance(config, ModelConfig):
        try:
            config = ModelConfig.model_validate(config)
        except ValidationError as e:
            raise ConfigValidationError([{"field": ".".join(str(p) for p in err["loc"]), "message": err["msg"]}
                                         for err in e.errors()])
    net = TwoStreamNet(config)
    init_weights(net, rng)
    net.attach_search_cells(config.searched_stages, rng, init_range)
    logger.info(f"Initialised two-stream net: stages={config.stage_widths}, "
                f"searched={config.searched_stages}, embedding_dim={net.embedding_dim}")
    return net
