from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator


class Modality(str, Enum):
    RGB = "rgb"
    IR = "ir"

    @property
    def channels(self) -> int:
        return 3 if self is Modality.RGB else 1

    def other(self) -> "Modality":
        return Modality.IR if self is Modality.RGB else Modality.RGB


class GateLevel(str, Enum):
    PIXEL = "pixel"
    CHANNEL = "channel"


class GateTrick(str, Enum):
    CONTINUOUS_BERNOULLI = "continuous_bernoulli"
    BERNOULLI = "bernoulli"
    HARD = "hard"
    SOFT = "soft"


class SearchOrder(str, Enum):
    FIRST = "first"
    SECOND = "second"


class ForwardMode(str, Enum):
    SEARCH = "search"
    TRAIN = "train"
    EVAL = "eval"


class SimilarityMetric(str, Enum):
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"


PROTOCOLS = {
    "visible-to-infrared": (Modality.RGB, Modality.IR),
    "infrared-to-visible": (Modality.IR, Modality.RGB),
}


def _lower(v):
    return v.lower() if isinstance(v, str) else v


class ModelConfig(BaseModel):
    input_height: int = 32
    input_width: int = 16
    stem_channels: int = 16
    stage_widths: List[int] = [16, 32, 64, 128]
    kernel: int = 3
    searched_stages: List[int] = []
    num_identities: int = 64

    @field_validator('stage_widths')
    @classmethod
    def widths_positive(cls, v):
        if not v:
            raise ValueError("stage_widths must list at least one stage")
        if any(w < 1 for w in v):
            raise ValueError("stage widths must be positive")
        return v

    @field_validator('kernel')
    @classmethod
    def kernel_odd(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError("kernel must be a positive odd integer")
        return v

    @field_validator('num_identities')
    @classmethod
    def identities_positive(cls, v):
        if v < 1:
            raise ValueError("num_identities must be at least 1")
        return v

    @field_validator('input_height', 'input_width', 'stem_channels')
    @classmethod
    def dims_positive(cls, v):
        if v < 1:
            raise ValueError("dimensions must be positive")
        return v

    @model_validator(mode='after')
    def stages_in_range(self):
        n = len(self.stage_widths)
        if len(set(self.searched_stages)) != len(self.searched_stages):
            raise ValueError("searched_stages contains duplicates")
        bad = [s for s in self.searched_stages if s < 1 or s > n]
        if bad:
            raise ValueError(f"searched_stages {bad} outside 1..{n}")
        self.searched_stages = sorted(self.searched_stages)
        return self

    @property
    def searched_stage_mask(self) -> List[bool]:
        return [(i + 1) in self.searched_stages for i in range(len(self.stage_widths))]


class GateConfig(BaseModel):
    trick: GateTrick = GateTrick.CONTINUOUS_BERNOULLI
    init_range: float = 0.01

    @field_validator('trick', mode='before')
    @classmethod
    def normalise_trick(cls, v):
        return _lower(v)

    @field_validator('init_range')
    @classmethod
    def range_non_negative(cls, v):
        if v < 0:
            raise ValueError("init_range must be non-negative")
        return v


class ContrastiveConfig(BaseModel):
    margin_T: float = 15.0
    lambda_weight: float = 0.04

    @field_validator('margin_T', 'lambda_weight')
    @classmethod
    def non_negative(cls, v):
        if v < 0:
            raise ValueError("margin_T and lambda_weight must be non-negative")
        return v


class BilevelConfig(BaseModel):
    base_lr: float = 0.1
    gate_lr: float = 0.01
    xi: Optional[float] = None
    order: SearchOrder = SearchOrder.FIRST
    search_epochs: int = 40
    retrain_epochs: int = 80
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 10
    decay_epochs: List[int] = [16, 50]
    iters_per_epoch: Optional[int] = None
    hvp_epsilon: float = 0.01
    implicit_gradient: bool = False

    @field_validator('order', mode='before')
    @classmethod
    def normalise_order(cls, v):
        return _lower(v)

    @field_validator('base_lr', 'gate_lr', 'momentum', 'weight_decay', 'hvp_epsilon')
    @classmethod
    def rates_non_negative(cls, v):
        if v < 0:
            raise ValueError("rates must be non-negative")
        return v

    @field_validator('xi')
    @classmethod
    def xi_non_negative(cls, v):
        if v is not None and v < 0:
            raise ValueError("xi must be non-negative")
        return v

    @field_validator('search_epochs', 'retrain_epochs', 'warmup_epochs')
    @classmethod
    def epochs_non_negative(cls, v):
        if v < 0:
            raise ValueError("epoch counts must be non-negative")
        return v

    @field_validator('iters_per_epoch')
    @classmethod
    def iters_positive(cls, v):
        if v is not None and v < 1:
            raise ValueError("iters_per_epoch must be positive")
        return v

    @field_validator('decay_epochs')
    @classmethod
    def decay_sorted(cls, v):
        if len(v) != 2 or v[0] > v[1]:
            raise ValueError("decay_epochs must be two ascending epochs")
        return v


class DataConfig(BaseModel):
    dataset_seed: int = 0
    n_train_ids: int = 64
    n_test_ids: int = 32
    images_per_modality: int = 20
    signature_dim: int = 16
    height: int = 32
    width: int = 16
    jitter: int = 2
    noise_sigma: float = 0.05
    identities_per_batch: int = 8
    images_per_identity: int = 4
    val_fraction: float = 0.2

    @field_validator('n_train_ids', 'n_test_ids', 'images_per_modality', 'signature_dim',
                     'identities_per_batch', 'images_per_identity')
    @classmethod
    def counts_positive(cls, v):
        if v < 1:
            raise ValueError("counts must be positive")
        return v

    @field_validator('val_fraction')
    @classmethod
    def fraction_open(cls, v):
        if not 0 < v < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        return v


class EvalConfig(BaseModel):
    max_rank: int = 20
    metric: SimilarityMetric = SimilarityMetric.COSINE
    batch_size: int = 64

    @field_validator('metric', mode='before')
    @classmethod
    def normalise_metric(cls, v):
        return _lower(v)


class ExperimentConfig(BaseModel):
    seed: int = 0
    enable_search: bool = True
    enable_contrastive: bool = True
    model: ModelConfig = Field(default_factory=ModelConfig)
    gate: GateConfig = Field(default_factory=GateConfig)
    contrastive: ContrastiveConfig = Field(default_factory=ContrastiveConfig)
    bilevel: BilevelConfig = Field(default_factory=BilevelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode='after')
    def identities_match_data(self):
        self.model.num_identities = self.data.n_train_ids
        self.model.input_height = self.data.height
        self.model.input_width = self.data.width
        return self

    def effective_contrastive(self) -> ContrastiveConfig:
        """The contrastive settings with lambda forced to 0 when the C switch is off."""
        if self.enable_contrastive:
            return self.contrastive
        return self.contrastive.model_copy(update={"lambda_weight": 0.0})


class IdentitySpec(BaseModel):
    id: int
    signature: List[float]


class SampleSpec(BaseModel):
    identity: int
    modality: Modality
    instance: int
    dx: int = 0
    dy: int = 0
    noise_seed: int = 0
    clutter_seed: int = 0

    @field_validator('modality', mode='before')
    @classmethod
    def normalise_modality(cls, v):
        return _lower(v)


class DatasetManifest(BaseModel):
    seed: int
    n_train_ids: int
    n_test_ids: int
    images_per_modality: int
    train_id_range: List[int]
    test_id_range: List[int]
    train_specs: List[SampleSpec]
    test_specs: List[SampleSpec]

    @model_validator(mode='after')
    def ranges_disjoint(self):
        a0, a1 = self.train_id_range
        b0, b1 = self.test_id_range
        if a0 < b1 and b0 < a1:
            raise ValueError("train and test identity ranges overlap")
        return self


class SplitSpec(BaseModel):
    search_train: List[int]
    search_val: List[int]
    seed: int


class EvalProtocol(BaseModel):
    name: str
    query_modality: Modality
    gallery_modality: Modality
    query_specs: List[SampleSpec]
    gallery_specs: List[SampleSpec]
    query_indices: List[int] = []
    gallery_indices: List[int] = []

    @model_validator(mode='after')
    def modalities_differ(self):
        if self.query_modality == self.gallery_modality:
            raise ValueError("query and gallery modalities must differ")
        return self


class RankedList(BaseModel):
    query: int
    query_id: int
    gallery: List[int]
    gallery_ids: List[int]
    scores: List[float]


class EvalReport(BaseModel):
    protocol: str
    query_modality: Modality
    gallery_modality: Modality
    seed: int
    metric: SimilarityMetric = SimilarityMetric.COSINE
    cmc: List[float]
    map: float
    ranked: List[RankedList] = []

    @field_validator('cmc')
    @classmethod
    def cmc_monotone(cls, v):
        if any(c < 0 or c > 1 for c in v):
            raise ValueError("cmc values must lie in [0, 1]")
        if any(b < a for a, b in zip(v, v[1:])):
            raise ValueError("cmc must be non-decreasing")
        return v

    @field_validator('map')
    @classmethod
    def map_in_unit(cls, v):
        if not 0 <= v <= 1:
            raise ValueError("map must lie in [0, 1]")
        return v

    def rank(self, r: int) -> float:
        return self.cmc[min(r, len(self.cmc)) - 1]


class LossRecord(BaseModel):
    epoch: int
    step: int
    l_id: float
    l_tri: float
    l_c: float
    total: float
    lr: float


class RunManifest(BaseModel):
    subcommand: str
    run_id: str
    config: Dict[str, Any]
    seeds: Dict[str, int]
    split_hashes: Dict[str, str] = {}
    artifacts: Dict[str, str] = {}
    artifact_hashes: Dict[str, str] = {}
    manifest_hash: str = ""


class RunConfig(BaseModel):
    subcommand: str
    config_path: Optional[str] = None
    output_dir: str = "runs"
    seed: Optional[int] = None
    dataset_seed: Optional[int] = None
    stages: Optional[List[int]] = None
    enable_search: Optional[bool] = None
    enable_contrastive: Optional[bool] = None

    @field_validator('subcommand', mode='before')
    @classmethod
    def normalise_subcommand(cls, v):
        return _lower(v)

    @field_validator('stages')
    @classmethod
    def stages_not_empty(cls, v):
        if v is not None and not v:
            raise ValueError("empty stage set")
        return v
