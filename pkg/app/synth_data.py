"""Seeded synthetic two-modality identity benchmark.

Every identity owns a latent signature vector. An image is a vertical ellipse
("body") painted with 8 horizontal bands x 2 halves of flat stripes whose
intensities come from the signature through a fixed per-modality linear map
(three maps for the RGB channels, one for IR), shifted by a small jitter, laid
over random background rectangles and finished with Gaussian noise.
"""
import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app import checkpoint
from app.exception import ConfigValidationError, InsufficientDataError
from app.schemas import DataConfig, DatasetManifest, IdentitySpec, Modality, SampleSpec
from app.tensor import sigmoid_np

logger = logging.getLogger(__name__)

N_BANDS = 8
N_HALVES = 2
MAX_CLUTTER = 3
_MAP_STREAM = 7919
_MODALITY_CODE = {Modality.RGB: 0, Modality.IR: 1}


def identity_signature(dataset_seed: int, identity: int, dim: int = 16) -> np.ndarray:
    return np.random.default_rng([dataset_seed, identity]).standard_normal(dim)


def identity_specs(manifest: DatasetManifest, dim: int = 16) -> List[IdentitySpec]:
    ids = itertools.chain(range(*manifest.train_id_range), range(*manifest.test_id_range))
    return [IdentitySpec(id=i, signature=identity_signature(manifest.seed, i, dim).tolist()) for i in ids]


def modality_maps(dataset_seed: int, dim: int = 16) -> Dict[Modality, np.ndarray]:
    """[channels, bands*halves, dim] linear maps from signature to stripe logits."""
    rng = np.random.default_rng([dataset_seed, _MAP_STREAM])
    cells = N_BANDS * N_HALVES
    return {
        Modality.RGB: rng.standard_normal((3, cells, dim)) / np.sqrt(dim),
        Modality.IR: rng.standard_normal((1, cells, dim)) / np.sqrt(dim),
    }


def body_mask(height: int, width: int, dx: int = 0, dy: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Boolean ellipse mask and the stripe cell index of every pixel."""
    cy, cx = (height - 1) / 2.0 + dy, (width - 1) / 2.0 + dx
    ay, ax = 0.45 * height, 0.4 * width
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    mask = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0
    band = np.clip(np.floor((yy - (cy - ay)) / (2 * ay) * N_BANDS), 0, N_BANDS - 1).astype(int)
    half = (xx >= cx).astype(int)
    return mask, band * N_HALVES + half


def render(spec: SampleSpec, dataset_seed: int, config: Optional[DataConfig] = None,
           maps: Optional[Dict[Modality, np.ndarray]] = None) -> np.ndarray:
    config = config or DataConfig()
    maps = maps or modality_maps(dataset_seed, config.signature_dim)
    modality = Modality(spec.modality)
    h, w = config.height, config.width
    image = np.zeros((modality.channels, h, w))

    clutter_rng = np.random.default_rng([dataset_seed, spec.clutter_seed])
    for _ in range(int(clutter_rng.integers(0, MAX_CLUTTER + 1))):
        y0, x0 = int(clutter_rng.integers(0, h)), int(clutter_rng.integers(0, w))
        rh = int(clutter_rng.integers(2, max(3, h // 3 + 1)))
        rw = int(clutter_rng.integers(2, max(3, w // 2 + 1)))
        image[:, y0:y0 + rh, x0:x0 + rw] = clutter_rng.uniform(0.0, 1.0, (modality.channels, 1, 1))

    signature = identity_signature(dataset_seed, spec.identity, config.signature_dim)
    stripes = sigmoid_np(maps[modality] @ signature)
    mask, cell = body_mask(h, w, spec.dx, spec.dy)
    for c in range(modality.channels):
        image[c][mask] = stripes[c][cell[mask]]

    noise_rng = np.random.default_rng([dataset_seed, spec.noise_seed])
    image += noise_rng.normal(0.0, config.noise_sigma, image.shape)
    return np.clip(image, 0.0, 1.0)


def _make_specs(identities: Sequence[int], images_per_modality: int, seed: int, jitter: int) -> List[SampleSpec]:
    specs = []
    for identity in identities:
        for modality in (Modality.RGB, Modality.IR):
            for instance in range(images_per_modality):
                rng = np.random.default_rng([seed, identity, _MODALITY_CODE[modality], instance])
                dx, dy = rng.integers(-jitter, jitter + 1, size=2)
                noise_seed, clutter_seed = rng.integers(0, 2 ** 31, size=2)
                specs.append(SampleSpec(identity=identity, modality=modality, instance=instance,
                                        dx=int(dx), dy=int(dy), noise_seed=int(noise_seed),
                                        clutter_seed=int(clutter_seed)))
    return specs


def build_dataset(n_train_ids: int, n_test_ids: int, images_per_modality: int, seed: int,
                  jitter: int = 2) -> DatasetManifest:
    errors = [{"field": name, "message": f"{name} must be positive, got {value}"}
              for name, value in (("n_train_ids", n_train_ids), ("n_test_ids", n_test_ids),
                                  ("images_per_modality", images_per_modality)) if value < 1]
    if errors:
        raise ConfigValidationError(errors)
    train_ids = range(0, n_train_ids)
    test_ids = range(n_train_ids, n_train_ids + n_test_ids)
    manifest = DatasetManifest(
        seed=seed, n_train_ids=n_train_ids, n_test_ids=n_test_ids, images_per_modality=images_per_modality,
        train_id_range=[train_ids.start, train_ids.stop], test_id_range=[test_ids.start, test_ids.stop],
        train_specs=_make_specs(train_ids, images_per_modality, seed, jitter),
        test_specs=_make_specs(test_ids, images_per_modality, seed, jitter),
    )
    logger.info(f"Built synthetic dataset seed={seed}: {len(manifest.train_specs)} train / "
                f"{len(manifest.test_specs)} test images")
    return manifest


def build_from_config(config: DataConfig) -> DatasetManifest:
    return build_dataset(config.n_train_ids, config.n_test_ids, config.images_per_modality,
                         config.dataset_seed, config.jitter)


class ImageStore:
    """Memoised renders keyed by (split, spec index)."""

    def __init__(self, manifest: DatasetManifest, config: Optional[DataConfig] = None):
        self.manifest = manifest
        self.config = config or DataConfig()
        self.maps = modality_maps(manifest.seed, self.config.signature_dim)
        self._images: Dict[Tuple[str, int], np.ndarray] = {}

    def specs(self, split: str) -> List[SampleSpec]:
        return self.manifest.train_specs if split == "train" else self.manifest.test_specs

    def get(self, split: str, index: int) -> np.ndarray:
        key = (split, index)
        if key not in self._images:
            self._images[key] = render(self.specs(split)[index], self.manifest.seed, self.config, self.maps)
        return self._images[key]

    def stack(self, split: str, indices: Sequence[int]) -> np.ndarray:
        return np.stack([self.get(split, i) for i in indices])

    def save(self, path: str) -> str:
        start_time = time.perf_counter()
        tensors = {}
        for split in ("train", "test"):
            for i in range(len(self.specs(split))):
                tensors[f"{split}/{i:06d}"] = self.get(split, i)
        checkpoint.save(path, tensors, meta={"dataset_seed": self.manifest.seed,
                                             "data": self.config.model_dump(mode="json")})
        logger.info(f"Cached {len(tensors)} images in {time.perf_counter() - start_time:.2f}s")
        return path

    def load(self, path: str) -> None:
        tensors, _ = checkpoint.load(path)
        for name, image in tensors.items():
            split, index = name.split("/")
            self._images[(split, int(index))] = image


@dataclass
class IdentityBatch:
    """P identities x K images per modality; RGB rows come first, then IR rows in the same identity order."""
    images: Dict[Modality, np.ndarray]
    identities: List[int]
    modalities: List[Modality]
    spec_indices: List[int] = field(default_factory=list)

    def __len__(self):
        return len(self.identities)


def group_by_identity(specs: Sequence[SampleSpec], indices: Optional[Sequence[int]] = None
                      ) -> Dict[int, Dict[Modality, List[int]]]:
    indices = range(len(specs)) if indices is None else indices
    groups: Dict[int, Dict[Modality, List[int]]] = {}
    for i in indices:
        spec = specs[i]
        groups.setdefault(spec.identity, {Modality.RGB: [], Modality.IR: []})[Modality(spec.modality)].append(i)
    return groups


def sample_batch(manifest: DatasetManifest, P: int, K: int, rng: np.random.Generator,
                 indices: Optional[Sequence[int]] = None, store: Optional[ImageStore] = None) -> IdentityBatch:
    groups = group_by_identity(manifest.train_specs, indices)
    identities = sorted(groups)
    if P > len(identities):
        raise InsufficientDataError(f"batch needs {P} identities, only {len(identities)} available")
    chosen = rng.choice(identities, size=P, replace=False)

    rows: Dict[Modality, List[int]] = {Modality.RGB: [], Modality.IR: []}
    for identity in chosen:
        for modality in (Modality.RGB, Modality.IR):
            pool = groups[int(identity)][modality]
            if K > len(pool):
                raise InsufficientDataError(f"identity {identity} has {len(pool)} {modality.value} images, "
                                            f"batch needs {K}")
            rows[modality].extend(int(i) for i in rng.choice(pool, size=K, replace=False))

    store = store or ImageStore(manifest)
    spec_indices = rows[Modality.RGB] + rows[Modality.IR]
    return IdentityBatch(
        images={m: store.stack("train", rows[m]) for m in (Modality.RGB, Modality.IR)},
        identities=[manifest.train_specs[i].identity for i in spec_indices],
        modalities=[Modality.RGB] * len(rows[Modality.RGB]) + [Modality.IR] * len(rows[Modality.IR]),
        spec_indices=spec_indices,
    )
