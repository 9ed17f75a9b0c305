"""End-to-end experiment orchestration.

Stages are pure functions of (config, artifacts on disk): ingest writes
the manifest and fold assignment, extract writes one descriptor store per
(encoder, crop size), train fills the model bank with one GBDT per
(fold, seed, size, encoder) cell, predict fuses fold-disciplined model
outputs into per-image probabilities, evaluate derives metrics, report
renders them. Every reduction runs in a fixed order, so reruns and any
worker count produce byte-identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import boosting, evalkit, features, stainlab
from .errors import ConfigError, HistopipeError
from .patches import (
    CLASSES,
    CropSpec,
    DatasetManifest,
    ImageRecord,
    downscale_half,
    extract_random_crops,
    load_dataset,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("histopipe")

OUTPUT_DIR_ENV = "HISTOPIPE_CACHE"


class PartialStore(HistopipeError):
    """Descriptor store on disk fails checksum or header validation."""


class FoldCoverageError(HistopipeError):
    pass


class MissingModel(HistopipeError):
    pass


class MissingArtifacts(HistopipeError):
    pass


@dataclass(frozen=True)
class CropVariant:
    size: int
    scale: str = "half"

    def __post_init__(self):
        if self.scale not in ("half", "original"):
            raise ConfigError(f"crop scale must be half|original, got {self.scale!r}")
        if self.size < 1:
            raise ConfigError("crop size must be positive")


DEFAULT_CROP_VARIANTS = (CropVariant(400, "half"), CropVariant(650, "half"))

#: The paper-scale grid that also crops the original resolution.
FOUR_VARIANT_GRID = DEFAULT_CROP_VARIANTS + (
    CropVariant(800, "original"),
    CropVariant(1300, "original"),
)


def default_encoder_specs() -> tuple[features.EncoderSpec, ...]:
    """The three pretrained encoders of the reference configuration.

    Tap layer names are bindings to the exported graphs' output names and
    are expected to be overridden in the config next to model_path.
    """
    return (
        features.EncoderSpec(
            encoder_id="resnet50",
            tap_layers=("conv5_block3_out",),
            input_preprocessing="imagenet_caffe",
        ),
        features.EncoderSpec(
            encoder_id="inception_v3",
            tap_layers=("mixed10",),
            input_preprocessing="inception",
        ),
        features.EncoderSpec(
            encoder_id="vgg16",
            tap_layers=("block2_pool", "block3_pool", "block4_pool", "block5_pool"),
            input_preprocessing="imagenet_caffe",
        ),
    )


@dataclass
class PipelineConfig:
    dataset_root: Path
    labels_file: Path
    output_dir: Path
    encoders: tuple[features.EncoderSpec, ...] = field(default_factory=default_encoder_specs)
    crop_variants: tuple[CropVariant, ...] = DEFAULT_CROP_VARIANTS
    crops_per_size: int = 20
    n_augmentations: int = 50
    k_folds: int = 10
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    gbdt: boosting.GbdtParams = field(default_factory=boosting.GbdtParams)
    stain: stainlab.MacenkoParams = field(default_factory=stainlab.MacenkoParams)
    pool: features.PoolParams = field(default_factory=features.PoolParams)
    master_seed: int = 0
    affine_augmentation: bool = True

    def __post_init__(self):
        self.dataset_root = Path(self.dataset_root)
        self.labels_file = Path(self.labels_file)
        self.output_dir = Path(self.output_dir)
        if self.n_augmentations < 1:
            raise ConfigError("n_augmentations must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.k_folds < 2:
            raise ConfigError("k_folds must be >= 2")
        sizes = [v.size for v in self.crop_variants]
        if len(set(sizes)) != len(sizes):
            raise ConfigError("crop sizes must be unique across variants")
        names = [e.name for e in self.encoders]
        if len(set(names)) != len(names):
            raise ConfigError("encoder names must be unique")

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(v.size for v in self.crop_variants)

    @property
    def scale_of(self) -> dict[int, str]:
        return {v.size: v.scale for v in self.crop_variants}

    def store_keys(self) -> list[tuple[str, int]]:
        """(encoder name, crop size) pairs in canonical order."""
        return sorted(
            (enc.name, variant.size)
            for enc in self.encoders
            for variant in self.crop_variants
        )

    def bank_cells(self) -> list[tuple[str, int, int, int]]:
        """(encoder, size, fold, seed) cells in canonical order."""
        return [
            (name, size, fold, seed)
            for (name, size) in self.store_keys()
            for fold in range(self.k_folds)
            for seed in self.seeds
        ]

    def descriptors_per_image(self) -> int:
        return self.n_augmentations * len(self.crop_variants) * len(self.encoders)


def _parse_override(raw: str) -> tuple[str, object]:
    if "=" not in raw:
        raise ConfigError(f"override {raw!r} is not key=value")
    key, text = raw.split("=", 1)
    try:
        value = tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        value = text
    return key.strip(), value


def _set_dotted(tree: dict, dotted: str, value: object) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {dotted!r}: {part!r} is not a table")
    node[parts[-1]] = value


def load_config(
    path: Path | str,
    overrides: list[str] | None = None,
    env: dict | None = None,
) -> PipelineConfig:
    """Parse a TOML config, apply HISTOPIPE_CACHE and --set overrides.

    Precedence: config file < HISTOPIPE_CACHE (output_dir only) < --set.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        tree = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    env = os.environ if env is None else env
    if env.get(OUTPUT_DIR_ENV):
        tree["output_dir"] = env[OUTPUT_DIR_ENV]
    for raw in overrides or []:
        key, value = _parse_override(raw)
        _set_dotted(tree, key, value)
    return config_from_dict(tree)


def config_from_dict(tree: dict) -> PipelineConfig:
    tree = dict(tree)
    try:
        for required in ("dataset_root", "labels_file", "output_dir"):
            if required not in tree:
                raise ConfigError(f"config is missing {required!r}")
        encoders = tuple(
            features.EncoderSpec(
                encoder_id=e["encoder_id"],
                name=e.get("name", ""),
                model_path=e.get("model_path"),
                tap_layers=tuple(e.get("tap_layers", ())),
                descriptor_len=int(e.get("descriptor_len", 0)),
                input_preprocessing=e.get("input_preprocessing", "unit"),
            )
            for e in tree.pop("encoders", [])
        ) or default_encoder_specs()
        variants = tuple(
            CropVariant(size=int(v["size"]), scale=v.get("scale", "half"))
            for v in tree.pop("crop_variants", [])
        ) or DEFAULT_CROP_VARIANTS
        gbdt = boosting.GbdtParams(**tree.pop("gbdt", {}))
        stain_kwargs = tree.pop("stain", {})
        if "reference_stains" in stain_kwargs:
            stain_kwargs["reference_stains"] = np.asarray(
                stain_kwargs["reference_stains"], dtype=np.float64
            )
        if "reference_max_concentrations" in stain_kwargs:
            stain_kwargs["reference_max_concentrations"] = np.asarray(
                stain_kwargs["reference_max_concentrations"], dtype=np.float64
            )
        stain = stainlab.MacenkoParams(**stain_kwargs)
        pool = features.PoolParams(**tree.pop("pool", {}))
        if "seeds" in tree:
            tree["seeds"] = tuple(int(s) for s in tree["seeds"])
        return PipelineConfig(
            encoders=encoders, crop_variants=variants, gbdt=gbdt, stain=stain, pool=pool,
            **tree,
        )
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


# ---------------------------------------------------------------------------
# Artifact paths
# ---------------------------------------------------------------------------


class ArtifactPaths:
    def __init__(self, output_dir: Path):
        self.root = Path(output_dir)
        self.manifest = self.root / "manifest.json"
        self.folds = self.root / "folds.json"
        self.descriptors = self.root / "descriptors"
        self.models = self.root / "models"
        self.bank = self.models / "bank.json"
        self.predictions = self.root / "predictions.json"
        self.metrics = self.root / "metrics.json"
        self.report = self.root / "report"

    def store(self, encoder_name: str, size: int) -> Path:
        return self.descriptors / f"{encoder_name}_{size}.hpd"

    def model(self, encoder_name: str, size: int, fold: int, seed: int) -> Path:
        return self.models / f"f{fold}_s{seed}_{encoder_name}_{size}.gbdt"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _parallel_map(fn, items, jobs: int):
    """Order-preserving map, sequential or across worker processes.

    Worker processes (not threads: the work is many small numpy calls, so
    threads would serialize on the GIL) compute pure functions of their
    arguments; results are consumed in input order, so the output bytes
    cannot depend on the worker count.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        for item in items:
            yield fn(item)
        return
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        yield from pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs)))


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _read_json(path: Path):
    if not path.exists():
        raise MissingArtifacts(str(path))
    return json.loads(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def run_ingest(config: PipelineConfig) -> tuple[DatasetManifest, evalkit.FoldAssignment]:
    """Validate the dataset, assign folds, persist both."""
    manifest = load_dataset(config.dataset_root, config.labels_file)
    folds = evalkit.stratified_group_kfold(manifest, config.k_folds, config.master_seed)
    paths = ArtifactPaths(config.output_dir)
    paths.root.mkdir(parents=True, exist_ok=True)
    _write_json(
        paths.manifest,
        {
            "class_counts": manifest.class_counts,
            "records": [
                {"image_id": r.image_id, "filename": r.source_path.name, "label": r.label}
                for r in manifest.records
            ],
        },
    )
    _write_json(paths.folds, folds.to_json())
    return manifest, folds


def load_folds(config: PipelineConfig) -> evalkit.FoldAssignment:
    return evalkit.FoldAssignment.from_json(_read_json(ArtifactPaths(config.output_dir).folds))


def _image_descriptor_rows(
    record: ImageRecord, config: PipelineConfig
) -> dict[tuple[str, int], np.ndarray]:
    """All (encoder, size) descriptor rows of one image: (n_aug, dim) each."""
    try:
        normalized = stainlab.normalize_stains(record.pixels, config.stain)
        conc = stainlab.separate_stains(
            normalized, config.stain.reference_stains, config.stain.i0
        )
        out = {
            (spec.name, variant.size): np.empty(
                (config.n_augmentations, spec.descriptor_len), dtype=np.float32
            )
            for spec in config.encoders
            for variant in config.crop_variants
        }
        encoders = sorted(config.encoders, key=lambda s: s.name)
        for aug in range(config.n_augmentations):
            params = stainlab.sample_augmentation(
                stainlab.augmentation_seed(config.master_seed, record.image_id, aug)
            )
            if not config.affine_augmentation:
                params = stainlab.strip_affine(params)
            augmented = stainlab.apply_augmentation(
                conc, config.stain.reference_stains, params, config.stain.i0
            )
            halved = None
            for variant in config.crop_variants:
                if variant.scale == "original":
                    src = augmented
                else:
                    if halved is None:
                        halved = downscale_half(augmented)
                    src = halved
                crops = extract_random_crops(
                    src,
                    CropSpec(
                        sizes=(variant.size,),
                        crops_per_size=config.crops_per_size,
                        seed=config.master_seed,
                    ),
                    record.image_id,
                    aug,
                )
                pixel_list = [c.pixels for c in crops]
                for spec in encoders:
                    matrix = features.make_encoder(spec).encode_many(pixel_list)
                    crop_descriptors = [
                        features.Descriptor(
                            values=matrix[i],
                            image_id=record.image_id,
                            encoder_id=spec.name,
                            crop_size=variant.size,
                            augmentation_index=aug,
                            crop_ordinal=crops[i].ordinal,
                        )
                        for i in range(len(crops))
                    ]
                    pooled = features.pnorm_pool(crop_descriptors, config.pool)
                    out[(spec.name, variant.size)][aug] = pooled.values.astype(np.float32)
        return out
    except HistopipeError as exc:
        raise type(exc)(f"image {record.image_id}: {exc}") from exc


def _extract_worker(args):
    record, config = args
    return _image_descriptor_rows(record, config)


def _store_is_complete(path: Path, manifest: DatasetManifest, config: PipelineConfig) -> bool:
    if not path.exists():
        return False
    digest_path = path.with_suffix(path.suffix + ".sha256")
    if not digest_path.exists():
        raise PartialStore(f"{path}: checksum sidecar missing")
    if _sha256(path) != digest_path.read_text(encoding="utf-8").strip():
        raise PartialStore(f"{path}: checksum mismatch")
    header, _ = features.read_descriptor_store(path)
    if (
        header["image_ids"] != manifest.image_ids
        or header["n_augmentations"] != config.n_augmentations
    ):
        raise PartialStore(f"{path}: header does not match the current configuration")
    return True


def run_extraction(
    config: PipelineConfig, manifest: DatasetManifest, jobs: int = 1
) -> dict[tuple[str, int], Path]:
    """Write one descriptor store per (encoder, size); skip validated ones."""
    paths = ArtifactPaths(config.output_dir)
    paths.descriptors.mkdir(parents=True, exist_ok=True)
    store_paths = {key: paths.store(*key) for key in config.store_keys()}
    missing = {
        key: p
        for key, p in store_paths.items()
        if not _store_is_complete(p, manifest, config)
    }
    if not missing:
        log.info("extraction: all %d stores complete, skipping", len(store_paths))
        return store_paths

    dims = {
        (spec.name, variant.size): spec.descriptor_len
        for spec in config.encoders
        for variant in config.crop_variants
    }
    n_img = len(manifest.records)
    assembled = {
        key: np.empty((n_img * config.n_augmentations, dims[key]), dtype=np.float32)
        for key in missing
    }
    log.info(
        "extraction: %d images x %d augmentations -> %d stores",
        n_img, config.n_augmentations, len(missing),
    )

    tasks = [(record, config) for record in manifest.records]
    for idx, rows in enumerate(_parallel_map(_extract_worker, tasks, jobs)):
        lo = idx * config.n_augmentations
        for key in missing:
            assembled[key][lo : lo + config.n_augmentations] = rows[key]

    for key, path in sorted(missing.items()):
        features.write_descriptor_store(
            path,
            encoder_name=key[0],
            crop_size=key[1],
            image_ids=manifest.image_ids,
            n_augmentations=config.n_augmentations,
            rows=assembled[key],
        )
        path.with_suffix(path.suffix + ".sha256").write_text(_sha256(path), encoding="utf-8")
    return store_paths


def load_stores(config: PipelineConfig) -> dict[tuple[str, int], tuple[dict, np.ndarray]]:
    paths = ArtifactPaths(config.output_dir)
    stores = {}
    for key in config.store_keys():
        path = paths.store(*key)
        if not path.exists():
            raise MissingArtifacts(f"descriptor store missing: {path}")
        stores[key] = features.read_descriptor_store(path)
    return stores


def _training_arrays(header: dict, rows: np.ndarray, manifest: DatasetManifest):
    label_of = manifest.label_of
    n_aug = header["n_augmentations"]
    labels = np.empty(rows.shape[0], dtype=np.int64)
    groups: list[str] = []
    for i, image_id in enumerate(header["image_ids"]):
        if image_id not in label_of:
            raise FoldCoverageError(f"store references unknown image {image_id!r}")
        labels[i * n_aug : (i + 1) * n_aug] = CLASSES.index(label_of[image_id])
        groups.extend([image_id] * n_aug)
    return labels, groups


def run_training(
    config: PipelineConfig,
    manifest: DatasetManifest,
    folds: evalkit.FoldAssignment,
    jobs: int = 1,
) -> dict:
    """Fit one GBDT per (encoder, size, fold, seed) cell and index the bank.

    Each cell trains on every descriptor row whose image lies outside the
    cell's fold; the audit below re-checks that no training image belongs
    to the evaluation fold.
    """
    paths = ArtifactPaths(config.output_dir)
    if paths.bank.exists():
        bank = _read_json(paths.bank)
        if _bank_is_complete(bank, config, paths):
            log.info("training: bank complete, skipping")
            return bank

    stores = load_stores(config)
    for image_id in next(iter(stores.values()))[0]["image_ids"]:
        if image_id not in folds.fold_of:
            raise FoldCoverageError(f"image {image_id!r} has no fold assignment")

    paths.models.mkdir(parents=True, exist_ok=True)
    per_key = {}
    for key, (header, rows) in stores.items():
        labels, groups = _training_arrays(header, rows, manifest)
        fold_per_row = np.array([folds.fold_of[g] for g in groups])
        per_key[key] = (rows, labels, np.array(groups), fold_per_row)

    cells = config.bank_cells()
    log.info("training: %d bank cells", len(cells))

    tasks = []
    for cell in cells:
        name, size, fold, seed = cell
        rows, labels, groups, fold_per_row = per_key[(name, size)]
        mask = fold_per_row != fold
        params = replace(config.gbdt, seed=seed, num_classes=len(CLASSES))
        tasks.append((cell, rows[mask], labels[mask], groups[mask], params))

    bank_cells = []
    for cell, blob, train_images in _parallel_map(_fit_cell_worker, tasks, jobs):
        name, size, fold, seed = cell
        path = paths.model(name, size, fold, seed)
        path.write_bytes(blob)
        bank_cells.append(
            {
                "encoder": name,
                "size": size,
                "fold": fold,
                "seed": seed,
                "path": str(path.relative_to(paths.root)),
                "sha256": hashlib.sha256(blob).hexdigest(),
                "train_images": train_images,
            }
        )

    bank = {
        "k_folds": config.k_folds,
        "seeds": list(config.seeds),
        "cells": bank_cells,
    }
    audit_leakage(bank, folds)
    _write_json(paths.bank, bank)
    return bank


def _fit_cell_worker(task):
    cell, rows, labels, groups, params = task
    data = boosting.TrainingMatrix(rows=rows, labels=labels, group_ids=list(groups))
    model = boosting.fit(data, params)
    return cell, boosting.serialize_model(model), sorted(set(data.group_ids))


def _bank_is_complete(bank: dict, config: PipelineConfig, paths: ArtifactPaths) -> bool:
    expected = {
        (c[0], c[1], c[2], c[3]) for c in config.bank_cells()
    }
    got = {(c["encoder"], c["size"], c["fold"], c["seed"]) for c in bank.get("cells", [])}
    if expected != got:
        return False
    for cell in bank["cells"]:
        path = paths.root / cell["path"]
        if not path.exists() or hashlib.sha256(path.read_bytes()).hexdigest() != cell["sha256"]:
            return False
    return True


def audit_leakage(bank: dict, folds: evalkit.FoldAssignment) -> None:
    """Raise if any model saw a descriptor of an image in its own fold."""
    for cell in bank["cells"]:
        leaked = evalkit.verify_group_leakage(folds, cell["fold"], cell["train_images"])
        if leaked:
            raise HistopipeError(
                f"leakage: model {cell['path']} trained on fold-{cell['fold']} "
                f"images {leaked[:5]}"
            )


def _load_bank_models(config: PipelineConfig) -> tuple[dict, dict]:
    paths = ArtifactPaths(config.output_dir)
    bank = _read_json(paths.bank)
    models = {}
    for cell in bank["cells"]:
        key = (cell["encoder"], cell["size"], cell["fold"], cell["seed"])
        path = paths.root / cell["path"]
        if not path.exists():
            raise MissingModel(str(path))
        models[key] = boosting.deserialize_model(path.read_bytes())
    return bank, models


def _cv_group_sums(
    config: PipelineConfig,
    folds: evalkit.FoldAssignment,
    stores: dict,
    models: dict,
    keys: list[tuple[str, int]],
) -> dict[tuple[str, int], tuple[dict, dict]]:
    """Per (encoder, size): fold-disciplined probability sums and counts per image."""
    out = {}
    for key in keys:
        header, rows = stores[key]
        n_aug = header["n_augmentations"]
        index_of = {img: i for i, img in enumerate(header["image_ids"])}
        sums = {i: np.zeros(len(CLASSES)) for i in header["image_ids"]}
        counts = {i: 0 for i in header["image_ids"]}
        for fold in range(folds.k):
            fold_images = [i for i in header["image_ids"] if folds.fold_of[i] == fold]
            if not fold_images:
                continue
            slab = np.concatenate(
                [rows[index_of[i] * n_aug : (index_of[i] + 1) * n_aug] for i in fold_images]
            )
            for seed in config.seeds:
                model_key = (key[0], key[1], fold, seed)
                if model_key not in models:
                    raise MissingModel(f"no model for {model_key}")
                proba = boosting.predict_proba(models[model_key], slab)
                proba = proba.reshape(len(fold_images), n_aug, len(CLASSES))
                for j, image_id in enumerate(fold_images):
                    sums[image_id] += proba[j].sum(axis=0)
                    counts[image_id] += n_aug
        out[key] = (sums, counts)
    return out


def _records_from_sums(manifest, sums, counts) -> list[evalkit.PredictionRecord]:
    label_of = manifest.label_of
    return [
        evalkit.PredictionRecord(
            image_id=image_id,
            true_label=label_of[image_id],
            proba=sums[image_id] / counts[image_id],
        )
        for image_id in manifest.image_ids
    ]


def cross_validated_predict(
    config: PipelineConfig,
    manifest: DatasetManifest,
    folds: evalkit.FoldAssignment,
    group: tuple[str, int] | None = None,
) -> list[evalkit.PredictionRecord]:
    """Per-image probabilities fused over augmentations, seeds, sizes, encoders.

    Every image is predicted only by models whose excluded fold is the
    image's own; ``group`` restricts fusion to one (encoder, size) pair.
    The mean runs in fixed (encoder, size, fold, seed, augmentation)
    order, so results are reproducible bit for bit.
    """
    stores = load_stores(config)
    _, models = _load_bank_models(config)
    keys = [group] if group else config.store_keys()
    per_key = _cv_group_sums(config, folds, stores, models, keys)
    sums = {i: np.zeros(len(CLASSES)) for i in manifest.image_ids}
    counts = {i: 0 for i in manifest.image_ids}
    for key in keys:
        key_sums, key_counts = per_key[key]
        for image_id in manifest.image_ids:
            sums[image_id] += key_sums[image_id]
            counts[image_id] += key_counts[image_id]
    return _records_from_sums(manifest, sums, counts)


def run_predict(
    config: PipelineConfig, manifest: DatasetManifest, folds: evalkit.FoldAssignment
) -> dict:
    """Write fused and per-group cross-validated predictions (one model pass)."""
    paths = ArtifactPaths(config.output_dir)
    if paths.predictions.exists():
        log.info("predict: predictions.json present, skipping")
        return _read_json(paths.predictions)

    stores = load_stores(config)
    _, models = _load_bank_models(config)
    keys = config.store_keys()
    per_key = _cv_group_sums(config, folds, stores, models, keys)

    def dump(records):
        return [
            {
                "image_id": r.image_id,
                "true_label": r.true_label,
                "proba": [float(v) for v in r.proba],
                "predicted_label": r.predicted_label,
            }
            for r in records
        ]

    fused_sums = {i: np.zeros(len(CLASSES)) for i in manifest.image_ids}
    fused_counts = {i: 0 for i in manifest.image_ids}
    groups = {}
    for key in keys:
        key_sums, key_counts = per_key[key]
        groups[f"{key[0]}-{key[1]}"] = dump(_records_from_sums(manifest, key_sums, key_counts))
        for image_id in manifest.image_ids:
            fused_sums[image_id] += key_sums[image_id]
            fused_counts[image_id] += key_counts[image_id]

    payload = {
        "fused": dump(_records_from_sums(manifest, fused_sums, fused_counts)),
        "groups": groups,
    }
    _write_json(paths.predictions, payload)
    return payload


def _test_descriptor_worker(args) -> dict[tuple[str, int], np.ndarray]:
    path_str, config = args
    path = Path(path_str)
    record = ImageRecord(image_id=path.stem, label=CLASSES[0], source_path=path)
    descriptors = features.build_descriptor_set(
        record,
        list(config.encoders),
        CropSpec(sizes=config.sizes, crops_per_size=config.crops_per_size,
                 seed=config.master_seed),
        config.n_augmentations,
        config.stain,
        config.master_seed,
        scale_of=config.scale_of,
        pool_params=config.pool,
        affine=config.affine_augmentation,
    )
    by_key: dict[tuple[str, int], list[np.ndarray]] = {}
    for d in descriptors:
        by_key.setdefault((d.encoder_id, d.crop_size), []).append(d.values)
    return {k: np.stack(v) for k, v in by_key.items()}


def predict_test(
    config: PipelineConfig, image_paths: list[Path | str], jobs: int = 1
) -> list[evalkit.PredictionRecord]:
    """Predict unseen images with the full bank (all folds, seeds, sizes, encoders)."""
    _, models = _load_bank_models(config)
    tasks = [(str(p), config) for p in image_paths]
    records = []
    for path, by_key in zip(image_paths, _parallel_map(_test_descriptor_worker, tasks, jobs)):
        total = np.zeros(len(CLASSES))
        count = 0
        for key in sorted(by_key):
            rows = by_key[key]
            for model_key in sorted(k for k in models if (k[0], k[1]) == key):
                proba = boosting.predict_proba(models[model_key], rows)
                total += proba.sum(axis=0)
                count += proba.shape[0]
        records.append(
            evalkit.PredictionRecord(
                image_id=Path(path).stem, true_label="", proba=total / count
            )
        )
    return records


def _accuracy_block(records, folds: evalkit.FoldAssignment) -> dict:
    per_fold = []
    for fold in range(folds.k):
        fold_records = [r for r in records if folds.fold_of[r.image_id] == fold]
        per_fold.append(evalkit.accuracy(fold_records) if fold_records else float("nan"))
    mean, std = evalkit.mean_std_raw(per_fold)
    return {
        "per_fold": per_fold,
        "mean": mean,
        "std": std,
        "mean_1dp": evalkit.round_1dp(mean),
        "std_1dp": evalkit.round_1dp(std),
        "accuracy": evalkit.accuracy(records),
    }


def run_evaluate(config: PipelineConfig, folds: evalkit.FoldAssignment) -> dict:
    """Compute the metrics report from persisted predictions."""
    paths = ArtifactPaths(config.output_dir)
    if paths.metrics.exists():
        log.info("evaluate: metrics.json present, skipping")
        return _read_json(paths.metrics)
    payload = _read_json(paths.predictions)
    if not payload.get("fused"):
        raise MissingArtifacts(f"{paths.predictions}: no prediction records")

    def parse(dumped):
        return [
            evalkit.PredictionRecord(
                image_id=r["image_id"], true_label=r["true_label"], proba=np.array(r["proba"])
            )
            for r in dumped
        ]

    fused = parse(payload["fused"])
    binary = evalkit.binarize_carcinoma(fused)
    curve = evalkit.roc_curve(binary)
    threshold_correct = sum(
        1 for b in binary if (b.score >= 0.5) == b.positive
    )
    collapsed_correct = sum(
        1
        for r in fused
        if (r.predicted_label in evalkit.CARCINOMA_CLASSES)
        == (r.true_label in evalkit.CARCINOMA_CLASSES)
    )
    operating = {}
    for threshold in (0.33, 0.50):
        sens, spec = evalkit.operating_point(curve, threshold)
        operating[f"{threshold:.2f}"] = {"sensitivity": sens, "specificity": spec}

    metrics = {
        "classes": list(CLASSES),
        "k_folds": folds.k,
        "four_class": {
            "fused": _accuracy_block(fused, folds),
            "groups": {
                gname: _accuracy_block(parse(records), folds)
                for gname, records in sorted(payload["groups"].items())
            },
        },
        "two_class": {
            "accuracy_threshold_50": 100.0 * threshold_correct / len(binary),
            "accuracy_argmax_collapsed": 100.0 * collapsed_correct / len(fused),
            "auc": curve.auc,
            "roc_points": [
                [fpr, tpr, (None if t == float("inf") else t)]
                for fpr, tpr, t in curve.points
            ],
            "operating_points": operating,
        },
        "confusion": evalkit.confusion_matrix(fused).counts.tolist(),
    }
    _write_json(paths.metrics, metrics)
    return metrics


def run_report(config: PipelineConfig) -> list[Path]:
    """Emit the accuracy table, ROC data + SVG plot, and confusion CSV."""
    paths = ArtifactPaths(config.output_dir)
    metrics_path = paths.metrics
    if not metrics_path.exists():
        raise MissingArtifacts(str(metrics_path))
    metrics = _read_json(metrics_path)
    if not metrics.get("four_class", {}).get("fused", {}).get("per_fold"):
        raise MissingArtifacts(f"{metrics_path}: empty metrics")
    paths.report.mkdir(parents=True, exist_ok=True)
    written = []

    k = metrics["k_folds"]
    table = paths.report / "table1.csv"
    header = ["model"] + [f"f{i + 1}" for i in range(k)] + ["mean", "std"]
    lines = [",".join(header)]
    four = metrics["four_class"]
    for gname, block in sorted(four["groups"].items()):
        cells = [gname] + [repr(v) for v in block["per_fold"]]
        cells += [f"{block['mean_1dp']:.1f}", f"{block['std_1dp']:.1f}"]
        lines.append(",".join(cells))
    fused = four["fused"]
    cells = ["fusion"] + [repr(v) for v in fused["per_fold"]]
    cells += [f"{fused['mean_1dp']:.1f}", f"{fused['std_1dp']:.1f}"]
    lines.append(",".join(cells))
    table.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(table)

    roc_csv = paths.report / "roc_points.csv"
    rows = ["fpr,tpr,threshold"]
    for fpr, tpr, t in metrics["two_class"]["roc_points"]:
        rows.append(f"{fpr!r},{tpr!r},{'inf' if t is None else repr(t)}")
    roc_csv.write_text("\n".join(rows) + "\n", encoding="utf-8")
    written.append(roc_csv)

    confusion = paths.report / "confusion.csv"
    rows = ["true\\pred," + ",".join(CLASSES)]
    for label, counts in zip(CLASSES, metrics["confusion"]):
        rows.append(label + "," + ",".join(str(c) for c in counts))
    confusion.write_text("\n".join(rows) + "\n", encoding="utf-8")
    written.append(confusion)

    written.append(_roc_svg(paths.report / "roc.svg", metrics))
    return written


def _roc_svg(path: Path, metrics: dict) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    points = metrics["two_class"]["roc_points"]
    fpr = [p[0] for p in points]
    tpr = [p[1] for p in points]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(fpr, tpr, color="#444444", lw=1.5,
            label=f"AUC = {metrics['two_class']['auc']:.3f}")
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="#bbbbbb")
    colors = {"0.33": "green", "0.50": "blue"}
    for name, op in metrics["two_class"]["operating_points"].items():
        x = 1.0 - op["specificity"] / 100.0
        y = op["sensitivity"] / 100.0
        ax.plot([x], [y], "o", color=colors.get(name, "red"),
                label=f"setpoint {name}: {op['sensitivity']:.1f}/{op['specificity']:.1f}")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("carcinoma detection ROC")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def run_all(config: PipelineConfig, jobs: int = 1) -> dict:
    """ingest -> extract -> train -> predict (CV) -> evaluate -> report."""
    manifest, folds = run_ingest(config)
    run_extraction(config, manifest, jobs=jobs)
    run_training(config, manifest, folds, jobs=jobs)
    run_predict(config, manifest, folds)
    metrics = run_evaluate(config, folds)
    run_report(config)
    return metrics


@dataclass
class RunArtifacts:
    """Validated handles to everything a finished run wrote."""

    store_paths: dict[tuple[str, int], Path]
    bank_path: Path
    predictions: dict
    metrics: dict

    @classmethod
    def load(cls, config: PipelineConfig) -> "RunArtifacts":
        paths = ArtifactPaths(config.output_dir)
        manifest = load_dataset(config.dataset_root, config.labels_file)
        store_paths = {}
        for key in config.store_keys():
            path = paths.store(*key)
            if not _store_is_complete(path, manifest, config):
                raise MissingArtifacts(f"descriptor store missing: {path}")
            store_paths[key] = path
        if not paths.bank.exists():
            raise MissingArtifacts(str(paths.bank))
        bank = _read_json(paths.bank)
        if not _bank_is_complete(bank, config, paths):
            raise MissingArtifacts("model bank incomplete")
        return cls(
            store_paths=store_paths,
            bank_path=paths.bank,
            predictions=_read_json(paths.predictions),
            metrics=_read_json(paths.metrics),
        )
