"""Owner-side workflow: derive a watermark and train it into a fresh model."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .crypto import (
    DEFAULT_BLOCK_SIZE,
    DEFAULT_EXTREME_VALUE,
    OwnerKeys,
    OwnershipCredential,
    WatermarkSpec,
    make_credential,
    transform,
)
from .data import Dataset
from .nn import ModelHandle, ModelSpec, TrainConfig, build_model, save_model, train_epochs


def derive(credential: OwnershipCredential, model_spec: ModelSpec,
           block_size=DEFAULT_BLOCK_SIZE, extreme_value=DEFAULT_EXTREME_VALUE) -> WatermarkSpec:
    h, w, _ = model_spec.input_shape
    return transform(credential.signature, h, w, model_spec.num_classes, block_size, extreme_value)


def embed_multiple(
    dataset: Dataset,
    model_spec: ModelSpec,
    credentials: list[OwnershipCredential],
    config: TrainConfig,
    block_size: int = DEFAULT_BLOCK_SIZE,
    extreme_value: float = DEFAULT_EXTREME_VALUE,
    track_nc: bool = True,
) -> tuple[ModelHandle, list[WatermarkSpec]]:
    """Train a model from scratch with every credential's watermark at once."""
    if not credentials:
        raise ValueError("need at least one credential")
    specs = [derive(c, model_spec, block_size, extreme_value) for c in credentials]
    model = build_model(model_spec, config.seed)
    train_epochs(model, dataset.train, specs, config, dataset.test if track_nc else None)
    return model, specs


def embed_watermark(
    dataset: Dataset,
    model_spec: ModelSpec,
    keys: OwnerKeys,
    owner_id: str,
    timestamp: str,
    config: TrainConfig,
    block_size: int = DEFAULT_BLOCK_SIZE,
    extreme_value: float = DEFAULT_EXTREME_VALUE,
    track_nc: bool = True,
) -> tuple[ModelHandle, OwnershipCredential, WatermarkSpec]:
    """Sign, derive the watermark and train. The spec is returned, never stored in the model."""
    credential = make_credential(keys, owner_id, timestamp)
    model, (spec,) = embed_multiple(dataset, model_spec, [credential], config,
                                    block_size, extreme_value, track_nc)
    return model, credential, spec


def train_clean(dataset: Dataset, model_spec: ModelSpec, config: TrainConfig, track_nc=True) -> ModelHandle:
    model = build_model(model_spec, config.seed)
    return train_epochs(model, dataset.train, [], config, dataset.test if track_nc else None)


@dataclass
class OverheadReport:
    status: str  # "ok" | "not_reached" | "inconclusive"
    time_ratio_to_95pct_nc: float
    clean_final_nc: float
    target_nc: float
    clean_seconds: float
    wm_seconds_to_target: float
    clean_curve: list[tuple[float, float]] = field(default_factory=list)
    wm_curve: list[tuple[float, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def _curve(model: ModelHandle) -> list[tuple[float, float]]:
    return [(r.seconds, r.nc) for r in model.history if r.nc is not None]


def compare_overhead(clean: ModelHandle, watermarked: ModelHandle, fraction: float = 0.95) -> OverheadReport:
    """Time the watermarked model needs to reach ``fraction`` of clean NC, over clean training time.

    Both histories must carry per-epoch NC. Curve points are (cumulative
    training seconds, NC).
    """
    cc, wc = _curve(clean), _curve(watermarked)
    if not cc:
        return OverheadReport("inconclusive", math.nan, math.nan, math.nan, math.nan, math.nan, cc, wc)
    final = cc[-1][1]
    target = fraction * final
    total = cc[-1][0]
    num_classes = clean.spec.num_classes
    # a baseline no better than chance has no meaningful 95% mark
    if final <= 1.5 / num_classes or total <= 0:
        return OverheadReport("inconclusive", math.nan, final, target, total, math.nan, cc, wc)
    reached = next((t for t, nc in wc if nc >= target), None)
    if reached is None:
        return OverheadReport("not_reached", math.inf, final, target, total, math.inf, cc, wc)
    return OverheadReport("ok", reached / total, final, target, total, reached, cc, wc)


def overhead_experiment(
    dataset: Dataset,
    model_spec: ModelSpec,
    credential: OwnershipCredential,
    config: TrainConfig,
    clean: ModelHandle | None = None,
    watermarked: ModelHandle | None = None,
) -> tuple[OverheadReport, ModelHandle, ModelHandle]:
    """Train a clean twin and a watermarked model under one config and compare.

    Already-trained models (with NC histories) may be passed to skip training.
    """
    if clean is None:
        clean = train_clean(dataset, model_spec, config)
    if watermarked is None:
        watermarked, _ = embed_multiple(dataset, model_spec, [credential], config)
    return compare_overhead(clean, watermarked), clean, watermarked


def git_blob_hash(path: str | Path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_run(out_dir: str | Path, model: ModelHandle, credential: OwnershipCredential,
              config: TrainConfig, extra: dict | None = None) -> dict:
    """Write ``model.nmw``, ``credential.json`` and ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.nmw"
    save_model(model, model_path)
    credential.save(out / "credential.json")
    manifest = {
        "config": asdict(config),
        "seed": config.seed,
        "model_file": model_path.name,
        "model_hash": git_blob_hash(model_path),
        "model_spec": model.spec.to_json(),
        "history": [asdict(r) for r in model.history],
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
