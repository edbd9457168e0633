"""Removal and piracy attacks against watermarked models.

Every attack works on a copy; the handle passed in is left untouched.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .crypto import OwnershipCredential, WatermarkSpec
from .data import Dataset, Split
from .embedding import derive
from .nn import ModelHandle, TrainConfig, build_model, evaluate_nc, to_tensor, train_epochs
from .verification import (
    DEFAULT_SAMPLES,
    DEFAULT_THRESHOLD,
    VerificationReport,
    verify_watermark,
    watermark_accuracy,
)

log = logging.getLogger(__name__)

SCOPES = ("added_layer", "last_two", "all_dense", "all")


@dataclass
class Measurement:
    nc: float
    owner_true: float | None = None
    owner_null: float | None = None
    owner_wm: float | None = None
    pirate_true: float | None = None
    pirate_null: float | None = None
    pirate_wm: float | None = None


@dataclass
class AttackReport:
    kind: str
    before: Measurement
    after: Measurement
    metadata: dict = field(default_factory=dict)
    curve: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def _spec_for(model: ModelHandle, wm) -> WatermarkSpec | None:
    if wm is None or isinstance(wm, WatermarkSpec):
        return wm
    return derive(wm, model.spec)


def measure(model, testset: Split, owner: WatermarkSpec | None = None,
            pirate: WatermarkSpec | None = None, sample_size=None, seed=0) -> Measurement:
    m = Measurement(evaluate_nc(model, testset))
    if owner is not None:
        m.owner_true, m.owner_null, m.owner_wm = watermark_accuracy(model, owner, testset, sample_size, seed)
    if pirate is not None:
        m.pirate_true, m.pirate_null, m.pirate_wm = watermark_accuracy(model, pirate, testset, sample_size, seed)
    return m


def _attack_lr(model: ModelHandle, config: TrainConfig) -> float:
    # attacks continue from the rate the owner's training ended on
    return model.last_lr if model.last_lr is not None else config.learning_rate


def _curve_callback(curve, testset, owner, pirate, sample_size, seed):
    def cb(model, rec):
        m = measure(model, testset, owner, pirate, sample_size, seed)
        # epochs are counted from the start of the attack, not the owner's run
        curve.append({"epoch": len(curve) + 1, "loss": rec.loss, **asdict(m)})
    return cb


def piracy_attack(
    model: ModelHandle,
    pirate_credential: OwnershipCredential,
    attacker_data: Split,
    epochs: int,
    config: TrainConfig,
    testset: Split,
    owner=None,
    sample_size: int | None = None,
    seed: int = 0,
    record_curve: bool = False,
) -> tuple[ModelHandle, AttackReport]:
    """Fine-tune a copy with the pirate's own dual embedding on attacker data."""
    owner = _spec_for(model, owner)
    pirate = derive(pirate_credential, model.spec)
    before = measure(model, testset, owner, pirate, sample_size, seed)
    attacked = model.copy()
    curve: list[dict] = []
    cb = _curve_callback(curve, testset, owner, pirate, sample_size, seed) if record_curve else None
    if epochs:
        train_epochs(attacked, attacker_data, [pirate], config, epochs=epochs,
                     learning_rate=_attack_lr(model, config), on_epoch=cb)
    after = measure(attacked, testset, owner, pirate, sample_size, seed) if epochs else before
    meta = {"epochs": epochs, "data_size": len(attacker_data),
            "injection_ratio": config.injection_ratio, "seed": config.seed,
            "pirate_owner": pirate_credential.verifier.owner_id}
    return attacked, AttackReport("piracy", before, after, meta, curve)


def fine_tune(
    model: ModelHandle,
    data: Split,
    epochs: int,
    config: TrainConfig,
    testset: Split,
    owner=None,
    sample_size: int | None = None,
    seed: int = 0,
) -> tuple[ModelHandle, AttackReport]:
    """Plain training of every layer on clean data; curves recorded per epoch."""
    owner = _spec_for(model, owner)
    before = measure(model, testset, owner, None, sample_size, seed)
    tuned = model.copy()
    curve: list[dict] = []
    if epochs:
        train_epochs(tuned, data, [], config, epochs=epochs, learning_rate=_attack_lr(model, config),
                     on_epoch=_curve_callback(curve, testset, owner, None, sample_size, seed))
    after = measure(tuned, testset, owner, None, sample_size, seed) if epochs else before
    meta = {"epochs": epochs, "data_size": len(data), "seed": config.seed}
    return tuned, AttackReport("finetune", before, after, meta, curve)


def _kernels(model: ModelHandle) -> list[torch.Tensor]:
    return [mod.weight for mod in model.net.layers.values() if hasattr(mod, "weight")]


def prune_ascending(model: ModelHandle, ratio: float) -> ModelHandle:
    """Zero the ``ratio`` share of smallest-magnitude kernel weights, pooled over all layers."""
    if not 0 <= ratio <= 1:
        raise ValueError(f"pruning ratio must lie in [0, 1], got {ratio}")
    pruned = model.copy()
    kernels = _kernels(pruned)
    flat = torch.cat([k.detach().abs().flatten() for k in kernels])
    k = int(round(ratio * flat.numel()))
    if k == 0:
        return pruned
    order = torch.argsort(flat, stable=True)
    keep = torch.ones_like(flat, dtype=torch.bool)
    keep[order[:k]] = False
    with torch.no_grad():
        offset = 0
        for w in kernels:
            n = w.numel()
            w.mul_(keep[offset:offset + n].view_as(w).to(w.dtype))
            offset += n
    pruned.meta["pruned_ratio"] = ratio
    return pruned


def prune_sweep(model: ModelHandle, ratios, testset: Split, owner=None,
                sample_size=None, seed=0) -> list[AttackReport]:
    owner = _spec_for(model, owner)
    before = measure(model, testset, owner, None, sample_size, seed)
    reports = []
    for r in ratios:
        after = measure(prune_ascending(model, r), testset, owner, None, sample_size, seed)
        reports.append(AttackReport("prune", before, after, {"ratio": r}))
    return reports


def channel_activations(model: ModelHandle, layer: str, inputs: np.ndarray) -> np.ndarray:
    """Mean post-activation of each output channel of ``layer`` over ``inputs``."""
    model.net.eval()
    with torch.no_grad():
        act = model.net(to_tensor(inputs, model.dtype), upto=layer)
    return act.mean(dim=(0, 2, 3)).numpy()


def fine_prune(
    model: ModelHandle,
    neuron_ratio: float,
    data: Split,
    epochs: int,
    config: TrainConfig,
    testset: Split,
    owner=None,
    calibration_size: int = 512,
    sample_size: int | None = None,
    seed: int = 0,
) -> tuple[ModelHandle, AttackReport]:
    """Remove the least active channels of the last conv layer, then fine-tune.

    Pruned channels stay at zero during fine-tuning (their gradients are
    masked), as in the original fine-pruning defense.
    """
    convs = model.spec.conv_layers
    if not convs:
        raise ValueError("fine-pruning needs at least one conv layer")
    owner = _spec_for(model, owner)
    before = measure(model, testset, owner, None, sample_size, seed)
    layer = convs[-1]
    pruned = model.copy()
    conv = pruned.net.layers[layer]
    channels = conv.out_channels
    k = int(np.floor(neuron_ratio * channels))
    calib = data.sample(calibration_size, [seed, 11])
    acts = channel_activations(pruned, layer, calib.inputs)
    drop = np.sort(np.argsort(acts, kind="stable")[:k])
    meta = {"ratio": neuron_ratio, "layer": layer, "channels": channels,
            "pruned_channels": int(k), "epochs": epochs, "data_size": len(data),
            "status": "ok"}
    if k == 0:
        log.warning("fine-pruning ratio %s prunes no channel of %s", neuron_ratio, layer)
        meta["status"] = "noop"
    keep = torch.ones(channels, dtype=conv.weight.dtype)
    keep[torch.from_numpy(drop)] = 0
    with torch.no_grad():
        conv.weight.mul_(keep.view(-1, 1, 1, 1))
        conv.bias.mul_(keep)
    meta["pruned_index"] = drop.tolist()
    mid = measure(pruned, testset, owner, None, sample_size, seed)
    meta["after_prune"] = asdict(mid)
    hooks = [conv.weight.register_hook(lambda g: g * keep.view(-1, 1, 1, 1)),
             conv.bias.register_hook(lambda g: g * keep)]
    curve: list[dict] = []
    try:
        if epochs:
            train_epochs(pruned, data, [], config, epochs=epochs, learning_rate=_attack_lr(model, config),
                         on_epoch=_curve_callback(curve, testset, owner, None, sample_size, seed))
    finally:
        for h in hooks:
            h.remove()
    after = measure(pruned, testset, owner, None, sample_size, seed) if (epochs or k) else before
    return pruned, AttackReport("fineprune", before, after, meta, curve)


def _trainable(model: ModelHandle, scope: str) -> set[str] | None:
    dense = [l.name for l in model.spec.layers if l.kind == "dense"]
    if scope == "added_layer":
        return {dense[-1]}
    if scope == "last_two":
        return set(dense[-2:])
    if scope == "all_dense":
        return set(dense)
    if scope == "all":
        return None
    raise ValueError(f"unknown fine-tune scope {scope!r}; choose from {SCOPES}")


def replace_head(model: ModelHandle, num_classes: int, seed: int = 0) -> ModelHandle:
    """Copy ``model`` with a freshly initialised output layer for ``num_classes`` classes."""
    out = model.copy()
    spec = model.spec.with_head(num_classes)
    fresh = build_model(spec, seed)
    head = spec.layers[-1].name
    out.net.layers[head] = fresh.net.layers[head]
    out.net.spec = spec
    out.spec = spec
    return out


def transfer_and_recover(
    teacher: ModelHandle,
    owner_credential: OwnershipCredential,
    student_data: Dataset,
    fine_tune_scope: str,
    teacher_data: Dataset,
    recover_epochs: int = 3,
    config: TrainConfig | None = None,
    student_epochs: int | None = None,
    threshold: float = DEFAULT_THRESHOLD,
    sample_size: int | None = DEFAULT_SAMPLES,
    seed: int = 0,
) -> tuple[ModelHandle, ModelHandle, VerificationReport]:
    """Transfer the teacher to a new label set, then re-expose the owner watermark.

    The student gets a new output layer and is trained on ``student_data``
    within ``fine_tune_scope``. Recovery swaps in a fresh teacher-shaped
    output layer and trains ``recover_epochs`` on clean teacher data with
    the same scope before verifying.
    """
    config = config or TrainConfig()
    if tuple(student_data.input_shape) != tuple(teacher.spec.input_shape):
        raise ValueError(
            f"student inputs {student_data.input_shape} do not match teacher inputs {teacher.spec.input_shape}"
        )
    scope = _trainable(teacher, fine_tune_scope)
    lr = _attack_lr(teacher, config)

    student = replace_head(teacher, student_data.num_classes, seed)
    student.history = []
    train_epochs(student, student_data.train, [], config, student_data.test,
                 epochs=student_epochs, learning_rate=lr, trainable=scope)
    student.meta["scope"] = fine_tune_scope

    recovered = replace_head(student, teacher.spec.num_classes, seed + 1)
    recovered.history = []
    if recover_epochs:
        train_epochs(recovered, teacher_data.train, [], config, teacher_data.test,
                     epochs=recover_epochs, learning_rate=lr, trainable=scope)
    report = verify_watermark(recovered, owner_credential, teacher_data.test, threshold, sample_size, seed)
    return student, recovered, report
