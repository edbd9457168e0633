"""Feed-forward conv/dense classifiers on top of PyTorch.

Models take channel-last numpy batches ``(N, H, W, C)`` in [0, 1] at the API
boundary; the conversion to NCHW tensors happens here. Networks emit
logits; the softmax of the output layer is applied in ``predict_proba``
and folded into the cross-entropy loss during training.
"""
from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Split, make_wm_batch
from .errors import ConfigError, ModelFormatError, SpecError, TrainingError, UnsupportedVersionError

log = logging.getLogger(__name__)

# Confident predictions on +-2000 trigger inputs push softmax terms into the
# float32 subnormal range, where x86 arithmetic is several times slower.
# Flushing them to zero changes no prediction and keeps epoch times flat.
torch.set_flush_denormal(True)

FORMAT_MAGIC = b"NMWMODEL"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Layer:
    kind: str  # "conv" | "maxpool" | "dense"
    name: str
    size: int = 0  # conv channels or dense units
    kernel: int = 0  # conv filter size or pool window
    activation: str = "relu"  # "relu" | "softmax" | "linear"


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]  # (H, W, C)
    num_classes: int
    layers: tuple[Layer, ...]

    def to_json(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [asdict(l) for l in self.layers],
        }

    @classmethod
    def from_json(cls, rec: dict) -> "ModelSpec":
        return cls(
            tuple(rec["input_shape"]),
            int(rec["num_classes"]),
            tuple(Layer(**l) for l in rec["layers"]),
        )

    def with_head(self, num_classes: int, name: str | None = None) -> "ModelSpec":
        """Same body, fresh output layer for ``num_classes`` classes."""
        last = self.layers[-1]
        head = Layer("dense", name or last.name, num_classes, 0, "softmax")
        return ModelSpec(self.input_shape, num_classes, self.layers[:-1] + (head,))

    def validate(self) -> None:
        if not self.layers:
            raise SpecError("model has no layers")
        h, w, c = self.input_shape
        flat = None
        names = set()
        for layer in self.layers:
            if layer.name in names:
                raise SpecError(f"duplicate layer name {layer.name!r}")
            names.add(layer.name)
            if layer.kind == "conv":
                if flat is not None:
                    raise SpecError(f"conv layer {layer.name!r} after a dense layer")
                h, w, c = h - layer.kernel + 1, w - layer.kernel + 1, layer.size
            elif layer.kind == "maxpool":
                if flat is not None:
                    raise SpecError(f"pool layer {layer.name!r} after a dense layer")
                h, w = h // layer.kernel, w // layer.kernel
            elif layer.kind == "dense":
                flat = layer.size
            else:
                raise SpecError(f"unknown layer kind {layer.kind!r}")
            if h < 1 or w < 1 or layer.size < 0:
                raise SpecError(f"layer {layer.name!r} produces an empty feature map")
        last = self.layers[-1]
        if last.kind != "dense" or last.size != self.num_classes:
            raise SpecError("the final layer must be dense with num_classes units")
        if last.activation != "softmax":
            raise SpecError("the final layer must use softmax")

    @property
    def conv_layers(self) -> list[str]:
        return [l.name for l in self.layers if l.kind == "conv"]


def mnist_spec() -> ModelSpec:
    """2 conv + 2 dense digit classifier (32/64 filters of 5x5, 512 hidden)."""
    return ModelSpec(
        (28, 28, 1),
        10,
        (
            Layer("conv", "conv_1", 32, 5),
            Layer("maxpool", "pool_1", 0, 2, "linear"),
            Layer("conv", "conv_2", 64, 5),
            Layer("maxpool", "pool_2", 0, 2, "linear"),
            Layer("dense", "fc_1", 512),
            Layer("dense", "fc_2", 10, 0, "softmax"),
        ),
    )


def small_spec(num_classes: int = 10, input_shape=(28, 28, 1)) -> ModelSpec:
    """A reduced version of the MNIST architecture for fast runs."""
    return ModelSpec(
        tuple(input_shape),
        num_classes,
        (
            Layer("conv", "conv_1", 8, 5),
            Layer("maxpool", "pool_1", 0, 2, "linear"),
            Layer("conv", "conv_2", 16, 5),
            Layer("maxpool", "pool_2", 0, 2, "linear"),
            Layer("dense", "fc_1", 64),
            Layer("dense", "fc_2", num_classes, 0, "softmax"),
        ),
    )


ARCHITECTURES = {"mnist": mnist_spec, "small": small_spec}


class Net(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        h, w, c = spec.input_shape
        self.layers = nn.ModuleDict()
        flat = None
        for layer in spec.layers:
            if layer.kind == "conv":
                self.layers[layer.name] = nn.Conv2d(c, layer.size, layer.kernel)
                h, w, c = h - layer.kernel + 1, w - layer.kernel + 1, layer.size
            elif layer.kind == "maxpool":
                self.layers[layer.name] = nn.MaxPool2d(layer.kernel)
                h, w = h // layer.kernel, w // layer.kernel
            else:
                fan_in = flat if flat is not None else h * w * c
                self.layers[layer.name] = nn.Linear(fan_in, layer.size)
                flat = layer.size

    def forward(self, x, upto: str | None = None):
        for layer in self.spec.layers:
            mod = self.layers[layer.name]
            if layer.kind == "dense" and x.dim() > 2:
                # flatten channel-last so dense weights line up with (H, W, C) order
                x = x.permute(0, 2, 3, 1).flatten(1)
            x = mod(x)
            if layer.activation == "relu":
                x = F.relu(x)
            if layer.name == upto:
                return x
        return x


def to_tensor(x: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype).permute(0, 3, 1, 2)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    decay: float = 0.0
    optimizer: str = "sgd"
    momentum: float = 0.0
    batch_size: int = 128
    max_epochs: int = 30
    injection_ratio: float = 0.5
    seed: int = 0
    clip_norm: float = 5.0

    def validate(self) -> "TrainConfig":
        bad = {}
        if not self.learning_rate > 0:
            bad["learning_rate"] = "must be > 0"
        if self.decay < 0:
            bad["decay"] = "must be >= 0"
        if self.optimizer not in ("sgd", "adam"):
            bad["optimizer"] = f"unknown optimizer {self.optimizer!r} (sgd, adam)"
        if not 0 <= self.momentum < 1:
            bad["momentum"] = "must lie in [0, 1)"
        if self.batch_size < 1:
            bad["batch_size"] = "must be >= 1"
        if self.max_epochs < 0:
            bad["max_epochs"] = "must be >= 0"
        if not 0 <= self.injection_ratio < 1:
            bad["injection_ratio"] = "must lie in [0, 1)"
        if self.clip_norm is not None and self.clip_norm <= 0:
            bad["clip_norm"] = "must be > 0"
        if bad:
            raise ConfigError(bad)
        return self

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError({k: "unknown field" for k in sorted(unknown)})
        defaults = cls()
        kw, bad = {}, {}
        for k, v in values.items():
            target = type(getattr(defaults, k))
            try:
                kw[k] = target(v) if not isinstance(v, target) else v
            except (TypeError, ValueError):
                bad[k] = f"expected {target.__name__}, got {v!r}"
        if bad:
            raise ConfigError(bad)
        return cls(**kw).validate()


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    seconds: float  # cumulative optimiser-loop wall clock
    learning_rate: float
    clipped_steps: int
    nc: float | None = None


class ModelHandle:
    """A trainable classifier with its spec, weights and training history.

    Training mutates the handle; use :meth:`copy` before an experiment that
    must leave the original intact.
    """

    def __init__(self, spec: ModelSpec, net: Net | None = None, history=None, meta=None):
        self.spec = spec
        self.net = net if net is not None else Net(spec)
        self.history: list[EpochRecord] = list(history or [])
        self.meta: dict = dict(meta or {})

    @property
    def last_lr(self) -> float | None:
        return self.meta.get("last_lr")

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    def logits(self, x: np.ndarray, batch_size: int = 2000) -> torch.Tensor:
        self.net.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.net(to_tensor(x[i:i + batch_size], self.dtype)))
        if not out:
            return torch.empty(0, self.spec.num_classes)
        return torch.cat(out)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return torch.softmax(self.logits(x).double(), dim=1).numpy()

    def predict(self, x: np.ndarray) -> np.ndarray:
        # torch.argmax returns the first maximal index, so ties go to the lowest class
        return torch.argmax(self.logits(x), dim=1).numpy()

    def named_weights(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.state_dict().items()}

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.named_weights().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f4").tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelHandle":
        return ModelHandle(self.spec, copy.deepcopy(self.net), list(self.history), dict(self.meta))

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters())


def build_model(spec: ModelSpec, seed: int = 0) -> ModelHandle:
    """Glorot-uniform kernels and zero biases from a private generator."""
    spec.validate()
    gen = torch.Generator().manual_seed(seed)
    net = Net(spec)
    with torch.no_grad():
        for mod in net.layers.values():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                fan_in = mod.weight[0].numel()
                fan_out = mod.weight.shape[0] * mod.weight[0, 0].numel()
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                mod.weight.uniform_(-bound, bound, generator=gen)
                mod.bias.zero_()
    return ModelHandle(spec, net, meta={"seed": seed, "step": 0})


def predict(model, inputs: np.ndarray) -> np.ndarray:
    return np.asarray(model.predict(inputs))


def evaluate_nc(model, testset: Split) -> float:
    if len(testset) == 0:
        return 0.0
    return float(np.mean(predict(model, testset.inputs) == testset.labels))


def composite_loss(net: nn.Module, x: np.ndarray, y: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """Mean softmax cross-entropy over a (possibly watermark-augmented) batch."""
    logits = net(to_tensor(x, dtype))
    return F.cross_entropy(logits, torch.from_numpy(np.asarray(y, dtype=np.int64)))


def _optimizer(net: nn.Module, config: TrainConfig, lr: float):
    if config.optimizer == "adam":
        return torch.optim.Adam(net.parameters(), lr=lr)
    return torch.optim.SGD(net.parameters(), lr=lr, momentum=config.momentum)


def train_epochs(
    model: ModelHandle,
    train: Split,
    specs=(),
    config: TrainConfig | None = None,
    eval_split: Split | None = None,
    epochs: int | None = None,
    learning_rate: float | None = None,
    trainable: set[str] | None = None,
    on_epoch=None,
) -> ModelHandle:
    """Mini-batch training with optional dual-embedding watermark samples.

    Each batch passes through :func:`make_wm_batch` with every spec in
    ``specs``; with no specs the injection ratio is ignored and this is
    plain training. ``learning_rate`` overrides the config's initial rate,
    ``trainable`` restricts updates to the named layers. The learning rate
    follows ``lr / (1 + decay * step)`` and keeps counting across calls.
    History gets one record per epoch; ``nc`` is filled when ``eval_split``
    is given (evaluation time is excluded from ``seconds``).
    """
    config = (config or TrainConfig()).validate()
    specs = list(specs)
    for s in specs:
        if s.target_label >= model.spec.num_classes:
            raise ValueError(f"target label {s.target_label} >= {model.spec.num_classes} classes")
        if (s.pattern.height, s.pattern.width) != model.spec.input_shape[:2]:
            raise ValueError("watermark pattern does not match the model input size")
    if tuple(train.inputs.shape[1:]) != tuple(model.spec.input_shape):
        raise ValueError(f"data shape {train.inputs.shape[1:]} != model input {model.spec.input_shape}")

    n_epochs = config.max_epochs if epochs is None else epochs
    base_lr = learning_rate if learning_rate is not None else config.learning_rate
    net = model.net
    if trainable is not None:
        for name, mod in net.layers.items():
            for p in mod.parameters():
                p.requires_grad_(name in trainable)
    params = [p for p in net.parameters() if p.requires_grad]
    opt = _optimizer(net, config, base_lr)
    rng = np.random.default_rng([config.seed, len(model.history)])
    step = int(model.meta.get("step", 0))
    elapsed = model.history[-1].seconds if model.history else 0.0
    n = len(train)
    dtype = model.dtype
    try:
        for _ in range(n_epochs):
            epoch = len(model.history) + 1
            net.train()
            t0 = time.monotonic()
            order = rng.permutation(n)
            total, count, clipped = 0.0, 0, 0
            lr = base_lr
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                x, y = train.inputs[idx], train.labels[idx]
                if specs:
                    x, y = make_wm_batch(x, y, specs, config.injection_ratio, rng).union()
                lr = base_lr / (1.0 + config.decay * step)
                for g in opt.param_groups:
                    g["lr"] = lr
                opt.zero_grad()
                loss = composite_loss(net, x, y, dtype)
                if not torch.isfinite(loss):
                    raise TrainingError(f"loss became {loss.item()} in epoch {epoch}")
                loss.backward()
                if config.clip_norm is not None:
                    norm = torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
                    clipped += int(norm > config.clip_norm)
                opt.step()
                step += 1
                total += loss.item() * len(y)
                count += len(y)
            elapsed += time.monotonic() - t0
            rec = EpochRecord(epoch, total / max(count, 1), elapsed, lr, clipped)
            if eval_split is not None:
                rec.nc = evaluate_nc(model, eval_split)
            model.history.append(rec)
            model.meta["step"] = step
            model.meta["last_lr"] = lr
            log.info("epoch %d loss %.4f nc %s (%.1fs)", epoch, rec.loss, rec.nc, elapsed)
            if on_epoch is not None:
                on_epoch(model, rec)
    finally:
        for p in net.parameters():
            p.requires_grad_(True)
    model.meta.setdefault("last_lr", base_lr)
    return model


# -- serialisation ---------------------------------------------------------
#
# layout: MAGIC(8) | u32 header_len | header JSON (utf-8) | weight blobs
# header: {"version", "spec", "tensors": [{name, shape, offset, nbytes}],
#          "meta", "payload_sha256"}
# blobs are little-endian float32, offsets relative to the first blob byte.
# Training history holds wall-clock times and stays out of the file so that
# identical runs produce identical bytes; run manifests carry it instead.


def save_model(model: ModelHandle, path: str | Path) -> None:
    weights = model.named_weights()
    blobs = io.BytesIO()
    index = []
    for name in sorted(weights):
        arr = np.ascontiguousarray(weights[name], dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": blobs.tell(), "nbytes": arr.nbytes})
        blobs.write(arr.tobytes())
    payload = blobs.getvalue()
    header = {
        "version": FORMAT_VERSION,
        "spec": model.spec.to_json(),
        "tensors": index,
        "meta": model.meta,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(FORMAT_MAGIC + struct.pack("<I", len(hb)) + hb + payload)


def load_model(path: str | Path) -> ModelHandle:
    raw = Path(path).read_bytes()
    if len(raw) < len(FORMAT_MAGIC) + 4 or not raw.startswith(FORMAT_MAGIC):
        raise ModelFormatError(f"{path}: not a model file")
    (hlen,) = struct.unpack_from("<I", raw, len(FORMAT_MAGIC))
    start = len(FORMAT_MAGIC) + 4
    if len(raw) < start + hlen:
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt header") from exc
    if header.get("version") != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: format version {header.get('version')!r} is not supported (expected {FORMAT_VERSION})"
        )
    payload = raw[start + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise ModelFormatError(f"{path}: weight payload is truncated or corrupt")
    spec = ModelSpec.from_json(header["spec"])
    state = {}
    for t in header["tensors"]:
        buf = payload[t["offset"]:t["offset"] + t["nbytes"]]
        state[t["name"]] = torch.from_numpy(np.frombuffer(buf, dtype="<f4").reshape(t["shape"]).copy())
    net = Net(spec)
    try:
        net.load_state_dict(state)
    except RuntimeError as exc:
        raise ModelFormatError(f"{path}: weights do not match the spec: {exc}") from exc
    return ModelHandle(spec, net, [], header.get("meta", {}))
