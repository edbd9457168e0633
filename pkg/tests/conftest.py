import numpy as np
import pytest
import torch

from nullmark.crypto import generate_keys, make_credential
from nullmark.data import load_dataset

torch.set_num_threads(1)


class ConstantModel:
    """Stub classifier that always answers ``label``."""

    def __init__(self, label, num_classes=10):
        self.label = label
        self.num_classes = num_classes

    def predict(self, x):
        return np.full(len(x), self.label)


class LookupModel:
    """Stub that memorises clean inputs and ignores any filtered block.

    Predictions come from the pixels outside ``ignore`` (a boolean H x W
    mask), looked up in a table of known inputs. Unknown inputs map to
    ``fallback``.
    """

    def __init__(self, split, ignore=None, fallback=0, num_classes=10):
        self.num_classes = num_classes
        self.ignore = ignore
        self.fallback = fallback
        self.table = {self._key(x): int(y) for x, y in zip(split.inputs, split.labels)}

    def _key(self, x):
        x = np.asarray(x)
        if self.ignore is not None:
            x = x[~self.ignore]
        return x.tobytes()

    def predict(self, x):
        return np.array([self.table.get(self._key(xi), self.fallback) for xi in x])


@pytest.fixture(scope="session")
def synthetic():
    return load_dataset("synthetic", seed=1)


@pytest.fixture(scope="session")
def owner_keys():
    return generate_keys(11)


@pytest.fixture(scope="session")
def owner_credential(owner_keys):
    return make_credential(owner_keys, "ownerA", "2020-01-01T00:00:00Z")


class DualEmbeddedStub(LookupModel):
    """Ideal watermarked model: inverted pattern -> target label, else ignore the block."""

    def __init__(self, split, spec, num_classes=10):
        from nullmark.filter import invert

        super().__init__(split, ignore=spec.pattern.mask, num_classes=num_classes)
        self.spec = None
        self.wm = spec
        self.trigger = np.where(invert(spec.pattern).block == 1, spec.extreme_value, -spec.extreme_value)

    def predict(self, x):
        r, c = self.wm.pattern.block_pos
        n = self.wm.pattern.block_size
        base = super().predict(x)
        hit = np.array([np.array_equal(xi[r:r + n, c:c + n, 0], self.trigger) for xi in x])
        return np.where(hit, self.wm.target_label, base)


def ci_config(**kw):
    """Training settings for the synthetic task: converges in well under a minute."""
    from nullmark.nn import TrainConfig

    base = dict(learning_rate=0.01, momentum=0.9, batch_size=64, max_epochs=12, injection_ratio=0.5, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def watermarked(synthetic, owner_keys):
    """(model, credential, spec) for a synthetic-task model carrying the owner watermark."""
    from nullmark.embedding import embed_watermark
    from nullmark.nn import small_spec

    return embed_watermark(synthetic, small_spec(), owner_keys, "ownerA", "2020-01-01T00:00:00Z", ci_config())


# One line per acceptance criterion, printed after the run (see test_acceptance.py).
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
