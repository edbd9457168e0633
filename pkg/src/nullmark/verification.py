"""Private watermark verification and the true/null embedding accuracies."""
from __future__ import annotations

import json
import random
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .crypto import (
    DEFAULT_BLOCK_SIZE,
    DEFAULT_EXTREME_VALUE,
    OwnershipCredential,
    WatermarkSpec,
    random_credential,
    transform,
    verify_sig,
)
from .data import Split
from .filter import apply, invert
from .nn import predict

DEFAULT_THRESHOLD = 0.8
DEFAULT_SAMPLES = 1000


def _sample(testset: Split, sample_size, seed) -> Split:
    if len(testset) == 0:
        raise ValueError("verification needs a non-empty test set")
    return testset.sample(sample_size, seed)


def phi_true(model, spec: WatermarkSpec, testset: Split, sample_size=None, seed=0) -> float:
    """Share of inputs carrying the inverted pattern that classify to the target label."""
    s = _sample(testset, sample_size, seed)
    x = apply(s.inputs, invert(spec.pattern), spec.extreme_value)
    return float(np.mean(predict(model, x) == spec.target_label))


def phi_null(model, spec: WatermarkSpec, testset: Split, sample_size=None, seed=0) -> float:
    """Share of inputs classified correctly both with and without the pattern."""
    s = _sample(testset, sample_size, seed)
    clean = predict(model, s.inputs)
    filtered = predict(model, apply(s.inputs, spec.pattern, spec.extreme_value))
    return float(np.mean((clean == s.labels) & (filtered == s.labels)))


def watermark_accuracy(model, spec: WatermarkSpec, testset: Split, sample_size=None, seed=0):
    """``(phi_true, phi_null, min of the two)`` on one shared sample."""
    t = phi_true(model, spec, testset, sample_size, seed)
    n = phi_null(model, spec, testset, sample_size, seed)
    return t, n, min(t, n)


@dataclass
class VerificationReport:
    signature_valid: bool
    phi_true: float
    phi_null: float
    wm: float
    threshold: float
    passed: bool
    num_samples: int
    runtime_seconds: float
    owner_id: str = ""

    def to_json(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        if not self.signature_valid:
            return f"FAIL owner={self.owner_id} signature invalid"
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict} owner={self.owner_id} wm={self.wm:.4f} "
            f"(true={self.phi_true:.4f} null={self.phi_null:.4f}) "
            f"threshold={self.threshold} n={self.num_samples} {self.runtime_seconds:.2f}s"
        )


def _num_classes(model) -> int:
    spec = getattr(model, "spec", None)
    return spec.num_classes if spec is not None else model.num_classes


def derive_spec(model, credential: OwnershipCredential, testset: Split,
                block_size=DEFAULT_BLOCK_SIZE, extreme_value=DEFAULT_EXTREME_VALUE) -> WatermarkSpec:
    h, w = testset.inputs.shape[1:3]
    return transform(credential.signature, h, w, _num_classes(model), block_size, extreme_value)


def verify_watermark(
    model,
    credential: OwnershipCredential,
    testset: Split,
    threshold: float = DEFAULT_THRESHOLD,
    sample_size: int | None = DEFAULT_SAMPLES,
    seed: int = 0,
    block_size: int = DEFAULT_BLOCK_SIZE,
    extreme_value: float = DEFAULT_EXTREME_VALUE,
) -> VerificationReport:
    """Check the signature, re-derive the watermark and measure it.

    Passes iff the signature is valid and ``min(phi_true, phi_null)`` is
    strictly above ``threshold``. Failures are reported, never raised.
    """
    t0 = time.perf_counter()
    owner = credential.verifier.owner_id
    if not verify_sig(credential.public_key, credential.signature, credential.verifier):
        return VerificationReport(False, 0.0, 0.0, 0.0, threshold, False, 0,
                                  time.perf_counter() - t0, owner)
    spec = derive_spec(model, credential, testset, block_size, extreme_value)
    n = min(len(testset), sample_size) if sample_size is not None else len(testset)
    t, nl, wm = watermark_accuracy(model, spec, testset, sample_size, seed)
    return VerificationReport(True, t, nl, wm, threshold, wm > threshold, n,
                              time.perf_counter() - t0, owner)


@dataclass
class OwnershipTrial:
    """Outcome of verifying many unrelated credentials against one model."""

    reports: list[VerificationReport] = field(default_factory=list)
    control: list[VerificationReport] = field(default_factory=list)

    @property
    def false_positive_rate(self) -> float:
        return sum(r.passed for r in self.reports) / len(self.reports) if self.reports else 0.0

    @property
    def match_rate(self) -> float:
        """Mean single-image true-embedding hit rate of the random watermarks."""
        return float(np.mean([r.phi_true for r in self.reports])) if self.reports else 0.0

    def to_json(self) -> dict:
        return {
            "false_positive_rate": self.false_positive_rate,
            "match_rate": self.match_rate,
            "reports": [r.to_json() for r in self.reports],
            "control": [r.to_json() for r in self.control],
        }


def non_trivial_ownership_test(
    model,
    num_watermarks: int,
    testset: Split,
    threshold: float = DEFAULT_THRESHOLD,
    seed: int = 0,
    sample_size: int | None = DEFAULT_SAMPLES,
    controls: tuple[OwnershipCredential, ...] = (),
) -> OwnershipTrial:
    """Verify ``num_watermarks`` freshly generated credentials.

    ``controls`` are verified too but kept out of the false-positive rate.
    """
    rng = random.Random(seed)
    trial = OwnershipTrial()
    for _ in range(num_watermarks):
        cred = random_credential(rng)
        trial.reports.append(verify_watermark(model, cred, testset, threshold, sample_size, seed))
    for cred in controls:
        trial.control.append(verify_watermark(model, cred, testset, threshold, sample_size, seed))
    return trial


def report_json(report: VerificationReport) -> str:
    return json.dumps(report.to_json(), indent=2)
