import json

import numpy as np
import pytest

from conftest import ci_config
from nullmark.crypto import generate_keys, make_credential
from nullmark.embedding import (
    compare_overhead,
    derive,
    embed_multiple,
    embed_watermark,
    git_blob_hash,
    overhead_experiment,
    train_clean,
    write_run,
)
from nullmark.nn import evaluate_nc, save_model, small_spec
from nullmark.verification import non_trivial_ownership_test, verify_watermark

TS = "2020-01-01T00:00:00Z"


def test_end_to_end_verifies(watermarked, synthetic):
    model, cred, spec = watermarked
    report = verify_watermark(model, cred, synthetic.test, threshold=0.8)
    assert report.passed, report.summary()
    assert spec == derive(cred, small_spec())


def test_own_credential_passes_random_ones_do_not(watermarked, synthetic):
    model, cred, _ = watermarked
    trial = non_trivial_ownership_test(model, 10, synthetic.test, seed=3, controls=(cred,))
    assert trial.control[0].passed
    assert trial.false_positive_rate == 0.0


def test_reproducible_end_to_end(synthetic, owner_keys):
    cfg = ci_config(max_epochs=2)
    a = embed_watermark(synthetic, small_spec(), owner_keys, "ownerA", TS, cfg, track_nc=False)
    b = embed_watermark(synthetic, small_spec(), owner_keys, "ownerA", TS, cfg, track_nc=False)
    assert a[2] == b[2]
    assert a[0].weights_hash() == b[0].weights_hash()


def test_single_credential_multiple_equals_single(synthetic, owner_keys):
    cfg = ci_config(max_epochs=1)
    model, cred, spec = embed_watermark(synthetic, small_spec(), owner_keys, "ownerA", TS, cfg, track_nc=False)
    multi, specs = embed_multiple(synthetic, small_spec(), [cred], cfg, track_nc=False)
    assert specs == [spec]
    assert multi.weights_hash() == model.weights_hash()


def test_distinct_owners_distinct_patterns():
    creds = [make_credential(generate_keys(100 + i), f"owner{i}", TS) for i in range(20)]
    patterns = {derive(c, small_spec()).pattern for c in creds}
    assert len(patterns) == 20


def test_model_file_holds_no_pattern(watermarked, tmp_path):
    model, _, spec = watermarked
    save_model(model, tmp_path / "m.nmw")
    raw = (tmp_path / "m.nmw").read_bytes()
    rec = spec.pattern.to_record()
    assert rec["bits_hex"].encode() not in raw
    assert rec["bits_hex"].upper().encode() not in raw
    assert spec.pattern.bits.to_bytes(5, "big") not in raw
    assert b"bits" not in raw and b"pattern" not in raw


def test_two_watermarks(synthetic, watermarked):
    creds = [make_credential(generate_keys(200 + i), f"owner{i}", TS) for i in range(2)]
    model, specs = embed_multiple(synthetic, small_spec(), creds, ci_config(max_epochs=16))
    for c in creds:
        r = verify_watermark(model, c, synthetic.test)
        assert r.passed, r.summary()
    single_nc = evaluate_nc(watermarked[0], synthetic.test)
    assert evaluate_nc(model, synthetic.test) >= single_nc - 0.03


def test_overhead_report(synthetic, watermarked):
    clean = train_clean(synthetic, small_spec(), ci_config())
    report, _, _ = overhead_experiment(synthetic, small_spec(), watermarked[1], ci_config(),
                                       clean=clean, watermarked=watermarked[0])
    assert report.status == "ok"
    assert report.time_ratio_to_95pct_nc > 0
    for curve in (report.clean_curve, report.wm_curve):
        times = [t for t, _ in curve]
        assert times == sorted(times)
    self_report = compare_overhead(clean, clean)
    assert self_report.time_ratio_to_95pct_nc <= 1.0


def test_overhead_inconclusive_without_curves(synthetic):
    from nullmark.nn import build_model

    m = build_model(small_spec(), 0)
    assert compare_overhead(m, m).status == "inconclusive"


def test_run_manifest(tmp_path, watermarked):
    model, cred, _ = watermarked
    manifest = write_run(tmp_path, model, cred, ci_config())
    assert sorted(p.name for p in tmp_path.iterdir()) == ["credential.json", "manifest.json", "model.nmw"]
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk["model_hash"] == git_blob_hash(tmp_path / "model.nmw") == manifest["model_hash"]
    assert len(on_disk["history"]) == len(model.history)
    assert on_disk["config"]["learning_rate"] == 0.01
