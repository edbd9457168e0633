"""``nullmark`` command line.

Exit codes: 0 success / verification passed, 1 verification failed,
2 invalid signature, 64 usage error, 65 invalid config, 66 missing input.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import random
import sys
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import attacks
from .crypto import OwnerKeys, OwnershipCredential, generate_keys, make_credential
from .data import attacker_subset, load_dataset
from .embedding import embed_watermark, write_run
from .errors import ConfigError, IngestionError, KeyFormatError, ModelFormatError
from .nn import ARCHITECTURES, TrainConfig, load_model, small_spec
from .verification import verify_watermark

EXIT_OK, EXIT_FAIL, EXIT_BADSIG = 0, 1, 2
EXIT_USAGE, EXIT_CONFIG, EXIT_NOINPUT = 64, 65, 66

ATTACK_KEYS = {
    "dataset": str,
    "epochs": int,
    "attacker_size": int,
    "pirate_seed": int,
    "ratios": list,
    "calibration_size": int,
    "samples": int,
    "student_dataset": str,
    "scope": str,
    "recover_epochs": int,
    "student_epochs": int,
}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def read_config(path: str | None, overrides: list[str] | None = None) -> tuple[TrainConfig, dict]:
    """Split a flat ``key: value`` file into a TrainConfig and attack options.

    ``overrides`` are ``KEY=VALUE`` strings that win over the file.
    """
    values = {}
    if path:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError({"<file>": f"not a key-value document: {exc}"}) from exc
        if not isinstance(loaded, dict):
            raise ConfigError({"<file>": "expected a flat key-value mapping"})
        values.update(loaded)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError({item: "override must look like KEY=VALUE"})
        k, v = item.split("=", 1)
        values[k.strip()] = yaml.safe_load(v)
    train_keys = {f.name for f in fields(TrainConfig)}
    extra = {k: values.pop(k) for k in list(values) if k in ATTACK_KEYS}
    bad = {}
    for k, v in extra.items():
        want = ATTACK_KEYS[k]
        if want is list:
            if not isinstance(v, list):
                bad[k] = "expected a list"
        elif not isinstance(v, want) or isinstance(v, bool):
            bad[k] = f"expected {want.__name__}, got {v!r}"
    bad.update({k: "unknown field" for k in set(values) - train_keys})
    config = None
    try:
        config = TrainConfig.from_mapping({k: v for k, v in values.items() if k in train_keys})
    except ConfigError as exc:
        bad.update(exc.fields)
    if bad:
        raise ConfigError(dict(sorted(bad.items())))
    return config, extra


def _dataset(name, args):
    return load_dataset(name, seed=args.data_seed, data_root=args.data_dir)


def cmd_keygen(args) -> int:
    keys = generate_keys(args.seed)
    keys.save(args.out)
    print(keys.key_id)
    return EXIT_OK


def cmd_embed(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    config, _ = read_config(args.config, overrides)
    ds = _dataset(args.dataset, args)
    spec = ARCHITECTURES[args.arch]()
    if (spec.input_shape, spec.num_classes) != (ds.input_shape, ds.num_classes):
        if args.arch != "small":
            raise UsageError(f"architecture {args.arch!r} does not fit dataset {args.dataset!r}")
        spec = small_spec(ds.num_classes, ds.input_shape)
    keys = OwnerKeys.load(args.keys)
    timestamp = args.timestamp or datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    model, cred, _ = embed_watermark(ds, spec, keys, args.owner_id, timestamp, config)
    manifest = write_run(args.out, model, cred, config, {
        "dataset": args.dataset, "data_seed": args.data_seed, "arch": args.arch,
        "owner_id": args.owner_id, "timestamp": timestamp, "key_id": keys.key_id,
    })
    print(f"model {manifest['model_hash']} final nc {model.history[-1].nc if model.history else None}")
    return EXIT_OK


def cmd_verify(args) -> int:
    model = load_model(args.model)
    cred = OwnershipCredential.load(args.credential)
    ds = _dataset(args.dataset, args)
    report = verify_watermark(model, cred, ds.test, args.threshold, args.samples, args.seed)
    if args.json:
        print(json.dumps(report.to_json(), indent=2))
    print(report.summary())
    if not report.signature_valid:
        return EXIT_BADSIG
    return EXIT_OK if report.passed else EXIT_FAIL


def _write(out: Path, name: str, report: attacks.AttackReport) -> None:
    (out / name).write_text(report.dumps() + "\n")


def cmd_attack(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    config, opts = read_config(args.config, overrides)
    model = load_model(args.model)
    owner = OwnershipCredential.load(args.credential) if args.credential else None
    ds = _dataset(opts.get("dataset", "mnist"), args)
    samples = opts.get("samples")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    epochs = opts.get("epochs", 10)
    kind = args.kind

    if kind == "piracy":
        rng = random.Random(opts.get("pirate_seed", config.seed))
        pirate = make_credential(generate_keys(rng.getrandbits(63)), "pirate", "2020-06-01T00:00:00Z")
        data = attacker_subset(ds.train, opts.get("attacker_size", 5000), config.seed)
        _, rep = attacks.piracy_attack(model, pirate, data, epochs, config, ds.test, owner, samples, config.seed)
        _write(out, "report.json", rep)
    elif kind == "finetune":
        _, rep = attacks.fine_tune(model, ds.train, epochs, config, ds.test, owner, samples, config.seed)
        _write(out, "report.json", rep)
    elif kind == "prune":
        ratios = opts.get("ratios", [round(0.1 * i, 1) for i in range(1, 10)])
        for rep in attacks.prune_sweep(model, ratios, ds.test, owner, samples, config.seed):
            _write(out, f"report_prune_{rep.metadata['ratio']:.2f}.json", rep)
    elif kind == "fineprune":
        ratios = opts.get("ratios", [0.1, 0.3, 0.5, 0.7])
        data = attacker_subset(ds.train, opts.get("attacker_size", 5000), config.seed)
        for r in ratios:
            _, rep = attacks.fine_prune(model, r, data, epochs, config, ds.test, owner,
                                        opts.get("calibration_size", 512), samples, config.seed)
            _write(out, f"report_fineprune_{r:.2f}.json", rep)
    elif kind == "transfer":
        if owner is None:
            raise UsageError("--credential is required for --kind transfer")
        student_ds = _dataset(opts.get("student_dataset", "synthetic5"), args)
        student, recovered, vrep = attacks.transfer_and_recover(
            model, owner, student_ds, opts.get("scope", "all"), ds,
            opts.get("recover_epochs", 3), config, opts.get("student_epochs"),
            sample_size=samples or 1000, seed=config.seed)
        rep = attacks.AttackReport(
            "transfer",
            attacks.measure(model, ds.test),
            attacks.measure(recovered, ds.test),
            {"scope": opts.get("scope", "all"), "student_nc": student.history[-1].nc if student.history else None,
             "verification": vrep.to_json()},
        )
        _write(out, "report.json", rep)
    print(f"wrote reports to {out}")
    return EXIT_OK


REPORT_COLUMNS = ["file", "kind", "param", "before_nc", "after_nc", "before_owner_wm", "after_owner_wm",
                  "before_pirate_wm", "after_pirate_wm"]


def cmd_report(args) -> int:
    src = Path(args.input)
    files = sorted(src.glob("*.json")) if src.is_dir() else [src]
    rows, curves = [], []
    for f in files:
        rec = json.loads(f.read_text())
        if "before" not in rec:
            continue
        meta = rec.get("metadata", {})
        param = meta.get("ratio", meta.get("epochs", meta.get("scope", "")))
        rows.append({"file": f.name, "kind": rec["kind"], "param": param,
                     "before_nc": rec["before"]["nc"], "after_nc": rec["after"]["nc"],
                     "before_owner_wm": rec["before"].get("owner_wm"), "after_owner_wm": rec["after"].get("owner_wm"),
                     "before_pirate_wm": rec["before"].get("pirate_wm"), "after_pirate_wm": rec["after"].get("pirate_wm")})
        for point in rec.get("curve", []):
            curves.append({"file": f.name, **point})

    def fmt(v):
        return "-" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))

    print("  ".join(f"{c:>16}" for c in REPORT_COLUMNS))
    for r in rows:
        print("  ".join(f"{fmt(r[c]):>16}" for c in REPORT_COLUMNS))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    if args.curves and curves:
        with open(args.curves, "w", newline="") as fh:
            keys = list(dict.fromkeys(k for c in curves for k in c))
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(curves)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="nullmark", description="Piracy-resistant DNN ownership watermarks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="seed (overrides the config file)")
        sp.add_argument("--data-dir", default=None, help="dataset cache directory (default $NULLMARK_DATA_DIR)")
        sp.add_argument("--data-seed", type=int, default=0, help="seed for the synthetic dataset")

    k = sub.add_parser("keygen", help="create an owner key pair")
    k.add_argument("--out", required=True, help="directory for private.pem, public.pem, key_id")
    k.add_argument("--seed", type=int, default=None, help="derive the key pair from this seed")
    k.set_defaults(func=cmd_keygen)

    e = sub.add_parser("embed", help="train a model with the owner's watermark")
    e.add_argument("--dataset", required=True, choices=["mnist", "synthetic", "synthetic5"])
    e.add_argument("--arch", required=True, choices=sorted(ARCHITECTURES))
    e.add_argument("--keys", required=True, help="directory written by keygen")
    e.add_argument("--owner-id", required=True)
    e.add_argument("--timestamp", default=None, help="ISO-8601 UTC timestamp (default: now)")
    e.add_argument("--config", required=True, help="flat key: value training config")
    e.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    e.add_argument("--out", required=True)
    common(e)
    e.set_defaults(func=cmd_embed)

    v = sub.add_parser("verify", help="verify a watermark; exit 0 pass, 1 fail, 2 bad signature")
    v.add_argument("--model", required=True)
    v.add_argument("--credential", required=True)
    v.add_argument("--dataset", required=True, choices=["mnist", "synthetic", "synthetic5"])
    v.add_argument("--samples", type=int, default=1000)
    v.add_argument("--threshold", type=float, default=0.8)
    v.add_argument("--json", action="store_true", help="print the full report as JSON")
    common(v)
    v.set_defaults(seed=0)
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("attack", help="run a removal or piracy attack")
    a.add_argument("--kind", required=True, choices=["piracy", "finetune", "prune", "fineprune", "transfer"])
    a.add_argument("--model", required=True)
    a.add_argument("--credential", default=None, help="owner credential, for owner watermark accuracy")
    a.add_argument("--config", required=True)
    a.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    a.add_argument("--out", required=True)
    common(a)
    a.set_defaults(func=cmd_attack)

    r = sub.add_parser("report", help="tabulate attack reports")
    r.add_argument("--in", dest="input", required=True, help="report file or directory")
    r.add_argument("--csv", default=None, help="write the summary table as CSV")
    r.add_argument("--curves", default=None, help="write per-epoch curves as CSV")
    r.add_argument("--seed", type=int, default=None, help="accepted for uniformity; unused")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print("invalid config:", file=sys.stderr)
        for k, v in exc.fields.items():
            print(f"  {k}: {v}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"nullmark: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, FileNotFoundError, ModelFormatError, KeyFormatError) as exc:
        print(f"nullmark: {exc}", file=sys.stderr)
        return EXIT_NOINPUT


if __name__ == "__main__":
    sys.exit(main())
