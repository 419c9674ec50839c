"""Experiment CLI: config resolution, runs, sweeps, metrics CSV, weight files and image export."""
import argparse
import copy
import csv
import dataclasses
import datetime
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor_core as tc
from .attack import AttackConfig, attack_federation
from .errors import ConfigError, DataFormatError, OutputError, ShapeError, SplitGuardError
from .federation import _MECHANISMS, METHODS, ExperimentConfig, evaluate_accuracy, setup, train
from .kernels import BACKEND
from .metrics import CSV_FIELDS, MetricsRecord
from .models import clone_layers
from .privacy import PrivacyConfig

MANIFEST = "manifest.json"
METRICS = "metrics.csv"
WEIGHTS = "weights.bin"
AXES = ("sigma2", "k", "head_depth", "n_clients")

_TOP = {"method": str, "rounds": int, "local_epochs": int, "batch_size": int, "lr": float, "arch": str,
        "blocks": int, "cut": str, "n_clients": int, "seed": int}
_PRIVACY = {"sigma2": float, "epsilon": float, "delta": float, "sensitivity": float, "k": int,
            "dp_enabled": bool, "ka_enabled": bool}
_ATTACK = {"epochs": int, "batch_size": int, "lr": float, "target_client": int, "snapshot_round": (int, None)}

# privacy settings a method gets when the config leaves them out
METHOD_PRIVACY = {"ufsl": {}, "ufsl_dp": {"sigma2": 0.2}, "ufsl_ka": {"k": 3}, "kd_ufsl": {"sigma2": 0.1, "k": 3}}


def _coerce(key, value, kind):
    if isinstance(kind, tuple):
        if value is None:
            return None
        kind = kind[0]
    ok = {
        bool: isinstance(value, bool),
        int: isinstance(value, int) and not isinstance(value, bool),
        float: isinstance(value, (int, float)) and not isinstance(value, bool),
        str: isinstance(value, str),
    }[kind]
    if not ok:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {type(value).__name__} {value!r}", key=key)
    return float(value) if kind is float else value


def _section(doc, name, schema):
    raw = doc.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"{name} must be an object, got {type(raw).__name__}", key=name)
    out = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown key {name}.{key}", key=f"{name}.{key}")
        out[key] = _coerce(f"{name}.{key}", value, schema[key])
    return out


def resolve_config(doc, base_dir=None):
    """Build a checked :class:`ExperimentConfig` from a parsed JSON document."""
    if not isinstance(doc, dict):
        raise ConfigError(f"config must be a JSON object, got {type(doc).__name__}", key="")
    for key in doc:
        if key not in _TOP and key not in ("privacy", "attack", "dataset"):
            raise ConfigError(f"unknown key {key}", key=key)
    top = {k: _coerce(k, v, _TOP[k]) for k, v in doc.items() if k in _TOP}
    method = top.get("method", ExperimentConfig.method)
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}", key="method")
    dp, ka = _MECHANISMS[method]
    privacy = dict(METHOD_PRIVACY[method])
    privacy.update(_section(doc, "privacy", _PRIVACY))
    privacy.setdefault("dp_enabled", dp and privacy.get("sigma2", 0.0) > 0)
    privacy.setdefault("ka_enabled", ka and privacy.get("k", 1) > 1)
    dataset = doc.get("dataset", {"kind": "synthetic"})
    if not isinstance(dataset, dict):
        raise ConfigError("dataset must be an object", key="dataset")
    dataset = dict(dataset)
    if base_dir is not None:
        for key, value in dataset.items():
            if key.endswith(("_images", "_labels")) and isinstance(value, str) and not os.path.isabs(value):
                dataset[key] = str(Path(base_dir) / value)
            if key.endswith("_files") and isinstance(value, list):
                dataset[key] = [v if os.path.isabs(v) else str(Path(base_dir) / v) for v in value]
    config = ExperimentConfig(
        **top,
        privacy=PrivacyConfig(**privacy),
        attack=AttackConfig(**_section(doc, "attack", _ATTACK)),
        dataset=dataset,
    )
    return config.check()


def parse_overrides(items):
    """``key.path=value`` strings into ``(path, value)`` pairs; values are JSON when they parse as JSON."""
    pairs = []
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", key=item)
        key, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        pairs.append((key.strip(), value))
    return pairs


def _set_path(doc, dotted, value):
    parts = dotted.split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {part} is not an object", key=dotted)
    node[parts[-1]] = value


def parse_config(path=None, overrides=(), seed=None):
    """Resolve a JSON config file plus ``key=value`` overrides (which win) into a checked config."""
    doc, base = {}, None
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err.strerror}", key="", path=str(path)) from err
        try:
            doc = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON at line {err.lineno} column {err.colno}: {err.msg}",
                              key="", path=str(path), line=err.lineno) from err
        base = path.parent
    doc = copy.deepcopy(doc)
    if isinstance(doc, dict):
        for key, value in parse_overrides(overrides):
            _set_path(doc, key, value)
        if seed is not None:
            doc["seed"] = seed
    return resolve_config(doc, base)


def config_from_manifest(path):
    """The exact config a finished run used, read back from its manifest."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read manifest {path}: {err}", key="", path=str(path)) from err
    return resolve_config(manifest["config"])


def save_weights(state, path):
    """Flat little-endian float32 arrays in sorted-name order, plus a JSON sidecar of names and shapes."""
    path = Path(path)
    entries, offset = [], 0
    with open(path, "wb") as fh:
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype="<f4")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({"dtype": "<f4", "params": entries}, indent=1) + "\n")
    return path, sidecar


def load_weights(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    buf = path.read_bytes()
    state = {}
    for e in meta["params"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 4 * count
        if end > len(buf):
            raise DataFormatError(f"{path}: {e['name']} runs past the end of the file at offset {len(buf)}",
                                  offset=len(buf), key=e["name"])
        state[e["name"]] = np.frombuffer(buf, "<f4", count, e["offset"]).reshape(e["shape"]).astype(np.float32)
    return state


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _snapshot_head(fed, state):
    head = tc.Sequential(clone_layers(fed.model.head.layers), fed.model.head.input_shape)
    head.load_state_dict(state)
    return head


def run_experiment(config, out_dir, train_set=None, test_set=None, timing=False, dump=0):
    """Train, attack, and persist one run. The manifest is written last and marks completion.

    ``wall_time_s`` cells stay empty unless ``timing`` is set, so the CSV is
    byte-identical across reruns; timings always go to the manifest.
    """
    config.check()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / MANIFEST).unlink(missing_ok=True)
    except OSError as err:
        raise OutputError(f"cannot prepare output directory {out}: {err.strerror}", path=str(out)) from err
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    snap = config.attack.snapshot_round
    if snap is not None and snap > config.rounds:
        raise ConfigError(f"attack.snapshot_round {snap} is after the last round {config.rounds}",
                          key="attack.snapshot_round")
    walls = []
    try:
        with open(out / METRICS, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_FIELDS)
            fh.flush()

            def on_round(rec):
                walls.append(rec.wall_time_s)
                if not timing:
                    rec = dataclasses.replace(rec, wall_time_s=None)
                writer.writerow(rec.as_row())
                fh.flush()

            t0 = time.perf_counter()
            fed = train(config, train_set, test_set, on_round=on_round,
                        snapshot_rounds=() if snap is None else (snap,))
            head = _snapshot_head(fed, fed.snapshots[snap]) if snap is not None else None
            mse, score, recon, losses = attack_federation(fed, head=head, return_images=True)
            acc = fed.records[-1].accuracy if fed.records else evaluate_accuracy(fed.model, fed.eval_set)
            elapsed = time.perf_counter() - t0
            summary = MetricsRecord(config.rounds, config.method, acc, mse, score,
                                    elapsed if timing else None, config.config_hash())
            writer.writerow(summary.as_row())
        weights, sidecar = save_weights(fed.model.state_dict(), out / WEIGHTS)
        images = dump_images(fed.eval_set.images[:dump], recon[:dump], out / "images") if dump else []
        manifest = {
            "config": config.to_dict(),
            "seed": config.seed,
            "started": started,
            "out_dir": str(out),
            "version": __version__,
            "backend": BACKEND,
            "wall_time_s": {"rounds": walls, "total": elapsed},
            "attack_train_loss": losses,
            "checksums": {p.name: _sha256(p) for p in (out / METRICS, weights, sidecar)},
            "images": len(images),
        }
        tmp = out / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        os.replace(tmp, out / MANIFEST)
    except OSError as err:
        raise OutputError(f"I/O failure under {out}: {err}", path=str(out)) from err
    return {"records": fed.records, "attack_mse": mse, "attack_ssim": score, "accuracy": acc,
            "out_dir": out, "federation": fed}


def fnv1a64(data):
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _canonical(axis, value):
    if axis == "sigma2":
        return repr(float(value))
    if axis == "head_depth":
        return _cut_for_depth(value)
    return str(int(value))


def sub_seed(seed, axis, value):
    """Seed for one sweep point, a function of the value itself and not of its position."""
    return fnv1a64(f"{int(seed)}:{axis}:{_canonical(axis, value)}".encode())


def _cut_for_depth(value):
    text = str(value).strip().upper()
    if text.startswith(("RB", "B")):
        return text
    return f"RB{int(text)}"


def _coerce_axis(axis, value):
    try:
        if axis == "sigma2":
            return float(value)
        if axis == "head_depth":
            return _cut_for_depth(value)
        v = float(value)
        if v != int(v):
            raise ValueError
        return int(v)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{axis}: invalid value {value!r}", key=axis, value=value) from err


def sweep_variant(config, axis, value):
    """The config for one sweep point, already checked."""
    if axis not in AXES:
        raise ConfigError(f"axis must be one of {AXES}, got {axis!r}", key="axis")
    value = _coerce_axis(axis, value)
    dp, ka = _MECHANISMS[config.method]
    p = config.privacy
    try:
        if axis == "sigma2":
            p = dataclasses.replace(p, sigma2=value, dp_enabled=dp and value > 0)
        elif axis == "k":
            p = dataclasses.replace(p, k=value, ka_enabled=ka and value > 1)
    except ConfigError as err:
        err.context.update(axis=axis, value=value)
        raise
    changes = {"privacy": p, "seed": sub_seed(config.seed, axis, value)}
    if axis == "head_depth":
        changes["cut"] = value
    if axis == "n_clients":
        changes["n_clients"] = value
    variant = dataclasses.replace(config, **changes)
    try:
        return variant.check()
    except ConfigError as err:
        err.context.update(axis=axis, value=value)
        raise


SUMMARY_FIELDS = ("axis", "value", "seed", "accuracy", "attack_mse", "attack_ssim", "config_hash")


def sweep(config, axis, values, out_dir, train_set=None, test_set=None, timing=False):
    """One run per axis value, each in ``<out>/<axis>=<value>``, then ``<out>/summary.csv``.

    Every value is validated before the first run starts.
    """
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value", key="values")
    variants = [(v, sweep_variant(config, axis, v)) for v in values]
    out = Path(out_dir)
    rows = []
    for v, cfg in variants:
        label = _canonical(axis, v)
        result = run_experiment(cfg, out / f"{axis}={label}", train_set, test_set, timing)
        rows.append([axis, label, str(cfg.seed), repr(float(result["accuracy"])),
                     repr(result["attack_mse"]), repr(result["attack_ssim"]), cfg.config_hash()])
    try:
        with open(out / "summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SUMMARY_FIELDS)
            writer.writerows(rows)
    except OSError as err:
        raise OutputError(f"cannot write sweep summary under {out}: {err.strerror}", path=str(out)) from err
    return rows


def dump_images(originals, reconstructions, directory):
    """Write paired ``orig_%04d`` / ``recon_%04d`` NetPBM files (P5 grey, P6 RGB, 8-bit)."""
    originals = np.asarray(originals)
    reconstructions = np.asarray(reconstructions)
    if originals.shape != reconstructions.shape:
        raise ShapeError(f"{originals.shape} originals vs {reconstructions.shape} reconstructions",
                         expected=originals.shape, got=reconstructions.shape)
    if originals.ndim != 4 or originals.shape[1] not in (1, 3):
        raise ShapeError(f"need (N, 1 or 3, H, W) images, got {originals.shape}", got=originals.shape)
    directory = Path(directory)
    paths = []
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for i, (o, r) in enumerate(zip(originals, reconstructions)):
            for prefix, img in (("orig", o), ("recon", r)):
                p = directory / f"{prefix}_{i:04d}.{'pgm' if img.shape[0] == 1 else 'ppm'}"
                write_pnm(img, p)
                paths.append(p)
    except OSError as err:
        raise OutputError(f"cannot write images to {directory}: {err.strerror}", path=str(directory)) from err
    return paths


def write_pnm(image, path):
    """One (C, H, W) image in [0, 1] as binary PGM (C=1) or PPM (C=3); clamped for export only."""
    c, h, w = image.shape
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    body = pixels[0] if c == 1 else pixels.transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(body.tobytes())


def read_pnm(path):
    """Inverse of :func:`write_pnm`: a float32 (C, H, W) image in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos)
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated header at offset {pos}", offset=pos)
        tokens.append(buf[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise DataFormatError(f"{path}: bad magic at offset 0 ({magic!r}, maxval {maxval})", offset=0)
    c = 1 if magic == b"P5" else 3
    if len(buf) - pos < c * h * w:
        raise DataFormatError(f"{path}: truncated data at offset {len(buf)}", offset=len(buf))
    data = np.frombuffer(buf, np.uint8, c * h * w, pos).reshape(h, w, c).transpose(2, 0, 1)
    return data.astype(np.float32) / 255.0


def attack_from_weights(config, weights_path, out_dir=None):
    """Rebuild the run's data splits, load saved global weights, and attack that head."""
    fed = setup(config)
    fed.model.load_state_dict(load_weights(weights_path))
    mse, score, _ = attack_federation(fed)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        acc = evaluate_accuracy(fed.model, fed.eval_set)
        with open(out / "attack.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_FIELDS)
            writer.writerow(MetricsRecord(config.rounds, config.method, acc, mse, score, None,
                                          config.config_hash()).as_row())
    return mse, score


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (default: $SPLITGUARD_OUT or ./runs)")
    source = common.add_mutually_exclusive_group()
    source.add_argument("--config", help="JSON config file")
    source.add_argument("--manifest", help="rerun with the config recorded in a finished run's manifest")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. privacy.k=5 (repeatable)")
    parser = argparse.ArgumentParser(prog="splitguard", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="train, attack and write metrics")
    run.add_argument("--timing", action="store_true", help="fill wall_time_s in the CSV")
    run.add_argument("--dump", type=int, default=0, metavar="N", help="export N original/reconstruction pairs")
    sw = sub.add_parser("sweep", parents=[common], help="one run per value of an axis")
    sw.add_argument("--axis", required=True, choices=AXES)
    sw.add_argument("--values", required=True, help="comma-separated values")
    att = sub.add_parser("attack", parents=[common], help="attack saved global weights")
    att.add_argument("--weights", required=True)
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)
    out = args.out or os.environ.get("SPLITGUARD_OUT") or "runs"
    try:
        if args.manifest:
            config = config_from_manifest(args.manifest)
            if args.set or args.seed is not None:
                raise ConfigError("--manifest reruns take no overrides", key="manifest")
        else:
            config = parse_config(args.config, args.set, args.seed)
        if args.command == "run":
            result = run_experiment(config, out, timing=args.timing, dump=args.dump)
            print(f"accuracy={result['accuracy']:.4f} attack_mse={result['attack_mse']:.6f} "
                  f"attack_ssim={result['attack_ssim']:.4f} out={out}")
        elif args.command == "sweep":
            values = [v for v in args.values.split(",") if v.strip()]
            for row in sweep(config, args.axis, values, out):
                print(",".join(row))
        else:
            mse, score = attack_from_weights(config, args.weights, out)
            print(f"attack_mse={mse:.6f} attack_ssim={score:.4f}")
    except SplitGuardError as err:
        key = err.context.get("key")
        print(f"error: {err}" + (f" [key: {key}]" if key else ""), file=sys.stderr)
        return 1 if isinstance(err, OutputError) else 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0
