"""Command-line entry point: synth, train, eval, ablate, inspect.

Configuration files hold flat ``key=value`` lines naming fields of
:class:`ModelConfig` or :class:`TrainConfig` (``seed`` sets both); blank
lines and ``#`` comments are ignored. Command-line flags win over the file.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .model import POOLS, TOKENS, VARIANTS, ModelConfig, ThreeMformer
from .skeleton import load_jsonl, num_blocks, save_jsonl, synth_dataset
from .train import (TrainConfig, evaluate, export_attention, load_checkpoint, prepare, save_checkpoint,
                    train)

_MODEL_KEYS = {f.name: f for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}


class CliError(Exception):
    pass


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        return raw
    except ValueError:
        raise CliError(f"config key {key!r}: cannot parse {raw!r}") from None


def read_kv(path) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _MODEL_KEYS and key not in _TRAIN_KEYS:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def build_configs(kv: dict, overrides: dict, data=None) -> tuple[ModelConfig, TrainConfig]:
    """Merge file values and flag overrides; J, C, tau and num_classes default to the data."""
    merged = {k: str(v) for k, v in kv.items()}
    merged.update({k: str(v) for k, v in overrides.items() if v is not None})
    model_kw, train_kw = {}, {}
    for key, raw in merged.items():
        if key in _MODEL_KEYS:
            model_kw[key] = _coerce(key, raw, _MODEL_KEYS[key].default)
        if key in _TRAIN_KEYS:
            train_kw[key] = _coerce(key, raw, _TRAIN_KEYS[key].default)
        if key not in _MODEL_KEYS and key not in _TRAIN_KEYS:
            raise CliError(f"unknown config key {key!r}")
    if data:
        first = data[0].frames
        model_kw.setdefault("J", first.shape[1])
        model_kw.setdefault("C", first.shape[2])
        model_kw.setdefault("num_classes", max(s.label for s in data) + 1)
        T_ = model_kw.get("T", _MODEL_KEYS["T"].default)
        S_ = model_kw.get("S", _MODEL_KEYS["S"].default)
        model_kw.setdefault("tau", max(num_blocks(len(s.frames), T_, S_) for s in data))
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        raise CliError(str(exc)) from None


def _load_data(path, torso_index: int = 0):
    try:
        data = load_jsonl(path, torso_index)
    except OSError as exc:
        raise CliError(f"cannot read data {path}: {exc.strerror}") from None
    if not data:
        raise CliError(f"{path}: no records")
    return data


def split_by_class(data, test_fraction: float):
    """Per class, the last ``test_fraction`` of its records (file order) are held out."""
    if not 0.0 < test_fraction < 1.0:
        raise CliError("test fraction must lie strictly between 0 and 1")
    by_class: dict[int, list] = {}
    for s in data:
        by_class.setdefault(s.label, []).append(s)
    tr, te = [], []
    for label in sorted(by_class):
        items = by_class[label]
        n_test = int(round(len(items) * test_fraction))
        tr += items[: len(items) - n_test]
        te += items[len(items) - n_test:]
    if not tr or not te:
        raise CliError("split leaves an empty train or test set")
    return tr, te


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


# --------------------------------------------------------------------------
# commands


def cmd_synth(a) -> None:
    data = synth_dataset(a.classes, a.per_class, a.joints, a.frames, a.seed)
    save_jsonl(a.out, data)
    print(f"wrote {len(data)} sequences to {a.out}")


def _train_overrides(a) -> dict:
    return {"variant": a.variant, "pool": a.pool, "epochs": a.epochs, "seed": a.seed, "lr0": a.lr0}


def cmd_train(a) -> None:
    kv = read_kv(a.config) if a.config else {}
    torso = int(kv.get("torso_index", 0))
    data = _load_data(a.data, torso)
    mcfg, tcfg = build_configs(kv, _train_overrides(a), data)
    model = ThreeMformer(mcfg)
    prepared = prepare(data, mcfg, tcfg.torso_index)

    def log(rec):
        print(f"epoch {rec['epoch']} lr {rec['lr']:.6g} loss {rec['loss']:.6f} train_top1 {rec['train_top1']:.4f}",
              flush=True)

    history = train(model, prepared, tcfg, log)
    save_checkpoint(a.out, model)
    if a.history:
        _write_csv(a.history, ["epoch", "lr", "loss", "train_top1"],
                   [[h["epoch"], h["lr"], h["loss"], h["train_top1"]] for h in history])
    print(f"saved {a.out}")


def _load_model(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read model {path}: {exc.strerror}") from None


def cmd_eval(a) -> None:
    model = _load_model(a.model)
    data = _load_data(a.data, a.torso_index)
    m = evaluate(model, prepare(data, model.cfg, a.torso_index))
    print(f"top1 {m.top1:.4f} top5 {m.top5:.4f} loss {m.loss:.6f} n {len(data)}")
    if a.out:
        _write_csv(a.out, ["n", "top1", "top5", "loss"], [[len(data), m.top1, m.top5, m.loss]])


def run_ablation(data, kv: dict, overrides: dict, seeds: int, pools, variants=VARIANTS,
                 test_fraction: float = 1 / 3, log=None) -> list[list]:
    """Rows (variant, pool, seed, top1, top5, loss), seeds ascending within each cell.

    Variants that never pool over blocks are trained once per seed and the
    row repeated for every pool, since the pool choice does not touch them.
    """
    tr, te = split_by_class(data, test_fraction)
    rows, cache = [], {}
    for variant in variants:
        for pool in pools:
            for k in range(seeds):
                key = (variant, pool if variant not in ("baseline", "mp_only") else "-", k)
                if key not in cache:
                    o = dict(overrides, variant=variant, pool=pool)
                    mcfg, tcfg = build_configs(kv, o, data)
                    base = mcfg.seed
                    mcfg.seed, tcfg.seed = base + k, tcfg.seed + k
                    model = ThreeMformer(mcfg)
                    train(model, prepare(tr, mcfg, tcfg.torso_index), tcfg)
                    m = evaluate(model, prepare(te, mcfg, tcfg.torso_index))
                    cache[key] = (m.top1, m.top5, m.loss)
                row = [variant, pool, k, *cache[key]]
                rows.append(row)
                if log is not None:
                    log(row)
    return rows


def cmd_ablate(a) -> None:
    kv = read_kv(a.config) if a.config else {}
    data = _load_data(a.data, int(kv.get("torso_index", 0)))
    pools = a.pools.split(",") if a.pools else [kv.get("pool", _MODEL_KEYS["pool"].default)]
    bad = [p for p in pools if p not in POOLS]
    if bad:
        raise CliError(f"unknown pooling {bad[0]!r}; choose from {', '.join(POOLS)}")
    variants = a.variants.split(",") if a.variants else list(VARIANTS)
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise CliError(f"unknown variant {bad[0]!r}; choose from {', '.join(VARIANTS)}")
    if a.seeds < 1:
        raise CliError("--seeds must be at least 1")
    overrides = {"epochs": a.epochs, "lr0": a.lr0}
    rows = run_ablation(data, kv, overrides, a.seeds, pools, variants, a.test_fraction,
                        log=lambda r: print(" ".join(_fmt(v) for v in r), flush=True))
    _write_csv(a.out, ["variant", "pool", "seed", "top1", "top5", "loss"], rows)
    print(f"wrote {len(rows)} rows to {a.out}")


def cmd_inspect(a) -> None:
    model = _load_model(a.model)
    data = _load_data(a.data, a.torso_index)
    if not 0 <= a.index < len(data):
        raise CliError(f"--index {a.index} out of range for {len(data)} sequences")
    sample = prepare([data[a.index]], model.cfg, a.torso_index)[0]
    csv_path, pgm_path = export_attention(model, sample, a.token, a.out)
    print(f"wrote {csv_path} and {pgm_path}")


# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmformer", description="3Mformer on skeleton sequences")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--per-class", type=int, default=150)
    s.add_argument("--joints", type=int, default=10)
    s.add_argument("--frames", type=int, default=40)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", help="train a model and save a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--pool", choices=POOLS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr0", type=float)
    t.add_argument("--history", help="optional per-epoch CSV")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="top-1/top-5 of a checkpoint on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--out", help="optional report CSV")
    e.add_argument("--torso-index", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("ablate", help="variants x pools x seeds on a per-class train/test split")
    b.add_argument("--data", required=True)
    b.add_argument("--config")
    b.add_argument("--seeds", type=int, default=5)
    b.add_argument("--pools", help="comma-separated; defaults to the configured pool")
    b.add_argument("--variants", help="comma-separated; defaults to all six")
    b.add_argument("--epochs", type=int)
    b.add_argument("--lr0", type=float)
    b.add_argument("--test-fraction", type=float, default=1 / 3)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_ablate)

    i = sub.add_parser("inspect", help="export one attention map as CSV and PGM")
    i.add_argument("--model", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--token", choices=TOKENS, default="channel_block")
    i.add_argument("--out", required=True)
    i.add_argument("--torso-index", type=int, default=0)
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.fn(args)
    except CliError as exc:
        print(f"mmformer: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"mmformer: error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
