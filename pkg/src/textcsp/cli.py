"""Command-line entry points.

``textcsp generate|train|eval|ablate|export-attention``

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 checkpoint/dataset incompatibility.

Config files are UTF-8 JSON objects. ``generate`` reads ``GeneratorConfig``
fields at the top level. ``train`` and ``ablate`` read ``TrainConfig`` fields
at the top level (``model``/``loss`` as nested objects) plus an optional
``"data"`` key naming the dataset directory. Command-line flags override
file values.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import CaseIOError, ConfigError, IncompatibleError, NumericalError, TextCSPError
from .metrics import MetricReport, evaluate_case
from .synthdata import GeneratorConfig, containment_ok, generate_dataset, load_dataset
from .train import (
    TrainConfig,
    batch_tensors,
    check_compatible,
    load_model,
    predict,
    split_cases,
    train_loop,
)

log = logging.getLogger("textcsp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INCOMPATIBLE = 0, 2, 3, 4
MANIFEST_NAME = "run_manifest.json"


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON form; independent of key order."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config_hash: str
    seed: int | None
    output_dir: str
    config: dict
    started: str = field(default_factory=_now)
    finished: str | None = None
    status: str = "running"
    artifacts: list = field(default_factory=list)

    def write(self) -> Path:
        path = Path(self.output_dir) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=1), encoding="utf-8")
        return path

    @classmethod
    def read(cls, out_dir) -> "RunManifest":
        return cls(**json.loads((Path(out_dir) / MANIFEST_NAME).read_text(encoding="utf-8")))


def _start_run(args, command: str, config: dict, seed) -> RunManifest:
    out = Path(args.out)
    h = config_hash(config)
    existing = out / MANIFEST_NAME
    if existing.exists() and not args.force:
        try:
            old = json.loads(existing.read_text(encoding="utf-8")).get("config_hash")
        except json.JSONDecodeError:
            old = None
        if old == h:
            raise ConfigError(f"{out} already holds a run with this config (hash {h[:12]}); pass --force to rerun", "out")
    manifest = RunManifest(command, args.config, h, seed, str(out), config)
    manifest.write()
    return manifest


def _finish(manifest: RunManifest, status: str, artifacts=()) -> None:
    manifest.finished = _now()
    manifest.status = status
    manifest.artifacts = [str(a) for a in artifacts]
    manifest.write()


def _read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {p}", "config") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}", "config") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {p} must hold a JSON object", "config")
    return data


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    data = _read_config(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.num_cases is not None:
        data["num_cases"] = args.num_cases
    cfg = GeneratorConfig.from_dict(data)
    cfg.validate()
    manifest = _start_run(args, "generate", cfg.to_dict(), cfg.seed)
    ids = generate_dataset(cfg, args.out)
    ds = load_dataset(args.out)
    violations = sum(not containment_ok(c.labels) for c in ds.cases) / len(ds.cases)
    print(f"cases: {len(ids)}")
    print(f"containment violation rate: {violations:g}")
    _finish(manifest, "ok", [Path(args.out) / "manifest.json"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _train_config(args) -> tuple[TrainConfig, str]:
    data = _read_config(args.config)
    dataset = args.data or data.pop("data", None)
    data.pop("data", None)
    if dataset is None:
        raise ConfigError("no dataset given (use --data or a 'data' key in the config)", "data")
    overrides = {
        "seed": args.seed,
        "topology": getattr(args, "topology", None),
        "epochs": args.epochs,
        "warmup_epochs": args.warmup_epochs,
        "eval_interval": args.eval_interval,
    }
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    if getattr(args, "prompt_tokens", None) is not None:
        data.setdefault("model", {}).setdefault("text", {})["prompt_length"] = args.prompt_tokens
    cfg = TrainConfig.from_dict(data)
    cfg.validate()
    return cfg, dataset


def _load_dataset(path):
    try:
        return load_dataset(path)
    except CaseIOError as exc:
        raise ConfigError(str(exc), "data") from exc


def cmd_train(args) -> int:
    cfg, data_path = _train_config(args)
    ds = _load_dataset(data_path)
    manifest = _start_run(args, "train", {"data": str(Path(data_path).resolve()), **cfg.to_dict()}, cfg.seed)
    try:
        res = train_loop(ds, cfg, args.out)
    except NumericalError:
        _finish(manifest, "numerical-failure", sorted(Path(args.out).glob("*.ckpt")))
        raise
    report = res.final_report
    if report is not None:
        print(report.summary_row())
    _finish(manifest, "ok", [res.best_path, res.last_path, Path(args.out) / "history.csv"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _split(ds, split: str, val_cases: int):
    if split == "all":
        return list(ds.cases)
    train, val = split_cases(ds.cases, val_cases)
    return val if split == "val" else train


def cmd_eval(args) -> int:
    ds = _load_dataset(args.data)
    if args.baseline is None and args.checkpoint is None:
        raise ConfigError("eval needs --checkpoint or --baseline", "checkpoint")
    model = None
    val_cases = args.val_cases
    if args.baseline is None:
        model, ckpt = load_model(args.checkpoint)
        check_compatible(ckpt.config.model, ds)
        if val_cases is None:
            val_cases = ckpt.config.val_cases
    cases = _split(ds, args.split, 16 if val_cases is None else val_cases)
    config = {
        "data": str(Path(args.data).resolve()),
        "checkpoint": None if args.checkpoint is None else str(Path(args.checkpoint).resolve()),
        "baseline": args.baseline,
        "split": args.split,
        "val_cases": val_cases,
    }
    manifest = _start_run(args, "eval", config, None)
    if args.baseline == "ground-truth":
        preds = [c.labels for c in cases]
    elif args.baseline == "empty":
        preds = [np.zeros_like(c.labels) for c in cases]
    else:
        preds = predict(model, cases)
    report = MetricReport([evaluate_case(c.case_id, p, c.labels) for c, p in zip(cases, preds)])
    paths = report.write(args.out)
    print(report.summary_row())
    print(f"containment violation rate: {report.violation_rate:g}")
    _finish(manifest, "ok", paths)
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate

SUITES = {
    "components": [
        ("cascade-only", {"prompts_on": False, "lora_on": False, "modulators_on": False}),
        ("+prompts", {"prompts_on": True, "lora_on": False, "modulators_on": False}),
        ("+lora", {"prompts_on": True, "lora_on": True, "modulators_on": False}),
        ("+modulators", {"prompts_on": True, "lora_on": True, "modulators_on": True}),
    ],
    "cascade": [(t, {"topology": t}) for t in ("parallel", "partial", "full")],
    "tokens": [(str(k), {"model": {"text": {"prompt_length": k}}}) for k in (1, 4, 10)],
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out.get(k, {}), v) if isinstance(v, dict) else v
    return out


def write_table(rows, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    cols = ["row", "dice_avg", "hd95_avg", "violation_rate", "status"]
    cpath = out / "ablation.csv"
    with cpath.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)

    def fmt(v, scale=1.0):
        return "-" if v is None else f"{scale * v:.2f}"

    lines = ["| row | Dice Avg | HD95 Avg | violations | status |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['row']} | {fmt(r['dice_avg'], 100)} | {fmt(r['hd95_avg'])} | {fmt(r['violation_rate'])} | {r['status']} |")
    mpath = out / "ablation.md"
    mpath.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return mpath, cpath


def cmd_ablate(args) -> int:
    cfg, data_path = _train_config(args)
    ds = _load_dataset(data_path)
    base = cfg.to_dict()
    config = {"data": str(Path(data_path).resolve()), "suite": args.suite, **base}
    manifest = _start_run(args, "ablate", config, cfg.seed)
    rows, code = [], EXIT_OK
    for label, over in SUITES[args.suite]:
        row = {"row": label, "dice_avg": None, "hd95_avg": None, "violation_rate": None, "status": "ok"}
        try:
            row_cfg = TrainConfig.from_dict(_merge(base, over))
            res = train_loop(ds, row_cfg, Path(args.out) / f"row_{label.lstrip('+')}")
            rep = res.final_report
            row.update(dice_avg=rep.mean_dice, hd95_avg=rep.mean_hd95, violation_rate=rep.violation_rate)
        except TextCSPError as exc:
            row["status"] = f"failed ({type(exc).__name__}: {exc})".replace("|", "/")
            code = code or _exit_code(exc)
            log.error("row %s failed: %s", label, exc)
        rows.append(row)
    paths = write_table(rows, args.out)
    print(paths[0].read_text(encoding="utf-8"), end="")
    _finish(manifest, "ok" if code == EXIT_OK else "row-failure", paths)
    return code


# ---------------------------------------------------------------------------
# export-attention


def _open_interval(a: np.ndarray) -> np.ndarray:
    """Clip float32 sigmoid outputs that rounded to exactly 0 or 1."""
    lo = np.nextafter(np.float32(0), np.float32(1))
    hi = np.nextafter(np.float32(1), np.float32(0))
    return np.clip(a, lo, hi)


def _to_png(slice2d: np.ndarray, path: Path) -> None:
    img = np.round(np.asarray(slice2d, np.float64) * 255).astype(np.uint8)
    Image.fromarray(img).save(path)


@torch.no_grad()
def attention_maps(model, case) -> dict:
    vol, _, ids, mask = batch_tensors([case])
    model.eval()
    out = model(vol, ids, mask)
    return {"A_WT": out.A_WT, "A_TC": out.A_TC}


def cmd_export_attention(args) -> int:
    ds = _load_dataset(args.data)
    try:
        case = ds.by_id(args.case)
    except KeyError:
        raise ConfigError(f"case {args.case!r} not found in {args.data}", "case") from None
    model, ckpt = load_model(args.checkpoint)
    check_compatible(ckpt.config.model, ds)
    config = {
        "data": str(Path(args.data).resolve()),
        "checkpoint": str(Path(args.checkpoint).resolve()),
        "case": args.case,
    }
    manifest = _start_run(args, "export-attention", config, None)
    out = Path(args.out)
    maps = attention_maps(model, case)
    meta = {"case_id": case.case_id, "checkpoint_epoch": ckpt.epoch, "arrays": {}, "images": []}
    artifacts = []
    for name, t in maps.items():
        raw = t.numpy().astype(np.float32)
        arr = _open_interval(raw).astype("<f4")
        fname = f"{name}.f32"
        (out / fname).write_bytes(arr.tobytes())
        meta["arrays"][name] = {
            "file": fname,
            "dtype": "<f4",
            "shape": list(arr.shape),
            "min": float(arr.min()),
            "max": float(arr.max()),
            "clipped_voxels": int((arr != raw).sum()),
        }
        artifacts.append(out / fname)
        vol = arr[0, 0]
        for axis, axis_name in enumerate("dhw"):
            mid = vol.shape[axis] // 2
            png = out / f"{name}_{axis_name}{mid}.png"
            _to_png(np.take(vol, mid, axis=axis), png)
            meta["images"].append(png.name)
            artifacts.append(png)
    (out / "meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
    artifacts.append(out / "meta.json")
    print(f"exported {len(maps)} maps and {len(meta['images'])} slice images to {out}")
    _finish(manifest, "ok", artifacts)
    return EXIT_OK


def read_attention(out_dir) -> dict:
    """Load exported maps back as arrays keyed by name."""
    out = Path(out_dir)
    meta = json.loads((out / "meta.json").read_text(encoding="utf-8"))
    return {
        name: np.frombuffer((out / e["file"]).read_bytes(), dtype=e["dtype"]).reshape(e["shape"])
        for name, e in meta["arrays"].items()
    }


# ---------------------------------------------------------------------------
# argument parsing


def _common(p, config=True):
    if config:
        p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="rerun into a directory holding the same config")


def _train_flags(p):
    p.add_argument("--data", help="dataset directory (overrides the config 'data' key)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--eval-interval", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="textcsp", description="Text-guided hierarchical tumor segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--num-cases", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    _train_flags(p)
    p.add_argument("--topology", choices=["parallel", "partial", "full"])
    p.add_argument("--prompt-tokens", type=int, help="prompt length K")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a baseline")
    _common(p, config=False)
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["val", "train", "all"], default="val")
    p.add_argument("--val-cases", type=int, help="held-out count (default: the checkpoint's)")
    p.add_argument("--baseline", choices=["ground-truth", "empty"])
    p.set_defaults(func=cmd_eval, config=None)

    p = sub.add_parser("ablate", help="run an ablation suite")
    _common(p)
    _train_flags(p)
    p.add_argument("--suite", choices=sorted(SUITES), required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-attention", help="export spatial attention maps for one case")
    _common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--case", required=True)
    p.set_defaults(func=cmd_export_attention, config=None)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    if isinstance(exc, IncompatibleError):
        return EXIT_INCOMPATIBLE
    return EXIT_CONFIG


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        where = f" [field: {exc.field}]" if exc.field else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, IncompatibleError, CaseIOError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
