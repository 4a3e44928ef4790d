"""Training harness: SAM around SGD-momentum, warmup-cosine schedule, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .cascade import CascadeTopology
from .errors import CaseIOError, ConfigError, IncompatibleError, NumericalError
from .metrics import REGIONS, LossConfig, MetricReport, evaluate_case, segmentation_loss
from .model import ModelConfig, TextCSP

log = logging.getLogger(__name__)

HISTORY_COLUMNS = [
    "epoch", "lr", "loss",
    "dice_wt", "dice_tc", "dice_et",
    "hd95_wt", "hd95_tc", "hd95_et",
    "violation_rate",
]


@dataclass
class TrainConfig:
    epochs: int = 200
    warmup_epochs: int = 50
    base_lr: float = 0.1
    momentum: float = 0.9
    sam_rho: float = 0.05
    weight_decay: float = 0.0
    batch_size: int = 2
    seed: int = 0
    eval_interval: int = 5
    val_cases: int = 16
    topology: str = "full"
    prompts_on: bool = True
    lora_on: bool = True
    modulators_on: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", "epochs")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"warmup_epochs ({self.warmup_epochs}) must be in [0, epochs={self.epochs})", "warmup_epochs"
            )
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be > 0", "base_lr")
        if self.sam_rho < 0:
            raise ConfigError("sam_rho must be >= 0", "sam_rho")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)", "momentum")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "batch_size")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1", "eval_interval")
        CascadeTopology.parse(self.topology)
        self.model.text.validate()
        self.model.vision.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}", sorted(unknown)[0])
        model = ModelConfig.from_dict(data.pop("model", {}))
        loss = data.pop("loss", {})
        if "branch_weights" in loss:
            loss["branch_weights"] = tuple(loss["branch_weights"])
        return cls(model=model, loss=LossConfig(**loss), **data)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` over ``warmup_epochs`` then cosine decay, per epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    W = cfg.warmup_epochs
    if epoch < W:
        return cfg.base_lr * (epoch + 1) / W
    return 0.5 * cfg.base_lr * (1 + math.cos(math.pi * (epoch - W) / (cfg.epochs - W)))


# ---------------------------------------------------------------------------
# SAM


def _global_grad_norm(params) -> torch.Tensor:
    norms = [p.grad.detach().norm(2) for p in params if p.grad is not None]
    if not norms:
        return torch.zeros(())
    return torch.stack(norms).norm(2)


class SAM:
    """Sharpness-aware minimisation with an SGD-momentum base step.

    ``step(closure)`` where ``closure`` zeroes grads, computes the loss,
    backpropagates and returns the loss tensor.
    """

    def __init__(self, params, lr: float = 0.1, momentum: float = 0.9, rho: float = 0.05, weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.momentum = momentum
        self.rho = rho
        self.weight_decay = weight_decay
        self.buffers: dict[int, torch.Tensor] = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _check(self, loss, stage):
        if not torch.isfinite(loss).all():
            raise NumericalError(f"non-finite loss at SAM {stage} pass: {loss.item()}")
        for p in self.params:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericalError(f"non-finite gradient at SAM {stage} pass (tensor shape {tuple(p.shape)})")

    def step(self, closure):
        loss = closure()
        self._check(loss, "first")
        norm = _global_grad_norm(self.params)
        if self.rho > 0 and norm > 0:
            saved = [p.detach().clone() for p in self.params]
            with torch.no_grad():
                scale = self.rho / norm
                for p in self.params:
                    if p.grad is not None:
                        p.add_(p.grad * scale)
            perturbed_loss = closure()
            self._check(perturbed_loss, "second")
            with torch.no_grad():
                for p, w in zip(self.params, saved):
                    p.copy_(w)
        self._descend()
        return loss

    @torch.no_grad()
    def _descend(self):
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g.add(p, alpha=self.weight_decay)
            buf = self.buffers.get(id(p))
            if buf is None:
                buf = torch.clone(g).detach()
                self.buffers[id(p)] = buf
            else:
                buf.mul_(self.momentum).add_(g)
            p.add_(buf, alpha=-self.lr)

    def state_dict(self, names: dict[int, str]) -> dict[str, torch.Tensor]:
        return {names[k]: v for k, v in self.buffers.items()}

    def load_state_dict(self, state: dict[str, torch.Tensor], params_by_name: dict[str, torch.Tensor]):
        self.buffers = {id(params_by_name[n]): t.clone() for n, t in state.items()}


def sam_step(params, loss_fn, lr, rho, momentum=0.0, momentum_state=None):
    """One SAM step on a list of leaf tensors; ``loss_fn()`` reads them directly.

    ``momentum_state`` is a dict carried between calls (created if ``None``)
    and returned alongside the loss.
    """
    opt = SAM(params, lr=lr, momentum=momentum, rho=rho)
    if momentum_state is not None:
        opt.buffers = momentum_state

    def closure():
        opt.zero_grad()
        loss = loss_fn()
        loss.backward()
        return loss

    loss = opt.step(closure)
    return loss, opt.buffers


# ---------------------------------------------------------------------------
# model construction and parameter bookkeeping


def build_model(cfg: TrainConfig, vocab_size: int | None = None, token_length: int | None = None) -> TextCSP:
    if vocab_size is not None:
        cfg.model.text.vocab_size = vocab_size
    if token_length is not None:
        cfg.model.text.max_length = token_length
    cfg.validate()
    torch.manual_seed(cfg.seed)
    return TextCSP(
        cfg.model,
        topology=cfg.topology,
        prompts_on=cfg.prompts_on,
        lora_on=cfg.lora_on,
        modulators_on=cfg.modulators_on,
    )


def checkpoint_name(param_name: str) -> str:
    """Map a module parameter path onto the stable checkpoint key."""
    parts = param_name.split(".")
    if parts[:2] == ["text", "prompts"]:
        return f"prompt.{parts[2]}"
    if parts[0] == "text" and parts[1] == "layers" and parts[-1] in ("A", "B") and parts[3] == "attn":
        return f"lora.{parts[2]}.{parts[4]}.{parts[5]}"
    return param_name


def is_lora(name: str) -> bool:
    return checkpoint_name(name).startswith("lora.")


def is_prompt(name: str) -> bool:
    return checkpoint_name(name).startswith("prompt.")


@dataclass
class FreezeReport:
    counts: dict  # group -> trainable parameter count
    frozen_count: int
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def freeze_audit(model: TextCSP) -> FreezeReport:
    counts = {"lora": 0, "prompts": 0, "text_other": 0, "vision": 0, "cascade": 0}
    frozen = 0
    violations = []
    for name, p in model.named_parameters():
        if name.startswith("text."):
            should_train = is_lora(name) or is_prompt(name)
            group = "lora" if is_lora(name) else "prompts" if is_prompt(name) else "text_other"
        else:
            should_train = True
            group = name.split(".")[0]
        if p.requires_grad != should_train:
            violations.append(f"{name}: requires_grad={p.requires_grad}, expected {should_train}")
        if p.requires_grad:
            counts[group] += p.numel()
        else:
            frozen += p.numel()
    return FreezeReport(counts, frozen, violations)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_FORMAT = "textcsp-ckpt-1"


def _tensor_entry(zf, key, t: torch.Tensor, **extra) -> dict:
    arr = t.detach().cpu().contiguous().numpy()
    arr = arr.astype(arr.dtype.newbyteorder("<"))
    member = f"tensors/{key}.bin"
    zf.writestr(member, arr.tobytes())
    return {"file": member, "dtype": arr.dtype.str, "shape": list(arr.shape), **extra}


def save_checkpoint(path, model: TextCSP, cfg: TrainConfig, epoch: int, optimizer: SAM | None = None, history=None, extra=None) -> Path:
    """Single zip archive: raw little-endian tensors plus ``meta.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = {id(p): checkpoint_name(n) for n, p in model.named_parameters()}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        tensors = {}
        for n, p in model.named_parameters():
            key = checkpoint_name(n)
            tensors[key] = _tensor_entry(zf, key, p, trainable=p.requires_grad)
        optim = {}
        if optimizer is not None:
            for key, buf in optimizer.state_dict(names).items():
                optim[key] = _tensor_entry(zf, f"optim.{key}.momentum", buf)
        rng = _tensor_entry(zf, "rng.torch", torch.get_rng_state())
        meta = {
            "format": CKPT_FORMAT,
            "epoch": epoch,
            "config": cfg.to_dict(),
            "tensors": tensors,
            "optimizer": {"momentum_buffers": optim, "lr": optimizer.lr if optimizer else None},
            "rng": {"torch": rng, "numpy": _np_rng_state()},
            "history": history or [],
            **(extra or {}),
        }
        zf.writestr("meta.json", json.dumps(meta, indent=1))
    tmp.replace(path)
    return path


def _np_rng_state():
    name, keys, pos, has_gauss, cached = np.random.get_state()
    return {"name": name, "keys": keys.tolist(), "pos": int(pos), "has_gauss": int(has_gauss), "cached": float(cached)}


def _read_tensor(zf, entry) -> torch.Tensor:
    raw = zf.read(entry["file"])
    arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
    return torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict  # checkpoint key -> tensor
    momentum: dict
    rng_torch: torch.Tensor

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.meta["config"])

    @property
    def epoch(self) -> int:
        return int(self.meta["epoch"])


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CaseIOError(f"missing checkpoint file: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format") != CKPT_FORMAT:
                raise CaseIOError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
            tensors = {k: _read_tensor(zf, e) for k, e in meta["tensors"].items()}
            momentum = {k: _read_tensor(zf, e) for k, e in meta["optimizer"]["momentum_buffers"].items()}
            rng = _read_tensor(zf, meta["rng"]["torch"])
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CaseIOError(f"corrupt checkpoint {path}: {exc}") from exc
    return Checkpoint(meta, tensors, momentum, rng)


def load_into(model: TextCSP, ckpt: Checkpoint) -> None:
    params = {checkpoint_name(n): p for n, p in model.named_parameters()}
    missing = set(params) - set(ckpt.tensors)
    unexpected = set(ckpt.tensors) - set(params)
    if missing or unexpected:
        raise IncompatibleError(f"checkpoint/model mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}")
    with torch.no_grad():
        for k, p in params.items():
            t = ckpt.tensors[k]
            if t.shape != p.shape:
                raise IncompatibleError(f"{k}: checkpoint shape {tuple(t.shape)} vs model {tuple(p.shape)}")
            p.copy_(t)


def load_model(path) -> tuple[TextCSP, Checkpoint]:
    ckpt = read_checkpoint(path)
    cfg = ckpt.config
    model = build_model(cfg)
    load_into(model, ckpt)
    model.eval()
    return model, ckpt


# ---------------------------------------------------------------------------
# data plumbing and evaluation


def split_cases(cases, val_cases: int):
    """Last ``val_cases`` cases are held out; small datasets keep a quarter."""
    n = len(cases)
    if n < 2:
        return list(cases), list(cases)
    k = val_cases if val_cases < n else max(1, n // 4)
    return list(cases[: n - k]), list(cases[n - k :])


def batch_tensors(cases):
    vol = torch.from_numpy(np.stack([c.volume for c in cases]))
    lab = torch.from_numpy(np.stack([c.labels for c in cases]).astype(np.float32))
    ids = torch.from_numpy(np.stack([c.token_ids for c in cases]))
    mask = torch.from_numpy(np.stack([c.attention_mask for c in cases]).astype(np.int64))
    return vol, lab, ids, mask


@torch.no_grad()
def predict(model: TextCSP, cases, batch_size: int = 2) -> list[np.ndarray]:
    """Binary ``[3, D, H, W]`` predictions (logit > 0) per case."""
    was_training = model.training
    model.eval()
    preds = []
    for i in range(0, len(cases), batch_size):
        vol, _, ids, mask = batch_tensors(cases[i : i + batch_size])
        logits = model(vol, ids, mask).logits()
        preds.extend((logits > 0).to(torch.uint8).numpy())
    model.train(was_training)
    return preds


def evaluate(model: TextCSP, cases, batch_size: int = 2) -> MetricReport:
    preds = predict(model, cases, batch_size)
    return MetricReport([evaluate_case(c.case_id, p, c.labels) for c, p in zip(cases, preds)])


def check_compatible(model_cfg: ModelConfig, dataset) -> None:
    if model_cfg.text.max_length != dataset.token_length:
        raise IncompatibleError(
            f"model token length {model_cfg.text.max_length} != dataset token length {dataset.token_length}"
        )
    if model_cfg.text.vocab_size < len(dataset.vocab):
        raise IncompatibleError(f"model vocab {model_cfg.text.vocab_size} < dataset vocab {len(dataset.vocab)}")
    try:
        model_cfg.vision.check_grid(dataset.grid_size)
    except ConfigError as exc:
        raise IncompatibleError(str(exc)) from exc


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    history: list
    best_path: Path
    last_path: Path
    final_report: MetricReport | None


def _history_row(epoch, lr, loss, report: MetricReport | None) -> dict:
    row = {"epoch": epoch, "lr": lr, "loss": loss}
    for r in REGIONS:
        row[f"dice_{r.lower()}"] = report.dice[r] if report else None
        row[f"hd95_{r.lower()}"] = report.hd95[r] if report else None
    row["violation_rate"] = report.violation_rate if report else None
    return row


def write_history(path, history) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: ("" if row.get(k) is None else repr(row[k]) if isinstance(row[k], float) else row[k]) for k in HISTORY_COLUMNS})


def epoch_order(n: int, seed: int, epoch: int) -> list[int]:
    """Shuffle that depends only on (seed, epoch), so resumed runs match fresh ones."""
    g = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
    return torch.randperm(n, generator=g).tolist()


def train_loop(dataset, cfg: TrainConfig, out_dir, resume=None, max_epochs: int | None = None) -> TrainResult:
    """Train on ``dataset`` (a ``synthdata.Dataset``), writing artifacts into ``out_dir``.

    ``resume`` is a checkpoint path to continue from. ``max_epochs`` stops
    early (after that many total epochs) without changing the schedule,
    which is how interrupted runs are simulated.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg, vocab_size=len(dataset.vocab), token_length=dataset.token_length)
    check_compatible(cfg.model, dataset)
    train_cases, val_cases = split_cases(dataset.cases, cfg.val_cases)
    opt = SAM(model.parameters(), lr=cfg.base_lr, momentum=cfg.momentum, rho=cfg.sam_rho, weight_decay=cfg.weight_decay)
    names = {id(p): checkpoint_name(n) for n, p in model.named_parameters()}
    by_name = {checkpoint_name(n): p for n, p in model.named_parameters()}

    history: list = []
    start = 0
    best = -1.0
    if resume is not None:
        ckpt = read_checkpoint(resume)
        load_into(model, ckpt)
        opt.load_state_dict(ckpt.momentum, by_name)
        torch.set_rng_state(ckpt.rng_torch)
        history = list(ckpt.meta.get("history", []))
        best = float(ckpt.meta.get("best_mean_dice", -1.0))
        start = ckpt.epoch + 1

    best_path, last_path = out / "best.ckpt", out / "last.ckpt"
    stop = cfg.epochs if max_epochs is None else min(cfg.epochs, max_epochs)
    report = None
    model.train()
    for epoch in range(start, stop):
        opt.lr = lr_at(epoch, cfg)
        order = epoch_order(len(train_cases), cfg.seed, epoch)
        losses = []
        for b, i in enumerate(range(0, len(order), cfg.batch_size)):
            vol, lab, ids, mask = batch_tensors([train_cases[j] for j in order[i : i + cfg.batch_size]])

            def closure():
                opt.zero_grad()
                loss, _ = segmentation_loss(model(vol, ids, mask), lab, cfg.loss, batch_id=f"{epoch}:{b}")
                loss.backward()
                return loss

            try:
                loss = opt.step(closure)
            except NumericalError as exc:
                save_checkpoint(out / "abort.ckpt", model, cfg, epoch, opt, history)
                raise NumericalError(f"epoch {epoch} batch {b}: {exc}") from exc
            losses.append(loss.item())
        report = None
        final = epoch == cfg.epochs - 1
        if (epoch + 1) % cfg.eval_interval == 0 or final:
            report = evaluate(model, val_cases, cfg.batch_size)
        history.append(_history_row(epoch, opt.lr, float(np.mean(losses)), report))
        log.info("epoch %d lr %.5f loss %.4f%s", epoch, opt.lr, history[-1]["loss"],
                 f" val dice {report.mean_dice:.4f}" if report else "")
        if report is not None and report.mean_dice > best:
            best = report.mean_dice
            save_checkpoint(best_path, model, cfg, epoch, opt, history, {"best_mean_dice": best})
        if report is not None or epoch == stop - 1:
            save_checkpoint(last_path, model, cfg, epoch, opt, history, {"best_mean_dice": best})
        write_history(out / "history.csv", history)
    if not best_path.exists() and last_path.exists():
        # no evaluation ran yet; best falls back to last
        best_path.write_bytes(last_path.read_bytes())
    if report is None and stop == cfg.epochs:
        report = evaluate(model, val_cases, cfg.batch_size)
    return TrainResult(history, best_path, last_path, report)
