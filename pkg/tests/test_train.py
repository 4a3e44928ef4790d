import copy
import csv
import math

import numpy as np
import pytest
import torch

from conftest import TINY_TRAIN
from textcsp.errors import CaseIOError, ConfigError, IncompatibleError, NumericalError
from textcsp.metrics import segmentation_loss
from textcsp.model import ModelConfig
from textcsp.synthdata import Dataset, GeneratorConfig, generate_dataset, load_dataset
from textcsp.train import (
    HISTORY_COLUMNS,
    SAM,
    TrainConfig,
    batch_tensors,
    build_model,
    checkpoint_name,
    check_compatible,
    freeze_audit,
    load_model,
    lr_at,
    read_checkpoint,
    sam_step,
    save_checkpoint,
    split_cases,
    train_loop,
)


def _cfg(**over):
    return TrainConfig.from_dict({**copy.deepcopy(TINY_TRAIN), **over})


# -- schedule


def test_lr_defaults():
    cfg = TrainConfig()
    assert lr_at(49, cfg) == pytest.approx(0.1, abs=1e-15)
    assert lr_at(125, cfg) == pytest.approx(0.05, abs=1e-15)
    assert lr_at(199, cfg) == pytest.approx(0.05 * (1 + math.cos(math.pi * 149 / 150)), abs=1e-15)
    assert lr_at(199, cfg) == pytest.approx(1.1e-5, rel=0.02)
    assert lr_at(0, cfg) == pytest.approx(0.002)
    # continuity at the warmup boundary
    assert lr_at(49, cfg) - lr_at(50, cfg) == 0.0


def test_lr_out_of_range():
    cfg = TrainConfig()
    for e in (-1, 200):
        with pytest.raises(ValueError):
            lr_at(e, cfg)


def test_lr_no_warmup():
    cfg = TrainConfig(epochs=10, warmup_epochs=0)
    assert lr_at(0, cfg) == 0.1
    lrs = [lr_at(e, cfg) for e in range(10)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


@pytest.mark.parametrize(
    "kw,field",
    [
        ({"warmup_epochs": 200}, "warmup_epochs"),
        ({"base_lr": 0.0}, "base_lr"),
        ({"sam_rho": -0.1}, "sam_rho"),
        ({"epochs": 0}, "epochs"),
    ],
)
def test_config_validation(kw, field):
    with pytest.raises(ConfigError) as info:
        TrainConfig(**kw).validate()
    assert info.value.field == field


def test_config_roundtrip_and_unknown_field():
    cfg = _cfg(topology="partial")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochz": 3})
    with pytest.raises(ConfigError):
        TrainConfig(topology="diagonal").validate()


# -- SAM


def test_sam_hand_example():
    w = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    sam_step([w], lambda: (w**2).sum(), lr=0.1, rho=0.5)
    assert w.item() == 0.7


def test_sam_zero_gradient_leaves_w():
    w = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    sam_step([w], lambda: (w**2).sum(), lr=0.1, rho=0.5, momentum=0.9)
    assert w.item() == 0.0


def test_sam_rho_zero_matches_sgd_momentum():
    g = torch.Generator().manual_seed(0)
    M = torch.randn(5, 5, generator=g, dtype=torch.float64)
    A = M @ M.T + torch.eye(5, dtype=torch.float64)
    b = torch.randn(5, generator=g, dtype=torch.float64)
    w0 = torch.randn(5, generator=g, dtype=torch.float64)

    def loss(w):
        return 0.5 * w @ A @ w + b @ w

    w_sam = w0.clone().requires_grad_(True)
    state = None
    for _ in range(10):
        _, state = sam_step([w_sam], lambda: loss(w_sam), lr=0.05, rho=0.0, momentum=0.9, momentum_state=state)

    w_sgd = w0.clone().requires_grad_(True)
    opt = torch.optim.SGD([w_sgd], lr=0.05, momentum=0.9)
    for _ in range(10):
        opt.zero_grad()
        loss(w_sgd).backward()
        opt.step()
    assert (w_sam - w_sgd).abs().max().item() <= 1e-12


def test_sam_uses_global_norm():
    a = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
    b = torch.tensor([4.0], dtype=torch.float64, requires_grad=True)
    # L = a^2/2 + b^2/2, g = (3, 4), |g| = 5, w' = w + rho * g / 5
    sam_step([a, b], lambda: 0.5 * (a**2 + b**2).sum(), lr=1.0, rho=5.0)
    assert a.item() == pytest.approx(3.0 - 6.0) and b.item() == pytest.approx(4.0 - 8.0)


def test_sam_nonfinite_aborts():
    w = torch.tensor([1.0], requires_grad=True)
    with pytest.raises(NumericalError):
        sam_step([w], lambda: (w * float("nan")).sum(), lr=0.1, rho=0.05)
    assert w.item() == 1.0


# -- freeze audit


def test_freeze_audit_paper_dims():
    cfg = ModelConfig.from_dict(
        {
            "text": {"d": 768, "heads": 12, "layers": 2, "lora_rank": 8, "prompt_length": 4, "ffn_mult": 1},
            "vision": {"base_channels": 4, "depth": 1, "decoder_out_channels": 8, "fusion_heads": 2},
        }
    )
    model = build_model(TrainConfig(model=cfg))
    rep = freeze_audit(model)
    assert rep.ok
    assert rep.counts["lora"] == 2 * 2 * 12288 == 49152
    assert rep.counts["prompts"] == 3 * 4 * 768
    assert rep.counts["text_other"] == 0
    assert rep.frozen_count == sum(p.numel() for p in model.text.parameters()) - 49152 - 3 * 4 * 768


def test_freeze_audit_toggles():
    model = build_model(_cfg(lora_on=False))
    rep = freeze_audit(model)
    assert rep.ok and rep.counts["lora"] == 0
    attn = [p for n, p in model.named_parameters() if ".attn." in n and n.startswith("text.")]
    assert attn and not any(p.requires_grad for p in attn)
    model.text.layers[0].attn.q.base.weight.requires_grad_(True)
    assert not freeze_audit(model).ok


def test_frozen_tensors_bit_identical_after_steps(tiny_dataset):
    cfg = _cfg()
    model = build_model(cfg, len(tiny_dataset.vocab), tiny_dataset.token_length)
    frozen = {n: p.detach().clone() for n, p in model.named_parameters() if not p.requires_grad}
    trainable = {n: p.detach().clone() for n, p in model.named_parameters() if p.requires_grad}
    assert frozen
    opt = SAM(model.parameters(), lr=0.1, momentum=0.9, rho=0.05)
    vol, lab, ids, mask = batch_tensors(tiny_dataset.cases[:2])
    for _ in range(5):

        def closure():
            opt.zero_grad()
            loss, _ = segmentation_loss(model(vol, ids, mask), lab)
            loss.backward()
            return loss

        opt.step(closure)
    after = dict(model.named_parameters())
    for n, t in frozen.items():
        assert torch.equal(after[n], t), n
    changed = [n for n, t in trainable.items() if not torch.equal(after[n], t)]
    assert any(n.startswith("text.") for n in changed)
    assert any("lora" in checkpoint_name(n) for n in changed)


# -- data plumbing


def test_split_cases():
    assert split_cases(list(range(64)), 16) == (list(range(48)), list(range(48, 64)))
    train, val = split_cases(list(range(8)), 16)
    assert val == [6, 7] and train == list(range(6))


def test_compatibility_checks(tiny_dataset):
    cfg = _cfg()
    cfg.model.text.max_length = tiny_dataset.token_length + 1
    with pytest.raises(IncompatibleError):
        check_compatible(cfg.model, tiny_dataset)
    cfg = _cfg()
    cfg.model.text.max_length = tiny_dataset.token_length
    cfg.model.text.vocab_size = len(tiny_dataset.vocab)
    cfg.model.vision.depth = 5
    with pytest.raises(IncompatibleError):
        check_compatible(cfg.model, tiny_dataset)


# -- checkpoints and loop


def test_checkpoint_roundtrip(tmp_path, tiny_dataset):
    cfg = _cfg()
    model = build_model(cfg, len(tiny_dataset.vocab), tiny_dataset.token_length)
    path = save_checkpoint(tmp_path / "x.ckpt", model, cfg, epoch=3)
    ckpt = read_checkpoint(path)
    assert ckpt.epoch == 3
    assert ckpt.config == cfg
    for n, p in model.named_parameters():
        key = checkpoint_name(n)
        assert torch.equal(ckpt.tensors[key], p.detach())
        assert ckpt.meta["tensors"][key]["trainable"] == p.requires_grad
        assert ckpt.meta["tensors"][key]["dtype"] == "<f4"
    assert "prompt.WT" in ckpt.tensors and "lora.0.q.A" in ckpt.tensors
    restored, _ = load_model(path)
    vol, _, ids, mask = batch_tensors(tiny_dataset.cases[:1])
    model.eval()
    with torch.no_grad():
        assert torch.equal(restored(vol, ids, mask).logits(), model(vol, ids, mask).logits())


def test_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a zip")
    with pytest.raises(CaseIOError):
        read_checkpoint(bad)
    with pytest.raises(CaseIOError):
        read_checkpoint(tmp_path / "missing.ckpt")


def _read_history(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_loop_artifacts_and_determinism(tmp_path, tiny_dataset):
    a = train_loop(tiny_dataset, _cfg(), tmp_path / "a")
    b = train_loop(tiny_dataset, _cfg(), tmp_path / "b")
    for name in ("best.ckpt", "last.ckpt", "history.csv"):
        assert (tmp_path / "a" / name).is_file()
    ha, hb = _read_history(tmp_path / "a" / "history.csv"), _read_history(tmp_path / "b" / "history.csv")
    assert list(ha[0]) == HISTORY_COLUMNS
    assert len(ha) == 4 and ha == hb
    assert [r["dice_wt"] != "" for r in ha] == [False, True, False, True]
    assert [float(r["lr"]) for r in ha] == [lr_at(e, _cfg()) for e in range(4)]
    assert a.final_report.mean_dice == b.final_report.mean_dice


def test_resume_matches_uninterrupted(tmp_path, tiny_dataset):
    cfg = _cfg()
    full = train_loop(tiny_dataset, cfg, tmp_path / "full")
    part = train_loop(tiny_dataset, _cfg(), tmp_path / "part", max_epochs=2)
    assert len(part.history) == 2
    resumed = train_loop(tiny_dataset, _cfg(), tmp_path / "part", resume=part.last_path)
    assert [r["lr"] for r in resumed.history] == [r["lr"] for r in full.history]
    assert resumed.history == full.history
    x, y = read_checkpoint(full.last_path), read_checkpoint(resumed.last_path)
    for k in x.tensors:
        assert torch.equal(x.tensors[k], y.tensors[k]), k
    for k in x.momentum:
        assert torch.equal(x.momentum[k], y.momentum[k]), k


def test_nan_abort_keeps_artifacts(tmp_path, tiny_dataset):
    cases = [copy.copy(c) for c in tiny_dataset.cases]
    cases[0].volume = cases[0].volume.copy()
    cases[0].volume[0, 0, 0, 0] = np.nan
    broken = Dataset(tiny_dataset.root, tiny_dataset.manifest, tiny_dataset.vocab, cases)
    cfg = _cfg(seed=0)
    with pytest.raises(NumericalError, match="epoch 0 batch"):
        train_loop(broken, cfg, tmp_path / "nan")
    assert (tmp_path / "nan" / "abort.ckpt").is_file()


@pytest.mark.slow
def test_toy_run_loss_decreases(tmp_path):
    root = tmp_path / "toy"
    generate_dataset(GeneratorConfig(num_cases=16, seed=3), root)
    ds = load_dataset(root)
    cfg = TrainConfig(epochs=30, warmup_epochs=5, eval_interval=30, seed=0)
    res = train_loop(ds, cfg, tmp_path / "run")
    assert res.history[-1]["loss"] < res.history[0]["loss"]
