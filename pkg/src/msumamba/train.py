"""Training loop, run configuration, logging, and evaluation.

All stochasticity is derived per step from (seed, step) seed sequences, so
an interrupted run resumed from a checkpoint replays the exact same batch
order, augmentations, and attention draws.
"""

from __future__ import annotations

import dataclasses
import json
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentConfig, CLASS_NAMES, Sample, augment, load_dataset, split_dataset
from .errors import ConfigError, DataError
from .losses import LossConfig, combined_loss
from .metrics import ConfusionCounts, MetricReport, compute_metrics, confusion_accumulate
from .network import ModelConfig, MSUMamba, build_model


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_schedule: str = "cosine"            # {"cosine", "constant"}
    steps: int = 300
    batch_size: int = 4
    seed: int = 0
    dataset_root: str = ""
    output_dir: str = ""
    split_ratios: tuple[float, float, float] = (0.7, 0.2, 0.1)
    eval_every: int = 50
    device_threads: Optional[int] = None

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.augment.validate()
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.dataset_root:
            raise ConfigError("dataset_root must be set")
        if not self.output_dir:
            raise ConfigError("output_dir must be set")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        d["loss"] = self.loss.to_dict()
        d["augment"] = self.augment.to_dict()
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        if "augment" in d:
            d["augment"] = AugmentConfig.from_dict(d["augment"])
        if "split_ratios" in d:
            d["split_ratios"] = tuple(d["split_ratios"])
        return cls(**d)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e


def _step_rngs(seed: int, step: int) -> tuple[np.random.Generator, torch.Generator]:
    """Per-step numpy (sampling/augment) and torch (attention) generators."""
    ss = np.random.SeedSequence([seed, step])
    np_rng = np.random.Generator(np.random.PCG64(ss))
    torch_rng = torch.Generator()
    torch_rng.manual_seed(int(ss.generate_state(2)[1]))
    return np_rng, torch_rng


def samples_to_tensors(samples: list[Sample]) -> tuple[torch.Tensor, torch.Tensor]:
    images = np.stack([s.image for s in samples]).astype(np.float32) / 255.0
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    return (torch.from_numpy(images).permute(0, 3, 1, 2).contiguous(),
            torch.from_numpy(masks))


def _cosine_lr(base_lr: float, step: int, total: int) -> float:
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))


def train_steps(model: MSUMamba, train_samples: list[Sample], cfg: RunConfig,
                *, optimizer: Optional[torch.optim.Optimizer] = None,
                start_step: int = 0,
                on_step: Optional[Callable[[dict], None]] = None) -> torch.optim.Optimizer:
    """Run cfg.steps optimization steps (from start_step), mutating model in place."""
    if len(train_samples) == 0:
        raise DataError("training set is empty")
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    n = len(train_samples)
    for step in range(start_step, cfg.steps):
        np_rng, torch_rng = _step_rngs(cfg.seed, step)
        idx = np_rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = [train_samples[int(i)] for i in idx]
        if cfg.augment.enabled:
            batch = [augment(s, cfg.augment, np_rng) for s in batch]
        images, masks = samples_to_tensors(batch)

        lr = (_cosine_lr(cfg.lr, step, cfg.steps) if cfg.lr_schedule == "cosine" else cfg.lr)
        for group in optimizer.param_groups:
            group["lr"] = lr

        model.train()
        t0 = time.perf_counter()
        logits = model(images, rng=torch_rng)
        total, parts = combined_loss(logits, masks, cfg.loss)
        if not torch.isfinite(total):
            raise DataError(f"loss is not finite at step {step}; "
                            f"offending batch ids: {[s.id for s in batch]}")
        optimizer.zero_grad()
        total.backward()
        optimizer.step()

        if on_step is not None:
            on_step({"step": step, "loss": float(total.detach()), "focal": parts["focal"],
                     "dice": parts["dice"], "lr": lr,
                     "wall_time": time.perf_counter() - t0})
    return optimizer


@torch.no_grad()
def evaluate_model(model: MSUMamba, samples: list[Sample],
                   batch_size: int = 4) -> MetricReport:
    """Deterministic eval-mode metrics over a sample list."""
    model.eval()
    counts = ConfusionCounts(model.cfg.num_classes)
    for i in range(0, len(samples), batch_size):
        images, masks = samples_to_tensors(samples[i:i + batch_size])
        pred = model(images).argmax(dim=1)
        confusion_accumulate(pred.numpy(), masks.numpy(), counts)
    return compute_metrics(counts, CLASS_NAMES)


def _environment_fingerprint(threads: int) -> dict:
    return {"torch": torch.__version__, "numpy": np.__version__,
            "python": platform.python_version(), "platform": platform.platform(),
            "threads": threads}


def run_training(cfg: RunConfig, resume: Optional[str] = None) -> dict:
    """Full training run with logging, checkpoints, and periodic evaluation.

    Writes into cfg.output_dir: config.json (resolved config), env.json,
    log.jsonl (one record per step), best.msum and last.msum checkpoints.
    Returns a summary dict.
    """
    cfg.validate()
    if cfg.device_threads is not None:
        torch.set_num_threads(cfg.device_threads)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    samples = load_dataset(cfg.dataset_root)
    train, val, test = split_dataset(samples, cfg.split_ratios, cfg.seed)
    if not train:
        raise DataError(f"no training samples in {cfg.dataset_root}")
    eval_set = val if val else train  # overfit-style runs evaluate the train split

    start_step = 0
    optimizer_state = None
    if resume is not None:
        model, training_state = load_checkpoint(resume)
        if training_state is None:
            raise ConfigError(f"{resume} has no training state to resume from")
        if model.cfg.to_dict() != cfg.model.to_dict():
            raise ConfigError("resume checkpoint config does not match the run config")
        start_step = int(training_state["step"])
        optimizer_state = training_state["optimizer"]
    else:
        model = build_model(cfg.model)

    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    (out / "env.json").write_text(json.dumps(
        _environment_fingerprint(torch.get_num_threads()), indent=2))

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    log_path = out / "log.jsonl"
    log_file = open(log_path, "a" if resume else "w")
    history: list[dict] = []
    best = {"mDC": -1.0, "step": -1}

    def save(step: int, name: str) -> None:
        save_checkpoint(model, out / name, training_state={
            "step": step + 1, "optimizer": optimizer.state_dict(),
            "torch_rng": torch.get_rng_state()})

    def on_step(rec: dict) -> None:
        history.append(rec)
        log_file.write(json.dumps(rec) + "\n")
        log_file.flush()
        step = rec["step"]
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            report = evaluate_model(model, eval_set, cfg.batch_size)
            mdc = report.macro["mDC"]
            val_rec = {"step": step, "val_mDC": None if math.isnan(mdc) else mdc}
            log_file.write(json.dumps(val_rec) + "\n")
            log_file.flush()
            if not math.isnan(mdc) and mdc > best["mDC"]:
                best.update(mDC=mdc, step=step)
                save(step, "best.msum")
            save(step, "last.msum")

    try:
        train_steps(model, train, cfg, optimizer=optimizer,
                    start_step=start_step, on_step=on_step)
    finally:
        log_file.close()

    final_report = evaluate_model(model, eval_set, cfg.batch_size)
    return {"model": model, "history": history, "best": best,
            "final_report": final_report,
            "splits": {"train": len(train), "val": len(val), "test": len(test)},
            "checkpoints": {"best": str(out / "best.msum"), "last": str(out / "last.msum")}}
