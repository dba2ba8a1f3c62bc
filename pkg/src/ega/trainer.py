"""Training loop for the three regimes and the evaluation pass.

* ``baseline``: clean cross-entropy only (plain CAM training).
* ``adversarial``: clean + PGD cross-entropy through the two BN branches.
* ``ega``: adversarial plus the weighted CAM entropy terms.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .attack import AttackConfig, epsilon_schedule, pgd
from .data import SyntheticDataset, batches
from .errors import ConfigError, ContractError, NumericError
from .localization import DEFAULT_TAU, TAU_GRID, extract_box, upsample_cam
from .metrics import EvalRecord, MetricsReport, build_report
from .model import ArchConfig, Branch, EgaModel, build_model, read_checkpoint, save_checkpoint
from .objective import LossWeights, ega_loss

log = logging.getLogger(__name__)

MODES = ("baseline", "adversarial", "ega")
VELOCITY_PREFIX = "optim.velocity."


@dataclass
class TrainConfig:
    mode: str = "ega"
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epsilon: Optional[int] = None
    lambda_clean: Optional[float] = None
    lambda_adv: Optional[float] = None
    seed: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epsilon is None:
            self.epsilon = 0 if self.mode == "baseline" else 1
        ega = self.mode == "ega"
        if self.lambda_clean is None:
            self.lambda_clean = 1.0 if ega else 0.0
        if self.lambda_adv is None:
            self.lambda_adv = 0.01 if ega else 0.0

    def validate(self) -> "TrainConfig":
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError(f"need epochs >= 0 and batch_size >= 2, got {self.epochs}, {self.batch_size}")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("need lr > 0, 0 <= momentum < 1, weight_decay >= 0")
        attack = self.attack  # validates epsilon
        weights = self.weights
        if self.mode == "baseline":
            if attack.epsilon > 0:
                raise ConfigError(f"baseline mode does not attack; epsilon must be 0, got {self.epsilon}")
            if weights.active:
                raise ConfigError("baseline mode has no entropy terms; lambdas must be 0")
        else:
            if attack.epsilon == 0:
                raise ConfigError(f"{self.mode} mode needs epsilon in 1..4")
            if self.mode == "adversarial" and weights.active:
                raise ConfigError("adversarial mode has no entropy terms; lambdas must be 0")
            if self.mode == "ega":
                weights.validate()
        return self

    @property
    def attack(self) -> AttackConfig:
        return epsilon_schedule(self.epsilon)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_clean, self.lambda_adv)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("arch"), dict):
            d["arch"] = ArchConfig.from_dict(d["arch"])
        return cls(**d)


class SGD:
    """Momentum SGD with coupled L2 weight decay.

    Parameters that received no gradient in a step are left untouched
    (e.g. auxiliary BN parameters in clean-only training).
    """

    def __init__(self, model: EgaModel, lr: float, momentum: float, weight_decay: float):
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self):
        for name, p in self.model.named_parameters():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            p.data = (p.data - self.lr * v).astype(p.dtype, copy=False)

    def state(self) -> Dict[str, np.ndarray]:
        return {VELOCITY_PREFIX + k: v for k, v in self.velocity.items()}

    def load_state(self, arrays: Dict[str, np.ndarray]):
        self.velocity = {k[len(VELOCITY_PREFIX):]: v.astype(np.float32)
                         for k, v in arrays.items() if k.startswith(VELOCITY_PREFIX)}


@dataclass
class TrainResult:
    model: EgaModel
    history: List[dict]
    checkpoint: Optional[str] = None


def train_step(model: EgaModel, opt: SGD, x: np.ndarray, y: np.ndarray, cfg: TrainConfig):
    attack = cfg.attack
    x_adv = pgd(model, x, y, attack) if cfg.mode != "baseline" else None
    model.zero_grad()
    total, breakdown = ega_loss(model, x, x_adv, y, cfg.weights)
    if not np.isfinite(breakdown.total):
        raise NumericError(f"non-finite loss {breakdown}")
    ad.backward(total)
    opt.step()
    return breakdown


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 7919, epoch])


def train(config: TrainConfig, dataset: SyntheticDataset, out_dir: Optional[str] = None,
          resume: Optional[str] = None, on_epoch=None) -> TrainResult:
    """Run (or continue) training; writes ``last.ega``, ``model.ega`` and ``train_log.jsonl`` under ``out_dir``.

    ``resume`` names a checkpoint written by a previous call; training
    picks up at the epoch after the one it records.
    """
    config.validate()
    if dataset.split != "train":
        raise ContractError(f"training needs the train split, got {dataset.split!r}")
    if dataset.num_classes != config.arch.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, model expects {config.arch.num_classes}")
    model = build_model(config.arch, seed=config.seed)
    opt = SGD(model, config.lr, config.momentum, config.weight_decay)
    start = 0
    if resume:
        model, meta, extra = read_checkpoint(resume)
        opt = SGD(model, config.lr, config.momentum, config.weight_decay)
        opt.load_state(extra)
        start = int(meta.get("epochs_done", 0))

    log_path = ckpt_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.jsonl")
        ckpt_path = os.path.join(out_dir, "last.ega")
        if not resume and os.path.exists(log_path):
            os.unlink(log_path)

    history = []
    attack_steps = config.attack.steps if config.mode != "baseline" else 0
    step = start * len(batches(len(dataset), config.batch_size))
    for epoch in range(start, config.epochs):
        t0 = time.perf_counter()
        sums: Dict[str, float] = {}
        nb = 0
        for idx in batches(len(dataset), config.batch_size, _epoch_rng(config.seed, epoch)):
            x = dataset.images[idx]
            y = dataset.labels[idx]
            ts = time.perf_counter()
            bd = train_step(model, opt, x, y, config)
            rec = {"step": step, "epoch": epoch, "attack_steps": attack_steps, **bd.to_dict(),
                   "seconds": time.perf_counter() - ts}
            if log_path:
                with open(log_path, "a") as f:
                    f.write(json.dumps(rec) + "\n")
            for k, v in bd.to_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            nb += 1
            step += 1
        summary = {k: v / max(nb, 1) for k, v in sums.items()}
        summary.update(epoch=epoch, attack_steps=attack_steps,
                       train_acc=_accuracy(model, dataset, limit=500), seconds=time.perf_counter() - t0)
        history.append(summary)
        log.info("epoch %d: %s", epoch, summary)
        if log_path:
            with open(log_path, "a") as f:
                f.write(json.dumps({"epoch_summary": summary}) + "\n")
        if ckpt_path:
            save_checkpoint(model, ckpt_path, meta={"epochs_done": epoch + 1, "config": config.to_dict()},
                            extra=opt.state())
        if on_epoch is not None:
            on_epoch(epoch, model)

    final = None
    if out_dir:
        final = os.path.join(out_dir, "model.ega")
        save_checkpoint(model, final, meta={"epochs_done": config.epochs, "config": config.to_dict()},
                        extra=opt.state())
    return TrainResult(model, history, final)


def _accuracy(model: EgaModel, ds: SyntheticDataset, limit: int = 500, batch_size: int = 100) -> float:
    """Eval-mode accuracy on the first ``limit`` samples."""
    n = min(limit, len(ds))
    hits = 0
    for i in range(0, n, batch_size):
        logits = model.forward(ds.images[i:min(i + batch_size, n)], Branch.MAIN, "eval").logits.data
        hits += int((logits.argmax(1) == ds.labels[i:min(i + batch_size, n)]).sum())
    return hits / n if n else 0.0


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("EGA_THREADS", "1")))
    except ValueError:
        return 1


def predict_maps(model: EgaModel, images: np.ndarray, batch_size: int = 100):
    """Eval-mode main-branch logits and NCHW feature maps."""
    feats, logits = [], []
    for i in range(0, len(images), batch_size):
        out = model.forward(images[i:i + batch_size], Branch.MAIN, "eval")
        logits.append(out.logits.data)
        feats.append(out.features.data)
    return np.concatenate(logits), np.concatenate(feats)


def class_maps(model: EgaModel, feats: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """Raw CAM of ``classes[i]`` for every sample, from precomputed features."""
    w = model.params["head.weight"].data[classes]
    return np.einsum("nk,nkhw->nhw", w, feats)


def evaluate(model: EgaModel, dataset: SyntheticDataset, tau: float = DEFAULT_TAU,
             taus: Sequence[float] = TAU_GRID, with_pxap: Optional[bool] = None) -> MetricsReport:
    """Score a model on a val/test split using the main branch in eval mode."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    if dataset.split not in ("val", "test"):
        raise ContractError(f"evaluation needs the val or test split, got {dataset.split!r}")
    taus = list(taus)
    box_taus = sorted(set(taus) | {tau})
    if with_pxap is None:
        with_pxap = dataset.masks is not None
    logits, feats = predict_maps(model, dataset.images)
    preds = logits.argmax(axis=1)
    size = dataset.images.shape[-2:]
    pred_cams = class_maps(model, feats, preds)
    true_cams = class_maps(model, feats, dataset.labels)

    def score(i):
        pred_map = upsample_cam(pred_cams[i], *size)
        true_map = pred_map if preds[i] == dataset.labels[i] else upsample_cam(true_cams[i], *size)
        return EvalRecord(
            predicted=int(preds[i]), true=int(dataset.labels[i]),
            pred_box=extract_box(pred_map, tau),
            boxes={t: extract_box(true_map, t) for t in box_taus},
            gt_box=dataset[i].gt_box,
            score_map=true_map if with_pxap else None,
            gt_mask=dataset.masks[i] if with_pxap and dataset.masks is not None else None)

    workers = _threads()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(score, range(len(dataset))))
    else:
        records = [score(i) for i in range(len(dataset))]
    return build_report(records, tau=tau, taus=taus, with_pxap=with_pxap)
