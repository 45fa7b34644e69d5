"""Two-stage training: AdamW, cosine warm restarts, early stopping on
validation PSNR, checkpointing and colorization -> super-resolution transfer."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import time
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import data as D
from . import diffcore as dc
from . import imageops
from .checkpoint import read_checkpoint, write_checkpoint
from .errors import ConfigError, DataError, NumericalError
from .losses import LossConfig, composite_loss
from .model import ModelConfig, ViTSR

log = logging.getLogger(__name__)

STAGE_DEFAULTS = {
    D.COLORIZATION: dict(lr_init=2e-4, max_epochs=100, patience=20, residual_mode="off"),
    D.SUPER_RESOLUTION: dict(lr_init=5e-5, max_epochs=400, patience=40, residual_mode="on"),
}

LOG_HEADER = ("epoch", "train_loss", "val_psnr", "val_ssim", "lr", "seconds")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    stage: str = D.SUPER_RESOLUTION
    lr_init: float | None = None
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int | None = None
    patience: int | None = None
    sched_t0: int = 10
    sched_tmult: int = 2
    lr_min: float = 0.0
    lam: float = 0.2
    seed: int = 0
    wallclock: bool = False

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {D.STAGES}")
        for key in ("lr_init", "max_epochs", "patience"):
            if getattr(self, key) is None:
                object.__setattr__(self, key, STAGE_DEFAULTS[self.stage][key])
        if self.lr_init <= 0:
            raise ConfigError(f"lr_init must be positive, got {self.lr_init}")
        if not 1 <= self.patience < self.max_epochs:
            raise ConfigError(f"need 1 <= patience < max_epochs, got {self.patience}, "
                              f"{self.max_epochs}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must be in [0, 1], got {self.lam}")
        if self.sched_t0 < 1 or self.sched_tmult < 1:
            raise ConfigError("scheduler needs sched_t0 >= 1 and sched_tmult >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    @property
    def residual_mode(self):
        return STAGE_DEFAULTS[self.stage]["residual_mode"]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in fields})


# optimizer

def adamw_step(w, g, m, v, t, lr, weight_decay=0.05, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place AdamW update of array ``w`` with moments ``m``, ``v`` at step ``t`` (1-based)."""
    if not (w.shape == g.shape == m.shape == v.shape):
        raise ValueError(f"shape mismatch: w{w.shape} g{g.shape} m{m.shape} v{v.shape}")
    m *= beta1
    m += (1 - beta1) * g
    v *= beta2
    v += (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    update = lr * m_hat / (np.sqrt(v_hat) + eps) + lr * weight_decay * w
    w -= update.astype(w.dtype, copy=False)
    return w


class AdamW:
    def __init__(self, params, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())
        self.v = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())

    def step(self, lr):
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adamw_step(p.data, p.grad, self.m[name], self.v[name], self.t, lr,
                       self.weight_decay, self.betas[0], self.betas[1], self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_tensors(self):
        out = OrderedDict()
        for name in self.params:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out


# schedule and stopping

def cosine_warm_restart_lr(epoch, lr_init, t0=10, tmult=2, lr_min=0.0):
    """Learning rate for a (possibly fractional) epoch under SGDR-style restarts."""
    t_cur, t_i = float(epoch), float(t0)
    if tmult == 1:
        t_cur = math.fmod(t_cur, t_i)
    else:
        while t_cur >= t_i:
            t_cur -= t_i
            t_i *= tmult
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * t_cur / t_i))


def cycle_starts(t0, tmult, n):
    starts, start, length = [], 0, t0
    for _ in range(n):
        start += length
        starts.append(start)
        length *= tmult
    return starts


def early_stop_decision(history, patience):
    """'stop' once the best value is ``patience`` or more epochs old."""
    if patience < 1:
        raise ConfigError("patience must be >= 1")
    if not history:
        return "continue"
    best = int(np.argmax(history))  # first occurrence: ties are not improvements
    return "stop" if len(history) - 1 - best >= patience else "continue"


# checkpoints

def save_model_checkpoint(path, model, *, stage, epoch, best_psnr, train_cfg=None,
                          optimizer=None):
    meta = {
        "stage": stage,
        "epoch": epoch,
        "best_val_psnr": best_psnr if math.isfinite(best_psnr) else None,
        "model_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "has_optimizer_state": optimizer is not None,
        "optimizer_step": optimizer.t if optimizer is not None else 0,
    }
    tensors = OrderedDict((k, p.data) for k, p in model.params.items())
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    write_checkpoint(path, meta, tensors)


def load_model_checkpoint(path):
    """Returns (model, metadata); optimizer moments are ignored."""
    meta, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = ViTSR(cfg, params=OrderedDict(
        (k, dc.Tensor(v, requires_grad=True)) for k, v in tensors.items()
        if not k.startswith("optim.")))
    missing = set(model.params) ^ set(p for p in _expected_names(cfg))
    if missing:
        raise DataError(f"checkpoint {path} does not match its config: {sorted(missing)[:5]}")
    return model, meta


def _expected_names(cfg):
    from .model import param_shapes
    return param_shapes(cfg).keys()


def transfer_stage1_to_stage2(ckpt_path, model):
    """Copy every parameter of a colorization checkpoint into ``model``.

    Architectures must match field for field (the residual mode may
    differ). Optimizer state is not transferred. Returns the copy count.
    """
    meta, tensors = read_checkpoint(ckpt_path)
    if meta.get("stage") != D.COLORIZATION:
        raise ConfigError(f"{ckpt_path} is a {meta.get('stage')!r} checkpoint, "
                          f"expected {D.COLORIZATION!r}")
    src_cfg = ModelConfig.from_dict(meta["model_config"])
    diff = model.cfg.architecture_diff(src_cfg)
    if diff:
        detail = ", ".join(f"{k}: checkpoint={getattr(src_cfg, k)} model={getattr(model.cfg, k)}"
                           for k in diff)
        raise ConfigError(f"model config mismatch ({detail})")
    copied = 0
    for name, p in model.params.items():
        p.data = np.array(tensors[name], dtype=p.data.dtype)
        copied += 1
    log.info("copied %d tensors from %s", copied, ckpt_path)
    return copied


# training loop

@dataclasses.dataclass
class LogRecord:
    epoch: int
    train_loss: float
    val_psnr: float
    val_ssim: float
    lr: float
    seconds: float

    def row(self):
        return [str(self.epoch), repr(self.train_loss), repr(self.val_psnr),
                repr(self.val_ssim), repr(self.lr), repr(self.seconds)]


def format_log(records):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_HEADER)
    for r in records:
        writer.writerow(r.row())
    return buf.getvalue()


@dataclasses.dataclass
class StageResult:
    records: list
    best_epoch: int
    best_psnr: float
    best_state: OrderedDict
    stopped_early: bool


def evaluate(model, pairs, batch_size=8):
    """Mean PSNR/SSIM of clamped model outputs, plus the outputs."""
    outputs = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        outputs.extend(model.predict(np.stack([p.input for p in chunk])))
    psnrs, ssims = [], []
    for out, p in zip(outputs, pairs):
        out_hwc, tgt_hwc = out.transpose(1, 2, 0), p.target.transpose(1, 2, 0)
        psnrs.append(imageops.psnr(out_hwc, tgt_hwc))
        ssims.append(imageops.ssim(out_hwc, tgt_hwc))
    return float(np.mean(psnrs)), float(np.mean(ssims)), outputs


def run_stage(model, train_spec, val_spec, cfg, run_dir=None, sample_count=4):
    """Train ``model`` in place for one stage; returns a :class:`StageResult`.

    With ``run_dir`` the CSV log, ``best.ckpt``, ``last.ckpt`` and per-epoch
    sample PNGs are written there.
    """
    if model.cfg.residual_mode != cfg.residual_mode:
        model = model.with_residual(cfg.residual_mode)
    train_manifest = D.scan_dataset(train_spec)
    val_manifest = D.scan_dataset(val_spec)
    if {e.path for e in train_manifest} & {e.path for e in val_manifest}:
        raise DataError("train and validation splits overlap")
    if len(train_manifest) < cfg.batch_size:
        raise DataError(f"{len(train_manifest)} training images cannot fill a batch "
                        f"of {cfg.batch_size}")
    val_pairs = D.validation_pairs(val_manifest, val_spec, cfg.stage)
    loss_cfg = LossConfig(lam=cfg.lam)
    optimizer = AdamW(model.params, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.eps)

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "samples").mkdir(parents=True, exist_ok=True)

    records, history = [], []
    best_psnr, best_epoch, best_state = -math.inf, -1, model.state()
    stopped_early = False
    for epoch in range(cfg.max_epochs):
        start = time.perf_counter()
        lr = cosine_warm_restart_lr(epoch, cfg.lr_init, cfg.sched_t0, cfg.sched_tmult,
                                    cfg.lr_min)
        losses = []
        batches = D.batch_iterator(train_manifest, train_spec, cfg.stage, cfg.batch_size,
                                   D.epoch_rng(cfg.seed, epoch))
        for b, (inputs, targets) in enumerate(batches):
            optimizer.zero_grad()
            loss = composite_loss(model(dc.Tensor(inputs)), dc.Tensor(targets), loss_cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch {b}, "
                                     f"lr {lr:.3e}")
            loss.backward()
            optimizer.step(lr)
            losses.append(value)

        val_psnr, val_ssim, outputs = evaluate(model, val_pairs)
        seconds = time.perf_counter() - start
        records.append(LogRecord(epoch, float(np.mean(losses)), val_psnr, val_ssim, lr,
                                 round(seconds, 3) if cfg.wallclock else 0.0))
        history.append(val_psnr)
        log.info("epoch %d loss %.5f val_psnr %.3f val_ssim %.4f lr %.2e (%.1fs)",
                 epoch, records[-1].train_loss, val_psnr, val_ssim, lr, seconds)

        improved = val_psnr > best_psnr
        if improved:
            best_psnr, best_epoch, best_state = val_psnr, epoch, model.state()
        if run_dir is not None:
            (run_dir / "train_log.csv").write_text(format_log(records), encoding="utf-8")
            for i, out in enumerate(outputs[:sample_count]):
                imageops.write_png(run_dir / "samples" / f"epoch{epoch:04d}_{i}.png",
                                   out.transpose(1, 2, 0))
            if improved:
                save_model_checkpoint(run_dir / "best.ckpt", model, stage=cfg.stage,
                                      epoch=epoch, best_psnr=best_psnr, train_cfg=cfg)
            save_model_checkpoint(run_dir / "last.ckpt", model, stage=cfg.stage, epoch=epoch,
                                  best_psnr=best_psnr, train_cfg=cfg, optimizer=optimizer)
        if early_stop_decision(history, cfg.patience) == "stop":
            stopped_early = True
            log.info("early stop at epoch %d; best epoch %d (%.3f dB)",
                     epoch, best_epoch, best_psnr)
            break
    return StageResult(records, best_epoch, best_psnr, best_state, stopped_early)
