"""Rate-distortion objective, Adam, and the training loop with checkpoint/resume."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import msssim_tensor, psnr_from_mse
from .network import IMAGE_MULTIPLE, CodecModel, ForwardResult, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

DISTORTIONS = ("mse", "msssim")
LOG_COLUMNS = ("step", "loss", "bpp_estimate", "distortion", "psnr", "lr")
LAMBDA_GRID = (0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 0.9)


# -- objective ------------------------------------------------------------------
def distortion(x: Tensor, x_tilde: Tensor, kind: str = "mse") -> Tensor:
    """Mean squared error on the [0, 1] scale, or 1 - MS-SSIM."""
    if kind == "mse":
        d = x_tilde - x
        return (d * d).mean()
    if kind == "msssim":
        return 1.0 - msssim_tensor(x, x_tilde)
    raise ValueError(f"unknown distortion {kind!r}; expected one of {DISTORTIONS}")


@dataclass
class LossTerms:
    loss: Tensor
    bpp: float
    distortion: float
    mse: float


def rd_loss(x: Tensor, out: ForwardResult, lam: float, kind: str = "mse") -> LossTerms:
    """L = (R^H + R^L + R_z^H + R_z^L) / num_pixels + lam * D."""
    n, _, h, w = x.shape
    rate = out.bits * (1.0 / (n * h * w))
    d = distortion(x, out.x_tilde, kind)
    loss = rate + d * lam if lam else rate
    if not np.isfinite(loss.item()):
        raise FloatingPointError("rate-distortion loss is not finite")
    err = float(np.mean((np.clip(out.x_tilde.data, 0, 1).astype(np.float64) - x.data) ** 2))
    return LossTerms(loss, rate.item(), d.item(), err)


# -- optimizer --------------------------------------------------------------------
@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError(f"{len(params)} parameters, {len(grads)} gradients, {len(state.m)} moment slots")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"gradient {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype, copy=False)


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``; returns the original norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


# -- schedule & configuration ---------------------------------------------------------
def lr_at(step: int, total: int, base: float) -> float:
    """Constant for the first half of training, then linear decay toward zero."""
    half = total // 2
    if step < half:
        return base
    return base * (total - step) / (total - half)


@dataclass
class TrainConfig:
    lam: float = 0.01
    distortion: str = "mse"
    epochs: int = 200
    batch: int = 8
    lr: float = 5e-5
    crop: int = 256
    seed: int = 0
    steps: int | None = None  # overrides epochs when set
    checkpoint_every: int = 0  # 0 keeps only the final checkpoint
    clip_norm: float = 1.0
    out_dir: str | None = None

    def __post_init__(self):
        if self.distortion not in DISTORTIONS:
            raise ValueError(f"distortion must be one of {DISTORTIONS}, got {self.distortion!r}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.crop <= 0 or self.crop % IMAGE_MULTIPLE:
            raise ValueError(f"crop {self.crop} must be a positive multiple of {IMAGE_MULTIPLE}")
        if self.batch <= 0 or self.lr <= 0:
            raise ValueError("batch and lr must be positive")

    def total_steps(self, num_images: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(num_images / self.batch)


@dataclass
class TrainResult:
    model: CodecModel
    records: list[dict] = field(default_factory=list)
    state: AdamState | None = None
    step: int = 0


# -- data -------------------------------------------------------------------------------
def usable_images(images: Sequence[np.ndarray], crop: int) -> list[np.ndarray]:
    out = []
    for i, im in enumerate(images):
        im = np.asarray(im, dtype=np.float32)
        if im.ndim != 3 or im.shape[0] != 3:
            raise ValueError(f"image {i} has shape {im.shape}; expected 3 x h x w")
        if min(im.shape[1:]) < crop:
            log.warning("skipping image %d: %dx%d is smaller than the %d crop", i, im.shape[2], im.shape[1], crop)
            continue
        out.append(im)
    return out


def make_batch(images: Sequence[np.ndarray], cfg: TrainConfig, step: int, steps_per_epoch: int) -> np.ndarray:
    """Deterministic batch for ``step``: epoch-wise shuffled order, crop offsets from (seed, step)."""
    epoch, k = divmod(step, steps_per_epoch)
    order = np.random.default_rng([cfg.seed, epoch, 1]).permutation(len(images))
    rng = np.random.default_rng([cfg.seed, step, 2])
    batch = []
    for j in range(cfg.batch):
        im = images[order[(k * cfg.batch + j) % len(images)]]
        _, h, w = im.shape
        r = int(rng.integers(0, h - cfg.crop + 1))
        c = int(rng.integers(0, w - cfg.crop + 1))
        batch.append(im[:, r : r + cfg.crop, c : c + cfg.crop])
    return np.stack(batch)


# -- loop ---------------------------------------------------------------------------------
def _state_blocks(model: CodecModel, state: AdamState) -> dict[str, np.ndarray]:
    names = [n for n, _ in model.named_parameters()]
    blocks = {f"adam.m.{n}": m for n, m in zip(names, state.m)}
    blocks.update({f"adam.v.{n}": v for n, v in zip(names, state.v)})
    return blocks


def save_training_checkpoint(path: str | Path, model: CodecModel, state: AdamState, step: int,
                             cfg: TrainConfig, meta: dict | None = None) -> None:
    info = {"step": step, "adam_t": state.t, "train": asdict(cfg)}
    info.update(meta or {})
    save_checkpoint(path, model, info, _state_blocks(model, state))


def load_training_checkpoint(path: str | Path) -> tuple[CodecModel, AdamState, int, dict]:
    model, info, blocks = load_checkpoint(path)
    names = [n for n, _ in model.named_parameters()]
    try:
        state = AdamState([blocks[f"adam.m.{n}"] for n in names], [blocks[f"adam.v.{n}"] for n in names],
                          t=int(info["adam_t"]))
    except KeyError as e:
        raise ValueError(f"{path}: not a training checkpoint (missing {e})") from None
    return model, state, int(info["step"]), info


def _open_log(path: Path, fresh: bool):
    new = fresh or not path.exists()
    fh = path.open("w" if fresh else "a", newline="")
    writer = csv.writer(fh, lineterminator="\n")
    if new:
        writer.writerow(LOG_COLUMNS)
    return fh, writer


def _fmt(v: float) -> str:
    return repr(float(v))


def train_loop(dataset: Sequence[np.ndarray], cfg: TrainConfig, model: CodecModel | None = None,
               resume: str | Path | None = None, stop_after: int | None = None,
               meta: dict | None = None) -> TrainResult:
    """Optimize ``model`` on random crops of ``dataset`` (3 x h x w float arrays on [0, 1]).

    With ``resume`` the model, optimizer state and step counter come from a
    training checkpoint and the run continues exactly where it stopped.
    ``stop_after`` ends the run early after that many steps in this call.
    """
    images = usable_images(dataset, cfg.crop)
    if not images:
        raise ValueError(f"no training image is at least {cfg.crop}x{cfg.crop}")
    if resume is not None:
        model, state, start, _ = load_training_checkpoint(resume)
    else:
        if model is None:
            raise ValueError("train_loop needs a model or a checkpoint to resume from")
        state, start = None, 0
    params = [p for _, p in model.named_parameters()]
    if state is None:
        state = AdamState.zeros_like(params)
    total = cfg.total_steps(len(images))
    steps_per_epoch = max(1, math.ceil(len(images) / cfg.batch))
    end = total if stop_after is None else min(total, start + stop_after)

    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    fh = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh, writer = _open_log(out_dir / "metrics.csv", fresh=resume is None)
    result = TrainResult(model, [], state, start)
    try:
        for step in range(start, end):
            x = Tensor(make_batch(images, cfg, step, steps_per_epoch))
            rng = np.random.default_rng([cfg.seed, step, 3])
            out = model.forward_train(x, rng)
            terms = rd_loss(x, out, cfg.lam, cfg.distortion)
            model.zero_grad()
            backward(terms.loss)
            grads = [p.grad for p in params]
            clip_grad_norm(grads, cfg.clip_norm)
            lr = lr_at(step, total, cfg.lr)
            adam_step(params, grads, state, lr)
            rec = {"step": step, "loss": terms.loss.item(), "bpp_estimate": terms.bpp,
                   "distortion": terms.distortion, "psnr": psnr_from_mse(terms.mse), "lr": lr}
            result.records.append(rec)
            if writer is not None:
                writer.writerow([step] + [_fmt(rec[k]) for k in LOG_COLUMNS[1:]])
            result.step = step + 1
            done = step + 1
            if out_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < end:
                save_training_checkpoint(out_dir / f"ckpt_{done:06d}.octc", model, state, done, cfg, meta)
        if out_dir is not None:
            save_training_checkpoint(out_dir / "final.octc", model, state, result.step, cfg, meta)
    finally:
        if fh is not None:
            fh.close()
    return result


def read_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def config_json(cfg: TrainConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)
