"""Bi-directional training loop: losses, Adam, schedules, EMA teacher.

A training step mixes two kinds of pseudo pairs: pairs rendered by a
randomized forward ISP and, after a warmup period, pairs produced by an
EMA teacher of the student model.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import blocks, pseudo
from .autodiff import Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .imageio import normalize_raw  # noqa: F401  (re-exported)
from .model import Model, ModelConfig
from .selector import select_all

GAMMA_FLOOR = 1e-8


@dataclass
class TrainConfig:
    alpha: float = 0.3
    warmup_epochs: int = 15
    epochs: int = 800
    learning_rate: float = 1e-4
    decay_factor: float = 0.1
    decay_epochs: tuple = (250, 500)
    batch_size: int = 24
    pp_rand_per_batch: int = 16
    pp_mt_per_batch: int = 8
    ema_decay: float = 0.999
    loss_gamma_exponent: float = 1.0 / 2.2
    input_size: int = 256
    seed: int = 0
    pp_mt_reference: str = "teacher-output"
    checkpoint_every: int = 0  # epochs; 0 = final only

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("EMA decay must be in (0,1)")
        if self.pp_rand_per_batch + self.pp_mt_per_batch != self.batch_size:
            raise ValueError("batch split must sum to batch size")
        if self.pp_mt_reference not in ("teacher-output", "target-raw"):
            raise ValueError(f"unknown reference mode {self.pp_mt_reference!r}")

    def to_dict(self):
        d = dict(self.__dict__)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


def lr_at_epoch(config: TrainConfig, epoch):
    """Step-decayed learning rate for a given epoch index."""
    lr = config.learning_rate
    for boundary in config.decay_epochs:
        if epoch >= boundary:
            lr *= config.decay_factor
    return lr


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_model(model: Model):
        state = OptimizerState()
        for name, t in model.params.items():
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state


def adam_step(model: Model, grads, state: OptimizerState, lr):
    """One Adam update with bias correction.

    ``grads`` maps parameter Tensors to gradient arrays (as produced by
    ``Tape.gradients``). Tensors without an entry are left untouched.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for name, t in model.params.items():
        g = grads.get(t)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)


def ema_update(teacher: Model, student: Model, decay):
    """In-place EMA: t <- decay*t + (1-decay)*s for every tensor."""
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must be in [0,1)")
    for name, t in teacher.params.items():
        s = student.params[name].data
        if t.data.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}")
        # accumulate in float64: with decay near 1 the per-step float32
        # rounding error compounds over thousands of updates
        t.data[...] = decay * t.data.astype(np.float64) + (1.0 - decay) * s


def _gamma_fix(t, exponent):
    """Fixed gamma used only inside the loss, on the RAW side."""
    return ad.pow_(ad.maximum(t, GAMMA_FLOOR), exponent)


def bi_loss(model: Model, x, y, reference=None, gamma_exponent=1.0 / 2.2):
    """Mean L1 in both directions for one (RGB, RAW) pair.

    The reverse map runs first on (x, reference); the forward term
    reuses the very same selected parameters. The RAW-side residual is
    measured after a fixed gamma transform so dark regions carry weight.
    Returns (loss, Selection).
    """
    if np.shape(x) != np.shape(y):
        raise ValueError(f"shape mismatch {np.shape(x)} vs {np.shape(y)}")
    reference = y if reference is None else reference
    selection = select_all(model, x, reference)
    y_hat = blocks.pipeline_reverse(x, selection.params)
    rev = ad.mean_(ad.absolute(_gamma_fix(y, gamma_exponent) - _gamma_fix(y_hat, gamma_exponent)))
    x_back = blocks.pipeline_forward(y, selection.params)
    fwd = ad.mean_(ad.absolute(ad.as_tensor(x) - x_back))
    return rev + fwd, selection


def total_loss(model: Model, pp_rand, pp_mt, config: TrainConfig, epoch):
    """Combined loss over one batch.

    ``pp_rand`` is a list of (x_hat, y) pairs with the real RAW as
    target and reference; ``pp_mt`` is a list of (x, y_hat, reference)
    triples from the teacher. The teacher term is skipped entirely
    during warmup so its gradient contribution is exactly zero.
    Returns (loss, components dict).
    """
    terms = [bi_loss(model, x, y, gamma_exponent=config.loss_gamma_exponent)[0]
             for x, y in pp_rand]
    if not terms:
        raise ValueError("batch has no randomized-ISP pairs")
    loss_rand = terms[0]
    for t in terms[1:]:
        loss_rand = loss_rand + t
    loss_rand = loss_rand * (1.0 / len(terms))

    loss = loss_rand
    loss_mt_value = 0.0
    if pp_mt and epoch >= config.warmup_epochs and config.alpha > 0:
        mt_terms = [
            bi_loss(model, x, y_hat, reference=ref,
                    gamma_exponent=config.loss_gamma_exponent)[0]
            for x, y_hat, ref in pp_mt
        ]
        loss_mt = mt_terms[0]
        for t in mt_terms[1:]:
            loss_mt = loss_mt + t
        loss_mt = loss_mt * (1.0 / len(mt_terms))
        loss_mt_value = loss_mt.item()
        loss = loss + config.alpha * loss_mt
    return loss, {"loss_pp_rand": loss_rand.item(), "loss_pp_mt": loss_mt_value}


def augment(images, rng, size=None):
    """Apply one shared geometric transform to every image in the group.

    Optional bilinear resize to ``size``x``size``, then horizontal and
    vertical flips (each p=0.5) and a rotation by a random multiple of
    90 degrees.
    """
    flip_h = rng.random() < 0.5
    flip_v = rng.random() < 0.5
    k = int(rng.integers(0, 4))
    out = []
    for img in images:
        v = np.asarray(img, dtype=np.float32)
        if size is not None:
            v = ad.resize_bilinear(v, size, size)
        if flip_h:
            v = v[:, ::-1]
        if flip_v:
            v = v[::-1]
        out.append(np.ascontiguousarray(np.rot90(v, k)))
    return out


def save_train_checkpoint(path, student: Model, teacher: Model,
                          opt: OptimizerState, config: TrainConfig,
                          epoch, step):
    tensors = {}
    tensors.update(student.state_arrays())
    tensors.update({f"teacher.{k}": v for k, v in teacher.state_arrays().items()})
    tensors.update({f"opt.m.{k}": v for k, v in opt.m.items()})
    tensors.update({f"opt.v.{k}": v for k, v in opt.v.items()})
    meta = {
        "kind": "train",
        "epoch": int(epoch),
        "step": int(step),
        "opt_step": int(opt.step),
        "model_config": student.config.to_dict(),
        "train_config": config.to_dict(),
    }
    save_checkpoint(path, tensors, meta)


def load_model_checkpoint(path):
    """Load a checkpoint into a fresh (model, meta) pair.

    Accepts both plain model checkpoints and full training checkpoints,
    in which case only the student weights are restored.
    """
    tensors, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta.get("model_config", {}))
    model = Model.build(cfg, seed=0)
    model.load_arrays({k: tensors[k] for k in model.params})
    return model, meta


@dataclass
class TrainResult:
    model: Model
    teacher: Model
    losses: list
    checkpoint_path: str | None = None


def train(config: TrainConfig, raw_images, rgb_images=None, out_dir=None,
          steps_per_epoch=None, rand_cfg=None, log_fn=None,
          augment_data=True, pp_rand_pairs=None, model_config=None):
    """Run the full training loop on in-memory image lists.

    ``raw_images`` is a list of normalized (H,W,3) RAW arrays;
    ``rgb_images`` is the unpaired RGB pool for teacher pairs (defaults
    to the randomized renders when omitted). Pseudo pairs from the
    randomized ISP are generated once up front with per-image seeds, so
    a fixed config seed gives an identical loss trajectory; callers may
    instead supply a ready-made ``pp_rand_pairs`` list of (rgb, raw).
    """
    if not raw_images:
        raise ValueError("no RAW images to train on")
    rng = np.random.default_rng(config.seed)
    rand_cfg = rand_cfg or pseudo.RandIspConfig()

    if pp_rand_pairs is not None:
        pp_rand_pool = list(pp_rand_pairs)
    else:
        pp_rand_pool = []
        for i, y in enumerate(raw_images):
            pair_rng = np.random.default_rng((config.seed, i))
            pp_rand_pool.append((pseudo.isp_rand(y, rand_cfg, pair_rng), y))

    if rgb_images is None:
        rgb_images = [x for x, _ in pp_rand_pool]

    model_config = model_config or ModelConfig(select_size=config.input_size)
    model = Model.build(model_config, seed=config.seed)
    teacher = model.detached_copy()
    opt = OptimizerState.for_model(model)
    if steps_per_epoch is None:
        steps_per_epoch = max(1, len(pp_rand_pool) // max(1, config.pp_rand_per_batch))

    losses = []
    log_path = os.path.join(out_dir, "metrics.ndjson") if out_dir else None
    log_file = open(log_path, "w") if log_path else None
    step = 0
    try:
        for epoch in range(config.epochs):
            lr = lr_at_epoch(config, epoch)
            for _ in range(steps_per_epoch):
                idx = rng.integers(0, len(pp_rand_pool), size=config.pp_rand_per_batch)
                batch_rand = []
                for j in idx:
                    x, y = pp_rand_pool[j]
                    if augment_data:
                        x, y = augment([x, y], rng, size=config.input_size)
                    batch_rand.append((x, y))

                batch_mt = []
                if epoch >= config.warmup_epochs and config.pp_mt_per_batch > 0:
                    for _ in range(config.pp_mt_per_batch):
                        x = rgb_images[rng.integers(0, len(rgb_images))]
                        y_ref = raw_images[rng.integers(0, len(raw_images))]
                        if augment_data:
                            x, y_ref = augment([x, y_ref], rng, size=config.input_size)
                        _, ref, y_hat = pseudo.make_pp_mt(
                            x, y_ref, teacher, reference_mode=config.pp_mt_reference
                        )
                        batch_mt.append((x, y_hat, ref))

                with Tape() as tape:
                    loss, parts = total_loss(model, batch_rand, batch_mt, config, epoch)
                    value = loss.item()
                    if not np.isfinite(value):
                        raise FloatingPointError(
                            f"non-finite loss {value} at epoch {epoch} step {step}"
                        )
                    grads = tape.gradients(loss, list(model.params.values()))
                adam_step(model, grads, opt, lr)
                ema_update(teacher, model, config.ema_decay)
                step += 1
                record = {"epoch": epoch, "step": step, "loss_total": value,
                          "lr": lr, **parts}
                losses.append(value)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
                if log_fn:
                    log_fn(record)
            if (out_dir and config.checkpoint_every
                    and (epoch + 1) % config.checkpoint_every == 0):
                save_train_checkpoint(
                    os.path.join(out_dir, f"ckpt_epoch{epoch + 1:04d}.srisp"),
                    model, teacher, opt, config, epoch, step,
                )
    finally:
        if log_file:
            log_file.close()

    ckpt_path = None
    if out_dir:
        ckpt_path = os.path.join(out_dir, "ckpt_final.srisp")
        save_train_checkpoint(ckpt_path, model, teacher, opt, config,
                              config.epochs - 1, step)
    return TrainResult(model=model, teacher=teacher, losses=losses,
                       checkpoint_path=ckpt_path)
