"""Alternating D/S optimisation with RMSprop, clipping, early stopping and checkpoints."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .data import SliceDataset, epoch_batches
from .errors import ConfigError, NumericError, ShapeError
from .losses import objective
from .metrics import EvalSet, evaluate
from .models import ArchConfig, ModelPair, clip_discriminator, segment
from .tensor import Tensor

HISTORY_COLUMNS = ("epoch", "mae", "dice_loss", "total", "val_dice")


@dataclass
class TrainConfig:
    lr: float = 2e-5
    batch_size: int = 64
    crop: int = 160
    patience: int = 300
    max_epochs: int = 1000
    seed: int = 0
    rmsprop_rho: float = 0.9
    rmsprop_eps: float = 1e-8
    eval_every: int = 1
    use_dice: bool = True
    target_dice: float | None = None  # stop as soon as validation dice reaches this

    def __post_init__(self):
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigError("must be a finite non-negative number", "lr")
        for key in ("batch_size", "crop", "patience", "max_epochs", "eval_every"):
            if int(getattr(self, key)) < 1:
                raise ConfigError("must be >= 1", key)
        if not 0 <= self.rmsprop_rho < 1:
            raise ConfigError("must be in [0, 1)", "rmsprop_rho")
        if not self.rmsprop_eps > 0:
            raise ConfigError("must be > 0", "rmsprop_eps")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError("unknown training key", sorted(extra)[0])
        return cls(**d)


@dataclass
class TrainState:
    epoch: int = 0
    acc: dict = field(default_factory=dict)  # parameter name -> RMSprop accumulator
    best_dice: float = -math.inf
    best_epoch: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    history: list = field(default_factory=list)
    best_params: dict | None = None

    @classmethod
    def fresh(cls, seed: int) -> "TrainState":
        return cls(rng=np.random.default_rng([seed, 3]))

    def reset_optimizer(self):
        self.acc = {}


@dataclass
class EpochLosses:
    mae: float
    dice: float
    total: float
    batches: int


def rmsprop_step(params, state: TrainState, lr: float, rho: float = 0.9, eps: float = 1e-8):
    """``acc = rho acc + (1 - rho) g^2``; ``p -= lr g / sqrt(acc + eps)`` for trainable, unfrozen params."""
    live = [p for p in params if p.trainable and not p.frozen and p.grad is not None]
    for p in live:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError("non-finite gradient", p.name)
    for p in live:
        g = p.grad
        acc = state.acc.get(p.name)
        if acc is None:
            acc = state.acc[p.name] = np.zeros_like(p.data)
        acc *= rho
        acc += (1 - rho) * g * g
        p.data[...] -= (lr * g / np.sqrt(acc + eps)).astype(p.data.dtype, copy=False)


def train_epoch(pair: ModelPair, data: SliceDataset, cfg: TrainConfig, state: TrainState,
                on_batch=None) -> EpochLosses:
    """One shuffled pass: per batch a D step (then clipping) and an S step."""
    if data.n_channels != pair.arch.in_channels:
        raise ShapeError(f"data has {data.n_channels} channels, model expects {pair.arch.in_channels}")
    sums = np.zeros(3)
    n_seen = n_batches = 0
    seg, disc = pair.seg_params(), pair.disc_params()
    for i, (x, y, _) in enumerate(epoch_batches(data, cfg.batch_size, cfg.crop, state.rng)):
        try:
            xt, yt = Tensor(x), Tensor(y)
            pred = segment(pair, xt, "train")
            objective(pair, xt, yt, "for_D", use_dice=cfg.use_dice, pred=pred)
            rmsprop_step(disc, state, cfg.lr, cfg.rmsprop_rho, cfg.rmsprop_eps)
            clip_discriminator(pair)
            loss = objective(pair, xt, yt, "for_S", use_dice=cfg.use_dice, pred=pred)
            rmsprop_step(seg, state, cfg.lr, cfg.rmsprop_rho, cfg.rmsprop_eps)
        except NumericError as exc:
            raise NumericError(f"batch {i}: {exc.args[0]}", exc.path) from exc
        pair.zero_grad()
        b = len(x)
        sums += b * np.array([loss.mae, loss.dice, loss.total])
        n_seen += b
        n_batches += 1
        if on_batch is not None:
            on_batch(i, pair)
    m = sums / max(n_seen, 1)
    return EpochLosses(float(m[0]), float(m[1]), float(m[2]), n_batches)


# checkpoints ---------------------------------------------------------------------------

def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(st: dict) -> np.random.Generator:
    bg = getattr(np.random, st["bit_generator"])()
    bg.state = st
    return np.random.Generator(bg)


def make_checkpoint(pair: ModelPair, state: TrainState, cfg: TrainConfig, params: dict | None = None,
                    epoch: int | None = None) -> ckpt_io.Checkpoint:
    return ckpt_io.Checkpoint(
        arch=pair.arch.to_dict(),
        params=pair.state_dict() if params is None else params,
        optimizer=dict(sorted(state.acc.items())),
        epoch=state.epoch if epoch is None else epoch,
        seed=cfg.seed,
        train_state={
            "rng": _rng_state(state.rng),
            "best_dice": None if state.best_dice == -math.inf else state.best_dice,
            "best_epoch": state.best_epoch,
            "history": state.history,
            "config": cfg.to_dict(),
        },
    )


def load_pair(path, dtype=np.float32) -> tuple:
    """Rebuild a :class:`ModelPair` from a checkpoint; returns ``(pair, checkpoint)``."""
    ck = ckpt_io.load(path)
    pair = ModelPair(ArchConfig.from_dict(ck.arch), seed=ck.seed, dtype=dtype)
    pair.load_state_dict(ck.params)
    return pair, ck


def restore_state(ck: ckpt_io.Checkpoint) -> TrainState:
    ts = ck.train_state
    return TrainState(
        epoch=ck.epoch,
        acc={k: v.copy() for k, v in ck.optimizer.items()},
        best_dice=-math.inf if ts.get("best_dice") is None else ts["best_dice"],
        best_epoch=ts.get("best_epoch", 0),
        rng=_rng_from_state(ts["rng"]),
        history=list(ts.get("history", [])),
    )


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in history:
        w.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                    for c in HISTORY_COLUMNS])
    return buf.getvalue()


# fit ------------------------------------------------------------------------------------

@dataclass
class FitResult:
    best_dice: float
    best_epoch: int
    epochs_run: int
    history: list
    best_params: dict
    state: TrainState
    stopped_early: bool = False


def fit(pair: ModelPair, train_data: SliceDataset, val_data: EvalSet, cfg: TrainConfig, *,
        out_dir=None, state: TrainState | None = None, resume: bool = False, on_batch=None,
        on_epoch=None) -> FitResult:
    """Train until patience or ``max_epochs``; ``pair`` ends holding the best weights.

    With ``out_dir`` the layout is ``checkpoints/last.ckpt`` (full resumable
    state after every epoch), ``checkpoints/best.ckpt`` and ``history.csv``.
    ``resume`` continues from ``last.ckpt`` when it exists.
    """
    out = Path(out_dir) if out_dir is not None else None
    last_path = best_path = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        last_path, best_path = out / "checkpoints" / "last.ckpt", out / "checkpoints" / "best.ckpt"

    if resume and last_path is not None and last_path.exists():
        ck = ckpt_io.load(last_path)
        if ck.arch != pair.arch.to_dict():
            raise ShapeError("checkpoint architecture differs from the model being trained")
        pair.load_state_dict(ck.params)
        state = restore_state(ck)
        state.best_params = ckpt_io.load(best_path).params if best_path.exists() else pair.state_dict()
    elif state is None:
        state = TrainState.fresh(cfg.seed)
    if state.best_params is None:
        state.best_params = pair.state_dict()

    stopped = False
    start_epoch = state.epoch
    while state.epoch < cfg.max_epochs:
        if state.best_epoch and state.epoch - state.best_epoch >= cfg.patience:
            stopped = True
            break
        if cfg.target_dice is not None and state.best_dice >= cfg.target_dice:
            stopped = True
            break
        losses = train_epoch(pair, train_data, cfg, state, on_batch)
        state.epoch += 1
        val = None
        if state.epoch % cfg.eval_every == 0 or state.epoch == cfg.max_epochs:
            val = evaluate(pair, val_data).mean_dice
            if val > state.best_dice:
                state.best_dice, state.best_epoch = val, state.epoch
                state.best_params = pair.state_dict()
                if best_path is not None:
                    ckpt_io.save(best_path, make_checkpoint(pair, state, cfg))
        state.history.append({"epoch": state.epoch, "mae": losses.mae, "dice_loss": losses.dice,
                              "total": losses.total, "val_dice": val})
        if out is not None:
            ckpt_io.save(last_path, make_checkpoint(pair, state, cfg))
            (out / "history.csv").write_text(history_csv(state.history))
        if on_epoch is not None:
            on_epoch(state)

    pair.load_state_dict(state.best_params)
    return FitResult(best_dice=state.best_dice, best_epoch=state.best_epoch,
                     epochs_run=state.epoch - start_epoch, history=state.history,
                     best_params=state.best_params, state=state, stopped_early=stopped)
