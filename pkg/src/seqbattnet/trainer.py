"""Optimization loop, checkpoints, evaluation and run ensembles."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data, objective
from .decoder import BatteryConfig, PredictionResult
from .diffcore import nn
from .diffcore import tensor as T
from .encoder import HrmConfig
from .model import SeqBattNet
from .objective import LossConfig

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, epoch, batch, value):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 128
    lr_init: float = 2e-3
    lr_factor: float = 0.8
    lr_patience: int = 5
    lr_min: float = 1e-4
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    num_runs: int = 5
    seed: int = 0
    grad_clip: float | None = 5.0   # global-norm clip; None disables
    lr_counter_reset: bool = False  # True: wait a fresh patience window after each cut

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr_init:
            raise ValueError("need 0 < lr_min <= lr_init")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.lr_patience < 1 or self.epochs < 1 or self.batch_size < 1 or self.num_runs < 1:
            raise ValueError("epochs, batch_size, lr_patience and num_runs must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"unknown TrainConfig field(s): {bad}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer and scheduler


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params, grads, state, cfg, lr):
    """One AdamW update, in place on ``params`` (name -> Tensor).

    Weight decay is decoupled: ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``.
    """
    b1, b2, eps, wd = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise UsageError(f"{name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps) + wd * p.data
        p.data = p.data - lr * update
    return params, state


@dataclass
class PlateauState:
    lr: float
    best: float = math.inf
    bad_epochs: int = 0
    reductions: int = 0


def lr_plateau_step(state, val_loss, cfg):
    """Reduce the learning rate after ``lr_patience`` epochs without a strictly lower loss.

    By default the plateau counter keeps running after a cut, so every further
    non-improving epoch cuts again until the loss improves or ``lr_min`` is hit.
    ``cfg.lr_counter_reset`` restores the reset-after-cut behaviour.
    """
    if val_loss < state.best:
        state.best = val_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= cfg.lr_patience:
            new = max(state.lr * cfg.lr_factor, cfg.lr_min)
            if new < state.lr:
                state.reductions += 1
            state.lr = new
            if cfg.lr_counter_reset:
                state.bad_epochs = 0
    return state.lr


def clip_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    arrays: dict
    hrm: HrmConfig
    battery: BatteryConfig
    loss: LossConfig
    train: TrainConfig
    seed: int
    epoch: int
    best_val: float
    stack_sigmoid: bool = False

    def model(self):
        m = SeqBattNet(self.hrm, self.battery, seed=self.seed, stack_sigmoid=self.stack_sigmoid)
        m.load_arrays(self.arrays)
        return m

    def to_json(self):
        doc = {
            "format": "seqbattnet-checkpoint/1",
            "seed": self.seed,
            "epoch": self.epoch,
            "best_val": self.best_val,
            "stack_sigmoid": self.stack_sigmoid,
            "hrm": self.hrm.to_dict(),
            "battery": self.battery.to_dict(),
            "loss": self.loss.to_dict(),
            "train": self.train.to_dict(),
            # float repr is the shortest string that parses back to the same double
            "params": {k: {"shape": list(a.shape), "values": a.reshape(-1).tolist()}
                       for k, a in sorted(self.arrays.items())},
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_dict(cls, d):
        arrays = {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"])
                  for k, v in d["params"].items()}
        return cls(
            arrays=arrays,
            hrm=HrmConfig.from_dict(d["hrm"]),
            battery=BatteryConfig.from_dict(d["battery"]),
            loss=LossConfig.from_dict(d["loss"]),
            train=TrainConfig.from_dict(d["train"]),
            seed=d["seed"],
            epoch=d["epoch"],
            best_val=d["best_val"],
            stack_sigmoid=d.get("stack_sigmoid", False),
        )

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def write_history(history, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "val_loss", "lr"))
        for h in history:
            w.writerow((h["epoch"], repr(h["train_loss"]), repr(h["val_loss"]), repr(h["lr"])))


# ---------------------------------------------------------------------------
# training


def dataset_loss(model, cycles, loss_cfg, batch_size=256):
    """Weighted loss over a whole set, normalized jointly across all its cycles."""
    n = model.battery.n
    num = den = 0.0
    with T.no_grad():
        for batch in data.make_batch(cycles, n, batch_size):
            ro, _ = model.forward(batch)
            W, extra = objective.loss_weights(batch.masks, loss_cfg, n)
            d = objective.weighted_loss(ro.voltage, batch.voltages, batch.masks, loss_cfg, n).item()
            w = float((W * batch.masks).sum() + extra)
            num += d * w
            den += w
    return num / den


def train(train_cycles, val_cycles, battery, hrm=HrmConfig(), loss_cfg=LossConfig(),
          train_cfg=TrainConfig(), seed=None, stack_sigmoid=False, on_epoch=None):
    """Fit one model; returns ``(best-validation Checkpoint, history)``."""
    if not train_cycles or not val_cycles:
        raise ValueError("training and validation sets must be non-empty")
    seed = train_cfg.seed if seed is None else seed
    model = SeqBattNet(hrm, battery, seed=seed, stack_sigmoid=stack_sigmoid)
    params = model.named_parameters()
    names = {id(p): k for k, p in params.items()}
    rng = nn.make_rng([seed, 1])
    opt = OptimizerState()
    sched = PlateauState(lr=train_cfg.lr_init)
    n = battery.n
    history = []
    best = (math.inf, 0, model.state_arrays())

    for epoch in range(1, train_cfg.epochs + 1):
        lr = sched.lr
        order = rng.permutation(len(train_cycles))
        batches = data.make_batch([train_cycles[i] for i in order], n, train_cfg.batch_size)
        tot = cnt = 0.0
        for bi, batch in enumerate(batches):
            with T.Tape() as tape:
                ro, _ = model.forward(batch, training=True, rng=rng)
                loss = objective.weighted_loss(ro.voltage, batch.voltages, batch.masks, loss_cfg, n)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, bi, value)
            gmap = T.backward(tape, loss)
            grads = {names[id(p)]: g for p, g in gmap.items() if id(p) in names}
            grads, _ = clip_global_norm(grads, train_cfg.grad_clip)
            adamw_step(params, grads, opt, train_cfg, lr)
            tot += value * len(batch)
            cnt += len(batch)
        val = dataset_loss(model, val_cycles, loss_cfg)
        if not math.isfinite(val):
            raise DivergenceError(epoch, "validation", val)
        history.append({"epoch": epoch, "train_loss": tot / cnt, "val_loss": val, "lr": lr})
        if val < best[0]:
            best = (val, epoch, model.state_arrays())
        lr_plateau_step(sched, val, train_cfg)
        if on_epoch is not None:
            on_epoch(history[-1])

    ckpt = Checkpoint(arrays=best[2], hrm=hrm, battery=battery, loss=loss_cfg, train=train_cfg,
                      seed=seed, epoch=best[1], best_val=best[0], stack_sigmoid=stack_sigmoid)
    return ckpt, history


def train_runs(train_cycles, val_cycles, battery, hrm=HrmConfig(), loss_cfg=LossConfig(),
               train_cfg=TrainConfig(), stack_sigmoid=False):
    """``num_runs`` independent trainings seeded ``seed, seed + 1, ...``."""
    return [train(train_cycles, val_cycles, battery, hrm, loss_cfg, train_cfg,
                  seed=train_cfg.seed + r, stack_sigmoid=stack_sigmoid)
            for r in range(train_cfg.num_runs)]


# ---------------------------------------------------------------------------
# evaluation


def _as_models(models):
    if isinstance(models, (SeqBattNet, Checkpoint)):
        models = [models]
    out = [m.model() if isinstance(m, Checkpoint) else m for m in models]
    if not out:
        raise UsageError("need at least one model")
    key = out[0].config_key()
    if any(m.config_key() != key for m in out[1:]):
        raise UsageError("ensemble members have different configurations")
    return out


def predict_batch(models, cycles, batch_size=256):
    """Mean predicted voltages (train_full) per cycle, as a list of arrays."""
    models = _as_models(models)
    n = models[0].battery.n
    preds = {}
    with T.no_grad():
        for batch in data.make_batch(cycles, n, batch_size):
            acc = None
            for m in models:
                ro, _ = m.forward(batch)
                acc = ro.voltage.data.copy() if acc is None else acc + ro.voltage.data
            acc /= len(models)
            for b, ci in enumerate(batch.cycle_indices):
                preds.setdefault(ci, []).append(acc[b, :batch.lengths[b]])
    # cycle indices may repeat across cells; hand them back in input order
    return [preds[c.cycle_index].pop(0) for c in cycles]


@dataclass
class EvalReport:
    rows: list            # (cycle_index, rmse, mae, mape)
    rmse: float
    mae: float
    mape: float
    seconds: float = 0.0

    def to_dict(self):
        return {"rmse": self.rmse, "mae": self.mae, "mape": self.mape,
                "cycles": len(self.rows), "seconds": self.seconds}


def evaluate(models, test_cycles):
    """Per-cycle metrics on the predicted region, and their unweighted means.

    Several models are evaluated on their averaged prediction.
    """
    if not test_cycles:
        raise ValueError("no test cycles")
    t0 = time.perf_counter()
    n = _as_models(models)[0].battery.n
    preds = predict_batch(models, test_cycles)
    rows = []
    for c, p in zip(test_cycles, preds):
        rows.append((c.cycle_index,) + objective.metrics(p, c.voltage[n:]))
    arr = np.array([r[1:] for r in rows])
    return EvalReport(rows, float(arr[:, 0].mean()), float(arr[:, 1].mean()), float(arr[:, 2].mean()),
                      seconds=time.perf_counter() - t0)


def ensemble_predict(models, cycle, mode="train_full", currents=None):
    """Average the runs' voltage trajectories; stopping is decided on the average."""
    models = _as_models(models)
    runs = [m.predict(cycle, "train_full", currents) for m in models]
    n = runs[0].n_prefix
    volt = np.mean([r.voltage for r in runs], axis=0)
    soc = np.mean([r.soc_traj for r in runs], axis=0)
    vrc = np.mean([r.v_rc_traj for r in runs], axis=0)
    below = np.flatnonzero(volt[n:] < models[0].battery.V_EOD)
    stop = int(below[0]) + 1 if below.size else len(volt) - n
    if mode == "infer_stop":
        volt, soc, vrc = volt[:n + stop], soc[:stop], vrc[:stop]
    elif mode != "train_full":
        raise ValueError(f"unknown mode {mode!r}")
    return PredictionResult(voltage=volt, mask=np.ones_like(volt), soc_traj=soc,
                            v_rc_traj=vrc, stop_index=stop, n_prefix=n)
