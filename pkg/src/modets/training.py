"""Losses, Adam, the training/evaluation loops, checkpoints and gradient checks."""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .counters import OpCounter
from .data import WindowDataset, destandardize
from .model import ModeModel, ModelConfig, build_variant
from .numerics import (
    NonFiniteError,
    Parameter,
    Tensor,
    as_tensor,
    backward,
    finite_diff_grad,
    no_grad,
    zero_grads,
)

CHECKPOINT_MAGIC = b"MODECKPT"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Training could not continue, e.g. after a non-finite loss."""


# -- losses -----------------------------------------------------------------

def loss_pred(yhat, y) -> Tensor:
    """Mean squared error: mean over horizon and variates, then over the batch."""
    yhat, y = as_tensor(yhat), as_tensor(y)
    if yhat.shape != y.shape:
        raise ValueError(f"prediction {yhat.shape} and target {y.shape} differ")
    return (yhat - y).square().mean()


def loss_reg(states, lam: float, channel_mean: bool = False) -> Tensor:
    """lam * sum_t ||h_t - h_{t-1}||^2 over the time axis, averaged over the batch.

    ``states`` is ``(L, d)`` or ``(B, L, d)``.  With ``channel_mean`` the
    squared norm is divided by ``d``, i.e. averaged over state channels.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    states = as_tensor(states)
    if states.ndim == 2:
        states = states.reshape((1,) + states.shape)
    if states.shape[1] < 2 or lam == 0:
        return Tensor(np.zeros(()))
    diff = states[:, 1:] - states[:, :-1]
    per_row = diff.square().sum(axis=(1, 2))
    if channel_mean:
        per_row = per_row * (1.0 / states.shape[-1])
    return per_row.mean() * float(lam)


def loss_total(pred_loss, reg_loss) -> Tensor:
    return as_tensor(pred_loss) + as_tensor(reg_loss)


def smoothness(states) -> float:
    """Unscaled sum_t ||h_t - h_{t-1}||^2 averaged over rows (a diagnostic)."""
    h = states.data if isinstance(states, Tensor) else np.asarray(states)
    if h.ndim == 2:
        h = h[None]
    if h.shape[1] < 2:
        return 0.0
    return float(np.mean(np.sum(np.diff(h, axis=1) ** 2, axis=(1, 2))))


# -- optimiser ----------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    lambda_reg: float = 0.01
    early_stop_patience: int | None = 5
    seed: int = 0
    clip_norm: float | None = 1.0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        errs = []
        if not self.lr > 0:
            errs.append("lr must be > 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            errs.append("betas must be two values in [0, 1)")
        if not self.eps > 0:
            errs.append("eps must be > 0")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if self.epochs < 0:
            errs.append("epochs must be >= 0")
        if self.lambda_reg < 0:
            errs.append("lambda_reg must be >= 0")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            errs.append("early_stop_patience must be >= 1 or null")
        if self.clip_norm is not None and not self.clip_norm > 0:
            errs.append("clip_norm must be > 0 or null")
        if errs:
            raise ValueError("; ".join(errs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def global_grad_norm(params) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))


def adam_step(params: list[Parameter], opt: OptimState, cfg: TrainConfig) -> float:
    """One bias-corrected Adam update; returns the pre-clipping gradient norm."""
    if len(opt.m) != len(params):
        raise ValueError("optimiser state does not match the parameter list")
    norm = global_grad_norm(params)
    scale = 1.0
    if cfg.clip_norm is not None and norm > cfg.clip_norm:
        scale = cfg.clip_norm / norm
    b1, b2 = cfg.betas
    opt.step += 1
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for p, m, v in zip(params, opt.m, opt.v):
        if p.grad is None or not getattr(p, "trainable", True):
            continue
        g = p.grad * scale if scale != 1.0 else p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return norm


# -- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: dict
    params: dict[str, np.ndarray]
    seed: int = 0
    optim: OptimState | None = None
    best_val: float | None = None
    epoch: int = 0
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_model(cls, model: ModeModel, **kw) -> "Checkpoint":
        return cls(model.cfg.to_dict(), model.state_dict(), seed=model.seed, **kw)

    def build_model(self) -> ModeModel:
        model = build_variant(ModelConfig.from_dict(self.model_config), self.seed)
        model.load_state_dict(self.params)
        return model


def _blob(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Binary container: magic, version, JSON header, then little-endian f64 blobs.

    The header carries the config echo, each blob's name/shape/offset and a
    sha256 over all blob bytes.
    """
    entries, chunks, offset = [], [], 0
    items = list(ckpt.params.items())
    if ckpt.optim is not None:
        items += [(f"optim.m.{i}", a) for i, a in enumerate(ckpt.optim.m)]
        items += [(f"optim.v.{i}", a) for i, a in enumerate(ckpt.optim.v)]
    for name, arr in items:
        raw = _blob(arr)
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": ckpt.version,
        "model_config": ckpt.model_config,
        "seed": ckpt.seed,
        "best_val": ckpt.best_val,
        "epoch": ckpt.epoch,
        "n_params": len(ckpt.params),
        "optim_step": None if ckpt.optim is None else ckpt.optim.step,
        "blobs": entries,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
    buf.write(hbytes)
    buf.write(payload)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    payload = raw[pos + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ValueError(f"{path}: checksum mismatch")
    arrays = {}
    for e in header["blobs"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    params = {k: v for k, v in arrays.items() if not k.startswith("optim.")}
    optim = None
    if header["optim_step"] is not None:
        n = len(params)
        optim = OptimState([arrays[f"optim.m.{i}"] for i in range(n)],
                           [arrays[f"optim.v.{i}"] for i in range(n)], header["optim_step"])
    return Checkpoint(header["model_config"], params, header["seed"], optim, header["best_val"],
                      header["epoch"], version)


# -- evaluation -----------------------------------------------------------------

@dataclass
class EvalMetrics:
    """Errors on the standardised scale (``mse``/``mae``) and the original one."""

    mse: float
    mae: float
    raw_mse: float
    raw_mae: float
    per_horizon: dict = field(default_factory=dict)

    def __iter__(self):
        yield self.mse
        yield self.mae

    def as_dict(self) -> dict:
        return asdict(self)


def error_metrics(pred, target) -> tuple[float, float]:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    if pred.size == 0:
        raise ValueError("cannot score an empty dataset")
    err = pred - target
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))


def evaluate(model, dataset: WindowDataset, horizons=None, batch_size: int = 256) -> EvalMetrics:
    """MSE/MAE over all windows, steps and variates.

    ``model`` is anything with ``predict(inputs, deltas)``.  Raw-scale errors
    compare de-standardised predictions with de-standardised targets.
    ``horizons`` adds prefix-horizon metrics (first h steps) to ``per_horizon``.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = np.asarray(model.predict(dataset.inputs, dataset.deltas, batch_size=batch_size))
    mse, mae = error_metrics(pred, dataset.targets)
    if dataset.stats is not None:
        raw_pred = destandardize(pred, dataset.stats)
        raw_tgt = destandardize(dataset.targets, dataset.stats)
        raw_mse, raw_mae = error_metrics(raw_pred, raw_tgt)
    else:
        raw_mse, raw_mae = mse, mae
    per_h = {}
    for h in horizons or ():
        if not 1 <= h <= dataset.horizon:
            raise ValueError(f"horizon {h} outside 1..{dataset.horizon}")
        m, a = error_metrics(pred[:, :h], dataset.targets[:, :h])
        per_h[str(h)] = {"mse": m, "mae": a}
    return EvalMetrics(mse, mae, raw_mse, raw_mae, per_h)


def held_out_smoothness(model: ModeModel, dataset: WindowDataset, batch_size: int = 256) -> float:
    """Mean over windows of sum_t ||h_t - h_{t-1}||^2 for the final block."""
    total, n = 0.0, 0
    with no_grad():
        for i in range(0, len(dataset), batch_size):
            d = None if dataset.deltas is None else dataset.deltas[i:i + batch_size]
            out = model.forward(dataset.inputs[i:i + batch_size], d)
            if out.states is None:
                return 0.0
            rows = out.states.shape[0]
            total += smoothness(out.states) * rows
            n += rows
    return total / n


# -- training loop ---------------------------------------------------------------

@dataclass
class TrainResult:
    log: list[dict]
    checkpoint: Checkpoint
    model: ModeModel
    stopped_early: bool = False

    def log_lines(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.log)


def _batch_loss(model: ModeModel, x, y, deltas, lam: float, counter: OpCounter):
    out = model.forward(x, deltas, counter=counter)
    lp = loss_pred(out.forecast, y)
    lr = loss_reg(out.states, lam, channel_mean=True) if out.states is not None and lam > 0 \
        else Tensor(np.zeros(()))
    return loss_total(lp, lr), lp


def train(model: ModeModel, train_set: WindowDataset, cfg: TrainConfig,
          val_set: WindowDataset | None = None) -> TrainResult:
    """Shuffled mini-batch Adam with per-epoch validation and early stopping.

    The returned checkpoint (and ``model``, restored in place) holds the
    parameters with the best validation MSE, or the last epoch's when no
    validation set is given.  Each log record has epoch, train_loss,
    val_mse, val_mae, seconds and op_count (state-transition multiply-adds
    spent on training forwards that epoch).
    """
    cfg.validate()
    params = model.parameters()
    opt = OptimState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    log: list[dict] = []
    best_val = math.inf
    best = Checkpoint.from_model(model, best_val=None, epoch=0)
    bad_epochs, stopped, step = 0, False, 0
    n = len(train_set)
    if n == 0 and cfg.epochs > 0:
        raise ValueError("training set is empty")
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        counter = OpCounter()
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x, y = train_set.inputs[idx], train_set.targets[idx]
            deltas = None if train_set.deltas is None else train_set.deltas[idx]
            zero_grads(params)
            try:
                loss, _ = _batch_loss(model, x, y, deltas, cfg.lambda_reg, counter)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NonFiniteError("loss")
                backward(loss)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value at step {step} (epoch {epoch}, batch {b}): {exc}") \
                    from exc
            adam_step(params, opt, cfg)
            step += 1
            total += value * len(idx)
            seen += len(idx)
        rec = {"epoch": epoch, "train_loss": total / max(seen, 1)}
        if val_set is not None and len(val_set):
            m = evaluate(model, val_set)
            rec["val_mse"], rec["val_mae"] = m.mse, m.mae
        else:
            rec["val_mse"], rec["val_mae"] = None, None
        rec["op_count"] = counter.state_transition + counter.dense_transition
        rec["seconds"] = time.perf_counter() - t0
        log.append(rec)
        score = rec["val_mse"] if rec["val_mse"] is not None else rec["train_loss"]
        if score < best_val:
            best_val = score
            bad_epochs = 0
            best = Checkpoint.from_model(model, best_val=score, epoch=epoch)
        else:
            bad_epochs += 1
            if cfg.early_stop_patience is not None and val_set is not None \
                    and bad_epochs >= cfg.early_stop_patience:
                stopped = True
                break
    if cfg.epochs > 0:
        model.load_state_dict(best.params)
    return TrainResult(log, best, model, stopped)


# -- gradient verification ---------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    eps: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if e > self.tolerance]


def relative_error(analytic, numeric, floor: float = 1e-10) -> float:
    """||a - n||_inf / max(||a||_inf, ||n||_inf, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)), floor)
    return float(np.max(np.abs(a - n), initial=0.0)) / scale


def gradient_check_suite(model_cfg: ModelConfig, tolerance: float = 1e-4, *, seed: int = 0,
                         batch: int = 2, lambda_reg: float = 0.1, eps: float = 1e-4,
                         jitter: float = 0.5, corrupt=None, max_params: int = 2000) -> GradCheckReport:
    """Compare analytic and central-difference gradients for every named parameter.

    The loss is the full training objective on random data, evaluated at a
    random parameter point: the initialisation plus N(0, jitter^2) noise.
    At the raw initialisation some generator gradients are ~1e-11, below
    what central differences can resolve against an O(1) loss, so the check
    would measure roundoff instead of the derivative code.  ``corrupt``
    (name, grad) -> grad lets tests tamper with the analytic gradient.
    """
    model = build_variant(model_cfg, seed)
    if model.num_parameters() > max_params:
        raise ValueError(f"{model.num_parameters()} parameters exceed the check limit {max_params}")
    rng = np.random.default_rng(seed + 1)
    if jitter > 0:
        for _, p in model.named_parameters():
            p.data += rng.normal(0.0, jitter, p.shape)
    x = rng.normal(size=(batch, model_cfg.lookback, model_cfg.v))
    y = rng.normal(size=(batch, model_cfg.horizon, model_cfg.v))
    deltas = None
    if model_cfg.delta_source == "timestamps":
        deltas = rng.uniform(0.5, 2.0, size=(batch, model_cfg.lookback))

    def objective():
        loss, _ = _batch_loss(model, x, y, deltas, lambda_reg, OpCounter())
        return loss

    named = model.named_parameters()
    zero_grads([p for _, p in named])
    backward(objective())
    errors = {}
    for name, p in named:
        analytic = p.grad.copy()
        if corrupt is not None:
            analytic = corrupt(name, analytic)
        numeric = finite_diff_grad(objective, p, eps)
        errors[name] = relative_error(analytic, numeric)
    return GradCheckReport(errors, tolerance, eps)

