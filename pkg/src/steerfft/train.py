"""Training and evaluation loops."""

import csv
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .conv2d import fourier_moments


class DivergenceError(RuntimeError):
    def __init__(self, epoch, step, loss):
        super().__init__(f"loss became {loss} at epoch {epoch}, step {step}")
        self.epoch, self.step, self.loss = epoch, step, loss


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 0.015
    decay: float = 0.8
    decay_after: int = 16
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    augment: bool = False
    exact_bn: bool = True
    eval_batch: int = 250

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or not 0 < self.decay <= 1:
            raise ValueError("epochs, batch size, lr and decay must be positive")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self):
        return asdict(self)


def desk_train_config(**kw):
    base = dict(epochs=10)
    base.update(kw)
    return TrainConfig(**base)


def lr_at(cfg, epoch):
    """Learning rate for a 1-based epoch: constant, then geometric decay."""
    if epoch <= cfg.decay_after:
        return cfg.lr
    return cfg.lr * cfg.decay ** (epoch - cfg.decay_after)


@dataclass
class TrainResult:
    metrics: list = field(default_factory=list)
    final_test_error: float = None


def evaluate(model, data, batch_size=250):
    """Classification error in eval mode (running batch-norm statistics)."""
    if len(data) == 0:
        return float("nan")
    pred = model.predict(data.images, batch_size)
    return float(np.mean(pred != data.labels))


def train(model, train_data, test_data, cfg, metrics_path=None, log=None):
    rng = np.random.default_rng(cfg.seed)
    opt = ad.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    result = TrainResult()
    n = len(train_data)
    writer = None
    fh = None
    if metrics_path:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "test_error"])
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.time()
            opt.lr = lr_at(cfg, epoch)
            order = rng.permutation(n)
            losses = []
            for step, lo in enumerate(range(0, n, cfg.batch_size)):
                idx = order[lo : lo + cfg.batch_size]
                plan = model.plan.rotated(rng.uniform(0, 2 * np.pi)) if cfg.augment else None
                tape = ad.Tape()
                x = model.input_features(train_data.images[idx])
                logits = model.forward(tape, x, plan=plan, training=True, rng=rng)
                loss = ad.log_softmax_nll(logits, train_data.labels[idx])
                value = float(loss.value)
                if not np.isfinite(value):
                    raise DivergenceError(epoch, step, value)
                tape.backward(loss)
                opt.step()
                opt.zero_grad()
                losses.append(value)
            test_error = evaluate(model, test_data, cfg.eval_batch) if test_data is not None else float("nan")
            row = dict(epoch=epoch, lr=opt.lr, train_loss=float(np.mean(losses)), test_error=test_error)
            result.metrics.append(row)
            if writer:
                writer.writerow([epoch, f"{opt.lr:.6g}", f"{row['train_loss']:.6f}", f"{test_error:.4f}"])
                fh.flush()
            if log:
                log(f"epoch {epoch:3d}  lr {opt.lr:.5f}  loss {row['train_loss']:.4f}  test_err {test_error:.4f}  ({time.time() - t0:.0f}s)")
        if cfg.exact_bn:
            exact_bn_pass(model, train_data, cfg.eval_batch)
        if test_data is not None:
            result.final_test_error = evaluate(model, test_data, cfg.eval_batch)
            if log:
                log(f"final test error {result.final_test_error:.4f}")
    finally:
        if fh:
            fh.close()
    return result


def exact_bn_pass(model, data, batch_size=250):
    """Replace running BN statistics by exact full-set values, layer by layer.

    Each layer's statistics are computed with all earlier layers already using
    their exact values. Trainable weights are not touched.
    """
    for j, bn in enumerate(model.batch_norms()):
        s0 = np.zeros(bn.num_channels)
        sp = np.zeros(bn.num_channels)
        count = 0
        for lo in range(0, len(data), batch_size):
            tape = ad.Tape(retain=False)
            x = model.forward(tape, model.input_features(data.images[lo : lo + batch_size]), stop_at_bn=j).value
            x = x.astype(np.complex128)
            m = int(np.prod(x.shape[:-2]))
            mu, power = fourier_moments(x)
            s0 += mu * m
            sp += power * m
            count += m
        mean = s0 / count
        bn.running_mean = mean
        bn.running_var = np.maximum(sp / count - mean**2, 0.0)
    return model
