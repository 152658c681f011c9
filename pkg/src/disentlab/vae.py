"""Step 1: beta-VAE training.

The loss minimised is ``recon + beta * kl`` with a Bernoulli decoder
(pixel-summed BCE on logits) and the closed-form KL to a standard normal
prior; both terms are summed over pixels/latents and averaged over the batch.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dsprites
from . import tensor as T
from .checkpoint import Checkpoint
from .models import VaeModel
from .optim import Adam
from .rng import seeded_rng
from .tensor import NonFiniteError, ShapeError, Tensor

log = logging.getLogger(__name__)

SWEEP = {
    "latent_dim": (3, 5, 10),
    "beta": (0.5, 5.0, 100.0),
    "learning_rate": (1e-4, 1e-5),
    "position_threshold": (5, 16, 32),
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class VaeConfig:
    latent_dim: int = 3
    beta: float = 0.5
    learning_rate: float = 1e-4
    position_threshold: int = 32
    epochs: int = 100
    batch_size: int = 256
    seed: int = 0
    data: str = "full"
    checkpoint_every: int = 25
    image_size: int = 64
    channels: int = 32
    hidden: int = 256

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def view(self) -> dsprites.DatasetView:
        view = dsprites.reduced_lattice(self.data, shuffle_seed=self.seed)
        if self.position_threshold < dsprites.FACTOR_SIZES[3]:
            view = dsprites.filter_by_threshold(self.position_threshold, view)
        return view


def sweep_configs(**overrides) -> list[VaeConfig]:
    """All 54 combinations of the reference sweep grid."""
    out = []
    for z in SWEEP["latent_dim"]:
        for b in SWEEP["beta"]:
            for lr in SWEEP["learning_rate"]:
                for t in SWEEP["position_threshold"]:
                    out.append(VaeConfig(latent_dim=z, beta=b, learning_rate=lr, position_threshold=t,
                                         **overrides))
    return out


# ---------------------------------------------------------------- loss terms


def _aligned(kind, a, b):
    if a.dims != b.dims:
        raise ShapeError(f"{kind}: dims {list(a.dims)} and {list(b.dims)} differ")


def reparameterize(mu, log_var, eps) -> Tensor:
    mu, log_var, eps = T.as_tensor(mu), T.as_tensor(log_var), T.as_tensor(eps)
    _aligned("reparameterize", mu, log_var)
    _aligned("reparameterize", mu, eps)
    return mu + T.exp(log_var * 0.5) * eps


def kl_standard_normal(mu, log_var) -> Tensor:
    """KL(N(mu, exp(log_var)) || N(0, I)), summed over dims, averaged over the batch."""
    mu, log_var = T.as_tensor(mu), T.as_tensor(log_var)
    _aligned("kl_standard_normal", mu, log_var)
    if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(log_var.data))):
        raise NonFiniteError("kl_standard_normal: non-finite input")
    n = mu.dims[0] if mu.data.ndim > 1 else 1
    per = T.exp(log_var) + mu * mu - log_var - 1.0
    return T.sum_(per) * (0.5 / n)


def bernoulli_recon_loss(logits, target) -> Tensor:
    """Pixel-summed BCE computed from logits as softplus(l) - t * l; batch mean."""
    logits, target = T.as_tensor(logits), T.as_tensor(target)
    _aligned("bernoulli_recon_loss", logits, target)
    if np.any(target.data < 0) or np.any(target.data > 1):
        raise ValueError("bernoulli_recon_loss: target pixels must lie in [0, 1]")
    n = logits.dims[0]
    return T.sum_(T.softplus(logits) - logits * target) * (1.0 / n)


@dataclass
class LossTerms:
    total: Tensor
    recon: Tensor
    kl: Tensor


def beta_vae_loss(model: VaeModel, x, beta: float, eps) -> LossTerms:
    mu, log_var = model.encode(x)
    z = reparameterize(mu, log_var, eps)
    recon = bernoulli_recon_loss(model.decode(z), x)
    kl = kl_standard_normal(mu, log_var)
    total = recon + kl * float(beta)
    return LossTerms(total, recon, kl)


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    recon: float
    kl: float
    total: float
    seconds: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)

    HEADER = ("epoch", "recon", "kl", "total", "seconds")

    def append(self, rec: EpochRecord, path=None):
        for name in ("recon", "kl", "total"):
            if not math.isfinite(getattr(rec, name)):
                raise TrainingDiverged(f"epoch {rec.epoch}: non-finite {name}")
        self.records.append(rec)
        if path is not None:
            new = not os.path.exists(path)
            with open(path, "a", newline="") as fh:
                w = csv.writer(fh)
                if new:
                    w.writerow(self.HEADER)
                w.writerow([rec.epoch, repr(rec.recon), repr(rec.kl), repr(rec.total), f"{rec.seconds:.3f}"])

    @classmethod
    def read_csv(cls, path) -> "TrainingLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), float(r["recon"]), float(r["kl"]), float(r["total"]),
                                float(r["seconds"])) for r in rows])


def _config_meta(cfg) -> dict[str, str]:
    meta = {f"config.{k}": str(v) for k, v in asdict(cfg).items()}
    meta["config_fingerprint"] = cfg.fingerprint()
    return meta


def train_vae(config: VaeConfig, output_dir=None, view: dsprites.DatasetView | None = None,
              model: VaeModel | None = None) -> tuple[Checkpoint, TrainingLog]:
    """Train a beta-VAE; deterministic for a given config.

    With ``output_dir`` the run writes ``vae_log.csv``, ``vae_epochNNNN.ckpt``
    every ``checkpoint_every`` epochs and ``vae_final.ckpt``.
    """
    view = view if view is not None else config.view()
    if len(view) == 0:
        raise ValueError("dataset view is empty")
    view = view.with_seed(config.seed)
    if model is None:
        model = VaeModel(config.latent_dim, config.image_size, config.channels, config.hidden, seed=config.seed)
    params = model.parameters()
    opt = Adam(params, lr=config.learning_rate)
    eps_rng = seeded_rng([config.seed, 101])
    out = Path(output_dir) if output_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "vae_log.csv"
        if log_path.exists():
            log_path.unlink()
    history = TrainingLog()
    meta = _config_meta(config)

    def snapshot(epoch):
        return model.to_checkpoint({"model": opt}, step=opt.step_count,
                                   extra={**meta, "epoch": str(epoch)})

    for epoch in range(config.epochs):
        start = time.perf_counter()
        sums = np.zeros(3)
        count = 0
        for b, (x, _) in enumerate(dsprites.batches(view, config.batch_size, epoch)):
            eps = Tensor(eps_rng.standard_normal((len(x), config.latent_dim), dtype=np.float32))
            try:
                terms = beta_vae_loss(model, x, config.beta, eps)
                opt.zero_grad()
                T.backward(terms.total)
                opt.step()
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite value at epoch {epoch} batch {b}: {exc}") from exc
            sums += len(x) * np.array([terms.recon.item(), terms.kl.item(), terms.total.item()])
            count += len(x)
        recon, kl, total = sums / count
        history.append(EpochRecord(epoch, float(recon), float(kl), float(total),
                                   time.perf_counter() - start), log_path)
        log.info("epoch %d recon %.3f kl %.3f total %.3f", epoch, recon, kl, total)
        if out is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            snapshot(epoch + 1).save(out / f"vae_epoch{epoch + 1:04d}.ckpt")

    ckpt = snapshot(config.epochs)
    if out is not None:
        ckpt.save(out / "vae_final.ckpt")
    return ckpt, history
