"""Step 2: adversarial training with a frozen beta-VAE encoder (ID-GAN).

The generator sees ``concat(noise, code)`` where the code is a reparameterised
sample from the frozen encoder's posterior on a real batch. Its objective is
the non-saturating adversarial loss plus ``lambda`` times a code
reconstruction term: the Gaussian negative log-likelihood of the code under
the frozen encoder's posterior for the generated image.
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
from .checkpoint import Checkpoint, tensor_hash
from .models import Encoder, IdGanModel, VaeModel
from .optim import Adam
from .rng import seeded_rng
from .tensor import NonFiniteError, ShapeError, Tensor
from .vae import TrainingDiverged, reparameterize

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)
COLLAPSE_VARIANCE = 1e-6
COLLAPSE_EPOCHS = 5


@dataclass
class IdGanConfig:
    vae_checkpoint: str = ""
    noise_dim: int = 16
    lam: float = 1.0
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    epochs: int = 100
    batch_size: int = 256
    seed: int = 0
    data: str | None = None  # None: reuse the VAE run's selection and threshold
    position_threshold: int | None = None
    checkpoint_every: int = 25
    channels: int = 32
    base_channels: int = 256
    hidden: int = 256

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


# ---------------------------------------------------------------- losses


def code_prior_sample(encoder: Encoder, x, rng: np.random.Generator) -> Tensor:
    """Codes drawn from the frozen posterior q(c|x) over a real batch (untracked)."""
    mu, log_var = encoder(x)
    eps = rng.standard_normal(mu.dims, dtype=np.float32)
    return reparameterize(mu.detach(), log_var.detach(), eps).detach()


def _same_batch(kind, a, b):
    if a.dims != b.dims:
        raise ShapeError(f"{kind}: dims {list(a.dims)} and {list(b.dims)} differ")


def d_loss(real_logits, fake_logits) -> Tensor:
    """-mean log D(real) - mean log(1 - D(fake)), in logit space."""
    real_logits, fake_logits = T.as_tensor(real_logits), T.as_tensor(fake_logits)
    _same_batch("d_loss", real_logits, fake_logits)
    return T.mean(T.softplus(-real_logits)) + T.mean(T.softplus(fake_logits))


def g_adversarial_loss(fake_logits) -> Tensor:
    """Non-saturating generator loss -mean log D(G(z, c))."""
    return T.mean(T.softplus(-T.as_tensor(fake_logits)))


def g_saturating_loss(fake_logits) -> Tensor:
    """Literal minimax generator term mean log(1 - D(G(z, c)))."""
    return -T.mean(T.softplus(T.as_tensor(fake_logits)))


def gaussian_code_nll(c, mu, log_var) -> Tensor:
    """Batch mean of -log N(c; mu, exp(log_var)) summed over code dims."""
    c, mu, log_var = T.as_tensor(c), T.as_tensor(mu), T.as_tensor(log_var)
    _same_batch("distillation_loss", c, mu)
    _same_batch("distillation_loss", c, log_var)
    diff = c - mu
    per = log_var + diff * diff * T.exp(-log_var) + LOG_2PI
    return T.sum_(per) * (0.5 / c.dims[0])


def distillation_loss(c, fake, encoder: Encoder) -> Tensor:
    mu, log_var = encoder(fake)
    return gaussian_code_nll(c, mu, log_var)


# ---------------------------------------------------------------- training


@dataclass
class GanRecord:
    epoch: int
    d_loss: float
    g_adv: float
    distill: float
    d_real_mean: float
    d_fake_mean: float
    seconds: float


@dataclass
class GanLog:
    records: list[GanRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    HEADER = ("epoch", "d_loss", "g_adv", "distill", "d_real_mean", "d_fake_mean", "seconds")

    def append(self, rec: GanRecord, path=None):
        for name in self.HEADER[1:-1]:
            if not math.isfinite(getattr(rec, name)):
                raise TrainingDiverged(f"epoch {rec.epoch}: non-finite {name}")
        self.records.append(rec)
        if path is not None:
            new = not os.path.exists(path)
            with open(path, "a", newline="") as fh:
                w = csv.writer(fh)
                if new:
                    w.writerow(self.HEADER)
                w.writerow([rec.epoch] + [repr(getattr(rec, k)) for k in self.HEADER[1:-1]]
                           + [f"{rec.seconds:.3f}"])

    @classmethod
    def read_csv(cls, path) -> "GanLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([GanRecord(int(r["epoch"]), *(float(r[k]) for k in cls.HEADER[1:])) for r in rows])


def _load_vae(ref) -> tuple[VaeModel, Checkpoint]:
    ckpt = ref if isinstance(ref, Checkpoint) else Checkpoint.load(ref)
    return VaeModel.from_checkpoint(ckpt), ckpt


def _data_view(config: IdGanConfig, vae_ckpt: Checkpoint) -> dsprites.DatasetView:
    data = config.data if config.data is not None else vae_ckpt.metadata.get("config.data", "full")
    t = config.position_threshold
    if t is None:
        t = int(vae_ckpt.metadata.get("config.position_threshold", dsprites.FACTOR_SIZES[3]))
    view = dsprites.reduced_lattice(data, shuffle_seed=config.seed)
    if t < dsprites.FACTOR_SIZES[3]:
        view = dsprites.filter_by_threshold(t, view)
    return view


def train_idgan(config: IdGanConfig, output_dir=None, vae: Checkpoint | str | None = None,
                view: dsprites.DatasetView | None = None) -> tuple[Checkpoint, GanLog]:
    """Alternate one discriminator and one generator Adam step per batch.

    ``vae`` overrides ``config.vae_checkpoint`` (a path or loaded checkpoint).
    """
    vae_model, vae_ckpt = _load_vae(vae if vae is not None else config.vae_checkpoint)
    view = view if view is not None else _data_view(config, vae_ckpt)
    if len(view) == 0:
        raise ValueError("dataset view is empty")
    view = view.with_seed(config.seed)
    model = IdGanModel(vae_model.encoder, config.noise_dim, config.channels, config.base_channels,
                       config.hidden, seed=config.seed)
    enc = model.encoder
    enc_hash_before = tensor_hash(enc.state())
    g_params = model.generator.parameters()
    d_params = model.discriminator.parameters()
    opt_g = Adam(g_params, lr=config.lr_g)
    opt_d = Adam(d_params, lr=config.lr_d)
    code_rng = seeded_rng([config.seed, 201])
    noise_rng = seeded_rng([config.seed, 202])

    out = Path(output_dir) if output_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "idgan_log.csv"
        if log_path.exists():
            log_path.unlink()
    history = GanLog()
    meta = {f"config.{k}": str(v) for k, v in asdict(config).items()}
    meta["config_fingerprint"] = config.fingerprint()
    meta["vae_config_fingerprint"] = vae_ckpt.metadata.get("config_fingerprint", "")
    meta["encoder_hash"] = enc_hash_before

    def snapshot(epoch):
        return model.to_checkpoint({"generator": opt_g, "discriminator": opt_d}, step=opt_g.step_count,
                                   extra={**meta, "epoch": str(epoch)})

    low_variance_epochs = 0
    for epoch in range(config.epochs):
        start = time.perf_counter()
        sums = np.zeros(5)
        count = 0
        variances = []
        for b, (x, _) in enumerate(dsprites.batches(view, config.batch_size, epoch)):
            n = len(x)
            try:
                c = code_prior_sample(enc, x, code_rng)
                z = Tensor(noise_rng.standard_normal((n, config.noise_dim), dtype=np.float32))
                fake = model.generator(z, c)

                real_logits = model.discriminator(x)
                fake_logits = model.discriminator(fake.detach())
                ld = d_loss(real_logits, fake_logits)
                opt_d.zero_grad()
                T.backward(ld)
                opt_d.step()

                adv = g_adversarial_loss(model.discriminator(fake))
                distill = distillation_loss(c, fake, enc)
                total = adv + distill * config.lam if config.lam else adv
                opt_g.zero_grad()
                T.backward(total)
                opt_g.step()
                for p in d_params.values():
                    p.grad = None
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite value at epoch {epoch} batch {b}: {exc}") from exc
            d_real = float(np.mean(1 / (1 + np.exp(-real_logits.data.astype(np.float64)))))
            d_fake = float(np.mean(1 / (1 + np.exp(-fake_logits.data.astype(np.float64)))))
            sums += n * np.array([ld.item(), adv.item(), distill.item(), d_real, d_fake])
            count += n
            variances.append(float(fake.data.var(axis=0).mean()))
        rec = GanRecord(epoch, *(float(v) for v in sums / count), time.perf_counter() - start)
        history.append(rec, log_path)
        log.info("epoch %d d %.4f g %.4f distill %.4f D(real) %.3f D(fake) %.3f",
                 epoch, rec.d_loss, rec.g_adv, rec.distill, rec.d_real_mean, rec.d_fake_mean)

        low_variance_epochs = low_variance_epochs + 1 if max(variances) < COLLAPSE_VARIANCE else 0
        if low_variance_epochs == COLLAPSE_EPOCHS:
            msg = f"epoch {epoch}: possible mode collapse (fake pixel variance < {COLLAPSE_VARIANCE})"
            history.warnings.append(msg)
            log.warning(msg)

        if out is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            snapshot(epoch + 1).save(out / f"idgan_epoch{epoch + 1:04d}.ckpt")

    if tensor_hash(enc.state()) != enc_hash_before:
        raise RuntimeError("frozen encoder parameters changed during adversarial training")
    ckpt = snapshot(config.epochs)
    if out is not None:
        ckpt.save(out / "idgan_final.ckpt")
    return ckpt, history

