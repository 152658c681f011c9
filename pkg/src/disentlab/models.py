"""Encoder, decoder, generator and discriminator networks plus checkpoint glue.

All networks work on square single-channel images whose side is ``4 * 2**k``;
each stride-2 conv (or transposed conv) halves (doubles) the side, so a 64px
image uses four of them and the 8px miniatures used in gradient tests use one.
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from . import tensor as T
from .checkpoint import (ArchitectureMismatchError, Checkpoint, UnknownTensorError,
                         tensor_hash)
from .rng import seeded_rng
from .tensor import ShapeError, Tensor

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0
KERNEL, STRIDE, PAD = 4, 2, 1


def _kaiming_uniform(rng, dims, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=dims).astype(np.float32), requires_grad=True)


def _zeros(dims):
    return Tensor(np.zeros(dims, dtype=np.float32), requires_grad=True)


class Dense:
    def __init__(self, rng, n_in, n_out):
        self.weight = _kaiming_uniform(rng, (n_in, n_out), n_in)
        self.bias = _zeros((n_out,))

    def __call__(self, x):
        return x @ self.weight + self.bias

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class Conv:
    def __init__(self, rng, c_in, c_out):
        self.weight = _kaiming_uniform(rng, (c_out, c_in, KERNEL, KERNEL), c_in * KERNEL * KERNEL)
        self.bias = _zeros((c_out,))

    def __call__(self, x):
        out = T.conv2d(x, self.weight, STRIDE, PAD)
        return out + T.reshape(self.bias, (1, -1, 1, 1))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class ConvTranspose:
    def __init__(self, rng, c_in, c_out):
        # each output pixel receives c_in * (KERNEL / STRIDE)**2 taps
        fan_in = c_in * (KERNEL // STRIDE) ** 2
        self.weight = _kaiming_uniform(rng, (c_in, c_out, KERNEL, KERNEL), fan_in)
        self.bias = _zeros((c_out,))

    def __call__(self, x):
        out = T.transpose_conv2d(x, self.weight, STRIDE, PAD)
        return out + T.reshape(self.bias, (1, -1, 1, 1))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


def _n_resample(image_size: int) -> int:
    k = math.log2(image_size / 4)
    if image_size < 8 or k != int(k):
        raise ValueError(f"image_size must be 4 * 2**k with k >= 1, got {image_size}")
    return int(k)


class Network:
    """Named layers; parameters are exposed as ``"<layer>.<weight|bias>"``."""

    def __init__(self):
        self.layers: dict[str, object] = {}

    def parameters(self) -> dict[str, Tensor]:
        return {f"{ln}.{pn}": p for ln, layer in self.layers.items() for pn, p in layer.params().items()}

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state(self, state: Mapping[str, np.ndarray]):
        params = self.parameters()
        for k in state:
            if k not in params:
                raise UnknownTensorError(f"unknown tensor {k!r}")
        for k, p in params.items():
            if k not in state:
                raise ArchitectureMismatchError(f"missing tensor {k!r}")
            if tuple(state[k].shape) != p.dims:
                raise ArchitectureMismatchError(
                    f"tensor {k!r} has dims {list(state[k].shape)}, expected {list(p.dims)}")
            p.data = np.array(state[k], dtype=np.float32)

    def freeze(self):
        for p in self.parameters().values():
            p.requires_grad = False
            p.grad = None

    def zero_head(self):
        head = self.layers[self.head]
        for p in head.params().values():
            p.data = np.zeros_like(p.data)


def _as_input(x, image_size, kind):
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 4 or x.dims[1:] != (1, image_size, image_size):
        raise ShapeError(f"{kind}: expected N x 1 x {image_size} x {image_size} input, got {list(x.dims)}")
    return x


def _as_codes(z, width, kind):
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.data.ndim != 2 or z.dims[1] != width:
        raise ShapeError(f"{kind}: expected N x {width} input, got {list(z.dims)}")
    return z


class Encoder(Network):
    head = "head"

    def __init__(self, latent_dim, image_size=64, channels=32, hidden=256, seed=0):
        super().__init__()
        self.latent_dim, self.image_size, self.channels, self.hidden = latent_dim, image_size, channels, hidden
        rng = seeded_rng([seed, 0])
        c_in = 1
        for i in range(_n_resample(image_size)):
            self.layers[f"conv{i}"] = Conv(rng, c_in, channels)
            c_in = channels
        self.layers["fc"] = Dense(rng, channels * 16, hidden)
        self.layers["head"] = Dense(rng, hidden, 2 * latent_dim)

    def __call__(self, x):
        """Posterior (mu, log_var), each N x latent_dim; log_var clamped to [-10, 10]."""
        h = _as_input(x, self.image_size, "encode")
        n = h.dims[0]
        for name, layer in self.layers.items():
            if name.startswith("conv"):
                h = T.relu(layer(h))
        h = T.relu(self.layers["fc"](T.reshape(h, (n, -1))))
        out = self.layers["head"](h)
        d = self.latent_dim
        mu = T.matmul(out, Tensor(np.eye(2 * d, d, dtype=out.data.dtype)))
        log_var = T.matmul(out, Tensor(np.eye(2 * d, d, k=-d, dtype=out.data.dtype)))
        return mu, T.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX)


class Decoder(Network):
    """Latent code to 1 x S x S logits."""
    head = None

    def __init__(self, latent_dim, image_size=64, channels=32, hidden=256, seed=0):
        super().__init__()
        self.latent_dim, self.image_size, self.channels, self.hidden = latent_dim, image_size, channels, hidden
        rng = seeded_rng([seed, 1])
        self.layers["fc0"] = Dense(rng, latent_dim, hidden)
        self.layers["fc1"] = Dense(rng, hidden, channels * 16)
        n = _n_resample(image_size)
        for i in range(n):
            self.layers[f"deconv{i}"] = ConvTranspose(rng, channels, 1 if i == n - 1 else channels)
        self.head = f"deconv{n - 1}"

    def __call__(self, z):
        z = _as_codes(z, self.latent_dim, "decode")
        n = z.dims[0]
        h = T.relu(self.layers["fc0"](z))
        h = T.relu(self.layers["fc1"](h))
        h = T.reshape(h, (n, self.channels, 4, 4))
        for name, layer in self.layers.items():
            if name.startswith("deconv"):
                h = layer(h)
                if name != self.head:
                    h = T.relu(h)
        return h


class Generator(Network):
    """(noise, code) -> image in (0, 1); input is their concatenation."""
    head = None

    def __init__(self, noise_dim, code_dim, image_size=64, channels=32, base_channels=256, seed=0):
        super().__init__()
        self.noise_dim, self.code_dim = noise_dim, code_dim
        self.image_size, self.channels, self.base_channels = image_size, channels, base_channels
        rng = seeded_rng([seed, 2])
        self.layers["fc"] = Dense(rng, noise_dim + code_dim, base_channels * 16)
        n = _n_resample(image_size)
        c_in = base_channels
        for i in range(n):
            c_out = 1 if i == n - 1 else channels
            self.layers[f"deconv{i}"] = ConvTranspose(rng, c_in, c_out)
            c_in = c_out
        self.head = f"deconv{n - 1}"

    def logits(self, z, c):
        z = _as_codes(z, self.noise_dim, "generate (noise)")
        c = _as_codes(c, self.code_dim, "generate (code)")
        if z.dims[0] != c.dims[0]:
            raise ShapeError(f"generate: noise batch {z.dims[0]} != code batch {c.dims[0]}")
        n = z.dims[0]
        h = T.relu(self.layers["fc"](T.concat([z, c], axis=1)))
        h = T.reshape(h, (n, self.base_channels, 4, 4))
        for name, layer in self.layers.items():
            if name.startswith("deconv"):
                h = layer(h)
                if name != self.head:
                    h = T.relu(h)
        return h

    def __call__(self, z, c):
        return T.sigmoid(self.logits(z, c))


class Discriminator(Network):
    head = "head"

    def __init__(self, image_size=64, channels=32, hidden=256, slope=0.2, seed=0):
        super().__init__()
        self.image_size, self.channels, self.hidden, self.slope = image_size, channels, hidden, slope
        rng = seeded_rng([seed, 3])
        c_in = 1
        for i in range(_n_resample(image_size)):
            self.layers[f"conv{i}"] = Conv(rng, c_in, channels)
            c_in = channels
        self.layers["fc"] = Dense(rng, channels * 16, hidden)
        self.layers["head"] = Dense(rng, hidden, 1)

    def __call__(self, x):
        """One logit per image, shape (N,)."""
        h = _as_input(x, self.image_size, "discriminate")
        n = h.dims[0]
        for name, layer in self.layers.items():
            if name.startswith("conv"):
                h = T.leaky_relu(layer(h), self.slope)
        h = T.leaky_relu(self.layers["fc"](T.reshape(h, (n, -1))), self.slope)
        return T.reshape(self.layers["head"](h), (n,))


# ---------------------------------------------------------------- model bundles


def _prefixed(prefix, d):
    return {f"{prefix}.{k}": v for k, v in d.items()}


def _split(tensors, prefix):
    p = prefix + "."
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


class _Bundle:
    kind = ""
    parts: tuple = ()

    def arch(self) -> dict[str, str]:
        raise NotImplementedError

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name in self.parts:
            out.update(_prefixed(name, getattr(self, name).parameters()))
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def to_checkpoint(self, optimizers: Mapping[str, object] | None = None, step: int = 0,
                      extra: Mapping[str, str] | None = None) -> Checkpoint:
        meta = {"kind": self.kind}
        meta.update({f"arch.{k}": str(v) for k, v in self.arch().items()})
        meta["step"] = str(step)
        tensors = self.state()
        for oname, opt in (optimizers or {}).items():
            meta[f"optim.{oname}.kind"] = opt.kind
            meta[f"optim.{oname}.lr"] = repr(opt.lr)
            meta[f"optim.{oname}.step_count"] = str(opt.step_count)
            tensors.update(_prefixed(f"optim.{oname}", opt.state_tensors()))
        meta.update(extra or {})
        return Checkpoint(meta, tensors)

    def check_arch(self, ckpt: Checkpoint):
        if ckpt.kind != self.kind:
            raise ArchitectureMismatchError(f"checkpoint kind {ckpt.kind!r}, expected {self.kind!r}")
        for k, v in self.arch().items():
            got = ckpt.metadata.get(f"arch.{k}")
            if got != str(v):
                raise ArchitectureMismatchError(f"architecture mismatch on {k}: checkpoint {got}, model {v}")

    def load_checkpoint(self, ckpt: Checkpoint | str, optimizers: Mapping[str, object] | None = None):
        """Load parameters (and optionally optimizer state) after checking the architecture."""
        if not isinstance(ckpt, Checkpoint):
            ckpt = Checkpoint.load(ckpt)
        self.check_arch(ckpt)
        for k in ckpt.tensors:
            head = k.split(".", 1)[0]
            if head not in self.parts and head != "optim":
                raise UnknownTensorError(f"unknown tensor {k!r}")
        for name in self.parts:
            getattr(self, name).load_state(_split(ckpt.tensors, name))
        for oname, opt in (optimizers or {}).items():
            opt.load_state_tensors(_split(ckpt.tensors, f"optim.{oname}"),
                                   int(ckpt.metadata.get(f"optim.{oname}.step_count", 0)))
        return ckpt

    def save_checkpoint(self, path, **kwargs) -> Checkpoint:
        ckpt = self.to_checkpoint(**kwargs)
        ckpt.save(path)
        return ckpt

    def fingerprint(self) -> str:
        return tensor_hash(self.state())


class VaeModel(_Bundle):
    kind = "vae"
    parts = ("encoder", "decoder")

    def __init__(self, latent_dim, image_size=64, channels=32, hidden=256, seed=0):
        self.latent_dim = latent_dim
        self.encoder = Encoder(latent_dim, image_size, channels, hidden, seed)
        self.decoder = Decoder(latent_dim, image_size, channels, hidden, seed)

    @property
    def code_dim(self):
        return self.latent_dim

    def arch(self):
        e = self.encoder
        return {"latent_dim": e.latent_dim, "image_size": e.image_size, "channels": e.channels,
                "hidden": e.hidden}

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | str) -> "VaeModel":
        if not isinstance(ckpt, Checkpoint):
            ckpt = Checkpoint.load(ckpt)
        if ckpt.kind != cls.kind:
            raise ArchitectureMismatchError(f"checkpoint kind {ckpt.kind!r}, expected {cls.kind!r}")
        a = {k: int(ckpt.metadata[f"arch.{k}"]) for k in ("latent_dim", "image_size", "channels", "hidden")}
        model = cls(**a)
        model.load_checkpoint(ckpt)
        return model

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)

    def images(self, codes, noise=None, batch_size=256) -> np.ndarray:
        """Decoded images sigmoid(decode(codes)) as an (N, 1, S, S) array."""
        if noise is not None:
            raise ValueError("decoder traversal takes no noise vector")
        codes = np.asarray(codes, dtype=np.float32)
        out = [T.sigmoid(self.decoder(codes[i:i + batch_size])).data
               for i in range(0, len(codes), batch_size)]
        return np.concatenate(out, axis=0)

    def posterior_means(self, x, batch_size=256) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        return np.concatenate([self.encoder(x[i:i + batch_size])[0].data
                               for i in range(0, len(x), batch_size)], axis=0)


class IdGanModel(_Bundle):
    """Generator and discriminator plus the frozen step-1 encoder."""
    kind = "idgan"
    parts = ("generator", "discriminator", "encoder")

    def __init__(self, encoder: Encoder, noise_dim=16, channels=32, base_channels=256, hidden=256, seed=0):
        self.encoder = encoder
        self.encoder.freeze()
        size = encoder.image_size
        self.noise_dim = noise_dim
        self.generator = Generator(noise_dim, encoder.latent_dim, size, channels, base_channels, seed)
        self.discriminator = Discriminator(size, channels, hidden, seed=seed)

    @property
    def code_dim(self):
        return self.encoder.latent_dim

    def arch(self):
        g, d, e = self.generator, self.discriminator, self.encoder
        return {"noise_dim": g.noise_dim, "code_dim": g.code_dim, "image_size": g.image_size,
                "channels": g.channels, "base_channels": g.base_channels, "hidden": d.hidden,
                "encoder_channels": e.channels, "encoder_hidden": e.hidden}

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | str) -> "IdGanModel":
        if not isinstance(ckpt, Checkpoint):
            ckpt = Checkpoint.load(ckpt)
        if ckpt.kind != cls.kind:
            raise ArchitectureMismatchError(f"checkpoint kind {ckpt.kind!r}, expected {cls.kind!r}")
        a = {k[len("arch."):]: int(v) for k, v in ckpt.metadata.items() if k.startswith("arch.")}
        enc = Encoder(a["code_dim"], a["image_size"], a["encoder_channels"], a["encoder_hidden"])
        model = cls(enc, a["noise_dim"], a["channels"], a["base_channels"], a["hidden"])
        model.load_checkpoint(ckpt)
        model.encoder.freeze()
        return model

    def images(self, codes, noise=None, batch_size=256) -> np.ndarray:
        if noise is None:
            raise ValueError("generator traversal needs a fixed noise vector")
        codes = np.asarray(codes, dtype=np.float32)
        noise = np.broadcast_to(np.asarray(noise, dtype=np.float32).reshape(1, -1),
                                (len(codes), self.noise_dim))
        out = [self.generator(noise[i:i + batch_size], codes[i:i + batch_size]).data
               for i in range(0, len(codes), batch_size)]
        return np.concatenate(out, axis=0)
