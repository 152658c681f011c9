"""Disentanglement scores (FactorVAE metric, MIG) and reconstruction statistics.

Both scores work on posterior means paired with ground-truth factor labels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import dsprites
from .dsprites import FACTOR_NAMES, DatasetView
from .models import VaeModel

Representation = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------- tables


@dataclass
class RepresentationTable:
    codes: np.ndarray    # (N, code_dim)
    factors: np.ndarray  # (N, 5) int

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        self.factors = np.asarray(self.factors, dtype=np.int64)
        if self.codes.ndim != 2 or self.factors.shape != (len(self.codes), 5):
            raise ValueError("codes must be (N, d) and factors (N, 5) with matching N")
        dsprites.factors_to_indices(self.factors)  # range check

    @property
    def code_dim(self) -> int:
        return self.codes.shape[1]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"code_{i}" for i in range(self.code_dim)] + list(FACTOR_NAMES))
            for code, f in zip(self.codes, self.factors):
                w.writerow([repr(float(v)) for v in code] + [int(v) for v in f])

    @classmethod
    def read_csv(cls, path) -> "RepresentationTable":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        d = sum(1 for h in header if h.startswith("code_"))
        if header[d:] != list(FACTOR_NAMES):
            raise ValueError(f"{path}: expected factor columns {FACTOR_NAMES}")
        arr = np.array(rows, dtype=np.float64).reshape(-1, len(header))
        return cls(arr[:, :d], arr[:, d:].astype(np.int64))

    def lookup(self) -> Representation:
        """Representation function over lattice indices present in the table."""
        idx = dsprites.factors_to_indices(self.factors)
        pos = {int(i): n for n, i in enumerate(idx)}
        codes = self.codes

        def represent(indices):
            return codes[[pos[int(i)] for i in indices]]

        return represent


def encoder_representation(encoder, batch_size: int = 256) -> Representation:
    """Posterior means of ``encoder`` (an Encoder) for rendered lattice indices."""
    def represent(indices):
        out = []
        for s in range(0, len(indices), batch_size):
            imgs = dsprites.render_indices(indices[s:s + batch_size])
            out.append(encoder(imgs)[0].data.astype(np.float64))
        return np.concatenate(out, axis=0)

    return represent


def representation_table(represent: Representation, view: DatasetView) -> RepresentationTable:
    return RepresentationTable(represent(view.indices), view.factors())


# ---------------------------------------------------------------- FVM


@dataclass
class FvmResult:
    accuracy: float
    votes: np.ndarray          # (num_votes, 2): argmin latent, fixed factor
    used_factors: list[int]
    excluded_factors: list[int]
    active_latents: list[int]


def fvm(represent: Representation, view: DatasetView, num_votes: int = 800, samples_per_vote: int = 100,
        seed: int = 0, std_samples: int = 10000) -> FvmResult:
    """FactorVAE metric with a majority-vote classifier.

    Each vote fixes one factor at a random value, draws ``samples_per_vote``
    points from the view sharing that value, and records which latent has the
    smallest variance after dividing by its global std. Accuracy is the share
    of votes whose latent's majority factor equals the vote's factor. Latents
    with zero global std are inactive and never chosen.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    factors = view.factors()
    used = [k for k in range(5) if len(np.unique(factors[:, k])) >= 2]
    excluded = [k for k in range(5) if k not in used]
    if not used:
        raise ValueError("every factor is constant in this view; FVM is undefined")

    sample = view.indices
    if len(sample) > std_samples:
        sample = rng.choice(view.indices, std_samples, replace=False)
    global_std = represent(np.asarray(sample)).std(axis=0)
    active = global_std > 0
    scale = np.where(active, global_std, 1.0)

    by_value = {k: {} for k in used}
    for k in used:
        for v in np.unique(factors[:, k]):
            by_value[k][int(v)] = view.indices[factors[:, k] == v]

    votes = np.empty((num_votes, 2), dtype=np.int64)
    for n in range(num_votes):
        k = used[rng.integers(len(used))]
        values = sorted(by_value[k])
        pool = by_value[k][values[rng.integers(len(values))]]
        picked = pool[rng.integers(len(pool), size=samples_per_vote)]
        var = (represent(picked) / scale).var(axis=0, ddof=1)
        var = np.where(active, var, np.inf)
        votes[n] = (int(np.argmin(var)), k)

    d = len(global_std)
    counts = np.zeros((d, 5), dtype=np.int64)
    np.add.at(counts, (votes[:, 0], votes[:, 1]), 1)
    accuracy = counts.max(axis=1).sum() / num_votes
    return FvmResult(float(accuracy), votes, used, excluded, [int(i) for i in np.flatnonzero(active)])


# ---------------------------------------------------------------- MIG


def discretize(codes: np.ndarray, num_bins: int = 20) -> np.ndarray:
    """Equal-population binning per column.

    Columns with at most ``num_bins`` distinct values keep one bin per value,
    so an exact copy of a discrete factor is not merged across bins.
    """
    codes = np.asarray(codes, dtype=np.float64)
    out = np.empty(codes.shape, dtype=np.int64)
    for j in range(codes.shape[1]):
        col = codes[:, j]
        uniq, inv = np.unique(col, return_inverse=True)
        if len(uniq) <= num_bins:
            out[:, j] = inv
            continue
        edges = np.quantile(col, np.arange(1, num_bins) / num_bins)
        out[:, j] = np.searchsorted(edges, col, side="right")
    return out


def entropy(labels: np.ndarray) -> float:
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in MI (nats) between two discrete label arrays."""
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    if ia.max() == 0 or ib.max() == 0:
        return 0.0
    joint = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(joint, (ia, ib), 1)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return max(0.0, float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum()))


@dataclass
class MigResult:
    score: float
    mi: np.ndarray             # (code_dim, 5)
    gaps: dict[int, float]     # per scored factor
    excluded_factors: list[int]


def mig(table: RepresentationTable, num_bins: int = 20) -> MigResult:
    """Mean over factors of (top MI - runner-up MI) / H(factor)."""
    bins = discretize(table.codes, num_bins)
    d = table.code_dim
    mi = np.zeros((d, 5))
    gaps, excluded = {}, []
    for k in range(5):
        f = table.factors[:, k]
        h = entropy(f)
        if h <= 0:
            excluded.append(k)
            continue
        for j in range(d):
            mi[j, k] = mutual_information(bins[:, j], f)
        top = np.sort(mi[:, k])[::-1]
        second = top[1] if d > 1 else 0.0
        gaps[k] = float((top[0] - second) / h)
    if not gaps:
        raise ValueError("every factor is constant in this table; MIG is undefined")
    return MigResult(float(np.mean(list(gaps.values()))), mi, gaps, excluded)


# ---------------------------------------------------------------- reconstruction


def recon_stats(model: VaeModel, view: DatasetView, batch_size: int = 256) -> dict[str, float]:
    """Per-pixel BCE and L1 of sigmoid(decode(posterior mean)) over the view."""
    if len(view) == 0:
        raise ValueError("dataset view is empty")
    bce = l1 = 0.0
    pixels = 0
    for s in range(0, len(view), batch_size):
        x = view.images(np.arange(s, min(s + batch_size, len(view))))
        mu, _ = model.encode(x)
        logits = model.decode(mu).data.astype(np.float64)
        target = x.astype(np.float64)
        bce += float((np.logaddexp(0, logits) - logits * target).sum())
        prob = 1 / (1 + np.exp(-logits))
        l1 += float(np.abs(prob - target).sum())
        pixels += target.size
    return {"bce_per_pixel": bce / pixels, "l1_per_pixel": l1 / pixels}


def bce_per_pixel(prob: np.ndarray, target: np.ndarray) -> float:
    prob = np.clip(np.asarray(prob, dtype=np.float64), 1e-12, 1 - 1e-12)
    t = np.asarray(target, dtype=np.float64)
    return float(-(t * np.log(prob) + (1 - t) * np.log(1 - prob)).mean())


# ---------------------------------------------------------------- report


@dataclass
class MetricReport:
    fvm_accuracy: float
    mig: float
    mi: np.ndarray
    recon_bce_per_pixel: float = math.nan
    recon_l1_per_pixel: float = math.nan
    info: dict[str, str] = field(default_factory=dict)

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = {
            "fvm_accuracy": repr(self.fvm_accuracy),
            "mig": repr(self.mig),
            "recon_bce_per_pixel": repr(self.recon_bce_per_pixel),
            "recon_l1_per_pixel": repr(self.recon_l1_per_pixel),
            **self.info,
        }
        (out / "report.txt").write_text("".join(f"{k}={v}\n" for k, v in lines.items()))
        with open(out / "mi_matrix.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["latent"] + list(FACTOR_NAMES))
            for j, row in enumerate(self.mi):
                w.writerow([j] + [repr(float(v)) for v in row])


def read_report(path) -> dict[str, str]:
    out = {}
    for line in open(path).read().splitlines():
        k, _, v = line.partition("=")
        out[k] = v
    return out
