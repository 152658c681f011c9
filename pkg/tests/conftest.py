"""Shared fixtures: the desk-scale training runs, trained once per session."""

import pytest

from disentlab import idgan, vae

REDUCED_256 = "shape=0; scale=3; orientation=0; pos_x=0:32:2; pos_y=0:32:2"

VAE_RUN = dict(latent_dim=3, beta=0.5, learning_rate=1e-4, epochs=200, batch_size=64, seed=0, data=REDUCED_256,
               checkpoint_every=50)
IDGAN_RUN = dict(lam=1.0, epochs=100, batch_size=64, seed=0, checkpoint_every=50)

_acceptance_lines: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str):
    _acceptance_lines.append(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


def _train_vae(root, name, **overrides):
    cfg = vae.VaeConfig(**{**VAE_RUN, **overrides})
    out = root / name
    ckpt, log = vae.train_vae(cfg, out)
    return {"config": cfg, "dir": out, "checkpoint": ckpt, "log": log}


def _train_idgan(root, name, vae_dir):
    # The config stores the checkpoint path relative to the chain root, so a
    # rerun in a sibling directory has a byte-identical config.
    rel = vae_dir.relative_to(root) / "vae_final.ckpt"
    cfg = idgan.IdGanConfig(vae_checkpoint=rel.as_posix(), **IDGAN_RUN)
    out = root / name
    ckpt, log = idgan.train_idgan(cfg, out, vae=str(root / rel))
    return {"config": cfg, "dir": out, "checkpoint": ckpt, "log": log}


@pytest.fixture(scope="session")
def runs_root(tmp_path_factory):
    return tmp_path_factory.mktemp("runs")


@pytest.fixture(scope="session")
def vae_run(runs_root):
    return _train_vae(runs_root, "vae_beta0.5")


@pytest.fixture(scope="session")
def vae_run_beta100(runs_root):
    return _train_vae(runs_root, "vae_beta100", beta=100.0)


@pytest.fixture(scope="session")
def idgan_run(runs_root, vae_run):
    return _train_idgan(runs_root, "idgan", vae_run["dir"])


@pytest.fixture(scope="session")
def rerun(runs_root, vae_run, idgan_run):
    """Second, independent pass of the same two runs."""
    root = runs_root / "rerun"
    v = _train_vae(root, "vae_beta0.5")
    g = _train_idgan(root, "idgan", v["dir"])
    return v, g
