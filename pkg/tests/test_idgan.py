import math

import numpy as np
import pytest

from disentlab import idgan as G
from disentlab import tensor as T
from disentlab.checkpoint import Checkpoint, tensor_hash
from disentlab.gradcheck import numeric_gradient
from disentlab.models import Encoder, IdGanModel, VaeModel
from disentlab.rng import seeded_rng
from disentlab.tensor import ShapeError

LN2 = math.log(2)
TINY = "shape=0:3; scale=2; orientation=0; pos_x=4,20; pos_y=10"


def test_d_loss_examples():
    z = np.zeros(5)
    assert abs(G.d_loss(z, z).item() - 2 * LN2) < 1e-6
    assert G.d_loss(np.full(5, 40.0), np.full(5, -40.0)).item() < 1e-12
    a, b = (G.d_loss(np.full(4, -m), np.full(4, -40.0)).item() for m in (10.0, 20.0))
    assert abs((b - a) - 10.0) < 1e-3  # softplus asymptote: slope 1 in the logit magnitude


def test_g_adversarial_examples():
    assert abs(G.g_adversarial_loss(np.zeros(3)).item() - LN2) < 1e-6
    assert G.g_adversarial_loss(np.full(3, 40.0)).item() < 1e-12


def test_untrained_point_sums_to_three_ln2():
    z = np.zeros(8)
    assert abs(G.d_loss(z, z).item() + G.g_adversarial_loss(z).item() - 3 * LN2) < 1e-5


def test_d_loss_dims_error():
    with pytest.raises(ShapeError, match="d_loss"):
        G.d_loss(np.zeros(4), np.zeros(5))


def test_distillation_closed_forms():
    c = np.random.default_rng(0).standard_normal((6, 3))
    zeros = np.zeros((6, 3))
    assert abs(G.gaussian_code_nll(c, c, zeros).item() - 1.5 * math.log(2 * math.pi)) < 1e-5
    assert abs(G.gaussian_code_nll(c, c + 1, zeros).item() - (1.5 * math.log(2 * math.pi) + 1.5)) < 1e-5
    assert abs(1.5 * math.log(2 * math.pi) - 2.7568) < 1e-4


def test_distillation_invariant_to_batch_order():
    rng = np.random.default_rng(1)
    c, mu, lv = rng.standard_normal((3, 7, 3))
    perm = rng.permutation(7)
    a = G.gaussian_code_nll(c, mu, lv).item()
    b = G.gaussian_code_nll(c[perm], mu[perm], lv[perm]).item()
    assert abs(a - b) < 1e-5


def test_distillation_dims_error():
    with pytest.raises(ShapeError):
        G.gaussian_code_nll(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 2)))


MINI = dict(image_size=8, channels=2)


def _mini():
    enc = Encoder(2, hidden=4, seed=1, **MINI)
    model = IdGanModel(enc, noise_dim=3, channels=2, base_channels=4, hidden=4, seed=2)
    return model


def test_code_prior_sample_zero_head_is_standard_normal():
    enc = Encoder(3, seed=0)
    enc.zero_head()
    x = np.zeros((5, 1, 64, 64), dtype=np.float32)
    c = G.code_prior_sample(enc, x, seeded_rng(9))
    assert c.dims == (5, 3)
    np.testing.assert_array_equal(c.data, seeded_rng(9).standard_normal((5, 3), dtype=np.float32))
    assert not c.tracked


def test_code_prior_sample_dims_error():
    with pytest.raises(ShapeError):
        G.code_prior_sample(Encoder(3), np.zeros((2, 1, 8, 8)), seeded_rng(0))


def test_distillation_gradient_routing():
    model = _mini()
    rng = np.random.default_rng(3)
    z, c = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    loss = G.distillation_loss(c, model.generator(z, c), model.encoder)
    grads = T.backward(loss)
    g_params = model.generator.parameters().values()
    assert all(p in grads for p in g_params)
    assert any(np.abs(grads[p]).max() > 0 for p in g_params)
    for p in list(model.discriminator.parameters().values()) + list(model.encoder.parameters().values()):
        assert p not in grads and p.grad is None


def test_encoder_never_receives_gradients_from_adversarial_path():
    model = _mini()
    rng = np.random.default_rng(4)
    z, c = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    fake = model.generator(z, c)
    T.backward(G.g_adversarial_loss(model.discriminator(fake)) + G.distillation_loss(c, fake, model.encoder))
    assert all(p.grad is None for p in model.encoder.parameters().values())


def test_non_saturating_gradient_survives_confident_discriminator():
    model = _mini()
    model.discriminator.layers["head"].bias.data[:] = -25.0  # sigma(D(fake)) ~ 1e-11
    rng = np.random.default_rng(5)
    z, c = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    params = list(model.generator.parameters().values())

    def largest(loss_fn):
        res = numeric_gradient(lambda: loss_fn(model.discriminator(model.generator(z, c))), params,
                               eps=1e-6, max_elems=20)
        return max(np.abs(g).max() for _, g in res)

    non_sat, sat = largest(G.g_adversarial_loss), largest(G.g_saturating_loss)
    assert non_sat > 1e-3
    assert sat < 1e-6 * non_sat


# ---------------------------------------------------------------- training loop


@pytest.fixture(scope="module")
def vae_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("vae") / "vae.ckpt"
    VaeModel(3, seed=4).save_checkpoint(path, extra={"config.data": TINY, "config.position_threshold": "32"})
    return path


def _cfg(vae_ckpt, **kw):
    base = dict(vae_checkpoint=str(vae_ckpt), epochs=1, batch_size=4, seed=0, checkpoint_every=0)
    base.update(kw)
    return G.IdGanConfig(**base)


def test_epochs_zero_leaves_init(vae_ckpt):
    ckpt, log = G.train_idgan(_cfg(vae_ckpt, epochs=0))
    assert log.records == []
    init = IdGanModel(VaeModel.from_checkpoint(vae_ckpt).encoder, seed=0)
    for k, v in init.state().items():
        assert ckpt.tensors[k].tobytes() == v.tobytes()


def test_inherits_data_from_vae_checkpoint(vae_ckpt, monkeypatch):
    seen = []
    real = G.dsprites.batches

    def spy(view, *a):
        seen.append(len(view))
        return real(view, *a)

    monkeypatch.setattr(G.dsprites, "batches", spy)
    G.train_idgan(_cfg(vae_ckpt))
    assert seen == [6]


def test_run_is_deterministic_and_encoder_frozen(vae_ckpt, tmp_path):
    cfg = _cfg(vae_ckpt, epochs=2, checkpoint_every=1)
    G.train_idgan(cfg, tmp_path / "a")
    G.train_idgan(cfg, tmp_path / "b")
    for name in ("idgan_final.ckpt", "idgan_epoch0001.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    la = G.GanLog.read_csv(tmp_path / "a" / "idgan_log.csv").records
    lb = G.GanLog.read_csv(tmp_path / "b" / "idgan_log.csv").records
    strip = lambda rs: [(r.epoch, r.d_loss, r.g_adv, r.distill, r.d_real_mean, r.d_fake_mean) for r in rs]
    assert strip(la) == strip(lb) and len(la) == 2
    assert all(math.isfinite(v) for r in strip(la) for v in r)
    head = (tmp_path / "a" / "idgan_log.csv").read_text().splitlines()[0]
    assert head == "epoch,d_loss,g_adv,distill,d_real_mean,d_fake_mean,seconds"
    final = Checkpoint.load(tmp_path / "a" / "idgan_final.ckpt")
    enc_state = {k[len("encoder."):]: v for k, v in final.tensors.items() if k.startswith("encoder.")}
    assert tensor_hash(enc_state) == tensor_hash(VaeModel.from_checkpoint(vae_ckpt).encoder.state())
    assert final.metadata["encoder_hash"] == tensor_hash(enc_state)


def test_lambda_zero_ignores_distillation(vae_ckpt, monkeypatch):
    ref, log_ref = G.train_idgan(_cfg(vae_ckpt, lam=0.0))
    real = G.distillation_loss
    monkeypatch.setattr(G, "distillation_loss", lambda c, fake, enc: real(c, fake, enc) * 1000.0)
    patched, log_patched = G.train_idgan(_cfg(vae_ckpt, lam=0.0))
    for k in ref.tensors:
        if k.startswith("generator."):
            assert ref.tensors[k].tobytes() == patched.tensors[k].tobytes()
    assert log_patched.records[0].distill == pytest.approx(1000 * log_ref.records[0].distill, rel=1e-5)


def test_lambda_changes_generator_update(vae_ckpt):
    a, _ = G.train_idgan(_cfg(vae_ckpt, lam=0.0))
    b, _ = G.train_idgan(_cfg(vae_ckpt, lam=1.0))
    assert any(a.tensors[k].tobytes() != b.tensors[k].tobytes() for k in a.tensors if k.startswith("generator."))


def test_mode_collapse_watchdog_warns(vae_ckpt, monkeypatch):
    class Collapsed(IdGanModel):
        def __init__(self, *a, **kw):
            super().__init__(*a, **kw)
            self.generator.zero_head()

    monkeypatch.setattr(G, "IdGanModel", Collapsed)
    _, log = G.train_idgan(_cfg(vae_ckpt, epochs=5, lr_g=0.0, batch_size=6))
    assert len(log.records) == 5
    assert len(log.warnings) == 1 and "mode collapse" in log.warnings[0]


def test_missing_vae_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        G.train_idgan(G.IdGanConfig(vae_checkpoint=str(tmp_path / "nope.ckpt"), epochs=0))


def test_negative_lambda_rejected():
    with pytest.raises(ValueError):
        G.IdGanConfig(lam=-0.1)
