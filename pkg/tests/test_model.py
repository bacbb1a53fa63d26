import numpy as np
import pytest
import torch

from sitsx.checkpoint import load_checkpoint, read_header, save_checkpoint
from sitsx.errors import CheckpointMismatch, MissingPosterior, ShapeMismatch
from sitsx.model import (
    Encoded,
    ModelConfig,
    SitsAutoencoder,
    count_parameters,
    desk_config,
    kl_to_standard_normal,
    patchify,
    unpatchify,
)
from sitsx.objectives import LossWeights

from . import oracles

TINY = ModelConfig(embed_dim=8, token_patch_size=8, encoder_depth=1, num_heads=2,
                   decoder_depth=1, input_size=16)


def _series(B=2, T=5, P=16, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(B, T, 3, P, P, generator=g, dtype=dtype)


def test_patchify_roundtrip():
    x = torch.arange(2 * 3 * 16 * 16, dtype=torch.float32).reshape(2, 3, 16, 16)
    tokens = patchify(x, 8)
    assert tokens.shape == (2, 4, 192)
    # token 1 is the top-right 8x8 block, channel-major
    assert torch.equal(tokens[0, 1, :64], x[0, 0, :8, 8:].reshape(-1))
    assert torch.equal(unpatchify(tokens, 8, 3), x)


def test_forward_shapes():
    torch.manual_seed(0)
    model = SitsAutoencoder(TINY)
    x = _series(B=3, T=4)
    recon, enc = model(x)
    assert recon.shape == x.shape
    assert enc.pooled.shape == (3, 4, 8)
    assert enc.tokens.shape == (3, 4, 4, 8)
    assert enc.logvar is None


def test_unbatched_series():
    torch.manual_seed(0)
    model = SitsAutoencoder(TINY).eval()
    x = _series(B=1)
    enc = model.encode(x[0])
    assert enc.pooled.shape == (5, 8)
    torch.testing.assert_close(enc.pooled, model.encode(x).pooled[0])


def test_shape_mismatch():
    model = SitsAutoencoder(TINY)
    with pytest.raises(ShapeMismatch):
        model.encode(torch.rand(2, 5, 3, 32, 32))
    with pytest.raises(ShapeMismatch):
        model.encode(torch.rand(3, 16, 16))


def test_weight_sharing_across_timesteps():
    torch.manual_seed(0)
    model = SitsAutoencoder(TINY).eval()
    x = _series(B=1, T=5)
    x[0, 3] = x[0, 1]
    h = model.encode(x).pooled[0]
    torch.testing.assert_close(h[3], h[1])
    # every timestep is encoded independently of the others
    y = x.clone()
    y[0, 2] = torch.rand(3, 16, 16)
    h2 = model.encode(y).pooled[0]
    for t in (0, 1, 3, 4):
        torch.testing.assert_close(h2[t], h[t])
    assert not torch.allclose(h2[2], h[2])


def test_cls_pooling_and_pooled_decoding():
    torch.manual_seed(0)
    cfg = ModelConfig(**{**TINY.to_dict(), "pooling": "cls", "decode_from": "pooled"})
    model = SitsAutoencoder(cfg)
    x = _series()
    recon, enc = model(x)
    assert recon.shape == x.shape
    assert enc.tokens.shape == (2, 5, 4, 8)
    loss, _, _ = model.forward_loss(x, torch.tensor([0, 1]), LossWeights())
    loss.backward()
    assert model.encoder.cls_token.grad is not None


def test_vae_posterior_mean_is_deterministic():
    torch.manual_seed(0)
    model = SitsAutoencoder(ModelConfig(**{**TINY.to_dict(), "variant": "vae"}))
    x = _series()
    model.train()
    a, b = model.encode(x), model.encode(x)
    # sampling affects only the decoder input; the latents are posterior means
    torch.testing.assert_close(a.pooled, b.pooled)
    assert not torch.allclose(a.decoder_input, b.decoder_input)
    model.eval()
    c = model.encode(x)
    torch.testing.assert_close(c.decoder_input, c.tokens)
    torch.testing.assert_close(c.pooled, a.pooled)
    assert model.regularizer(c).shape == (2,)
    assert bool((model.regularizer(c) >= 0).all())


def test_ae_regulariser_is_zero():
    model = SitsAutoencoder(TINY)
    enc = model.encode(_series())
    assert torch.equal(model.regularizer(enc), torch.zeros(2))


def test_missing_posterior():
    model = SitsAutoencoder(ModelConfig(**{**TINY.to_dict(), "variant": "vae"}))
    enc = model.encode(_series())
    with pytest.raises(MissingPosterior):
        model.regularizer(Encoded(enc.tokens, enc.pooled, enc.decoder_input, None))


def test_kl_examples():
    # unit mean, unit variance, one latent dimension: 0.5 * 1^2
    assert float(kl_to_standard_normal(torch.tensor([1.0]), torch.tensor([0.0]))) == pytest.approx(0.5)
    assert float(kl_to_standard_normal(torch.zeros(4), torch.zeros(4))) == 0.0
    # sum over dimensions
    assert float(kl_to_standard_normal(torch.ones(3), torch.zeros(3))) == pytest.approx(1.5)


def _expected_param_count(d, p, C, L, enc_depth, dec_depth, mlp_ratio=4):
    h = d * mlp_ratio
    block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d)
    encoder = (C * p * p * d + d) + L * d + enc_depth * block + 2 * d + (d * d + d)
    decoder = (d * d + d) + L * d + dec_depth * block + 2 * d + (d * C * p * p + C * p * p)
    return encoder + decoder


def test_default_parameter_count():
    n = count_parameters(SitsAutoencoder(ModelConfig()))
    assert n == _expected_param_count(256, 8, 3, 64, 4, 4)
    assert n == 6_582_208


def test_desk_parameter_count():
    cfg = desk_config(32)
    assert count_parameters(SitsAutoencoder(cfg)) == _expected_param_count(64, 8, 3, 16, 2, 1)


def test_vae_adds_posterior_heads():
    ae = count_parameters(SitsAutoencoder(TINY))
    vae = count_parameters(SitsAutoencoder(ModelConfig(**{**TINY.to_dict(), "variant": "vae"})))
    assert vae - ae == 2 * (8 * 8 + 8)


@pytest.mark.parametrize("weights", [
    LossWeights(lambda_contra=0.5, mu_consist=0.5),
    LossWeights(lambda_contra=0.0, mu_consist=0.0),
    LossWeights(lambda_contra=1.0, mu_consist=0.0, reconstruction=0.0),
    LossWeights(lambda_contra=0.0, mu_consist=1.0, reconstruction=0.0),
], ids=["total", "reconstruction", "contrastive", "consistency"])
def test_gradient_check(weights):
    torch.manual_seed(0)
    model = SitsAutoencoder(TINY).double().eval()
    x = _series(B=2, T=5, dtype=torch.float64)
    y = torch.tensor([0, 1])
    frac, analytic = oracles.gradcheck_fraction(model, x, y, weights)
    assert analytic.abs().max() > 0
    assert frac >= 0.99


def test_gradient_check_vae_regulariser():
    torch.manual_seed(0)
    model = SitsAutoencoder(ModelConfig(**{**TINY.to_dict(), "variant": "vae"})).double().eval()
    x = _series(B=2, T=3, dtype=torch.float64)
    frac, _ = oracles.gradcheck_fraction(model, x, torch.tensor([1, 0]), LossWeights(lambda_reg=0.5))
    assert frac >= 0.99


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    model = SitsAutoencoder(TINY)
    header = {"model": TINY.to_dict(), "fingerprint": TINY.fingerprint(), "seed": 42, "epoch": 3,
              "metrics": {"val_ap": 0.9}}
    path = save_checkpoint(tmp_path / "ckpt.bin", model.state_dict(), header)
    assert read_header(path)["epoch"] == 3
    head, state = load_checkpoint(path, expected_fingerprint=TINY.fingerprint())
    assert head["version"] == 1 and head["metrics"] == {"val_ap": 0.9}
    clone = SitsAutoencoder(ModelConfig.from_dict(head["model"]))
    clone.load_state_dict(state)
    x = _series()
    model.eval(), clone.eval()
    torch.testing.assert_close(clone.encode(x).pooled, model.encode(x).pooled, rtol=0, atol=0)
    assert [p.name for p in tmp_path.iterdir()] == ["ckpt.bin"]


def test_checkpoint_rejects_other_config(tmp_path):
    path = save_checkpoint(tmp_path / "c.bin", {}, {"fingerprint": TINY.fingerprint()})
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(path, expected_fingerprint=desk_config().fingerprint())
    bogus = tmp_path / "bogus.bin"
    bogus.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointMismatch):
        read_header(bogus)


def test_config_validation_and_fingerprint():
    with pytest.raises(ValueError):
        ModelConfig(input_size=30)
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=10, num_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(variant="gan")
    assert ModelConfig().fingerprint() == ModelConfig.from_dict(ModelConfig().to_dict()).fingerprint()
    assert ModelConfig().fingerprint() != desk_config(64).fingerprint()


def test_training_step_reduces_loss():
    torch.manual_seed(0)
    model = SitsAutoencoder(TINY)
    x = _series(B=4, T=5)
    y = torch.tensor([0, 1, 0, 1])
    opt = torch.optim.Adam(model.parameters(), lr=1e-2)
    first = None
    for _ in range(30):
        loss, _, parts = model.forward_loss(x, y, LossWeights())
        first = first if first is not None else parts["loss"]
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert parts["loss"] < first
    assert np.isfinite(parts["mse"])
