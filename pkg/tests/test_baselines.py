import math

import pytest
import torch

from sitsx.baselines import (
    BaselineConfig,
    ClassifierOutput,
    SiameseBaseline,
    bi_aggregate,
    build_bitemporal_pairs,
    fit_full_batch,
    head_input_dim,
)
from sitsx.errors import ConfigError, EmptyList, SeriesTooShort, ShapeMismatch
from sitsx.model import ModelConfig

TINY = ModelConfig(embed_dim=8, token_patch_size=8, encoder_depth=1, num_heads=2, decoder_depth=1, input_size=16)


def _series(B=2, T=5, P=16, seed=0):
    return torch.rand(B, T, 3, P, P, generator=torch.Generator().manual_seed(seed))


def _flat(x):
    return x.reshape(x.shape[0], -1)


# --- pairs and aggregation ----------------------------------------------------------

@pytest.mark.parametrize("T", range(2, 17))
def test_pair_count(T):
    series = list(range(T))
    pairs = build_bitemporal_pairs(series)
    assert len(pairs) == T - 1
    assert [a for a, _ in pairs] == list(range(T - 1))
    assert all(b == T - 1 for _, b in pairs)


def test_pairs_share_last_image():
    x = _series(B=1)[0]
    pairs = build_bitemporal_pairs(x)
    assert all(b is pairs[0][1] or torch.equal(b, x[-1]) for _, b in pairs)
    assert len(build_bitemporal_pairs(x[:2])) == 1
    with pytest.raises(SeriesTooShort):
        build_bitemporal_pairs(x[:1])


def test_aggregate_examples():
    agg = bi_aggregate([ClassifierOutput.from_logit(2.0), ClassifierOutput.from_logit(-2.0)])
    assert agg.logit == 0.0 and agg.probability == 0.5
    same = bi_aggregate([1.3, 1.3, 1.3])
    assert same.logit == pytest.approx(1.3)
    assert same.probability == pytest.approx(1 / (1 + math.exp(-1.3)))
    assert bi_aggregate([0.5, -1.0, 3.0]) == bi_aggregate([3.0, 0.5, -1.0])
    assert bi_aggregate([0.5, -1.0, 3.0], mode="max").logit == 3.0
    with pytest.raises(EmptyList):
        bi_aggregate([])


# --- configuration ---------------------------------------------------------------

def test_head_dimensions_default_backbone():
    d = 256
    cfg = BaselineConfig.for_method("bi-siamconcat", ModelConfig())
    assert head_input_dim(cfg, d) == 512
    assert head_input_dim(BaselineConfig.for_method("multi-siamconcat", ModelConfig()), d) == 1280
    assert head_input_dim(BaselineConfig.for_method("multi-siamdiff", ModelConfig()), d) == 256
    assert head_input_dim(BaselineConfig.for_method("bi-siamdiff", ModelConfig()), d) == 256
    cat = BaselineConfig.for_method("multi-siamdiff", ModelConfig(), diff_aggregation="concat")
    assert head_input_dim(cat, d) == 1024


def test_config_rules():
    with pytest.raises(ConfigError):
        BaselineConfig(strategy="bi", steps_used=2)
    with pytest.raises(ConfigError):
        BaselineConfig(interaction="diff", steps_used=2)
    with pytest.raises(ConfigError):
        BaselineConfig(steps_used=1)
    with pytest.raises(ConfigError):
        BaselineConfig.for_method("fc-ef", TINY)
    cfg = BaselineConfig(steps_used=2, backbone=TINY)
    assert cfg.method == "multi-siamconcat"
    assert BaselineConfig.from_dict(cfg.to_dict()) == cfg


# --- forward passes ---------------------------------------------------------------

@pytest.mark.parametrize("method", ["bi-siamconcat", "bi-siamdiff", "multi-siamconcat", "multi-siamdiff"])
def test_forward_shapes(method):
    torch.manual_seed(0)
    model = SiameseBaseline(BaselineConfig.for_method(method, TINY))
    logits = model(_series(B=3))
    assert logits.shape == (3,)
    outs = model.predict(_series(B=3))
    for o, l in zip(outs, logits.tolist()):
        assert o.probability == pytest.approx(1 / (1 + math.exp(-l)))


def test_diff_of_identical_pair_is_zero():
    torch.manual_seed(0)
    model = SiameseBaseline(BaselineConfig.for_method("bi-siamdiff", TINY))
    x = _series(B=2, T=2)
    x[:, 0] = x[:, 1]
    z = model.head_input(model.features(x))
    assert torch.equal(z, torch.zeros_like(z))


def test_multi_diff_identical_timesteps_zero_input():
    torch.manual_seed(0)
    model = SiameseBaseline(BaselineConfig.for_method("multi-siamdiff", TINY))
    x = _series(B=1, T=1).expand(2, 5, -1, -1, -1)
    z = model.head_input(model.features(x))
    assert torch.equal(z, torch.zeros_like(z))


def test_pair_swap():
    model = SiameseBaseline(BaselineConfig.for_method("bi-siamconcat", TINY), features=_flat, feature_dim=768)
    f = model.features(_series(B=1, T=2))
    swapped = f.flip(1)
    cat, cat_sw = model.head_input(f)[0, 0], model.head_input(swapped)[0, 0]
    assert torch.equal(torch.sort(cat).values, torch.sort(cat_sw).values)
    diff_model = SiameseBaseline(BaselineConfig.for_method("bi-siamdiff", TINY), features=_flat, feature_dim=768)
    assert torch.equal(diff_model.head_input(f), -diff_model.head_input(swapped))


def test_two_step_multi_equals_bi_on_last_pair():
    torch.manual_seed(0)
    multi = SiameseBaseline(BaselineConfig(strategy="multi", interaction="concat", steps_used=2, backbone=TINY))
    bi = SiameseBaseline(BaselineConfig(strategy="bi", interaction="concat", steps_used=5, backbone=TINY))
    bi.load_state_dict(multi.state_dict())
    x = _series(B=3)
    torch.testing.assert_close(multi(x), bi.pair_logit(x[:, 3], x[:, 4]), rtol=0, atol=0)
    # with only the final pair available, the bi model reduces to the same computation
    torch.testing.assert_close(multi(x), bi.head(bi.head_input(bi.features(x[:, 3:]))).squeeze(-1).mean(1),
                               rtol=0, atol=0)


def test_multi_uses_only_last_steps():
    torch.manual_seed(0)
    model = SiameseBaseline(BaselineConfig(steps_used=2, backbone=TINY))
    x = _series()
    y = x.clone()
    y[:, :3] = torch.rand(2, 3, 3, 16, 16)
    torch.testing.assert_close(model(x), model(y), rtol=0, atol=0)
    with pytest.raises(ShapeMismatch):
        SiameseBaseline(BaselineConfig(backbone=TINY))(x[:, :4])


def test_bi_mean_aggregation_matches_pairwise():
    torch.manual_seed(0)
    model = SiameseBaseline(BaselineConfig.for_method("bi-siamconcat", TINY))
    x = _series(B=2)
    per_pair = torch.stack([model.pair_logit(a, b) for a, b in build_bitemporal_pairs(x.transpose(0, 1))], dim=1)
    torch.testing.assert_close(model(x), per_pair.mean(1))
    maxed = SiameseBaseline(BaselineConfig.for_method("bi-siamconcat", TINY, pair_aggregation="max"))
    maxed.load_state_dict(model.state_dict())
    torch.testing.assert_close(maxed(x), per_pair.max(1).values)


@pytest.mark.parametrize("method", ["bi-siamdiff", "multi-siamdiff"])
def test_diff_invariant_to_common_offset(method):
    torch.manual_seed(0)
    model = SiameseBaseline(BaselineConfig.for_method(method, TINY), features=_flat, feature_dim=768)
    x = _series()
    torch.testing.assert_close(model(x), model(x + 0.37), rtol=0, atol=1e-5)


def test_concat_is_not_offset_invariant():
    torch.manual_seed(0)
    model = SiameseBaseline(BaselineConfig.for_method("multi-siamconcat", TINY), features=_flat, feature_dim=3840 // 5)
    x = _series()
    assert not torch.allclose(model(x), model(x + 0.37))


def test_feature_stub_needs_dim():
    with pytest.raises(ConfigError):
        SiameseBaseline(BaselineConfig(backbone=TINY), features=_flat)


# --- training -----------------------------------------------------------------------

def test_separable_toy_features_fit():
    torch.manual_seed(0)
    g = torch.Generator().manual_seed(1)
    n = 64
    labels = torch.arange(n) % 2
    # a single image channel carries the label through the last timestep
    x = torch.rand(n, 5, 3, 2, 2, generator=g) * 0.1
    x[:, -1, 0] += labels[:, None, None].float()
    model = SiameseBaseline(BaselineConfig.for_method("multi-siamdiff", TINY), features=_flat, feature_dim=12)
    curve = fit_full_batch(model, x, labels, steps=200, lr=1e-2)
    assert min(curve) < 0.01


def test_training_deterministic():
    def run():
        torch.manual_seed(3)
        model = SiameseBaseline(BaselineConfig.for_method("bi-siamconcat", TINY))
        return fit_full_batch(model, _series(B=4), torch.tensor([0, 1, 0, 1]), steps=5, lr=1e-3)

    assert run() == run()
