import numpy as np
import pytest
import torch

from vcm3d.errors import ConfigError, ShapeError
from vcm3d.schedule import linear_beta_schedule
from vcm3d.vcm import DropConfig, VCMNetwork, build_vcm, modulate, sample_drop_mask

from conftest import TINY_VCM


def tiny_vcm(modalities=("lv_mask",), volume=16, latent=(4, 8, 8, 8), randomize=True, seed=0, **over):
    torch.manual_seed(seed)
    cfg = {**TINY_VCM, "modalities": list(modalities), "output_gain": "none", **over}
    net = build_vcm(cfg, (volume,) * 3, latent, linear_beta_schedule())
    if randomize:
        torch.nn.init.normal_(net.split_head.weight, std=0.2)
        torch.nn.init.normal_(net.split_head.bias, std=0.2)
    net.eval()
    return net


def inputs(net, b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(b, *net.latent_shape, generator=g)
    e = torch.randn(b, *net.latent_shape, generator=g)
    conds = {m: torch.rand(b, 1, *net.volume_shape, generator=g) for m in net.modalities}
    t = torch.randint(1, 1001, (b,), generator=g)
    return z, e, conds, t


def test_zero_init_head_gives_zero_modulation():
    net = tiny_vcm(("lv_mask", "skull"), randomize=False)
    for seed in range(3):
        z, e, conds, t = inputs(net, seed=seed)
        g, b = net(z * 10, e, conds, t)
        assert torch.count_nonzero(g) == 0 and torch.count_nonzero(b) == 0


@pytest.mark.parametrize(
    "volume,latent,mult",
    [
        (16, (4, 8, 8, 8), [1, 2, 4]),
        (16, (4, 4, 4, 4), [1, 2, 4]),
        (16, (3, 4, 4, 4), [1, 2, 2, 4]),
        (32, (4, 8, 8, 8), [1, 2, 4]),
        (32, (2, 16, 16, 16), [1, 2]),
        (32, (4, 4, 4, 4), [1, 1, 2, 2]),
        (32, (4, 8, 8, 8), [1, 2, 3, 4]),
        (16, (1, 2, 2, 2), [1, 2, 2, 2]),
        (16, (4, 16, 16, 16), [1, 2]),
        (32, (3, 8, 8, 8), [1, 2, 4, 8, 16]),
    ],
)
def test_output_shape_tracks_latent(volume, latent, mult):
    net = tiny_vcm(("lv_mask",), volume, latent, channel_mult=mult)
    z, e, conds, t = inputs(net, b=1)
    g, b = net(z, e, conds, t)
    assert g.shape == z.shape and b.shape == z.shape
    feats = net.encode_conditions(conds, torch.ones(1, 1, dtype=torch.bool), net.time_embedding(t))
    assert feats["lv_mask"].shape[2:] == z.shape[2:]


def test_full_scale_channel_plan():
    net = tiny_vcm(("lv_mask",), 32, (3, 8, 8, 8), base_channels=16, channel_mult=[1, 2, 3, 4, 8, 16])
    z, e, conds, t = inputs(net, b=1)
    g, _ = net(z, e, conds, t)
    assert g.shape == (1, 3, 8, 8, 8)


def test_bad_latent_plan():
    with pytest.raises(ShapeError):
        tiny_vcm(latent=(4, 6, 6, 6))
    with pytest.raises(ConfigError):
        tiny_vcm(latent=(4, 2, 2, 2), channel_mult=[1, 2])


def test_dropped_modality_isolation():
    net = tiny_vcm(("lv_mask", "skull"))
    z, e, conds, t = inputs(net)
    keep = torch.tensor([[True, False], [True, False]])
    g0, b0 = net(z, e, conds, t, keep)
    changed = dict(conds, skull=torch.randn_like(conds["skull"]) * 100)
    g1, b1 = net(z, e, changed, t, keep)
    assert torch.equal(g0, g1) and torch.equal(b0, b1)
    keep_b = torch.tensor([[False, True], [False, True]])
    changed = dict(conds, lv_mask=torch.rand_like(conds["lv_mask"]))
    assert torch.equal(net(z, e, conds, t, keep_b)[0], net(z, e, changed, t, keep_b)[0])


def test_mixed_keep_per_sample():
    net = tiny_vcm(("lv_mask", "skull"))
    z, e, conds, t = inputs(net)
    keep = torch.tensor([[True, False], [False, True]])
    g0, _ = net(z, e, conds, t, keep)
    changed = dict(conds, skull=conds["skull"].clone())
    changed["skull"][0] += 5.0
    g1, _ = net(z, e, changed, t, keep)
    assert torch.equal(g0[0], g1[0])
    changed["skull"][1] += 5.0
    g2, _ = net(z, e, changed, t, keep)
    assert not torch.equal(g0[1], g2[1])


def test_dropping_b_leaves_a_features():
    net = tiny_vcm(("lv_mask", "skull"))
    _, _, conds, t = inputs(net)
    temb = net.time_embedding(t)
    both = net.encode_conditions(conds, torch.tensor([[True, True]] * 2), temb)
    only_a = net.encode_conditions(conds, torch.tensor([[True, False]] * 2), temb)
    assert torch.equal(both["lv_mask"], only_a["lv_mask"])
    assert "skull" not in only_a


def test_all_dropped_fuses_zero():
    net = tiny_vcm(("lv_mask", "skull"))
    z, e, conds, t = inputs(net)
    none = torch.zeros(2, 2, dtype=torch.bool)
    feats = net.encode_conditions(conds, none, net.time_embedding(t))
    assert feats == {}
    g0, _ = net(z, e, conds, t, none)
    g1, _ = net(z, e, {}, t, none)
    assert torch.equal(g0, g1)


def test_unknown_modality_and_missing_kept():
    net = tiny_vcm(("lv_mask",))
    z, e, conds, t = inputs(net)
    with pytest.raises(ConfigError):
        net(z, e, {"flair": conds["lv_mask"]}, t)
    net2 = tiny_vcm(("lv_mask", "skull"))
    with pytest.raises(ConfigError):
        net2(z, e, {"lv_mask": conds["lv_mask"]}, t, torch.ones(2, 2, dtype=torch.bool))


def test_prior_shape_mismatch():
    net = tiny_vcm()
    z, e, conds, t = inputs(net)
    with pytest.raises(ShapeError):
        net(z, e[:, :2], conds, t)
    with pytest.raises(ShapeError):
        net(z, e, {"lv_mask": torch.zeros(2, 1, 8, 8, 8)}, t)


def test_eval_determinism():
    net = tiny_vcm(("lv_mask", "skull"))
    z, e, conds, t = inputs(net)
    a = net(z, e, conds, t)
    b = net(z, e, conds, t)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_finite_outputs_random_draws():
    net = tiny_vcm(("lv_mask", "skull"))
    for seed in range(100):
        z, e, conds, t = inputs(net, b=1, seed=seed)
        g, b = net(z, e, conds, t)
        assert torch.isfinite(g).all() and torch.isfinite(b).all()


def test_output_gain_scales_head():
    s = linear_beta_schedule()
    torch.manual_seed(0)
    plain = build_vcm({**TINY_VCM, "output_gain": "none"}, (16,) * 3, (4, 8, 8, 8), s)
    torch.nn.init.normal_(plain.split_head.weight, std=0.2)
    gained = build_vcm({**TINY_VCM, "output_gain": "sqrt_alpha_bar"}, (16,) * 3, (4, 8, 8, 8), s)
    gained.load_state_dict(plain.state_dict())
    z, e, conds, _ = inputs(plain)
    t = torch.tensor([1, 700])
    g0, b0 = plain(z, e, conds, t)
    g1, b1 = gained(z, e, conds, t)
    k = torch.tensor(np.sqrt(s.alpha_bar[[0, 699]]), dtype=torch.float32).view(-1, 1, 1, 1, 1)
    assert torch.allclose(g1, g0 * k, rtol=1e-6, atol=1e-8)
    assert torch.allclose(b1, b0 * k, rtol=1e-6, atol=1e-8)
    with pytest.raises(ConfigError):
        build_vcm({"output_gain": "sqrt_alpha_bar"}, (16,) * 3, (4, 8, 8, 8))
    with pytest.raises(ConfigError):
        build_vcm({"output_gain": "cube"}, (16,) * 3, (4, 8, 8, 8), s)


def test_duplicate_modalities():
    with pytest.raises(ConfigError):
        VCMNetwork(["a", "a"], (16,) * 3, (4, 8, 8, 8))


# --------------------------------------------------------------------------- #
# modulation


def test_modulate_examples():
    e = torch.randn(2, 3)
    z = torch.zeros(2, 3)
    assert torch.equal(modulate(e, z, z), e)
    one = torch.ones(1)
    assert modulate(one, torch.tensor([0.5]), torch.tensor([0.1])).item() == pytest.approx(1.6)
    beta = torch.randn(2, 3)
    assert torch.equal(modulate(e, -torch.ones(2, 3), beta), beta)
    with pytest.raises(ShapeError):
        modulate(e, torch.zeros(3), z)


# --------------------------------------------------------------------------- #
# dropout


def test_single_modality_always_kept():
    rng = np.random.default_rng(0)
    for _ in range(100):
        assert sample_drop_mask(DropConfig(), 1, rng).tolist() == [True]


def test_drop_mask_reproducible():
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    s1 = [sample_drop_mask(DropConfig(), 2, r1).tolist() for _ in range(50)]
    s2 = [sample_drop_mask(DropConfig(), 2, r2).tolist() for _ in range(50)]
    assert s1 == s2


def test_categorical_frequencies():
    rng = np.random.default_rng(0)
    n = 100_000
    counts = {(True, False): 0, (False, True): 0, (True, True): 0}
    for _ in range(n):
        counts[tuple(sample_drop_mask(DropConfig(), 2, rng).tolist())] += 1
    for key, p in zip([(True, False), (False, True), (True, True)], (0.3, 0.3, 0.4)):
        assert abs(counts[key] / n - p) <= 0.01


def test_drop_config_validation():
    with pytest.raises(ConfigError):
        DropConfig(probs=[0.3, 0.3, 0.3]).validate(2)
    with pytest.raises(ConfigError):
        DropConfig(subsets=[[0], []], probs=[0.5, 0.5]).validate(2)
    with pytest.raises(ConfigError):
        DropConfig(scheme="bernoulli").validate(2)
    with pytest.raises(ConfigError):
        DropConfig(scheme="independent", drop_probs=[0.5]).validate(3)
    with pytest.raises(ConfigError):
        sample_drop_mask(DropConfig(probs=[0.5, 0.6, -0.1]), 2, np.random.default_rng(0))


def test_independent_scheme_never_empty():
    dc = DropConfig(scheme="independent", drop_probs=[0.9, 0.9, 0.9])
    rng = np.random.default_rng(0)
    masks = np.array([sample_drop_mask(dc, 3, rng) for _ in range(2000)])
    assert masks.any(axis=1).all()
    assert masks.sum(axis=1).min() == 1


def test_drop_config_roundtrip():
    dc = DropConfig(scheme="independent", drop_probs=[0.2, 0.1, 0.5])
    assert DropConfig.from_dict(dc.to_dict()) == dc
