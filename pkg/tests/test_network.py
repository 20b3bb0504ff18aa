import numpy as np
import pytest
import torch
import torch.nn as nn

from stereovox.config import Config, full_scale_config
from stereovox.geometry import DisparityPlan, even_plan, full_plan, upsample_replicate
from stereovox.macs import conv_macs, count_macs, count_parameters, decoder_macs
from stereovox.network import (
    DecoderConfig, FeatureExtractor, NetConfig, OctreeDecoder, StereoVoxNet, build_cost_volume,
)


def small_net(mode="sparse_pred", levels=3, **kw):
    plan = DisparityPlan((16.0, 8.0, 4.0))
    dec = DecoderConfig(n_latent=32, delta=2, n_levels=levels, mode=mode, width=16)
    return NetConfig(32, 64, 1, 4, 16, plan, dec, **kw)


# -- features ---------------------------------------------------------------

def test_feature_shape():
    torch.manual_seed(0)
    f = FeatureExtractor(1, 16)(torch.rand(1, 1, 64, 128))
    assert f.shape == (1, 16, 16, 32)


def test_feature_rejects_bad_dims():
    with pytest.raises(ValueError):
        FeatureExtractor(1, 4)(torch.rand(1, 1, 30, 64))


def test_feature_determinism():
    torch.manual_seed(0)
    fe = FeatureExtractor(1, 8)
    x = torch.rand(1, 1, 32, 64)
    assert torch.equal(fe(x), fe(x.clone()))


def test_feature_shift_equivariance():
    torch.manual_seed(3)
    fe = FeatureExtractor(1, 8)
    img = torch.rand(1, 1, 64, 136)
    a = fe(img[..., 4:132])       # window starting 4 px later
    b = fe(img[..., 0:128])
    inner_a = a[..., 2:-3, 2:-3]
    inner_b = b[..., 2:-3, 3:-2]  # same content one cell to the right in b
    corr = np.corrcoef(inner_a.detach().numpy().ravel(), inner_b.detach().numpy().ravel())[0, 1]
    assert corr > 0.9


# -- cost volume ----------------------------------------------------------------

def test_cost_volume_zero_shift_identity():
    f = torch.rand(2, 3, 4, 8)
    cv = build_cost_volume(f, f.clone(), DisparityPlan((1.0,)))  # rounds to a 0-cell shift
    assert cv.shape == (2, 6, 1, 4, 8)
    assert torch.equal(cv[:, 0::2], cv[:, 1::2])


def test_cost_volume_hand_example():
    fl = torch.tensor([1.0, 2, 3, 4]).reshape(1, 1, 1, 4)
    fr = torch.tensor([5.0, 6, 7, 8]).reshape(1, 1, 1, 4)
    cv = build_cost_volume(fl, fr, DisparityPlan((4.0,)))   # 4 px -> 1 feature cell
    assert cv[0, 0, 0, 0].tolist() == [1, 2, 3, 4]
    assert cv[0, 1, 0, 0].tolist() == [0, 5, 6, 7]


def test_cost_volume_interlace_order():
    fl = torch.arange(3.0).reshape(1, 3, 1, 1).expand(1, 3, 2, 5).contiguous()
    fr = 10 + fl
    cv = build_cost_volume(fl, fr, DisparityPlan((1.0,)))
    assert cv[0, :, 0, 0, 0].tolist() == [0, 10, 1, 11, 2, 12]


def test_cost_volume_rejects_wide_shift():
    f = torch.rand(1, 2, 4, 8)
    with pytest.raises(ValueError):
        build_cost_volume(f, f, DisparityPlan((32.0,)))
    with pytest.raises(ValueError):
        build_cost_volume(f, torch.rand(1, 2, 4, 4), DisparityPlan((4.0,)))


def test_ablation_plan_sizes():
    cfg = Config()
    voxel12 = cfg.updated(cv_step_scale=2.5).plan()
    assert [len(full_plan(48)), len(even_plan(48, 2)), len(even_plan(48, 4)), len(voxel12)] == [48, 24, 12, 12]


# -- encoder ---------------------------------------------------------------------

def test_encoder_reproducible_and_batch_rows():
    torch.manual_seed(0)
    net = StereoVoxNet(small_net())
    cv = torch.rand(1, 8, 3, 8, 16)
    z1 = net.encode(cv)
    z2 = net.encode(torch.cat([cv, cv]))
    assert torch.equal(net.encode(cv), z1)
    assert torch.allclose(z2[0], z2[1], atol=0, rtol=0)
    assert z1.shape == (1, 32)
    with pytest.raises(ValueError):
        net.encode(torch.rand(1, 8, 2, 8, 16))
    with pytest.raises(ValueError):
        net.encode(torch.rand(1, 6, 3, 8, 16))


def test_full_scale_config_shapes():
    cfg = full_scale_config()
    net_cfg = cfg.net()
    assert net_cfg.decoder.n_latent == 128
    assert net_cfg.decoder.resolutions == [8, 16, 32, 64]
    dec = OctreeDecoder(net_cfg.decoder)
    res = dec(torch.randn(1, 128), mode="dense", max_level=1)
    assert res.probs[0].shape == (1, 8, 8, 8)


# -- decoder -----------------------------------------------------------------------

@torch.no_grad()
def test_decoder_resolutions_and_range():
    torch.manual_seed(1)
    dec = OctreeDecoder(DecoderConfig(n_latent=16, delta=4, n_levels=3, mode="dense", width=8))
    res = dec(torch.randn(2, 16))
    assert [p.shape[-1] for p in res.probs] == [8, 16, 32]
    for p in res.probs:
        assert p.min().item() >= 0.0 and p.max().item() <= 1.0


def _balanced_decoder(seed, mode="dense", levels=3):
    torch.manual_seed(seed)
    dec = OctreeDecoder(DecoderConfig(n_latent=16, delta=2, n_levels=levels, mode=mode, width=8))
    for st in dec.stages:
        if st.head is not None:
            nn.init.normal_(st.head.weight, std=2.0)
            nn.init.zeros_(st.head.bias)
    return dec


def test_dense_sparse_equivalence():
    for seed in range(5):
        dec = _balanced_decoder(seed)
        z = torch.randn(3, 16)
        a = dec(z, mode="dense")
        b = dec(z, mode="sparse_pred")
        assert a.active == [3 * r ** 3 for r in dec.cfg.resolutions]
        assert all(x <= y for x, y in zip(b.active, a.active))
        for p, q in zip(a.probs, b.probs):
            assert (p - q).abs().max().item() <= 1e-5


def test_mask_dominance_gt():
    dec = _balanced_decoder(7)
    z = torch.randn(2, 16)
    g1 = torch.rand(2, 4, 4, 4) < 0.4
    g2 = upsample_replicate(g1) & (torch.rand(2, 8, 8, 8) < 0.5)
    res = dec(z, gt_levels=[g1, g2, None], mode="sparse_gt")
    off = ~upsample_replicate(g1)
    assert torch.all(res.probs[1][off] == 0)
    assert torch.all(res.probs[2][~upsample_replicate(upsample_replicate(g1))] == 0)
    assert torch.all(res.probs[2][~upsample_replicate(g2)] == 0)


def test_mask_dominance_pred():
    dec = _balanced_decoder(11)
    res = dec(torch.randn(4, 16), mode="sparse_pred")
    m1 = res.probs[0] >= 0.5
    assert (~m1).any()
    assert torch.all(res.probs[2][~upsample_replicate(upsample_replicate(m1))] == 0)


def test_sparse_gt_requires_gt():
    dec = _balanced_decoder(0, mode="sparse_gt")
    with pytest.raises(ValueError):
        dec(torch.randn(1, 16))
    with pytest.raises(ValueError):
        dec(torch.randn(1, 16), gt_levels=[torch.zeros(1, 8, 8, 8, dtype=torch.bool)] * 3)


def test_straight_mode_single_output():
    torch.manual_seed(0)
    dec = OctreeDecoder(DecoderConfig(n_latent=16, delta=2, n_levels=3, mode="straight", width=8))
    res = dec(torch.randn(2, 16))
    assert len(res.probs) == 1 and res.levels == [3]
    assert res.probs[0].shape == (2, 16, 16, 16)
    assert sum(st.head is not None for st in dec.stages) == 1
    with pytest.raises(ValueError):
        dec(torch.randn(2, 16), max_level=2)


def test_full_forward_shapes():
    torch.manual_seed(0)
    net = StereoVoxNet(small_net())
    res = net(torch.rand(2, 1, 32, 64), torch.rand(2, 1, 32, 64))
    assert [p.shape for p in res.probs] == [(2, 4, 4, 4), (2, 8, 8, 8), (2, 16, 16, 16)]


# -- MACs -------------------------------------------------------------------------

def test_single_conv_macs():
    assert conv_macs((3, 3), 1, 1, 16) == 144


def hook_macs(model, *inputs, **kw):
    total = {"n": 0}
    batch = inputs[0].shape[0]

    def hook(mod, inp, out):
        # modules may see several rows per sample (the matching conv runs per disparity)
        sites = out[:, 0].numel() // batch
        if isinstance(mod, nn.ConvTranspose3d):
            total["n"] += mod.in_channels * mod.out_channels * sites
        elif isinstance(mod, (nn.Conv2d, nn.Conv3d)):
            total["n"] += int(np.prod(mod.kernel_size)) * mod.in_channels * mod.out_channels * sites
        elif isinstance(mod, nn.Linear):
            total["n"] += mod.in_features * mod.out_features

    hs = [m.register_forward_hook(hook) for m in model.modules()
          if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose3d, nn.Linear))]
    with torch.no_grad():
        model(*inputs, **kw)
    for h in hs:
        h.remove()
    return total["n"]


def test_analytic_macs_match_hooks():
    cfg = small_net(mode="dense")
    net = StereoVoxNet(cfg)
    x = torch.rand(1, 1, 32, 64)
    # the left and right feature passes both fire hooks
    assert hook_macs(net, x, x) == count_macs(cfg)["total"]
    cfg = small_net(mode="straight")
    assert hook_macs(StereoVoxNet(cfg), x, x) == count_macs(cfg)["total"]


def test_analytic_params_match_module():
    for mode in ("dense", "straight"):
        cfg = small_net(mode=mode)
        assert count_parameters(cfg)["total"] == sum(p.numel() for p in StereoVoxNet(cfg).parameters())
    cfg = Config().net()
    assert count_parameters(cfg)["total"] == sum(p.numel() for p in StereoVoxNet(cfg).parameters())


def test_empty_level1_mask_zero_decoder_macs():
    cfg = small_net(mode="sparse_gt")
    dec = OctreeDecoder(cfg.decoder)
    gts = [torch.zeros(1, 4, 4, 4, dtype=torch.bool), torch.zeros(1, 8, 8, 8, dtype=torch.bool), None]
    res = dec(torch.randn(1, 32), gt_levels=gts)
    levels = count_macs(cfg, res)["decoder_levels"]
    assert levels[0] > 0 and levels[1:] == [0, 0]


def test_active_sites_follow_masks():
    dec = _balanced_decoder(5)
    res = dec(torch.randn(2, 16), mode="sparse_pred")
    for l in (1, 2):
        assert res.active[l] == 8 * int((res.probs[l - 1] >= 0.5).sum())


def test_sparse_cheaper_at_low_occupancy():
    cfg = small_net(mode="sparse_gt")
    dec = OctreeDecoder(cfg.decoder)
    g1 = torch.zeros(1, 4, 4, 4, dtype=torch.bool)
    g1.view(-1)[:6] = True     # ~10% of level 1
    gts = [g1, upsample_replicate(g1), None]
    res = dec(torch.randn(1, 32), gt_levels=gts)
    assert count_macs(cfg, res)["decoder"] < count_macs(cfg)["decoder"]


def test_macs_monotone_in_levels():
    base = Config()
    counts = [count_macs(base.updated(cv_source="even", cv_even_step=k).net())["total"] for k in (4, 2, 1)]
    assert counts[0] < counts[1] < counts[2]
