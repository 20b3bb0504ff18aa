"""Analytic multiply-accumulate and parameter counts.

Conv layers cost k_d*k_h*k_w * C_in * C_out per computed output site. The
kernel-2 stride-2 transposed convs in the decoder touch one tap per output
site, so they cost C_in * C_out per site. Masked decode modes only compute
active sites; dense mode computes every site.
"""

from __future__ import annotations

import math

from .network import DecodeResult, NetConfig, encoder_downsamples


def conv_macs(kernel, c_in: int, c_out: int, output_sites: int) -> int:
    """MACs of one conv layer evaluated at ``output_sites`` output positions."""
    return math.prod(kernel) * c_in * c_out * output_sites


def _conv_out(n: int, k: int = 3, s: int = 1, p: int = 1) -> int:
    return (n + 2 * p - k) // s + 1


def feature_macs(cfg: NetConfig) -> int:
    c_in, c = cfg.image_channels, cfg.feature_channels
    h, w = cfg.image_height, cfg.image_width
    total = 0
    for cin, s in ((c_in, 2), (c, 1), (c, 2), (c, 1)):
        h, w = _conv_out(h, s=s), _conv_out(w, s=s)
        total += conv_macs((3, 3), cin, c, h * w)
    return 2 * total  # left and right images


def encoder_macs(cfg: NetConfig, n_levels: int | None = None) -> int:
    d = len(cfg.plan) if n_levels is None else n_levels
    h, w = cfg.feature_hw
    width, m = cfg.encoder_width, cfg.match_channels
    # the shared matching conv runs once per disparity level
    total = conv_macs((3, 3), cfg.feature_channels, m, h * w * d)
    total += conv_macs((3, 3), m * d, width, h * w)
    for _ in range(encoder_downsamples(h, w)):
        h, w = _conv_out(h, s=2), _conv_out(w, s=2)
        total += conv_macs((3, 3), width, width, h * w)
    return total + width * h * w * cfg.decoder.n_latent


def decoder_level_macs(cfg: NetConfig, level: int, active_sites: int) -> int:
    dc = cfg.decoder
    cin, cout = dc.channels(level - 1), dc.channels(level)
    total = conv_macs((1, 1, 1), cin, cout, active_sites)       # one tap per child
    total += conv_macs((3, 3, 3), cout, cout, active_sites)
    if dc.masked or level == dc.n_levels:
        total += conv_macs((1, 1, 1), cout, 1, active_sites)
    return total


def decoder_macs(cfg: NetConfig, active=None, max_level: int | None = None) -> dict:
    """Per-level decoder MACs for one sample. ``active`` gives active sites per
    level (as in DecodeResult.active, divided by batch size); None means dense."""
    dc = cfg.decoder
    max_level = dc.n_levels if max_level is None else max_level
    per_level = []
    for l in range(1, max_level + 1):
        sites = dc.resolution(l) ** 3 if active is None else active[l - 1]
        per_level.append(decoder_level_macs(cfg, l, sites))
    fc = dc.n_latent * dc.channels(0) * dc.delta ** 3
    return {"fc": fc, "levels": per_level, "total": fc + sum(per_level)}


def count_macs(cfg: NetConfig, decode: DecodeResult | None = None, batch_size: int = 1,
               max_level: int | None = None) -> dict:
    """MACs per module for a single stereo pair.

    Pass the DecodeResult of a masked/sparse forward pass to count only the
    sites it computed; omitting it counts the dense network.
    """
    if decode is not None:
        active = [a / batch_size for a in decode.active]
        max_level = len(decode.active)
    else:
        active = None
    dec = decoder_macs(cfg, active, max_level)
    out = {
        "features": feature_macs(cfg),
        "cost_volume": 0,
        "encoder": encoder_macs(cfg),
        "decoder": dec["total"],
        "decoder_levels": dec["levels"],
    }
    out["total"] = out["features"] + out["cost_volume"] + out["encoder"] + out["decoder"]
    return out


def count_parameters(cfg: NetConfig) -> dict:
    c_in, c = cfg.image_channels, cfg.feature_channels
    feat = 9 * c_in * c + c + 3 * (9 * c * c + c) + 3 * 2 * c   # three batch norms
    h, w = cfg.feature_hw
    width = cfg.encoder_width
    n_down = encoder_downsamples(h, w)
    for _ in range(n_down):
        h, w = math.ceil(h / 2), math.ceil(w / 2)
    m = cfg.match_channels
    enc = 9 * c * m + m + 2 * m
    enc += 9 * m * len(cfg.plan) * width + width + 2 * width
    enc += n_down * (9 * width * width + width + 2 * width)
    enc += width * h * w * cfg.decoder.n_latent + cfg.decoder.n_latent
    dc = cfg.decoder
    dec = dc.n_latent * dc.channels(0) * dc.delta ** 3 + dc.channels(0) * dc.delta ** 3
    for l in range(1, dc.n_levels + 1):
        cin, cout = dc.channels(l - 1), dc.channels(l)
        dec += 8 * cin * cout + cout + 27 * cout * cout + cout
        if dc.masked or l == dc.n_levels:
            dec += cout + 1
    return {"features": feat, "encoder": enc, "decoder": dec, "total": feat + enc + dec}
