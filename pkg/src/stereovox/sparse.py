"""Masked 3-D convolutions that only evaluate active output sites.

Features live in dense ``(B, C, R, R, R)`` tensors that are zero at
inactive sites; the kernels gather inputs for the active sites, run one
matmul and scatter the results back. Inactive sites are never computed,
so the work scales with the number of active sites. Results match a dense
convolution followed by masking.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F


def active_sites(mask: torch.Tensor) -> torch.Tensor:
    """(N, 4) int64 (b, x, y, z) coordinates of nonzero entries of a (B, R, R, R) mask."""
    return torch.nonzero(mask, as_tuple=False)


def _scatter(values: torch.Tensor, sites: torch.Tensor, shape) -> torch.Tensor:
    b, c, r0, r1, r2 = shape
    out = values.new_zeros(b, r0, r1, r2, c)
    out = out.index_put((sites[:, 0], sites[:, 1], sites[:, 2], sites[:, 3]), values)
    return out.permute(0, 4, 1, 2, 3)


def submanifold_conv3d(x: torch.Tensor, sites: torch.Tensor, weight: torch.Tensor,
                       bias: torch.Tensor | None) -> torch.Tensor:
    """Odd-kernel, stride-1, same-padded conv evaluated at ``sites`` only."""
    b, cin, r0, r1, r2 = x.shape
    cout, _, k0, k1, k2 = weight.shape
    p0, p1, p2 = k0 // 2, k1 // 2, k2 // 2
    if sites.numel() == 0:
        return x.new_zeros(b, cout, r0, r1, r2)
    xp = F.pad(x, (p2, p2, p1, p1, p0, p0))
    P1, P2 = r1 + 2 * p1, r2 + 2 * p2
    flat = xp.permute(0, 2, 3, 4, 1).reshape(-1, cin)
    base = ((sites[:, 0] * (r0 + 2 * p0) + sites[:, 1]) * P1 + sites[:, 2]) * P2 + sites[:, 3]
    d0, d1, d2 = torch.meshgrid(torch.arange(k0), torch.arange(k1), torch.arange(k2), indexing="ij")
    offsets = ((d0 * P1 + d1) * P2 + d2).reshape(-1).to(sites.device)
    gathered = flat[base[:, None] + offsets[None, :]]  # (N, K, Cin)
    w = weight.permute(2, 3, 4, 1, 0).reshape(-1, cout)  # (K*Cin, Cout)
    out = gathered.reshape(len(sites), -1) @ w
    if bias is not None:
        out = out + bias
    return _scatter(out, sites, (b, cout, r0, r1, r2))


def subdivide_deconv3d(x: torch.Tensor, sites: torch.Tensor, weight: torch.Tensor,
                       bias: torch.Tensor | None) -> torch.Tensor:
    """Kernel-2 stride-2 transposed conv evaluated at child ``sites`` of the 2x output grid.

    Each child reads only its parent, through the kernel tap at its octant.
    """
    b, cin, r0, r1, r2 = x.shape
    cout = weight.shape[1]
    shape = (b, cout, 2 * r0, 2 * r1, 2 * r2)
    if sites.numel() == 0:
        return x.new_zeros(shape)
    parent = x.permute(0, 2, 3, 4, 1)[sites[:, 0], sites[:, 1] // 2, sites[:, 2] // 2, sites[:, 3] // 2]
    octant = (sites[:, 1] % 2) * 4 + (sites[:, 2] % 2) * 2 + sites[:, 3] % 2
    w = weight.permute(2, 3, 4, 0, 1).reshape(8, cin, cout)
    out = parent.new_zeros(len(sites), cout)
    for o in range(8):
        sel = octant == o
        if sel.any():
            out = out.index_put((sel.nonzero(as_tuple=True)[0],), parent[sel] @ w[o])
    if bias is not None:
        out = out + bias
    return _scatter(out, sites, shape)


def pointwise_conv3d(x: torch.Tensor, sites: torch.Tensor, weight: torch.Tensor,
                     bias: torch.Tensor | None) -> torch.Tensor:
    b, cin, r0, r1, r2 = x.shape
    cout = weight.shape[0]
    if sites.numel() == 0:
        return x.new_zeros(b, cout, r0, r1, r2)
    feats = x.permute(0, 2, 3, 4, 1)[sites[:, 0], sites[:, 1], sites[:, 2], sites[:, 3]]
    out = feats @ weight.reshape(cout, cin).t()
    if bias is not None:
        out = out + bias
    return _scatter(out, sites, (b, cout, r0, r1, r2))
