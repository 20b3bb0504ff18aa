"""Single-file checkpoints: magic, JSON header, then raw little-endian tensors.

Layout::

    b"SVXCKPT1" | uint64 header length | header JSON (utf-8) | tensor bytes

The header holds the run configuration plus, for every tensor, its name,
dtype, shape, byte offset (relative to the end of the header) and size.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SVXCKPT1"


def save_checkpoint(path, state_dict: dict, config: dict, extra: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, t in state_dict.items():
        arr = t.detach().cpu().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"config": config, "extra": extra or {}, "tensors": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple[dict, dict, dict]:
    """Returns (state_dict, config, extra)."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    try:
        (n,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16:16 + n])
        body = memoryview(raw)[16 + n:]
        state = {}
        for e in header["tensors"]:
            buf = body[e["offset"]:e["offset"] + e["nbytes"]]
            arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
            state[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")).copy())
        return state, header["config"], header["extra"]
    except (struct.error, ValueError, KeyError, TypeError) as err:
        raise ValueError(f"{path}: corrupt checkpoint ({err})") from err
