"""Binary checkpoint format.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"SIMTHRS1"
    8       4     uint32 format_version
    12      8     uint64 header length H
    20      H     UTF-8 JSON header
    20+H    ...   tensor payload

The header holds ``format_version``, ``config``, ``vocab_hash``, optional
``extra`` metadata and a ``tensors`` table. Each tensor entry gives
``section`` (``encoder`` or ``threshold``), ``name``, ``dtype`` (numpy
format string, e.g. ``<f4``), ``shape`` and ``offset``/``nbytes`` relative
to the start of the payload. Tensor data is C-order (row-major).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np
import torch

MAGIC = b"SIMTHRS1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, sections: dict, config: dict, vocab_hash: str, extra: Optional[dict] = None):
    """``sections`` maps a section name to an ``nn.Module`` or a name->tensor dict."""
    entries, blobs, offset = [], [], 0
    for section, params in sections.items():
        if params is None:
            continue
        state = params.state_dict() if hasattr(params, "state_dict") else params
        for name, tensor in state.items():
            arr = np.ascontiguousarray(tensor.detach().cpu().numpy())
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            data = arr.tobytes(order="C")
            entries.append({"section": section, "name": name, "dtype": arr.dtype.str,
                            "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
    header = {"format_version": FORMAT_VERSION, "config": config, "vocab_hash": vocab_hash,
              "extra": extra or {}, "tensors": entries}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict, dict[str, dict[str, torch.Tensor]]]:
    """Return ``(header, {section: {name: tensor}})``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen].decode("utf-8"))
    payload = memoryview(data)[20 + hlen:]
    sections: dict[str, dict[str, torch.Tensor]] = {}
    for e in header["tensors"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        sections.setdefault(e["section"], {})[e["name"]] = torch.from_numpy(arr)
    return header, sections
