"""Versioned flat-file checkpoints for collections of named Mlps.

Layout (all integers little-endian):

    bytes 0..3   magic  b"FMCK"
    u32          container version (currently 1)
    u32          header length in bytes
    header       UTF-8 JSON:
                   {"version": 1,
                    "seed": <int>,
                    "nets": [{"name": str,
                              "dropout_rate": float,
                              "layers": [{"in": int, "out": int,
                                          "activation": str}, ...]}, ...],
                    "extra": {...}}          # caller-owned metadata
    payload      for each net in header order, for each layer:
                   weight row-major float64 LE, then bias float64 LE

The payload is a pure function of the parameters, so identical models
serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .nncore import Layer, Mlp

MAGIC = b"FMCK"
VERSION = 1


def save_checkpoint(path, nets: dict[str, Mlp], seed: int = 0, extra: dict | None = None) -> None:
    """Write nets (ordered by dict insertion) plus metadata to `path`."""
    header = {
        "version": VERSION,
        "seed": int(seed),
        "nets": [
            {
                "name": name,
                "dropout_rate": net.dropout_rate,
                "layers": [
                    {
                        "in": int(l.weight.shape[1]),
                        "out": int(l.weight.shape[0]),
                        "activation": l.activation,
                    }
                    for l in net.layers
                ],
            }
            for name, net in nets.items()
        ],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for net in nets.values():
            for layer in net.layers:
                fh.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, Mlp], int, dict]:
    """Read a checkpoint; returns (nets, seed, extra)."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen

    nets: dict[str, Mlp] = {}
    for spec in header["nets"]:
        layers = []
        for lspec in spec["layers"]:
            n_in, n_out = lspec["in"], lspec["out"]
            w_bytes = n_out * n_in * 8
            weight = np.frombuffer(data, dtype="<f8", count=n_out * n_in, offset=offset).reshape(n_out, n_in)
            offset += w_bytes
            bias = np.frombuffer(data, dtype="<f8", count=n_out, offset=offset)
            offset += n_out * 8
            layers.append(Layer(weight=weight.copy(), bias=bias.copy(), activation=lspec["activation"]))
        nets[spec["name"]] = Mlp(layers=layers, dropout_rate=spec["dropout_rate"])
    if offset != len(data):
        raise ShapeError(f"{path}: {len(data) - offset} trailing bytes")
    return nets, header["seed"], header["extra"]
