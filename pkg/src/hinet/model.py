"""Model container and the weight-file format.

A weight file is::

    b"HINETW01" | uint64 LE header length | JSON header | tensor blobs

The JSON header stores the architecture config and, per tensor, its name,
shape, dtype (always ``<f4``), byte offset and byte length relative to the
start of the blob section.  Blobs are flat little-endian float32 in C order.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .encoder import ModelConfig, init_weights, predict_decoder_params, weight_shapes

MAGIC = b"HINETW01"
FORMAT_VERSION = 1


@dataclass
class Model:
    config: ModelConfig
    weights: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config=None, seed=0):
        config = ModelConfig() if config is None else config
        return cls(config, init_weights(config, seed), {"seed": seed})

    def decoder_params(self, img, mask):
        return predict_decoder_params(img, mask, self.weights, self.config)

    def num_parameters(self):
        return int(sum(v.size for v in self.weights.values()))

    def copy(self):
        return Model(self.config, {k: v.copy() for k, v in self.weights.items()}, dict(self.meta))


def save_weights(model, path):
    tensors = []
    blobs = []
    offset = 0
    for name in sorted(model.weights):
        arr = np.ascontiguousarray(model.weights[name], dtype="<f4")
        data = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "<f4",
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "meta": model.meta,
        "tensors": tensors,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for data in blobs:
            fh.write(data)


def read_header(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a hinet weight file")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8")), len(MAGIC) + 8 + n


def load_weights(path):
    header, start = read_header(path)
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {header.get('format_version')}")
    config = ModelConfig.from_dict(header["config"])
    with open(path, "rb") as fh:
        fh.seek(start)
        blob = fh.read()
    weights = {}
    for t in header["tensors"]:
        if t["dtype"] != "<f4":
            raise ValueError(f"{path}: tensor {t['name']} has unsupported dtype {t['dtype']}")
        raw = blob[t["offset"]:t["offset"] + t["nbytes"]]
        if len(raw) != t["nbytes"]:
            raise ValueError(f"{path}: truncated tensor {t['name']}")
        weights[t["name"]] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(t["shape"])
    expected = weight_shapes(config)
    if set(expected) != set(weights):
        missing = sorted(set(expected) - set(weights))
        extra = sorted(set(weights) - set(expected))
        raise ValueError(f"{path}: tensor set mismatch (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if tuple(weights[name].shape) != tuple(shape):
            raise ValueError(f"{path}: tensor {name} has shape {weights[name].shape}, expected {shape}")
    return Model(config, weights, header.get("meta", {}))
