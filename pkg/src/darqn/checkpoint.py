"""Binary checkpoint format.

Layout (all integers u32 little-endian)::

    b"DARQ" | version | architecture id | records...
    record = name length | name (utf-8) | rank | dims[rank] | f64 LE data

Records run to end of file. Architecture ids index ``agent.MODELS``.
"""
import struct
from collections import OrderedDict

import numpy as np

from .agent import MODELS, ParameterSet
from .numerics import Tensor

MAGIC = b"DARQ"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params, model):
    if model not in MODELS:
        raise CheckpointError(f"unknown model {model!r}")
    parts = [MAGIC, struct.pack("<II", VERSION, MODELS.index(model))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(t.data, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def loads(blob):
    """Return (model name, ParameterSet)."""
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("bad checkpoint: magic bytes do not match")
    version, arch_id = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"bad checkpoint: unsupported version {version}")
    if arch_id >= len(MODELS):
        raise CheckpointError(f"bad checkpoint: unknown architecture id {arch_id}")
    pos = 12
    tensors = OrderedDict()
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = 8 * count
            if pos + nbytes > len(blob):
                raise CheckpointError(f"bad checkpoint: truncated data for {name!r}")
            data = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += nbytes
            tensors[name] = Tensor(data.astype(np.float64), requires_grad=True, name=name)
    except struct.error as exc:
        raise CheckpointError(f"bad checkpoint: truncated record ({exc})")
    return MODELS[arch_id], ParameterSet(tensors)


def save(path, params, model):
    blob = dumps(params, model)
    with open(path, "wb") as fh:
        fh.write(blob)
    return path


def load(path, expect_model=None, expect_params=None):
    """Load a checkpoint, optionally checking model id and names/shapes."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}")
    model, params = loads(blob)
    if expect_model is not None and model != expect_model:
        raise CheckpointError(
            f"architecture mismatch: checkpoint holds {model}, config asks for {expect_model}")
    if expect_params is not None:
        if params.names() != expect_params.names():
            raise CheckpointError("architecture mismatch: parameter names differ")
        for k in params:
            if params[k].shape != expect_params[k].shape:
                raise CheckpointError(
                    f"architecture mismatch: {k} has shape {params[k].shape}, "
                    f"expected {expect_params[k].shape}")
    return model, params
