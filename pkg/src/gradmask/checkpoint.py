"""GMTCKPT v1 checkpoint format.

Layout:

    b"GMTCKPT v1\\n"
    for each parameter, in registry order:
        <name> <dim0,dim1,...> <raw little-endian float64 values>
    <8-byte little-endian FNV-1a 64 checksum of all value bytes>

Names contain no spaces; the value block length is determined by the
declared shape, so records are parsed greedily until exactly the 8
checksum bytes remain. Round-trips are bit-exact (NaN payloads and signed
zeros survive unchanged).
"""

import struct
from collections import OrderedDict

import numpy as np

from gradmask import backend as K

HEADER = b"GMTCKPT v1\n"


class CheckpointError(ValueError):
    """Malformed checkpoint file or registry mismatch."""


def fnv1a64(data):
    """64-bit FNV-1a hash of a bytes-like object."""
    return int(K.fnv1a64(bytes(data)))


def save_checkpoint(path, params):
    """Write named float64 arrays (an ordered name->array mapping).

    Accepts a ParamRegistry as well (anything with snapshot()).
    """
    if hasattr(params, "snapshot"):
        params = params.snapshot()
    chunks = [HEADER]
    value_bytes = []
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if " " in name:
            raise CheckpointError(f"parameter name {name!r} contains a space")
        shape = ",".join(str(d) for d in arr.shape) or "1"
        raw = arr.astype("<f8", copy=False).tobytes()
        chunks.append(name.encode("ascii") + b" " + shape.encode("ascii") + b" " + raw)
        value_bytes.append(raw)
    checksum = fnv1a64(b"".join(value_bytes))
    chunks.append(struct.pack("<Q", checksum))
    blob = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(blob)
    return checksum


def registry_checksum(params):
    """Checksum of the value bytes alone (what the file trailer holds)."""
    if hasattr(params, "snapshot"):
        params = params.snapshot()
    raw = b"".join(
        np.ascontiguousarray(a, dtype=np.float64).astype("<f8", copy=False).tobytes()
        for a in params.values()
    )
    return fnv1a64(raw)


def load_checkpoint(path):
    """Read a checkpoint into an ordered name->array mapping."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(HEADER):
        raise CheckpointError(f"{path}: missing GMTCKPT v1 header")
    pos = len(HEADER)
    params = OrderedDict()
    value_bytes = []
    while len(blob) - pos > 8:
        sp1 = blob.index(b" ", pos)
        name = blob[pos:sp1].decode("ascii")
        sp2 = blob.index(b" ", sp1 + 1)
        shape = tuple(int(d) for d in blob[sp1 + 1:sp2].decode("ascii").split(","))
        count = int(np.prod(shape, dtype=np.int64))
        start = sp2 + 1
        end = start + 8 * count
        if end > len(blob) - 8:
            raise CheckpointError(f"{path}: truncated value block for {name!r}")
        raw = blob[start:end]
        params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        value_bytes.append(raw)
        pos = end
    if len(blob) - pos != 8:
        raise CheckpointError(f"{path}: malformed record structure")
    (stored,) = struct.unpack("<Q", blob[pos:])
    actual = fnv1a64(b"".join(value_bytes))
    if stored != actual:
        raise CheckpointError(
            f"{path}: checksum mismatch (stored {stored:#018x}, computed {actual:#018x})")
    return params


def load_into_registry(path, registry):
    """Load a checkpoint and copy values into a matching registry."""
    params = load_checkpoint(path)
    expected = registry.name_shape_map()
    got = {name: arr.shape for name, arr in params.items()}
    if expected != got:
        for name in expected:
            if name not in got or got[name] != expected[name]:
                raise CheckpointError(
                    f"{path}: registry mismatch at {name!r}: "
                    f"file has {got.get(name)}, registry has {expected[name]}")
        extra = next(iter(set(got) - set(expected)))
        raise CheckpointError(f"{path}: unexpected parameter {extra!r}")
    registry.load_values(params)
    return params
