"""Binary checkpoint container.

Layout (little endian):

    8 bytes   magic b"STFFTCKP"
    u32       format version
    u64       header length H
    H bytes   UTF-8 JSON header
    u32       CRC32 of the header
    payload   tensors back to back, offsets relative to the payload start
    u32       CRC32 of the payload

The header holds the model and train configs, seed, precision, the counted
parameter total and a tensor table (name, dtype, shape, offset, nbytes).
"""

import json
import struct
import zlib

import numpy as np

MAGIC = b"STFFTCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, train_config=None, extra=None):
    tensors = model.state()
    table = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        b = a.tobytes()
        table.append(dict(name=name, dtype=a.dtype.str, shape=list(a.shape), offset=offset, nbytes=len(b)))
        chunks.append(b)
        offset += len(b)
    header = dict(
        config=model.config.to_dict(),
        train=train_config.to_dict() if train_config is not None else None,
        seed=model.config.seed,
        precision=model.precision,
        param_count=model.num_parameters(),
        tensors=table,
        extra=extra or {},
    )
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(struct.pack("<I", zlib.crc32(hbytes)))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def read_checkpoint(path):
    """Return (header dict, {name: array}); raises CheckpointError on any damage."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = 20
    if len(blob) < start + hlen + 4:
        raise CheckpointError("checkpoint truncated inside the header")
    hbytes = blob[start : start + hlen]
    (hcrc,) = struct.unpack_from("<I", blob, start + hlen)
    if zlib.crc32(hbytes) != hcrc:
        raise CheckpointError("checkpoint header is corrupted (CRC mismatch)")
    try:
        header = json.loads(hbytes.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable header: {e}") from None
    pstart = start + hlen + 4
    size = sum(t["nbytes"] for t in header["tensors"])
    if len(blob) < pstart + size + 4:
        raise CheckpointError("checkpoint truncated inside the payload")
    payload = blob[pstart : pstart + size]
    (pcrc,) = struct.unpack_from("<I", blob, pstart + size)
    if zlib.crc32(payload) != pcrc:
        raise CheckpointError("checkpoint payload is corrupted (CRC mismatch)")
    tensors = {}
    for t in header["tensors"]:
        a = np.frombuffer(payload, dtype=np.dtype(t["dtype"]), count=int(np.prod(t["shape"], dtype=int)), offset=t["offset"])
        tensors[t["name"]] = a.reshape(t["shape"]).copy()
    return header, tensors


def load_checkpoint(path):
    """Rebuild the model stored at `path`; returns (model, header)."""
    from .model import ModelConfig, SteerableNet

    header, tensors = read_checkpoint(path)
    model = SteerableNet(ModelConfig.from_dict(header["config"]), header.get("precision", "single"))
    model.load_state(tensors)
    return model, header
