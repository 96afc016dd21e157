"""vvol container: length-prefixed JSON header + raw little-endian payload.

Layout: 8-byte little-endian uint64 giving the byte length of the UTF-8 JSON
header (newline included), then the header, then the payload as C-order
little-endian samples. dtypes: f32, c64 (interleaved f32 re/im), u8, u32.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .volume import OctVolume, OctaStack, ScanProtocol, get_protocol

SEMANTICS = ("oct", "octa_unnorm", "octa_norm", "mask", "ids", "surface", "alpha")

_DTYPES = {
    "f32": np.dtype("<f4"),
    "c64": np.dtype("<c8"),
    "u8": np.dtype("<u1"),
    "u32": np.dtype("<u4"),
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


def _protocol_to_dict(p: ScanProtocol) -> dict:
    d = dataclasses.asdict(p)
    d["fov_mm"] = list(d["fov_mm"])
    return d


def _protocol_from_dict(d: dict) -> ScanProtocol:
    d = dict(d)
    d["fov_mm"] = tuple(d["fov_mm"])
    return ScanProtocol(**d)


def write_array(path, data: np.ndarray, semantic: str,
                protocol: ScanProtocol | None = None, meta: dict | None = None):
    """Write one array to a .vvol file."""
    if semantic not in SEMANTICS:
        raise ValueError(f"unknown semantic {semantic!r}")
    dt = np.dtype(data.dtype).newbyteorder("<")
    if dt not in _DTYPE_NAMES:
        raise ValueError(f"unsupported dtype {data.dtype}")
    header = {
        "dims": list(data.shape),
        "dtype": _DTYPE_NAMES[dt],
        "semantic": semantic,
        "protocol": _protocol_to_dict(protocol) if protocol else None,
        "meta": meta or {},
    }
    blob = (json.dumps(header, sort_keys=True) + "\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(np.uint64(len(blob)).tobytes())
        f.write(blob)
        f.write(np.ascontiguousarray(data.astype(dt, copy=False)).tobytes())


def read_array(path) -> tuple[np.ndarray, dict]:
    """Read a .vvol file; returns (array, header dict)."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated (no header length)")
    hlen = int(np.frombuffer(raw[:8], dtype="<u8")[0])
    if len(raw) < 8 + hlen:
        raise ValueError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: malformed header: {e}") from e
    for key in ("dims", "dtype", "semantic"):
        if key not in header:
            raise ValueError(f"{path}: header missing {key!r}")
    if header["dtype"] not in _DTYPES:
        raise ValueError(f"{path}: unsupported dtype {header['dtype']!r}")
    dt = _DTYPES[header["dtype"]]
    dims = tuple(int(d) for d in header["dims"])
    want = int(np.prod(dims)) * dt.itemsize
    payload = raw[8 + hlen:]
    if len(payload) != want:
        raise ValueError(f"{path}: payload {len(payload)} bytes, dims need {want}")
    data = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
    return data, header


def write_volume(path, vol: OctVolume):
    dtype = np.complex64 if vol.kind == "complex" else np.float32
    write_array(path, vol.data.astype(dtype, copy=False), "oct",
                protocol=vol.protocol, meta={"kind": vol.kind})


def read_volume(path) -> OctVolume:
    data, header = read_array(path)
    if header["semantic"] != "oct":
        raise ValueError(f"{path}: semantic {header['semantic']!r}, expected oct")
    if header.get("protocol") is None:
        raise ValueError(f"{path}: oct volume without protocol")
    proto = _protocol_from_dict(header["protocol"])
    kind = header.get("meta", {}).get("kind", "amplitude")
    return OctVolume(data=data, protocol=proto, kind=kind)


def write_stack(path_unnorm, path_norm, stack: OctaStack):
    write_array(path_unnorm, stack.unnormalized.astype(np.float32, copy=False),
                "octa_unnorm", protocol=stack.protocol)
    write_array(path_norm, stack.normalized.astype(np.float32, copy=False),
                "octa_norm", protocol=stack.protocol)


def read_stack(path_unnorm, path_norm) -> OctaStack:
    unnorm, h1 = read_array(path_unnorm)
    norm, h2 = read_array(path_norm)
    if h1["semantic"] != "octa_unnorm" or h2["semantic"] != "octa_norm":
        raise ValueError("semantic mismatch for stack files")
    proto = _protocol_from_dict(h1["protocol"])
    return OctaStack(unnormalized=unnorm, normalized=norm, protocol=proto)
