"""Binary checkpoints: 8-byte magic, little-endian uint64 header length, a
JSON header, then every array as contiguous little-endian float64."""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataFormatError
from .geometry import SPHERICAL, ManifoldKind, Transport
from .trainer import ModelParams

MAGIC = b"GTKGCKPT"
VERSION = 1


def _arrays(params: ModelParams):
    out = {}
    for m, X in enumerate(params.X):
        out[f"X/{m}"] = X
    for r, row in enumerate(params.transports):
        for m, t in enumerate(row):
            out[f"T/{r}/{m}/rotation"] = t.rotation
            if t.kind.tag == SPHERICAL:
                if t.plane is not None:
                    out[f"T/{r}/{m}/plane"] = t.plane
                    out[f"T/{r}/{m}/angle"] = np.array([t.angle])
            else:
                out[f"T/{r}/{m}/translation"] = t.translation
    out["beta"] = params.beta
    out["tau"] = params.tau
    out["logits"] = params.logits
    keys = sorted(params.alpha)
    out["alpha"] = np.array([params.alpha[k] for k in keys], dtype=float)
    return out, [list(map(int, k)) for k in keys]


def save_checkpoint(params: ModelParams, path, meta: dict | None = None) -> None:
    """Write params plus free-form `meta` (config, bounds, seed) to `path`."""
    arrays, alpha_keys = _arrays(params)
    manifest, offset = [], 0
    for name, a in arrays.items():
        a = np.asarray(a, dtype="<f8")
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
    header = {
        "version": VERSION,
        "tags": list(params.tags),
        "dims": [int(X.shape[-1]) if tag != SPHERICAL else int(X.shape[-1]) - 1 for tag, X in zip(params.tags, params.X)],
        "n_entities": params.n_entities,
        "n_relations": params.n_relations,
        "bins": [int(b) for b in params.bins],
        "alpha_keys": alpha_keys,
        "arrays": manifest,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    if fh.read(len(MAGIC)) != MAGIC:
        raise DataFormatError("not a checkpoint file")
    raw = fh.read(8)
    if len(raw) != 8:
        raise DataFormatError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", raw)
    try:
        header = json.loads(fh.read(n).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != VERSION:
        raise DataFormatError(f"unsupported checkpoint version {header.get('version')}")
    return header


def load_checkpoint(path):
    """Return (params, meta)."""
    with open(path, "rb") as fh:
        header = _read_header(fh)
        flat = np.frombuffer(fh.read(), dtype="<f8")
    arrays = {}
    for entry in header["arrays"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        lo = entry["offset"]
        if lo + size > flat.size:
            raise DataFormatError(f"array {entry['name']} runs past the end of the file")
        arrays[entry["name"]] = flat[lo:lo + size].reshape(entry["shape"]).astype(float)
    tags = tuple(header["tags"])
    transports = []
    for r in range(header["n_relations"]):
        row = []
        for m, (tag, dim) in enumerate(zip(tags, header["dims"])):
            kind = ManifoldKind(tag, dim)
            key = f"T/{r}/{m}/"
            if tag == SPHERICAL:
                plane = arrays.get(key + "plane")
                angle = float(arrays[key + "angle"][0]) if plane is not None else 0.0
                row.append(Transport(kind, arrays[key + "rotation"], plane=plane, angle=angle))
            else:
                row.append(Transport(kind, arrays[key + "rotation"], arrays[key + "translation"]))
        transports.append(row)
    alpha = {tuple(k): float(v) for k, v in zip(header["alpha_keys"], arrays["alpha"])}
    params = ModelParams(
        tags=tags,
        X=[arrays[f"X/{m}"] for m in range(len(tags))],
        transports=transports,
        beta=arrays["beta"],
        tau=arrays["tau"],
        alpha=alpha,
        logits=arrays["logits"],
        bins=tuple(header["bins"]),
    )
    return params, header["meta"]
