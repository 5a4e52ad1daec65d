"""Self-describing binary container for named arrays, plus model checkpoints.

File layout: an 8-byte magic, a little-endian uint32 header length, a JSON
header (format version, metadata, per-array name/shape/dtype/offset), the
raw little-endian array payloads, and a trailing SHA-256 of everything
before it. Loading verifies the checksum and the format version before any
array is materialized, so a truncated or corrupted file never half-loads.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..actions import ChannelLayout, Standardizer
from ..draft import DraftModel
from ..flowpolicy import ContextEncoder, ObsNormalizer, VelocityField
from ..nets import Mlp

MAGIC = b"SFARRAYS"
FORMAT_VERSION = 1

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class CheckpointError(RuntimeError):
    pass


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype,
                "offset": len(payload),
                "nbytes": len(data),
            }
        )
        payload.extend(data)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(header)) + header + bytes(payload)
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(body + digest)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 + 32 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted or truncated)")
    (header_len,) = struct.unpack("<I", body[len(MAGIC) : len(MAGIC) + 4])
    header_start = len(MAGIC) + 4
    header = json.loads(body[header_start : header_start + header_len].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} is not {FORMAT_VERSION}"
        )
    payload = body[header_start + header_len :]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.float64) if entry["dtype"] == "<f8" else arr.copy()
    return arrays, header["meta"]


def _mlp_arrays(prefix: str, net: Mlp) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out


def _mlp_from_arrays(prefix: str, n_layers: int, arrays: dict[str, np.ndarray]) -> Mlp:
    weights = [arrays[f"{prefix}.w{i}"] for i in range(n_layers)]
    biases = [arrays[f"{prefix}.b{i}"] for i in range(n_layers)]
    return Mlp(weights=[w.copy() for w in weights], biases=[b.copy() for b in biases])


def _normalizer_arrays(norm: ObsNormalizer) -> dict[str, np.ndarray]:
    return {
        "norm.world_mean": norm.world_mean,
        "norm.world_std": norm.world_std,
        "norm.state_mean": norm.state_mean,
        "norm.state_std": norm.state_std,
    }


def _normalizer_from_arrays(arrays: dict[str, np.ndarray]) -> ObsNormalizer:
    return ObsNormalizer(
        world_mean=arrays["norm.world_mean"],
        world_std=arrays["norm.world_std"],
        state_mean=arrays["norm.state_mean"],
        state_std=arrays["norm.state_std"],
    )


def save_main_checkpoint(
    path: str | Path,
    encoder: ContextEncoder,
    field: VelocityField,
    standardizer: Standardizer,
    meta: dict | None = None,
) -> None:
    assert field.layout is not None
    arrays = {
        **_mlp_arrays("encoder", encoder.net),
        **_mlp_arrays("field", field.net),
        **_normalizer_arrays(encoder.normalizer),
        "std.mean": standardizer.mean,
        "std.std": standardizer.std,
    }
    full_meta = {
        "kind": "main",
        "encoder_layers": len(encoder.net.weights),
        "field_layers": len(field.net.weights),
        "n_tasks": encoder.n_tasks,
        "horizon": field.horizon,
        "emb_dim": field.emb_dim,
        "state_dim": field.state_dim,
        "layout": {"pos_dims": field.layout.pos_dims, "rot_dims": field.layout.rot_dims},
        **(meta or {}),
    }
    save_arrays(path, arrays, full_meta)


def load_main_checkpoint(
    path: str | Path,
) -> tuple[ContextEncoder, VelocityField, Standardizer, dict]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "main":
        raise CheckpointError(f"{path}: expected a main-policy checkpoint")
    layout = ChannelLayout(**meta["layout"])
    normalizer = _normalizer_from_arrays(arrays)
    encoder = ContextEncoder(
        net=_mlp_from_arrays("encoder", meta["encoder_layers"], arrays),
        n_tasks=meta["n_tasks"],
        normalizer=normalizer,
    )
    field = VelocityField(
        net=_mlp_from_arrays("field", meta["field_layers"], arrays),
        horizon=meta["horizon"],
        dim=layout.dim,
        emb_dim=meta["emb_dim"],
        state_dim=meta["state_dim"],
        layout=layout,
    )
    standardizer = Standardizer(mean=arrays["std.mean"], std=arrays["std.std"])
    return encoder, field, standardizer, meta


def save_draft_checkpoint(path: str | Path, model: DraftModel, meta: dict | None = None) -> None:
    arrays = {
        **_mlp_arrays("draft", model.net),
        **_normalizer_arrays(model.normalizer),
    }
    full_meta = {
        "kind": "draft",
        "draft_layers": len(model.net.weights),
        "n_tasks": model.n_tasks,
        "horizon": model.horizon,
        "layout": {"pos_dims": model.layout.pos_dims, "rot_dims": model.layout.rot_dims},
        **(meta or {}),
    }
    save_arrays(path, arrays, full_meta)


def load_draft_checkpoint(path: str | Path) -> tuple[DraftModel, dict]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "draft":
        raise CheckpointError(f"{path}: expected a draft checkpoint")
    model = DraftModel(
        net=_mlp_from_arrays("draft", meta["draft_layers"], arrays),
        layout=ChannelLayout(**meta["layout"]),
        horizon=meta["horizon"],
        n_tasks=meta["n_tasks"],
        normalizer=_normalizer_from_arrays(arrays),
    )
    return model, meta
