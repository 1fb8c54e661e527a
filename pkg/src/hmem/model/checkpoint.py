"""Checkpoint file format.

Layout: 8 magic bytes, a little-endian uint64 manifest length, a UTF-8
JSON manifest (format version, config, dims, vocabulary digests, array
descriptors), then the raw little-endian float64 array bytes in manifest
order. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointFormatError
from ..memory import HarmonyParams, WeightingParams
from .params import EmbeddingTable, ModelParams, TrainConfig

MAGIC = b"HMEMCKPT"
FORMAT_VERSION = 1


def save_checkpoint(
    params: ModelParams,
    cfg: TrainConfig,
    path,
    vocab_hashes: dict[str, str] | None = None,
    extra: dict | None = None,
) -> None:
    blocks = params.blocks()
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "dims": {
            "n_entities": params.emb.n_entities,
            "n_relations": params.emb.n_relations,
            "d_e": params.emb.d_e,
            "d_r": params.emb.d_r,
            "m": cfg.m,
        },
        "parameter_count": params.n_parameters(),
        "vocab": vocab_hashes or {},
        "arrays": [
            {"name": name, "shape": list(arr.shape)} for name, arr in blocks.items()
        ],
    }
    if extra:
        manifest["extra"] = extra
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for arr in blocks.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, TrainConfig, dict]:
    """Read a checkpoint; returns (params, config, manifest)."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic)")
    (manifest_len,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    header_end = len(MAGIC) + 8 + manifest_len
    if len(raw) < header_end:
        raise CheckpointFormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[len(MAGIC) + 8 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: unreadable manifest: {e}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"{path}: unsupported format version {manifest.get('format_version')}"
        )
    cfg = TrainConfig.from_dict(manifest["config"])

    arrays: dict[str, np.ndarray] = {}
    offset = header_end
    for desc in manifest["arrays"]:
        shape = tuple(desc["shape"])
        nbytes = 8 * int(np.prod(shape)) if shape else 8
        if offset + nbytes > len(raw):
            raise CheckpointFormatError(f"{path}: truncated array {desc['name']!r}")
        arrays[desc["name"]] = (
            np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset += nbytes
    if offset != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - offset} trailing bytes")

    expected = {
        "entities",
        "relations_left",
        "relations_right",
        "w_score",
        "b_score",
        "w_global",
        "b_harmony",
        "w_map",
        "b_map",
    }
    missing = expected - set(arrays)
    if missing:
        raise CheckpointFormatError(f"{path}: missing arrays {sorted(missing)}")

    params = ModelParams(
        emb=EmbeddingTable(
            arrays["entities"], arrays["relations_left"], arrays["relations_right"]
        ),
        weighting=WeightingParams(arrays["w_score"], arrays["b_score"]),
        harmony=HarmonyParams(
            arrays["w_global"],
            arrays["b_harmony"],
            arrays["w_map"],
            arrays["b_map"],
            cfg.lam,
        ),
        implicit_memories=arrays.get("implicit_memories"),
    )
    return params, cfg, manifest
