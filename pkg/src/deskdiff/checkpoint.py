"""PTLB1 checkpoint container.

Layout: the magic bytes ``PTLB1\\n``, an 8-byte little-endian manifest
length, the UTF-8 JSON manifest, then the payload of concatenated float32
little-endian tensors. The manifest records each tensor's name, shape, byte
offset and length (offsets tile the payload exactly), the trainable flags,
the vocabulary, schedule parameters, model dimensions, metadata and a CRC-32
of the payload. Fixed endianness and canonical JSON make the file byte-stable
across platforms: save -> load -> save reproduces identical bytes.
"""

from __future__ import annotations

import json
import logging
import zlib
from pathlib import Path

import numpy as np

from .bundle import ModelBundle, ModelDims
from .diffusion import build_schedule
from .errors import CheckpointError
from .nncore import ParamSet
from .tokenizer import Vocabulary

MAGIC = b"PTLB1\n"
logger = logging.getLogger(__name__)


def save_checkpoint(bundle: ModelBundle, path: str | Path) -> None:
    names = sorted(bundle.params.names())
    tensors = []
    chunks = []
    offset = 0
    for name in names:
        value = np.ascontiguousarray(bundle.params.value(name), dtype="<f4")
        raw = value.tobytes()
        tensors.append(
            {
                "name": name,
                "dtype": "f32",
                "shape": list(value.shape),
                "offset": offset,
                "length": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format_version": 1,
        "tensors": tensors,
        "trainable": {name: bundle.params.trainable(name) for name in names},
        "vocabulary": {
            "entries": [{"surface": s, "kind": k} for s, k in bundle.vocab.entries()],
            "base_size": bundle.vocab.base_size,
        },
        "schedule": {
            "steps": bundle.schedule.steps,
            "beta_start": float(bundle.schedule.betas[0]),
            "beta_end": float(bundle.schedule.betas[-1]),
        },
        "dims": {
            "latent_width": bundle.dims.latent_width,
            "image_shape": list(bundle.dims.image_shape),
            "embed_width": bundle.dims.embed_width,
            "cond_width": bundle.dims.cond_width,
            "mixer_hidden": bundle.dims.mixer_hidden,
            "max_prompt_tokens": bundle.dims.max_prompt_tokens,
            "time_embed_width": bundle.dims.time_embed_width,
            "denoiser_hidden": bundle.dims.denoiser_hidden,
        },
        "meta": bundle.meta,
        "payload_crc32": zlib.crc32(payload),
        "payload_length": len(payload),
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path: str | Path, expected_config_hash: str | None = None) -> ModelBundle:
    """Read and fully validate a container; any inconsistency is an error."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic bytes in {path}")
    cursor = len(MAGIC)
    if len(data) < cursor + 8:
        raise CheckpointError(f"truncated header in {path}")
    manifest_len = int.from_bytes(data[cursor : cursor + 8], "little")
    cursor += 8
    if len(data) < cursor + manifest_len:
        raise CheckpointError(f"truncated manifest in {path}")
    try:
        manifest = json.loads(data[cursor : cursor + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed manifest in {path}: {exc}") from exc
    cursor += manifest_len
    payload = data[cursor:]

    if len(payload) != manifest["payload_length"]:
        raise CheckpointError(
            f"payload length {len(payload)} != manifest {manifest['payload_length']}"
        )
    if zlib.crc32(payload) != manifest["payload_crc32"]:
        raise CheckpointError(f"payload checksum mismatch in {path}")

    entries = sorted(manifest["tensors"], key=lambda t: t["offset"])
    expected_offset = 0
    for entry in entries:
        if entry["offset"] != expected_offset:
            raise CheckpointError(
                f"tensor {entry['name']} at offset {entry['offset']}, expected {expected_offset}"
            )
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if entry["dtype"] != "f32":
            raise CheckpointError(f"unsupported dtype {entry['dtype']!r}")
        if size * 4 != entry["length"]:
            raise CheckpointError(
                f"tensor {entry['name']} shape {entry['shape']} inconsistent with "
                f"length {entry['length']}"
            )
        expected_offset += entry["length"]
    if expected_offset != len(payload):
        raise CheckpointError("tensor entries do not tile the payload exactly")

    params = ParamSet()
    trainable = manifest["trainable"]
    for entry in manifest["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["length"]]
        value = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        params.add(entry["name"], value, trainable=bool(trainable[entry["name"]]))

    vocab = Vocabulary.from_entries(
        [(e["surface"], e["kind"]) for e in manifest["vocabulary"]["entries"]],
        manifest["vocabulary"]["base_size"],
    )
    embedding_rows = (
        params.value("textenc.embeddings").shape[0] + params.value("textenc.nouveau").shape[0]
    )
    if embedding_rows != len(vocab):
        raise CheckpointError(
            f"vocabulary size {len(vocab)} != embedding rows {embedding_rows}"
        )
    if params.value("textenc.embeddings").shape[0] != vocab.base_size:
        raise CheckpointError("base embedding rows do not match vocabulary base size")

    sched = manifest["schedule"]
    schedule = build_schedule(sched["steps"], sched["beta_start"], sched["beta_end"])
    dims_data = dict(manifest["dims"])
    dims_data["image_shape"] = tuple(dims_data["image_shape"])
    dims = ModelDims(**dims_data)
    meta = manifest["meta"]
    if expected_config_hash is not None and meta.get("config_hash") != expected_config_hash:
        logger.warning(
            "checkpoint %s was produced under a different config (hash %s != %s)",
            path,
            meta.get("config_hash"),
            expected_config_hash,
        )
    return ModelBundle(vocab=vocab, params=params, schedule=schedule, dims=dims, meta=meta)
