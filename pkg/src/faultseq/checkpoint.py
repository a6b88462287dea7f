"""Checkpoint format: JSON manifest plus raw little-endian float64 payload.

A checkpoint directory holds ``manifest.json`` (parameter names, shapes,
byte offsets, and the hyperparameters needed to rebuild the object) and
``params.bin`` (each parameter's buffer, row-major ``<f8``, concatenated
in manifest order).
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .classifier import ClassifierHead
from .embeddings import PositionalConfig
from .encoder import EncoderConfig
from .pretrain import MultimodalPretrainModel, UnimodalPretrainModel
from .tokens import VocabSizes

FORMAT_VERSION = 1


def save_params(out_dir: Path, params: dict[str, T.Tensor], meta: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name in sorted(params):
        buf = np.ascontiguousarray(params[name].data, dtype="<f8")
        entries.append({"name": name, "shape": list(buf.shape), "offset": offset})
        chunks.append(buf.tobytes())
        offset += buf.nbytes
    manifest = {"format": FORMAT_VERSION, "meta": meta, "params": entries}
    (out_dir / "params.bin").write_bytes(b"".join(chunks))
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))


def load_params(ckpt_dir: Path) -> tuple[dict[str, np.ndarray], dict]:
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "manifest.json").read_text())
    if manifest.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    blob = (ckpt_dir / "params.bin").read_bytes()
    arrays = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=start).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
    return arrays, manifest["meta"]


def restore_into(params: dict[str, T.Tensor], arrays: dict[str, np.ndarray]) -> None:
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, p in params.items():
        if p.data.shape != arrays[name].shape:
            raise ValueError(
                f"shape mismatch for {name}: {p.data.shape} vs {arrays[name].shape}"
            )
        p.data[:] = arrays[name]


# -- typed save/load helpers -----------------------------------------------------


def save_pretrain_model(
    out_dir: Path,
    model: MultimodalPretrainModel | UnimodalPretrainModel,
    extra_meta: dict | None = None,
) -> None:
    multimodal = isinstance(model, MultimodalPretrainModel)
    meta = {
        "kind": "multimodal" if multimodal else "unimodal",
        "encoder": asdict(model.encoder.cfg),
        "positional": asdict(model.encoder.pos_cfg),
        "sizes": asdict(model.sizes),
    }
    if multimodal:
        meta["env_fusion"] = model.encoder.env_tables.fusion
    if extra_meta:
        meta.update(extra_meta)
    save_params(out_dir, model.parameters(), meta)


def load_pretrain_model(ckpt_dir: Path) -> MultimodalPretrainModel | UnimodalPretrainModel:
    arrays, meta = load_params(ckpt_dir)
    sizes = VocabSizes(**meta["sizes"])
    enc_cfg = EncoderConfig(**meta["encoder"])
    if meta["kind"] == "multimodal":
        model = MultimodalPretrainModel(sizes, enc_cfg, env_fusion=meta.get("env_fusion", "concat"))
    elif meta["kind"] == "unimodal":
        model = UnimodalPretrainModel(sizes, enc_cfg)
    else:
        raise ValueError(f"unknown model kind {meta['kind']!r}")
    model.encoder.pos_cfg = PositionalConfig(**meta["positional"])
    restore_into(model.parameters(), arrays)
    return model


def save_head(out_dir: Path, head: ClassifierHead, extra_meta: dict | None = None) -> None:
    meta = {
        "kind": "classifier_head",
        "in_dim": head.in_dim,
        "k_labels": head.k_labels,
        "width": head.width,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_params(out_dir, head.parameters(), meta)


def load_head(ckpt_dir: Path) -> ClassifierHead:
    arrays, meta = load_params(ckpt_dir)
    if meta.get("kind") != "classifier_head":
        raise ValueError(f"not a classifier head checkpoint: {meta.get('kind')!r}")
    head = ClassifierHead(meta["in_dim"], meta["k_labels"], meta["width"])
    restore_into(head.parameters(), arrays)
    return head
