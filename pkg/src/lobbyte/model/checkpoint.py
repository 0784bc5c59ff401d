"""Self-describing checkpoint archive.

A checkpoint is a zip file holding::

    manifest.json        format name/version, model config, tensor index, extra state
    tensors/<name>.npy   one array per named tensor (numpy .npy encoding)

Tensor names use the module path (``stage.encoder.blocks.0.mixer.A_log``);
optimizer moments are stored under ``optim/<slot>/<param name>``.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig

FORMAT = "lobbyte-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ConfigMismatch(CheckpointError):
    pass


def _npy_bytes(t: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    np.save(buf, t.detach().cpu().numpy(), allow_pickle=False)
    return buf.getvalue()


def save_archive(path, tensors: dict[str, torch.Tensor], config: ModelConfig, extra: dict | None = None):
    path = Path(path)
    index = {k: {"shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")}
             for k, v in tensors.items()}
    manifest = {"format": FORMAT, "version": FORMAT_VERSION, "config": config.to_dict(),
                "tensors": index, "extra": extra or {}}
    tmp = path.with_suffix(path.suffix + ".tmp")
    # fixed timestamps keep archives byte-identical for identical content
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as z:
        z.writestr(zipfile.ZipInfo("manifest.json", (1980, 1, 1, 0, 0, 0)),
                   json.dumps(manifest, sort_keys=True, indent=1))
        for k in sorted(tensors):
            z.writestr(zipfile.ZipInfo(f"tensors/{k}.npy", (1980, 1, 1, 0, 0, 0)), _npy_bytes(tensors[k]))
    tmp.replace(path)


def load_archive(path) -> tuple[dict[str, torch.Tensor], ModelConfig, dict]:
    try:
        z = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e
    with z:
        try:
            manifest = json.loads(z.read("manifest.json"))
        except KeyError:
            raise CheckpointError(f"{path}: no manifest")
        if manifest.get("format") != FORMAT:
            raise CheckpointError(f"{path}: not a {FORMAT} archive")
        if manifest.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
        tensors = {}
        for k in manifest["tensors"]:
            arr = np.load(io.BytesIO(z.read(f"tensors/{k}.npy")), allow_pickle=False)
            tensors[k] = torch.from_numpy(arr.copy())
    return tensors, ModelConfig.from_dict(manifest["config"]), manifest.get("extra", {})


def save_model(path, model, extra: dict | None = None):
    save_archive(path, dict(model.state_dict()), model.cfg, extra)


def load_model(path, backend=None, expect: ModelConfig | None = None):
    from .hnet import build_model

    tensors, cfg, extra = load_archive(path)
    if expect is not None and expect.to_dict() != cfg.to_dict():
        raise ConfigMismatch("checkpoint model config differs from the requested one")
    params = {k: v for k, v in tensors.items() if not k.startswith("optim/")}
    dtype = next(iter(params.values())).dtype if params else torch.float32
    model = build_model(cfg, dtype=dtype, backend=backend)
    model.load_state_dict(params)
    return model, extra
