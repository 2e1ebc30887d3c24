"""Named-tensor checkpoints (``.npz``) with a ``model.json`` manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .models import model_from_description

CKPT_NAME = "ckpt_best.npz"
MANIFEST_NAME = "model.json"
MANIFEST_FORMAT = "gtnrec-model"


def save_params(path, params: dict) -> None:
    """Write ``name -> tensor`` as one array per name, shape preserved."""
    with Path(path).open("wb") as fh:
        np.savez(fh, **{name: t.data for name, t in params.items()})


def load_params(path) -> dict[str, np.ndarray]:
    try:
        with np.load(path, allow_pickle=False) as z:
            return {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc


def assign_params(model, arrays: dict[str, np.ndarray]) -> None:
    params = model.parameters()
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise CheckpointError(f"checkpoint/model mismatch: missing {missing}, unexpected {extra}")
    for name, t in params.items():
        if arrays[name].shape != t.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape}, model expects {t.shape}")
        t.set_data(arrays[name])


def save_checkpoint(out_dir, model, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_params(out_dir / CKPT_NAME, model.parameters())
    manifest = {"format": MANIFEST_FORMAT, "model": model.describe()}
    if extra:
        manifest.update(extra)
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out_dir / CKPT_NAME


def read_manifest(ckpt_dir) -> dict:
    path = Path(ckpt_dir) / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: cannot read manifest ({exc})") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise CheckpointError(f"{path}: not a {MANIFEST_FORMAT} manifest")
    return manifest


def load_checkpoint(ckpt_dir):
    """Rebuild the model described by ``model.json`` and load its trained weights."""
    manifest = read_manifest(ckpt_dir)
    model = model_from_description(manifest["model"])
    assign_params(model, load_params(Path(ckpt_dir) / CKPT_NAME))
    return model, manifest
