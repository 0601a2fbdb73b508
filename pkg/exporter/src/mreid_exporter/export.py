"""Manifest-driven embedding extraction.

Model identifiers:
  torchvision:<arch>[:<weights>]  e.g. torchvision:resnet18 (random init)
                                  or torchvision:resnet18:IMAGENET1K_V1
  torchscript:<path>              a scripted module taking (B, 3, S, S)
  hf:<repo_id>                    a Hugging Face checkpoint (needs network)

Preprocessing: crop to the annotation bbox when present (whole image
otherwise), stretch-resize to size x size, scale to [0, 1], normalize
with ImageNet statistics. Classification heads of torchvision models are
replaced with identity so the pooled feature vector comes out. Vectors
are written raw; unit normalization is the engine's job.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DecodeError, ImageNotFound, ManifestError, ModelLoadError

MREID_MAGIC = b"MREID1\x00\x00"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_HEAD_ATTRS = ("fc", "classifier", "head", "heads")


@dataclass(frozen=True)
class ManifestRow:
    annotation_id: str
    image_ref: str
    bbox: tuple[int, int, int, int] | None


def read_manifest(path: str | Path) -> list[ManifestRow]:
    """The engine's manifest CSV: header required, bbox columns optional."""
    rows: list[ManifestRow] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        data_lines = [ln for ln in fh if not ln.startswith("#")]
        reader = csv.DictReader(data_lines)
        if reader.fieldnames is None or "annotation_id" not in reader.fieldnames:
            raise ManifestError(f"{path}: missing header with annotation_id")
        for line_no, row in enumerate(reader, start=2):
            ann_id = (row.get("annotation_id") or "").strip()
            image_ref = (row.get("image_ref") or "").strip()
            if not ann_id:
                raise ManifestError(f"{path}:{line_no}: empty annotation_id")
            if ann_id in seen:
                raise ManifestError(f"{path}:{line_no}: duplicate id {ann_id!r}")
            seen.add(ann_id)
            if not image_ref:
                raise ManifestError(f"{path}:{line_no}: {ann_id!r} has no image_ref")
            raw = [(row.get(c) or "").strip()
                   for c in ("bbox_x", "bbox_y", "bbox_w", "bbox_h")]
            bbox = None
            if any(raw):
                if not all(raw):
                    raise ManifestError(f"{path}:{line_no}: partial bbox")
                x, y, w, h = (int(v) for v in raw)
                if min(x, y) < 0 or w <= 0 or h <= 0:
                    raise ManifestError(f"{path}:{line_no}: bad bbox {(x, y, w, h)}")
                bbox = (x, y, w, h)
            rows.append(ManifestRow(ann_id, image_ref, bbox))
    if not rows:
        raise ManifestError(f"{path}: no rows")
    return rows


def write_mreid(path: str | Path, ids: list[str], matrix: np.ndarray) -> None:
    """MREID1: magic, u32 count, u32 dim, float32 rows, u16-length id table."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MREID_MAGIC)
        fh.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.tobytes(order="C"))
        for ann_id in ids:
            raw = ann_id.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)


@dataclass(frozen=True)
class ExportJob:
    manifest: Path
    image_root: Path
    model: str
    out: Path
    size: int = 440
    batch_size: int = 16

    def __post_init__(self):
        if self.size <= 0:
            raise ManifestError("size must be positive")
        if self.batch_size < 1:
            raise ManifestError("batch_size must be >= 1")


class _Identity(torch.nn.Module):
    def forward(self, x):
        return x


def load_model(identifier: str) -> torch.nn.Module:
    """Resolve a model identifier to an eval-mode feature extractor."""
    try:
        kind, _, rest = identifier.partition(":")
        if kind == "torchvision":
            import torchvision.models as tvm

            arch, _, weights_name = rest.partition(":")
            if not hasattr(tvm, arch):
                raise ModelLoadError(f"unknown torchvision architecture {arch!r}")
            weights = None
            if weights_name:
                weights = tvm.get_model_weights(arch)[weights_name]
            model = getattr(tvm, arch)(weights=weights)
            for attr in _HEAD_ATTRS:
                if hasattr(model, attr):
                    setattr(model, attr, _Identity())
                    break
            else:
                raise ModelLoadError(
                    f"{arch}: no classification head found to discard"
                )
        elif kind == "torchscript":
            model = torch.jit.load(rest, map_location="cpu")
        elif kind == "hf":
            from transformers import AutoModel

            model = AutoModel.from_pretrained(rest, trust_remote_code=True)
        else:
            raise ModelLoadError(f"unknown model identifier scheme {kind!r}")
    except ModelLoadError:
        raise
    except Exception as exc:
        raise ModelLoadError(f"cannot load {identifier!r}: {exc}") from exc
    model.eval()
    return model


def _load_crop(path: Path, bbox, size: int) -> torch.Tensor:
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if bbox is not None:
                x, y, w, h = bbox
                img = img.crop((x, y, x + w, y + h))
            img = img.resize((size, size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DecodeError(str(path), str(exc)) from exc
    arr = (arr - np.asarray(IMAGENET_MEAN, dtype=np.float32)) / np.asarray(
        IMAGENET_STD, dtype=np.float32
    )
    return torch.from_numpy(arr.transpose(2, 0, 1))


def _as_feature_matrix(output) -> torch.Tensor:
    if isinstance(output, dict):
        for key in ("embeddings", "pooler_output", "last_hidden_state"):
            if key in output:
                output = output[key]
                break
        else:
            raise ModelLoadError(f"model output keys {list(output)} unusable")
    if output.ndim > 2:  # e.g. (B, T, D): mean over token axis
        output = output.mean(dim=tuple(range(1, output.ndim - 1)))
    return output


def export_embeddings(job: ExportJob) -> dict[str, object]:
    """Run the backbone over every manifest row, in manifest order.

    Returns a provenance summary; the embedding file and a provenance
    sidecar JSON land at job.out.
    """
    rows = read_manifest(job.manifest)
    missing = [
        str(job.image_root / r.image_ref)
        for r in rows
        if not (job.image_root / r.image_ref).is_file()
    ]
    if missing:
        raise ImageNotFound(missing)

    model = load_model(job.model)
    vectors: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(rows), job.batch_size):
            batch_rows = rows[start : start + job.batch_size]
            batch = torch.stack(
                [
                    _load_crop(job.image_root / r.image_ref, r.bbox, job.size)
                    for r in batch_rows
                ]
            )
            feats = _as_feature_matrix(model(batch))
            arr = feats.detach().cpu().numpy().astype(np.float32)
            if arr.ndim != 2 or arr.shape[0] != len(batch_rows):
                raise ModelLoadError(f"model produced shape {arr.shape}")
            vectors.extend(arr)

    matrix = np.stack(vectors)
    ids = [r.annotation_id for r in rows]
    job.out.parent.mkdir(parents=True, exist_ok=True)
    write_mreid(job.out, ids, matrix)
    provenance = {
        "tool": "reid-export",
        "model": job.model,
        "size": job.size,
        "rows": len(rows),
        "dim": int(matrix.shape[1]),
        "preprocessing": (
            "bbox crop (whole image when absent), bilinear stretch to "
            f"{job.size}x{job.size}, [0,1] scaling, ImageNet mean/std"
        ),
    }
    Path(str(job.out) + ".provenance.json").write_text(
        json.dumps(provenance, sort_keys=True, indent=2) + "\n"
    )
    return provenance
