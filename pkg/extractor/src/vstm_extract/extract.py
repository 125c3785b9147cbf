"""Encode an image directory with a CLIP vision checkpoint.

Rows are written in sorted-filename order. Files are deduplicated by content
hash before encoding, so byte-identical images always get bit-identical rows
(and are only pushed through the model once). Embeddings are written as the
model produces them — centering/scaling is the modeling tool's job.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from vstm.dataio import EmbeddingContainer, write_embeddings


class ExtractionError(RuntimeError):
    pass


@dataclass
class ExtractionManifest:
    model: str
    embedding_dim: int
    ids: list[str]
    failures: list[dict]  # {"file": name, "reason": message}
    preprocessing: dict
    batch_size: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


@dataclass
class _Backend:
    processor: object
    model: object
    name: str
    description: dict = field(default_factory=dict)


def _load_backend(model_name: str) -> _Backend:
    import torch  # noqa: F401  (keeps the import error message ours)
    from transformers import AutoImageProcessor, CLIPVisionModelWithProjection

    try:
        processor = AutoImageProcessor.from_pretrained(model_name)
        model = CLIPVisionModelWithProjection.from_pretrained(model_name)
    except Exception as err:
        raise ExtractionError(f"cannot load model {model_name!r}: {err}") from err
    model.eval()
    description = {"image_processor": type(processor).__name__}
    to_dict = getattr(processor, "to_dict", None)
    if callable(to_dict):
        description.update(to_dict())
    return _Backend(processor, model, model_name, description)


def _decode(path: Path):
    from PIL import Image

    with Image.open(path) as im:
        return im.convert("RGB")  # forces the full decode


def _encode_unique(backend: _Backend, images: list, batch_size: int) -> np.ndarray:
    import torch

    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = images[start : start + batch_size]
            inputs = backend.processor(images=batch, return_tensors="pt")
            out = backend.model(**inputs)
            chunks.append(out.image_embeds.numpy().astype(np.float32))
    return np.concatenate(chunks, axis=0)


def extract(
    image_dir,
    model_name: str,
    batch_size: int = 16,
    out_path=None,
) -> tuple[EmbeddingContainer, ExtractionManifest]:
    """Encode every decodable file in image_dir; undecodable files land in
    the manifest's failures list instead of being silently dropped. When
    out_path is given the container goes there and the manifest JSON beside
    it (same stem, .manifest.json)."""
    if batch_size < 1:
        raise ExtractionError("batch_size must be positive")
    root = Path(image_dir)
    if not root.is_dir():
        raise ExtractionError(f"not a directory: {root}")
    files = sorted(p for p in root.iterdir() if p.is_file())
    if not files:
        raise ExtractionError(f"no files in {root}")

    backend = _load_backend(model_name)

    decoded = {}  # file name -> content digest
    by_digest = {}  # content digest -> PIL image, first occurrence
    failures = []
    for p in files:
        try:
            image = _decode(p)
        except Exception as err:
            failures.append({"file": p.name, "reason": str(err)})
            continue
        digest = hashlib.sha256(p.read_bytes()).hexdigest()
        decoded[p.name] = digest
        by_digest.setdefault(digest, image)
    if not decoded:
        raise ExtractionError(f"no decodable images in {root}")

    order = list(by_digest)
    unique_rows = _encode_unique(backend, [by_digest[d] for d in order], batch_size)
    row_of = {d: unique_rows[i] for i, d in enumerate(order)}

    ids = sorted(decoded)
    rows = np.stack([row_of[decoded[name]] for name in ids])
    manifest = ExtractionManifest(
        model=model_name,
        embedding_dim=int(rows.shape[1]),
        ids=ids,
        failures=failures,
        preprocessing=backend.description,
        batch_size=batch_size,
    )
    if out_path is not None:
        out = Path(out_path)
        write_embeddings(out, rows, ids)
        (out.parent / (out.stem + ".manifest.json")).write_text(manifest.to_json())
    return EmbeddingContainer(rows, tuple(ids)), manifest
