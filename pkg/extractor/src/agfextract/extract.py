"""Extraction pipeline: images -> stage activations -> AGF1."""

from __future__ import annotations

import numpy as np
import torch

from .model import build_model, stage_names
from .preprocess import list_images, load_center_crop, random_crops, to_tensor
from .writer import write_agf1


def parse_pool(spec: str):
    """"none", "gap", or "avg:KxK"."""
    if spec in ("none", "gap"):
        return (spec, None)
    if spec.startswith("avg:"):
        dims = spec[4:].lower().split("x")
        if len(dims) == 2 and all(d.isdigit() for d in dims):
            k1, k2 = int(dims[0]), int(dims[1])
            if k1 >= 1 and k2 >= 1:
                return ("avg", (k1, k2))
    raise ValueError(f"bad pool spec {spec!r}; use none, gap, or avg:KxK")


def parse_crops(spec: str):
    """"1" (deterministic center crop) or "N@RATIO" multi-crop."""
    if spec == "1":
        return (1, None)
    if "@" in spec:
        count, ratio = spec.split("@", 1)
        if count.isdigit() and int(count) >= 1:
            r = float(ratio)
            if 0.0 < r <= 1.0:
                return (int(count), r)
    raise ValueError(f"bad crops spec {spec!r}; use 1 or N@0.875")


def _pool_batch(t: torch.Tensor, mode, dims) -> torch.Tensor:
    """(B, C, H, W) -> (B, C, spatial) after the requested pooling."""
    if mode == "gap":
        return t.mean(dim=(2, 3), keepdim=False).unsqueeze(-1)
    if mode == "avg":
        pooled = torch.nn.functional.adaptive_avg_pool2d(t, dims)
        return pooled.reshape(t.shape[0], t.shape[1], dims[0] * dims[1])
    return t.reshape(t.shape[0], t.shape[1], -1)


def extract_directory(
    images_dir,
    out_path,
    stages: int = 5,
    pool: str = "gap",
    crops: str = "1",
    weights: str = "auto",
    seed: int = 0,
    batch_size: int = 8,
) -> list[str]:
    """Run the backbone over every image in ``images_dir`` and write AGF1.

    Multi-crop mode writes each crop under "<id>#cropK" (K starting at 1);
    single-crop mode keeps the bare file name as the id and is fully
    deterministic. Returns the written image ids.
    """
    if stages not in (5, 17):
        raise ValueError("stages must be 5 or 17")
    pool_mode, pool_dims = parse_pool(pool)
    n_crops, ratio = parse_crops(crops)
    fine = stages == 17
    names = stage_names(fine)

    model = build_model(weights=weights, seed=seed)
    rng = np.random.default_rng(seed)

    ids: list[str] = []
    tensors: list[np.ndarray] = []
    for path in list_images(images_dir):
        base = load_center_crop(path)
        if n_crops == 1:
            ids.append(path.name)
            tensors.append(to_tensor(base))
        else:
            for k, crop in enumerate(random_crops(base, n_crops, ratio, rng), 1):
                ids.append(f"{path.name}#crop{k}")
                tensors.append(to_tensor(crop))

    rows = []
    specs = None
    with torch.no_grad():
        for start in range(0, len(tensors), batch_size):
            batch = torch.from_numpy(np.stack(tensors[start : start + batch_size]))
            taps = model.forward_stages(batch, fine=fine)
            pooled = {
                name: _pool_batch(taps[name], pool_mode, pool_dims)
                for name in names
            }
            if specs is None:
                specs = [
                    (name, pooled[name].shape[1], pooled[name].shape[2])
                    for name in names
                ]
            for b in range(batch.shape[0]):
                rows.append([pooled[name][b].numpy() for name in names])

    write_agf1(out_path, ids, specs, rows)
    return ids
