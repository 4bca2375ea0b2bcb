"""Model manifests: a JSON file naming layer shapes, post-ops and tensor paths.

A manifest may omit the tensor paths, in which case it only describes layer
geometry (enough for dense energy analysis, not for pruning/evaluation).
Tensor paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .nets import (
    CONV,
    FC,
    IDENTITY,
    RELU,
    FilterBank,
    Layer,
    LayerShape,
    Network,
    PostOp,
    post_op_from_name,
    relu_pool,
)
from .tensorio import atomic_write_text, read_tensor, write_tensor

FORMAT = "enerprune-model"
VERSION = 1

SHAPE_FIELDS = (
    "kind",
    "in_h",
    "in_w",
    "in_c",
    "filt_h",
    "filt_w",
    "num_filters",
    "stride",
    "pad",
)


def _shape_to_dict(shape: LayerShape) -> dict:
    return {f: getattr(shape, f) for f in SHAPE_FIELDS}


def _shape_from_dict(d: dict, batch: int, name: str) -> LayerShape:
    try:
        return LayerShape(batch=batch, **{f: d[f] for f in SHAPE_FIELDS})
    except KeyError as exc:
        raise ConfigError(f"layer {name}: missing shape field {exc}") from exc
    except ShapeError as exc:
        raise ConfigError(f"layer {name}: {exc}") from exc


def save_model(path: str | Path, net: Network, batch: int | None = None) -> None:
    """Write the manifest plus one weights/bias/mask tensor triple per layer."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    layers = []
    for layer in net.layers:
        stem = layer.name
        entry = _shape_to_dict(layer.bank.shape)
        entry["name"] = layer.name
        entry["post_op"] = layer.post.name
        entry["weights"] = f"{stem}.weights.tnsr"
        entry["bias"] = f"{stem}.bias.tnsr"
        entry["mask"] = f"{stem}.mask.tnsr"
        write_tensor(path.parent / entry["weights"], layer.bank.weights)
        write_tensor(path.parent / entry["bias"], layer.bank.bias)
        write_tensor(path.parent / entry["mask"], layer.bank.mask.astype(np.float32))
        layers.append(entry)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "n_classes": net.n_classes,
        "batch": batch if batch is not None else net.layers[0].bank.shape.batch,
        "layers": layers,
    }
    atomic_write_text(path, json.dumps(manifest, indent=2))


def _read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"model {path}: no such file")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"model {path}: invalid JSON ({exc})") from exc
    if raw.get("format") != FORMAT:
        raise ConfigError(f"model {path}: not an {FORMAT} manifest")
    if "layers" not in raw or not isinstance(raw["layers"], list) or not raw["layers"]:
        raise ConfigError(f"model {path}: manifest has no layers")
    return raw


def load_shapes(
    path: str | Path, batch: int | None = None
) -> list[tuple[str, LayerShape, PostOp]]:
    """Shape-only view of a manifest (tensors not required)."""
    raw = _read_manifest(path)
    use_batch = batch if batch is not None else int(raw.get("batch", 1))
    out = []
    for i, entry in enumerate(raw["layers"]):
        name = str(entry.get("name", f"layer{i}"))
        shape = _shape_from_dict(entry, use_batch, name)
        post = post_op_from_name(entry.get("post_op", "identity"))
        out.append((name, shape, post))
    _validate_shape_chain(out, path)
    return out


def _validate_shape_chain(
    layers: list[tuple[str, LayerShape, PostOp]], path: str | Path
) -> None:
    for (pname, pshape, ppost), (nname, nshape, _) in zip(layers, layers[1:]):
        oh, ow = ppost.out_hw(pshape.out_h, pshape.out_w)
        want = (pshape.n, oh, ow)
        got = (nshape.in_c, nshape.in_h, nshape.in_w)
        if want != got:
            raise ConfigError(
                f"model {path}: layer {nname} expects input {got} "
                f"but {pname} produces {want}"
            )


def load_model(path: str | Path, batch: int | None = None) -> Network:
    """Load a full network; every layer must reference valid tensors."""
    path = Path(path)
    raw = _read_manifest(path)
    use_batch = batch if batch is not None else int(raw.get("batch", 1))
    layers = []
    for i, entry in enumerate(raw["layers"]):
        name = str(entry.get("name", f"layer{i}"))
        shape = _shape_from_dict(entry, use_batch, name)
        post = post_op_from_name(entry.get("post_op", "identity"))
        for key in ("weights", "bias", "mask"):
            if key not in entry:
                raise ConfigError(f"model {path}: layer {name} has no {key} tensor")
        weights = read_tensor(path.parent / entry["weights"])
        bias = read_tensor(path.parent / entry["bias"])
        mask_f = read_tensor(path.parent / entry["mask"])
        if not np.all(np.isfinite(weights)) or not np.all(np.isfinite(bias)):
            raise ConfigError(f"model {path}: layer {name} has non-finite values")
        if not np.all((mask_f == 0.0) | (mask_f == 1.0)):
            raise ConfigError(f"model {path}: layer {name} mask must be 0/1")
        mask = mask_f.astype(bool)
        if np.any(weights[~mask] != 0.0):
            raise ConfigError(f"model {path}: layer {name} has nonzero masked weights")
        try:
            bank = FilterBank(shape, weights, bias, mask)
        except ShapeError as exc:
            raise ConfigError(f"model {path}: layer {name}: {exc}") from exc
        layers.append(Layer(name, bank, post))
    net = Network(layers)
    try:
        net.validate_chain()
    except ShapeError as exc:
        raise ConfigError(f"model {path}: {exc}") from exc
    n_classes = int(raw.get("n_classes", net.n_classes))
    if n_classes != net.n_classes:
        raise ConfigError(
            f"model {path}: manifest says {n_classes} classes, "
            f"final layer has {net.n_classes} filters"
        )
    return net


def save_shape_manifest(
    path: str | Path,
    layers: list[tuple[str, LayerShape, PostOp]],
    n_classes: int,
    batch: int,
) -> None:
    """Write a geometry-only manifest (no tensors)."""
    entries = []
    for name, shape, post in layers:
        entry = _shape_to_dict(shape)
        entry["name"] = name
        entry["post_op"] = post.name
        entries.append(entry)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "n_classes": n_classes,
        "batch": batch,
        "layers": entries,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, json.dumps(manifest, indent=2))


def alexnet_layers(batch: int = 44) -> list[tuple[str, LayerShape, PostOp]]:
    """Classic 5-CONV/3-FC ImageNet geometry (single tower), for dense analysis."""
    return [
        ("conv1", LayerShape(CONV, 227, 227, 3, 11, 11, 96, 4, 0, batch), relu_pool(3, 2)),
        ("conv2", LayerShape(CONV, 27, 27, 96, 5, 5, 256, 1, 2, batch), relu_pool(3, 2)),
        ("conv3", LayerShape(CONV, 13, 13, 256, 3, 3, 384, 1, 1, batch), RELU),
        ("conv4", LayerShape(CONV, 13, 13, 384, 3, 3, 384, 1, 1, batch), RELU),
        ("conv5", LayerShape(CONV, 13, 13, 384, 3, 3, 256, 1, 1, batch), relu_pool(3, 2)),
        ("fc6", LayerShape(FC, 6, 6, 256, 6, 6, 4096, 1, 0, batch), RELU),
        ("fc7", LayerShape(FC, 1, 1, 4096, 1, 1, 4096, 1, 0, batch), RELU),
        ("fc8", LayerShape(FC, 1, 1, 4096, 1, 1, 1000, 1, 0, batch), IDENTITY),
    ]


BUILTIN_ARCHS = {"alexnet": alexnet_layers}
