"""Experiment configuration files (YAML; plain JSON also parses).

Example::

    data:
      kind: synth          # synth | cifar10 | mnist
      synth_kind: blobs    # blobs | xor | rings
      n: 400
      size: 8
    dynamics:
      family: parabolic
      widths: [4, 8]
      steps: 3
    train:
      stages: [[20, 0.1]]
      batch_size: 25
    reg:
      alpha1: 4.0e-4
      alpha2: 1.0e-4
"""
from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from . import data as D
from .network import DynamicsSpec
from .training import RegParams, TrainConfig

_DATA_KEYS = {"kind", "path", "synth_kind", "n", "n_test", "size", "channels", "n_classes",
              "classes", "n_train", "val_fraction", "seed"}


class ConfigError(ValueError):
    pass


@dataclass
class Experiment:
    data: dict = field(default_factory=lambda: {"kind": "synth", "synth_kind": "blobs", "n": 200, "size": 8})
    spec: DynamicsSpec = field(default_factory=DynamicsSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    reg: RegParams = field(default_factory=RegParams)


def parse(doc: dict | None, seed: int | None = None, data_path: str | None = None) -> Experiment:
    doc = dict(doc or {})
    unknown = set(doc) - {"data", "dynamics", "train", "reg"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    data = dict(Experiment().data)
    data.update(doc.get("data") or {})
    bad = set(data) - _DATA_KEYS
    if bad:
        raise ConfigError(f"unknown data keys: {sorted(bad)}")
    if data_path is not None:
        data["path"] = data_path
    train = dict(doc.get("train") or {})
    if seed is not None:
        train["seed"] = seed
    try:
        dyn_doc = dict(doc.get("dynamics") or {})
        if "image_size" not in dyn_doc or "in_channels" not in dyn_doc or "n_classes" not in dyn_doc:
            shape = _data_shape(data)
            dyn_doc.setdefault("in_channels", shape[0])
            dyn_doc.setdefault("image_size", shape[1])
            dyn_doc.setdefault("n_classes", shape[2])
        spec = DynamicsSpec(**dyn_doc)
        cfg = TrainConfig(**train)
        rp = RegParams(**(doc.get("reg") or {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return Experiment(data, spec, cfg, rp)


def _data_shape(data: dict) -> tuple[int, int, int]:
    """(channels, image size, classes) implied by the data section."""
    kind = data.get("kind", "synth")
    if kind == "cifar10":
        return 3, 32, len(data["classes"]) if data.get("classes") else 10
    if kind == "mnist":
        return 1, 28, 10
    if kind == "synth":
        m = data.get("n_classes", 2) if data.get("synth_kind", "blobs") == "blobs" else 2
        return data.get("channels", 3), data.get("size", 8), m
    raise ConfigError(f"unknown data kind {kind!r}")


def load(path: str | None, seed: int | None = None, data_path: str | None = None) -> Experiment:
    doc = {}
    if path is not None:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return parse(doc, seed, data_path)


def load_dataset(data: dict, seed: int) -> D.Dataset:
    kind = data.get("kind", "synth")
    seed = data.get("seed", seed)
    vf = data.get("val_fraction", 0.2)
    if kind == "synth":
        return D.synth_dataset(data.get("synth_kind", "blobs"), data.get("n", 200), seed,
                               size=data.get("size", 8), channels=data.get("channels", 3),
                               n_classes=data.get("n_classes", 2), n_test=data.get("n_test"),
                               val_fraction=vf)
    if "path" not in data:
        raise ConfigError(f"data kind {kind!r} needs a path (config data.path or --data)")
    if kind == "cifar10":
        return D.load_cifar10(data["path"], seed, vf, data.get("classes"), data.get("n_train"), data.get("n_test"))
    if kind == "mnist":
        return D.load_mnist_idx(data["path"], seed, vf, data.get("n_train"), data.get("n_test"))
    raise ConfigError(f"unknown data kind {kind!r}")
