"""Desk-scale configurations: the local extractor pool, FT ladder and data builders."""

from __future__ import annotations

import dataclasses

from .core import FTLevel
from .zoo import ExtractorSpec, FineTuneConfig, LayerSpec

EMB_LENGTH = 128


def _conv(i, units, kernel=3, activation="relu", pool=True, stride=1, bn=False):
    return LayerSpec(f"conv{i}", "conv", units, kernel, stride, activation, pool, bn)


def _dense(name, units, activation="relu"):
    return LayerSpec(name, "dense", units, activation=activation)


def pool_specs(length: int = EMB_LENGTH) -> list:
    """Four architectures varying depth, kernel size, activation and pooling."""
    archs = {
        "cnn-a": [_conv(1, 16), _conv(2, 32), _conv(3, 64), _dense("emb", length)],
        "cnn-b": [_conv(1, 16, 5, "elu"), _conv(2, 32, 5, "elu"), _conv(3, 48, 3, "elu"),
                  _conv(4, 64, 3, "elu"), _dense("emb", length, "elu")],
        "cnn-c": [_conv(1, 24, 3, "tanh", pool=False, stride=2), _conv(2, 48, 3, "tanh", pool=False, stride=2),
                  _conv(3, 64, 3, "tanh", pool=False, stride=2), _dense("fc", 256, "tanh"),
                  _dense("emb", length, "tanh")],
        "cnn-d": [_conv(1, 32, 5, "leaky_relu"), _conv(2, 32, 3, "leaky_relu"),
                  _conv(3, 64, 3, "leaky_relu", bn=True), _dense("emb", length, "leaky_relu")],
    }
    specs = []
    for model_id, layers in archs.items():
        spec = ExtractorSpec(model_id, tuple(layers), input_size=(64, 64, 3), pretraining="desk-faces")
        sizes = spec.layer_sizes()
        specs.append(ExtractorSpec(model_id, tuple(layers), tuple((l, sizes[l]) for l in spec.layer_ids),
                                   (64, 64, 3), "desk-faces"))
    return specs


def ft_ladder(scale: int = 1, lr: float = 5e-4) -> dict:
    """Desk analog of the FT1..FT5 ladder.

    Each level repeats the phases of the level below and opens one more unit
    (FT5 keeps FT4's units and trains the deepest one longer).  Units are
    counted from the top of the architecture ("-1" = embedding layer) and each
    phase trains the head plus every unit opened so far.  Higher levels also
    get more samples and a doubled learning rate, so the adapted extractor
    drifts further from its source.
    """
    base = (("head", 1), ("-1", 12))
    schedules = {
        FTLevel.FT1: base,
        FTLevel.FT2: base + (("-2", 6),),
        FTLevel.FT3: base + (("-2", 6), ("-3", 6)),
        FTLevel.FT4: base + (("-2", 6), ("-3", 6), ("-4", 6)),
        FTLevel.FT5: base + (("-2", 6), ("-3", 6), ("-4", 12)),
    }
    return {level: FineTuneConfig(level, (100 * int(level) * scale, 400 * int(level) * scale), sched,
                                  lr=lr * 2 ** (int(level) - 1))
            for level, sched in schedules.items()}


def ft_dataset_size(level: FTLevel, scale: int = 1) -> int:
    """Number of fine-tuning samples used for a ladder level in desk experiments."""
    return 200 * int(level) * scale


def sibling_spec(spec: ExtractorSpec, suffix: str = "bn") -> ExtractorSpec:
    """Out-of-pool variant of a pool architecture: BN after every conv.

    Built with the same seed as its pool sibling, the conv and dense weights
    start from identical values, so the two embedding spaces stay related
    without being the same model.
    """
    layers = tuple(dataclasses.replace(l, batchnorm=True) if l.kind == "conv" else l for l in spec.layers)
    return dataclasses.replace(spec, model_id=f"{spec.model_id}-{suffix}", layers=layers)


def reference_spec(length: int = EMB_LENGTH) -> ExtractorSpec:
    """Reference extractor for perceptual distance; never part of an attacker pool."""
    layers = (_conv(1, 24, 5, "relu"), _conv(2, 48, 3, "relu"), _conv(3, 64, 3, "relu"),
              _dense("emb", length, "relu"))
    spec = ExtractorSpec("ref", layers, input_size=(64, 64, 3), pretraining="desk-faces")
    sizes = spec.layer_sizes()
    return dataclasses.replace(spec, extraction_layers=tuple((l, sizes[l]) for l in spec.layer_ids))
