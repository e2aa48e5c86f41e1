"""Aggregate of all offline-trained parameters, with checkpoint round-trip.

One model owns the image and flow feature extractors, the label encoder and
importance weight generator, the fusion instances (one for the target model
plus one per decoder pyramid level 2-4) and the decoder.  Everything is
seeded deterministically from one integer, with independent named streams
per component.
"""

from __future__ import annotations

import numpy as np

from . import checkpoint
from .backbone import (BACKBONE_CHANNELS, LABEL_CHANNELS, FeatureExtractorParams,
                       LabelEncoderParams)
from .decoder import DecoderParams
from .fusion import MODES, FusionParams

_STREAMS = ("backbone_im", "backbone_fl", "label_enc", "weight_gen",
            "fusion", "decoder")


class Model:
    def __init__(self, fusion_mode: str = "attention", seed: int = 0,
                 label_channels: int = LABEL_CHANNELS,
                 channels=BACKBONE_CHANNELS):
        if fusion_mode not in MODES:
            raise ValueError(f"unknown fusion mode {fusion_mode!r}")
        self.fusion_mode = fusion_mode
        self.label_channels = label_channels
        self.channels = tuple(channels)
        rngs = {name: np.random.default_rng(child) for name, child in
                zip(_STREAMS, np.random.SeedSequence(seed).spawn(len(_STREAMS)))}
        self.backbone_im = FeatureExtractorParams.init(rngs["backbone_im"],
                                                       channels=self.channels)
        self.backbone_fl = FeatureExtractorParams.init(rngs["backbone_fl"],
                                                       channels=self.channels)
        self.label_enc = LabelEncoderParams.init(rngs["label_enc"],
                                                 label_channels=label_channels)
        self.weight_gen = LabelEncoderParams.init(rngs["weight_gen"],
                                                  label_channels=label_channels,
                                                  squared=True)
        self.fusion_tm = FusionParams.init(rngs["fusion"], fusion_mode,
                                           label_channels)
        self.fusion_dec = {k: FusionParams.init(rngs["fusion"], fusion_mode,
                                                self.channels[k - 1])
                           for k in (2, 3, 4)}
        self.decoder = DecoderParams.init(rngs["decoder"],
                                          label_channels=label_channels,
                                          channels=self.channels)

    @property
    def uses_flow(self) -> bool:
        return self.fusion_mode != "none"

    def named_tensors(self):
        yield from self.backbone_im.named_tensors("backbone_im")
        yield from self.backbone_fl.named_tensors("backbone_fl")
        yield from self.label_enc.named_tensors("label_enc")
        yield from self.weight_gen.named_tensors("weight_gen")
        yield from self.fusion_tm.named_tensors("fusion_tm")
        for k in (2, 3, 4):
            yield from self.fusion_dec[k].named_tensors(f"fusion_dec{k}")
        yield from self.decoder.named_tensors("decoder")

    def offline_parameters(self) -> list:
        return [t for _, t in self.named_tensors()]

    def save(self, path) -> None:
        items = {name: t.data for name, t in self.named_tensors()}
        items["meta/fusion_mode"] = np.array([MODES.index(self.fusion_mode)],
                                             dtype=np.float64)
        items["meta/label_channels"] = np.array([self.label_channels],
                                                dtype=np.float64)
        items["meta/channels"] = np.array(self.channels, dtype=np.float64)
        checkpoint.save_named(path, items)

    @classmethod
    def load(cls, path) -> "Model":
        items = checkpoint.load_named(path)
        try:
            mode = MODES[int(items["meta/fusion_mode"][0])]
            label_channels = int(items["meta/label_channels"][0])
            channels = tuple(int(c) for c in items["meta/channels"])
        except KeyError as e:
            raise checkpoint.CheckpointError(
                f"{path}: missing checkpoint entry {e.args[0]!r}") from None
        model = cls(fusion_mode=mode, seed=0, label_channels=label_channels,
                    channels=channels)
        for name, t in model.named_tensors():
            if name not in items:
                raise checkpoint.CheckpointError(f"{path}: missing tensor {name!r}")
            if items[name].shape != t.data.shape:
                raise checkpoint.CheckpointError(
                    f"{path}: tensor {name!r} has shape {items[name].shape}, "
                    f"expected {t.data.shape}")
            t.data = items[name]
        return model
