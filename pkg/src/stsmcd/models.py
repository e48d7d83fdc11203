"""Model assemblies: a weight-sharing siamese encoder feeding a change decoder
and, per task, semantic decoders.

Information flow:
  binary change:    encoder(x1), encoder(x2) -> change decoder -> 2-class map
  semantic change:  + two semantic decoders (one per epoch) over each feature set
  damage assessment: one semantic decoder on T1 features (localization) and the
                     change decoder emitting 1 + n_damage classes
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import blocks
from .autodiff import Tensor


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    depths: tuple[int, int, int, int]
    widths: tuple[int, int, int, int]
    state_size: int = 16
    expand: int = 2
    gate_mode: str = "sum"
    scan_mode: str = "euler"
    num_semantic_classes: int = 6  # land-cover classes excluding background 0
    num_damage_classes: int = 4


VARIANTS = {
    "micro": dict(depths=(1, 1, 1, 1), widths=(8, 16, 32, 64), state_size=4),
    "tiny": dict(depths=(2, 2, 4, 2), widths=(96, 192, 384, 768), state_size=16),
    "small": dict(depths=(2, 2, 15, 2), widths=(96, 192, 384, 768), state_size=16),
    "base": dict(depths=(2, 2, 15, 2), widths=(128, 256, 512, 1024), state_size=16),
}


def make_config(variant: str = "micro", **overrides) -> ModelConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant '{variant}', pick one of {sorted(VARIANTS)}")
    kw = dict(VARIANTS[variant])
    kw.update(overrides)
    return ModelConfig(variant=variant, **kw)


# --- encoder ----------------------------------------------------------------------------------


def init_encoder(rng, cfg: ModelConfig) -> dict:
    p: dict = {"embed": blocks.init_patch_embed(rng, 3, cfg.widths[0], k=4)}
    for j in range(4):
        stage: dict = {}
        if j > 0:
            stage["merge"] = blocks.init_patch_embed(rng, cfg.widths[j - 1], cfg.widths[j], k=2)
        for i in range(cfg.depths[j]):
            stage[f"block{i}"] = blocks.init_vss_block(rng, cfg.widths[j], cfg.state_size, cfg.expand)
        p[f"stage{j}"] = stage
    return p


def encoder_forward(image: Tensor, p: dict, cfg: ModelConfig) -> list[Tensor]:
    """(H, W, 3) -> features at 1/4, 1/8, 1/16, 1/32 with widths C1..C4."""
    h, w = image.shape[:2]
    if h % 32 or w % 32:
        raise ad.ShapeMismatch(f"encoder: H and W must be divisible by 32, got {h}x{w}")
    feats = []
    x = blocks.patch_embed(image, p["embed"])
    for j in range(4):
        stage = p[f"stage{j}"]
        if j > 0:
            x = blocks.patch_embed(x, stage["merge"])
        for i in range(cfg.depths[j]):
            x = blocks.vss_block(x, stage[f"block{i}"], cfg.gate_mode, cfg.scan_mode)
        feats.append(x)
    return feats


# --- decoders ---------------------------------------------------------------------------------


def init_change_decoder(rng, cfg: ModelConfig, num_classes: int) -> dict:
    p: dict = {"head": blocks.init_linear(rng, cfg.widths[0], num_classes, zero=True)}
    for j in range(4):
        p[f"stss{j}"] = blocks.init_stss_block(rng, cfg.widths[j], cfg.state_size, cfg.expand)
        if j < 3:
            p[f"fuse{j}"] = blocks.init_fuse(rng, cfg.widths[j], cfg.widths[j + 1])
    return p


def change_decoder_forward(f1: list[Tensor], f2: list[Tensor], p: dict, cfg: ModelConfig) -> Tensor:
    """Deepest stage to shallowest: STSS, fuse with the upsampled prior stage,
    then a zero-init 1x1 head followed by the final x4 upsample."""
    out = None
    for j in (3, 2, 1, 0):
        st = blocks.stss_block(f1[j], f2[j], p[f"stss{j}"], cfg.gate_mode, cfg.scan_mode)
        if out is None:
            out = st
        else:
            out = blocks.fuse_levels(st, ad.upsample_nearest(out, 2), p[f"fuse{j}"])
    logits = blocks.apply_linear(out, p["head"])
    return ad.upsample_nearest(logits, 4)


def init_semantic_decoder(rng, cfg: ModelConfig, num_classes: int) -> dict:
    p: dict = {"head": blocks.init_linear(rng, cfg.widths[0], num_classes, zero=True)}
    for j in range(4):
        p[f"vss{j}"] = blocks.init_vss_block(rng, cfg.widths[j], cfg.state_size, cfg.expand)
        if j < 3:
            p[f"fuse{j}"] = blocks.init_fuse(rng, cfg.widths[j], cfg.widths[j + 1])
    return p


def semantic_decoder_forward(feats: list[Tensor], p: dict, cfg: ModelConfig) -> Tensor:
    """Per stage: VSS, upsample x2, fuse with the next shallower encoder level;
    the last stage upsamples x4 before the 1x1 classification head."""
    x = feats[3]
    for j in (3, 2, 1):
        x = blocks.vss_block(x, p[f"vss{j}"], cfg.gate_mode, cfg.scan_mode)
        x = blocks.fuse_levels(feats[j - 1], ad.upsample_nearest(x, 2), p[f"fuse{j - 1}"])
    x = blocks.vss_block(x, p["vss0"], cfg.gate_mode, cfg.scan_mode)
    x = ad.upsample_nearest(x, 4)
    return blocks.apply_linear(x, p["head"])


# --- task models ------------------------------------------------------------------------------


class ChangeModel:
    """Holds a parameter tree plus its flat named view; subclasses wire decoders."""

    task = "bcd"

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0xC0DE])
        self.params: dict = self._init_params(rng)
        self.flat = blocks.flatten_params(self.params)
        for name, tensor in self.flat.items():
            tensor.name = name

    def _init_params(self, rng) -> dict:
        raise NotImplementedError

    def parameters(self) -> dict[str, Tensor]:
        return self.flat

    def zero_grad(self):
        for t in self.flat.values():
            t.zero_grad()

    def load_flat(self, values: dict[str, np.ndarray]):
        missing = sorted(set(self.flat) - set(values))
        extra = sorted(set(values) - set(self.flat))
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing {missing[:3]}, extra {extra[:3]}")
        for name, tensor in self.flat.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ad.ShapeMismatch(
                    f"checkpoint tensor '{name}': shape {arr.shape} != {tensor.data.shape}"
                )
            tensor.data = arr


class BcdModel(ChangeModel):
    """Binary change detector: per-pixel 2-class probability map."""

    task = "bcd"

    def _init_params(self, rng):
        return {
            "encoder": init_encoder(rng, self.cfg),
            "change": init_change_decoder(rng, self.cfg, 2),
        }

    def forward(self, x1: Tensor, x2: Tensor) -> Tensor:
        f1 = encoder_forward(x1, self.params["encoder"], self.cfg)
        f2 = encoder_forward(x2, self.params["encoder"], self.cfg)
        logits = change_decoder_forward(f1, f2, self.params["change"], self.cfg)
        return ad.softmax(logits)


class ScdModel(ChangeModel):
    """Semantic change detector: land-cover maps for both epochs plus change."""

    task = "scd"

    def _init_params(self, rng):
        k = self.cfg.num_semantic_classes + 1  # background/unchanged is class 0
        return {
            "encoder": init_encoder(rng, self.cfg),
            "change": init_change_decoder(rng, self.cfg, 2),
            "sem_t1": init_semantic_decoder(rng, self.cfg, k),
            "sem_t2": init_semantic_decoder(rng, self.cfg, k),
        }

    def forward(self, x1: Tensor, x2: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        f1 = encoder_forward(x1, self.params["encoder"], self.cfg)
        f2 = encoder_forward(x2, self.params["encoder"], self.cfg)
        p_t1 = ad.softmax(semantic_decoder_forward(f1, self.params["sem_t1"], self.cfg))
        p_t2 = ad.softmax(semantic_decoder_forward(f2, self.params["sem_t2"], self.cfg))
        p_bcd = ad.softmax(change_decoder_forward(f1, f2, self.params["change"], self.cfg))
        return p_t1, p_t2, p_bcd


class BdaModel(ChangeModel):
    """Damage assessor: localization from T1 features only, damage from both."""

    task = "bda"

    def _init_params(self, rng):
        return {
            "encoder": init_encoder(rng, self.cfg),
            "loc": init_semantic_decoder(rng, self.cfg, 2),
            "clf": init_change_decoder(rng, self.cfg, 1 + self.cfg.num_damage_classes),
        }

    def forward(self, x1: Tensor, x2: Tensor) -> tuple[Tensor, Tensor]:
        f1 = encoder_forward(x1, self.params["encoder"], self.cfg)
        f2 = encoder_forward(x2, self.params["encoder"], self.cfg)
        p_loc = ad.softmax(semantic_decoder_forward(f1, self.params["loc"], self.cfg))
        p_clf = ad.softmax(change_decoder_forward(f1, f2, self.params["clf"], self.cfg))
        return p_loc, p_clf


MODEL_CLASSES = {"bcd": BcdModel, "scd": ScdModel, "bda": BdaModel}


def build_model(task: str, cfg: ModelConfig, seed: int = 0) -> ChangeModel:
    if task not in MODEL_CLASSES:
        raise ValueError(f"unknown task '{task}', pick one of {sorted(MODEL_CLASSES)}")
    return MODEL_CLASSES[task](cfg, seed)


# --- label-map post-processing ----------------------------------------------------------------


def semantic_change_mask(y1: np.ndarray, y2: np.ndarray, y_bcd: np.ndarray, ignore: int = 255):
    """Keep semantic labels where the binary map marks change; ignore elsewhere."""
    if not (y1.shape == y2.shape == y_bcd.shape):
        raise ValueError(
            f"semantic_change_mask: shapes differ {y1.shape}, {y2.shape}, {y_bcd.shape}"
        )
    keep = y_bcd != 0
    m1 = np.where(keep, y1, ignore)
    m2 = np.where(keep, y2, ignore)
    return m1, m2


def transition_matrix(m1: np.ndarray, m2: np.ndarray, num_classes: int, ignore: int = 255):
    """Count from-to transitions over semantic classes 1..num_classes.

    Entry (i, j) counts pixels labeled class i+1 before and class j+1 after.
    Ignored pixels and the background class 0 do not contribute.
    """
    valid = (m1 != ignore) & (m2 != ignore) & (m1 >= 1) & (m2 >= 1)
    a = m1[valid].astype(np.int64) - 1
    b = m2[valid].astype(np.int64) - 1
    counts = np.bincount(a * num_classes + b, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)
