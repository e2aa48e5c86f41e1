"""Two-stage procedure: offline meta-training and sequential inference.

Inference fits one target model per annotated object on the first frame
(using the flow between the first two frames), then walks the sequence:
extract pyramids, apply the target models, fuse, decode, binarize, push the
prediction into the per-object memory buffer as a pseudo-label, and
re-optimize on the configured schedule.  Frame results depend only on
frames up to t.

Offline training draws four frames per sample from one sequence: the
reference (plus flip/affine augmented copies, with flow vectors transformed
by the same linear map) trains the few-shot learner; the other three frames
are decoded against ground truth with per-pixel binary cross-entropy and
averaged.  Gradients stop at the learned filters (the inner loop is not
differentiated through) and flow into decoder, fusion and backbone
parameters via a native Adam update.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .backbone import encode_label, extract
from .config import RunConfig
from .data_io import Sequence
from .decoder import decode, fuse_pyramid
from .flow_embed import FlowField, embed_flow
from .learner import LearnerConfig, MemoryBuffer, optimize
from .model import Model
from .target_model import TargetModelParams, TargetSample, apply

__all__ = [
    "FrameSet",
    "SegResult",
    "frame_sets",
    "learner_config",
    "infer_sequence",
    "train_offline",
    "evaluate_offline",
    "Adam",
]


@dataclass
class FrameSet:
    """One frame with the flow arriving at it and an optional label mask."""

    image: np.ndarray            # 3xHxW float64 in [0, 1]
    flow: FlowField              # from frame t-1 to t (frame 0: flow 0 -> 1)
    mask: Optional[np.ndarray]   # HxW uint8 label image
    index: int


@dataclass
class SegResult:
    probs: np.ndarray            # K_obj x H x W in [0, 1]
    labels: np.ndarray           # HxW uint8, 0 = background
    frame_index: int
    seconds: float = 0.0
    updated: bool = False
    meta: dict = field(default_factory=dict)


def frame_sets(seq: Sequence) -> list:
    return [FrameSet(image=seq.images[t], flow=seq.flows[t], mask=seq.masks[t],
                     index=t) for t in range(len(seq))]


def learner_config(cfg: RunConfig) -> LearnerConfig:
    return LearnerConfig(mode=cfg.learner_mode,
                         outer_iters_init=cfg.learner_outer_iters_init,
                         outer_iters_update=cfg.learner_outer_iters_update,
                         cg_iters=cfg.learner_cg_iters,
                         damping=cfg.learner_damping,
                         sd_steps=cfg.learner_sd_steps)


# ---------------------------------------------------------------------------
# feature plumbing


def _flow_input(fs: FrameSet, cfg: RunConfig) -> Tensor:
    emb = embed_flow(fs.flow, prescale=cfg.flow_prescale)
    return Tensor(emb.data / cfg.flow_max_displacement)


def _pad3(arr: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return arr
    return np.pad(arr, ((0, 0), (0, ph), (0, pw)), mode=mode)


def _pad_frameset(fs: FrameSet, mult: int = 16) -> tuple:
    h, w = fs.image.shape[1:]
    ph = (-h) % mult
    pw = (-w) % mult
    if ph == 0 and pw == 0:
        return fs, (0, 0)
    image = _pad3(fs.image, ph, pw, "edge")
    uv = _pad3(fs.flow.uv, ph, pw, "edge")
    mask = None
    if fs.mask is not None:
        mask = np.pad(fs.mask, ((0, ph), (0, pw)))
    flow = FlowField(uv, fs.flow.src_index, fs.flow.dst_index)
    return FrameSet(image=image, flow=flow, mask=mask, index=fs.index), (ph, pw)


def _pyramids(model: Model, fs: FrameSet, cfg: RunConfig):
    pyr_im = extract(Tensor(fs.image), model.backbone_im)
    pyr_fl = None
    if model.uses_flow:
        pyr_fl = extract(_flow_input(fs, cfg), model.backbone_fl)
    return pyr_im, pyr_fl


def _object_sample(model: Model, pyr_im, pyr_fl, mask01: np.ndarray,
                   index: int) -> TargetSample:
    enc, wgt = encode_label(Tensor(mask01[None]), model.label_enc,
                            model.weight_gen)
    return TargetSample(l3_im=pyr_im[3], l3_fl=None if pyr_fl is None else pyr_fl[3],
                        encoded=enc, weights=wgt, frame_index=index)


_SEED_INFER, _SEED_TRAIN = 101, 202


def _new_target_model(model: Model, cfg: RunConfig, seed_tail) -> TargetModelParams:
    rng = np.random.default_rng([cfg.seed, *(int(s) for s in seed_tail)])
    return TargetModelParams.init_random(
        rng, c_in=model.channels[2], label_channels=model.label_channels,
        with_flow=model.uses_flow, reg_lambda=cfg.learner_reg_lambda)


def bce_with_logits(logits: Tensor, target01: np.ndarray) -> Tensor:
    y = Tensor(target01)
    return ad.tmean(ad.sub(ad.softplus(logits), ad.mul(logits, y)))


def balanced_bce_with_logits(logits: Tensor, target01: np.ndarray) -> Tensor:
    """Per-pixel BCE with the two classes reweighted to equal total mass.

    Plain mean BCE under a few-percent foreground fraction drives every
    logit below the 0.5 binarization threshold at toy training budgets;
    balancing restores usable confidence without touching the threshold.
    """
    frac = float(target01.mean())
    eps = 1.0 / target01.size
    w_fg = 0.5 / max(frac, eps)
    w_bg = 0.5 / max(1.0 - frac, eps)
    weights = np.where(target01 > 0.5, w_fg, w_bg)
    y = Tensor(target01)
    per_pixel = ad.sub(ad.softplus(logits), ad.mul(logits, y))
    return ad.tmean(ad.mul(per_pixel, Tensor(weights)))


# ---------------------------------------------------------------------------
# inference


def _tau_snapshot(taus: dict) -> dict:
    return {k: np.concatenate([t.data.reshape(-1).copy() for t in tau.tensors()])
            for k, tau in taus.items()}


def infer_sequence(framesets: list, annotation: np.ndarray, model: Model,
                   cfg: RunConfig, diagnostics: Optional[dict] = None) -> list:
    """Segment a sequence given the first frame's label image."""
    if len(framesets) < 2:
        raise ValueError("inference needs at least two frames")
    if annotation.shape != framesets[0].image.shape[1:]:
        raise ValueError(
            f"annotation shape {annotation.shape} does not match frames "
            f"{framesets[0].image.shape[1:]}")
    objects = sorted(int(k) for k in np.unique(annotation) if k > 0)
    if not objects:
        raise ValueError("annotation contains no objects")
    lcfg = learner_config(cfg)
    h0, w0 = annotation.shape

    t_start = time.perf_counter()
    fs0, (ph, pw) = _pad_frameset(framesets[0])
    ann = np.pad(annotation, ((0, ph), (0, pw)))
    pyr_im, pyr_fl = _pyramids(model, fs0, cfg)
    taus, buffers = {}, {}
    for k in objects:
        sample = _object_sample(model, pyr_im, pyr_fl,
                                (ann == k).astype(np.float64), 0)
        buf = MemoryBuffer(capacity=cfg.learner_buffer_capacity,
                           decay=cfg.learner_buffer_decay,
                           pinned_weight=cfg.learner_pinned_weight)
        buf.add(sample, pinned=True)
        tau = _new_target_model(model, cfg, (_SEED_INFER, k))
        optimize(tau, buf, model.fusion_tm, lcfg,
                 outer_iters=cfg.learner_outer_iters_init)
        taus[k] = tau
        buffers[k] = buf

    if diagnostics is not None:
        diagnostics["tau_after_init"] = _tau_snapshot(taus)

    probs0 = np.stack([(annotation == k).astype(np.float64) for k in objects])
    results = [SegResult(probs=probs0, labels=annotation.astype(np.uint8),
                         frame_index=framesets[0].index,
                         seconds=time.perf_counter() - t_start, updated=True,
                         meta={"pad": (ph, pw)})]

    for fs_raw in framesets[1:]:
        tic = time.perf_counter()
        fs, _ = _pad_frameset(fs_raw)
        pyr_im, pyr_fl = _pyramids(model, fs, cfg)
        fused = fuse_pyramid(pyr_im, pyr_fl, model.fusion_dec,
                             l1_source=cfg.decoder_l1_source)
        prob_list = []
        for k in objects:
            f_tm = apply(pyr_im[3], None if pyr_fl is None else pyr_fl[3],
                         taus[k], model.fusion_tm)
            logits = decode(f_tm, fused, model.decoder)
            prob_list.append(ad.sigmoid(logits).data[0, :h0, :w0])
        probs = np.stack(prob_list)
        best = np.argmax(probs, axis=0)
        labels = np.where(probs.max(axis=0) > 0.5,
                          np.asarray(objects, dtype=np.uint8)[best], 0
                          ).astype(np.uint8)

        padded_labels = np.pad(labels, ((0, ph), (0, pw)))
        for k in objects:
            sample = _object_sample(model, pyr_im, pyr_fl,
                                    (padded_labels == k).astype(np.float64),
                                    fs_raw.index)
            buffers[k].add(sample)
        confidence = float(np.mean(np.maximum(probs, 1.0 - probs)))
        updated = False
        if (fs_raw.index % cfg.learner_update_every == 0
                or confidence > cfg.learner_update_conf):
            for k in objects:
                optimize(taus[k], buffers[k], model.fusion_tm, lcfg,
                         outer_iters=cfg.learner_outer_iters_update)
            updated = True
        results.append(SegResult(probs=probs, labels=labels,
                                 frame_index=fs_raw.index,
                                 seconds=time.perf_counter() - tic,
                                 updated=updated,
                                 meta={"pad": (ph, pw),
                                       "confidence": confidence}))
    if diagnostics is not None:
        diagnostics["tau_final"] = _tau_snapshot(taus)
    return results


# ---------------------------------------------------------------------------
# augmentation


def flip_frameset(fs: FrameSet) -> FrameSet:
    """Horizontal mirror; the horizontal flow component changes sign."""
    uv = fs.flow.uv[:, :, ::-1].copy()
    uv[0] = -uv[0]
    return FrameSet(image=fs.image[:, :, ::-1].copy(),
                    flow=FlowField(uv, fs.flow.src_index, fs.flow.dst_index),
                    mask=None if fs.mask is None else fs.mask[:, ::-1].copy(),
                    index=fs.index)


def _bilinear_sample(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    h, w = img.shape[1:]
    y0 = np.clip(np.floor(sy).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(sx).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(sy, 0, h - 1) - y0
    fx = np.clip(sx, 0, w - 1) - x0
    top = img[:, y0, x0] * (1 - fx) + img[:, y0, x1] * fx
    bot = img[:, y1, x0] * (1 - fx) + img[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _nearest_sample(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2:]
    yi = np.clip(np.rint(sy).astype(int), 0, h - 1)
    xi = np.clip(np.rint(sx).astype(int), 0, w - 1)
    return img[..., yi, xi]


def affine_frameset(fs: FrameSet, rng, max_rot_deg: float = 15.0,
                    scale_range: tuple = (0.9, 1.1),
                    max_shift: float = 4.0) -> FrameSet:
    """Random rotation/scale/shift; flow vectors transform by the linear part."""
    ang = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg))
    s = rng.uniform(*scale_range)
    tx, ty = rng.uniform(-max_shift, max_shift, size=2)
    a = s * np.array([[np.cos(ang), -np.sin(ang)],
                      [np.sin(ang), np.cos(ang)]])
    ainv = np.linalg.inv(a)
    h, w = fs.image.shape[1:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    rel_x = xx - cx - tx
    rel_y = yy - cy - ty
    sx = ainv[0, 0] * rel_x + ainv[0, 1] * rel_y + cx
    sy = ainv[1, 0] * rel_x + ainv[1, 1] * rel_y + cy

    image = _bilinear_sample(fs.image, sy, sx)
    mask = None if fs.mask is None else _nearest_sample(fs.mask, sy, sx)
    uv_src = _nearest_sample(fs.flow.uv, sy, sx)
    uv = np.empty_like(uv_src)
    uv[0] = a[0, 0] * uv_src[0] + a[0, 1] * uv_src[1]
    uv[1] = a[1, 0] * uv_src[0] + a[1, 1] * uv_src[1]
    return FrameSet(image=image,
                    flow=FlowField(uv, fs.flow.src_index, fs.flow.dst_index),
                    mask=mask, index=fs.index)


def augment_frameset(fs: FrameSet, rng) -> FrameSet:
    out = fs
    if rng.random() < 0.5:
        out = flip_frameset(out)
    return affine_frameset(out, rng)


def _crop_frameset(fs: FrameSet, y0: int, x0: int, size: int) -> FrameSet:
    sl = (slice(y0, y0 + size), slice(x0, x0 + size))
    return FrameSet(image=fs.image[:, sl[0], sl[1]].copy(),
                    flow=FlowField(fs.flow.uv[:, sl[0], sl[1]].copy(),
                                   fs.flow.src_index, fs.flow.dst_index),
                    mask=fs.mask[sl].copy() if fs.mask is not None else None,
                    index=fs.index)


# ---------------------------------------------------------------------------
# offline training


class Adam:
    """First-order adaptive-moment update with bias correction."""

    def __init__(self, params: list, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.data
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / b1c
            v_hat = self._v[i] / b2c
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainingSample:
    reference: FrameSet
    tests: list
    object_id: int


def _draw_sample(seq: Sequence, rng, cfg: RunConfig) -> TrainingSample:
    n = len(seq)
    if n >= 4:
        idx = rng.choice(n, size=4, replace=False)
    else:
        warnings.warn(f"sequence {seq.name} shorter than 4 frames; "
                      "sampling with replacement")
        idx = rng.choice(n, size=4, replace=True)
    sets = [frame_sets(seq)[i] for i in idx]

    h, w = sets[0].image.shape[1:]
    size = cfg.train_crop
    if h > size or w > size:
        y0 = int(rng.integers(0, h - size + 1))
        x0 = int(rng.integers(0, w - size + 1))
        sets = [_crop_frameset(fs, y0, x0, size) for fs in sets]

    present = [int(k) for k in np.unique(sets[0].mask) if k > 0]
    obj = int(rng.choice(present)) if present else 1
    return TrainingSample(reference=sets[0], tests=sets[1:], object_id=obj)


def _fit_reference(sample: TrainingSample, model: Model, cfg: RunConfig,
                   lcfg: LearnerConfig, rng) -> TargetModelParams:
    """Inner loop: fit the target model on the (augmented) reference frame."""
    refs = [sample.reference]
    for _ in range(cfg.train_aug_copies):
        refs.append(augment_frameset(sample.reference, rng))
    buf = MemoryBuffer(capacity=len(refs), decay=1.0, pinned_weight=1.0)
    for fs in refs:
        pyr_im, pyr_fl = _pyramids(model, fs, cfg)
        mask01 = (fs.mask == sample.object_id).astype(np.float64)
        buf.add(_object_sample(model, pyr_im, pyr_fl, mask01, fs.index))
    tau = _new_target_model(model, cfg, (_SEED_TRAIN, int(rng.integers(2 ** 31))))
    optimize(tau, buf, model.fusion_tm, lcfg,
             outer_iters=cfg.learner_outer_iters_init)
    return tau


def _detached(tau: TargetModelParams) -> TargetModelParams:
    def d(pair):
        return (pair[0].detach(), pair[1].detach())

    return TargetModelParams(tau1=d(tau.tau1),
                             tau2=None if tau.tau2 is None else d(tau.tau2),
                             reg_lambda=tau.reg_lambda)


def _sample_loss(sample: TrainingSample, tau: TargetModelParams, model: Model,
                 cfg: RunConfig) -> Tensor:
    """Mean decoder loss over the test frames (the 1/(N-1) average)."""
    terms = []
    for fs in sample.tests:
        pyr_im, pyr_fl = _pyramids(model, fs, cfg)
        f_tm = apply(pyr_im[3], None if pyr_fl is None else pyr_fl[3], tau,
                     model.fusion_tm)
        fused = fuse_pyramid(pyr_im, pyr_fl, model.fusion_dec,
                             l1_source=cfg.decoder_l1_source)
        logits = decode(f_tm, fused, model.decoder)
        target = (fs.mask == sample.object_id).astype(np.float64)[None]
        terms.append(balanced_bce_with_logits(logits, target))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total * (1.0 / len(terms))


def train_offline(sequences: list, model: Model, cfg: RunConfig,
                  epochs: Optional[int] = None, log=None) -> list:
    """Train decoder, fusion and backbone parameters; returns per-epoch means."""
    if not sequences:
        raise ValueError("train_offline: no sequences")
    epochs = cfg.train_epochs if epochs is None else epochs
    params = model.offline_parameters()
    adam = Adam(params, lr=cfg.train_lr)
    lcfg = learner_config(cfg)
    rng = np.random.default_rng([cfg.seed, 0xDA7A])
    history = []
    for epoch in range(epochs):
        losses = []
        for si in rng.permutation(len(sequences)):
            seq = sequences[int(si)]
            for _ in range(cfg.train_samples_per_seq):
                sample = _draw_sample(seq, rng, cfg)
                tau = _detached(_fit_reference(sample, model, cfg, lcfg, rng))
                adam.zero_grad()
                with Tape() as tape:
                    loss = _sample_loss(sample, tau, model, cfg)
                tape.backward(loss)
                adam.step()
                losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if log is not None:
            log(f"epoch {epoch + 1}/{epochs}: loss {history[-1]:.4f}")
    return history


def evaluate_offline(sequences: list, model: Model, cfg: RunConfig,
                     seed: int = 0) -> float:
    """Mean decoder loss over a deterministic sample draw, without updates."""
    lcfg = learner_config(cfg)
    losses = []
    for i, seq in enumerate(sequences):
        rng = np.random.default_rng([seed, i])
        sample = _draw_sample(seq, rng, cfg)
        tau = _fit_reference(sample, model, cfg, lcfg, rng)
        losses.append(_sample_loss(sample, tau, model, cfg).item())
    return float(np.mean(losses))
