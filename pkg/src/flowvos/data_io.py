"""Sequence ingestion, binary image/flow formats, and synthetic sequences.

A sequence directory holds ``frames/%05d.ppm`` (binary P6), ``flows/%05d.flo``
(Middlebury layout; file t stores the flow from frame t-1 to frame t, and
``00000.flo`` stores the forward flow from frame 0 to frame 1),
``masks/%05d.pgm`` (binary P5 label image, 0 = background, k = object k) and
a line-oriented ``meta`` file.

The generator renders rigid shapes under integer per-frame translations, so
the written flow equals the scripted displacement exactly and object
appearance is bit-stable across frames.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .flow_embed import FlowField

FLO_MAGIC = 202021.25

__all__ = [
    "DataFormatError",
    "read_flo",
    "write_flo",
    "read_ppm",
    "write_ppm",
    "read_pgm",
    "write_pgm",
    "SequenceMeta",
    "Sequence",
    "load_sequence",
    "ShapeSpec",
    "SynthScene",
    "random_scene",
    "generate_synthetic",
    "generate_suite",
]


class DataFormatError(Exception):
    """A file violates one of the documented on-disk formats."""


# ---------------------------------------------------------------------------
# Middlebury .flo


def write_flo(path, flow: FlowField) -> None:
    h, w = flow.shape
    uv = flow.uv.astype(np.float32)
    interleaved = np.empty((h, w, 2), dtype="<f4")
    interleaved[:, :, 0] = uv[0]
    interleaved[:, :, 1] = uv[1]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(interleaved.tobytes())


def read_flo(path) -> FlowField:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12:
            raise DataFormatError(f"{path}: truncated header at byte offset {len(head)}")
        magic, = struct.unpack("<f", head[:4])
        if abs(magic - FLO_MAGIC) > 1e-3:
            raise DataFormatError(
                f"{path}: bad magic {magic!r} at byte offset 0, expected {FLO_MAGIC}")
        w, h = struct.unpack("<ii", head[4:12])
        if w < 1 or h < 1:
            raise DataFormatError(f"{path}: invalid extents {w}x{h} at byte offset 4")
        need = 2 * 4 * w * h
        payload = fh.read(need)
        if len(payload) < need:
            raise DataFormatError(
                f"{path}: truncated payload at byte offset {12 + len(payload)}, "
                f"expected {12 + need} bytes total")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2)
    uv = np.stack([data[:, :, 0], data[:, :, 1]]).astype(np.float64)
    return FlowField(uv)


# ---------------------------------------------------------------------------
# PPM / PGM


def _read_pnm_header(fh, magic: bytes, path) -> tuple[int, int]:
    got = fh.read(2)
    if got != magic:
        raise DataFormatError(f"{path}: expected {magic.decode()} header, got {got!r}")

    fields = []
    while len(fields) < 3:
        tok = b""
        ch = fh.read(1)
        while ch.isspace():
            ch = fh.read(1)
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = fh.read(1)
        if not tok:
            raise DataFormatError(f"{path}: truncated header")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise DataFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    return w, h


def write_ppm(path, img: np.ndarray) -> None:
    """Write a 3xHxW uint8 (or [0,1] float) image as binary P6."""
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError(f"ppm image must be 3xHxW, got shape {a.shape}")
    if a.dtype != np.uint8:
        a = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    h, w = a.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(a.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file as 3xHxW uint8."""
    with open(path, "rb") as fh:
        w, h = _read_pnm_header(fh, b"P6", path)
        payload = fh.read(3 * w * h)
        if len(payload) < 3 * w * h:
            raise DataFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)


def write_pgm(path, img: np.ndarray) -> None:
    """Write an HxW uint8 label/gray image as binary P5."""
    a = np.asarray(img)
    if a.ndim != 2:
        raise ValueError(f"pgm image must be HxW, got shape {a.shape}")
    a = a.astype(np.uint8)
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(a.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = _read_pnm_header(fh, b"P5", path)
        payload = fh.read(w * h)
        if len(payload) < w * h:
            raise DataFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# sequence directories


@dataclass
class SequenceMeta:
    width: int
    height: int
    frames: int
    objects: int
    categories: dict = field(default_factory=dict)   # object id -> tag string


def write_meta(path, meta: SequenceMeta) -> None:
    with open(path, "w") as fh:
        fh.write("# flows/t.flo maps frame t-1 forward to frame t; 00000.flo is flow 0->1\n")
        fh.write(f"width={meta.width}\n")
        fh.write(f"height={meta.height}\n")
        fh.write(f"frames={meta.frames}\n")
        fh.write(f"objects={meta.objects}\n")
        for k in sorted(meta.categories):
            fh.write(f"category.{k}={meta.categories[k]}\n")


def read_meta(path) -> SequenceMeta:
    vals: dict = {}
    cats: dict = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key.startswith("category."):
                cats[int(key.split(".", 1)[1])] = val
            else:
                vals[key] = val
    try:
        return SequenceMeta(width=int(vals["width"]), height=int(vals["height"]),
                            frames=int(vals["frames"]), objects=int(vals["objects"]),
                            categories=cats)
    except KeyError as e:
        raise DataFormatError(f"{path}: missing meta key {e.args[0]}") from None


@dataclass
class Sequence:
    """One loaded sequence: [0,1] images, flows, and label masks per frame."""

    name: str
    meta: SequenceMeta
    images: list        # of 3xHxW float64 in [0,1]
    flows: list         # of FlowField
    masks: list         # of HxW uint8 label images

    def __len__(self):
        return self.meta.frames


def load_sequence(path) -> Sequence:
    root = Path(path)
    meta_path = root / "meta"
    if not meta_path.exists():
        raise DataFormatError(f"{meta_path}: missing meta file")
    meta = read_meta(meta_path)
    images, flows, masks = [], [], []
    for t in range(meta.frames):
        fp = root / "frames" / f"{t:05d}.ppm"
        lp = root / "flows" / f"{t:05d}.flo"
        mp = root / "masks" / f"{t:05d}.pgm"
        for p in (fp, lp, mp):
            if not p.exists():
                raise DataFormatError(f"{p}: missing file for frame index {t}")
        img = read_ppm(fp)
        flow = read_flo(lp)
        mask = read_pgm(mp)
        if img.shape[1:] != (meta.height, meta.width):
            raise DataFormatError(
                f"{fp}: size {img.shape[2]}x{img.shape[1]} != meta "
                f"{meta.width}x{meta.height}")
        if flow.shape != (meta.height, meta.width):
            raise DataFormatError(f"{lp}: flow size mismatch with meta")
        if mask.shape != (meta.height, meta.width):
            raise DataFormatError(f"{mp}: mask size mismatch with meta")
        if t == 0:
            flow.src_index, flow.dst_index = 0, 1
        else:
            flow.src_index, flow.dst_index = t - 1, t
        images.append(img.astype(np.float64) / 255.0)
        flows.append(flow)
        masks.append(mask)
    extra = root / "frames" / f"{meta.frames:05d}.ppm"
    if extra.exists():
        raise DataFormatError(f"{meta_path}: frame count {meta.frames} but {extra} exists")
    return Sequence(name=root.name, meta=meta, images=images, flows=flows, masks=masks)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class ShapeSpec:
    kind: str                      # "disk" | "rect"
    size: tuple                    # disk: (radius,), rect: (height, width)
    color: tuple                   # rgb in [0,1]
    start: tuple                   # (cx, cy) integer pixels
    velocity: tuple                # (vx, vy) integer pixels per frame
    textured: bool = False
    texture_seed: int = 0
    bounce: bool = True


@dataclass
class SynthScene:
    width: int
    height: int
    frames: int
    seed: int
    shapes: list                   # back to front; object k is shapes[k-1]
    background: str = "noise"      # "noise" | "flat"
    bg_level: float = 0.15
    categories: dict = field(default_factory=dict)


def _shape_mask(spec: ShapeSpec, cx: float, cy: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if spec.kind == "disk":
        r = spec.size[0]
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if spec.kind == "rect":
        hh, ww = spec.size
        return (np.abs(xx - cx) <= ww / 2.0) & (np.abs(yy - cy) <= hh / 2.0)
    raise ValueError(f"unknown shape kind {spec.kind!r}")


def _shape_texture(spec: ShapeSpec, cx: int, cy: int, h: int, w: int) -> np.ndarray:
    """3xHxW appearance anchored to the shape center, rigid under translation."""
    base = np.array(spec.color, dtype=np.float64)[:, None, None]
    img = np.broadcast_to(base, (3, h, w)).copy()
    if spec.textured:
        tile_rng = np.random.default_rng(spec.texture_seed)
        tile = 0.6 + 0.4 * tile_rng.random((16, 16))
        yy, xx = np.mgrid[0:h, 0:w]
        img = img * tile[(yy - cy) % 16, (xx - cx) % 16][None]
    return img


def _margins(spec: ShapeSpec) -> tuple[float, float]:
    if spec.kind == "disk":
        return spec.size[0], spec.size[0]
    return spec.size[1] / 2.0, spec.size[0] / 2.0


def _simulate_tracks(scene: SynthScene) -> list:
    """Integer center positions per shape per frame, bouncing off the walls."""
    tracks = []
    for spec in scene.shapes:
        mx, my = _margins(spec)
        cx, cy = spec.start
        vx, vy = spec.velocity
        pos = [(cx, cy)]
        for _ in range(scene.frames - 1):
            nx, ny = cx + vx, cy + vy
            if spec.bounce:
                if nx - mx < 0 or nx + mx > scene.width - 1:
                    vx = -vx
                    nx = cx + vx
                if ny - my < 0 or ny + my > scene.height - 1:
                    vy = -vy
                    ny = cy + vy
            cx, cy = nx, ny
            pos.append((cx, cy))
        tracks.append(pos)
    return tracks


def _render_frame(scene: SynthScene, tracks, t: int, bg: np.ndarray):
    h, w = scene.height, scene.width
    img = bg.copy()
    labels = np.zeros((h, w), dtype=np.uint8)
    for k, spec in enumerate(scene.shapes):      # later shapes overwrite: they are in front
        cx, cy = tracks[k][t]
        m = _shape_mask(spec, cx, cy, h, w)
        tex = _shape_texture(spec, cx, cy, h, w)
        img[:, m] = tex[:, m]
        labels[m] = k + 1
    return img, labels


def generate_synthetic(scene: SynthScene, out_dir) -> Path:
    """Render a scene to a sequence directory with exact ground-truth flow."""
    if scene.frames < 1:
        raise ValueError("scene needs at least one frame")
    if not scene.shapes:
        raise ValueError("scene needs at least one object")
    root = Path(out_dir)
    for sub in ("frames", "flows", "masks"):
        os.makedirs(root / sub, exist_ok=True)

    rng = np.random.default_rng(scene.seed)
    h, w = scene.height, scene.width
    if scene.background == "noise":
        bg = scene.bg_level * (0.6 + 0.4 * rng.random((3, h, w)))
    else:
        bg = np.full((3, h, w), scene.bg_level)

    tracks = _simulate_tracks(scene)
    masks = []
    for t in range(scene.frames):
        img, labels = _render_frame(scene, tracks, t, bg)
        write_ppm(root / "frames" / f"{t:05d}.ppm", img)
        write_pgm(root / "masks" / f"{t:05d}.pgm", labels)
        masks.append(labels)

    for t in range(scene.frames):
        # file t: displacement of frame t-1 pixels toward frame t (file 0: 0 -> 1)
        src = 0 if t == 0 else t - 1
        dst = min(src + 1, scene.frames - 1)
        uv = np.zeros((2, h, w))
        for k in range(len(scene.shapes)):
            sel = masks[src] == k + 1
            dx = tracks[k][dst][0] - tracks[k][src][0]
            dy = tracks[k][dst][1] - tracks[k][src][1]
            uv[0][sel] = dx
            uv[1][sel] = dy
        write_flo(root / "flows" / f"{t:05d}.flo",
                  FlowField(uv, src_index=src, dst_index=dst))

    write_meta(root / "meta", SequenceMeta(width=w, height=h, frames=scene.frames,
                                           objects=len(scene.shapes),
                                           categories=dict(scene.categories)))
    return root


def random_scene(width: int, height: int, frames: int, objects: int, seed: int,
                 distractors: bool = False) -> SynthScene:
    """Sample a scene; with ``distractors`` every object shares one appearance."""
    rng = np.random.default_rng(seed)
    shapes = []
    kind = rng.choice(["disk", "rect"])
    shared_color = tuple(0.55 + 0.45 * rng.random(3))
    shared_tex = int(rng.integers(0, 2 ** 31))

    def start_with_runway(margin: int, extent: int, travel: int) -> int:
        # start so the whole scripted trajectory stays in-canvas (no bounce,
        # so each object's flow signature is persistent over the sequence)
        lo = margin + 1 + max(0, -travel)
        hi = extent - margin - 2 - max(0, travel)
        if hi <= lo:
            return (extent - 1) // 2
        return int(rng.integers(lo, hi + 1))

    for k in range(objects):
        if distractors:
            skind, color, tex_seed = kind, shared_color, shared_tex
            size = (7,) if skind == "disk" else (13, 13)
            # identical twins separated by motion only; the speed contrast
            # keeps their flow signatures apart in every frame
            speed = 1 if k % 2 == 0 else 3
            vx = int(rng.choice([-1, 1])) * speed
            vy = int(rng.integers(-1, 2))
        else:
            skind = rng.choice(["disk", "rect"])
            color = tuple(0.4 + 0.6 * rng.random(3))
            tex_seed = int(rng.integers(0, 2 ** 31))
            size = ((int(rng.integers(5, 9)),) if skind == "disk"
                    else (int(rng.integers(9, 15)), int(rng.integers(9, 15))))
            speed = int(rng.integers(1, 4))
            vx = int(rng.choice([-1, 1])) * speed
            vy = int(rng.choice([-1, 1])) * int(rng.integers(0, speed + 1))
        mx, my = _margins(ShapeSpec(skind, size, color, (0, 0), (0, 0)))
        cx = start_with_runway(int(np.ceil(mx)), width, vx * (frames - 1))
        cy = start_with_runway(int(np.ceil(my)), height, vy * (frames - 1))
        shapes.append(ShapeSpec(kind=skind, size=size, color=color,
                                start=(cx, cy), velocity=(vx, vy),
                                textured=True, texture_seed=tex_seed))
    cats = {k + 1: ("twin" if distractors else "solo") for k in range(objects)}
    # a textured background would leak object position into the appearance
    # features and let an appearance-only model tell identical twins apart
    background = "flat" if distractors else "noise"
    return SynthScene(width=width, height=height, frames=frames, seed=seed,
                      shapes=shapes, background=background, categories=cats)


def generate_suite(out_dir, count: int, width: int, height: int, frames: int,
                   objects: int, seed: int, distractors: bool = False) -> list:
    """Generate ``count`` sequences seq_000.. under ``out_dir``; returns their paths."""
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(count)
    paths = []
    for i, child in enumerate(children):
        sub_seed = int(child.generate_state(1)[0] % (2 ** 31))
        scene = random_scene(width, height, frames, objects, sub_seed,
                             distractors=distractors)
        paths.append(generate_synthetic(scene, Path(out_dir) / f"seq_{i:03d}"))
    return paths
