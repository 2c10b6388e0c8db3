"""Synthetic bimodal scenes and the on-disk sample format.

People are soft Gaussian blobs. In the RGB channels person contrast
scales with the scene's illumination, so dark scenes hide people; in
the aux channel people are always bright (thermal-like). Scenes also
contain distractors (lamp-like clutter): warm in aux exactly like a
person, but self-luminous in RGB at any illumination. Neither channel
alone separates people from distractors, so counting requires actually
fusing the modalities. Images are quantized to the 16-bit grid at
generation time so a save/load round trip is exact.

Layout: <root>/<split>/<id>/{rgb.ppm, aux.pgm, points.json}
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, ParseError, ShapeError

MAXVAL = 65535


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    count_range: tuple = (1, 12)
    distractor_range: tuple = (0, 6)
    radius_range: tuple = (2.0, 5.0)
    illumination: float = 1.0
    occlusion_prob: float = 0.2
    aux_failure_prob: float = 0.0
    rgb_noise: float = 0.02
    aux_noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ContractError(f"bad person count range {self.count_range}")
        if self.height % 8 or self.width % 8:
            raise ShapeError(f"image extents {self.height}x{self.width} must divide by 8")


@dataclass
class ModalSample:
    rgb: np.ndarray          # (3, H, W) in [0, 1]
    aux: np.ndarray          # (1, H, W) in [0, 1]
    points: np.ndarray       # (n, 2) float (x, y) pixel coordinates
    id: str

    @property
    def height(self) -> int:
        return self.rgb.shape[1]

    @property
    def width(self) -> int:
        return self.rgb.shape[2]


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * MAXVAL) / MAXVAL


def generate(spec: SceneSpec) -> ModalSample:
    """Render one deterministic scene from its spec."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    lo, hi = spec.count_range
    n = int(rng.integers(lo, hi + 1))

    # a failed aux sensor records pure noise; only drawn for scenes bright
    # enough that the people remain countable from RGB alone
    aux_failed = (spec.illumination >= 0.5
                  and rng.random() < spec.aux_failure_prob)

    tint = rng.uniform(0.8, 1.0, (3, 1, 1))
    rgb = (0.15 + 0.35 * spec.illumination) * tint + rng.normal(0.0, spec.rgb_noise, (3, h, w))
    aux = 0.08 + rng.normal(0.0, spec.aux_noise, (1, h, w))

    # pixel i spans [i, i+1); sample the continuous scene at cell centers
    ys, xs = np.mgrid[0:h, 0:w] + 0.5

    def soft_blob(px, py, radius):
        return np.exp(-((xs - px) ** 2 + (ys - py) ** 2) / (2.0 * (radius / 2.0) ** 2))

    points = np.zeros((n, 2))
    for i in range(n):
        px = rng.uniform(1.0, w - 2.0)
        py = rng.uniform(1.0, h - 2.0)
        radius = rng.uniform(*spec.radius_range)
        occluded = rng.random() < spec.occlusion_prob
        blob = soft_blob(px, py, radius)
        person_tint = rng.uniform(0.6, 1.0, (3, 1, 1))
        rgb_amp = 0.5 * spec.illumination * (0.25 if occluded else 1.0)
        rgb += rgb_amp * person_tint * blob[None]
        if not aux_failed:
            aux += 0.85 * (0.9 if occluded else 1.0) * blob[None]
        points[i] = (px, py)

    # lamp-like clutter: indistinguishable from a person in aux, but
    # bright in RGB at any illumination (people are not annotated here)
    d_lo, d_hi = spec.distractor_range
    for _ in range(int(rng.integers(d_lo, d_hi + 1))):
        blob = soft_blob(rng.uniform(1.0, w - 2.0), rng.uniform(1.0, h - 2.0),
                         rng.uniform(*spec.radius_range))
        rgb += 0.9 * rng.uniform(0.9, 1.0, (3, 1, 1)) * blob[None]
        if not aux_failed:
            aux += 0.85 * blob[None]

    if aux_failed:
        aux = aux + rng.uniform(0.0, 0.6) * np.abs(rng.normal(0.0, 0.5, (1, h, w)))

    return ModalSample(rgb=_quantize(rgb), aux=_quantize(aux), points=points,
                       id=f"scene-{spec.seed}")


# -- portable netpbm + json serialization -----------------------------------

def _write_pnm(path, arr: np.ndarray, magic: bytes):
    # arr: (H, W) or (H, W, 3) float in [0, 1] on the 16-bit grid
    h, w = arr.shape[:2]
    raw = np.round(arr * MAXVAL).astype(">u2")
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n%d\n" % (w, h, MAXVAL))
        f.write(raw.tobytes())


class _PnmReader:
    """Header tokenizer tracking byte offsets for error reporting."""

    def __init__(self, path):
        self.path = path
        with open(path, "rb") as f:
            self.buf = f.read()
        self.pos = 0

    def fail(self, message):
        raise ParseError(self.path, self.pos, message)

    def token(self) -> bytes:
        while self.pos < len(self.buf):
            c = self.buf[self.pos:self.pos + 1]
            if c == b"#":
                while self.pos < len(self.buf) and self.buf[self.pos:self.pos + 1] != b"\n":
                    self.pos += 1
            elif c.isspace():
                self.pos += 1
            else:
                break
        start = self.pos
        while self.pos < len(self.buf) and not self.buf[self.pos:self.pos + 1].isspace():
            self.pos += 1
        if start == self.pos:
            self.fail("unexpected end of header")
        return self.buf[start:self.pos]

    def integer(self) -> int:
        tok = self.token()
        if not tok.isdigit():
            self.fail(f"expected integer, got {tok!r}")
        return int(tok)

    def raster(self, count: int) -> np.ndarray:
        # exactly one whitespace byte separates the header from the raster
        if self.pos >= len(self.buf) or not self.buf[self.pos:self.pos + 1].isspace():
            self.fail("missing whitespace before raster")
        self.pos += 1
        need = count * 2
        if len(self.buf) - self.pos < need:
            self.fail(f"raster truncated: need {need} bytes, have {len(self.buf) - self.pos}")
        return np.frombuffer(self.buf, dtype=">u2", count=count, offset=self.pos)


def _read_pnm(path, magic: bytes) -> np.ndarray:
    r = _PnmReader(path)
    got = r.token()
    if got != magic:
        r.fail(f"expected magic {magic.decode()}, got {got!r}")
    w = r.integer()
    h = r.integer()
    maxval = r.integer()
    if maxval != MAXVAL:
        r.fail(f"expected maxval {MAXVAL}, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    raw = r.raster(h * w * channels)
    arr = raw.astype(np.float64).reshape(h, w, channels) / MAXVAL
    return arr


def save_sample(directory, sample: ModalSample):
    os.makedirs(directory, exist_ok=True)
    _write_pnm(os.path.join(directory, "rgb.ppm"),
               sample.rgb.transpose(1, 2, 0), b"P6")
    _write_pnm(os.path.join(directory, "aux.pgm"),
               sample.aux[0], b"P5")
    with open(os.path.join(directory, "points.json"), "w") as f:
        json.dump({"points": [[float(x), float(y)] for x, y in sample.points]}, f)


def load_sample(directory) -> ModalSample:
    rgb_path = os.path.join(directory, "rgb.ppm")
    rgb = _read_pnm(rgb_path, b"P6").transpose(2, 0, 1)
    aux = _read_pnm(os.path.join(directory, "aux.pgm"), b"P5")[None, :, :, 0]
    if rgb.shape[1] % 8 or rgb.shape[2] % 8:
        raise ShapeError(f"{rgb_path}: extents {rgb.shape[1]}x{rgb.shape[2]} not divisible by 8")
    if rgb.shape[1:] != aux.shape[1:]:
        raise ShapeError(f"{directory}: rgb {rgb.shape[1:]} and aux {aux.shape[1:]} extents differ")
    points_path = os.path.join(directory, "points.json")
    try:
        with open(points_path) as f:
            doc = json.load(f)
        points = np.asarray(doc["points"], dtype=np.float64).reshape(-1, 2)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ParseError(points_path, 0, f"bad annotation document: {exc}") from None
    h, w = rgb.shape[1:]
    if points.size and (points.min() < 0 or points[:, 0].max() >= w or points[:, 1].max() >= h):
        raise ContractError(f"{points_path}: annotation outside the {w}x{h} image")
    return ModalSample(rgb=rgb, aux=aux, points=points, id=os.path.basename(str(directory)))


def load_split(root, split) -> list[ModalSample]:
    split_dir = os.path.join(root, split)
    if not os.path.isdir(split_dir):
        raise ContractError(f"no such split directory: {split_dir}")
    ids = sorted(os.listdir(split_dir))
    samples = [load_sample(os.path.join(split_dir, sid)) for sid in ids]
    if not samples:
        raise ContractError(f"split {split!r} is empty")
    return samples


def _worker_count(n_jobs: int) -> int:
    cap = os.environ.get("MODAL_EMU_THREADS", "1")
    try:
        cap = max(int(cap), 1)
    except ValueError:
        cap = 1
    return min(cap, n_jobs) if n_jobs else 1


def generate_split(root, split, count, base_spec: SceneSpec, seed: int,
                   illumination_range=(0.0, 1.0)) -> list[str]:
    """Write `count` scenes; each scene's seed and illumination derive from `seed`.

    All per-scene draws happen up front so the result is independent of
    render order; MODAL_EMU_THREADS caps render/write parallelism.
    """
    rng = np.random.default_rng([seed, {"train": 0, "val": 1, "test": 2}.get(split, 3)])
    specs = []
    for i in range(count):
        illum = float(rng.uniform(*illumination_range))
        specs.append(replace(base_spec, seed=int(rng.integers(0, 2 ** 31)),
                             illumination=illum))

    def render(i: int) -> str:
        sample = generate(specs[i])
        sid = f"{split}-{i:04d}"
        sample.id = sid
        save_sample(os.path.join(root, split, sid), sample)
        return sid

    workers = _worker_count(count)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(render, range(count)))
    return [render(i) for i in range(count)]


# -- augmentation ------------------------------------------------------------

def augment(sample: ModalSample, crop_size: int, flip_prob: float,
            rng: np.random.Generator) -> ModalSample:
    """One shared geometric transform for both modalities and the points."""
    h, w = sample.height, sample.width
    if crop_size > h or crop_size > w:
        raise ContractError(f"crop {crop_size} exceeds image extents {h}x{w}")
    if crop_size % 8:
        raise ContractError(f"crop size {crop_size} must divide by 8")
    oy = int(rng.integers(0, h - crop_size + 1))
    ox = int(rng.integers(0, w - crop_size + 1))
    flip = bool(rng.random() < flip_prob)

    rgb = sample.rgb[:, oy:oy + crop_size, ox:ox + crop_size]
    aux = sample.aux[:, oy:oy + crop_size, ox:ox + crop_size]
    pts = sample.points - np.array([ox, oy], dtype=np.float64)
    if flip:
        rgb = rgb[:, :, ::-1]
        aux = aux[:, :, ::-1]
        pts = pts.copy()
        pts[:, 0] = crop_size - pts[:, 0]   # mirror about the window center
    keep = ((pts[:, 0] >= 0) & (pts[:, 0] < crop_size)
            & (pts[:, 1] >= 0) & (pts[:, 1] < crop_size))
    return ModalSample(rgb=np.ascontiguousarray(rgb), aux=np.ascontiguousarray(aux),
                       points=pts[keep], id=sample.id)
