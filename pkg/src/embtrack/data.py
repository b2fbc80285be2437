"""Intensity normalisation, augmentation, resizing and synthetic videos."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .track import LineageForest, upsample_labels


# ---------------------------------------------------------------- intensity

def normalize_intensity(image: np.ndarray, i_min: float, i_max: float) -> np.ndarray:
    """Map robust min/max to -1/1.

    The robust minimum is the median of the lowest ``i_min`` fraction of all
    values, the robust maximum the median of the highest ``i_max`` fraction.
    Values outside are not clipped.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty image")
    v = np.sort(x, axis=None)
    k_lo = max(1, int(round(i_min * v.size)))
    k_hi = max(1, int(round(i_max * v.size)))
    v_min = float(np.median(v[:k_lo]))
    v_max = float(np.median(v[-k_hi:]))
    if v_max <= v_min:
        return np.zeros_like(x)
    return 2.0 * (x - v_min) / (v_max - v_min) - 1.0


def smooth(image: np.ndarray, sigma: float) -> np.ndarray:
    if not sigma:
        return image
    if image.ndim == 3:
        return np.stack([ndimage.gaussian_filter(f, sigma) for f in image])
    return ndimage.gaussian_filter(image, sigma)


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentConfig:
    i_min: float = 0.2
    i_max: float = 0.1
    i_shift: tuple = (-0.25, 0.25)
    i_scale: tuple = (0.75, 1.25)
    t: tuple = (-25.0, 25.0)
    f_p: float = 0.5
    r: tuple = (-180.0, 180.0)
    s: tuple = (0.75, 1.25)
    b: float = 10.0  # max control-point displacement, px
    g: float = 32.0  # control-point spacing, px
    gaussian_sigma: float = 0.0
    pad_mode: str = "mirror"  # or "zero"

    def __post_init__(self):
        for name in ("i_shift", "i_scale", "t", "r", "s"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} interval is not ordered: {lo} > {hi}")
            setattr(self, name, (float(lo), float(hi)))
        if not 0.0 <= self.f_p <= 1.0:
            raise ValueError("f_p must lie in [0, 1]")
        if self.b < 0 or self.g <= 0:
            raise ValueError("b >= 0 and g > 0 required")
        if self.pad_mode not in ("mirror", "zero"):
            raise ValueError(f"unknown pad_mode {self.pad_mode!r}")

    @classmethod
    def identity(cls, **kw) -> "AugmentConfig":
        base = dict(i_shift=(0, 0), i_scale=(1, 1), t=(0, 0), f_p=0.0, r=(0, 0),
                    s=(1, 1), b=0.0)
        base.update(kw)
        return cls(**base)


@dataclass
class SpatialTransform:
    """Sampled similarity transform plus elastic field, output -> source."""
    shape: tuple
    translation: tuple = (0.0, 0.0)  # (tx, ty), px
    flip: tuple = (False, False)  # (x, y)
    angle: float = 0.0  # degrees
    scale: float = 1.0
    displacement: np.ndarray | None = None  # (2, H, W) elastic offsets (dy, dx)

    def source_coords(self) -> np.ndarray:
        """(2, H, W) source (row, col) for every output pixel."""
        H, W = self.shape
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
        if self.displacement is not None:
            yy = yy + self.displacement[0]
            xx = xx + self.displacement[1]
        cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
        u = xx - cx - self.translation[0]
        v = yy - cy - self.translation[1]
        a = math.radians(self.angle)
        ca, sa = math.cos(a), math.sin(a)
        sx = (ca * u + sa * v) / self.scale + cx
        sy = (-sa * u + ca * v) / self.scale + cy
        if self.flip[0]:
            sx = (W - 1) - sx
        if self.flip[1]:
            sy = (H - 1) - sy
        return np.stack([sy, sx])

    def valid_mask(self, coords: np.ndarray | None = None) -> np.ndarray:
        H, W = self.shape
        sy, sx = self.source_coords() if coords is None else coords
        tol = 1e-6
        return (sy >= -tol) & (sy <= H - 1 + tol) & (sx >= -tol) & (sx <= W - 1 + tol)


def _uniform(rng, interval):
    lo, hi = interval
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def elastic_field(shape, b: float, g: float, rng) -> np.ndarray | None:
    """Random control-point offsets in [-b, b] on a g-spaced grid, cubic B-spline interpolated."""
    if b == 0:
        return None
    H, W = shape
    ny, nx = int(math.ceil((H - 1) / g)) + 1, int(math.ceil((W - 1) / g)) + 1
    ny, nx = max(ny, 2), max(nx, 2)
    ctrl = rng.uniform(-b, b, size=(2, ny, nx))
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    grid = np.stack([yy * (ny - 1) / max(H - 1, 1), xx * (nx - 1) / max(W - 1, 1)])
    return np.stack([ndimage.map_coordinates(c, grid, order=3, mode="nearest") for c in ctrl])


def sample_transform(config: AugmentConfig, shape, rng: np.random.Generator) -> SpatialTransform:
    tx = _uniform(rng, config.t)
    ty = _uniform(rng, config.t)
    flip = (bool(rng.random() < config.f_p), bool(rng.random() < config.f_p))
    angle = _uniform(rng, config.r)
    scale = _uniform(rng, config.s)
    disp = elastic_field(shape, config.b, config.g, rng)
    return SpatialTransform(tuple(shape), (tx, ty), flip, angle, scale, disp)


def apply_transform(image: np.ndarray, labels: np.ndarray | None, tr: SpatialTransform, pad_mode: str):
    """Warp an image (H, W) or stack (T, H, W), and labels likewise."""
    coords = tr.source_coords()
    mode = "constant" if pad_mode == "zero" else "mirror"

    def warp(a, order):
        if a.ndim == 3:
            return np.stack([ndimage.map_coordinates(f, coords, order=order, mode=mode, cval=0) for f in a])
        return ndimage.map_coordinates(a, coords, order=order, mode=mode, cval=0)

    img = warp(np.asarray(image, dtype=np.float64), 1)
    lab = None if labels is None else warp(np.asarray(labels), 0).astype(np.asarray(labels).dtype)
    return img, lab, tr.valid_mask(coords)


def augment(image: np.ndarray, labels: np.ndarray, config: AugmentConfig, rng: np.random.Generator,
            valid: np.ndarray | None = None):
    """Random spatial + intensity augmentation of an already normalised image.

    ``image``/``labels`` may be single frames (H, W) or stacks (T, H, W); a
    stack receives one shared transform. Returns (image, labels, valid_mask),
    where ``valid_mask`` marks output pixels sampled from inside the original
    domain (and inside ``valid`` if given).
    """
    image = np.asarray(image, dtype=np.float64)
    labels = np.asarray(labels)
    if image.shape != labels.shape:
        raise ValueError(f"image {image.shape} and labels {labels.shape} differ")
    tr = sample_transform(config, image.shape[-2:], rng)
    img, lab, vm = apply_transform(image, labels, tr, config.pad_mode)
    if valid is not None:
        _, vwarp, _ = apply_transform(np.zeros(valid.shape), np.asarray(valid, np.uint8), tr, "zero")
        vm &= vwarp.astype(bool)
    shift = _uniform(rng, config.i_shift)
    scale = _uniform(rng, config.i_scale)
    return img * scale + shift, lab, vm


# ---------------------------------------------------------------- resizing

def resize_image(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of (..., h, w) with pixel-centre alignment."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    H, W = target
    if (h, w) == (H, W):
        return image.copy()
    ys = (np.arange(H) + 0.5) * h / H - 0.5
    xs = (np.arange(W) + 0.5) * w / W - 0.5
    grid = np.stack(np.meshgrid(ys, xs, indexing="ij"))
    flat = image.reshape(-1, h, w)
    out = np.stack([ndimage.map_coordinates(f, grid, order=1, mode="nearest") for f in flat])
    return out.reshape(image.shape[:-2] + (H, W))


def resize_to_network(image: np.ndarray, labels: np.ndarray | None, target=(256, 256)):
    img = resize_image(image, target)
    lab = None if labels is None else upsample_labels(np.asarray(labels), tuple(target))
    return img, lab


# ---------------------------------------------------------------- synthetic videos

@dataclass
class SyntheticScenario:
    n_frames: int = 20
    height: int = 64
    width: int = 64
    n_blobs: int = 2
    speed: tuple = (0.3, 1.0)
    radius: tuple = (6.0, 9.0)
    splits: list = field(default_factory=list)  # (frame, instance id)
    hidden: list = field(default_factory=list)  # (first frame, n frames, instance id): not drawn, still labelled
    noise: float = 0.05
    background: float = 0.1
    brightness: tuple = (0.6, 1.0)
    deform: float = 0.1
    seam: float = 0.3  # width of the dark rim where two blobs touch, in normalised radius
    birth_gap: float = 2.0  # background px between daughters at division

    def __post_init__(self):
        self.splits = [tuple(int(v) for v in s) for s in self.splits]
        self.hidden = [tuple(int(v) for v in h) for h in self.hidden]
        for f, _ in self.splits:
            if not 0 < f < self.n_frames:
                raise ValueError(f"split frame {f} outside (0, {self.n_frames})")
        if self.radius[0] <= 0 or self.radius[0] > self.radius[1]:
            raise ValueError("bad radius range")
        if not 0 <= self.deform < 0.5:
            raise ValueError("deform must lie in [0, 0.5)")
        if 2 * self.radius[1] / (1 - self.deform) + 4 >= min(self.height, self.width):
            raise ValueError("blobs too large for the image")


@dataclass
class _Blob:
    id: int
    y: float
    x: float
    vy: float
    vx: float
    a: float  # semi-axis along orientation
    b: float
    theta: float
    omega: float
    amp: float
    phase: float

    @property
    def reach(self):
        return max(self.a, self.b)


def _place(rng, sc: SyntheticScenario, blobs, r):
    for _ in range(500):
        y = rng.uniform(r + 2, sc.height - r - 3)
        x = rng.uniform(r + 2, sc.width - r - 3)
        if all(math.hypot(y - o.y, x - o.x) > r + o.reach + 4 for o in blobs):
            return y, x
    raise RuntimeError("could not place blob without overlap; reduce n_blobs or radius")


def _new_blob(rng, sc, blobs, bid):
    r = rng.uniform(*sc.radius)
    y, x = _place(rng, sc, blobs, r * 1.1)
    sp = rng.uniform(*sc.speed)
    ang = rng.uniform(0, 2 * math.pi)
    ecc = rng.uniform(0.8, 1.0)
    return _Blob(bid, y, x, sp * math.sin(ang), sp * math.cos(ang), r, r * ecc, rng.uniform(0, math.pi),
                 rng.uniform(-0.05, 0.05), rng.uniform(*sc.brightness), rng.uniform(0, 2 * math.pi))


def _rho(blob: _Blob, yy, xx, t, deform):
    k = 1.0 + deform * math.sin(0.5 * t + blob.phase)
    a, b = blob.a * k, blob.b / k
    c, s = math.cos(blob.theta), math.sin(blob.theta)
    dy, dx = yy - blob.y, xx - blob.x
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def _clamp(bl: _Blob, sc: SyntheticScenario, bounce: bool = False) -> None:
    m = bl.reach / (1.0 - sc.deform) + 1
    if bl.y < m or bl.y > sc.height - 1 - m:
        bl.vy = -bl.vy if bounce else bl.vy
        bl.y = min(max(bl.y, m), sc.height - 1 - m)
    if bl.x < m or bl.x > sc.width - 1 - m:
        bl.vx = -bl.vx if bounce else bl.vx
        bl.x = min(max(bl.x, m), sc.width - 1 - m)


def _step(blobs, sc: SyntheticScenario):
    for bl in blobs:
        bl.y += bl.vy
        bl.x += bl.vx
        bl.theta += bl.omega
        _clamp(bl, sc, bounce=True)
    # reverse the approaching velocity component of blobs about to touch
    for i, p in enumerate(blobs):
        for q in blobs[i + 1:]:
            dy, dx = q.y - p.y, q.x - p.x
            d = math.hypot(dy, dx) or 1e-9
            if d < p.reach + q.reach + 3:
                ny, nx = dy / d, dx / d
                rel = (q.vy - p.vy) * ny + (q.vx - p.vx) * nx
                if rel < 0:
                    p.vy += rel * ny
                    p.vx += rel * nx
                    q.vy -= rel * ny
                    q.vx -= rel * nx


def synth_generate(scenario: SyntheticScenario, rng: np.random.Generator):
    """Render a video of moving, deforming, splitting blobs.

    Returns (frames (T, H, W) float in about [0, 1], labels (T, H, W) int32,
    ground-truth :class:`LineageForest`).
    """
    sc = scenario
    H, W, T = sc.height, sc.width, sc.n_frames
    blobs: list[_Blob] = []
    for k in range(sc.n_blobs):
        blobs.append(_new_blob(rng, sc, blobs, k + 1))
    next_id = sc.n_blobs + 1
    parents = {b.id: 0 for b in blobs}
    splits: dict[int, list[int]] = {}
    for f, i in sc.splits:
        splits.setdefault(f, []).append(i)
    frames = np.zeros((T, H, W))
    labels = np.zeros((T, H, W), dtype=np.int32)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    for t in range(T):
        if t > 0:
            _step(blobs, sc)
        for i in splits.get(t, []):
            idx = [k for k, b in enumerate(blobs) if b.id == i]
            if not idx:
                raise ValueError(f"split at frame {t} references instance {i}, which is not alive")
            p = blobs.pop(idx[0])
            c, s = math.cos(p.theta), math.sin(p.theta)
            ca, cb = p.a / math.sqrt(2), p.b / math.sqrt(2)
            # daughters lie side by side along the parent's long axis, their
            # short axes facing each other, with birth_gap px of background between
            off = cb / (1.0 - sc.deform) + 0.5 * sc.birth_gap + 0.5
            sp = max(math.hypot(p.vy, p.vx), 0.5)
            for sign in (1.0, -1.0):
                child = _Blob(next_id, p.y + sign * off * s, p.x + sign * off * c,
                              p.vy + sign * 0.6 * sp * s, p.vx + sign * 0.6 * sp * c,
                              ca, cb, p.theta + math.pi / 2, p.omega, p.amp, rng.uniform(0, 2 * math.pi))
                _clamp(child, sc)
                parents[next_id] = p.id
                next_id += 1
                blobs.append(child)
        rho = np.full((H, W), np.inf)
        rho2 = np.full((H, W), np.inf)  # runner-up, for the seam between touching blobs
        owner = np.zeros((H, W), dtype=np.int32)
        amp = np.zeros((H, W))
        hidden_now = {i for f0, n, i in sc.hidden if f0 <= t < f0 + n}
        draw = np.zeros((H, W), dtype=bool)
        for bl in blobs:
            r = _rho(bl, yy, xx, t, sc.deform)
            take = (r < 1.0) & (r < rho)
            rho2 = np.where(take, rho, np.minimum(rho2, r))
            rho[take] = r[take]
            owner[take] = bl.id
            amp[take] = bl.amp
            draw[take] = bl.id not in hidden_now
        inside = owner > 0
        img = np.full((H, W), sc.background)
        prof = np.sqrt(np.clip(1.0 - rho ** 2, 0.0, 1.0)) * np.clip((rho2 - rho) / sc.seam, 0.0, 1.0)
        img[inside & draw] += (amp * prof)[inside & draw]
        img += sc.noise * rng.standard_normal((H, W))
        frames[t] = img
        labels[t] = owner
    present = {int(i) for i in np.unique(labels) if i}
    gt = LineageForest(labels.copy(), {i: (parents[i] if parents[i] in present else 0) for i in present})
    return frames, labels, gt


# ---------------------------------------------------------------- image I/O

def save_image16(path, array: np.ndarray) -> None:
    import tifffile

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tifffile.imwrite(str(path), np.asarray(array).astype(np.uint16))


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile

        return tifffile.imread(str(path))
    from PIL import Image

    return np.asarray(Image.open(path))


def save_frames(directory, frames: np.ndarray, prefix: str = "t") -> None:
    """Store float frames in [0, 1] as 16-bit images."""
    for t, f in enumerate(frames):
        save_image16(Path(directory) / f"{prefix}{t:03d}.tif", np.clip(f, 0, 1) * 65535.0 + 0.5)


def save_label_stack(directory, labels: np.ndarray, prefix: str = "mask") -> None:
    if labels.max(initial=0) > 65535:
        raise ValueError("instance ids exceed 16 bit")
    for t, lab in enumerate(labels):
        save_image16(Path(directory) / f"{prefix}{t:03d}.tif", lab)


def load_stack(directory, prefix: str) -> np.ndarray:
    files = sorted(Path(directory).glob(f"{prefix}*.tif"))
    if not files:
        raise FileNotFoundError(f"no {prefix}*.tif in {directory}")
    return np.stack([load_image(f) for f in files])
