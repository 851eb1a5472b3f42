"""Label-preserving image transformations and the families built from them.

Every transform accepts a single image ``[H, W, C]`` or a batch
``[n, H, W, C]`` with values in [0, 1] and returns the same shape, clamped
to [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

KINDS = ("identity", "rotate", "fourier_lowpass", "pixel_affine")


def _as_batch(img: np.ndarray):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img[None], True
    if img.ndim == 4:
        return img, False
    raise ValueError(f"expected [H, W, C] or [n, H, W, C], got shape {img.shape}")


@lru_cache(maxsize=64)
def _rotation_taps(h: int, w: int, degrees: float):
    """Bilinear source indices/weights for a clockwise rotation about the
    pixel-grid centre.  Taps falling outside the image get weight 0."""
    quarter = degrees / 90.0
    if quarter == round(quarter):
        cos, sin = [(1, 0), (0, 1), (-1, 0), (0, -1)][int(round(quarter)) % 4]
    else:
        theta = math.radians(degrees)
        cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = rr - cy, cc - cx
    # inverse of the clockwise map (screen coordinates, rows grow downwards)
    sy = cy - dx * sin + dy * cos
    sx = cx + dx * cos + dy * sin
    for s in (sy, sx):
        near = np.abs(s - np.round(s)) < 1e-9
        s[near] = np.round(s[near])
    y0, x0 = np.floor(sy).astype(np.int64), np.floor(sx).astype(np.int64)
    fy, fx = sy - y0, sx - x0
    idx, wts = [], []
    for oy, ox, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy, xx = y0 + oy, x0 + ox
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx.append(np.where(inside, yy * w + xx, 0).ravel())
        wts.append(np.where(inside, wt, 0.0).ravel())
    return np.stack(idx), np.stack(wts)


def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate clockwise by ``degrees`` with bilinear interpolation and black fill."""
    batch, single = _as_batch(img)
    degrees = float(degrees) % 360.0
    if degrees == 0.0:
        out = batch.copy()
    else:
        n, h, w, c = batch.shape
        idx, wts = _rotation_taps(h, w, degrees)
        flat = batch.reshape(n, h * w, c)
        out = np.zeros_like(flat)
        for tap in range(4):
            out += flat[:, idx[tap], :] * wts[tap][None, :, None]
        out = np.clip(out.reshape(n, h, w, c), 0.0, 1.0)
    return out[0] if single else out


@lru_cache(maxsize=64)
def _lowpass_mask(h: int, w: int, radius: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h) - h // 2, np.arange(w) - w // 2, indexing="ij")
    return np.sqrt(yy ** 2 + xx ** 2) <= radius


def fourier_lowpass(img: np.ndarray, radius: float) -> np.ndarray:
    """Zero every centred DFT coefficient farther than ``radius`` from the
    zero frequency (placed at ``(H // 2, W // 2)``), invert, clamp."""
    batch, single = _as_batch(img)
    _, h, w, _ = batch.shape
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if math.isinf(radius):
        out = batch.copy()
    else:
        spec = np.fft.fftshift(np.fft.fft2(batch, axes=(1, 2)), axes=(1, 2))
        spec *= _lowpass_mask(h, w, float(radius))[None, :, :, None]
        out = np.fft.ifft2(np.fft.ifftshift(spec, axes=(1, 2)), axes=(1, 2)).real
        out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


def pixel_affine(img: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    batch, single = _as_batch(img)
    if alpha == 1 and beta == 0:
        out = batch.copy()
    else:
        out = np.clip(alpha * batch + beta, 0.0, 1.0)
    return out[0] if single else out


@dataclass(frozen=True)
class Transform:
    kind: str
    params: tuple[float, ...] = ()
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        expected = {"identity": 0, "rotate": 1, "fourier_lowpass": 1, "pixel_affine": 2}[self.kind]
        if len(self.params) != expected:
            raise ValueError(f"{self.kind} takes {expected} parameter(s), got {len(self.params)}")
        if self.kind == "rotate" and not 0 <= self.params[0] < 360:
            raise ValueError("rotation degrees must lie in [0, 360)")
        if self.kind == "fourier_lowpass" and self.params[0] < 0:
            raise ValueError("low-pass radius must be >= 0")
        if not self.name:
            object.__setattr__(self, "name", self.default_name())

    def default_name(self) -> str:
        if self.kind == "identity":
            return "identity"
        if self.kind == "rotate":
            return f"rot{self.params[0]:g}"
        if self.kind == "fourier_lowpass":
            return f"lowpass{self.params[0]:g}"
        return f"affine({self.params[0]:g},{self.params[1]:g})"

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity"

    def __call__(self, img: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return np.array(img, dtype=np.float64, copy=True)
        if self.kind == "rotate":
            return rotate_image(img, self.params[0])
        if self.kind == "fourier_lowpass":
            return fourier_lowpass(img, self.params[0])
        return pixel_affine(img, *self.params)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params), "name": self.name}

    @classmethod
    def from_dict(cls, d: dict) -> Transform:
        unknown = set(d) - {"kind", "params", "name"}
        if unknown:
            raise ValueError(f"unknown transform key(s): {sorted(unknown)}")
        return cls(d["kind"], tuple(d.get("params", ())), d.get("name", ""))


IDENTITY = Transform("identity")


@dataclass(frozen=True)
class TransformFamily:
    """Ordered transforms with two designated vertices and a "beyond" set.

    ``vertex_plus`` is the extreme non-identity member used by VA/RA;
    ``vertex_minus`` is the member the original samples stand in for.
    """

    name: str
    transforms: tuple[Transform, ...]
    vertex_plus: int
    vertex_minus: int = 0
    beyond: tuple[Transform, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))
        object.__setattr__(self, "beyond", tuple(self.beyond))
        t = len(self.transforms)
        if t < 2:
            raise ValueError("a family needs at least two transforms")
        if not any(a.is_identity for a in self.transforms):
            raise ValueError("a family must contain the identity transform")
        for v in (self.vertex_plus, self.vertex_minus):
            if not 0 <= v < t:
                raise ValueError(f"vertex index {v} out of range for family of size {t}")
        if self.vertex_plus == self.vertex_minus:
            raise ValueError("vertices must be distinct members")

    def __len__(self):
        return len(self.transforms)

    def __iter__(self):
        return iter(self.transforms)

    def __getitem__(self, i) -> Transform:
        return self.transforms[i]

    @property
    def identity_index(self) -> int:
        return next(i for i, a in enumerate(self.transforms) if a.is_identity)

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.transforms]

    def apply_all(self, images: np.ndarray) -> np.ndarray:
        """Stack of every member applied to ``images``: ``[t, n, H, W, C]``."""
        return np.stack([a(images) for a in self.transforms])

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "transforms": [a.to_dict() for a in self.transforms],
            "vertex_plus": self.vertex_plus,
            "vertex_minus": self.vertex_minus,
            "beyond": [a.to_dict() for a in self.beyond],
        }

    @classmethod
    def from_dict(cls, d: dict) -> TransformFamily:
        unknown = set(d) - {"name", "transforms", "vertex_plus", "vertex_minus", "beyond"}
        if unknown:
            raise ValueError(f"unknown family key(s): {sorted(unknown)}")
        return cls(
            d.get("name", "custom"),
            tuple(Transform.from_dict(a) for a in d["transforms"]),
            int(d["vertex_plus"]),
            int(d.get("vertex_minus", 0)),
            tuple(Transform.from_dict(a) for a in d.get("beyond", ())),
        )


def _affine(alpha, beta, name):
    return Transform("pixel_affine", (alpha, beta), name)


def make_family(name: str) -> TransformFamily:
    if name == "texture":
        members = [IDENTITY] + [Transform("fourier_lowpass", (r,)) for r in (12, 10, 8, 6)]
        beyond = [Transform("fourier_lowpass", (r,)) for r in (5, 4)]
        return TransformFamily("texture", tuple(members), vertex_plus=4, vertex_minus=0, beyond=tuple(beyond))
    if name == "rotation":
        members = [IDENTITY] + [Transform("rotate", (d,)) for d in (15, 30, 45, 60)]
        beyond = [Transform("rotate", (d,)) for d in (330, 345)]
        return TransformFamily("rotation", tuple(members), vertex_plus=4, vertex_minus=0, beyond=tuple(beyond))
    if name == "contrast":
        members = [
            IDENTITY,
            _affine(0.5, 0.0, "x/2"),
            _affine(0.25, 0.0, "x/4"),
            _affine(-1.0, 1.0, "1-x"),
            _affine(-0.5, 0.5, "(1-x)/2"),
            _affine(-0.25, 0.25, "(1-x)/4"),
        ]
        beyond = [
            _affine(0.5, 0.5, "x/2+0.5"),
            _affine(0.25, 0.75, "x/4+0.75"),
            _affine(-0.5, 1.0, "(1-x)/2+0.5"),
            _affine(-0.25, 1.0, "(1-x)/4+0.75"),
        ]
        return TransformFamily("contrast", tuple(members), vertex_plus=3, vertex_minus=0, beyond=tuple(beyond))
    raise ValueError(f"unknown family {name!r}; expected texture, rotation or contrast")


FAMILY_NAMES = ("texture", "rotation", "contrast")
