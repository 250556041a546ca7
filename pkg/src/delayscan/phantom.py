"""Synthetic dual-time tracer phantoms.

Each phantom is a body ellipse carrying background uptake, a few organ blobs
and a few focal lesions. Between the early and the delayed scan, malignant
lesions keep accumulating tracer (linear growth in hours), benign lesions wash
out exponentially, and background tissue washes out mildly. Uptake values are
mapped to [0, 1] by the fixed global scale :data:`UPTAKE_SCALE`.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffusion import PairedSample
from .exceptions import PhantomSpecError
from .numerics import RngStream, gaussian_sample, load_grid, save_grid

UPTAKE_SCALE = 10.0
TISSUE_WASHOUT = 0.05
MALIGNANT_K = (0.2, 0.6)
BENIGN_K = (0.3, 0.8)
DEFAULT_ETA = 0.02
MAX_DELAY = 600


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float

    def mask(self, shape) -> np.ndarray:
        yy, xx = np.mgrid[: shape[0], : shape[1]]
        return ((yy - self.cy) / self.ry) ** 2 + ((xx - self.cx) / self.rx) ** 2 <= 1.0


@dataclass(frozen=True)
class Organ:
    shape: Ellipse
    uptake: float


@dataclass(frozen=True)
class Lesion:
    cy: float
    cx: float
    radius: float
    suv_1h: float
    kind: str   # "malignant" | "benign"
    k: float

    def mask(self, shape) -> np.ndarray:
        return Ellipse(self.cy, self.cx, self.radius, self.radius).mask(shape)


@dataclass
class PhantomSpec:
    size: tuple[int, int]
    body: Ellipse
    body_uptake: float = 1.0
    organs: list[Organ] = field(default_factory=list)
    lesions: list[Lesion] = field(default_factory=list)
    eta: float = DEFAULT_ETA
    seed: int = 0

    def validate(self) -> None:
        uptakes = [self.body_uptake] + [o.uptake for o in self.organs] + [l.suv_1h for l in self.lesions]
        if min(uptakes) < 0:
            raise PhantomSpecError("uptake values must be non-negative")
        b = self.body
        for l in self.lesions:
            if l.kind not in ("malignant", "benign"):
                raise PhantomSpecError(f"unknown lesion kind {l.kind!r}")
            d = math.hypot((l.cy - b.cy) / b.ry, (l.cx - b.cx) / b.rx)
            if d + l.radius / min(b.ry, b.rx) > 1.0:
                raise PhantomSpecError(f"lesion at ({l.cy:.1f}, {l.cx:.1f}) r={l.radius:.1f} leaves the body")


def lesion_uptake(suv_1h: float, kind: str, k: float, t_d) -> float:
    hours = np.asarray(t_d, dtype=np.float64) / 60.0
    if kind == "malignant":
        return suv_1h * (1.0 + k * hours)
    if kind == "benign":
        return suv_1h * np.exp(-k * hours)
    raise PhantomSpecError(f"unknown lesion kind {kind!r}")


def render_uptake(spec: PhantomSpec, t_d: float = 0.0) -> np.ndarray:
    """Noise-free uptake map (pre-normalization) ``t_d`` minutes after the early scan."""
    washout = math.exp(-TISSUE_WASHOUT * t_d / 60.0)
    img = np.zeros(spec.size)
    img[spec.body.mask(spec.size)] = spec.body_uptake * washout
    for organ in spec.organs:
        img[organ.shape.mask(spec.size) & spec.body.mask(spec.size)] = organ.uptake * washout
    for l in spec.lesions:
        img[l.mask(spec.size)] = lesion_uptake(l.suv_1h, l.kind, l.k, t_d)
    return img


def _observe(uptake: np.ndarray, eta: float, rng: RngStream) -> np.ndarray:
    v = uptake / UPTAKE_SCALE
    if eta > 0:
        v = v + eta * np.sqrt(v + 0.01) * gaussian_sample(rng, v.shape)
    return np.clip(v, 0.0, 1.0)


def render_pair(spec: PhantomSpec, t_d: int, rng: RngStream | None = None,
                st_early: int = 60) -> PairedSample:
    if not 0 <= t_d <= MAX_DELAY:
        raise PhantomSpecError(f"t_d={t_d} outside [0, {MAX_DELAY}] minutes")
    spec.validate()
    rng = rng if rng is not None else RngStream(spec.seed)
    early = _observe(render_uptake(spec, 0.0), spec.eta, rng)
    delayed = _observe(render_uptake(spec, float(t_d)), spec.eta, rng)
    return PairedSample(early, delayed, int(st_early), int(st_early) + int(t_d), meta={"spec": spec})


def random_spec(rng: RngStream, size: tuple[int, int], eta: float = DEFAULT_ETA, seed: int = 0) -> PhantomSpec:
    H, W = size
    u = rng.uniform
    body = Ellipse(H / 2 + u(1, -0.04, 0.04)[0] * H, W / 2 + u(1, -0.04, 0.04)[0] * W,
                   u(1, 0.36, 0.46)[0] * H, u(1, 0.36, 0.46)[0] * W)
    organs = []
    for _ in range(int(rng.integers(1, 3, 1)[0])):
        ang, rad = u(1, 0, 2 * np.pi)[0], u(1, 0.0, 0.5)[0]
        organs.append(Organ(
            Ellipse(body.cy + rad * body.ry * math.sin(ang), body.cx + rad * body.rx * math.cos(ang),
                    u(1, 0.12, 0.25)[0] * H, u(1, 0.12, 0.25)[0] * W),
            float(u(1, 1.3, 2.5)[0]),
        ))
    lesions = []
    r_lo, r_hi = max(1.0, 0.05 * min(H, W)), max(1.5, 0.11 * min(H, W))
    for _ in range(int(rng.integers(1, 3, 1)[0])):
        radius = float(u(1, r_lo, r_hi)[0])
        slack = 1.0 - radius / min(body.ry, body.rx) - 0.05
        ang, rad = u(1, 0, 2 * np.pi)[0], u(1, 0.0, slack)[0]
        malignant = u(1)[0] < 0.5
        lo, hi = MALIGNANT_K if malignant else BENIGN_K
        lesions.append(Lesion(
            body.cy + rad * body.ry * math.sin(ang), body.cx + rad * body.rx * math.cos(ang), radius,
            float(u(1, 2.0, 4.0)[0]), "malignant" if malignant else "benign", float(u(1, lo, hi)[0]),
        ))
    spec = PhantomSpec((H, W), body, float(u(1, 0.8, 1.2)[0]), organs, lesions, eta, seed)
    spec.validate()
    return spec


def split_of(index: int, count: int) -> str:
    n_train = int(0.8 * count)
    n_val = int(0.1 * count)
    if index < n_train:
        return "train"
    return "val" if index < n_train + n_val else "test"


def generate_dataset(count: int, size=32, t_d_range=(60, 120), seed: int = 0,
                     eta: float = DEFAULT_ETA) -> list[PairedSample]:
    """Deterministic phantom pairs with an 80/10/10 train/val/test split by index."""
    if count < 1:
        raise PhantomSpecError(f"count must be >= 1, got {count}")
    lo, hi = int(t_d_range[0]), int(t_d_range[1])
    if not 0 <= lo <= hi <= MAX_DELAY:
        raise PhantomSpecError(f"invalid delay range [{lo}, {hi}]")
    size = (size, size) if isinstance(size, int) else tuple(size)
    root = RngStream(seed)
    out = []
    for i in range(count):
        rng = root.fork(i)
        spec = random_spec(rng, size, eta, seed)
        t_d = int(rng.integers(lo, hi, 1)[0])
        st_early = 60 + int(rng.integers(-10, 10, 1)[0])
        pair = render_pair(spec, t_d, rng, st_early)
        pair.id = f"{i:05d}"
        pair.split = split_of(i, count)
        out.append(pair)
    return out


def select_split(samples: Sequence[PairedSample], split: str) -> list[PairedSample]:
    return [s for s in samples if s.split == split]


INDEX_FIELDS = ["id", "t_d_minutes", "split", "path_early", "path_delayed"]


def save_dataset(samples: Sequence[PairedSample], directory) -> Path:
    d = Path(directory)
    (d / "pairs").mkdir(parents=True, exist_ok=True)
    with open(d / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_FIELDS)
        for s in samples:
            early, delayed = f"pairs/{s.id}_early.grd", f"pairs/{s.id}_delayed.grd"
            save_grid(d / early, s.x_e)
            save_grid(d / delayed, s.x_0)
            w.writerow([s.id, s.t_d, s.split, early, delayed])
    return d / "index.csv"


def load_dataset(directory, split: str | None = None) -> list[PairedSample]:
    d = Path(directory)
    out = []
    with open(d / "index.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            if split is not None and row["split"] != split:
                continue
            t_d = int(row["t_d_minutes"])
            out.append(PairedSample(load_grid(d / row["path_early"]), load_grid(d / row["path_delayed"]),
                                    0, t_d, id=row["id"], split=row["split"]))
    return out
