"""Synthetic vessel phantoms standing in for angiography scans.

Target vessels are thin tubes that run roughly along the c-axis and are
labelled in the mask. Distractors are thicker tubes with overlapping
(slightly brighter) intensity that cross the a-b plane. They are rendered the
same way but never labelled, so a global intensity threshold cannot isolate
the targets, while their course tells them apart in every projection.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .geometry import ConfigurationError


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 64, 64)
    n_target_vessels: int = 2
    n_distractors: int = 2
    target_radius: tuple[float, float] = (1.8, 2.6)
    distractor_radius: tuple[float, float] = (3.0, 4.0)
    target_intensity: tuple[float, float] = (0.4, 0.8)
    distractor_intensity: tuple[float, float] = (0.6, 1.0)
    noise_std: float = 0.03
    foreground_budget: float = 0.02
    n_control_points: int = 5
    max_attempts: int = 50

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigurationError(f"phantom dims must be three positive extents, got {self.dims}")
        if self.n_target_vessels > 0 and self.foreground_budget <= 0:
            raise ConfigurationError("a zero foreground budget cannot hold any target vessel")
        if min(self.dims[:2]) < 2 * self.target_radius[0] + 3 and self.n_target_vessels + self.n_distractors:
            raise ConfigurationError(f"dims {self.dims} too small for tubes of radius {self.target_radius[0]}")

    def to_dict(self) -> dict:
        return asdict(self)

    def scaled_to(self, dims) -> PhantomSpec:
        """Same spec on new ``dims``, radii scaled with the rotation cross-section."""
        k = min(dims[:2]) / min(self.dims[:2])
        return replace(
            self,
            dims=tuple(dims),
            target_radius=tuple(r * k for r in self.target_radius),
            distractor_radius=tuple(r * k for r in self.distractor_radius),
        )

    @classmethod
    def from_dict(cls, d: dict) -> PhantomSpec:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Tube:
    points: np.ndarray  # (n, 3) polyline vertices in voxel coordinates
    radius: float
    intensity: float
    label: int = field(default=1)


def _smooth(points: np.ndarray, rounds: int = 2) -> np.ndarray:
    # Chaikin corner cutting keeps the end points
    for _ in range(rounds):
        q = 0.75 * points[:-1] + 0.25 * points[1:]
        r = 0.25 * points[:-1] + 0.75 * points[1:]
        inner = np.empty((2 * len(q), 3))
        inner[0::2] = q
        inner[1::2] = r
        points = np.vstack([points[:1], inner, points[-1:]])
    return points


def _random_path(dims, radius: float, n_ctrl: int, rng: np.random.Generator) -> np.ndarray:
    """Polyline along c that stays inside the disc every rotation keeps in view."""
    a, b, c = dims
    ca, cb = (a - 1) / 2, (b - 1) / 2
    reach = max(min(ca, cb) - radius - 1.0, 0.0)
    ks = np.linspace(-2.0, c + 1.0, n_ctrl)
    pts = np.empty((n_ctrl, 3))
    ang = rng.uniform(0, 2 * np.pi)
    rad = reach * np.sqrt(rng.uniform(0, 1))
    for n, k in enumerate(ks):
        if n:
            ang += rng.normal(0, 0.6)
            rad = np.clip(rad + rng.normal(0, reach / 4 + 1e-9), 0, reach)
        pts[n] = (ca + rad * np.cos(ang), cb + rad * np.sin(ang), k)
    return _smooth(pts)


def _crossing_path(dims, radius: float, n_ctrl: int, rng: np.random.Generator) -> np.ndarray:
    """Polyline through the a-b plane from rim to rim, drifting slowly in c."""
    a, b, c = dims
    ca, cb = (a - 1) / 2, (b - 1) / 2
    # start and end beyond the rim so the tube leaves the field of view
    reach = max(min(ca, cb) - radius - 1.0, 0.0) + radius + 4.0
    phi = rng.uniform(0, 2 * np.pi)
    psi = phi + np.pi + rng.normal(0, 0.4)
    lo, hi = radius + 1, max(c - 2 - radius, radius + 1)
    c0 = rng.uniform(lo, hi)
    c1 = np.clip(c0 + rng.normal(0, 4.0), lo, hi)
    s = np.linspace(0, 1, n_ctrl)
    xy = np.outer(1 - s, [np.cos(phi), np.sin(phi)]) + np.outer(s, [np.cos(psi), np.sin(psi)])
    xy[1:-1] += rng.normal(0, 0.15, size=(n_ctrl - 2, 2))
    xy *= reach
    return _smooth(np.column_stack([ca + xy[:, 0], cb + xy[:, 1], c0 + (c1 - c0) * s]))


def polyline_distance(points: np.ndarray, dims) -> np.ndarray:
    """Euclidean distance from every voxel centre to a polyline."""
    grid = np.stack(np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij"), axis=-1)
    flat = grid.reshape(-1, 3)
    best = np.full(flat.shape[0], np.inf)
    for p0, p1 in zip(points[:-1], points[1:]):
        seg = p1 - p0
        L2 = float(seg @ seg)
        t = np.clip(((flat - p0) @ seg) / L2, 0.0, 1.0) if L2 > 0 else np.zeros(flat.shape[0])
        d2 = ((flat - p0 - t[:, None] * seg) ** 2).sum(axis=1)
        np.minimum(best, d2, out=best)
    return np.sqrt(best).reshape(dims)


def render(tubes: list[Tube], dims, noise_std: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    scan = np.zeros(dims, dtype=np.float64)
    mask = np.zeros(dims, dtype=np.uint8)
    for tube in tubes:
        d = polyline_distance(tube.points, dims)
        # one-voxel-wide linear falloff around the radius
        np.maximum(scan, tube.intensity * np.clip(tube.radius + 0.5 - d, 0.0, 1.0), out=scan)
        if tube.label:
            mask |= (d <= tube.radius).astype(np.uint8)
    if noise_std > 0:
        scan += rng.normal(0.0, noise_std, size=dims)
    return np.clip(scan, 0.0, None).astype(np.float32), mask


def generate_phantom(spec: PhantomSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return (scan, mask); retries until the labelled fraction fits the budget."""
    for _ in range(spec.max_attempts):
        tubes = []
        for label, n, (r0, r1), (i0, i1), path in (
            (1, spec.n_target_vessels, spec.target_radius, spec.target_intensity, _random_path),
            (0, spec.n_distractors, spec.distractor_radius, spec.distractor_intensity, _crossing_path),
        ):
            for _ in range(n):
                r = rng.uniform(r0, r1)
                tubes.append(Tube(path(spec.dims, r, spec.n_control_points, rng), r, rng.uniform(i0, i1), label))
        scan, mask = render(tubes, spec.dims, spec.noise_std, rng)
        if mask.mean() <= spec.foreground_budget:
            return scan, mask
    raise ConfigurationError(
        f"could not fit {spec.n_target_vessels} vessels under a {spec.foreground_budget:.3%} budget"
    )


def generate_dataset(spec: PhantomSpec, n: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(seed)
    return [generate_phantom(spec, rng) for _ in range(n)]


def best_threshold_dc(scan: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """(DC, threshold) of the best single intensity threshold for this volume."""
    v = scan.ravel()
    y = mask.ravel().astype(bool)
    order = np.argsort(-v, kind="stable")
    vs = v[order]
    tp = np.cumsum(y[order])
    k = np.arange(1, v.size + 1)
    # only cut between distinct values
    valid = np.r_[vs[1:] < vs[:-1], True]
    dc = np.where(valid, 2 * tp / (k + y.sum()), -1.0)
    best = int(dc.argmax())
    if y.sum() == 0:
        return 1.0, float(vs[0]) + 1.0
    return float(dc[best]), float(vs[best])
