"""Point-cloud representation, augmentation, and procedural domain generation.

Clouds are plain float64 arrays of shape (n, 3) in normalized coordinates
(centroid at the origin, max point norm 1). Domains are generated from a
small library of parametric surfaces; the target domain is corrupted with
occlusion, jitter, and density bias to open a controllable domain gap.

All randomness flows through counter-based Philox streams keyed by
(seed, tag...) so per-sample draws are independent of iteration order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GENERATORS = ("sphere", "cube", "cylinder", "cone", "torus", "plane")


def stream(seed: int, *tags) -> np.random.Generator:
    """Derive an independent Philox stream from a master seed and tags."""
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for t in tags:
        h.update(b"/")
        h.update(str(t).encode())
    key = int.from_bytes(h.digest(), "little")
    return np.random.Generator(np.random.Philox(key=key))


def normalize(points: np.ndarray) -> np.ndarray:
    """Center at the centroid and scale the farthest point to norm 1."""
    p = np.asarray(points, dtype=np.float64)
    p = p - p.mean(axis=0)
    r = np.sqrt((p * p).sum(axis=1).max())
    if r > 0.0:
        p = p / r
    return p


def sample_points(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly draw n points: without replacement if enough, else with."""
    if n <= 0:
        raise ValueError("sample count must be positive")
    m = len(points)
    if m == 0:
        raise ValueError("cannot sample from an empty cloud")
    replace = m < n
    idx = rng.choice(m, size=n, replace=replace)
    return points[idx]


def occlusion_augment(points: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Half-space cut: drop the ceil(fraction*n) points most extreme along a
    random direction, resample back to n with replacement, renormalize."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("occlusion fraction must be in [0, 1)")
    p = np.asarray(points, dtype=np.float64)
    n = len(p)
    k = math.ceil(fraction * n)
    if k > 0:
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        proj = p @ u
        keep = np.argsort(proj, kind="stable")[: n - k]
        survivors = p[keep]
        idx = rng.choice(len(survivors), size=n, replace=True)
        p = survivors[idx]
    return normalize(p)


def jitter(points: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Per-coordinate Gaussian noise clipped at 3 sigma, then renormalize."""
    if sigma < 0.0:
        raise ValueError("sigma must be non-negative")
    p = np.asarray(points, dtype=np.float64)
    if sigma > 0.0:
        noise = rng.standard_normal(p.shape) * sigma
        np.clip(noise, -3.0 * sigma, 3.0 * sigma, out=noise)
        p = p + noise
    return normalize(p)


def density_bias(points: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Thin points far from a random pole: keep probability ramps from
    (1 - strength) on the far side to 1 at the pole."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError("density bias strength must be in [0, 1]")
    p = np.asarray(points, dtype=np.float64)
    if strength == 0.0:
        return p
    u = rng.standard_normal(3)
    u /= np.linalg.norm(u)
    norms = np.linalg.norm(p, axis=1)
    cosang = np.divide(p @ u, norms, out=np.zeros(len(p)), where=norms > 0)
    t = (cosang + 1.0) / 2.0
    keep_prob = (1.0 - strength) + strength * t
    keep = rng.uniform(size=len(p)) < keep_prob
    if not keep.any():
        keep[np.argmax(keep_prob)] = True
    return p[keep]


# ---------------------------------------------------------------------------
# parametric surface generators (raw, pre-normalization)

def _gen_sphere(n, rng):
    x = rng.standard_normal((n, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x


def _gen_cube(n, rng):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    p = np.empty((n, 3))
    idx = np.arange(n)
    p[idx, axis] = sign
    p[idx, (axis + 1) % 3] = uv[:, 0]
    p[idx, (axis + 2) % 3] = uv[:, 1]
    return p


def _gen_cylinder(n, rng):
    # unit radius, height 2: lateral area 4*pi, two caps pi each
    part = rng.uniform(size=n)
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    p = np.empty((n, 3))
    lateral = part < 2.0 / 3.0
    z = rng.uniform(-1.0, 1.0, size=n)
    p[lateral, 0] = np.cos(theta[lateral])
    p[lateral, 1] = np.sin(theta[lateral])
    p[lateral, 2] = z[lateral]
    caps = ~lateral
    r = np.sqrt(rng.uniform(size=n))
    p[caps, 0] = r[caps] * np.cos(theta[caps])
    p[caps, 1] = r[caps] * np.sin(theta[caps])
    p[caps, 2] = np.where(part[caps] < 5.0 / 6.0, 1.0, -1.0)
    return p


def _gen_cone(n, rng):
    # apex at z=1, unit-radius base at z=-1; lateral area pi*sqrt(5), base pi
    lat_frac = math.sqrt(5.0) / (math.sqrt(5.0) + 1.0)
    part = rng.uniform(size=n)
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    s = np.sqrt(rng.uniform(size=n))  # radial fraction, area-uniform
    p = np.empty((n, 3))
    lateral = part < lat_frac
    p[lateral, 0] = s[lateral] * np.cos(theta[lateral])
    p[lateral, 1] = s[lateral] * np.sin(theta[lateral])
    p[lateral, 2] = 1.0 - 2.0 * s[lateral]
    base = ~lateral
    p[base, 0] = s[base] * np.cos(theta[base])
    p[base, 1] = s[base] * np.sin(theta[base])
    p[base, 2] = -1.0
    return p


def _gen_torus(n, rng, R=1.0, r=0.4):
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    # minor angle by rejection: surface density is proportional to R + r*cos(phi)
    phi = np.empty(n)
    filled = 0
    while filled < n:
        cand = rng.uniform(0.0, 2.0 * math.pi, size=2 * (n - filled))
        acc = rng.uniform(size=cand.size) < (R + r * np.cos(cand)) / (R + r)
        take = cand[acc][: n - filled]
        phi[filled : filled + len(take)] = take
        filled += len(take)
    d = R + r * np.cos(phi)
    return np.stack([d * np.cos(theta), d * np.sin(theta), r * np.sin(phi)], axis=1)


def _gen_plane(n, rng):
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    return np.concatenate([uv, np.zeros((n, 1))], axis=1)


_GEN_FUNCS = {
    "sphere": _gen_sphere,
    "cube": _gen_cube,
    "cylinder": _gen_cylinder,
    "cone": _gen_cone,
    "torus": _gen_torus,
    "plane": _gen_plane,
}


@dataclass
class DomainSpec:
    """Recipe for one procedurally generated domain."""

    classes: list  # generator name per class
    samples_per_class: int
    n_points: int
    seed: int
    name: str = "domain"
    occlusion_range: tuple = (0.0, 0.0)
    jitter_sigma: float = 0.0
    density_bias_strength: float = 0.0
    raw_points: int = 1024
    scale_range: tuple = (0.7, 1.3)

    def corrupted(self) -> bool:
        return (
            self.occlusion_range[1] > 0.0
            or self.jitter_sigma > 0.0
            or self.density_bias_strength > 0.0
        )


@dataclass
class LabeledSample:
    cloud: np.ndarray
    label: int
    domain: str
    sample_id: str


def _make_sample(spec: DomainSpec, class_idx: int, sample_idx: int) -> np.ndarray:
    gen = _GEN_FUNCS[spec.classes[class_idx]]
    rng = stream(spec.seed, "gen", spec.name, class_idx, sample_idx)
    p = gen(spec.raw_points, rng)
    # anisotropic scale then rotation about the up axis
    s = rng.uniform(spec.scale_range[0], spec.scale_range[1], size=3)
    p = p * s
    ang = rng.uniform(0.0, 2.0 * math.pi)
    ca, sa = math.cos(ang), math.sin(ang)
    rot = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    p = p @ rot.T
    if spec.density_bias_strength > 0.0:
        p = density_bias(p, spec.density_bias_strength, rng)
    p = sample_points(p, spec.n_points, rng)
    p = normalize(p)
    lo, hi = spec.occlusion_range
    if hi > 0.0:
        frac = rng.uniform(lo, hi)
        p = occlusion_augment(p, frac, rng)
    if spec.jitter_sigma > 0.0:
        p = jitter(p, spec.jitter_sigma, rng)
    return p


def generate_domain(spec: DomainSpec) -> list[LabeledSample]:
    """Deterministic, class-balanced sample list for one domain."""
    if len(spec.classes) < 2:
        raise ValueError("need at least 2 classes")
    if spec.samples_per_class <= 0:
        raise ValueError("samples_per_class must be positive")
    for name in spec.classes:
        if name not in _GEN_FUNCS:
            raise ValueError(f"unknown generator '{name}' (choose from {GENERATORS})")
    samples = []
    for c in range(len(spec.classes)):
        for i in range(spec.samples_per_class):
            cloud = _make_sample(spec, c, i)
            samples.append(
                LabeledSample(
                    cloud=cloud,
                    label=c,
                    domain=spec.name,
                    sample_id=f"{spec.name}/{c:02d}/{i:05d}",
                )
            )
    return samples


# ---------------------------------------------------------------------------
# PCSET v1 dataset files: JSON manifest + one text file per split,
# one sample per line: "label x y z x y z ..." at 17 significant digits.

def _format_line(label: int, cloud: np.ndarray) -> str:
    coords = " ".join(f"{v:.17g}" for v in cloud.ravel())
    return f"{label} {coords}"


def _parse_line(line: str, n_points: int):
    parts = line.split()
    label = int(parts[0])
    vals = np.array([float(v) for v in parts[1:]], dtype=np.float64)
    if vals.size != 3 * n_points:
        raise ValueError(f"expected {3 * n_points} coordinates, got {vals.size}")
    return label, vals.reshape(n_points, 3)


def save_pcset(out_dir, splits: dict, manifest: dict) -> None:
    """Write a PCSET v1 directory: manifest.json plus <split>.txt files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest["format"] = "PCSET v1"
    manifest["splits"] = {name: len(samples) for name, samples in splits.items()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for name, samples in splits.items():
        lines = [_format_line(s.label, s.cloud) for s in samples]
        (out / f"{name}.txt").write_text("\n".join(lines) + "\n")


def load_pcset(in_dir) -> tuple[dict, dict]:
    """Read a PCSET v1 directory back into (manifest, splits)."""
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != "PCSET v1":
        raise ValueError(f"{in_dir} is not a PCSET v1 dataset")
    n_points = manifest["n_points"]
    splits = {}
    for name in manifest["splits"]:
        samples = []
        with open(root / f"{name}.txt") as fh:
            for i, line in enumerate(fh):
                line = line.strip()
                if not line:
                    continue
                label, cloud = _parse_line(line, n_points)
                samples.append(
                    LabeledSample(
                        cloud=cloud,
                        label=label,
                        domain=name,
                        sample_id=f"{name}/{i:06d}",
                    )
                )
        splits[name] = samples
    return manifest, splits


def clouds_array(samples) -> np.ndarray:
    """Stack a sample list into a (B, n, 3) array."""
    return np.stack([s.cloud for s in samples])


def labels_array(samples) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.intp)


class HiddenLabels:
    """Target-domain ground truth, visible to evaluation only.

    Every access is recorded with its declared purpose; the pipeline asserts
    that no training stage ever reads them.
    """

    def __init__(self, labels: np.ndarray):
        self._labels = np.asarray(labels, dtype=np.intp)
        self.access_log: list[str] = []

    def reveal(self, purpose: str) -> np.ndarray:
        self.access_log.append(purpose)
        return self._labels.copy()

    def __len__(self):
        return len(self._labels)
