"""Identity augmentation by random positive combinations of DR features.

Weights come from a point drawn in hyperspherical coordinates restricted to
the first orthant: radius in [0.5, 1.2], every angle in [0, pi/2].
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .deform import DRFeature, FeatureMismatch, write_drf

R_RANGE = (0.5, 1.2)


@dataclass(frozen=True)
class PolarSample:
    r: float
    angles: np.ndarray  # m - 1 values in [0, pi/2]
    weights: np.ndarray  # m cartesian coordinates

    @property
    def m(self) -> int:
        return len(self.weights)


def polar_to_cartesian(r, angles) -> np.ndarray:
    """a_k = r * prod_{j<k} sin(t_j) * cos(t_k), last coordinate takes the full sine product."""
    angles = np.asarray(angles, dtype=np.float64)
    out = np.empty(len(angles) + 1)
    run = float(r)
    for k, t in enumerate(angles):
        out[k] = run * np.cos(t)
        run *= np.sin(t)
    out[-1] = run
    return out


def sample_weights(m: int, rng) -> PolarSample:
    if m < 2:
        raise ValueError(f"need m >= 2 source features, got {m}")
    r = float(rng.uniform(*R_RANGE))
    angles = rng.uniform(0.0, np.pi / 2, m - 1)
    return PolarSample(r, angles, polar_to_cartesian(r, angles))


def combine(features, weights) -> DRFeature:
    ref = features[0].reference_id
    if any(f.reference_id != ref for f in features):
        raise FeatureMismatch("source features come from different reference meshes")
    values = np.einsum("k,knd->nd", np.asarray(weights), np.stack([f.values for f in features]))
    return DRFeature(values, ref)


def augment_corpus(features, count: int = 2000, m: int = 5, rng=None, return_sources=False):
    """Each output mixes m distinct features drawn uniformly without replacement."""
    features = list(features)
    if len(features) < m:
        raise ValueError(f"need at least m={m} features, got {len(features)}")
    rng = np.random.default_rng(0) if rng is None else rng
    out, sources = [], []
    for _ in range(count):
        idx = rng.choice(len(features), size=m, replace=False)
        w = sample_weights(m, rng)
        out.append(combine([features[i] for i in idx], w.weights))
        sources.append((idx.tolist(), w.weights.tolist()))
    return (out, sources) if return_sources else out


def write_augmented(features, out_dir, seed, m, source_files=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, f in enumerate(features):
        name = f"aug_{i}.drf"
        write_drf(f, out / name)
        names.append(name)
    manifest = {"seed": seed, "m": m, "count": len(features), "sources": list(source_files or []),
                "outputs": names}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path
