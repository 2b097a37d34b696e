"""Deterministic synthetic face-like corpus.

A dome-shaped grid patch plays the mean neutral face. Identities are smooth
radial-basis displacement fields with zero mean across the corpus, and
expressions are localized warps (jaw rotation about a hinge line, brow raise,
smile curl) whose amplitude is modulated by an identity coefficient, so the
identity/expression interaction is not bilinear.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .deform import DRFeature, ReferenceFrame
from .mesh import Mesh, MeshError, load_obj, save_obj


@dataclass
class CorpusSpec:
    n_vertices: int = 1024
    identities: int = 16
    expressions: int = 12
    held_out: int = 2
    seed: int = 0
    identity_modes: int = 8
    identity_amplitude: float = 6.0  # mm, RMS displacement per mode coefficient
    identity_width: float = 40.0  # mm, RBF length scale
    coupling: float = 0.2
    jaw_max: float = 0.20  # rad
    brow_max: float = 6.0  # mm
    smile_max: float = 6.0  # mm
    width: float = 120.0  # mm, x extent
    height: float = 150.0  # mm, y extent
    depth: float = 45.0  # mm, dome height

    def grid_size(self) -> int:
        g = int(round(np.sqrt(self.n_vertices)))
        if g * g != self.n_vertices or g < 3:
            raise ValueError(f"n_vertices must be a perfect square >= 9, got {self.n_vertices}")
        return g


def dome_mesh(spec: CorpusSpec) -> Mesh:
    g = spec.grid_size()
    t = np.linspace(-1.0, 1.0, g)
    u, v = np.meshgrid(t, t, indexing="xy")
    # square -> elliptic disk
    x = u * np.sqrt(1.0 - 0.5 * v**2)
    y = v * np.sqrt(1.0 - 0.5 * u**2)
    r2 = x**2 + y**2
    verts = np.stack([0.5 * spec.width * x, 0.5 * spec.height * y, spec.depth * (1.0 - 0.6 * r2)], axis=-1)
    verts = verts.reshape(-1, 3)
    faces = []
    for j in range(g - 1):
        for i in range(g - 1):
            a = j * g + i
            b, c, d = a + 1, a + g + 1, a + g
            if (i + j) % 2 == 0:
                faces += [(a, b, c), (a, c, d)]
            else:
                faces += [(a, b, d), (b, c, d)]
    return Mesh(verts, np.array(faces))


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _gauss(p, center, width):
    return np.exp(-np.sum((p[:, :2] - center) ** 2, axis=1) / (2.0 * width**2))


@dataclass
class Corpus:
    spec: CorpusSpec
    reference: Mesh
    meshes: list  # meshes[i][e]
    expression_meshes: list  # expression e on the mean face
    identity_codes: np.ndarray
    expression_amplitudes: np.ndarray
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)

    def identity_mesh(self, i) -> Mesh:
        return self.meshes[i][0]

    def mesh(self, i, e) -> Mesh:
        return self.meshes[i][e]

    def manifest(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "seed": self.spec.seed,
            "split": {"train": self.train_ids, "test": self.test_ids},
            "reference": "reference.obj",
            "meshes": [[f"corpus/{i}_{e}.obj" for e in range(self.spec.expressions)]
                       for i in range(self.spec.identities)],
        }

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        (out / "corpus").mkdir(parents=True, exist_ok=True)
        save_obj(self.reference, out / "reference.obj")
        for i, row in enumerate(self.meshes):
            for e, m in enumerate(row):
                save_obj(m, out / "corpus" / f"{i}_{e}.obj")
        for e, m in enumerate(self.expression_meshes):
            save_obj(m, out / "corpus" / f"mean_{e}.obj")
        (out / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")


def load_corpus(root) -> Corpus:
    """Read a corpus written by Corpus.save; generator codes are not stored, so they come back empty."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    spec = CorpusSpec(**manifest["spec"])
    reference = load_obj(root / manifest["reference"])
    meshes = [[load_obj(root / f) for f in row] for row in manifest["meshes"]]
    exp_meshes = [load_obj(root / "corpus" / f"mean_{e}.obj") for e in range(spec.expressions)]
    for m in [m for row in meshes for m in row] + exp_meshes:
        if not reference.same_connectivity(m):
            raise MeshError(f"corpus mesh connectivity differs from {root / manifest['reference']}")
    return Corpus(spec, reference, meshes, exp_meshes, np.zeros((0, spec.identity_modes)), np.zeros((0, 3)),
                  train_ids=list(manifest["split"]["train"]), test_ids=list(manifest["split"]["test"]))


class FaceModel:
    """Ground-truth generator: any identity code combined with any expression amplitude vector."""

    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        self.base = dome_mesh(spec)
        rng = np.random.default_rng([spec.seed, 1])
        w, h = spec.width, spec.height
        k = spec.identity_modes
        self.centers = np.stack([rng.uniform(-0.45 * w, 0.45 * w, k), rng.uniform(-0.45 * h, 0.45 * h, k)], 1)
        dirs = rng.standard_normal((k, 3))
        self.directions = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        self._basis = np.stack([
            _gauss(self.base.vertices, self.centers[m], spec.identity_width)[:, None] * self.directions[m]
            for m in range(k)
        ])  # k x n x 3
        self._centroid = self.base.vertices.mean(axis=0)

    def identity_field(self, code) -> np.ndarray:
        return self.spec.identity_amplitude * np.einsum("k,knd->nd", np.asarray(code), self._basis)

    def coupling(self, code) -> float:
        return 1.0 + self.spec.coupling * float(np.clip(code[0], -2.0, 2.0))

    def warp(self, p, amps, factor) -> np.ndarray:
        """Apply jaw / brow / smile warps with amplitudes scaled by the coupling factor."""
        s = self.spec
        jaw, brow, smile = (float(a) * factor for a in amps)
        h = s.height
        out = p.copy()
        # jaw: rotation about a hinge line parallel to x, below the mouth line
        mouth_y = -0.18 * h
        hinge = np.array([0.0, 0.0, -0.5 * s.depth])
        wj = _smoothstep((mouth_y - p[:, 1]) / (0.3 * h)) * np.exp(-0.5 * (p[:, 0] / (0.4 * s.width)) ** 2)
        ang = jaw * s.jaw_max * wj
        dy = p[:, 1] - hinge[1]
        dz = p[:, 2] - hinge[2]
        ca, sa = np.cos(ang), np.sin(ang)
        out[:, 1] = hinge[1] + ca * dy + sa * dz
        out[:, 2] = hinge[2] - sa * dy + ca * dz
        # brow raise: upward lift over two brow bumps
        bw = s.width
        lift = _gauss(p, np.array([-0.2 * bw, 0.27 * h]), 0.1 * bw) + _gauss(p, np.array([0.2 * bw, 0.27 * h]), 0.1 * bw)
        out[:, 1] += brow * s.brow_max * lift
        out[:, 2] += 0.3 * brow * s.brow_max * lift
        # smile curl: mouth corners pulled up, out and back
        for side in (-1.0, 1.0):
            g = _gauss(p, np.array([side * 0.2 * bw, mouth_y]), 0.09 * bw)
            out[:, 0] += side * 0.5 * smile * s.smile_max * g
            out[:, 1] += smile * s.smile_max * g
            out[:, 2] -= 0.4 * smile * s.smile_max * g
        return out

    def recenter(self, p) -> np.ndarray:
        return p + (self._centroid - p.mean(axis=0))

    def generate(self, code, amps) -> Mesh:
        p = self.base.vertices + self.identity_field(code)
        p = self.warp(p, amps, self.coupling(code))
        return self.base.with_vertices(self.recenter(p))

    def expression_on_mean(self, amps) -> Mesh:
        p = self.warp(self.base.vertices.copy(), amps, 1.0)
        return self.base.with_vertices(self.recenter(p))


def expression_table(spec: CorpusSpec) -> np.ndarray:
    """Amplitudes (jaw, brow, smile) per expression; row 0 is neutral."""
    rng = np.random.default_rng([spec.seed, 2])
    amps = np.zeros((spec.expressions, 3))
    prototypes = np.eye(3)
    for e in range(1, spec.expressions):
        if e <= 3:
            amps[e] = prototypes[e - 1]
        else:
            a = rng.uniform(0.0, 1.0, 3)
            a[rng.integers(3)] *= 0.2
            amps[e] = a
    return amps


def identity_codes(spec: CorpusSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 3])
    codes = rng.standard_normal((spec.identities, spec.identity_modes))
    return codes - codes.mean(axis=0)


def generate(spec: CorpusSpec | None = None) -> Corpus:
    spec = spec or CorpusSpec()
    model = FaceModel(spec)
    codes = identity_codes(spec)
    amps = expression_table(spec)
    meshes = [[model.generate(codes[i], amps[e]) for e in range(spec.expressions)] for i in range(spec.identities)]
    exp_meshes = [model.expression_on_mean(amps[e]) for e in range(spec.expressions)]
    n_test = spec.held_out
    ids = list(range(spec.identities))
    return Corpus(spec, model.base, meshes, exp_meshes, codes, amps,
                  train_ids=ids[: spec.identities - n_test], test_ids=ids[spec.identities - n_test:])


@dataclass
class Triplet:
    G: DRFeature
    G_id: DRFeature
    G_exp: DRFeature
    identity: int
    expression: int


def make_triplets(corpus: Corpus, ref: ReferenceFrame, ids=None) -> list[Triplet]:
    ids = corpus.train_ids + corpus.test_ids if ids is None else ids
    exp_feats = [ref.encode(m) for m in corpus.expression_meshes]
    out = []
    for i in ids:
        row = [ref.encode(m) for m in corpus.meshes[i]]
        for e in range(corpus.spec.expressions):
            out.append(Triplet(row[e], row[0], exp_feats[e], i, e))
    return out
