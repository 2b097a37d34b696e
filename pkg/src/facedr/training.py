"""Three-stage training: branch pretraining, fusion pretraining, end-to-end."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import layers as nn
from .augment import augment_corpus
from .deform import DRFeature
from .network import (LOSS_NAMES, ArchConfig, Model, NonFiniteLoss, branch_loss, fusion_loss,
                      loss_total)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "stage") + LOSS_NAMES + ("lr",)
STD_FLOOR = 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, stage, epoch, detail):
        super().__init__(f"training diverged in stage {stage}, epoch {epoch}: {detail}")
        self.stage = stage
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs_per_stage: int = 50
    learning_rate: float = 1e-4
    lr_decay: float = 0.6
    decay_every: int = 10
    kld_id: float = 1e-5
    kld_exp: float = 1e-5
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment_count: int = 2000
    augment_m: int = 5
    dtype: str = "float64"
    stages: tuple = (1, 2, 3)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.lr_decay <= 0 or self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("learning rate, decay, batch size and decay interval must be positive")
        self.stages = tuple(self.stages)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch inside a stage."""
        return self.learning_rate * self.lr_decay ** ((epoch - 1) // self.decay_every)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: Model
    history: list  # dicts keyed by LOG_COLUMNS


def feature_stats(arrays):
    stack = np.concatenate([np.asarray(a).reshape(-1, a.shape[-1]) for a in arrays])
    return stack.mean(axis=0), np.maximum(stack.std(axis=0), STD_FLOOR)


def _stack(features):
    return np.stack([f.values if isinstance(f, DRFeature) else f for f in features])


def _batches(rng, count, size):
    order = rng.permutation(count)
    return [order[i:i + size] for i in range(0, count, size)]


def evaluate(model: Model, G, Gid, Gexp, seed=12345, batch_size=64) -> dict:
    """Loss components averaged over a dataset with a fixed noise stream."""
    rng = np.random.default_rng(seed)
    totals = dict.fromkeys(LOSS_NAMES, 0.0)
    count = len(G)
    for s in range(0, count, batch_size):
        sl = slice(s, s + batch_size)
        _, comps, _ = loss_total(model, G[sl], Gid[sl], Gexp[sl], rng)
        w = len(G[sl]) / count
        for k in LOSS_NAMES:
            totals[k] += w * comps[k]
    return totals


def train(config: TrainConfig, triplets, Ltilde, reference_id="", arch: ArchConfig | None = None,
          log_path=None, augment=True) -> TrainResult:
    """Train a fresh model on triplets; returns the model and the per-epoch loss log."""
    triplets = list(triplets)
    if not triplets:
        raise ValueError("empty training set")
    n = triplets[0].G.n
    refs = {t.G.reference_id for t in triplets} | {t.G_id.reference_id for t in triplets} \
        | {t.G_exp.reference_id for t in triplets}
    if len(refs) != 1:
        raise ValueError("triplets were encoded against different reference meshes")
    if any(t.G.n != n for t in triplets):
        raise ValueError("triplets differ in vertex count")
    reference_id = reference_id or refs.pop()
    dtype = np.dtype(config.dtype)
    arch = arch or ArchConfig(n=n)
    arch.kld_id, arch.kld_exp = config.kld_id, config.kld_exp

    G_raw = _stack([t.G for t in triplets])
    Gid_raw = _stack([t.G_id for t in triplets])
    Gexp_raw = _stack([t.G_exp for t in triplets])
    mean, std = feature_stats([G_raw, Gid_raw, Gexp_raw])
    model = Model.create(arch, Ltilde, mean, std, reference_id, seed=config.seed, dtype=dtype,
                         train_config=asdict(config))
    G, Gid, Gexp = model.normalize(G_raw), model.normalize(Gid_raw), model.normalize(Gexp_raw)

    rng = np.random.default_rng(config.seed)
    # identity-branch extra data: mixtures of the distinct training identity features
    id_in, id_out = G, Gid
    if augment and config.augment_count > 0 and 1 in config.stages:
        seen, uniq = set(), []
        for t in triplets:
            if t.identity not in seen:
                seen.add(t.identity)
                uniq.append(t.G_id)
        if len(uniq) >= config.augment_m:
            aug = model.normalize(_stack(augment_corpus(uniq, config.augment_count, config.augment_m,
                                                        np.random.default_rng([config.seed, 7]))))
            id_in = np.concatenate([G, aug])
            id_out = np.concatenate([Gid, aug])
        else:
            log.warning("only %d identities, skipping augmentation (m=%d)", len(uniq), config.augment_m)

    history = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()

    def record(stage, epoch, lr):
        comps = evaluate(model, G, Gid, Gexp)
        bad = [k for k, v in comps.items() if not np.isfinite(v)]
        if bad:
            raise TrainingDiverged(stage, epoch, f"non-finite {', '.join(bad)}")
        row = {"epoch": epoch, "stage": stage, **comps, "lr": lr}
        history.append(row)
        if writer is not None:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
            fh.flush()
        log.info("stage %d epoch %d L_total %.5f L_rec %.5f", stage, epoch, comps["L_total"], comps["L_rec"])

    try:
        record(0, 0, 0.0)
        bs = config.batch_size
        for stage in config.stages:
            opt = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
            for epoch in range(1, config.epochs_per_stage + 1):
                opt.lr = config.lr_at(epoch)
                try:
                    if stage == 1:
                        jobs = [("id", b) for b in _batches(rng, len(id_in), bs)]
                        jobs += [("exp", b) for b in _batches(rng, len(G), bs)]
                        for j in rng.permutation(len(jobs)):
                            branch, b = jobs[j]
                            if branch == "id":
                                _, _, grads = branch_loss(model, "id", id_in[b], id_out[b], rng)
                            else:
                                _, _, grads = branch_loss(model, "exp", G[b], Gexp[b], rng)
                            _check(grads)
                            opt.step(model.params, grads)
                    elif stage == 2:
                        for b in _batches(rng, len(G), bs):
                            _, grads = fusion_loss(model, G[b], rng)
                            _check(grads)
                            opt.step(model.params, grads)
                    elif stage == 3:
                        for b in _batches(rng, len(G), bs):
                            _, _, grads = loss_total(model, G[b], Gid[b], Gexp[b], rng, need_grad=True)
                            _check(grads)
                            opt.step(model.params, grads)
                    else:
                        raise ValueError(f"unknown stage {stage}")
                except (NonFiniteLoss, FloatingPointError) as exc:
                    raise TrainingDiverged(stage, epoch, str(exc)) from exc
                record(stage, epoch, opt.lr)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(model, history)


def _check(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteLoss(f"non-finite gradient for {name}")


def read_log(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("epoch", "stage") else float(v)) for k, v in r.items()} for r in rows]


def save_model(model: Model, out_dir, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = model.config()
    cfg["kind"] = "facedr_model"
    cfg["laplacian"] = {"indptr": model.L.indptr.tolist(), "indices": model.L.indices.tolist(),
                        "data": [float(x) for x in model.L.data], "n": model.arch.n}
    if extra:
        cfg.update(extra)
    nn.save_tensors(out / "model.json", out / "model.bin", model.params, cfg)
    return out / "model.json"


def load_model(path, dtype=None) -> Model:
    """Load from a model.json path or the directory holding model.json/model.bin."""
    import scipy.sparse as sp

    p = Path(path)
    if p.is_dir():
        p = p / "model.json"
    manifest = json.loads(p.read_text())
    cfg = manifest["config"]
    if cfg.get("kind") != "facedr_model":
        raise ValueError(f"{p} is not a network model file")
    dt = np.dtype(dtype or cfg["train"].get("dtype", "float64"))
    params, cfg = nn.load_tensors(p, p.with_suffix(".bin"), dt)
    lap = cfg["laplacian"]
    n = lap["n"]
    L = sp.csr_matrix((lap["data"], lap["indices"], lap["indptr"]), shape=(n, n))
    arch = ArchConfig(**cfg["arch"])
    return Model(arch, L, params, cfg["mean"], cfg["std"], cfg["reference_id"], cfg["train"])
