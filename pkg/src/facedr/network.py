"""Identity/expression decomposition branches, fusion network and training losses.

All network tensors live in normalized feature space: DR features are
standardized per channel with training-set statistics before entering a
network and de-standardized when a decoded feature leaves the model.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from . import layers as nn
from .deform import FEATURE_DIM, REST_ROW, DRFeature

LOGVAR_CLAMP = 10.0
LOSS_NAMES = ("L_total", "L_rec", "L_dis", "L_id", "L_exp", "L_id_kld", "L_exp_kld")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class ArchConfig:
    n: int
    latent_id: int = 50
    latent_exp: int = 25
    channels: int = 32
    hidden: int = 128
    order: int = 2
    conv_bias: bool = True
    slope: float = nn.LEAK
    kld_id: float = 1e-5
    kld_exp: float = 1e-5


class Sequential:
    """A fixed chain of layers whose parameters are looked up by name in a shared dict."""

    def __init__(self, steps):
        self.steps = steps

    def forward(self, params, x, L, slope):
        tapes = []
        for step in self.steps:
            kind = step[0]
            if kind == "cheb":
                name = step[1]
                layer = nn.ChebConvLayer(params[f"{name}.theta"], params.get(f"{name}.bias"))
                x, t = nn.cheb_forward(layer, x, L)
            elif kind == "dense":
                name = step[1]
                x, t = nn.dense_forward(nn.DenseLayer(params[f"{name}.weight"], params[f"{name}.bias"]), x)
            elif kind == "act":
                x, t = nn.activation_forward(x, slope)
            elif kind == "flatten":
                t = x.shape
                x = x.reshape(x.shape[0], -1)
            elif kind == "reshape":
                t = x.shape
                x = x.reshape((x.shape[0],) + step[1])
            else:
                raise ValueError(kind)
            tapes.append(t)
        return x, tapes

    def backward(self, tapes, dy, grads):
        for step, t in zip(reversed(self.steps), reversed(tapes)):
            kind = step[0]
            if kind == "cheb":
                dy, dth, db = nn.cheb_backward(t, dy)
                _acc(grads, f"{step[1]}.theta", dth)
                if db is not None:
                    _acc(grads, f"{step[1]}.bias", db)
            elif kind == "dense":
                dy, dw, db = nn.dense_backward(t, dy)
                _acc(grads, f"{step[1]}.weight", dw)
                _acc(grads, f"{step[1]}.bias", db)
            elif kind == "act":
                dy = nn.activation_backward(t, dy)
            else:  # flatten / reshape
                dy = dy.reshape(t)
        return dy


def _acc(grads, name, g):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


def encoder_steps(prefix):
    return [("cheb", f"{prefix}.enc.c1"), ("act",), ("cheb", f"{prefix}.enc.c2"), ("act",), ("flatten",),
            ("dense", f"{prefix}.enc.d1"), ("act",), ("dense", f"{prefix}.enc.d2")]


def decoder_steps(prefix, n, channels):
    return [("dense", f"{prefix}.dec.d1"), ("act",), ("dense", f"{prefix}.dec.d2"), ("act",),
            ("reshape", (n, channels)), ("cheb", f"{prefix}.dec.c1"), ("act",), ("cheb", f"{prefix}.dec.c2")]


FUSION_STEPS = [("cheb", "fuse.c1"), ("act",), ("cheb", "fuse.c2"), ("act",), ("cheb", "fuse.c3")]


def init_params(arch: ArchConfig, seed=0, dtype=np.float64) -> dict:
    rng = np.random.default_rng(seed)
    K, C, H, n = arch.order, arch.channels, arch.hidden, arch.n
    params = {}

    def cheb(name, fi, fo):
        layer = nn.ChebConvLayer.init(rng, K, fi, fo, bias=arch.conv_bias, dtype=dtype)
        params[f"{name}.theta"] = layer.theta
        if layer.bias is not None:
            params[f"{name}.bias"] = layer.bias

    def dense(name, fi, fo):
        layer = nn.DenseLayer.init(rng, fi, fo, dtype=dtype)
        params[f"{name}.weight"] = layer.weight
        params[f"{name}.bias"] = layer.bias

    for prefix, latent in (("id", arch.latent_id), ("exp", arch.latent_exp)):
        cheb(f"{prefix}.enc.c1", FEATURE_DIM, C)
        cheb(f"{prefix}.enc.c2", C, C)
        dense(f"{prefix}.enc.d1", n * C, H)
        dense(f"{prefix}.enc.d2", H, 2 * latent)
        dense(f"{prefix}.dec.d1", latent, H)
        dense(f"{prefix}.dec.d2", H, n * C)
        cheb(f"{prefix}.dec.c1", C, C)
        cheb(f"{prefix}.dec.c2", C, FEATURE_DIM)
    cheb("fuse.c1", 2 * FEATURE_DIM, C)
    cheb("fuse.c2", C, C)
    cheb("fuse.c3", C, FEATURE_DIM)
    return params


class Model:
    """Trainable parameters plus everything needed to run them on one mesh connectivity."""

    def __init__(self, arch: ArchConfig, Ltilde, params: dict, mean, std, reference_id: str,
                 train_config: dict | None = None):
        self.arch = arch
        self.params = params
        self.dtype = next(iter(params.values())).dtype
        self.L = sp.csr_matrix(Ltilde, dtype=self.dtype)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError("normalization std must be positive")
        self.reference_id = reference_id
        self.train_config = dict(train_config or {})
        self.enc = {p: Sequential(encoder_steps(p)) for p in ("id", "exp")}
        self.dec = {p: Sequential(decoder_steps(p, arch.n, arch.channels)) for p in ("id", "exp")}
        self.fusion = Sequential(FUSION_STEPS)
        self.latent = {"id": arch.latent_id, "exp": arch.latent_exp}
        self.rest = self.normalize(np.tile(REST_ROW, (arch.n, 1)))

    @classmethod
    def create(cls, arch, Ltilde, mean=None, std=None, reference_id="", seed=0, dtype=np.float64, **kw):
        mean = np.zeros(FEATURE_DIM) if mean is None else mean
        std = np.ones(FEATURE_DIM) if std is None else std
        return cls(arch, Ltilde, init_params(arch, seed, dtype), mean, std, reference_id, **kw)

    def normalize(self, values):
        return ((np.asarray(values) - self.mean) / self.std).astype(self.dtype)

    def denormalize(self, values):
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    def check_feature(self, feature: DRFeature):
        if feature.n != self.arch.n:
            raise nn.ShapeError(f"model expects {self.arch.n} vertices, feature has {feature.n}")
        if self.reference_id and feature.reference_id != self.reference_id:
            raise ValueError("feature reference does not match the model reference")

    # -- branch pieces -------------------------------------------------------

    def encode(self, branch, X):
        """Normalized features (B, n, 9) -> (mu, logvar, tape)."""
        h, tapes = self.enc[branch].forward(self.params, X, self.L, self.arch.slope)
        k = self.latent[branch]
        mu = h[:, :k]
        raw = h[:, k:]
        logvar = np.clip(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)
        inside = np.abs(raw) <= LOGVAR_CLAMP
        return mu, logvar, (tapes, inside)

    def encode_backward(self, branch, tape, dmu, dlogvar, grads):
        tapes, inside = tape
        dh = np.concatenate([dmu, np.where(inside, dlogvar, 0.0)], axis=1)
        return self.enc[branch].backward(tapes, dh, grads)

    def decode(self, branch, z):
        return self.dec[branch].forward(self.params, z, self.L, self.arch.slope)

    def decode_backward(self, branch, tapes, dy, grads):
        return self.dec[branch].backward(tapes, dy, grads)

    def fuse(self, Gid_hat, Gexp_hat):
        cat = np.concatenate([Gid_hat, Gexp_hat], axis=-1)
        return self.fusion.forward(self.params, cat, self.L, self.arch.slope)

    def fuse_backward(self, tapes, dy, grads):
        dcat = self.fusion.backward(tapes, dy, grads)
        return dcat[..., :FEATURE_DIM], dcat[..., FEATURE_DIM:]

    # -- evaluation-mode API -------------------------------------------------

    def _batch(self, feature: DRFeature):
        self.check_feature(feature)
        return self.normalize(feature.values)[None]

    def latent_codes(self, feature: DRFeature):
        X = self._batch(feature)
        mu_id, _, _ = self.encode("id", X)
        mu_exp, _, _ = self.encode("exp", X)
        return mu_id[0], mu_exp[0]

    def _as_feature(self, normalized):
        return DRFeature(self.denormalize(normalized[0]), self.reference_id)

    def decode_identity(self, z) -> DRFeature:
        out, _ = self.decode("id", np.asarray(z, dtype=self.dtype)[None])
        return self._as_feature(out)

    def decode_expression(self, z) -> DRFeature:
        out, _ = self.decode("exp", np.asarray(z, dtype=self.dtype)[None])
        return self._as_feature(out)

    def fuse_features(self, Gid: DRFeature, Gexp: DRFeature) -> DRFeature:
        if Gid.n != Gexp.n:
            raise nn.ShapeError("identity and expression features differ in vertex count")
        out, _ = self.fuse(self.normalize(Gid.values)[None], self.normalize(Gexp.values)[None])
        return self._as_feature(out)

    def generate(self, z_id, z_exp) -> DRFeature:
        gi, _ = self.decode("id", np.asarray(z_id, dtype=self.dtype)[None])
        ge, _ = self.decode("exp", np.asarray(z_exp, dtype=self.dtype)[None])
        out, _ = self.fuse(gi, ge)
        return self._as_feature(out)

    def reconstruct(self, feature: DRFeature) -> DRFeature:
        z_id, z_exp = self.latent_codes(feature)
        return self.generate(z_id, z_exp)

    def config(self) -> dict:
        return {"arch": asdict(self.arch), "mean": self.mean.tolist(), "std": self.std.tolist(),
                "reference_id": self.reference_id, "train": self.train_config}

    def copy(self) -> "Model":
        params = {k: v.copy() for k, v in self.params.items()}
        return Model(self.arch, self.L, params, self.mean, self.std, self.reference_id, self.train_config)


def encode_branch(model: Model, branch: str, G: DRFeature):
    """(mu, logvar) of one branch for a single feature."""
    mu, logvar, _ = model.encode(branch, model._batch(G))
    return mu[0], logvar[0]


def decode_branch(model: Model, branch: str, z) -> DRFeature:
    return model.decode_identity(z) if branch == "id" else model.decode_expression(z)


def fuse(model: Model, Gid_hat: DRFeature, Gexp_hat: DRFeature) -> DRFeature:
    return model.fuse_features(Gid_hat, Gexp_hat)


def reparameterize(mu, logvar, rng=None, eps=None):
    """z = mu + exp(logvar / 2) * eps; with no rng and no eps this is evaluation mode (z = mu)."""
    mu = np.asarray(mu)
    if eps is None:
        if rng is None:
            return mu.copy()
        eps = rng.standard_normal(mu.shape).astype(mu.dtype)
    return mu + np.exp(0.5 * np.asarray(logvar)) * eps


def kl_divergence(mu, logvar):
    """Closed-form KL(q || N(0, I)) per row: 1/2 sum(mu^2 + e^logvar - logvar - 1)."""
    mu = np.asarray(mu)
    logvar = np.asarray(logvar)
    return 0.5 * np.sum(mu**2 + np.exp(logvar) - logvar - 1.0, axis=-1)


def _l1(pred, target):
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def _kl_term(mu, logvar):
    B = mu.shape[0]
    value = float(np.mean(kl_divergence(mu, logvar)))
    return value, mu / B, 0.5 * (np.exp(logvar) - 1.0) / B


def _sample(rng, mu, logvar, sample):
    if not sample:
        return mu.copy(), np.zeros_like(mu)
    eps = rng.standard_normal(mu.shape).astype(mu.dtype)
    return mu + np.exp(0.5 * logvar) * eps, eps


def branch_loss(model: Model, branch: str, X, target, rng, alpha=None, need_grad=True, sample=True):
    """Reconstruction L1 + alpha * KL for one branch on a batch. Returns (value, (l1, kl), grads)."""
    alpha = (model.arch.kld_id if branch == "id" else model.arch.kld_exp) if alpha is None else alpha
    mu, lv, etape = model.encode(branch, X)
    z, eps = _sample(rng, mu, lv, sample)
    out, dtape = model.decode(branch, z)
    l1, dout = _l1(out, target)
    kl, dmu_kl, dlv_kl = _kl_term(mu, lv)
    value = l1 + alpha * kl
    grads = {}
    if need_grad:
        dz = model.decode_backward(branch, dtape, dout.astype(model.dtype), grads)
        dmu = dz + alpha * dmu_kl
        dlv = dz * eps * 0.5 * np.exp(0.5 * lv) + alpha * dlv_kl
        model.encode_backward(branch, etape, dmu, dlv, grads)
    return value, (l1, kl), grads


def loss_total(model: Model, G, Gid, Gexp, rng, objective="total", need_grad=False, sample=True):
    """Full objective on a normalized batch.

    objective: "total" (every term), "fusion" (L_rec only, branches frozen).
    Returns (value, components, grads). Noise is drawn from rng in a fixed order so a
    re-seeded generator reproduces the same samples.
    """
    a_id, a_exp = model.arch.kld_id, model.arch.kld_exp
    rest = model.rest[None]
    mu_i, lv_i, te_i = model.encode("id", G)
    z_i, eps_i = _sample(rng, mu_i, lv_i, sample)
    gid_hat, td_i = model.decode("id", z_i)
    mu_e, lv_e, te_e = model.encode("exp", G)
    z_e, eps_e = _sample(rng, mu_e, lv_e, sample)
    gexp_hat, td_e = model.decode("exp", z_e)
    fused, tf = model.fuse(gid_hat, gexp_hat)
    # disentangling: expression branch on identity output, identity branch on expression output
    mu_a, lv_a, te_a = model.encode("exp", gid_hat)
    z_a, eps_a = _sample(rng, mu_a, lv_a, sample)
    out_a, td_a = model.decode("exp", z_a)
    mu_b, lv_b, te_b = model.encode("id", gexp_hat)
    z_b, eps_b = _sample(rng, mu_b, lv_b, sample)
    out_b, td_b = model.decode("id", z_b)

    L_id, d_gid = _l1(gid_hat, Gid)
    L_exp, d_gexp = _l1(gexp_hat, Gexp)
    L_rec, d_fused = _l1(fused, G)
    dis_a, d_out_a = _l1(out_a, rest)
    dis_b, d_out_b = _l1(out_b, rest)
    kl_i, dmu_kl_i, dlv_kl_i = _kl_term(mu_i, lv_i)
    kl_e, dmu_kl_e, dlv_kl_e = _kl_term(mu_e, lv_e)
    comps = {"L_rec": L_rec, "L_dis": dis_a + dis_b, "L_id": L_id, "L_exp": L_exp,
             "L_id_kld": kl_i, "L_exp_kld": kl_e}
    total = L_rec + comps["L_dis"] + L_id + L_exp + a_id * kl_i + a_exp * kl_e
    comps["L_total"] = total
    bad = [k for k, v in comps.items() if not np.isfinite(v)]
    if bad:
        raise NonFiniteLoss(f"non-finite loss components: {', '.join(bad)}")
    value = L_rec if objective == "fusion" else total
    grads = {}
    if not need_grad:
        return value, comps, grads
    dt = model.dtype
    if objective == "fusion":
        model.fuse_backward(tf, d_fused.astype(dt), grads)
        return value, comps, grads

    def through_reparam(dz, eps, lv):
        return dz, dz * eps * 0.5 * np.exp(0.5 * lv)

    # disentangling paths feed back into the branch outputs they consumed
    dz_a = model.decode_backward("exp", td_a, d_out_a.astype(dt), grads)
    dmu, dlv = through_reparam(dz_a, eps_a, lv_a)
    g_from_a = model.encode_backward("exp", te_a, dmu, dlv, grads)
    dz_b = model.decode_backward("id", td_b, d_out_b.astype(dt), grads)
    dmu, dlv = through_reparam(dz_b, eps_b, lv_b)
    g_from_b = model.encode_backward("id", te_b, dmu, dlv, grads)

    dgid_f, dgexp_f = model.fuse_backward(tf, d_fused.astype(dt), grads)
    d_gid_total = d_gid + dgid_f + g_from_a
    d_gexp_total = d_gexp + dgexp_f + g_from_b

    dz_i = model.decode_backward("id", td_i, d_gid_total.astype(dt), grads)
    dmu, dlv = through_reparam(dz_i, eps_i, lv_i)
    model.encode_backward("id", te_i, dmu + a_id * dmu_kl_i, dlv + a_id * dlv_kl_i, grads)
    dz_e = model.decode_backward("exp", td_e, d_gexp_total.astype(dt), grads)
    dmu, dlv = through_reparam(dz_e, eps_e, lv_e)
    model.encode_backward("exp", te_e, dmu + a_exp * dmu_kl_e, dlv + a_exp * dlv_kl_e, grads)
    return value, comps, grads


def fusion_loss(model: Model, G, rng, need_grad=True, sample=True):
    """L_rec alone with the branches frozen; gradients only reach the fusion parameters."""
    outs = []
    for branch in ("id", "exp"):
        mu, lv, _ = model.encode(branch, G)
        z, _ = _sample(rng, mu, lv, sample)
        outs.append(model.decode(branch, z)[0])
    fused, tf = model.fuse(*outs)
    value, d_fused = _l1(fused, G)
    if not np.isfinite(value):
        raise NonFiniteLoss("non-finite loss components: L_rec")
    grads = {}
    if need_grad:
        model.fuse_backward(tf, d_fused.astype(model.dtype), grads)
    return value, grads
