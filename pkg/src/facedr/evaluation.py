"""Held-out measurements shared by the acceptance tests and the experiment scripts."""
import numpy as np

from .apps import decompose, transfer_expression
from .bilinear import als_fit, bilinear_reconstruct, bilinear_transfer
from .metrics import decomposition_std, e_avd


def decomposition_errors(model, corpus, ref):
    """(E_id, E_exp, parts) on the held-out identities; parts[i, e] = (identity, expression, reconstruction)."""
    E = corpus.spec.expressions
    parts = {(i, e): decompose(model, ref, corpus.mesh(i, e)) for i in corpus.test_ids for e in range(E)}
    e_id = np.mean([decomposition_std([parts[i, e][0] for e in range(E)]) for i in corpus.test_ids])
    e_exp = np.mean([decomposition_std([parts[i, e][1] for i in corpus.test_ids]) for e in range(E)])
    return float(e_id), float(e_exp), parts


def disentangle_ratio(model, corpus, ref) -> float:
    """Mean L1 of D_exp(E_exp(identity output)) to the rest feature, over that of the raw expression features."""
    rest = ref.rest_values
    num, den = [], []
    for i in corpus.test_ids:
        for e in range(corpus.spec.expressions):
            z_id, _ = model.latent_codes(ref.encode(corpus.mesh(i, e)))
            _, z_exp = model.latent_codes(model.decode_identity(z_id))
            num.append(np.mean(np.abs(model.decode_expression(z_exp).values - rest)))
            den.append(np.mean(np.abs(ref.encode(corpus.expression_meshes[e]).values - rest)))
    return float(np.mean(num) / np.mean(den))


def transfer_pairs(corpus):
    """(source, target, ground truth, target identity) over the held-out identities.

    Each held-out identity lends every non-neutral expression to each other one, both onto the
    other's neutral face and onto a different expression of it.
    """
    E = corpus.spec.expressions
    out = []
    for src in corpus.test_ids:
        for dst in corpus.test_ids:
            if src == dst:
                continue
            for e in range(1, E):
                for e_target in (0, e % (E - 1) + 1):
                    out.append((corpus.mesh(src, e), corpus.mesh(dst, e_target), corpus.mesh(dst, e), dst))
    return out


def transfer_scores(transfer, corpus):
    """E_avd of transfer(source, target) and of the target-neutral baseline, per pair."""
    ours, base = [], []
    for src, dst, truth, who in transfer_pairs(corpus):
        ours.append(e_avd(transfer(src, dst), truth))
        base.append(e_avd(corpus.mesh(who, 0), truth))
    return np.array(ours), np.array(base)


def network_transfer(model, ref):
    return lambda src, dst: transfer_expression(model, ref, src, dst)


def bilinear_transfer_fn(core):
    return lambda src, dst: bilinear_transfer(core, src, dst)


def bilinear_fits(core, corpus):
    return {(i, e): als_fit(core, corpus.mesh(i, e)) for i in corpus.test_ids for e in range(corpus.spec.expressions)}


def bilinear_heldout_avd(core, fits, corpus) -> float:
    return float(np.mean([e_avd(bilinear_reconstruct(core, f.alpha_id, f.alpha_exp), corpus.mesh(*k))
                          for k, f in fits.items()]))


def network_heldout_avd(parts, corpus) -> float:
    return float(np.mean([e_avd(p[2], corpus.mesh(*k)) for k, p in parts.items()]))
