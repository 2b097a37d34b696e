"""Train on the synthetic corpus and report held-out decomposition, transfer and bilinear numbers.

    python scripts/train_eval.py --config configs/acceptance.json --out runs/base
    python scripts/train_eval.py --config configs/acceptance.json --set arch.latent_id=25 arch.latent_exp=10
"""
import argparse
import json
import logging
import time
from pathlib import Path

from facedr.bilinear import build_core, clip_ranks
from facedr.deform import ReferenceFrame
from facedr.evaluation import (bilinear_fits, bilinear_heldout_avd, bilinear_transfer_fn, decomposition_errors,
                               disentangle_ratio, network_heldout_avd, network_transfer, transfer_scores)
from facedr.mesh import normalized_laplacian, scaled_laplacian
from facedr.network import ArchConfig, Model
from facedr.synth import CorpusSpec, generate, make_triplets
from facedr.training import TrainConfig, save_model, train


def apply_overrides(cfg, items):
    for item in items or []:
        key, value = item.split("=", 1)
        group, name = key.split(".", 1)
        cfg[group][name] = json.loads(value)
    return cfg


def run_experiment(cfg, out=None, with_bilinear=True):
    corpus = generate(CorpusSpec(**cfg["corpus"]))
    ref = ReferenceFrame(corpus.reference)
    Lt = scaled_laplacian(normalized_laplacian(corpus.reference))
    triplets = make_triplets(corpus, ref, corpus.train_ids)
    arch = ArchConfig(n=corpus.reference.n, **cfg["arch"])
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = train(TrainConfig(**cfg["train"]), triplets, Lt, arch=arch,
                log_path=(Path(out) / "train_log.csv") if out else None)
    seconds = time.perf_counter() - t0
    model = res.model
    if out:
        save_model(model, out)

    untrained = Model.create(model.arch, Lt, model.mean, model.std, model.reference_id,
                             seed=cfg["train"].get("seed", 0), dtype=model.dtype)
    e_id, e_exp, parts = decomposition_errors(model, corpus, ref)
    u_id, u_exp, _ = decomposition_errors(untrained, corpus, ref)
    ours, base = transfer_scores(network_transfer(model, ref), corpus)
    report = {
        "train_minutes": seconds / 60,
        "L_total_first": res.history[0]["L_total"],
        "L_total_last": res.history[-1]["L_total"],
        "E_id": e_id, "E_id_untrained": u_id,
        "E_exp": e_exp, "E_exp_untrained": u_exp,
        "disentangle_ratio": disentangle_ratio(model, corpus, ref),
        "transfer_wins": int((ours < base).sum()), "transfer_pairs": len(ours),
        "transfer_mean": float(ours.mean()), "neutral_baseline_mean": float(base.mean()),
        "heldout_avd": network_heldout_avd(parts, corpus),
    }
    if with_bilinear:
        grid = [corpus.meshes[i] for i in corpus.train_ids]
        core = build_core(grid, *clip_ranks(len(grid), len(grid[0])))
        report["bilinear_heldout_avd"] = bilinear_heldout_avd(core, bilinear_fits(core, corpus), corpus)
        b_ours, _ = transfer_scores(bilinear_transfer_fn(core), corpus)
        report["bilinear_transfer_wins"] = int((b_ours < base).sum())
        report["bilinear_transfer_mean"] = float(b_ours.mean())
    if out:
        Path(out, "metrics.json").write_text(json.dumps({"config": cfg, **report}, indent=2) + "\n")
    return report


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/acceptance.json")
    ap.add_argument("--set", nargs="*", help="group.key=json overrides, e.g. train.learning_rate=1e-4")
    ap.add_argument("--out")
    ap.add_argument("--no-bilinear", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = apply_overrides(json.loads(Path(args.config).read_text()), args.set)
    report = run_experiment(cfg, args.out, not args.no_bilinear)
    for k, v in report.items():
        print(f"{k:24s} {v:.4f}" if isinstance(v, float) else f"{k:24s} {v}")


if __name__ == "__main__":
    main()
