"""Held-out numbers for the latent sizes 25/10, 50/25 and 75/50.

    python scripts/latent_sweep.py --out runs/sweep
"""
import argparse
import copy
import json
import logging
from pathlib import Path

from train_eval import run_experiment

SIZES = [(25, 10), (50, 25), (75, 50)]
COLUMNS = ["E_id", "E_exp", "heldout_avd", "transfer_mean", "disentangle_ratio", "train_minutes"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/acceptance.json")
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    base = json.loads(Path(args.config).read_text())
    rows = []
    for k_id, k_exp in SIZES:
        cfg = copy.deepcopy(base)
        cfg["arch"].update(latent_id=k_id, latent_exp=k_exp)
        report = run_experiment(cfg, Path(args.out) / f"{k_id}_{k_exp}", with_bilinear=False)
        rows.append((k_id, k_exp, report))
        print(f"{k_id}/{k_exp} done", flush=True)
    print("latent   " + " ".join(f"{c:>16s}" for c in COLUMNS))
    for k_id, k_exp, r in rows:
        print(f"{k_id:>3d}/{k_exp:<4d} " + " ".join(f"{r[c]:16.4f}" for c in COLUMNS))


if __name__ == "__main__":
    main()
