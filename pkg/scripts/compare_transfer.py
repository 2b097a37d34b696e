"""Per-pair expression transfer errors: trained network vs bilinear core vs the target's neutral face.

    python scripts/compare_transfer.py --model runs/base --csv runs/base/transfer.csv
"""
import argparse
import csv
import json
from pathlib import Path

import numpy as np

from facedr.bilinear import build_core, clip_ranks
from facedr.deform import ReferenceFrame
from facedr.evaluation import bilinear_transfer_fn, network_transfer, transfer_pairs, transfer_scores
from facedr.synth import CorpusSpec, generate
from facedr.training import load_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", required=True, help="model directory written by train_eval.py")
    ap.add_argument("--config", help="corpus config; defaults to the run's metrics.json, then configs/acceptance.json")
    ap.add_argument("--k-id", type=int, default=50)
    ap.add_argument("--k-exp", type=int, default=25)
    ap.add_argument("--csv")
    args = ap.parse_args()

    run_metrics = Path(args.model) / "metrics.json"
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
    elif run_metrics.exists():
        cfg = json.loads(run_metrics.read_text())["config"]
    else:
        cfg = json.loads(Path("configs/acceptance.json").read_text())
    corpus = generate(CorpusSpec(**cfg["corpus"]))
    ref = ReferenceFrame(corpus.reference)
    model = load_model(args.model)
    grid = [corpus.meshes[i] for i in corpus.train_ids]
    k = clip_ranks(len(grid), len(grid[0]), args.k_id, args.k_exp)
    core = build_core(grid, *k)

    net, base = transfer_scores(network_transfer(model, ref), corpus)
    bil, _ = transfer_scores(bilinear_transfer_fn(core), corpus)
    print(f"{len(net)} pairs, bilinear ranks {k}")
    for name, v in (("network", net), ("bilinear", bil), ("neutral", base)):
        print(f"{name:9s} mean {v.mean():.3f}  median {np.median(v):.3f}  beats neutral {int((v < base).sum())}")
    if args.csv:
        pairs = transfer_pairs(corpus)
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair", "target_identity", "network", "bilinear", "neutral"])
            for j, (_, _, _, who) in enumerate(pairs):
                w.writerow([j, who, repr(float(net[j])), repr(float(bil[j])), repr(float(base[j]))])


if __name__ == "__main__":
    main()
