"""Command-line entry point: ``facedr <command> [options]``.

Every command takes ``--config file.json`` whose keys are the command's option
names (underscored); flags given on the command line win over the file.  The
resolved settings are written next to the outputs.
Exit status: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .apps import decompose, interpolate_latent, transfer_expression
from .augment import augment_corpus, write_augmented
from .bilinear import (SingularSubproblem, als_fit, bilinear_decompose, bilinear_reconstruct,
                       bilinear_transfer, build_core, clip_ranks, load_core, save_core)
from .deform import FeatureMismatch, ReferenceFrame, read_drf, write_drf
from .layers import ShapeError
from .mesh import MeshError, ObjParseError, load_obj, normalized_laplacian, save_obj, scaled_laplacian
from .metrics import MetricReport, decomposition_std, e_avd, e_sed, write_reports
from .network import ArchConfig
from .synth import CorpusSpec, generate, load_corpus, make_triplets
from .training import TrainConfig, TrainingDiverged, load_model, save_model, train

log = logging.getLogger("facedr")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# name -> (type, default, help); a default of None means required
COMMON = {"seed": (int, 0, "random seed")}

CORPUS_KEYS = {f.name: (type(f.default), f.default, "corpus generator setting") for f in fields(CorpusSpec)}
TRAIN_KEYS = {f.name: (type(f.default) if f.name != "stages" else list, f.default, "training setting")
              for f in fields(TrainConfig)}
ARCH_KEYS = {
    "latent_id": (int, 50, "identity latent size"),
    "latent_exp": (int, 25, "expression latent size"),
    "channels": (int, 32, "graph-conv channels"),
    "hidden": (int, 128, "dense bottleneck width"),
    "order": (int, 2, "Chebyshev order"),
}

COMMANDS = {
    "synth": ("generate the synthetic corpus",
              {**CORPUS_KEYS, "out": (str, None, "output directory")}),
    "dr-encode": ("mesh -> DRF feature file",
                  {"ref": (str, None, "reference OBJ"), "in": (str, None, "input OBJ"),
                   "out": (str, None, "output .drf")}),
    "dr-decode": ("DRF feature file -> mesh",
                  {"ref": (str, None, "reference OBJ"), "in": (str, None, "input .drf"),
                   "out": (str, None, "output OBJ")}),
    "augment": ("mix identity features into new ones",
                {"in": (list, None, "input .drf files or directories"), "count": (int, 2000, "outputs"),
                 "m": (int, 5, "sources per output"), "seed": (int, 0, "random seed"),
                 "out": (str, None, "output directory")}),
    "train": ("three-stage training on a corpus directory",
              {"corpus": (str, None, "corpus directory from synth"), "out": (str, None, "model directory"),
               **TRAIN_KEYS, **ARCH_KEYS}),
    "decompose": ("identity / expression / reconstruction meshes for one input",
                  {"model": (str, None, "model directory"), "ref": (str, None, "reference OBJ"),
                   "in": (str, None, "input OBJ"), "out": (str, None, "output directory")}),
    "transfer": ("put the source's expression on the target",
                 {"model": (str, None, "model directory"), "ref": (str, None, "reference OBJ"),
                  "source": (str, None, "source OBJ"), "target": (str, None, "target OBJ"),
                  "out": (str, None, "output OBJ")}),
    "interp": ("latent grid between two meshes",
               {"model": (str, None, "model directory"), "ref": (str, None, "reference OBJ"),
                "start": (str, None, "first OBJ"), "end": (str, None, "second OBJ"),
                "stride": (float, 0.25, "step along each latent axis"),
                "out": (str, None, "output directory")}),
    "bilinear-build": ("build the bilinear core from a corpus",
                       {"corpus": (str, None, "corpus directory"), "k_id": (int, 50, "identity rank"),
                        "k_exp": (int, 25, "expression rank"), "out": (str, None, "core directory")}),
    "bilinear-fit": ("fit bilinear coefficients to a mesh",
                     {"model": (str, None, "core directory"), "in": (str, None, "input OBJ"),
                      "max_iter": (int, 100, "ALS sweeps"), "tol": (float, 1e-6, "relative stop change"),
                      "out": (str, None, "output directory")}),
    "bilinear-transfer": ("bilinear expression transfer",
                          {"model": (str, None, "core directory"), "source": (str, None, "source OBJ"),
                           "target": (str, None, "target OBJ"), "max_iter": (int, 100, "ALS sweeps"),
                           "tol": (float, 1e-6, "relative stop change"), "out": (str, None, "output OBJ")}),
    "eval": ("metrics on the held-out identities, as CSV",
             {"model": (str, None, "network model or bilinear core directory"),
              "corpus": (str, None, "corpus directory"), "out": (str, None, "output CSV")}),
}


def _flag(name):
    return "--" + name.replace("_", "-")


def _parse_list(text):
    return [x for x in text.split(",") if x]


def build_parser() -> _Parser:
    parser = _Parser(prog="facedr", description="disentangled face shape toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for cmd, (desc, keys) in COMMANDS.items():
        p = sub.add_parser(cmd, help=desc, description=desc)
        p.add_argument("--config", help="JSON file with option values (unknown keys rejected)")
        for name, (typ, default, text) in keys.items():
            shown = "required" if default is None else f"default {default!r}"
            if typ is list:
                if name == "in":
                    p.add_argument(_flag(name), dest=name, nargs="+", default=None, help=f"{text} ({shown})")
                else:
                    p.add_argument(_flag(name), dest=name, type=lambda s: [int(x) for x in _parse_list(s)],
                                   default=None, help=f"{text}, comma separated ({shown})")
            elif typ is bool:
                p.add_argument(_flag(name), dest=name, type=lambda s: s.lower() in ("1", "true", "yes"),
                               default=None, help=f"{text} ({shown})")
            else:
                p.add_argument(_flag(name), dest=name, type=typ, default=None, help=f"{text} ({shown})")
    return parser


def resolve(cmd: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    keys = COMMANDS[cmd][1]
    cfg = {k: v[1] for k, v in keys.items()}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise DataError(f"{args.config}: no such config file") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.config}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(data, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
        unknown = sorted(set(data) - set(keys))
        if unknown:
            raise UsageError(f"{args.config}: unknown config keys: {', '.join(unknown)}")
        cfg.update(data)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    missing = [_flag(k) for k, v in cfg.items() if v is None]
    if missing:
        raise UsageError(f"{cmd}: missing required option(s): {' '.join(missing)}")
    return cfg


def _echo_config(cmd, cfg, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"command": cmd, **cfg}, indent=2, sort_keys=True) + "\n")


def _beside(out: Path) -> Path:
    return out.with_name(out.name + ".config.json")


def _mesh(path):
    try:
        return load_obj(path)
    except FileNotFoundError as exc:
        raise DataError(f"{path}: no such file") from exc


def _model(path):
    p = Path(path)
    manifest = p / "model.json" if p.is_dir() else p
    if not manifest.exists():
        raise DataError(f"{manifest}: no such model file")
    return load_model(p)


# -- commands ------------------------------------------------------------------------

def cmd_synth(cfg):
    out = Path(cfg["out"])
    spec = CorpusSpec(**{k: cfg[k] for k in CORPUS_KEYS})
    corpus = generate(spec)
    corpus.save(out)
    _echo_config("synth", cfg, out / "config.json")
    print(f"wrote {spec.identities}x{spec.expressions} meshes to {out}")


def cmd_dr_encode(cfg):
    ref = ReferenceFrame(_mesh(cfg["ref"]))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_drf(ref.encode(_mesh(cfg["in"])), out)
    _echo_config("dr-encode", cfg, _beside(out))


def cmd_dr_decode(cfg):
    ref = ReferenceFrame(_mesh(cfg["ref"]))
    try:
        feature = read_drf(cfg["in"])
    except FileNotFoundError as exc:
        raise DataError(f"{cfg['in']}: no such file") from exc
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_obj(ref.decode(feature), out)
    _echo_config("dr-decode", cfg, _beside(out))


def _drf_inputs(items):
    files = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            files += sorted(p.glob("*.drf"))
        elif p.exists():
            files.append(p)
        else:
            raise DataError(f"{p}: no such file")
    return files


def cmd_augment(cfg):
    files = _drf_inputs(cfg["in"])
    feats = [read_drf(f) for f in files]
    out = Path(cfg["out"])
    aug = augment_corpus(feats, cfg["count"], cfg["m"], np.random.default_rng(cfg["seed"]))
    write_augmented(aug, out, seed=cfg["seed"], m=cfg["m"], source_files=[str(f) for f in files])
    _echo_config("augment", cfg, out / "config.json")
    print(f"wrote {len(aug)} features to {out}")


def cmd_train(cfg):
    corpus = load_corpus(cfg["corpus"])
    out = Path(cfg["out"])
    ref = ReferenceFrame(corpus.reference)
    triplets = make_triplets(corpus, ref, corpus.train_ids)
    tc = TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS})
    arch = ArchConfig(n=corpus.reference.n, **{k: cfg[k] for k in ARCH_KEYS})
    Lt = scaled_laplacian(normalized_laplacian(corpus.reference))
    out.mkdir(parents=True, exist_ok=True)
    result = train(tc, triplets, Lt, ref.reference_id, arch=arch, log_path=out / "train_log.csv")
    save_model(result.model, out)
    _echo_config("train", cfg, out / "config.json")
    first, last = result.history[0]["L_total"], result.history[-1]["L_total"]
    print(f"L_total {first:.5f} -> {last:.5f}; model in {out}")


def cmd_decompose(cfg):
    model, ref = _model(cfg["model"]), ReferenceFrame(_mesh(cfg["ref"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    ident, expr, rec = decompose(model, ref, _mesh(cfg["in"]))
    save_obj(ident, out / "identity.obj")
    save_obj(expr, out / "expression.obj")
    save_obj(rec, out / "reconstruction.obj")
    _echo_config("decompose", cfg, out / "config.json")


def cmd_transfer(cfg):
    model, ref = _model(cfg["model"]), ReferenceFrame(_mesh(cfg["ref"]))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_obj(transfer_expression(model, ref, _mesh(cfg["source"]), _mesh(cfg["target"])), out)
    _echo_config("transfer", cfg, _beside(out))


def cmd_interp(cfg):
    model, ref = _model(cfg["model"]), ReferenceFrame(_mesh(cfg["ref"]))
    out = Path(cfg["out"])
    try:
        grid = interpolate_latent(model, ref, _mesh(cfg["start"]), _mesh(cfg["end"]), cfg["stride"])
    except ValueError as exc:
        if "stride" in str(exc):
            raise UsageError(str(exc)) from exc
        raise
    out.mkdir(parents=True, exist_ok=True)
    for a, b, mesh in grid:
        save_obj(mesh, out / f"interp_id{a:.4f}_exp{b:.4f}.obj")
    _echo_config("interp", cfg, out / "config.json")
    print(f"wrote {len(grid)} meshes to {out}")


def _grid(corpus):
    return [corpus.meshes[i] for i in corpus.train_ids]


def cmd_bilinear_build(cfg):
    corpus = load_corpus(cfg["corpus"])
    k = clip_ranks(len(corpus.train_ids), corpus.spec.expressions, cfg["k_id"], cfg["k_exp"])
    core = build_core(_grid(corpus), *k)
    out = Path(cfg["out"])
    save_core(core, out)
    _echo_config("bilinear-build", cfg, out / "config.json")
    print(f"core ranks ({core.k_id}, {core.k_exp}) in {out}")


def _core(path):
    p = Path(path)
    if not (p / "model.json" if p.is_dir() else p).exists():
        raise DataError(f"{p}: no such core file")
    return load_core(p)


def cmd_bilinear_fit(cfg):
    core = _core(cfg["model"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    fit = als_fit(core, _mesh(cfg["in"]), max_iter=cfg["max_iter"], tol=cfg["tol"])
    save_obj(bilinear_reconstruct(core, fit.alpha_id, fit.alpha_exp), out / "reconstruction.obj")
    (out / "fit.json").write_text(json.dumps({
        "alpha_id": fit.alpha_id.tolist(), "alpha_exp": fit.alpha_exp.tolist(),
        "residual": fit.residual, "iterations": fit.iterations, "history": fit.history}, indent=2) + "\n")
    _echo_config("bilinear-fit", cfg, out / "config.json")
    print(f"residual {fit.residual:.6f} mm after {fit.iterations} sweeps")


def cmd_bilinear_transfer(cfg):
    core = _core(cfg["model"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    mesh = bilinear_transfer(core, _mesh(cfg["source"]), _mesh(cfg["target"]),
                             max_iter=cfg["max_iter"], tol=cfg["tol"])
    save_obj(mesh, out)
    _echo_config("bilinear-transfer", cfg, _beside(out))


def evaluate_corpus(corpus, ref, split_fn):
    """Reports for held-out meshes; split_fn(mesh) -> (identity mesh, expression mesh, reconstruction)."""
    reports = {k: MetricReport(k) for k in ("E_avd", "E_sed", "E_id", "E_exp")}
    E = corpus.spec.expressions
    parts = {}
    for i in corpus.test_ids:
        for e in range(E):
            m = corpus.mesh(i, e)
            parts[i, e] = split_fn(m)
            rec = parts[i, e][2]
            reports["E_avd"].add(f"{i}_{e}", e_avd(m, rec))
            reports["E_sed"].add(f"{i}_{e}", e_sed(m, rec))
    for i in corpus.test_ids:
        reports["E_id"].add(f"id{i}", decomposition_std([parts[i, e][0] for e in range(E)]))
    if len(corpus.test_ids) >= 2:
        for e in range(E):
            reports["E_exp"].add(f"exp{e}", decomposition_std([parts[i, e][1] for i in corpus.test_ids]))
    return [r for r in reports.values() if r.values]


def cmd_eval(cfg):
    corpus = load_corpus(cfg["corpus"])
    ref = ReferenceFrame(corpus.reference)
    p = Path(cfg["model"])
    manifest = p / "model.json" if p.is_dir() else p
    if not manifest.exists():
        raise DataError(f"{manifest}: no such model file")
    kind = json.loads(manifest.read_text())["config"].get("kind")
    if kind == "bilinear_core":
        core = load_core(p)

        def split(m):
            ident, expr, fit = bilinear_decompose(core, m)
            return ident, expr, bilinear_reconstruct(core, fit.alpha_id, fit.alpha_exp)
    else:
        model = load_model(p)

        def split(m):
            return decompose(model, ref, m)
    reports = evaluate_corpus(corpus, ref, split)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_reports(reports, out)
    _echo_config("eval", cfg, _beside(out))
    for r in reports:
        print(f"{r.name}: mean {r.mean!r} median {r.median!r}")


HANDLERS = {
    "synth": cmd_synth, "dr-encode": cmd_dr_encode, "dr-decode": cmd_dr_decode, "augment": cmd_augment,
    "train": cmd_train, "decompose": cmd_decompose, "transfer": cmd_transfer, "interp": cmd_interp,
    "bilinear-build": cmd_bilinear_build, "bilinear-fit": cmd_bilinear_fit,
    "bilinear-transfer": cmd_bilinear_transfer, "eval": cmd_eval,
}

DATA_ERRORS = (DataError, ObjParseError, MeshError, FeatureMismatch, ShapeError, SingularSubproblem,
               TrainingDiverged, FileNotFoundError, json.JSONDecodeError, KeyError, ValueError, OSError)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("facedr: a command is required (see --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        cfg = resolve(args.command, args)
        HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TypeError as exc:
        # a config value of the wrong type
        print(f"error: bad option value: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
