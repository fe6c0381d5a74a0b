"""Command-line entry point.

Subcommands: train, eval, curve, anneal, probe, dump, compare, fmt-emb,
demo.  Every model-producing run writes a manifest (config hash, seed,
versions) into its run directory so it can be reproduced bit-exactly.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys

import numpy as np

from . import __version__
from .analysis import (
    ProbeConfig,
    bounds,
    probe,
    dump_tags,
    spearman_rho,
    tradeoff_curve,
    write_curve,
)
from .annealing import AnnealConfig, anneal, export_tree, leaf_purity
from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .data import align, read_conllu, read_embeddings
from .errors import ConfigError, DataError, NumericError, VibtagError
from .objective import VIBConfig, evaluate, history_to_jsonl, train
from .parser import paired_permutation_test
from .synthetic import SyntheticConfig, SyntheticGrammar

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_data_args(p, test=True):
    p.add_argument("--demo", action="store_true",
                   help="use the bundled synthetic grammar")
    p.add_argument("--demo-train", type=int, default=2000)
    p.add_argument("--demo-test", type=int, default=500)
    p.add_argument("--demo-classes", type=int, default=8)
    p.add_argument("--demo-seed", type=int, default=7)
    p.add_argument("--conllu", help="training CoNLL-U file")
    p.add_argument("--emb", help="training EMB1 embedding file")
    if test:
        p.add_argument("--test-conllu", help="test CoNLL-U file")
        p.add_argument("--test-emb", help="test EMB1 embedding file")
    p.add_argument("--max-len", type=int, default=30)
    p.add_argument("--token-layer", type=int, default=1)


def _add_config_args(p):
    p.add_argument("--config", help="TOML file with VIBConfig keys")
    p.add_argument("--mode", choices=("continuous", "discrete"))
    p.add_argument("--tag-dim", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--baseline",
                   choices=("mlp", "identity", "pca", "gold_pos"))
    p.add_argument("--select", choices=("best", "final"))
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--minibatch", type=int)
    p.add_argument("--rnn-hidden", type=int)


def build_parser():
    top = _Parser(prog="vibtag", description=__doc__)
    top.add_argument("--json-errors", action="store_true",
                     help="report errors as JSON on stderr")
    top.add_argument("--threads", type=int,
                     default=int(os.environ.get("VIBTAG_THREADS", "0")),
                     help="cap worker threads (0 = library default)")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model, write checkpoint+history")
    _add_data_args(p)
    _add_config_args(p)
    p.add_argument("--run-dir", required=True)

    p = sub.add_parser("eval", help="LAS/UAS and MI bounds for a checkpoint")
    _add_data_args(p, test=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="write JSON here instead of stdout")

    p = sub.add_parser("curve", help="train a beta grid, emit tradeoff TSV")
    _add_data_args(p)
    _add_config_args(p)
    p.add_argument("--betas", default="1e-6,1e-5,1e-4,1e-3,1e-2,1e-1,1,10",
                   help="comma-separated beta grid")
    p.add_argument("--run-dir", required=True)

    p = sub.add_parser("anneal", help="deterministic-annealing hierarchy")
    _add_data_args(p, test=False)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--beta-start", type=float, default=32.0)
    p.add_argument("--beta-min", type=float, default=0.05)
    p.add_argument("--alpha", type=float, default=4.0)
    p.add_argument("--eps-scale", type=float, default=0.05)
    p.add_argument("--merge-threshold", type=float, default=0.01)
    p.add_argument("--max-clusters", type=int, default=8)
    p.add_argument("--inner-epochs", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("probe", help="transfer-probe an auxiliary label")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--label-column", default="pos",
                   choices=("pos", "deprel"))
    p.add_argument("--probe-epochs", type=int, default=30)
    p.add_argument("--probe-seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("dump", help="dump tag posteriors as TSV")
    _add_data_args(p, test=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare",
                       help="paired permutation test of two checkpoints")
    _add_data_args(p, test=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--checkpoint-b", required=True)
    p.add_argument("--iterations", type=int, default=2 ** 20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("fmt-emb", help="validate/describe an EMB1 file")
    p.add_argument("--emb", required=True)
    p.add_argument("--out")

    p = sub.add_parser("demo",
                       help="write bundled synthetic data as CoNLL-U + EMB1")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--sentences", type=int, default=200)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--seed", type=int, default=7)
    return top


def load_datasets(args, test=True):
    """Train (and optionally test) Dataset from --demo or file flags."""
    if args.demo:
        grammar = SyntheticGrammar(SyntheticConfig(n_classes=args.demo_classes))
        train_set = grammar.dataset(args.demo_train, seed=args.demo_seed,
                                    token_layer=args.token_layer)
        if not test:
            return train_set, None
        test_set = grammar.dataset(args.demo_test, seed=args.demo_seed + 1,
                                   token_layer=args.token_layer)
        return train_set, test_set
    if not args.conllu or not args.emb:
        raise ConfigError("need --demo, or both --conllu and --emb")

    def read_pair(conllu, emb):
        sents = read_conllu(conllu)
        embs = read_embeddings(emb)
        return align(sents, embs, max_len=args.max_len,
                     token_layer=args.token_layer)

    train_set = read_pair(args.conllu, args.emb)
    if not test:
        return train_set, None
    if not getattr(args, "test_conllu", None):
        raise ConfigError("need --test-conllu and --test-emb")
    return train_set, read_pair(args.test_conllu, args.test_emb)


_CONFIG_FLAGS = ("mode", "tag_dim", "beta", "gamma", "epochs", "seed",
                 "baseline", "learning_rate", "samples", "minibatch",
                 "rnn_hidden", "select")


def build_vib_config(args) -> VIBConfig:
    """TOML config file merged with explicit flag overrides."""
    fields = set(VIBConfig.__dataclass_fields__)
    merged = {}
    if getattr(args, "config", None):
        with open(args.config, "rb") as f:
            doc = tomllib.load(f)
        unknown = set(doc) - fields
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(doc)
    for key in _CONFIG_FLAGS:
        v = getattr(args, key, None)
        if v is not None:
            merged[key] = v
    merged.setdefault("token_layer", args.token_layer)
    try:
        return VIBConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def write_manifest(run_dir, config_dict, seed, extra=None):
    canonical = json.dumps(config_dict, sort_keys=True)
    doc = {
        "config": config_dict,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": seed,
        "versions": {
            "vibtag": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }
    if extra:
        doc.update(extra)
    with open(os.path.join(run_dir, "manifest.json"), "w",
              encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
    return doc


def _emit(doc, out=None):
    text = json.dumps(doc, indent=2)
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    else:
        print(text)


def cmd_train(args):
    train_set, test_set = load_datasets(args)
    cfg = build_vib_config(args)
    os.makedirs(args.run_dir, exist_ok=True)
    write_manifest(args.run_dir, cfg.to_dict(), cfg.seed,
                   extra={"command": "train"})
    params, history = train(train_set, test_set, cfg,
                            log=lambda r: print(json.dumps(r)))
    save_checkpoint(params, os.path.join(args.run_dir, "checkpoint.npz"))
    history_to_jsonl(history, os.path.join(args.run_dir, "history.jsonl"))
    return 0


def cmd_eval(args):
    params = load_checkpoint(args.checkpoint)
    data, _ = load_datasets(args, test=False)
    scores = evaluate(params, data, seed=params.cfg.seed)
    mi = bounds(data, params, samples=params.cfg.samples,
                seed=params.cfg.seed)
    _emit({
        "uas": scores["uas"],
        "las": scores["las"],
        "bounds": mi.to_dict(),
    }, args.out)
    return 0


def cmd_curve(args):
    train_set, test_set = load_datasets(args)
    cfg = build_vib_config(args)
    try:
        betas = [float(b) for b in args.betas.split(",") if b.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --betas: {exc}") from exc
    if not betas:
        raise ConfigError("--betas must list at least one value")
    os.makedirs(args.run_dir, exist_ok=True)
    write_manifest(args.run_dir, {**cfg.to_dict(), "betas": betas}, cfg.seed,
                   extra={"command": "curve"})
    points = tradeoff_curve(train_set, test_set, cfg, betas,
                            log=lambda p: print(json.dumps(p.to_dict())))
    write_curve(points,
                os.path.join(args.run_dir, "curve.tsv"),
                os.path.join(args.run_dir, "curve.json"))
    ok = [p for p in points if p.test_bounds is not None]
    if len(ok) >= 2:
        rho = spearman_rho([p.beta for p in ok],
                           [p.test_bounds.ixt_upper for p in ok])
        print(json.dumps({"spearman_beta_vs_ixt": rho}))
    return 0


def cmd_anneal(args):
    data, _ = load_datasets(args, test=False)
    cfg = AnnealConfig(
        beta_start=args.beta_start, beta_min=args.beta_min,
        alpha=args.alpha, eps_scale=args.eps_scale,
        merge_threshold=args.merge_threshold,
        max_clusters=args.max_clusters, inner_epochs=args.inner_epochs,
        seed=args.seed,
    )
    os.makedirs(args.run_dir, exist_ok=True)
    write_manifest(args.run_dir, vars(cfg).copy() if hasattr(cfg, "__dict__")
                   else {}, cfg.seed, extra={"command": "anneal"})
    tree = anneal(data, cfg)
    export_tree(tree, os.path.join(args.run_dir, "hierarchy.json"))
    with open(os.path.join(args.run_dir, "anneal_history.jsonl"), "w",
              encoding="utf-8") as f:
        for rec in tree.beta_history:
            f.write(json.dumps(rec) + "\n")
    print(json.dumps({
        "n_leaves": tree.n_leaves(),
        "mutual_information": tree.mutual_information(),
        "purity": {str(k): v for k, v in leaf_purity(tree, data).items()},
        "budget_exhausted": tree.budget_exhausted,
    }))
    return 0


def cmd_probe(args):
    params = load_checkpoint(args.checkpoint)
    train_set, test_set = load_datasets(args)
    cfg = ProbeConfig(epochs=args.probe_epochs, seed=args.probe_seed)
    result = probe(train_set, test_set, params,
                   label_column=args.label_column, probe_cfg=cfg)
    _emit(result.to_dict(), args.out)
    return 0


def cmd_dump(args):
    params = load_checkpoint(args.checkpoint)
    data, _ = load_datasets(args, test=False)
    dump_tags(data, params, args.out)
    print(json.dumps({"written": args.out, "sentences": len(data)}))
    return 0


def cmd_compare(args):
    a = load_checkpoint(args.checkpoint)
    b = load_checkpoint(args.checkpoint_b)
    data, _ = load_datasets(args, test=False)
    ev_a = evaluate(a, data, seed=args.seed)
    ev_b = evaluate(b, data, seed=args.seed)
    p = paired_permutation_test(
        ev_a["per_sentence_las"], ev_b["per_sentence_las"],
        iterations=args.iterations, seed=args.seed,
    )
    _emit({
        "las_a": ev_a["las"],
        "las_b": ev_b["las"],
        "p_value": p,
        "iterations": args.iterations,
    }, args.out)
    return 0


def cmd_fmt_emb(args):
    embs = list(read_embeddings(args.emb).values())
    lens = [e.n_tokens for e in embs]
    _emit({
        "valid": True,
        "n_sentences": len(embs),
        "dim": embs[0].dim if embs else 0,
        "n_layers": embs[0].n_layers if embs else 0,
        "tokens_total": int(sum(lens)),
        "max_tokens": int(max(lens)) if lens else 0,
    }, args.out)
    return 0


def cmd_demo(args):
    from .data import write_conllu, write_embeddings
    grammar = SyntheticGrammar(SyntheticConfig(n_classes=args.classes))
    data = grammar.dataset(args.sentences, seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    conllu = os.path.join(args.out_dir, "demo.conllu")
    emb = os.path.join(args.out_dir, "demo.emb")
    write_conllu(conllu, [s for s, _ in data.pairs])
    write_embeddings(emb, [e for _, e in data.pairs])
    print(json.dumps({"conllu": conllu, "emb": emb,
                      "sentences": len(data)}))
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "curve": cmd_curve,
    "anneal": cmd_anneal,
    "probe": cmd_probe,
    "dump": cmd_dump,
    "compare": cmd_compare,
    "fmt-emb": cmd_fmt_emb,
    "demo": cmd_demo,
}


def _set_threads(n):
    if n and n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _report(exc, code, json_errors):
    if json_errors:
        print(json.dumps({
            "error": type(exc).__name__,
            "message": str(exc),
            "exit_code": code,
        }), file=sys.stderr)
    else:
        print(f"vibtag: error: {exc}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    parser = build_parser()
    json_errors = "--json-errors" in (argv or sys.argv[1:])
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _report(exc, 1, json_errors)
    _set_threads(args.threads)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        return _report(exc, 1, args.json_errors)
    except DataError as exc:
        return _report(exc, 2, args.json_errors)
    except (NumericError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return _report(exc, 3, args.json_errors)
    except OSError as exc:
        return _report(exc, 2, args.json_errors)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
