"""Single command-line entry point.

Subcommands: manifest, synth, train, eval, gradcheck. Every run config key
is exposed as a flag (flags override the --config file). Exit codes:
0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import data, evaluation, training
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import SCHEMA, RunConfig, load_config_file, validate_choices
from .errors import DataError, NumericsError, UsageError
from .gradcheck import grad_check
from .model import ModelHyper, ProtoModel
from .pipeline import FeatureStore
from .rngs import rng_stream


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flag(key):
    return "--" + key.replace("_", "-")


def _add_config_flags(parser, skip=()):
    for key, (conv, default, help_text) in SCHEMA.items():
        if key in skip:
            continue
        parser.add_argument(
            _flag(key), dest=key, type=str, default=None, metavar="V",
            help=f"{help_text} (default: {default})",
        )


def _resolve_config(args):
    cfg = RunConfig.defaults()
    if getattr(args, "config", None):
        cfg = load_config_file(args.config, cfg)
    for key in SCHEMA:
        raw = getattr(args, key, None)
        if raw is not None:
            cfg.apply(key, raw)
    if getattr(args, "baseline_flag", False):
        cfg.baseline = True
    return validate_choices(cfg)


def _print_totals(manifest):
    for split in data.SPLITS:
        kw, sil = manifest.counts()[split]
        print(f"{split}: {kw} keyword + {sil} silence = {kw + sil}")


def cmd_manifest(args):
    manifest = data.build_manifest(args.root)
    noise = data.noise_bank_paths(args.root)
    if noise:
        manifest = data.add_silence(manifest, noise, rng_stream(args.seed, "silence"))
    else:
        print("note: no background-noise directory found; manifest has no silence class")
    # rebase entry paths onto the manifest file's own directory
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    rel_root = os.path.relpath(os.path.abspath(args.root), out_dir)
    entries = [
        data.ManifestEntry(
            os.path.normpath(os.path.join(rel_root, e.path)).replace(os.sep, "/"),
            e.keyword, e.split, e.is_silence, e.crop_offset,
        )
        for e in manifest.entries
    ]
    manifest = data.Manifest(entries, out_dir)
    manifest.save(args.out)
    _print_totals(manifest)
    return 0


def cmd_synth(args):
    manifest = data.synth_corpus(args.out, args.classes, args.samples, args.seed)
    print(f"wrote {args.out}/manifest.tsv")
    _print_totals(manifest)
    return 0


def _load_manifest(cfg):
    if not cfg.manifest:
        raise UsageError("no manifest given (set the manifest key or --manifest)")
    return data.Manifest.load(cfg.manifest)


def cmd_train(args):
    cfg = _resolve_config(args)
    manifest = _load_manifest(cfg)
    os.makedirs(args.out, exist_ok=True)
    history_path = os.path.join(args.out, "history.jsonl")
    ckpt_path = os.path.join(args.out, "model.ckpt")

    with open(history_path, "w", encoding="utf-8") as hist:
        def progress(record):
            line = json.dumps(record, sort_keys=True)
            hist.write(line + "\n")
            hist.flush()
            print(line)

        result = training.train(
            manifest, cfg.model_hyper(), cfg.train_config(), cfg.loss_config(), progress
        )
    save_checkpoint(ckpt_path, result.model, {
        "best_epoch": result.best_epoch,
        "best_val_accuracy": repr(result.best_val_accuracy),
        "seed": cfg.seed,
    })
    print(f"best epoch {result.best_epoch} "
          f"(val accuracy {result.best_val_accuracy:.4f}); checkpoint: {ckpt_path}")
    return 0


def cmd_eval(args):
    cfg = _resolve_config(args)
    model, meta = load_checkpoint(args.checkpoint)
    manifest = _load_manifest(cfg)
    rule = cfg.score
    if model.generator is None and rule in evaluation.DUMMY_ONLY_RULES:
        rule = "max_prob_complement"
        print(f"note: baseline checkpoint, scoring with {rule}")
    rfn_cfg = None
    if model.hyper.rfn:
        from .audio import RFNConfig

        rfn_cfg = RFNConfig(rho=model.hyper.rfn_rho)
    store = FeatureStore(manifest, rfn_cfg)
    report = evaluation.evaluate(
        model, store, args.split, cfg.eval_episode_config(), cfg.eval_episodes, rule, cfg.seed
    )
    os.makedirs(args.out, exist_ok=True)
    report.write(
        os.path.join(args.out, "eval_report.json"),
        os.path.join(args.out, "eval_episodes.csv"),
    )
    print(
        f"{args.split}: accuracy {100 * report.accuracy_mean:.2f} ({100 * report.accuracy_std:.2f}) "
        f"auroc {100 * report.auroc_mean:.2f} ({100 * report.auroc_std:.2f}) "
        f"over {report.episodes} episodes [{rule}]"
    )
    return 0


def cmd_gradcheck(args):
    cfg = _resolve_config(args)
    hyper = ModelHyper(
        channels=cfg.channels, dummy_hidden=cfg.dummy_hidden,
        dummy_count=cfg.dummy_count, baseline=cfg.baseline,
        tau_known=cfg.tau, gamma=cfg.gamma,
    )
    model = ProtoModel(hyper, seed=cfg.seed)
    ep = data.EpisodeConfig(cfg.n_way, cfg.n_shot, cfg.n_open, cfg.train_queries)
    b = ep.n_way * (ep.n_shot + ep.queries_per_class) + ep.n_open * ep.queries_per_class
    x = rng_stream(cfg.seed, "gradcheck_data").standard_normal((b, 1, 40, 98))
    labels = np.concatenate([
        np.repeat(np.arange(ep.n_way), ep.n_shot),
        np.repeat(np.arange(ep.n_way), ep.queries_per_class),
        np.full(ep.n_open * ep.queries_per_class, ep.n_way),
    ])
    loss_cfg = cfg.loss_config()

    def model_fn():
        return training.episode_loss(
            model, x, labels, ep, loss_cfg, 1.3, rng_stream(cfg.seed, "gumbel"), training=True
        )

    err = grad_check(model_fn, model.params(), args.probes, rng_stream(cfg.seed, "gradcheck_probes"))
    print(f"max relative gradient error over {args.probes} probes: {err:.3e} "
          f"({grad_check.last_skipped} kink probes skipped)")
    if err >= args.tol:
        print(f"FAIL: exceeds tolerance {args.tol:g}")
        return 3
    print(f"PASS: below tolerance {args.tol:g}")
    return 0


def build_parser():
    parser = _Parser(prog="dummyproto",
                     description="Few-shot open-set keyword spotting with dummy prototypes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("manifest", help="build a manifest from a speech-commands style tree")
    p.add_argument("--root", required=True, help="corpus root with per-keyword directories")
    p.add_argument("--out", required=True, help="output manifest TSV path")
    p.add_argument("--seed", type=int, default=0, help="seed for silence crop placement")
    p.set_defaults(fn=cmd_manifest)

    p = sub.add_parser("synth", help="generate the synthetic desk-scale corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--classes", type=int, default=35, help="number of keyword classes")
    p.add_argument("--samples", type=int, default=40, help="samples per class")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model episodically")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", required=True, help="output directory (checkpoint + history)")
    p.add_argument("--baseline", dest="baseline_flag", action="store_true",
                   help="train the dummy-free prototype baseline")
    _add_config_flags(p, skip=("baseline",))
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over seeded episodes")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=data.SPLITS)
    p.add_argument("--out", required=True, help="output directory for the report files")
    p.add_argument("--shots", dest="n_shot", type=str, default=None,
                   help="shorthand for --n-shot")
    p.add_argument("--episodes", dest="eval_episodes", type=str, default=None,
                   help="shorthand for --eval-episodes")
    _add_config_flags(p, skip=("n_shot", "eval_episodes"))
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of a full episode loss")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--probes", type=int, default=50, help="random coordinates to probe")
    p.add_argument("--tol", type=float, default=1e-4, help="max allowed relative error")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except SystemExit as e:  # argparse --help
        return 0 if e.code in (0, None) else int(e.code)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
