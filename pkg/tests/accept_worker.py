"""Subprocess worker for the acceptance training runs.

Each task trains one model configuration on the shared synthetic corpus
and evaluates it on 300 seeded test episodes. Children run single-threaded
kernels (env set by the parent before spawn) so two tasks fill the
machine without oversubscription.
"""

import os
import time


def run_task(args):
    corpus_dir, kind, gamma, dummy_count, seed = args
    os.environ.setdefault("NUMBA_NUM_THREADS", "1")
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

    from dummyproto import data, evaluation, training
    from dummyproto.model import ModelHyper
    from dummyproto.pipeline import FeatureStore

    manifest = data.Manifest.load(os.path.join(corpus_dir, "manifest.tsv"))
    hyper = ModelHyper(
        channels=16,
        dummy_count=dummy_count,
        gamma=gamma,
        baseline=(kind == "baseline"),
    )
    train_cfg = training.TrainConfig(
        epochs=30,
        episodes_per_epoch=50,
        episode=data.EpisodeConfig(5, 5, 5, 5),
        val_episodes=8,
        val_queries=15,
        seed=seed,
    )
    t0 = time.perf_counter()
    result = training.train(manifest, hyper, train_cfg, training.LossConfig(0.1))
    train_s = time.perf_counter() - t0

    rule = "max_prob_complement" if kind == "baseline" else "dummy_prob"
    store = FeatureStore(manifest)
    t0 = time.perf_counter()
    report = evaluation.evaluate(
        result.model, store, "test", data.EpisodeConfig(5, 5, 5, 15), 300, rule, seed=4200 + seed
    )
    eval_s = time.perf_counter() - t0
    return {
        "kind": kind,
        "gamma": gamma,
        "dummy_count": dummy_count,
        "seed": seed,
        "accuracy": report.accuracy_mean,
        "auroc": report.auroc_mean,
        "best_epoch": result.best_epoch,
        "final_val_accuracy": result.history[-1]["val_accuracy"],
        "best_val_accuracy": result.best_val_accuracy,
        "train_s": train_s,
        "eval_s": eval_s,
    }
