"""The episodic training objective and loop.

Per episode: encode supports and queries in one batch, average supports
into prototypes, generate dummies, soft-select one dummy per query with
Gumbel noise, and minimize cross entropy over known queries plus a
weighted cross entropy pushing open-set queries onto the dummy class. One
Adam step per episode; the checkpoint with the best few-shot validation
accuracy wins.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import evaluation
from . import model as M
from . import tensor as T
from .data import EpisodeConfig, sample_episode
from .errors import DataError, NumericsError
from .model import GumbelSchedule
from .pipeline import FeatureStore
from .rngs import rng_stream


@dataclass(frozen=True)
class LossConfig:
    open_weight: float = 0.1  # weight of the open-set query loss

    def __post_init__(self):
        if not math.isfinite(self.open_weight) or self.open_weight < 0:
            raise DataError(f"open_weight must be finite and >= 0, got {self.open_weight}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    episodes_per_epoch: int = 100
    lr: float = 0.001
    lr_decay: float = 0.5
    lr_step_epochs: int = 20
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    val_episodes: int = 200
    val_queries: int = 15
    augment_prob: float = 0.8
    gumbel: GumbelSchedule = field(default_factory=GumbelSchedule)
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "episodes_per_epoch", "lr_step_epochs", "val_episodes", "val_queries"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive")


def lr_at(epoch, cfg):
    """Step decay: multiply by lr_decay every lr_step_epochs."""
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_step_epochs)


def gumbel_tau_at(epoch, epochs, sched=GumbelSchedule()):
    """Cosine anneal from tau_start (epoch 0) to tau_end (last epoch)."""
    if epochs <= 1:
        return sched.tau_end
    frac = epoch / (epochs - 1)
    return sched.tau_end + (sched.tau_start - sched.tau_end) * (1.0 + math.cos(math.pi * frac)) / 2.0


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else 0.0
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def episode_loss(model, x, labels, episode_cfg, loss_cfg, gumbel_tau, gumbel_rng=None, training=True):
    """Scalar training objective for one materialized episode.

    Mean cross entropy over known queries, plus open_weight times the mean
    cross entropy of open-set queries against the dummy class (dummy models
    only).
    """
    n_way, n_shot = episode_cfg.n_way, episode_cfg.n_shot
    n_support = n_way * n_shot
    n_known_q = n_way * episode_cfg.queries_per_class
    total = x.shape[0] if not isinstance(x, T.Tensor) else x.data.shape[0]
    if n_known_q < 1 or total <= n_support:
        raise DataError("episode has no known queries")

    emb = model.encode(x, training=training)
    support = T.slice_rows(emb, 0, n_support)
    queries = T.slice_rows(emb, n_support, total)
    protos = M.compute_prototypes(support, labels[:n_support], n_way, n_shot)

    rows = None
    if model.generator is not None:
        dummies = model.generator.generate(protos)
        mode = "train" if training else "eval"
        rows, _ = M.select_dummy(queries, dummies, gumbel_tau, mode, rng=gumbel_rng)

    logp = T.log_softmax(M.posterior_logits(queries, protos, rows, model.scoring))
    known_lp = T.take_per_row(T.slice_rows(logp, 0, n_known_q), labels[n_support : n_support + n_known_q])
    loss = T.scale(T.mean(known_lp), -1.0)
    if model.generator is not None and loss_cfg.open_weight > 0 and total > n_support + n_known_q:
        q_total = total - n_support
        open_lp = T.take_per_row(
            T.slice_rows(logp, n_known_q, q_total), labels[n_support + n_known_q :]
        )
        loss = T.add(loss, T.scale(T.mean(open_lp), -loss_cfg.open_weight))
    return loss


@dataclass
class TrainResult:
    model: object
    history: list
    best_epoch: int
    best_val_accuracy: float


def train(manifest, hyper, train_cfg, loss_cfg=LossConfig(), progress=None):
    """Full episodic training run; returns the best-validation model.

    Deterministic given (manifest, configs, seed): every random draw flows
    from named substreams of train_cfg.seed.
    """
    rfn_cfg = None
    if hyper.rfn:
        from .audio import RFNConfig

        rfn_cfg = RFNConfig(rho=hyper.rfn_rho)
    store = FeatureStore(manifest, rfn_cfg)
    model = M.ProtoModel(hyper, seed=train_cfg.seed)
    opt = Adam(model.params())
    rule = evaluation.default_rule(model)
    val_cfg = EpisodeConfig(
        train_cfg.episode.n_way, train_cfg.episode.n_shot,
        train_cfg.episode.n_open, train_cfg.val_queries,
    )

    history = []
    best = None  # (accuracy, epoch, params snapshot, state snapshot)
    # single-threaded BLAS: its idle spinning starves the jit kernels
    with threadpool_limits(limits=1, user_api="blas"), T.arena_scope() as arena:
        for epoch in range(train_cfg.epochs):
            lr = lr_at(epoch, train_cfg)
            gtau = gumbel_tau_at(epoch, train_cfg.epochs, train_cfg.gumbel)
            losses = np.empty(train_cfg.episodes_per_epoch)
            for i in range(train_cfg.episodes_per_epoch):
                try:
                    ep = sample_episode(
                        manifest, "train", train_cfg.episode,
                        rng_stream(train_cfg.seed, "sampler", epoch, i),
                    )
                    x, labels = store.episode_batch(
                        ep, rng_stream(train_cfg.seed, "augment", epoch, i),
                        train_cfg.augment_prob,
                    )
                    opt.zero_grad()
                    loss = episode_loss(
                        model, x, labels, train_cfg.episode, loss_cfg, gtau,
                        rng_stream(train_cfg.seed, "gumbel", epoch, i),
                    )
                    T.backward(loss)
                    opt.step(lr)
                    losses[i] = loss.item()
                except NumericsError as e:
                    raise NumericsError(
                        f"training aborted at epoch {epoch} episode {i} "
                        f"(stream ('sampler', {epoch}, {i}) of seed {train_cfg.seed}): {e}"
                    ) from e
                arena.recycle()

            val_pairs = []
            for i in range(train_cfg.val_episodes):
                ep = sample_episode(manifest, "val", val_cfg, rng_stream(train_cfg.seed, "val_sampler", epoch, i))
                x, labels = store.episode_batch(ep)
                val_pairs.append(
                    evaluation.episode_metrics(model, x, labels, val_cfg.n_way, val_cfg.n_shot, rule)
                )
                arena.recycle()
            val_acc = float(np.mean([a for a, _ in val_pairs]))
            val_auroc = float(np.mean([r for _, r in val_pairs]))

            record = {
                "epoch": epoch,
                "train_loss": float(losses.mean()),
                "val_accuracy": val_acc,
                "val_auroc": val_auroc,
                "lr": lr,
                "gumbel_tau": gtau,
            }
            history.append(record)
            if progress is not None:
                progress(record)
            if best is None or val_acc > best[0]:
                best = (
                    val_acc, epoch,
                    [p.data.copy() for p in model.params()],
                    [arr.copy() for _, arr in model.state()],
                )

    for p, snap in zip(model.params(), best[2]):
        p.data[...] = snap
    for (_, arr), snap in zip(model.state(), best[3]):
        arr[...] = snap
    return TrainResult(model, history, best[1], best[0])
