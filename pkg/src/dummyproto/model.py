"""The encoder, class prototypes, the episode-adaptive dummy generator,
and the (N+1)-way posterior.

The dummy generator is a set function of the episode's prototype matrix:
a shared two-layer affine map per row, an elementwise max over rows, and
a final projection producing L dummy prototypes. Open-set queries are
absorbed by the dummy class, whose softmax temperature is scaled up by
gamma to soften its logit.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError, ShapeError
from .rngs import rng_stream


@dataclass(frozen=True)
class ScoringConfig:
    tau_known: float = 1.0
    gamma: float = 3.0

    def __post_init__(self):
        if self.tau_known <= 0 or self.gamma <= 0:
            raise DataError("softmax temperatures must be strictly positive")

    @property
    def tau_dummy(self):
        return self.gamma * self.tau_known


@dataclass(frozen=True)
class GumbelSchedule:
    tau_start: float = 2.0
    tau_end: float = 0.5


@dataclass(frozen=True)
class ModelHyper:
    """Everything needed to rebuild a model shell before loading weights."""

    channels: int = 64
    dummy_hidden: int = 32
    dummy_count: int = 3
    baseline: bool = False
    tau_known: float = 1.0
    gamma: float = 3.0
    rfn: bool = False
    rfn_rho: float = 0.5
    in_bins: int = 40
    in_frames: int = 98

    @property
    def scoring(self):
        return ScoringConfig(self.tau_known, self.gamma)

    @property
    def embedding_dim(self):
        h, w = self.in_bins, self.in_frames
        for _ in range(4):
            h, w = h // 2, w // 2
        return self.channels * h * w


def _uniform_init(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class ConvBlock:
    """conv3x3 (no bias; batchnorm follows) -> batchnorm -> relu -> maxpool."""

    def __init__(self, name, in_c, out_c, rng):
        self.name = name
        self.weight = T.Tensor(
            _uniform_init(rng, (out_c, in_c, 3, 3), fan_in=in_c * 9),
            grad_enabled=True, name=f"{name}.conv.weight",
        )
        self.gamma = T.Tensor(np.ones(out_c), grad_enabled=True, name=f"{name}.bn.gamma")
        self.beta = T.Tensor(np.zeros(out_c), grad_enabled=True, name=f"{name}.bn.beta")
        self.bn_state = T.BatchNormState(out_c)

    def forward(self, x, training):
        h = T.conv2d(x, self.weight, padding=1)
        h = T.batchnorm2d(h, self.gamma, self.beta, self.bn_state, training=training)
        # in-place is safe: batchnorm backward never reads its own output
        return T.maxpool2x2(T.relu(h, in_place=True))

    def params(self):
        return [self.weight, self.gamma, self.beta]

    def state(self):
        return [
            (f"{self.name}.bn.running_mean", self.bn_state.mean),
            (f"{self.name}.bn.running_var", self.bn_state.var),
        ]


class Encoder:
    def __init__(self, hyper, rng):
        self.hyper = hyper
        c = hyper.channels
        self.blocks = [
            ConvBlock(f"encoder.block{i}", 1 if i == 0 else c, c, rng) for i in range(4)
        ]

    def forward(self, x, training):
        """(B, 1, bins, frames) -> (B, D) flattened conv features."""
        h = x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=np.float64))
        if h.data.ndim != 4 or h.data.shape[1] != 1:
            raise ShapeError(f"encoder expects (B, 1, bins, frames), got {h.data.shape}")
        for block in self.blocks:
            h = block.forward(h, training)
        b = h.data.shape[0]
        return T.reshape(h, (b, self.hyper.embedding_dim))

    def params(self):
        return [p for blk in self.blocks for p in blk.params()]

    def state(self):
        return [s for blk in self.blocks for s in blk.state()]


class DummyGenerator:
    """Set-invariant generator mapping N prototypes to L dummy prototypes."""

    def __init__(self, emb_dim, hidden, count, rng):
        self.emb_dim = emb_dim
        self.count = count
        self.w1 = T.Tensor(_uniform_init(rng, (emb_dim, hidden), emb_dim),
                           grad_enabled=True, name="generator.w1")
        self.b1 = T.Tensor(np.zeros(hidden), grad_enabled=True, name="generator.b1")
        self.w2 = T.Tensor(_uniform_init(rng, (hidden, hidden), hidden),
                           grad_enabled=True, name="generator.w2")
        self.b2 = T.Tensor(np.zeros(hidden), grad_enabled=True, name="generator.b2")
        self.wg = T.Tensor(_uniform_init(rng, (hidden, count * emb_dim), hidden),
                           grad_enabled=True, name="generator.wg")

    def generate(self, prototypes):
        """(N, D) prototypes -> (L, D) dummies; exactly invariant to row order."""
        h = T.relu(T.add(T.matmul(prototypes, self.w1), self.b1))
        h = T.add(T.matmul(h, self.w2), self.b2)
        pooled = T.rowmax(h)  # (1, H)
        flat = T.matmul(pooled, self.wg)  # (1, L*D)
        return T.reshape(flat, (self.count, self.emb_dim))

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2, self.wg]


class ProtoModel:
    def __init__(self, hyper, seed=0):
        self.hyper = hyper
        init_rng = rng_stream(seed, "init")
        self.encoder = Encoder(hyper, init_rng)
        self.generator = None
        if not hyper.baseline:
            self.generator = DummyGenerator(
                hyper.embedding_dim, hyper.dummy_hidden, hyper.dummy_count, init_rng
            )

    @property
    def scoring(self):
        return self.hyper.scoring

    def params(self):
        ps = self.encoder.params()
        if self.generator is not None:
            ps += self.generator.params()
        return ps

    def named_params(self):
        return [(p.name, p) for p in self.params()]

    def state(self):
        return self.encoder.state()

    def encode(self, x, training=False):
        return self.encoder.forward(x, training)


def compute_prototypes(support_embeddings, labels, n_way, n_shot):
    """Per-class mean of support embeddings, rows in episode class order.

    Supports must arrive class-major (label pattern 0,0,...,1,1,...), which
    is how episodes are materialized.
    """
    labels = np.asarray(labels)
    expected = np.repeat(np.arange(n_way), n_shot)
    if labels.shape != expected.shape or not (labels == expected).all():
        missing = set(range(n_way)) - set(labels.tolist())
        if missing:
            raise DataError(f"support set is missing classes {sorted(missing)}")
        raise DataError("support embeddings must be ordered class-major")
    d = support_embeddings.data.shape[1]
    grouped = T.reshape(support_embeddings, (n_way, n_shot, d))
    return T.mean(grouped, axis=1)


def sample_gumbel(rng, shape):
    """Standard Gumbel(0, 1) noise via inverse-CDF: -log(-log U)."""
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-300, None)))


def select_dummy(query_embeddings, dummies, gumbel_tau, mode, rng=None):
    """Choose (train: softly, eval: hard argmax) one dummy per query.

    Returns (per-query dummy rows (Q, D), selection probabilities (Q, L)).
    Train mode perturbs the negative distances with Gumbel noise so the
    soft selection is a differentiable sample; eval mode is noise-free and
    takes the first maximal dummy on ties.
    """
    if gumbel_tau <= 0:
        raise DataError(f"gumbel temperature must be positive, got {gumbel_tau}")
    if mode not in ("train", "eval"):
        raise DataError(f"mode must be 'train' or 'eval', got {mode!r}")
    ell = dummies.data.shape[0]
    if ell == 0:
        raise ShapeError("no dummies to select from")
    neg_dist = T.scale(T.pairwise_sqdist(query_embeddings, dummies), -1.0)
    if mode == "train":
        if rng is None:
            raise DataError("train-mode dummy selection needs an rng")
        noise = T.Tensor(sample_gumbel(rng, neg_dist.data.shape))
        probs = T.softmax(T.scale(T.add(neg_dist, noise), 1.0 / gumbel_tau))
        mixed = T.matmul(probs, dummies)
        return mixed, probs
    probs = T.softmax(T.scale(neg_dist, 1.0 / gumbel_tau))
    picked = np.argmax(probs.data, axis=1)  # first index on ties
    rows = T.Tensor(dummies.data[picked])
    return rows, probs


def posterior_logits(query_embeddings, prototypes, dummy_rows, cfg):
    """Temperature-scaled negative squared distances over N (+1) classes."""
    logits = T.scale(T.pairwise_sqdist(query_embeddings, prototypes), -1.0 / cfg.tau_known)
    if dummy_rows is None:
        return logits
    d_dummy = T.rows_sqdist(query_embeddings, dummy_rows)
    q = d_dummy.data.shape[0]
    dummy_logit = T.scale(T.reshape(d_dummy, (q, 1)), -1.0 / cfg.tau_dummy)
    return T.concat_cols(logits, dummy_logit)


def posterior(query_embeddings, prototypes, dummy_rows, cfg):
    """Class probabilities per query: N known classes plus, when dummy_rows
    is given, the dummy class at temperature gamma * tau."""
    return T.softmax(posterior_logits(query_embeddings, prototypes, dummy_rows, cfg))
