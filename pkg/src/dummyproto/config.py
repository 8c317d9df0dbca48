"""Flat key=value run configuration.

One file drives every module; unknown keys are rejected so typos cannot
silently fall back to defaults. Flags override file values. Defaults are
the reference training recipe (5-way 5-shot with 5 open-set classes,
lambda 0.1, gamma 3, 3 dummies, hidden 32, Adam at 1e-3 halved every 20
epochs, Gumbel temperature cosine-annealed 2 -> 0.5, 1000 eval episodes).
"""

from dataclasses import dataclass

from .data import EpisodeConfig
from .errors import UsageError
from .evaluation import SCORE_RULES
from .model import GumbelSchedule, ModelHyper
from .training import LossConfig, TrainConfig


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default, help)
SCHEMA = {
    "seed": (int, 0, "master seed; all randomness derives from named substreams"),
    "manifest": (str, "", "path to the manifest TSV"),
    "n_way": (int, 5, "known classes per episode (N)"),
    "n_shot": (int, 5, "support samples per known class (M)"),
    "n_open": (int, 5, "open-set classes per episode"),
    "train_queries": (int, 5, "queries per class during training"),
    "eval_queries": (int, 15, "queries per class at evaluation"),
    "channels": (int, 64, "encoder width; embedding dim is channels x 2 x 6 for 40x98 input"),
    "dummy_hidden": (int, 32, "dummy generator hidden width (H)"),
    "dummy_count": (int, 3, "number of generated dummies (L)"),
    "baseline": (_bool, False, "train/evaluate the plain prototype model without dummies"),
    "tau": (float, 1.0, "softmax temperature of the known classes"),
    "gamma": (float, 3.0, "dummy temperature multiplier: tau_dummy = gamma * tau"),
    "open_weight": (float, 0.1, "weight of the open-set query loss (lambda)"),
    "epochs": (int, 100, "training epochs"),
    "episodes_per_epoch": (int, 100, "episodes per epoch (one optimizer step each)"),
    "lr": (float, 0.001, "initial Adam learning rate"),
    "lr_decay": (float, 0.5, "learning-rate multiplier applied every lr_step_epochs"),
    "lr_step_epochs": (int, 20, "epochs between learning-rate decays"),
    "val_episodes": (int, 200, "validation episodes per epoch (checkpoint selection)"),
    "val_queries": (int, 15, "queries per class in validation episodes"),
    "augment_prob": (float, 0.8, "probability of adding background noise to a training clip"),
    "gumbel_tau_start": (float, 2.0, "Gumbel softmax temperature at epoch 0"),
    "gumbel_tau_end": (float, 0.5, "Gumbel softmax temperature at the final epoch"),
    "eval_episodes": (int, 1000, "episodes per evaluation report"),
    "score": (str, "dummy_prob", f"open-set score rule: {', '.join(SCORE_RULES)}"),
    "rfn": (_bool, False, "apply relaxed frequency-wise normalization to input features"),
    "rfn_rho": (float, 0.5, "rfn blend: rho * LN + (1 - rho) * IFN"),
}


@dataclass
class RunConfig:
    seed: int
    manifest: str
    n_way: int
    n_shot: int
    n_open: int
    train_queries: int
    eval_queries: int
    channels: int
    dummy_hidden: int
    dummy_count: int
    baseline: bool
    tau: float
    gamma: float
    open_weight: float
    epochs: int
    episodes_per_epoch: int
    lr: float
    lr_decay: float
    lr_step_epochs: int
    val_episodes: int
    val_queries: int
    augment_prob: float
    gumbel_tau_start: float
    gumbel_tau_end: float
    eval_episodes: int
    score: str
    rfn: bool
    rfn_rho: float

    @staticmethod
    def defaults():
        return RunConfig(**{k: v for k, (_, v, _) in SCHEMA.items()})

    def apply(self, key, raw):
        if key not in SCHEMA:
            raise UsageError(f"unknown config key {key!r}")
        parser = SCHEMA[key][0]
        try:
            value = parser(raw) if isinstance(raw, str) else raw
        except ValueError as e:
            raise UsageError(f"bad value for {key}: {e}") from None
        setattr(self, key, value)

    def model_hyper(self):
        return ModelHyper(
            channels=self.channels,
            dummy_hidden=self.dummy_hidden,
            dummy_count=self.dummy_count,
            baseline=self.baseline,
            tau_known=self.tau,
            gamma=self.gamma,
            rfn=self.rfn,
            rfn_rho=self.rfn_rho,
        )

    def train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            episodes_per_epoch=self.episodes_per_epoch,
            lr=self.lr,
            lr_decay=self.lr_decay,
            lr_step_epochs=self.lr_step_epochs,
            episode=EpisodeConfig(self.n_way, self.n_shot, self.n_open, self.train_queries),
            val_episodes=self.val_episodes,
            val_queries=self.val_queries,
            augment_prob=self.augment_prob,
            gumbel=GumbelSchedule(self.gumbel_tau_start, self.gumbel_tau_end),
            seed=self.seed,
        )

    def loss_config(self):
        return LossConfig(self.open_weight)

    def eval_episode_config(self):
        return EpisodeConfig(self.n_way, self.n_shot, self.n_open, self.eval_queries)


def load_config_file(path, base=None):
    cfg = base or RunConfig.defaults()
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise UsageError(f"{path}:{ln}: expected 'key = value', got {stripped!r}")
            key, _, raw = stripped.partition("=")
            try:
                cfg.apply(key.strip(), raw.strip())
            except UsageError as e:
                raise UsageError(f"{path}:{ln}: {e}") from None
    return cfg


def validate_choices(cfg):
    if cfg.score not in SCORE_RULES:
        raise UsageError(f"unknown score rule {cfg.score!r} (choose from {', '.join(SCORE_RULES)})")
    return cfg
