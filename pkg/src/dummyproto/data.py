"""Keyword manifest construction, the class-disjoint split protocol, the
silence rule, episode sampling, and a synthetic stand-in corpus.

The split fixes 15 train / 10 validation / 10 test keywords; background
noise forms a silence class that can appear only among the open-set
classes of an episode, never as a known class.
"""

import hashlib
import re
import wave
from dataclasses import dataclass, field, replace

import numpy as np

from . import audio
from .errors import DataError

SILENCE = "_silence_"
NOISE_DIRNAME = "_background_noise_"
SPLITS = ("train", "val", "test")

TRAIN_KEYWORDS = (
    "happy", "house", "bird", "bed", "backward", "sheila", "marvin", "wow",
    "tree", "follow", "dog", "visual", "forward", "learn", "cat",
)
VAL_KEYWORDS = (
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
)
TEST_KEYWORDS = (
    "yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go",
)


@dataclass(frozen=True)
class SplitSpec:
    train_keywords: tuple = TRAIN_KEYWORDS
    val_keywords: tuple = VAL_KEYWORDS
    test_keywords: tuple = TEST_KEYWORDS

    def __post_init__(self):
        sets = [set(self.train_keywords), set(self.val_keywords), set(self.test_keywords)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DataError("split keyword lists must be pairwise disjoint")

    def keywords_of(self, split):
        return {"train": self.train_keywords, "val": self.val_keywords,
                "test": self.test_keywords}[split]

    def split_of(self, keyword):
        for split in SPLITS:
            if keyword in self.keywords_of(split):
                return split
        return None


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative to the manifest root
    keyword: str
    split: str
    is_silence: bool = False
    crop_offset: int = -1  # sample offset into the noise clip, silence only


class Manifest:
    def __init__(self, entries, root):
        self.entries = tuple(entries)
        self.root = str(root)
        self._by_split = None

    def __len__(self):
        return len(self.entries)

    def abspath(self, entry):
        import os.path

        return os.path.join(self.root, entry.path)

    def by_split(self, split):
        """keyword -> sorted entry indices, for one split. Silence included
        under the SILENCE key."""
        if self._by_split is None:
            table = {s: {} for s in SPLITS}
            for i, e in enumerate(self.entries):
                table[e.split].setdefault(e.keyword, []).append(i)
            self._by_split = table
        return self._by_split[split]

    def counts(self):
        out = {}
        for split in SPLITS:
            classes = self.by_split(split)
            kw = sum(len(v) for k, v in classes.items() if k != SILENCE)
            sil = len(classes.get(SILENCE, ()))
            out[split] = (kw, sil)
        return out

    def save(self, path):
        lines = []
        for e in self.entries:
            cols = [e.path, e.keyword, e.split, "1" if e.is_silence else "0"]
            if e.is_silence:
                cols.append(str(e.crop_offset))
            lines.append("\t".join(cols))
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")

    @staticmethod
    def load(path, validate_paths=True):
        import os.path

        root = os.path.dirname(os.path.abspath(str(path)))
        entries = []
        with open(path, encoding="utf-8") as f:
            for ln, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                cols = line.split("\t")
                if len(cols) not in (4, 5):
                    raise DataError(f"{path}:{ln}: expected 4 or 5 tab-separated fields")
                silence = cols[3] == "1"
                offset = int(cols[4]) if len(cols) == 5 else -1
                if cols[2] not in SPLITS:
                    raise DataError(f"{path}:{ln}: unknown split {cols[2]!r}")
                entries.append(ManifestEntry(cols[0], cols[1], cols[2], silence, offset))
                if validate_paths and not os.path.exists(os.path.join(root, cols[0])):
                    raise DataError(f"{path}:{ln}: missing file {cols[0]}")
        return Manifest(entries, root)


_MAX_WAVS_PER_CLASS = 2**27 - 1


def official_split_of(filename, val_pct=10.0, test_pct=10.0):
    """The official speaker-stable hash split: everything after _nohash_ is
    ignored so all utterances of one speaker land in the same split."""
    base = re.sub(r"_nohash_.*$", "", str(filename).split("/")[-1])
    h = int(hashlib.sha1(base.encode("utf-8")).hexdigest(), 16) % (_MAX_WAVS_PER_CLASS + 1)
    pct = h * (100.0 / _MAX_WAVS_PER_CLASS)
    if pct < val_pct:
        return "val"
    if pct < val_pct + test_pct:
        return "test"
    return "train"


def _read_list_file(root, name):
    import os.path

    p = os.path.join(str(root), name)
    if not os.path.exists(p):
        return None
    with open(p, encoding="utf-8") as f:
        return {line.strip() for line in f if line.strip()}


def build_manifest(corpus_root, spec=SplitSpec()):
    """Scan per-keyword directories and assign each utterance to a split.

    The official validation/testing list files take precedence when
    present; otherwise the stable filename hash decides. An utterance is
    kept only when its per-utterance split matches its keyword's split, so
    every keyword class is entirely inside one split.
    """
    import os

    root = str(corpus_root)
    if not os.path.isdir(root):
        raise DataError(f"corpus root {root} is not a directory")
    val_list = _read_list_file(root, "validation_list.txt")
    test_list = _read_list_file(root, "testing_list.txt")

    entries = []
    for split in SPLITS:
        for kw in spec.keywords_of(split):
            d = os.path.join(root, kw)
            if not os.path.isdir(d):
                raise DataError(f"missing keyword directory: {kw!r}")
            for fname in sorted(os.listdir(d)):
                if not fname.endswith(".wav"):
                    continue
                rel = f"{kw}/{fname}"
                if val_list is not None and test_list is not None:
                    utt_split = "val" if rel in val_list else "test" if rel in test_list else "train"
                else:
                    utt_split = official_split_of(fname)
                if utt_split == split:
                    entries.append(ManifestEntry(rel, kw, split))
    if not entries:
        raise DataError(f"no usable utterances under {root}")
    return Manifest(entries, root)


def _wav_frames(path):
    try:
        with wave.open(str(path), "rb") as f:
            return f.getnframes()
    except (wave.Error, EOFError) as e:
        raise DataError(f"{path}: unreadable noise clip ({e})") from None


def add_silence(manifest, noise_paths, rng):
    """Append per-split silence entries, one seeded one-second crop each.

    The silence count per split is round(mean utterances per keyword
    class), banker's rounding.
    """
    import os.path

    if not noise_paths:
        raise DataError("the noise bank is empty")
    rel_noise = []
    lengths = []
    for p in noise_paths:
        p = str(p)
        rel = os.path.relpath(p, manifest.root)
        n = _wav_frames(p)
        if n < audio.CLIP_SAMPLES:
            raise DataError(f"{p}: noise clip shorter than one second")
        rel_noise.append(rel)
        lengths.append(n)

    entries = list(manifest.entries)
    for split in SPLITS:
        classes = manifest.by_split(split)
        kw_counts = [len(v) for k, v in classes.items() if k != SILENCE]
        if not kw_counts:
            continue
        n_silence = round(sum(kw_counts) / len(kw_counts))
        for _ in range(n_silence):
            ci = int(rng.integers(len(rel_noise)))
            offset = int(rng.integers(lengths[ci] - audio.CLIP_SAMPLES + 1))
            entries.append(ManifestEntry(rel_noise[ci], SILENCE, split, True, offset))
    return Manifest(entries, manifest.root)


@dataclass(frozen=True)
class EpisodeConfig:
    n_way: int = 5
    n_shot: int = 5
    n_open: int = 5
    queries_per_class: int = 5

    def __post_init__(self):
        for name in ("n_way", "n_shot", "n_open", "queries_per_class"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive")


@dataclass
class Episode:
    support: list  # (entry_index, episode_label) pairs, class-major
    known_queries: list  # (entry_index, episode_label)
    open_queries: list  # (entry_index, n_way) -- all share the dummy label
    known_class_ids: list
    open_class_ids: list
    config: EpisodeConfig = field(default=None)


def sample_episode(manifest, split, cfg, rng):
    """Draw one episode. Known classes come uniformly from the split's
    non-silence classes; open-set classes from the remaining classes of the
    same split, silence included. Support and query items never overlap."""
    classes = manifest.by_split(split)
    keyword_names = sorted(k for k in classes if k != SILENCE)
    need = cfg.n_shot + cfg.queries_per_class
    for k in keyword_names:
        if len(classes[k]) < need:
            raise DataError(
                f"class {k!r} in split {split!r} has {len(classes[k])} samples, needs {need}"
            )
    if len(keyword_names) < cfg.n_way:
        raise DataError(
            f"split {split!r} has {len(keyword_names)} non-silence classes, needs {cfg.n_way}"
        )

    known = [keyword_names[i] for i in rng.choice(len(keyword_names), cfg.n_way, replace=False)]
    known_set = set(known)
    open_candidates = [k for k in keyword_names if k not in known_set]
    if SILENCE in classes and len(classes[SILENCE]) >= cfg.queries_per_class:
        open_candidates.append(SILENCE)
    if len(open_candidates) < cfg.n_open:
        raise DataError(
            f"split {split!r} leaves {len(open_candidates)} open-set candidates, needs {cfg.n_open}"
        )
    open_classes = [open_candidates[i] for i in rng.choice(len(open_candidates), cfg.n_open, replace=False)]

    support, known_queries, open_queries = [], [], []
    for label, k in enumerate(known):
        pool = classes[k]
        picked = rng.choice(len(pool), need, replace=False)
        for j in picked[: cfg.n_shot]:
            support.append((pool[j], label))
        for j in picked[cfg.n_shot :]:
            known_queries.append((pool[j], label))
    for k in open_classes:
        pool = classes[k]
        picked = rng.choice(len(pool), cfg.queries_per_class, replace=False)
        for j in picked:
            open_queries.append((pool[j], cfg.n_way))
    return Episode(support, known_queries, open_queries, known, open_classes, cfg)


def _class_tones(k, n_classes):
    """Spectro-temporal signature for synthetic class k: a tone pair with a
    class-specific AM rate and a mild chirp on the lower tone."""
    lo_grid = audio.mel_to_hz(np.linspace(audio.hz_to_mel(350.0), audio.hz_to_mel(2200.0), 7))
    n_hi = max(2, -(-n_classes // 7))
    hi_grid = audio.mel_to_hz(np.linspace(audio.hz_to_mel(2600.0), audio.hz_to_mel(5200.0), n_hi))
    f_lo = float(lo_grid[k % 7])
    f_hi = float(hi_grid[(k // 7) % n_hi])
    am_rate = 3.0 + 1.5 * (k % 8)
    chirp = 0.06 * ((k % 3) - 1)  # relative frequency drift per second
    return f_lo, f_hi, am_rate, chirp


def _synth_clip(k, n_classes, rng):
    f_lo, f_hi, am_rate, chirp = _class_tones(k, n_classes)
    t = np.arange(audio.CLIP_SAMPLES) / audio.SAMPLE_RATE
    jl = 1.0 + rng.normal(0.0, 0.004)
    jh = 1.0 + rng.normal(0.0, 0.004)
    amp = rng.uniform(0.35, 0.65)
    depth = 0.45
    env = (1.0 - depth) + depth * 0.5 * (1.0 + np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi)))
    phase_lo = 2 * np.pi * (f_lo * jl * t * (1.0 + 0.5 * chirp * t)) + rng.uniform(0, 2 * np.pi)
    phase_hi = 2 * np.pi * f_hi * jh * t + rng.uniform(0, 2 * np.pi)
    sig = amp * env * (0.62 * np.sin(phase_lo) + 0.38 * np.sin(phase_hi))
    sig += rng.uniform(0.008, 0.02) * rng.standard_normal(len(t))
    return np.clip(sig, -1.0, 1.0)


def _synth_noise_bank(out_dir, rng, clips=4, seconds=5):
    """Noise clips in the usual background-noise directory layout."""
    import os

    d = os.path.join(str(out_dir), NOISE_DIRNAME)
    os.makedirs(d, exist_ok=True)
    paths = []
    n = seconds * audio.SAMPLE_RATE
    for i in range(clips):
        white = rng.standard_normal(n)
        if i % 2 == 1:
            # crude 1/f-ish colored noise via a leaky integrator
            out = np.empty(n)
            acc = 0.0
            a = 0.92
            for j in range(n):
                acc = a * acc + (1 - a) * white[j]
                out[j] = acc
            white = out / (np.abs(out).max() + 1e-9) * 0.8
        else:
            white = white / (np.abs(white).max() + 1e-9) * 0.6
        p = os.path.join(d, f"noise_{i}.wav")
        audio.save_wav(p, white)
        paths.append(p)
    return paths


def synth_split_sizes(n_classes):
    n_val = max(1, round(2 * n_classes / 7))
    n_train = n_classes - 2 * n_val
    return n_train, n_val, n_val


def synth_corpus(out_dir, n_classes=35, samples_per_class=40, seed=0):
    """Generate a synthetic keyword corpus mirroring the split protocol.

    Classes are separable by tone pair and modulation rate; a noise bank
    provides the silence class. Returns the manifest (also written to
    out_dir/manifest.tsv).
    """
    import os

    from .rngs import rng_stream

    if n_classes < 12:
        raise DataError(f"need at least 12 classes for episodic splits, got {n_classes}")
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    n_train, n_val, n_test = synth_split_sizes(n_classes)
    split_of_class = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test

    entries = []
    for k in range(n_classes):
        name = f"synth{k:02d}"
        d = os.path.join(out_dir, name)
        os.makedirs(d, exist_ok=True)
        rng = rng_stream(seed, "synth_class", k)
        for s in range(samples_per_class):
            rel = f"{name}/sample_{s:04d}.wav"
            audio.save_wav(os.path.join(out_dir, rel), _synth_clip(k, n_classes, rng))
            entries.append(ManifestEntry(rel, name, split_of_class[k]))

    noise_paths = _synth_noise_bank(out_dir, rng_stream(seed, "synth_noise"))
    manifest = Manifest(entries, out_dir)
    manifest = add_silence(manifest, noise_paths, rng_stream(seed, "synth_silence"))
    manifest.save(os.path.join(out_dir, "manifest.tsv"))
    return manifest


def noise_bank_paths(manifest_or_root):
    """WAV paths under the corpus's background-noise directory."""
    import os

    root = manifest_or_root.root if isinstance(manifest_or_root, Manifest) else str(manifest_or_root)
    d = os.path.join(root, NOISE_DIRNAME)
    if not os.path.isdir(d):
        return []
    return [os.path.join(d, f) for f in sorted(os.listdir(d)) if f.endswith(".wav")]
