"""Bridges the manifest world to model-ready feature batches.

Raw PCM is cached per entry (int16, exact), clean log-mel features are
cached per entry, and training batches optionally pass through noise
augmentation before the frontend.
"""

import numpy as np

from . import audio, data
from .errors import DataError


class FeatureStore:
    def __init__(self, manifest, rfn_cfg=None):
        self.manifest = manifest
        self.rfn_cfg = rfn_cfg
        self._pcm = {}
        self._clean = {}
        self._clips = {}
        self._noise_bank = None

    def _noise_clip(self, path):
        clip = self._clips.get(path)
        if clip is None:
            clip = audio.read_pcm16(path)
            self._clips[path] = clip
        return clip

    @property
    def noise_bank(self):
        if self._noise_bank is None:
            paths = data.noise_bank_paths(self.manifest)
            self._noise_bank = [self._noise_clip(p) for p in paths]
            for p, clip in zip(paths, self._noise_bank):
                if len(clip) < audio.CLIP_SAMPLES:
                    raise DataError(f"noise clip too short: {p}")
        return self._noise_bank

    def waveform(self, idx):
        entry = self.manifest.entries[idx]
        if entry.is_silence:
            clip = self._noise_clip(self.manifest.abspath(entry))
            if entry.crop_offset < 0 or entry.crop_offset + audio.CLIP_SAMPLES > len(clip):
                raise DataError(f"silence entry {idx} has a bad crop offset {entry.crop_offset}")
            samples = clip[entry.crop_offset : entry.crop_offset + audio.CLIP_SAMPLES].copy()
            return audio.Waveform(samples)
        pcm = self._pcm.get(idx)
        if pcm is None:
            samples = audio.fit_to_clip(audio.read_pcm16(self.manifest.abspath(entry)))
            pcm = (samples * 32768.0).round().astype(np.int16)
            self._pcm[idx] = pcm
        return audio.Waveform(pcm.astype(np.float64) / 32768.0)

    def _finalize(self, feats):
        if self.rfn_cfg is not None:
            feats = audio.rfn(feats, self.rfn_cfg)
        return feats

    def clean_features(self, idx):
        feats = self._clean.get(idx)
        if feats is None:
            # logmel may hand back an arena scratch buffer; own a copy
            feats = self._finalize(audio.logmel(self.waveform(idx))).copy()
            self._clean[idx] = feats
        return feats

    def episode_batch(self, episode, augment_rng=None, augment_p=0.0):
        """Stack one episode into (B, 1, bins, frames) plus labels, ordered
        supports, then known queries, then open-set queries.

        Un-augmented clips come from the clean-feature cache; augmented
        ones run through the frontend fresh.
        """
        from .tensor import ARENA

        items = list(episode.support) + list(episode.known_queries) + list(episode.open_queries)
        labels = np.array([lab for _, lab in items], dtype=np.intp)
        n = len(items)
        out = ARENA.take((n, audio.N_MELS, audio.N_FRAMES))
        augmenting = augment_rng is not None and augment_p > 0.0
        if augmenting and not self.noise_bank:
            raise DataError("noise augmentation requested but the noise bank is empty")
        specs = []  # (position, entry, clip index, crop offset, level)
        for pos, (idx, _) in enumerate(items):
            if augmenting and augment_rng.random() < augment_p:
                ci = int(augment_rng.integers(len(self.noise_bank)))
                clip = self.noise_bank[ci]
                off = int(augment_rng.integers(len(clip) - audio.CLIP_SAMPLES + 1))
                level = augment_rng.uniform(0.0, 0.1)
                specs.append((pos, idx, ci, off, level))
            else:
                out[pos] = self.clean_features(idx)
        if specs:
            cap = 25 * -(-len(specs) // 25)
            waves = ARENA.take((cap, audio.CLIP_SAMPLES))[: len(specs)]
            for j, (_, idx, ci, off, level) in enumerate(specs):
                np.multiply(
                    self.noise_bank[ci][off : off + audio.CLIP_SAMPLES], level, out=waves[j]
                )
                waves[j] += self.waveform(idx).samples
            np.clip(waves, -1.0, 1.0, out=waves)
            out[[pos for pos, *_ in specs]] = self._finalize(audio.logmel(waves))
        return out[:, None, :, :], labels
