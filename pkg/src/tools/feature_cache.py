import hashlib
import os
from typing import Dict, Optional

import numpy as np


class FeatureCache:
    """
    On-disk cache of per-video feature arrays keyed by
    (video_id, model checksum, T, P, seed). One .npz file per key, written
    with an atomic rename; unreadable entries are treated as misses.
    """

    def __init__(self, cache_dir: Optional[str]):
        self.cache_dir = os.path.abspath(cache_dir) if cache_dir else None
        self.hits = 0
        self.misses = 0

    def is_enabled(self) -> bool:
        return self.cache_dir is not None

    @staticmethod
    def key(video_id: str, checksum: str, T: int, P: int, seed: int) -> str:
        raw = f"{video_id}|{checksum}|{T}|{P}|{seed}"
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()[:24]

    def _path(self, key: str) -> str:
        return os.path.join(self.cache_dir, f"{key}.npz")

    def load(self, key: str) -> Optional[Dict[str, np.ndarray]]:
        if not self.is_enabled() or not os.path.exists(self._path(key)):
            self.misses += 1
            return None
        try:
            with np.load(self._path(key)) as data:
                arrays = {name: data[name] for name in data.files}
            self.hits += 1
            return arrays
        except Exception as e:
            print(f"[FeatureCache] Warning: could not read {key}: {e}")
            self.misses += 1
            return None

    def save(self, key: str, arrays: Dict[str, np.ndarray]):
        if not self.is_enabled():
            return
        try:
            os.makedirs(self.cache_dir, exist_ok=True)
            tmp_path = self._path(key) + ".tmp.npz"
            np.savez(tmp_path, **arrays)
            os.replace(tmp_path, self._path(key))
        except Exception as e:
            print(f"[FeatureCache] Warning: failed to cache {key}: {e}")

    def summary(self) -> str:
        return f"[FeatureCache] {self.hits} hits, {self.misses} misses ({self.cache_dir or 'disabled'})"
