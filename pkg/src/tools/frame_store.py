import os
from typing import Dict, Optional

import numpy as np

from src.errors import ArgumentError


class FrameStore:
    """
    Pixel storage next to a dataset file: one compressed .npz per video holding
    the (N, H, W, 3) uint8 frames and their frame indices.
    """

    def __init__(self, frames_dir: str):
        self.frames_dir = os.path.abspath(frames_dir)
        self._cache: Dict[str, Dict[int, np.ndarray]] = {}

    def _path(self, video_id: str) -> str:
        safe_name = video_id.replace("/", "_").replace("\\", "_")
        return os.path.join(self.frames_dir, f"{safe_name}.npz")

    def save(self, video_id: str, frames: np.ndarray, indices: Optional[np.ndarray] = None):
        os.makedirs(self.frames_dir, exist_ok=True)
        if indices is None:
            indices = np.arange(len(frames))
        path = self._path(video_id)
        tmp_path = path + ".tmp.npz"
        np.savez_compressed(tmp_path, frames=frames.astype(np.uint8), indices=np.asarray(indices, dtype=np.int64))
        os.replace(tmp_path, path)
        self._cache.pop(video_id, None)

    def load_video(self, video_id: str) -> Dict[int, np.ndarray]:
        if video_id not in self._cache:
            path = self._path(video_id)
            if not os.path.exists(path):
                raise ArgumentError(f"No frames stored for video '{video_id}' at {path} (check --frames-dir)")
            with np.load(path) as data:
                frames, indices = data["frames"], data["indices"]
                self._cache[video_id] = {int(i): frames[n] for n, i in enumerate(indices)}
        return self._cache[video_id]

    def frame(self, video_id: str, frame_index: int) -> np.ndarray:
        frames = self.load_video(video_id)
        if frame_index not in frames:
            raise ArgumentError(f"Video '{video_id}' has no stored frame {frame_index}")
        return frames[frame_index]


class InMemoryFrameStore(FrameStore):
    """Same interface over frames already held in memory (tests, freshly generated data)."""

    def __init__(self, frames: Dict[str, np.ndarray]):
        super().__init__(frames_dir=".")
        for video_id, pixels in frames.items():
            self._cache[video_id] = {i: pixels[i] for i in range(len(pixels))}

    def save(self, video_id: str, frames: np.ndarray, indices: Optional[np.ndarray] = None):
        if indices is None:
            indices = np.arange(len(frames))
        self._cache[video_id] = {int(i): frames[n] for n, i in enumerate(indices)}
