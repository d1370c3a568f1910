"""Hooks that record what attention blocks compute, without changing it.
"""
import threading

import numpy as np

from attn_style.cache import AttentionCache
from attn_style.hooks.base import AttentionHook


class FeatureRecorder(object):
    """Job-local store the capture hooks write into.

    Entries are keyed by (timestep, layer-id). A recorder belongs to one inversion pass; `freeze` turns
    it into an immutable AttentionCache once the pass is over.
    """

    def __init__(self, role):
        self.role = role
        self.entries = {}
        self._lock = threading.Lock()

    def put(self, t, layer_id, **tensors):
        with self._lock:
            self.entries.setdefault((int(t), layer_id), {}).update(tensors)

    def __len__(self):
        return len(self.entries)

    def freeze(self):
        return AttentionCache(self.role, self.entries)


class CaptureHook(AttentionHook):
    """Records the projected features named in `components` ("q", "k", "v")."""

    def __init__(self, recorder, components=("q",)):
        self.recorder = recorder
        self.components = tuple(components)

    def after_projection(self, layer, t, query, key, value):
        available = {"q": query, "k": key, "v": value}
        self.recorder.put(t, layer.layer_id, **{name: available[name] for name in self.components})

    def __repr__(self):
        return "<CaptureHook %s>" % "".join(self.components)


class LogitStdHook(AttentionHook):
    """Records the standard deviation of the whole pre-softmax logit matrix per (timestep, layer)."""

    def __init__(self):
        self.stds = {}

    def after_logits(self, layer, t, logits):
        self.stds[(int(t), layer.layer_id)] = float(np.std(logits.numpy(), dtype=np.float64))

    def mean_by_timestep(self):
        by_step = {}
        for (t, _), std in sorted(self.stds.items()):
            by_step.setdefault(t, []).append(std)
        return {t: float(np.mean(values)) for t, values in by_step.items()}

