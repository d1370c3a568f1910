from attn_style.hooks.base import PASS, AttentionHook, HookCollection, merge_hooks  # noqa: F401
from attn_style.hooks.capture import CaptureHook, FeatureRecorder, LogitStdHook  # noqa: F401
