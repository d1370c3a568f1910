class AttentionHook(object):
    """Behavior consulted by every self-attention block.

    The base class is the PASS hook: it observes nothing and overrides nothing, so a block run with it
    is bit-identical to a block run without any hook. Subclasses capture features, replace them, or
    observe the attention logits by overriding the callbacks below.
    """

    def after_projection(self, layer, t, query, key, value):
        pass

    def override(self, layer, t, query, key, value):
        """Return the (query, key, value, temperature) the block attends with."""
        return query, key, value, 1.0

    def after_logits(self, layer, t, logits):
        pass


PASS = AttentionHook()


class HookCollection(AttentionHook):
    """Chains several hooks on one layer.

    Observing callbacks are fanned out to every hook. `override` is folded through the hooks in order,
    each one seeing the tensors the previous one returned; temperatures multiply.
    """

    def __init__(self, hooks=None):
        if hooks is None:
            hooks = []
        if isinstance(hooks, self.__class__):
            self.hooks = hooks.hooks
        else:
            self.hooks = list(hooks)

    def __iter__(self):
        for hook in self.hooks:
            yield hook

    def __len__(self):
        return len(self.hooks)

    def __repr__(self):
        return "<%s [%s]>" % (
            self.__class__.__name__,
            ", ".join(map(repr, self.hooks)),
        )

    def after_projection(self, layer, t, query, key, value):
        for hook in self.hooks:
            hook.after_projection(layer, t, query, key, value)

    def override(self, layer, t, query, key, value):
        temperature = 1.0
        for hook in self.hooks:
            query, key, value, factor = hook.override(layer, t, query, key, value)
            if factor != 1.0:
                temperature = temperature * factor
        return query, key, value, temperature

    def after_logits(self, layer, t, logits):
        for hook in self.hooks:
            hook.after_logits(layer, t, logits)


def merge_hooks(*hook_maps):
    """Merge several layer-id → hook maps, chaining hooks that target the same layer."""
    merged = {}
    for hook_map in hook_maps:
        for layer_id, hook in (hook_map or {}).items():
            if layer_id in merged:
                merged[layer_id] = HookCollection([merged[layer_id], hook])
            else:
                merged[layer_id] = hook
    return merged
