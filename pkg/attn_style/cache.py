"""Cache module contains AttentionCache, the immutable record of the attention features captured during a
 DDIM inversion pass.
"""
from collections.abc import Mapping
from types import MappingProxyType

from attn_style.exc import CacheMissError, ConfigurationError


ROLES = ("content", "style")


class AttentionCache(Mapping):
    """Immutable map from (timestep, layer-id) to captured Q/K/V tensors.

    The content role holds queries; the style role holds keys and values (and queries when the
    style-query variant is enabled).

    :param role: "content" or "style"
    :param entries: dict of (timestep, layer-id) → dict of component name ("q", "k", "v") → Tensor
    """

    def __init__(self, role, entries):
        if role not in ROLES:
            raise ConfigurationError("Unknown cache role %r" % role)
        self.role = role
        self._entries = MappingProxyType(
            {
                (int(t), layer_id): MappingProxyType(dict(tensors))
                for (t, layer_id), tensors in entries.items()
            }
        )

    def __getitem__(self, key):
        return self._entries[key]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __repr__(self):
        return "<AttentionCache role=%s entries=%d>" % (self.role, len(self))

    def lookup(self, t, layer_id, component):
        """Return one captured tensor.

        :raises CacheMissError: if nothing was captured for (t, layer_id, component)
        """
        try:
            return self._entries[(int(t), layer_id)][component]
        except KeyError:
            raise CacheMissError(
                "%s cache has no %r feature for timestep %s, layer %r" % (self.role, component, t, layer_id)
            )

    def check_complete(self, timesteps, layer_ids, components):
        """Verify there is exactly one entry per scheduled (timestep, layer) holding every component."""
        expected = {(int(t), layer_id) for t in timesteps for layer_id in layer_ids}
        missing = expected - set(self._entries)
        if missing:
            raise CacheMissError("%s cache misses %d scheduled entries, e.g. %r" % (
                self.role, len(missing), sorted(missing)[0]))
        extra = set(self._entries) - expected
        if extra:
            raise CacheMissError("%s cache holds %d unscheduled entries, e.g. %r" % (
                self.role, len(extra), sorted(extra)[0]))
        for key in expected:
            for component in components:
                self.lookup(key[0], key[1], component)

    @property
    def nbytes(self):
        return sum(tensor.numpy().nbytes for tensors in self._entries.values() for tensor in tensors.values())
