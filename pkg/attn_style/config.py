"""Config module contains the options dictionary every configurable object of the package is built on.

Options work the same way everywhere: a class lists its `defaults`, an instance copies them into
`options` and updates them with what the caller passed. Unknown option names are rejected and values are
validated eagerly, so a constructed configuration is always usable.
"""
import copy

from attn_style.exc import ConfigurationError


class Options(object):
    """Base class of the configuration objects.

    :param options: A dictionary of option values overriding `defaults`. (Default value = None)
    :param kwargs: Individual option values, applied after `options`.
    """

    defaults = {}

    def __init__(self, options=None, **kwargs):
        self.options = copy.deepcopy(self.defaults)
        given = dict(options or {})
        given.update(kwargs)
        unknown = sorted(set(given) - set(self.defaults))
        if unknown:
            raise ConfigurationError(
                "Unknown %s option(s): %s" % (self.__class__.__name__, ", ".join(unknown))
            )
        self.options.update(given)
        self.validate()

    def __getattr__(self, name):
        defaults = type(self).defaults
        if name in defaults and "options" in self.__dict__:
            return self.options[name]
        raise AttributeError(name)

    def option(self, name):
        """Return the value of given option.

        :param name: name of the option
        :raises KeyError: if no such option exists
        """
        return self.options[name]

    def validate(self):
        pass

    def replace(self, **changes):
        """Return a copy of this configuration with some options changed."""
        options = copy.deepcopy(self.options)
        options.update(changes)
        return self.__class__(options)

    def as_dict(self):
        """Return a JSON serializable copy of the options."""
        return {name: _plain(value) for name, value in self.options.items()}

    def __eq__(self, other):
        return type(self) is type(other) and self.as_dict() == other.as_dict()

    def __ne__(self, other):
        return not (self == other)

    def __repr__(self):
        return "<%s %r>" % (self.__class__.__name__, self.as_dict())


def _plain(value):
    if isinstance(value, (set, frozenset)):
        return sorted(_plain(v) for v in value)
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value
