from os import getenv


if getenv("DEBUG"):
    # check datatypes with pydantic, somewhat slower
    from pydantic import ConfigDict
    from pydantic.dataclasses import dataclass as _dataclass

    _options = dict(slots=True, config=ConfigDict(arbitrary_types_allowed=True))
else:
    from dataclasses import dataclass as _dataclass

    _options = dict(slots=True)


dataclass = _dataclass(**_options)


def frozen(cls=None, /, *, eq=True):
    """Immutable variant of ``dataclass``. Pass ``eq=False`` for types holding arrays."""

    def wrap(cls):
        return _dataclass(cls, frozen=True, eq=eq, **_options)

    return wrap if cls is None else wrap(cls)
