"""Registrators that make named strategies pluggable.

Ablation variants, elimination modes, output sinks, synthetic style presets and
settings checks are all looked up by name from the settings file or the command-line.
Each kind of strategy owns a registry (a plain dictionary), and a decorator created
with :py:func:`registrator` to fill it.
"""
__all__ = ["registrator", "name_variations", "lookup"]

from typing import (
    Any,
    Callable,
    Mapping,
    MutableMapping,
    Optional,
    Sequence,
    Text,
    Union,
)


def name_variations(*args):
    """Standard name variations when registering strategies.

    >>> name_variations("sd_cd_mm")
    ['sd_cd_mm', 'sdCdMm', 'SdCdMm', 'sd-cd-mm', 'sdcdmm']
    """

    def camelCase(name):
        comps = name.split("_")
        return comps[0] + "".join(x.title() for x in comps[1:])

    def CamelCase(name):  # noqa
        return "".join(x.title() for x in name.split("_"))

    def kebab_case(name):
        return name.replace("_", "-")

    def nospacecase(name):
        return name.replace("_", "")

    # first name is the most likely variation
    names = [a for a in args if a is not None]
    names += (
        [camelCase(n) for n in names]
        + [CamelCase(n) for n in names]
        + [kebab_case(n) for n in names]
        + [nospacecase(n) for n in names]
    )
    ordered = []
    for n in names:
        if n not in ordered:
            ordered.append(n)
    return ordered


def lookup(registry: Mapping[Text, Any], name: Text, kind: Text = "strategy") -> Any:
    """Case-insensitive lookup in a registry.

    Unknown names raise a :py:class:`~ckdtrack.errors.ConfigurationError` listing
    what is available.

    >>> from ckdtrack.registration import lookup
    >>> lookup({"mce": 1, "ce": 2}, "MCE", "elimination mode")
    1
    >>> lookup({"mce": 1}, "cme", "elimination mode")
    Traceback (most recent call last):
    ...
    ckdtrack.errors.ConfigurationError: Unknown elimination mode 'cme'. Known: mce
    """
    from ckdtrack.errors import ConfigurationError

    if name in registry:
        return registry[name]
    lowered = {k.lower(): v for k, v in registry.items()}
    if name.lower() in lowered:
        return lowered[name.lower()]
    known = ", ".join(sorted({k for k in registry if k == k.lower()}))
    raise ConfigurationError(f"Unknown {kind} '{name}'. Known: {known}")


def registrator(
    decorator: Optional[Callable] = None,
    registry: Optional[MutableMapping] = None,
    logname: Optional[Text] = None,
    loglevel: Optional[Text] = "debug",
) -> Callable:
    """A decorator to create a decorator that registers functions.

    This is a decorator that takes another decorator as an argument. It standardizes
    how strategies are registered: the resulting decorator stores the function under
    its name, its name variations and any alias given, and the stored function emits
    a standard log message each time it is called.

    Example:
        First declare a registry. It is usually owned by a module, hence the
        all-caps:

        >>> SCHEDULES = {}

        Then create the registrator:

        >>> from ckdtrack.registration import registrator
        >>> @registrator(registry=SCHEDULES, logname='schedule', loglevel='info')
        ... def register_schedule(function):
        ...     return function

        Functions can now be registered, optionally with aliases:

        >>> @register_schedule(name='flat')
        ... def constant_rate(step, rate):
        ...     return rate

        They are available under their name, its variations and the alias:

        >>> SCHEDULES['constant_rate'](10, 0.1)
        0.1
        >>> SCHEDULES['constant-rate'] is SCHEDULES['flat']
        True

        The decorator given to the registrator may also transform the registered
        function. Here, every schedule is made to return a plain float:

        >>> @registrator(registry=SCHEDULES)
        ... def register_float_schedule(function):
        ...     from functools import wraps
        ...
        ...     @wraps(function)
        ...     def decorated(step, rate) -> float:
        ...         return float(function(step, rate))
        ...
        ...     return decorated

        >>> @register_float_schedule
        ... def halving(step, rate):
        ...     return rate / 2 ** (step // 100)

        >>> SCHEDULES['halving'](200, 1)
        0.25
    """
    from functools import wraps

    # allows specifying the registry as a keyword argument
    if decorator is None:
        return lambda x: registrator(
            x, loglevel=loglevel, logname=logname, registry=registry
        )

    if registry is None:
        raise Exception("registry keyword must be given and cannot be None")

    if logname is None:
        logname = decorator.__name__.replace("register_", "").replace("_", " ")

    @wraps(decorator)
    def register(
        function=None,
        name: Optional[Union[Text, Sequence[Text]]] = None,
        vary_name: bool = True,
        overwrite: bool = False,
    ):
        from inspect import isclass, signature
        from logging import getLogger

        # allows specifying the registered name as a keyword argument
        if function is None:
            return lambda x: register(
                x, name=name, vary_name=vary_name, overwrite=overwrite
            )

        if name is None:
            names = [function.__name__]
        elif isinstance(name, Text):
            names = [name, function.__name__]
        else:
            names = list(name) + [function.__name__]

        logger = getLogger(function.__module__)
        msg = "Computing {}: {}".format(logname, names[0])

        assert decorator is not None
        if "name" in signature(decorator).parameters:
            inner_decorated = decorator(function, names[0])
        else:
            inner_decorated = decorator(function)

        if not isclass(function):

            @wraps(function)
            def decorated(*args, **kwargs):
                if loglevel is not None and hasattr(logger, loglevel.lower()):
                    getattr(logger, loglevel.lower())(msg)
                return inner_decorated(*args, **kwargs)

        else:
            decorated = inner_decorated

        assert registry is not None
        keys = name_variations(*names) if vary_name else names
        for key in keys:
            if key in registry and not overwrite:
                getLogger(__name__).warning(
                    f"A {logname} with the name {key} already exists"
                )
                return decorated
            registry[key] = decorated

        return decorated

    return register
