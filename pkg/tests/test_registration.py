from pytest import raises


def test_name_variations():
    from ckdtrack.registration import name_variations

    assert name_variations("ce_rgb_only") == [
        "ce_rgb_only",
        "ceRgbOnly",
        "CeRgbOnly",
        "ce-rgb-only",
        "cergbonly",
    ]
    assert name_variations("mce", None) == ["mce", "Mce"]


def test_registrator_stores_name_variations_and_aliases():
    from ckdtrack.registration import registrator

    registry = {}

    @registrator(registry=registry, loglevel=None)
    def register_thing(function):
        return function

    @register_thing(name="alias")
    def some_thing():
        return 42

    assert {"alias", "some_thing", "someThing", "some-thing", "something"} <= set(
        registry
    )
    assert registry["alias"]() == 42
    assert registry["some-thing"] is registry["alias"]


def test_registrator_keeps_first_registration():
    from ckdtrack.registration import registrator

    registry = {}

    @registrator(registry=registry, loglevel=None)
    def register_thing(function):
        return function

    @register_thing(vary_name=False)
    def first():
        return 1

    @register_thing(name="first", vary_name=False)
    def second():
        return 2

    assert registry["first"]() == 1

    @register_thing(name="first", vary_name=False, overwrite=True)
    def third():
        return 3

    assert registry["first"]() == 3


def test_registrator_needs_a_registry():
    from ckdtrack.registration import registrator

    with raises(Exception, match="registry"):

        @registrator
        def register_nothing(function):
            return function


def test_registered_functions_log(caplog):
    from logging import DEBUG

    from ckdtrack.registration import registrator

    registry = {}

    @registrator(registry=registry, logname="schedule", loglevel="debug")
    def register_schedule(function):
        return function

    @register_schedule
    def flat(rate):
        return rate

    with caplog.at_level(DEBUG, logger=__name__):
        assert registry["flat"](0.5) == 0.5
    assert "Computing schedule: flat" in caplog.text


def test_lookup():
    from ckdtrack.errors import ConfigurationError
    from ckdtrack.registration import lookup

    registry = {"sd+cd": 1, "ckd": 2, "Ckd": 2}
    assert lookup(registry, "SD+CD") == 1
    assert lookup(registry, "Ckd") == 2
    with raises(ConfigurationError, match="Unknown variant 'kd'. Known: ckd, sd\\+cd"):
        lookup(registry, "kd", "variant")


def test_project_registries_are_filled():
    from ckdtrack.decorators import SETTINGS_CHECKS
    from ckdtrack.elimination import ELIMINATION_MODES
    from ckdtrack.outputs.sinks import OUTPUT_SINKS
    from ckdtrack.readers import read_settings
    from ckdtrack.sequences import STYLE_PRESETS
    from ckdtrack.variants import VARIANTS

    assert {"baseline", "sd", "sd+cd", "sd+cd+mm", "ckd", "in", "fd"} <= set(VARIANTS)
    assert {"mce", "ce", "ce_rgb_only"} <= set(ELIMINATION_MODES)
    assert {"csv", "json"} <= set(OUTPUT_SINKS)
    assert "default" in STYLE_PRESETS
    assert read_settings().train.variant in VARIANTS
    assert {"check_train", "check_elimination", "check_data"} <= set(SETTINGS_CHECKS)
