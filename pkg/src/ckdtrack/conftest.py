from pytest import fixture


@fixture(autouse=True)
def add_np(doctest_namespace):
    import numpy
    import pandas
    import torch

    doctest_namespace["np"] = numpy
    doctest_namespace["pd"] = pandas
    doctest_namespace["torch"] = torch
