"""Experiment configuration, orchestration and the command-line surface.

Submodules are imported explicitly (``from ionreadout.harness.config import
load_config``); this package deliberately imports nothing so that the model
modules can use `streams` without pulling in the orchestration layer.
"""
