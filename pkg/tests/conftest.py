import numpy as np
import pytest

from xlmerge import AdapterMeta, AdapterSet, Ia3Layer, LoraLayer, PrefixLayer

ACCEPTANCE_LINES: list[str] = []

LORA_PATHS = ("layers.0.W^Q", "layers.0.W^K", "layers.0.W^V", "layers.0.W_1")


def lora_set(rng, paths=LORA_PATHS, d=6, k=5, r=2, language="en", task="qa", dtype=np.float64):
    layers = {
        p: LoraLayer(rng.standard_normal((d, r)).astype(dtype), rng.standard_normal((r, k)).astype(dtype))
        for p in paths
    }
    return AdapterSet("lora", layers, AdapterMeta(language=language, task=task, base_model="toy"))


def ia3_set(rng, paths=("layers.0.W^K", "layers.0.W^V", "layers.0.W_2"), k=5, language="en", task="qa"):
    layers = {p: Ia3Layer(rng.uniform(0.5, 2.0, k)) for p in paths}
    return AdapterSet("ia3", layers, AdapterMeta(language=language, task=task, base_model="toy"))


def prefix_set(rng, paths=("layers.0.prefix", "layers.1.prefix"), m=4, d=4, language="en", task="qa"):
    layers = {p: PrefixLayer(rng.standard_normal((m, d))) for p in paths}
    return AdapterSet("prefix", layers, AdapterMeta(language=language, task=task, base_model="toy"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
