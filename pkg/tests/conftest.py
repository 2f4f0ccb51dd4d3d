import numpy as np
import pytest

from layerprobe.bank import LayerSpec, SynthSpec, synth_bank


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mixed_layers():
    return (
        LayerSpec("seq_a", "sequence", (3, 4)),
        LayerSpec("conv_b", "conv", (2, 2, 5)),
        LayerSpec("seq_c", "sequence", (4, 3)),
    )


def make_spec(**overrides):
    base = dict(
        layers=(LayerSpec("l0", "sequence", (8, 4)), LayerSpec("l1", "sequence", (8, 4)),
                LayerSpec("l2", "sequence", (8, 4))),
        num_samples=24, num_classes=3, task="single_label", informative_layer=1, snr=5.0, seed=7,
    )
    base.update(overrides)
    return SynthSpec(**base)


@pytest.fixture
def small_bank(tmp_path):
    path = tmp_path / "bank"
    synth_bank(make_spec(), path)
    return path
