import pytest

from shortcutlab.synth import CueSpec, DatasetConfig, generate_dataset


def small_config(**kw):
    kw.setdefault("image_height", 16)
    kw.setdefault("image_width", 16)
    kw.setdefault("train_per_class", 40)
    kw.setdefault("val_total", 32)
    kw.setdefault("test_total", 32)
    kw.setdefault("cues", (CueSpec("background", 0.8), CueSpec("coobject", 0.8)))
    return DatasetConfig(**kw)


@pytest.fixture(scope="session")
def tiny():
    return generate_dataset(small_config())


@pytest.fixture(scope="session")
def tiny_wm():
    cues = (CueSpec("background", 0.8), CueSpec("coobject", 0.8), CueSpec("watermark", 0.8))
    return generate_dataset(small_config(cues=cues))
