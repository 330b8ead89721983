import numpy as np
import pytest
import torch

from pamt.audio import AudioClip, synth_tone


@pytest.fixture
def tone():
    return synth_tone(440.0, 1.0, 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


def peak_hz(clip: AudioClip, pad: int = 8) -> float:
    y = clip.samples * np.hanning(len(clip))
    mag = np.abs(np.fft.rfft(y, pad * len(clip)))
    i = int(np.argmax(mag))
    if 0 < i < mag.size - 1:
        a, b, c = np.log(mag[i - 1:i + 2] + 1e-300)
        i = i + 0.5 * (a - c) / (a - 2 * b + c)
    return i * clip.sample_rate_hz / (pad * len(clip))
