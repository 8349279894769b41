import math
import wave

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weaksep import dsp
from weaksep.dsp import ComplexSpectrogram, SilentClipError, Spectrogram, Waveform


def random_waveform(seed, n=8000, scale=0.3):
    return Waveform(np.random.default_rng(seed).uniform(-scale, scale, n))


# ---------------------------------------------------------------------------
# stft
# ---------------------------------------------------------------------------


def test_stft_zero_input_gives_zero_grid():
    s = dsp.stft(Waveform(np.zeros(8000)))
    assert s.shape == (30, 257)
    assert np.all(s.values == 0)


@given(n=st.integers(min_value=512, max_value=12000))
@settings(max_examples=30, deadline=None)
def test_stft_frame_count_formula(n):
    s = dsp.stft(Waveform(np.ones(n) * 0.1))
    assert s.shape == ((n - 512) // 256 + 1, 257)


def test_stft_one_second_clip_is_30_by_257():
    assert dsp.stft(random_waveform(0)).shape == (30, 257)


def test_stft_rejects_short_input():
    with pytest.raises(ValueError, match="input too short"):
        dsp.stft(Waveform(np.zeros(511)))


def test_stft_rejects_bad_framing():
    w = Waveform(np.zeros(2000))
    with pytest.raises(ValueError, match="even"):
        dsp.stft(w, window_size=511)
    with pytest.raises(ValueError, match="hop"):
        dsp.stft(w, window_size=512, hop=128)


def test_stft_cosine_peaks_at_its_bin():
    # 500 Hz at 8 kHz with a 512-point transform lands exactly on bin 32
    t = np.arange(8000) / 8000.0
    s = dsp.stft(Waveform(0.5 * np.cos(2 * np.pi * 500.0 * t)))
    mags = np.abs(s.values)
    assert np.all(np.argmax(mags, axis=1) == 32)


@given(seed=st.integers(0, 2**32 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
@settings(max_examples=25, deadline=None)
def test_stft_linearity(seed, a, b):
    r = np.random.default_rng(seed)
    x, y = r.uniform(-0.3, 0.3, 2048), r.uniform(-0.3, 0.3, 2048)
    lhs = dsp.stft(Waveform(a * x + b * y)).values
    rhs = a * dsp.stft(Waveform(x)).values + b * dsp.stft(Waveform(y)).values
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * max(1.0, np.max(np.abs(rhs)))


# ---------------------------------------------------------------------------
# istft
# ---------------------------------------------------------------------------


def test_istft_of_zero_stft_is_zero():
    out = dsp.istft(dsp.stft(Waveform(np.zeros(8000))))
    assert np.all(out.samples == 0)
    assert len(out) == 29 * 256 + 512


def test_istft_all_zero_grid_is_all_zero_waveform():
    out = dsp.istft(ComplexSpectrogram(np.zeros((7, 257), dtype=complex), 512, 256))
    assert np.all(out.samples == 0)


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_istft_roundtrip_interior(seed):
    w = random_waveform(seed)
    back = dsp.istft(dsp.stft(w))
    interior = slice(512, len(back) - 512)
    assert np.max(np.abs(back.samples[interior] - w.samples[interior])) <= 1e-6


def test_istft_rejects_inconsistent_metadata():
    values = np.zeros((4, 257), dtype=complex)
    with pytest.raises(ValueError, match="inconsistent"):
        dsp.istft(ComplexSpectrogram(values, window_size=512, frame_hop=128))


def test_complex_spectrogram_validates_bin_count():
    with pytest.raises(ValueError, match="frequency bins"):
        ComplexSpectrogram(np.zeros((4, 100), dtype=complex), 512, 256)


# ---------------------------------------------------------------------------
# Wiener masks and reconstruction
# ---------------------------------------------------------------------------


def test_wiener_masks_identical_estimates_split_evenly():
    e = Spectrogram(np.random.default_rng(0).uniform(0.1, 1.0, (5, 7)))
    masks = dsp.wiener_masks([e, e])
    assert np.allclose(masks, 0.5, atol=1e-15)


def test_wiener_mask_scalar_example():
    # estimates 3 and 4 at a bin with mixture magnitude 10: 9/25 * 10 = 3.6
    m1 = dsp.wiener_masks([Spectrogram([[3.0]]), Spectrogram([[4.0]])])[0][0, 0]
    assert m1 * 10.0 == pytest.approx(3.6, rel=1e-12)


def test_wiener_masks_uniform_at_dead_bins():
    z = Spectrogram(np.zeros((2, 3)))
    masks = dsp.wiener_masks([z, z, z])
    assert np.all(masks == pytest.approx(1.0 / 3.0))


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 4))
@settings(max_examples=25, deadline=None)
def test_wiener_masks_partition_of_unity(seed, n):
    r = np.random.default_rng(seed)
    estimates = [Spectrogram(r.uniform(0, 1, (4, 6)) * (r.uniform(0, 1, (4, 6)) > 0.3)) for _ in range(n)]
    masks = dsp.wiener_masks(estimates)
    assert np.max(np.abs(masks.sum(axis=0) - 1.0)) <= 1e-12


def test_wiener_degenerate_component_passes_mixture_through():
    w = random_waveform(7)
    mixture = dsp.stft(w)
    alive = Spectrogram(np.random.default_rng(1).uniform(0.1, 1.0, mixture.shape))
    dead = Spectrogram(np.zeros(mixture.shape))
    outs = dsp.wiener_reconstruct([alive, dead], mixture)
    full = dsp.istft(mixture)
    np.testing.assert_array_equal(outs[0].samples, full.samples)
    assert np.all(outs[1].samples == 0)


def test_wiener_reconstruct_shape_mismatch():
    mixture = dsp.stft(random_waveform(0))
    with pytest.raises(ValueError, match="does not match"):
        dsp.wiener_reconstruct([Spectrogram(np.ones((2, 2)))], mixture)
    with pytest.raises(ValueError, match="at least one"):
        dsp.wiener_masks([])


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=10, deadline=None)
def test_magnitude_nonnegative(seed):
    r = np.random.default_rng(seed)
    values = r.normal(size=(3, 257)) + 1j * r.normal(size=(3, 257))
    mags = ComplexSpectrogram(values, 512, 256).magnitude()
    assert np.all(mags.mags >= 0)


# ---------------------------------------------------------------------------
# RMS
# ---------------------------------------------------------------------------


def test_rms_of_constant_and_normalize():
    w = Waveform(np.full(100, 2.0))
    assert dsp.rms(w) == pytest.approx(2.0)
    out = dsp.rms_normalize(w, 1.0)
    np.testing.assert_allclose(out.samples, 0.5 * w.samples)


def test_rms_normalize_identity_when_at_target():
    w = random_waveform(3)
    out = dsp.rms_normalize(w, dsp.rms(w))
    assert np.max(np.abs(out.samples - w.samples)) <= 1e-12


def test_rms_normalize_errors():
    with pytest.raises(SilentClipError, match="silent recording"):
        dsp.rms_normalize(Waveform(np.zeros(10)), 1.0)
    with pytest.raises(ValueError, match="positive"):
        dsp.rms_normalize(random_waveform(0), 0.0)


@given(seed=st.integers(0, 2**32 - 1), target=st.floats(1e-3, 10.0))
@settings(max_examples=25, deadline=None)
def test_rms_normalize_hits_target(seed, target):
    w = random_waveform(seed, n=500)
    assert dsp.rms(dsp.rms_normalize(w, target)) == pytest.approx(target, rel=1e-9)


# ---------------------------------------------------------------------------
# WAV I/O and resampling
# ---------------------------------------------------------------------------


def test_wav_roundtrip_is_exact_on_pcm_grid(tmp_path):
    ints = np.array([-32768, -1, 0, 1, 12345, 32767], dtype=np.int16)
    w = Waveform(ints.astype(np.float64) / 32767.0)
    path = tmp_path / "x.wav"
    dsp.write_wav(path, w)
    back = dsp.read_wav(path)
    np.testing.assert_array_equal(dsp.quantize_int16(back.samples), ints)
    assert back.sample_rate == 8000


def test_read_wav_rejects_stereo_and_8bit(tmp_path):
    stereo = tmp_path / "stereo.wav"
    with wave.open(str(stereo), "wb") as f:
        f.setnchannels(2)
        f.setsampwidth(2)
        f.setframerate(8000)
        f.writeframes(np.zeros(100, dtype=np.int16).tobytes())
    with pytest.raises(ValueError, match="mono"):
        dsp.read_wav(stereo)

    eight = tmp_path / "8bit.wav"
    with wave.open(str(eight), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(1)
        f.setframerate(8000)
        f.writeframes(np.zeros(100, dtype=np.uint8).tobytes())
    with pytest.raises(ValueError, match="16-bit PCM"):
        dsp.read_wav(eight)


def test_resample_halves_length_and_keeps_tone():
    t = np.arange(16000) / 16000.0
    w = Waveform(0.4 * np.sin(2 * np.pi * 440.0 * t), 16000)
    out = dsp.resample(w, 8000)
    assert out.sample_rate == 8000
    assert len(out) == 8000
    spectrum = np.abs(np.fft.rfft(out.samples[1000:5000] * np.hanning(4000)))
    peak_hz = np.argmax(spectrum) * 8000 / 4000
    assert abs(peak_hz - 440.0) < 5.0


def test_waveform_validation():
    with pytest.raises(ValueError, match="non-finite"):
        Waveform(np.array([0.0, np.nan]))
    with pytest.raises(ValueError, match="1-D"):
        Waveform(np.zeros((2, 2)))
    with pytest.raises(ValueError, match="negative"):
        Spectrogram(np.array([[-1.0, 0.0]]))
