import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from voxsep.dsp import (
    AudioClip,
    Spectrogram,
    consistency_curve,
    denormalize,
    frame_count,
    griffin_lim,
    istft,
    load_audio,
    normalize,
    resample,
    save_audio,
    stft,
)


def _write_wav(path, data, rate=22050, channels=1):
    import wave

    pcm = np.round(np.clip(data, -1, 1) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


class TestWavIO:
    def test_mono_identity(self, tmp_path):
        rng = np.random.default_rng(0)
        data = rng.uniform(-0.9, 0.9, 4410)
        p = tmp_path / "mono.wav"
        _write_wav(p, data, rate=44100)
        clip = load_audio(p)
        assert clip.sample_rate == 44100
        assert len(clip) == 4410

    def test_opposite_channels_cancel(self, tmp_path):
        rng = np.random.default_rng(1)
        x = rng.uniform(-0.5, 0.5, 1000)
        inter = np.empty(2000)
        inter[0::2] = x
        inter[1::2] = -x
        p = tmp_path / "st.wav"
        _write_wav(p, inter, channels=2)
        clip = load_audio(p)
        # averaging int16-quantized x and -x can leave at most half an LSB
        assert np.max(np.abs(clip.samples)) <= 0.5 / 32767

    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        clip = AudioClip(rng.uniform(-1, 1, 5000), 22050)
        p = tmp_path / "rt.wav"
        save_audio(clip, p)
        loaded = load_audio(p)
        assert loaded.sample_rate == 22050
        assert np.max(np.abs(loaded.samples - clip.samples)) <= 2.0 ** -15

    def test_rejects_wrong_width(self, tmp_path):
        import wave

        p = tmp_path / "w8.wav"
        with wave.open(str(p), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(1)
            w.setframerate(8000)
            w.writeframes(b"\x00" * 100)
        with pytest.raises(ValueError, match="16-bit"):
            load_audio(p)

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "bad.wav"
        p.write_bytes(b"not a wav at all")
        with pytest.raises(ValueError):
            load_audio(p)


class TestResample:
    def test_identity_rate(self):
        clip = AudioClip(np.linspace(-0.5, 0.5, 777), 22050)
        out = resample(clip, 22050)
        assert out.sample_rate == 22050
        assert_allclose(out.samples, clip.samples)

    def test_zero_clip(self):
        out = resample(AudioClip(np.zeros(4410), 44100), 22050)
        assert len(out) == 2205
        assert np.all(out.samples == 0)

    def test_sine_halfband(self):
        # 1 kHz sinusoid survives 44100 -> 22050 within 1e-3 away from edges
        sr, f = 44100, 1000.0
        n = np.arange(sr)  # one second
        clip = AudioClip(0.7 * np.sin(2 * np.pi * f * n / sr), sr)
        out = resample(clip, 22050, taps=64)
        assert len(out) == 22050
        m = np.arange(len(out))
        expected = 0.7 * np.sin(2 * np.pi * f * m / 22050)
        edge = 80
        assert np.max(np.abs(out.samples[edge:-edge] - expected[edge:-edge])) < 1e-3

    def test_output_length_rounding(self):
        clip = AudioClip(np.zeros(1001), 44100)
        out = resample(clip, 22050)
        assert len(out) == round(1001 * 22050 / 44100)


class TestStft:
    def test_zero_clip(self):
        spec = stft(AudioClip(np.zeros(2048), 22050))
        assert spec.magnitudes.shape == (257, frame_count(2048, 256))
        assert np.all(spec.magnitudes == 0)

    def test_frame_count_and_bins(self):
        spec = stft(AudioClip(np.random.default_rng(0).normal(0, 0.1, 1000), 22050))
        assert spec.num_bins == 257
        assert spec.num_frames == -(-1000 // 256) + 1

    def test_bin_center_sinusoid_argmax(self):
        sr, fft = 22050, 512
        k = 32
        n = np.arange(8 * fft)
        clip = AudioClip(0.5 * np.cos(2 * np.pi * k * n / fft), sr)
        spec = stft(clip, fft_size=fft)
        interior = spec.magnitudes[:, 2:-2]
        assert np.all(np.argmax(interior, axis=0) == k)

    def test_energy_conservation(self):
        # Parseval: per-frame full-spectrum energy equals N * windowed energy
        rng = np.random.default_rng(3)
        clip = AudioClip(rng.normal(0, 0.2, 3000).clip(-1, 1), 22050)
        fft = 512
        spec = stft(clip, fft_size=fft)
        w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(fft) / fft)
        # recompute windowed frames directly from the reflected signal
        pad = fft // 2
        n_frames = spec.num_frames
        pos = np.arange((n_frames - 1) * 256 + fft) - pad
        period = 2 * (len(clip) - 1)
        m = np.mod(pos, period)
        idx = np.where(m < len(clip), m, period - m)
        padded = clip.samples[idx]
        weights = np.full(257, 2.0)
        weights[0] = weights[-1] = 1.0
        for t in [0, n_frames // 2, n_frames - 1]:
            frame = padded[t * 256 : t * 256 + fft] * w
            spec_energy = np.sum(weights * spec.magnitudes[:, t] ** 2)
            assert_allclose(spec_energy, fft * np.sum(frame**2), rtol=1e-6)

    def test_magnitude_scale_linearity(self):
        rng = np.random.default_rng(4)
        x = rng.normal(0, 0.1, 2000)
        a = 3.5
        s1 = stft(AudioClip(x, 22050))
        s2 = stft(AudioClip(a * x / 4, 22050))  # keep in range
        assert_allclose(s2.magnitudes, (a / 4) * s1.magnitudes, rtol=1e-9, atol=1e-15)

    def test_empty_clip_fails(self):
        with pytest.raises(ValueError):
            stft(AudioClip(np.zeros(0), 22050))


class TestIstft:
    def test_roundtrip_exact(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-0.8, 0.8, 4 * 512 + 137)
        clip = AudioClip(x, 22050)
        rec = istft(stft(clip), sample_rate=22050)
        assert len(rec) == len(clip)
        assert np.max(np.abs(rec.samples - x)) < 1e-6

    def test_zero_spectrogram(self):
        spec = stft(AudioClip(np.zeros(3000), 22050))
        rec = istft(spec)
        assert np.all(rec.samples == 0)

    def test_magnitude_scaling_linearity(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(-0.4, 0.4, 3000)
        spec = stft(AudioClip(x, 22050))
        doubled = Spectrogram(
            2 * spec.magnitudes, spec.phases, spec.hop, spec.fft_size,
            num_samples=spec.num_samples,
        )
        rec = istft(doubled)
        assert np.max(np.abs(rec.samples - 2 * x)) < 1e-6

    def test_rejects_normalized(self):
        spec = stft(AudioClip(np.zeros(1000), 22050))
        bad = Spectrogram(
            normalize(spec.magnitudes), spec.phases, spec.hop, spec.fft_size,
            normalized=True, num_samples=spec.num_samples,
        )
        with pytest.raises(ValueError, match="unnormalized"):
            istft(bad)

    def test_rejects_inconsistent_geometry(self):
        spec = stft(AudioClip(np.zeros(1000), 22050))
        bad = Spectrogram(
            spec.magnitudes, spec.phases, spec.hop, spec.fft_size,
            num_samples=5 * spec.num_samples,
        )
        with pytest.raises(ValueError, match="inconsistent"):
            istft(bad)

    @given(st.integers(min_value=2100, max_value=6000), st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_roundtrip_property(self, n, seed):
        x = np.random.default_rng(seed).uniform(-1, 1, n)
        rec = istft(stft(AudioClip(x, 22050)))
        assert np.max(np.abs(rec.samples - x)) < 1e-6


class TestNormalize:
    def test_anchors(self):
        assert normalize(np.array([0.0]))[0] == 0.0
        assert_allclose(normalize(np.array([np.e - 1.0]))[0], 1.0, rtol=1e-12)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            normalize(np.array([-0.1]))

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_roundtrip(self, seed):
        mag = np.random.default_rng(seed).uniform(0, 1e3, (37, 11))
        back = denormalize(normalize(mag))
        assert np.max(np.abs(back - mag) / (1 + mag)) < 1e-9


class TestGriffinLim:
    def test_zero_iterations_keeps_phase(self):
        rng = np.random.default_rng(7)
        mag = rng.uniform(0, 1, (257, 9))
        phase = rng.uniform(-np.pi, np.pi, (257, 9))
        out = griffin_lim(mag, phase, iterations=0)
        assert_allclose(out.phases, phase)
        assert_allclose(out.magnitudes, mag)

    def test_consistent_input_is_fixed_point(self):
        rng = np.random.default_rng(8)
        clip = AudioClip(rng.uniform(-0.5, 0.5, 4000), 22050)
        spec = stft(clip)
        curve = consistency_curve(
            spec.magnitudes, spec.phases, iterations=10, num_samples=spec.num_samples
        )
        assert np.all(curve <= 1e-6)

    def test_random_magnitudes_monotone(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            mag = rng.uniform(0, 2, (129, 12))
            phase = rng.uniform(-np.pi, np.pi, (129, 12))
            curve = consistency_curve(mag, phase, iterations=10, fft_size=256)
            assert np.all(np.diff(curve) <= 1e-10 * (1 + curve[:-1]))

    def test_refinement_improves_over_zero_phase(self):
        rng = np.random.default_rng(10)
        clip = AudioClip(rng.uniform(-0.5, 0.5, 6000), 22050)
        spec = stft(clip)
        zero_phase = np.zeros_like(spec.phases)
        curve = consistency_curve(
            spec.magnitudes, zero_phase, iterations=10, num_samples=spec.num_samples
        )
        assert curve[-1] < curve[0]

    def test_rejects_negative_magnitudes(self):
        with pytest.raises(ValueError):
            griffin_lim(np.full((5, 4), -1.0), np.zeros((5, 4)), fft_size=8)
