import numpy as np
import pytest

from beatdiff.audio import (CLIP_SAMPLES, FRAMES, MEL_BINS, NATURAL_FRAMES,
                            SAMPLE_RATE, MelSpectrogram, MelSpectrogramCodec,
                            Waveform, mel_bin_centers, mel_filterbank, mel_to_wav,
                            read_mel, read_wav, wav_to_mel, write_mel, write_wav)

SR = SAMPLE_RATE


def sine(freq, amp=0.8, duration=5.0):
    ts = np.arange(int(round(duration * SR))) / SR
    return Waveform(amp * np.sin(2 * np.pi * freq * ts))


def click_track(rate_hz=2.0, duration=5.0, amp=1.0):
    x = np.zeros(int(round(duration * SR)))
    period = 1.0 / rate_hz
    k = 0
    while k * period < duration - 1e-9:
        start = int(round(k * period * SR))
        n = min(60, len(x) - start)
        x[start:start + n] += amp * np.exp(-np.arange(n) / 20.0)
        k += 1
    return Waveform(np.clip(x, -1, 1))


class TestWavToMel:
    def test_silence_is_constant_floor(self):
        m = wav_to_mel(Waveform(np.zeros(CLIP_SAMPLES)))
        assert m.values.shape == (MEL_BINS, FRAMES)
        np.testing.assert_array_equal(m.values, 0.0)
        assert m.norm_min == m.norm_max == 0.0

    def test_sine_band_maps_back_to_440(self):
        m = wav_to_mel(sine(440.0))
        band = m.values[:, :NATURAL_FRAMES].mean(axis=1)
        centers = mel_bin_centers()
        k = int(band.argmax())
        bin_width = centers[k + 1] - centers[k]
        assert abs(centers[k] - 440.0) <= bin_width

    def test_click_track_stripes_at_expected_frames(self):
        m = wav_to_mel(click_track(2.0))
        energy = m.values[:, :NATURAL_FRAMES].sum(axis=0)
        strongest = set(np.argsort(energy)[-10:].tolist())
        expected = {round(k * 0.5 * SR / 512) for k in range(10)}
        assert strongest == expected

    def test_rejects_wrong_rate_and_empty_and_duration(self):
        with pytest.raises(ValueError, match="22050"):
            wav_to_mel(Waveform(np.zeros(44100 * 5), sample_rate=44100))
        with pytest.raises(ValueError, match="empty"):
            wav_to_mel(Waveform(np.array([]), sample_rate=SR))
        with pytest.raises(ValueError, match="duration"):
            wav_to_mel(sine(440, duration=4.0))

    def test_pads_and_crops_within_tolerance(self):
        short = wav_to_mel(sine(440, duration=4.95))
        long = wav_to_mel(sine(440, duration=5.05))
        assert short.values.shape == long.values.shape == (MEL_BINS, FRAMES)

    def test_deterministic(self):
        w = sine(523.25)
        a, b = wav_to_mel(w), wav_to_mel(w)
        np.testing.assert_array_equal(a.values, b.values)

    def test_shift_by_one_hop_shifts_one_frame(self):
        rng = np.random.default_rng(0)
        x = np.zeros(CLIP_SAMPLES)
        x[SR:3 * SR] = 0.3 * rng.standard_normal(2 * SR)
        delayed = np.concatenate([np.zeros(512), x[:-512]])
        m1, m2 = wav_to_mel(Waveform(x)), wav_to_mel(Waveform(delayed))
        np.testing.assert_allclose(m2.values[:, 1:NATURAL_FRAMES],
                                   m1.values[:, :NATURAL_FRAMES - 1], atol=1e-6)

    def test_pre_normalization_values_monotone_in_gain(self):
        w = sine(440, amp=0.4)
        louder = Waveform(w.samples * 2.0)
        quiet, loud = wav_to_mel(w).log_values(), wav_to_mel(louder).log_values()
        assert np.all(loud >= quiet - 1e-12)


class TestMelToWav:
    def test_round_trip_dominant_frequency(self):
        back = mel_to_wav(wav_to_mel(sine(440.0)), iterations=64)
        spec = np.abs(np.fft.rfft(back.samples))
        freqs = np.fft.rfftfreq(len(back.samples), 1.0 / SR)
        peak = freqs[spec.argmax()]
        assert abs(peak - 440.0) / 440.0 < 0.01

    def test_all_floor_is_near_silent(self):
        m = MelSpectrogram(values=np.zeros((MEL_BINS, FRAMES)), norm_min=0.0, norm_max=14.0)
        out = mel_to_wav(m, iterations=4)
        assert np.sqrt(np.mean(out.samples ** 2)) < 1e-3

    def test_output_length_exactly_five_seconds(self):
        out = mel_to_wav(wav_to_mel(sine(200.0)), iterations=2)
        assert len(out.samples) == CLIP_SAMPLES
        assert out.sample_rate == SR

    def test_rejects_non_finite(self):
        bad = np.zeros((MEL_BINS, FRAMES))
        bad[0, 0] = np.nan
        with pytest.raises(ValueError):
            MelSpectrogram(values=bad)

    def test_deterministic(self):
        m = wav_to_mel(click_track(2.0))
        a, b = mel_to_wav(m, 8), mel_to_wav(m, 8)
        np.testing.assert_array_equal(a.samples, b.samples)


class TestWavFiles:
    def test_write_read_within_one_lsb(self, tmp_path):
        w = sine(440, amp=0.7, duration=5.0)
        write_wav(tmp_path / "x.wav", w)
        back = read_wav(tmp_path / "x.wav")
        assert back.sample_rate == SR
        np.testing.assert_allclose(back.samples, w.samples, atol=1.0 / 32767)

    def test_rejects_wrong_rate(self, tmp_path):
        import wave

        with wave.open(str(tmp_path / "bad.wav"), "wb") as f:
            f.setnchannels(1)
            f.setsampwidth(2)
            f.setframerate(44100)
            f.writeframes(b"\x00\x00" * 100)
        with pytest.raises(ValueError, match="22050"):
            read_wav(tmp_path / "bad.wav")

    def test_rejects_stereo(self, tmp_path):
        import wave

        with wave.open(str(tmp_path / "st.wav"), "wb") as f:
            f.setnchannels(2)
            f.setsampwidth(2)
            f.setframerate(SR)
            f.writeframes(b"\x00\x00\x00\x00" * 100)
        with pytest.raises(ValueError, match="mono"):
            read_wav(tmp_path / "st.wav")

    def test_rejects_malformed_file(self, tmp_path):
        (tmp_path / "junk.wav").write_bytes(b"this is not audio")
        with pytest.raises(ValueError, match="malformed"):
            read_wav(tmp_path / "junk.wav")

    def test_clipped_input_saturates(self, tmp_path):
        w = Waveform(np.array([1.5, -1.5, 0.0] + [0.0] * 7))
        write_wav(tmp_path / "clip.wav", w)
        back = read_wav(tmp_path / "clip.wav")
        assert back.samples[0] == pytest.approx(1.0, abs=1e-4)
        assert back.samples[1] == pytest.approx(-32768 / 32767, abs=1e-6)


class TestMelContainer:
    def test_round_trip_values_and_bounds(self, tmp_path):
        m = wav_to_mel(click_track(2.0))
        write_mel(tmp_path / "m.mel", m)
        back = read_mel(tmp_path / "m.mel")
        np.testing.assert_allclose(back.values, m.values, atol=2e-7)
        assert back.norm_min == pytest.approx(m.norm_min, abs=1e-6)
        assert back.norm_max == pytest.approx(m.norm_max, abs=1e-5)
        assert (back.sr, back.hop, back.fft_size) == (m.sr, m.hop, m.fft_size)

    def test_rejects_bad_magic_and_truncation(self, tmp_path):
        (tmp_path / "junk.mel").write_bytes(b"\x00" * 64)
        with pytest.raises(ValueError, match="container"):
            read_mel(tmp_path / "junk.mel")
        m = wav_to_mel(click_track(2.0))
        write_mel(tmp_path / "m.mel", m)
        data = (tmp_path / "m.mel").read_bytes()
        (tmp_path / "trunc.mel").write_bytes(data[:1000])
        with pytest.raises(ValueError, match="truncated"):
            read_mel(tmp_path / "trunc.mel")


class TestFilterbank:
    def test_shape_and_peak_normalization(self):
        fb = mel_filterbank()
        assert fb.shape == (MEL_BINS, 1025)
        assert fb.max() <= 1.0 + 1e-12
        assert np.all(fb >= 0)


class TestCodecEstimator:
    def test_transform_inverse_shapes(self):
        codec = MelSpectrogramCodec(griffin_lim_iters=2)
        X = codec.fit_transform([sine(440), click_track(2.0)])
        assert X.shape == (2, MEL_BINS, FRAMES)
        waves = codec.inverse_transform(X)
        assert len(waves) == 2 and all(len(w.samples) == CLIP_SAMPLES for w in waves)

    def test_sklearn_params(self):
        from sklearn.base import clone

        codec = MelSpectrogramCodec(griffin_lim_iters=8, log_max=12.0)
        assert codec.get_params() == {"griffin_lim_iters": 8, "log_max": 12.0}
        assert clone(codec).get_params() == codec.get_params()
