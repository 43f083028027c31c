import logging

import numpy as np
import pytest

from attloc.features import (LOG_FLOOR, AudioChunk, NormStats, apply_norm, fit_norm, frame_signal,
                             log_mel, mel_centers, mel_chunk, mel_filterbank, n_frames)


def sine(freq, n=64000, amp=0.5):
    return AudioChunk(amp * np.sin(2 * np.pi * freq * np.arange(n) / 16000))


@pytest.mark.parametrize("n", [1024, 1535, 1536, 5000, 64000, 64512])
def test_frame_count_formula(n):
    assert len(frame_signal(AudioChunk(np.zeros(n)))) == (n - 1024) // 512 + 1


def test_full_chunk_has_124_frames():
    assert n_frames(64000) == 124
    assert frame_signal(AudioChunk(np.zeros(64000))).shape == (124, 1024)


def test_single_window_boundary():
    assert frame_signal(AudioChunk(np.zeros(1024))).shape == (1, 1024)


def test_short_audio_is_rejected():
    with pytest.raises(ValueError, match="1023"):
        frame_signal(AudioChunk(np.zeros(1023)))


def test_audio_chunk_validation():
    with pytest.raises(ValueError, match="sample_rate=8000"):
        AudioChunk(np.zeros(2000), sample_rate=8000)
    with pytest.raises(ValueError):
        AudioChunk(np.zeros(64513))


def test_frames_are_hann_windowed_with_half_overlap():
    x = np.random.default_rng(0).uniform(-1, 1, 3000)
    fr = frame_signal(AudioChunk(x))
    w = np.hanning(1025)[:1024]    # periodic Hann
    np.testing.assert_allclose(fr[1], x[512:1536] * w, rtol=0, atol=1e-15)


def test_silence_hits_log_floor():
    out = log_mel(np.zeros((3, 1024)))
    assert out.shape == (3, 40)
    np.testing.assert_allclose(out, np.log(LOG_FLOOR), rtol=1e-12)
    assert abs(out[0, 0] - (-23.026)) < 1e-3


def test_1khz_sine_peaks_at_nearest_filter():
    mel = mel_chunk(sine(1000.0))
    nearest = int(np.argmin(np.abs(mel_centers() - 1000.0)))
    assert (mel.argmax(axis=1) == nearest).all()


def test_doubling_amplitude_adds_ln4():
    x = np.random.default_rng(1).uniform(-0.4, 0.4, 64000)
    a = mel_chunk(AudioChunk(x))
    b = mel_chunk(AudioChunk(2 * x))
    above = a > np.log(LOG_FLOOR) + 1
    np.testing.assert_allclose((b - a)[above], np.log(4.0), rtol=0, atol=1e-9)


def test_filterbank_rows_nonnegative_and_contiguous():
    fb = mel_filterbank()
    assert fb.shape == (40, 513)
    assert (fb >= 0).all()
    for row in fb:
        nz = np.flatnonzero(row)
        assert len(nz) >= 1
        assert (np.diff(nz) == 1).all()
        assert row.max() <= 1.0


def test_pipeline_deterministic():
    x = AudioChunk(np.random.default_rng(5).uniform(-1, 1, 64000))
    assert np.array_equal(mel_chunk(x), mel_chunk(AudioChunk(x.samples.copy())))


def test_norm_constant_corpus_to_zero():
    chunks = [np.full((5, 40), 3.0), np.full((4, 40), 3.0)]
    stats = fit_norm(chunks)
    assert np.array_equal(apply_norm(chunks[0], stats), np.zeros((5, 40)))


def test_norm_identity():
    x = np.random.default_rng(0).standard_normal((6, 40))
    stats = NormStats(np.zeros(40), np.ones(40))
    assert np.array_equal(apply_norm(x, stats), x)


def test_norm_hand_values():
    stats = fit_norm([np.zeros((1, 40)), np.full((1, 40), 2.0)])
    np.testing.assert_allclose(stats.mean, 1.0, rtol=1e-12)
    np.testing.assert_allclose(stats.std, 1.0, rtol=1e-12)
    np.testing.assert_allclose(apply_norm(np.zeros((1, 40)), stats), -1.0, rtol=1e-12)
    np.testing.assert_allclose(apply_norm(np.full((1, 40), 2.0), stats), 1.0, rtol=1e-12)


def test_norm_degenerate_bin_clamped_with_warning(caplog):
    a = np.random.default_rng(0).standard_normal((4, 40))
    b = np.random.default_rng(1).standard_normal((4, 40))
    a[:, 3] = b[:, 3] = 7.0
    with caplog.at_level(logging.WARNING):
        stats = fit_norm([a, b])
    assert stats.std[3] == 1e-6
    assert "clamping" in caplog.text


def test_norm_needs_two_chunks():
    with pytest.raises(ValueError):
        fit_norm([np.zeros((3, 40))])
