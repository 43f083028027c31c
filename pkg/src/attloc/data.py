"""Audio ingestion, tag manifests and a synthetic scene generator.

Tags are ordered ``b c f m o p v`` (broadband noise, child speech, adult
female speech, adult male speech, other, percussive, TV/video game).
"""

import csv
import os
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import (CHUNK_SAMPLES, HOP, SAMPLE_RATE, WIN, AudioChunk, apply_norm,
                       mel_chunk, n_frames)

TAGS = "bcfmopv"
N_TAGS = len(TAGS)


class DataError(Exception):
    """Malformed audio, manifest or ground-truth input."""


# ---------------------------------------------------------------- labels


def parse_tags(text):
    """Tag string such as ``"cp"`` -> 7-vector of 0/1 floats."""
    bits = np.zeros(N_TAGS)
    for ch in text.strip():
        if ch not in TAGS:
            raise DataError(f"unknown tag {ch!r}")
        i = TAGS.index(ch)
        if bits[i]:
            raise DataError(f"duplicate tag {ch!r}")
        bits[i] = 1.0
    return bits


def format_tags(bits):
    return "".join(t for t, b in zip(TAGS, bits) if b)


# ---------------------------------------------------------------- WAV


def read_wav(path):
    """Read a PCM16 mono 16 kHz WAV into an AudioChunk scaled to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            n = w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a readable RIFF/WAVE PCM file ({exc})") from exc
    if channels != 1:
        raise DataError(f"{path}: channels={channels}, expected 1")
    if width != 2:
        raise DataError(f"{path}: sample_width={8 * width} bits, expected 16")
    if rate != SAMPLE_RATE:
        raise DataError(f"{path}: sample_rate={rate}, expected {SAMPLE_RATE}")
    if len(raw) != 2 * n:
        raise DataError(f"{path}: truncated data, header says {n} samples, found {len(raw) // 2}")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    try:
        return AudioChunk(samples)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_wav(path, samples, sample_rate=SAMPLE_RATE):
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


# ---------------------------------------------------------------- manifests


@dataclass
class ManifestRow:
    path: Path
    label: np.ndarray


def parse_manifest(path):
    """Read a ``path,tags`` CSV; relative audio paths resolve against its folder."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "tags"]:
            raise DataError(f"{path}: expected header 'path,tags', got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 2:
                raise DataError(f"{path}: row {lineno}: expected 2 fields, got {len(rec)}")
            try:
                label = parse_tags(rec[1])
            except DataError as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from None
            audio = Path(rec[0])
            if not audio.is_absolute():
                audio = path.parent / audio
            rows.append(ManifestRow(audio, label))
    return rows


def write_manifest(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["path", "tags"])
        for audio, label in rows:
            w.writerow([audio, format_tags(label)])


def load_features(manifest):
    """Unnormalized (T, 40) log-mel chunk and label for every manifest row."""
    out = []
    for row in manifest:
        if not row.path.is_file():
            raise DataError(f"audio file not found: {row.path}")
        out.append((mel_chunk(read_wav(row.path)), row.label))
    return out


def load_dataset(manifest, norm=None):
    items = load_features(manifest)
    if norm is not None:
        items = [(apply_norm(x, norm), y) for x, y in items]
    return items


# ---------------------------------------------------------------- synthetic scenes


@dataclass
class SynthChunk:
    audio: AudioChunk
    label: np.ndarray
    intervals: list   # (event_index, start_frame, end_frame), end exclusive


EVENT_RMS = 0.1
MIN_DUR, MAX_DUR = 0.3, 1.5
MAX_EVENTS = 3


def pink_noise(rng, n):
    """1/f-power noise by spectral shaping of white noise, unit RMS."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n)
    return x / np.sqrt(np.mean(x * x))


def _bandpass_noise(rng, n, lo, hi):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    spec[(f < lo) | (f > hi)] = 0.0
    return np.fft.irfft(spec, n)


def prototype(event, n, rng):
    """Raw waveform of ``n`` samples for tag index ``event`` (unnormalized)."""
    t = np.arange(n) / SAMPLE_RATE
    phase = rng.uniform(0, 2 * np.pi)
    if event == 0:      # b: fixed-frequency tone
        return np.sin(2 * np.pi * 3000.0 * t + phase)
    if event == 1:      # c: harmonic stack
        return sum(np.sin(2 * np.pi * 300.0 * k * t + phase * k) / k for k in range(1, 6))
    if event == 2:      # f: band-limited noise burst
        return _bandpass_noise(rng, n, 5000.0, 7000.0)
    if event == 3:      # m: rising chirp 3500 -> 4500 Hz
        dur = n / SAMPLE_RATE
        return np.sin(2 * np.pi * (3500.0 * t + 0.5 * (1000.0 / dur) * t * t) + phase)
    if event == 4:      # o: amplitude-modulated tone
        return (1.0 + 0.9 * np.sin(2 * np.pi * 8.0 * t)) * np.sin(2 * np.pi * 2000.0 * t + phase)
    if event == 5:      # p: click train, one decaying click every 40 ms
        x = np.zeros(n)
        click = np.exp(-np.arange(32) / 4.0) * rng.choice([-1.0, 1.0], size=32)
        for s in range(0, n, int(0.04 * SAMPLE_RATE)):
            seg = click[:n - s]
            x[s:s + len(seg)] += seg
        return x
    if event == 6:      # v: low tone
        return np.sin(2 * np.pi * 150.0 * t + phase)
    raise ValueError(f"event index {event} out of range")


def samples_to_frames(start, end, total=CHUNK_SAMPLES):
    """Frames whose window centre falls in [start, end) samples."""
    t = n_frames(total)
    centre = WIN // 2
    first = min(t - 1, max(0, -(-(start - centre) // HOP)))
    last = min(t, max(0, -(-(end - centre) // HOP)))
    return first, max(last, first + 1)


def synth_chunk(rng, snr_db):
    n = CHUNK_SAMPLES
    k = int(rng.integers(0, MAX_EVENTS + 1))
    events = sorted(int(e) for e in rng.choice(N_TAGS, size=k, replace=False))
    bg_rms = EVENT_RMS * 10.0 ** (-snr_db / 20.0)
    x = bg_rms * pink_noise(rng, n)
    label = np.zeros(N_TAGS)
    intervals = []
    for e in events:
        dur = int(round(rng.uniform(MIN_DUR, MAX_DUR) * SAMPLE_RATE))
        onset = int(rng.integers(0, n - dur + 1))
        wav = prototype(e, dur, rng)
        ramp = min(160, dur // 4)
        env = np.ones(dur)
        env[:ramp] = np.linspace(0.0, 1.0, ramp)
        env[dur - ramp:] = np.linspace(1.0, 0.0, ramp)
        wav = wav * EVENT_RMS / np.sqrt(np.mean(wav * wav)) * env
        x[onset:onset + dur] += wav
        label[e] = 1.0
        intervals.append((e, *samples_to_frames(onset, onset + dur)))
    return SynthChunk(AudioChunk(np.clip(x, -1.0, 1.0 - 1.0 / 32768)), label, intervals)


def synth_corpus(rng_or_seed, n_chunks, snr_db=10.0):
    """``n_chunks`` synthetic chunks; each uses its own stream split from the master."""
    if n_chunks < 1:
        raise ValueError(f"n_chunks must be >= 1, got {n_chunks}")
    if isinstance(rng_or_seed, np.random.Generator):
        root = rng_or_seed.bit_generator.seed_seq
    else:
        root = np.random.SeedSequence(int(rng_or_seed))
    return [synth_chunk(np.random.Generator(np.random.PCG64(s)), snr_db)
            for s in root.spawn(n_chunks)]


def write_corpus(out_dir, chunks, prefix="chunk"):
    """Write WAVs, ``manifest.csv`` and ``truth.csv``; returns the paths written."""
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    rows, truth = [], []
    for i, c in enumerate(chunks):
        name = f"{prefix}{i:05d}.wav"
        write_wav(out_dir / name, c.audio.samples)
        rows.append((name, c.label))
        for e, s, t in c.intervals:
            truth.append((name, TAGS[e], s, t))
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    truth_path = out_dir / "truth.csv"
    with open(truth_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["path", "event", "start_frame", "end_frame"])
        w.writerows(truth)
    return manifest, truth_path


def read_truth(path):
    """Ground-truth CSV -> {audio file name: [(event_index, start, end), ...]}."""
    out = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for lineno, rec in enumerate(reader, start=2):
            try:
                iv = (TAGS.index(rec["event"]), int(rec["start_frame"]), int(rec["end_frame"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from None
            out.setdefault(rec["path"], []).append(iv)
    return out
