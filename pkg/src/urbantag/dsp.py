"""WAV ingestion and log-mel spectrogram extraction.

Front-end convention: audio at 44100 Hz, STFT with a periodic Hann window
of 2822 samples zero-padded symmetrically into 4096-point frames, hop of
1103 samples, centered framing via reflect padding, 64 triangular mel
filters on the Slaney scale (linear below 1000 Hz, log above) covering
0-8000 Hz with area normalization, and a natural log with a 1e-10 floor.
A 10 s clip therefore maps to a 400x64 matrix: 1 + floor(441000 / 1103).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 44100
N_FFT = 4096
WIN_LENGTH = 2822
HOP_LENGTH = 1103
N_MELS = 64
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = 1e-10

_CACHE_MAGIC = b"UTLM"


def config_hash():
    """Hex digest pinning every front-end parameter; stored in caches."""
    canon = (
        f"sr={SAMPLE_RATE},n_fft={N_FFT},win={WIN_LENGTH},hop={HOP_LENGTH},"
        f"mels={N_MELS},fmin={FMIN},fmax={FMAX},floor={LOG_FLOOR},log=nat"
    )
    return hashlib.md5(canon.encode()).hexdigest()


@dataclass
class Waveform:
    samples: np.ndarray  # mono, float, [-1, 1]
    sample_rate: int


@dataclass
class Spectrogram:
    values: np.ndarray  # (T, n_mels) float32, log power
    frame_rate: float
    config_hash: str

    @property
    def n_frames(self):
        return self.values.shape[0]


def load_wav(path):
    """Read a PCM WAV (16-bit int or 32-bit float, mono or stereo).

    Stereo is averaged to mono; integer samples are scaled so that the
    most negative 16-bit value maps to -1.0.
    """
    try:
        rate, data = wavfile.read(path)
    except ValueError as e:
        raise ValueError(f"malformed WAV {path}: {e}") from None
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype} in {path}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    elif samples.ndim != 1:
        raise ValueError(f"unsupported channel layout in {path}")
    if not np.all(np.isfinite(samples)):
        raise ValueError(f"non-finite samples in {path}")
    return Waveform(samples=samples, sample_rate=int(rate))


def save_wav(path, w):
    """Write a mono waveform as 16-bit PCM (clipping at full scale)."""
    clipped = np.clip(w.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype(np.int16)
    wavfile.write(path, w.sample_rate, pcm)


def resample(w, target=SAMPLE_RATE):
    """Polyphase windowed-sinc resampling to ``target`` Hz.

    Output length is round(n * target / src). Kernel rows are normalized
    to unit sum, so constant signals are preserved; edges are handled by
    edge padding. A source already at the target rate passes through
    bit-identically.
    """
    if w.sample_rate <= 0:
        raise ValueError("source sample rate must be positive")
    if w.sample_rate == target:
        return Waveform(samples=w.samples.copy(), sample_rate=target)

    x = np.asarray(w.samples, dtype=np.float64)
    n = x.size
    n_out = int(round(n * target / w.sample_rate))
    ratio = Fraction(int(target), int(w.sample_rate))
    up, down = ratio.numerator, ratio.denominator
    cutoff = min(1.0, up / down)  # in units of source Nyquist
    half = int(np.ceil(32 / cutoff))

    # Input-sample position of each output sample.
    k = np.arange(n_out)
    pos_floor = (k * down) // up
    frac = ((k * down) % up) / up

    # One kernel row per polyphase phase, normalized for exact DC gain.
    phases = np.arange(up) / up
    offs = np.arange(-half + 1, half + 1)
    t = offs[None, :] - phases[:, None]
    kernel = cutoff * np.sinc(cutoff * t) * (0.5 + 0.5 * np.cos(np.pi * t / half))
    kernel /= kernel.sum(axis=1, keepdims=True)

    xpad = np.pad(x, (half, half), mode="edge")
    phase_idx = (k * down) % up
    out = np.empty(n_out, dtype=np.float64)
    chunk = 1 << 16
    for lo in range(0, n_out, chunk):
        hi = min(lo + chunk, n_out)
        gathered = xpad[pos_floor[lo:hi, None] + offs[None, :] + half]
        out[lo:hi] = (gathered * kernel[phase_idx[lo:hi]]).sum(axis=1)
    return Waveform(samples=out, sample_rate=target)


def _hz_to_mel(f):
    """Slaney mel scale: linear below 1000 Hz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    mel = f / f_sp
    if mel.ndim == 0:
        if f >= min_log_hz:
            mel = min_log_mel + np.log(f / min_log_hz) / logstep
        return float(mel)
    log_part = f >= min_log_hz
    mel[log_part] = min_log_mel + np.log(f[log_part] / min_log_hz) / logstep
    return mel


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_mel = 1000.0 / f_sp
    logstep = np.log(6.4) / 27.0
    hz = m * f_sp
    log_part = m >= min_log_mel
    hz[log_part] = 1000.0 * np.exp(logstep * (m[log_part] - min_log_mel))
    return hz


def mel_center_frequencies(
    sr=SAMPLE_RATE, n_mels=N_MELS, fmin=FMIN, fmax=FMAX
):
    """Center frequency (Hz) of each triangular filter."""
    mels = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    return _mel_to_hz(mels)[1:-1]


def mel_filterbank(sr=SAMPLE_RATE, n_fft=N_FFT, n_mels=N_MELS, fmin=FMIN, fmax=FMAX):
    """Triangular Slaney-scale filterbank, (n_mels, n_fft//2 + 1).

    Each triangle is scaled by 2 / (f_hi - f_lo) so filters have equal
    area rather than equal peak.
    """
    if fmax > sr / 2:
        raise ValueError(f"fmax {fmax} exceeds Nyquist {sr / 2}")
    fftfreqs = np.arange(n_fft // 2 + 1, dtype=np.float64) * sr / n_fft
    mels = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    mel_f = _mel_to_hz(mels)

    fdiff = np.diff(mel_f)
    ramps = mel_f[:, None] - fftfreqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))

    enorm = 2.0 / (mel_f[2 : n_mels + 2] - mel_f[:n_mels])
    return weights * enorm[:, None]


def _hann_periodic(m):
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(m) / m)


def logmel(w):
    """Log-mel spectrogram of a 44100 Hz waveform, (1 + n//hop) x 64."""
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz input, got {w.sample_rate}")
    x = np.asarray(w.samples, dtype=np.float64)
    if x.size < HOP_LENGTH:
        raise ValueError(f"clip shorter than one hop ({HOP_LENGTH} samples)")
    pad = N_FFT // 2
    if x.size < pad + 1:
        raise ValueError(f"clip too short for centered framing ({pad + 1} samples)")

    window = np.zeros(N_FFT)
    off = (N_FFT - WIN_LENGTH) // 2
    window[off : off + WIN_LENGTH] = _hann_periodic(WIN_LENGTH)

    xp = np.pad(x, (pad, pad), mode="reflect")
    n_frames = 1 + x.size // HOP_LENGTH
    starts = np.arange(n_frames) * HOP_LENGTH
    frames = np.stack([xp[s : s + N_FFT] for s in starts])
    spec = np.fft.rfft(frames * window, axis=1)
    power = spec.real**2 + spec.imag**2
    melpow = power @ mel_filterbank().T
    values = np.log(melpow + LOG_FLOOR).astype(np.float32)
    return Spectrogram(
        values=values,
        frame_rate=SAMPLE_RATE / HOP_LENGTH,
        config_hash=config_hash(),
    )


def write_feature_cache(path, spec):
    """Binary cache: magic, frame/band counts, config digest, f32 rows."""
    t, nb = spec.values.shape
    digest = bytes.fromhex(spec.config_hash)
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<II", t, nb))
        fh.write(digest)
        fh.write(spec.values.astype("<f4").tobytes())


def read_feature_cache(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CACHE_MAGIC:
            raise ValueError(f"not a feature cache file: {path}")
        t, nb = struct.unpack("<II", fh.read(8))
        digest = fh.read(16).hex()
        raw = fh.read(t * nb * 4)
    values = np.frombuffer(raw, dtype="<f4").reshape(t, nb).copy()
    return Spectrogram(
        values=values, frame_rate=SAMPLE_RATE / HOP_LENGTH, config_hash=digest
    )
