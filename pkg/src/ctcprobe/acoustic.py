"""Spectrogram front-end and frame-labelled corpora.

Produces the model input (magnitude spectrograms, 20ms Hamming window,
10ms hop) plus two corpus sources: a deterministic synthetic corpus with
known per-frame phone labels, and an importer for TIMIT-layout data
(paired PCM audio + "start end phone" segmentation files).
"""

from __future__ import annotations

import base64
import bisect
import json
import os
import wave
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_WINDOW_MS = 20.0
DEFAULT_HOP_MS = 10.0

CORPUS_FORMAT = "ctcprobe-corpus"
CORPUS_VERSION = 1


@dataclass
class Spectrogram:
    """T x F matrix of non-negative frequency magnitudes."""

    frames: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    window_ms: float = DEFAULT_WINDOW_MS
    frame_shift_ms: float = DEFAULT_HOP_MS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("spectrogram frames must be 2-D (T x F)")
        if np.any(self.frames < 0):
            raise ValueError("spectrogram magnitudes must be non-negative")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def n_bins(self):
        return self.frames.shape[1]


@dataclass(frozen=True)
class PhoneSegment:
    """Half-open frame range [start_frame, end_frame) labelled with one phone."""

    phone: str
    start_frame: int
    end_frame: int

    def __post_init__(self):
        if not self.start_frame < self.end_frame:
            raise ValueError(
                f"empty segment for phone {self.phone!r}: "
                f"[{self.start_frame}, {self.end_frame})"
            )


@dataclass
class Utterance:
    spectrogram: Spectrogram
    segments: list[PhoneSegment]
    transcript: str
    id: str

    def __post_init__(self):
        check_segments(self.segments, self.spectrogram.n_frames)

    @property
    def n_frames(self):
        return self.spectrogram.n_frames


def check_segments(segments, n_frames):
    """Segments must be sorted, non-overlapping and cover exactly [0, n_frames)."""
    if not segments:
        raise ValueError("utterance has no segments")
    if segments[0].start_frame != 0:
        raise ValueError("segments must start at frame 0")
    for prev, cur in zip(segments, segments[1:]):
        if cur.start_frame != prev.end_frame:
            raise ValueError(
                f"segments not contiguous at frame {prev.end_frame}/{cur.start_frame}"
            )
    if segments[-1].end_frame != n_frames:
        raise ValueError(
            f"segments end at {segments[-1].end_frame}, expected {n_frames}"
        )


def hamming_window(n: int) -> np.ndarray:
    """Hamming coefficients 0.54 - 0.46*cos(2*pi*i/(n-1)); w = [1.0] for n == 1."""
    if n < 1:
        raise ValueError("window length must be >= 1")
    if n == 1:
        return np.ones(1)
    i = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * i / (n - 1))


def spectrogram(samples, sample_rate_hz=DEFAULT_SAMPLE_RATE,
                window_ms=DEFAULT_WINDOW_MS, hop_ms=DEFAULT_HOP_MS,
                log_compress=False) -> Spectrogram:
    """Magnitude spectrogram of Hamming-windowed frames.

    T = floor((len - win) / hop) + 1, F = win/2 + 1 (161 at 16 kHz with a
    20ms window).  Linear magnitudes by default; ``log_compress`` applies
    log1p.
    """
    if sample_rate_hz <= 0:
        raise ValueError("sample_rate_hz must be positive")
    samples = np.asarray(samples, dtype=np.float64)
    win = int(round(sample_rate_hz * window_ms / 1000.0))
    hop = int(round(sample_rate_hz * hop_ms / 1000.0))
    if win < 1 or hop < 1:
        raise ValueError("window/hop too short for this sample rate")
    if len(samples) < win:
        raise ValueError(
            f"need at least {win} samples for one window, got {len(samples)}"
        )
    n_frames = (len(samples) - win) // hop + 1
    w = hamming_window(win)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = np.abs(np.fft.rfft(samples[idx] * w[None, :], axis=1))
    if log_compress:
        frames = np.log1p(frames)
    return Spectrogram(frames, sample_rate_hz, window_ms, hop_ms)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

def default_formant_table(n_phones, n_bins=161):
    """Distinct 3-formant signature per phone, spread over the bins."""
    table = {}
    for i in range(n_phones):
        pid = phone_id(i)
        b1 = 8 + (i * 37) % (n_bins - 40)
        b2 = 20 + (i * 71) % (n_bins - 50)
        b3 = 30 + (i * 113) % (n_bins - 60)
        table[pid] = [(b1, 3.0, 1.0), (b2, 4.0, 0.7), (b3, 5.0, 0.5)]
    return table


def phone_id(i):
    return f"p{i:02d}"


def default_phone_to_chars(n_phones):
    """One distinct letter per phone; trivially prefix-free."""
    if n_phones > 26:
        raise ValueError("default character code supports at most 26 phones")
    return {phone_id(i): chr(ord("a") + i) for i in range(n_phones)}


@dataclass
class SynthConfig:
    phone_inventory_size: int = 20
    phones_per_utterance: tuple[int, int] = (4, 7)
    segment_frames: tuple[int, int] = (10, 16)
    noise_stddev: float = 0.05
    formant_table: dict | None = None
    phone_to_chars: dict | None = None
    word_phones: tuple[int, int] = (2, 4)
    n_bins: int = 161
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    seed: int = 0

    def __post_init__(self):
        if self.phone_inventory_size < 1:
            raise ValueError("need at least one phone")
        lo, hi = self.phones_per_utterance
        if not (1 <= lo <= hi):
            raise ValueError("bad phones_per_utterance range")
        lo, hi = self.segment_frames
        if not (1 <= lo <= hi):
            raise ValueError("bad segment_frames range")
        if self.noise_stddev < 0:
            raise ValueError("noise_stddev must be >= 0")
        if self.formant_table is None:
            self.formant_table = default_formant_table(
                self.phone_inventory_size, self.n_bins)
        if self.phone_to_chars is None:
            self.phone_to_chars = default_phone_to_chars(self.phone_inventory_size)
        _check_prefix_free(self.phone_to_chars)

    @property
    def phones(self):
        return [phone_id(i) for i in range(self.phone_inventory_size)]


def _check_prefix_free(code):
    codes = list(code.values())
    if len(set(codes)) != len(codes):
        raise ValueError("phone_to_chars must be injective")
    for a in codes:
        for b in codes:
            if a is not b and b.startswith(a):
                raise ValueError(f"phone code {a!r} is a prefix of {b!r}")
    for c in codes:
        if " " in c:
            raise ValueError("phone codes may not contain spaces")


def phone_template(cfg: SynthConfig, phone: str) -> np.ndarray:
    """Noise-free magnitude spectrum of one phone."""
    bins = np.arange(cfg.n_bins, dtype=np.float64)
    spec = np.zeros(cfg.n_bins)
    for center, bandwidth, amplitude in cfg.formant_table[phone]:
        spec += amplitude * np.exp(-0.5 * ((bins - center) / bandwidth) ** 2)
    return spec


def synthesize_corpus(cfg: SynthConfig, n_utterances: int) -> list[Utterance]:
    """Deterministic corpus: each phone rendered as its formant template
    plus Gaussian noise (clamped at 0) directly in spectrogram space."""
    if n_utterances < 0:
        raise ValueError("n_utterances must be >= 0")
    rng = np.random.default_rng(cfg.seed)
    templates = {p: phone_template(cfg, p) for p in cfg.phones}
    utts = []
    for u in range(n_utterances):
        n_phones = rng.integers(cfg.phones_per_utterance[0],
                                cfg.phones_per_utterance[1] + 1)
        phones = [cfg.phones[rng.integers(cfg.phone_inventory_size)]
                  for _ in range(n_phones)]
        seg_lens = [int(rng.integers(cfg.segment_frames[0],
                                     cfg.segment_frames[1] + 1))
                    for _ in range(n_phones)]
        frames = []
        segments = []
        t = 0
        for phone, seg_len in zip(phones, seg_lens):
            block = templates[phone][None, :] + rng.normal(
                0.0, cfg.noise_stddev, size=(seg_len, cfg.n_bins))
            frames.append(np.maximum(block, 0.0))
            segments.append(PhoneSegment(phone, t, t + seg_len))
            t += seg_len
        transcript = _phones_to_transcript(cfg, phones, rng)
        spec = Spectrogram(np.concatenate(frames, axis=0),
                           cfg.sample_rate_hz)
        utts.append(Utterance(spec, segments, transcript, f"synth-{u:05d}"))
    return utts


def _phones_to_transcript(cfg, phones, rng):
    """Concatenate phone codes, with single spaces between word groups."""
    words = []
    i = 0
    while i < len(phones):
        size = int(rng.integers(cfg.word_phones[0], cfg.word_phones[1] + 1))
        words.append("".join(cfg.phone_to_chars[p] for p in phones[i:i + size]))
        i += size
    return " ".join(words)


def decode_transcript(transcript: str, phone_to_chars: dict) -> list[str]:
    """Invert the prefix-free phone code, ignoring word boundaries."""
    by_code = {v: k for k, v in phone_to_chars.items()}
    phones = []
    for word in transcript.split(" "):
        i = 0
        while i < len(word):
            for code, phone in by_code.items():
                if word.startswith(code, i):
                    phones.append(phone)
                    i += len(code)
                    break
            else:
                raise ValueError(f"cannot decode transcript at {word[i:]!r}")
    return phones


# ---------------------------------------------------------------------------
# Frame labels
# ---------------------------------------------------------------------------

def frame_label(utt: Utterance, t: int, subsample_factor: int = 1,
                receptive_center_offset: int = 0) -> str:
    """Phone label of sub-sampled frame t.

    Maps t to input frame index t*subsample_factor + receptive_center_offset
    (center-of-receptive-field rule) and returns the phone of the containing
    segment; frames falling in a gap take the nearest segment's phone.
    """
    idx = t * subsample_factor + receptive_center_offset
    n = utt.n_frames
    if not 0 <= idx < n:
        raise ValueError(f"mapped frame index {idx} outside [0, {n})")
    starts = [s.start_frame for s in utt.segments]
    pos = bisect.bisect_right(starts, idx) - 1
    seg = utt.segments[pos]
    if seg.start_frame <= idx < seg.end_frame:
        return seg.phone
    # Gap (imported data only): nearest segment wins.
    candidates = []
    if pos >= 0:
        candidates.append((idx - (utt.segments[pos].end_frame - 1), utt.segments[pos]))
    if pos + 1 < len(utt.segments):
        candidates.append((utt.segments[pos + 1].start_frame - idx,
                           utt.segments[pos + 1]))
    return min(candidates, key=lambda c: c[0])[1].phone


# ---------------------------------------------------------------------------
# Corpus serialization (JSON-lines, f32 row-major frames)
# ---------------------------------------------------------------------------

def save_corpus(path, utterances):
    with open(path, "w") as fh:
        header = {"format": CORPUS_FORMAT, "version": CORPUS_VERSION}
        if utterances:
            s = utterances[0].spectrogram
            header.update(sample_rate_hz=s.sample_rate_hz,
                          window_ms=s.window_ms,
                          frame_shift_ms=s.frame_shift_ms)
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for utt in utterances:
            raw = np.ascontiguousarray(
                utt.spectrogram.frames, dtype=np.float32).tobytes()
            rec = {
                "id": utt.id,
                "transcript": utt.transcript,
                "segments": [[s.phone, s.start_frame, s.end_frame]
                             for s in utt.segments],
                "shape": list(utt.spectrogram.frames.shape),
                "frames_b64": base64.b64encode(raw).decode("ascii"),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_corpus(path):
    utts = []
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CORPUS_FORMAT:
            raise ValueError(f"{path} is not a {CORPUS_FORMAT} file")
        for line in fh:
            rec = json.loads(line)
            frames = np.frombuffer(
                base64.b64decode(rec["frames_b64"]), dtype=np.float32)
            frames = frames.reshape(rec["shape"]).astype(np.float64)
            spec = Spectrogram(frames,
                               header.get("sample_rate_hz", DEFAULT_SAMPLE_RATE),
                               header.get("window_ms", DEFAULT_WINDOW_MS),
                               header.get("frame_shift_ms", DEFAULT_HOP_MS))
            segs = [PhoneSegment(p, a, b) for p, a, b in rec["segments"]]
            utts.append(Utterance(spec, segs, rec["transcript"], rec["id"]))
    return utts


# ---------------------------------------------------------------------------
# TIMIT-layout import/export
# ---------------------------------------------------------------------------

SILENCE_PHONE = "h#"


def _frame_for_sample(sample, hop):
    # Frame i's slot is [i*hop, (i+1)*hop); containment is by slot center.
    return int(sample) // hop


def import_timit_dir(path, sample_rate_hz=DEFAULT_SAMPLE_RATE,
                     window_ms=DEFAULT_WINDOW_MS, hop_ms=DEFAULT_HOP_MS):
    """Import paired .wav/.phn (optionally .txt) files under ``path``.

    Returns (utterances, errors); a failing file is reported and skipped.
    Leading/trailing silence (h#) is trimmed and the utterance cropped to
    the labelled span.  Segment sample times become frame indices by
    center containment of each 10ms frame slot.
    """
    utterances = []
    errors = []
    wavs = []
    for root, _dirs, files in os.walk(path):
        for name in sorted(files):
            if name.lower().endswith(".wav"):
                wavs.append(os.path.join(root, name))
    for wav_path in sorted(wavs):
        stem = os.path.splitext(wav_path)[0]
        phn_path = _sibling(stem, ".phn")
        if phn_path is None:
            errors.append((wav_path, "missing .phn file"))
            continue
        try:
            utt = _import_one(wav_path, phn_path, _sibling(stem, ".txt"),
                              sample_rate_hz, window_ms, hop_ms)
            utterances.append(utt)
        except Exception as exc:  # per-file error, keep going
            errors.append((wav_path, str(exc)))
    return utterances, errors


def _sibling(stem, ext):
    for candidate in (stem + ext, stem + ext.upper()):
        if os.path.exists(candidate):
            return candidate
    return None


def _read_wav(path, expected_rate):
    with wave.open(path, "rb") as wf:
        if wf.getsampwidth() != 2:
            raise ValueError("expected 16-bit PCM audio")
        if wf.getnchannels() != 1:
            raise ValueError("expected mono audio")
        if wf.getframerate() != expected_rate:
            raise ValueError(
                f"sample rate {wf.getframerate()} != expected {expected_rate}")
        data = wf.readframes(wf.getnframes())
    return np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0


def _import_one(wav_path, phn_path, txt_path, sample_rate_hz, window_ms, hop_ms):
    samples = _read_wav(wav_path, sample_rate_hz)
    spec = spectrogram(samples, sample_rate_hz, window_ms, hop_ms)
    hop = int(round(sample_rate_hz * hop_ms / 1000.0))

    raw_segments = []
    with open(phn_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            start_s, end_s, phone = line.split()
            raw_segments.append((int(start_s), int(end_s), phone))
    if not raw_segments:
        raise ValueError("empty segmentation file")

    # Trim edge silence, then convert sample ranges to frame ranges.
    while raw_segments and raw_segments[0][2] == SILENCE_PHONE:
        raw_segments.pop(0)
    while raw_segments and raw_segments[-1][2] == SILENCE_PHONE:
        raw_segments.pop()
    if not raw_segments:
        raise ValueError("only silence in segmentation file")

    frame_segs = []
    for start_s, end_s, phone in raw_segments:
        f0 = _frame_for_sample(start_s, hop)
        f1 = _frame_for_sample(end_s, hop)
        if f1 > f0:
            frame_segs.append([phone, f0, f1])
    if not frame_segs:
        raise ValueError("no segment spans a full frame")

    lo = frame_segs[0][1]
    hi = min(frame_segs[-1][2], spec.n_frames)
    if hi <= lo:
        raise ValueError("labelled span outside the spectrogram")

    # Crop to the labelled span and force contiguity (gaps split midway).
    frames = spec.frames[lo:hi]
    segments = []
    prev_end = 0
    for i, (phone, f0, f1) in enumerate(frame_segs):
        f0, f1 = f0 - lo, min(f1 - lo, hi - lo)
        if f1 <= prev_end:
            continue
        f0 = max(f0, prev_end)
        if f0 > prev_end:
            mid = (prev_end + f0 + 1) // 2
            segments[-1] = PhoneSegment(segments[-1].phone,
                                        segments[-1].start_frame, mid)
            f0 = mid
        segments.append(PhoneSegment(phone, f0, f1))
        prev_end = f1
    if segments[-1].end_frame < hi - lo:
        segments[-1] = PhoneSegment(segments[-1].phone,
                                    segments[-1].start_frame, hi - lo)

    transcript = ""
    if txt_path is not None:
        with open(txt_path) as fh:
            parts = fh.read().strip().split(None, 2)
        if len(parts) == 3:
            transcript = _clean_transcript(parts[2])
    utt_id = os.path.splitext(os.path.basename(wav_path))[0]
    return Utterance(Spectrogram(frames, sample_rate_hz, window_ms, hop_ms),
                     segments, transcript, utt_id)


def _clean_transcript(text):
    keep = []
    for ch in text.lower():
        if ch.isalpha() and ch.isascii() or ch in " '":
            keep.append(ch)
    return " ".join("".join(keep).split())


def export_timit_dir(path, items, sample_rate_hz=DEFAULT_SAMPLE_RATE):
    """Write (id, samples, sample_segments, transcript) tuples in TIMIT layout.

    ``samples`` are floats in [-1, 1); ``sample_segments`` are
    (start_sample, end_sample, phone) triples.
    """
    os.makedirs(path, exist_ok=True)
    for utt_id, samples, sample_segments, transcript in items:
        stem = os.path.join(path, utt_id)
        pcm = np.clip(np.asarray(samples) * 32768.0, -32768, 32767)
        with wave.open(stem + ".wav", "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(2)
            wf.setframerate(sample_rate_hz)
            wf.writeframes(pcm.astype("<i2").tobytes())
        with open(stem + ".phn", "w") as fh:
            for start_s, end_s, phone in sample_segments:
                fh.write(f"{start_s} {end_s} {phone}\n")
        with open(stem + ".txt", "w") as fh:
            fh.write(f"0 {len(pcm)} {transcript}\n")
