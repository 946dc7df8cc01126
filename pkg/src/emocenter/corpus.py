"""Datasets: a seeded synthetic tone-complex corpus, WAV I/O, and CSV manifests."""

from __future__ import annotations

import csv
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dsp import SAMPLE_RATE, AudioClip

EMOTIONS = ("neutral", "angry", "happy", "sad")
REFERENCE_PROPORTIONS = (0.309, 0.199, 0.296, 0.196)
MANIFEST_HEADER = ("path", "label", "subset")


class CorpusError(ValueError):
    pass


class WavFormatError(CorpusError):
    pass


class ManifestError(CorpusError):
    pass


class MissingFileError(ManifestError):
    pass


class UnknownLabelError(ManifestError):
    pass


class MalformedRowError(ManifestError):
    pass


# --- WAV --------------------------------------------------------------------

def read_wav(path) -> AudioClip:
    """Read a 16-bit PCM mono 16 kHz WAV; samples scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            comp = wf.getcomptype()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise WavFormatError(f"{path}: unsupported WAV ({exc}); need 16-bit PCM") from None
    except EOFError:
        raise WavFormatError(f"{path}: truncated WAV header") from None
    if comp != "NONE":
        raise WavFormatError(f"{path}: compressed WAV ({comp}) not supported")
    if width != 2:
        raise WavFormatError(f"{path}: {8 * width}-bit samples, need 16-bit PCM")
    if channels != 1:
        raise WavFormatError(f"{path}: {channels} channels, need mono")
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"{path}: sampled at {rate} Hz, need {SAMPLE_RATE} Hz")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, rate)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())


# --- datasets ---------------------------------------------------------------

@dataclass
class Utterance:
    label: int
    clip: AudioClip | None = None
    path: Path | None = None
    subset: str | None = None

    def audio(self) -> AudioClip:
        if self.clip is None:
            return read_wav(self.path)
        return self.clip


@dataclass
class Dataset:
    items: list[Utterance]
    class_names: tuple[str, ...] = EMOTIONS

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i) -> Utterance:
        return self.items[i]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([u.label for u in self.items], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.items[i] for i in indices], self.class_names)

    def tagged(self, subset: str) -> "Dataset":
        return Dataset([u for u in self.items if u.subset == subset], self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


# --- synthetic corpus -------------------------------------------------------

@dataclass(frozen=True)
class ClassRecipe:
    f0_range: tuple[float, float]
    am_rate: float
    noise_level: float = 0.1
    duration_range: tuple[float, float] = (0.5, 1.5)
    n_harmonics: int = 6


def _default_recipes() -> tuple[ClassRecipe, ...]:
    return (
        ClassRecipe((120.0, 150.0), 3.0),
        ClassRecipe((230.0, 290.0), 8.0),
        ClassRecipe((170.0, 210.0), 5.5),
        ClassRecipe((85.0, 105.0), 2.0),
    )


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic corpus of harmonic tones with amplitude modulation.

    Every class has its own fundamental-frequency band and modulation rate;
    ``noise_level`` is the white-noise RMS relative to the tone RMS.
    """

    recipes: tuple[ClassRecipe, ...] = field(default_factory=_default_recipes)
    proportions: tuple[float, ...] = REFERENCE_PROPORTIONS
    total: int = 1000
    seed: int = 0
    class_names: tuple[str, ...] = EMOTIONS

    def __post_init__(self):
        if len(self.recipes) != len(self.proportions) or len(self.recipes) != len(self.class_names):
            raise CorpusError("recipes, proportions and class names must have equal length")
        if abs(sum(self.proportions) - 1.0) > 1e-9 or min(self.proportions) < 0:
            raise CorpusError("proportions must be nonnegative and sum to 1")
        for r in self.recipes:
            lo, hi = r.duration_range
            if not 0.3 < lo <= hi <= 14.0:
                raise CorpusError(f"duration range {r.duration_range} outside (0.3, 14]")
            if r.f0_range[0] <= 0 or r.f0_range[0] > r.f0_range[1]:
                raise CorpusError(f"bad f0 range {r.f0_range}")

    def with_noise(self, noise_level: float) -> "SynthSpec":
        recipes = tuple(ClassRecipe(r.f0_range, r.am_rate, noise_level, r.duration_range, r.n_harmonics)
                        for r in self.recipes)
        return SynthSpec(recipes, self.proportions, self.total, self.seed, self.class_names)

    def with_durations(self, lo: float, hi: float) -> "SynthSpec":
        recipes = tuple(ClassRecipe(r.f0_range, r.am_rate, r.noise_level, (lo, hi), r.n_harmonics)
                        for r in self.recipes)
        return SynthSpec(recipes, self.proportions, self.total, self.seed, self.class_names)


def apportion(total: int, proportions: Sequence[float]) -> np.ndarray:
    """Largest-remainder apportionment; ties go to the lower class index."""
    quotas = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(quotas).astype(np.int64)
    remainder = total - counts.sum()
    order = sorted(range(len(quotas)), key=lambda j: (-(quotas[j] - counts[j]), j))
    for j in order[:remainder]:
        counts[j] += 1
    return counts


def synth_clip(recipe: ClassRecipe, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    duration = rng.uniform(*recipe.duration_range)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(*recipe.f0_range)
    glide = rng.uniform(-0.05, 0.05)
    # instantaneous f0 drifts linearly by `glide` over the clip
    phase = 2.0 * np.pi * f0 * (t + 0.5 * glide * t * t / max(duration, 1e-9))
    tone = np.zeros(n)
    for h in range(1, recipe.n_harmonics + 1):
        tone += rng.uniform(0.5, 1.0) / h * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    am = 1.0 + 0.6 * np.sin(2.0 * np.pi * recipe.am_rate * t + rng.uniform(0, 2 * np.pi))
    sig = tone * am
    sig /= np.sqrt(np.mean(sig ** 2))
    sig += recipe.noise_level * rng.standard_normal(n)
    sig *= 0.25
    peak = np.max(np.abs(sig))
    if peak > 0.9:
        sig *= 0.9 / peak
    return sig


def generate_synthetic_corpus(spec: SynthSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    counts = apportion(spec.total, spec.proportions)
    labels = np.repeat(np.arange(len(counts)), counts)
    rng.shuffle(labels)
    items = [Utterance(int(y), AudioClip(synth_clip(spec.recipes[y], rng))) for y in labels]
    return Dataset(items, tuple(spec.class_names))


# --- manifests --------------------------------------------------------------

def load_manifest(path, class_names: Sequence[str] = EMOTIONS) -> Dataset:
    """Read ``path,label,subset`` rows; audio paths resolve relative to the manifest.

    Audio is not decoded here, only checked for existence.
    """
    path = Path(path)
    names = tuple(class_names)
    index = {name: i for i, name in enumerate(names)}
    items, seen = [], set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return Dataset([], names)
        if tuple(h.strip() for h in header[:2]) != MANIFEST_HEADER[:2]:
            raise MalformedRowError(f"{path}: header must start with 'path,label', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) not in (2, 3):
                raise MalformedRowError(f"{path}:{lineno}: expected 2 or 3 fields, got {len(row)}")
            rel, label = row[0].strip(), row[1].strip()
            subset = row[2].strip() or None if len(row) == 3 else None
            if not rel:
                raise MalformedRowError(f"{path}:{lineno}: empty path")
            if label not in index:
                raise UnknownLabelError(f"{path}:{lineno}: unknown label {label!r}")
            audio = (path.parent / rel).resolve()
            if audio in seen:
                raise MalformedRowError(f"{path}:{lineno}: duplicate path {rel}")
            if not audio.is_file():
                raise MissingFileError(f"{path}:{lineno}: audio file {rel} not found")
            seen.add(audio)
            items.append(Utterance(index[label], path=audio, subset=subset))
    return Dataset(items, names)


def write_manifest(path, rows: Sequence[tuple[str, str, str | None]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for rel, label, subset in rows:
            writer.writerow((rel, label, subset or ""))


def export_corpus(dataset: Dataset, out_dir) -> Path:
    """Write every clip as WAV plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, utt in enumerate(dataset.items):
        rel = f"wav/{i:05d}_{dataset.class_names[utt.label]}.wav"
        write_wav(out_dir / rel, utt.audio())
        rows.append((rel, dataset.class_names[utt.label], utt.subset))
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest
