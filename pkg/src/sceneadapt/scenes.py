"""Acoustic-scene construction: deterministic synthetic speech and noise
generators, scene datasets with disjoint adapt/test splits, scheduling,
manifests, and ingestion of user-supplied WAV directories.

Every waveform is a pure function of seeds, so a corpus rebuilt from its
manifest is bit-identical.  Within a scene, the noise clips used for adapt
mixing, the reserved remix noise, and the test-pair noise come from three
disjoint clip-id ranges, and adapt/test speech use disjoint utterance ids.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from . import signal as sig
from .errors import InvalidConfigError, InvalidInputError
from .signal import Waveform, mix_at_snr

NOISE_KINDS = ("white", "pink", "babble", "hum")
SNR_RANGES = ((-8.0, 0.0), (0.0, 5.0), (5.0, 10.0))

_SPEECH_TAG = 0x53504B
_NOISE_TAG = 0x4E6F17
_SCENE_TAG = 0x5C3E


def _entropy(seed) -> tuple:
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) for s in seed)
    return (int(seed),)


def _rng(*entropy) -> np.random.Generator:
    flat = []
    for e in entropy:
        flat.extend(_entropy(e))
    return np.random.default_rng(np.random.SeedSequence(flat))


# ----------------------------------------------------------------- generators

def _speaker_voice(speaker_id: int):
    f0 = 85.0 + 16.0 * (speaker_id % 11) + 3.0 * ((speaker_id // 11) % 3)
    formants = np.array([320.0 + 35.0 * (speaker_id % 6),
                         1000.0 + 110.0 * (speaker_id % 8),
                         2350.0 + 140.0 * (speaker_id % 5)])
    return f0, formants


def _harmonic_amp(freq, formants):
    tilt = 1.0 / np.sqrt(1.0 + (freq / 900.0) ** 2)
    gains = np.array([1.0, 0.7, 0.4])
    widths = np.array([110.0, 150.0, 200.0])
    resonance = np.sum(gains / (1.0 + ((freq - formants) / widths) ** 2))
    return tilt * (0.15 + resonance)


def _voiced_segment(rng, n, f0, formants, sample_rate):
    t = np.arange(n) / sample_rate
    vibrato = 1.0 + 0.02 * np.sin(2.0 * np.pi * rng.uniform(3.0, 6.0) * t
                                  + rng.uniform(0.0, 2.0 * np.pi))
    f0_t = f0 * vibrato * rng.uniform(0.95, 1.05)
    phase = 2.0 * np.pi * np.cumsum(f0_t) / sample_rate
    out = np.zeros(n)
    h = 1
    while h * f0 < 7000.0:
        amp = _harmonic_amp(h * f0, formants)
        out += amp * np.sin(h * phase + rng.uniform(0.0, 2.0 * np.pi))
        h += 1
    ramp = min(n // 4, int(0.015 * sample_rate))
    if ramp > 0:
        edge = 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp) / ramp))
        out[:ramp] *= edge
        out[-ramp:] *= edge[::-1]
    return out


def synth_speech(speaker_id: int, duration_s: float, seed,
                 sample_rate: int = sig.DEFAULT_SAMPLE_RATE) -> Waveform:
    """Deterministic speech-like signal: voiced harmonic stretches with a
    speaker-dependent pitch and formant envelope, interleaved with near-silent
    pauses and unvoiced bursts.  Peak normalized to 0.65.

    The first pause is always complete within the first 0.5 s, so any
    admissible duration contains at least one low-RMS region.
    """
    if duration_s < 0.5:
        raise InvalidInputError("speech duration must be at least 0.5 s")
    rng = _rng(_SPEECH_TAG, speaker_id, seed)
    n = int(round(duration_s * sample_rate))
    f0, formants = _speaker_voice(speaker_id)
    pieces = []
    total = 0

    def emit(kind, dur):
        nonlocal total
        m = min(int(round(dur * sample_rate)), n - total)
        if m <= 0:
            return
        if kind == "voiced":
            seg = _voiced_segment(rng, m, f0, formants, sample_rate)
        elif kind == "burst":
            noise = rng.standard_normal(m)
            seg = 0.35 * np.diff(noise, prepend=noise[0])
            ramp = min(m // 3, 64)
            if ramp > 0:
                seg[:ramp] *= np.linspace(0.0, 1.0, ramp)
                seg[-ramp:] *= np.linspace(1.0, 0.0, ramp)
        else:  # pause
            seg = 5e-5 * rng.standard_normal(m)
        pieces.append(seg)
        total += m

    emit("voiced", rng.uniform(0.22, 0.30))
    emit("pause", rng.uniform(0.10, 0.16))
    while total < n:
        kind = rng.choice(["voiced", "voiced", "burst", "pause"])
        dur = {"voiced": rng.uniform(0.20, 0.45),
               "burst": rng.uniform(0.05, 0.12),
               "pause": rng.uniform(0.08, 0.18)}[kind]
        emit(kind, dur)
    out = np.concatenate(pieces)[:n]
    peak = np.max(np.abs(out))
    out *= 0.65 / peak
    return Waveform(out, sample_rate)


def synth_noise(scenario: str, duration_s: float, seed,
                sample_rate: int = sig.DEFAULT_SAMPLE_RATE) -> Waveform:
    """Deterministic scenario noise, RMS-normalized to 0.1.

    Scenarios: 'white' (flat), 'pink' (-3 dB/octave), 'babble'
    (speech-shaped, amplitude-modulated), 'hum' (mains harmonics plus a
    broadband floor).  Different seeds give distinct clips whose long-term
    spectra match, mirroring same-location/different-clip recordings.
    """
    if scenario not in NOISE_KINDS:
        raise InvalidConfigError(f"unknown noise scenario '{scenario}'")
    rng = _rng(_NOISE_TAG, NOISE_KINDS.index(scenario), seed)
    n = int(round(duration_s * sample_rate))
    if scenario == "white":
        out = rng.standard_normal(n)
    elif scenario == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        freqs[0] = freqs[1]
        out = np.fft.irfft(spec / np.sqrt(freqs), n=n)
    elif scenario == "babble":
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        shaped = np.fft.irfft(spec / (1.0 + (freqs / 500.0) ** 2) ** 0.7, n=n)
        t = np.arange(n) / sample_rate
        mod = (0.6 + 0.4 * np.sin(2.0 * np.pi * rng.uniform(2.5, 4.0) * t
                                  + rng.uniform(0.0, 2.0 * np.pi)))
        mod *= 0.85 + 0.15 * np.sin(2.0 * np.pi * rng.uniform(0.5, 1.2) * t
                                    + rng.uniform(0.0, 2.0 * np.pi))
        out = shaped * mod
    else:  # hum
        t = np.arange(n) / sample_rate
        amps = [1.0, 0.55, 0.4, 0.3, 0.22, 0.15]
        out = np.zeros(n)
        for k, amp in enumerate(amps, start=1):
            out += amp * np.sin(2.0 * np.pi * 50.0 * k * t
                                + rng.uniform(0.0, 2.0 * np.pi))
        out += 0.25 * np.sqrt(np.mean(out ** 2)) * rng.standard_normal(n)
    rms = np.sqrt(np.mean(out ** 2))
    return Waveform(out * (0.1 / rms), sample_rate)


# ---------------------------------------------------------------------- scenes

@dataclass
class SceneSpec:
    """One acoustic scene: a noise scenario, an SNR range, and speakers."""

    index: int
    scenario: str
    snr_range: tuple
    speakers: tuple
    seed: int

    def __post_init__(self):
        lo, hi = self.snr_range
        if not lo < hi:
            raise InvalidConfigError(f"snr range [{lo}, {hi}] needs lo < hi")
        if not 2 <= len(self.speakers) <= 5:
            raise InvalidConfigError("scenes use between 2 and 5 speakers")
        if not self.scenario:
            raise InvalidConfigError("scene needs a noise scenario id")


@dataclass
class SceneSizes:
    n_adapt: int = 24
    n_adapt_noise: int = 16
    n_test: int = 20
    adapt_clip_s: float = 4.0
    test_clip_s: float = 3.0


@dataclass
class SceneDataset:
    """Adapt-split noisy clips and reserved noise, plus clean/noisy test pairs."""

    spec: SceneSpec
    adapt_noisy: list
    adapt_noise: list
    test_pairs: list  # (clean, noisy)
    test_target_snrs: list
    adapt_speech_ids: list
    test_speech_ids: list
    adapt_mix_noise_ids: list
    adapt_reserve_noise_ids: list
    test_noise_ids: list


# Clip-id ranges keep the three noise roles disjoint by construction.
_ADAPT_MIX_BASE = 0
_RESERVE_BASE = 100
_TEST_BASE = 200
_TEST_UTT_BASE = 1000


def build_scene(spec: SceneSpec, sizes: SceneSizes = SceneSizes(),
                sample_rate: int = sig.DEFAULT_SAMPLE_RATE) -> SceneDataset:
    """Synthesize one scene.  Test pairs and adapt clips are mixed at SNRs
    drawn uniformly from the scene's range via mix_at_snr, so every measured
    SNR equals its sampled target."""
    rng = _rng(_SCENE_TAG, spec.seed, spec.index)
    lo, hi = spec.snr_range

    def speech(utt_id):
        speaker = spec.speakers[utt_id % len(spec.speakers)]
        dur = sizes.adapt_clip_s if utt_id < _TEST_UTT_BASE else sizes.test_clip_s
        return synth_speech(speaker, dur, (spec.seed, spec.index, utt_id),
                            sample_rate)

    def noise(clip_id, dur):
        return synth_noise(spec.scenario, dur, (spec.seed, spec.index, clip_id),
                           sample_rate)

    adapt_noisy, adapt_speech_ids, adapt_mix_ids = [], [], []
    for i in range(sizes.n_adapt):
        clean = speech(i)
        clip_id = _ADAPT_MIX_BASE + i
        noisy, _ = mix_at_snr(clean, noise(clip_id, sizes.adapt_clip_s),
                              rng.uniform(lo, hi))
        adapt_noisy.append(noisy)
        adapt_speech_ids.append(i)
        adapt_mix_ids.append(clip_id)

    adapt_noise = []
    reserve_ids = [_RESERVE_BASE + j for j in range(sizes.n_adapt_noise)]
    for clip_id in reserve_ids:
        adapt_noise.append(noise(clip_id, sizes.adapt_clip_s))

    test_pairs, test_snrs, test_speech_ids, test_noise_ids = [], [], [], []
    for j in range(sizes.n_test):
        utt_id = _TEST_UTT_BASE + j
        clip_id = _TEST_BASE + j
        clean = speech(utt_id)
        target = rng.uniform(lo, hi)
        noisy, _ = mix_at_snr(clean, noise(clip_id, sizes.test_clip_s), target)
        test_pairs.append((clean, noisy))
        test_snrs.append(target)
        test_speech_ids.append(utt_id)
        test_noise_ids.append(clip_id)

    return SceneDataset(spec, adapt_noisy, adapt_noise, test_pairs, test_snrs,
                        adapt_speech_ids, test_speech_ids, adapt_mix_ids,
                        reserve_ids, test_noise_ids)


@dataclass
class SceneSchedule:
    """Scene visit order: isolated keeps the given order (it does not
    matter), sequential shuffles once with the given seed."""

    specs: list
    mode: str
    seed: int
    order: list = field(default_factory=list)


def sequence_scenes(specs, mode: str, seed: int = 0) -> SceneSchedule:
    specs = list(specs)
    if not specs:
        raise InvalidConfigError("need at least one scene spec")
    if mode not in ("isolated", "sequential"):
        raise InvalidConfigError(f"unknown schedule mode '{mode}'")
    if mode == "sequential":
        perm = _rng(0x0DDE12, seed).permutation(len(specs))
        order = [specs[i] for i in perm]
    else:
        order = list(specs)
    return SceneSchedule(specs, mode, seed, order)


def make_desk_specs(seed: int, scenarios=NOISE_KINDS, snr_ranges=SNR_RANGES,
                    speaker_pool=tuple(range(20, 40))) -> list:
    """The desk-scale grid: every scenario crossed with every SNR range,
    speakers drawn per scene from the held-out pool."""
    specs = []
    for m, (scenario, snr_range) in enumerate(product(scenarios, snr_ranges)):
        srng = _rng(0x5350EC, seed, m)
        n_speakers = int(srng.integers(2, 6))
        speakers = tuple(sorted(int(s) for s in
                                srng.choice(speaker_pool, n_speakers,
                                            replace=False)))
        specs.append(SceneSpec(m, scenario, tuple(float(x) for x in snr_range),
                               speakers, seed))
    return specs


# ------------------------------------------------------------ pretrain corpus

@dataclass
class PretrainCorpusConfig:
    speakers: tuple = (0, 1, 2, 3, 4, 5)
    utterances_per_speaker: int = 8
    utterance_s: float = 3.0
    noise_scenarios: tuple = ("white", "pink")
    noise_clips_per_scenario: int = 12
    noise_clip_s: float = 4.0
    seed: int = 0


def build_pretrain_corpus(cfg: PretrainCorpusConfig,
                          sample_rate: int = sig.DEFAULT_SAMPLE_RATE):
    """Source-domain corpus for supervised pretraining, disjoint from scene
    material by construction (separate seed tags and speaker pool)."""
    speech = []
    for speaker in cfg.speakers:
        for i in range(cfg.utterances_per_speaker):
            speech.append(synth_speech(speaker, cfg.utterance_s,
                                       (0x505245, cfg.seed, speaker, i),
                                       sample_rate))
    noise = []
    for s_idx, scenario in enumerate(cfg.noise_scenarios):
        for j in range(cfg.noise_clips_per_scenario):
            noise.append(synth_noise(scenario, cfg.noise_clip_s,
                                     (0x504E, cfg.seed, s_idx, j), sample_rate))
    return speech, noise


# ------------------------------------------------------------------- manifest

MANIFEST_NAME = "manifest.json"


def write_manifest(path, specs, sizes: SceneSizes, source: str = "synthetic",
                   sample_rate: int = sig.DEFAULT_SAMPLE_RATE,
                   scene_files=None) -> None:
    doc = {
        "version": 1,
        "source": source,
        "sample_rate": sample_rate,
        "sizes": {
            "n_adapt": sizes.n_adapt,
            "n_adapt_noise": sizes.n_adapt_noise,
            "n_test": sizes.n_test,
            "adapt_clip_s": sizes.adapt_clip_s,
            "test_clip_s": sizes.test_clip_s,
        },
        "scenes": [],
    }
    for i, spec in enumerate(specs):
        entry = {
            "index": spec.index,
            "scenario": spec.scenario,
            "snr_lo": spec.snr_range[0],
            "snr_hi": spec.snr_range[1],
            "speakers": list(spec.speakers),
            "seed": spec.seed,
        }
        if scene_files is not None:
            entry["files"] = scene_files[i]
        doc["scenes"].append(entry)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(path):
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != 1:
        raise InvalidConfigError(f"{path}: unsupported manifest version")
    s = doc["sizes"]
    sizes = SceneSizes(s["n_adapt"], s["n_adapt_noise"], s["n_test"],
                       s["adapt_clip_s"], s["test_clip_s"])
    specs, files = [], []
    for entry in doc["scenes"]:
        specs.append(SceneSpec(entry["index"], entry["scenario"],
                               (entry["snr_lo"], entry["snr_hi"]),
                               tuple(entry["speakers"]), entry["seed"]))
        files.append(entry.get("files"))
    return specs, sizes, doc, files


def export_scene_wavs(dataset: SceneDataset, scene_dir, fmt: str = "float32"):
    """WAV tree scenes/<m>/{adapt,test}/... for external consumers."""
    scene_dir = Path(scene_dir)
    adapt_dir = scene_dir / "adapt"
    test_dir = scene_dir / "test"
    adapt_dir.mkdir(parents=True, exist_ok=True)
    test_dir.mkdir(parents=True, exist_ok=True)
    for i, wave in enumerate(dataset.adapt_noisy):
        sig.write_wav(adapt_dir / f"noisy_{i:03d}.wav", wave, fmt)
    for i, wave in enumerate(dataset.adapt_noise):
        sig.write_wav(adapt_dir / f"noise_{i:03d}.wav", wave, fmt)
    for j, (clean, noisy) in enumerate(dataset.test_pairs):
        sig.write_wav(test_dir / f"clean_{j:03d}.wav", clean, fmt)
        sig.write_wav(test_dir / f"noisy_{j:03d}.wav", noisy, fmt)


# --------------------------------------------------------------- WAV ingestion

def ingest_wav_dir(root, snr_ranges=SNR_RANGES, seed: int = 0,
                   sizes: SceneSizes = SceneSizes()):
    """Build scene specs from a user-supplied directory.

    Layout: <root>/speech/*.wav and <root>/noise/<scenario>/*.wav.  Speech
    files alternate between adapt and test splits; each scenario's noise
    files are split round-robin into adapt-mix, reserve, and test groups, so
    the same disjointness discipline as the synthetic corpus applies.
    Scenes are every scenario directory crossed with every SNR range.
    """
    root = Path(root)
    speech_files = sorted((root / "speech").glob("*.wav"))
    if len(speech_files) < 4:
        raise InvalidInputError(f"{root}/speech: need at least 4 wav files")
    noise_root = root / "noise"
    scenario_dirs = sorted(d for d in noise_root.iterdir() if d.is_dir()) \
        if noise_root.is_dir() else []
    if not scenario_dirs:
        raise InvalidInputError(f"{root}/noise: need scenario subdirectories")
    adapt_speech = [str(p) for p in speech_files[0::2]]
    test_speech = [str(p) for p in speech_files[1::2]]
    specs, scene_files = [], []
    m = 0
    for scen_dir in scenario_dirs:
        noise_files = sorted(scen_dir.glob("*.wav"))
        if len(noise_files) < 3:
            raise InvalidInputError(f"{scen_dir}: need at least 3 noise clips")
        groups = ([str(p) for p in noise_files[0::3]],
                  [str(p) for p in noise_files[1::3]],
                  [str(p) for p in noise_files[2::3]])
        for snr_range in snr_ranges:
            specs.append(SceneSpec(m, scen_dir.name,
                                   tuple(float(x) for x in snr_range),
                                   (0, 1), seed))
            scene_files.append({
                "scenario_dir": str(scen_dir),
                "speech_adapt": adapt_speech,
                "speech_test": test_speech,
                "noise_adapt_mix": groups[0],
                "noise_reserve": groups[1],
                "noise_test": groups[2],
            })
            m += 1
    return specs, scene_files


def build_scene_from_wavs(spec: SceneSpec, files: dict,
                          sizes: SceneSizes = SceneSizes()) -> SceneDataset:
    """Assemble a SceneDataset from ingested WAV paths, mixing at seeded SNRs
    exactly as the synthetic path does."""
    rng = _rng(_SCENE_TAG, spec.seed, spec.index)
    lo, hi = spec.snr_range

    def load_all(paths):
        return [sig.read_wav(p) for p in paths]

    adapt_speech = load_all(files["speech_adapt"])
    test_speech = load_all(files["speech_test"])
    mix_noise = load_all(files["noise_adapt_mix"])
    reserve = load_all(files["noise_reserve"])
    test_noise = load_all(files["noise_test"])

    adapt_noisy, adapt_ids, mix_ids = [], [], []
    n_adapt = min(sizes.n_adapt, len(adapt_speech))
    for i in range(n_adapt):
        noisy, _ = mix_at_snr(adapt_speech[i], mix_noise[i % len(mix_noise)],
                              rng.uniform(lo, hi))
        adapt_noisy.append(noisy)
        adapt_ids.append(i)
        mix_ids.append(i % len(mix_noise))

    test_pairs, test_snrs, test_ids, tn_ids = [], [], [], []
    n_test = min(sizes.n_test, len(test_speech))
    for j in range(n_test):
        target = rng.uniform(lo, hi)
        clean = test_speech[j]
        noisy, _ = mix_at_snr(clean, test_noise[j % len(test_noise)], target)
        test_pairs.append((clean, noisy))
        test_snrs.append(target)
        test_ids.append(_TEST_UTT_BASE + j)
        tn_ids.append(_TEST_BASE + (j % len(test_noise)))

    return SceneDataset(spec, adapt_noisy, reserve, test_pairs, test_snrs,
                        adapt_ids, test_ids, mix_ids,
                        [_RESERVE_BASE + r for r in range(len(reserve))], tn_ids)
