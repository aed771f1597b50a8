"""Supervised pretraining, the self-supervised low-rank adaptation loop,
the full-fine-tune remix baseline, and protocol orchestration over a scene
schedule.

The adaptation step follows the remix recipe exactly: the frozen base model
turns a noisy utterance into a pseudo-target, fresh scene noise scaled for a
random SNR in the remix range is added back, the adapted model enhances the
remix, and only the adapter pair is updated by Adam on the negative-dB-SNR
loss between its output and the pseudo-target.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import signal as sig
from .autodiff import AdamState, Tape, adam_step
from .errors import InvalidConfigError, InvalidInputError, NumericError, ShapeError, SynthesisError
from .lora import (
    AdapterConfig,
    AdapterSet,
    adaptable_count_for_dims,
    adaptable_param_count,
    init_adapters,
    merge,
    transition,
)
from .metrics import MetricRecord, TrajectoryRecord, si_sdr, snr_db
from .model import (
    GruEnhancerParams,
    ModelCheckpoint,
    Pipeline,
    analyze_batch,
    copy_params,
    enhance_batch,
    expand_gains_batch,
    mask_graph,
    param_count,
    param_count_for_dims,
    params_digest,
    save,
)

NEG_SNR_EPS = 1e-12
COMPRESSION_FLOOR = 1e-8


# --------------------------------------------------------------------- losses

def spectral_mse_loss(estimate: sig.ErbFeatures, target: sig.ErbFeatures) -> float:
    """Mean squared difference over all frame-band feature entries."""
    if estimate.data.shape != target.data.shape:
        raise ShapeError(f"feature shapes differ: {estimate.data.shape} vs "
                         f"{target.data.shape}")
    return float(np.mean((estimate.data - target.data) ** 2))


def neg_snr_loss(estimate, pseudo_target) -> float:
    """Negative SNR in dB of the estimate against the pseudo-target:
    10 log10(||x_t - x_hat||^2 + eps) - 10 log10(||x_hat||^2).  Minimizing it
    maximizes the SNR; identical inputs bottom out at the numeric floor."""
    est = estimate.samples if isinstance(estimate, sig.Waveform) else np.asarray(estimate)
    tgt = pseudo_target.samples if isinstance(pseudo_target, sig.Waveform) else np.asarray(pseudo_target)
    if est.shape != tgt.shape:
        raise ShapeError("neg_snr_loss: length mismatch")
    p_target = float(tgt @ tgt)
    if p_target / tgt.size < 1e-12:
        raise InvalidInputError("neg_snr_loss: silent pseudo-target")
    residual = est - tgt
    p_residual = float(residual @ residual)
    return float(10.0 * np.log10(p_residual + NEG_SNR_EPS)
                 - 10.0 * np.log10(p_target))


def compressed_band_targets(mags_flat: np.ndarray, pipeline: Pipeline) -> np.ndarray:
    """(bands, cols) compressed band magnitudes with the gradient-safe floor."""
    band = pipeline.filterbank.weights @ mags_flat
    return (band + COMPRESSION_FLOOR) ** pipeline.compression


def spectral_mse_graph(tape: Tape, mask_flat, noisy_mags_flat: np.ndarray,
                       target_feats_flat: np.ndarray, pipeline: Pipeline):
    """Taped pretraining loss: expand the mask to per-bin gains, gate the
    noisy magnitudes, compress the band energies, and take the MSE against
    the clean compressed features."""
    fb = pipeline.filterbank
    nfb = fb.weights / fb.weights.sum(axis=0)
    gain_flat = tape.matmul(tape.constant(nfb.T), mask_flat)
    masked = tape.multiply(gain_flat, tape.constant(noisy_mags_flat))
    band = tape.matmul(tape.constant(fb.weights), masked)
    comp = tape.power(tape.offset(band, COMPRESSION_FLOOR), pipeline.compression)
    diff = tape.add(comp, tape.constant(-target_feats_flat))
    return tape.mean(tape.power(diff, 2))


def masked_synthesis_graph(tape: Tape, mask_flat, specs_data: np.ndarray,
                           pipeline: Pipeline, n_samples: int):
    """Taped waveform synthesis from a flat mask node.

    specs_data holds the (batch, frames, bins) complex spectrogram of the
    model input.  The map mask -> waveform is linear, so the backward pass
    is its exact adjoint: window-weighted re-framing of the output gradient,
    an rfft with the Hermitian doubling factors, projection onto the input
    spectrogram's phase, and the filterbank transpose.
    """
    n_batch, n_frames, n_bins = specs_data.shape
    bands = pipeline.filterbank.bands
    frame, hop = pipeline.frame_len, pipeline.hop
    fb = pipeline.filterbank
    nfb = fb.weights / fb.weights.sum(axis=0)
    w = sig.make_window(pipeline.window, frame)
    synth_len = frame + (n_frames - 1) * hop
    wsum = np.zeros(synth_len)
    for t in range(n_frames):
        wsum[t * hop: t * hop + frame] += w * w
    if np.any(wsum <= 1e-12):
        raise SynthesisError("zero window sum during masked synthesis")
    mult = np.full(n_bins, 2.0)
    mult[0] = 1.0
    if frame % 2 == 0:
        mult[-1] = 1.0

    masks = mask_flat.value.reshape(bands, n_frames, n_batch).transpose(2, 1, 0)
    gains = expand_gains_batch(masks, nfb)
    segs = sig.irfft(gains * specs_data, n=frame, axis=2)
    out = np.zeros((n_batch, synth_len))
    for t in range(n_frames):
        out[:, t * hop: t * hop + frame] += segs[:, t, :] * w
    out = (out / wsum)[:, :n_samples]

    spec_re = np.ascontiguousarray(specs_data.real)
    spec_im = np.ascontiguousarray(specs_data.imag)

    def backward(g):
        gp = np.zeros((n_batch, synth_len))
        gp[:, :n_samples] = g
        u = gp / wsum
        segs_adj = np.empty((n_batch, n_frames, frame))
        for t in range(n_frames):
            segs_adj[:, t, :] = u[:, t * hop: t * hop + frame] * w
        dfull = sig.rfft(segs_adj, axis=2)
        dgain = (dfull.real * spec_re + dfull.imag * spec_im) * (mult / frame)
        dmask = dgain.reshape(n_batch * n_frames, n_bins) @ nfb.T
        dmask = dmask.reshape(n_batch, n_frames, bands)
        return [np.ascontiguousarray(
            dmask.transpose(2, 1, 0).reshape(bands, n_frames * n_batch))]

    return tape.custom(out, [mask_flat], backward, "masked_synthesis")


def neg_snr_graph(tape: Tape, estimate_node, targets: np.ndarray):
    """Mean over the batch of the per-item negative-dB-SNR loss."""
    n_batch, n_samples = targets.shape
    p_targets = np.sum(targets * targets, axis=1)
    if np.any(p_targets / n_samples < 1e-12):
        raise InvalidInputError("neg_snr_graph: silent pseudo-target in batch")
    diff = tape.add(estimate_node, tape.constant(-targets))
    sq = tape.power(diff, 2)
    rowsum = tape.matmul(sq, tape.constant(np.ones((n_samples, 1))))
    logs = tape.log10(tape.offset(rowsum, NEG_SNR_EPS))
    total = tape.scale(tape.sum(logs), 10.0 / n_batch)
    return tape.offset(total, -10.0 * float(np.mean(np.log10(p_targets))))


# ------------------------------------------------------------- featurization

def featurize_batch(waves: np.ndarray, pipeline: Pipeline):
    """Batched STFT + compressed band features for a (batch, samples) block."""
    return analyze_batch(waves, pipeline)


def _flatten_frame_major(batched: np.ndarray) -> np.ndarray:
    """(batch, frames, rows) -> (rows, frames*batch), frame-major columns."""
    return batched.transpose(2, 1, 0).reshape(batched.shape[2], -1)


# ------------------------------------------------------------------- pretrain

@dataclass
class PretrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 12
    snr_range: tuple = (-5.0, 20.0)
    segment_s: float = 2.0
    lr_decay_factor: float = 10.0
    patience: int = 2
    seed: int = 0

    def digest(self) -> str:
        doc = json.dumps(self.__dict__, sort_keys=True, default=str)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]


def _crop(rng, samples: np.ndarray, n: int) -> np.ndarray:
    if samples.size < n:
        return sig.match_length(samples, n)
    off = int(rng.integers(0, samples.size - n + 1))
    return samples[off:off + n]


def pretrain(params: GruEnhancerParams, speech_corpus, noise_corpus,
             cfg: PretrainConfig, pipeline: Pipeline):
    """Supervised pretraining on on-the-fly mixtures.

    Each step crops a clean utterance and a noise clip, mixes them at an SNR
    drawn from the configured range, and minimizes the spectral MSE between
    the masked and clean compressed-ERB features.  The learning rate drops
    by the decay factor after `patience` consecutive non-improving epochs;
    the best-epoch parameters are returned as the checkpoint.
    """
    if not speech_corpus or not noise_corpus:
        raise InvalidInputError("pretrain: empty corpus")
    params.set_trainable(True)
    state = AdamState(params.params(), cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence((0x505452, cfg.seed)))
    n_seg = int(round(cfg.segment_s * pipeline.sample_rate))
    n_batches = max(1, len(speech_corpus) // cfg.batch_size)
    log = []
    best_mean = np.inf
    best_payload = None
    streak = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(speech_corpus))
        epoch_losses = []
        for b in range(n_batches):
            idxs = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            clean_list, noisy_list = [], []
            for i in idxs:
                clean_seg = _crop(rng, speech_corpus[i].samples, n_seg)
                clip = noise_corpus[int(rng.integers(len(noise_corpus)))]
                noise_seg = _crop(rng, clip.samples, n_seg)
                snr = rng.uniform(*cfg.snr_range)
                mixed, _ = sig.mix_at_snr(
                    sig.Waveform(clean_seg, pipeline.sample_rate),
                    sig.Waveform(noise_seg, pipeline.sample_rate), snr)
                clean_list.append(clean_seg)
                noisy_list.append(mixed.samples)
            noisy = np.stack(noisy_list)
            clean = np.stack(clean_list)
            noisy_specs, noisy_feats = featurize_batch(noisy, pipeline)
            clean_specs, _ = featurize_batch(clean, pipeline)
            noisy_mags_flat = _flatten_frame_major(np.abs(noisy_specs))
            target_flat = compressed_band_targets(
                _flatten_frame_major(np.abs(clean_specs)), pipeline)
            try:
                tape = Tape()
                mask_flat = mask_graph(tape, noisy_feats, params)
                loss = spectral_mse_graph(tape, mask_flat, noisy_mags_flat,
                                          target_flat, pipeline)
                tape.backward(loss)
                adam_step(state, params.params())
            except NumericError as exc:
                raise NumericError(
                    f"pretraining diverged at epoch {epoch} batch {b}: {exc}") from exc
            epoch_losses.append(float(loss.value))
        mean_loss = float(np.mean(epoch_losses))
        log.append({"epoch": epoch, "mean_loss": mean_loss, "lr": state.lr})
        if mean_loss < best_mean:
            best_mean = mean_loss
            best_payload = save(params, note=f"pretrain:{cfg.digest()}")
            streak = 0
        else:
            streak += 1
            if streak >= cfg.patience:
                state.lr /= cfg.lr_decay_factor
                streak = 0
    return best_payload, log


# ----------------------------------------------------------------- adaptation

@dataclass
class AdaptConfig:
    method: str = "lora"
    lr: float = 1e-3
    batch_size: int = 24
    updates: int = 20
    remix_snr_range: tuple = (-5.0, 5.0)
    segment_s: float = 2.0
    rank: int = 1
    scale: float = 64.0
    probe_pairs: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.updates < 0 or self.batch_size < 1:
            raise InvalidConfigError("updates must be >= 0 and batch >= 1")
        if self.method not in ("lora", "remixit"):
            raise InvalidConfigError(f"unknown adaptation method '{self.method}'")


@dataclass
class AdaptSessionResult:
    scene_index: int
    method: str
    losses: list
    probe_delta_snr: list
    wall_times: list
    segments_used: int
    hash_before: str
    hash_after: str


def _remix_batch(rng, pseudo_targets: np.ndarray, noise_pool, cfg, n_seg):
    """y_tilde = x_hat + alpha * n at SNR targets drawn from the remix range."""
    n_batch = pseudo_targets.shape[0]
    nidx = rng.integers(0, len(noise_pool), size=n_batch)
    noise = np.stack([_crop(rng, noise_pool[int(i)].samples, n_seg)
                      for i in nidx])
    snrs = rng.uniform(*cfg.remix_snr_range, size=n_batch)
    p_x = np.mean(pseudo_targets ** 2, axis=1)
    p_n = np.mean(noise ** 2, axis=1)
    if np.any(p_x < 1e-12):
        raise InvalidInputError("remix: silent pseudo-target")
    if np.any(p_n < 1e-12):
        raise InvalidInputError("remix: silent noise segment")
    alphas = np.sqrt(p_x / (p_n * 10.0 ** (snrs / 10.0)))
    return pseudo_targets + alphas[:, None] * noise


def _probe_setup(scene, base_or_student, pipeline, cfg, reference_params):
    """Fixed probe subset with the pretrained-reference SNR per pair."""
    n_probe = min(cfg.probe_pairs, len(scene.test_pairs))
    cleans = np.stack([scene.test_pairs[j][0].samples for j in range(n_probe)])
    noisys = np.stack([scene.test_pairs[j][1].samples for j in range(n_probe)])
    base_out = enhance_batch(noisys, reference_params, pipeline)
    base_snrs = np.array([snr_db(base_out[j], cleans[j]) for j in range(n_probe)])
    return cleans, noisys, base_snrs


def _probe_delta(eval_params, pipeline, cleans, noisys, base_snrs, adapters=None):
    out = enhance_batch(noisys, eval_params, pipeline, adapters=adapters)
    snrs = np.array([snr_db(out[j], cleans[j]) for j in range(len(base_snrs))])
    return float(np.mean(snrs - base_snrs))


def adapt_scene_lora(base: GruEnhancerParams, adapters: AdapterSet, scene,
                     cfg: AdaptConfig, pipeline: Pipeline) -> AdaptSessionResult:
    """One scene of Algorithm-style low-rank adaptation.  The base stays
    frozen (hash-checked); pseudo-targets always come from the adapter-free
    base model."""
    if cfg.method != "lora":
        raise InvalidConfigError("adapt_scene_lora requires method 'lora'")
    hash_before = params_digest(base)
    rng = np.random.default_rng(
        np.random.SeedSequence((0xAD4057, cfg.seed, scene.spec.index)))
    n_seg = int(round(cfg.segment_s * pipeline.sample_rate))
    state = AdamState(adapters.params(), cfg.lr)
    cleans, noisys, base_snrs = _probe_setup(scene, base, pipeline, cfg, base)
    losses, deltas, walls = [], [], []
    segments = 0
    for update in range(cfg.updates):
        t0 = time.perf_counter()
        try:
            idxs = rng.integers(0, len(scene.adapt_noisy), size=cfg.batch_size)
            crops = np.stack([_crop(rng, scene.adapt_noisy[int(i)].samples, n_seg)
                              for i in idxs])
            pseudo = enhance_batch(crops, base, pipeline)
            remix = _remix_batch(rng, pseudo, scene.adapt_noise, cfg, n_seg)
            specs, feats = featurize_batch(remix, pipeline)
            tape = Tape()
            mask_flat = mask_graph(tape, feats, base, adapters)
            estimate = masked_synthesis_graph(tape, mask_flat, specs, pipeline, n_seg)
            loss = neg_snr_graph(tape, estimate, pseudo)
            tape.backward(loss)
            adam_step(state, adapters.params())
        except NumericError as exc:
            raise NumericError(
                f"adaptation aborted at scene {scene.spec.index} "
                f"update {update}: {exc}") from exc
        segments += cfg.batch_size
        merged = merge(base, adapters)
        deltas.append(_probe_delta(merged, pipeline, cleans, noisys, base_snrs))
        losses.append(float(loss.value))
        walls.append(time.perf_counter() - t0)
    return AdaptSessionResult(scene.spec.index, "lora", losses, deltas, walls,
                              segments, hash_before, params_digest(base))


def adapt_scene_remixit(student: GruEnhancerParams, teacher: GruEnhancerParams,
                        scene, cfg: AdaptConfig,
                        pipeline: Pipeline) -> AdaptSessionResult:
    """Full-fine-tune baseline under the identical remix loop: every student
    parameter trains; the separate frozen teacher provides pseudo-targets."""
    if cfg.method != "remixit":
        raise InvalidConfigError("adapt_scene_remixit requires method 'remixit'")
    hash_before = params_digest(teacher)
    rng = np.random.default_rng(
        np.random.SeedSequence((0xAD4057, cfg.seed, scene.spec.index)))
    n_seg = int(round(cfg.segment_s * pipeline.sample_rate))
    student.set_trainable(True)
    state = AdamState(student.params(), cfg.lr)
    cleans, noisys, base_snrs = _probe_setup(scene, student, pipeline, cfg, teacher)
    losses, deltas, walls = [], [], []
    segments = 0
    for update in range(cfg.updates):
        t0 = time.perf_counter()
        try:
            idxs = rng.integers(0, len(scene.adapt_noisy), size=cfg.batch_size)
            crops = np.stack([_crop(rng, scene.adapt_noisy[int(i)].samples, n_seg)
                              for i in idxs])
            pseudo = enhance_batch(crops, teacher, pipeline)
            remix = _remix_batch(rng, pseudo, scene.adapt_noise, cfg, n_seg)
            specs, feats = featurize_batch(remix, pipeline)
            tape = Tape()
            mask_flat = mask_graph(tape, feats, student)
            estimate = masked_synthesis_graph(tape, mask_flat, specs, pipeline, n_seg)
            loss = neg_snr_graph(tape, estimate, pseudo)
            tape.backward(loss)
            adam_step(state, student.params())
        except NumericError as exc:
            raise NumericError(
                f"adaptation aborted at scene {scene.spec.index} "
                f"update {update}: {exc}") from exc
        segments += cfg.batch_size
        losses.append(float(loss.value))
        deltas.append(_probe_delta(student, pipeline, cleans, noisys, base_snrs))
        walls.append(time.perf_counter() - t0)
    return AdaptSessionResult(scene.spec.index, "remixit", losses, deltas, walls,
                              segments, hash_before, params_digest(teacher))


def memory_report(method: str, bands: int, hidden: int, rank: int = 1) -> dict:
    """Stored float64 values per method: the remix baseline keeps a separate
    teacher copy, the adapter method stores the base plus adapter pairs."""
    base = param_count_for_dims(bands, hidden)
    if method == "remixit":
        return {"model_values": base, "teacher_values": base,
                "adapter_values": 0, "total_values": 2 * base}
    if method == "lora":
        extra = adaptable_count_for_dims(bands, hidden, rank)
        return {"model_values": base, "teacher_values": 0,
                "adapter_values": extra, "total_values": base + extra}
    raise InvalidConfigError(f"unknown method '{method}'")


# ------------------------------------------------------------------- protocol

@dataclass
class ProtocolResult:
    method: str
    mode: str
    sessions: list
    records: list = field(default_factory=list)
    trajectories: list = field(default_factory=list)
    states: dict = field(default_factory=dict)
    hash_before: str = ""
    hash_after: str = ""


def evaluate_scene(scene, eval_sets: dict, mode: str, pipeline: Pipeline):
    """Metric rows for every (method, params-or-(params, adapters)) entry."""
    records = []
    cleans = np.stack([p[0].samples for p in scene.test_pairs])
    noisys = np.stack([p[1].samples for p in scene.test_pairs])
    lo, hi = scene.spec.snr_range
    for method, entry in eval_sets.items():
        if method == "noisy":
            outs = noisys
        else:
            params, adapters = entry if isinstance(entry, tuple) else (entry, None)
            outs = enhance_batch(noisys, params, pipeline, adapters=adapters)
        row_mode = mode if method in ("lora", "remixit") else "-"
        for j in range(len(scene.test_pairs)):
            records.append(MetricRecord(
                scene_index=scene.spec.index, method=method, mode=row_mode,
                snr_lo=lo, snr_hi=hi, pair_id=j,
                si_sdr_db=si_sdr(outs[j], cleans[j]),
                snr_db=snr_db(outs[j], cleans[j])))
    return records


def run_protocol(schedule, pretrained: GruEnhancerParams, cfg: AdaptConfig,
                 pipeline: Pipeline, scene_provider, evaluate: bool = True,
                 include_noisy: bool = False) -> ProtocolResult:
    """Adapt across the schedule and (optionally) evaluate each scene's test
    set for the adapted method and the never-adapted pretrained baseline.

    Isolated mode re-initializes the adaptation state per scene from
    scene-index-keyed seeds; sequential mode carries it over in schedule
    order.  The frozen base is hash-checked across the whole run.
    """
    base = copy_params(pretrained, trainable=False)
    result = ProtocolResult(cfg.method, schedule.mode, sessions=[])
    result.hash_before = params_digest(base)
    adapters = None
    student = None
    for spec in schedule.order:
        scene = scene_provider(spec)
        if cfg.method == "lora":
            if schedule.mode == "isolated" or adapters is None:
                adapters = init_adapters(
                    AdapterConfig(cfg.rank, cfg.scale, init_seed=cfg.seed),
                    base.bands, base.hidden, scene_index=spec.index)
            else:
                adapters = transition(adapters, "carry", next_index=spec.index)
            session = adapt_scene_lora(base, adapters, scene, cfg, pipeline)
            snapshot = transition(adapters, "carry", next_index=spec.index)
            result.states[spec.index] = snapshot
            eval_entry = (base, adapters)
        else:
            if schedule.mode == "isolated" or student is None:
                student = copy_params(base, trainable=True)
            session = adapt_scene_remixit(student, base, scene, cfg, pipeline)
            result.states[spec.index] = save(student, note=f"remixit scene {spec.index}")
            eval_entry = student
        result.sessions.append(session)
        for u, (loss, delta) in enumerate(zip(session.losses,
                                              session.probe_delta_snr)):
            result.trajectories.append(TrajectoryRecord(
                spec.index, cfg.method, u, loss, delta))
        if evaluate:
            eval_sets = {cfg.method: eval_entry, "pretrained": base}
            if include_noisy:
                eval_sets["noisy"] = None
            result.records.extend(
                evaluate_scene(scene, eval_sets, schedule.mode, pipeline))
    result.hash_after = params_digest(base)
    return result
