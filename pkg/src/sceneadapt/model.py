"""GRU mask-estimation enhancer: FC-in -> GRU -> GRU -> FC-out -> sigmoid,
operating on compressed ERB features of a fixed STFT geometry.

Weight matrices are stored math-oriented (out x in) and data flows as
column batches.  The FC layers carry no bias; each GRU gate has input and
recurrent matrices plus one bias vector, which makes the reference
128-band / 128-hidden configuration come out at exactly 230,144 values.

Two forward paths exist on purpose: a plain numpy path for inference
(`forward`, `enhance`, and their batch variants) and a taped path for
training (`mask_graph`).  Both share the same kernels and produce
bit-identical masks.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from . import signal as sig
from .autodiff import Parameter, Tape, stable_sigmoid
from .errors import (
    InvalidConfigError,
    InvalidInputError,
    NumericError,
    ShapeError,
    SynthesisError,
)

GATES = ("z", "r", "n")


class GruLayerParams:
    """One GRU layer: per gate an input matrix W, recurrent matrix U, bias b."""

    def __init__(self, in_dim: int, hidden: int, prefix: str):
        self.in_dim = in_dim
        self.hidden = hidden
        self.w = {g: Parameter(np.zeros((hidden, in_dim)), name=f"{prefix}.w{g}") for g in GATES}
        self.u = {g: Parameter(np.zeros((hidden, hidden)), name=f"{prefix}.u{g}") for g in GATES}
        self.b = {g: Parameter(np.zeros((hidden, 1)), name=f"{prefix}.b{g}") for g in GATES}

    def params(self):
        out = []
        for g in GATES:
            out.extend([self.w[g], self.u[g], self.b[g]])
        return out


class GruEnhancerParams:
    """All backbone weights, in declaration order fc_in, gru1, gru2, fc_out."""

    def __init__(self, bands: int, hidden: int):
        self.bands = bands
        self.hidden = hidden
        self.fc_in = Parameter(np.zeros((hidden, bands)), name="fc_in")
        self.gru1 = GruLayerParams(hidden, hidden, "gru1")
        self.gru2 = GruLayerParams(hidden, hidden, "gru2")
        self.fc_out = Parameter(np.zeros((bands, hidden)), name="fc_out")

    def params(self) -> list:
        return [self.fc_in] + self.gru1.params() + self.gru2.params() + [self.fc_out]

    def set_trainable(self, flag: bool) -> None:
        for p in self.params():
            p.trainable = flag


def param_count_for_dims(bands: int, hidden: int) -> int:
    """Closed form: 2*B*H for the FC pair, per GRU layer 3*(2*H^2 + H)."""
    return 2 * bands * hidden + 2 * 3 * (2 * hidden * hidden + hidden)


def param_count(params: GruEnhancerParams) -> int:
    return sum(p.value.size for p in params.params())


def init_params(bands: int, hidden: int, seed: int = 0) -> GruEnhancerParams:
    """Uniform init scaled by 1/sqrt(fan-in); biases start at zero."""
    params = GruEnhancerParams(bands, hidden)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x6D6F64)))
    for p in params.params():
        if p.value.ndim == 2 and p.value.shape[1] > 1:
            bound = 1.0 / np.sqrt(p.value.shape[1])
            p.value[...] = rng.uniform(-bound, bound, size=p.value.shape)
    return params


def copy_params(params: GruEnhancerParams, trainable: bool | None = None) -> GruEnhancerParams:
    out = GruEnhancerParams(params.bands, params.hidden)
    for dst, src in zip(out.params(), params.params()):
        dst.value[...] = src.value
        dst.trainable = src.trainable if trainable is None else trainable
    return out


def params_digest(params: GruEnhancerParams) -> str:
    """SHA-256 over all values in declaration order; detects any drift."""
    h = hashlib.sha256()
    for p in params.params():
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ inference

def gru_cell(x: np.ndarray, h_prev: np.ndarray, layer: GruLayerParams) -> np.ndarray:
    """One gated update.  Accepts vectors or (dim, batch) column blocks.

    z and r use sigmoid gates, the candidate applies the reset gate to the
    previous state before the recurrent matmul, and the new state is the
    convex blend z*h_prev + (1-z)*candidate (z=1 carries the state through).
    """
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h_prev, dtype=np.float64)
    vector_in = x.ndim == 1
    if vector_in:
        x = x[:, None]
    if h.ndim == 1:
        h = h[:, None]
    if x.shape[0] != layer.in_dim or h.shape[0] != layer.hidden:
        raise ShapeError(
            f"gru_cell: got input dim {x.shape[0]}, state dim {h.shape[0]}, "
            f"expected {layer.in_dim}, {layer.hidden}")
    z = stable_sigmoid((layer.w["z"].value @ x + layer.u["z"].value @ h) + layer.b["z"].value)
    r = stable_sigmoid((layer.w["r"].value @ x + layer.u["r"].value @ h) + layer.b["r"].value)
    cand = np.tanh((layer.w["n"].value @ x + layer.u["n"].value @ (r * h)) + layer.b["n"].value)
    h_new = z * h + (1.0 - z) * cand
    if not np.all(np.isfinite(h_new)):
        raise NumericError("gru_cell produced a non-finite activation")
    return h_new[:, 0] if vector_in else h_new


def _linear(x: np.ndarray, weight: Parameter, adapter) -> np.ndarray:
    out = weight.value @ x
    if adapter is not None:
        out = out + adapter.scale * (adapter.b.value @ (adapter.a.value @ x))
    return out


def _gru_layer_run(x_all: np.ndarray, layer: GruLayerParams, n_batch: int,
                   want_cache: bool = False):
    """Run one GRU layer over a (in_dim, frames*batch) frame-major block.

    Gate matrices are stacked so each step costs two recurrent GEMMs and all
    input products are hoisted into one big GEMM up front.  Returns the
    (hidden, frames*batch) state sequence, plus the per-step activations
    needed by the backward pass when requested.
    """
    hidden = layer.hidden
    n_cols = x_all.shape[1]
    n_frames = n_cols // n_batch
    w_zr = np.vstack((layer.w["z"].value, layer.w["r"].value))
    u_zr = np.vstack((layer.u["z"].value, layer.u["r"].value))
    b_zr = np.vstack((layer.b["z"].value, layer.b["r"].value))
    wx_zr = w_zr @ x_all
    wx_n = layer.w["n"].value @ x_all
    un = layer.u["n"].value
    bn = layer.b["n"].value
    h = np.zeros((hidden, n_batch))
    h_all = np.empty((hidden, n_cols))
    zr_cache = np.empty((2 * hidden, n_cols)) if want_cache else None
    cand_cache = np.empty((hidden, n_cols)) if want_cache else None
    for t in range(n_frames):
        s = slice(t * n_batch, (t + 1) * n_batch)
        zr = stable_sigmoid((wx_zr[:, s] + u_zr @ h) + b_zr)
        z = zr[:hidden]
        r = zr[hidden:]
        cand = np.tanh((wx_n[:, s] + un @ (r * h)) + bn)
        h = z * h + (1.0 - z) * cand
        h_all[:, s] = h
        if want_cache:
            zr_cache[:, s] = zr
            cand_cache[:, s] = cand
    return h_all, (zr_cache, cand_cache, w_zr, u_zr)


def _gru_layer_backward(g: np.ndarray, x_all: np.ndarray, h_all: np.ndarray,
                        cache, layer: GruLayerParams, n_batch: int,
                        need_dx: bool, need_dw: bool):
    """Backpropagation through time for one layer.

    g is dL/dh for every step; returns (dx_all or None, per-parameter grads
    or None) with weight gradients accumulated across all steps.
    """
    zr_cache, cand_cache, w_zr, u_zr = cache
    hidden = layer.hidden
    n_cols = x_all.shape[1]
    n_frames = n_cols // n_batch
    un = layer.u["n"].value
    dx_all = np.empty_like(x_all) if need_dx else None
    if need_dw:
        dw_zr = np.zeros_like(w_zr)
        du_zr = np.zeros_like(u_zr)
        db_zr = np.zeros((2 * hidden, 1))
        dwn = np.zeros_like(layer.w["n"].value)
        dun = np.zeros_like(un)
        dbn = np.zeros((hidden, 1))
    dh_next = np.zeros((hidden, n_batch))
    dazr = np.empty((2 * hidden, n_batch))
    for t in reversed(range(n_frames)):
        s = slice(t * n_batch, (t + 1) * n_batch)
        big_g = g[:, s] + dh_next
        zr = zr_cache[:, s]
        z = zr[:hidden]
        r = zr[hidden:]
        cand = cand_cache[:, s]
        h_prev = h_all[:, t * n_batch - n_batch: t * n_batch] if t > 0 \
            else np.zeros((hidden, n_batch))
        dz = big_g * (h_prev - cand)
        dcand = big_g * (1.0 - z)
        dac = dcand * (1.0 - cand * cand)
        drh = un.T @ dac
        dr = drh * h_prev
        dazr[:hidden] = dz * (z * (1.0 - z))
        dazr[hidden:] = dr * (r * (1.0 - r))
        dh_next = big_g * z
        dh_next += drh * r
        dh_next += u_zr.T @ dazr
        if need_dw:
            x_t = x_all[:, s]
            dw_zr += dazr @ x_t.T
            du_zr += dazr @ h_prev.T
            db_zr += dazr.sum(axis=1, keepdims=True)
            dwn += dac @ x_t.T
            dun += dac @ (r * h_prev).T
            dbn += dac.sum(axis=1, keepdims=True)
        if need_dx:
            dx_all[:, s] = w_zr.T @ dazr + layer.w["n"].value.T @ dac
    if need_dw:
        grads = (dw_zr[:hidden], du_zr[:hidden], db_zr[:hidden],
                 dw_zr[hidden:], du_zr[hidden:], db_zr[hidden:], dwn, dun, dbn)
    else:
        grads = (None,) * 9
    return dx_all, grads


def forward_masks_batch(feats: np.ndarray, params: GruEnhancerParams,
                        adapters=None) -> np.ndarray:
    """Masks for a (batch, frames, bands) feature block; returns same shape.

    Causal frame-by-frame processing from zero initial states; every output
    entry lies strictly in (0, 1).
    """
    if feats.ndim != 3 or feats.shape[2] != params.bands:
        raise ShapeError(f"features shape {feats.shape} incompatible with bands={params.bands}")
    n_batch, n_frames, _ = feats.shape
    ad_in = adapters.adapters.get("fc_in") if adapters is not None else None
    ad_out = adapters.adapters.get("fc_out") if adapters is not None else None
    x_all = feats.transpose(2, 1, 0).reshape(params.bands, n_frames * n_batch)
    u_all = np.tanh(_linear(x_all, params.fc_in, ad_in))
    h1_all, _ = _gru_layer_run(u_all, params.gru1, n_batch)
    h2_all, _ = _gru_layer_run(h1_all, params.gru2, n_batch)
    mask_flat = stable_sigmoid(_linear(h2_all, params.fc_out, ad_out))
    if not np.all(np.isfinite(mask_flat)):
        raise NumericError("forward produced a non-finite activation")
    return mask_flat.reshape(params.bands, n_frames, n_batch).transpose(2, 1, 0)


def forward(features: sig.ErbFeatures, params: GruEnhancerParams,
            adapters=None) -> np.ndarray:
    """Mask (frames x bands) for a single utterance's features."""
    return forward_masks_batch(features.data[None, :, :], params, adapters)[0]


class Pipeline:
    """STFT geometry plus the ERB front end shared by all forward paths."""

    def __init__(self, bands: int, frame_len: int = 512, hop: int = 256,
                 compression: float = 0.3, window: str = "sine",
                 sample_rate: int = sig.DEFAULT_SAMPLE_RATE):
        self.frame_len = frame_len
        self.hop = hop
        self.compression = compression
        self.window = window
        self.sample_rate = sample_rate
        self.filterbank = sig.make_erb_filterbank(bands, frame_len // 2 + 1, sample_rate)

    def pad_to_frames(self, samples: np.ndarray) -> np.ndarray:
        if samples.size < self.frame_len:
            n = self.frame_len
        else:
            n_frames = 1 + int(np.ceil((samples.size - self.frame_len) / self.hop))
            n = self.frame_len + (n_frames - 1) * self.hop
        if n == samples.size:
            return samples
        return np.concatenate([samples, np.zeros(n - samples.size)])


def analyze_batch(waves: np.ndarray, pipeline: Pipeline):
    """Batched front end: (batch, samples) -> (specs (B,T,bins), feats (B,T,bands)).

    Numerically identical to running stft + erb_features per item.
    """
    if waves.ndim != 2:
        raise ShapeError("analyze_batch expects (batch, samples)")
    padded = np.stack([pipeline.pad_to_frames(w) for w in waves])
    w = sig.make_window(pipeline.window, pipeline.frame_len)
    frames = sig.frame_signals(padded, pipeline.frame_len, pipeline.hop)
    specs = sig.rfft(frames * w, axis=2)
    feats = (np.abs(specs) @ pipeline.filterbank.weights.T) ** pipeline.compression
    return specs, feats


def expand_gains_batch(masks: np.ndarray, nfb: np.ndarray) -> np.ndarray:
    """(B,T,bands) masks -> (B,T,bins) gains via one 2-D GEMM (masks often
    arrive as transpose views, where the broadcast matmul path crawls)."""
    n_batch, n_frames, bands = masks.shape
    flat = np.ascontiguousarray(masks.reshape(n_batch * n_frames, bands))
    return (flat @ nfb).reshape(n_batch, n_frames, nfb.shape[1])


def synthesize_batch(specs: np.ndarray, masks: np.ndarray, pipeline: Pipeline,
                     n_samples: int) -> np.ndarray:
    """Batched back end: gate (B,T,bins) spectra with (B,T,bands) masks and
    overlap-add back to (batch, n_samples).  Same math as apply_erb_mask +
    istft per item."""
    fb = pipeline.filterbank
    nfb = fb.weights / fb.weights.sum(axis=0)
    gains = expand_gains_batch(masks, nfb)
    w = sig.make_window(pipeline.window, pipeline.frame_len)
    segs = sig.irfft(gains * specs, n=pipeline.frame_len, axis=2)
    out, wsum = sig.overlap_add(segs, w, pipeline.hop)
    if np.any(wsum <= 1e-12):
        raise SynthesisError("zero window sum during overlap-add synthesis")
    return (out / wsum)[:, :n_samples]


def enhance_batch(waves: np.ndarray, params: GruEnhancerParams,
                  pipeline: Pipeline, adapters=None) -> np.ndarray:
    """Enhance a (batch, samples) block of equal-length waveforms."""
    n_samples = waves.shape[1]
    specs, feats = analyze_batch(waves, pipeline)
    masks = forward_masks_batch(feats, params, adapters)
    return synthesize_batch(specs, masks, pipeline, n_samples)


def enhance(wave: sig.Waveform, params: GruEnhancerParams, pipeline: Pipeline,
            adapters=None) -> sig.Waveform:
    """stft -> ERB features -> mask -> gate -> istft, trimmed to input length."""
    if len(wave) < 1:
        raise InvalidInputError("empty input")
    out = enhance_batch(wave.samples[None, :], params, pipeline, adapters)
    return sig.Waveform(out[0], wave.sample_rate)


# ------------------------------------------------------------------- training

def gru_layer_graph(tape: Tape, x_all, layer: GruLayerParams, leaf: dict,
                    n_batch: int):
    """A whole GRU layer as one fused tape primitive.

    Forward shares `_gru_layer_run` with the inference path, so both are bit
    identical; the backward is manual backpropagation through time with the
    gate derivatives accumulated across steps.  Weight gradients are skipped
    for frozen layers, the input gradient when nothing upstream needs it.
    """
    h_all, cache = _gru_layer_run(x_all.value, layer, n_batch, want_cache=True)
    parents = (x_all,
               leaf[id(layer.w["z"])], leaf[id(layer.u["z"])], leaf[id(layer.b["z"])],
               leaf[id(layer.w["r"])], leaf[id(layer.u["r"])], leaf[id(layer.b["r"])],
               leaf[id(layer.w["n"])], leaf[id(layer.u["n"])], leaf[id(layer.b["n"])])
    need_dw = parents[1].requires_grad

    def backward(g):
        dx_all, grads = _gru_layer_backward(
            g, x_all.value, h_all, cache, layer, n_batch,
            need_dx=x_all.requires_grad, need_dw=need_dw)
        return [dx_all, *grads]

    return tape.custom(h_all, parents, backward, "gru_layer")


def mask_graph(tape: Tape, feats: np.ndarray, params: GruEnhancerParams,
               adapters=None):
    """Record the mask computation for a (batch, frames, bands) block.

    Returns the flat mask node of shape (bands, frames*batch) with columns
    ordered frame-major, matching `forward_masks_batch` bit for bit.
    """
    n_batch, n_frames, n_bands = feats.shape
    if n_bands != params.bands:
        raise ShapeError(f"features bands {n_bands} != model bands {params.bands}")
    leaf = {id(p): tape.param(p) for p in params.params()}
    ad_in = adapters.adapters.get("fc_in") if adapters is not None else None
    ad_out = adapters.adapters.get("fc_out") if adapters is not None else None

    def linear(x, weight, adapter):
        out = tape.matmul(leaf[id(weight)], x)
        if adapter is not None:
            a = tape.param(adapter.a)
            b = tape.param(adapter.b)
            out = tape.add(out, tape.scale(tape.matmul(b, tape.matmul(a, x)), adapter.scale))
        return out

    x_all = tape.constant(feats.transpose(2, 1, 0).reshape(n_bands, n_frames * n_batch))
    u_all = tape.tanh(linear(x_all, params.fc_in, ad_in))
    h1_all = gru_layer_graph(tape, u_all, params.gru1, leaf, n_batch)
    h2_all = gru_layer_graph(tape, h1_all, params.gru2, leaf, n_batch)
    return tape.sigmoid(linear(h2_all, params.fc_out, ad_out))


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"SEGRUCKP"
_VERSION = 1


class ModelCheckpoint:
    """Versioned flat snapshot of a parameter set plus a provenance note."""

    def __init__(self, bands: int, hidden: int, payload: np.ndarray, note: str = "",
                 version: int = _VERSION):
        self.version = version
        self.bands = bands
        self.hidden = hidden
        self.payload = np.asarray(payload, dtype=np.float64)
        self.note = note
        expected = param_count_for_dims(bands, hidden)
        if self.payload.size != expected:
            raise InvalidConfigError(
                f"payload length {self.payload.size} != expected {expected}")


def save(params: GruEnhancerParams, note: str = "") -> ModelCheckpoint:
    payload = np.concatenate([p.value.ravel() for p in params.params()])
    return ModelCheckpoint(params.bands, params.hidden, payload, note)


def load(ckpt: ModelCheckpoint, trainable: bool = False) -> GruEnhancerParams:
    if ckpt.version != _VERSION:
        raise InvalidConfigError(f"unsupported checkpoint version {ckpt.version}")
    params = GruEnhancerParams(ckpt.bands, ckpt.hidden)
    pos = 0
    for p in params.params():
        n = p.value.size
        p.value[...] = ckpt.payload[pos:pos + n].reshape(p.value.shape)
        p.trainable = trainable
        pos += n
    return params


def write_checkpoint(path, ckpt: ModelCheckpoint) -> None:
    note = ckpt.note.encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", ckpt.version, ckpt.bands, ckpt.hidden))
        f.write(struct.pack("<I", len(note)))
        f.write(note)
        f.write(struct.pack("<Q", ckpt.payload.size))
        f.write(ckpt.payload.astype("<f8").tobytes())


def read_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise InvalidConfigError(f"{path}: not a model checkpoint")
        version, bands, hidden = struct.unpack("<III", f.read(12))
        (note_len,) = struct.unpack("<I", f.read(4))
        note = f.read(note_len).decode("utf-8")
        (count,) = struct.unpack("<Q", f.read(8))
        payload = np.frombuffer(f.read(count * 8), dtype="<f8", count=count)
    return ModelCheckpoint(bands, hidden, payload, note, version)
