"""Surrogate recognizer: MFCC -> single tanh RNN layer -> per-frame CTC logits.

Checkpoint format (little-endian, version 1)::

    8 bytes   magic  b"OTASURR\\x01"
    4 bytes   uint32 header length N
    N bytes   UTF-8 JSON header: {"version", "alphabet", "mfcc", "hidden_size",
              "arrays": [{"name", "shape", "offset"}], ...}
    rest      float64 array payloads in header order, C-contiguous

The header is written with sorted keys so identical models give identical bytes.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ctc import Alphabet, TargetPhrase, batch_ctc_loss_and_grad, ctc_loss_and_grad, greedy_decode
from .mfcc import MfccConfig, mfcc_forward, mfcc_vjp

log = logging.getLogger(__name__)

MAGIC = b"OTASURR\x01"
FORMAT_VERSION = 1
PARAM_NAMES = ("w_in", "b_in", "w_rec", "w_out", "b_out")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SurrogateModel:
    alphabet: Alphabet
    mfcc_cfg: MfccConfig
    hidden_size: int
    params: dict[str, np.ndarray]
    feat_mean: np.ndarray
    feat_std: np.ndarray
    version: str = f"surrogate-rnn-v{FORMAT_VERSION}"
    loss_curve: list[float] = field(default_factory=list)

    @property
    def num_classes(self):
        return self.alphabet.num_classes

    def copy(self) -> "SurrogateModel":
        return SurrogateModel(self.alphabet, self.mfcc_cfg, self.hidden_size,
                              {k: v.copy() for k, v in self.params.items()},
                              self.feat_mean.copy(), self.feat_std.copy(), self.version,
                              list(self.loss_curve))


def init_model(alphabet: Alphabet = Alphabet(), mfcc_cfg: MfccConfig = MfccConfig(),
               hidden_size: int = 128, seed: int = 0, feat_mean=None, feat_std=None) -> SurrogateModel:
    rng = np.random.default_rng(seed)
    c, h, k = mfcc_cfg.num_coefficients, hidden_size, alphabet.num_classes
    # orthogonal recurrent init keeps early BPTT well conditioned
    q, _ = np.linalg.qr(rng.standard_normal((h, h)))
    params = {
        "w_in": rng.standard_normal((h, c)) / np.sqrt(c),
        "b_in": np.zeros(h),
        "w_rec": 0.9 * q,
        "w_out": rng.standard_normal((k, h)) / np.sqrt(h),
        "b_out": np.zeros(k),
    }
    mean = np.zeros(c) if feat_mean is None else np.asarray(feat_mean, dtype=float)
    std = np.ones(c) if feat_std is None else np.asarray(feat_std, dtype=float)
    return SurrogateModel(alphabet, mfcc_cfg, hidden_size, params, mean, std)


# ---------------------------------------------------------------------------
# forward / backward over [B, T, C] feature batches
# ---------------------------------------------------------------------------

def _forward_batch(model: SurrogateModel, feats: np.ndarray):
    p = model.params
    z = (feats - model.feat_mean) / model.feat_std
    pre_in = z @ p["w_in"].T + p["b_in"]
    B, T, H = pre_in.shape
    hs = np.empty((B, T, H))
    h = np.zeros((B, H))
    w_rec_t = p["w_rec"].T
    for t in range(T):
        h = np.tanh(pre_in[:, t] + h @ w_rec_t)
        hs[:, t] = h
    logits = hs @ p["w_out"].T + p["b_out"]
    return z, hs, logits


def _backward_batch(model: SurrogateModel, z, hs, g_logits, want_params=True):
    """Backprop through time. Returns (param grads or None, d loss / d features)."""
    p = model.params
    B, T, H = hs.shape
    g_h = g_logits @ p["w_out"]
    g_pre = np.empty_like(hs)
    carry = np.zeros((B, H))
    w_rec = p["w_rec"]
    for t in range(T - 1, -1, -1):
        d = (g_h[:, t] + carry) * (1.0 - hs[:, t] ** 2)
        g_pre[:, t] = d
        carry = d @ w_rec
    g_feats = (g_pre @ p["w_in"]) / model.feat_std
    if not want_params:
        return None, g_feats
    h_prev = np.concatenate((np.zeros((B, 1, H)), hs[:, :-1]), axis=1)
    grads = {
        "w_out": np.einsum("btk,bth->kh", g_logits, hs),
        "b_out": g_logits.sum(axis=(0, 1)),
        "w_rec": np.einsum("bti,btj->ij", g_pre, h_prev),
        "w_in": np.einsum("bth,btc->hc", g_pre, z),
        "b_in": g_pre.sum(axis=(0, 1)),
    }
    return grads, g_feats


def _as_values(features):
    return features.values if hasattr(features, "values") else np.asarray(features, dtype=np.float64)


def model_forward(model: SurrogateModel, features) -> np.ndarray:
    """Per-frame logits [T, num_classes]."""
    f = _as_values(features)
    if f.ndim != 2 or f.shape[1] != model.mfcc_cfg.num_coefficients:
        raise ValueError(f"feature width {f.shape} does not match model ({model.mfcc_cfg.num_coefficients})")
    return _forward_batch(model, f[None])[2][0]


def transcribe(model: SurrogateModel, waveform) -> str:
    return greedy_decode(model_forward(model, mfcc_forward(waveform, model.mfcc_cfg)), model.alphabet)


def _target(model, target) -> TargetPhrase:
    return target if isinstance(target, TargetPhrase) else TargetPhrase.from_text(target, model.alphabet)


def loss_and_grad_wav(model: SurrogateModel, waveform, target):
    """CTC loss of ``target`` for ``waveform`` and its gradient with respect to every sample."""
    target = _target(model, target)
    x = np.asarray(waveform, dtype=np.float64)
    feats = mfcc_forward(x, model.mfcc_cfg).values
    z, hs, logits = _forward_batch(model, feats[None])
    loss, g_logits = ctc_loss_and_grad(logits[0], target)
    _, g_feats = _backward_batch(model, z, hs, g_logits[None], want_params=False)
    return loss, mfcc_vjp(x, model.mfcc_cfg, g_feats[0])


def wav_loss(model: SurrogateModel, waveform, target) -> float:
    from .ctc import ctc_loss
    target = _target(model, target)
    return ctc_loss(model_forward(model, mfcc_forward(waveform, model.mfcc_cfg)), target)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _arrays(model):
    out = [(n, model.params[n]) for n in PARAM_NAMES]
    return out + [("feat_mean", model.feat_mean), ("feat_std", model.feat_std)]


def model_to_bytes(model: SurrogateModel) -> bytes:
    specs, payload, offset = [], [], 0
    for name, arr in _arrays(model):
        a = np.ascontiguousarray(arr, dtype="<f8")
        specs.append({"name": name, "shape": list(a.shape), "offset": offset})
        payload.append(a.tobytes())
        offset += a.nbytes
    header = {
        "format": FORMAT_VERSION,
        "version": model.version,
        "alphabet": model.alphabet.characters,
        "blank_index": 0,
        "mfcc": model.mfcc_cfg.to_dict(),
        "hidden_size": model.hidden_size,
        "arrays": specs,
        "loss_curve": [float(v) for v in model.loss_curve],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(payload)


def model_from_bytes(blob: bytes) -> SurrogateModel:
    if blob[:8] != MAGIC:
        raise ValueError("not a surrogate model checkpoint")
    (n,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + n].decode())
    if header["format"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {header['format']}")
    body = blob[12 + n:]
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arrays[spec["name"]] = np.frombuffer(body, dtype="<f8", count=count,
                                             offset=spec["offset"]).reshape(spec["shape"]).astype(np.float64)
    return SurrogateModel(
        Alphabet(header["alphabet"]), MfccConfig(**header["mfcc"]), header["hidden_size"],
        {k: arrays[k] for k in PARAM_NAMES}, arrays["feat_mean"], arrays["feat_std"],
        header["version"], header.get("loss_curve", []))


def save_model(model: SurrogateModel, path) -> Path:
    path = Path(path)
    path.write_bytes(model_to_bytes(model))
    return path


def load_model(path) -> SurrogateModel:
    return model_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    learning_rate: float = 3e-3
    batch_size: int = 32
    clip_norm: float = 1.0
    augment_noise: float = 0.0      # extra per-epoch noise on top of the corpus' own
    lr_decay: float = 0.95
    seed: int = 0


def feature_stats(model_cfg: MfccConfig, clips) -> tuple[np.ndarray, np.ndarray]:
    feats = np.concatenate([mfcc_forward(c.samples, model_cfg).values for c in clips])
    return feats.mean(axis=0), feats.std(axis=0) + 1e-6


def _batches(corpus, batch_size, rng):
    by_len: dict[tuple[int, int], list[int]] = {}
    for i, (clip, phrase) in enumerate(corpus):
        by_len.setdefault((len(clip), len(phrase)), []).append(i)
    batches = []
    for key in sorted(by_len):
        idx = np.array(by_len[key])
        rng.shuffle(idx)
        batches.extend(idx[i:i + batch_size] for i in range(0, idx.size, batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def train(model: SurrogateModel, corpus, cfg: TrainConfig = TrainConfig(), progress=None) -> SurrogateModel:
    """Adam on mean CTC loss. Returns a new model; ``model`` is not modified.

    Clips sharing a (length, label count) are batched together. Each epoch
    draws fresh additive noise, seeded from ``cfg.seed`` and the epoch index.
    """
    model = model.copy()
    if cfg.epochs <= 0:
        return model
    if not corpus:
        raise ValueError("empty training corpus")
    params = model.params
    m = {k: np.zeros_like(v) for k, v in params.items()}
    u = {k: np.zeros_like(v) for k, v in params.items()}
    step = 0
    b1, b2, eps = 0.9, 0.999, 1e-8
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        lr = cfg.learning_rate * cfg.lr_decay ** epoch
        losses = []
        for batch in _batches(corpus, cfg.batch_size, rng):
            feats, labels = [], []
            for i in batch:
                clip, phrase = corpus[i]
                x = clip.samples
                if cfg.augment_noise > 0:
                    x = x + rng.uniform(0, cfg.augment_noise) * rng.standard_normal(x.size)
                feats.append(mfcc_forward(x, model.mfcc_cfg).values)
                labels.append(phrase.label_ids)
            feats = np.stack(feats)
            z, hs, logits = _forward_batch(model, feats)
            loss, g_logits = batch_ctc_loss_and_grad(logits, np.stack(labels))
            if not np.all(np.isfinite(loss)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}: {loss}")
            g_logits /= len(batch)
            grads, _ = _backward_batch(model, z, hs, g_logits)
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            scale = min(1.0, cfg.clip_norm / (norm + 1e-12))
            step += 1
            for k in params:
                g = grads[k] * scale
                m[k] = b1 * m[k] + (1 - b1) * g
                u[k] = b2 * u[k] + (1 - b2) * g * g
                mh = m[k] / (1 - b1 ** step)
                uh = u[k] / (1 - b2 ** step)
                params[k] = params[k] - lr * mh / (np.sqrt(uh) + eps)
            losses.append(float(np.mean(loss)))
        model.loss_curve.append(float(np.mean(losses)))
        log.info("epoch %d  loss %.4f", epoch, model.loss_curve[-1])
        if progress:
            progress(epoch, model.loss_curve[-1])
    return model


def decode_accuracy(model: SurrogateModel, corpus) -> float:
    hits = sum(transcribe(model, clip.samples) == phrase.text for clip, phrase in corpus)
    return hits / len(corpus)
