"""Factorized TDNN acoustic model with hand-written backpropagation.

Layout at the defaults (offsets in input frames)::

    input   splice (-1, 0, 1) -> affine 80 -> relu -> batchnorm
    tdnnf   x10 stride 1   \\
    tdnnf   x1  stride 2    } full frame rate
    subsample by 3         /
    tdnnf   x9  stride 1 (= 3 input frames)
    heads   affine -> 18 scores (LF-MMI), affine -> log-softmax (xent)

Each tdnnf layer splices (t - s, t) through the semi-orthogonal factor
``Wa`` (160 -> 20), then (t, t + s) through ``Wb`` (40 -> 80), relu,
batchnorm and adds ``0.66 * input``.  Receptive field: 81 frames.

Batchnorm has no learned scale or offset.  In training mode it uses the
statistics of the valid frames in the batch and updates running averages;
in inference mode it uses the running averages.

Edge frames are replicated per utterance, so a padded batch gives the
per-utterance outputs on the valid frames (up to float rounding).
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"KWSMODEL"
CHECKPOINT_VERSION = 1
BN_EPS = 1e-5
BN_DECAY = 0.05  # weight of the newest batch in the running averages


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int = 40
    hidden: int = 80
    bottleneck: int = 20
    num_pdfs: int = 18
    layers: int = 20
    strides: tuple[int, ...] = (1,) * 10 + (2,) + (1,) * 9
    subsample_after: int = 11
    subsample: int = 3
    input_context: tuple[int, ...] = (-1, 0, 1)
    skip_scale: float = 0.66
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.strides) != self.layers:
            raise ValueError(f"need {self.layers} strides, got {len(self.strides)}")
        if not 0 <= self.subsample_after <= self.layers:
            raise ValueError("subsample_after out of range")

    @property
    def context(self) -> tuple[int, int]:
        """(left, right) context in input frames."""
        left = -min(self.input_context)
        right = max(self.input_context)
        for i, s in enumerate(self.strides):
            scale = 1 if i < self.subsample_after else self.subsample
            left += s * scale
            right += s * scale
        return left, right

    @property
    def receptive_field(self) -> int:
        left, right = self.context
        return left + right + 1

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> ModelConfig:
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, v = line.split("=", 1)
            if k not in kinds:
                continue
            t = str(kinds[k])
            if "tuple" in t:
                kw[k] = tuple(int(i) for i in v.split(",") if i)
            elif "float" in t:
                kw[k] = float(v)
            elif "int" in t:
                kw[k] = int(v)
            else:
                kw[k] = v
        return cls(**kw)


def output_length(num_frames, subsample: int = 3):
    return -(-np.asarray(num_frames) // subsample)


# -- splicing with per-utterance edge replication ------------------------------


def _shifted(x: np.ndarray, o: int, lengths: np.ndarray) -> np.ndarray:
    """y[b, t] = x[b, clip(t + o, 0, L_b - 1)] on valid frames t < L_b."""
    B, T, _ = x.shape
    if o == 0:
        return x
    y = np.empty_like(x)
    k = min(abs(o), T)
    if o < 0:
        y[:, k:] = x[:, : T - k]
        y[:, :k] = x[:, :1]
        return y
    y[:, : T - k] = x[:, k:]
    y[:, T - k:] = x[:, -1:]
    # frames whose context runs past the utterance end repeat its last frame
    t = np.arange(T)[None, :]
    near_end = (t >= lengths[:, None] - o) & (t < lengths[:, None])
    if near_end.any():
        last = x[np.arange(B), lengths - 1]
        bi, ti = np.nonzero(near_end)
        y[bi, ti] = last[bi]
    return y


def splice(x: np.ndarray, offsets, lengths: np.ndarray) -> np.ndarray:
    return np.concatenate([_shifted(x, o, lengths) for o in offsets], axis=-1)


def splice_backward(g: np.ndarray, offsets, lengths: np.ndarray, dim: int) -> np.ndarray:
    """Adjoint of :func:`splice` for gradients that vanish on padded frames."""
    B, T, _ = g.shape
    out = np.zeros((B, T, dim), dtype=g.dtype)
    for i, o in enumerate(offsets):
        gi = g[:, :, i * dim:(i + 1) * dim]
        if o >= 0:
            ext = np.zeros((B, T + o, dim), dtype=g.dtype)
            ext[:, o:o + T] = gi
            # positions at or past the last valid frame fold onto it
            tail = np.arange(T + o)[None, :] >= (lengths[:, None] - 1)
            folded = (tail.astype(g.dtype)[:, None, :] @ ext)[:, 0]
            ext[tail] = 0
            ext[np.arange(B), lengths - 1] = folded
            out += ext[:, :T]
        else:
            k = -o
            ext = np.zeros((B, T + k, dim), dtype=g.dtype)
            ext[:, :T] = gi
            ext[:, k] += ext[:, :k].sum(axis=1)
            out += ext[:, k:k + T]
    return out


def _outer_sum(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    """sum over batch and time of g[b, t]^T x[b, t]."""
    return g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])


def _batchnorm(r: np.ndarray, mask: np.ndarray, stats: tuple[np.ndarray, np.ndarray] | None = None):
    """Normalize each unit over the valid frames (``mask`` is (B, T, 1)).

    With ``stats`` = (mean, var) those are used instead of batch statistics.
    Returns the output, the scale and the batch (mean, var).
    """
    if stats is None:
        n = max(int(mask.sum()), 1)
        mean = (r * mask).sum(axis=(0, 1)) / n
        var = (np.square(r - mean) * mask).sum(axis=(0, 1)) / n
    else:
        mean, var = stats
    scale = np.sqrt(var + BN_EPS)
    return (r - mean) / scale, scale, (mean, var)


def _batchnorm_backward(g: np.ndarray, y: np.ndarray, scale: np.ndarray, mask: np.ndarray,
                        batch_stats: bool) -> np.ndarray:
    if not batch_stats:
        return g / scale
    n = max(int(mask.sum()), 1)
    g = g * mask
    gm = g.sum(axis=(0, 1)) / n
    gy = (g * y).sum(axis=(0, 1)) / n
    return (g - gm - y * gy) / scale * mask


def semi_orthogonal_error(A: np.ndarray) -> float:
    A = A if A.shape[0] <= A.shape[1] else A.T
    return float(np.linalg.norm(A @ A.T - np.eye(A.shape[0])))


def constrain_semi_orthogonal(A: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Newton polar iterations ``A <- (A + (A A^T)^-1 A) / 2`` towards A A^T = I.

    Works on the orientation with rows <= cols and returns the input shape.
    """
    A = np.asarray(A)
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    flip = A.shape[0] > A.shape[1]
    M = (A.T if flip else A).astype(np.float64)
    for _ in range(iterations):
        M = 0.5 * (M + np.linalg.solve(M @ M.T, M))
    M = M.astype(A.dtype)
    return M.T.copy() if flip else M


class TdnnfModel:
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        self.cfg = cfg
        dt = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        H, Bn, D = cfg.hidden, cfg.bottleneck, cfg.feat_dim
        nin = D * len(cfg.input_context)
        p: dict[str, np.ndarray] = {}
        p["input.W"] = rng.normal(0, math.sqrt(2.0 / nin), (H, nin))
        p["input.b"] = np.zeros(H)
        for i in range(cfg.layers):
            a = rng.normal(0, 1.0, (Bn, 2 * H))
            p[f"tdnnf{i}.Wa"] = constrain_semi_orthogonal(a, 20)
            p[f"tdnnf{i}.Wb"] = rng.normal(0, math.sqrt(2.0 / (2 * Bn)), (H, 2 * Bn))
            p[f"tdnnf{i}.b"] = np.zeros(H)
        for head in ("mmi", "xent"):
            p[f"{head}.W"] = np.zeros((cfg.num_pdfs, H))
            p[f"{head}.b"] = np.zeros(cfg.num_pdfs)
        self.params = {k: v.astype(dt) for k, v in p.items()}
        # fixed input normalization, estimated from training data
        self.buffers = {"input.mean": np.zeros(D, dtype=dt), "input.scale": np.ones(D, dtype=dt)}
        # running batchnorm statistics
        for name in ["input"] + [f"tdnnf{i}" for i in range(cfg.layers)]:
            self.buffers[f"{name}.bn_mean"] = np.zeros(H, dtype=dt)
            self.buffers[f"{name}.bn_var"] = np.ones(H, dtype=dt)
        self._cache = None

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def set_input_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.buffers["input.mean"] = np.asarray(mean, dtype=self.dtype)
        self.buffers["input.scale"] = (1.0 / np.maximum(np.asarray(std), 1e-3)).astype(self.dtype)

    def constrain(self, iterations: int = 1) -> None:
        for i in range(self.cfg.layers):
            k = f"tdnnf{i}.Wa"
            self.params[k] = constrain_semi_orthogonal(self.params[k], iterations)

    def output_lengths(self, lengths) -> np.ndarray:
        return output_length(lengths, self.cfg.subsample)

    # -- forward / backward ---------------------------------------------------

    def _norm(self, name: str, r: np.ndarray, L: np.ndarray, train: bool):
        mask = (np.arange(r.shape[1])[None, :] < L[:, None])[..., None]
        if not train:
            stats = (self.buffers[f"{name}.bn_mean"], self.buffers[f"{name}.bn_var"])
            y, scale, _ = _batchnorm(r, mask, stats)
            return y, (scale, mask)
        y, scale, (mean, var) = _batchnorm(r, mask)
        for key, v in (("bn_mean", mean), ("bn_var", var)):
            buf = self.buffers[f"{name}.{key}"]
            self.buffers[f"{name}.{key}"] = ((1 - BN_DECAY) * buf + BN_DECAY * v).astype(self.dtype)
        return y, (scale, mask)

    def forward(self, feats: np.ndarray, lengths=None, train: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Scores for (T, 40) or padded (B, T, 40) features.

        Returns (mmi_scores, xent_log_probs) shaped (ceil(T/3), P) or
        (B, ceil(T/3), P).  ``train`` normalizes with batch statistics and
        updates the running ones.
        """
        cfg, p = self.cfg, self.params
        feats = np.asarray(feats)
        single = feats.ndim == 2
        x = feats[None] if single else feats
        if x.shape[-1] != cfg.feat_dim:
            raise ValueError(f"expected {cfg.feat_dim}-dim features, got {x.shape[-1]}")
        B, T, _ = x.shape
        lengths = np.full(B, T, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
        if T < 1 or np.any(lengths < 1):
            raise ValueError("need at least one frame")
        x = ((x - self.buffers["input.mean"]) * self.buffers["input.scale"]).astype(self.dtype)
        cache = {"in_lengths": lengths, "T": T, "layers": [], "train": train}

        s = splice(x, cfg.input_context, lengths)
        z = s @ p["input.W"].T + p["input.b"]
        r = np.maximum(z, 0)
        h, bn = self._norm("input", r, lengths, train)
        cache["input"] = (s, z, h, bn)

        L = lengths
        for i, stride in enumerate(cfg.strides):
            if i == cfg.subsample_after:
                h = h[:, :: cfg.subsample]
                L = output_length(L, cfg.subsample)
                cache["sub_lengths"] = L
            sa = splice(h, (-stride, 0), L)
            a = sa @ p[f"tdnnf{i}.Wa"].T
            sb = splice(a, (0, stride), L)
            z = sb @ p[f"tdnnf{i}.Wb"].T + p[f"tdnnf{i}.b"]
            r = np.maximum(z, 0)
            n, bn = self._norm(f"tdnnf{i}", r, L, train)
            cache["layers"].append((sa, sb, z, n, bn, L))
            h = n + cfg.skip_scale * h
        if cfg.subsample_after == cfg.layers:
            h = h[:, :: cfg.subsample]
            L = output_length(L, cfg.subsample)
            cache["sub_lengths"] = L
        mmi = h @ p["mmi.W"].T + p["mmi.b"]
        logits = h @ p["xent.W"].T + p["xent.b"]
        m = logits.max(axis=-1, keepdims=True)
        xent = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
        cache["top"] = (h, xent)
        cache["out_lengths"] = L
        self._cache = cache
        if single:
            return mmi[0], xent[0]
        return mmi, xent

    def backward(self, g_mmi: np.ndarray, g_xent: np.ndarray | None = None
                 ) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Gradients of a loss given its gradients w.r.t. both heads' outputs.

        Upstream gradients on padded output frames must be zero.
        """
        if self._cache is None:
            raise RuntimeError("backward called without a recorded forward pass")
        cfg, p, c = self.cfg, self.params, self._cache
        dt = self.dtype
        g_mmi = np.asarray(g_mmi, dtype=dt)
        single = g_mmi.ndim == 2
        if single:
            g_mmi = g_mmi[None]
        if g_xent is None:
            g_xent = np.zeros_like(g_mmi)
        else:
            g_xent = np.asarray(g_xent, dtype=dt)
            g_xent = g_xent[None] if single else g_xent
        grads: dict[str, np.ndarray] = {}
        h, xent = c["top"]
        grads["mmi.W"] = _outer_sum(g_mmi, h)
        grads["mmi.b"] = g_mmi.sum(axis=(0, 1))
        g_logits = g_xent - np.exp(xent) * g_xent.sum(axis=-1, keepdims=True)
        grads["xent.W"] = _outer_sum(g_logits, h)
        grads["xent.b"] = g_logits.sum(axis=(0, 1))
        gh = g_mmi @ p["mmi.W"] + g_logits @ p["xent.W"]

        H, Bn = cfg.hidden, cfg.bottleneck
        if cfg.subsample_after == cfg.layers:
            gh = self._unsubsample(gh, c)
        for i in range(cfg.layers - 1, -1, -1):
            stride = cfg.strides[i]
            sa, sb, z, n, (scale, mask), L = c["layers"][i]
            gz = _batchnorm_backward(gh, n, scale, mask, c["train"]) * (z > 0)
            grads[f"tdnnf{i}.Wb"] = _outer_sum(gz, sb)
            grads[f"tdnnf{i}.b"] = gz.sum(axis=(0, 1))
            ga = splice_backward(gz @ p[f"tdnnf{i}.Wb"], (0, stride), L, Bn)
            grads[f"tdnnf{i}.Wa"] = _outer_sum(ga, sa)
            gh = cfg.skip_scale * gh + splice_backward(ga @ p[f"tdnnf{i}.Wa"], (-stride, 0), L, H)
            if i == cfg.subsample_after:
                gh = self._unsubsample(gh, c)
        s, z, hin, (scale, mask) = c["input"]
        gz = _batchnorm_backward(gh, hin, scale, mask, c["train"]) * (z > 0)
        grads["input.W"] = _outer_sum(gz, s)
        grads["input.b"] = gz.sum(axis=(0, 1))
        gx = splice_backward(gz @ p["input.W"], cfg.input_context, c["in_lengths"], cfg.feat_dim)
        gx = gx * self.buffers["input.scale"]
        grads = {k: grads[k].astype(dt) for k in p}
        return grads, (gx[0] if single else gx)

    def _unsubsample(self, g: np.ndarray, c) -> np.ndarray:
        B, K, D = g.shape
        full = np.zeros((B, c["T"], D), dtype=g.dtype)
        full[:, :: self.cfg.subsample] = g
        return full

    # -- checkpoints ----------------------------------------------------------

    def save(self, path: str | Path, extra: dict[str, np.ndarray] | None = None,
             meta: dict[str, str] | None = None) -> None:
        text = self.cfg.to_text() + "".join(f"meta.{k}={v}\n" for k, v in (meta or {}).items())
        tensors = list(self.params.items()) + list(self.buffers.items())
        tensors += [(f"extra.{k}", v) for k, v in (extra or {}).items()]
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            blob = text.encode("utf-8")
            f.write(struct.pack("<I", len(blob)) + blob)
            f.write(struct.pack("<I", len(tensors)))
            for name, v in tensors:
                key = name.encode("utf-8")
                arr = np.ascontiguousarray(v, dtype="<f4")
                f.write(struct.pack("<I", len(key)) + key)
                f.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(arr.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> tuple[TdnnfModel, dict[str, np.ndarray], dict[str, str]]:
        data = Path(path).read_bytes()
        if data[:8] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (version,) = struct.unpack_from("<I", data, 8)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        (n,) = struct.unpack_from("<I", data, pos)
        text = data[pos + 4:pos + 4 + n].decode("utf-8")
        pos += 4 + n
        cfg = ModelConfig.from_text(text)
        meta = {}
        for line in text.splitlines():
            if line.startswith("meta."):
                k, v = line[5:].split("=", 1)
                meta[k] = v
        model = cls(cfg)
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        extra = {}
        for _ in range(count):
            (kl,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + kl].decode("utf-8")
            pos += 4 + kl
            (ndim,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape)) * 4
            arr = np.frombuffer(data[pos:pos + size], dtype="<f4").reshape(shape)
            pos += size
            if name in model.params:
                model.params[name] = arr.astype(model.dtype)
            elif name in model.buffers:
                model.buffers[name] = arr.astype(model.dtype)
            elif name.startswith("extra."):
                extra[name[6:]] = arr.astype(np.float32)
            else:
                raise ValueError(f"{path}: unknown tensor {name!r}")
        return model, extra, meta


class StreamingScorer:
    """Incremental model outputs over a growing feature stream.

    Each call scores every output row whose full receptive field is
    available, running the model on a window that starts at a multiple of
    the subsampling factor; :meth:`flush` scores the tail at stream end.
    Rows match one :meth:`TdnnfModel.forward` on the whole stream up to float
    rounding.
    """

    def __init__(self, model: TdnnfModel):
        self.model = model
        self.left, self.right = model.cfg.context
        self.sub = model.cfg.subsample
        self.feats = np.zeros((0, model.cfg.feat_dim), dtype=np.float32)
        self.offset = 0  # input frame index of feats[0]
        self.next_row = 0

    def _score(self, stop_row: int) -> np.ndarray:
        k0 = self.next_row
        if stop_row <= k0:
            return np.zeros((0, self.model.cfg.num_pdfs), dtype=self.model.dtype)
        start = max(0, self.sub * k0 - self.left)
        start -= start % self.sub
        end = min(self.offset + len(self.feats), self.sub * (stop_row - 1) + self.right + 1)
        window = self.feats[start - self.offset:end - self.offset]
        mmi, _ = self.model.forward(window)
        rows = mmi[k0 - start // self.sub:stop_row - start // self.sub]
        self.next_row = stop_row
        # drop features no later row can need
        keep = max(0, self.sub * stop_row - self.left)
        keep -= keep % self.sub
        self.feats = self.feats[keep - self.offset:]
        self.offset = keep
        return rows

    def accept(self, feats: np.ndarray) -> np.ndarray:
        self.feats = np.concatenate([self.feats, np.asarray(feats, dtype=np.float32)])
        total = self.offset + len(self.feats)
        # row k is final once frame sub*k + right has arrived
        ready = max(0, (total - 1 - self.right) // self.sub + 1)
        return self._score(ready)

    def flush(self) -> np.ndarray:
        total = self.offset + len(self.feats)
        if total == 0:
            return np.zeros((0, self.model.cfg.num_pdfs), dtype=self.model.dtype)
        return self._score(int(output_length(total, self.sub)))
