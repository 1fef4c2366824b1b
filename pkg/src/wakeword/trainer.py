"""Mini-batch LF-MMI training, Viterbi alignment and banded refinement."""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .am import ModelConfig, TdnnfModel
from .corpus import Manifest
from .features import FeatureCache
from .fst import compile_graph
from .graphs import (PhoneInventory, build_denominator_graph, build_numerator_graph, build_phone_lm,
                     build_topology)
from .lfmmi import LOG_ZERO_THRESHOLD, NoPathError, band_mask, forward_backward_batch, viterbi

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    optimizer: str = "adam"
    lr_initial: float = 0.002
    lr_final: float = 0.0002
    momentum: float = 0.9
    grad_clip: float = 5.0
    xent_weight: float = 0.1
    constrain_every: int = 4
    patience: int = 5
    seed: int = 0
    deterministic: bool = True
    num_wake_words: int = 1
    word_states: int = 4
    sil_states: int = 1
    bottleneck: int = 20
    tolerance: float = 5.0
    max_skip_fraction: float = 0.01

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> TrainConfig:
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in kinds:
                raise ValueError(f"config line {lineno}: unknown key {k!r}")
            kw[k] = _parse_value(str(kinds[k]), v)
        return cls(**kw)

    @classmethod
    def read(cls, path: str | Path) -> TrainConfig:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def updated(self, **kw) -> TrainConfig:
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def _parse_value(kind: str, v: str):
    if "bool" in kind:
        if v.lower() in ("1", "true", "yes"):
            return True
        if v.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"bad boolean {v!r}")
    if "float" in kind:
        return float(v)
    if "int" in kind:
        return int(v)
    return v


@contextlib.contextmanager
def _thread_limit(deterministic: bool):
    if not deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# -- graphs and data ------------------------------------------------------------


@dataclass
class TrainingGraphs:
    topo: object
    den: object
    num: dict  # label -> compiled numerator
    phone_lm: object

    @classmethod
    def build(cls, cfg: TrainConfig, num_pos: int, num_neg: int) -> TrainingGraphs:
        inv = PhoneInventory(tuple(f"wake{k}" for k in range(cfg.num_wake_words)))
        topo = build_topology(inv, cfg.word_states, cfg.sil_states)
        lm = build_phone_lm(inv, max(num_pos, 1), max(num_neg, 1))
        return cls(topo, compile_graph(build_denominator_graph(lm, topo)), {}, lm)

    def numerator(self, label):
        if label not in self.num:
            self.num[label] = compile_graph(build_numerator_graph(label, self.topo, self.phone_lm))
        return self.num[label]


def make_model(cfg: TrainConfig, num_pdfs: int) -> TdnnfModel:
    return TdnnfModel(ModelConfig(num_pdfs=num_pdfs, bottleneck=cfg.bottleneck), seed=cfg.seed)


def pad_batch(mats: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(m) for m in mats], dtype=np.int64)
    out = np.zeros((len(mats), lengths.max(), mats[0].shape[1]), dtype=mats[0].dtype)
    for i, m in enumerate(mats):
        out[i, : len(m)] = m
    return out, lengths


def make_batches(lengths: dict[str, int], batch_size: int, seed: int, epoch: int) -> list[list[str]]:
    """Duration-bucketed batches; a pure function of (seed, epoch)."""
    ids = sorted(lengths)
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    shuffled.sort(key=lambda u: lengths[u] // 30)
    batches = [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


@dataclass
class BatchResult:
    loss: float  # per output frame
    xent_loss: float
    frames: int
    per_utt: dict[str, float]
    skipped: list[str]
    grad_mmi: np.ndarray | None = None
    grad_xent: np.ndarray | None = None


def batch_objective(model: TdnnfModel, graphs: TrainingGraphs, utts: list[str], feats: dict,
                    labels: dict, xent_weight: float, masks: dict | None = None,
                    with_grad: bool = True) -> BatchResult:
    x, lengths = pad_batch([feats[u] for u in utts])
    mmi, xent = model.forward(x, lengths, train=with_grad)
    K = model.output_lengths(lengths)
    B, Kmax, P = mmi.shape
    scores = mmi.astype(np.float64)
    for i, u in enumerate(utts):
        if not np.all(np.isfinite(scores[i, : K[i]])):
            raise TrainingError(f"non-finite network output for utterance {u}")
    allowed = None
    if masks is not None:
        allowed = np.ones((B, Kmax, P), dtype=bool)
        for i, u in enumerate(utts):
            mk = masks[u]
            if len(mk) != K[i]:
                raise TrainingError(f"{u}: alignment has {len(mk)} frames, model gives {K[i]}")
            allowed[i, : K[i]] = mk

    den = forward_backward_batch(graphs.den, scores, K)
    num_total = np.full(B, -np.inf)
    gamma_num = np.zeros_like(scores)
    by_label: dict = {}
    for i, u in enumerate(utts):
        by_label.setdefault(labels[u], []).append(i)
    for label in sorted(by_label, key=str):
        idx = np.array(by_label[label])
        r = forward_backward_batch(graphs.numerator(label), scores[idx], K[idx],
                                   None if allowed is None else allowed[idx])
        num_total[idx] = r.log_total
        gamma_num[idx] = r.gamma

    ok = (num_total > LOG_ZERO_THRESHOLD) & (den.log_total > LOG_ZERO_THRESHOLD)
    skipped = [u for i, u in enumerate(utts) if not ok[i]]
    for u in skipped:
        log.warning("numerator or denominator has no path for %s; skipped", u)
    per = den.log_total - num_total
    frames = int(K[ok].sum())
    per_utt = {u: float(per[i]) for i, u in enumerate(utts) if ok[i]}
    if frames == 0:
        return BatchResult(0.0, 0.0, 0, per_utt, skipped)
    for u, v in per_utt.items():
        if not math.isfinite(v):
            raise TrainingError(f"non-finite loss for utterance {u}")
    loss = float(per[ok].sum()) / frames
    valid = ok[:, None, None] & (np.arange(Kmax)[None, :, None] < K[:, None, None])
    gamma_num = gamma_num * valid
    xent_loss = -xent_weight * float(np.sum(gamma_num * np.where(valid, xent, 0.0))) / frames
    res = BatchResult(loss, xent_loss, frames, per_utt, skipped)
    if with_grad:
        res.grad_mmi = ((den.gamma - gamma_num) * valid / frames).astype(model.dtype)
        res.grad_xent = (-xent_weight * gamma_num / frames).astype(model.dtype)
    return res


def _clip_scale(grads: dict[str, np.ndarray], max_norm: float) -> tuple[float, float]:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    return norm, (max_norm / norm if norm > max_norm else 1.0)


class MomentumSgd:
    def __init__(self, params: dict[str, np.ndarray], momentum: float, grad_clip: float):
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> float:
        norm, scale = _clip_scale(grads, self.grad_clip)
        for k, g in grads.items():
            v = self.velocity[k]
            v *= self.momentum
            v += (scale * g).astype(v.dtype)
            params[k] -= lr * v
        return norm

    def state(self) -> dict[str, np.ndarray]:
        return {f"velocity.{k}": v for k, v in self.velocity.items()}

    def load_state(self, extra: dict[str, np.ndarray]) -> None:
        for k, v in self.velocity.items():
            v[...] = extra[f"velocity.{k}"]


class Adam:
    """Adam on clipped gradients; ``momentum`` is beta1."""

    def __init__(self, params: dict[str, np.ndarray], momentum: float, grad_clip: float,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = momentum, beta2, eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> float:
        norm, scale = _clip_scale(grads, self.grad_clip)
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            g = (scale * g).astype(self.m[k].dtype)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
        return norm

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        out["t"] = np.array([self.t], dtype=np.float32)
        return out

    def load_state(self, extra: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k][...] = extra[f"m.{k}"]
            self.v[k][...] = extra[f"v.{k}"]
        self.t = int(extra["t"][0])


def make_optimizer(cfg: TrainConfig, params: dict[str, np.ndarray]):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.momentum, cfg.grad_clip)
    if cfg.optimizer == "sgd":
        return MomentumSgd(params, cfg.momentum, cfg.grad_clip)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.epochs <= 1:
        return cfg.lr_initial
    return cfg.lr_initial * (cfg.lr_final / cfg.lr_initial) ** (epoch / (cfg.epochs - 1)) if cfg.lr_initial > 0 else 0.0


def dev_loss(model: TdnnfModel, graphs: TrainingGraphs, utts: list[str], feats: dict, labels: dict,
             batch_size: int, masks: dict | None = None) -> float:
    lengths = {u: len(feats[u]) for u in utts}
    total, frames = 0.0, 0
    ordered = sorted(utts, key=lambda u: (lengths[u], u))
    for i in range(0, len(ordered), batch_size):
        r = batch_objective(model, graphs, ordered[i:i + batch_size], feats, labels, 0.0, masks,
                            with_grad=False)
        total += r.loss * r.frames
        frames += r.frames
    return total / max(frames, 1)


def _labels(m: Manifest) -> dict:
    return {e.utt_id: e.label for e in m.entries}


def _input_stats(feats: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    allf = np.concatenate([feats[u] for u in sorted(feats)]).astype(np.float64)
    return allf.mean(axis=0), allf.std(axis=0)


def train(cfg: TrainConfig, train_set: Manifest, dev_set: Manifest, run_dir: str | Path,
          cache: FeatureCache | None = None, resume: bool = True, init_checkpoint: str | Path | None = None,
          alignments: dict | None = None) -> Path:
    """Train and return the best-dev checkpoint path.

    With ``alignments`` the numerator is restricted to a band of
    ``cfg.tolerance`` frames around each utterance's alignment.
    """
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    (run / "train.conf").write_text(cfg.to_text(), encoding="utf-8")
    cache = cache or FeatureCache()
    with _thread_limit(cfg.deterministic):
        feats = cache.manifest(train_set)
        dev_feats = cache.manifest(dev_set)
        feats_all = {**feats, **dev_feats}
        labels = {**_labels(train_set), **_labels(dev_set)}
        graphs = TrainingGraphs.build(cfg, len(train_set.positives), len(train_set.negatives))

        masks = dev_masks = None
        if alignments is not None:
            P = graphs.topo.num_pdfs
            missing = [e.utt_id for e in train_set.entries if e.utt_id not in alignments]
            if missing:
                raise TrainingError(f"no alignment for {len(missing)} utterance(s), e.g. {missing[0]!r}")
            masks = {u: band_mask(alignments[u], P, cfg.tolerance) for u in feats}
            dev_masks = {u: band_mask(alignments[u], P, cfg.tolerance) for u in dev_feats if u in alignments}
            if len(dev_masks) != len(dev_feats):
                dev_masks = None

        last, best = run / "last.ckpt", run / "best.ckpt"
        start_epoch = 0
        best_dev = math.inf
        bad_epochs = 0
        log_lines: list[str] = []
        if resume and last.exists():
            model, extra, meta = TdnnfModel.load(last)
            opt = make_optimizer(cfg, model.params)
            opt.load_state(extra)
            start_epoch = int(meta["epoch"]) + 1
            best_dev = float(meta["best_dev"])
            bad_epochs = int(meta["bad_epochs"])
            step = int(meta["step"])
            log_lines = (run / "train.log").read_text(encoding="utf-8").splitlines()[:start_epoch]
        else:
            if init_checkpoint is not None:
                model = TdnnfModel.load(init_checkpoint)[0]
            else:
                model = make_model(cfg, graphs.topo.num_pdfs)
                model.set_input_stats(*_input_stats(feats))
            if model.cfg.num_pdfs != graphs.topo.num_pdfs:
                raise TrainingError(f"model has {model.cfg.num_pdfs} outputs, graphs need {graphs.topo.num_pdfs}")
            opt = make_optimizer(cfg, model.params)
            step = 0

        lengths = {u: len(f) for u, f in feats.items()}
        for epoch in range(start_epoch, cfg.epochs):
            if bad_epochs >= cfg.patience:
                log.info("early stop after %d epochs without dev improvement", bad_epochs)
                break
            lr = lr_at(cfg, epoch)
            total, frames, skipped = 0.0, 0, 0
            for batch in make_batches(lengths, cfg.batch_size, cfg.seed, epoch):
                r = batch_objective(model, graphs, batch, feats, labels, cfg.xent_weight, masks)
                skipped += len(r.skipped)
                if r.frames == 0:
                    continue
                grads, _ = model.backward(r.grad_mmi, r.grad_xent)
                opt.step(model.params, grads, lr)
                step += 1
                # nothing moved at lr 0, so there is nothing to project back
                if lr > 0 and cfg.constrain_every and step % cfg.constrain_every == 0:
                    model.constrain(1)
                total += r.loss * r.frames
                frames += r.frames
            if skipped > cfg.max_skip_fraction * len(feats):
                raise TrainingError(f"{skipped} of {len(feats)} utterances skipped in epoch {epoch}")
            train_loss = total / max(frames, 1)
            dv = dev_loss(model, graphs, sorted(dev_feats), feats_all, labels, cfg.batch_size, dev_masks)
            if not (math.isfinite(train_loss) and math.isfinite(dv)):
                raise TrainingError(f"non-finite loss in epoch {epoch}")
            log_lines.append(f"{epoch}\t{train_loss:.6f}\t{dv:.6f}")
            log.info("epoch %d lr %.5f train %.5f dev %.5f", epoch, lr, train_loss, dv)
            if dv < best_dev:
                best_dev = dv
                bad_epochs = 0
                model.save(best, meta={"epoch": epoch, "dev_loss": f"{dv:.6f}"})
            else:
                bad_epochs += 1
            (run / "train.log").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
            model.save(last, extra=opt.state(),
                       meta={"epoch": epoch, "best_dev": repr(best_dev), "bad_epochs": bad_epochs, "step": step})
        if not best.exists():
            model.save(best, meta={"epoch": -1, "dev_loss": "nan"})
    return best


def read_train_log(path: str | Path) -> list[tuple[int, float, float]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        e, a, b = line.split("\t")
        out.append((int(e), float(a), float(b)))
    return out


# -- alignment and refinement ------------------------------------------------------


def align(model: TdnnfModel | str | Path, m: Manifest, cfg: TrainConfig = TrainConfig(),
          cache: FeatureCache | None = None, graphs: TrainingGraphs | None = None) -> dict[str, np.ndarray]:
    """Viterbi pdf sequence (one per subsampled frame) through each numerator graph."""
    if not isinstance(model, TdnnfModel):
        model = TdnnfModel.load(model)[0]
    cache = cache or FeatureCache()
    graphs = graphs or TrainingGraphs.build(cfg, len(m.positives), len(m.negatives))
    out = {}
    for e in m.entries:
        mmi, _ = model.forward(cache.get(m, e))
        try:
            _, pdfs, _ = viterbi(graphs.numerator(e.label), mmi.astype(np.float64))
        except NoPathError:
            raise NoPathError(f"no numerator path for utterance {e.utt_id!r}") from None
        out[e.utt_id] = pdfs
    return out


def write_alignments(alignments: dict[str, np.ndarray], path: str | Path) -> None:
    lines = [f"{u}\t{' '.join(str(int(p)) for p in alignments[u])}" for u in sorted(alignments)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_alignments(path: str | Path) -> dict[str, np.ndarray]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            u, seq = line.split("\t")
            out[u] = np.array([int(p) for p in seq.split()], dtype=np.int64)
    return out


def train_refine(cfg: TrainConfig, train_set: Manifest, dev_set: Manifest, alignments: dict,
                 run_dir: str | Path, init_checkpoint: str | Path, cache: FeatureCache | None = None) -> Path:
    """Continue training with numerators banded around the given alignments."""
    return train(cfg, train_set, dev_set, run_dir, cache=cache, init_checkpoint=init_checkpoint,
                 alignments=alignments)
