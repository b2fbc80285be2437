"""Training loop, datasets and checkpoints."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import ops
from ..core.checkpoint import load_arrays, save_arrays
from ..core.optim import Adam, AdamState
from ..core.tensor import Tape, Tensor, precision
from ..data import augment, normalize_intensity, resize_to_network, smooth, SyntheticScenario, synth_generate
from ..loss import InstanceLabelMap, cosine_embedding_loss, prepare_instances, softmax_cross_entropy
from ..net import RecurrentHourglassNet
from .config import RunConfig

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class Video:
    frames: np.ndarray  # (T, H, W) raw intensities
    labels: np.ndarray  # (T, H, W) instance ids, or class ids in semantic mode
    forest: object = None


def synthetic_videos(scenario: SyntheticScenario, n: int, seed: int, n_splits: int = 1,
                     hide: int = 0, semantic: bool = False) -> list[Video]:
    """Seeded synthetic videos.

    Each video gets ``n_splits`` random mitoses of initial blobs. With
    ``hide`` > 0, blob 1 is left undrawn (but still labelled) for ``hide``
    consecutive frames. ``semantic`` turns labels into foreground classes.
    """
    out = []
    T = scenario.n_frames
    for k in range(n):
        rng = np.random.default_rng([seed, k])
        ids = rng.permutation(np.arange(1, scenario.n_blobs + 1))[:n_splits]
        splits = [(int(rng.integers(max(1, T // 3), max(2, 2 * T // 3))), int(i)) for i in ids]
        hidden = []
        if hide:
            hidden = [(int(rng.integers(2, T - hide - 1)), hide, 1)]
        sc = SyntheticScenario(**{**scenario.__dict__, "splits": splits, "hidden": hidden})
        frames, labels, gt = synth_generate(sc, rng)
        if semantic:
            labels = (labels > 0).astype(np.int32)
        out.append(Video(frames, labels, gt))
    return out


def preprocess(frames: np.ndarray, config: RunConfig) -> np.ndarray:
    """Smooth, normalise per frame and resize to the network input size."""
    aug = config.augment
    frames = np.asarray(frames, dtype=np.float64)
    if aug.gaussian_sigma:
        frames = smooth(frames, aug.gaussian_sigma)
    frames = np.stack([normalize_intensity(f, aug.i_min, aug.i_max) for f in frames])
    img, _ = resize_to_network(frames, None, config.input_size)
    return img


def _resize_labels(labels, config):
    _, lab = resize_to_network(np.zeros(labels.shape), labels, config.input_size)
    return lab


def sample_clip(videos: list[Video], config: RunConfig, rng: np.random.Generator):
    """One training clip: (frames (L,H,W), labels (L,H,W), valid (H,W))."""
    v = videos[int(rng.integers(len(videos)))]
    L = config.seq_len
    T = v.frames.shape[0]
    if T < L:
        raise ValueError(f"video has {T} frames, sequences need {L}")
    s = int(rng.integers(T - L + 1))
    frames = preprocess(v.frames[s:s + L], config)
    labels = _resize_labels(v.labels[s:s + L], config)
    valid = np.ones(frames.shape[1:], dtype=bool)
    if config.augment_enabled:
        frames, labels, valid = augment(frames, labels, config.augment, rng)
    return frames, labels, valid


def build_network(config: RunConfig) -> RecurrentHourglassNet:
    with precision(config.dtype):
        return RecurrentHourglassNet(config.network, rng=np.random.default_rng([config.seed, 0x5eed]))


def sequence_loss(net: RecurrentHourglassNet, config: RunConfig, clips, rng) -> Tensor:
    """Mean over frames of the summed per-stack loss for a batch of clips."""
    L = clips[0][0].shape[0]
    dtype = np.dtype(config.dtype)
    frames = [Tensor(np.stack([c[0][t] for c in clips])[:, None].astype(dtype)) for t in range(L)]
    outs, _ = net.run_sequence(frames)
    total = None
    for t in range(L):
        if config.mode == "semantic":
            classes = np.stack([c[1][t] for c in clips])
            valid = np.stack([c[2] for c in clips])
            terms = [softmax_cross_entropy(o, classes, valid) for o in outs[t]]
        else:
            preps = [prepare_instances(InstanceLabelMap(c[1][t], c[2]), config.neighborhood, rng) for c in clips]
            terms = [cosine_embedding_loss(o, preps) for o in outs[t]]
        frame_loss = terms[0]
        for term in terms[1:]:
            frame_loss = ops.add(frame_loss, term)
        total = frame_loss if total is None else ops.add(total, frame_loss)
    return ops.mul(total, 1.0 / L)


@dataclass
class TrainResult:
    net: RecurrentHourglassNet
    optimizer: Adam
    curve: list = field(default_factory=list)  # (iteration, loss)
    iteration: int = 0
    seconds: float = 0.0


def save_checkpoint(path, net: RecurrentHourglassNet, opt: Adam, iteration: int) -> None:
    arrays = {f"param/{k}": v for k, v in net.state_dict().items()}
    for k in net.params:
        arrays[f"adam.m/{k}"] = opt.state.m[k]
        arrays[f"adam.v/{k}"] = opt.state.v[k]
    arrays["meta/iteration"] = np.array([iteration], dtype=np.int64)
    arrays["meta/adam_step"] = np.array([opt.state.step], dtype=np.int64)
    save_arrays(path, arrays)


def load_checkpoint(path, config: RunConfig):
    """Return (net, optimizer, iteration) restored from ``path``."""
    arrays = load_arrays(path)
    net = build_network(config)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    with precision(config.dtype):
        net.load_state_dict(params)
    oc = config.optimizer
    state = AdamState(oc.lr, oc.beta1, oc.beta2, oc.eps, oc.weight_decay)
    if "meta/adam_step" in arrays:
        state.step = int(arrays["meta/adam_step"][0])
        state.m = {k: arrays[f"adam.m/{k}"].copy() for k in net.params}
        state.v = {k: arrays[f"adam.v/{k}"].copy() for k in net.params}
    opt = Adam(net.params, state=state)
    it = int(arrays["meta/iteration"][0]) if "meta/iteration" in arrays else 0
    return net, opt, it


def train(config: RunConfig, videos: list[Video], iterations: int | None = None, out_dir=None,
          resume=None, progress=None) -> TrainResult:
    """Run the configured number of iterations (or ``iterations``).

    Every iteration draws its randomness from a generator seeded with
    (seed, iteration), so a resumed run sees the same samples as an
    uninterrupted one.
    """
    if not videos:
        raise ValueError("empty dataset")
    oc = config.optimizer
    total = oc.iterations if iterations is None else int(iterations)
    if resume is not None:
        net, opt, start = load_checkpoint(resume, config)
    else:
        net = build_network(config)
        opt = Adam(net.params, lr=oc.lr, beta1=oc.beta1, beta2=oc.beta2, eps=oc.eps,
                   weight_decay=oc.weight_decay)
        start = 0
    res = TrainResult(net, opt, iteration=start)
    t0 = time.perf_counter()
    with precision(config.dtype):
        for it in range(start, total):
            rng = np.random.default_rng([config.seed, it])
            clips = [sample_clip(videos, config, rng) for _ in range(config.batch)]
            opt.lr = oc.lr_at(it)
            with Tape() as tape:
                loss = sequence_loss(net, config, clips, rng)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at iteration {it}; "
                                        f"lr={opt.lr}, last logged={res.curve[-1:] or None}")
                opt.zero_grad()
                tape.backward(loss)
            try:
                opt.step()
            except FloatingPointError as e:
                raise TrainingError(f"{e} at iteration {it}; loss={value}, lr={opt.lr}") from e
            res.iteration = it + 1
            res.curve.append((it, value))
            if config.log_every and (it % config.log_every == 0 or it == total - 1):
                log.info("iter %d loss %.5f", it, value)
                if progress is not None:
                    progress(it, value)
    res.seconds = time.perf_counter() - t0
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.embt", net, opt, res.iteration)
        write_loss_curve(out / "loss.csv", res.curve, append=resume is not None)
    return res


def write_loss_curve(path, curve, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "w" if new else "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(["iteration", "loss"])
        for it, v in curve:
            w.writerow([it, repr(float(v))])


def read_loss_curve(path) -> list[tuple[int, float]]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [(int(r["iteration"]), float(r["loss"])) for r in rows]
