"""Joint training of the streaming, full-context and simulation objectives.

Every step draws one chunk size and one right-context mode for the whole
batch and minimises::

    total = full_context_ctc + chunked_ctc + alpha * simulation_l1

with a single backward pass, global-norm clipping and Adam under a
warmup/inverse-square-root schedule.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import chunking, ctc, simu
from .chunking import ContextMode
from .frontend import FeatureSequence, OnlineMVN, shift_future
from .io import load_checkpoint, save_checkpoint
from .model import Model, forward_chunks, forward_full, simulate_batch
from .tensor import get_dtype, no_grad

LOSS_KEYS = ("non_streaming", "streaming", "simu", "total")


@dataclass
class TrainConfig:
    alpha: float = 100.0
    chunk: int = 40
    jitter: int = 20
    modes: tuple = ("real", "none", "sim")
    left: int = 40
    right: int = 40
    warmup: int = 300
    lr_factor: float = 2.0
    clip: float = 5.0
    batch_size: int = 16
    epochs: int = 10
    curriculum_epochs: int = 1
    seed: int = 0
    betas: tuple = (0.9, 0.98)
    adam_eps: float = 1e-9
    patience: int = 2
    decay: float = 0.1
    min_lr: float = 1e-6
    keep_top: int = 5
    sim_grad_from_asr: bool = True
    precision: int = 64
    log_every: int = 1

    def __post_init__(self):
        self.modes = tuple(self.modes)
        self.betas = tuple(self.betas)
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 <= self.jitter < self.chunk:
            raise ValueError("need 0 <= jitter < chunk")
        if not self.modes:
            raise ValueError("at least one context mode is required")
        for m in self.modes:
            ContextMode.parse(m)
        if self.clip <= 0:
            raise ValueError("clip threshold must be positive")

    @property
    def context_modes(self):
        return [ContextMode.parse(m) for m in self.modes]

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as f:
            return cls(**json.load(f))

    def to_dict(self):
        return asdict(self)


@dataclass
class Example:
    utt_id: str
    feats: np.ndarray  # online-normalised (T, d)
    label: list


def prepare(utt_id, frames, label) -> Example:
    """Apply causal mean/variance normalisation once, up front."""
    frames = np.asarray(frames)
    return Example(utt_id, OnlineMVN(frames.shape[1])(frames), list(label))


# -- schedule, clipping, ordering, averaging ---------------------------------------


def lr_schedule(step: int, d_model: int, warmup: int, factor: float = 1.0) -> float:
    """factor * d^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return factor * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class PlateauDecay:
    """Multiply the LR by ``decay`` after ``patience`` non-improving validations."""

    def __init__(self, patience=2, decay=0.1):
        self.patience = patience
        self.decay = decay
        self.scale = 1.0
        self.best = math.inf
        self.bad = 0

    def update(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.scale *= self.decay
                self.bad = 0
        return self.scale

    def state(self):
        return {"scale": self.scale, "best": self.best, "bad": self.bad}

    def load(self, s):
        self.scale, self.best, self.bad = s["scale"], s["best"], s["bad"]


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_gradients(grads, threshold: float):
    """Scale all gradients by threshold/||g|| when the global norm exceeds it."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    norm = global_norm(grads)
    if norm <= threshold:
        return list(grads)
    s = threshold / norm
    return [g * s for g in grads]


def curriculum_order(utts, epoch: int, cfg: TrainConfig) -> list:
    """Indices: ascending length during the curriculum epochs, then a seeded shuffle."""
    if epoch < cfg.curriculum_epochs:
        return sorted(range(len(utts)), key=lambda i: (utts[i].feats.shape[0], i))
    return [int(i) for i in np.random.default_rng([cfg.seed, epoch]).permutation(len(utts))]


def average_checkpoints(registry, k: int = 5) -> dict:
    """Per-tensor mean over the ``k`` entries with the lowest validation loss.

    ``registry`` is a list of ``(val_loss, {name: array})``.
    """
    if not registry:
        raise ValueError("no checkpoints to average")
    best = sorted(registry, key=lambda e: e[0])[:k]
    names = best[0][1].keys()
    return {n: np.mean([np.asarray(e[1][n], dtype=np.float64) for e in best], axis=0) for n in names}


# -- losses ------------------------------------------------------------------------------


def _plans(batch, chunk, cfg, mode):
    return [chunking.plan_chunks(ex.feats.shape[0], chunk, cfg.left, cfg.right, mode) for ex in batch]


def _ctc_mean(logps, batch, r):
    terms, skipped = [], 0
    for lp, ex in zip(logps, batch):
        if lp.shape[0] < ctc.min_frames(ex.label):
            skipped += 1
            continue
        terms.append(ctc.ctc_loss(lp, ex.label))
    if not terms:
        return None, skipped
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / len(terms), skipped


def simulation_targets(batch, plans, n_future):
    """Stack shift_future targets to (B, K_max, N, d) with validity (B, K_max, N)."""
    Kmax = max(p.K for p in plans)
    d = batch[0].feats.shape[1]
    target = np.zeros((len(batch), Kmax, n_future, d))
    mask = np.zeros((len(batch), Kmax, n_future), dtype=bool)
    for b, (ex, plan) in enumerate(zip(batch, plans)):
        ft = shift_future(FeatureSequence(ex.feats, normalized=True), plan, n_future)
        target[b, : plan.K] = ft.frames
        mask[b, : plan.K] = ft.mask
    return target, mask


def compute_losses(model: Model, batch, chunk: int, mode: ContextMode, cfg: TrainConfig):
    """Loss Tensors for one batch under a fixed chunk size and context mode.

    Returns ``(losses, skipped)``; ``losses`` is None when every utterance is
    too short for CTC.
    """
    if cfg.right != model.config.simu.n_future:
        raise ValueError("right context must equal the number of simulated frames")
    r = model.r
    feats = [ex.feats for ex in batch]
    ns, skipped = _ctc_mean(forward_full(model, feats), batch, r)
    if ns is None:
        return None, skipped
    sim, _ = simulate_batch(model, feats, chunk)
    plans = _plans(batch, chunk, cfg, mode)
    target, mask = simulation_targets(batch, plans, cfg.right)
    sim_loss = simu.simu_loss(sim, target, mask)
    sim_in = sim if cfg.sim_grad_from_asr else sim.detach()
    st, _ = _ctc_mean(forward_chunks(model, feats, plans, sim_in), batch, r)
    total = ns + st + sim_loss * cfg.alpha
    return {"non_streaming": ns, "streaming": st, "simu": sim_loss, "total": total}, skipped


# -- optimiser state ------------------------------------------------------------------


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    registry: list = field(default_factory=list)
    plateau: PlateauDecay = field(default_factory=PlateauDecay)
    skipped_batches: int = 0
    skipped_utts: int = 0
    rng: np.random.Generator | None = None
    stopped: bool = False

    def lr(self, model: Model, cfg: TrainConfig) -> float:
        base = lr_schedule(max(self.step, 1), model.config.encoder.d_model, cfg.warmup, cfg.lr_factor)
        return base * self.plateau.scale

    def register(self, val_loss: float, arrays: dict, k: int) -> None:
        self.registry.append((val_loss, {n: a.copy() for n, a in arrays.items()}))
        self.registry.sort(key=lambda e: e[0])
        del self.registry[k:]


def new_state(model: Model, cfg: TrainConfig) -> TrainState:
    st = TrainState(rng=np.random.default_rng([cfg.seed, 1]))
    st.plateau = PlateauDecay(cfg.patience, cfg.decay)
    for k, p in model.params.items():
        st.m[k] = np.zeros_like(p.data)
        st.v[k] = np.zeros_like(p.data)
    return st


def adam_update(model: Model, grads: dict, state: TrainState, lr: float, cfg: TrainConfig) -> None:
    b1, b2 = cfg.betas
    t = state.step
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for k, p in model.params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        p.data = (p.data - lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + cfg.adam_eps)).astype(p.data.dtype)


def train_step(model: Model, batch, state: TrainState, cfg: TrainConfig, chunk=None, mode=None) -> dict | None:
    """One Algorithm-style update; returns float loss components, or None if skipped."""
    if chunk is None:
        chunk = chunking.sample_chunk_size(cfg.chunk, cfg.jitter, state.rng, multiple=model.r)
    if mode is None:
        mode = chunking.sample_context_mode(state.rng, cfg.context_modes)
    losses, skipped = compute_losses(model, batch, chunk, mode, cfg)
    state.skipped_utts += skipped
    if losses is None:
        state.skipped_batches += 1
        return None
    for p in model.params.values():
        p.grad = None
    losses["total"].backward()
    names = list(model.params)
    raw = [model.params[k].grad if model.params[k].grad is not None else np.zeros_like(model.params[k].data) for k in names]
    norm = global_norm(raw)
    clipped = dict(zip(names, clip_gradients(raw, cfg.clip)))
    state.step += 1
    lr = state.lr(model, cfg)
    adam_update(model, clipped, state, lr, cfg)
    for p in model.params.values():
        p.grad = None
    out = {k: float(losses[k].data) for k in LOSS_KEYS}
    out.update(step=state.step, lr=lr, chunk=chunk, mode=mode.value, grad_norm=norm)
    return out


# -- evaluation ------------------------------------------------------------------------


def batches(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def posteriors(model: Model, examples, mode: str | ContextMode, chunk: int, left: int, right: int, batch_size=32):
    """Log-posterior arrays per utterance; ``mode='full'`` uses the full-context pass."""
    out = []
    with no_grad():
        for batch in batches(list(examples), batch_size):
            feats = [ex.feats for ex in batch]
            if mode == "full":
                lps = forward_full(model, feats)
            else:
                m = mode if isinstance(mode, ContextMode) else ContextMode.parse(mode)
                plans = [chunking.plan_chunks(f.shape[0], chunk, left, right, m) for f in feats]
                sim = simulate_batch(model, feats, chunk)[0] if m is ContextMode.SIMULATED else None
                lps = forward_chunks(model, feats, plans, sim)
            out.extend(lp.data for lp in lps)
    return out


def evaluate_cer(model: Model, examples, mode, chunk: int, left: int, right: int, beam=None) -> float:
    logps = posteriors(model, examples, mode, chunk, left, right)
    if beam:
        hyps = [ctc.prefix_beam_decode(lp, beam) for lp in logps]
    else:
        hyps = [ctc.greedy_decode(lp) for lp in logps]
    return ctc.corpus_cer(zip(hyps, [ex.label for ex in examples]))


def validation_loss(model: Model, examples, cfg: TrainConfig) -> float:
    """Mean total loss in the deployment condition (simulated context, chunk = C)."""
    total, n = 0.0, 0
    with no_grad():
        for batch in batches(list(examples), cfg.batch_size):
            losses, _ = compute_losses(model, batch, cfg.chunk, ContextMode.SIMULATED, cfg)
            if losses is not None:
                total += float(losses["total"].data) * len(batch)
                n += len(batch)
    return total / max(n, 1)


def simulation_l1(model: Model, examples, chunk: int, n_future: int):
    """Held-out mean L1 of simulated vs real future frames, and of the zero predictor."""
    sim_err = zero_err = 0.0
    count = 0
    with no_grad():
        for batch in batches(list(examples), 32):
            feats = [ex.feats for ex in batch]
            sim, _ = simulate_batch(model, feats, chunk)
            plans = [chunking.plan_chunks(f.shape[0], chunk, 0, n_future, ContextMode.SIMULATED) for f in feats]
            target, mask = simulation_targets(batch, plans, n_future)
            w = mask[..., None]
            sim_err += float((np.abs(sim.data - target) * w).sum())
            zero_err += float((np.abs(target) * w).sum())
            count += int(mask.sum()) * target.shape[-1]
    return sim_err / count, zero_err / count


# -- driver ------------------------------------------------------------------------------


def run_epoch(model, train, state, cfg, log=None):
    order = curriculum_order(train, state.epoch, cfg)
    agg = {k: [] for k in LOSS_KEYS}
    for idx in batches(order, cfg.batch_size):
        rec = train_step(model, [train[i] for i in idx], state, cfg)
        if rec is None:
            continue
        for k in LOSS_KEYS:
            agg[k].append(rec[k])
        if log is not None and state.step % cfg.log_every == 0:
            log({"epoch": state.epoch, **rec})
    state.epoch += 1
    return {k: float(np.mean(v)) if v else math.nan for k, v in agg.items()}


def train(model: Model, train_set, dev_set, cfg: TrainConfig, state=None, log=None, ckpt_dir=None):
    """Train for ``cfg.epochs`` epochs (continuing from ``state`` if given).

    After every epoch the dev set is scored; the best ``keep_top`` parameter
    sets are kept and their average is loaded into ``model`` at the end.
    """
    state = state or new_state(model, cfg)
    while state.epoch < cfg.epochs and not state.stopped:
        means = run_epoch(model, train_set, state, cfg, log)
        val = validation_loss(model, dev_set, cfg)
        scale = state.plateau.update(val)
        state.register(val, model.arrays(), cfg.keep_top)
        rec = {"epoch": state.epoch - 1, "val_loss": val, "lr_scale": scale, **{f"train_{k}": v for k, v in means.items()}}
        if dev_set:
            rec["val_cer"] = evaluate_cer(model, dev_set, ContextMode.SIMULATED, cfg.chunk, cfg.left, cfg.right)
        if log is not None:
            log(rec)
        if ckpt_dir is not None:
            save_state(Path(ckpt_dir) / "last", model, state)
        if state.lr(model, cfg) < cfg.min_lr:
            state.stopped = True
    if state.registry:
        avg = average_checkpoints(state.registry, cfg.keep_top)
        model.load_arrays({k: v.astype(get_dtype()) for k, v in avg.items()})
    return state


def save_state(prefix, model: Model, state: TrainState) -> None:
    """Parameters and Adam moments (checkpoint format) plus JSON bookkeeping."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for k, p in model.params.items():
        arrays["param/" + k] = p.data
        arrays["adam_m/" + k] = state.m[k]
        arrays["adam_v/" + k] = state.v[k]
    for i, (_, params) in enumerate(state.registry):
        for k, a in params.items():
            arrays[f"top{i}/{k}"] = a
    save_checkpoint(str(prefix) + ".state", arrays)
    model.save(str(prefix) + ".ckpt")
    meta = {
        "step": state.step,
        "epoch": state.epoch,
        "plateau": state.plateau.state(),
        "skipped_batches": state.skipped_batches,
        "skipped_utts": state.skipped_utts,
        "rng": state.rng.bit_generator.state,
        "stopped": state.stopped,
        "registry": [loss for loss, _ in state.registry],
    }
    with open(str(prefix) + ".json", "w") as f:
        json.dump(meta, f)


def load_state(prefix, model: Model, cfg: TrainConfig) -> TrainState:
    prefix = Path(prefix)
    arrays = load_checkpoint(str(prefix) + ".state")
    dtype = get_dtype()
    model.load_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    state = new_state(model, cfg)
    for k in model.params:
        state.m[k] = arrays["adam_m/" + k].astype(dtype)
        state.v[k] = arrays["adam_v/" + k].astype(dtype)
    with open(str(prefix) + ".json") as f:
        meta = json.load(f)
    state.step, state.epoch = meta["step"], meta["epoch"]
    state.plateau.load(meta["plateau"])
    state.skipped_batches, state.skipped_utts = meta["skipped_batches"], meta["skipped_utts"]
    state.rng.bit_generator.state = meta["rng"]
    state.stopped = meta["stopped"]
    for i, loss in enumerate(meta["registry"]):
        pre = f"top{i}/"
        state.registry.append((loss, {k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)}))
    return state
