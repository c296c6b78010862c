"""Pretraining loop: data -> encoder -> pairing -> losses (-> decoder) -> AdamW."""

from __future__ import annotations

import csv
import json
import logging
import math
import queue
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import pairing as P
from .autodiff import Tensor
from .config import ExperimentConfig, TrainConfig
from .data import AugmentParams, Batch, load_or_generate, make_batch
from .decoder import build_decoder
from .encoder import EncoderConfig, Model, aggregate_global

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
METRIC_FIELDS = ("step", "epoch", "lr", "global_loss", "dense_loss", "recon_loss", "total")


class TrainingDiverged(FloatingPointError):
    pass


class AdamW:
    """Adam with decoupled weight decay (applied to matrices only)."""

    def __init__(self, params: list[Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = [0] * len(params)

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.t[i] += 1
            t = self.t[i]
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1**t)
            vhat = self.v[i] / (1 - self.b2**t)
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay and p.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def learning_rate(step: int, total_steps: int, base_lr: float, schedule: str = "cosine") -> float:
    if schedule == "constant" or total_steps <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


@dataclass
class ModelState:
    model: Model
    decoder: object | None
    optimizer: AdamW
    step: int = 0

    def parameters(self) -> list[Tensor]:
        params = self.model.parameters()
        if self.decoder is not None:
            params += self.decoder.parameters()
        return params


def init_state(enc_cfg: EncoderConfig, train_cfg: TrainConfig) -> ModelState:
    model = Model(enc_cfg, seed=train_cfg.seed)
    decoder = None
    if train_cfg.decoder is not None:
        decoder = build_decoder(
            train_cfg.decoder, enc_cfg.proj_out, enc_cfg.grid, enc_cfg.image_size, enc_cfg.channels,
            seed=train_cfg.seed + 1,
        )
    state = ModelState(model, decoder, None)
    state.optimizer = AdamW(state.parameters(), weight_decay=train_cfg.weight_decay)
    return state


def _pair_rng(cfg: TrainConfig, step: int) -> np.random.Generator:
    return np.random.default_rng([cfg.pairing.rng_seed, cfg.seed, step])


def compute_losses(views: np.ndarray, state: ModelState, cfg: TrainConfig, step: int = 0):
    """Forward pass for one batch of interleaved views.

    Returns (total Tensor, global, dense, recon Tensors or None, lambda used).
    """
    model = state.model
    lp = cfg.loss
    lam = 0.0 if cfg.method == "simclr" else lp.lam
    use_recon = state.decoder is not None and lp.gamma > 0
    dense, cls = model.encoder(views)
    V, S = views.shape[0], dense.grid
    C = S * S
    glob = aggregate_global(dense, cls, cfg.aggregation)
    v = ad.l2_normalize(model.global_head(glob.features))

    orientations = [(np.arange(0, V, 2), np.arange(1, V, 2))]
    if lp.symmetric:
        orientations.append((np.arange(1, V, 2), np.arange(0, V, 2)))

    g_terms = [
        L.info_nce_global(v[a], v[p], lp.tau, lp.global_negatives) for a, p in orientations
    ]
    g_loss = g_terms[0] if len(g_terms) == 1 else (g_terms[0] + g_terms[1]) * 0.5

    d_loss = None
    z = None
    if lam > 0 or use_recon:
        z = ad.l2_normalize(model.dense_head(dense.features)).reshape(V, C, -1)
    if lam > 0:
        if cfg.pairing.pair_feature == "backbone":
            bank_np = P.normalize_rows(dense.features.data.reshape(V, C, -1))
        else:
            bank_np = z.data
        rng = _pair_rng(cfg, step)
        d_terms = []
        for a, p in orientations:
            za, zp = z[a], z[p]
            if cfg.method == "densecl":
                pos = P.match_positives(bank_np[a], bank_np[p])
                negv = np.stack([P.negative_views(V, int(i)) for i in a])  # (B, 2B-2)
                d_terms.append(L.densecl_dense_loss(za, zp, ad.take(v, negv, axis=0), pos, lp.tau))
                continue
            assign = P.assign_pairs(
                bank_np, cfg.pairing, rng, guided=cfg.method == "denseclpp_guided", anchor_views=a
            )
            cross = assign.cross_view_negatives if cfg.pairing.N > 0 else None
            if cfg.pairing.k_pos > 1:
                d_terms.append(
                    L.multi_positive_dense_loss(
                        za, zp, assign.positive_index, z, assign.other_view_negatives, lp.tau, cross
                    )
                )
            else:
                d_terms.append(
                    L.denseclpp_dense_loss(
                        za, zp, z, assign.other_view_negatives, assign.positive_index, lp.tau, cross
                    )
                )
        d_loss = d_terms[0] if len(d_terms) == 1 else (d_terms[0] + d_terms[1]) * 0.5

    r_loss = None
    if use_recon:
        anchors = orientations[0][0]
        x_hat = state.decoder(z[anchors].reshape(len(anchors), S, S, -1))
        r_loss = L.reconstruction_loss(views[anchors], x_hat)

    total = g_loss * (1.0 - lam)
    if d_loss is not None:
        total = total + d_loss * lam
    if r_loss is not None:
        total = total + r_loss * lp.gamma
    return total, g_loss, d_loss, r_loss, lam


def train_step(batch: Batch, state: ModelState, cfg: TrainConfig, total_steps: int):
    """One optimisation step; returns the LossBreakdown and the learning rate used."""
    total, g, d, r, lam = compute_losses(batch.views, state, cfg, state.step)
    g_val = g.item()
    d_val = d.item() if d is not None else 0.0
    r_val = r.item() if r is not None else 0.0
    breakdown = L.combine(g_val, d_val, r_val, L.LossParams(cfg.loss.tau, lam, cfg.loss.gamma))
    if not np.isfinite(total.item()):
        raise TrainingDiverged(
            f"non-finite loss at step {state.step}: global={g_val} dense={d_val} recon={r_val}"
        )
    state.optimizer.zero_grad()
    ad.backward(total)
    lr = learning_rate(state.step, total_steps, cfg.base_lr, cfg.schedule)
    state.optimizer.step(lr)
    state.step += 1
    return breakdown, lr


# -- batching -----------------------------------------------------------------


def batch_plan(n_images: int, cfg: TrainConfig) -> list[tuple[int, np.ndarray]]:
    """(epoch, image indices) for every step; partial batches are dropped."""
    per_epoch = n_images // cfg.batch_size
    if per_epoch < 1:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {n_images}")
    plan = []
    for epoch in range(cfg.epochs):
        perm = np.random.default_rng([cfg.seed, 7, epoch]).permutation(n_images)
        for b in range(per_epoch):
            plan.append((epoch, perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]))
    return plan


def iterate_batches(images, plan, augment: AugmentParams, seed: int, prefetch: bool = True):
    """Yield batches in plan order; each batch has its own seeded generator, so
    prefetching in a worker thread does not change the result."""

    def build(step, idx):
        return make_batch(images, len(idx), augment, np.random.default_rng([seed, 11, step]), indices=idx)

    if not prefetch:
        for step, (_, idx) in enumerate(plan):
            yield build(step, idx)
        return
    q: queue.Queue = queue.Queue(maxsize=2)
    stop = threading.Event()

    def worker():
        try:
            for step, (_, idx) in enumerate(plan):
                if stop.is_set():
                    return
                q.put(build(step, idx))
        except BaseException as err:  # surfaced in the consumer
            q.put(err)

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    try:
        for _ in plan:
            item = q.get()
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while not q.empty():
            q.get_nowait()


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, state: ModelState, config: ExperimentConfig) -> None:
    """npz archive: model/* and decoder/* arrays plus a JSON ``__meta__`` entry."""
    arrays = {f"model/{k}": v for k, v in state.model.state_dict().items()}
    if state.decoder is not None:
        arrays.update({f"decoder/{k}": v for k, v in state.decoder.state_dict().items()})
    meta = {"format": CHECKPOINT_FORMAT, "step": state.step, "config": config.to_dict()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, enc_cfg: EncoderConfig | None = None) -> tuple[Model, dict]:
    """Load the encoder and heads; ``enc_cfg`` (if given) must agree with the stored shapes."""
    with np.load(path) as archive:
        meta = json.loads(archive["__meta__"].tobytes().decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')}")
        stored = EncoderConfig(**meta["config"]["encoder"])
        if enc_cfg is not None:
            diffs = [
                f"encoder.{k}: config {getattr(enc_cfg, k)} != checkpoint {getattr(stored, k)}"
                for k in vars(stored)
                if getattr(enc_cfg, k) != getattr(stored, k)
            ]
            if diffs:
                raise ValueError(f"checkpoint {path} does not match config: " + "; ".join(diffs))
        cfg = enc_cfg if enc_cfg is not None else stored
        model = Model(cfg, seed=0)
        state = {k[len("model/") :]: archive[k] for k in archive.files if k.startswith("model/")}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as err:
        raise ValueError(f"checkpoint {path} does not match encoder config: {err}") from None
    return model, meta


# -- features ------------------------------------------------------------------


def extract_features(
    model: Model, images: np.ndarray, aggregation: str = "GAP", source: str = "backbone", batch: int = 250
) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch):
            dense, cls = model.encoder(images[i : i + batch])
            g = aggregate_global(dense, cls, aggregation).features
            if source == "global_head":
                g = model.global_head(g)
            out.append(g.data)
    return np.concatenate(out)


def extract_dense(model: Model, images: np.ndarray, batch: int = 250) -> np.ndarray:
    """Backbone dense grids flattened to (N, S*S, E)."""
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch):
            dense, _ = model.encoder(images[i : i + batch])
            out.append(dense.flat().data)
    return np.concatenate(out)


# -- full loop -------------------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def pretrain(config: ExperimentConfig, out_dir, images: np.ndarray | None = None, progress=None) -> dict:
    """Train per ``config``; writes checkpoint.npz and metrics.csv into ``out_dir``.

    Returns a summary with per-epoch mean total loss.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = config.train
    if images is None:
        images, _ = load_or_generate(config.data)
    state = init_state(config.encoder, cfg)
    plan = batch_plan(len(images), cfg)
    total_steps = len(plan)
    epoch_totals: dict[int, list[float]] = {}
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        for (epoch, _), batch in zip(plan, iterate_batches(images, plan, config.augment, cfg.seed, cfg.prefetch)):
            step = state.step
            bd, lr = train_step(batch, state, cfg, total_steps)
            writer.writerow([_fmt(v) for v in (step, epoch, lr, bd.global_loss, bd.dense_loss, bd.recon_loss, bd.total)])
            fh.flush()
            epoch_totals.setdefault(epoch, []).append(bd.total)
            last_of_epoch = step + 1 == total_steps or plan[step + 1][0] != epoch
            if last_of_epoch:
                mean = float(np.mean(epoch_totals[epoch]))
                logger.info("epoch %d mean total loss %.4f", epoch, mean)
                if progress is not None:
                    progress(epoch, mean)
                if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                    save_checkpoint(out / f"checkpoint_epoch{epoch + 1}.npz", state, config)
    save_checkpoint(out / "checkpoint.npz", state, config)
    return {
        "steps": total_steps,
        "epoch_mean_total": [float(np.mean(epoch_totals[e])) for e in sorted(epoch_totals)],
        "state": state,
    }


def fit_decoder(
    model: Model,
    decoder,
    images: np.ndarray,
    steps: int = 600,
    lr: float = 3e-3,
) -> list[float]:
    """Train only the decoder to reconstruct ``images`` from frozen dense features.

    Returns the reconstruction loss of every step.
    """
    with ad.no_grad():
        dense, _ = model.encoder(images)
        z = ad.l2_normalize(model.dense_head(dense.features)).data
    opt = AdamW(decoder.parameters())
    history = []
    for _ in range(steps):
        loss = L.reconstruction_loss(images, decoder(Tensor(z)))
        opt.zero_grad()
        ad.backward(loss)
        opt.step(lr)
        history.append(loss.item())
    return history


def reconstruct(model: Model, decoder, images: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        dense, _ = model.encoder(images)
        z = ad.l2_normalize(model.dense_head(dense.features))
        return decoder(z).data
