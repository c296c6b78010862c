"""Finite-difference verification of every differentiable operator, loss and module."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor, grad_check_many
from .decoder import DecoderConfig, bicubic_upsample, build_decoder
from .encoder import EncoderConfig, Model, aggregate_global
from .evaluation import probe_loss

TOLERANCE = 1e-4
H = 1e-6


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


# Each case builds (loss closure, tensors to check, coordinate budget per tensor).


def _op_cases():
    def matmul(rng):
        a, b = _t(rng, 3, 4), _t(rng, 4, 2)
        w = rng.standard_normal((3, 2))
        return lambda: (ad.matmul(a, b) * w).sum(), [a, b]

    def batched_matmul(rng):
        a, b = _t(rng, 2, 3, 4), _t(rng, 4, 2)
        w = rng.standard_normal((2, 3, 2))
        return lambda: (ad.matmul(a, b) * w).sum(), [a, b]

    def l2_normalize(rng):
        x = _t(rng, 3, 5)
        w = rng.standard_normal((3, 5))
        return lambda: (ad.l2_normalize(x) * w).sum(), [x]

    def cosine_matrix(rng):
        a, b = _t(rng, 3, 4), _t(rng, 5, 4)
        w = rng.standard_normal((3, 5))
        return lambda: (ad.cosine_similarity_matrix(a, b) * w).sum(), [a, b]

    def log_sum_exp(rng):
        x = _t(rng, 4, 6, scale=3.0)
        w = rng.standard_normal(4)
        return lambda: (ad.log_sum_exp(x) * w).sum(), [x]

    def softmax(rng):
        x = _t(rng, 3, 5)
        w = rng.standard_normal((3, 5))
        return lambda: (ad.softmax(x) * w).sum(), [x]

    def layer_norm(rng):
        x, g, b = _t(rng, 3, 6), _t(rng, 6), _t(rng, 6)
        w = rng.standard_normal((3, 6))
        return lambda: (ad.layer_norm(x, g, b) * w).sum(), [x, g, b]

    def elementwise(rng):
        x = _t(rng, 10)
        w = rng.standard_normal((4, 10))
        return (
            lambda: (ad.gelu(x) * w[0]).sum() + (ad.sigmoid(x) * w[1]).sum() + (ad.softplus(x) * w[2]).sum()
            + (ad.exp(x * 0.5) * w[3]).sum() + (x * x).sum() / (ad.exp(x).sum()),
            [x],
        )

    def gather(rng):
        x = _t(rng, 5, 3)
        idx = rng.integers(0, 5, size=(2, 4))
        w = rng.standard_normal((2, 4, 3))
        return lambda: (ad.take(x, idx) * w).sum() + ad.concat([x[1:3], x[0:1]], 0).sum(), [x]

    def conv2d(rng):
        x, k, b = _t(rng, 2, 4, 4, 3), _t(rng, 3, 3, 3, 2), _t(rng, 2)
        w = rng.standard_normal((2, 4, 4, 2))
        return lambda: (ad.conv2d(x, k, b) * w).sum(), [x, k, b]

    def conv_transpose2d(rng):
        x, k, b = _t(rng, 2, 2, 2, 3), _t(rng, 2, 2, 3, 2), _t(rng, 2)
        w = rng.standard_normal((2, 4, 4, 2))
        return lambda: (ad.conv_transpose2d(x, k, b) * w).sum(), [x, k, b]

    def bicubic(rng):
        x = _t(rng, 1, 3, 3, 2)
        w = rng.standard_normal((1, 6, 6, 2))
        return lambda: (bicubic_upsample(x, 2) * w).sum(), [x]

    return {
        "op/matmul": matmul,
        "op/matmul_batched": batched_matmul,
        "op/l2_normalize": l2_normalize,
        "op/cosine_similarity_matrix": cosine_matrix,
        "op/log_sum_exp": log_sum_exp,
        "op/softmax": softmax,
        "op/layer_norm": layer_norm,
        "op/elementwise": elementwise,
        "op/gather_concat": gather,
        "op/conv2d": conv2d,
        "op/conv_transpose2d": conv_transpose2d,
        "op/bicubic_upsample": bicubic,
    }


def _dense_inputs(rng, B=2, C=4, Lf=5):
    a, p = _t(rng, B, C, Lf), _t(rng, B, C, Lf)
    bank_extra = _t(rng, 2, C, Lf)
    return a, p, bank_extra


def _loss_cases():
    tau = 0.5

    def info_nce(rng):
        a, p = _t(rng, 3, 5), _t(rng, 3, 5)
        return lambda: L.info_nce_global(ad.l2_normalize(a), ad.l2_normalize(p), tau), [a, p]

    def densecl(rng):
        a, p = _t(rng, 2, 4, 5), _t(rng, 2, 4, 5)
        g = _t(rng, 2, 3, 5)
        pos = rng.integers(0, 4, size=(2, 4))
        return (
            lambda: L.densecl_dense_loss(ad.l2_normalize(a), ad.l2_normalize(p), ad.l2_normalize(g), pos, tau),
            [a, p, g],
        )

    def denseclpp(rng):
        bank = _t(rng, 4, 4, 5)  # views 0,1 image 0; views 2,3 image 1
        pos = rng.integers(0, 4, size=(2, 4))
        sel = np.array([[[2, rng.integers(4)], [3, rng.integers(4)]], [[0, rng.integers(4)], [1, rng.integers(4)]]])
        cross = np.stack([np.stack([rng.permutation([c for c in range(4) if c != pos[b, k]])[:2] for k in range(4)])
                          for b in range(2)])

        def f():
            z = ad.l2_normalize(bank)
            return L.denseclpp_dense_loss(z[np.array([0, 2])], z[np.array([1, 3])], z, sel, pos, tau, cross)

        return f, [bank]

    def multi_positive(rng):
        bank = _t(rng, 4, 4, 5)
        topk = np.stack([np.stack([rng.permutation(4)[:2] for _ in range(4)]) for _ in range(2)])
        sel = np.array([[[2, 1], [3, 0]], [[0, 3], [1, 2]]])

        def f():
            z = ad.l2_normalize(bank)
            return L.multi_positive_dense_loss(z[np.array([0, 2])], z[np.array([1, 3])], topk, z, sel, tau)

        return f, [bank]

    def reconstruction(rng):
        x = Tensor(rng.uniform(size=(2, 4, 4, 3)))
        xh = _t(rng, 2, 4, 4, 3)
        return lambda: L.reconstruction_loss(x, ad.sigmoid(xh)), [xh]

    def combined(rng):
        a, p = _t(rng, 3, 5), _t(rng, 3, 5)
        bank = _t(rng, 6, 4, 5)
        pos = rng.integers(0, 4, size=(3, 4))
        sel = np.array([[[v, rng.integers(4)] for v in range(6) if v // 2 != i] for i in range(3)])
        x = Tensor(rng.uniform(size=(1, 3, 3, 1)))
        xh = _t(rng, 1, 3, 3, 1)

        def f():
            g = L.info_nce_global(ad.l2_normalize(a), ad.l2_normalize(p), tau)
            z = ad.l2_normalize(bank)
            d = L.denseclpp_dense_loss(z[0::2], z[1::2], z, sel, pos, tau)
            r = L.reconstruction_loss(x, ad.sigmoid(xh))
            return L.mix(g, d, r, 0.7, 0.5)

        return f, [a, p, bank, xh]

    return {
        "loss/info_nce_global": info_nce,
        "loss/densecl_dense": densecl,
        "loss/denseclpp_dense": denseclpp,
        "loss/multi_positive_dense": multi_positive,
        "loss/reconstruction": reconstruction,
        "loss/combined": combined,
    }


TINY_ENCODER = dict(image_size=8, patch_size=4, embed_dim=8, depth=1, heads=2, proj_hidden=6, proj_out=4)


def _module_cases():
    def encoder(rng):
        model = Model(EncoderConfig(**TINY_ENCODER), seed=int(rng.integers(1 << 30)))
        x = Tensor(rng.uniform(size=(2, 8, 8, 3)), requires_grad=True)
        w_d = rng.standard_normal((2, 2, 2, 8))
        w_c = rng.standard_normal((2, 8))

        def f():
            dense, cls = model.encoder(x)
            return (dense.features * w_d).sum() + (cls * w_c).sum()

        return f, [x] + model.encoder.parameters()

    def global_head(rng):
        model = Model(EncoderConfig(**TINY_ENCODER), seed=int(rng.integers(1 << 30)))
        feats = _t(rng, 3, 8)
        w = rng.standard_normal((3, 4))
        return lambda: (model.global_head(feats) * w).sum(), [feats] + model.global_head.parameters()

    def dense_head(rng):
        model = Model(EncoderConfig(**TINY_ENCODER), seed=int(rng.integers(1 << 30)))
        grid = _t(rng, 2, 2, 2, 8)
        w = rng.standard_normal((2, 2, 2, 4))
        return lambda: (model.dense_head(grid) * w).sum(), [grid] + model.dense_head.parameters()

    def make_decoder_case(kind):
        def case(rng):
            cfg = DecoderConfig(kind=kind, channels_per_layer=3, upsample_factor=2, latent_dim=4, depth=1, heads=2)
            dec = build_decoder(cfg, in_dim=4, grid=2, image_size=4, channels=3, seed=int(rng.integers(1 << 30)))
            z = _t(rng, 2, 2, 2, 4)
            x = Tensor(rng.uniform(size=(2, 4, 4, 3)))
            return lambda: L.reconstruction_loss(x, dec(ad.l2_normalize(z))), [z] + dec.parameters()

        return case

    def probe(rng):
        x = rng.standard_normal((6, 3))
        y = (rng.uniform(size=(6, 2)) < 0.5).astype(float)
        w, b = _t(rng, 3, 2), _t(rng, 2)
        return lambda: probe_loss(x, y, w, b, weight_decay=0.1), [w, b]

    def full_objective(rng):
        """Encoder + both heads + pairing-driven dense loss, end to end."""
        model = Model(EncoderConfig(**TINY_ENCODER), seed=int(rng.integers(1 << 30)))
        views = rng.uniform(size=(4, 8, 8, 3))
        pos = rng.integers(0, 4, size=(2, 4))
        sel = np.array([[[2, 0], [3, 1]], [[0, 2], [1, 3]]])

        def f():
            dense, cls = model.encoder(views)
            v = ad.l2_normalize(model.global_head(aggregate_global(dense, cls, "GAP").features))
            z = ad.l2_normalize(model.dense_head(dense.features)).reshape(4, 4, -1)
            g = L.info_nce_global(v[0::2], v[1::2], 0.5)
            d = L.denseclpp_dense_loss(z[0::2], z[1::2], z, sel, pos, 0.5)
            return L.mix(g, d, None, 0.9, 0.0)

        return f, model.parameters()

    return {
        "module/encoder": encoder,
        "module/global_head": global_head,
        "module/dense_head": dense_head,
        "module/decoder_conv_bicubic": make_decoder_case("conv_bicubic"),
        "module/decoder_conv_transposed": make_decoder_case("conv_transposed"),
        "module/decoder_transformer": make_decoder_case("transformer"),
        "module/linear_probe": probe,
        "module/full_objective": full_objective,
    }


def all_cases() -> dict[str, Callable]:
    cases = {}
    cases.update(_op_cases())
    cases.update(_loss_cases())
    cases.update(_module_cases())
    return cases


@dataclass
class CaseResult:
    name: str
    worst: float
    seeds: int
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and self.worst < TOLERANCE


def run_case(name: str, builder: Callable, seeds: int = 20, coords: int = 12) -> CaseResult:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng([seed, 4242])
        f, tensors = builder(rng)
        try:
            err = grad_check_many(f, tensors, h=H, coords=coords, rng=rng)
        except ad.GradCheckError as exc:
            return CaseResult(name, float("inf"), seed + 1, f"seed {seed}: {exc}")
        worst = max(worst, err)
    return CaseResult(name, worst, seeds)


def run_suite(seeds: int = 20, coords: int = 12, only: str | None = None) -> tuple[list[CaseResult], float]:
    start = time.perf_counter()
    results = [
        run_case(name, builder, seeds, coords)
        for name, builder in all_cases().items()
        if only is None or only in name
    ]
    return results, time.perf_counter() - start
