"""Finite-difference audit of every differentiable building block.

Each component is rebuilt in float64 at a micro size (C=8, 2 heads, a 2x2
feature map, two decoder stages) and probed against central differences for
several seeds. The report maps component -> tensor name -> worst relative
error over seeds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .boxes import total_loss
from .encoders import TextEmbeddings
from .model import ContextEncoder, DecoderStage, GroundingModel, ModelConfig, TargetQueryState, VerificationModule, predict_box
from .nn import MLP3, LayerNorm, Linear, Module, MultiHeadAttention, RelativeEncodingTable, sinusoidal_encoding
from .tensor import Tensor, finite_difference_check

THRESHOLD = 1e-4
# Small steps suit the single blocks, whose curvature makes truncation error
# dominate. The end-to-end loss is ~10 while some of its gradients are ~1e-8,
# so roundoff needs the larger step there; kinks are handled by kink_safe.
COMPONENT_STEP = 1e-5
FULL_STEP = 1e-3
C, HEADS, GRID, TEXT_LEN, BATCH = 8, 2, 2, 5, 2

MICRO_CONFIG = ModelConfig(
    num_stages=2,
    d_model=C,
    num_heads=HEADS,
    ffn_dim=16,
    visual_layers=1,
    text_layers=1,
    patch_size=8,
    image_size=16,
    max_text_len=8,
    vocab_size=12,
    dtype="float64",
)


@dataclass
class GradcheckReport:
    errors: dict[str, dict[str, float]] = field(default_factory=dict)
    seeds: int = 0
    seconds: float = 0.0
    threshold: float = THRESHOLD

    def component_max(self) -> dict[str, float]:
        return {c: max(v.values()) for c, v in self.errors.items()}

    @property
    def passed(self) -> bool:
        return all(e <= self.threshold for e in self.component_max().values())

    def lines(self) -> list[str]:
        out = []
        for comp, per in self.errors.items():
            worst = max(per.values())
            out.append(f"{comp:<20} {worst:.3e} {'ok' if worst <= self.threshold else 'FAIL'}")
            out.extend(f"  {name:<52} {err:.3e}" for name, err in per.items())
        return out

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "seeds": self.seeds,
            "seconds": round(self.seconds, 3),
            "passed": self.passed,
            "components": self.component_max(),
            "tensors": self.errors,
        }


def _projection_loss(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    # a fixed random readout makes every output component matter
    w = rng.normal(size=shape)
    return lambda out: (out * w).sum()


def _text(rng) -> tuple[TextEmbeddings, np.ndarray]:
    values = Tensor(rng.normal(size=(BATCH, TEXT_LEN, C)), requires_grad=True)
    mask = np.ones((BATCH, TEXT_LEN), dtype=bool)
    mask[1, 3:] = False  # second sample is padded
    return TextEmbeddings(values, mask), sinusoidal_encoding(np.arange(TEXT_LEN), C)


def _check(module: Module, prefix: str, f, inputs: dict[str, Tensor], h, max_entries, rng, kink_safe=True):
    out: dict[str, float] = {}
    named = list(module.named_parameters(prefix)) + list(inputs.items())
    for name, t in named:
        out[name] = finite_difference_check(f, t, h=h, max_entries=max_entries, rng=rng, kink_safe=kink_safe)
    return out


def _linear(seed, h):
    rng = np.random.default_rng(seed)
    lin = Linear(C, C, rng, np.float64)
    lin.bias.data = rng.normal(size=C)
    x = Tensor(rng.normal(size=(BATCH, 3, C)), requires_grad=True)
    readout = _projection_loss(rng, (BATCH, 3, C))
    return _check(lin, "linear.", lambda: readout(lin(x)), {"linear.input": x}, h, None, rng)


def _attention(seed, h, relative: bool):
    rng = np.random.default_rng(seed)
    mha = MultiHeadAttention(C, HEADS, rng, np.float64)
    tag = "relative_attention" if relative else "attention"
    n = GRID * GRID
    q = Tensor(rng.normal(size=(BATCH, n, C)), requires_grad=True)
    if relative:
        rel = RelativeEncodingTable(GRID, GRID, C, np.float64)
        k, v, mask = q, Tensor(rng.normal(size=(BATCH, n, C)), requires_grad=True), None
        inputs = {f"{tag}.query_key": q, f"{tag}.value": v}
    else:
        rel = None
        k = Tensor(rng.normal(size=(BATCH, TEXT_LEN, C)), requires_grad=True)
        v = Tensor(rng.normal(size=(BATCH, TEXT_LEN, C)), requires_grad=True)
        mask = np.ones((BATCH, TEXT_LEN), dtype=bool)
        mask[0, -2:] = False
        inputs = {f"{tag}.query": q, f"{tag}.key": k, f"{tag}.value": v}
    readout = _projection_loss(rng, (BATCH, n, C))
    f = lambda: readout(mha(q, k, v, rel=rel, key_mask=mask)[0])  # noqa: E731
    return _check(mha, f"{tag}.", f, inputs, h, None, rng)


def _layer_norm(seed, h):
    rng = np.random.default_rng(seed)
    ln = LayerNorm(C, np.float64)
    ln.gamma.data = rng.normal(size=C)
    ln.beta.data = rng.normal(size=C)
    x = Tensor(rng.normal(size=(BATCH, 3, C)), requires_grad=True)
    readout = _projection_loss(rng, (BATCH, 3, C))
    return _check(ln, "layer_norm.", lambda: readout(ln(x)), {"layer_norm.input": x}, h, None, rng)


def _verification(seed, h):
    rng = np.random.default_rng(seed)
    mod = VerificationModule(C, HEADS, rng, np.float64)
    text, pos = _text(rng)
    fv = Tensor(rng.normal(size=(BATCH, GRID * GRID, C)), requires_grad=True)
    readout = _projection_loss(rng, (BATCH, GRID * GRID))
    f = lambda: readout(mod(fv, text, pos)[0])  # noqa: E731
    return _check(mod, "verification.", f, {"verification.visual": fv, "verification.text": text.values}, h, None, rng)


def _context(seed, h):
    rng = np.random.default_rng(seed)
    mod = ContextEncoder(C, HEADS, GRID, rng, np.float64)
    text, pos = _text(rng)
    fv = Tensor(rng.normal(size=(BATCH, GRID * GRID, C)), requires_grad=True)
    readout = _projection_loss(rng, (BATCH, GRID * GRID, C))
    f = lambda: readout(mod(fv, text, pos)[0])  # noqa: E731
    return _check(mod, "context.", f, {"context.visual": fv, "context.text": text.values}, h, None, rng)


def _decoder(seed, h):
    rng = np.random.default_rng(seed)
    stage = DecoderStage(C, HEADS, 16, rng, np.float64)
    text, pos = _text(rng)
    fv = Tensor(rng.normal(size=(BATCH, GRID * GRID, C)), requires_grad=True)
    fv_hat = Tensor(rng.normal(size=(BATCH, GRID * GRID, C)), requires_grad=True)
    tq = Tensor(rng.normal(size=(BATCH, 1, C)), requires_grad=True)
    readout = _projection_loss(rng, (BATCH, 1, C))
    f = lambda: readout(stage(TargetQueryState(tq), text, pos, fv_hat, fv).t_q_next)  # noqa: E731
    inputs = {"decoder.target_query": tq, "decoder.modulated": fv_hat, "decoder.visual": fv, "decoder.text": text.values}
    return _check(stage, "decoder.", f, inputs, h, None, rng)


def _box_head(seed, h):
    rng = np.random.default_rng(seed)
    head = MLP3(C, rng, np.float64)
    tq = Tensor(rng.normal(size=(BATCH, 1, C)), requires_grad=True)
    gt = np.c_[rng.uniform(0.3, 0.7, (BATCH, 2)), rng.uniform(0.1, 0.4, (BATCH, 2))]
    f = lambda: total_loss(predict_box(tq, head), gt).sum()  # noqa: E731
    return _check(head, "box_head.", f, {"box_head.input": tq}, h, None, rng)


def _full(seed, h, max_entries):
    rng = np.random.default_rng(seed)
    model = GroundingModel(MICRO_CONFIG, seed=seed)
    # move alpha/sigma off their initial values so their gradients are generic
    model.verification.alpha.data = np.asarray(rng.uniform(0.8, 1.2))
    model.verification.sigma.data = np.asarray(rng.uniform(0.4, 0.6))
    size = MICRO_CONFIG.image_size
    images = rng.uniform(0, 1, size=(BATCH, 3, size, size))
    tokens = [list(rng.integers(3, MICRO_CONFIG.vocab_size, size=3)), list(rng.integers(3, MICRO_CONFIG.vocab_size, size=5))]
    gt = np.c_[rng.uniform(0.3, 0.7, (BATCH, 2)), rng.uniform(0.1, 0.4, (BATCH, 2))]
    f = lambda: total_loss(model.forward_batch(images, tokens).boxes, gt).mean()  # noqa: E731
    return _check(model, "", f, {}, h, max_entries, rng)


COMPONENTS: dict[str, Callable] = {
    "linear": _linear,
    "attention": lambda s, h: _attention(s, h, relative=False),
    "relative_attention": lambda s, h: _attention(s, h, relative=True),
    "layer_norm": _layer_norm,
    "verification": _verification,
    "context_encoder": _context,
    "decoder_stage": _decoder,
    "box_head": _box_head,
}


def run_gradcheck(seeds: int = 5, h: float = COMPONENT_STEP, full_h: float = FULL_STEP, full_entries: int | None = 4,
                  corrupt: str | None = None, corrupt_factor: float = 1.01) -> GradcheckReport:
    """Check every component plus the end-to-end loss.

    ``full_entries`` caps how many components of each model tensor the
    end-to-end check perturbs (None probes all of them). ``corrupt`` names an
    op whose adjoint is scaled by ``corrupt_factor`` for the run, to prove the
    harness notices.
    """
    if corrupt is not None:
        T.ADJOINT_FAULTS[corrupt] = corrupt_factor
    start = time.perf_counter()
    report = GradcheckReport(seeds=seeds)
    try:
        for seed in range(seeds):
            results = {name: fn(seed, h) for name, fn in COMPONENTS.items()}
            results["full_loss"] = _full(seed, full_h, full_entries)
            for comp, per in results.items():
                agg = report.errors.setdefault(comp, {})
                for name, err in per.items():
                    agg[name] = max(agg.get(name, 0.0), err)
    finally:
        if corrupt is not None:
            T.ADJOINT_FAULTS.pop(corrupt, None)
    report.seconds = time.perf_counter() - start
    return report
