"""Finite-difference verification suites for every differentiable module.

Each suite builds a fresh module from a seed, runs one reverse-mode backward
pass, then probes a deterministic sample of coordinates per parameter with
central differences.  Everything runs in double precision; single precision
makes the difference quotient meaningless at eps=1e-5.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .attention import AttentionConfig, AttentionMask, TransformerLayer
from .autograd import ParamStore, backward, finite_diff_grad, tensor
from .llm import DecoderLm, LmConfig, Vocab
from .qava import DEFAULT_QUESTIONS, GeneralProjector, QavaAdapter, QavaConfig, QuestionRegistry
from .reasoning import DistortionType
from .vision import ImageInput, VisionConfig, VisionEncoder

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4
DEFAULT_SEEDS = 10

# per-parameter probe budget; large tables are sampled, small ones checked fully
MAX_COORDS = 6

MODULES = ("numeric", "attention", "vision", "projector", "qava", "llm")


@dataclass(frozen=True)
class CheckRecord:
    """Worst coordinate of one (seed, parameter) probe."""
    module: str
    seed: int
    param: str
    rel_err: float


@dataclass(frozen=True)
class ModuleReport:
    module: str
    seeds: int
    checks: int
    max_rel_err: float
    worst_param: str
    worst_seed: int
    seconds: float

    def passed(self, tol: float = DEFAULT_TOL) -> bool:
        return self.max_rel_err < tol

    def to_json(self) -> dict:
        return {"module": self.module, "seeds": self.seeds, "checks": self.checks,
                "max_rel_err": self.max_rel_err, "worst_param": self.worst_param,
                "worst_seed": self.worst_seed, "seconds": round(self.seconds, 3)}


@dataclass(frozen=True)
class SuiteReport:
    reports: tuple[ModuleReport, ...]
    tol: float
    eps: float

    @property
    def max_rel_err(self) -> float:
        return max(r.max_rel_err for r in self.reports)

    @property
    def passed(self) -> bool:
        return all(r.passed(self.tol) for r in self.reports)

    def to_json(self) -> str:
        body = {"tol": self.tol, "eps": self.eps, "passed": self.passed,
                "max_rel_err": self.max_rel_err,
                "modules": [r.to_json() for r in self.reports]}
        return json.dumps(body, indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'module':<10} {'seeds':>5} {'checks':>6} {'max rel err':>12} "
                 f"{'worst param':<28} {'status':<6}"]
        for r in self.reports:
            status = "pass" if r.passed(self.tol) else "FAIL"
            lines.append(f"{r.module:<10} {r.seeds:>5} {r.checks:>6} "
                         f"{r.max_rel_err:>12.3e} {r.worst_param:<28} {status:<6}")
        lines.append(f"overall: {'pass' if self.passed else 'FAIL'} "
                     f"(max {self.max_rel_err:.3e}, tol {self.tol:.0e})")
        return "\n".join(lines)


def _wake(store: ParamStore, rng: np.random.Generator) -> None:
    # zero-init residual outs carry no gradient upstream until perturbed
    for name in store.names():
        p = store[name]
        if p.data.ndim >= 2 and not p.data.any():
            p.assign(rng.standard_normal(p.shape) * 0.1)


def _probe_coords(rng: np.random.Generator, shape: tuple[int, ...],
                  budget: int = MAX_COORDS) -> list[tuple[int, ...]] | None:
    size = int(np.prod(shape))
    if size <= budget:
        return None
    flat = rng.choice(size, size=budget, replace=False)
    return [tuple(int(v) for v in np.unravel_index(i, shape)) for i in sorted(flat)]


def _rel_err(an: np.ndarray, fd: np.ndarray) -> np.ndarray:
    return np.abs(an - fd) / np.maximum(1.0, np.maximum(np.abs(an), np.abs(fd)))


_F64 = np.dtype(np.float64)


def _build_numeric(seed: int):
    """One graph through every core op family: matmul/linear, gelu, softmax,
    layer_norm, embed_lookup, concat/slice, reductions, cross-entropy."""
    store = ParamStore()
    rng = np.random.default_rng(seed)
    w = store.add("num.w", rng.normal(size=(5, 4)), "llm")
    b = store.add("num.b", rng.normal(size=4), "llm")
    table = store.add("num.table", rng.normal(size=(7, 5)), "llm")
    gain = store.add("num.gain", 1.0 + 0.1 * rng.normal(size=4), "llm")
    bias = store.add("num.bias", 0.1 * rng.normal(size=4), "llm")
    head = store.add("num.head", rng.normal(size=(4, 6)), "llm")
    ids = rng.integers(0, 7, size=3)
    targets = rng.integers(0, 6, size=6)
    mask = np.array([True, False, True, True, False, True])

    def run():
        x = ag.embed_lookup(table.tensor, ids)
        h = ag.gelu(ag.linear(x, w.tensor, b.tensor))
        h = ag.layer_norm(h, gain.tensor, bias.tensor)
        both = ag.concat([h, ag.mul(h, -0.5)], axis=0)
        probs = ag.softmax_lastdim(ag.slice_axis0(both, 0, 6))
        logits = ag.matmul(probs, head.tensor)
        ce = ag.cross_entropy(logits, targets, mask)
        return ag.add(ce, ag.mean_all(ag.mul(both, both)))

    return run, store, None


def _build_attention(seed: int):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    layer = TransformerLayer(store, "blk", AttentionConfig(8, 2), rng, "llm",
                             _F64, cross=True)
    _wake(store, rng)
    x = rng.normal(size=(4, 8))
    kv = rng.normal(size=(3, 8))
    weights = rng.normal(size=(4, 8))
    mask = AttentionMask.causal(4)

    def run():
        out = layer(tensor(x), mask, kv=tensor(kv))
        return ag.sum_all(ag.mul(out, tensor(weights)))

    return run, store, None


def _build_vision(seed: int):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    cfg = VisionConfig(base_size=16, patch_size=8, feat_dim=16, num_layers=2,
                       num_heads=2)
    enc = VisionEncoder(store, cfg, rng, _F64)
    _wake(store, rng)
    img = ImageInput(pixels=rng.random((24, 16)))  # 2 tiles + global = 3 views
    weights = rng.normal(size=(12, 16))

    def run():
        return ag.sum_all(ag.mul(enc.encode(img), tensor(weights)))

    return run, store, None


def _build_projector(seed: int):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    proj = GeneralProjector(store, 6, 5, rng, _F64)
    x = rng.normal(size=(4, 6))
    weights = rng.normal(size=(4, 5))

    def run():
        return ag.sum_all(ag.mul(proj.project(tensor(x)), tensor(weights)))

    return run, store, None


_QAVA_VOCAB = Vocab.build(list(DEFAULT_QUESTIONS.values()))


def _build_qava(seed: int):
    """Full-size adapter: 6 layers, 32 tokens, as configured for training."""
    store = ParamStore()
    rng = np.random.default_rng(seed)
    adapter = QavaAdapter(store, QavaConfig(), _QAVA_VOCAB, rng, _F64)
    feats = rng.normal(size=(5, 64))
    weights = rng.normal(size=(32, 64))
    q = QuestionRegistry().question_for(DistortionType.VISUAL)

    def run():
        return ag.sum_all(ag.mul(adapter.forward(tensor(feats), q), tensor(weights)))

    # probing every layer of the full stack is too slow; sample a spread
    probe = ["qava.tokens", "qava.kv_w", "qava.q_emb", "qava.out_w",
             "qava.layer0.self.wq", "qava.layer2.cross.wv", "qava.layer5.ffn.w2",
             "qava.layer3.ln1.gain"]
    return run, store, probe


def _build_llm(seed: int):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    cfg = LmConfig(llm_dim=12, num_layers=2, num_heads=2, max_seq=32, vocab_size=11)
    lm = DecoderLm(store, cfg, rng, _F64)
    _wake(store, rng)
    prefix_param = store.add("probe.prefix", rng.normal(size=(2, 12)), "projector")
    ids = rng.integers(4, 11, size=6)
    resp_mask = np.array([False, False, True, True, True, True])

    def run():
        return lm.response_loss(prefix_param.tensor, ids, resp_mask)

    return run, store, None


_BUILDERS = {
    "numeric": _build_numeric,
    "attention": _build_attention,
    "vision": _build_vision,
    "projector": _build_projector,
    "qava": _build_qava,
    "llm": _build_llm,
}


def check_module(module: str, seeds: int = DEFAULT_SEEDS, eps: float = DEFAULT_EPS,
                 max_coords: int = MAX_COORDS) -> ModuleReport:
    """Run one module's suite over `seeds` fresh initializations."""
    if module not in _BUILDERS:
        raise ValueError(f"unknown module {module!r}; choose from {MODULES}")
    if seeds < 1:
        raise ValueError("need at least one seed")
    start = time.monotonic()
    worst = CheckRecord(module, -1, "", -1.0)
    checks = 0
    for seed in range(seeds):
        run, store, probe = _BUILDERS[module](seed)
        grads = backward(run(), store)
        names = probe if probe is not None else store.names()
        coord_rng = np.random.default_rng([seed, len(module)])
        for name in names:
            p = store[name]
            coords = _probe_coords(coord_rng, p.shape, max_coords)
            fd = finite_diff_grad(lambda: run().item(), p, eps=eps, coords=coords).data
            an = grads[name].data if name in grads else np.zeros_like(fd)
            rel = _rel_err(an, fd)
            if coords is not None:
                sel = tuple(np.array(c) for c in zip(*coords))
                rel = rel[sel]
            checks += 1
            peak = float(rel.max())
            if peak > worst.rel_err:
                worst = CheckRecord(module, seed, name, peak)
    return ModuleReport(module, seeds, checks, worst.rel_err, worst.param,
                        worst.seed, time.monotonic() - start)


def run_suite(modules: tuple[str, ...] = MODULES, seeds: int = DEFAULT_SEEDS,
              eps: float = DEFAULT_EPS, tol: float = DEFAULT_TOL,
              max_coords: int = MAX_COORDS) -> SuiteReport:
    reports = tuple(check_module(m, seeds, eps, max_coords) for m in modules)
    return SuiteReport(reports, tol, eps)
