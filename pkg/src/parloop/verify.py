"""Runtime verification suite.

Each check builds small random models and measures how far an invariant is
from holding; a check passes when its error is within tolerance. Exact
invariants (causality, gate saturation, cache bounds) use zero tolerance;
the decode-against-training check carries genuine floating-point noise, so
it takes the caller's tolerance and honestly fails at zero.

Checks are independent; PLT_THREADS > 1 runs them concurrently.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .decode import prefill
from .gradcheck import grad_check
from .model import ModelConfig, forward, init_parameters
from .tasks import cross_entropy_loss
from .tensor import Rng


@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{status}  {self.name:24s} max_err={self.max_err:.3e} "
                f"tol={self.tol:.1e}  {self.detail}")


def _configs(seed: int) -> list:
    rng = Rng(seed).fork("verify-configs")
    out = []
    for kw in (dict(mode="vanilla"),
               dict(mode="vanilla_loop", loops=2),
               dict(mode="plt", loops=3, gswa=True, window=3),
               dict(mode="plt", loops=2)):
        d = int(rng.integers(2, 4)) * 8
        out.append(ModelConfig(vocab=19, d_model=d, n_layers=2, n_heads=4,
                               n_kv_heads=2, d_ff=2 * d, max_seq=64, **kw))
    return out


def check_teacher_forcing(seed: int = 0, tol: float = 1e-9) -> CheckResult:
    """Step-by-step decode logits must match the full training forward."""
    worst = 0.0
    trials = 0
    for i, cfg in enumerate(_configs(seed)):
        params = init_parameters(cfg, seed + i)
        tokens = Rng(seed + i).integers(0, cfg.vocab, (14,))
        full = forward(params, tokens).data[0]
        sess = prefill(params, tokens[:5])
        worst = max(worst, float(np.max(np.abs(sess.last_logits - full[4]))))
        for j in range(5, len(tokens)):
            step = sess.step(int(tokens[j]))
            worst = max(worst, float(np.max(np.abs(step - full[j]))))
            trials += 1
    return CheckResult("teacher_forcing", worst, tol, worst <= tol,
                       f"{trials} steps over {len(_configs(seed))} wirings")


def check_causality(seed: int = 0, trials: int = 12) -> CheckResult:
    """Changing a token must not move any logit at an earlier position."""
    rng = Rng(seed).fork("causality")
    worst = 0.0
    cfgs = _configs(seed)
    for t in range(trials):
        cfg = cfgs[t % len(cfgs)]
        params = init_parameters(cfg, seed + t)
        n = 10
        tokens = rng.integers(0, cfg.vocab, (n,))
        pos = int(rng.integers(1, n))
        bumped = tokens.copy()
        bumped[pos] = (bumped[pos] + 1 + rng.integers(0, cfg.vocab - 1)) % cfg.vocab
        a = forward(params, tokens).data[0]
        b = forward(params, bumped).data[0]
        worst = max(worst, float(np.max(np.abs(a[:pos] - b[:pos]))))
    return CheckResult("causality", worst, 0.0, worst == 0.0,
                       f"{trials} random (model, position) perturbations")


def check_gate_limits(seed: int = 0) -> CheckResult:
    """A saturated gate must route exactly one attention path through."""
    from .attention import GateParams, gate_values, gated_fuse
    from .tensor import Tensor

    worst = 0.0
    # primitive level, both limits: the fused output must equal the selected
    # path bit for bit
    rng = Rng(seed).fork("gate-limits")
    y_local = Tensor(rng.normal((2, 4, 5, 8)))
    y_global = Tensor(rng.normal((2, 4, 5, 8)))
    q = Tensor(rng.normal((2, 5, 16)))
    for sign, want in ((np.inf, y_local), (-np.inf, y_global)):
        gp = GateParams(weight=Tensor(np.zeros((16, 4))),
                        bias=Tensor(np.full(4, sign)))
        fused = gated_fuse(gate_values(gp, q), y_local, y_global)
        worst = max(worst, float(np.max(np.abs(fused.data - want.data))))

    # model level, closed gate: the whole network must reduce to the
    # sharing-only wiring
    cfg = ModelConfig(vocab=19, d_model=16, n_layers=2, n_heads=4, n_kv_heads=2,
                      d_ff=32, loops=2, mode="plt", gswa=True, window=3, max_seq=32)
    tokens = Rng(seed).integers(0, cfg.vocab, (9,))
    params = init_parameters(cfg, seed)
    for layer in params.layers:
        layer.gates[0].weight.data[:] = 0.0
        layer.gates[0].bias.data[:] = -np.inf
    got = forward(params, tokens).data
    plain = ModelConfig(vocab=19, d_model=16, n_layers=2, n_heads=4,
                        n_kv_heads=2, d_ff=32, loops=2, mode="plt", max_seq=32)
    pp = init_parameters(plain, seed)
    for name, t in params.named_tensors().items():
        if ".gates." not in name:
            pp.named_tensors()[name].data = t.data.copy()
    want = forward(pp, tokens).data
    worst = max(worst, float(np.max(np.abs(got - want))))
    return CheckResult("gate_saturation", worst, 0.0, worst == 0.0,
                       "bias driven to -inf/+inf")


def check_cache_bounds(seed: int = 0) -> CheckResult:
    """Window rings must never hold more than `window` positions."""
    cfg = ModelConfig(vocab=19, d_model=16, n_layers=2, n_heads=4, n_kv_heads=2,
                      d_ff=32, loops=3, mode="plt", gswa=True, window=4, max_seq=64)
    params = init_parameters(cfg, seed)
    sess = prefill(params, Rng(seed).integers(0, cfg.vocab, (6,)))
    overflow = 0
    for t in range(30):
        sess.step(t % cfg.vocab)
        occ = max(r.entries() for r in sess.rings.values())
        overflow = max(overflow, occ - cfg.window)
    shared_err = abs(sess.shared.length - sess.position)
    err = float(max(overflow, shared_err))
    return CheckResult("cache_bounds", err, 0.0, err == 0.0,
                       f"30 steps, window {cfg.window}")


def check_gradients(seed: int = 0, tol: float = 1e-4) -> CheckResult:
    """Backprop through the full loss against central differences."""
    cfg = ModelConfig(vocab=13, d_model=16, n_layers=1, n_heads=4, n_kv_heads=2,
                      d_ff=24, loops=3, mode="plt", gswa=True, window=2, max_seq=16)
    params = init_parameters(cfg, seed)
    tokens = Rng(seed).integers(0, cfg.vocab, (1, 8))

    def loss_fn():
        return cross_entropy_loss(forward(params, tokens), tokens)

    res = grad_check(loss_fn, params.named_tensors(), tol=tol, max_coords=3,
                     seed=seed)
    n = sum(r.n_checked for r in res.reports)
    return CheckResult("gradients", res.max_err, tol, res.passed,
                       f"{n} coordinates across {len(res.reports)} tensors")


def run_all(seed: int = 0, tolerance: float = 1e-9,
            include_grad: bool = True) -> list:
    """Run every check, honoring PLT_THREADS for concurrency."""
    jobs = [
        lambda: check_teacher_forcing(seed, tolerance),
        lambda: check_causality(seed),
        lambda: check_gate_limits(seed),
        lambda: check_cache_bounds(seed),
    ]
    if include_grad:
        jobs.append(lambda: check_gradients(seed))
    threads = int(os.environ.get("PLT_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda j: j(), jobs))
    else:
        results = [j() for j in jobs]
    return results
