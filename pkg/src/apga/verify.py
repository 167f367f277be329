"""
verify.py
----
Independent oracles for the training objective and its gradients.

Main features
----
• TinyInstance + enumeration: exact J = E_a[R(a)] and dJ/dp over all 2^n erase actions.
• reinforce_estimate: likelihood-ratio estimate of dJ/dp from Bernoulli-sampled actions.
• fd_check: fp64 central-difference gradient check of any scalar torch function.
• run_verification: named check groups with a pass/fail report (text + JSON).

Action convention: a_i = 1 erases pixel i, so R(a) = L(x * (1 - a)) - L(x).
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch.func import functional_call

from apga.errors import NumericError, UsageError
from apga.objective import RewardBaseline, bce, class_loss, policy_loss, update_baseline
from apga.utils.misc import resolve_dtype

logger = logging.getLogger(__name__)

MAX_ENUM_PIXELS = 12
FD_STEP_RANGE = (1e-7, 1e-3)


# ----------------------------------------------------------------------------
# Tiny enumerable instances
# ----------------------------------------------------------------------------
def quadratic_loss(weights: np.ndarray, center: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Separable L(z) = sum_i w_i (z_i - c_i)^2 over the last axis."""
    w, c = np.asarray(weights, np.float64), np.asarray(center, np.float64)
    return lambda z: (w * (z - c) ** 2).sum(axis=-1)


@dataclass
class TinyInstance:
    """A policy p over n pixels of x and a fixed differentiable loss L of the masked pixel vector."""

    p: np.ndarray
    x: np.ndarray
    loss: Callable[[np.ndarray], np.ndarray]
    # replaces R(a) entirely when set; used for reward tables that no loss can produce
    reward_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.p.shape != self.x.shape or self.p.ndim != 1:
            raise ValueError(f"p and x must be equal-length vectors, got {self.p.shape} and {self.x.shape}")
        if np.any(self.p < 0) or np.any(self.p > 1):
            raise ValueError("policy probabilities must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.p.shape[0]

    def rewards(self, actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.float64)
        if self.reward_fn is not None:
            return np.asarray(self.reward_fn(actions), dtype=np.float64)
        return self.loss(self.x * (1.0 - actions)) - self.loss(self.x)

    def with_p(self, p: np.ndarray) -> "TinyInstance":
        return TinyInstance(np.asarray(p, np.float64), self.x, self.loss, self.reward_fn)

    def permuted(self, perm: Sequence[int]) -> "TinyInstance":
        """Same problem with pixels relabeled by `perm` (applied to p, x and L)."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        loss = self.loss
        reward_fn = None if self.reward_fn is None else (lambda a, f=self.reward_fn: f(a[..., inv]))
        return TinyInstance(self.p[perm], self.x[perm], lambda z: loss(z[..., inv]), reward_fn)

    @classmethod
    def random(cls, n: int, rng: np.random.Generator, p_range: Tuple[float, float] = (0.2, 0.8)) -> "TinyInstance":
        return cls(
            p=rng.uniform(*p_range, size=n),
            x=rng.uniform(0.0, 1.0, size=n),
            loss=quadratic_loss(rng.uniform(0.5, 1.5, size=n), rng.uniform(-1.0, 1.0, size=n)),
        )

    @classmethod
    def constant_reward(cls, p: np.ndarray, value: float) -> "TinyInstance":
        p = np.asarray(p, np.float64)
        return cls(p, np.zeros_like(p), quadratic_loss(np.zeros_like(p), np.zeros_like(p)),
                   reward_fn=lambda a: np.full(a.shape[:-1], float(value)))


def _guard(n: int) -> None:
    if n > MAX_ENUM_PIXELS:
        raise ValueError(f"refusing to enumerate 2^{n} actions (limit n <= {MAX_ENUM_PIXELS})")


def enumerate_actions(n: int) -> np.ndarray:
    """All 2^n binary actions as a (2^n, n) uint8 array, pixel i = bit i of the row index."""
    _guard(n)
    return ((np.arange(2**n)[:, None] >> np.arange(n)) & 1).astype(np.uint8)


def _factors(p: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.where(actions.astype(bool), p, 1.0 - p)


def action_probabilities(p: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """P(a) = prod_i p_i^a_i (1 - p_i)^(1 - a_i) per row of `actions`."""
    return _factors(np.asarray(p, np.float64), actions).prod(axis=1)


def probability_gradients(p: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """dP(a)/dp_i = (2 a_i - 1) * prod_{j != i} f_j, shape (len(actions), n)."""
    p = np.asarray(p, np.float64)
    F = _factors(p, actions)
    out = np.empty(F.shape, dtype=np.float64)
    for i in range(F.shape[1]):
        others = np.delete(F, i, axis=1).prod(axis=1)
        out[:, i] = (2.0 * actions[:, i] - 1.0) * others
    return out


def exact_expected_reward(inst: TinyInstance) -> float:
    A = enumerate_actions(inst.n)
    return float(action_probabilities(inst.p, A) @ inst.rewards(A))


def exact_policy_gradient(inst: TinyInstance) -> np.ndarray:
    A = enumerate_actions(inst.n)
    return probability_gradients(inst.p, A).T @ inst.rewards(A)


def _reinforce_terms(
    inst: TinyInstance, samples: int, rng: np.random.Generator, use_baseline: bool, decay: float
) -> np.ndarray:
    if samples <= 0:
        raise ValueError(f"samples must be > 0, got {samples}")
    p = inst.p
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError("sampling needs probabilities strictly inside (0, 1)")
    actions = (rng.random((samples, inst.n)) < p).astype(np.float64)
    R = inst.rewards(actions)
    score = actions / p - (1.0 - actions) / (1.0 - p)
    if use_baseline:
        # b for sample k only sees rewards 0..k-1, so it is independent of action k
        b = np.empty(samples)
        state = RewardBaseline(decay=decay)
        for k in range(samples):
            b[k] = state.value
            state = update_baseline(state, R[k])
        R = R - b
    return score * R[:, None]


def reinforce_estimate(
    inst: TinyInstance,
    samples: int,
    rng: np.random.Generator,
    use_baseline: bool = False,
    decay: float = 0.5,
) -> np.ndarray:
    """Mean over sampled actions of grad_p log P(a) * (R(a) - b)."""
    return _reinforce_terms(inst, samples, rng, use_baseline, decay).mean(axis=0)


def estimator_variance(
    inst: TinyInstance,
    samples: int,
    rng: np.random.Generator,
    use_baseline: bool = False,
    decay: float = 0.5,
) -> float:
    """Per-coordinate variance of the single-sample estimator, averaged over coordinates."""
    return float(_reinforce_terms(inst, samples, rng, use_baseline, decay).var(axis=0, ddof=1).mean())


# ----------------------------------------------------------------------------
# Finite differences
# ----------------------------------------------------------------------------
@dataclass
class FDReport:
    max_rel_error: float
    worst_name: Optional[str]
    worst_index: Optional[int]
    analytic: float
    numeric: float
    checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def fd_check(
    fn: Callable[[Dict[str, torch.Tensor]], torch.Tensor],
    inputs: Mapping[str, torch.Tensor],
    h: float = 1e-6,
    precision: str = "fp64",
    analytic: Optional[Mapping[str, torch.Tensor]] = None,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> FDReport:
    """
    Compare the autograd gradient of the scalar fn(inputs) with central differences.

    The relative error of an entry is |a - n| / max(|a|, |n|, 1e-3 * max|a|);
    the floor keeps entries with near-zero gradient from dominating. Pass
    `analytic` to check a supplied gradient instead of autograd's, and
    `max_entries` to check a seeded random subset of each tensor.
    """
    dtype = resolve_dtype(precision)
    if dtype != torch.float64:
        raise UsageError("finite-difference checks need fp64 precision")
    if not FD_STEP_RANGE[0] <= h <= FD_STEP_RANGE[1]:
        raise ValueError(f"h must lie in {FD_STEP_RANGE}, got {h}")

    base = {k: v.detach().to(dtype).clone().requires_grad_(True) for k, v in inputs.items()}
    out = fn(base)
    if out.numel() != 1:
        raise UsageError(f"fd_check needs a scalar function, got shape {tuple(out.shape)}")
    if not torch.isfinite(out):
        raise NumericError("function value is not finite", name="fd_check")
    if analytic is None:
        grads = torch.autograd.grad(out, list(base.values()), allow_unused=True)
        analytic = {k: torch.zeros_like(v) if g is None else g for (k, v), g in zip(base.items(), grads)}
    analytic = {k: analytic[k].detach().to(dtype) for k in base}
    scale = max(float(g.abs().max()) if g.numel() else 0.0 for g in analytic.values())
    floor = max(1e-3 * scale, torch.finfo(dtype).tiny)

    gen = torch.Generator().manual_seed(seed)
    worst = FDReport(0.0, None, None, 0.0, 0.0, 0)
    checked = 0
    with torch.no_grad():
        point = {k: v.detach().clone() for k, v in base.items()}
        for name, tensor in point.items():
            flat = tensor.view(-1)
            indices = range(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                indices = torch.randperm(flat.numel(), generator=gen)[:max_entries].tolist()
            for i in indices:
                orig = float(flat[i])
                flat[i] = orig + h
                f_plus = float(fn(point))
                flat[i] = orig - h
                f_minus = float(fn(point))
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericError(f"non-finite value while perturbing {name}[{i}]", name=name)
                num = (f_plus - f_minus) / (2 * h)
                ana = float(analytic[name].view(-1)[i])
                rel = abs(ana - num) / max(abs(ana), abs(num), floor)
                checked += 1
                if rel > worst.max_rel_error or worst.worst_name is None:
                    worst = FDReport(rel, name, i, ana, num, 0)
    worst.checked = checked
    return worst


def module_fd_check(
    model: torch.nn.Module,
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    h: float = 1e-6,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> FDReport:
    """fd_check of loss_fn(model(x)) with respect to every parameter of an fp64 model."""
    params = {k: v.detach() for k, v in model.named_parameters()}
    return fd_check(
        lambda ps: loss_fn(functional_call(model, ps, (x,))),
        params,
        h=h,
        max_entries=max_entries,
        seed=seed,
    )


# ----------------------------------------------------------------------------
# Check groups and report
# ----------------------------------------------------------------------------
@dataclass
class CheckResult:
    group: str
    name: str
    passed: bool
    value: float
    threshold: Optional[float]
    detail: str = ""
    seconds: float = 0.0


@dataclass
class VerifyReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_json(self) -> dict:
        return {"passed": self.passed, "results": [asdict(r) for r in self.results]}

    def to_text(self) -> str:
        lines = []
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            bound = "" if r.threshold is None else f" (limit {r.threshold:g})"
            lines.append(f"[{status}] {r.group}/{r.name}: {r.value:.3e}{bound} {r.detail}".rstrip())
        lines.append(f"{sum(r.passed for r in self.results)}/{len(self.results)} checks passed")
        return "\n".join(lines)

    def write(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "verify.txt").write_text(self.to_text() + "\n", encoding="utf8")
        path = out_dir / "verify.json"
        path.write_text(json.dumps(self.to_json(), indent=2), encoding="utf8")
        return path


def _timed(group: str, name: str, fn: Callable[[], Tuple[bool, float, Optional[float], str]]) -> CheckResult:
    start = time.perf_counter()
    ok, value, threshold, detail = fn()
    result = CheckResult(group, name, bool(ok), float(value), threshold, detail, time.perf_counter() - start)
    logger.info("%s/%s: %s (%.3e)", group, name, "pass" if ok else "FAIL", value)
    return result


def _enumeration_checks(seed: int, quick: bool) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    instances = [TinyInstance.random(n, rng) for n in (1, 3, 6, 8)]

    def prob_sum():
        err = max(abs(action_probabilities(i.p, enumerate_actions(i.n)).sum() - 1.0) for i in instances)
        return err < 1e-12, err, 1e-12, ""

    def gradient_vs_fd():
        worst = 0.0
        h = 1e-6
        for inst in instances:
            g = exact_policy_gradient(inst)
            for k in range(inst.n):
                up, down = inst.p.copy(), inst.p.copy()
                up[k] += h
                down[k] -= h
                num = (exact_expected_reward(inst.with_p(up)) - exact_expected_reward(inst.with_p(down))) / (2 * h)
                worst = max(worst, abs(num - g[k]))
        return worst < 1e-8, worst, 1e-8, "max |exact - central difference|"

    def permutation():
        worst = 0.0
        for inst in instances:
            perm = rng.permutation(inst.n)
            worst = max(worst, abs(exact_expected_reward(inst) - exact_expected_reward(inst.permuted(perm))))
        return worst < 1e-12, worst, 1e-12, ""

    return [
        _timed("enumeration", "probabilities_sum_to_one", prob_sum),
        _timed("enumeration", "exact_gradient_vs_fd", gradient_vs_fd),
        _timed("enumeration", "permutation_invariance", permutation),
    ]


def _reinforce_checks(seed: int, quick: bool) -> List[CheckResult]:
    n_instances, samples = (5, 100_000) if quick else (20, 100_000)
    rng = np.random.default_rng(seed)

    def accuracy():
        worst = 0.0
        for _ in range(n_instances):
            inst = TinyInstance.random(6, rng)
            exact = exact_policy_gradient(inst)
            est = reinforce_estimate(inst, samples, rng)
            worst = max(worst, float(np.linalg.norm(est - exact) / np.linalg.norm(exact)))
        return worst < 0.05, worst, 0.05, f"worst relative L2 error over {n_instances} instances"

    def variance():
        inst = TinyInstance.random(6, rng)
        plain = estimator_variance(inst, samples, np.random.default_rng(seed + 1))
        with_b = estimator_variance(inst, samples, np.random.default_rng(seed + 1), use_baseline=True)
        ok = math.isfinite(plain) and math.isfinite(with_b)
        return ok, with_b, None, f"variance without baseline {plain:.4g}, with EMA baseline {with_b:.4g}"

    return [
        _timed("reinforce", "estimate_vs_exact", accuracy),
        _timed("reinforce", "baseline_variance", variance),
    ]


def _gradient_checks(seed: int, quick: bool) -> List[CheckResult]:
    from apga.build_apga import build_apga

    gen = torch.Generator().manual_seed(seed)
    dt = torch.float64
    results = []

    P = 0.05 + 0.9 * torch.rand(2, 1, 6, 6, generator=gen, dtype=dt)
    target = (torch.rand(2, 1, 6, 6, generator=gen, dtype=dt) > 0.5).to(dt)
    A_adv = (P < 0.5).to(dt)
    logits = torch.randn(4, 3, generator=gen, dtype=dt)
    labels = torch.tensor([0, 2, 1, 2])

    def loss_check(name, fn, inputs, tol):
        def check():
            rep = fd_check(fn, inputs)
            return rep.passed(tol), rep.max_rel_error, tol, f"worst at {rep.worst_name}[{rep.worst_index}]"

        return _timed("gradients", name, check)

    results.append(loss_check("bce", lambda t: bce(t["P"], target), {"P": P}, 1e-6))
    results.append(loss_check("class_loss", lambda t: class_loss(t["logits"], labels), {"logits": logits}, 1e-6))
    results.append(
        loss_check(
            "policy_loss",
            lambda t: policy_loss(t["P"], A_adv, 0.7, 0.2, 0.1).total,
            {"P": P},
            1e-6,
        )
    )

    classifier, policy = build_apga(seed=seed, precision="fp64")
    x = torch.rand(2, 1, 8, 8, generator=gen, dtype=dt)
    y = torch.tensor([0, 1])
    mask_target = (torch.rand(2, 1, 8, 8, generator=gen, dtype=dt) > 0.5).to(dt)
    entries = 40 if quick else 200

    def net_check(name, model, loss_fn):
        def check():
            rep = module_fd_check(model, loss_fn, x, max_entries=entries, seed=seed)
            return rep.passed(1e-5), rep.max_rel_error, 1e-5, f"{rep.checked} entries, worst at {rep.worst_name}"

        return _timed("gradients", name, check)

    results.append(net_check("classifier", classifier, lambda out: class_loss(out, y)))
    results.append(net_check("policy", policy, lambda out: bce(out, mask_target)))
    return results


def _reward_identity_checks(seed: int, quick: bool) -> List[CheckResult]:
    from apga.build_apga import build_apga
    from apga.data import ImageBatch
    from apga.masking import adversarial_mask, apply_mask
    from apga.objective import adversarial_reward

    classifier, _ = build_apga(seed=seed)
    gen = torch.Generator().manual_seed(seed)
    trials = 100 if quick else 1000

    @torch.no_grad()
    def check():
        worst = 0.0
        for _ in range(trials):
            batch = ImageBatch(torch.rand(4, 1, 8, 8, generator=gen), torch.randint(0, 2, (4,), generator=gen))
            # every probability below 0.5 keeps every pixel
            P = 0.4999 * torch.rand(4, 1, 8, 8, generator=gen)
            L_orig = class_loss(classifier(batch.images), batch.labels)
            L_adv = class_loss(classifier(apply_mask(batch, adversarial_mask(P)).images), batch.labels)
            worst = max(worst, abs(adversarial_reward(L_adv, L_orig)))
        return worst == 0.0, worst, 0.0, f"{trials} random batches"

    return [_timed("reward", "all_ones_mask_gives_zero_reward", check)]


CHECK_GROUPS: Dict[str, Callable[[int, bool], List[CheckResult]]] = {
    "enumeration": _enumeration_checks,
    "reinforce": _reinforce_checks,
    "gradients": _gradient_checks,
    "reward": _reward_identity_checks,
}


def run_verification(groups: Optional[Sequence[str]] = None, seed: int = 0, quick: bool = False) -> VerifyReport:
    """Run the named check groups (all by default) and collect their results."""
    groups = list(CHECK_GROUPS) if not groups else list(groups)
    unknown = [g for g in groups if g not in CHECK_GROUPS]
    if unknown:
        raise ValueError(f"unknown verification groups {unknown}, choose from {list(CHECK_GROUPS)}")
    report = VerifyReport()
    for g in groups:
        report.results.extend(CHECK_GROUPS[g](seed, quick))
    return report
