"""Property suites behind ``lrcl check``.

Each suite returns a list of :class:`CheckResult`; a suite passes when
every entry does. Oracles here (iterative evaluation, two-hot projection,
central differences) are written independently of the code they check.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import categorical as cat
from .autodiff import finite_difference_check
from .critics import (
    ParamRegistry,
    build_bro_critic,
    build_simba_critic,
    build_toy_critic,
    lora_wrap,
    prune_wrap,
)
from .hypersphere import demonstrate_incompatibility, project_lora, scale_quadratic, solve_row_scale
from .linear import LoRAInit, LoRALinear, build_frozen_base
from .rng import stream
from .world import (
    ChainMDP,
    Policy,
    evaluate_policy_iteratively,
    exact_bellman_operator,
    solve_true_q,
    stationary_distribution,
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _result(name, value, limit, fmt="{:.3e}") -> CheckResult:
    return CheckResult(name, bool(value <= limit), f"{fmt.format(value)} (limit {limit:g})")


def random_lora_map(rng: np.random.Generator, d_out: int, d_in: int, rank: int,
                    kappa: float) -> LoRALinear:
    W0 = build_frozen_base(d_out, d_in, None, kappa, rng)
    A, B = LoRAInit("normal-both").sample(rng, rank, d_out, d_in)
    return LoRALinear(W0, A, B)


def lemma1_suite(n: int = 1000, seed: int = 0) -> list[CheckResult]:
    rng = stream(seed, "check")
    opposite = selected_positive = 0
    worst_norm = 0.0
    for _ in range(n):
        dim = int(rng.integers(2, 33))
        kappa = rng.uniform(0.05, 0.95)
        w = rng.standard_normal(dim)
        w *= kappa / np.linalg.norm(w)
        delta = rng.standard_normal(dim) * rng.uniform(0.01, 10.0)
        a, b, c = scale_quadratic(w, delta)
        roots = np.roots([a, b, c])
        if np.all(np.isreal(roots)) and roots.real.min() < 0 < roots.real.max() and c / a < 0:
            opposite += 1
        s = solve_row_scale(w, delta)
        if s > 0 and np.isclose(s, roots.real.max(), rtol=1e-8, atol=0):
            selected_positive += 1
        worst_norm = max(worst_norm, abs(np.linalg.norm(w + s * delta) - 1.0))
    return [
        CheckResult("roots have opposite signs", opposite == n, f"{opposite}/{n}"),
        CheckResult("selected root is the positive one", selected_positive == n,
                    f"{selected_positive}/{n}"),
        _result("max | ||w + s delta|| - 1 |", worst_norm, 1e-10),
    ]


def projection_suite(n: int = 1000, seed: int = 0) -> list[CheckResult]:
    rng = stream(seed, "check")
    worst = 0.0
    base_moved = 0
    worst_idem = 0.0
    nonpositive = 0
    for _ in range(n):
        d_out, d_in = int(rng.integers(2, 17)), int(rng.integers(2, 17))
        m = random_lora_map(rng, d_out, d_in, int(rng.integers(1, 5)), rng.uniform(0.05, 0.95))
        before = m.base.value.copy()
        project_lora(m)
        nonpositive += int(np.sum(m.last_scales <= 0))
        worst = max(worst, np.max(np.abs(np.linalg.norm(m.effective_weight(), axis=1) - 1.0)))
        base_moved += int(not np.array_equal(before, m.base.value))
        B1 = m.B.value.copy()
        project_lora(m)
        rel = np.linalg.norm(m.B.value - B1, axis=1) / np.linalg.norm(B1, axis=1)
        worst_idem = max(worst_idem, float(rel.max()))
    return [
        _result("max | ||effective row|| - 1 |", worst, 1e-9),
        CheckResult("frozen base bit-identical", base_moved == 0, f"{base_moved} of {n} moved"),
        CheckResult("row scales positive", nonpositive == 0, f"{nonpositive} non-positive"),
        _result("second projection relative change of B rows", worst_idem, 1e-9),
    ]


def incompatibility_suite(n: int = 100, seed: int = 0) -> list[CheckResult]:
    rng = stream(seed, "check")
    naive_moved = ours_exact = 0
    examples = []
    for _ in range(n):
        dim = int(rng.integers(2, 17))
        w = rng.standard_normal(dim)
        w *= rng.uniform(0.05, 0.95) / np.linalg.norm(w)
        delta = rng.standard_normal(dim) * rng.uniform(0.05, 2.0)
        rep = demonstrate_incompatibility(w, delta)
        if rep.c != 1.0 and not np.array_equal(rep.base_after_naive, w):
            naive_moved += 1
        if np.array_equal(rep.base_after_ours, w):
            ours_exact += 1
        if len(examples) < 3:
            examples.append(f"c={rep.c:.4f}")
    return [
        CheckResult("naive normalization moves the base (c != 1)", naive_moved == n,
                    f"{naive_moved}/{n}; e.g. {', '.join(examples)}"),
        CheckResult("projection leaves the base exactly fixed", ours_exact == n, f"{ours_exact}/{n}"),
    ]


def two_hot_oracle(probs, reward, discount, support) -> np.ndarray:
    """Projection by the triangular hat kernel over all atom pairs."""
    z = support.atoms
    v = np.clip(reward + discount * z, support.v_min, support.v_max)
    kernel = np.clip(1.0 - np.abs(v[:, None] - z[None, :]) / support.delta_z, 0.0, 1.0)
    return probs @ kernel


def categorical_suite(n: int = 10000, seed: int = 0) -> list[CheckResult]:
    rng = stream(seed, "check")
    sup = cat.ValueSupport(-1.0, 2.0, 51)
    worst_mass = worst_oracle = 0.0
    identity_exact = True
    for _ in range(n):
        p = rng.dirichlet(np.full(sup.num_atoms, rng.uniform(0.05, 2.0)))
        r = rng.uniform(-2.0, 3.0)
        g = rng.uniform(0.0, 1.0)
        out = cat.c51_project(p, r, g, sup)
        worst_mass = max(worst_mass, abs(out.sum() - 1.0))
        worst_oracle = max(worst_oracle, float(np.max(np.abs(out - two_hot_oracle(p, r, g, sup)))))
        if identity_exact:
            identity_exact = np.array_equal(cat.c51_project(p, 0.0, 1.0, sup), p)
    logits = rng.standard_normal(sup.num_atoms)
    target = rng.dirichlet(np.ones(sup.num_atoms))
    _, grad = cat.cross_entropy_loss(logits, target)
    h = 1e-5
    num = np.array([(cat.cross_entropy_loss(logits + h * e, target)[0]
                     - cat.cross_entropy_loss(logits - h * e, target)[0]) / (2 * h)
                    for e in np.eye(sup.num_atoms)])
    ce_err = float(np.max(np.abs(grad - num) / np.maximum(np.maximum(np.abs(grad), np.abs(num)), 1e-6)))
    return [
        _result("mass conservation", worst_mass, 1e-12),
        _result("two-hot oracle agreement", worst_oracle, 1e-12),
        CheckResult("identity backup exact", bool(identity_exact), "r=0, discount=1"),
        _result("cross-entropy gradient vs finite differences", ce_err, 1e-6),
    ]


def world_suite() -> list[CheckResult]:
    out = []
    for boundary in ("reflect", "clamp"):
        mdp = ChainMDP(boundary=boundary)
        pi = Policy.always_right(mdp)
        P = mdp.transition_model()
        q = solve_true_q(mdp, pi)
        q_it = evaluate_policy_iteratively(mdp, pi)
        d = stationary_distribution(mdp, pi)
        P_pi = pi.state_transitions(P)
        out += [
            _result(f"{boundary}: transition rows sum to 1", float(np.max(np.abs(P.sum(-1) - 1))), 1e-12),
            _result(f"{boundary}: linear solve vs iterative evaluation", float(np.max(np.abs(q - q_it))), 1e-8),
            _result(f"{boundary}: Q^pi is a fixed point of T^pi",
                    float(np.max(np.abs(exact_bellman_operator(q, mdp, pi) - q))), 1e-8),
            _result(f"{boundary}: d^pi P^pi = d^pi", float(np.max(np.abs(d @ P_pi - d))), 1e-8),
        ]
    return out


def _loss_and_backward(critic, x, target, head):
    out = critic.forward(x)
    if head == "scalar":
        r = out - target
        return 0.5 * float(np.mean(r ** 2)), r / len(r)
    return cat.cross_entropy_loss(out, target)


def gradient_check(critic, x, target, head, probes: int = 12, seed: int = 0) -> float:
    """Worst relative error of the analytic gradient of every trainable tensor."""
    critic.zero_grad()
    _, g = _loss_and_backward(critic, x, target, head)
    critic.backward(g)
    named = [(n, p) for n, p in critic.named_params() if p.trainable]
    params = [p for _, p in named]
    grads = [p.grad.copy() for p in params]

    def loss():
        return _loss_and_backward(critic, x, target, head)[0]

    return finite_difference_check(loss, params, grads, h=1e-5, max_entries=probes,
                                   rng=np.random.default_rng(seed))


def gradient_cases(seed: int = 0) -> dict[str, Callable[[], tuple]]:
    """Named factories returning ``(critic, inputs, target, head)``."""
    rng = stream(seed, "check")
    batch, n_atoms = 6, 11

    def targets(head, n):
        if head == "scalar":
            return rng.standard_normal(n)
        return rng.dirichlet(np.ones(n_atoms), size=n)

    cases = {}
    for head in ("scalar", "categorical"):
        def toy(kind, head=head):
            def make():
                c = build_toy_critic(64, 256, seed, head, n_atoms)
                if kind == "lora":
                    c = lora_wrap(c, 4, LoRAInit("normal-both"), seed=seed)
                elif kind == "pruned":
                    c = prune_wrap(c, 0.5, seed)
                elif kind == "nobase":
                    c = lora_wrap(c, 4, LoRAInit("normal-both"), base="none", seed=seed)
                x = np.tanh(rng.standard_normal((batch, 64)) * 0.5)
                return c, x, targets(head, batch), head
            return make

        for kind in ("dense", "lora", "pruned", "nobase"):
            cases[f"toy-{kind}-{head}"] = toy(kind)

        def simba(lora, head=head):
            def make():
                c = build_simba_critic(10, 64, 2, n_atoms, seed, head=head)
                if lora:
                    c = lora_wrap(c, 8, LoRAInit("normal-both"), kappa=0.5, base="fresh", seed=seed)
                    for m in c.maps():
                        project_lora(m)
                return c, rng.standard_normal((batch, 10)), targets(head, batch), head
            return make

        def bro(lora, head=head):
            def make():
                c = build_bro_critic(10, 64, 2, n_atoms, seed, head=head)
                if lora:
                    c = lora_wrap(c, 8, LoRAInit("normal-both"), seed=seed)
                return c, rng.standard_normal((batch, 10)), targets(head, batch), head
            return make

        cases[f"simbav2-dense-{head}"] = simba(False)
        cases[f"simbav2-lora-{head}"] = simba(True)
        cases[f"bronet-dense-{head}"] = bro(False)
        cases[f"bronet-lora-{head}"] = bro(True)
    return cases


def gradients_suite(seed: int = 0, limit: float = 1e-5) -> list[CheckResult]:
    out = []
    for name, make in gradient_cases(seed).items():
        critic, x, target, head = make()
        err = gradient_check(critic, x, target, head, seed=seed)
        out.append(_result(f"{name} finite differences", err, limit))
    return out


SUITES = {
    "projection": projection_suite,
    "categorical": categorical_suite,
    "gradients": gradients_suite,
    "world": world_suite,
    "lemma1": lemma1_suite,
    "incompatibility": incompatibility_suite,
}


def run_suite(name: str) -> tuple[list[CheckResult], float]:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; expected one of {sorted(SUITES)}")
    t0 = time.perf_counter()
    results = SUITES[name]()
    return results, time.perf_counter() - t0


def frozen_and_registry_report(critic) -> dict:
    reg = ParamRegistry(critic)
    return {
        "trainable": reg.count(trainable=True),
        "frozen": reg.count("frozen"),
        "lora": reg.count("lora"),
    }
