"""Chain MDP used by the motivating toy experiment.

Fifteen states in a line, two actions (left, right). An action moves the
agent one step with probability ``p`` and leaves it in place otherwise.
The only reward is the expected success reward ``p`` for pushing right
from the state next to the goal. Everything here is exact: transition
tensor, true action values, stationary distribution and Bellman operator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import stream

LEFT, RIGHT = 0, 1
BOUNDARY_MODES = ("reflect", "clamp")


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChainMDP:
    """Continuing chain MDP.

    ``boundary`` selects what a successful move off the chain does:
    ``"reflect"`` bounces the agent back to the neighbouring state,
    ``"clamp"`` leaves it where it is.
    """

    num_states: int = 15
    num_actions: int = 2
    success_prob: float = 0.9
    discount: float = 0.97
    boundary: str = "reflect"

    def __post_init__(self):
        if self.num_states < 2 or self.num_actions != 2:
            raise ValueError("chain needs at least two states and exactly two actions")
        if not 0.0 <= self.success_prob <= 1.0:
            raise ValueError(f"success_prob must lie in [0, 1], got {self.success_prob}")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        if self.boundary not in BOUNDARY_MODES:
            raise ValueError(f"boundary must be one of {BOUNDARY_MODES}, got {self.boundary!r}")

    @property
    def goal(self) -> int:
        return self.num_states - 1

    def _landing(self, s: int, a: int) -> int:
        step = 1 if a == RIGHT else -1
        t = s + step
        if 0 <= t < self.num_states:
            return t
        return s - step if self.boundary == "reflect" else s

    def transition_model(self) -> np.ndarray:
        """Tensor ``P[s, a, s']``."""
        S, A = self.num_states, self.num_actions
        P = np.zeros((S, A, S))
        for s in range(S):
            for a in range(A):
                P[s, a, self._landing(s, a)] += self.success_prob
                P[s, a, s] += 1.0 - self.success_prob
        return P

    def reward(self, s: int, a: int) -> float:
        self._check(s, a)
        return self.success_prob if (a == RIGHT and s + 1 == self.goal) else 0.0

    def reward_table(self) -> np.ndarray:
        R = np.zeros((self.num_states, self.num_actions))
        R[self.goal - 1, RIGHT] = self.success_prob
        return R

    def _check(self, s, a):
        if not (0 <= s < self.num_states and 0 <= a < self.num_actions):
            raise IndexError(f"(s={s}, a={a}) outside the chain")


@dataclass(frozen=True)
class Policy:
    kind: str
    action_probs: np.ndarray = field(repr=False)

    @classmethod
    def uniform(cls, mdp: ChainMDP) -> "Policy":
        probs = np.full((mdp.num_states, mdp.num_actions), 1.0 / mdp.num_actions)
        return cls("uniform-random", probs)

    @classmethod
    def always_right(cls, mdp: ChainMDP) -> "Policy":
        probs = np.zeros((mdp.num_states, mdp.num_actions))
        probs[:, RIGHT] = 1.0
        return cls("always-right", probs)

    def state_transitions(self, P: np.ndarray) -> np.ndarray:
        """State-to-state matrix ``P^pi[s, s']``."""
        return np.einsum("sa,sat->st", self.action_probs, P)


def policy_values(Q: np.ndarray, pi: Policy) -> np.ndarray:
    """``V(s) = sum_a pi(a|s) Q(s, a)``."""
    return np.sum(pi.action_probs * Q, axis=1)


def solve_true_q(mdp: ChainMDP, pi: Policy) -> np.ndarray:
    """Exact ``Q^pi`` from the linear system ``(I - gamma P^pi) V = R^pi``."""
    P = mdp.transition_model()
    R = mdp.reward_table()
    P_pi = pi.state_transitions(P)
    R_pi = np.sum(pi.action_probs * R, axis=1)
    M = np.eye(mdp.num_states) - mdp.discount * P_pi
    try:
        V = np.linalg.solve(M, R_pi)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"Bellman system is singular: {exc}") from exc
    if np.max(np.abs(M @ V - R_pi)) > 1e-10:
        raise SolverError("Bellman linear solve left a residual above 1e-10")
    return R + mdp.discount * P @ V


def evaluate_policy_iteratively(mdp: ChainMDP, pi: Policy, tol: float = 1e-12,
                                max_iter: int = 1_000_000) -> np.ndarray:
    """Iterative policy evaluation on Q, run until the sup-norm update is below ``tol``.

    Used as an independent cross-check of :func:`solve_true_q`.
    """
    P = mdp.transition_model()
    R = mdp.reward_table()
    Q = np.zeros_like(R)
    for _ in range(max_iter):
        Q_next = R + mdp.discount * P @ policy_values(Q, pi)
        if np.max(np.abs(Q_next - Q)) < tol:
            return Q_next
        Q = Q_next
    raise SolverError(f"policy evaluation did not converge in {max_iter} sweeps")


def stationary_distribution(mdp: ChainMDP, pi: Policy, tol: float = 1e-12,
                            max_iter: int = 1_000_000) -> np.ndarray:
    """Power iteration from the uniform vector until successive iterates differ by < tol in L1."""
    P_pi = pi.state_transitions(mdp.transition_model())
    d = np.full(mdp.num_states, 1.0 / mdp.num_states)
    for _ in range(max_iter):
        d_next = d @ P_pi
        if np.sum(np.abs(d_next - d)) < tol:
            return d_next / d_next.sum()
        d = d_next
    raise SolverError(f"stationary distribution did not converge in {max_iter} iterations")


def exact_bellman_operator(Q: np.ndarray, mdp: ChainMDP, pi: Policy,
                           P: np.ndarray | None = None) -> np.ndarray:
    """``(T^pi Q)(s, a) = R(s, a) + gamma * sum_s' P(s'|s, a) * sum_a' pi(a'|s') Q(s', a')``."""
    if P is None:
        P = mdp.transition_model()
    return mdp.reward_table() + mdp.discount * P @ policy_values(Q, pi)


@dataclass(frozen=True)
class Transition:
    state: int
    action: int
    reward: float
    next_state: int


@dataclass(frozen=True)
class ReplayBuffer:
    """Fixed set of transitions; arrays are read-only views."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    def __post_init__(self):
        for arr in (self.states, self.actions, self.rewards, self.next_states):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.states)

    def __getitem__(self, i) -> Transition:
        return Transition(int(self.states[i]), int(self.actions[i]),
                          float(self.rewards[i]), int(self.next_states[i]))

    @property
    def transitions(self) -> list[Transition]:
        return [self[i] for i in range(len(self))]


def collect_buffer(mdp: ChainMDP, mu: Policy, n: int = 500, seed: int = 0) -> ReplayBuffer:
    """One contiguous ``n``-step walk under ``mu`` from a uniformly drawn start state."""
    rng = stream(seed, "buffer")
    P = mdp.transition_model()
    R = mdp.reward_table()
    states = np.empty(n, dtype=np.int64)
    actions = np.empty(n, dtype=np.int64)
    next_states = np.empty(n, dtype=np.int64)
    s = int(rng.integers(mdp.num_states))
    for i in range(n):
        a = int(rng.choice(mdp.num_actions, p=mu.action_probs[s]))
        s_next = int(rng.choice(mdp.num_states, p=P[s, a]))
        states[i], actions[i], next_states[i] = s, a, s_next
        s = s_next
    return ReplayBuffer(states, actions, R[states, actions], next_states)


def pair_index(s, a, num_actions: int = 2):
    """Row of ``(s, a)`` in the flattened state-action table."""
    return np.asarray(s) * num_actions + np.asarray(a)


@dataclass(frozen=True)
class FeatureMap:
    """``phi(s, a) = tanh(W_phi e_(s,a))`` precomputed for every pair."""

    weights: np.ndarray = field(repr=False)
    table: np.ndarray = field(repr=False)
    num_states: int
    num_actions: int

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def featurize(self, s: int, a: int) -> np.ndarray:
        if not (0 <= s < self.num_states and 0 <= a < self.num_actions):
            raise IndexError(f"(s={s}, a={a}) outside the feature table")
        return self.table[s * self.num_actions + a]


def one_hot_pairs(num_states: int, num_actions: int) -> np.ndarray:
    """Concatenated one-hot codes of every ``(s, a)``, rows ordered by ``pair_index``."""
    E = np.zeros((num_states * num_actions, num_states + num_actions))
    for s in range(num_states):
        for a in range(num_actions):
            E[s * num_actions + a, s] = 1.0
            E[s * num_actions + a, num_states + a] = 1.0
    return E


def build_feature_map(mdp: ChainMDP, dim: int = 64, seed: int = 0) -> FeatureMap:
    # entries drawn with standard deviation 1/sqrt(dim)
    rng = stream(seed, "feature-map")
    W = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, mdp.num_states + mdp.num_actions))
    table = np.tanh(one_hot_pairs(mdp.num_states, mdp.num_actions) @ W.T)
    W.setflags(write=False)
    table.setflags(write=False)
    return FeatureMap(W, table, mdp.num_states, mdp.num_actions)
