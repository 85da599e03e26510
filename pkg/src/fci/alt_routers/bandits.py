"""Linear contextual bandits used for within-sequence token selection:
optimism-based (LinUCB and its anytime-confidence variant) and posterior
sampling. All three share ridge sufficient statistics (A, b) with A
initialized to lambda*I, which keeps it symmetric positive definite under
rank-one reward updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class BanditState:
    a_mat: np.ndarray     # (d, d) design matrix
    b_vec: np.ndarray     # (d,)
    t: int = 0            # completed updates
    lam: float = 1.0
    delta: float = 0.1    # confidence level for the anytime radius
    s_bound: float = 1.0  # assumed parameter norm bound
    sigma2: float = 1.0   # posterior-sampling noise variance

    def theta(self) -> np.ndarray:
        return np.linalg.solve(self.a_mat, self.b_vec)


def init_bandit_state(d: int, lam: float = 1.0, delta: float = 0.1,
                      s_bound: float = 1.0, sigma2: float = 1.0) -> BanditState:
    return BanditState(a_mat=lam * np.eye(d), b_vec=np.zeros(d), lam=lam,
                       delta=delta, s_bound=s_bound, sigma2=sigma2)


def _update(state: BanditState, x: np.ndarray, reward: float) -> None:
    state.a_mat += np.outer(x, x)
    state.b_vec += reward * x
    state.t += 1


def linucb_step(state: BanditState, contexts: np.ndarray, alpha: float,
                reward_callback) -> tuple[int, BanditState]:
    """Pick argmax of theta^T x + alpha * sqrt(x^T A^-1 x), then apply the
    observed reward. Ties resolve to the lowest arm index."""
    contexts = np.asarray(contexts, dtype=np.float64)
    a_inv = np.linalg.inv(state.a_mat)
    theta = a_inv @ state.b_vec
    widths = np.sqrt(np.einsum("ij,jk,ik->i", contexts, a_inv, contexts))
    scores = contexts @ theta + alpha * widths
    arm = int(np.argmax(scores))
    _update(state, contexts[arm], float(reward_callback(arm)))
    return arm, state


def thompson_step(state: BanditState, contexts: np.ndarray, rng: np.random.Generator,
                  reward_callback=None) -> tuple[int, BanditState]:
    """Sample theta from the Gaussian posterior N(A^-1 b, sigma^2 A^-1) and
    pick its argmax arm."""
    contexts = np.asarray(contexts, dtype=np.float64)
    a_inv = np.linalg.inv(state.a_mat)
    mean = a_inv @ state.b_vec
    cov = state.sigma2 * (a_inv + a_inv.T) / 2.0
    sample = rng.multivariate_normal(mean, cov, method="cholesky")
    arm = int(np.argmax(contexts @ sample))
    if reward_callback is not None:
        _update(state, contexts[arm], float(reward_callback(arm)))
    return arm, state


def oful_beta(state: BanditState) -> float:
    """Anytime confidence radius: sqrt(lam)*S + sqrt(2 ln(1/delta) +
    d ln(1 + t/(lam d)))."""
    d = state.a_mat.shape[0]
    grow = 2.0 * math.log(1.0 / state.delta) + d * math.log(1.0 + state.t / (state.lam * d))
    return math.sqrt(state.lam) * state.s_bound + math.sqrt(grow)


def oful_step(state: BanditState, contexts: np.ndarray,
              reward_callback=None) -> tuple[int, BanditState]:
    """LinUCB mechanics with the growing radius beta_t in place of alpha."""
    beta = oful_beta(state)
    if reward_callback is None:
        reward_callback = lambda arm: 0.0
    return linucb_step(state, contexts, beta, reward_callback)


def bandit_scores(state: BanditState, contexts: np.ndarray) -> np.ndarray:
    """Exploitation-only ranking scores theta^T x (used at evaluation)."""
    return np.asarray(contexts, dtype=np.float64) @ state.theta()


__all__ = ["BanditState", "init_bandit_state", "linucb_step", "thompson_step",
           "oful_step", "oful_beta", "bandit_scores"]
