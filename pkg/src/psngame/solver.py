"""Open-loop Nash equilibria of trajectory games via Newton iterations on the stacked KKT system.

Every agent ``a`` solves ``min J^a`` subject to its own double-integrator
dynamics.  The first-order conditions of all N problems are stacked into one
square system over ``z = (y^1..y^N, lam^1..lam^N)`` where
``y^a = (x^a_1..x^a_T, u^a_0..u^a_{T-1})`` and ``lam^a`` are the costates of the
dynamics constraints ``x_{k+1} - A x_k - B dt u_k = 0``.

Soft masks weight the collision term between agents ``a`` and ``b`` in agent
``a``'s cost by ``rho_a * rho_b`` where ``rho_ego = 1`` and ``rho_j = m^{ej}``.
The ego's shared cost is therefore exactly ``sum_j m^{ej} c^{ej}`` and a binary
mask reproduces the reduced (masked) game on the retained agents.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import IO, Optional

import numpy as np

from .game import (
    DomainError,
    GameSpec,
    JointTrajectory,
    SelectionMask,
    dynamics_matrices,
    reference_path,
    rollout,
)


class SolverError(RuntimeError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


class SensitivityError(RuntimeError):
    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


@dataclass(frozen=True)
class SolverConfig:
    max_outer_iterations: int = 50
    kkt_tolerance: float = 1e-6
    backtrack_factor: float = 0.5
    max_backtracks: int = 30
    armijo: float = 1e-4
    regularization: float = 1e-6
    # "exact": true Newton; "projected": collision Hessian blocks clamped PSD;
    # "auto": exact, falling back to projected when the line search stalls.
    hessian: str = "auto"

    def __post_init__(self):
        if not self.kkt_tolerance > 0:
            raise DomainError("kkt_tolerance must be positive")
        if not 0 < self.backtrack_factor < 1:
            raise DomainError("backtrack_factor must lie in (0, 1)")
        if self.regularization < 0:
            raise DomainError("regularization must be >= 0")
        if self.hessian not in ("auto", "exact", "projected"):
            raise DomainError(f"unknown hessian mode {self.hessian!r}")


@dataclass(frozen=True)
class OlneSolution:
    trajectory: JointTrajectory
    converged: bool
    iterations: int
    final_kkt_residual: float
    wall_time: float


@dataclass(frozen=True)
class EquilibriumSensitivity:
    """``jacobian[r, c] = d flat_solution[r] / d parameter[c]``.

    Rows follow ``JointTrajectory.flatten`` (states then controls).
    """

    parameter: str
    jacobian: np.ndarray


class _Problem:
    """Index bookkeeping and derivative evaluation for one game."""

    def __init__(self, game: GameSpec, soft_mask: SelectionMask | None = None):
        self.game = game
        N, T = game.n_agents, game.horizon
        self.N, self.T = N, T
        self.A, self.Bd = dynamics_matrices(game.dt)
        if soft_mask is not None:
            if soft_mask.values.size != N - 1:
                raise DomainError("mask length must be N-1")
            rho = soft_mask.inclusion()
        else:
            rho = np.ones(N)
        self.mask = soft_mask
        self.rho = rho
        w = game.weights
        self.w = w
        S = w[:, 3:4] * np.outer(rho, rho)
        np.fill_diagonal(S, 0.0)
        self.S = S
        self.pref = reference_path(game.initial_states[:, :2], game.goals, T)  # (T+1, N, 2)

        ny, nl = 6 * T, 4 * T
        self.ny, self.nl = ny, nl
        self.n_primal = N * ny
        self.size = N * (ny + nl)
        a = np.arange(N)[None, :, None]
        k = np.arange(T)[:, None, None]
        self.ix = a * ny + k * 4 + np.arange(4)[None, None, :]  # x_{k+1}, (T, N, 4)
        self.iu = a * ny + 4 * T + k * 2 + np.arange(2)[None, None, :]  # u_k, (T, N, 2)
        self.C = self._constraint_matrix()

    def _constraint_matrix(self) -> np.ndarray:
        T = self.T
        C = np.zeros((4 * T, 6 * T))
        for k in range(T):
            r = slice(4 * k, 4 * k + 4)
            C[r, 4 * k : 4 * k + 4] = np.eye(4)
            if k > 0:
                C[r, 4 * (k - 1) : 4 * k] = -self.A
            C[r, 4 * T + 2 * k : 4 * T + 2 * k + 2] = -self.Bd
        return C

    # -- derivatives -------------------------------------------------------

    def _pairs(self, pos: np.ndarray):
        d = pos[:, :, None, :] - pos[:, None, :, :]  # (K, N, N, 2): p_a - p_b
        phi = np.exp(-np.sum(d * d, axis=-1))
        return d, phi

    def gradients(self, x: np.ndarray, u: np.ndarray):
        """Own-variable cost gradients ``dJ^a/dx^a_k`` (k=1..T) and ``dJ^a/du^a_k``."""
        w = self.w
        xs = x[1:]
        d, phi = self._pairs(xs[..., :2])
        gp = 2 * w[:, 0, None] * (xs[..., :2] - self.pref[1:])
        gp = gp - 2 * np.einsum("ab,kab,kabc->kac", self.S, phi, d)
        gv = 2 * w[:, 1, None] * xs[..., 2:]
        gx = np.concatenate([gp, gv], axis=-1)
        gu = 2 * w[:, 2, None] * u
        return gx, gu

    def reduced_gradient(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """``dJ^a/du^a`` with states eliminated; costates by backward recursion."""
        gx, gu = self.gradients(x, u)
        T, dt = self.T, self.game.dt
        g = np.empty_like(gu)
        q = np.zeros_like(gx[0])
        for k in range(T - 1, -1, -1):
            # q_{k+1} = dJ/dx_{k+1} + A^T q_{k+2}
            q_new = gx[k].copy()
            q_new[:, :2] += q[:, :2]
            q_new[:, 2:] += dt * q[:, :2] + q[:, 2:]
            q = q_new
            g[k] = gu[k] + dt * q[:, 2:]
        return g

    def pack_primal(self, gx: np.ndarray, gu: np.ndarray) -> np.ndarray:
        v = np.zeros(self.size)
        v[self.ix] = gx
        v[self.iu] = gu
        return v

    def kkt_matrix(self, x: np.ndarray, projected: bool = False, eps: float = 1e-6) -> np.ndarray:
        N, T = self.N, self.T
        ny, nl = self.ny, self.nl
        K = np.zeros((self.size, self.size))
        w = self.w
        diag_x = np.stack([2 * w[:, 0], 2 * w[:, 0], 2 * w[:, 1], 2 * w[:, 1]], axis=1)
        K[self.ix, self.ix] = np.broadcast_to(diag_x, (T, N, 4))
        K[self.iu, self.iu] = np.broadcast_to(2 * w[:, 2, None], (T, N, 2))

        d, phi = self._pairs(x[1:, :, :2])
        outer = 4 * d[..., :, None] * d[..., None, :] - 2 * np.eye(2)
        H = (self.S[None] * phi)[..., None, None] * outer  # (T, N, N, 2, 2)
        if projected:
            lam, V = np.linalg.eigh(H)
            lam = np.where(lam < eps, eps, lam)
            Hp = np.einsum("...ij,...j,...kj->...ik", V, lam, V)
            H = np.where((self.S[None] > 0)[..., None, None], Hp, 0.0)
        R = self.ix[..., :2]  # (T, N, 2)
        K[R[..., :, None], R[..., None, :]] += H.sum(axis=2)
        rows = np.broadcast_to(R[:, :, None, :, None], H.shape)
        cols = np.broadcast_to(R[:, None, :, None, :], H.shape)
        K[rows, cols] += -H

        Ct = self.C.T
        for a in range(N):
            p = slice(a * ny, (a + 1) * ny)
            lrange = slice(self.n_primal + a * nl, self.n_primal + (a + 1) * nl)
            K[p, lrange] = Ct
            K[lrange, p] = self.C
        return K

    def primal_of_flat(self) -> np.ndarray:
        """Index into the KKT vector for every entry of ``JointTrajectory.flatten`` (-1 for x_0)."""
        N, T = self.N, self.T
        idx_s = np.full((T + 1, N, 4), -1, dtype=int)
        idx_s[1:] = self.ix
        return np.concatenate([idx_s.ravel(), self.iu.ravel()])

    # -- parameter derivatives of the stacked conditions --------------------

    def dG_dmask(self, x: np.ndarray) -> np.ndarray:
        if self.mask is None:
            raise DomainError("mask sensitivity requires a soft mask")
        N = self.N
        others = self.mask.others
        d, phi = self._pairs(x[1:, :, :2])
        f = -2 * phi[..., None] * d  # (T, N, N, 2), gradient of phi_ab wrt p_a
        rho = self.rho
        w4 = self.w[:, 3]
        out = np.zeros((self.size, others.size))
        for c, o in enumerate(others):
            dS = np.zeros((N, N))
            dS[o, :] += w4[o] * rho
            dS[:, o] += w4 * rho
            np.fill_diagonal(dS, 0.0)
            col = np.einsum("ab,kabc->kac", dS, f)
            out[self.ix[..., :2], c] = col
        return out

    def dG_dgoal(self, agent: int) -> np.ndarray:
        T = self.T
        out = np.zeros((self.size, 2))
        s = np.arange(1, T + 1) / T
        w1 = self.w[agent, 0]
        for c in range(2):
            out[self.ix[:, agent, c], c] = -2 * w1 * s
        return out


def _rollout_u(game: GameSpec, u: np.ndarray) -> np.ndarray:
    return rollout(game.initial_states, u, game.dt)


def _newton_direction(prob: _Problem, x, u, g, projected: bool, eps: float, iteration: int):
    gx, gu = prob.gradients(x, u)
    rhs = -prob.pack_primal(gx, gu)
    K = prob.kkt_matrix(x, projected=projected, eps=eps)
    try:
        dz = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise SolverError("singular KKT matrix", iteration) from exc
    if not np.all(np.isfinite(dz)):
        raise SolverError("non-finite Newton step", iteration)
    return dz[prob.iu]


def _line_search(prob, game, u, du, merit, config):
    """Backtrack on the stationarity norm; returns ``(u, x, g, backtracks, merit, step)`` or None."""
    alpha = 1.0
    for nb in range(config.max_backtracks + 1):
        u_new = u + alpha * du
        x_new = _rollout_u(game, u_new)
        g_new = prob.reduced_gradient(x_new, u_new)
        m_new = float(np.linalg.norm(g_new))
        if m_new <= (1 - config.armijo * alpha) * merit:
            return u_new, x_new, g_new, nb, m_new, alpha * float(np.linalg.norm(du))
        alpha *= config.backtrack_factor
    return None


def solve_olne(
    game: GameSpec,
    soft_mask: SelectionMask | None = None,
    warm_start: JointTrajectory | None = None,
    config: SolverConfig | None = None,
    log: Optional[IO[str]] = None,
) -> OlneSolution:
    """Open-loop Nash equilibrium of ``game`` (optionally with a soft mask).

    ``log`` receives one CSV line per outer iteration:
    ``iteration,residual,step_norm,backtracks``.
    """
    config = config or SolverConfig()
    t0 = time.perf_counter()
    prob = _Problem(game, soft_mask)
    N, T = prob.N, prob.T
    if warm_start is not None:
        if warm_start.controls.shape != (T, N, 2):
            raise DomainError("warm start has the wrong shape")
        u = np.array(warm_start.controls, dtype=float)
    else:
        u = np.zeros((T, N, 2))
    if log is not None:
        log.write("iteration,residual,step_norm,backtracks\n")

    x = _rollout_u(game, u)
    g = prob.reduced_gradient(x, u)
    res = float(np.max(np.abs(g)))
    it = 0
    while res > config.kkt_tolerance and it < config.max_outer_iterations:
        it += 1
        merit = float(np.linalg.norm(g))
        modes = {"exact": [False], "projected": [True], "auto": [False, True]}[config.hessian]
        best = None
        for projected in modes:
            du = _newton_direction(prob, x, u, g, projected, config.regularization, it)
            trial = _line_search(prob, game, u, du, merit, config)
            if trial is None:
                continue
            # Prefer a full exact Newton step, then any projected step, then a
            # damped exact step: damped exact steps can stall near singular points.
            best = trial if best is None or projected else best
            if trial[3] == 0 or projected:
                break
        if log is not None:
            step, nb = (best[5], best[3]) if best is not None else (0.0, config.max_backtracks)
            log.write(f"{it},{res:.6e},{step:.6e},{nb}\n")
        if best is None:
            break
        u, x, g = best[0], best[1], best[2]
        res = float(np.max(np.abs(g)))

    traj = JointTrajectory(x, u)
    return OlneSolution(
        trajectory=traj,
        converged=res <= config.kkt_tolerance,
        iterations=it,
        final_kkt_residual=res,
        wall_time=time.perf_counter() - t0,
    )


def assemble_kkt(
    game: GameSpec,
    soft_mask: SelectionMask | None,
    linearization: JointTrajectory,
    projected: bool = False,
    eps: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked first-order system ``K dz = rhs`` quadraticized about ``linearization``.

    Unknowns are primal increments ``dy`` and the new costates ``lam``.
    """
    prob = _Problem(game, soft_mask)
    x, u = linearization.states, linearization.controls
    gx, gu = prob.gradients(x, u)
    rhs = -prob.pack_primal(gx, gu)
    for a in range(prob.N):
        ya = np.concatenate([x[1:, a].ravel(), u[:, a].ravel()])
        e = np.zeros(4 * prob.T)
        e[:4] = prob.A @ x[0, a]
        lr = slice(prob.n_primal + a * prob.nl, prob.n_primal + (a + 1) * prob.nl)
        rhs[lr] = -(prob.C @ ya - e)
    return prob.kkt_matrix(x, projected=projected, eps=eps), rhs


def kkt_layout(game: GameSpec) -> dict:
    """Index arrays of the KKT vector: ``x`` is ``(T, N, 4)`` for ``x_1..x_T``, ``u`` is ``(T, N, 2)``."""
    prob = _Problem(game)
    return {"x": prob.ix, "u": prob.iu, "n_primal": prob.n_primal, "size": prob.size}


def kkt_residual(
    game: GameSpec, soft_mask: SelectionMask | None, trajectory: JointTrajectory
) -> float:
    """Infinity norm of all agents' stationarity conditions with costates eliminated."""
    prob = _Problem(game, soft_mask)
    g = prob.reduced_gradient(trajectory.states, trajectory.controls)
    return float(np.max(np.abs(g)))


def stationarity(
    game: GameSpec, soft_mask: SelectionMask | None, trajectory: JointTrajectory
) -> np.ndarray:
    """Reduced gradients ``dJ^a/du^a``, shape ``(T, N, 2)``."""
    prob = _Problem(game, soft_mask)
    return prob.reduced_gradient(trajectory.states, trajectory.controls)


class _Sensitivity:
    def __init__(self, game, soft_mask, solution: OlneSolution):
        if not solution.converged:
            raise DomainError("sensitivity requires a converged solution")
        self.prob = _Problem(game, soft_mask)
        self.x = solution.trajectory.states
        self.K = self.prob.kkt_matrix(self.x)
        self.flat_idx = self.prob.primal_of_flat()

    def dG(self, parameter: str | tuple) -> np.ndarray:
        if parameter == "mask":
            return self.prob.dG_dmask(self.x)
        if isinstance(parameter, tuple) and parameter[0] == "goal":
            return self.prob.dG_dgoal(int(parameter[1]))
        raise DomainError(f"unknown parameter {parameter!r}")

    def _solve(self, K, rhs):
        try:
            out = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            raise SensitivityError("singular KKT Jacobian at solution", np.inf) from None
        if not np.all(np.isfinite(out)):
            raise SensitivityError("singular KKT Jacobian at solution", np.linalg.cond(K))
        return out

    def jacobian(self, parameter) -> np.ndarray:
        dz = -self._solve(self.K, self.dG(parameter))
        J = np.zeros((self.flat_idx.size, dz.shape[1]))
        ok = self.flat_idx >= 0
        J[ok] = dz[self.flat_idx[ok]]
        return J

    def vjp(self, v: np.ndarray, parameter) -> np.ndarray:
        w = np.zeros(self.prob.size)
        ok = self.flat_idx >= 0
        np.add.at(w, self.flat_idx[ok], np.asarray(v)[ok])
        mu = self._solve(self.K.T, w)
        return -mu @ self.dG(parameter)


def _parse_parameter(parameter):
    if isinstance(parameter, str) and parameter.startswith("goal:"):
        return ("goal", int(parameter.split(":", 1)[1]))
    return parameter


def equilibrium_sensitivity(
    game: GameSpec,
    soft_mask: SelectionMask | None,
    solution: OlneSolution,
    parameter,
) -> EquilibriumSensitivity:
    """Implicit-function-theorem Jacobian of the equilibrium.

    ``parameter`` is ``"mask"`` (all entries of the ego's soft mask) or
    ``("goal", agent)`` / ``"goal:<agent>"``.
    """
    p = _parse_parameter(parameter)
    sens = _Sensitivity(game, soft_mask, solution)
    name = p if isinstance(p, str) else f"goal:{p[1]}"
    return EquilibriumSensitivity(name, sens.jacobian(p))


def sensitivity_vjp(
    game: GameSpec,
    soft_mask: SelectionMask | None,
    solution: OlneSolution,
    parameter,
    v: np.ndarray,
) -> np.ndarray:
    """``v^T dz*/dtheta`` with one transposed linear solve; ``v`` is laid out like ``flatten``."""
    sens = _Sensitivity(game, soft_mask, solution)
    return sens.vjp(v, _parse_parameter(parameter))


def best_response(
    game: GameSpec,
    agent: int,
    trajectory: JointTrajectory,
    soft_mask: SelectionMask | None = None,
    config: SolverConfig | None = None,
) -> JointTrajectory:
    """Re-optimize one agent's controls with every other agent frozen."""
    config = config or SolverConfig()
    prob = _Problem(game, soft_mask)
    ny, nl = prob.ny, prob.nl
    sel = np.concatenate(
        [
            np.arange(agent * ny, (agent + 1) * ny),
            prob.n_primal + np.arange(agent * nl, (agent + 1) * nl),
        ]
    )
    iu_local = prob.iu[:, agent] - agent * ny
    u = np.array(trajectory.controls)
    x = _rollout_u(game, u)
    for it in range(config.max_outer_iterations):
        g = prob.reduced_gradient(x, u)[:, agent]
        if np.max(np.abs(g)) <= config.kkt_tolerance * 1e-2:
            break
        gx, gu = prob.gradients(x, u)
        rhs = -prob.pack_primal(gx, gu)[sel]
        K = prob.kkt_matrix(x)[np.ix_(sel, sel)]
        du = np.linalg.solve(K, rhs)[iu_local]
        merit = np.linalg.norm(g)
        alpha = 1.0
        for _ in range(config.max_backtracks):
            u_new = u.copy()
            u_new[:, agent] += alpha * du
            x_new = _rollout_u(game, u_new)
            if np.linalg.norm(prob.reduced_gradient(x_new, u_new)[:, agent]) <= (
                1 - config.armijo * alpha
            ) * merit:
                break
            alpha *= config.backtrack_factor
        u, x = u_new, x_new
    return JointTrajectory(x, u)
