"""Model optimization: residual vector, approximate block Jacobian, damped
Gauss-Newton update and the outer optimization loop.

The residual stacks every local model-error indicator eta_K on top of the
regularization entries sqrt(alpha_K) (A_K - A0_K)_ij.  The Jacobian column of
parameter (K, i, j) holds the direct term int_K dU/dx_j dz*/dx_i (only in row
K), the primal-response term on the cells of the patch around K, and the
regularization diagonal; the response of the dual reconstruction is neglected
by design.  The exact directional derivative, including every response term,
is available in :func:`full_gateaux` for verification at test scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp

from .dwr import (
    _advection_fluctuation_percell,
    _advection_values,
    _theta_macro,
    error_identity,
    indicator_oscillation,
    local_enhancement,
)
from .errors import ConfigurationError, NumericalError
from .fem import (
    DiscreteField,
    apply_functional,
    assemble_diffusion,
    diffusion_form_percell,
    diffusion_form_stack,
    effective_operator,
    evaluate,
    fine_operator,
    gather,
    problem_rhs,
    q1_blocks,
    solve,
    solve_dual,
    value_sq_percell,
)
from .mesh import Grid

_IJ = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass
class OptimizerConfig:
    """Knobs of the Gauss-Newton loop.

    ``alpha=None`` auto-scales the regularization to
    ``alpha_scale * |theta|^2 / mean ||A0_K||_F^2`` at the first cycle.
    ``lambda_factor`` multiplies the mean absolute diagonal of the normal
    matrix.  ``stop_fraction`` is the target reduction of |theta| relative to
    its first-cycle value.
    """

    alpha: object = None
    alpha_scale: float = 1e-4
    lambda_factor: float = 1.0
    jacobian_mode: str = "patch"
    dual_mode: str = "enhanced"
    depth: int = 1
    max_cycles: int = 15
    stop_fraction: float = 0.05
    divergence_factor: float = 10.0
    h_fine: float = None

    def validate(self):
        if self.jacobian_mode not in ("patch", "diagonal"):
            raise ConfigurationError(f"unknown jacobian mode '{self.jacobian_mode}'")
        if self.dual_mode not in ("enhanced", "full", "effective"):
            raise ConfigurationError(f"unknown dual mode '{self.dual_mode}'")
        if not 0.0 < self.stop_fraction <= 1.0:
            raise ConfigurationError("stop_fraction must lie in (0, 1]")
        if self.lambda_factor < 0.0:
            raise ConfigurationError("lambda_factor must be nonnegative")
        if self.depth not in (0, 1):
            raise ConfigurationError("enhancement depth must be 0 or 1")


@dataclass
class ResidualVector:
    """Stacked residual {eta_K} + {sqrt(alpha_K) (A - A0)_Kij}; the flat
    layout is all eta entries (cell order) followed by the regularization
    entries, cell-major then row then column."""

    eta: np.ndarray
    g: np.ndarray

    @property
    def flat(self):
        return np.concatenate([self.eta, self.g])

    @property
    def squared_norm(self):
        return float(self.eta @ self.eta + self.g @ self.g)


def regularization_residual(model, model0, alpha):
    diff = (model.tensors - model0.tensors).reshape(-1, 4)
    return (np.sqrt(alpha)[:, None] * diff).ravel()


def assemble_residual(problem, model, model0, alpha, U, dual):
    """Residual vector from a consistent (model, U, dual) triple."""
    err = error_identity(problem, model, U, dual)
    return ResidualVector(eta=err.eta, g=regularization_residual(model, model0, alpha))


def response_rhs(problem, macro_space, U, k, i, j):
    """Load of the primal response equation for parameter (K, i, j):
    -int_K dU/dx_j dphi/dx_i, assembled only over macro cells inside K."""
    grid = macro_space.grid
    cells = grid.subgrid_cell_ids(problem.hierarchy.sampling_bbox(k))
    kblocks, _ = q1_blocks(*grid.spacing)
    u4 = gather(grid, U.values)[cells]
    loads = -np.einsum("pq,cq->cp", kblocks[i, j], u4)
    rhs = np.zeros(macro_space.n_dofs)
    np.add.at(rhs, grid.cell_nodes[cells].ravel(), loads.ravel())
    return rhs


def response_U(problem, operator, U, k, i, j):
    """Primal response D_Kij U, reusing the cached factorization of the
    effective operator."""
    return solve(operator, response_rhs(problem, operator.space, U, k, i, j))


def _subgrid(grid, bbox):
    nx = int(round((bbox[2] - bbox[0]) / grid.spacing[0]))
    ny = int(round((bbox[3] - bbox[1]) / grid.spacing[1]))
    return Grid((bbox[0], bbox[1]), grid.spacing, (nx, ny))


class _PatchContext:
    """Per-cell data shared by the indicator and its Jacobian row: the patch
    micro grid, the restricted dual z*, and fine-coefficient differences."""

    def __init__(self, problem, model, k, patch, grid, zstar):
        self.k = k
        self.patch = patch
        self.grid = grid
        self.zstar = zstar
        hierarchy = problem.hierarchy
        self.parents = hierarchy.sampling_grid.locate(grid.cell_centers, clip=True)
        self.d_tensors = model.tensors[self.parents] - problem.coefficient.tensors_at(
            grid.cell_centers
        )
        self.z4 = gather(grid, zstar)
        self.b_eps_vals, self.b_delta_vals = _advection_values(problem, model, grid)
        self.cell_slices = {
            q: grid.subgrid_cell_ids(hierarchy.sampling_bbox(q)) for q in patch.members
        }

    def _fluctuation(self, u4, ids):
        return float(
            np.sum(
                _advection_fluctuation_percell(
                    self.grid,
                    u4[ids],
                    self.z4[ids],
                    self.b_eps_vals[ids],
                    None if self.b_delta_vals is None else self.b_delta_vals[ids],
                )
            )
        )

    def indicator_and_stack(self, u4):
        """(eta_k, direct-term stack) over the center cell's region."""
        ids = self.cell_slices[self.k]
        stack = diffusion_form_stack(self.grid, u4[ids], self.z4[ids])
        eta = float(np.einsum("cab,cab->", self.d_tensors[ids], stack))
        if self.b_eps_vals is not None:
            eta -= self._fluctuation(u4, ids)
        return eta, stack.sum(axis=0)

    def response_term(self, u4r, q):
        """int_Q (A_delta - A_eps) grad R . grad z* [- (b_eps - b_delta) . grad R z*]."""
        ids = self.cell_slices[q]
        out = float(
            np.sum(diffusion_form_percell(self.grid, self.d_tensors[ids], u4r[ids], self.z4[ids]))
        )
        if self.b_eps_vals is not None:
            out -= self._fluctuation(u4r, ids)
        return out


def _patch_context(problem, model, k, config, z_eff=None, z_fine=None):
    hierarchy = problem.hierarchy
    jac_depth = 1 if config.jacobian_mode == "patch" else 0
    if config.dual_mode == "full":
        patch = hierarchy.patch_of(k, jac_depth)
        grid = _subgrid(z_fine.space.grid, patch.bbox)
        zstar = z_fine.values[z_fine.space.grid.subgrid_node_ids(patch.bbox)]
        return _PatchContext(problem, model, k, patch, grid, zstar)
    if config.dual_mode == "effective":
        patch = hierarchy.patch_of(k, jac_depth)
        grid = hierarchy.micro_grid(patch.bbox)
        zstar = evaluate(z_eff, grid.node_coords)
        return _PatchContext(problem, model, k, patch, grid, zstar)
    patch, patch_space, z_k = local_enhancement(problem, model, z_eff, k, config.depth)
    zi = evaluate(z_eff, patch_space.grid.node_coords)
    return _PatchContext(problem, model, k, patch, patch_space.grid, zi + z_k.values)


def jacobian_entry(problem, model, U, dual, resp, k, i, j, q, config=None):
    """Single entry D_Kij eta_Q of the approximate Jacobian.

    First (direct) term only when Q = K; primal-response term for Q in the
    patch around K; the response of the dual reconstruction is neglected.
    ``resp`` must be the response field for (K, i, j).  Entries outside the
    allowed patch are never defined and raise.
    """
    if config is None:
        config = OptimizerConfig(dual_mode=dual.mode, depth=dual.depth)
    z_eff = dual.z_global if dual.mode != "full" else None
    z_fine = dual.z_global if dual.mode == "full" else None
    ctx = _patch_context(problem, model, k, config, z_eff=z_eff, z_fine=z_fine)
    allowed = (
        ctx.cell_slices.keys()
        if config.jacobian_mode == "patch"
        else (k,)
    )
    if q not in allowed or q not in problem.hierarchy.patch_of(k, 1).members:
        raise ConfigurationError(
            f"cell {q} lies outside the allowed patch of cell {k}"
        )
    u4 = gather(ctx.grid, evaluate(U, ctx.grid.node_coords))
    u4r = gather(ctx.grid, evaluate(resp, ctx.grid.node_coords))
    value = ctx.response_term(u4r, q)
    if q == k:
        _, direct = ctx.indicator_and_stack(u4)
        value += direct[i, j]
    return value


def assemble_system(problem, model, U, operator, config, z_eff=None, z_fine=None,
                    want_jacobian=True):
    """One sweep of the assembly loop: local indicators eta_K and (optionally)
    the eta-block of the approximate Jacobian.

    Patch reconstructions are built per cell, consumed, and discarded.  The
    Jacobian is returned in COO triplet form restricted to the eta rows;
    the regularization rows are appended later once alpha is fixed.
    """
    hierarchy = problem.hierarchy
    n = hierarchy.n_sampling
    eta = np.zeros(n)
    rows, cols, vals = [], [], []
    macro_space = operator.space
    u_cache = {}

    def u_on(grid):
        key = (grid.origin, grid.shape)
        if key not in u_cache:
            u_cache[key] = gather(grid, evaluate(U, grid.node_coords))
        return u_cache[key]

    for k in range(n):
        ctx = _patch_context(problem, model, k, config, z_eff=z_eff, z_fine=z_fine)
        u4 = u_on(ctx.grid)
        eta_k, direct = ctx.indicator_and_stack(u4)
        eta[k] = eta_k
        if not want_jacobian:
            continue
        if config.jacobian_mode == "patch":
            q_range = [q for q in hierarchy.patch_of(k, 1).members if q in ctx.cell_slices]
        else:
            q_range = [k]
        for i, j in _IJ:
            col = 4 * k + 2 * i + j
            resp = response_U(problem, operator, U, k, i, j)
            u4r = gather(ctx.grid, evaluate(resp, ctx.grid.node_coords))
            for q in q_range:
                val = ctx.response_term(u4r, q)
                if q == k:
                    val += direct[i, j]
                rows.append(q)
                cols.append(col)
                vals.append(val)
    if not want_jacobian:
        return eta, None
    return eta, (rows, cols, vals)


def build_jacobian(n, triplets, alpha):
    """Sparse Jacobian (eta rows + regularization rows) x (4n parameters)."""
    rows, cols, vals = ([list(t) for t in triplets] if triplets else ([], [], []))
    sqrt_a = np.sqrt(alpha)
    for k in range(n):
        for idx in range(4):
            rows.append(n + 4 * k + idx)
            cols.append(4 * k + idx)
            vals.append(sqrt_a[k])
    return sp.coo_matrix((vals, (rows, cols)), shape=(5 * n, 4 * n)).tocsr()


def lm_step(jac, residual_flat, lambda_factor):
    """Damped normal-equation step: (J^T J + lambda I) delta = -J^T G with
    lambda = lambda_factor * mean |diag(J^T J)|.  Returns (delta, lambda, m)."""
    grad = jac.T @ residual_flat
    if not np.any(grad):
        return np.zeros(jac.shape[1]), 0.0, 0.0
    jtj = (jac.T @ jac).toarray()
    diag = np.abs(np.diag(jtj))
    m = float(diag.mean())
    lam = lambda_factor * m
    system = jtj + lam * np.eye(jac.shape[1])
    try:
        delta = np.linalg.solve(system, -grad)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"damped normal equations singular (lambda={lam}): {exc}") from exc
    return delta, lam, m


def apply_update(model, delta, cycle):
    """Symmetrized model update A <- A + 0.5 (dA + dA^T)."""
    dt = delta.reshape(-1, 2, 2)
    dt = 0.5 * (dt + dt.transpose(0, 2, 1))
    return model.with_tensors(model.tensors + dt, f"optimized(cycle {cycle})"), float(
        np.sqrt(np.sum(dt**2))
    )


def resolve_alpha(config, theta_abs, model0):
    """Per-cell regularization weights; auto mode scales with the estimator."""
    n = model0.hierarchy.n_sampling
    if config.alpha is None or (isinstance(config.alpha, str) and config.alpha == "auto"):
        mean_norm = float(np.mean(np.sum(model0.tensors**2, axis=(1, 2))))
        if mean_norm == 0.0 or theta_abs == 0.0:
            return np.zeros(n)
        return np.full(n, config.alpha_scale * theta_abs**2 / mean_norm)
    a = np.asarray(config.alpha, dtype=float)
    if a.ndim == 0:
        return np.full(n, float(a))
    if a.shape != (n,):
        raise ConfigurationError(f"alpha must be scalar or length {n}")
    return a.copy()


@dataclass
class GaussNewtonState:
    """Outcome of the optimization loop: final model, per-cycle metrics and
    the resolved regularization."""

    model: object
    initial_model: object
    alpha: np.ndarray = None
    history: list = dc_field(default_factory=list)
    initial_estimator: float = None
    stop_reason: str = "max_cycles"
    indefinite_history: list = dc_field(default_factory=list)

    @property
    def cycles(self):
        return len(self.history)

    def history_csv_text(self):
        cols = (
            "cycle",
            "l2_error",
            "j_of_U",
            "abs_error",
            "rel_error_pct",
            "theta_tilde",
            "I_eff",
            "I_loc",
            "lambda",
            "step_norm",
        )
        keys = (
            "cycle",
            "l2_error",
            "j_of_U",
            "abs_error",
            "rel_error_pct",
            "theta_tilde",
            "i_eff",
            "i_loc",
            "lam",
            "step_norm",
        )
        lines = [",".join(cols)]
        for row in self.history:
            parts = []
            for key in keys:
                v = row.get(key)
                if v is None:
                    parts.append("")
                elif key == "cycle":
                    parts.append(str(v))
                else:
                    parts.append(f"{v:.17g}")
            lines.append(",".join(parts))
        return "\n".join(lines) + "\n"

    def write_history(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write(self.history_csv_text())


def l2_error_against(u_ref, U):
    """L2 norm of u_ref - U, evaluated on the reference space."""
    grid = u_ref.space.grid
    diff = u_ref.values - evaluate(U, grid.node_coords)
    return float(np.sqrt(np.sum(value_sq_percell(grid, gather(grid, diff)))))


def run_optimization(problem, initial_model, config, oracle=None):
    """Gauss-Newton model-optimization loop.

    Per cycle: solve the effective primal and dual, sweep the sampling cells
    for indicators, patch reconstructions and Jacobian entries, then take one
    damped step.  Stops when |theta| falls below ``stop_fraction`` of its
    first-cycle value, diverges past ``divergence_factor`` times it, or the
    cycle budget is exhausted.  ``oracle`` is an optional (u_ref, j_ref) pair
    used only for reporting.
    """
    config.validate()
    hierarchy = problem.hierarchy
    macro_space = problem.macro_space()
    macro_rhs = problem_rhs(problem, macro_space)
    fine_space = None
    z_fine = None
    if config.dual_mode == "full":
        h = config.h_fine if config.h_fine is not None else hierarchy.h_micro
        fine_space = problem.fine_space(h)
        fine_op = fine_operator(problem, fine_space)
        z_fine = solve_dual(fine_op, problem.functional)

    model = initial_model
    state = GaussNewtonState(model=model, initial_model=initial_model)
    theta1 = None
    n_rows = max(config.max_cycles, 1)

    for cycle in range(1, n_rows + 1):
        operator = effective_operator(problem, model, macro_space)
        U = solve(operator, macro_rhs)
        z_eff = None
        if config.dual_mode != "full":
            z_eff = solve_dual(operator, problem.functional)
        want_jac = cycle < n_rows
        eta, triplets = assemble_system(
            problem, model, U, operator, config,
            z_eff=z_eff, z_fine=z_fine, want_jacobian=want_jac,
        )
        theta = float(np.sum(eta))
        if config.dual_mode == "full":
            theta_h = _theta_macro(problem, model, U, z_fine)
        else:
            theta_h = _theta_macro(problem, model, U, z_eff)

        j_u = apply_functional(problem.functional, U)
        row = {
            "cycle": cycle,
            "j_of_U": j_u,
            "theta_tilde": theta,
            "i_loc": indicator_oscillation(eta),
            "l2_error": None,
            "abs_error": None,
            "rel_error_pct": None,
            "i_eff": None,
            "lam": None,
            "step_norm": None,
        }
        if oracle is not None:
            u_ref, j_ref = oracle
            row["l2_error"] = l2_error_against(u_ref, U)
            abs_err = abs(j_ref - j_u)
            row["abs_error"] = abs_err
            row["rel_error_pct"] = 100.0 * abs_err / abs(j_ref) if j_ref != 0.0 else None
            row["i_eff"] = abs(theta_h + theta) / abs_err if abs_err > 0.0 else None
        state.history.append(row)
        state.model = model
        state.indefinite_history.append(int(np.sum(model.min_eigenvalues() < 0.0)))

        if cycle == 1:
            theta1 = abs(theta)
            state.initial_estimator = theta1
            state.alpha = resolve_alpha(config, theta1, initial_model)
        g_block = regularization_residual(model, initial_model, state.alpha)
        row["cost"] = float(eta @ eta + g_block @ g_block)
        if cycle == 1 and theta1 == 0.0:
            state.stop_reason = "initial estimator zero"
            break
        if abs(theta) <= config.stop_fraction * theta1:
            state.stop_reason = "converged"
            break
        if abs(theta) > config.divergence_factor * theta1:
            state.stop_reason = "diverged"
            break
        if not want_jac:
            state.stop_reason = "max_cycles"
            break

        jac = build_jacobian(hierarchy.n_sampling, triplets, state.alpha)
        residual = ResidualVector(eta=eta, g=g_block)
        delta, lam, _ = lm_step(jac, residual.flat, config.lambda_factor)
        model, step_norm = apply_update(model, delta, cycle)
        row["lam"] = lam
        row["step_norm"] = step_norm
    return state


# ---------------------------------------------------------------------------
# exact-derivative path (verification at test scale)


def _eta_independent(problem, model, k, grid, u_values, zstar_values):
    """Indicator eta_K recomputed with an independent quadrature pass:
    3x3 Gauss gradients for the diffusion part (exact for the same integral),
    explicit loops for the advection part with the assembly's 2x2 sampling."""
    pts3, wts3 = np.polynomial.legendre.leggauss(3)
    pts3 = 0.5 * (pts3 + 1.0)
    wts3 = 0.5 * wts3
    hx, hy = grid.spacing
    d_tensors = model.tensors[k] - problem.coefficient.tensors_at(grid.cell_centers)
    u4 = gather(grid, u_values)
    z4 = gather(grid, zstar_values)
    total = 0.0
    for qx, wx in zip(pts3, wts3):
        for qy, wy in zip(pts3, wts3):
            du = np.stack(
                [
                    (-(1 - qy) * u4[:, 0] + (1 - qy) * u4[:, 1] - qy * u4[:, 2] + qy * u4[:, 3]) / hx,
                    (-(1 - qx) * u4[:, 0] - qx * u4[:, 1] + (1 - qx) * u4[:, 2] + qx * u4[:, 3]) / hy,
                ],
                axis=1,
            )
            dz = np.stack(
                [
                    (-(1 - qy) * z4[:, 0] + (1 - qy) * z4[:, 1] - qy * z4[:, 2] + qy * z4[:, 3]) / hx,
                    (-(1 - qx) * z4[:, 0] - qx * z4[:, 1] + (1 - qx) * z4[:, 2] + qx * z4[:, 3]) / hy,
                ],
                axis=1,
            )
            flux = np.einsum("cab,cb->ca", d_tensors, du)
            total += wx * wy * hx * hy * float(np.einsum("ca,ca->", flux, dz))
    if problem.is_advective:
        b_eps_vals, b_delta_vals = _advection_values(problem, model, grid)
        total -= float(
            np.sum(_advection_fluctuation_percell(grid, u4, z4, b_eps_vals, b_delta_vals))
        )
    return total


def cost_value(problem, model, model0, alpha, config):
    """Cost functional |G|^2 recomputed from scratch with the independent
    indicator quadrature."""
    hierarchy = problem.hierarchy
    macro_space = problem.macro_space()
    operator = effective_operator(problem, model, macro_space)
    U = solve(operator, problem_rhs(problem, macro_space))
    if config.dual_mode == "full":
        h = config.h_fine if config.h_fine is not None else hierarchy.h_micro
        fine_space = problem.fine_space(h)
        z_fine = solve_dual(fine_operator(problem, fine_space), problem.functional)
        z_eff = None
    else:
        z_fine = None
        z_eff = solve_dual(operator, problem.functional)
    total = 0.0
    for k in range(hierarchy.n_sampling):
        ctx = _patch_context(problem, model, k, config, z_eff=z_eff, z_fine=z_fine)
        cell_grid = _subgrid(ctx.grid, hierarchy.sampling_bbox(k))
        node_ids = ctx.grid.subgrid_node_ids(hierarchy.sampling_bbox(k))
        u_vals = evaluate(U, cell_grid.node_coords)
        eta_k = _eta_independent(problem, model, k, cell_grid, u_vals, ctx.zstar[node_ids])
        total += eta_k**2
    diff = (model.tensors - model0.tensors).reshape(-1, 4)
    total += float(np.sum(alpha[:, None] * diff**2))
    return total


def full_gateaux(problem, model, model0, alpha, direction, config):
    """Cost and its exact directional derivative, including every response.

    Implements the full derivative of the reduced cost: the direct tensor
    term, the primal response w, and (for the enhanced dual) the responses of
    the macro dual and of each patch reconstruction.  Diffusion problems
    only; intended for verification on small instances.
    """
    if problem.is_advective:
        raise ConfigurationError("the exact-derivative path supports diffusion problems only")
    hierarchy = problem.hierarchy
    n = hierarchy.n_sampling
    direction = np.asarray(direction, dtype=float).reshape(n, 2, 2)
    macro_space = problem.macro_space()
    operator = effective_operator(problem, model, macro_space)
    U = solve(operator, problem_rhs(problem, macro_space))
    kblocks, _ = q1_blocks(*macro_space.grid.spacing)
    macro_parents = hierarchy.macro_parent
    u4m = gather(macro_space.grid, U.values)

    # primal response w: (A grad w, grad phi) = -(dir grad U, grad phi)
    dir_cells = direction[macro_parents]
    loads = -np.einsum("cab,abpq,cq->cp", dir_cells, kblocks, u4m)
    rhs_w = np.zeros(macro_space.n_dofs)
    np.add.at(rhs_w, macro_space.grid.cell_nodes.ravel(), loads.ravel())
    w = solve(operator, rhs_w)

    z_eff = None
    z_fine = None
    dz_eff = None
    if config.dual_mode == "full":
        h = config.h_fine if config.h_fine is not None else hierarchy.h_micro
        fine_space = problem.fine_space(h)
        z_fine = solve_dual(fine_operator(problem, fine_space), problem.functional)
    else:
        z_eff = solve_dual(operator, problem.functional)
        # dual response: (A grad phi, grad DZ) = -(dir grad phi, grad Z)
        z4m = gather(macro_space.grid, z_eff.values)
        loads = -np.einsum("cab,bapq,cq->cp", dir_cells, kblocks, z4m)
        rhs_dz = np.zeros(macro_space.n_dofs)
        np.add.at(rhs_dz, macro_space.grid.cell_nodes.ravel(), loads.ravel())
        dz_eff = DiscreteField(macro_space, operator.solve_constrained(rhs_dz, transpose=True))

    cost = 0.0
    deriv = 0.0
    for k in range(n):
        ctx = _patch_context(problem, model, k, config, z_eff=z_eff, z_fine=z_fine)
        u4 = gather(ctx.grid, evaluate(U, ctx.grid.node_coords))
        eta_k, stack = ctx.indicator_and_stack(u4)
        cost += eta_k**2
        t_direct = float(np.einsum("ab,ab->", direction[k], stack))
        w4 = gather(ctx.grid, evaluate(w, ctx.grid.node_coords))
        t_resp = ctx.response_term(w4, k)
        t_dual = 0.0
        if config.dual_mode == "enhanced":
            # patch-reconstruction response: (A_eps grad phi, grad DZ_K) =
            # -(A_eps grad phi, grad DZ) on the patch
            patch_space = problem.space(ctx.grid)
            patch_op = assemble_diffusion(patch_space, problem.coefficient)
            dzi = evaluate(dz_eff, ctx.grid.node_coords)
            rhs_k = -(patch_op.matrix.T @ dzi)
            dz_k = patch_op.solve_constrained(rhs_k, transpose=True)
            dz4 = gather(ctx.grid, dzi + dz_k)
            ids = ctx.cell_slices[k]
            t_dual = float(
                np.sum(
                    diffusion_form_percell(ctx.grid, ctx.d_tensors[ids], u4[ids], dz4[ids])
                )
            )
        elif config.dual_mode == "effective":
            dz4 = gather(ctx.grid, evaluate(dz_eff, ctx.grid.node_coords))
            ids = ctx.cell_slices[k]
            t_dual = float(
                np.sum(
                    diffusion_form_percell(ctx.grid, ctx.d_tensors[ids], u4[ids], dz4[ids])
                )
            )
        deriv += 2.0 * eta_k * (t_direct + t_resp + t_dual)
    diff = model.tensors - model0.tensors
    cost += float(np.sum(alpha[:, None, None] * diff**2))
    deriv += 2.0 * float(np.sum(alpha[:, None, None] * diff * direction))
    return cost, deriv
