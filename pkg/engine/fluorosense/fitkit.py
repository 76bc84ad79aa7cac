"""
Ajustes no lineales por mínimos cuadrados (Levenberg-Marquardt) para las curvas
del simulador: Lorentziana / triplete hiperfino, roll-off de ancho de banda,
PSD telegráfica y ley de potencias
"""
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from fluorosense.errors import InvalidInputError, SingularJacobianError
from fluorosense.logger import log_warning
from fluorosense.models import BandwidthModel, FitResult, TelegraphModel

HYPERFINE_SPLITTING = 2.1e6

MAX_ITERATIONS = 500
COST_TOLERANCE = 1e-10
STEP_TOLERANCE = 1e-12
SINGULAR_TOLERANCE = 1e-12


def telegraph_psd(model: TelegraphModel, f) -> np.ndarray:
    """S(f) = A²/(2T[(1/T)² + (πf)²]); S(0) = A²T/2 y S(1/(πT)) = S(0)/2"""
    f = np.asarray(f, dtype=float)
    return model.A**2 / (2 * model.T * ((1 / model.T) ** 2 + (np.pi * f) ** 2))


def bandwidth_psd(model: BandwidthModel, f) -> np.ndarray:
    """S(f) = A/(1+(f/f_c)²)^b + c"""
    f = np.asarray(f, dtype=float)
    return model.A / (1 + (f / model.f_c) ** 2) ** model.b + model.c


# ============================================================================
# Modelos: función, jacobiano analítico e inicialización
# ============================================================================

def _lorentz_terms(x, f0, gamma, offsets):
    terms = []
    for offset in offsets:
        u = 2 * (x - f0 - offset) / gamma
        terms.append((u, 1 / (1 + u**2)))
    return terms


def _dip_function(offsets):
    weight = 1 / len(offsets)

    def function(x, p):
        dip = sum(weight * L for _, L in _lorentz_terms(x, p["f0"], p["gamma"], offsets))
        return p["baseline"] * (1 - p["contrast"] * dip)

    def jacobian(x, p):
        baseline, contrast, gamma = p["baseline"], p["contrast"], p["gamma"]
        dip = np.zeros_like(x)
        d_f0 = np.zeros_like(x)
        d_gamma = np.zeros_like(x)
        for u, L in _lorentz_terms(x, p["f0"], gamma, offsets):
            dip += weight * L
            # dL/du = −2u·L²
            dL_du = -2 * u * L**2
            d_f0 += weight * dL_du * (-2 / gamma)
            d_gamma += weight * dL_du * (-u / gamma)
        return {
            "f0": -baseline * contrast * d_f0,
            "gamma": -baseline * contrast * d_gamma,
            "contrast": -baseline * dip,
            "baseline": 1 - contrast * dip,
        }

    return function, jacobian


def _dip_init(offsets):
    def init(x, y):
        n_tail = max(len(x) // 10, 1)
        baseline = max(np.median(y[:n_tail]), np.median(y[-n_tail:]))
        k = int(np.argmin(y))
        depth = baseline - y[k]
        below = np.flatnonzero(y < baseline - depth / 2)
        step = np.min(np.diff(x))
        width = max(x[below[-1]] - x[below[0]], step) if below.size else (x[-1] - x[0]) / 4
        spread = max(offsets) - min(offsets)
        gamma = max(width - spread, width / 3)
        return {"f0": x[k], "gamma": gamma, "contrast": max(depth / baseline, 1e-6), "baseline": baseline}

    return init


def _bandwidth_function(x, p):
    return p["A"] * (1 + (x / p["f_c"]) ** 2) ** (-p["b"]) + p["c"]


def _bandwidth_jacobian(x, p):
    q = 1 + (x / p["f_c"]) ** 2
    core = q ** (-p["b"])
    return {
        "A": core,
        "f_c": p["A"] * core * p["b"] / q * 2 * x**2 / p["f_c"] ** 3,
        "b": -p["A"] * core * np.log(q),
        "c": np.ones_like(x),
    }


def _bandwidth_init(x, y):
    n_tail = max(len(x) // 5, 1)
    c = max(float(np.median(y[-n_tail:])), 0.0)
    A = max(y[0] - c, 1e-300)
    above = y - c
    idx = np.flatnonzero(above < A / 2)
    if idx.size == 0:
        f_c = x[-1]
    elif idx[0] == 0:
        f_c = x[0]
    else:
        i = idx[0]
        # interpolación log-lineal del cruce de media potencia
        f_c = float(np.exp(np.interp(A / 2, [above[i], above[i - 1]], [np.log(x[i]), np.log(x[i - 1])])))
    return {"A": A, "f_c": max(f_c, 1e-300), "b": 1.0, "c": c}


def _telegraph_function(x, p):
    return p["A"] ** 2 * p["T"] / (2 * (1 + (np.pi * x * p["T"]) ** 2))


def _telegraph_jacobian(x, p):
    A, T = p["A"], p["T"]
    q = 1 + (np.pi * x * T) ** 2
    return {
        "A": A * T / q,
        "T": A**2 / 2 * (1 / q - T * 2 * (np.pi * x) ** 2 * T / q**2),
    }


def _telegraph_init(x, y):
    dc = y[0]
    idx = np.flatnonzero(y < dc / 2)
    f_half = x[idx[0]] if idx.size else x[-1]
    T = 1 / (np.pi * max(f_half, 1e-300))
    return {"A": math.sqrt(max(2 * dc / T, 1e-300)), "T": T}


def _powerlaw_function(x, p):
    return np.log(p["A"]) + p["b"] * np.log(x)


def _powerlaw_jacobian(x, p):
    return {"A": np.full_like(x, 1 / p["A"]), "b": np.log(x)}


def _powerlaw_init(x, y):
    slope, intercept = np.polyfit(np.log(x), np.log(y), 1)
    return {"A": float(np.exp(intercept)), "b": float(slope)}


@dataclass(frozen=True)
class _Model:
    names: Tuple[str, ...]
    positive: Tuple[str, ...]
    function: Callable
    jacobian: Callable
    init: Callable
    relative_sigma: bool
    log_data: bool = False
    non_negative: Tuple[str, ...] = ()


_SINGLE = (0.0,)
_TRIPLET = (-HYPERFINE_SPLITTING, 0.0, HYPERFINE_SPLITTING)

MODELS: Dict[str, _Model] = {
    "lorentzian": _Model(
        ("f0", "gamma", "contrast", "baseline"), ("gamma", "contrast", "baseline"),
        *_dip_function(_SINGLE), _dip_init(_SINGLE), relative_sigma=False,
    ),
    "hyperfine_triplet": _Model(
        ("f0", "gamma", "contrast", "baseline"), ("gamma", "contrast", "baseline"),
        *_dip_function(_TRIPLET), _dip_init(_TRIPLET), relative_sigma=False,
    ),
    "bandwidth": _Model(
        ("A", "f_c", "b", "c"), ("A", "f_c", "b"),
        _bandwidth_function, _bandwidth_jacobian, _bandwidth_init, relative_sigma=True, non_negative=("c",),
    ),
    "telegraph": _Model(
        ("A", "T"), ("A", "T"),
        _telegraph_function, _telegraph_jacobian, _telegraph_init, relative_sigma=True,
    ),
    "powerlaw": _Model(
        ("A", "b"), ("A",),
        _powerlaw_function, _powerlaw_jacobian, _powerlaw_init, relative_sigma=False, log_data=True,
    ),
}


def _get_model(name: str) -> _Model:
    key = name.replace("-", "_")
    if key not in MODELS:
        raise InvalidInputError(f"unknown model '{name}' (expected one of {sorted(MODELS)})")
    return MODELS[key]


def model_function(name: str, x, params: Dict[str, float]) -> np.ndarray:
    """Evalúa el modelo en x (en escala lineal también para la ley de potencias)"""
    model = _get_model(name)
    x = np.asarray(x, dtype=float)
    values = model.function(x, params)
    return np.exp(values) if model.log_data else values


def model_jacobian(name: str, x, params: Dict[str, float]) -> Dict[str, np.ndarray]:
    """∂modelo/∂parámetro, en el espacio donde se ajusta (log y para la ley de potencias)"""
    return _get_model(name).jacobian(np.asarray(x, dtype=float), params)


# ============================================================================
# Levenberg-Marquardt
# ============================================================================

class _Problem:
    """Residuos ponderados en el espacio θ (log de los parámetros positivos); `fixed` queda fuera de θ"""

    def __init__(self, model: _Model, x, y, sigma, fixed: Optional[Dict[str, float]] = None):
        self.model, self.x, self.y, self.sigma = model, x, y, sigma
        self.fixed = dict(fixed or {})
        self.names = tuple(n for n in model.names if n not in self.fixed)
        self.log_mask = np.array([n in model.positive for n in self.names])

    def params(self, theta: np.ndarray) -> Dict[str, float]:
        values = np.where(self.log_mask, np.exp(np.where(self.log_mask, theta, 0.0)), theta)
        free = dict(zip(self.names, values.tolist()))
        return {n: free[n] if n in free else self.fixed[n] for n in self.model.names}

    def theta(self, params: Dict[str, float]) -> np.ndarray:
        values = np.array([params[n] for n in self.names], dtype=float)
        if np.any(values[self.log_mask] <= 0):
            bad = [n for n, v, m in zip(self.names, values, self.log_mask) if m and v <= 0]
            raise InvalidInputError(f"initial value must be positive for {bad}")
        return np.where(self.log_mask, np.log(np.abs(values)), values)

    def residual(self, theta: np.ndarray) -> np.ndarray:
        return (self.y - self.model.function(self.x, self.params(theta))) / self.sigma

    def jacobian(self, theta: np.ndarray) -> np.ndarray:
        p = self.params(theta)
        partial = self.model.jacobian(self.x, p)
        columns = []
        for name, is_log in zip(self.names, self.log_mask):
            column = partial[name] * (p[name] if is_log else 1.0)
            columns.append(-column / self.sigma)
        return np.column_stack(columns)


def _check_singular(J: np.ndarray, names: Sequence[str]):
    norms = np.linalg.norm(J, axis=0)
    top = norms.max()
    if top == 0 or not np.all(np.isfinite(J)):
        raise SingularJacobianError("jacobian is zero or non-finite", parameter=names[0])
    relative = norms / top
    weakest = int(np.argmin(relative))
    if relative[weakest] <= SINGULAR_TOLERANCE:
        raise SingularJacobianError(
            f"parameter '{names[weakest]}' does not affect the model on this data", parameter=names[weakest]
        )
    _, s, vt = linalg.svd(J / norms, full_matrices=False)
    if s[-1] / s[0] <= SINGULAR_TOLERANCE:
        culprit = names[int(np.argmax(np.abs(vt[-1])))]
        raise SingularJacobianError(f"parameter '{culprit}' is degenerate with the others", parameter=culprit)


def fit(
    model: str,
    x,
    y,
    sigma=None,
    init: Optional[Dict[str, float]] = None,
) -> FitResult:
    """
    Minimiza Σ((y − modelo(x))/σ)² con Levenberg-Marquardt

    Sin σ se usa σ ∝ y en los modelos de PSD (ruido multiplicativo de
    periodogramas promediados) y σ = 1 en el resto; en ambos casos las
    incertidumbres se escalan por el χ² reducido. La ley de potencias se
    ajusta sobre log y. Un parámetro no negativo (c del roll-off) que sale
    negativo se fija en 0, se reajusta el resto y queda listado en `clamped`.

    Raises:
        InvalidInputError: datos insuficientes o x no estrictamente creciente
        SingularJacobianError: un parámetro no está determinado por los datos
    """
    spec = _get_model(model)
    name = model.replace("-", "_")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n_params = len(spec.names)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidInputError("x and y must be 1-D arrays of equal length")
    if x.size < 2 * n_params:
        raise InvalidInputError(f"model '{name}' needs at least {2 * n_params} points, got {x.size}")
    if np.any(np.diff(x) <= 0):
        raise InvalidInputError("x must be strictly increasing")

    absolute_sigma = sigma is not None
    if spec.log_data:
        if np.any(y <= 0) or np.any(x <= 0):
            raise InvalidInputError("powerlaw fit needs positive x and y")
        sigma_used = np.ones_like(y) if sigma is None else np.asarray(sigma, dtype=float) / y
        y_fit = np.log(y)
    else:
        y_fit = y
        if sigma is not None:
            sigma_used = np.asarray(sigma, dtype=float)
        elif spec.relative_sigma:
            sigma_used = np.abs(y)
        else:
            sigma_used = np.ones_like(y)
    if np.any(sigma_used <= 0):
        raise InvalidInputError("sigma must be positive (for relative weighting, y must be non-zero)")

    problem = _Problem(spec, x, y_fit, sigma_used)
    start = dict(spec.init(x, y))
    start.update(init or {})
    theta, cost, J, history, converged, iterations = _levenberg_marquardt(problem, problem.theta(start))

    params = problem.params(theta)
    negative = [n for n in spec.non_negative if params[n] < 0]
    if negative:
        # Fuera de su rango físico: se fijan en 0 y se reajusta el resto
        log_warning(f"Fit '{name}': {negative} came out negative; refitting with them clamped to 0")
        problem = _Problem(spec, x, y_fit, sigma_used, fixed={n: 0.0 for n in negative})
        refit = _levenberg_marquardt(problem, problem.theta(params))
        theta, cost, J, converged = refit[0], refit[1], refit[2], refit[4]
        history = history + refit[3]
        iterations += refit[5]
        params = problem.params(theta)

    if not converged:
        log_warning(f"Fit '{name}' did not converge after {iterations} iterations; estimates are not authoritative")

    _check_singular(J, problem.names)
    dof = max(x.size - len(problem.names), 1)
    covariance = linalg.pinvh(J.T @ J)
    if not absolute_sigma:
        covariance = covariance * (2 * cost / dof)
    theta_sigma = np.sqrt(np.maximum(np.diag(covariance), 0.0))
    sigmas = {n: 0.0 for n in negative}
    sigmas.update({
        n: float(params[n] * s if is_log else s)
        for n, s, is_log in zip(problem.names, theta_sigma, problem.log_mask)
    })
    return FitResult(
        model=name,
        params=params,
        sigmas={n: sigmas[n] for n in spec.names},
        residual=math.sqrt(2 * cost),
        converged=converged,
        iterations=iterations,
        clamped=negative,
        residual_history=history,
    )


def _levenberg_marquardt(problem: _Problem, theta: np.ndarray):
    """(θ, costo, J, historial, convergió, iteraciones)"""
    r = problem.residual(theta)
    cost = 0.5 * float(r @ r)
    J = problem.jacobian(theta)
    _check_singular(J, problem.names)

    history: List[float] = [cost]
    lam = 1e-3
    converged = False
    iterations = 0
    while iterations < MAX_ITERATIONS:
        iterations += 1
        H = J.T @ J
        g = J.T @ r
        scale = np.maximum(np.diag(H), 1e-300)
        try:
            step = linalg.solve(H + lam * np.diag(scale), -g, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            lam *= 10
            continue
        step_small = bool(np.all(np.abs(step) < STEP_TOLERANCE * (1 + np.abs(theta))))
        trial = theta + step
        r_trial = problem.residual(trial)
        cost_trial = 0.5 * float(r_trial @ r_trial)
        if np.isfinite(cost_trial) and cost_trial <= cost:
            relative = (cost - cost_trial) / cost if cost > 0 else 0.0
            theta, r, cost = trial, r_trial, cost_trial
            history.append(cost)
            J = problem.jacobian(theta)
            lam = max(lam / 3, 1e-12)
            if relative < COST_TOLERANCE or step_small or cost == 0:
                converged = True
                break
        else:
            lam *= 4
            if step_small or lam > 1e16:
                converged = step_small
                break
    return theta, cost, J, history, converged, iterations
