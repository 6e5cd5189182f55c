"""Analytic dynamical-systems toolbox for the piecewise-linear RNN.

Within each orthant (region) the autonomous map

    F(z) = A z + W relu(z) + h = W_Omega z + h,   W_Omega = A + W D_Omega

is linear, so fixed points solve (I - W_Omega) z = h region by region, and
k-cycles are fixed points of the k-times iterated map, with stability read
off the eigenvalues of the (product) Jacobian.  The module also provides the
forward sensitivity recursion for d z_T / d {W, A, h} and long-horizon
Jacobian products, used to check the boundedness properties of the gradients
empirically.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .core import PlrnnParams, RegionConfig, Trajectory, region_config, region_indicator, relu

__all__ = [
    "CycleReport",
    "EigHistogram",
    "FixedPointReport",
    "TheoremCheckReport",
    "check_theorems",
    "enumerate_fixed_points",
    "eig_histogram",
    "find_cycles",
    "forward_sensitivities",
    "histogram_to_csv",
    "is_manifold_partition",
    "jacobian_product_norm",
    "nonreg_sigma_max",
    "thm2_rho_upper_bound",
]

#: admissibility treats |z_m| below this as exactly zero (d_m = 0)
TOL_ZERO = 1e-12

#: relative threshold on singular values below which I - W_Omega counts as singular
_SINGULAR_RTOL = 1e-10


# ---------------------------------------------------------------------------
# report types
# ---------------------------------------------------------------------------

@dataclass
class FixedPointReport:
    """One candidate fixed point: location, region, admissibility, spectrum.

    ``degenerate`` marks regions where I - W_Omega is singular (eigenvalue-1
    case); if the singular system is consistent, ``z_star`` holds the
    minimum-norm representative of the affine solution family, otherwise it
    is None.
    """

    z_star: np.ndarray | None
    region: RegionConfig
    admissible: bool
    eigvals: np.ndarray
    stable: bool
    max_abs_eig: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "z_star": None if self.z_star is None else self.z_star.tolist(),
            "d_vec": self.region.d_vec.astype(int).tolist(),
            "admissible": self.admissible,
            "eigvals_re": np.real(self.eigvals).tolist(),
            "eigvals_im": np.imag(self.eigvals).tolist(),
            "stable": self.stable,
            "max_abs_eig": self.max_abs_eig,
            "degenerate": self.degenerate,
        }


@dataclass
class CycleReport:
    """A periodic orbit of period k with its region sequence and spectrum."""

    k: int
    points: np.ndarray            # (k, M), canonical rotation
    regions: list                 # k RegionConfigs
    admissible: bool
    eigvals: np.ndarray           # of the product Jacobian around the cycle
    stable: bool
    max_abs_eig: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "points": self.points.tolist(),
            "d_vecs": [r.d_vec.astype(int).tolist() for r in self.regions],
            "admissible": self.admissible,
            "eigvals_re": np.real(self.eigvals).tolist(),
            "eigvals_im": np.imag(self.eigvals).tolist(),
            "stable": self.stable,
            "max_abs_eig": self.max_abs_eig,
            "degenerate": self.degenerate,
        }


@dataclass
class TheoremCheckReport:
    """Empirical record of gradient and Jacobian norms along one noiseless run."""

    jacobian_norms: np.ndarray          # ||d z_T / d z_0||_2 for T-t = 1..T_max
    grad_tensor_norms: dict             # {"W": ..., "A": ..., "h": ...} per step
    rho_low: float
    rho_up: float
    lambda_low: float | None            # cross-block |entries|, partitioned systems
    lambda_up: float | None
    converged_to: str                   # "fixed_point" | "cycle" | "none"
    cycle_k: int | None = None
    limit_points: np.ndarray | None = None
    limit_sigma_max: float | None = None
    diverged_at: int | None = None

    def to_dict(self) -> dict:
        return {
            "jacobian_norms": np.asarray(self.jacobian_norms).tolist(),
            "grad_tensor_norms": {k: np.asarray(v).tolist()
                                  for k, v in self.grad_tensor_norms.items()},
            "rho_low": self.rho_low,
            "rho_up": self.rho_up,
            "lambda_low": self.lambda_low,
            "lambda_up": self.lambda_up,
            "converged_to": self.converged_to,
            "cycle_k": self.cycle_k,
            "limit_sigma_max": self.limit_sigma_max,
            "diverged_at": self.diverged_at,
        }


# ---------------------------------------------------------------------------
# region-wise fixed points
# ---------------------------------------------------------------------------

def _admissible(z, d) -> bool:
    return bool(np.all((np.asarray(z) > TOL_ZERO) == (np.asarray(d) == 1.0)))


def _solve_region(w_om: np.ndarray, rhs: np.ndarray):
    """Solve (I - W_Omega) z = rhs; returns (z, degenerate, consistent)."""
    M = w_om.shape[0]
    mat = np.eye(M) - w_om
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv[-1] > _SINGULAR_RTOL * max(1.0, sv[0]):
        return np.linalg.solve(mat, rhs), False, True
    z, *_ = np.linalg.lstsq(mat, rhs, rcond=None)
    consistent = np.max(np.abs(mat @ z - rhs)) <= 1e-9 * max(1.0, np.max(np.abs(rhs)))
    return (z if consistent else None), True, consistent


def _region_iter(M: int, mode: str, n_regions, seed):
    if mode == "exhaustive":
        if M > 20:
            raise ValueError("exhaustive enumeration requires M <= 20")
        for bits in itertools.product((0.0, 1.0), repeat=M):
            yield np.array(bits)
    elif mode == "sampled":
        if n_regions is None:
            raise ValueError("sampled mode requires n_regions")
        rng = np.random.Generator(np.random.Philox(seed or 0))
        seen = set()
        for _ in range(10 * n_regions):
            if len(seen) >= min(n_regions, 2 ** M):
                break
            d = tuple(rng.integers(0, 2, size=M).tolist())
            if d not in seen:
                seen.add(d)
                yield np.array(d, dtype=float)
    else:
        raise ValueError("mode must be 'exhaustive' or 'sampled'")


def enumerate_fixed_points(params: PlrnnParams, mode: str = "exhaustive",
                           n_regions: int | None = None,
                           seed: int | None = None) -> list[FixedPointReport]:
    """Candidate fixed points of the autonomous map, region by region.

    Virtual (inadmissible) fixed points are included but flagged; singular
    regions are reported as degenerate rather than aborting.
    """
    reports = []
    for d in _region_iter(params.M, mode, n_regions, seed):
        reg = region_config(params, d_vec=d)
        z, degenerate, _consistent = _solve_region(reg.w_omega, params.h_bias)
        eig = np.linalg.eigvals(reg.w_omega)
        max_abs = float(np.max(np.abs(eig))) if eig.size else 0.0
        admissible = z is not None and not degenerate and _admissible(z, d)
        if degenerate and z is not None:
            admissible = _admissible(z, d)
        reports.append(FixedPointReport(
            z_star=z, region=reg, admissible=admissible, eigvals=eig,
            stable=bool(max_abs < 1.0), max_abs_eig=max_abs,
            degenerate=degenerate))
    return reports


# ---------------------------------------------------------------------------
# cycles
# ---------------------------------------------------------------------------

def _sequence_maps(params: PlrnnParams, d_seq):
    """Composite map F^k(z) = P z + S h for a region sequence (first applied first)."""
    M = params.M
    P = np.eye(M)
    S = np.zeros((M, M))
    w_oms = []
    for d in d_seq:
        w_om = np.diag(params.a_diag) + params.w_offdiag * np.asarray(d)[None, :]
        w_oms.append(w_om)
        P = w_om @ P
        S = w_om @ S + np.eye(M)
    return P, S, w_oms


def _min_rotation(seq: tuple) -> tuple:
    return min(tuple(seq[i:] + seq[:i]) for i in range(len(seq)))


def _seq_period(seq: tuple) -> int:
    k = len(seq)
    for p in range(1, k):
        if k % p == 0 and seq == seq[p:] + seq[:p]:
            return p
    return k


def _cycle_from_sequence(params: PlrnnParams, d_seq) -> CycleReport | None:
    """Solve for the cycle with the given region sequence; None if inconsistent."""
    k = len(d_seq)
    P, S, w_oms = _sequence_maps(params, d_seq)
    z0, degenerate, consistent = _solve_region(P, S @ params.h_bias)
    if z0 is None:
        return None
    pts = np.empty((k, params.M))
    pts[0] = z0
    for i in range(k - 1):
        pts[i + 1] = w_oms[i] @ pts[i] + params.h_bias
    # points must carry the assumed sign patterns and be pairwise distinct
    admissible = all(_admissible(pts[i], d_seq[i]) for i in range(k))
    scale = max(1.0, float(np.max(np.abs(pts))))
    for i in range(k):
        for j in range(i + 1, k):
            if np.max(np.abs(pts[i] - pts[j])) < 1e-9 * scale:
                return None  # true period divides k; found at the smaller k
    eig = np.linalg.eigvals(P)
    max_abs = float(np.max(np.abs(eig)))
    regions = [region_config(params, d_vec=np.asarray(d, dtype=float)) for d in d_seq]
    return CycleReport(k=k, points=pts, regions=regions, admissible=admissible,
                       eigvals=eig, stable=bool(max_abs < 1.0),
                       max_abs_eig=max_abs, degenerate=degenerate)


def _canonical_rotation(report: CycleReport) -> CycleReport:
    keys = [tuple(np.round(p, 9)) for p in report.points]
    start = keys.index(min(keys))
    if start == 0:
        return report
    order = list(range(start, report.k)) + list(range(start))
    return CycleReport(
        k=report.k, points=report.points[order], regions=[report.regions[i] for i in order],
        admissible=report.admissible, eigvals=report.eigvals, stable=report.stable,
        max_abs_eig=report.max_abs_eig, degenerate=report.degenerate)


def find_cycles(params: PlrnnParams, k_max: int, mode: str = "auto",
                n_samples: int = 100, seed: int = 0,
                include_virtual: bool = False) -> list[CycleReport]:
    """Periodic orbits with period 2..k_max.

    Region sequences are enumerated exhaustively while M*k <= 16; above that
    a seeded simulate-then-polish search is used (iterate the map, detect a
    recurrence, and solve the linear system of the visited region sequence).
    Rotations of one cycle are canonicalized to the lexicographically
    smallest starting point.  Degenerate (eigenvalue-1) candidates are
    returned flagged when the singular system remains consistent; by default
    only admissible cycles are returned.
    """
    if k_max < 2:
        raise ValueError("k_max must be >= 2")
    found: dict[tuple, CycleReport] = {}
    n_degenerate = 0

    def _consider(report: CycleReport | None):
        nonlocal n_degenerate
        if report is None:
            return
        if report.degenerate:
            n_degenerate += 1
        if not report.admissible and not include_virtual:
            return
        report = _canonical_rotation(report)
        key = (report.k,) + tuple(np.round(report.points[0], 9))
        if key not in found:
            found[key] = report

    for k in range(2, k_max + 1):
        if params.M * k <= 16 and mode != "sampled":
            for combo in itertools.product(range(2 ** params.M), repeat=k):
                if _min_rotation(combo) != combo or _seq_period(combo) < k:
                    continue
                d_seq = [np.array([(c >> m) & 1 for m in range(params.M)], dtype=float)
                         for c in combo]
                _consider(_cycle_from_sequence(params, d_seq))
        else:
            _simulation_search(params, k_max, n_samples, seed, _consider)
            break
    reports = list(found.values())
    reports.sort(key=lambda r: (r.k, tuple(np.round(r.points[0], 9))))
    return reports


def _simulation_search(params, k_max, n_samples, seed, consider):
    rng = np.random.Generator(np.random.Philox(seed))
    n_settle, n_check = 1000, 20 * k_max
    for _ in range(n_samples):
        z = rng.normal(0.0, 3.0, size=params.M)
        ok = True
        for _ in range(n_settle):
            z = params.a_diag * z + params.w_offdiag @ relu(z) + params.h_bias
            if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > 1e9:
                ok = False
                break
        if not ok:
            continue
        tail = np.empty((n_check, params.M))
        for i in range(n_check):
            tail[i] = z
            z = params.a_diag * z + params.w_offdiag @ relu(z) + params.h_bias
        scale = max(1.0, float(np.max(np.abs(tail))))
        for k in range(2, k_max + 1):
            if np.max(np.abs(tail[-1] - tail[-1 - k])) < 1e-6 * scale:
                d_seq = [region_indicator(tail[-1 - k + i]) for i in range(k)]
                consider(_cycle_from_sequence(params, d_seq))
                break


# ---------------------------------------------------------------------------
# gradient recursions and theorem checks
# ---------------------------------------------------------------------------

def _spectral_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a, 2))


def jacobian_product_norm(params: PlrnnParams, traj: Trajectory,
                          t: int, T: int) -> float:
    """2-norm of the ordered Jacobian product d z_T / d z_t along a trajectory.

    ``t`` and ``T`` are 0-based row indices into ``traj.latents`` with
    0 <= t < T < traj.T; the product multiplies W_Omega evaluated at rows
    t..T-1 (latest factor leftmost).
    """
    if not (0 <= t < T < traj.T):
        raise ValueError(f"need 0 <= t < T < {traj.T}, got t={t}, T={T}")
    prod = np.eye(params.M)
    for i in range(t, T):
        d = region_indicator(traj.latents[i])
        w_om = np.diag(params.a_diag) + params.w_offdiag * d[None, :]
        prod = w_om @ prod
    return _spectral_norm(prod)


def forward_sensitivities(params: PlrnnParams, z0, inputs=None, T: int = 1,
                          record_norms: bool = False):
    """Forward recursion for d z_T / d {W, A, h} with z0 held fixed.

    Applies T steps starting from the pre-step state z0 (inputs optional,
    aligned with steps).  Returns (latents, GW, GA, Gh) where GW has shape
    (M, M, M) with GW[i, m, k] = d z_{i,T} / d W_{m,k}, and GA, Gh are
    (M, M) with columns indexed by the parameter component.  With
    ``record_norms`` also returns a dict of per-step norm traces, the 3-D
    tensor flattened to (M, M^2) before taking the 2-norm.
    """
    M = params.M
    z = np.asarray(z0, dtype=np.float64)
    GW = np.zeros((M, M, M))
    GA = np.zeros((M, M))
    Gh = np.zeros((M, M))
    lat = np.empty((T, M))
    eye = np.eye(M)
    norms = {"W": np.empty(T), "A": np.empty(T), "h": np.empty(T)} if record_norms else None
    for t in range(T):
        d = region_indicator(z)
        phi = relu(z)
        w_om = np.diag(params.a_diag) + params.w_offdiag * d[None, :]
        # direct terms: dz_i/dw_mk += delta_im phi_k ; dz_i/da_mm += delta_im z_m ;
        # dz_i/dh_m += delta_im
        GW = np.einsum("ij,jmk->imk", w_om, GW)
        GW += np.einsum("im,k->imk", eye, phi)
        GA = w_om @ GA + np.diag(z)
        Gh = w_om @ Gh + eye
        z_new = params.a_diag * z + params.w_offdiag @ phi + params.h_bias
        if inputs is not None:
            z_new = z_new + params.c_input @ np.asarray(inputs[t], dtype=np.float64)
        z = z_new
        lat[t] = z
        if record_norms:
            norms["W"][t] = _spectral_norm(GW.reshape(M, M * M))
            norms["A"][t] = _spectral_norm(GA)
            norms["h"][t] = _spectral_norm(Gh)
    if record_norms:
        return lat, GW, GA, Gh, norms
    return lat, GW, GA, Gh


def _detect_convergence(lat: np.ndarray, tol: float = 1e-9,
                        max_k: int = 20) -> tuple[str, int | None]:
    """Fixed point: 10 consecutive steps with ||z_t - z_{t-1}||_inf < tol;
    k-cycle: 10k consecutive steps with ||z_t - z_{t-k}||_inf < tol, smallest k."""
    T = lat.shape[0]
    for k in range(1, max_k + 1):
        need = 10 * k
        if T <= k + need:
            break
        diffs = np.max(np.abs(lat[k:] - lat[:-k]), axis=1)
        if np.all(diffs[-need:] < tol):
            return ("fixed_point", None) if k == 1 else ("cycle", k)
    return "none", None


def check_theorems(params: PlrnnParams, z0, T_max: int = 2000) -> TheoremCheckReport:
    """Simulate one noiseless autonomous run and record all norm traces.

    Collects the forward-recursion gradient-tensor norms per step, the
    Jacobian product norms ||d z_T / d z0||_2 for every horizon, the
    empirical [rho_low, rho_up] range and, for partitioned systems
    (m_reg >= 1), the range of the memory-to-computational cross-derivative
    magnitudes.  Divergence is reported, not raised.
    """
    M = params.M
    z = np.asarray(z0, dtype=np.float64)
    lat = np.empty((T_max, M))
    jac_norms = np.empty(T_max)
    gw = np.zeros((M, M, M))
    ga = np.zeros((M, M))
    gh = np.zeros((M, M))
    gnorms = {"W": np.empty(T_max), "A": np.empty(T_max), "h": np.empty(T_max)}
    prod = np.eye(M)
    eye = np.eye(M)
    lam_lo, lam_up = np.inf, -np.inf
    partitioned = params.m_reg >= 1 and params.m_reg < M
    diverged_at = None
    steps = 0
    for t in range(T_max):
        d = region_indicator(z)
        phi = relu(z)
        w_om = np.diag(params.a_diag) + params.w_offdiag * d[None, :]
        gw = np.einsum("ij,jmk->imk", w_om, gw) + np.einsum("im,k->imk", eye, phi)
        ga = w_om @ ga + np.diag(z)
        gh = w_om @ gh + eye
        prod = w_om @ prod
        z = params.a_diag * z + params.w_offdiag @ phi + params.h_bias
        if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > 1e12:
            diverged_at = t
            break
        lat[t] = z
        jac_norms[t] = _spectral_norm(prod)
        gnorms["W"][t] = _spectral_norm(gw.reshape(M, M * M))
        gnorms["A"][t] = _spectral_norm(ga)
        gnorms["h"][t] = _spectral_norm(gh)
        if partitioned:
            cross = np.abs(prod[params.m_reg:, :params.m_reg])
            lam_lo = min(lam_lo, float(np.min(cross)))
            lam_up = max(lam_up, float(np.max(cross)))
        steps = t + 1

    lat = lat[:steps]
    jac_norms = jac_norms[:steps]
    gnorms = {k: v[:steps] for k, v in gnorms.items()}

    converged_to, cycle_k = ("none", None)
    limit_points = limit_sigma = None
    if diverged_at is None and steps > 0:
        converged_to, cycle_k = _detect_convergence(lat)
        if converged_to != "none":
            k = cycle_k or 1
            limit_points = lat[-k:].copy()
            sig = []
            for p in limit_points:
                w_om = np.diag(params.a_diag) + params.w_offdiag * region_indicator(p)[None, :]
                sig.append(_spectral_norm(w_om))
            limit_sigma = float(max(sig))

    return TheoremCheckReport(
        jacobian_norms=jac_norms,
        grad_tensor_norms=gnorms,
        rho_low=float(np.min(jac_norms)) if steps else np.nan,
        rho_up=float(np.max(jac_norms)) if steps else np.nan,
        lambda_low=(float(lam_lo) if partitioned and steps else None),
        lambda_up=(float(lam_up) if partitioned and steps else None),
        converged_to=converged_to, cycle_k=cycle_k,
        limit_points=limit_points, limit_sigma_max=limit_sigma,
        diverged_at=diverged_at)


def is_manifold_partition(params: PlrnnParams) -> bool:
    """True when the first m_reg rows sit exactly on the identity configuration."""
    r = params.m_reg
    if r < 1:
        return False
    return (np.all(params.a_diag[:r] == 1.0)
            and np.all(params.w_offdiag[:r, :] == 0.0)
            and np.all(params.h_bias[:r] == 0.0))


def nonreg_sigma_max(params: PlrnnParams, exhaustive_limit: int = 12) -> float:
    """max over regions of sigma_max(A_nreg + W_nreg D) for the free subsystem."""
    r = params.m_reg
    a = params.a_diag[r:]
    w = params.w_offdiag[r:, r:]
    m = a.shape[0]
    if m == 0:
        return 0.0
    if m > exhaustive_limit:
        raise ValueError(f"non-regularized block too large ({m} > {exhaustive_limit})")
    worst = 0.0
    for bits in itertools.product((0.0, 1.0), repeat=m):
        d = np.array(bits)
        worst = max(worst, _spectral_norm(np.diag(a) + w * d[None, :]))
    return worst


def thm2_rho_upper_bound(params: PlrnnParams, s_max: float | None = None) -> float:
    """Upper bound sqrt(1 + ||S||^2 M_nreg^2) on the long-horizon Jacobian norm.

    ``S`` is the coupling block from memory into computational units and
    M_nreg = 1/(1 - s) bounds the geometric sum of the free subsystem's
    per-step norms, with s the largest per-region sigma_max (computed
    exhaustively unless supplied).
    """
    if not is_manifold_partition(params):
        raise ValueError("params do not carry the exact regularized partition")
    s = nonreg_sigma_max(params) if s_max is None else float(s_max)
    if s >= 1.0:
        raise ValueError(f"free subsystem is not contracting (sigma_max={s:.3f})")
    coupling = params.w_offdiag[params.m_reg:, :params.m_reg]
    s_norm = _spectral_norm(coupling) if coupling.size else 0.0
    m_nreg = 1.0 / (1.0 - s)
    return float(np.sqrt(1.0 + (s_norm * m_nreg) ** 2))


# ---------------------------------------------------------------------------
# eigenvalue histogram
# ---------------------------------------------------------------------------

@dataclass
class EigHistogram:
    """Histogram over max |eigenvalue| plus per-system deviation-from-1 stats."""

    bin_edges: np.ndarray
    counts: np.ndarray
    deviations: np.ndarray        # per system: min over fixed points of |max|l|-1|
    n_degenerate: int
    n_systems_excluded: int

    def to_dict(self) -> dict:
        return {
            "bin_edges": self.bin_edges.tolist(),
            "counts": self.counts.tolist(),
            "deviations": self.deviations.tolist(),
            "n_degenerate": self.n_degenerate,
            "n_systems_excluded": self.n_systems_excluded,
        }


def eig_histogram(reports, bins: int = 20) -> EigHistogram:
    """Distribution of max absolute eigenvalues across admissible fixed points.

    ``reports`` is either a flat list of FixedPointReport (one system) or a
    list of such lists (one entry per system).  Degenerate regions are
    excluded from the histogram but counted.  The per-system deviation picks,
    for each system, the fixed point whose max |eigenvalue| lies closest
    to 1.
    """
    if not reports:
        raise ValueError("eig_histogram requires a nonempty report list")
    systems = reports if isinstance(reports[0], list) else [reports]
    values, deviations = [], []
    n_degenerate = n_excluded = 0
    for sys_reports in systems:
        usable = []
        for rep in sys_reports:
            if rep.degenerate:
                n_degenerate += 1
                continue
            if rep.admissible:
                usable.append(rep.max_abs_eig)
        if not usable:
            usable = [rep.max_abs_eig for rep in sys_reports if not rep.degenerate]
        if not usable:
            n_excluded += 1
            continue
        values.extend(usable)
        deviations.append(min(abs(v - 1.0) for v in usable))
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("no non-degenerate fixed points to histogram")
    counts, edges = np.histogram(values, bins=bins)
    return EigHistogram(bin_edges=edges, counts=counts,
                        deviations=np.asarray(deviations),
                        n_degenerate=n_degenerate,
                        n_systems_excluded=n_excluded)


def histogram_to_csv(hist: EigHistogram, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_left", "bin_right", "count"])
        for i, c in enumerate(hist.counts):
            writer.writerow([repr(hist.bin_edges[i]), repr(hist.bin_edges[i + 1]), int(c)])
