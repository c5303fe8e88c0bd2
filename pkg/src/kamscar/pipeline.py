"""Experiment pipelines behind the command-line subcommands."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np
import scipy

from . import __version__
from .config import ExperimentConfig
from .diophantine import build_lattice, index_set_members, nonresonant_action_set
from .errors import BoundaryContamination, HypothesisViolation, InsufficientData, NearDegeneracy
from .flow import (
    FlowWorkspace,
    ab_table,
    epsilon_scaling_fit,
    isolated,
    n1_n2_report,
    spacing_audit,
    windowed_crossing_audit,
)
from .hamiltonian import ActionRect, FourierPolyHamiltonian, dumps, grid_points, hessian_det, transversality_det
from .normal_form import bilipschitz_constants, quasi_spectrum
from .quantize import build_operator, build_quasimode, build_truncation, cached_eigensolve, eigensolve_window
from .scarring import (
    ScarConfig,
    ScarReport,
    ScarRow,
    btilde_select,
    coverage_report,
    max_overlap_audit,
    r_ratio,
    scar_assert,
    window_counts,
)

log = logging.getLogger("kamscar")


def _fmt(x: float) -> str:
    return repr(float(x))


def _tag(h: float, t: float | None = None) -> str:
    s = f"h{1 / h:.6g}"
    return s if t is None else f"{s}_t{t:.6g}"


# ---------------------------------------------------------------------------
# outputs and manifest


@dataclass
class RunContext:
    cfg: ExperimentConfig
    out: Path
    files: Dict[str, str] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def write_text(self, rel: str, text: str) -> Path:
        return self.write_bytes(rel, text.encode())

    def write_bytes(self, rel: str, data: bytes) -> Path:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.files[rel] = hashlib.sha256(data).hexdigest()
        return path

    def path(self, rel: str) -> Path:
        """Destination for a file written by someone else; call :meth:`register` afterwards."""
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def register(self, rel: str) -> None:
        self.files[rel] = hashlib.sha256((self.out / rel).read_bytes()).hexdigest()

    def write_json(self, rel: str, doc) -> Path:
        return self.write_text(rel, json.dumps(doc, sort_keys=True, indent=1) + "\n")

    def write_csv(self, rel: str, header, rows) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return self.write_text(rel, buf.getvalue())

    def warn(self, msg: str) -> None:
        log.debug(msg)
        self.warnings.append(msg)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0

    def write_manifest(self, command: str) -> Path:
        """Manifest is written last; it lists every other file with its digest.

        Wall-clock timings go to ``timings.log`` so the JSON stays reproducible.
        """
        # not registered: its digest would differ between runs
        (self.out / "timings.log").write_text("".join(f"{k}\t{v:.3f}\n" for k, v in sorted(self.timings.items())))
        doc = {
            "command": command,
            "config_sha256": self.cfg.digest(),
            "versions": {"kamscar": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "files": dict(sorted(self.files.items())),
            "warnings": self.warnings,
        }
        path = self.out / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
        return path


def new_context(cfg: ExperimentConfig) -> RunContext:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(cfg, out)
    ctx.write_text("config.json", json.dumps(cfg.experiment_doc(), sort_keys=True, indent=1) + "\n")
    return ctx


# ---------------------------------------------------------------------------
# hypotheses


def check_hypotheses(H: FourierPolyHamiltonian, n_grid: int = 33) -> dict:
    """Grid check of det Hess H0 != 0 and det[grad H0; grad Qbar] != 0 over the domain."""
    I1, I2 = grid_points(H.domain, n_grid)
    if not I1.size:
        raise HypothesisViolation("audit grid has no points in the domain", None)
    hd = np.asarray(hessian_det(H, (I1, I2)), float) * np.ones_like(I1)
    td = np.asarray(transversality_det(H, (I1, I2)), float) * np.ones_like(I1)
    scale_h = max(1.0, float(np.max(np.abs(hd))))
    scale_t = max(1e-300, float(np.max(np.abs(td))))
    for name, vals, scale in (("Hessian determinant", hd, scale_h), ("transversality determinant", td, scale_t)):
        bad = np.abs(vals) <= 1e-12 * scale
        if not np.any(np.abs(vals) > 0):
            bad = np.ones_like(bad)
        if np.any(bad):
            k = int(np.flatnonzero(bad)[0])
            w = (float(I1[k]), float(I2[k]))
            raise HypothesisViolation(f"{name} vanishes at I = {w}", w)
    return {
        "n_points": int(I1.size),
        "hessian_det": {"min": float(hd.min()), "max": float(hd.max())},
        "transversality_det": {"min": float(td.min()), "max": float(td.max()),
                               "min_abs": float(np.min(np.abs(td)))},
        "passed": True,
    }


def _shrink_off_diagonal(D: ActionRect, gap: float) -> ActionRect:
    return ActionRect(D.lo, D.hi, tuple(D.constraints) + ((-1.0, 1.0, -gap),))


def cmd_check_hypotheses(cfg: ExperimentConfig) -> RunContext:
    ctx = new_context(cfg)
    H = cfg.hamiltonian()
    with ctx.stage("check_hypotheses"):
        report = check_hypotheses(H, int(cfg.doc["hypotheses"]["grid"]))
        b = cfg.doc["bilipschitz"]
        sub = _shrink_off_diagonal(H.domain, float(b["subdomain_gap"]))
        cert = bilipschitz_constants(H, sub, 0.0, n_samples=int(b["n_samples"]), seed=cfg.doc["seed"])
        report["bilipschitz"] = {"G1": cert.G1, "G2": cert.G2, "pair_G1": cert.pair_G1, "pair_G2": cert.pair_G2,
                                 "subdomain": sub.to_dict()}
        report["hamiltonian"] = json.loads(dumps(H))
    ctx.write_json("hypotheses.json", report)
    ctx.write_manifest("check-hypotheses")
    return ctx


# ---------------------------------------------------------------------------
# quasispectrum


def cmd_quasispectrum(cfg: ExperimentConfig) -> RunContext:
    ctx = new_context(cfg)
    H = cfg.hamiltonian()
    check_hypotheses(H, int(cfg.doc["hypotheses"]["grid"]))
    p = cfg.diophantine_params()
    L = float(cfg.doc["lattice"]["L"])
    gf = float(cfg.doc["lattice"]["grid_factor"])
    for h in cfg.h_list:
        lat = build_lattice(H.domain, h, cfg.theta_over_4)
        ctx.write_csv(f"quasispectrum/lattice_{_tag(h)}.csv", ["m1", "m2", "I1", "I2"],
                      [[int(a), int(b), _fmt(x), _fmt(y)] for (a, b), (x, y) in zip(lat.points, lat.actions)])
        for t in cfg.t_eval:
            with ctx.stage("nonresonant_set"):
                E = nonresonant_action_set(H, t, p, spacing=gf * h)
            with ctx.stage("quasispectrum"):
                keep = index_set_members(lat, E, L)
                q = quasi_spectrum(H, lat, t).subset(keep)
            tag = _tag(h, t)
            E.to_binary(ctx.path(f"quasispectrum/E_{tag}.bin"))
            ctx.register(f"quasispectrum/E_{tag}.bin")
            ctx.write_csv(f"quasispectrum/table_{tag}.csv", ["m1", "m2", "I1", "I2", "t", "h", "mu", "dmu_dt"],
                          [[int(a), int(b), _fmt(x), _fmt(y), _fmt(t), _fmt(h), _fmt(mu), _fmt(d)]
                           for (a, b), (x, y), mu, d in zip(q.m, q.I, q.mu, q.dmu_dt)])
            if len(q) == 0:
                ctx.warn(f"M_h(t) is empty at h={h:g}, t={t:g} (nonresonant area {E.measure():.3g})")
    ctx.write_manifest("quasispectrum")
    return ctx


# ---------------------------------------------------------------------------
# flow statistics


def cmd_flow_stats(cfg: ExperimentConfig) -> RunContext:
    ctx = new_context(cfg)
    H = cfg.hamiltonian()
    ws = FlowWorkspace(H, cfg.flow_config())
    fc = ws.cfg
    with ctx.stage("memberships"):
        for h in fc.h_list:
            ws.members(h)
    # crossings are solved exactly; this only reports whether the grid could have resolved them
    h_min = min(fc.h_list)
    dmu = ws.affine(h_min)[1]
    speed = float(dmu.max() - dmu.min()) if len(dmu) else 0.0
    needed = h_min**fc.gamma / (2 * speed) if speed > 0 else math.inf
    summary = {"C1": fc.C1, "C2": fc.C2, "gamma": fc.gamma, "t0": fc.t0, "n_t": fc.n_t,
               "t_spacing": fc.dt, "t_spacing_needed": _finite(needed), "t_spacing_resolves_h": fc.dt <= needed,
               "per_h": {}}
    viol_rows, reports = [], []
    for h in fc.h_list:
        tag = _tag(h)
        per = {}
        with ctx.stage("spacing_audit"):
            audits = [spacing_audit(ws, h, float(t), ws.members(h)[i]) for i, t in enumerate(fc.t_grid)]
        for a in audits:
            viol_rows += [[*v.m, *v.n, _fmt(v.t), _fmt(v.h), _fmt(v.gap), _fmt(v.threshold)] for v in a.violations]
        per["spacing"] = {"violations": sum(len(a.violations) for a in audits),
                          "pairs": sum(a.n_pairs for a in audits),
                          "min_gap_ratio": _finite(min(a.min_ratio for a in audits)),
                          "min_speed_ratio": _finite(min(a.min_speed_ratio for a in audits))}
        with ctx.stage("crossings"):
            tri = windowed_crossing_audit(ws, h, int(cfg.doc["flow"]["n_triples"]), seed=cfg.doc["seed"])
        ctx.write_csv(f"flow/crossings_{tag}.csv", ["m1", "m2", "n1", "n2", "t_star", "fraction", "c2_tilde"],
                      [[*w.m, *w.n, _fmt(w.t_star), _fmt(w.fraction), _fmt(w.c2_tilde)] for w in tri])
        per["crossings"] = {"n_triples": len(tri), "c2_tilde_max": max((w.c2_tilde for w in tri), default=None)}
        with ctx.stage("ab_sets"):
            ab = ab_table(ws, h)
        bound = 1 - fc.eps(h) ** 2
        ctx.write_csv(f"flow/ab_{tag}.csv", ["m1", "m2", "meas_A", "meas_B", "ratio", "ok"],
                      [[*r.m, _fmt(r.A.measure()), _fmt(r.B.measure()), _fmt(r.ratio),
                        int(not (r.A.measure() > 0) or r.ratio >= bound)] for r in ab])
        ctx.write_json(f"flow/intervals_{tag}.json",
                       [{"m": list(r.m), "A": r.A.to_json(), "B": r.B.to_json()} for r in ab])
        withA = [r for r in ab if r.A.measure() > 0]
        per["ab"] = {"bound": bound, "n_with_A": len(withA),
                     "fraction_ok": (sum(r.ratio >= bound for r in withA) / len(withA)) if withA else None}
        with ctx.stage("n1_n2"):
            rep = n1_n2_report(ws, h)
        reports.append(rep)
        ctx.write_csv(f"flow/report_{tag}.csv", ["t", "h", "N1", "N2", "good"],
                      [[_fmt(t), _fmt(h), int(a), int(b), int(g)] for t, a, b, g in zip(rep.t, rep.N1, rep.N2, rep.good)])
        per["n1_n2"] = {"eps": rep.eps, "good_fraction": rep.good_fraction, "bad_level_fraction": rep.bad_level_fraction}
        summary["per_h"][repr(h)] = per
    ctx.write_csv("flow/violations.csv", ["m1", "m2", "n1", "n2", "t", "h", "gap", "threshold"], viol_rows)
    try:
        fit = epsilon_scaling_fit([r.h for r in reports], [r.bad_level_fraction for r in reports], fc.gamma)
        summary["epsilon_fit"] = {"slope": fit.slope, "target": fit.target, "band": fit.band,
                                  "within_band": fit.within_band, "consistent": fit.consistent}
    except InsufficientData as exc:
        summary["epsilon_fit"] = {"error": "InsufficientData", "message": str(exc)}
    ctx.write_json("flow/summary.json", summary)
    ctx.write_manifest("flow-stats")
    return ctx


def _finite(x):
    return x if x is not None and math.isfinite(x) else None


# ---------------------------------------------------------------------------
# eigensolves


def _eigen_window(cfg: ExperimentConfig):
    band = cfg.scar_config().band
    margin = float(cfg.doc["quantize"]["window_margin"])
    return band[0] - margin, band[1] + margin


def solve_cell(cfg: ExperimentConfig, H, h: float, t: float):
    a, b = _eigen_window(cfg)
    q = cfg.doc["quantize"]
    trunc = build_truncation(H, h, E_cut=b, rho=float(q["rho"]), theta_over_4=cfg.theta_over_4)
    if q["use_cache"]:
        eigs = cached_eigensolve(H, h, t, trunc, a, b, tol=float(q["eig_tol"]))
    else:
        eigs = eigensolve_window(build_operator(H, h, t, trunc), a, b, float(q["eig_tol"]))
    return trunc, eigs


def cmd_eigensolve(cfg: ExperimentConfig) -> RunContext:
    ctx = new_context(cfg)
    H = cfg.hamiltonian()
    failed = []
    for h in cfg.h_list:
        for t in cfg.t_eval:
            tag = _tag(h, t)
            try:
                with ctx.stage("eigensolve"):
                    _, eigs = solve_cell(cfg, H, h, t)
            except BoundaryContamination as exc:
                ctx.warn(f"cell {tag}: {exc}")
                failed.append(tag)
                continue
            ctx.write_bytes(f"eigen/eig_{tag}.bin", eigs.to_bytes())
            ctx.write_csv(f"eigen/eigenvalues_{tag}.csv", ["j", "E", "residual", "shell_mass"],
                          [[j, _fmt(e), _fmt(r), _fmt(s)] for j, (e, r, s) in
                           enumerate(zip(eigs.values, eigs.residuals, eigs.shell_mass))])
    ctx.write_manifest("eigensolve")
    if failed:
        raise BoundaryContamination(f"truncation contamination in cells {failed}")
    return ctx


# ---------------------------------------------------------------------------
# scar reports


@dataclass
class ScarCell:
    report: ScarReport
    selected_actions: np.ndarray
    E_measure: float


def scar_cell(cfg: ExperimentConfig, H, h: float, t: float, E=None, R=None, scfg: ScarConfig | None = None) -> ScarCell:
    """Window counts, selection, overlap and torus-mass audits at one (h, t)."""
    scfg = scfg or cfg.scar_config()
    p = cfg.diophantine_params()
    L = scfg.L
    gamma = scfg.gamma
    if E is None:
        E = nonresonant_action_set(H, t, p, spacing=float(cfg.doc["lattice"]["grid_factor"]) * h)
    lat = build_lattice(H.domain, h, cfg.theta_over_4)
    members = index_set_members(lat, E, L)
    qs = quasi_spectrum(H, lat, t)
    in_B = isolated(qs.mu, members, h**gamma)
    if R is None:
        R = r_ratio(H, scfg.band, E, t, int(cfg.doc["monte_carlo"]["n"]), cfg.doc["seed"])
    trunc, eigs = solve_cell(cfg, H, h, t)
    A = build_operator(H, h, t, trunc).to_sparse()

    a, b = scfg.band
    cand = np.flatnonzero(members & (qs.mu >= a) & (qs.mu <= b))
    vecs: Dict[int, np.ndarray] = {}
    centers = np.array(qs.mu, float)
    excluded = np.zeros(len(lat), bool)
    for i in cand:
        try:
            v = build_quasimode(H, lat.points[i], t, h, trunc)
        except NearDegeneracy:
            excluded[i] = True
            continue
        vecs[i] = v.coeffs
        centers[i] = v.rayleigh(A)
    counts_all = window_counts(eigs, qs.mu, h, scfg, centers)
    counts = np.full(len(lat), -1)
    counts[cand] = counts_all[cand]
    elig = in_B & ~excluded
    sel = btilde_select(counts, R.R, scfg, elig)
    selected = set(int(i) for i in sel.members)

    rep = ScarReport(h=h, t=t, lam=scfg.lam, L=L, delta=scfg.delta_for(h), band=scfg.band, gamma=gamma,
                     R=R.R, R_stderr=R.stderr, overlap_threshold=scfg.overlap_threshold(R.R),
                     mass_threshold=scfg.mass_threshold(R.R), count_halfwidth=h**gamma / 3,
                     overlap_halfwidth=h**gamma, selection_proportion=sel.proportion, selection_bound=sel.bound)
    for i in cand:
        m = tuple(map(int, lat.points[i]))
        row = ScarRow(m, tuple(map(float, lat.actions[i])), float(qs.mu[i]), float(centers[i]), int(counts[i]),
                      bool(elig[i]), i in selected)
        if i in selected:
            au = max_overlap_audit(eigs, vecs[i], centers[i], h, scfg, R.R)
            row.max_overlap, row.argmax, row.projector_sum = au.max_overlap, au.argmax, au.projector_sum
            row.pass_overlap, row.pass_projector = au.passed, au.projector_ok
            if au.argmax >= 0:
                verdict = scar_assert(eigs.vector(au.argmax), trunc, lat.actions[i], h, scfg, R.R)
                row.torus_mass, row.pass_scar = verdict.mass, verdict.passed
            else:
                row.torus_mass, row.pass_scar = 0.0, False
        rep.rows.append(row)
    return ScarCell(rep, lat.actions[sorted(selected)] if selected else np.zeros((0, 2)), E.measure())


def cmd_scar_report(cfg: ExperimentConfig) -> RunContext:
    ctx = new_context(cfg)
    H = cfg.hamiltonian()
    scfg = cfg.scar_config()
    p = cfg.diophantine_params()
    spacing = float(cfg.doc["lattice"]["grid_factor"]) * min(cfg.h_list)
    failed = []
    coverage = {}
    for t in cfg.t_eval:
        with ctx.stage("nonresonant_set"):
            E = nonresonant_action_set(H, t, p, spacing=spacing)
        with ctx.stage("r_ratio"):
            R = r_ratio(H, scfg.band, E, t, int(cfg.doc["monte_carlo"]["n"]), cfg.doc["seed"])
        selected = {}
        for h in cfg.h_list:
            tag = _tag(h, t)
            try:
                with ctx.stage("scar_cell"):
                    cell = scar_cell(cfg, H, h, t, E=E, R=R, scfg=scfg)
            except BoundaryContamination as exc:
                ctx.warn(f"cell {tag}: {exc}")
                failed.append(tag)
                continue
            selected[h] = cell.selected_actions
            rep = cell.report
            ctx.write_text(f"scar/report_{tag}.json", rep.to_json())
            rep.to_csv(ctx.path(f"scar/summary_{tag}.csv"))
            ctx.register(f"scar/summary_{tag}.csv")
            audited = rep.audited()
            ctx.write_csv(f"plots/mass_vs_I_{tag}.csv", ["abs_I", "torus_mass"],
                          [[_fmt(math.hypot(*r.I)), _fmt(r.torus_mass)] for r in audited])
            ov = np.array([r.max_overlap for r in audited], float)
            hist, edges = np.histogram(ov, bins=20, range=(0.0, 1.0))
            ctx.write_csv(f"plots/overlap_hist_{tag}.csv", ["max_overlap", "count"],
                          [[_fmt(0.5 * (lo + hi)), int(c)] for lo, hi, c in zip(edges[:-1], edges[1:], hist)])
        if selected:
            cov = coverage_report(selected, E, scfg)
            coverage[repr(t)] = {"h": cov.h, "fraction": cov.fraction, "bound": cov.bound,
                                 "sharper_bound": cov.sharper_bound, "persistent_fraction": cov.persistent_fraction,
                                 "passed": cov.passed}
            ctx.write_csv(f"plots/coverage_t{t:.6g}.csv", ["h", "fraction"],
                          [[_fmt(h), _fmt(f)] for h, f in zip(cov.h, cov.fraction)])
    ctx.write_json("scar/coverage.json", coverage)
    ctx.write_json("plots/axes.json", {
        "mass_vs_I": {"x": "|I_m|", "y": "torus mass of the best-overlap eigenfunction", "kind": "scatter"},
        "overlap_hist": {"x": "max overlap |<u_j, v_m>|", "y": "number of tori", "kind": "bar"},
        "coverage": {"x": "h", "y": "covered fraction of E_kappa", "kind": "line", "xscale": "log"},
    })
    ctx.write_manifest("scar-report")
    if failed:
        raise BoundaryContamination(f"truncation contamination in cells {failed}")
    return ctx
